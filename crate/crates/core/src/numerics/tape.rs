//! Tape-based reverse-mode automatic differentiation.
//!
//! Arrays live in an arena owned by the [`Tape`]; a [`Var`] is an index into
//! it. Every primitive appends one node holding its input indices, its
//! output index and whatever it needs for the backward rule. `backward`
//! walks the nodes strictly in reverse.

use super::array::DenseArray;
use super::kernels::{self, MASK_VALUE};
use crate::error::{Error, Result};

/// Handle to an array recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Exp,
    Sum,
    Mean,
    Reshape,
    SoftmaxRows,
    LayerNorm {
        stats: Vec<(f64, f64)>,
    },
    Gelu,
    Embedding {
        ids: Vec<usize>,
    },
    CausalMask,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    PickLogProbs {
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Gather {
        indices: Vec<usize>,
    },
    ClippedSurrogate {
        advantages: Vec<f64>,
        eps: f64,
    },
    CausalAttention {
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::MatMulNt => "matmul_nt",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape => "reshape",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::CausalMask => "causal_mask",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::CrossEntropy { .. } => "cross_entropy_next_token",
            Op::PickLogProbs { .. } => "pick_log_probs",
            Op::Gather { .. } => "gather",
            Op::ClippedSurrogate { .. } => "clipped_surrogate",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    inputs: Vec<usize>,
    output: usize,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    arrays: Vec<DenseArray>,
    needs_grad: Vec<bool>,
    nodes: Vec<Node>,
    visit_log: Option<Vec<usize>>,
}

/// Variance stabilizer used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records backward node visits, for checking traversal order.
    pub fn enable_visit_log(&mut self) {
        self.visit_log = Some(Vec::new());
    }

    pub fn visit_log(&self) -> Option<&[usize]> {
        self.visit_log.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Places an array on the tape. It receives a gradient during `backward`
    /// iff its `requires_grad` flag is set.
    pub fn leaf(&mut self, array: DenseArray) -> Var {
        let needs = array.requires_grad;
        self.push_array(array, needs)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let arr = DenseArray::new(shape, values)?;
        Ok(self.push_array(arr, false))
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.arrays[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.arrays[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.arrays[v.0].values
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.arrays[v.0].grad.as_deref()
    }

    pub fn take(&mut self, v: Var) -> DenseArray {
        std::mem::replace(&mut self.arrays[v.0], DenseArray::zeros(vec![0]))
    }

    fn push_array(&mut self, array: DenseArray, needs_grad: bool) -> Var {
        self.arrays.push(array);
        self.needs_grad.push(needs_grad);
        Var(self.arrays.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: &[Var], shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        let out = self.push_array(DenseArray::new(shape, values)?, needs);
        self.nodes.push(Node {
            inputs: inputs.iter().map(|v| v.0).collect(),
            output: out.0,
            op,
        });
        Ok(out)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let a = &self.arrays[v.0];
        a.expect_rank(op, 2)?;
        Ok((a.shape[0], a.shape[1]))
    }

    fn dim_error(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.arrays[a.0].shape.clone(),
            right: self.arrays[b.0].shape.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.dim_error("matmul", a, b));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(self.values(a), self.values(b), &mut out, n, k, m);
        self.record(Op::MatMul, &[a, b], vec![n, m], out)
    }

    /// `a · bᵀ`, used by the tied output projection.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul_nt", a)?;
        let (m, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.dim_error("matmul_nt", a, b));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_nt_acc(self.values(a), self.values(b), &mut out, n, k, m);
        self.record(Op::MatMulNt, &[a, b], vec![n, m], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("transpose", a)?;
        let out = kernels::transpose(self.values(a), n, m);
        self.record(Op::Transpose, &[a], vec![m, n], out)
    }

    /// Checks that `b`'s shape is a trailing suffix of `a`'s.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = &self.arrays[a.0].shape;
        let sb = &self.arrays[b.0].shape;
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(self.dim_error(op, a, b));
        }
        Ok(())
    }

    fn broadcast_binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.broadcast_check(op.name(), a, b)?;
        let av = self.values(a);
        let bv = self.values(b);
        let block = bv.len();
        let out = av
            .chunks(block.max(1))
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(op, &[a, b], shape, out)
    }

    /// `a + b`, with `b` broadcast over `a`'s leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.values(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        self.record(Op::Scale(factor), &[a], shape, out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.values(a).iter().map(|v| v.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.record(Op::Exp, &[a], shape, out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values(a).iter().sum();
        self.record(Op::Sum, &[a], Vec::new(), vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.values(a).len();
        if n == 0 {
            return Err(Error::DegenerateBatch);
        }
        let s: f64 = self.values(a).iter().sum();
        self.record(Op::Mean, &[a], Vec::new(), vec![s / n as f64])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values(a).len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.values(a).to_vec();
        self.record(Op::Reshape, &[a], shape, out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.dims2("softmax_rows", a)?;
        let mut out = self.values(a).to_vec();
        if cols > 0 {
            out.chunks_mut(cols).for_each(kernels::softmax_in_place);
        }
        let shape = self.shape(a).to_vec();
        self.record(Op::SoftmaxRows, &[a], shape, out)
    }

    /// Layer normalization over the last dimension with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] {
            return Err(self.dim_error("layer_norm", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.dim_error("layer_norm", x, beta));
        }
        let xv = self.values(x);
        let (g, b) = (self.values(gamma), self.values(beta));
        let mut out = vec![0.0; xv.len()];
        let stats = xv
            .chunks(d)
            .zip(out.chunks_mut(d))
            .map(|(row, o)| kernels::layer_norm_row(row, g, b, LAYER_NORM_EPS, o))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(Op::LayerNorm { stats }, &[x, gamma, beta], shape, out)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.values(a).to_vec();
        kernels::gelu_in_place(&mut out);
        let shape = self.shape(a).to_vec();
        self.record(Op::Gelu, &[a], shape, out)
    }

    /// Gathers rows of `table: [V×d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Vocab {
                    id: id as u32,
                    vocab: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ids = ids.iter().map(|&i| i as usize).collect();
        self.record(Op::Embedding { ids }, &[table], vec![out.len() / d.max(1), d], out)
    }

    /// Sets entries `(i, j)` with `j > i` to a large negative value.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("causal_mask", a)?;
        let mut out = self.values(a).to_vec();
        for i in 0..rows {
            for j in (i + 1)..cols {
                out[i * cols + j] = MASK_VALUE;
            }
        }
        self.record(Op::CausalMask, &[a], vec![rows, cols], out)
    }

    /// Concatenates rank-2 arrays along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Dimension {
            op: "concat",
            left: Vec::new(),
            right: Vec::new(),
        })?;
        let (rows0, cols0) = self.dims2("concat", first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat", p)?;
            let ok = match axis {
                0 => c == cols0,
                1 => r == rows0,
                _ => false,
            };
            if !ok {
                return Err(self.dim_error("concat", first, p));
            }
            total += if axis == 0 { r } else { c };
        }
        let out = if axis == 0 {
            parts.iter().flat_map(|&p| self.values(p).iter().copied()).collect()
        } else {
            let mut out = Vec::with_capacity(rows0 * total);
            for i in 0..rows0 {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.values(p)[i * c..(i + 1) * c]);
                }
            }
            out
        };
        let shape = if axis == 0 {
            vec![total, cols0]
        } else {
            vec![rows0, total]
        };
        self.record(Op::Concat { axis }, parts, shape, out)
    }

    /// Takes `len` rows (`axis = 0`) or columns (`axis = 1`) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice", a)?;
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent {
            return Err(Error::Dimension {
                op: "slice",
                left: vec![rows, cols],
                right: vec![axis, start, len],
            });
        }
        let av = self.values(a);
        let (out, shape) = if axis == 0 {
            (av[start * cols..(start + len) * cols].to_vec(), vec![len, cols])
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for i in 0..rows {
                out.extend_from_slice(&av[i * cols + start..i * cols + start + len]);
            }
            (out, vec![rows, len])
        };
        self.record(Op::Slice { axis, start }, &[a], shape, out)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [T×V]`; positions equal to `ignore_index` are skipped.
    pub fn cross_entropy_next_token(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore_index: u32,
    ) -> Result<Var> {
        let (t, v) = self.dims2("cross_entropy_next_token", logits)?;
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy_next_token",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        let lv = self.values(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        let mut count = 0;
        let mut kept = Vec::with_capacity(t);
        for (i, &target) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            if target == ignore_index {
                kept.push(None);
                continue;
            }
            let tgt = target as usize;
            if tgt >= v {
                return Err(Error::Vocab { id: target, vocab: v });
            }
            let lse = kernels::log_sum_exp(&lv[i * v..(i + 1) * v]);
            total += lse - lv[i * v + tgt];
            count += 1;
            kernels::softmax_in_place(row);
            kept.push(Some(tgt));
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let loss = total / count as f64;
        let op = Op::CrossEntropy {
            targets: kept,
            probs,
            count,
        };
        self.record(op, &[logits], Vec::new(), vec![loss])
    }

    /// `log softmax(logits[row])[token]` for each `(row, token)` pick.
    pub fn pick_log_probs(&mut self, logits: Var, picks: &[(usize, u32)]) -> Result<Var> {
        let (t, v) = self.dims2("pick_log_probs", logits)?;
        let lv = self.values(logits);
        let mut probs = vec![0.0; picks.len() * v];
        let mut out = Vec::with_capacity(picks.len());
        let mut stored = Vec::with_capacity(picks.len());
        for (k, &(row, token)) in picks.iter().enumerate() {
            let tok = token as usize;
            if row >= t || tok >= v {
                return Err(Error::Dimension {
                    op: "pick_log_probs",
                    left: vec![t, v],
                    right: vec![row, tok],
                });
            }
            let logits_row = &lv[row * v..(row + 1) * v];
            out.push(logits_row[tok] - kernels::log_sum_exp(logits_row));
            let p = &mut probs[k * v..(k + 1) * v];
            p.copy_from_slice(logits_row);
            kernels::softmax_in_place(p);
            stored.push((row, tok));
        }
        let n = out.len();
        let op = Op::PickLogProbs {
            picks: stored,
            probs,
        };
        self.record(op, &[logits], vec![n], out)
    }

    /// Picks flat elements of `a` by index into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.values(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.len()) {
            return Err(Error::Dimension {
                op: "gather",
                left: self.shape(a).to_vec(),
                right: vec![bad],
            });
        }
        let out = indices.iter().map(|&i| av[i]).collect();
        let op = Op::Gather {
            indices: indices.to_vec(),
        };
        self.record(op, &[a], vec![indices.len()], out)
    }

    /// Per-element `min(r·A, clip(r, 1-ε, 1+ε)·A)` with constant advantages.
    pub fn clipped_surrogate(&mut self, ratios: Var, advantages: &[f64], eps: f64) -> Result<Var> {
        let rv = self.values(ratios);
        if rv.len() != advantages.len() {
            return Err(Error::RolloutShape(format!(
                "{} ratios vs {} advantages",
                rv.len(),
                advantages.len()
            )));
        }
        let out = rv
            .iter()
            .zip(advantages)
            .map(|(&r, &a)| surrogate_term(r, a, eps))
            .collect();
        let op = Op::ClippedSurrogate {
            advantages: advantages.to_vec(),
            eps,
        };
        self.record(op, &[ratios], vec![advantages.len()], out)
    }

    /// Fused multi-head causal self-attention.
    ///
    /// `qkv: [n_seq·seq_len × 3d]` holds queries, keys and values side by
    /// side; returns `[n_seq·seq_len × d]` with heads concatenated.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        n_seq: usize,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let (rows, width) = self.dims2("causal_attention", qkv)?;
        if rows != n_seq * seq_len || width % 3 != 0 || (width / 3) % n_heads != 0 {
            return Err(Error::Dimension {
                op: "causal_attention",
                left: vec![rows, width],
                right: vec![n_seq, seq_len, n_heads],
            });
        }
        let d = width / 3;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.values(qkv);
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; n_seq * n_heads * seq_len * seq_len];
        let l = seq_len;
        let mut head = HeadBlocks::new(l, dh);
        let mut o = vec![0.0; l * dh];
        for s in 0..n_seq {
            for h in 0..n_heads {
                head.gather(qv, s * l, width, d, h * dh);
                o.iter_mut().for_each(|x| *x = 0.0);
                let pbase = (s * n_heads + h) * l * l;
                kernels::attention_head_forward(
                    &head.q,
                    &head.k,
                    &head.v,
                    l,
                    dh,
                    scale,
                    &mut probs[pbase..pbase + l * l],
                    &mut o,
                );
                for i in 0..l {
                    out[(s * l + i) * d + h * dh..(s * l + i) * d + (h + 1) * dh]
                        .copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
        }
        let op = Op::CausalAttention {
            n_seq,
            seq_len,
            n_heads,
            probs,
        };
        self.record(op, &[qkv], vec![rows, d], out)
    }

    /// Reverse pass from a scalar `loss`, seeding its gradient with 1.
    ///
    /// Gradients land in the `grad` slot of every leaf with `requires_grad`
    /// and accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values(loss).len() != 1 || !self.shape(loss).is_empty() {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.arrays.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            if let Some(log) = &mut self.visit_log {
                log.push(idx);
            }
            let node = &self.nodes[idx];
            let Some(g_out) = grads[node.output].take() else {
                continue;
            };
            if !self.needs_grad[node.output] {
                continue;
            }
            let input_grads = self.node_backward(node, &g_out);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                if !self.needs_grad[input] {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; intermediates are consumed above.
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let arr = &mut self.arrays[i];
                if arr.requires_grad {
                    arr.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = |k: usize| &self.arrays[node.inputs[k]];
        let wants = |k: usize| self.needs_grad[node.inputs[k]];
        let output = &self.arrays[node.output];
        match &node.op {
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let da = wants(0).then(|| {
                    let mut da = vec![0.0; n * k];
                    kernels::matmul_nt_acc(g, &b.values, &mut da, n, m, k);
                    da
                });
                let db = wants(1).then(|| {
                    let mut db = vec![0.0; k * m];
                    kernels::matmul_tn_acc(&a.values, g, &mut db, n, k, m);
                    db
                });
                vec![da, db]
            }
            Op::MatMulNt => {
                // out = a · bᵀ, a: [n×k], b: [m×k]
                let (a, b) = (input(0), input(1));
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[0]);
                let da = wants(0).then(|| {
                    let mut da = vec![0.0; n * k];
                    kernels::matmul_acc(g, &b.values, &mut da, n, m, k);
                    da
                });
                let db = wants(1).then(|| {
                    let mut db = vec![0.0; m * k];
                    kernels::matmul_tn_acc(g, &a.values, &mut db, n, m, k);
                    db
                });
                vec![da, db]
            }
            Op::Transpose => {
                let (n, m) = (input(0).shape[0], input(0).shape[1]);
                vec![Some(kernels::transpose(g, m, n))]
            }
            Op::Add | Op::Sub => {
                let block = input(1).values.len().max(1);
                let da = g.to_vec();
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                let db = wants(1).then(|| {
                    let mut db = vec![0.0; block];
                    for chunk in g.chunks(block) {
                        db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += sign * x);
                    }
                    db
                });
                vec![Some(da), db]
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let block = b.values.len().max(1);
                let da = wants(0).then(|| {
                    g.chunks(block)
                        .flat_map(|chunk| chunk.iter().zip(&b.values).map(|(x, y)| x * y))
                        .collect()
                });
                let db = wants(1).then(|| {
                    let mut db = vec![0.0; block];
                    for (gc, ac) in g.chunks(block).zip(a.values.chunks(block)) {
                        for ((d, &x), &y) in db.iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                    db
                });
                vec![da, db]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|x| x * f).collect())],
            Op::Exp => vec![Some(g.iter().zip(&output.values).map(|(x, y)| x * y).collect())],
            Op::Sum => vec![Some(vec![g[0]; input(0).values.len()])],
            Op::Mean => {
                let n = input(0).values.len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::SoftmaxRows => {
                let cols = output.shape[1].max(1);
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(output.values.chunks(cols))
                {
                    let inner = kernels::dot(gr, yr);
                    for ((d, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - inner);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { stats } => {
                let (x, gamma) = (input(0), input(1));
                let d = gamma.values.len();
                let mut dx = vec![0.0; x.values.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &x.values[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gamma.values[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = kernels::dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Gelu => {
                let mut dx = g.to_vec();
                kernels::gelu_backward_in_place(&mut dx, &input(0).values);
                vec![Some(dx)]
            }
            Op::Embedding { ids } => {
                let table = input(0);
                let d = table.shape[1];
                let mut dt = vec![0.0; table.values.len()];
                for (k, &id) in ids.iter().enumerate() {
                    let src = &g[k * d..(k + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(dt)]
            }
            Op::CausalMask => {
                let (rows, cols) = (output.shape[0], output.shape[1]);
                let mut dx = g.to_vec();
                for i in 0..rows {
                    for j in (i + 1)..cols {
                        dx[i * cols + j] = 0.0;
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat { axis } => {
                let mut result = Vec::with_capacity(node.inputs.len());
                if *axis == 0 {
                    let mut offset = 0;
                    for k in 0..node.inputs.len() {
                        let n = input(k).values.len();
                        result.push(Some(g[offset..offset + n].to_vec()));
                        offset += n;
                    }
                } else {
                    let rows = output.shape[0];
                    let total = output.shape[1];
                    let mut col = 0;
                    for k in 0..node.inputs.len() {
                        let c = input(k).shape[1];
                        let mut part = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            part.extend_from_slice(&g[i * total + col..i * total + col + c]);
                        }
                        result.push(Some(part));
                        col += c;
                    }
                }
                result
            }
            Op::Slice { axis, start } => {
                let a = input(0);
                let (rows, cols) = (a.shape[0], a.shape[1]);
                let mut da = vec![0.0; rows * cols];
                if *axis == 0 {
                    da[start * cols..start * cols + g.len()].copy_from_slice(g);
                } else {
                    let len = output.shape[1];
                    for i in 0..rows {
                        da[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                }
                vec![Some(da)]
            }
            Op::CrossEntropy {
                targets,
                probs,
                count,
            } => {
                let v = input(0).shape[1];
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut dl[i * v..(i + 1) * v];
                    row.iter_mut()
                        .zip(&probs[i * v..(i + 1) * v])
                        .for_each(|(d, p)| *d = scale * p);
                    row[t] -= scale;
                }
                vec![Some(dl)]
            }
            Op::PickLogProbs { picks, probs } => {
                let v = input(0).shape[1];
                let mut dl = vec![0.0; input(0).values.len()];
                for (k, &(row, tok)) in picks.iter().enumerate() {
                    let dst = &mut dl[row * v..(row + 1) * v];
                    for (d, p) in dst.iter_mut().zip(&probs[k * v..(k + 1) * v]) {
                        *d -= g[k] * p;
                    }
                    dst[tok] += g[k];
                }
                vec![Some(dl)]
            }
            Op::Gather { indices } => {
                let mut da = vec![0.0; input(0).values.len()];
                for (&i, &gv) in indices.iter().zip(g) {
                    da[i] += gv;
                }
                vec![Some(da)]
            }
            Op::ClippedSurrogate { advantages, eps } => {
                let r = &input(0).values;
                vec![Some(
                    r.iter()
                        .zip(advantages)
                        .zip(g)
                        .map(|((&r, &a), &gv)| gv * surrogate_slope(r, a, *eps))
                        .collect(),
                )]
            }
            Op::CausalAttention {
                n_seq,
                seq_len,
                n_heads,
                probs,
            } => {
                let qkv = input(0);
                let width = qkv.shape[1];
                let d = width / 3;
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = &qkv.values;
                let mut dqkv = vec![0.0; qv.len()];
                let l = *seq_len;
                let mut head = HeadBlocks::new(l, dh);
                let mut go = vec![0.0; l * dh];
                let (mut dq, mut dk, mut dv) = (vec![0.0; l * dh], vec![0.0; l * dh], vec![0.0; l * dh]);
                for s in 0..*n_seq {
                    for h in 0..*n_heads {
                        head.gather(qv, s * l, width, d, h * dh);
                        for i in 0..l {
                            go[i * dh..(i + 1) * dh]
                                .copy_from_slice(&g[(s * l + i) * d + h * dh..(s * l + i) * d + (h + 1) * dh]);
                        }
                        for buf in [&mut dq, &mut dk, &mut dv] {
                            buf.iter_mut().for_each(|x| *x = 0.0);
                        }
                        let pbase = (s * n_heads + h) * l * l;
                        kernels::attention_head_backward(
                            &head.q,
                            &head.k,
                            &head.v,
                            &probs[pbase..pbase + l * l],
                            &go,
                            l,
                            dh,
                            scale,
                            &mut dq,
                            &mut dk,
                            &mut dv,
                        );
                        for i in 0..l {
                            let row = (s * l + i) * width;
                            for (offset, src) in [(0, &dq), (d, &dk), (2 * d, &dv)] {
                                let dst = &mut dqkv[row + offset + h * dh..row + offset + (h + 1) * dh];
                                dst.iter_mut().zip(&src[i * dh..(i + 1) * dh]).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
                vec![Some(dqkv)]
            }
        }
    }
}

/// Contiguous per-head copies of query, key and value blocks.
struct HeadBlocks {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    dh: usize,
}

impl HeadBlocks {
    fn new(l: usize, dh: usize) -> Self {
        Self {
            q: vec![0.0; l * dh],
            k: vec![0.0; l * dh],
            v: vec![0.0; l * dh],
            dh,
        }
    }

    fn gather(&mut self, qkv: &[f64], first_row: usize, width: usize, d: usize, offset: usize) {
        let dh = self.dh;
        let l = self.q.len() / dh;
        for i in 0..l {
            let row = (first_row + i) * width + offset;
            self.q[i * dh..(i + 1) * dh].copy_from_slice(&qkv[row..row + dh]);
            self.k[i * dh..(i + 1) * dh].copy_from_slice(&qkv[row + d..row + d + dh]);
            self.v[i * dh..(i + 1) * dh].copy_from_slice(&qkv[row + 2 * d..row + 2 * d + dh]);
        }
    }
}

fn clip(r: f64, eps: f64) -> f64 {
    r.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(r·A, clip(r)·A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, eps) * advantage)
}

/// d/dr of [`surrogate_term`]: `A` when the unclipped branch is active, else 0.
fn surrogate_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    if ratio * advantage <= clip(ratio, eps) * advantage {
        advantage
    } else {
        0.0
    }
}

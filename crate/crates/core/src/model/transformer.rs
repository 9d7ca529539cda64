use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::numerics::{BoundParams, DenseArray, ParameterSet, Tape, Var};
use crate::seeds;
use crate::textdata::PAD;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.vocab_size == 0 || c.d_model == 0 || c.n_heads == 0 || c.n_layers == 0 || c.d_ff == 0 {
            return Err(Error::Config("model extents must all be at least 1".into()));
        }
        if c.context_length < 2 {
            return Err(Error::Config("context length must be at least 2".into()));
        }
        if c.d_model % c.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                c.d_model, c.n_heads
            )));
        }
        if !(c.init_std.is_finite() && c.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set(format!("{prefix}vocab_size"), self.vocab_size);
        doc.set(format!("{prefix}context_length"), self.context_length);
        doc.set(format!("{prefix}d_model"), self.d_model);
        doc.set(format!("{prefix}n_heads"), self.n_heads);
        doc.set(format!("{prefix}n_layers"), self.n_layers);
        doc.set(format!("{prefix}d_ff"), self.d_ff);
        doc.set_f64(format!("{prefix}init_std"), self.init_std);
        doc.set(format!("{prefix}seed"), self.seed);
    }

    pub fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let c = Self {
            vocab_size: doc.parse_value(&format!("{prefix}vocab_size"))?,
            context_length: doc.parse_value(&format!("{prefix}context_length"))?,
            d_model: doc.parse_value(&format!("{prefix}d_model"))?,
            n_heads: doc.parse_value(&format!("{prefix}n_heads"))?,
            n_layers: doc.parse_value(&format!("{prefix}n_layers"))?,
            d_ff: doc.parse_value(&format!("{prefix}d_ff"))?,
            init_std: doc.parse_value(&format!("{prefix}init_std"))?,
            seed: doc.parse_value(&format!("{prefix}seed"))?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Baby,
    Parent,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Baby => "baby",
            Role::Parent => "parent",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baby" => Ok(Role::Baby),
            "parent" => Ok(Role::Parent),
            other => Err(Error::Config(format!("unknown role {other:?} (expected baby or parent)"))),
        }
    }
}

/// Parameter indices inside the [`ParameterSet`], resolved once.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerLayout>,
    pub ln_f: (usize, usize),
    pub value_w: usize,
    pub value_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerLayout {
    pub ln1: (usize, usize),
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2: (usize, usize),
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

fn index(params: &ParameterSet, name: &str) -> Result<usize> {
    params
        .index_of(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

impl Layout {
    fn resolve(params: &ParameterSet, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                let p = |s: &str| index(params, &format!("layers.{l}.{s}"));
                Ok(LayerLayout {
                    ln1: (p("ln1.gamma")?, p("ln1.beta")?),
                    w_qkv: p("attn.w_qkv")?,
                    b_qkv: p("attn.b_qkv")?,
                    w_o: p("attn.w_o")?,
                    b_o: p("attn.b_o")?,
                    ln2: (p("ln2.gamma")?, p("ln2.beta")?),
                    w_fc: p("mlp.w_fc")?,
                    b_fc: p("mlp.b_fc")?,
                    w_proj: p("mlp.w_proj")?,
                    b_proj: p("mlp.b_proj")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok_emb: index(params, "tok_emb")?,
            pos_emb: index(params, "pos_emb")?,
            layers,
            ln_f: (index(params, "ln_f.gamma")?, index(params, "ln_f.beta")?),
            value_w: index(params, "value_head.w")?,
            value_b: index(params, "value_head.b")?,
        })
    }
}

/// Decoder-only transformer. The output projection reuses `tok_emb`, so
/// there is no separate head matrix; the value head reads the final hidden
/// state.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: TransformerConfig,
    pub params: ParameterSet,
    pub role: Role,
    pub(crate) layout: Layout,
}

/// Tape handles for one batched forward pass over `n_seq × seq_len` tokens.
pub struct ForwardOutput {
    /// `[n_seq·seq_len × V]`
    pub logits: Var,
    /// `[n_seq·seq_len]`
    pub values: Var,
    pub n_seq: usize,
    pub seq_len: usize,
}

impl LanguageModel {
    pub fn new(config: TransformerConfig, role: Role) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, f, v, t) = (c.d_model, c.d_ff, c.vocab_size, c.context_length);
        let mut rng = seeds::rng(c.seed, &[seeds::stream::INIT]);
        let mut params = ParameterSet::new();
        let std = c.init_std;
        params.insert("tok_emb", DenseArray::randn(vec![v, d], std, &mut rng))?;
        params.insert("pos_emb", DenseArray::randn(vec![t, d], std, &mut rng))?;
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            params.insert(p("ln1.gamma"), DenseArray::filled(vec![d], 1.0))?;
            params.insert(p("ln1.beta"), DenseArray::zeros(vec![d]))?;
            params.insert(p("attn.w_qkv"), DenseArray::randn(vec![d, 3 * d], std, &mut rng))?;
            params.insert(p("attn.b_qkv"), DenseArray::zeros(vec![3 * d]))?;
            params.insert(p("attn.w_o"), DenseArray::randn(vec![d, d], std, &mut rng))?;
            params.insert(p("attn.b_o"), DenseArray::zeros(vec![d]))?;
            params.insert(p("ln2.gamma"), DenseArray::filled(vec![d], 1.0))?;
            params.insert(p("ln2.beta"), DenseArray::zeros(vec![d]))?;
            params.insert(p("mlp.w_fc"), DenseArray::randn(vec![d, f], std, &mut rng))?;
            params.insert(p("mlp.b_fc"), DenseArray::zeros(vec![f]))?;
            params.insert(p("mlp.w_proj"), DenseArray::randn(vec![f, d], std, &mut rng))?;
            params.insert(p("mlp.b_proj"), DenseArray::zeros(vec![d]))?;
        }
        params.insert("ln_f.gamma", DenseArray::filled(vec![d], 1.0))?;
        params.insert("ln_f.beta", DenseArray::zeros(vec![d]))?;
        params.insert("value_head.w", DenseArray::zeros(vec![d, 1]))?;
        params.insert("value_head.b", DenseArray::zeros(vec![1]))?;
        Self::from_params(config, params, role)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: TransformerConfig, params: ParameterSet, role: Role) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, config.n_layers)?;
        let reference = Self::expected_shapes(&config);
        if params.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, shape) in reference {
            let got = params.get(&name).map(|a| a.shape().to_vec()).unwrap_or_default();
            if got != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {got:?}, expected {shape:?}")));
            }
        }
        Ok(Self {
            config,
            params,
            role,
            layout,
        })
    }

    fn expected_shapes(c: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (c.d_model, c.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![c.vocab_size, d]),
            ("pos_emb".to_string(), vec![c.context_length, d]),
        ];
        for l in 0..c.n_layers {
            for (s, shape) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.b_qkv", vec![3 * d]),
                ("attn.w_o", vec![d, d]),
                ("attn.b_o", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("mlp.w_fc", vec![d, f]),
                ("mlp.b_fc", vec![f]),
                ("mlp.w_proj", vec![f, d]),
                ("mlp.b_proj", vec![d]),
            ] {
                out.push((format!("layers.{l}.{s}"), shape));
            }
        }
        out.push(("ln_f.gamma".into(), vec![d]));
        out.push(("ln_f.beta".into(), vec![d]));
        out.push(("value_head.w".into(), vec![d, 1]));
        out.push(("value_head.b".into(), vec![1]));
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn context_length(&self) -> usize {
        self.config.context_length
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::DegenerateSequence(0));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::ContextLength {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass for equally long `seqs` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundParams, seqs: &[&[u32]]) -> Result<ForwardOutput> {
        let n_seq = seqs.len();
        let seq_len = seqs.first().map_or(0, |s| s.len());
        if n_seq == 0 || seqs.iter().any(|s| s.len() != seq_len) {
            return Err(Error::RolloutShape("forward needs a non-empty batch of equal-length rows".into()));
        }
        for s in seqs {
            self.check_tokens(s)?;
        }
        let c = &self.config;
        let ly = &self.layout;
        let p = |i: usize| bound.get(i);
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<u32> = (0..n_seq).flat_map(|_| 0..seq_len as u32).collect();
        let tok = tape.embedding(p(ly.tok_emb), &ids)?;
        let pos = tape.embedding(p(ly.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;
        for layer in &ly.layers {
            let h = tape.layer_norm(x, p(layer.ln1.0), p(layer.ln1.1))?;
            let qkv = tape.matmul(h, p(layer.w_qkv))?;
            let qkv = tape.add(qkv, p(layer.b_qkv))?;
            let att = tape.causal_attention(qkv, n_seq, seq_len, c.n_heads)?;
            let att = tape.matmul(att, p(layer.w_o))?;
            let att = tape.add(att, p(layer.b_o))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, p(layer.ln2.0), p(layer.ln2.1))?;
            let f = tape.matmul(h, p(layer.w_fc))?;
            let f = tape.add(f, p(layer.b_fc))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p(layer.w_proj))?;
            let f = tape.add(f, p(layer.b_proj))?;
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(x, p(ly.ln_f.0), p(ly.ln_f.1))?;
        let logits = tape.matmul_nt(h, p(ly.tok_emb))?;
        let values = tape.matmul(h, p(ly.value_w))?;
        let values = tape.add(values, p(ly.value_b))?;
        let values = tape.reshape(values, vec![n_seq * seq_len])?;
        Ok(ForwardOutput {
            logits,
            values,
            n_seq,
            seq_len,
        })
    }

    /// Pads ragged rows with PAD to a common length and runs the forward
    /// pass. Padding only ever follows real tokens, so the causal mask keeps
    /// it from touching real positions.
    pub fn forward_padded(&self, tape: &mut Tape, bound: &BoundParams, seqs: &[&[u32]]) -> Result<ForwardOutput> {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let padded: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut row = s.to_vec();
                row.resize(width, PAD);
                row
            })
            .collect();
        let refs: Vec<&[u32]> = padded.iter().map(Vec::as_slice).collect();
        self.forward_on_tape(tape, bound, &refs)
    }

    /// `[T' × V]` next-token logits.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, &[tokens])?;
        Ok(tape.take(out.logits))
    }

    /// `V(s_t)` for every prefix of `tokens`.
    pub fn value_estimates(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, &[tokens])?;
        Ok(tape.take(out.values).into_values())
    }

    /// Per-sequence next-token log-probabilities `log P(x_t | x_<t)`,
    /// `t = 1..len`, in one batched pass.
    pub fn log_probs_batch(&self, seqs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if let Some(s) = seqs.iter().find(|s| s.len() < 2) {
            return Err(Error::DegenerateSequence(s.len()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward_padded(&mut tape, &bound, seqs)?;
        let v = self.config.vocab_size;
        let width = out.seq_len;
        let logits = tape.values(out.logits);
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(s, seq)| {
                (1..seq.len())
                    .map(|t| {
                        let row = &logits[(s * width + t - 1) * v..(s * width + t) * v];
                        row[seq[t] as usize] - crate::numerics::kernels::log_sum_exp(row)
                    })
                    .collect()
            })
            .collect())
    }
}

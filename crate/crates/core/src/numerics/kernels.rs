//! Slice-level kernels shared by the tape ops and the cache-based decoder.
//!
//! Every reduction runs in a fixed index order so results do not depend on
//! how callers batch rows.

pub const MASK_VALUE: f64 = -1e30;

/// Operand layouts for [`gemm`].
#[derive(Clone, Copy)]
enum Layout {
    /// `c += a · b`, `a: [n×k]`, `b: [k×m]`.
    Nn,
    /// `c += aᵀ · b`, `a: [k×n]`, `b: [k×m]`.
    Tn,
    /// `c += a · bᵀ`, `a: [n×k]`, `b: [m×k]`.
    Nt,
}

/// `c += a · b` with `a: [n×k]`, `b: [k×m]`, `c: [n×m]`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(Layout::Nn, a, b, c, n, k, m);
}

/// `c += aᵀ · b` with `a: [n×k]`, `b: [n×m]`, `c: [k×m]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(Layout::Tn, a, b, c, k, n, m);
}

/// `c += a · bᵀ` with `a: [n×k]`, `b: [m×k]`, `c: [n×m]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(Layout::Nt, a, b, c, n, k, m);
}

/// `c[n×m] += op(a) · op(b)` with inner dimension `k`.
///
/// Each output element is `Σ_p a[i,p]·b[p,j]`, accumulated from zero with
/// fused multiply-adds in increasing `p` and then added to `c`. The order
/// does not depend on the layout, the tiling or the row's position in a
/// batch, so all of those give bit-identical results.
fn gemm(layout: Layout, a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), k * m);
    assert_eq!(c.len(), n * m);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the CPU supports the enabled features.
        unsafe { gemm_avx2(layout, a, b, c, n, k, m) };
        return;
    }
    gemm_body::<6, 8>(layout, a, b, c, n, k, m);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2(layout: Layout, a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_body::<6, 8>(layout, a, b, c, n, k, m);
}

/// Register-tiled kernel over `R×C` blocks of `c`. Both operands are
/// packed so the inner loop reads contiguous memory; partial blocks at the
/// edges are zero-padded and only their valid part is written back.
#[inline(always)]
fn gemm_body<const R: usize, const C: usize>(
    layout: Layout,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
) {
    let col_tiles = m.div_ceil(C);
    let mut pb = vec![0.0f64; col_tiles * k * C];
    for (t, panel) in pb.chunks_exact_mut(k * C).enumerate() {
        let j0 = t * C;
        let cols = C.min(m - j0);
        match layout {
            Layout::Nn | Layout::Tn => {
                for (dst, src) in panel.chunks_exact_mut(C).zip(b.chunks_exact(m)) {
                    dst[..cols].copy_from_slice(&src[j0..j0 + cols]);
                }
            }
            Layout::Nt => {
                for (cc, src) in b.chunks_exact(k).skip(j0).take(cols).enumerate() {
                    for (dst, &v) in panel[cc..].iter_mut().step_by(C).zip(src) {
                        *dst = v;
                    }
                }
            }
        }
    }
    let mut pa = vec![0.0f64; k * R];
    for i0 in (0..n).step_by(R) {
        let rows = R.min(n - i0);
        if rows < R {
            pa.iter_mut().for_each(|v| *v = 0.0);
        }
        match layout {
            Layout::Nn | Layout::Nt => {
                for (r, src) in a.chunks_exact(k).skip(i0).take(rows).enumerate() {
                    for (dst, &v) in pa[r..].iter_mut().step_by(R).zip(src) {
                        *dst = v;
                    }
                }
            }
            Layout::Tn => {
                for (dst, src) in pa.chunks_exact_mut(R).zip(a.chunks_exact(n)) {
                    dst[..rows].copy_from_slice(&src[i0..i0 + rows]);
                }
            }
        }
        for (t, panel) in pb.chunks_exact(k * C).enumerate() {
            let acc = micro_tile::<R, C>(&pa, panel);
            let j0 = t * C;
            let cols = C.min(m - j0);
            for (r, acc_row) in acc.iter().enumerate().take(rows) {
                let c_row = &mut c[(i0 + r) * m + j0..(i0 + r) * m + j0 + cols];
                for (cv, &x) in c_row.iter_mut().zip(acc_row) {
                    *cv += x;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_tile<const R: usize, const C: usize>(pa: &[f64], panel: &[f64]) -> [[f64; C]; R] {
    let mut acc = [[0.0f64; C]; R];
    for (a_col, b_row) in pa.chunks_exact(R).zip(panel.chunks_exact(C)) {
        let a_col: &[f64; R] = a_col.try_into().unwrap();
        let b_row: &[f64; C] = b_row.try_into().unwrap();
        for (acc_row, &av) in acc.iter_mut().zip(a_col) {
            for (x, &bv) in acc_row.iter_mut().zip(b_row) {
                *x = av.mul_add(bv, *x);
            }
        }
    }
    acc
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (i, row) in a.chunks_exact(cols.max(1)).enumerate().take(rows) {
        for (dst, &v) in out[i..].iter_mut().step_by(rows.max(1)).zip(row) {
            *dst = v;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|v| *v -= max);
    exp_in_place(row);
    let total: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(row)`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| exp(v - max)).sum();
    max + total.ln()
}

/// Normalizes `x` into `out` and returns `(mean, 1/std)`.
pub fn layer_norm_row(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for (((o, &xv), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (xv - mean) * rstd * g + b;
    }
    (mean, rstd)
}

/// Runs `body` with AVX2 code generation when the CPU has it. The body is
/// plain scalar arithmetic without fused operations, so both paths round
/// identically.
macro_rules! wide_when_available {
    ($(#[$meta:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),*) $body:block) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide($($arg: $ty),*) $body
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports the enabled feature.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body
        }
    };
}

/// `e^x` within about one ulp, branch-free so slice loops vectorize.
/// Underflows to exactly 0 below -708 and overflows to infinity above 709.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    const SHIFTER: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const INV_FACT: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
    ];
    let xc = x.clamp(-708.0, 709.0);
    let t = xc * std::f64::consts::LOG2_E + SHIFTER;
    let n = t - SHIFTER;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let mut p = INV_FACT[13];
    for &c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    let y = (p * scale).to_bits();
    let keep = 0u64.wrapping_sub(u64::from(!(x < -708.0)));
    let over = 0u64.wrapping_sub(u64::from(x > 709.0));
    f64::from_bits(((y & keep) & !over) | (f64::INFINITY.to_bits() & over))
}

wide_when_available! {
    /// `e^x` for every element.
    pub fn exp_in_place(xs: &mut [f64]) {
        for v in xs.iter_mut() {
            *v = exp(*v);
        }
    }
}

const GELU_CUBIC: f64 = 0.044715;
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// `tanh` through one `exp`; saturates to ±1 for large `|u|`.
#[inline(always)]
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / (exp(2.0 * u) + 1.0)
}

/// Tanh-approximated GELU.
#[inline(always)]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + tanh(u))
}

#[inline(always)]
pub fn gelu_derivative(x: f64) -> f64 {
    let t = tanh(GELU_SCALE * (x + GELU_CUBIC * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

wide_when_available! {
    /// GELU of every element, in place.
    pub fn gelu_in_place(xs: &mut [f64]) {
        for v in xs.iter_mut() {
            *v = gelu(*v);
        }
    }
}

wide_when_available! {
    /// `g ← g · gelu'(x)` elementwise.
    pub fn gelu_backward_in_place(g: &mut [f64], x: &[f64]) {
        for (gv, &xv) in g.iter_mut().zip(x) {
            *gv *= gelu_derivative(xv);
        }
    }
}

/// Causal attention for one query row against `keys[0..=pos]`.
///
/// `q` is one head slice, `keys`/`vals` yield head slices for positions
/// `0..=pos`. Writes the attended value into `out` and the normalized
/// weights into `probs[0..=pos]`.
pub fn attend_row<'a>(
    q: &[f64],
    keys: impl Iterator<Item = &'a [f64]>,
    vals: impl Iterator<Item = &'a [f64]> + Clone,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    for (p, k) in probs.iter_mut().zip(keys) {
        *p = dot(q, k) * scale;
    }
    softmax_in_place(probs);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (&p, v) in probs.iter().zip(vals) {
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

/// Causal attention for one head of one sequence, on contiguous `[l×dh]`
/// blocks. Writes the full `[l×l]` weight matrix (zeros above the
/// diagonal) into `probs` and adds the attended values into `out`.
pub fn attention_head_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    l: usize,
    dh: usize,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    probs.iter_mut().for_each(|p| *p = 0.0);
    matmul_nt_acc(q, k, probs, l, dh, l);
    for i in 0..l {
        let row = &mut probs[i * l..(i + 1) * l];
        row[..=i].iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(&mut row[..=i]);
        row[i + 1..].iter_mut().for_each(|p| *p = 0.0);
    }
    matmul_acc(probs, v, out, l, l, dh);
}

/// Reverse of [`attention_head_forward`]: accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_head_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    l: usize,
    dh: usize,
    scale: f64,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    matmul_tn_acc(probs, d_out, dv, l, l, dh);
    let mut ds = vec![0.0; l * l];
    matmul_nt_acc(d_out, v, &mut ds, l, dh, l);
    for i in 0..l {
        let p = &probs[i * l..(i + 1) * l];
        let row = &mut ds[i * l..(i + 1) * l];
        let inner: f64 = p[..=i].iter().zip(&row[..=i]).map(|(a, b)| a * b).sum();
        for j in 0..=i {
            row[j] = p[j] * (row[j] - inner) * scale;
        }
        row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
    }
    matmul_acc(&ds, k, dq, l, l, dh);
    matmul_tn_acc(&ds, q, dk, l, l, dh);
}

//! Central finite-difference checks for tape gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DenseArray, Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> DenseArray {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    DenseArray::new(shape, values).expect("shape matches length")
}

/// Relative error with a small absolute floor so near-zero gradients do
/// not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Compares backward-pass gradients of `build`'s scalar output with central
/// finite differences over every input element. Returns the max relative
/// error.
pub fn gradient_check<F>(inputs: &[DenseArray], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|a| tape.leaf(a.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("grad populated").to_vec())
        .collect();

    let eval = |arrays: &[DenseArray]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let o = build(&mut t, &vs).expect("forward");
        t.value(o).item()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<DenseArray> = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..work[k].len() {
            let orig = work[k].values()[i];
            work[k].values_mut()[i] = orig + FD_STEP;
            let plus = eval(&work);
            work[k].values_mut()[i] = orig - FD_STEP;
            let minus = eval(&work);
            work[k].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[i], numeric));
        }
    }
    worst
}

/// Reduces any array to a scalar through fixed random weights, so gradients
/// are not trivially uniform.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = random_array(&mut r, shape, 1.0);
    let wv = tape.leaf(w);
    let prod = tape.mul(x, wv)?;
    tape.sum(prod)
}

fn dim(r: &mut impl Rng) -> usize {
    r.random_range(1..=6)
}

/// One randomized trial per seed; returns the max relative error.
pub type Case = fn(u64) -> f64;

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k, m) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let a = random_array(&mut r, vec![n, k], 1.0);
    let b = random_array(&mut r, vec![k, m], 1.0);
    gradient_check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        weighted_sum(t, c, seed)
    })
}

fn matmul_nt(seed: u64) -> f64 {
    let mut r = rng(seed + 100);
    let (n, k, m) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let a = random_array(&mut r, vec![n, k], 1.0);
    let b = random_array(&mut r, vec![m, k], 1.0);
    gradient_check(&[a, b], |t, v| {
        let c = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, c, seed)
    })
}

fn transpose(seed: u64) -> f64 {
    let mut r = rng(seed + 200);
    let shape = vec![dim(&mut r), dim(&mut r)];
    let a = random_array(&mut r, shape, 1.0);
    gradient_check(&[a], |t, v| {
        let c = t.transpose(v[0])?;
        weighted_sum(t, c, seed)
    })
}

fn broadcast_add_sub_mul(seed: u64) -> f64 {
    let mut r = rng(seed + 300);
    let (lead, d) = (dim(&mut r), dim(&mut r));
    let a = random_array(&mut r, vec![lead, d], 1.0);
    let b = random_array(&mut r, vec![d], 1.0);
    let c = random_array(&mut r, vec![lead, d], 1.0);
    gradient_check(&[a, b, c], |t, v| {
        let x = t.add(v[0], v[1])?;
        let y = t.mul(x, v[1])?;
        let z = t.sub(y, v[2])?;
        let w = t.mul(z, v[2])?;
        weighted_sum(t, w, seed)
    })
}

fn scale_exp_mean_reshape(seed: u64) -> f64 {
    let mut r = rng(seed + 400);
    let (n, m) = (dim(&mut r), dim(&mut r));
    let a = random_array(&mut r, vec![n, m], 1.0);
    gradient_check(&[a], |t, v| {
        let x = t.scale(v[0], -0.7)?;
        let y = t.exp(x)?;
        let z = t.reshape(y, vec![n * m])?;
        let w = t.mul(z, z)?;
        t.mean(w)
    })
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed + 500);
    let shape = vec![dim(&mut r), dim(&mut r)];
    let a = random_array(&mut r, shape, 2.0);
    gradient_check(&[a], |t, v| {
        let s = t.softmax_rows(v[0])?;
        weighted_sum(t, s, seed)
    })
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed + 600);
    let (n, d) = (dim(&mut r), r.random_range(2..=6));
    let x = random_array(&mut r, vec![n, d], 1.0);
    let g = random_array(&mut r, vec![d], 1.0);
    let b = random_array(&mut r, vec![d], 1.0);
    gradient_check(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn gelu(seed: u64) -> f64 {
    let mut r = rng(seed + 700);
    let shape = vec![dim(&mut r), dim(&mut r)];
    let a = random_array(&mut r, shape, 3.0);
    gradient_check(&[a], |t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn embedding(seed: u64) -> f64 {
    let mut r = rng(seed + 800);
    let (vocab, d) = (dim(&mut r), dim(&mut r));
    let n = dim(&mut r);
    let ids: Vec<u32> = (0..n).map(|_| r.random_range(0..vocab as u32)).collect();
    let table = random_array(&mut r, vec![vocab, d], 1.0);
    gradient_check(&[table], |t, v| {
        let e = t.embedding(v[0], &ids)?;
        weighted_sum(t, e, seed)
    })
}

fn causal_mask(seed: u64) -> f64 {
    let mut r = rng(seed + 900);
    let n = dim(&mut r);
    let a = random_array(&mut r, vec![n, n], 2.0);
    gradient_check(&[a], |t, v| {
        let m = t.causal_mask(v[0])?;
        let s = t.softmax_rows(m)?;
        weighted_sum(t, s, seed)
    })
}

fn concat_and_slice(seed: u64) -> f64 {
    let mut r = rng(seed + 1000);
    let (n, m1, m2) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let a = random_array(&mut r, vec![n, m1], 1.0);
    let b = random_array(&mut r, vec![n, m2], 1.0);
    let start = r.random_range(0..m1 + m2);
    let len = r.random_range(1..=m1 + m2 - start);
    let row_len = r.random_range(1..=n);
    gradient_check(&[a, b], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let s = t.slice(c, 1, start, len)?;
        let rows = t.concat(&[s, s], 0)?;
        let top = t.slice(rows, 0, n - row_len, row_len + 1)?;
        weighted_sum(t, top, seed)
    })
}

fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed + 1100);
    let (n, vocab) = (dim(&mut r), r.random_range(2..=6));
    let logits = random_array(&mut r, vec![n, vocab], 2.0);
    let ignore = vocab as u32 + 5;
    let mut targets: Vec<u32> = (0..n).map(|_| r.random_range(0..vocab as u32)).collect();
    if n > 1 {
        targets[0] = ignore;
    }
    gradient_check(&[logits], |t, v| t.cross_entropy_next_token(v[0], &targets, ignore))
}

fn pick_log_probs_and_gather(seed: u64) -> f64 {
    let mut r = rng(seed + 1200);
    let (n, vocab) = (dim(&mut r), r.random_range(2..=6));
    let logits = random_array(&mut r, vec![n, vocab], 2.0);
    let values = random_array(&mut r, vec![n], 1.0);
    let picks: Vec<(usize, u32)> = (0..n + 1)
        .map(|_| (r.random_range(0..n), r.random_range(0..vocab as u32)))
        .collect();
    let idx: Vec<usize> = (0..3).map(|_| r.random_range(0..n)).collect();
    gradient_check(&[logits, values], |t, v| {
        let lp = t.pick_log_probs(v[0], &picks)?;
        let a = weighted_sum(t, lp, seed)?;
        let g = t.gather(v[1], &idx)?;
        let b = weighted_sum(t, g, seed + 1)?;
        t.add(a, b)
    })
}

fn clipped_surrogate(seed: u64) -> f64 {
    let mut r = rng(seed + 1300);
    let n = dim(&mut r);
    let eps = 0.2;
    // log-ratios in regions where the min/clip branch is locally constant
    let mut logr = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: f64 = r.random_range(-0.6..0.6);
        while ((x.exp() - (1.0 - eps)).abs() < 0.02) || ((x.exp() - (1.0 + eps)).abs() < 0.02) {
            x = r.random_range(-0.6..0.6);
        }
        logr.push(x);
    }
    let adv: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let lr = DenseArray::vector(logr);
    gradient_check(&[lr], |t, v| {
        let ratio = t.exp(v[0])?;
        let terms = t.clipped_surrogate(ratio, &adv, eps)?;
        let m = t.mean(terms)?;
        t.scale(m, -1.0)
    })
}

fn causal_attention(seed: u64) -> f64 {
    let mut r = rng(seed + 1400);
    let heads = r.random_range(1..=2);
    let dh = r.random_range(1..=3);
    let (n_seq, len) = (r.random_range(1..=2), r.random_range(1..=4));
    let qkv = random_array(&mut r, vec![n_seq * len, 3 * heads * dh], 1.0);
    gradient_check(&[qkv], |t, v| {
        let o = t.causal_attention(v[0], n_seq, len, heads)?;
        weighted_sum(t, o, seed)
    })
}

fn two_layer_composite(seed: u64) -> f64 {
    let mut r = rng(seed + 1600);
    let (n, k, h, vocab) = (dim(&mut r), dim(&mut r), dim(&mut r), r.random_range(2..=6));
    let x = random_array(&mut r, vec![n, k], 1.0);
    let w1 = random_array(&mut r, vec![k, h], 1.0);
    let w2 = random_array(&mut r, vec![h, vocab], 1.0);
    let targets: Vec<u32> = (0..n).map(|_| r.random_range(0..vocab as u32)).collect();
    gradient_check(&[x, w1, w2], |t, v| {
        let a = t.matmul(v[0], v[1])?;
        let a = t.softmax_rows(a)?;
        let logits = t.matmul(a, v[2])?;
        t.cross_entropy_next_token(logits, &targets, u32::MAX)
    })
}

/// Every differentiable primitive, by name.
pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul),
        ("matmul_nt", matmul_nt),
        ("transpose", transpose),
        ("add/sub/mul", broadcast_add_sub_mul),
        ("scale/exp/mean/reshape", scale_exp_mean_reshape),
        ("softmax_rows", softmax),
        ("layer_norm", layer_norm),
        ("gelu", gelu),
        ("embedding", embedding),
        ("causal_mask", causal_mask),
        ("concat/slice", concat_and_slice),
        ("cross_entropy", cross_entropy),
        ("pick_log_probs/gather", pick_log_probs_and_gather),
        ("clipped_surrogate", clipped_surrogate),
        ("causal_attention", causal_attention),
        ("matmul→softmax→cross_entropy", two_layer_composite),
    ]
}

/// Worst error of each case over `trials` seeds.
pub fn primitive_suite(trials: u64) -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .map(|(name, case)| (name, (0..trials).map(case).fold(0.0, f64::max)))
        .collect()
}

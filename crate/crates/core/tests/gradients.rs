//! Finite-difference checks for every differentiable primitive.

use bambino::numerics::gradcheck::{gradient_check, primitive_cases, random_array, rng, weighted_sum};
use bambino::numerics::{DenseArray, Tape};
use rand::Rng;

const TRIALS: u64 = 20;
const TOLERANCE: f64 = 1e-5;

fn dim(r: &mut impl Rng) -> usize {
    r.random_range(1..=6)
}

fn run_case(name: &str) {
    let (_, case) = primitive_cases()
        .into_iter()
        .find(|(n, _)| *n == name)
        .expect("registered case");
    let worst = (0..TRIALS).map(case).fold(0.0, f64::max);
    assert!(worst < TOLERANCE, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_gradients() {
    run_case("matmul");
}

#[test]
fn matmul_three_by_four_by_two() {
    let mut r = rng(42);
    let a = random_array(&mut r, vec![3, 4], 1.0);
    let b = random_array(&mut r, vec![4, 2], 1.0);
    let err = gradient_check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    });
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn matmul_nt_gradients() {
    run_case("matmul_nt");
}

#[test]
fn transpose_gradients() {
    run_case("transpose");
}

#[test]
fn broadcast_add_sub_mul_gradients() {
    run_case("add/sub/mul");
}

#[test]
fn scale_exp_mean_reshape_gradients() {
    run_case("scale/exp/mean/reshape");
}

#[test]
fn softmax_gradients() {
    run_case("softmax_rows");
}

#[test]
fn layer_norm_gradients() {
    run_case("layer_norm");
}

#[test]
fn gelu_gradients() {
    run_case("gelu");
}

#[test]
fn embedding_gradients() {
    run_case("embedding");
}

#[test]
fn causal_mask_gradients() {
    run_case("causal_mask");
}

#[test]
fn concat_and_slice_gradients() {
    run_case("concat/slice");
}

#[test]
fn cross_entropy_gradients() {
    run_case("cross_entropy");
}

#[test]
fn cross_entropy_matches_per_position_average() {
    let mut r = rng(7);
    let logits = random_array(&mut r, vec![3, 4], 2.0);
    let targets = [2u32, 0, 3];
    let mut brute = 0.0;
    for (i, &tg) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        brute += -(row[tg as usize].exp() / z).ln();
    }
    brute /= 3.0;
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let loss = tape.cross_entropy_next_token(l, &targets, 99).unwrap();
    assert!((tape.value(loss).item() - brute).abs() < 1e-12);
}

#[test]
fn pick_log_probs_and_gather_gradients() {
    run_case("pick_log_probs/gather");
}

#[test]
fn clipped_surrogate_gradients_away_from_kinks() {
    run_case("clipped_surrogate");
}

#[test]
fn causal_attention_gradients() {
    run_case("causal_attention");
}

/// The fused attention kernel must agree with the same computation spelled
/// out in slice / matmul / mask / softmax / concat primitives.
#[test]
fn fused_attention_matches_composed_primitives() {
    for seed in 0..10 {
        let mut r = rng(seed + 1500);
        let heads = r.random_range(1..=3);
        let dh = r.random_range(1..=4);
        let d = heads * dh;
        let (n_seq, len) = (r.random_range(1..=3), r.random_range(1..=6));
        let qkv = random_array(&mut r, vec![n_seq * len, 3 * d], 1.5);

        let mut fused = Tape::new();
        let fv = fused.leaf(qkv.clone().with_grad());
        let fo = fused.causal_attention(fv, n_seq, len, heads).unwrap();
        let fl = weighted_sum(&mut fused, fo, seed).unwrap();
        fused.backward(fl).unwrap();

        let mut comp = Tape::new();
        let cv = comp.leaf(qkv.with_grad());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut seqs = Vec::new();
        for s in 0..n_seq {
            let rows = comp.slice(cv, 0, s * len, len).unwrap();
            let mut head_outs = Vec::new();
            for h in 0..heads {
                let q = comp.slice(rows, 1, h * dh, dh).unwrap();
                let k = comp.slice(rows, 1, d + h * dh, dh).unwrap();
                let v = comp.slice(rows, 1, 2 * d + h * dh, dh).unwrap();
                let kt = comp.transpose(k).unwrap();
                let sc = comp.matmul(q, kt).unwrap();
                let sc = comp.scale(sc, scale).unwrap();
                let sc = comp.causal_mask(sc).unwrap();
                let p = comp.softmax_rows(sc).unwrap();
                head_outs.push(comp.matmul(p, v).unwrap());
            }
            seqs.push(comp.concat(&head_outs, 1).unwrap());
        }
        let co = comp.concat(&seqs, 0).unwrap();
        let cl = weighted_sum(&mut comp, co, seed).unwrap();
        comp.backward(cl).unwrap();

        for (a, b) in fused.values(fo).iter().zip(comp.values(co)) {
            assert!((a - b).abs() < 1e-12, "forward {a} vs {b}");
        }
        for (a, b) in fused.grad(fv).unwrap().iter().zip(comp.grad(cv).unwrap()) {
            assert!((a - b).abs() < 1e-12, "grad {a} vs {b}");
        }
    }
}

#[test]
fn two_layer_composite_gradients() {
    run_case("matmul→softmax→cross_entropy");
}

#[test]
fn softmax_rows_sum_to_one_and_are_shift_invariant() {
    let mut r = rng(3);
    for _ in 0..50 {
        let (n, m) = (dim(&mut r), dim(&mut r));
        let a = random_array(&mut r, vec![n, m], 30.0);
        let shift: f64 = r.random_range(-100.0..100.0);
        let shifted = DenseArray::new(vec![n, m], a.values().iter().map(|v| v + shift).collect()).unwrap();
        let mut t = Tape::new();
        let (x, y) = (t.leaf(a), t.leaf(shifted));
        let (sx, sy) = (t.softmax_rows(x).unwrap(), t.softmax_rows(y).unwrap());
        for i in 0..n {
            let row = &t.values(sx)[i * m..(i + 1) * m];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        for (p, q) in t.values(sx).iter().zip(t.values(sy)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut r = rng(11);
        let a = random_array(&mut r, vec![4, 5], 1.0);
        let b = random_array(&mut r, vec![5, 3], 1.0);
        let mut t = Tape::new();
        let (x, y) = (t.leaf(a.with_grad()), t.leaf(b.with_grad()));
        let z = t.matmul(x, y).unwrap();
        let s = t.softmax_rows(z).unwrap();
        let g = t.gelu(s).unwrap();
        let l = weighted_sum(&mut t, g, 4).unwrap();
        t.backward(l).unwrap();
        (t.grad(x).unwrap().to_vec(), t.grad(y).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

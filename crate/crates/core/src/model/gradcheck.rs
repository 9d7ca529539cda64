//! Finite-difference check of the whole model at toy size.

use rand::Rng;

use super::transformer::{LanguageModel, Role, TransformerConfig};
use crate::error::Result;
use crate::numerics::gradcheck::{relative_error, rng, FD_STEP};
use crate::numerics::{BoundParams, DenseArray, Tape, Var};
use crate::textdata::PAD;

pub fn toy_config(seed: u64) -> TransformerConfig {
    TransformerConfig {
        vocab_size: 11,
        context_length: 16,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        init_std: 0.3,
        seed,
    }
}

struct ToyProblem {
    rows: Vec<Vec<u32>>,
    value_targets: Vec<f64>,
}

impl ToyProblem {
    /// Cross-entropy over both rows (the second ends in padding) plus a
    /// squared value error, so every parameter including the value head is
    /// reached.
    fn loss(&self, model: &LanguageModel, tape: &mut Tape, bound: &BoundParams) -> Result<Var> {
        let inputs: Vec<&[u32]> = self.rows.iter().map(|r| &r[..r.len() - 1]).collect();
        let out = model.forward_on_tape(tape, bound, &inputs)?;
        let targets: Vec<u32> = self.rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
        let ce = tape.cross_entropy_next_token(out.logits, &targets, PAD)?;
        let n = self.value_targets.len();
        let goal = tape.constant(vec![n], self.value_targets.clone())?;
        let diff = tape.sub(out.values, goal)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq)?;
        let mse = tape.scale(mse, 0.5)?;
        tape.add(ce, mse)
    }

    fn value(&self, model: &LanguageModel) -> f64 {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let loss = self.loss(model, &mut tape, &bound).expect("toy forward");
        tape.value(loss).item()
    }
}

/// Compares analytic gradients with central differences on `samples`
/// randomly chosen scalar parameters. Returns the max relative error.
pub fn full_model_check(seed: u64, samples: usize) -> Result<f64> {
    let mut r = rng(seed ^ 0x5eed);
    let mut model = LanguageModel::new(toy_config(seed), Role::Baby)?;
    let d = model.config.d_model;
    let w = DenseArray::new(vec![d, 1], (0..d).map(|_| r.random_range(-0.5..0.5)).collect())?;
    model.params.get_mut("value_head.w").expect("value head").values_mut().copy_from_slice(w.values());

    let len = model.config.context_length + 1;
    let vocab = model.config.vocab_size as u32;
    let mut rows: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..len).map(|_| r.random_range(0..vocab)).filter(|&t| t != PAD).collect())
        .collect();
    for row in &mut rows {
        row.resize(len, 4);
    }
    let pad_from = r.random_range(len / 2..len);
    rows[1][pad_from..].iter_mut().for_each(|t| *t = PAD);
    let value_targets = (0..2 * (len - 1)).map(|_| r.random_range(-1.0..1.0)).collect();
    let problem = ToyProblem { rows, value_targets };

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let loss = problem.loss(&model, &mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = (0..model.params.len())
        .map(|i| {
            tape.grad(bound.get(i))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params.by_index(i).len()])
        })
        .collect();

    let total = model.params.num_scalars();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut flat = r.random_range(0..total);
        let mut p = 0;
        while flat >= model.params.by_index(p).len() {
            flat -= model.params.by_index(p).len();
            p += 1;
        }
        let name = model.params.names().nth(p).expect("index in range").to_string();
        let orig = model.params.by_index(p).values()[flat];
        let set = |m: &mut LanguageModel, v: f64| {
            m.params.get_mut(&name).expect("name").values_mut()[flat] = v;
        };
        set(&mut model, orig + FD_STEP);
        let plus = problem.value(&model);
        set(&mut model, orig - FD_STEP);
        let minus = problem.value(&model);
        set(&mut model, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[p][flat], numeric));
    }
    Ok(worst)
}

use bambino::checkpoint::checksum;
use bambino::model::{LanguageModel, Role, TransformerConfig, UniformModel};
use bambino::numerics::{AdamConfig, AdamState, DenseArray, Tape};
use bambino::seeds;
use bambino::textdata::{generate_synthetic, Batch, BatchIterator, CharTokenizer, Corpus, SyntheticGrammar, EOS};
use bambino::training::*;
use bambino::Error;
use rand::Rng;

fn tokenizer() -> CharTokenizer {
    CharTokenizer::from_chars("abcdefg ".chars().collect()).unwrap()
}

fn tiny_model(vocab: usize, seed: u64) -> LanguageModel {
    let cfg = TransformerConfig {
        vocab_size: vocab,
        context_length: 48,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        init_std: 0.02,
        seed,
    };
    LanguageModel::new(cfg, Role::Baby).unwrap()
}

fn grammar_corpus(tok: &CharTokenizer, n_docs: usize, seed: u64) -> Corpus {
    let g = SyntheticGrammar::procedural("abcdefg ".chars().collect(), 1, 20.0, seed);
    let docs = generate_synthetic(&g, n_docs, seed).unwrap();
    Corpus::from_texts(docs.iter().map(String::as_str), tok, "l2", "synthetic")
}

fn first_batch(corpus: &Corpus, rows: usize, context: usize) -> Batch {
    BatchIterator::new(corpus, rows, context, 3).unwrap().next_batch().unwrap()
}

// ---- reward ----

#[test]
fn reward_direct_substitution() {
    let rc = RewardConfig {
        alpha: 1.0,
        beta: 1.0,
        tau: 1.0,
        ppl_floor: 1e-3,
        reward_cap: 10.0,
    };
    assert!((reward_from_ppl(3.0, &rc) - 0.5).abs() <= 1e-12);
}

#[test]
fn reward_cap_binds_below_threshold() {
    let rc = RewardConfig {
        alpha: 1.0,
        beta: 1.0,
        tau: 1.0,
        ppl_floor: 0.1,
        reward_cap: 10.0,
    };
    assert_eq!(reward_from_ppl(0.7, &rc), 10.0);
    assert_eq!(reward_from_ppl(1.0, &rc), 10.0);
}

#[test]
fn uniform_parent_reward() {
    let tok = tokenizer();
    let parent = UniformModel { vocab_size: 8 };
    let rc = RewardConfig {
        alpha: 1.0,
        beta: 1.0,
        tau: 0.0,
        ..Default::default()
    };
    let generated = tok.encode("abc de");
    let r = compute_reward(&generated, &parent, &rc, &tok).unwrap();
    assert!((r - 0.125).abs() < 1e-12);
}

#[test]
fn short_generation_is_rejected() {
    let tok = tokenizer();
    let parent = UniformModel { vocab_size: 8 };
    let err = compute_reward(&[EOS], &parent, &RewardConfig::default(), &tok).unwrap_err();
    assert!(matches!(err, Error::ShortGeneration(1)));
}

#[test]
fn reward_is_decreasing_and_bounded() {
    let rc = RewardConfig::default();
    let unclamped_from = rc.tau + rc.alpha / (rc.beta * rc.reward_cap);
    let mut prev = f64::INFINITY;
    for i in 0..2000 {
        let ppl = unclamped_from + 1e-3 + i as f64 * 0.05;
        let r = reward_from_ppl(ppl, &rc);
        assert!(r < prev, "not decreasing at ppl {ppl}");
        assert!(r > 0.0 && r <= rc.reward_cap);
        prev = r;
    }
    for ppl in [0.0, 0.5, 1.0, 1.5, 1e9] {
        let r = reward_from_ppl(ppl, &rc);
        assert!(r > 0.0 && r <= rc.reward_cap);
    }
}

// ---- ratio, advantage, surrogate, value loss ----

#[test]
fn ratio_examples() {
    let old = [-1.0, -2.0, -0.5];
    assert_eq!(probability_ratio(&old, &old).unwrap(), vec![1.0; 3]);
    let mut new = old;
    new[1] += 2f64.ln();
    let r = probability_ratio(&new, &old).unwrap();
    assert!((r[1] - 2.0).abs() < 1e-15);
    assert!(matches!(probability_ratio(&new[..2], &old), Err(Error::RolloutShape(_))));
}

#[test]
fn ratio_matches_recomputation() {
    let mut rng = seeds::rng(11, &[]);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let new: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..0.0)).collect();
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..0.0)).collect();
        let r = probability_ratio(&new, &old).unwrap();
        for i in 0..n {
            let direct = new[i].exp() / old[i].exp();
            assert!((r[i] - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }
}

fn rollout(values: Vec<f64>, reward: f64, gamma: f64) -> Rollout {
    let n = values.len();
    Rollout::new(vec![0, 4], vec![5; n], vec![-1.0; n], values, reward, gamma).unwrap()
}

#[test]
fn advantage_examples() {
    assert_eq!(rollout(vec![0.0; 3], 0.5, 1.0).advantages, vec![0.0, 0.0, 0.5]);
    let a = rollout(vec![1.0; 4], 0.0, 1.0).advantages;
    assert_eq!(a, vec![0.0, 0.0, 0.0, -1.0]);
}

#[test]
fn advantages_match_loop_oracle() {
    let mut rng = seeds::rng(12, &[]);
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let reward = rng.random_range(0.0..10.0);
        let r = rollout(v.clone(), reward, 0.9);
        let mut extended = v.clone();
        extended.push(0.0);
        for t in 0..n {
            let step_reward = if t == n - 1 { reward } else { 0.0 };
            let expect = step_reward + 0.9 * extended[t + 1] - extended[t];
            assert!((r.advantages[t] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn missing_values_are_a_shape_error() {
    let err = Rollout::new(vec![0], vec![4, 5], vec![-1.0, -1.0], vec![0.0], 1.0, 1.0).unwrap_err();
    assert!(matches!(err, Error::RolloutShape(_)));
}

#[test]
fn surrogate_examples() {
    assert!((ppo_surrogate_loss(&[1.5], &[1.0], 0.2).unwrap() + 1.2).abs() <= 1e-12);
    assert!((ppo_surrogate_loss(&[0.5], &[-1.0], 0.2).unwrap() - 0.8).abs() <= 1e-12);
    let adv = [0.3, -1.2, 2.5, 0.0];
    let mean = adv.iter().sum::<f64>() / 4.0;
    assert!((ppo_surrogate_loss(&[1.0; 4], &adv, 0.2).unwrap() + mean).abs() <= 1e-12);
    assert!(ppo_surrogate_loss(&[1.0; 3], &adv, 0.2).is_err());
}

#[test]
fn surrogate_is_pessimistic() {
    let mut rng = seeds::rng(13, &[]);
    for _ in 0..10_000 {
        let r: f64 = rng.random_range(0.0..3.0);
        let a: f64 = rng.random_range(-3.0..3.0);
        let eps = rng.random_range(0.05..0.5);
        let term = bambino::numerics::surrogate_term(r, a, eps);
        assert!(term <= r * a + 1e-15);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            assert_eq!(term, r * a);
        }
    }
}

#[test]
fn value_loss_examples() {
    let r = rollout(vec![0.0; 5], 0.0, 1.0);
    assert_eq!(value_loss(&r.values, &r, 1.0).unwrap(), 0.0);
    let r = rollout(vec![0.0; 5], 1.7, 1.0);
    assert!((value_loss(&r.values, &r, 1.0).unwrap() - 1.7 * 1.7).abs() <= 1e-12);
    assert!(value_loss(&[0.0; 4], &r, 1.0).is_err());
}

#[test]
fn value_loss_matches_loop_oracle() {
    let mut rng = seeds::rng(14, &[]);
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let new: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let reward = rng.random_range(0.0..10.0);
        let gamma = rng.random_range(0.5..1.0);
        let r = rollout(v, reward, gamma);
        let mut total = 0.0;
        for t in 0..n {
            let g = reward * gamma.powi((n - 1 - t) as i32);
            total += (new[t] - g).powi(2);
        }
        assert!((value_loss(&new, &r, gamma).unwrap() - total / n as f64).abs() <= 1e-12);
    }
}

#[test]
fn surrogate_gradient_at_old_policy_is_minus_advantage() {
    let mut rng = seeds::rng(15, &[]);
    let n = 12;
    let old: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..-0.1)).collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let eps = 0.2;

    let mut tape = Tape::new();
    let lp = tape.leaf(DenseArray::vector(old.clone()).with_grad());
    let old_v = tape.constant(vec![n], old.clone()).unwrap();
    let d = tape.sub(lp, old_v).unwrap();
    let r = tape.exp(d).unwrap();
    let s = tape.clipped_surrogate(r, &adv, eps).unwrap();
    let total = tape.sum(s).unwrap();
    let loss = tape.scale(total, -1.0).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(lp).unwrap().to_vec();

    let h = 1e-6;
    for t in 0..n {
        assert!((analytic[t] + adv[t]).abs() <= 1e-12);
        let at = |x: f64| {
            let mut p = old.clone();
            p[t] = x;
            let ratios = probability_ratio(&p, &old).unwrap();
            ppo_surrogate_loss(&ratios, &adv, eps).unwrap() * n as f64
        };
        let fd = (at(old[t] + h) - at(old[t] - h)) / (2.0 * h);
        let rel = (fd + adv[t]).abs() / adv[t].abs().max(1e-2);
        assert!(rel < 1e-5, "action {t}: fd {fd} vs {}", -adv[t]);
    }
}

// ---- learning phase ----

#[test]
fn fresh_model_first_loss_is_log_vocab() {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, 64, 1);
    let mut model = tiny_model(tok.vocab_size(), 1);
    let mut opt = AdamState::new(&model.params, AdamConfig::default());
    let batch = first_batch(&corpus, 16, 47);
    let rec = clm_step(&mut model, &batch, &mut opt, 1.0, StepIndex { step: 0, epoch: 0 }).unwrap();
    let ln_v = (tok.vocab_size() as f64).ln();
    assert!((rec.loss.unwrap() - ln_v).abs() / ln_v < 0.05, "{:?} vs {ln_v}", rec.loss);
}

#[test]
fn repeated_document_is_memorized() {
    let tok = tokenizer();
    let text = "abcab gfedc aabbccdd";
    let corpus = Corpus::from_texts(std::iter::repeat_n(text, 16), &tok, "l2", "repeat");
    let mut model = tiny_model(tok.vocab_size(), 2);
    let mut opt = AdamState::new(&model.params, AdamConfig { lr: 1e-3, ..Default::default() });
    let mut batches = BatchIterator::new(&corpus, 16, 47, 0).unwrap();
    let losses: Vec<f64> = (0..200)
        .map(|step| {
            let b = batches.next_cycling();
            clm_step(&mut model, &b, &mut opt, 1.0, StepIndex { step, epoch: 0 })
                .unwrap()
                .loss
                .unwrap()
        })
        .collect();
    let smoothed: Vec<f64> = losses[20..].chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] < w[0], "smoothed loss rose: {smoothed:?}");
    }
    assert!(losses[199] < 0.5 * losses[0]);
}

#[test]
fn clm_step_is_deterministic() {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, 32, 4);
    let batch = first_batch(&corpus, 8, 47);
    let run = || {
        let mut model = tiny_model(tok.vocab_size(), 4);
        let mut opt = AdamState::new(&model.params, AdamConfig::default());
        clm_step(&mut model, &batch, &mut opt, 1.0, StepIndex { step: 0, epoch: 0 }).unwrap();
        model.params.flatten()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn fully_masked_batch_is_degenerate() {
    let mut model = tiny_model(12, 5);
    let mut opt = AdamState::new(&model.params, AdamConfig::default());
    let batch = Batch {
        tokens: vec![vec![0, 2, 2, 2]],
        mask: vec![vec![false; 3]],
    };
    let err = clm_step(&mut model, &batch, &mut opt, 1.0, StepIndex { step: 0, epoch: 0 }).unwrap_err();
    assert!(matches!(err, Error::DegenerateBatch));
}

// ---- feedback phase ----

fn ppo_cfg() -> PpoConfig {
    PpoConfig {
        max_new_tokens: 12,
        rollout_batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn prompts_are_bos_plus_k_tokens_of_long_enough_rows() {
    let batch = Batch {
        tokens: vec![
            vec![0, 4, 5, 6, 7, 8, 9, 1, 2],
            vec![0, 4, 5, 6, 7, 8, 1, 2, 2],
            vec![0, 4, 5, 6, 1, 2, 2, 2, 2],
        ],
        mask: vec![vec![true; 8]; 3],
    };
    let prompts = prompts_from_batch(&batch, 5, 16);
    assert_eq!(prompts, vec![vec![0, 4, 5, 6, 7, 8], vec![0, 4, 5, 6, 7, 8]]);
    assert_eq!(prompts_from_batch(&batch, 5, 1).len(), 1);
}

#[test]
fn rollouts_are_consistent_and_frozen() {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, 64, 6);
    let mut model = tiny_model(tok.vocab_size(), 6);
    let parent = tiny_model(tok.vocab_size(), 7);
    let source = ParentPerplexity {
        parent: &parent,
        tokenizer: &tok,
        config: RewardConfig::default(),
    };
    let cfg = ppo_cfg();
    let batch = first_batch(&corpus, 8, 47);
    let prompts = prompts_from_batch(&batch, cfg.prompt_len, cfg.rollout_batch_size);
    let collected = collect_rollouts(&model, &prompts, &cfg, &source, 9, 0).unwrap();
    assert!(!collected.rollouts.is_empty());
    for r in &collected.rollouts {
        let n = r.actions.len();
        assert!(n >= 2 && n <= cfg.max_new_tokens);
        assert_eq!((r.old_log_probs.len(), r.values.len(), r.advantages.len()), (n, n, n));
        assert_eq!(r.step_rewards[n - 1], r.reward);
        assert!(r.step_rewards[..n - 1].iter().all(|&x| x == 0.0));
        // zero-initialized value head: advantage is the raw terminal reward
        assert_eq!(r.advantages[n - 1], r.reward);
        let seq: Vec<u32> = r.prompt.iter().chain(&r.actions).copied().collect();
        let lp = model.log_probs_batch(&[&seq]).unwrap().remove(0);
        let tail = &lp[r.prompt.len() - 1..];
        for (a, b) in tail.iter().zip(&r.old_log_probs) {
            assert!((a - b).abs() < 1e-12);
        }
        let scored = compute_reward(&r.actions, &parent, &RewardConfig::default(), &tok).unwrap();
        assert!((scored - r.reward).abs() < 1e-12);
    }

    let sums: Vec<u64> = collected.rollouts.iter().map(Rollout::checksum).collect();
    let before = model.params.flatten();
    let mut opt = AdamState::new(&model.params, cfg.adam());
    ppo_update(&mut model, &mut opt, &collected.rollouts, &cfg, 1.0).unwrap();
    assert_ne!(before, model.params.flatten());
    let after: Vec<u64> = collected.rollouts.iter().map(Rollout::checksum).collect();
    assert_eq!(sums, after);
    let r = &collected.rollouts[0];
    let seq: Vec<u32> = r.prompt.iter().chain(&r.actions).copied().collect();
    let fresh = model.log_probs_batch(&[&seq]).unwrap().remove(0);
    assert_ne!(&fresh[r.prompt.len() - 1..], r.old_log_probs.as_slice());
}

#[test]
fn all_discarded_rollouts_give_a_skipped_record() {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, 32, 8);
    let mut model = tiny_model(tok.vocab_size(), 8);
    let parent = UniformModel { vocab_size: tok.vocab_size() };
    let source = ParentPerplexity {
        parent: &parent,
        tokenizer: &tok,
        config: RewardConfig::default(),
    };
    let cfg = PpoConfig {
        max_new_tokens: 1,
        ..ppo_cfg()
    };
    let before = model.params.flatten();
    let mut opt = AdamState::new(&model.params, cfg.adam());
    let batch = first_batch(&corpus, 8, 47);
    let rec = ppo_step(&mut model, &source, &batch, &cfg, &mut opt, 1.0, 0, StepIndex { step: 3, epoch: 0 }).unwrap();
    assert_eq!(rec.phase, "ppo");
    assert_eq!(rec.rollouts, Some(0));
    assert_eq!(rec.discarded, Some(8));
    assert_eq!(rec.loss, None);
    assert_eq!(model.params.flatten(), before);
    assert_eq!(opt.step, 0);
}

fn update_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn near_zero_advantages_move_less_than_a_learning_step() {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, 64, 9);
    let baby = tiny_model(tok.vocab_size(), 9);
    let parent = baby.clone();
    let source = ParentPerplexity {
        parent: &parent,
        tokenizer: &tok,
        config: RewardConfig {
            alpha: 1e-12,
            reward_cap: 1e-9,
            ..Default::default()
        },
    };
    let cfg = ppo_cfg();
    let batch = first_batch(&corpus, 8, 47);
    let at = StepIndex { step: 0, epoch: 0 };

    let mut ppo_model = baby.clone();
    let mut opt = AdamState::new(&ppo_model.params, cfg.adam());
    let rec = ppo_step(&mut ppo_model, &source, &batch, &cfg, &mut opt, 1.0, 1, at).unwrap();
    assert!(rec.rollouts.unwrap() > 0);
    let ppo_norm = update_norm(&baby.params.flatten(), &ppo_model.params.flatten());

    let mut clm_model = baby.clone();
    let mut opt = AdamState::new(&clm_model.params, cfg.adam());
    clm_step(&mut clm_model, &batch, &mut opt, 1.0, at).unwrap();
    let clm_norm = update_norm(&baby.params.flatten(), &clm_model.params.flatten());
    assert!(ppo_norm < clm_norm, "ppo {ppo_norm} vs clm {clm_norm}");
}

fn marker_frequency(model: &LanguageModel, prompts: &[Vec<u32>], marker: u32, cfg: &PpoConfig) -> f64 {
    let source = MarkerReward {
        marker,
        bonus: 0.0,
        base: 0.0,
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for step in 0..8 {
        let c = collect_rollouts(model, prompts, cfg, &source, 999, step).unwrap();
        for r in &c.rollouts {
            hits += r.actions.iter().filter(|&&a| a == marker).count();
            total += r.actions.len();
        }
    }
    hits as f64 / total as f64
}

#[test]
fn marker_reward_is_exploited() {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, 64, 10);
    let mut model = tiny_model(tok.vocab_size(), 10);
    let marker = tok.id_of('g').unwrap();
    let source = MarkerReward {
        marker,
        bonus: 10.0,
        base: 0.0,
    };
    let cfg = PpoConfig {
        learning_rate: 3e-3,
        ..ppo_cfg()
    };
    let mut batches = BatchIterator::new(&corpus, 8, 47, 10).unwrap();
    let probe = first_batch(&corpus, 8, 47);
    let prompts = prompts_from_batch(&probe, cfg.prompt_len, 8);
    let before = marker_frequency(&model, &prompts, marker, &cfg);
    let mut opt = AdamState::new(&model.params, cfg.adam());
    for step in 0..100 {
        let b = batches.next_cycling();
        ppo_step(&mut model, &source, &b, &cfg, &mut opt, 1.0, 10, StepIndex { step, epoch: 0 }).unwrap();
    }
    let after = marker_frequency(&model, &prompts, marker, &cfg);
    assert!(after > before + 0.05, "marker frequency {before} -> {after}");
}

// ---- driver ----

fn schedule(mode: &str) -> ScheduleConfig {
    ScheduleConfig {
        mode: mode.into(),
        epochs: 2,
        ..Default::default()
    }
}

struct Fixture {
    tok: CharTokenizer,
    corpus: Corpus,
    parent: LanguageModel,
}

fn fixture(n_docs: usize) -> Fixture {
    let tok = tokenizer();
    let corpus = grammar_corpus(&tok, n_docs, 20);
    let parent = tiny_model(tok.vocab_size(), 21);
    Fixture { tok, corpus, parent }
}

fn run_config() -> RunConfig {
    RunConfig {
        batch_size: 4,
        seed: 77,
        ..Default::default()
    }
}

fn continual<'a>(f: &'a Fixture, mode: &str, parent: Option<&'a LanguageModel>) -> Continual<'a> {
    Continual {
        corpus: &f.corpus,
        parent,
        tokenizer: &f.tok,
        schedule: schedule(mode),
        ppo: ppo_cfg(),
        reward: RewardConfig::default(),
        run: run_config(),
        eval: None,
        checkpoint_dir: None,
        metrics_path: None,
        progress: None,
    }
}

fn fresh_state(f: &Fixture) -> TrainerState {
    TrainerState::fresh(tiny_model(f.tok.vocab_size(), 22), AdamConfig::default(), ppo_cfg().adam())
}

#[test]
fn interleaved_phases_follow_the_modulo_rule() {
    // 480 docs in batches of 4 → 120 steps per epoch, 240 steps over two epochs
    let f = fixture(480);
    let out = continual(&f, "bambino", Some(&f.parent)).run(fresh_state(&f)).unwrap();
    assert_eq!(out.records.len(), 240);
    for (i, rec) in out.records.iter().enumerate() {
        assert_eq!(rec.step, i as u64);
        let expect = if i % 12 < 10 { "clm" } else { "ppo" };
        assert_eq!(rec.phase, expect, "step {i}");
    }
    let head: String = out.records[..24].iter().map(|r| if r.is_ppo() { 'P' } else { 'C' }).collect();
    assert_eq!(head, "CCCCCCCCCCPPCCCCCCCCCCPP");
}

#[test]
fn modulo_rule_holds_for_arbitrary_cycles() {
    for (rc, rp) in [(1, 0), (1, 1), (3, 5), (7, 2), (10, 2), (4, 9)] {
        let s = Interleaved { r_clm: rc, r_ppo: rp };
        for i in 0..500u64 {
            let expect = if (i % (rc + rp) as u64) < (rc as u64) { Phase::Clm } else { Phase::Ppo };
            assert_eq!(s.phase(i, 37), expect);
        }
    }
}

#[test]
fn block_split_puts_feedback_in_the_final_fifteen_percent() {
    let s = BlockSplit { fraction: 0.85 };
    for epoch in 0..3u64 {
        for i in 0..100u64 {
            let expect = if i < 85 { Phase::Clm } else { Phase::Ppo };
            assert_eq!(s.phase(epoch * 100 + i, 100), expect);
        }
    }
    // 80 docs in batches of 4 → 20 steps per epoch: 17 learning, 3 feedback
    let f = fixture(80);
    let out = continual(&f, "no-alternating", Some(&f.parent)).run(fresh_state(&f)).unwrap();
    assert_eq!(out.records.len(), 40);
    for rec in &out.records {
        assert_eq!(rec.is_ppo(), rec.step % 20 >= 17, "step {}", rec.step);
    }
}

#[test]
fn clm_only_has_no_feedback_steps_and_needs_no_parent() {
    let f = fixture(80);
    let out = continual(&f, "no-ppo", None).run(fresh_state(&f)).unwrap();
    assert_eq!(out.records.len(), 40);
    assert!(out.records.iter().all(|r| r.phase == "clm"));
}

#[test]
fn feedback_schedule_without_parent_is_a_config_error() {
    let f = fixture(80);
    let err = continual(&f, "bambino", None).run(fresh_state(&f)).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    let mut bad = continual(&f, "alternate", Some(&f.parent));
    bad.schedule.mode = "alternate".into();
    assert!(matches!(bad.run(fresh_state(&f)).err().unwrap(), Error::Config(_)));
}

#[test]
fn run_bambino_is_bit_reproducible() {
    let f = fixture(80);
    let go = || {
        run_bambino(
            &f.corpus,
            tiny_model(f.tok.vocab_size(), 22),
            Some(&f.parent),
            &f.tok,
            &schedule("interleaved"),
            &ppo_cfg(),
            &RewardConfig::default(),
            &run_config(),
        )
        .unwrap()
    };
    let (a, b) = (go(), go());
    let lines = |o: &RunOutcome| o.records.iter().map(MetricsRecord::to_json_line).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
    let bits = |o: &RunOutcome| o.state.model.params.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert!(a.records.iter().any(|r| r.is_ppo() && r.mean_reward.is_some()));
}

#[test]
fn resume_from_epoch_checkpoint_matches_uninterrupted_run() {
    let f = fixture(80);
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let part_dir = dir.path().join("part");
    let mut full = continual(&f, "bambino", Some(&f.parent));
    full.checkpoint_dir = Some(full_dir.join("ck"));
    full.metrics_path = Some(full_dir.join("metrics.jsonl"));
    full.run(fresh_state(&f)).unwrap();

    // first run stops after one epoch; its log then gets a stale tail that
    // resuming must drop
    let mut first = continual(&f, "bambino", Some(&f.parent));
    first.schedule.epochs = 1;
    first.checkpoint_dir = Some(part_dir.join("ck"));
    first.metrics_path = Some(part_dir.join("metrics.jsonl"));
    first.run(fresh_state(&f)).unwrap();
    let stale = MetricsRecord::new(25, 1, Phase::Clm).to_json_line() + "\n";
    let log = part_dir.join("metrics.jsonl");
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str(&stale);
    std::fs::write(&log, text).unwrap();

    let state = load_resume_state(&epoch_dir(&part_dir.join("ck"), 0), 77).unwrap();
    assert_eq!(state.step, 20);
    let mut second = continual(&f, "bambino", Some(&f.parent));
    second.checkpoint_dir = Some(part_dir.join("ck"));
    second.metrics_path = Some(log.clone());
    second.run(state).unwrap();

    assert_eq!(
        std::fs::read_to_string(full_dir.join("metrics.jsonl")).unwrap(),
        std::fs::read_to_string(&log).unwrap()
    );
    assert_eq!(
        checksum(&full_dir.join("ck/final")).unwrap(),
        checksum(&part_dir.join("ck/final")).unwrap()
    );
    assert!(matches!(
        load_resume_state(&epoch_dir(&part_dir.join("ck"), 0), 78),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn eval_perplexities_are_attached_at_epoch_ends() {
    let f = fixture(80);
    let l1 = grammar_corpus(&f.tok, 10, 30);
    let mut c = continual(&f, "no-ppo", None);
    c.eval = Some(EvalSets { l1: &l1, l2: &f.corpus });
    let out = c.run(fresh_state(&f)).unwrap();
    for rec in &out.records {
        assert_eq!(rec.eval_l2_ppl.is_some(), (rec.step + 1) % 20 == 0);
        assert_eq!(rec.wall_ms, None);
    }
}


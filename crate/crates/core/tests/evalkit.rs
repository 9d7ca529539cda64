use std::collections::HashSet;

use bambino::evalkit::*;
use bambino::model::{perplexity, CausalLm, LanguageModel, Role, TransformerConfig, UniformModel};
use bambino::numerics::{AdamConfig, AdamState};
use bambino::seeds;
use bambino::textdata::{generate_synthetic, BatchIterator, CharTokenizer, Corpus, SyntheticGrammar};
use bambino::training::{clm_step, StepIndex};
use bambino::Error;
use rand::Rng;

fn tokenizer() -> CharTokenizer {
    CharTokenizer::from_chars("abcd ".chars().collect()).unwrap()
}

fn tiny_model(vocab: usize, seed: u64) -> LanguageModel {
    let cfg = TransformerConfig {
        vocab_size: vocab,
        context_length: 64,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        init_std: 0.02,
        seed,
    };
    LanguageModel::new(cfg, Role::Baby).unwrap()
}

fn corpus_of(tok: &CharTokenizer, texts: &[&str]) -> Corpus {
    Corpus::from_texts(texts.iter().copied(), tok, "l1", "test")
}

fn train(model: &mut LanguageModel, corpus: &Corpus, steps: u64, lr: f64) {
    let mut opt = AdamState::new(
        &model.params,
        AdamConfig {
            lr,
            ..Default::default()
        },
    );
    let mut it = BatchIterator::new(corpus, 8, model.context_length(), 1).unwrap();
    for step in 0..steps {
        clm_step(model, &it.next_cycling(), &mut opt, 1.0, StepIndex { step, epoch: 0 }).unwrap();
    }
}

// ---- corpus perplexity ----

#[test]
fn uniform_model_corpus_perplexity_is_vocab_size() {
    let tok = tokenizer();
    let corpus = corpus_of(&tok, &["abc", "dd a", "a"]);
    let ppl = corpus_perplexity(&UniformModel { vocab_size: 8 }, &corpus).unwrap();
    assert!((ppl - 8.0).abs() < 1e-9);
}

#[test]
fn single_document_matches_sequence_perplexity() {
    let tok = tokenizer();
    let model = tiny_model(tok.vocab_size(), 3);
    let corpus = corpus_of(&tok, &["abcab dcba"]);
    let a = corpus_perplexity(&model, &corpus).unwrap();
    let b = perplexity(&model, &corpus.documents[0]).unwrap();
    assert!((a - b).abs() <= 1e-12 * b);
}

#[test]
fn micro_average_weights_tokens_not_documents() {
    let tok = tokenizer();
    let model = tiny_model(tok.vocab_size(), 4);
    let texts = ["a", "abcdabcdabcdabcd abcd", "dc", "b a b a"];
    let corpus = corpus_of(&tok, &texts);
    let mut nll = 0.0;
    let mut n = 0;
    for d in &corpus.documents {
        let lp = model.log_probs_batch(&[d]).unwrap().remove(0);
        nll -= lp.iter().sum::<f64>();
        n += lp.len();
    }
    let ppl = corpus_perplexity(&model, &corpus).unwrap();
    assert!((ppl - (nll / n as f64).exp()).abs() < 1e-12 * ppl);

    let reversed: Vec<&str> = texts.iter().rev().copied().collect();
    let again = corpus_perplexity(&model, &corpus_of(&tok, &reversed)).unwrap();
    assert!((ppl - again).abs() < 1e-12 * ppl);
}

#[test]
fn documents_longer_than_context_are_windowed() {
    let tok = tokenizer();
    let model = tiny_model(tok.vocab_size(), 5);
    let long: String = "abcd ".repeat(40);
    let corpus = corpus_of(&tok, &[&long]);
    let (_, count) = corpus_nll(&model, &corpus).unwrap();
    assert_eq!(count, corpus.documents[0].len() - 1);
    assert!(corpus_perplexity(&model, &corpus).unwrap().is_finite());
}

#[test]
fn empty_corpus_is_an_eval_error() {
    let tok = tokenizer();
    let corpus = corpus_of(&tok, &[]);
    let err = corpus_perplexity(&UniformModel { vocab_size: 8 }, &corpus).unwrap_err();
    assert!(matches!(err, Error::Eval(_)));
}

#[test]
fn trained_model_approaches_unigram_oracle() {
    let tok = tokenizer();
    let chars = ['a', 'b', 'c', 'd'];
    let probs = [0.5, 0.25, 0.15, 0.1];
    let mut rng = seeds::rng(11, &[seeds::stream::DOCS]);
    let mut make = |n: usize| -> Vec<String> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(20..=40);
                (0..len)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = chars[3];
                        for (c, p) in chars.iter().zip(probs) {
                            acc += p;
                            if u < acc {
                                pick = *c;
                                break;
                            }
                        }
                        pick
                    })
                    .collect()
            })
            .collect()
    };
    let train_texts = make(400);
    let eval_texts = make(100);
    let train_corpus = Corpus::from_texts(train_texts.iter().map(String::as_str), &tok, "u", "iid");
    let eval_corpus = Corpus::from_texts(eval_texts.iter().map(String::as_str), &tok, "u", "iid");

    // Frequency table over every predicted token (content and EOS).
    let v = tok.vocab_size();
    let mut counts = vec![0.0; v];
    for d in &train_corpus.documents {
        d[1..].iter().for_each(|&t| counts[t as usize] += 1.0);
    }
    let total: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0usize);
    for d in &eval_corpus.documents {
        for &t in &d[1..] {
            nll -= (counts[t as usize] / total).ln();
            n += 1;
        }
    }
    let oracle = (nll / n as f64).exp();

    let mut model = tiny_model(v, 12);
    train(&mut model, &train_corpus, 300, 1e-2);
    let ppl = corpus_perplexity(&model, &eval_corpus).unwrap();
    assert!((ppl - oracle).abs() / oracle < 0.05, "model {ppl} vs oracle {oracle}");
}

// ---- zero-shot classification ----

fn binary_task(templates: [&str; 2], items: &[(usize, &str)]) -> EvalTask {
    EvalTask::new(
        "probe",
        templates.iter().map(|t| t.to_string()).collect(),
        items
            .iter()
            .map(|&(label, text)| TaskItem {
                text: text.into(),
                label,
            })
            .collect(),
    )
    .unwrap()
}

fn label0_rate(task: &EvalTask) -> f64 {
    task.label_counts()[0] as f64 / task.items.len() as f64
}

#[test]
fn identical_templates_tie_to_label_zero() {
    let tok = tokenizer();
    let model = tiny_model(tok.vocab_size(), 6);
    let task = binary_task(
        ["{text} ab", "{text} ab"],
        &[(0, "abc"), (1, "dd"), (1, "cab"), (0, "b"), (1, "a")],
    );
    let c = zero_shot_classify(&model, &task, &tok).unwrap();
    assert_eq!(c.predictions, vec![0; 5]);
    assert_eq!(c.accuracy, label0_rate(&task));
}

#[test]
fn uniform_model_accuracy_is_label_zero_frequency() {
    let tok = tokenizer();
    let task = binary_task(
        ["{text}", "{text} dddd"],
        &[(0, "ab"), (1, "ba"), (1, "cd"), (0, "dc"), (1, "aa"), (0, "bb"), (1, "c"), (0, "d")],
    );
    let c = zero_shot_classify(&UniformModel { vocab_size: 9 }, &task, &tok).unwrap();
    assert_eq!(c.predictions, vec![0; 8]);
    assert_eq!(c.accuracy, 0.5);
}

struct Oracle {
    gold: HashSet<Vec<u32>>,
    vocab: usize,
}

impl CausalLm for Oracle {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_len(&self) -> usize {
        usize::MAX
    }

    fn log_probs_batch(&self, seqs: &[&[u32]]) -> bambino::Result<Vec<Vec<f64>>> {
        Ok(seqs
            .iter()
            .map(|s| {
                let lp = if self.gold.contains(*s) { -1e-6 } else { -3.0 };
                vec![lp; s.len() - 1]
            })
            .collect())
    }
}

#[test]
fn oracle_model_is_always_right() {
    let tok = tokenizer();
    let task = binary_task(
        ["a {text}", "b {text}"],
        &[(0, "ab"), (1, "ba"), (1, "cd"), (0, "dc"), (1, "aa")],
    );
    let gold = task
        .items
        .iter()
        .map(|it| tok.encode_document(&task.fill(it.label, &it.text)))
        .collect();
    let oracle = Oracle {
        gold,
        vocab: tok.vocab_size(),
    };
    assert_eq!(zero_shot_classify(&oracle, &task, &tok).unwrap().accuracy, 1.0);
}

#[test]
fn permuting_items_permutes_predictions() {
    let tok = tokenizer();
    let mut model = tiny_model(tok.vocab_size(), 7);
    train(&mut model, &corpus_of(&tok, &["abab abab", "cdcd", "abcd"]), 30, 1e-2);
    let items = [(0, "abab"), (1, "dcdc"), (0, "ab ab"), (1, "ddcc"), (1, "ca"), (0, "bab")];
    let task = binary_task(["{text} ab", "{text} cd"], &items);
    let base = zero_shot_classify(&model, &task, &tok).unwrap();

    let order = [3, 0, 5, 1, 4, 2];
    let permuted_items: Vec<(usize, &str)> = order.iter().map(|&i| items[i]).collect();
    let permuted = zero_shot_classify(&model, &binary_task(["{text} ab", "{text} cd"], &permuted_items), &tok).unwrap();
    let expected: Vec<usize> = order.iter().map(|&i| base.predictions[i]).collect();
    assert_eq!(permuted.predictions, expected);
    assert_eq!(permuted.accuracy, base.accuracy);
}

#[test]
fn duplicated_template_never_beats_baseline() {
    let tok = tokenizer();
    let mut model = tiny_model(tok.vocab_size(), 8);
    train(&mut model, &corpus_of(&tok, &["abab abab", "cdcd", "abcd"]), 30, 1e-2);
    let items = [(0, "abab"), (1, "dcdc"), (1, "cd"), (1, "ddcc"), (0, "ba")];
    let dup = binary_task(["{text} ab", "{text} ab"], &items);
    assert!(zero_shot_classify(&model, &dup, &tok).unwrap().accuracy <= label0_rate(&dup));
}

#[test]
fn task_definition_errors() {
    let item = || vec![TaskItem {
        text: "ab".into(),
        label: 0,
    }];
    let no_slot = EvalTask::new("t", vec!["{text}".into(), "plain".into()], item());
    assert!(matches!(no_slot, Err(Error::TaskDefinition(_))));
    let one_label = EvalTask::new("t", vec!["{text}".into()], item());
    assert!(matches!(one_label, Err(Error::TaskDefinition(_))));
    let bad_gold = EvalTask::new(
        "t",
        vec!["{text}".into(), "{text}!".into()],
        vec![TaskItem {
            text: "ab".into(),
            label: 2,
        }],
    );
    assert!(matches!(bad_gold, Err(Error::TaskDefinition(_))));
    let parsed = EvalTask::parse_file_string("name = t\nlabel.0 = {text}\nlabel.1 = nope\n0\tab\n");
    assert!(matches!(parsed, Err(Error::TaskDefinition(_))));
}

#[test]
fn task_file_round_trip() {
    let task = binary_task(["{text} ab", "  {text}  cd"], &[(0, " ab  "), (1, "dc")]);
    let text = task.to_file_string();
    let parsed = EvalTask::parse_file_string(&text).unwrap();
    assert_eq!(parsed.items, task.items);
    assert_eq!(parsed.label_templates, vec!["{text} ab", "{text}  cd"]);
    assert_eq!(EvalTask::parse_file_string(&parsed.to_file_string()).unwrap(), parsed);
}

#[test]
fn builtin_tasks_are_balanced_and_deterministic() {
    let (l1, l2) = SyntheticGrammar::default_pair(5);
    let a = builtin_tasks(&l1, &l2, 40, 9).unwrap();
    let b = builtin_tasks(&l1, &l2, 40, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    for task in &a {
        assert_eq!(task.items.len(), 40);
        assert_eq!(task.label_counts(), vec![20, 20]);
        assert_eq!(EvalTask::parse_file_string(&task.to_file_string()).unwrap(), *task);
    }
    assert_ne!(builtin_tasks(&l1, &l2, 40, 10).unwrap(), a);
}

// ---- reports ----

fn l_corpora(tok: &CharTokenizer) -> (Corpus, Corpus) {
    (
        corpus_of(tok, &["abab abab", "aabb ab"]),
        corpus_of(tok, &["cdcd dc", "ddcc cd dc"]),
    )
}

#[test]
fn self_report_has_zero_deltas() {
    let tok = tokenizer();
    let (l1, l2) = l_corpora(&tok);
    let model = tiny_model(tok.vocab_size(), 9);
    let tasks = vec![binary_task(["{text} ab", "{text} cd"], &[(0, "ab"), (1, "cd")])];
    let inputs = ReportInputs {
        l1: &l1,
        l2: &l2,
        tasks: &tasks,
        tokenizer: &tok,
        mode: "bambino",
        seeds: vec![1],
    };
    let r = forgetting_report(&model, &model, &inputs).unwrap();
    let d = r.deltas.unwrap();
    assert_eq!(d.forgetting, 0.0);
    assert_eq!(d.acquisition, 0.0);
    assert!(d.tasks.values().all(|&v| v == 0.0));
}

#[test]
fn further_l2_training_acquires() {
    let tok = tokenizer();
    let (l1, l2) = l_corpora(&tok);
    let before = tiny_model(tok.vocab_size(), 10);
    let mut after = before.clone();
    train(&mut after, &l2, 40, 1e-2);
    let inputs = ReportInputs {
        l1: &l1,
        l2: &l2,
        tasks: &[],
        tokenizer: &tok,
        mode: "clm_only",
        seeds: vec![3],
    };
    let r = forgetting_report(&before, &after, &inputs).unwrap();
    let d = r.deltas.as_ref().unwrap();
    let b = r.before.as_ref().unwrap();
    assert!(d.acquisition > 0.0);
    assert!((d.acquisition - (b.l2_ppl - r.after.l2_ppl)).abs() <= 1e-12);
    assert!((d.forgetting - (r.after.l1_ppl - b.l1_ppl)).abs() <= 1e-12);
}

#[test]
fn mismatched_configs_are_rejected() {
    let tok = tokenizer();
    let (l1, l2) = l_corpora(&tok);
    let a = tiny_model(tok.vocab_size(), 1);
    let mut cfg = a.config.clone();
    cfg.d_model = 8;
    let b = LanguageModel::new(cfg, Role::Baby).unwrap();
    let inputs = ReportInputs {
        l1: &l1,
        l2: &l2,
        tasks: &[],
        tokenizer: &tok,
        mode: "bambino",
        seeds: vec![],
    };
    assert!(matches!(forgetting_report(&a, &b, &inputs), Err(Error::Checkpoint(_))));
}

fn sample_report() -> EvalReport {
    let m = |l1: f64, l2: f64, acc: f64| Measurement {
        l1_ppl: l1,
        l2_ppl: l2,
        tasks: [("language-id".to_string(), acc), ("plausibility".to_string(), 0.5)].into_iter().collect(),
    };
    EvalReport::new("bambino", vec![1, 2, 3], m(4.1, 7.3, 0.625), Some(m(3.7, 11.9, 0.5)))
}

#[test]
fn report_round_trips_exactly() {
    let r = sample_report();
    let parsed = EvalReport::parse_file_string(&r.to_file_string()).unwrap();
    assert_eq!(parsed, r);
    let d = parsed.deltas.unwrap();
    assert_eq!(d.forgetting, 4.1 - 3.7);
    assert_eq!(d.acquisition, 11.9 - 7.3);
    assert_eq!(d.tasks["language-id"], 0.625 - 0.5);

    let alone = EvalReport::new("no-ppo", vec![4], sample_report().after, None);
    assert_eq!(EvalReport::parse_file_string(&alone.to_file_string()).unwrap(), alone);
}

#[test]
fn report_with_inconsistent_delta_is_rejected() {
    let text = sample_report().to_file_string();
    let line = text.lines().find(|l| l.starts_with("delta.acquisition")).unwrap();
    let tampered = text.replace(line, "delta.acquisition = 1.0");
    assert!(matches!(EvalReport::parse_file_string(&tampered), Err(Error::Eval(_))));
}

// ---- ablation summary ----

fn seed_result(seed: u64, b: f64, n: f64, a: f64) -> SeedResult {
    SeedResult {
        seed,
        l2_ppl: [("bambino".to_string(), b), ("no-ppo".to_string(), n), ("no-alternating".to_string(), a)]
            .into_iter()
            .collect(),
    }
}

fn ablation(seeds: Vec<SeedResult>) -> AblationReport {
    AblationReport::new("bambino", vec!["no-ppo".into(), "no-alternating".into()], seeds).unwrap()
}

#[test]
fn median_of_odd_and_even_lengths() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}

#[test]
fn ablation_flags_seed_level_violations() {
    let r = ablation(vec![
        seed_result(1, 5.0, 6.0, 7.0),
        seed_result(2, 5.5, 5.2, 7.5),
        seed_result(3, 4.9, 6.1, 4.8),
    ]);
    assert!(r.median_ordering_holds());
    let v: Vec<(u64, String)> = r.violations().into_iter().map(|v| (v.seed, v.ablation)).collect();
    assert_eq!(v, vec![(2, "no-ppo".to_string()), (3, "no-alternating".to_string())]);
    let text = r.to_file_string();
    assert!(text.contains("violations = 2:no-ppo 3:no-alternating"));
    assert!(text.contains("median_ordering_holds = true"));
    assert_eq!(AblationReport::parse_file_string(&text).unwrap(), r);
}

#[test]
fn ablation_median_ordering_can_fail() {
    let r = ablation(vec![
        seed_result(1, 6.5, 5.5, 7.0),
        seed_result(2, 6.0, 5.2, 7.5),
        seed_result(3, 4.9, 6.1, 8.0),
    ]);
    assert!(!r.median_ordering_holds());
    assert!(r.to_file_string().contains("median_ordering_holds = false"));
}

#[test]
fn ablation_requires_every_mode() {
    let mut s = seed_result(1, 1.0, 2.0, 3.0);
    s.l2_ppl.shift_remove("no-ppo");
    assert!(AblationReport::new("bambino", vec!["no-ppo".into()], vec![s]).is_err());
}

#[test]
fn synthetic_tasks_run_against_a_model() {
    let (l1, l2) = SyntheticGrammar::default_pair(2);
    let docs = generate_synthetic(&l1, 4, 1).unwrap();
    let tok = CharTokenizer::from_texts(["abcdefghijklmnopqrs "].into_iter().chain(docs.iter().map(String::as_str))).unwrap();
    let model = tiny_model(tok.vocab_size(), 13);
    for task in builtin_tasks(&l1, &l2, 10, 4).unwrap() {
        let c = zero_shot_classify(&model, &task, &tok).unwrap();
        assert_eq!(c.predictions.len(), 10);
        assert!((0.0..=1.0).contains(&c.accuracy));
    }
}

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::perplexity::sequence_nlls;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::CausalLm;
use crate::seeds;
use crate::textdata::{generate_synthetic, normalize_text, CharTokenizer, SyntheticGrammar};

pub const SLOT: &str = "{text}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskItem {
    pub text: String,
    pub label: usize,
}

/// A classification task scored by filling each label's template with the
/// item text and picking the least perplexing result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalTask {
    pub name: String,
    pub label_templates: Vec<String>,
    pub items: Vec<TaskItem>,
}

impl EvalTask {
    pub fn new(name: impl Into<String>, label_templates: Vec<String>, items: Vec<TaskItem>) -> Result<Self> {
        let task = Self {
            name: name.into(),
            label_templates,
            items,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TaskDefinition(format!("{}: {m}", self.name)));
        if self.name.trim().is_empty() || self.name.contains(char::is_whitespace) {
            return bad(format!("task name {:?} must be a single non-empty word", self.name));
        }
        if self.label_templates.len() < 2 {
            return bad(format!("needs at least 2 labels, has {}", self.label_templates.len()));
        }
        for (i, t) in self.label_templates.iter().enumerate() {
            if !t.contains(SLOT) {
                return bad(format!("template {i} has no {SLOT} slot"));
            }
            if t.contains(['\n', '\t']) {
                return bad(format!("template {i} contains a tab or newline"));
            }
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.label >= self.label_templates.len() {
                return bad(format!("item {i} has label {} but only {} labels exist", item.label, self.label_templates.len()));
            }
            if item.text.contains(['\n', '\t']) {
                return bad(format!("item {i} contains a tab or newline"));
            }
        }
        Ok(())
    }

    pub fn fill(&self, label: usize, text: &str) -> String {
        normalize_text(&self.label_templates[label].replace(SLOT, text))
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_templates.len()];
        self.items.iter().for_each(|it| counts[it.label] += 1);
        counts
    }

    /// ```text
    /// name = plausibility
    /// label.0 = {text}
    /// label.1 = {text} reference
    /// 0<TAB>item text
    /// ```
    pub fn to_file_string(&self) -> String {
        let mut out = format!("name = {}\n", self.name);
        for (i, t) in self.label_templates.iter().enumerate() {
            out.push_str(&format!("label.{i} = {t}\n"));
        }
        for item in &self.items {
            out.push_str(&format!("{}\t{}\n", item.label, item.text));
        }
        out
    }

    pub fn parse_file_string(text: &str) -> Result<Self> {
        let err = |line: usize, m: &str| Error::TaskDefinition(format!("line {line}: {m}"));
        let mut name = None;
        let mut templates: Vec<(usize, String)> = Vec::new();
        let mut items = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if let Some((label, body)) = raw.split_once('\t') {
                let label = label
                    .trim()
                    .parse()
                    .map_err(|_| err(line_no, &format!("bad label index {label:?}")))?;
                items.push(TaskItem {
                    text: body.to_string(),
                    label,
                });
                continue;
            }
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, "expected `key = value` or `label<TAB>text`"))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "name" {
                name = Some(value.to_string());
            } else if let Some(idx) = key.strip_prefix("label.") {
                let idx = idx.parse().map_err(|_| err(line_no, &format!("bad template key {key}")))?;
                templates.push((idx, value.to_string()));
            } else {
                return Err(err(line_no, &format!("unknown key {key}")));
            }
        }
        templates.sort_by_key(|(i, _)| *i);
        if templates.iter().enumerate().any(|(want, (got, _))| want != *got) {
            return Err(Error::TaskDefinition("label templates must be numbered 0, 1, ... without gaps".into()));
        }
        let name = name.ok_or_else(|| Error::TaskDefinition("missing name".into()))?;
        Self::new(name, templates.into_iter().map(|(_, t)| t).collect(), items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Relative gap below which two template scores count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Predicts, per item, the label whose filled template has the lowest
/// perplexity; ties go to the lowest label index.
pub fn zero_shot_classify(model: &dyn CausalLm, task: &EvalTask, tokenizer: &CharTokenizer) -> Result<Classification> {
    task.validate()?;
    if task.items.is_empty() {
        return Err(Error::Eval(format!("task {} has no items", task.name)));
    }
    let labels = task.label_templates.len();
    let encoded: Vec<Vec<u32>> = task
        .items
        .iter()
        .flat_map(|it| (0..labels).map(|l| tokenizer.encode_document(&task.fill(l, &it.text))))
        .collect();
    let seqs: Vec<&[u32]> = encoded.iter().map(Vec::as_slice).collect();
    let nlls = sequence_nlls(model, &seqs)?;
    let predictions: Vec<usize> = nlls
        .chunks(labels)
        .map(|row| {
            let mean = |l: usize| row[l].0 / row[l].1 as f64;
            let mut best = 0;
            for l in 1..row.len() {
                let (m, b) = (mean(l), mean(best));
                if m < b - TIE_TOLERANCE * b.abs() {
                    best = l;
                }
            }
            best
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(&task.items)
        .filter(|(p, it)| **p == it.label)
        .count();
    Ok(Classification {
        accuracy: correct as f64 / task.items.len() as f64,
        predictions,
    })
}

const FRAGMENT_CHARS: usize = 40;
const REFERENCE_CHARS: usize = 24;

fn fragments(grammar: &SyntheticGrammar, n: usize, seed: u64) -> Result<Vec<String>> {
    Ok(generate_synthetic(grammar, n, seed)?
        .into_iter()
        .map(|d| normalize_text(&d.chars().take(FRAGMENT_CHARS).collect::<String>()))
        .collect())
}

fn reference(grammar: &SyntheticGrammar, seed: u64) -> Result<String> {
    let doc = generate_synthetic(grammar, 1, seed)?.remove(0);
    let mut text: String = doc.chars().cycle().take(REFERENCE_CHARS).collect();
    text = normalize_text(&text);
    Ok(text)
}

fn shuffled(text: &str, seed: u64) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    chars.shuffle(&mut seeds::rng(seed, &[seeds::stream::TASKS]));
    normalize_text(&chars.into_iter().collect::<String>())
}

/// Is the fragment from L1 or L2? Each template appends a short sample of
/// its language after the fragment.
pub fn language_id_task(l1: &SyntheticGrammar, l2: &SyntheticGrammar, n_items: usize, seed: u64) -> Result<EvalTask> {
    let per_class = n_items.div_ceil(2).max(1);
    let a = fragments(l1, per_class, seeds::derive(seed, &[seeds::stream::TASKS, 1]))?;
    let b = fragments(l2, per_class, seeds::derive(seed, &[seeds::stream::TASKS, 2]))?;
    let templates = vec![
        format!("{SLOT} {}", reference(l1, seeds::derive(seed, &[seeds::stream::TASKS, 3]))?),
        format!("{SLOT} {}", reference(l2, seeds::derive(seed, &[seeds::stream::TASKS, 4]))?),
    ];
    let items = a
        .into_iter()
        .zip(b)
        .flat_map(|(x, y)| [TaskItem { text: x, label: 0 }, TaskItem { text: y, label: 1 }])
        .take(n_items.max(2))
        .collect();
    EvalTask::new("language-id", templates, items)
}

/// Real L2 fragment (label 0) or the same fragment with its characters
/// shuffled (label 1). Label 1's template appends a half-shuffled reference
/// so that it wins once the fragment is less plausible than the reference.
pub fn plausibility_task(l2: &SyntheticGrammar, n_items: usize, seed: u64) -> Result<EvalTask> {
    let per_class = n_items.div_ceil(2).max(1);
    let real = fragments(l2, per_class, seeds::derive(seed, &[seeds::stream::TASKS, 5]))?;
    let base = reference(l2, seeds::derive(seed, &[seeds::stream::TASKS, 6]))?;
    let half = base.chars().count() / 2;
    let head: String = base.chars().take(half).collect();
    let tail: String = base.chars().skip(half).collect();
    let anchor = format!("{head}{}", shuffled(&tail, seeds::derive(seed, &[7])));
    let templates = vec![SLOT.to_string(), format!("{SLOT} {anchor}")];
    let items = real
        .into_iter()
        .enumerate()
        .flat_map(|(i, text)| {
            let noisy = shuffled(&text, seeds::derive(seed, &[8, i as u64]));
            [TaskItem { text, label: 0 }, TaskItem { text: noisy, label: 1 }]
        })
        .take(n_items.max(2))
        .collect();
    EvalTask::new("plausibility", templates, items)
}

/// The two tasks shipped with the synthetic language pair.
pub fn builtin_tasks(l1: &SyntheticGrammar, l2: &SyntheticGrammar, n_items: usize, seed: u64) -> Result<Vec<EvalTask>> {
    Ok(vec![
        language_id_task(l1, l2, n_items, seed)?,
        plausibility_task(l2, n_items, seed)?,
    ])
}

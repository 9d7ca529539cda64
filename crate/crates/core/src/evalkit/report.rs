use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::perplexity::corpus_perplexity;
use super::tasks::{zero_shot_classify, EvalTask};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kv::KvDoc;
use crate::model::{LanguageModel, TransformerConfig};
use crate::textdata::{CharTokenizer, Corpus};

/// Perplexities and task accuracies of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub l1_ppl: f64,
    pub l2_ppl: f64,
    pub tasks: IndexMap<String, f64>,
}

impl Measurement {
    fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set_f64(format!("{prefix}l1_ppl"), self.l1_ppl);
        doc.set_f64(format!("{prefix}l2_ppl"), self.l2_ppl);
        for (name, acc) in &self.tasks {
            doc.set_f64(format!("{prefix}task.{name}"), *acc);
        }
    }

    fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let task_prefix = format!("{prefix}task.");
        let mut tasks = IndexMap::new();
        for key in doc.keys() {
            if let Some(name) = key.strip_prefix(&task_prefix) {
                tasks.insert(name.to_string(), doc.parse_value(key)?);
            }
        }
        Ok(Self {
            l1_ppl: doc.parse_value(&format!("{prefix}l1_ppl"))?,
            l2_ppl: doc.parse_value(&format!("{prefix}l2_ppl"))?,
            tasks,
        })
    }
}

pub fn measure(
    model: &LanguageModel,
    l1: &Corpus,
    l2: &Corpus,
    tasks: &[EvalTask],
    tokenizer: &CharTokenizer,
) -> Result<Measurement> {
    let mut accs = IndexMap::new();
    for task in tasks {
        if accs.contains_key(&task.name) {
            return Err(Error::TaskDefinition(format!("task name {} is used twice", task.name)));
        }
        accs.insert(task.name.clone(), zero_shot_classify(model, task, tokenizer)?.accuracy);
    }
    Ok(Measurement {
        l1_ppl: corpus_perplexity(model, l1)?,
        l2_ppl: corpus_perplexity(model, l2)?,
        tasks: accs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deltas {
    /// L1 perplexity after minus before; positive means L1 got worse.
    pub forgetting: f64,
    /// L2 perplexity before minus after; positive means L2 got better.
    pub acquisition: f64,
    /// Accuracy after minus before, per task present in both.
    pub tasks: IndexMap<String, f64>,
}

impl Deltas {
    pub fn between(before: &Measurement, after: &Measurement) -> Self {
        Self {
            forgetting: after.l1_ppl - before.l1_ppl,
            acquisition: before.l2_ppl - after.l2_ppl,
            tasks: after
                .tasks
                .iter()
                .filter_map(|(k, a)| before.tasks.get(k).map(|b| (k.clone(), a - b)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub after: Measurement,
    pub before: Option<Measurement>,
    pub deltas: Option<Deltas>,
}

impl EvalReport {
    pub fn new(mode: impl Into<String>, seeds: Vec<u64>, after: Measurement, before: Option<Measurement>) -> Self {
        let deltas = before.as_ref().map(|b| Deltas::between(b, &after));
        Self {
            mode: mode.into(),
            seeds,
            after,
            before,
            deltas,
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("mode", &self.mode);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        doc.set("seeds", seeds.join(" "));
        self.after.write_kv(&mut doc, "after.");
        if let Some(b) = &self.before {
            b.write_kv(&mut doc, "before.");
        }
        if let Some(d) = &self.deltas {
            doc.set_f64("delta.forgetting", d.forgetting);
            doc.set_f64("delta.acquisition", d.acquisition);
            for (name, v) in &d.tasks {
                doc.set_f64(format!("delta.task.{name}"), *v);
            }
        }
        doc
    }

    pub fn to_file_string(&self) -> String {
        self.to_kv().render()
    }

    /// Parses a report and checks its deltas against the stored values.
    pub fn parse_file_string(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let seeds = doc
            .require("seeds")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Eval(format!("bad seed {s:?}"))))
            .collect::<Result<Vec<u64>>>()?;
        let before = if doc.get("before.l1_ppl").is_some() {
            Some(Measurement::read_kv(&doc, "before.")?)
        } else {
            None
        };
        let report = Self::new(doc.require("mode")?, seeds, Measurement::read_kv(&doc, "after.")?, before);
        let mut stored = Vec::new();
        for key in doc.keys().filter(|k| k.starts_with("delta.")) {
            stored.push((key, doc.parse_value::<f64>(key)?));
        }
        let expected = report.to_kv();
        let expected_count = expected.keys().filter(|k| k.starts_with("delta.")).count();
        if stored.len() != expected_count {
            return Err(Error::Eval("report deltas do not match its measurements".into()));
        }
        for (key, value) in stored {
            let want: f64 = expected.parse_value(key).map_err(|_| Error::Eval(format!("unexpected key {key}")))?;
            if (want - value).abs() > 1e-12 * want.abs().max(1.0) {
                return Err(Error::Eval(format!("{key} = {value} disagrees with the measurements ({want})")));
            }
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }
}

fn same_architecture(a: &TransformerConfig, b: &TransformerConfig) -> bool {
    TransformerConfig { seed: 0, ..a.clone() } == TransformerConfig { seed: 0, ..b.clone() }
}

pub struct ReportInputs<'a> {
    pub l1: &'a Corpus,
    pub l2: &'a Corpus,
    pub tasks: &'a [EvalTask],
    pub tokenizer: &'a CharTokenizer,
    pub mode: &'a str,
    pub seeds: Vec<u64>,
}

/// Measures the baby before and after continual training.
pub fn forgetting_report(before: &LanguageModel, after: &LanguageModel, inputs: &ReportInputs) -> Result<EvalReport> {
    if !same_architecture(&before.config, &after.config) {
        return Err(Error::Checkpoint(format!(
            "model configs differ: {:?} vs {:?}",
            before.config, after.config
        )));
    }
    let m = |model| measure(model, inputs.l1, inputs.l2, inputs.tasks, inputs.tokenizer);
    Ok(EvalReport::new(inputs.mode, inputs.seeds.clone(), m(after)?, Some(m(before)?)))
}

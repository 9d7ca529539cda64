use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kv::KvDoc;

/// Final L2 perplexity of every schedule mode for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub l2_ppl: IndexMap<String, f64>,
}

/// Compares a reference mode against the ablations across seeds. Lower
/// L2 perplexity is better.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub reference: String,
    pub ablations: Vec<String>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub seed: u64,
    pub ablation: String,
    pub reference_ppl: f64,
    pub ablation_ppl: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl AblationReport {
    pub fn new(reference: impl Into<String>, ablations: Vec<String>, seeds: Vec<SeedResult>) -> Result<Self> {
        let report = Self {
            reference: reference.into(),
            ablations,
            seeds,
        };
        for s in &report.seeds {
            for mode in report.modes() {
                if !s.l2_ppl.contains_key(mode) {
                    return Err(Error::Eval(format!("seed {} has no result for mode {mode}", s.seed)));
                }
            }
        }
        Ok(report)
    }

    pub fn modes(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.reference.as_str()).chain(self.ablations.iter().map(String::as_str))
    }

    pub fn median_ppl(&self, mode: &str) -> Option<f64> {
        let v: Vec<f64> = self.seeds.iter().filter_map(|s| s.l2_ppl.get(mode).copied()).collect();
        median(&v)
    }

    /// Every (seed, ablation) pair where the reference mode ended with a
    /// higher L2 perplexity than the ablation.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for s in &self.seeds {
            let r = s.l2_ppl[&self.reference];
            for a in &self.ablations {
                let p = s.l2_ppl[a];
                if r > p {
                    out.push(Violation {
                        seed: s.seed,
                        ablation: a.clone(),
                        reference_ppl: r,
                        ablation_ppl: p,
                    });
                }
            }
        }
        out
    }

    /// Whether the reference median is no higher than every ablation median.
    pub fn median_ordering_holds(&self) -> bool {
        let Some(r) = self.median_ppl(&self.reference) else {
            return false;
        };
        self.ablations
            .iter()
            .all(|a| self.median_ppl(a).is_some_and(|p| r <= p))
    }

    pub fn to_file_string(&self) -> String {
        let mut doc = KvDoc::new();
        doc.set("reference", &self.reference);
        doc.set("ablations", self.ablations.join(" "));
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.seed.to_string()).collect();
        doc.set("seeds", seeds.join(" "));
        for s in &self.seeds {
            for mode in self.modes() {
                doc.set_f64(format!("seed.{}.{mode}.l2_ppl", s.seed), s.l2_ppl[mode]);
            }
        }
        for mode in self.modes() {
            if let Some(m) = self.median_ppl(mode) {
                doc.set_f64(format!("median.{mode}.l2_ppl"), m);
            }
        }
        doc.set("median_ordering_holds", self.median_ordering_holds());
        let flagged: Vec<String> = self
            .violations()
            .iter()
            .map(|v| format!("{}:{}", v.seed, v.ablation))
            .collect();
        doc.set("violations", if flagged.is_empty() { "none".to_string() } else { flagged.join(" ") });
        doc.render()
    }

    pub fn parse_file_string(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let reference = doc.require("reference")?.to_string();
        let ablations: Vec<String> = doc.require("ablations")?.split_whitespace().map(String::from).collect();
        let mut seeds = Vec::new();
        for raw in doc.require("seeds")?.split_whitespace() {
            let seed: u64 = raw.parse().map_err(|_| Error::Eval(format!("bad seed {raw:?}")))?;
            let mut l2_ppl = IndexMap::new();
            for mode in std::iter::once(&reference).chain(&ablations) {
                l2_ppl.insert(mode.clone(), doc.parse_value(&format!("seed.{seed}.{mode}.l2_ppl"))?);
            }
            seeds.push(SeedResult { seed, l2_ppl });
        }
        Self::new(reference, ablations, seeds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }
}

//! Order-n character Markov sources used as stand-in languages.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::tokenizer::{format_vocab_entry, parse_vocab_entry};
use crate::error::{Error, Result};
use crate::kv::{format_f64, KvDoc};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthDistribution {
    /// Every document has exactly `mean_len` characters.
    Fixed,
    /// Uniform over `[mean/2, 3·mean/2]`.
    Uniform,
    /// Poisson with the given mean, floored at 1.
    Poisson,
}

impl fmt::Display for LengthDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Uniform => "uniform",
            Self::Poisson => "poisson",
        })
    }
}

impl FromStr for LengthDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "uniform" => Ok(Self::Uniform),
            "poisson" => Ok(Self::Poisson),
            other => Err(Error::GrammarValidation(format!("unknown length distribution {other:?}"))),
        }
    }
}

impl LengthDistribution {
    pub fn sample<R: Rng + ?Sized>(self, mean: f64, rng: &mut R) -> usize {
        let mean = mean.max(1.0);
        let len = match self {
            Self::Fixed => mean.round() as usize,
            Self::Uniform => {
                let lo = (mean / 2.0).round() as usize;
                let hi = (1.5 * mean).round() as usize;
                rng.random_range(lo..=hi.max(lo))
            }
            Self::Poisson => Poisson::new(mean).expect("positive mean").sample(rng) as usize,
        };
        len.max(1)
    }
}

/// Conditional next-character table over the last `order` characters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGrammar {
    pub order: usize,
    pub alphabet: Vec<char>,
    /// Row-major `[|A|^order × |A|]`; the context index reads the context
    /// as a base-|A| number, oldest character most significant.
    pub transitions: Vec<f64>,
    pub mean_len: f64,
    pub len_dist: LengthDistribution,
    pub seed: u64,
}

impl SyntheticGrammar {
    pub fn num_contexts(&self) -> usize {
        self.alphabet.len().pow(self.order as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alphabet.len();
        if a == 0 {
            return Err(Error::GrammarValidation("empty alphabet".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(c) = self.alphabet.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::GrammarValidation(format!("duplicate alphabet character {c:?}")));
        }
        let expected = self.num_contexts() * a;
        if self.transitions.len() != expected {
            return Err(Error::GrammarValidation(format!(
                "transition table has {} entries, expected {expected}",
                self.transitions.len()
            )));
        }
        for (ctx, row) in self.transitions.chunks(a).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::GrammarValidation(format!("row {ctx} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::GrammarValidation(format!("row {ctx} sums to {total}")));
            }
        }
        if !(self.mean_len.is_finite() && self.mean_len >= 1.0) {
            return Err(Error::GrammarValidation(format!("mean_len {} must be ≥ 1", self.mean_len)));
        }
        Ok(())
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let a = self.alphabet.len();
        &self.transitions[context * a..(context + 1) * a]
    }

    fn shift(&self, context: usize, next: usize) -> usize {
        if self.order == 0 {
            0
        } else {
            (context * self.alphabet.len() + next) % self.num_contexts()
        }
    }

    pub fn char_index(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|&x| x == c)
    }

    /// Stationary distribution over contexts, by power iteration on the lazy
    /// chain (same fixed point, no periodicity issues).
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.num_contexts();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (ctx, &mass) in pi.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for (c, &p) in self.row(ctx).iter().enumerate() {
                    next[self.shift(ctx, c)] += mass * p;
                }
            }
            let mut delta = 0.0;
            for (p, q) in pi.iter_mut().zip(&next) {
                let lazy = 0.5 * *p + 0.5 * q;
                delta += (lazy - *p).abs();
                *p = lazy;
            }
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats per character.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        pi.iter()
            .enumerate()
            .map(|(ctx, &w)| {
                let h: f64 = self
                    .row(ctx)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                w * h
            })
            .sum()
    }

    /// Mean per-character negative log-likelihood of `text` under the table,
    /// skipping the first `order` characters (no full context yet).
    /// Returns `(total_nll, scored_chars)`.
    pub fn score_text(&self, text: &str) -> Option<(f64, usize)> {
        let idx: Option<Vec<usize>> = text.chars().map(|c| self.char_index(c)).collect();
        let idx = idx?;
        let mut ctx = 0;
        let mut total = 0.0;
        let mut count = 0;
        for (i, &c) in idx.iter().enumerate() {
            if i >= self.order {
                let p = self.row(ctx)[c];
                if p <= 0.0 {
                    return None;
                }
                total -= p.ln();
                count += 1;
            }
            ctx = self.shift(ctx, c);
        }
        Some((total, count))
    }

    fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    fn context_chars(&self, mut context: usize) -> Vec<usize> {
        let a = self.alphabet.len();
        let mut out = vec![0; self.order];
        for slot in out.iter_mut().rev() {
            *slot = context % a;
            context /= a;
        }
        out
    }

    /// Procedurally builds a peaked transition table: each context prefers
    /// three next characters, with a small floor on the rest. A space never
    /// follows a space.
    pub fn procedural(alphabet: Vec<char>, order: usize, mean_len: f64, seed: u64) -> Self {
        let a = alphabet.len();
        let contexts = a.pow(order as u32);
        let mut rng = seeds::rng(seed, &[seeds::stream::GRAMMAR]);
        let space = alphabet.iter().position(|&c| c == ' ');
        let preferred = [6.0, 3.0, 1.5];
        let mut transitions = Vec::with_capacity(contexts * a);
        for ctx in 0..contexts {
            let mut row = vec![0.05; a];
            let mut picks: Vec<usize> = (0..a).collect();
            for (k, w) in preferred.iter().enumerate().take(a) {
                let j = rng.random_range(k..a);
                picks.swap(k, j);
                row[picks[k]] += w;
            }
            let last = if order == 0 { None } else { Some(ctx % a) };
            if let (Some(s), Some(l)) = (space, last) {
                if s == l {
                    row[s] = 0.0;
                }
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            transitions.extend(row);
        }
        Self {
            order,
            alphabet,
            transitions,
            mean_len,
            len_dist: LengthDistribution::Uniform,
            seed,
        }
    }

    /// The built-in L1/L2 pair: 13-symbol alphabets sharing six symbols
    /// (≈30% of the union) with independently drawn transition structure.
    pub fn default_pair(seed: u64) -> (Self, Self) {
        let l1: Vec<char> = "abcdefghijkl ".chars().collect();
        let l2: Vec<char> = "hijklmnopqrs ".chars().collect();
        (
            Self::procedural(l1, 2, 64.0, seeds::derive(seed, &[1])),
            Self::procedural(l2, 2, 64.0, seeds::derive(seed, &[2])),
        )
    }

    pub fn to_file_string(&self) -> String {
        let mut doc = KvDoc::new();
        doc.set("order", self.order);
        let alphabet: Vec<String> = self.alphabet.iter().map(|&c| format_vocab_entry(c)).collect();
        doc.set("alphabet", alphabet.join(" "));
        let probs: Vec<String> = self.transitions.iter().map(|&p| format_f64(p)).collect();
        doc.set("transitions", probs.join(" "));
        doc.set_f64("mean_len", self.mean_len);
        doc.set("len_dist", self.len_dist);
        doc.set("seed", self.seed);
        doc.render()
    }

    pub fn parse_file_string(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text).map_err(|e| Error::GrammarValidation(e.to_string()))?;
        let g = || -> Result<Self> {
            let alphabet = doc
                .require("alphabet")?
                .split_whitespace()
                .map(|e| parse_vocab_entry(e).ok_or_else(|| Error::GrammarValidation(format!("bad alphabet entry {e:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let transitions = doc
                .require("transitions")?
                .split_whitespace()
                .map(|p| p.parse::<f64>().map_err(|e| Error::GrammarValidation(format!("bad probability {p:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                order: doc.parse_value("order")?,
                alphabet,
                transitions,
                mean_len: doc.parse_value("mean_len")?,
                len_dist: doc.require("len_dist")?.parse()?,
                seed: doc.parse_or("seed", 0)?,
            })
        };
        let grammar = g().map_err(|e| match e {
            Error::Config(m) => Error::GrammarValidation(m),
            other => other,
        })?;
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }
}

/// Samples `n_docs` documents from the chain; each starts from a context
/// drawn from the stationary distribution.
pub fn generate_synthetic(grammar: &SyntheticGrammar, n_docs: usize, seed: u64) -> Result<Vec<String>> {
    grammar.validate()?;
    if n_docs == 0 {
        return Err(Error::GrammarValidation("n_docs must be at least 1".into()));
    }
    let pi = grammar.stationary();
    let mut rng = seeds::rng(seed, &[seeds::stream::DOCS]);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let len = grammar.len_dist.sample(grammar.mean_len, &mut rng);
        let mut ctx = SyntheticGrammar::sample_index(&pi, &mut rng);
        let mut doc: String = grammar
            .context_chars(ctx)
            .into_iter()
            .take(len)
            .map(|i| grammar.alphabet[i])
            .collect();
        for _ in grammar.order..len {
            let next = SyntheticGrammar::sample_index(grammar.row(ctx), &mut rng);
            doc.push(grammar.alphabet[next]);
            ctx = grammar.shift(ctx, next);
        }
        docs.push(doc);
    }
    Ok(docs)
}

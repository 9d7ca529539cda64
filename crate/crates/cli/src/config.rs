use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bambino::kv::KvDoc;
use bambino::model::TransformerConfig;
use bambino::numerics::AdamConfig;
use bambino::seeds;
use bambino::training::{PpoConfig, RewardConfig, RunConfig, ScheduleConfig};

/// Model extents; the vocabulary size comes from the tokenizer and the
/// initialization seed from the master seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub init_std: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            context_length: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            init_std: 0.02,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            context_length: self.context_length,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            init_std: self.init_std,
            seed,
        }
    }

    fn write_kv(&self, doc: &mut KvDoc, prefix: &str) {
        doc.set(format!("{prefix}context_length"), self.context_length);
        doc.set(format!("{prefix}d_model"), self.d_model);
        doc.set(format!("{prefix}n_heads"), self.n_heads);
        doc.set(format!("{prefix}n_layers"), self.n_layers);
        doc.set(format!("{prefix}d_ff"), self.d_ff);
        doc.set_f64(format!("{prefix}init_std"), self.init_std);
    }

    fn read_kv(doc: &KvDoc, prefix: &str) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            context_length: doc.parse_or(&format!("{prefix}context_length"), d.context_length)?,
            d_model: doc.parse_or(&format!("{prefix}d_model"), d.d_model)?,
            n_heads: doc.parse_or(&format!("{prefix}n_heads"), d.n_heads)?,
            n_layers: doc.parse_or(&format!("{prefix}n_layers"), d.n_layers)?,
            d_ff: doc.parse_or(&format!("{prefix}d_ff"), d.d_ff)?,
            init_std: doc.parse_or(&format!("{prefix}init_std"), d.init_std)?,
        })
    }
}

/// Where a grammar comes from: the shipped pair or a grammar file.
#[derive(Clone, Debug, PartialEq)]
pub enum GrammarSource {
    Builtin,
    File(PathBuf),
}

impl GrammarSource {
    fn parse(raw: &str) -> Self {
        match raw {
            "builtin" => Self::Builtin,
            path => Self::File(PathBuf::from(path)),
        }
    }

    fn render(&self) -> String {
        match self {
            Self::Builtin => "builtin".into(),
            Self::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub l1_grammar: GrammarSource,
    pub l2_grammar: GrammarSource,
    pub l1_train_docs: usize,
    pub l2_train_docs: usize,
    pub eval_docs: usize,
    pub task_items: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            l1_grammar: GrammarSource::Builtin,
            l2_grammar: GrammarSource::Builtin,
            l1_train_docs: 1600,
            l2_train_docs: 1920,
            eval_docs: 200,
            task_items: 100,
        }
    }
}

/// File locations. Relative paths are taken from the output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub l1_train: PathBuf,
    pub l1_eval: PathBuf,
    pub l2_train: PathBuf,
    pub l2_eval: PathBuf,
    pub tokenizer: PathBuf,
    pub grammars: PathBuf,
    pub tasks: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            l1_train: "data/l1_train.txt".into(),
            l1_eval: "data/l1_eval.txt".into(),
            l2_train: "data/l2_train.txt".into(),
            l2_eval: "data/l2_eval.txt".into(),
            tokenizer: "data/tokenizer.txt".into(),
            grammars: "data/grammars".into(),
            tasks: "data/tasks".into(),
            checkpoints: "checkpoints".into(),
            metrics: "metrics".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    fn entries(&mut self) -> [(&'static str, &mut PathBuf); 10] {
        [
            ("l1_train", &mut self.l1_train),
            ("l1_eval", &mut self.l1_eval),
            ("l2_train", &mut self.l2_train),
            ("l2_eval", &mut self.l2_eval),
            ("tokenizer", &mut self.tokenizer),
            ("grammars", &mut self.grammars),
            ("tasks", &mut self.tasks),
            ("checkpoints", &mut self.checkpoints),
            ("metrics", &mut self.metrics),
            ("reports", &mut self.reports),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub baby_steps: u64,
    pub parent_steps: u64,
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-4,
            grad_clip: 1.0,
            baby_steps: 2000,
            parent_steps: 2000,
            record_wall_clock: false,
        }
    }
}

/// Everything one experiment needs, stored as flat dotted `key = value`
/// text.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub baby: ModelShape,
    pub parent: ModelShape,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            baby: ModelShape::default(),
            parent: ModelShape::default(),
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Training stages, used to keep their random streams apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Baby,
    Parent,
    Continual,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Baby => 1,
            Stage::Parent => 2,
            Stage::Continual => 3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, shape) in [("baby", &self.baby), ("parent", &self.parent)] {
            shape.config(1, 0).validate().with_context(|| format!("{name} model"))?;
        }
        self.reward.validate()?;
        self.ppo.validate()?;
        self.schedule.validate()?;
        let d = &self.data;
        if d.l1_train_docs == 0 || d.l2_train_docs == 0 || d.eval_docs == 0 {
            bail!("document counts must be at least 1");
        }
        if d.task_items < 2 {
            bail!("data.task_items must be at least 2");
        }
        let t = &self.train;
        if t.batch_size == 0 {
            bail!("train.batch_size must be at least 1");
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            bail!("train.learning_rate must be positive");
        }
        if !(t.grad_clip.is_finite() && t.grad_clip > 0.0) {
            bail!("train.grad_clip must be positive");
        }
        if self.ppo.prompt_len + self.ppo.max_new_tokens > self.baby.context_length {
            bail!(
                "ppo.prompt_len + ppo.max_new_tokens ({}) exceeds the baby context length {}",
                self.ppo.prompt_len + self.ppo.max_new_tokens,
                self.baby.context_length
            );
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("seed", self.seed);
        let mut paths = self.paths.clone();
        for (name, p) in paths.entries() {
            doc.set(format!("paths.{name}"), p.display());
        }
        let d = &self.data;
        doc.set("data.l1_grammar", d.l1_grammar.render());
        doc.set("data.l2_grammar", d.l2_grammar.render());
        doc.set("data.l1_train_docs", d.l1_train_docs);
        doc.set("data.l2_train_docs", d.l2_train_docs);
        doc.set("data.eval_docs", d.eval_docs);
        doc.set("data.task_items", d.task_items);
        self.baby.write_kv(&mut doc, "baby.");
        self.parent.write_kv(&mut doc, "parent.");
        self.reward.write_kv(&mut doc, "reward.");
        self.ppo.write_kv(&mut doc, "ppo.");
        self.schedule.write_kv(&mut doc, "schedule.");
        let t = &self.train;
        doc.set("train.batch_size", t.batch_size);
        doc.set_f64("train.learning_rate", t.learning_rate);
        doc.set_f64("train.grad_clip", t.grad_clip);
        doc.set("train.baby_steps", t.baby_steps);
        doc.set("train.parent_steps", t.parent_steps);
        doc.set("train.record_wall_clock", t.record_wall_clock);
        doc
    }

    pub fn to_file_string(&self) -> String {
        self.to_kv().render()
    }

    /// Parses config text. Missing keys take their defaults; unknown keys
    /// are rejected so typos do not pass silently.
    pub fn parse_file_string(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let known = Self::default().to_kv();
        if let Some(k) = doc.keys().find(|k| known.get(k).is_none()) {
            bail!("unknown config key {k}");
        }
        let mut paths = Paths::default();
        for (name, p) in paths.entries() {
            if let Some(v) = doc.get(&format!("paths.{name}")) {
                *p = PathBuf::from(v);
            }
        }
        let dd = DataConfig::default();
        let data = DataConfig {
            l1_grammar: doc.get("data.l1_grammar").map_or(dd.l1_grammar, GrammarSource::parse),
            l2_grammar: doc.get("data.l2_grammar").map_or(dd.l2_grammar, GrammarSource::parse),
            l1_train_docs: doc.parse_or("data.l1_train_docs", dd.l1_train_docs)?,
            l2_train_docs: doc.parse_or("data.l2_train_docs", dd.l2_train_docs)?,
            eval_docs: doc.parse_or("data.eval_docs", dd.eval_docs)?,
            task_items: doc.parse_or("data.task_items", dd.task_items)?,
        };
        let td = TrainConfig::default();
        let train = TrainConfig {
            batch_size: doc.parse_or("train.batch_size", td.batch_size)?,
            learning_rate: doc.parse_or("train.learning_rate", td.learning_rate)?,
            grad_clip: doc.parse_or("train.grad_clip", td.grad_clip)?,
            baby_steps: doc.parse_or("train.baby_steps", td.baby_steps)?,
            parent_steps: doc.parse_or("train.parent_steps", td.parent_steps)?,
            record_wall_clock: doc.parse_or("train.record_wall_clock", td.record_wall_clock)?,
        };
        let cfg = Self {
            seed: doc.parse_or("seed", 0)?,
            paths,
            data,
            baby: ModelShape::read_kv(&doc, "baby.")?,
            parent: ModelShape::read_kv(&doc, "parent.")?,
            reward: RewardConfig::read_kv(&doc, "reward.")?,
            ppo: PpoConfig::read_kv(&doc, "ppo.")?,
            schedule: ScheduleConfig::read_kv(&doc, "schedule.")?,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_file_string(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn resolve(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }

    pub fn seed_for(&self, path: &[u64]) -> u64 {
        seeds::derive(self.seed, path)
    }

    pub fn init_seed(&self, stage: Stage) -> u64 {
        self.seed_for(&[seeds::stream::INIT, stage.tag()])
    }

    pub fn run_config(&self, stage: Stage) -> RunConfig {
        RunConfig {
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.learning_rate,
                ..AdamConfig::default()
            },
            grad_clip: self.train.grad_clip,
            seed: self.seed_for(&[seeds::stream::SHUFFLE, stage.tag()]),
            record_wall_clock: self.train.record_wall_clock,
            label: String::new(),
        }
    }
}

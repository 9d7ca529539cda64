use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bambino::checkpoint::{checksum, Checkpoint};
use bambino::evalkit::{
    builtin_tasks, forgetting_report, measure, AblationReport, EvalReport, EvalTask, ReportInputs, SeedResult,
};
use bambino::io::write_atomic;
use bambino::model::{LanguageModel, Role};
use bambino::seeds;
use bambino::textdata::{build_tokenizer, generate_synthetic, load_corpus, normalize_text, CharTokenizer, Corpus, SyntheticGrammar};
use bambino::training::{
    registry, Continual, EvalSets, MetricsRecord, Pretrain, RunConfig, TrainerState,
};
use indexmap::IndexMap;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, GrammarSource, Stage};

/// Label used for a schedule in directory names and reports.
pub fn mode_label(mode: &str) -> Result<&'static str> {
    let reg = registry();
    let entry = reg.resolve(mode)?;
    Ok(entry.aliases.first().copied().unwrap_or(entry.name))
}

pub const REFERENCE_MODE: &str = "bambino";

/// A config bound to an output directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    /// Print a progress line every this many steps (0 = silent).
    pub progress_every: u64,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            out: out.into(),
            progress_every: 0,
        }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(&self.out, p)
    }

    pub fn checkpoint_root(&self, name: &str) -> PathBuf {
        self.path(&self.cfg.paths.checkpoints).join(name)
    }

    pub fn metrics_file(&self, name: &str) -> PathBuf {
        self.path(&self.cfg.paths.metrics).join(format!("{name}.jsonl"))
    }

    pub fn report_file(&self, name: &str) -> PathBuf {
        self.path(&self.cfg.paths.reports).join(format!("{name}.txt"))
    }

    fn require(&self, p: &Path, what: &str) -> Result<PathBuf> {
        let full = self.path(p);
        if !full.exists() {
            bail!("configuration: {what} {} does not exist (run gen-data first?)", full.display());
        }
        Ok(full)
    }

    pub fn tokenizer(&self) -> Result<CharTokenizer> {
        let p = self.require(&self.cfg.paths.tokenizer, "tokenizer")?;
        Ok(CharTokenizer::load(&p)?)
    }

    pub fn corpus(&self, which: CorpusFile, tok: &CharTokenizer) -> Result<Corpus> {
        let (p, tag) = match which {
            CorpusFile::L1Train => (&self.cfg.paths.l1_train, "L1"),
            CorpusFile::L1Eval => (&self.cfg.paths.l1_eval, "L1"),
            CorpusFile::L2Train => (&self.cfg.paths.l2_train, "L2"),
            CorpusFile::L2Eval => (&self.cfg.paths.l2_eval, "L2"),
        };
        let full = self.require(p, "corpus")?;
        Ok(load_corpus(&full, tok, tag)?)
    }

    pub fn tasks(&self) -> Result<Vec<EvalTask>> {
        let dir = self.require(&self.cfg.paths.tasks, "task directory")?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "task"));
        files.sort();
        files.iter().map(|p| Ok(EvalTask::load(p)?)).collect()
    }

    fn grammar(&self, source: &GrammarSource, builtin: SyntheticGrammar) -> Result<SyntheticGrammar> {
        match source {
            GrammarSource::Builtin => Ok(builtin),
            GrammarSource::File(p) => {
                let full = self.require(p, "grammar")?;
                Ok(SyntheticGrammar::load(&full)?)
            }
        }
    }

    fn reporter(&self, label: String) -> impl Fn(&MetricsRecord) {
        let every = self.progress_every;
        move |rec: &MetricsRecord| {
            let at_eval = rec.eval_l2_ppl.is_some();
            if every == 0 || !(at_eval || (rec.step + 1) % every == 0) {
                return;
            }
            let mut line = format!("[{label}] step {} epoch {} {}", rec.step + 1, rec.epoch, rec.phase);
            if let Some(l) = rec.loss {
                line.push_str(&format!(" loss {l:.4}"));
            }
            if let Some(r) = rec.mean_reward {
                line.push_str(&format!(" reward {r:.3}"));
            }
            if let (Some(a), Some(b)) = (rec.eval_l1_ppl, rec.eval_l2_ppl) {
                line.push_str(&format!(" | eval ppl L1 {a:.3} L2 {b:.3}"));
            }
            eprintln!("{line}");
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum CorpusFile {
    L1Train,
    L1Eval,
    L2Train,
    L2Eval,
}

fn write_docs(path: &Path, docs: &[String]) -> Result<usize> {
    let mut text = String::new();
    let mut n = 0;
    for d in docs {
        let line = normalize_text(d);
        if !line.is_empty() {
            text.push_str(&line);
            text.push('\n');
            n += 1;
        }
    }
    write_atomic(path, text.as_bytes())?;
    Ok(n)
}

/// Writes both grammars, the four corpora, the shared tokenizer and the
/// built-in evaluation tasks.
pub fn gen_data(ws: &Workspace) -> Result<Value> {
    let cfg = &ws.cfg;
    let (b1, b2) = SyntheticGrammar::default_pair(cfg.seed_for(&[seeds::stream::GRAMMAR]));
    let l1 = ws.grammar(&cfg.data.l1_grammar, b1)?;
    let l2 = ws.grammar(&cfg.data.l2_grammar, b2)?;
    let gdir = ws.path(&cfg.paths.grammars);
    l1.save(&gdir.join("l1.grammar"))?;
    l2.save(&gdir.join("l2.grammar"))?;

    let d = &cfg.data;
    let plan = [
        (&cfg.paths.l1_train, &l1, d.l1_train_docs, 1),
        (&cfg.paths.l1_eval, &l1, d.eval_docs, 2),
        (&cfg.paths.l2_train, &l2, d.l2_train_docs, 3),
        (&cfg.paths.l2_eval, &l2, d.eval_docs, 4),
    ];
    let mut counts = Vec::new();
    let mut files = Vec::new();
    for (p, g, n, tag) in plan {
        let docs = generate_synthetic(g, n, cfg.seed_for(&[seeds::stream::DOCS, tag]))?;
        let full = ws.path(p);
        counts.push(write_docs(&full, &docs)?);
        files.push(full);
    }
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let tok = build_tokenizer(&refs)?;
    tok.save(&ws.path(&cfg.paths.tokenizer))?;

    let tdir = ws.path(&cfg.paths.tasks);
    let tasks = builtin_tasks(&l1, &l2, d.task_items, cfg.seed_for(&[seeds::stream::TASKS]))?;
    for t in &tasks {
        t.save(&tdir.join(format!("{}.task", t.name)))?;
    }
    Ok(json!({
        "command": "gen-data",
        "seed": cfg.seed,
        "vocab_size": tok.vocab_size(),
        "docs": {"l1_train": counts[0], "l1_eval": counts[1], "l2_train": counts[2], "l2_eval": counts[3]},
        "l1_entropy_rate": l1.entropy_rate(),
        "l2_entropy_rate": l2.entropy_rate(),
        "tasks": tasks.iter().map(|t| t.name.clone()).collect::<Vec<_>>(),
    }))
}

fn final_summary(records: &[MetricsRecord]) -> (Option<f64>, Option<f64>) {
    records
        .iter()
        .rev()
        .find(|r| r.eval_l2_ppl.is_some())
        .map_or((None, None), |r| (r.eval_l1_ppl, r.eval_l2_ppl))
}

/// Loads `resume` when given, checking it was written by the same run;
/// otherwise builds a fresh state.
fn resume_or(
    ws: &Workspace,
    resume: Option<&Path>,
    run: &RunConfig,
    fresh: impl FnOnce() -> Result<TrainerState>,
) -> Result<TrainerState> {
    let Some(dir) = resume else {
        return fresh();
    };
    let dir = ws.path(dir);
    let ck = Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let seed: u64 = ck.meta_value("seed")?;
    let label = ck.meta.get("label").map_or("", String::as_str);
    if seed != run.seed || label != run.label {
        bail!(
            "checkpoint {} belongs to run {label:?} with seed {seed}, not {:?} with seed {}",
            dir.display(),
            run.label,
            run.seed
        );
    }
    Ok(TrainerState::from_checkpoint(ck)?)
}

/// Pure next-token training of the baby on L1 or the parent on L2.
pub fn pretrain(ws: &Workspace, role: Role, resume: Option<&Path>) -> Result<Value> {
    let cfg = &ws.cfg;
    let tok = ws.tokenizer()?;
    let (stage, shape, steps, train_file) = match role {
        Role::Baby => (Stage::Baby, &cfg.baby, cfg.train.baby_steps, CorpusFile::L1Train),
        Role::Parent => (Stage::Parent, &cfg.parent, cfg.train.parent_steps, CorpusFile::L2Train),
    };
    let corpus = ws.corpus(train_file, &tok)?;
    let l1 = ws.corpus(CorpusFile::L1Eval, &tok)?;
    let l2 = ws.corpus(CorpusFile::L2Eval, &tok)?;
    let name = role.to_string();
    let mut run = cfg.run_config(stage);
    run.label = format!("pretrain-{name}");
    let state = resume_or(ws, resume, &run, || {
        let model = LanguageModel::new(shape.config(tok.vocab_size(), cfg.init_seed(stage)), role)?;
        Ok(TrainerState::fresh(model, run.adam, cfg.ppo.adam()))
    })?;
    let report = ws.reporter(run.label.clone());
    let root = ws.checkpoint_root(&name);
    let metrics = ws.metrics_file(&run.label);
    let outcome = Pretrain {
        corpus: &corpus,
        run,
        steps,
        eval: Some(EvalSets { l1: &l1, l2: &l2 }),
        checkpoint_dir: Some(root.clone()),
        metrics_path: Some(metrics),
        progress: Some(&report),
    }
    .run(state)?;
    let (l1_ppl, l2_ppl) = final_summary(&outcome.records);
    let final_dir = root.join("final");
    Ok(json!({
        "command": "pretrain",
        "role": name,
        "seed": cfg.seed,
        "steps": outcome.state.step,
        "checkpoint": final_dir,
        "checksum": format!("{:016x}", checksum(&final_dir)?),
        "eval_l1_ppl": l1_ppl,
        "eval_l2_ppl": l2_ppl,
    }))
}

fn load_model(dir: &Path) -> Result<LanguageModel> {
    Ok(Checkpoint::load(dir)
        .with_context(|| format!("loading checkpoint {}", dir.display()))?
        .model)
}

/// Continual training of the pre-trained baby on L2 under `mode`.
pub fn continual(ws: &Workspace, mode: &str, resume: Option<&Path>) -> Result<Value> {
    let cfg = &ws.cfg;
    let label = mode_label(mode)?;
    let tok = ws.tokenizer()?;
    let corpus = ws.corpus(CorpusFile::L2Train, &tok)?;
    let l1 = ws.corpus(CorpusFile::L1Eval, &tok)?;
    let l2 = ws.corpus(CorpusFile::L2Eval, &tok)?;
    let baby_dir = ws.checkpoint_root("baby").join("final");
    let parent_dir = ws.checkpoint_root("parent").join("final");
    for (dir, what) in [(&baby_dir, "baby"), (&parent_dir, "parent")] {
        if !dir.exists() {
            bail!("configuration: {what} checkpoint {} does not exist (run pretrain --role {what} first)", dir.display());
        }
    }
    let parent = load_model(&parent_dir)?;
    if parent.vocab_size() != tok.vocab_size() {
        bail!("parent vocabulary ({}) does not match the tokenizer ({})", parent.vocab_size(), tok.vocab_size());
    }
    let name = format!("continual-{label}");
    let mut run = cfg.run_config(Stage::Continual);
    run.label = name.clone();
    let state = resume_or(ws, resume, &run, || {
        let baby = load_model(&baby_dir)?;
        Ok(TrainerState::fresh(baby, run.adam, cfg.ppo.adam()))
    })?;
    let mut schedule = cfg.schedule.clone();
    schedule.mode = mode.to_string();
    let report = ws.reporter(name.clone());
    let root = ws.checkpoint_root(&name);
    let outcome = Continual {
        corpus: &corpus,
        parent: Some(&parent),
        tokenizer: &tok,
        schedule,
        ppo: cfg.ppo,
        reward: cfg.reward,
        run,
        eval: Some(EvalSets { l1: &l1, l2: &l2 }),
        checkpoint_dir: Some(root.clone()),
        metrics_path: Some(ws.metrics_file(&name)),
        progress: Some(&report),
    }
    .run(state)?;
    let (l1_ppl, l2_ppl) = final_summary(&outcome.records);
    let ppo_steps = outcome.records.iter().filter(|r| r.is_ppo()).count();
    let final_dir = root.join("final");
    Ok(json!({
        "command": "continual",
        "mode": label,
        "seed": cfg.seed,
        "steps": outcome.state.step,
        "ppo_steps_this_run": ppo_steps,
        "checkpoint": final_dir,
        "checksum": format!("{:016x}", checksum(&final_dir)?),
        "eval_l1_ppl": l1_ppl,
        "eval_l2_ppl": l2_ppl,
    }))
}

/// The mode recorded in a report: the continual schedule label, or the
/// run label for other checkpoints.
fn checkpoint_mode(ck: &Checkpoint) -> String {
    let label = ck.meta.get("label").cloned().unwrap_or_default();
    match label.strip_prefix("continual-") {
        Some(mode) => mode.to_string(),
        None if !label.is_empty() => label,
        None => "unlabelled".into(),
    }
}

/// Measures a checkpoint, and the change from `baseline` when given.
pub fn eval(ws: &Workspace, checkpoint: &Path, baseline: Option<&Path>, report_path: Option<&Path>) -> Result<(EvalReport, Value)> {
    let tok = ws.tokenizer()?;
    let l1 = ws.corpus(CorpusFile::L1Eval, &tok)?;
    let l2 = ws.corpus(CorpusFile::L2Eval, &tok)?;
    let tasks = ws.tasks()?;
    let dir = ws.path(checkpoint);
    let ck = Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let mode = checkpoint_mode(&ck);
    let seeds = vec![ws.cfg.seed];
    let report = match baseline {
        Some(b) => {
            let base = load_model(&ws.path(b))?;
            let inputs = ReportInputs {
                l1: &l1,
                l2: &l2,
                tasks: &tasks,
                tokenizer: &tok,
                mode: &mode,
                seeds,
            };
            forgetting_report(&base, &ck.model, &inputs)?
        }
        None => EvalReport::new(mode, seeds, measure(&ck.model, &l1, &l2, &tasks, &tok)?, None),
    };
    let out = match report_path {
        Some(p) => ws.path(p),
        None => ws.report_file(&format!("eval-{}", report.mode)),
    };
    report.save(&out)?;
    let deltas = report.deltas.as_ref().map(|d| {
        json!({"forgetting": d.forgetting, "acquisition": d.acquisition, "tasks": d.tasks})
    });
    let summary = json!({
        "command": "eval",
        "mode": report.mode,
        "seed": ws.cfg.seed,
        "report": out,
        "l1_ppl": report.after.l1_ppl,
        "l2_ppl": report.after.l2_ppl,
        "tasks": report.after.tasks,
        "deltas": deltas,
    });
    Ok((report, summary))
}

/// Collects eval reports of several modes and seeds into one ablation
/// summary comparing each mode's final L2 perplexity with the reference.
pub fn report(ws: &Workspace, inputs: &[PathBuf], out: Option<&Path>) -> Result<(AblationReport, Value)> {
    if inputs.is_empty() {
        bail!("report needs at least one eval report");
    }
    let mut by_seed: IndexMap<u64, IndexMap<String, f64>> = IndexMap::new();
    let mut ablations: Vec<String> = Vec::new();
    for p in inputs {
        let full = ws.path(p);
        let r = EvalReport::load(&full).with_context(|| format!("reading {}", full.display()))?;
        let Some(&seed) = r.seeds.first() else {
            bail!("{} records no seed", full.display());
        };
        if r.mode != REFERENCE_MODE && !ablations.contains(&r.mode) {
            ablations.push(r.mode.clone());
        }
        if by_seed.entry(seed).or_default().insert(r.mode.clone(), r.after.l2_ppl).is_some() {
            bail!("two reports for mode {} and seed {seed}", r.mode);
        }
    }
    let seeds = by_seed
        .into_iter()
        .map(|(seed, l2_ppl)| SeedResult { seed, l2_ppl })
        .collect();
    let ablation = AblationReport::new(REFERENCE_MODE, ablations, seeds)?;
    let path = match out {
        Some(p) => ws.path(p),
        None => ws.report_file("ablation"),
    };
    ablation.save(&path)?;
    let medians: IndexMap<&str, Option<f64>> = ablation.modes().map(|m| (m, ablation.median_ppl(m))).collect();
    let violations: Vec<String> = ablation
        .violations()
        .iter()
        .map(|v| format!("seed {}: {} {} > {} {}", v.seed, REFERENCE_MODE, v.reference_ppl, v.ablation, v.ablation_ppl))
        .collect();
    let summary = json!({
        "command": "report",
        "report": path,
        "median_l2_ppl": medians,
        "median_ordering_holds": ablation.median_ordering_holds(),
        "violations": violations,
    });
    Ok((ablation, summary))
}

//! End-to-end runs: corpus, three training stages and held-out evaluation,
//! with every artifact optionally written to a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, Sampling, TargetShape};
use crate::data::text::parse_description;
use crate::data::{estimate_params, generate_corpus, CorpusItem, FeatureStats, MotionSequence, SyntheticSpec, Task, TextVocab};
use crate::error::{Error, Result};
use crate::eval::metrics::{ade_fde, mpjpe};
use crate::eval::report::MetricsReport;
use crate::patterns::MultiStreamTokens;
use crate::pipeline::{
    build_examples, prompt_for, run_stage1, run_stage2, run_stage3, split_corpus, PromptFormat, StagePlan, StageRecord,
    TokenizedCorpus,
};
use crate::rvq::{reconstruction_mse, TokenizerConfig, TokenizerModel, TokenizerRecord, TokenizerTraining};

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const STATS: &str = "stats.json";
    pub const TOKENIZER: &str = "tokenizer.ckpt";
    pub const TOKENIZER_LOG: &str = "tokenizer_log.jsonl";
    pub const STAGE2: &str = "stage2.ckpt";
    pub const STAGE2_LOG: &str = "stage2_log.jsonl";
    pub const STAGE3: &str = "stage3.ckpt";
    pub const STAGE3_LOG: &str = "stage3_log.jsonl";
    pub const METRICS: &str = "metrics.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out items evaluated per task.
    pub items_per_task: usize,
    pub sampling: Sampling,
    /// Word budget of text generation.
    pub max_text: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            items_per_task: 20,
            sampling: Sampling::Greedy,
            max_text: 24,
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: SyntheticSpec,
    pub items: usize,
    /// Every n-th item is held out.
    pub holdout_every: usize,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_training: TokenizerTraining,
    pub backbone: BackboneConfig,
    pub stage2: StagePlan,
    pub stage3: StagePlan,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            corpus: SyntheticSpec::default(),
            items: 5400,
            holdout_every: 5,
            tokenizer: TokenizerConfig::desk(),
            tokenizer_training: TokenizerTraining::default(),
            backbone: BackboneConfig::desk(),
            stage2: StagePlan::stage2(),
            stage3: StagePlan::stage3(),
            eval: EvalConfig::default(),
        }
        .reseeded(0)
    }

    /// Published model sizes and iteration budgets. Frames keep the toy
    /// corpus width, so this preset is only practical for accounting.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            tokenizer: TokenizerConfig {
                frame_dim: desk.tokenizer.frame_dim,
                ..TokenizerConfig::paper()
            },
            tokenizer_training: TokenizerTraining {
                steps: 400_000,
                ..desk.tokenizer_training.clone()
            },
            backbone: BackboneConfig::paper(),
            stage2: StagePlan {
                steps: 400_000,
                ..desk.stage2.clone()
            },
            stage3: StagePlan {
                steps: 400_000,
                ..desk.stage3.clone()
            },
            ..desk
        }
    }

    /// A few seconds end to end; exercises every stage without learning much.
    pub fn smoke() -> Self {
        let desk = Self::desk();
        Self {
            items: 120,
            tokenizer_training: TokenizerTraining {
                steps: 30,
                ..desk.tokenizer_training.clone()
            },
            stage2: StagePlan {
                steps: 30,
                ..desk.stage2.clone()
            },
            stage3: StagePlan {
                steps: 30,
                ..desk.stage3.clone()
            },
            eval: EvalConfig {
                items_per_task: 3,
                ..desk.eval.clone()
            },
            ..desk
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected desk, paper or smoke"))),
        }
    }

    /// Copy whose corpus, tokenizer and stage seeds all derive from `seed`.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.tokenizer_training.seed = seed;
        self.stage2.seed = seed;
        self.stage3.seed = seed.wrapping_add(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.tokenizer.validate()?;
        self.backbone.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        if self.stage2.stage != 2 || self.stage3.stage != 3 {
            return Err(Error::Config("stage plans are out of order".into()));
        }
        if self.tokenizer.levels != self.backbone.levels || self.tokenizer.codebook_size != self.backbone.codebook_size {
            return Err(Error::Config(format!(
                "tokenizer emits {} streams of {} codes, backbone expects {} of {}",
                self.tokenizer.levels, self.tokenizer.codebook_size, self.backbone.levels, self.backbone.codebook_size
            )));
        }
        if self.backbone.text_vocab != TextVocab::default().len() {
            return Err(Error::Config(format!("text vocabulary is {} words", TextVocab::default().len())));
        }
        if self.tokenizer.frame_dim != crate::data::FRAME_DIM {
            return Err(Error::Config(format!("corpus frames have {} features", crate::data::FRAME_DIM)));
        }
        if self.items < self.holdout_every * Task::ALL.len() {
            return Err(Error::Config("corpus too small to hold out every task".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn prompt_format(&self) -> PromptFormat {
        PromptFormat {
            vocab: self.backbone.vocab(),
            layout: self.backbone.layout,
            max_len: self.backbone.max_len,
        }
    }
}

/// The synthetic corpus split into training and held-out items, with
/// normalization statistics fitted on the training motions.
pub struct Corpus {
    pub train: Vec<CorpusItem>,
    pub held: Vec<CorpusItem>,
    pub stats: FeatureStats,
}

impl Corpus {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let items = generate_corpus(&cfg.corpus, cfg.items)?;
        let (train, held) = split_corpus(&items, cfg.holdout_every)?;
        let stats = FeatureStats::fit(train.iter().flat_map(|i| &i.motions))?;
        Ok(Self { train, held, stats })
    }

    /// Normalized training motions, one per agent.
    pub fn train_motions(&self) -> Result<Vec<MotionSequence>> {
        self.train.iter().flat_map(|i| &i.motions).map(|m| self.stats.normalize(m)).collect()
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn in_dir(dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    dir.map(|d| d.join(name))
}

/// Stage 1, writing the tokenizer, statistics and log when `dir` is given.
pub fn train_tokenizer_stage(cfg: &ExperimentConfig, corpus: &Corpus, dir: Option<&Path>) -> Result<(TokenizerModel<f64>, Vec<TokenizerRecord>)> {
    let (tok, log) = run_stage1::<f64>(&corpus.train_motions()?, &cfg.tokenizer, &cfg.tokenizer_training)?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        tok.save(&d.join(files::TOKENIZER))?;
        fs::write(d.join(files::STATS), serde_json::to_string_pretty(&corpus.stats)?)?;
        write_jsonl(&d.join(files::TOKENIZER_LOG), &log)?;
    }
    Ok((tok, log))
}

/// Stage 2 on the basic tasks of the training split.
pub fn pretrain_stage(cfg: &ExperimentConfig, train: &TokenizedCorpus, dir: Option<&Path>) -> Result<(Backbone<f64>, Vec<StageRecord>)> {
    let examples = build_examples(&cfg.prompt_format(), train, &cfg.stage2.tasks)?;
    let (model, log) = run_stage2::<f64>(&cfg.backbone, &examples, &cfg.stage2)?;
    if let Some(p) = in_dir(dir, files::STAGE2) {
        model.save(&p)?;
        write_jsonl(&p.with_file_name(files::STAGE2_LOG), &log)?;
    }
    Ok((model, log))
}

/// Stage 3 on every task of the training split.
pub fn finetune_stage(
    cfg: &ExperimentConfig,
    model: Backbone<f64>,
    train: &TokenizedCorpus,
    dir: Option<&Path>,
) -> Result<(Backbone<f64>, Vec<StageRecord>, bool)> {
    let examples = build_examples(&cfg.prompt_format(), train, &cfg.stage3.tasks)?;
    let (model, log, tower) = run_stage3(model, &examples, &cfg.stage3)?;
    if let Some(p) = in_dir(dir, files::STAGE3) {
        model.save(&p)?;
        write_jsonl(&p.with_file_name(files::STAGE3_LOG), &log)?;
    }
    Ok((model, log, tower))
}

type Metrics = BTreeMap<String, f64>;

/// Reconstruction quality on held-out motions, overall and per prefix of
/// quantizer levels.
pub fn tokenizer_metrics(tok: &TokenizerModel<f64>, corpus: &TokenizedCorpus) -> Result<Metrics> {
    let motions: Vec<&MotionSequence> = corpus.items.iter().flat_map(|i| &i.item.motions).collect();
    let owned: Vec<MotionSequence> = motions.iter().map(|m| (*m).clone()).collect();
    let mut out = Metrics::new();
    out.insert("recon_mse".into(), reconstruction_mse(tok, &owned)?);
    let mut err = 0.0;
    let mut level_sums = vec![0.0; tok.config().levels];
    let mut count = 0usize;
    for m in &owned {
        let grid = tok.tokenize(m)?;
        let rec = tok.detokenize(&grid, m.len(), m.frame_rate())?;
        err += mpjpe(&corpus.stats.denormalize(&rec)?, &corpus.stats.denormalize(m)?)?;
        for (l, sum) in level_sums.iter_mut().enumerate() {
            let partial = tok.detokenize(&grid.truncate_levels(l + 1)?, m.len(), m.frame_rate())?;
            *sum += partial.values().iter().zip(m.values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        count += m.values().len();
    }
    out.insert("mpjpe".into(), err / owned.len() as f64);
    for (l, sum) in level_sums.iter().enumerate() {
        out.insert(format!("recon_mse_levels{}", l + 1), sum / count as f64);
    }
    Ok(out)
}

/// Step range of each target agent, as `(agent, from, to)`.
fn target_windows(task: Task, steps: usize) -> Vec<(usize, usize, usize)> {
    let (half, quarter) = (steps / 2, steps / 4);
    match task {
        Task::TextToMotion => vec![(0, 0, steps)],
        Task::PairTextToMotion => vec![(0, 0, steps), (1, 0, steps)],
        Task::Predict => vec![(0, half, steps)],
        Task::Inbetween => vec![(0, quarter, steps - quarter)],
        Task::PairPredict => vec![(0, half, steps), (1, half, steps)],
        Task::React | Task::Edit => vec![(1, 0, steps)],
        Task::MotionToText | Task::PairMotionToText => vec![],
    }
}

struct Acc(BTreeMap<String, (f64, usize)>);

impl Acc {
    fn add(&mut self, k: &str, v: f64) {
        let e = self.0.entry(k.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn means(self) -> Metrics {
        self.0.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Held-out metrics of `model` for every task: teacher-forced NLL per
/// stream and, from greedy or sampled generation, parameter-bin agreement
/// and displacement errors in corpus units.
pub fn evaluate(
    cfg: &ExperimentConfig,
    tok: &TokenizerModel<f64>,
    model: &Backbone<f64>,
    held: &TokenizedCorpus,
) -> Result<BTreeMap<String, Metrics>> {
    let fmt = PromptFormat {
        vocab: *model.vocab(),
        layout: model.config().layout,
        max_len: model.config().max_len,
    };
    let vocab = TextVocab::default();
    let ratio = tok.config().ratio();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = BTreeMap::new();
    for task in Task::ALL {
        let examples: Vec<_> = build_examples(&fmt, held, &[task])?.into_iter().take(cfg.eval.items_per_task).collect();
        if examples.is_empty() {
            continue;
        }
        let seqs: Vec<_> = examples.iter().map(|e| e.formatted.sequence.clone()).collect();
        let nll = model.nll(&seqs)?;
        let mut acc = Acc(BTreeMap::new());
        let mut m = Metrics::new();
        m.insert("nll".into(), nll.mean().expect("targets present"));
        if let Some(v) = nll.text.mean() {
            m.insert("nll_text".into(), v);
        }
        for (l, s) in nll.streams.iter().enumerate() {
            if let Some(v) = s.mean() {
                m.insert(format!("nll_stream{}", l + 1), v);
            }
        }
        if let Some(v) = nll.streams_from(1) {
            m.insert("nll_residual".into(), v);
        }
        for e in &examples {
            let item = &held.items[e.item];
            let prompt = prompt_for(task, &item.item.text, item.item.edit_instruction.as_deref(), &item.agents)?;
            let shape = PromptFormat::target_shape(&prompt.targets)?;
            let budget = match &shape {
                TargetShape::Text => cfg.eval.max_text,
                TargetShape::Motion { .. } => fmt.target_positions(&shape),
            };
            let gen = model.generate(e.formatted.conditioning(), Some(task), &shape, budget, cfg.eval.sampling, &mut rng)?;
            acc.add("truncated", f64::from(u8::from(gen.truncated)));
            if task.targets_text() {
                let parsed = vocab.decode(&gen.text).and_then(|t| parse_description(&t));
                acc.add("text_parse_rate", f64::from(u8::from(parsed.is_ok())));
                acc.add("text_bin_accuracy", parsed.map_or(0.0, |p| p.bins.match_rate(&item.item.meta.bins)));
                continue;
            }
            let steps = item.agents[0].len();
            for (k, &(agent, from, to)) in target_windows(task, steps).iter().enumerate() {
                let Some(grid) = gen.motions.get(k).filter(|g| g.len() == to - from) else {
                    continue;
                };
                let gt_norm = &item.item.motions[agent];
                let (a, b) = (from * ratio, (to * ratio).min(gt_norm.len()));
                let gt = held.stats.denormalize(&gt_norm.window(a, b - a)?)?;
                let pred = decode_agent(tok, grid, b - a, gt_norm.frame_rate())?;
                let pred = held.stats.denormalize(&pred)?;
                if task.is_motion_to_motion() {
                    let (ade, fde) = ade_fde(&pred, &gt)?;
                    acc.add("ade", ade);
                    acc.add("fde", fde);
                }
                let want = match task {
                    Task::TextToMotion | Task::PairTextToMotion if agent == 0 => Some(item.item.meta.bins),
                    Task::Edit => Some(cfg.corpus.bins_of(&estimate_params(&gt, &cfg.corpus)?)),
                    _ => None,
                };
                if let Some(want) = want {
                    let got = cfg.corpus.bins_of(&estimate_params(&pred, &cfg.corpus)?);
                    acc.add("bin_match", got.match_rate(&want));
                }
            }
        }
        m.extend(acc.means());
        out.insert(task.name().to_string(), m);
    }
    Ok(out)
}

fn decode_agent(tok: &TokenizerModel<f64>, m: &MultiStreamTokens, frames: usize, frame_rate: f64) -> Result<MotionSequence> {
    let grid = m.to_grid(tok.config().codebook_size)?;
    tok.detokenize(&grid, frames, frame_rate)
}

/// Models and logs of a finished run.
pub struct Experiment {
    pub report: MetricsReport,
    pub tokenizer: TokenizerModel<f64>,
    pub stage2: Backbone<f64>,
    pub stage3: Backbone<f64>,
    pub task_tower: bool,
    pub tokenizer_log: Vec<TokenizerRecord>,
    pub stage2_log: Vec<StageRecord>,
    pub stage3_log: Vec<StageRecord>,
}

/// Held-out metrics of a finished run: the tokenizer group and one group per
/// task for each backbone stage.
pub fn evaluation_report(
    cfg: &ExperimentConfig,
    tokenizer: &TokenizerModel<f64>,
    stage2: &Backbone<f64>,
    stage3: &Backbone<f64>,
    task_tower: bool,
    held: &TokenizedCorpus,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(cfg);
    report.meta.insert("task_tower".into(), task_tower.to_string());
    report.checkpoints.insert("tokenizer".into(), tokenizer.content_hash());
    report.checkpoints.insert("stage2".into(), stage2.content_hash());
    report.checkpoints.insert("stage3".into(), stage3.content_hash());
    report.insert_group("tokenizer", tokenizer_metrics(tokenizer, held)?)?;
    for (name, model) in [("stage2", stage2), ("stage3", stage3)] {
        for (task, m) in evaluate(cfg, tokenizer, model, held)? {
            report.insert_group(&format!("{name}:{task}"), m)?;
        }
    }
    Ok(report)
}

/// Runs stages 1 to 3 and evaluates the stage-2 and stage-3 models on the
/// held-out split. Metric groups are `tokenizer`, `stage2:<task>` and
/// `stage3:<task>`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Experiment> {
    cfg.validate()?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join(files::CONFIG), serde_json::to_string_pretty(cfg)?)?;
    }
    let corpus = Corpus::generate(cfg)?;
    let (tokenizer, tokenizer_log) = train_tokenizer_stage(cfg, &corpus, dir)?;
    info!("stage 1 done");
    let train = TokenizedCorpus::new(&corpus.train, &corpus.stats, &tokenizer)?;
    let held = TokenizedCorpus::new(&corpus.held, &corpus.stats, &tokenizer)?;
    let (stage2, stage2_log) = pretrain_stage(cfg, &train, dir)?;
    let (stage3, stage3_log, task_tower) = finetune_stage(cfg, stage2.clone(), &train, dir)?;

    let report = evaluation_report(cfg, &tokenizer, &stage2, &stage3, task_tower, &held)?;
    if let Some(d) = dir {
        report.save(&d.join(files::METRICS))?;
    }
    Ok(Experiment {
        report,
        tokenizer,
        stage2,
        stage3,
        task_tower,
        tokenizer_log,
        stage2_log,
        stage3_log,
    })
}

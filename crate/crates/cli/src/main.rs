use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motion_lm::backbone::{Sampling, TargetShape};
use motion_lm::data::text::parse_description;
use motion_lm::data::{estimate_params, save_corpus, FeatureStats, MotionSequence, Task, TextVocab};
use motion_lm::eval::experiment::{
    evaluation_report, finetune_stage, pretrain_stage, read_jsonl, tokenizer_metrics, train_tokenizer_stage, Corpus,
};
use motion_lm::eval::{files, report, ExperimentConfig};
use motion_lm::fusion::{cost_row, BlockConfig, TowerVariant, VariantKind};
use motion_lm::patterns::{analyze, Layout, LayoutKind, MultiStreamTokens};
use motion_lm::pipeline::{prompt_for, PromptFormat, StageRecord, TokenizedCorpus};
use motion_lm::rvq::TokenGrid;
use motion_lm::{Model, Tokenizer};

#[derive(Parser)]
#[command(name = "motion-lm", version, about = "Motion tokenization, multi-stream language modeling and evaluation")]
struct Cli {
    /// TOML file overriding fields of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the corpus, the tokenizer and both backbone stages.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: generate the corpus and train the tokenizer into a new run directory.
    TrainTokenizer {
        #[arg(long)]
        run: PathBuf,
    },
    /// Motion file to token file with a run's tokenizer.
    Tokenize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Token file to motion file with a run's tokenizer.
    Detokenize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Frames to decode; defaults to steps × temporal ratio.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Stage 2: modality alignment on the basic tasks.
    Pretrain {
        #[arg(long)]
        run: PathBuf,
    },
    /// Stage 3: task-tower fine-tuning on all tasks, then held-out evaluation.
    Finetune {
        #[arg(long)]
        run: PathBuf,
    },
    /// Text to motion.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        output: PathBuf,
        /// Second agent, required for two-person descriptions.
        #[arg(long)]
        partner_output: Option<PathBuf>,
        #[arg(long)]
        stage: Option<u8>,
        /// Softmax temperature; 0 decodes greedily.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Motion to text.
    Caption {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stage: Option<u8>,
    },
    /// Laid-out length, cost and dependency sets of a sequence layout.
    AnalyzePattern {
        #[arg(long, value_enum)]
        layout: LayoutArg,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        steps: usize,
    },
    /// Analytic and measured parameter and FLOP counts of one block.
    CountParams {
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        /// Sequence length for FLOP counting.
        #[arg(long, default_value_t = 8)]
        tokens: usize,
    },
    /// CSV tables and SVG plots from run artifacts.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Flatten,
    Parallel,
    Delay,
}

impl From<LayoutArg> for LayoutKind {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Flatten => LayoutKind::Flatten,
            LayoutArg::Parallel => LayoutKind::Parallel,
            LayoutArg::Delay => LayoutKind::Delay,
        }
    }
}

/// Overlays `patch` onto `base`, table by table.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match cli.preset {
        Preset::Desk => ExperimentConfig::desk(),
        Preset::Paper => ExperimentConfig::paper(),
        Preset::Smoke => ExperimentConfig::smoke(),
    };
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut base = toml::Value::try_from(&cfg)?;
        merge(&mut base, patch);
        cfg = base.try_into().context("config fields do not fit the experiment schema")?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.reseeded(seed);
    }
    Ok(cfg)
}

/// The configuration frozen into a run directory by `train-tokenizer`.
fn run_config(run: &Path) -> Result<ExperimentConfig> {
    let p = run.join(files::CONFIG);
    let cfg = serde_json::from_slice(&fs::read(&p).with_context(|| format!("{} has no run config; run train-tokenizer first", run.display()))?)?;
    Ok(cfg)
}

fn load_tokenizer(run: &Path) -> Result<(Tokenizer, FeatureStats)> {
    let tok = Tokenizer::load(&run.join(files::TOKENIZER)).context("loading tokenizer")?;
    let stats = serde_json::from_slice(&fs::read(run.join(files::STATS)).context("reading normalization statistics")?)?;
    Ok((tok, stats))
}

fn load_stage(run: &Path, stage: Option<u8>) -> Result<Model> {
    let candidates: Vec<(u8, &str)> = match stage {
        Some(2) => vec![(2, files::STAGE2)],
        Some(3) => vec![(3, files::STAGE3)],
        Some(s) => bail!("stage must be 2 or 3, got {s}"),
        None => vec![(3, files::STAGE3), (2, files::STAGE2)],
    };
    for (s, name) in candidates {
        let p = run.join(name);
        if p.exists() {
            info!("using stage-{s} checkpoint");
            return Model::load(&p).with_context(|| format!("loading {}", p.display()));
        }
    }
    bail!("{} has no trained backbone; run pretrain first", run.display())
}

fn tokenized_splits(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<(Corpus, TokenizedCorpus, TokenizedCorpus)> {
    let corpus = Corpus::generate(cfg)?;
    let train = TokenizedCorpus::new(&corpus.train, &corpus.stats, tok)?;
    let held = TokenizedCorpus::new(&corpus.held, &corpus.stats, tok)?;
    Ok((corpus, train, held))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainTokenizer { run } => {
            let cfg = resolve_config(&cli)?;
            cfg.validate()?;
            fs::create_dir_all(run)?;
            fs::write(run.join(files::CONFIG), serde_json::to_string_pretty(&cfg)?)?;
            let corpus = Corpus::generate(&cfg)?;
            let index = save_corpus(&run.join("heldout"), &corpus.held)?;
            let (tok, log) = train_tokenizer_stage(&cfg, &corpus, Some(run))?;
            let held = TokenizedCorpus::new(&corpus.held, &corpus.stats, &tok)?;
            let m = tokenizer_metrics(&tok, &held)?;
            info!("held-out corpus written to {}", index.display());
            print_json(&serde_json::json!({
                "steps": log.len(),
                "final_loss": log.last().map(|r| r.loss),
                "held_out": m,
                "checkpoint": tok.content_hash(),
            }))?;
        }
        Command::Tokenize { run, input, output } => {
            let (tok, stats) = load_tokenizer(run)?;
            let motion = MotionSequence::load(input).with_context(|| format!("reading {}", input.display()))?;
            let grid = tok.tokenize(&stats.normalize(&motion)?)?;
            grid.save(output)?;
            info!("{} steps × {} streams", grid.len(), grid.levels());
        }
        Command::Detokenize { run, input, output, frames } => {
            let (tok, stats) = load_tokenizer(run)?;
            let grid = TokenGrid::load(input).with_context(|| format!("reading {}", input.display()))?;
            let frames = frames.unwrap_or(grid.len() * tok.config().ratio());
            let cfg = run_config(run)?;
            let motion = stats.denormalize(&tok.detokenize(&grid, frames, cfg.corpus.frame_rate)?)?;
            motion.save(output)?;
        }
        Command::Pretrain { run } => {
            let cfg = run_config(run)?;
            let (tok, _) = load_tokenizer(run)?;
            let (_, train, _) = tokenized_splits(&cfg, &tok)?;
            let (model, log) = pretrain_stage(&cfg, &train, Some(run))?;
            print_json(&serde_json::json!({
                "steps": log.len(),
                "final_loss": log.last().map(|r| r.loss),
                "checkpoint": model.content_hash(),
            }))?;
        }
        Command::Finetune { run } => {
            let cfg = run_config(run)?;
            let (tok, _) = load_tokenizer(run)?;
            let stage2 = load_stage(run, Some(2))?;
            let (_, train, held) = tokenized_splits(&cfg, &tok)?;
            let (stage3, _, tower) = finetune_stage(&cfg, stage2.clone(), &train, Some(run))?;
            if !tower {
                warn!("{} has no motion tower; fine-tuned without a task tower", cfg.backbone.variant.kind);
            }
            let rep = evaluation_report(&cfg, &tok, &stage2, &stage3, tower, &held)?;
            rep.save(&run.join(files::METRICS))?;
            print_json(&rep)?;
        }
        Command::Generate {
            run,
            text,
            output,
            partner_output,
            stage,
            temperature,
        } => {
            let cfg = run_config(run)?;
            let (tok, stats) = load_tokenizer(run)?;
            let model = load_stage(run, *stage)?;
            let vocab = TextVocab::default();
            let words = vocab.encode(text)?;
            let pair = parse_description(text).map(|p| p.relation.is_some()).unwrap_or(text.starts_with("two "));
            let task = if pair { Task::PairTextToMotion } else { Task::TextToMotion };
            ensure!(!pair || partner_output.is_some(), "two-person text needs --partner-output");
            let steps = cfg.corpus.frames.div_ceil(tok.config().ratio());
            let placeholder = MultiStreamTokens::new(vec![vec![0; steps]; cfg.tokenizer.levels])?;
            let agents = vec![placeholder; task.motion_count()];
            let fmt = PromptFormat {
                vocab: *model.vocab(),
                layout: model.config().layout,
                max_len: model.config().max_len,
            };
            let prompt = prompt_for(task, &words, None, &agents)?;
            let formatted = fmt.format(&prompt)?;
            let shape = TargetShape::Motion {
                agents: vec![steps; task.motion_count()],
            };
            let sampling = if *temperature > 0.0 { Sampling::Temperature(*temperature) } else { Sampling::Greedy };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let gen = model.generate(formatted.conditioning(), Some(task), &shape, fmt.target_positions(&shape), sampling, &mut rng)?;
            ensure!(gen.motions.len() == task.motion_count() && !gen.truncated, "generation was truncated");
            let outs: Vec<&PathBuf> = std::iter::once(output).chain(partner_output.as_ref()).collect();
            let mut estimates = Vec::new();
            for (m, path) in gen.motions.iter().zip(outs) {
                let grid = m.to_grid(tok.config().codebook_size)?;
                let motion = stats.denormalize(&tok.detokenize(&grid, cfg.corpus.frames, cfg.corpus.frame_rate)?)?;
                motion.save(path)?;
                estimates.push(estimate_params(&motion, &cfg.corpus)?);
            }
            print_json(&serde_json::json!({ "task": task, "steps": gen.steps, "estimated": estimates }))?;
        }
        Command::Caption { run, input, stage } => {
            let (tok, stats) = load_tokenizer(run)?;
            let model = load_stage(run, *stage)?;
            let cfg = run_config(run)?;
            let motion = MotionSequence::load(input).with_context(|| format!("reading {}", input.display()))?;
            let agent = MultiStreamTokens::from_grid(&tok.tokenize(&stats.normalize(&motion)?)?);
            let fmt = PromptFormat {
                vocab: *model.vocab(),
                layout: model.config().layout,
                max_len: model.config().max_len,
            };
            // The target text is a placeholder; only the conditioning prefix is used.
            let prompt = prompt_for(Task::MotionToText, &[0], None, &[agent])?;
            let formatted = fmt.format(&prompt)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let gen = model.generate(
                formatted.conditioning(),
                Some(Task::MotionToText),
                &TargetShape::Text,
                cfg.eval.max_text,
                Sampling::Greedy,
                &mut rng,
            )?;
            println!("{}", TextVocab::default().decode(&gen.text)?);
        }
        Command::AnalyzePattern { layout, levels, steps } => {
            print_json(&analyze(&Layout::new((*layout).into(), *levels, *steps)?)?)?;
        }
        Command::CountParams {
            d_model,
            d_ff,
            rank,
            tokens,
        } => {
            let cfg = resolve_config(&cli)?;
            let block = BlockConfig {
                d_model: d_model.unwrap_or(cfg.backbone.block.d_model),
                d_ff: d_ff.unwrap_or(cfg.backbone.block.d_ff),
                layers: 1,
                ..cfg.backbone.block.clone()
            };
            let rank = rank.unwrap_or(cfg.backbone.variant.lora_rank);
            let rows = VariantKind::ALL
                .into_iter()
                .map(|kind| {
                    let variant = match kind {
                        VariantKind::Lora => TowerVariant::lora(rank, cfg.backbone.variant.lora_scale),
                        k => TowerVariant::of(k),
                    };
                    cost_row(&block, &variant, *tokens)
                })
                .collect::<motion_lm::Result<Vec<_>>>()?;
            print_json(&rows)?;
        }
        Command::Report { run, out } => {
            let r = report(run, out)?;
            for w in &r.warnings {
                warn!("{w}");
            }
            for f in &r.files {
                println!("{}", f.display());
            }
            let logs: usize = [files::STAGE2_LOG, files::STAGE3_LOG]
                .iter()
                .filter_map(|f| read_jsonl::<StageRecord>(&run.join(f)).ok())
                .map(|v| v.len())
                .sum();
            info!("{} runs, {logs} stage records in the top-level run", r.runs.len());
        }
    }
    Ok(())
}

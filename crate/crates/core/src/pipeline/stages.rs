use std::collections::BTreeMap;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, CosineSchedule, Tape};
use crate::backbone::{Backbone, BackboneConfig, Sequence};
use crate::data::{CorpusItem, FeatureStats, MotionSequence, Task};
use crate::error::{Error, Result};
use crate::patterns::MultiStreamTokens;
use crate::pipeline::prompt::{prompt_for, Formatted, PromptFormat};
use crate::rvq::{train_tokenizer, TokenizerConfig, TokenizerModel, TokenizerRecord, TokenizerTraining};
use crate::scalar::Scalar;

/// Two comprehension and two generation tasks used for modality alignment.
pub const BASIC_TASKS: [Task; 4] = [
    Task::TextToMotion,
    Task::MotionToText,
    Task::PairTextToMotion,
    Task::PairMotionToText,
];

/// Optimisation settings of one backbone training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub stage: u8,
    pub tasks: Vec<Task>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::stage2()
    }
}

impl StagePlan {
    pub fn stage2() -> Self {
        Self {
            stage: 2,
            tasks: BASIC_TASKS.to_vec(),
            steps: 2000,
            batch_size: 8,
            lr: 3e-3,
            min_lr: 1e-4,
            warmup: 30,
            weight_decay: 0.01,
            seed: 0,
        }
    }

    pub fn stage3() -> Self {
        Self {
            stage: 3,
            tasks: Task::ALL.to_vec(),
            lr: 2e-3,
            ..Self::stage2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.tasks.is_empty() {
            return Err(Error::Config("a stage needs steps, a batch size and tasks".into()));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("learning rates {} → {} out of order", self.lr, self.min_lr)));
        }
        match self.stage {
            2 => {
                if let Some(t) = self.tasks.iter().find(|t| !BASIC_TASKS.contains(t)) {
                    return Err(Error::Config(format!("stage 2 only trains the basic tasks, not {t}")));
                }
            }
            3 => {}
            s => return Err(Error::Config(format!("backbone stages are 2 and 3, not {s}"))),
        }
        Ok(())
    }

    fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.lr,
            min_lr: self.min_lr,
            warmup: self.warmup,
            total: self.steps,
        }
    }
}

/// One optimisation step of a backbone stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
    /// Mean NLL of text-head targets in the batch.
    pub text_nll: Option<f64>,
    /// Mean NLL per motion stream in the batch.
    pub stream_nll: Vec<Option<f64>>,
}

/// Stage 1: trains the tokenizer on normalized motions and checks that it
/// comes back frozen.
pub fn run_stage1<S: Scalar>(
    motions: &[MotionSequence],
    config: &TokenizerConfig,
    training: &TokenizerTraining,
) -> Result<(TokenizerModel<S>, Vec<TokenizerRecord>)> {
    let (model, log) = train_tokenizer::<S>(motions, config, training)?;
    if !model.is_frozen() {
        return Err(Error::Stage("tokenizer left stage 1 unfrozen".into()));
    }
    Ok((model, log))
}

/// Deterministic split: every `holdout_every`-th item is held out. Tasks
/// cycle through the corpus, so both halves cover every task.
pub fn split_corpus(items: &[CorpusItem], holdout_every: usize) -> Result<(Vec<CorpusItem>, Vec<CorpusItem>)> {
    if holdout_every < 2 {
        return Err(Error::Config("holdout_every must be at least 2".into()));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if i % holdout_every == holdout_every - 1 {
            held.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, held))
}

/// A corpus item with every motion normalized and tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedItem {
    /// The item with its motions in normalized units.
    pub item: CorpusItem,
    pub agents: Vec<MultiStreamTokens>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCorpus {
    pub items: Vec<TokenizedItem>,
    pub stats: FeatureStats,
}

impl TokenizedCorpus {
    /// Normalizes with `stats` and tokenizes with a frozen tokenizer.
    pub fn new<S: Scalar>(items: &[CorpusItem], stats: &FeatureStats, tokenizer: &TokenizerModel<S>) -> Result<Self> {
        if !tokenizer.is_frozen() {
            return Err(Error::Stage("backbone stages need a frozen tokenizer".into()));
        }
        let items = items
            .iter()
            .map(|item| {
                item.validate()?;
                let motions = item.motions.iter().map(|m| stats.normalize(m)).collect::<Result<Vec<_>>>()?;
                let agents = motions
                    .iter()
                    .map(|m| Ok(MultiStreamTokens::from_grid(&tokenizer.tokenize(m)?)))
                    .collect::<Result<_>>()?;
                Ok(TokenizedItem {
                    item: CorpusItem { motions, ..item.clone() },
                    agents,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            items,
            stats: stats.clone(),
        })
    }
}

/// A formatted training or evaluation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub task: Task,
    /// Index of the source item in its corpus.
    pub item: usize,
    pub formatted: Formatted,
}

/// Formats every item whose task is in `tasks`.
pub fn build_examples(format: &PromptFormat, corpus: &TokenizedCorpus, tasks: &[Task]) -> Result<Vec<Example>> {
    corpus
        .items
        .iter()
        .enumerate()
        .filter(|(_, t)| tasks.contains(&t.item.task))
        .map(|(i, t)| {
            let prompt = prompt_for(t.item.task, &t.item.text, t.item.edit_instruction.as_deref(), &t.agents)?;
            Ok(Example {
                task: t.item.task,
                item: i,
                formatted: format.format(&prompt)?,
            })
        })
        .collect()
}

/// Optimises `model` on `examples` following `plan`. Every batch holds a
/// single task drawn uniformly from the plan's tasks that have examples.
pub fn train_backbone<S: Scalar>(model: &mut Backbone<S>, examples: &[Example], plan: &StagePlan) -> Result<Vec<StageRecord>> {
    plan.validate()?;
    let mut by_task: BTreeMap<Task, Vec<&Sequence>> = BTreeMap::new();
    for e in examples.iter().filter(|e| plan.tasks.contains(&e.task)) {
        by_task.entry(e.task).or_default().push(&e.formatted.sequence);
    }
    let tasks: Vec<Task> = by_task.keys().copied().collect();
    if tasks.is_empty() {
        return Err(Error::Config(format!("no examples for the tasks of stage {}", plan.stage)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = AdamW::new(plan.weight_decay);
    let schedule = plan.schedule();
    let mut log = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let task = tasks[rng.random_range(0..tasks.len())];
        let pool = &by_task[&task];
        let batch: Vec<&Sequence> = (0..plan.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Training {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true).map_err(diverged)?;
        let terms = model.nll_on_tape(&mut tape, &bound, &batch).map_err(diverged)?;
        let loss = tape.value(terms.loss).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("non-finite loss {loss}"),
            });
        }
        let grads = tape.backward(terms.loss).map_err(diverged)?;
        let lr = schedule.lr(step);
        opt.step(model.params_mut(), &bound, &grads, lr);
        log.push(StageRecord {
            stage: plan.stage,
            step,
            task,
            loss,
            lr,
            text_nll: terms.text.mean(),
            stream_nll: terms.streams.iter().map(|s| s.mean()).collect(),
        });
        if step % 100 == 0 {
            log::debug!("stage {} step {step} {task}: loss {loss:.4}", plan.stage);
        }
    }
    Ok(log)
}

/// Stage 2: a fresh backbone aligned on the basic tasks.
pub fn run_stage2<S: Scalar>(
    config: &BackboneConfig,
    examples: &[Example],
    plan: &StagePlan,
) -> Result<(Backbone<S>, Vec<StageRecord>)> {
    if plan.stage != 2 {
        return Err(Error::Config(format!("stage-2 run given a stage-{} plan", plan.stage)));
    }
    let mut model = Backbone::<S>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(plan.seed))?;
    let log = train_backbone(&mut model, examples, plan)?;
    model.set_stage(2);
    info!("stage 2 done: {} steps, final loss {:.4}", plan.steps, log.last().map_or(f64::NAN, |r| r.loss));
    Ok((model, log))
}

/// Stage 3: clones the motion tower into a task tower, when the variant
/// has one, then fine-tunes every parameter on all tasks. Returns whether
/// the task tower is active.
pub fn run_stage3<S: Scalar>(
    mut model: Backbone<S>,
    examples: &[Example],
    plan: &StagePlan,
) -> Result<(Backbone<S>, Vec<StageRecord>, bool)> {
    if model.stage() != 2 {
        return Err(Error::Stage(format!("stage 3 needs a stage-2 model, got stage {}", model.stage())));
    }
    if plan.stage != 3 {
        return Err(Error::Config(format!("stage-3 run given a stage-{} plan", plan.stage)));
    }
    let tower = model.enable_task_tower()?;
    if !tower {
        info!("{} variant has no motion tower; stage 3 runs without a task tower", model.config().variant.kind);
    }
    let log = train_backbone(&mut model, examples, plan)?;
    model.set_stage(3);
    Ok((model, log, tower))
}

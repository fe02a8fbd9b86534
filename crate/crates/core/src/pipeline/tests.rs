use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Activation, Tape};
use crate::backbone::{Backbone, BackboneConfig, Slot, TargetShape, Vocabulary};
use crate::data::{generate_corpus, FeatureStats, SyntheticSpec, Task, TextVocab};
use crate::fusion::{BlockConfig, Tower, TowerVariant, VariantKind};
use crate::patterns::{LayoutKind, MultiStreamTokens, PAD};
use crate::rvq::{TokenizerConfig, TokenizerTraining};
use crate::Error;

const LEVELS: usize = 2;
const CODES: usize = 6;

fn format(layout: LayoutKind) -> PromptFormat {
    PromptFormat {
        vocab: Vocabulary::new(TextVocab::default().len(), LEVELS, CODES).unwrap(),
        layout,
        max_len: 256,
    }
}

fn grid(len: usize, rng: &mut ChaCha8Rng) -> MultiStreamTokens {
    MultiStreamTokens::new((0..LEVELS).map(|_| (0..len).map(|_| rng.random_range(0..CODES as u16)).collect()).collect())
        .unwrap()
}

fn prompt(task: Task, len: usize, seed: u64) -> Prompt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents: Vec<_> = (0..task.motion_count()).map(|_| grid(len, &mut rng)).collect();
    prompt_for(task, &[0, 3, 5], (task == Task::Edit).then_some(&[1u32, 2][..]), &agents).unwrap()
}

#[test]
fn motion_to_text_has_motion_source_and_text_target() {
    let p = prompt(Task::MotionToText, 4, 0);
    assert!(matches!(p.sources.as_slice(), [Span::Motion(a)] if a.len() == 1));
    assert_eq!(p.targets, vec![Span::Text(vec![0, 3, 5])]);
}

#[test]
fn edit_conditions_on_motion_and_instruction() {
    let p = prompt(Task::Edit, 4, 1);
    assert!(matches!(p.sources.as_slice(), [Span::Motion(_), Span::Text(t)] if t == &vec![1, 2]));
    assert!(matches!(p.targets.as_slice(), [Span::Motion(a)] if a.len() == 1));
}

#[test]
fn motion_to_motion_splits_cover_every_step() {
    let p = prompt(Task::Inbetween, 8, 2);
    let lens = |spans: &[Span]| -> Vec<usize> {
        spans
            .iter()
            .map(|s| match s {
                Span::Motion(a) => a[0].len(),
                Span::Text(_) => 0,
            })
            .collect()
    };
    assert_eq!(lens(&p.sources), vec![2, 2]);
    assert_eq!(lens(&p.targets), vec![4]);
    let p = prompt(Task::PairPredict, 8, 3);
    assert!(matches!(&p.targets[..], [Span::Motion(a)] if a.len() == 2 && a[0].len() == 4));
}

#[test]
fn loss_mask_is_exactly_the_target_region() {
    for task in Task::ALL {
        let f = format(LayoutKind::Delay).format(&prompt(task, 8, 4)).unwrap();
        let seq = &f.sequence;
        for (i, &t) in seq.target.iter().enumerate() {
            assert_eq!(t, i > f.target_start, "{task} slot {i}");
        }
        let (first, last) = (f.target_bounds[0].0, f.target_bounds.last().unwrap().1);
        assert_eq!(first, f.target_start + 1);
        assert_eq!(last + 1, seq.len());
        for &(a, b) in &f.source_bounds {
            assert!(b <= f.target_start && a >= 1);
        }
    }
}

#[test]
fn loss_counts_only_target_tokens() {
    let cfg = tiny_backbone(LayoutKind::Delay, VariantKind::Moe);
    let model = Backbone::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let fmt = PromptFormat {
        vocab: cfg.vocab(),
        layout: cfg.layout,
        max_len: cfg.max_len,
    };
    for task in Task::ALL {
        let f = fmt.format(&prompt(task, 4, 5)).unwrap();
        let mut want = 0;
        for (i, s) in f.sequence.slots.iter().enumerate().skip(f.target_start + 1) {
            assert!(f.sequence.target[i]);
            want += match s {
                Slot::Word(_) | Slot::Single { .. } => 1,
                Slot::Group(c) => c.iter().filter(|&&x| x != PAD).count(),
            };
        }
        let got = model.nll(std::slice::from_ref(&f.sequence)).unwrap().total().count;
        assert_eq!(got, want, "{task}");
    }
}

#[test]
fn oversize_prompt_names_the_limit() {
    let mut fmt = format(LayoutKind::Flatten);
    fmt.max_len = 20;
    match fmt.format(&prompt(Task::React, 8, 6)) {
        Err(Error::Truncation { len, limit, .. }) => {
            assert_eq!(limit, 20);
            assert!(len > 20);
        }
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn target_shape_and_positions_match_the_formatted_target() {
    for layout in LayoutKind::ALL {
        let fmt = format(layout);
        for task in Task::ALL.into_iter().filter(|t| !t.targets_text()) {
            let p = prompt(task, 8, 7);
            let f = fmt.format(&p).unwrap();
            let shape = PromptFormat::target_shape(&p.targets).unwrap();
            let (a, b) = f.target_bounds[0];
            assert_eq!(fmt.target_positions(&shape), b - a, "{task} {layout}");
        }
    }
    assert_eq!(PromptFormat::target_shape(&[Span::Text(vec![1])]).unwrap(), TargetShape::Text);
}

#[test]
fn parse_rejects_malformed_prompts() {
    let fmt = format(LayoutKind::Parallel);
    let f = fmt.format(&prompt(Task::TextToMotion, 4, 8)).unwrap();
    let slots = &f.sequence.slots;
    assert!(fmt.parse(&slots[1..]).is_err());
    assert!(fmt.parse(&slots[..slots.len() - 1]).is_err());
    let mut cut = slots.clone();
    cut.remove(slots.len() - 2);
    assert!(fmt.parse(&cut).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_inverts_format(task_ix in 0usize..9, layout_ix in 0usize..3, len in 4usize..10, seed in any::<u64>()) {
        let task = Task::ALL[task_ix];
        let fmt = format(LayoutKind::ALL[layout_ix]);
        let p = prompt(task, len, seed);
        let f = fmt.format(&p).unwrap();
        let back = fmt.parse(&f.sequence.slots).unwrap();
        prop_assert_eq!(&back, &p);
        // Boundaries are recoverable: re-formatting the parse lands on the same spans.
        let again = fmt.format(&back).unwrap();
        prop_assert_eq!(again.source_bounds, f.source_bounds);
        prop_assert_eq!(again.target_bounds, f.target_bounds);
    }
}

#[test]
fn prompts_of_different_tasks_never_collide() {
    let fmt = format(LayoutKind::Delay);
    let seqs: Vec<_> = Task::ALL.iter().map(|&t| fmt.format(&prompt(t, 8, 9)).unwrap().sequence.slots).collect();
    for (i, a) in seqs.iter().enumerate() {
        assert_eq!(fmt.parse(a).unwrap().task, Task::ALL[i]);
        for b in &seqs[i + 1..] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn stage_plans_enforce_task_sets() {
    StagePlan::stage2().validate().unwrap();
    StagePlan::stage3().validate().unwrap();
    let bad = StagePlan {
        tasks: vec![Task::Edit],
        ..StagePlan::stage2()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = StagePlan {
        stage: 1,
        ..StagePlan::stage2()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn split_holds_out_every_task() {
    let items = generate_corpus(&SyntheticSpec::default(), 45).unwrap();
    let (train, held) = split_corpus(&items, 5).unwrap();
    assert_eq!((train.len(), held.len()), (36, 9));
    for t in Task::ALL {
        assert!(held.iter().any(|i| i.task == t) && train.iter().any(|i| i.task == t));
    }
}

// --- small end-to-end fixture -------------------------------------------

fn tiny_backbone(layout: LayoutKind, kind: VariantKind) -> BackboneConfig {
    BackboneConfig {
        block: BlockConfig {
            d_model: 16,
            d_ff: 32,
            heads: 2,
            layers: 2,
            activation: Activation::Relu,
        },
        variant: TowerVariant::of(kind),
        layout,
        levels: LEVELS,
        codebook_size: CODES,
        text_vocab: TextVocab::default().len(),
        max_len: 96,
        init_std: 0.05,
    }
}

struct Fixture {
    corpus: TokenizedCorpus,
    held: TokenizedCorpus,
    tokenizer_hash: String,
}

fn fixture() -> Fixture {
    let spec = SyntheticSpec {
        frames: 24,
        ..SyntheticSpec::default()
    };
    let items = generate_corpus(&spec, 90).unwrap();
    let (train, held) = split_corpus(&items, 5).unwrap();
    let stats = FeatureStats::fit(train.iter().flat_map(|i| &i.motions)).unwrap();
    let motions: Vec<_> = train.iter().flat_map(|i| &i.motions).map(|m| stats.normalize(m).unwrap()).collect();
    let cfg = TokenizerConfig {
        levels: LEVELS,
        codebook_size: CODES,
        latent_dim: 8,
        hidden: 8,
        ..TokenizerConfig::desk()
    };
    let training = TokenizerTraining {
        steps: 20,
        batch_size: 4,
        crop: 24,
        ..TokenizerTraining::default()
    };
    let (tok, _) = run_stage1::<f64>(&motions, &cfg, &training).unwrap();
    Fixture {
        corpus: TokenizedCorpus::new(&train, &stats, &tok).unwrap(),
        held: TokenizedCorpus::new(&held, &stats, &tok).unwrap(),
        tokenizer_hash: tok.content_hash(),
    }
}

fn fmt_of(cfg: &BackboneConfig) -> PromptFormat {
    PromptFormat {
        vocab: cfg.vocab(),
        layout: cfg.layout,
        max_len: cfg.max_len,
    }
}

fn plan2(steps: usize) -> StagePlan {
    StagePlan {
        steps,
        batch_size: 4,
        warmup: 5,
        ..StagePlan::stage2()
    }
}

fn plan3(steps: usize) -> StagePlan {
    StagePlan {
        steps,
        batch_size: 4,
        warmup: 5,
        ..StagePlan::stage3()
    }
}

#[test]
fn unfrozen_tokenizer_is_refused() {
    let tok = crate::rvq::TokenizerModel::<f64>::new(TokenizerConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let stats = FeatureStats {
        mean: vec![0.0; 8],
        std: vec![1.0; 8],
    };
    assert!(matches!(TokenizedCorpus::new(&[], &stats, &tok), Err(Error::Stage(_))));
}

#[test]
fn stages_two_and_three_end_to_end() {
    let fx = fixture();
    let cfg = tiny_backbone(LayoutKind::Delay, VariantKind::Moe);
    let fmt = fmt_of(&cfg);
    let train = build_examples(&fmt, &fx.corpus, &Task::ALL).unwrap();
    let held = build_examples(&fmt, &fx.held, &BASIC_TASKS).unwrap();
    let held_seqs: Vec<_> = held.iter().map(|e| e.formatted.sequence.clone()).collect();

    // Stage 3 refuses an untrained model.
    let fresh = Backbone::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = fresh.nll(&held_seqs).unwrap().mean().unwrap();
    assert!(matches!(run_stage3(fresh, &train, &plan3(2)), Err(Error::Stage(_))));

    let (s2, log2) = run_stage2::<f64>(&cfg, &train, &plan2(150)).unwrap();
    assert_eq!(log2.len(), 150);
    assert!(log2.iter().all(|r| BASIC_TASKS.contains(&r.task) && r.stage == 2));
    assert_eq!(s2.stage(), 2);
    let after = s2.nll(&held_seqs).unwrap().mean().unwrap();
    assert!(after < before, "held-out NLL {after} not below untrained {before}");

    // Identical plans give identical logs.
    let (again, log_again) = run_stage2::<f64>(&cfg, &train, &plan2(150)).unwrap();
    assert_eq!(log_again, log2);
    assert_eq!(again.content_hash(), s2.content_hash());

    // Cloning the motion tower changes no output.
    let m2m: Vec<_> = train
        .iter()
        .filter(|e| e.task.is_motion_to_motion())
        .take(9)
        .map(|e| e.formatted.sequence.clone())
        .collect();
    let mut cloned = s2.clone();
    assert!(cloned.enable_task_tower().unwrap());
    assert_eq!(cloned.nll(&m2m).unwrap(), s2.nll(&m2m).unwrap());

    let (s3, log3, tower) = run_stage3(s2, &train, &plan3(60)).unwrap();
    assert!(tower);
    assert_eq!(s3.stage(), 3);
    assert!(log3.iter().any(|r| r.task == Task::Edit));

    // Motion-to-text batches leave the task tower untouched.
    let m2t: Vec<_> = train.iter().filter(|e| e.task == Task::MotionToText).take(4).collect();
    let mut tape = Tape::new();
    let b = s3.params().bind(&mut tape, true).unwrap();
    let seqs: Vec<_> = m2t.iter().map(|e| &e.formatted.sequence).collect();
    let loss = s3.nll_on_tape(&mut tape, &b, &seqs).unwrap().loss;
    let grads = tape.backward(loss).unwrap();
    let task_ids = s3.tower_params(Tower::MotionTask);
    assert!(!task_ids.is_empty());
    for id in task_ids {
        assert!(grads.wrt(b.vars()[id.index()]).data().iter().all(|&g| g == 0.0));
    }

    // The tokenizer is untouched by backbone training.
    assert_eq!(fixture().tokenizer_hash, fx.tokenizer_hash);
}

#[test]
fn prototype_runs_stage_three_without_a_task_tower() {
    let fx = fixture();
    let cfg = tiny_backbone(LayoutKind::Parallel, VariantKind::Prototype);
    let train = build_examples(&fmt_of(&cfg), &fx.corpus, &Task::ALL).unwrap();
    let (s2, _) = run_stage2::<f64>(&cfg, &train, &plan2(3)).unwrap();
    let (s3, log, tower) = run_stage3(s2, &train, &plan3(3)).unwrap();
    assert!(!tower && !s3.routing().task_tower);
    assert_eq!(log.len(), 3);
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let fx = fixture();
    let cfg = tiny_backbone(LayoutKind::Delay, VariantKind::Moe);
    let train = build_examples(&fmt_of(&cfg), &fx.corpus, &BASIC_TASKS).unwrap();
    let mut model = Backbone::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let head = model.word_head();
    model.params_mut().get_mut(head).data_mut()[0] = f64::NAN;
    match train_backbone(&mut model, &train, &plan2(4)) {
        Err(Error::Training { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a training error, got {:?}", other.map(|l| l.len())),
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check_params, Activation, Tape, Tensor};
use crate::data::Task;
use crate::fusion::{BlockConfig, TowerVariant, VariantKind};
use crate::patterns::{LayoutKind, MultiStreamTokens, StreamPos, PAD};
use crate::Error;

fn tiny(layout: LayoutKind, levels: usize) -> BackboneConfig {
    BackboneConfig {
        block: BlockConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            layers: 2,
            activation: Activation::Gelu,
        },
        variant: TowerVariant::of(VariantKind::Moe),
        layout,
        levels,
        codebook_size: 5,
        text_vocab: 7,
        max_len: 48,
        init_std: 0.3,
    }
}

fn model(layout: LayoutKind, levels: usize, seed: u64) -> Backbone<f64> {
    Backbone::new(tiny(layout, levels), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn grid(levels: usize, len: usize, seed: u64) -> MultiStreamTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultiStreamTokens::new((0..levels).map(|_| (0..len).map(|_| rng.random_range(0..5u16)).collect()).collect()).unwrap()
}

/// `[T2M] w w <target> <motion> span </motion> <end>` with the target region in the loss.
fn training_seq(m: &Backbone<f64>, motion: &MultiStreamTokens) -> Sequence {
    let v = *m.vocab();
    let mut slots = vec![
        Slot::Word(v.special(Special::Task(Task::TextToMotion))),
        Slot::Word(1),
        Slot::Word(3),
        Slot::Word(v.special(Special::BeginTarget)),
    ];
    let start = slots.len();
    slots.push(Slot::Word(v.special(Special::MotionBegin)));
    slots.extend(motion_slots(motion, m.config().layout));
    slots.push(Slot::Word(v.special(Special::MotionEnd)));
    slots.push(Slot::Word(v.special(Special::End)));
    let target = (0..slots.len()).map(|i| i >= start).collect();
    Sequence::new(slots, target, Some(Task::TextToMotion)).unwrap()
}

fn hidden_values(m: &Backbone<f64>, seq: &Sequence) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = m.params().bind(&mut tape, false).unwrap();
    let p = m.pack(&[seq]).unwrap();
    let h = m.hidden(&mut tape, &b, &p).unwrap();
    tape.value(h.states).clone()
}

#[test]
fn grouped_embedding_is_the_sum_of_stream_lookups() {
    let m = model(LayoutKind::Parallel, 3, 1);
    let seq = Sequence::prompt(vec![Slot::Word(2), Slot::Group(vec![1, 4, PAD])], None);
    let mut tape = Tape::new();
    let b = m.params().bind(&mut tape, false).unwrap();
    let p = m.pack(&[&seq]).unwrap();
    let (x, _) = m.embed(&mut tape, &b, &p).unwrap();
    let x = tape.value(x).clone();
    let s = m.params();
    let row = |name: &str, r: usize| s.get(s.find(name).unwrap()).row(r).to_vec();
    for j in 0..8 {
        let want = row("embed.stream0", 1)[j] + row("embed.stream1", 4)[j] + row("embed.stream2", 5)[j] + row("embed.pos", 1)[j];
        assert!((x.row(1)[j] - want).abs() < 1e-15);
        assert_eq!(x.row(0)[j], row("embed.word", 2)[j] + row("embed.pos", 0)[j]);
    }
    // A single stream reduces to one lookup.
    let one = model(LayoutKind::Parallel, 1, 1);
    let seq = Sequence::prompt(vec![Slot::Group(vec![3])], None);
    let mut tape = Tape::new();
    let b = one.params().bind(&mut tape, false).unwrap();
    let (x, lookups) = one.embed(&mut tape, &b, &one.pack(&[&seq]).unwrap()).unwrap();
    assert_eq!(lookups.len(), 1);
    assert!(tape.value(x).all_finite());
}

#[test]
fn all_pad_position_embeds_finitely() {
    let m = model(LayoutKind::Delay, 3, 2);
    let seq = Sequence::prompt(vec![Slot::Group(vec![PAD; 3])], None);
    assert!(hidden_values(&m, &seq).all_finite());
}

#[test]
fn out_of_range_ids_are_vocabulary_errors() {
    let m = model(LayoutKind::Parallel, 2, 3);
    for bad in [
        Slot::Word(m.vocab().words() as u32),
        Slot::Group(vec![0]),
        Slot::Group(vec![0, 5]),
        Slot::Single { level: 2, code: 0 },
    ] {
        let seq = Sequence::prompt(vec![bad], None);
        assert!(matches!(m.pack(&[&seq]), Err(Error::Vocab(_))));
    }
}

#[test]
fn zero_heads_give_log_range_size() {
    for layout in LayoutKind::ALL {
        let mut m = model(layout, 3, 4);
        let ids: Vec<_> = m.stream_heads().iter().copied().chain([m.word_head()]).collect();
        for id in ids {
            m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let seq = training_seq(&m, &grid(3, 4, 1));
        let r = m.nll(&[seq]).unwrap();
        assert_eq!(r.streams.len(), 3);
        for s in &r.streams {
            assert!((s.mean().unwrap() - 5f64.ln()).abs() < 1e-12);
        }
        assert!((r.text.mean().unwrap() - (m.vocab().words() as f64).ln()).abs() < 1e-12);
        // Recombining the parts with their token counts gives the total.
        let t = r.total();
        let parts: f64 = r.streams.iter().map(|s| s.sum).sum::<f64>() + r.text.sum;
        assert!((t.sum - parts).abs() < 1e-12);
    }
}

#[test]
fn fully_masked_batch_is_an_error() {
    let m = model(LayoutKind::Delay, 2, 5);
    let seq = Sequence::prompt(vec![Slot::Word(0), Slot::Word(1)], None);
    let mut tape = Tape::new();
    let b = m.params().bind(&mut tape, true).unwrap();
    assert!(matches!(m.nll_on_tape(&mut tape, &b, &[&seq]), Err(Error::EmptyLoss(_))));
    assert!(matches!(m.nll(&[seq]), Err(Error::EmptyLoss(_))));
}

#[test]
fn over_long_sequences_are_truncation_errors() {
    let m = model(LayoutKind::Delay, 2, 5);
    let seq = Sequence::prompt(vec![Slot::Word(0); 49], None);
    assert!(matches!(m.pack(&[&seq]), Err(Error::Truncation { limit: 48, .. })));
}

#[test]
fn later_inputs_never_change_earlier_outputs() {
    for layout in LayoutKind::ALL {
        let m = model(layout, 3, 6);
        let seq = training_seq(&m, &grid(3, 4, 2));
        let base = hidden_values(&m, &seq);
        for p in 1..seq.len() {
            let mut alt = seq.clone();
            alt.slots[p] = match &alt.slots[p] {
                Slot::Word(w) => Slot::Word((w + 1) % 7),
                Slot::Group(c) => Slot::Group(c.iter().map(|&x| if x == PAD { x } else { (x + 1) % 5 }).collect()),
                Slot::Single { level, code } => Slot::Single { level: *level, code: (code + 1) % 5 },
            };
            let h = hidden_values(&m, &alt);
            for r in 0..p {
                assert_eq!(h.row(r), base.row(r), "{layout:?} p={p} r={r}");
            }
            assert_ne!(h.row(p), base.row(p));
        }
    }
}

#[test]
fn masked_slots_do_not_affect_the_loss() {
    let m = model(LayoutKind::Delay, 2, 7);
    let seq = training_seq(&m, &grid(2, 3, 3));
    let base = m.nll(std::slice::from_ref(&seq)).unwrap();
    let mut alt = seq.clone();
    alt.slots[1] = Slot::Word(6);
    alt.slots[2] = Slot::Word(5);
    // Source words change the conditioning but are never scored themselves.
    let r = m.nll(&[alt]).unwrap();
    assert_eq!(r.total().count, base.total().count);
}

#[test]
fn pad_targets_contribute_no_gradient() {
    let m = model(LayoutKind::Delay, 3, 8);
    let motion = grid(3, 2, 4);
    let mut slots = vec![Slot::Word(m.vocab().special(Special::MotionBegin))];
    slots.extend(motion_slots(&motion, LayoutKind::Delay));
    // Only the last delayed column is scored; streams 0 and 1 are pads there.
    let n = slots.len();
    let target = (0..n).map(|i| i == n - 1).collect();
    let seq = Sequence::new(slots, target, None).unwrap();
    let mut tape = Tape::new();
    let b = m.params().bind(&mut tape, true).unwrap();
    let terms = m.nll_on_tape(&mut tape, &b, &[&seq]).unwrap();
    assert_eq!(terms.streams.iter().map(|s| s.count).collect::<Vec<_>>(), [0, 0, 1]);
    let g = tape.backward(terms.loss).unwrap();
    for l in 0..2 {
        assert!(g.wrt(b[m.stream_heads()[l]]).data().iter().all(|&x| x == 0.0));
    }
    assert!(g.wrt(b[m.stream_heads()[2]]).max_abs() > 0.0);
}

#[test]
fn attention_pairs_match_layout_lengths() {
    for layout in LayoutKind::ALL {
        let m = model(layout, 3, 9);
        let motion = grid(3, 5, 5);
        let seq = Sequence::prompt(motion_slots(&motion, layout), None);
        let mut tape = Tape::new();
        let b = m.params().bind(&mut tape, false).unwrap();
        let p = m.pack(&[&seq]).unwrap();
        m.hidden(&mut tape, &b, &p).unwrap();
        let len = crate::patterns::Layout::new(layout, 3, 5).unwrap().length() as u64;
        assert_eq!(tape.counters().attention_pairs, 2 * len * len);
        assert_eq!(tape.counters().attention_calls, 2);
    }
}

#[test]
fn probe_matches_dependency_sets() {
    for layout in LayoutKind::ALL {
        for levels in 1..=3 {
            let m = model(layout, levels, 10);
            let motion = grid(levels, 3, 6);
            let lay = crate::patterns::Layout::new(layout, levels, 3).unwrap();
            for tok in lay.tokens() {
                let got = jacobian_dependency_probe(&m, &motion, tok).unwrap();
                assert_eq!(got, lay.dependency_set(tok).unwrap(), "{layout:?} L={levels} {tok:?}");
            }
        }
    }
    let m = model(LayoutKind::Delay, 3, 10);
    let s = jacobian_dependency_probe(&m, &grid(3, 3, 1), StreamPos { level: 2, time: 2 }).unwrap();
    assert!(s.contains(&StreamPos { level: 1, time: 2 }));
}

#[test]
fn greedy_generation_is_deterministic_and_self_consistent() {
    let m = model(LayoutKind::Delay, 3, 11);
    let v = *m.vocab();
    let prompt = vec![
        Slot::Word(v.special(Special::Task(Task::TextToMotion))),
        Slot::Word(2),
        Slot::Word(v.special(Special::BeginTarget)),
    ];
    let target = TargetShape::Motion { agents: vec![4] };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = m.generate(&prompt, Some(Task::TextToMotion), &target, 100, Sampling::Greedy, &mut rng).unwrap();
    let b = m.generate(&prompt, Some(Task::TextToMotion), &target, 100, Sampling::Greedy, &mut rng).unwrap();
    assert_eq!(a, b);
    assert!(!a.truncated);
    assert_eq!(a.motions[0].len(), 4);
    assert_eq!(a.steps, 4 + 2);

    // Teacher forcing the generated sequence reproduces the greedy choices.
    let mut slots = prompt.clone();
    slots.extend(a.slots.iter().cloned());
    let seq = Sequence::prompt(slots.clone(), Some(Task::TextToMotion));
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape, false).unwrap();
    let h = m.hidden(&mut tape, &bound, &m.pack(&[&seq]).unwrap()).unwrap().states;
    for (i, slot) in slots.iter().enumerate().skip(prompt.len() + 1) {
        if let Slot::Group(codes) = slot {
            for (l, &c) in codes.iter().enumerate().filter(|(_, c)| **c != PAD) {
                let lg = m.stream_logits(&mut tape, &bound, h, l, &[i - 1]).unwrap();
                assert_eq!(sample(&tape.value(lg).to_f64(), Sampling::Greedy, &mut rng), c as usize);
            }
        }
    }
}

#[test]
fn generated_delay_spans_always_undelay() {
    for seed in 0..6 {
        let m = model(LayoutKind::Delay, 1 + seed as usize % 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = vec![Slot::Word(m.vocab().special(Special::BeginTarget))];
        let target = TargetShape::Motion { agents: vec![3, 2] };
        let g = m
            .generate(&prompt, None, &target, 100, Sampling::TopK { k: 3, temperature: 1.5 }, &mut rng)
            .unwrap();
        assert_eq!(g.motions.iter().map(|x| x.len()).collect::<Vec<_>>(), [3, 2]);
    }
}

#[test]
fn vanishing_temperature_matches_greedy() {
    let logits = [0.3, 1.7, -2.0, 1.69];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        assert_eq!(sample(&logits, Sampling::Temperature(1e-6), &mut rng), 1);
        assert_eq!(sample(&logits, Sampling::TopK { k: 1, temperature: 3.0 }, &mut rng), 1);
    }
    assert_eq!(sample(&[1.0, 1.0], Sampling::Greedy, &mut rng), 0);
    let m = model(LayoutKind::Parallel, 2, 12);
    let prompt = vec![Slot::Word(m.vocab().special(Special::BeginTarget))];
    let t = TargetShape::Motion { agents: vec![3] };
    let g = m.generate(&prompt, None, &t, 50, Sampling::Greedy, &mut rng).unwrap();
    let c = m.generate(&prompt, None, &t, 50, Sampling::Temperature(1e-9), &mut rng).unwrap();
    assert_eq!(g, c);
}

#[test]
fn exhausted_budget_sets_truncation_flag() {
    let m = model(LayoutKind::Delay, 3, 13);
    let prompt = vec![Slot::Word(m.vocab().special(Special::BeginTarget))];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = m
        .generate(&prompt, None, &TargetShape::Motion { agents: vec![5] }, 4, Sampling::Greedy, &mut rng)
        .unwrap();
    assert!(g.truncated);
    assert_eq!(g.steps, 4);
    assert_eq!(g.motions[0].len(), 2);
    let t = m.generate(&prompt, None, &TargetShape::Text, 3, Sampling::Greedy, &mut rng).unwrap();
    assert!(t.truncated || t.slots.last() == Some(&Slot::Word(m.vocab().special(Special::End))));
}

#[test]
fn backbone_loss_passes_gradient_check() {
    for kind in [VariantKind::Prototype, VariantKind::Lora] {
        let cfg = BackboneConfig {
            variant: TowerVariant {
                lora_rank: 2,
                ..TowerVariant::of(kind)
            },
            ..tiny(LayoutKind::Delay, 2)
        };
        let m = Backbone::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        let seq = training_seq(&m, &grid(2, 3, 7));
        let ids: Vec<_> = m.params().ids().collect();
        let check = grad_check_params(
            m.params(),
            &ids,
            |tape, store| {
                let b = store.bind(tape, true)?;
                Ok((m.nll_on_tape(tape, &b, &[&seq])?.loss, b))
            },
            1e-6,
            3,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "{kind:?} {check:?}");
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(LayoutKind::Delay, 2, 15);
    m.enable_task_tower().unwrap();
    m.set_stage(3);
    let path = dir.path().join("lm.ckpt");
    m.save(&path).unwrap();
    let back = Backbone::<f64>::load(&path).unwrap();
    assert_eq!(back, m);
}

//! Public-API flows across modules: run directories, checkpoints and files.

use std::fs;

use motion_lm::data::{load_corpus, save_corpus, MotionSequence, Task};
use motion_lm::eval::experiment::{read_jsonl, train_tokenizer_stage};
use motion_lm::eval::{files, report, run_experiment, Corpus, ExperimentConfig, MetricsReport};
use motion_lm::pipeline::{run_stage3, StageRecord, TokenizedCorpus};
use motion_lm::rvq::{TokenGrid, TokenizerRecord};
use motion_lm::{Error, Model, Tokenizer};

#[test]
fn run_directory_holds_every_artifact_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::smoke();
    let exp = run_experiment(&cfg, Some(dir.path())).unwrap();
    let d = dir.path();

    let saved: ExperimentConfig = serde_json::from_slice(&fs::read(d.join(files::CONFIG)).unwrap()).unwrap();
    assert_eq!(saved, cfg);
    assert_eq!(MetricsReport::load(&d.join(files::METRICS)).unwrap(), exp.report);

    let tok = Tokenizer::load(&d.join(files::TOKENIZER)).unwrap();
    assert_eq!(tok.content_hash(), exp.report.checkpoints["tokenizer"]);
    assert!(tok.is_frozen());
    for (file, key) in [(files::STAGE2, "stage2"), (files::STAGE3, "stage3")] {
        let m = Model::load(&d.join(file)).unwrap();
        assert_eq!(m.content_hash(), exp.report.checkpoints[key], "{key}");
    }
    assert_eq!(Model::load(&d.join(files::STAGE3)).unwrap().stage(), 3);

    let tlog: Vec<TokenizerRecord> = read_jsonl(&d.join(files::TOKENIZER_LOG)).unwrap();
    assert_eq!(tlog.len(), cfg.tokenizer_training.steps);
    let s2: Vec<StageRecord> = read_jsonl(&d.join(files::STAGE2_LOG)).unwrap();
    let s3: Vec<StageRecord> = read_jsonl(&d.join(files::STAGE3_LOG)).unwrap();
    assert_eq!(s2, exp.stage2_log);
    assert_eq!(s3, exp.stage3_log);
    assert!(s2.iter().all(|r| r.stage == 2 && !matches!(r.task, Task::Edit | Task::React)));
}

#[test]
fn metrics_cover_every_task_at_both_stages() {
    let exp = run_experiment(&ExperimentConfig::smoke(), None).unwrap();
    let r = &exp.report;
    assert!(r.get("tokenizer", "recon_mse").is_some());
    for stage in ["stage2", "stage3"] {
        for task in Task::ALL {
            let g = format!("{stage}:{task}");
            assert!(r.get(&g, "nll").is_some(), "{g}");
        }
        assert!(r.get(&format!("{stage}:{}", Task::MotionToText), "text_bin_accuracy").is_some());
        assert!(r.get(&format!("{stage}:{}", Task::Predict), "ade").is_some());
        assert!(r.get(&format!("{stage}:{}", Task::Edit), "bin_match").is_some());
    }
    assert_eq!(r.meta["task_tower"], "true");
}

#[test]
fn reseeding_changes_the_run_and_repeating_it_does_not() {
    let a = run_experiment(&ExperimentConfig::smoke(), None).unwrap();
    let b = run_experiment(&ExperimentConfig::smoke(), None).unwrap();
    let c = run_experiment(&ExperimentConfig::smoke().reseeded(9), None).unwrap();
    assert_eq!(a.report, b.report);
    assert_ne!(a.report.config_hash, c.report.config_hash);
    assert_ne!(a.report.checkpoints, c.report.checkpoints);
}

#[test]
fn token_files_decode_like_in_memory_grids() {
    let cfg = ExperimentConfig::smoke();
    let corpus = Corpus::generate(&cfg).unwrap();
    let (tok, _) = train_tokenizer_stage(&cfg, &corpus, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let motion = corpus.stats.normalize(&corpus.held[0].motions[0]).unwrap();

    let grid = tok.tokenize(&motion).unwrap();
    let path = dir.path().join("a.tok");
    grid.save(&path).unwrap();
    let loaded = TokenGrid::load(&path).unwrap();
    assert_eq!(loaded, grid);
    let from_file = tok.detokenize(&loaded, motion.len(), motion.frame_rate()).unwrap();
    assert_eq!(from_file, tok.reconstruct(&motion).unwrap());

    let mpath = dir.path().join("a.motn");
    motion.save(&mpath).unwrap();
    assert_eq!(MotionSequence::load(&mpath).unwrap(), motion);
}

#[test]
fn saved_corpus_reloads_identically() {
    let cfg = ExperimentConfig::smoke();
    let corpus = Corpus::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = save_corpus(dir.path(), &corpus.held).unwrap();
    assert_eq!(load_corpus(&index).unwrap(), corpus.held);
}

#[test]
fn fine_tuning_requires_a_pretrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::smoke();
    run_experiment(&cfg, Some(dir.path())).unwrap();
    let twice = Model::load(&dir.path().join(files::STAGE3)).unwrap();
    assert!(matches!(run_stage3(twice, &[], &cfg.stage3), Err(Error::Stage(_))));
}

#[test]
fn report_over_several_runs_aggregates_by_layout() {
    let root = tempfile::tempdir().unwrap();
    for (name, layout) in [("delay", "delay"), ("parallel", "parallel")] {
        let mut cfg = ExperimentConfig::smoke();
        cfg.backbone.layout = layout.parse().unwrap();
        run_experiment(&cfg, Some(&root.path().join(name))).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let r = report(root.path(), out.path()).unwrap();
    assert_eq!(r.runs.keys().collect::<Vec<_>>(), ["delay", "parallel"]);
    let bars = fs::read_to_string(out.path().join("nll_by_layout.csv")).unwrap();
    assert!(bars.lines().any(|l| l.starts_with("delay,1,")), "{bars}");
    assert!(bars.lines().any(|l| l.starts_with("parallel,1,")), "{bars}");
}

#[test]
fn tokenized_corpus_keeps_agent_counts() {
    let cfg = ExperimentConfig::smoke();
    let corpus = Corpus::generate(&cfg).unwrap();
    let (tok, _) = train_tokenizer_stage(&cfg, &corpus, None).unwrap();
    let t = TokenizedCorpus::new(&corpus.held, &corpus.stats, &tok).unwrap();
    for item in &t.items {
        assert_eq!(item.agents.len(), item.item.motions.len());
        assert!(item.agents.iter().all(|a| a.levels() == cfg.tokenizer.levels));
    }
}

//! Integration tests for the experiment driver: exact resume, keep-best
//! checkpoint retention, the metrics stream, reports and corpus plumbing.

use std::path::PathBuf;

use once_cell::sync::Lazy;
use tempfile::TempDir;

use glance_cli::commands;
use glance_cli::config::{
    ExperimentConfig, LrPolicy, ModelSection, Objective, OptimSection, RunSection, TaskSection,
};
use glance_cli::report;
use glance_cli::trainer::{self, run_experiment};
use glance_core::checkpoint::Checkpoint;
use glance_core::data::{generate_corpus, load_corpus, save_corpus, Transformation};
use glance_core::decode::{DecodeConfig, DecodeMode, Reranker};
use glance_core::glm::{ratio_schedule_value, GlancingConfig};

fn tiny_config(out_dir: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        objective: Objective::Glm,
        model: ModelSection {
            d_model: Some(32),
            n_heads: Some(2),
            ffn_dim: Some(64),
            enc_layers: Some(1),
            dec_layers: Some(1),
            at_dec_layers: Some(1),
            max_src_len: Some(12),
            l_max: Some(16),
            ..Default::default()
        },
        task: TaskSection {
            transformation: Transformation::LocalReorder,
            vocab_size: 16,
            min_len: 2,
            max_len: 6,
            seed: 7,
            train_pairs: 300,
            valid_pairs: 40,
            test_pairs: 60,
            corpus: None,
        },
        glancing: GlancingConfig::default(),
        optim: OptimSection {
            lr: 2e-3,
            lr_policy: LrPolicy::InvSqrt,
            lr_end: 1e-5,
            warmup_steps: 50,
            total_steps: 60,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        run: RunSection {
            seed: 3,
            log_every: 10,
            validate_every: 20,
            keep_best: 2,
            out_dir,
            verify_two_pass: false,
        },
    }
}

/// A short trained run shared by several tests.
static SHORT_RUN: Lazy<(TempDir, ExperimentConfig, trainer::TrainOutcome)> = Lazy::new(|| {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path().join("run"));
    let outcome = run_experiment(&cfg, None).unwrap();
    (dir, cfg, outcome)
});

#[test]
fn resume_reproduces_the_same_loss_trajectory() {
    let dir = TempDir::new().unwrap();

    // uninterrupted run
    let mut full = tiny_config(dir.path().join("full"));
    full.run.log_every = 1;
    let full_out = run_experiment(&full, None).unwrap();

    // interrupted at step 20 (validate_every=20 leaves step_000020.ckpt)
    let mut head = tiny_config(dir.path().join("head"));
    head.run.log_every = 1;
    head.optim.total_steps = 20;
    run_experiment(&head, None).unwrap();

    let mut tail = tiny_config(dir.path().join("tail"));
    tail.run.log_every = 1;
    let resume_from = dir.path().join("head").join("step_000020.ckpt");
    let tail_out = run_experiment(&tail, Some(&resume_from)).unwrap();

    let full_losses: Vec<(u64, f64)> =
        full_out.metrics.iter().map(|r| (r.step, r.loss)).collect();
    let tail_losses: Vec<(u64, f64)> =
        tail_out.metrics.iter().map(|r| (r.step, r.loss)).collect();
    let offset = full_losses.len() - tail_losses.len();
    for (a, b) in full_losses[offset..].iter().zip(&tail_losses) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits(), "loss trajectory must match bit-for-bit");
    }
}

#[test]
fn metrics_stream_lambda_matches_the_schedule() {
    let (_dir, cfg, outcome) = &*SHORT_RUN;
    assert!(!outcome.metrics.is_empty());
    for record in &outcome.metrics {
        let expect = ratio_schedule_value(
            &cfg.glancing.schedule,
            record.step - 1,
            cfg.optim.total_steps,
        );
        assert_eq!(record.lambda, Some(expect));
    }
}

#[test]
fn keep_best_retains_the_top_validation_checkpoints() {
    let (_dir, cfg, outcome) = &*SHORT_RUN;
    // validations at steps 20, 40, 60 with keep_best = 2
    assert_eq!(outcome.validations.len(), 3);
    assert_eq!(outcome.best.len(), cfg.run.keep_best);
    let mut scores: Vec<f64> = outcome.validations.iter().map(|v| v.bleu).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let kept: Vec<f64> = outcome.best.iter().map(|(b, _, _)| *b).collect();
    assert_eq!(kept, scores[..cfg.run.keep_best].to_vec());
    for (_, _, path) in &outcome.best {
        assert!(path.exists(), "kept checkpoint must exist on disk");
    }
    // exactly keep_best step checkpoints remain
    let step_files = std::fs::read_dir(&cfg.run.out_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("step_")
        })
        .count();
    assert_eq!(step_files, cfg.run.keep_best);
}

#[test]
fn final_checkpoint_round_trips_through_disk() {
    let (_dir, _cfg, outcome) = &*SHORT_RUN;
    let loaded = Checkpoint::load(&outcome.final_checkpoint).unwrap();
    let restored = loaded.restore_params().unwrap();
    for ((n1, a), (n2, b)) in restored.named().iter().zip(outcome.params.named().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data(), "parameter {n1} must round-trip bit-exactly");
    }
}

#[test]
fn npd_with_one_candidate_reports_exactly_like_greedy() {
    let (_dir, cfg, outcome) = &*SHORT_RUN;
    let test = trainer::test_corpus(cfg);
    let greedy = report::evaluate(
        &outcome.params,
        None,
        &test,
        &DecodeConfig { mode: DecodeMode::ParallelGreedy, m: 1, reranker: Reranker::SelfScore },
        4,
    );
    let npd = report::evaluate(
        &outcome.params,
        None,
        &test,
        &DecodeConfig { mode: DecodeMode::Npd, m: 1, reranker: Reranker::SelfScore },
        4,
    );
    assert_eq!(npd.bleu, greedy.bleu);
    assert_eq!(npd.exact_match, greedy.exact_match);
    assert_eq!(npd.repetition_ratio, greedy.repetition_ratio);
    assert_eq!(greedy.i_dec, 1.0);
    assert_eq!(npd.i_dec, 1.0);
}

#[test]
fn evaluating_references_against_themselves_scores_100() {
    let (_dir, cfg, _outcome) = &*SHORT_RUN;
    let test = trainer::test_corpus(cfg);
    let refs = test.targets();
    let score = glance_core::data::bleu(&refs, &refs);
    assert!((score - 100.0).abs() < 1e-9);
    let rep = glance_core::data::repetition_ratio(&refs);
    assert!((0.0..=1.0).contains(&rep));
}

#[test]
fn corpus_generation_and_decode_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let spec = glance_core::data::SynthTaskSpec {
        vocab_size: 16,
        min_len: 2,
        max_len: 6,
        transformation: Transformation::MappedCopy,
        seed: 5,
    };
    let prefix = dir.path().join("corpus");
    commands::cmd_gen_corpus(&spec, 30, &prefix).unwrap();
    let corpus = load_corpus(&prefix).unwrap();
    assert_eq!(corpus.len(), 30);
    assert_eq!(corpus, generate_corpus(&spec, 30));

    // decode the source side through the CLI path with a sidecar
    let (_d, _cfg, outcome) = &*SHORT_RUN;
    let ckpt_path = dir.path().join("m.ckpt");
    Checkpoint::capture(&outcome.params, 0, None).save(&ckpt_path).unwrap();
    let out_path = dir.path().join("decoded.txt");
    let side_path = dir.path().join("side.jsonl");
    commands::cmd_decode(
        &ckpt_path,
        &prefix.with_file_name("corpus.src"),
        &DecodeConfig::default(),
        None,
        Some(&out_path),
        Some(&side_path),
    )
    .unwrap();
    let (v, outputs) = glance_core::data::load_sentence_file(&out_path).unwrap();
    assert_eq!(v, 16);
    assert_eq!(outputs.len(), 30);
    let side = std::fs::read_to_string(&side_path).unwrap();
    assert_eq!(side.lines().count(), 30);
    for line in side.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["decoder_pass_count"], 1);
    }
}

#[test]
fn average_checkpoints_command_matches_manual_average() {
    let dir = TempDir::new().unwrap();
    let (_d, _cfg, outcome) = &*SHORT_RUN;
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    Checkpoint::capture(&outcome.params, 1, None).save(&a).unwrap();
    Checkpoint::capture(&outcome.params, 2, None).save(&b).unwrap();
    let out = dir.path().join("avg.ckpt");
    commands::cmd_average_checkpoints(&[a.clone(), b.clone()], &out).unwrap();
    let avg = Checkpoint::load(&out).unwrap();
    // identical inputs: identical parameters out
    for (t, orig) in avg.params.iter().zip(Checkpoint::load(&a).unwrap().params.iter()) {
        assert_eq!(t.data, orig.data);
    }
}

#[test]
fn training_from_a_corpus_file_matches_generated_corpus() {
    let dir = TempDir::new().unwrap();
    let mut gen_cfg = tiny_config(dir.path().join("gen"));
    gen_cfg.optim.total_steps = 10;
    gen_cfg.run.validate_every = 10;
    let generated = run_experiment(&gen_cfg, None).unwrap();

    // save the same corpus and train from the file
    let corpus = generate_corpus(&gen_cfg.task.spec(), gen_cfg.task.train_pairs);
    let prefix = dir.path().join("corpus");
    save_corpus(&corpus, &prefix).unwrap();
    let mut file_cfg = tiny_config(dir.path().join("file"));
    file_cfg.optim.total_steps = 10;
    file_cfg.run.validate_every = 10;
    file_cfg.task.corpus = Some(prefix);
    let from_file = run_experiment(&file_cfg, None).unwrap();

    assert_eq!(generated.params.digest(), from_file.params.digest());
}

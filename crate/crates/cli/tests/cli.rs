//! End-to-end tests over the compiled binary: pipeline wiring, exit codes,
//! reproducibility, and input-file immutability.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_texthawkes"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Paths {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    truth: PathBuf,
    model: PathBuf,
}

fn simulate_small(extra: &[&str]) -> Paths {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let truth = dir.path().join("truth.json");
    let model = dir.path().join("model.json");
    let mut args = vec![
        "simulate",
        "--out",
        corpus.to_str().unwrap(),
        "--params-out",
        truth.to_str().unwrap(),
        "--num-labels",
        "2",
        "--mu",
        "0.3",
        "--alpha-diag",
        "0.3",
        "--alpha-off",
        "0.1",
        "--horizon",
        "10",
        "--threads",
        "6",
        "--embedding-dim",
        "2",
        "--quiet",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "simulate failed: {out:?}");
    Paths {
        _dir: dir,
        corpus,
        truth,
        model,
    }
}

#[test]
fn pipeline_simulate_train_evaluate_exits_zero() {
    let p = simulate_small(&[]);
    let out = run(&["validate", "--corpus", p.corpus.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).starts_with("ok:"), "{}", stdout(&out));

    let out = run(&[
        "train",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model-out",
        p.model.to_str().unwrap(),
        "--variant",
        "textual",
        "--omega",
        "1.0",
        "--max-iterations",
        "40",
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("trained variant=textual_hp"));

    let pred = p.corpus.with_file_name("pred.csv");
    let intensities = p.corpus.with_file_name("intensities.csv");
    let out = run(&[
        "predict",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model",
        p.model.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--intensity-out",
        intensities.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let csv = fs::read_to_string(&pred).unwrap();
    assert!(csv.starts_with("thread_id,event_index,t,true_label,predicted_label"));
    let dump = fs::read_to_string(&intensities).unwrap();
    assert!(dump.starts_with("thread_id,t,label,intensity"));
    // One row per event per label.
    let events = csv.lines().count() - 1;
    assert_eq!(dump.lines().count() - 1, events * 2);

    let report = p.corpus.with_file_name("report.csv");
    let out = run(&[
        "evaluate",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--protocol",
        "thread",
        "--variant",
        "textual",
        "--omega",
        "1.0",
        "--max-iterations",
        "40",
        "--csv-out",
        report.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("aggregate"));
    assert!(fs::read_to_string(&report)
        .unwrap()
        .starts_with("fold,test_events,micro_accuracy,macro_f1"));

    let out = run(&["influence-report", "--model", p.truth.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("*0.3000*"), "{}", stdout(&out));
}

#[test]
fn validate_lists_every_violation_and_exits_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(
        &path,
        concat!(
            "{\"type\":\"header\",\"num_labels\":2,\"embedding_dim\":1}\n",
            "{\"type\":\"event\",\"thread_id\":\"a\",\"t\":-1.0,\"label\":0,\"embedding\":[0.0]}\n",
            "{\"type\":\"event\",\"thread_id\":\"a\",\"t\":2.0,\"label\":5,\"embedding\":[0.0]}\n",
        ),
    )
    .unwrap();
    let out = run(&["validate", "--corpus", path.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 2, "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("negative"), "{text}");
    assert!(text.contains("label out of range"), "{text}");
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["train", "--model-out", "/tmp/never.json"]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(text.contains("--corpus"), "{text}");
}

#[test]
fn nonexistent_corpus_is_a_data_error() {
    let out = run(&[
        "train",
        "--corpus",
        "/nonexistent/corpus.jsonl",
        "--model-out",
        "/tmp/never.json",
        "--quiet",
    ]);
    assert_eq!(code(&out), 2, "{out:?}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let p = simulate_small(&[]);
    let config = p.corpus.with_file_name("train.cfg");
    fs::write(&config, "variant = textual\nbogus_key = 1\n").unwrap();
    let out = run(&[
        "train",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model-out",
        p.model.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 1, "{out:?}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn config_file_applies_and_flags_override_it() {
    let p = simulate_small(&[]);
    let config = p.corpus.with_file_name("train.cfg");
    fs::write(&config, "variant = plain\nomega = 1.0\nmax_iterations = 30\n").unwrap();
    let out = run(&[
        "train",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model-out",
        p.model.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("variant=plain_mhp"));

    let out = run(&[
        "train",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model-out",
        p.model.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--variant",
        "textual",
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("variant=textual_hp"), "{}", stdout(&out));
}

#[test]
fn failed_gradient_check_exits_numerical() {
    let p = simulate_small(&[]);
    let out = run(&[
        "grad-check",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--variant",
        "textual",
        "--omega",
        "1.0",
        "--tolerance",
        "1e-18",
        "--quiet",
    ]);
    assert_eq!(code(&out), 3, "{out:?}");
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn passing_gradient_check_exits_zero() {
    let p = simulate_small(&[]);
    let out = run(&[
        "grad-check",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--variant",
        "fully-textual",
        "--omega",
        "1.0",
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn kernel_dump_writes_profiles_for_a_neural_model() {
    let p = simulate_small(&[]);
    let out = run(&[
        "train",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model-out",
        p.model.to_str().unwrap(),
        "--variant",
        "neural",
        "--nn-epochs",
        "3",
        "--nn-hidden",
        "4",
        "--nn-mc-samples",
        "5",
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");

    let time_csv = p.corpus.with_file_name("time.csv");
    let text_csv = p.corpus.with_file_name("text.csv");
    let out = run(&[
        "kernel-dump",
        "--model",
        p.model.to_str().unwrap(),
        "--time-out",
        time_csv.to_str().unwrap(),
        "--points",
        "50",
        "--text-out",
        text_csv.to_str().unwrap(),
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(fs::read_to_string(&time_csv).unwrap().lines().count(), 51);
    assert!(fs::read_to_string(&text_csv)
        .unwrap()
        .starts_with("cosine_similarity,kernel_value"));

    // A non-neural model must be rejected.
    let out = run(&[
        "kernel-dump",
        "--model",
        p.truth.to_str().unwrap(),
        "--time-out",
        time_csv.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 2, "{out:?}");
}

#[test]
fn reruns_and_worker_counts_give_byte_identical_outputs() {
    let p = simulate_small(&[]);
    let m1 = p.corpus.with_file_name("m1.json");
    let m2 = p.corpus.with_file_name("m2.json");
    let train = |model: &Path, workers: &str| {
        let out = run(&[
            "train",
            "--corpus",
            p.corpus.to_str().unwrap(),
            "--model-out",
            model.to_str().unwrap(),
            "--variant",
            "neural",
            "--nn-epochs",
            "4",
            "--nn-hidden",
            "4",
            "--nn-mc-samples",
            "8",
            "--seed",
            "7",
            "--workers",
            workers,
            "--quiet",
        ]);
        assert_eq!(code(&out), 0, "{out:?}");
    };
    train(&m1, "1");
    train(&m2, "4");
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
}

#[test]
fn subcommands_never_mutate_their_inputs() {
    let p = simulate_small(&[]);
    let before = fs::read(&p.corpus).unwrap();
    let out = run(&[
        "train",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model-out",
        p.model.to_str().unwrap(),
        "--variant",
        "plain",
        "--omega",
        "1.0",
        "--max-iterations",
        "20",
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let model_before = fs::read(&p.model).unwrap();
    let pred = p.corpus.with_file_name("p.csv");
    let out = run(&[
        "predict",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--model",
        p.model.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(before, fs::read(&p.corpus).unwrap());
    assert_eq!(model_before, fs::read(&p.model).unwrap());
}

#[test]
fn same_seed_simulations_are_byte_identical() {
    let a = simulate_small(&["--seed", "99"]);
    let b = simulate_small(&["--seed", "99"]);
    assert_eq!(
        fs::read(&a.corpus).unwrap(),
        fs::read(&b.corpus).unwrap()
    );
    let c = simulate_small(&["--seed", "100"]);
    assert_ne!(
        fs::read(&a.corpus).unwrap(),
        fs::read(&c.corpus).unwrap()
    );
}

#[test]
fn event_protocol_needs_two_corpora() {
    let p = simulate_small(&[]);
    let out = run(&[
        "evaluate",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--protocol",
        "event",
        "--quiet",
    ]);
    assert_eq!(code(&out), 2, "{out:?}");
}

#[test]
fn event_protocol_reports_named_folds() {
    let a = simulate_small(&["--seed", "11"]);
    let b = simulate_small(&["--seed", "12"]);
    let arg_a = format!("eventA={}", a.corpus.display());
    let arg_b = format!("eventB={}", b.corpus.display());
    let out = run(&[
        "evaluate",
        "--corpus",
        &arg_a,
        "--corpus",
        &arg_b,
        "--protocol",
        "event",
        "--variant",
        "plain",
        "--omega",
        "1.0",
        "--max-iterations",
        "25",
        "--quiet",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("eventA") && text.contains("eventB"), "{text}");
}

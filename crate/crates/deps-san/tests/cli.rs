//! End-to-end tests of the command-line interface: output formats,
//! exit codes, determinism, and agreement between serial and parallel
//! runs.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_deps-san");
const EXAMPLE_CONLLU: &str =
    concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/example.conllu");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout_of(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_file(dir: &Path, name: &str, content: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path.to_str().unwrap().to_string()
}

/// Three sentences of different lengths for multi-sentence tests.
fn multi_sentence_conllu() -> String {
    let mut text = String::new();
    for (i, n) in [3usize, 5, 4].iter().enumerate() {
        for t in 1..=*n {
            // chain: token 1 is root, token t hangs off t-1
            let head = if t == 1 { 0 } else { t - 1 };
            text.push_str(&format!(
                "{t}\ts{i}w{t}\t_\t_\t_\t_\t{head}\t_\t_\t_\n"
            ));
        }
        text.push('\n');
    }
    text
}

#[test]
fn distances_csv_on_stdout_matches_known_matrix() {
    let got = stdout_of(&["distances", "--conllu", EXAMPLE_CONLLU]);
    let want = "n=5\n0,1,3,3,2\n1,0,2,2,1\n3,2,0,2,1\n3,2,2,0,1\n2,1,1,1,0\n";
    assert_eq!(got, want);
}

#[test]
fn distances_json_has_expected_row() {
    let got = stdout_of(&["distances", "--conllu", EXAMPLE_CONLLU, "--format", "json"]);
    assert!(got.ends_with('\n'));
    let v: Value = serde_json::from_str(&got).unwrap();
    assert_eq!(v[0]["n"], 5);
    assert_eq!(v[0]["d"][1], serde_json::json!([1, 0, 2, 2, 1]));
}

#[test]
fn empty_input_yields_empty_output_and_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_file(dir.path(), "empty.conllu", "");
    assert_eq!(stdout_of(&["distances", "--conllu", &empty]), "");
    assert_eq!(
        stdout_of(&["distances", "--conllu", &empty, "--format", "json"]),
        "[]\n"
    );
}

#[test]
fn cyclic_heads_are_a_user_error_naming_the_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = write_file(
        dir.path(),
        "cycle.conllu",
        "1\ta\t_\t_\t_\t_\t2\t_\t_\t_\n2\tb\t_\t_\t_\t_\t1\t_\t_\t_\n",
    );
    let out = run(&["distances", "--conllu", &cycle]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
    assert!(stderr.contains("sentence 1"), "stderr: {stderr}");
    assert!(stderr.contains("cycle"), "stderr: {stderr}");
}

#[test]
fn missing_input_file_is_a_user_error() {
    let out = run(&["distances", "--conllu", "/nonexistent/x.conllu"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn scale_sigma_one_matches_gaussian_values() {
    let got = stdout_of(&["scale", "--conllu", EXAMPLE_CONLLU, "--sigma", "1"]);
    let row = got.lines().nth(2).unwrap();
    assert_eq!(row, "0.241971,0.398942,0.053991,0.053991,0.241971");
}

#[test]
fn scale_rs_with_zero_probability_equals_unsparsified() {
    let plain = stdout_of(&["scale", "--conllu", EXAMPLE_CONLLU]);
    let rs = stdout_of(&[
        "scale",
        "--conllu",
        EXAMPLE_CONLLU,
        "--sparsing",
        "rs",
        "--q",
        "0",
        "--seed",
        "3",
    ]);
    assert_eq!(plain, rs);
}

#[test]
fn scale_wink_k_zero_masks_everything_but_self() {
    let got = stdout_of(&[
        "scale",
        "--conllu",
        EXAMPLE_CONLLU,
        "--sparsing",
        "wink",
        "--k",
        "0",
    ]);
    let mask: Vec<&str> = got.lines().skip_while(|l| *l != "mask").collect();
    assert_eq!(
        mask,
        [
            "mask",
            "n=5",
            "1,0,0,0,0",
            "0,1,0,0,0",
            "0,0,1,0,0",
            "0,0,0,1,0",
            "0,0,0,0,1",
        ]
    );
}

#[test]
fn scale_json_carries_mask_only_for_wink() {
    let plain = stdout_of(&["scale", "--conllu", EXAMPLE_CONLLU, "--format", "json"]);
    let v: Value = serde_json::from_str(&plain).unwrap();
    assert!(v[0]["mask"].is_null());
    let wink = stdout_of(&[
        "scale",
        "--conllu",
        EXAMPLE_CONLLU,
        "--format",
        "json",
        "--sparsing",
        "wink",
        "--k",
        "1",
    ]);
    let v: Value = serde_json::from_str(&wink).unwrap();
    // distance-1 window around "experiments": itself, "The", "simple"
    assert_eq!(v[0]["mask"][1], serde_json::json!([1, 1, 0, 0, 1]));
}

#[test]
fn attend_trace_rows_are_distributions_and_layers_are_tagged() {
    let got = stdout_of(&["attend", "--conllu", EXAMPLE_CONLLU, "--seed", "11"]);
    let v: Value = serde_json::from_str(&got).unwrap();
    let layers = v["sentences"][0]["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6, "default encoder has six layers");
    for (idx, layer) in layers.iter().enumerate() {
        assert_eq!(layer["layer"], idx + 1);
        // the default config scales layers 1-3
        assert_eq!(layer["deps"], idx < 3);
        for head in layer["attn"]["heads"].as_array().unwrap() {
            for row in head["weights"].as_array().unwrap() {
                let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
                // weights are printed rounded to 6 decimals
                assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
            }
        }
    }
}

#[test]
fn attend_same_seed_is_byte_identical() {
    let a = stdout_of(&["attend", "--conllu", EXAMPLE_CONLLU, "--seed", "5"]);
    let b = stdout_of(&["attend", "--conllu", EXAMPLE_CONLLU, "--seed", "5"]);
    assert_eq!(a, b);
    let c = stdout_of(&["attend", "--conllu", EXAMPLE_CONLLU, "--seed", "6"]);
    assert_ne!(a, c, "different seeds should change the trace");
}

#[test]
fn attend_all_ones_scale_matches_baseline_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let multi = write_file(dir.path(), "multi.conllu", &multi_sentence_conllu());
    let ones = stdout_of(&[
        "attend", "--conllu", &multi, "--seed", "4", "--ds-ones",
    ]);
    let base = stdout_of(&[
        "attend", "--conllu", &multi, "--seed", "4", "--variant", "baseline",
    ]);
    let ones: Value = serde_json::from_str(&ones).unwrap();
    let base: Value = serde_json::from_str(&base).unwrap();
    for (s_ones, s_base) in ones["sentences"]
        .as_array()
        .unwrap()
        .iter()
        .zip(base["sentences"].as_array().unwrap())
    {
        for (l_ones, l_base) in s_ones["layers"]
            .as_array()
            .unwrap()
            .iter()
            .zip(l_base_iter(s_base))
        {
            // the deps tag differs by construction; the numbers must not
            assert_eq!(l_ones["attn"], l_base["attn"]);
        }
    }
}

fn l_base_iter(sentence: &Value) -> std::slice::Iter<'_, Value> {
    sentence["layers"].as_array().unwrap().iter()
}

#[test]
fn parallel_jobs_match_serial_output() {
    let dir = tempfile::tempdir().unwrap();
    let multi = write_file(dir.path(), "multi.conllu", &multi_sentence_conllu());
    for cmd in [
        vec!["distances", "--conllu", &multi],
        vec!["scale", "--conllu", &multi, "--sparsing", "rs", "--seed", "9"],
        vec!["attend", "--conllu", &multi, "--seed", "2"],
    ] {
        let serial = stdout_of(&cmd);
        let mut parallel_cmd = cmd.clone();
        parallel_cmd.extend(["--jobs", "3"]);
        let parallel = stdout_of(&parallel_cmd);
        assert_eq!(serial, parallel, "jobs changed output of {cmd:?}");
    }
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "bad.cfg", "steps = 5\nbogus_key = 1\n");
    let out = run(&["train-toy", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
    assert!(stderr.contains("bogus_key"), "stderr: {stderr}");
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
}

const TINY_TRAIN_CFG: &str = "steps = 6\nbatch_size = 4\nn_layers = 1\ndeps_layers = 1\n\
    d_model = 8\nn_heads = 2\nd_ff = 16\nvocab = 8\nmin_seq_len = 2\nmax_seq_len = 4\n";

#[test]
fn train_toy_writes_report_with_training_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file(dir.path(), "tiny.cfg", TINY_TRAIN_CFG);
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "train-toy",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("variant: deps"), "stdout: {stdout}");
    assert!(stdout.contains("final accuracy: "), "stdout: {stdout}");
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["variant"], "deps");
    assert_eq!(report["loss"].as_array().unwrap().len(), 6);
    assert_eq!(report["config"]["seed"], 3);
    assert!(report["final_accuracy"].is_f64() || report["final_accuracy"].is_u64());
    assert_eq!(report["entropy_per_layer"].as_array().unwrap().len(), 1);
}

#[test]
fn train_toy_seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let with_seed = write_file(
        dir.path(),
        "seeded.cfg",
        &format!("{TINY_TRAIN_CFG}seed = 5\n"),
    );
    let plain = write_file(dir.path(), "plain.cfg", TINY_TRAIN_CFG);
    let flag_wins = dir.path().join("a.json");
    let direct = dir.path().join("b.json");
    assert!(run(&[
        "train-toy", "--config", &with_seed, "--seed", "9",
        "--report", flag_wins.to_str().unwrap(),
    ])
    .status
    .success());
    assert!(run(&[
        "train-toy", "--config", &plain, "--seed", "9",
        "--report", direct.to_str().unwrap(),
    ])
    .status
    .success());
    let a: Value = serde_json::from_str(&std::fs::read_to_string(&flag_wins).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&std::fs::read_to_string(&direct).unwrap()).unwrap();
    assert_eq!(a["loss"], b["loss"]);
    assert_eq!(a["final_accuracy"], b["final_accuracy"]);
}

fn trace_with_weights(weights: Vec<Vec<f64>>) -> String {
    let n = weights.len();
    let zeros = vec![vec![0.0; n]; n];
    serde_json::json!({
        "sentences": [{
            "sentence": 1,
            "layers": [{
                "layer": 1,
                "deps": true,
                "attn": {
                    "heads": [{
                        "scores": zeros,
                        "scaled": zeros,
                        "weights": weights,
                        "z": zeros,
                    }],
                    "output": zeros,
                }
            }]
        }]
    })
    .to_string()
}

#[test]
fn analyze_entropy_of_uniform_and_onehot_rows() {
    let dir = tempfile::tempdir().unwrap();
    let uniform = write_file(
        dir.path(),
        "uniform.json",
        &trace_with_weights(vec![vec![0.2; 5]; 5]),
    );
    assert_eq!(
        stdout_of(&["analyze-entropy", "--trace", &uniform]),
        "layer 1: 1.609438\n"
    );
    let mut eye = vec![vec![0.0; 5]; 5];
    for (i, row) in eye.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let onehot = write_file(dir.path(), "onehot.json", &trace_with_weights(eye));
    assert_eq!(
        stdout_of(&["analyze-entropy", "--trace", &onehot]),
        "layer 1: 0.000000\n"
    );
}

#[test]
fn analyze_entropy_reads_attend_output() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.json");
    assert!(run(&[
        "attend",
        "--conllu",
        EXAMPLE_CONLLU,
        "--seed",
        "1",
        "--trace",
        trace_path.to_str().unwrap(),
    ])
    .status
    .success());
    let got = stdout_of(&["analyze-entropy", "--trace", trace_path.to_str().unwrap()]);
    let lines: Vec<&str> = got.lines().collect();
    assert_eq!(lines.len(), 6, "one line per layer: {got}");
    assert!(lines[0].starts_with("layer 1: "));
    assert!(lines[5].starts_with("layer 6: "));
}

#[test]
fn malformed_trace_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_file(dir.path(), "bad.json", "{\"sentences\": 3}");
    let out = run(&["analyze-entropy", "--trace", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

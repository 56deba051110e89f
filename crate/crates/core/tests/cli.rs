mod common;

use common::{deco, deco_env, without_timing, write_jsonl};
use deco::model::Trace;
use deco::synthetic::{fixture_trace, flip_fixtures, probe_trace};
use serde_json::{json, Value};

fn tokens(report: &Value) -> Vec<Value> {
    report["results"].as_array().unwrap().iter().map(|r| r["tokens"].clone()).collect()
}

#[test]
fn decode_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["decode", "--model", "toy", "--seed", "7", "--strategy", "greedy", "--deco", "off", "--max-new-tokens", "8"];
    let a = deco(&args, dir.path());
    let b = deco(&args, dir.path());
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(without_timing(&a.stdout), without_timing(&b.stdout));
    let r = without_timing(&a.stdout);
    assert_eq!(r["config"]["model"]["toy"]["seed"], 7);
    assert_eq!(r["aggregate"]["generated_tokens"], 64);
}

#[test]
fn zero_alpha_matches_disabled() {
    let dir = tempfile::tempdir().unwrap();
    for strategy in ["greedy", "nucleus", "beam"] {
        let base = ["decode", "--strategy", strategy, "--max-new-tokens", "10", "--num-prompts", "4"];
        let on = deco(&[&base[..], &["--deco", "on", "--alpha", "0"]].concat(), dir.path());
        let off = deco(&[&base[..], &["--deco", "off"]].concat(), dir.path());
        assert_eq!(tokens(&without_timing(&on.stdout)), tokens(&without_timing(&off.stdout)), "{strategy}");
    }
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["decode", "--strategy", "nucleus", "--num-prompts", "6", "--max-new-tokens", "6"];
    let one = deco_env(&args, dir.path(), &[("DECO_NUM_WORKERS", "1")]);
    let four = deco_env(&args, dir.path(), &[("DECO_NUM_WORKERS", "4")]);
    assert_eq!(without_timing(&one.stdout), without_timing(&four.stdout));
    let bad = deco_env(&args, dir.path(), &[("DECO_NUM_WORKERS", "zero")]);
    assert_eq!(bad.code, 2);
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"decode": {"beam_width": "wide"}}"#).unwrap();
    let out = deco(&["--config", "bad.json", "decode"], dir.path());
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("decode.beam_width"), "{}", out.stderr);
    std::fs::write(dir.path().join("unknown.json"), r#"{"decoder": {}}"#).unwrap();
    let out = deco(&["--config", "unknown.json", "decode"], dir.path());
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("decoder"), "{}", out.stderr);
    let out = deco(&["decode", "--prompts", "missing.jsonl"], dir.path());
    assert_eq!(out.code, 1, "{}", out.stderr);
    let out = deco(&["decode", "--no-such-flag"], dir.path());
    assert_eq!(out.code, 2);
}

#[test]
fn config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "model": {"toy": {"num_layers": 4, "hidden_dim": 16, "vocab_size": 32, "num_heads": 2, "max_seq_len": 64, "seed": 3}},
        "decode": {"strategy": "beam", "max_new_tokens": 5, "beam_width": 2},
        "num_prompts": 2
    });
    std::fs::write(dir.path().join("c.json"), cfg.to_string()).unwrap();
    let out = deco(&["--config", "c.json", "decode"], dir.path());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let echo = without_timing(&out.stdout)["config"].clone();
    std::fs::write(dir.path().join("echo.json"), echo.to_string()).unwrap();
    let again = deco(&["--config", "echo.json", "decode"], dir.path());
    assert_eq!(without_timing(&again.stdout)["config"], echo);
    assert_eq!(without_timing(&again.stdout), without_timing(&out.stdout));
}

#[test]
fn prompts_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(
        &dir.path().join("p.jsonl"),
        &[json!({"prompt_tokens": [1, 2, 3, 4], "visual_prefix_len": 2}), json!({"prompt_tokens": [9, 9]})],
    );
    let out = deco(&["decode", "--prompts", "p.jsonl", "--max-new-tokens", "3"], dir.path());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let r = without_timing(&out.stdout);
    assert_eq!(r["results"][0]["visual_prefix_len"], 2);
    assert_eq!(r["results"][1]["prompt_len"], 2);
    std::fs::write(dir.path().join("bad.jsonl"), "{\"prompt_tokens\": [1]}\n{\"tokens\": [1]}\n").unwrap();
    let out = deco(&["decode", "--prompts", "bad.jsonl"], dir.path());
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("bad.jsonl:2"), "{}", out.stderr);
}

#[test]
fn record_inspect_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let rec = deco(&["trace", "record", "t.lwt", "--num-prompts", "3", "--max-new-tokens", "7", "--hidden"], dir.path());
    assert_eq!(rec.code, 0, "{}", rec.stderr);
    let rec = without_timing(&rec.stdout);
    let inspect = deco(&["trace", "inspect", "t.lwt"], dir.path());
    let header = &without_timing(&inspect.stdout)["header"];
    assert_eq!(header["num_layers"], 8);
    assert_eq!(header["vocab_size"], 256);
    assert_eq!(header["hidden_dim"], 64);
    assert_eq!(header["num_steps"], 21);
    assert_eq!(header["flags"], 1);
    let replay = deco(
        &["decode", "--model", "trace", "--model-path", "t.lwt", "--num-prompts", "3", "--max-new-tokens", "7"],
        dir.path(),
    );
    assert_eq!(replay.code, 0, "{}", replay.stderr);
    assert_eq!(tokens(&without_timing(&replay.stdout)), tokens(&rec));

    let bytes = std::fs::read(dir.path().join("t.lwt")).unwrap();
    std::fs::write(dir.path().join("cut.lwt"), &bytes[..bytes.len() - 5]).unwrap();
    let out = deco(&["trace", "inspect", "cut.lwt"], dir.path());
    assert_eq!(out.code, 1);
    assert!(
        out.stderr.contains(&format!("expected {} bytes, found {}", bytes.len(), bytes.len() - 5)),
        "{}",
        out.stderr
    );
}

#[test]
fn recorded_pairs_feed_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let rec = deco(
        &["trace", "record", "t.lwt", "--num-prompts", "4", "--max-new-tokens", "2", "--labels-out", "l.jsonl"],
        dir.path(),
    );
    assert_eq!(rec.code, 0, "{}", rec.stderr);
    let out = deco(&["analyze", "overlap", "--trace", "t.lwt", "--labels", "l.jsonl"], dir.path());
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(without_timing(&out.stdout)["total"], 4);
}

fn planted_files(dir: &std::path::Path) -> Vec<deco::synthetic::FlipFixture> {
    let fixtures = flip_fixtures(11, 60, 8, 32, 1, 7);
    let (trace, labels) = fixture_trace(&fixtures);
    trace.write(dir.join("f.lwt")).unwrap();
    write_jsonl(&dir.join("f.jsonl"), &labels);
    fixtures
}

#[test]
fn hitrate_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = planted_files(dir.path());
    let out = deco(
        &["analyze", "hitrate", "--trace", "f.lwt", "--labels", "f.jsonl", "--interval", "5:7", "--interval", "4:8"],
        dir.path(),
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
    let r = without_timing(&out.stdout);
    for (i, (lo, hi)) in [(5, 7), (4, 8)].into_iter().enumerate() {
        let want: Vec<bool> = fixtures.iter().map(|f| (lo..=hi).contains(&f.planted_layer)).collect();
        let got: Vec<bool> = serde_json::from_value(r["intervals"][i]["decisions"].clone()).unwrap();
        assert_eq!(got, want);
        assert_eq!(r["intervals"][i]["planted_in_interval"], want.iter().filter(|&&b| b).count());
    }
}

#[test]
fn activation_and_perturb() {
    let dir = tempfile::tempdir().unwrap();
    planted_files(dir.path());
    let bad = deco(&["analyze", "activation", "--trace", "f.lwt", "--labels", "f.jsonl", "--threshold", "1.5"], dir.path());
    assert_eq!(bad.code, 2);
    let ok = deco(&["analyze", "activation", "--trace", "f.lwt", "--labels", "f.jsonl"], dir.path());
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert_eq!(without_timing(&ok.stdout)["activated"], 60);
    let p = deco(
        &["--seed", "4", "analyze", "perturb", "--trace", "f.lwt", "--labels", "f.jsonl", "--trials", "20"],
        dir.path(),
    );
    assert_eq!(p.code, 0, "{}", p.stderr);
    assert_eq!(without_timing(&p.stdout)["trials"], 20);
}

#[test]
fn labels_must_fit_trace() {
    let dir = tempfile::tempdir().unwrap();
    planted_files(dir.path());
    write_jsonl(
        &dir.path().join("wide.jsonl"),
        &[json!({"step_index": 0, "ground_truth_tokens": [1], "hallucinated_token": null, "paired_no_visual_step": null}),
          json!({"step_index": 0, "ground_truth_tokens": [400], "hallucinated_token": null, "paired_no_visual_step": null})],
    );
    let out = deco(&["analyze", "hitrate", "--trace", "f.lwt", "--labels", "wide.jsonl"], dir.path());
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("wide.jsonl:2"), "{}", out.stderr);
}

#[test]
fn probe_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (trace, labels) = probe_trace(2, 100, 3, 8, 16);
    trace.write(dir.path().join("p.lwt")).unwrap();
    write_jsonl(&dir.path().join("p.jsonl"), &labels);
    let out = deco(
        &["analyze", "probe-train", "--trace", "p.lwt", "--labels", "p.jsonl", "--probes-out", "probes.json"],
        dir.path(),
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
    let r = without_timing(&out.stdout);
    let layers = r["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for l in layers {
        assert!(l["train"]["all"].as_f64().unwrap() >= 0.99, "{l}");
        assert!(l["in_dist"]["all"].as_f64().unwrap() >= 0.99, "{l}");
    }
    let ev = deco(
        &["analyze", "probe-eval", "--trace", "p.lwt", "--labels", "p.jsonl", "--probes", "probes.json"],
        dir.path(),
    );
    assert_eq!(ev.code, 0, "{}", ev.stderr);
    let ev = without_timing(&ev.stdout);
    for (a, b) in ev["layers"].as_array().unwrap().iter().zip(layers) {
        assert_eq!(a["accuracy"], b["in_dist"]);
    }
    // traces without hidden states cannot be probed
    let t = Trace::from_steps(trace.steps().iter().cloned().map(|s| s.without_hidden()).collect()).unwrap();
    t.write(dir.path().join("nohidden.lwt")).unwrap();
    let out = deco(&["analyze", "probe-train", "--trace", "nohidden.lwt", "--labels", "p.jsonl"], dir.path());
    assert_ne!(out.code, 0);
}

#[test]
fn chair_and_amber_files() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(
        &dir.path().join("c.jsonl"),
        &[json!({"image_id": "1", "mentioned": ["cat", "dogs", "Car"], "ground_truth": ["cat", "dog"], "potential_hallucinations": ["car"]})],
    );
    let out = deco(&["eval", "chair", "--captions", "c.jsonl"], dir.path());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let r = without_timing(&out.stdout);
    assert!((r["chair_i"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(r["chair_s"], 1.0);
    let out = deco(&["eval", "amber", "--captions", "c.jsonl"], dir.path());
    let r = without_timing(&out.stdout);
    assert_eq!((r["cover"].as_f64(), r["cog"].as_f64()), (Some(1.0), Some(1.0)));

    std::fs::write(dir.path().join("u.json"), r#"["cat", "dog", "hot dog", "person"]"#).unwrap();
    std::fs::write(dir.path().join("syn.json"), r#"{"kitten": "cat"}"#).unwrap();
    write_jsonl(
        &dir.path().join("raw.jsonl"),
        &[json!({"image_id": "1", "raw_caption": "Two people feed a kitten hot dogs.", "ground_truth": ["person", "cat"]})],
    );
    let out = deco(
        &["eval", "chair", "--captions", "raw.jsonl", "--universe", "u.json", "--synonyms", "syn.json"],
        dir.path(),
    );
    assert_eq!(out.code, 0, "{}", out.stderr);
    let r = without_timing(&out.stdout);
    assert_eq!((r["mentioned_objects"].as_u64(), r["hallucinated_objects"].as_u64()), (Some(3), Some(1)));

    std::fs::write(dir.path().join("broken.jsonl"), "{\"image_id\": \"1\", \"mentioned\": [], \"ground_truth\": []}\n{\"image_id\": 5}\n").unwrap();
    let out = deco(&["eval", "chair", "--captions", "broken.jsonl"], dir.path());
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("broken.jsonl:2"), "{}", out.stderr);
}

#[test]
fn pope_generation_and_scoring() {
    let dir = tempfile::tempdir().unwrap();
    write_jsonl(
        &dir.path().join("a.jsonl"),
        &[
            json!({"image_id": "1", "objects": ["table", "cat", "cup"]}),
            json!({"image_id": "2", "objects": ["table", "dog"]}),
            json!({"image_id": "3", "objects": ["bird", "cups"]}),
        ],
    );
    let gen = |out: &str| deco(&["--seed", "5", "--out", out, "eval", "pope-gen", "--annotations", "a.jsonl", "--k", "2"], dir.path());
    assert_eq!(gen("q1.jsonl").code, 0);
    assert_eq!(gen("q2.jsonl").code, 0);
    let q1 = std::fs::read(dir.path().join("q1.jsonl")).unwrap();
    assert_eq!(q1, std::fs::read(dir.path().join("q2.jsonl")).unwrap());
    // answer every question correctly
    let answered: Vec<Value> = String::from_utf8(q1)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["answer"] = v["gold"].clone();
            v
        })
        .collect();
    assert_eq!(answered.len(), 18);
    write_jsonl(&dir.path().join("ans.jsonl"), &answered);
    let out = deco(&["eval", "pope-score", "--items", "ans.jsonl"], dir.path());
    assert_eq!(out.code, 0, "{}", out.stderr);
    let r = without_timing(&out.stdout);
    for split in ["all", "random", "popular", "adversarial"] {
        assert_eq!(r[split]["f1"], 1.0, "{split}");
    }
}

mod common;

use common::*;
use hreb::checkpoint;
use hreb::pipeline::{evaluate, read_conll};

#[test]
fn missing_corpus_path_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let o = train(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train_path"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("panicked"));
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "# comment\nd_model = 16\nlearning_rate = 1\n").unwrap();
    let o = train(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3") && stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn zero_learning_rate_gives_a_flat_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 12, 2);
    let cfg = write_config(dir.path(), "c.cfg", SMALL);
    let out = dir.path().join("out");
    let o = train(&cfg, &out, &["lr=0", "max_epochs=3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let losses: Vec<f64> = records(&out.join("metrics.log")).iter().map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| (l - losses[0]).abs() <= 1e-12 * losses[0].abs()));
    for f in ["best.ckpt", "final.ckpt", "summary.json", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(log.contains("# lr = 0\n"));
}

#[test]
fn same_config_twice_gives_byte_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 12, 2);
    let cfg = write_config(dir.path(), "c.cfg", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&cfg, &a, &[])), 0);
    assert_eq!(code(&train(&cfg, &b, &[])), 0);
    let read = |p: &std::path::Path| std::fs::read(p.join("metrics.log")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(std::fs::read(a.join("best.ckpt")).unwrap(), std::fs::read(b.join("best.ckpt")).unwrap());
}

#[test]
fn eval_predict_and_inspect_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 16, 2);
    let cfg = write_config(dir.path(), "c.cfg", &format!("{SMALL}attn_fn = softmax\nchunk_size = 2\n"));
    let out = dir.path().join("out");
    assert_eq!(code(&train(&cfg, &out, &[])), 0);
    let ckpt = out.join("best.ckpt");
    let test = data.join("test.txt");

    // eval equals the library call on the same checkpoint
    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--corpus", test.to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let (run_cfg, model) = checkpoint::load(&ckpt).unwrap();
    let direct = evaluate(&model, &read_conll(&test).unwrap(), run_cfg.train.decode_mode).unwrap();
    assert_eq!(printed, serde_json::to_value(&direct).unwrap());

    // predict: CoNLL output, empty lines skipped, deterministic
    let sentences = read_conll(&test).unwrap();
    let mut input = String::new();
    for s in sentences.iter().take(5) {
        input.push_str(&s.tokens.join(" "));
        input.push_str("\n\n");
    }
    input.push_str("unseen tokens here\n");
    let inp = dir.path().join("in.txt");
    std::fs::write(&inp, &input).unwrap();
    let (p1, p2) = (dir.path().join("p1.txt"), dir.path().join("p2.txt"));
    for p in [&p1, &p2] {
        let o = run(&["predict", "--ckpt", ckpt.to_str().unwrap(), "--in", inp.to_str().unwrap(), "--out", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        assert!(stderr(&o).contains("skipped 5 empty line"), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    let n_tokens: usize = sentences.iter().take(5).map(|s| s.len()).sum::<usize>() + 3;
    assert_eq!(text.lines().count(), n_tokens + 6);
    let predicted = read_conll(&p1).unwrap();
    assert_eq!(predicted.len(), 6);
    assert_eq!(predicted[0].tokens, sentences[0].tokens);

    // inspect: softmax rows, gate ranges, chunk blocking
    let o = run(&["inspect", "--ckpt", ckpt.to_str().unwrap(), "--sentence", &sentences[0].tokens.join(" ")]);
    assert_eq!(code(&o), 0);
    let dump = stdout(&o);
    assert!(dump.lines().any(|l| l.starts_with("tags\t")));
    let rows = hreb::pipeline::parse_trace_rows(&dump);
    for stage in ["local", "global"] {
        for r in &rows[&(stage.to_string(), "weights".to_string())] {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for r in &rows[&(stage.to_string(), "phi".to_string())] {
            assert!(r.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
    for (i, r) in rows[&("local".to_string(), "weights".to_string())].iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            if i / 2 != j / 2 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn checkpoint_version_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 8, 2);
    let cfg = write_config(dir.path(), "c.cfg", SMALL);
    let out = dir.path().join("out");
    assert_eq!(code(&train(&cfg, &out, &["max_epochs=1"])), 0);
    let mut bytes = std::fs::read(out.join("best.ckpt")).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&["eval", "--ckpt", bad.to_str().unwrap(), "--corpus", data.join("test.txt").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 8, 2);
    let cfg = write_config(dir.path(), "c.cfg", SMALL);
    let o = train(&cfg, &dir.path().join("out"), &["lr=1e300"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn stats_of_one_three_token_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.txt");
    std::fs::write(&p, "a B-PER\nb I-PER\nc O\n").unwrap();
    let o = run(&["stats", "--corpus", p.to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v[0]["avg_len"], 3.0);
    assert_eq!(v[0]["max_len"], 3);
    assert_eq!(v[0]["min_len"], 3);
    assert_eq!(v[0]["classes"], 1);
}

#[test]
fn stats_parse_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.txt");
    std::fs::write(&p, "a O\nb\n").unwrap();
    let o = run(&["stats", "--corpus", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.txt") && stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_injected_gradient_fault_fails() {
    let o = run(&["verify", "--suite", "crf"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));

    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("fail.json");
    let o = run(&["verify", "--suite", "grad", "--fault-scale", "0.9", "--dump", dump.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert!(v[0]["replay"]["inputs"].is_array());
}

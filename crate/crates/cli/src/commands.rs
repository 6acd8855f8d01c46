use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use hreb::checkpoint;
use hreb::config::RunConfig;
use hreb::pipeline::{
    self, corpus_stats, evaluate, load_corpus, predict_all, read_conll, run_training, synth_corpus, trace_dump,
    write_conll, AblationTable, Corpus, DecodeMode, Sentence, StatsTable,
};
use hreb::verify::{self, Suite, VerifyOptions};
use hreb::{Error, Result};

use crate::Failure;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_text(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {o:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(config: &Path, out: &Path, overrides: &[String]) -> std::result::Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let corpus = load_corpus(&cfg.data)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("metrics.log");
    let mut log = create(&log_path)?;
    let echoed = cfg.to_text();
    write_text(&out.join("config.txt"), &echoed)?;
    let mut header = String::new();
    for line in echoed.lines() {
        header.push_str("# ");
        header.push_str(line);
        header.push('\n');
    }
    header.push_str("# epoch precision recall f1 loss\n");
    log.write_all(header.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    let mut io_err = None;
    let outcome = run_training(&cfg, &corpus, |r| {
        if let Err(e) = writeln!(log, "{}", r.line()).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e).into());
    }

    checkpoint::save(&out.join("best.ckpt"), &cfg, &outcome.best)?;
    checkpoint::save(&out.join("final.ckpt"), &cfg, &outcome.last)?;
    let summary = outcome.summary();
    let test = if corpus.test.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.best, &corpus.test, cfg.train.decode_mode)?)
    };
    let doc = serde_json::json!({ "train": summary, "test": test });
    write_text(&out.join("summary.json"), &json_text(&doc))?;

    println!(
        "epochs {}  best epoch {}  best valid F1 {:.4}{}",
        summary.epochs_run,
        summary.best_epoch,
        summary.best_valid_f1,
        if summary.stopped_early { "  (early stop)" } else { "" }
    );
    if let Some(report) = &test {
        println!("test split:\n{report}");
    }
    match outcome.diverged {
        Some(msg) => Err(Error::Divergence(format!("{msg}; checkpoints of the last finite state are in {}", out.display())).into()),
        None => Ok(()),
    }
}

pub fn eval(ckpt: &Path, corpus: &Path, mode: Option<&str>, json: bool) -> std::result::Result<(), Failure> {
    let (cfg, model) = checkpoint::load(ckpt)?;
    let sentences = read_conll(corpus)?;
    let mode: DecodeMode = match mode {
        Some(m) => m.parse()?,
        None => cfg.train.decode_mode,
    };
    let report = evaluate(&model, &sentences, mode)?;
    if json {
        println!("{}", json_text(&report));
    } else {
        println!("{report}");
    }
    Ok(())
}

pub fn predict(ckpt: &Path, input: &Path, out: &Path) -> std::result::Result<(), Failure> {
    let (_, model) = checkpoint::load(ckpt)?;
    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let mut sentences = Vec::new();
    let mut skipped = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(input, e))?;
        let tokens: Vec<String> = line.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            skipped += 1;
            continue;
        }
        let tags = vec!["O".to_string(); tokens.len()];
        sentences.push(Sentence::new(tokens, tags)?);
    }
    let predicted = predict_all(&model, &sentences)?;
    for (s, tags) in sentences.iter_mut().zip(predicted) {
        s.tags = tags;
    }
    let mut w = create(out)?;
    write_conll(&mut w, &sentences)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(out, e))?;
    if skipped > 0 {
        log::warn!("skipped {skipped} empty line(s)");
    }
    log::info!("tagged {} sentence(s) into {}", sentences.len(), out.display());
    Ok(())
}

pub fn inspect(ckpt: &Path, sentence: &str, chars: bool, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let (_, model) = checkpoint::load(ckpt)?;
    let tokens: Vec<String> = if chars {
        sentence.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    } else {
        sentence.split_whitespace().map(String::from).collect()
    };
    if tokens.is_empty() {
        return Err(Error::EmptyInput("--sentence has no tokens".into()).into());
    }
    let dump = trace_dump(&model, &tokens)?;
    match out {
        Some(p) => write_text(p, &dump)?,
        None => print!("{dump}"),
    }
    Ok(())
}

pub fn verify(suite: &str, seed: u64, fault_scale: f64, dump: Option<&Path>) -> std::result::Result<(), Failure> {
    let suites = Suite::parse_list(suite)?;
    let opts = VerifyOptions {
        seed,
        grad_fault_scale: fault_scale,
        ..Default::default()
    };
    let report = verify::run(&suites, &opts);
    println!("{report}");
    if report.all_passed() {
        return Ok(());
    }
    let failures: Vec<_> = report.failures().collect();
    let text = json_text(&failures);
    eprintln!("failing cases (replay inputs):\n{text}");
    if let Some(p) = dump {
        write_text(p, &text)?;
    }
    Err(Failure::Verify)
}

/// `PATH` or `NAME=TRAIN,TEST[,VALID]`.
fn stats_entry(spec: &str) -> Result<(String, Corpus, bool)> {
    let Some((name, files)) = spec.split_once('=') else {
        let path = Path::new(spec);
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let corpus = Corpus {
            train: read_conll(path)?,
            valid: Vec::new(),
            test: Vec::new(),
        };
        return Ok((name, corpus, false));
    };
    let files: Vec<&str> = files.split(',').map(str::trim).collect();
    let read = |p: &str| read_conll(Path::new(p));
    match files.as_slice() {
        [train, test] => {
            let test = read(test)?;
            Ok((name.into(), Corpus { train: read(train)?, valid: test.clone(), test }, true))
        }
        [train, test, valid] => Ok((
            name.into(),
            Corpus {
                train: read(train)?,
                valid: read(valid)?,
                test: read(test)?,
            },
            false,
        )),
        _ => Err(Error::Config(format!("--corpus {spec:?}: expected NAME=TRAIN,TEST[,VALID]"))),
    }
}

pub fn stats(specs: &[String], json: bool) -> std::result::Result<(), Failure> {
    let rows = specs
        .iter()
        .map(|s| stats_entry(s).map(|(name, c, alias)| corpus_stats(&name, &c, alias)))
        .collect::<Result<Vec<_>>>()?;
    if json {
        println!("{}", json_text(&rows));
    } else {
        println!("{}", StatsTable(&rows));
    }
    Ok(())
}

pub fn synth(out: &Path, seed: u64, sentences: usize, types: usize) -> std::result::Result<(), Failure> {
    let corpus = synth_corpus(seed, sentences, types)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, split) in [("train.txt", &corpus.train), ("valid.txt", &corpus.valid), ("test.txt", &corpus.test)] {
        let path = out.join(name);
        let mut w = create(&path)?;
        write_conll(&mut w, split)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    println!("wrote {} sentences per split to {}", sentences, out.display());
    Ok(())
}

pub fn ablate(config: &Path, matrix: Option<&str>, out: Option<&Path>) -> std::result::Result<(), Failure> {
    let cfg = load_config(config, &[])?;
    let corpus = load_corpus(&cfg.data)?;
    let rows = match matrix {
        Some(m) => pipeline::parse_switch_matrix(m, &cfg)?,
        None => pipeline::standard_matrix(),
    };
    let entries = pipeline::ablate(&cfg, &corpus, &rows)?;
    println!("{}", AblationTable(&entries));
    if let Some(p) = out {
        write_text(p, &json_text(&entries))?;
    }
    Ok(())
}

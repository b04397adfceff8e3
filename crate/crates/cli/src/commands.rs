use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use rkm_core::cell::{param_count, CellConfig, CellVariant};
use rkm_core::checkpoint::{self, Checkpoint, Model};
use rkm_core::data::{self, CharCorpus, InputKind, Sequence, SequenceDataset, SONNETS};
use rkm_core::heads::{unigram_perplexity, Classifier, LanguageModel};
use rkm_core::parallel::Execution;
use rkm_core::train::{evaluate, train_classifier, train_lm, OptimizerKind, TrainConfig, TrainReport};
use rkm_core::verify;

use crate::args::{CellArgs, Command, DataArgs, EvalArgs, GenArgs, GradcheckArgs, ImpulseArgs, Opt, Task, TrainArgs};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Paramcount(a) => {
            println!("{}", param_count(a.variant, a.m, a.d, a.n));
            Ok(ExitCode::SUCCESS)
        }
        Command::Equiv(a) => equiv(a.seeds),
        Command::Impulse(a) => impulse(a),
        Command::Gen(a) => gen(a),
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn task_of(d: &DataArgs) -> Task {
    if let Some(t) = d.task {
        return t;
    }
    match d.data.as_deref().and_then(Path::extension).and_then(|e| e.to_str()) {
        None if d.data.is_none() => Task::DelayedRecall,
        Some("txt") => Task::Lm,
        Some("bin") | Some("sig") => Task::Signal,
        _ => Task::Tokens,
    }
}

fn generate(task: Task, d: &DataArgs, count: usize, seed: u64) -> Result<SequenceDataset> {
    Ok(match task {
        Task::DelayedRecall => data::gen_delayed_recall(d.lag, d.classes, d.length, count, seed)?,
        Task::Parity => data::gen_parity(d.length, count, seed)?,
        Task::Keyword => data::gen_keyword(count, seed)?,
        other => bail!("{other:?} is not a generated task"),
    })
}

fn load_file(task: Task, path: &Path) -> Result<SequenceDataset> {
    match task {
        Task::Signal => data::load_signal_matrix(path),
        _ => data::load_token_csv(path),
    }
    .with_context(|| format!("loading {}", path.display()))
}

fn need_data(d: &DataArgs) -> Result<&Path> {
    d.data.as_deref().ok_or_else(|| anyhow!("this task needs --data"))
}

fn cell_config(c: &CellArgs, m: usize, seed: u64, layer_norm_default: bool) -> CellConfig {
    let mut cfg = CellConfig::new(c.variant, m, c.d, c.n)
        .with_dilation(c.dilation)
        .with_gains(c.sigma_i, c.sigma_f)
        .with_layer_norm(c.layer_norm.unwrap_or(layer_norm_default))
        .with_wavelet_content(c.wavelet)
        .with_seed(seed);
    cfg.learn_sigma = c.learn_sigma;
    cfg
}

fn train_config(a: &TrainArgs, checkpoint: PathBuf) -> TrainConfig {
    TrainConfig {
        optimizer: match a.optimizer {
            Opt::Adam => OptimizerKind::default(),
            Opt::Sgd => OptimizerKind::Sgd { momentum: a.momentum },
        },
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        clip: a.clip,
        seed: a.seed,
        patience: a.patience,
        target: a.target,
        bptt: a.bptt,
        checkpoint: Some(checkpoint),
        execution: exec(a.sequential),
    }
}

fn print_report(report: &TrainReport) {
    let metric = report.metric.name();
    println!("epochs={}", report.epochs.len());
    println!("best_epoch={}", report.best_epoch);
    println!("val_{metric}={}", report.best_metric);
    if let Some(last) = report.epochs.last() {
        println!("train_loss={}", last.train_loss);
        println!("seconds={:.3}", last.seconds);
    }
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let task = task_of(&a.data);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.rkm"));
    let report_path = a.out.join("report.csv");
    let tc = train_config(&a, ckpt.clone());
    println!("task={}", task.to_possible_value().expect("no skipped tasks").get_name());
    println!("variant={}", a.cell.variant);

    let report = if task == Task::Lm {
        let text = match &a.data.data {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => SONNETS.to_string(),
        };
        let corpus = CharCorpus::from_text(&text)?;
        let (tr, val) = corpus.split(a.data.val_fraction);
        let cfg = cell_config(&a.cell, a.cell.m.unwrap_or(32), a.seed, true);
        let mut model = LanguageModel::new(&cfg, corpus.vocab())?;
        let report = train_lm(&mut model, &tr, &val, &tc)?;
        // rewrite the checkpoint with the character vocabulary attached
        let vocab: Vec<String> = corpus.alphabet.iter().map(char::to_string).collect();
        checkpoint::save_lm(&ckpt, &model, Some(&vocab))?;
        println!("params={}", param_count(cfg.variant, cfg.m, cfg.d, cfg.n));
        println!("vocab={}", corpus.vocab());
        println!("unigram_perplexity={}", unigram_perplexity(&tr, &val, corpus.vocab()));
        report
    } else {
        let (tr, val) = match task {
            Task::Tokens | Task::Signal => {
                let ds = load_file(task, need_data(&a.data)?)?;
                let (tr, val) = ds.split(1.0 - a.data.val_fraction);
                if tr.is_empty() || val.is_empty() {
                    bail!("{} examples cannot be split with --val-fraction {}", ds.len(), a.data.val_fraction);
                }
                (tr, val)
            }
            _ => (
                generate(task, &a.data, a.data.count, a.seed)?,
                generate(task, &a.data, a.data.val_count, a.seed.wrapping_add(1))?,
            ),
        };
        let m = match (tr.input, a.cell.m) {
            (InputKind::Signal { channels }, Some(m)) if m != channels => bail!("--m {m} does not match the {channels} signal channels"),
            (InputKind::Signal { channels }, _) => channels,
            (InputKind::Tokens { .. }, m) => m.unwrap_or(8),
        };
        let cfg = cell_config(&a.cell, m, a.seed, false);
        let mut model = Classifier::new(&cfg, tr.input, tr.classes)?;
        let report = train_classifier(&mut model, &tr, &val, &tc)?;
        checkpoint::save_classifier(&ckpt, &model, tr.vocab.as_deref())?;
        println!("params={}", param_count(cfg.variant, cfg.m, cfg.d, cfg.n));
        println!("train_examples={}", tr.len());
        println!("val_examples={}", val.len());
        report
    };
    report.write_csv(&report_path)?;
    print_report(&report);
    println!("checkpoint={}", ckpt.display());
    println!("report={}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Re-express a loaded token dataset in the checkpoint's token ids.
fn remap_tokens(ds: &mut SequenceDataset, vocab: &[String]) -> Result<()> {
    let Some(names) = ds.vocab.clone() else { return Ok(()) };
    let index: std::collections::HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let map: Vec<Option<usize>> = names.iter().map(|n| index.get(n.as_str()).copied()).collect();
    for ex in &mut ds.items {
        if let Sequence::Tokens(t) = &mut ex.sequence {
            for id in t.iter_mut() {
                *id = map[*id].ok_or_else(|| anyhow!("token `{}` is not in the checkpoint vocabulary", names[*id]))?;
            }
        }
    }
    ds.input = InputKind::Tokens { vocab: vocab.len() };
    ds.vocab = Some(vocab.to_vec());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let vocab = ck.vocab.clone();
    match ck.into_model()? {
        Model::Classifier(model) => {
            let task = match (a.data.task, a.data.data.is_some()) {
                (Some(t), _) => t,
                (None, true) => match model.input.kind() {
                    InputKind::Signal { .. } => Task::Signal,
                    InputKind::Tokens { .. } => Task::Tokens,
                },
                (None, false) => Task::DelayedRecall,
            };
            let mut ds = match task {
                Task::Tokens | Task::Signal => load_file(task, need_data(&a.data)?)?,
                Task::Lm => bail!("checkpoint holds a classifier, not a language model"),
                _ => generate(task, &a.data, a.data.val_count, a.seed)?,
            };
            if let Some(v) = &vocab {
                remap_tokens(&mut ds, v)?;
            }
            let r = evaluate(&model, &ds, exec(a.sequential))?;
            println!("examples={}", r.count);
            println!("accuracy={}", r.accuracy);
            println!("loss={}", r.loss);
        }
        Model::LanguageModel(model) => {
            let text = match &a.data.data {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => SONNETS.to_string(),
            };
            let vocab = vocab.ok_or_else(|| anyhow!("language model checkpoint has no vocabulary"))?;
            let index: std::collections::HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut ids = Vec::with_capacity(text.len());
            for ch in text.chars() {
                let s = ch.to_string();
                ids.push(*index.get(s.as_str()).ok_or_else(|| anyhow!("character {ch:?} is not in the checkpoint vocabulary"))?);
            }
            // without --data, score the same held-out tail used in training
            let eval_ids = if a.data.data.is_some() {
                ids
            } else {
                let cut = ((ids.len() as f64) * (1.0 - a.data.val_fraction)).round() as usize;
                ids[cut..].to_vec()
            };
            println!("tokens={}", eval_ids.len().saturating_sub(1));
            println!("perplexity={}", model.perplexity(&eval_ids, 100)?);
        }
        Model::Cell { .. } => bail!("checkpoint holds a bare cell with no head to evaluate"),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    for &n in &a.n {
        for r in verify::gradient_suite(a.m, a.d, n, a.seed)? {
            ok &= r.passed();
            println!("{} max_rel_error={:.3e} {}", r.label, r.max_rel_error, if r.passed() { "PASS" } else { "FAIL" });
        }
    }
    for r in verify::wavelet_grad_check(a.seed)? {
        ok &= r.passed();
        println!("{} max_rel_error={:.3e} {}", r.label, r.max_rel_error, if r.passed() { "PASS" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn equiv(seeds: u64) -> Result<ExitCode> {
    let mut ok = true;
    for r in verify::run_identities(seeds)? {
        ok &= r.passed();
        let bound = if r.exact { "bitwise".to_string() } else { format!("< {:e}", r.tolerance) };
        println!("{} {}: seeds={} max_abs_diff={:e} ({bound})", if r.passed() { "PASS" } else { "FAIL" }, r.name, r.seeds, r.max_abs_diff);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn impulse(a: ImpulseArgs) -> Result<ExitCode> {
    if !a.variant.uses_static_gains() {
        bail!("{} has input-dependent gates; use one of {}", a.variant, static_variants());
    }
    let rows = verify::impulse_response(a.variant, a.sigma_i, a.sigma_f, a.lags, a.seed)?;
    let mut csv = String::from("lag,measured,predicted,ratio\n");
    for r in rows {
        let ratio = if r.predicted == 0.0 { String::new() } else { format!("{:.15}", r.ratio()) };
        csv.push_str(&format!("{},{:e},{:e},{ratio}\n", r.lag, r.measured, r.predicted));
    }
    match a.out {
        Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn static_variants() -> String {
    CellVariant::ALL.iter().filter(|v| v.uses_static_gains()).map(|v| v.name()).collect::<Vec<_>>().join(", ")
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let task = a.data.task.unwrap_or(Task::DelayedRecall);
    let ds = generate(task, &a.data, a.data.count, a.seed)?;
    data::write_token_csv(&a.out, &ds)?;
    println!("examples={}", ds.len());
    println!("classes={}", ds.classes);
    println!("out={}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

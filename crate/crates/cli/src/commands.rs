use std::fs;
use std::path::{Path, PathBuf};

use ctarnn::attn_bench::{bench_attention, AttnBenchConfig, TSV_HEADER};
use ctarnn::data::{Dataset, LoadOptions, Utterance};
use ctarnn::features::lmfb::{extract_lmfb, LmfbConfig};
use ctarnn::features::synth::{generate_with, SynthSpec};
use ctarnn::features::wav::read_wav;
use ctarnn::features::{load_manifest, read_seqf, write_seqf};
use ctarnn::model::{ModelKind, Toy, ToyDims};
use ctarnn::par::{self, Execution};
use ctarnn::tensor::OpKind;
use ctarnn::trainer::{
    attention_maps, cross_eval, evaluate, plan_folds, run_cv, save_checkpoints, train_fold, Checkpoint, EpochLog,
    RunConfig,
};
use ctarnn::Error;
use serde_json::json;

use crate::provenance::Provenance;
use crate::{Cli, Command, Failure};

type Outcome = Result<(), Failure>;

fn io(context: String) -> impl FnOnce(std::io::Error) -> Failure {
    move |e| Failure::Lib(Error::Io { context, source: e })
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(io(format!("writing {}", path.display())))
}

fn finish(prov: &mut Provenance, outputs: &[&Path], dest: &Path) -> Outcome {
    for p in outputs {
        prov.output(p).map_err(io(format!("hashing {}", p.display())))?;
    }
    prov.write(dest).map_err(io(format!("writing {}", dest.display())))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).map_err(io(format!("reading {}", p.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Lib(Error::Config(format!("{}: {e}", p.display()))))
}

fn print_config(label: &str, text: &str, seed: Option<u64>) {
    println!("# resolved {label}");
    println!("{}", text.trim_end());
    if let Some(s) = seed {
        println!("# seed = {s}");
    }
}

fn execution(threads: usize) -> Execution {
    if threads <= 1 {
        Execution::Sequential
    } else {
        Execution::available()
    }
}

/// Caps the worker pool and returns the execution mode to use.
fn setup_threads(requested: Option<usize>) -> Result<(Execution, usize), Failure> {
    let n = match requested {
        Some(0) => return Err(Failure::Lib(Error::Config("--threads must be at least 1".into()))),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    #[cfg(feature = "parallel")]
    {
        // a second initialisation (tests calling run twice) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let exec = execution(n);
    Ok((exec, par::workers(exec)))
}

pub fn run(cli: Cli) -> Outcome {
    let (exec, threads) = setup_threads(cli.threads)?;
    match cli.command {
        Command::Lmfb(a) => lmfb(a, threads),
        Command::Synth(a) => synth(a, exec, threads),
        Command::Train(a) => train(a, exec, threads),
        Command::Cv(a) => cv(a, exec, threads),
        Command::Eval(a) => eval(a, exec, threads),
        Command::Gradcheck(a) => gradcheck(a, threads),
        Command::AttnDump(a) => attn_dump(a, threads),
        Command::BenchAttn(a) => bench(a, exec, threads),
    }
}

fn lmfb(a: crate::LmfbArgs, threads: usize) -> Outcome {
    let cfg: LmfbConfig = read_toml(a.config.as_deref())?;
    cfg.validate()?;
    let text = toml::to_string(&cfg).expect("plain struct");
    print_config("lmfb config", &text, None);
    let pcm = read_wav(&a.wav, cfg.sample_rate_hz)?;
    let feats = extract_lmfb(&pcm, cfg.sample_rate_hz, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_seqf(&a.out, &feats)?;
    println!("{}: {} frames x {} mel bins", a.out.display(), feats.shape()[0], feats.shape()[1]);
    let mut prov = Provenance::new("lmfb", None, threads, Some(text));
    prov.input(&a.wav).map_err(io(format!("hashing {}", a.wav.display())))?;
    let dest = PathBuf::from(format!("{}.provenance.json", a.out.display()));
    finish(&mut prov, &[&a.out], &dest)
}

fn synth(a: crate::SynthArgs, exec: Execution, threads: usize) -> Outcome {
    let mut spec: SynthSpec = read_toml(a.spec.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let text = toml::to_string(&spec).expect("plain struct");
    print_config("synth spec", &text, Some(spec.seed));
    let corpus = generate_with(&spec, exec)?;
    create_dir(&a.out_dir)?;
    corpus.write(&a.out_dir, exec)?;
    println!(
        "{} utterances, {} speakers, planted channels {:?} -> {}",
        corpus.utterances.len(),
        spec.n_speakers(),
        corpus.planted_channel,
        a.out_dir.display()
    );
    let mut prov = Provenance::new("synth", Some(spec.seed), threads, Some(text));
    if let Some(p) = &a.spec {
        prov.input(p).map_err(io(format!("hashing {}", p.display())))?;
    }
    let outputs = [a.out_dir.join("manifest.jsonl"), a.out_dir.join("truth.json")];
    finish(
        &mut prov,
        &outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        &a.out_dir.join("provenance.json"),
    )
}

/// Loads the run configuration and the manifest's streams.
fn load_run(run: &crate::RunArgs, exec: Execution) -> Result<(RunConfig, Dataset), Failure> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    print_config("run config", &cfg.to_toml_string(), Some(cfg.train.seed));
    let ds = load_dataset(&run.manifest, &cfg, exec)?;
    Ok((cfg, ds))
}

fn load_dataset(manifest: &Path, cfg: &RunConfig, exec: Execution) -> Result<Dataset, Failure> {
    let (m, report) = load_manifest(manifest, &cfg.train.classes)?;
    report.into_result()?;
    let opts = LoadOptions {
        blocks: cfg.model.blocks.clone(),
        normalize: cfg.model.normalize,
    };
    Ok(Dataset::load(&m, &cfg.train.classes, &cfg.model.stream_refs()?, &opts, exec)?)
}

fn progress(verbose: bool) -> impl Fn(usize, &EpochLog) + Sync {
    move |fold, log| {
        if verbose {
            eprintln!(
                "fold {fold:2} epoch {:3} lr {:.2e} train {:.4} val {:.4} uar {:.4}",
                log.epoch, log.lr, log.train_loss, log.val_loss, log.val_uar
            );
        }
    }
}

fn run_provenance(command: &str, run: &crate::RunArgs, cfg: &RunConfig, threads: usize) -> Result<Provenance, Failure> {
    let mut prov = Provenance::new(command, Some(cfg.train.seed), threads, Some(cfg.to_toml_string()));
    for p in [&run.config, &run.manifest] {
        prov.input(p).map_err(io(format!("hashing {}", p.display())))?;
    }
    Ok(prov)
}

fn train(a: crate::TrainArgs, exec: Execution, threads: usize) -> Outcome {
    let (cfg, ds) = load_run(&a.run, exec)?;
    let records = || ds.utterances.iter().map(|u| (u.speaker.as_str(), u.session.as_str()));
    let plan = plan_folds(records())?;
    if a.fold >= plan.len() {
        return Err(Failure::Lib(Error::Config(format!("fold {} of a {}-fold plan", a.fold, plan.len()))));
    }
    let fold = &plan.folds[a.fold];
    let (tr, va, te) = plan.split(a.fold, records());
    println!(
        "fold {}: test {} / validation {} / {} training utterances",
        a.fold,
        fold.test_speaker,
        fold.val_speaker,
        tr.len()
    );
    let seed = cfg.train.seed.wrapping_add(a.fold as u64);
    let report = progress(a.run.verbose);
    let trained = train_fold(&ds, &tr, &va, &cfg, seed, &|log| report(a.fold, log))?;
    let test = evaluate(&trained.model, &trained.params, &ds, &te, cfg.train.batch_size, exec)?;
    create_dir(&a.run.out)?;
    let ck = a.run.out.join("checkpoint");
    Checkpoint::save(&ck, &trained, &cfg, Some(fold))?;
    let rep = json!({
        "fold": fold,
        "best_epoch": trained.best_epoch,
        "best_metric": trained.best_metric,
        "selected_by": cfg.train.select_by,
        "test_uar": test.uar,
        "test_loss": test.loss,
        "confusion": test.confusion,
        "classes": ds.classes,
        "history": trained.history,
    });
    let rp = a.run.out.join("report.json");
    write_text(&rp, &serde_json::to_string_pretty(&rep).expect("plain data"))?;
    println!("best epoch {}, test UAR {:.4}", trained.best_epoch, test.uar);
    let mut prov = run_provenance("train", &a.run, &cfg, threads)?;
    finish(&mut prov, &[&rp, &ck], &a.run.out.join("provenance.json"))
}

fn cv(a: crate::CvArgs, exec: Execution, threads: usize) -> Outcome {
    let (cfg, ds) = load_run(&a.run, exec)?;
    let outcome = run_cv(&ds, &cfg, exec, &progress(a.run.verbose))?;
    create_dir(&a.run.out)?;
    let ck = a.run.out.join("checkpoints");
    save_checkpoints(&outcome, &cfg, &ck)?;
    let rp = a.run.out.join("report.json");
    write_text(&rp, &outcome.report.to_json())?;
    for f in &outcome.report.folds {
        println!("{}: UAR {:.4} (best epoch {})", f.name, f.uar, f.best_epoch.unwrap_or(0));
    }
    println!(
        "mean UAR {:.4} +/- {:.4} over {} folds",
        outcome.report.mean_uar,
        outcome.report.std_uar,
        outcome.report.folds.len()
    );
    let mut prov = run_provenance("cv", &a.run, &cfg, threads)?;
    finish(&mut prov, &[&rp, &ck], &a.run.out.join("provenance.json"))
}

/// Checkpoint directories named directly or found one level below.
fn checkpoint_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("params.json").is_file() {
            out.push(p.clone());
            continue;
        }
        let rd = fs::read_dir(p).map_err(io(format!("reading {}", p.display())))?;
        let mut found: Vec<PathBuf> = rd
            .flatten()
            .map(|e| e.path())
            .filter(|d| d.join("params.json").is_file())
            .collect();
        if found.is_empty() {
            return Err(Failure::Lib(Error::Config(format!("{}: no checkpoints found", p.display()))));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn eval(a: crate::EvalArgs, exec: Execution, threads: usize) -> Outcome {
    let dirs = checkpoint_dirs(&a.checkpoints)?;
    let cks = dirs.iter().map(|d| Checkpoint::load(d)).collect::<Result<Vec<_>, _>>()?;
    let cfg = cks[0].config.clone();
    print_config("checkpoint config", &cfg.to_toml_string(), Some(cfg.train.seed));
    let ds = load_dataset(&a.manifest, &cfg, exec)?;
    let report = cross_eval(&cks, &ds, exec)?;
    create_dir(&a.out)?;
    let rp = a.out.join("report.json");
    write_text(&rp, &report.to_json())?;
    for f in &report.folds {
        println!("{}: UAR {:.4}", f.name, f.uar);
    }
    println!("mean UAR {:.4} +/- {:.4} over {} models", report.mean_uar, report.std_uar, report.folds.len());
    let mut prov = Provenance::new("eval", Some(cfg.train.seed), threads, Some(cfg.to_toml_string()));
    prov.input(&a.manifest).map_err(io(format!("hashing {}", a.manifest.display())))?;
    for d in &dirs {
        prov.input(d).map_err(io(format!("hashing {}", d.display())))?;
    }
    finish(&mut prov, &[&rp], &a.out.join("provenance.json"))
}

fn parse_dims(s: &str) -> Result<ToyDims, Failure> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Lib(Error::Config(format!("--dims `{s}`: expected 7 comma-separated integers"))))?;
    let [n_channels, steps, d_e, d_h, heads, head_dim, n_classes] = v[..] else {
        return Err(Failure::Lib(Error::Config(format!("--dims `{s}`: expected N,m,d_e,d_h,heads,d_alpha,classes"))));
    };
    if v.contains(&0) {
        return Err(Failure::Lib(Error::Config("--dims entries must be positive".into())));
    }
    Ok(ToyDims {
        n_channels,
        steps,
        d_e,
        d_h,
        heads,
        head_dim,
        n_classes,
    })
}

fn gradcheck(a: crate::GradcheckArgs, threads: usize) -> Outcome {
    let kind: ModelKind = a.model.parse()?;
    let dims = parse_dims(&a.dims)?;
    let fault = match &a.corrupt_adjoint {
        None => None,
        Some(name) => Some((
            OpKind::parse(name).ok_or_else(|| Failure::Lib(Error::Config(format!("unknown op kind `{name}`"))))?,
            a.corrupt_factor,
        )),
    };
    let text = format!(
        "model = \"{kind}\"\ndims = \"{}\"\neps = {:e}\ntol = {:e}\ncorrupt_adjoint = {:?}",
        a.dims, a.eps, a.tol, a.corrupt_adjoint
    );
    print_config("gradcheck settings", &text, Some(a.seed));
    let t = std::time::Instant::now();
    let toy = Toy::new(kind, &dims, a.seed)?;
    let r = toy.check(a.eps, fault)?;
    let passed = r.passes(a.tol);
    let worst = r.worst.as_ref().map_or("-".to_string(), |(name, i)| format!("{name}[{i}]"));
    println!(
        "{kind}: {} scalars, max relative error {:.3e} at {worst} (analytic {:.6e}, numeric {:.6e}), {:.2}s",
        r.checked,
        r.max_rel_error,
        r.analytic_at_worst,
        r.numeric_at_worst,
        t.elapsed().as_secs_f64()
    );
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let rep = json!({
            "model": kind.name(),
            "dims": a.dims,
            "seed": a.seed,
            "eps": a.eps,
            "tol": a.tol,
            "corrupt_adjoint": a.corrupt_adjoint,
            "checked": r.checked,
            "max_rel_error": r.max_rel_error,
            "worst": r.worst,
            "passed": passed,
        });
        let rp = dir.join("report.json");
        write_text(&rp, &serde_json::to_string_pretty(&rep).expect("plain data"))?;
        let mut prov = Provenance::new("gradcheck", Some(a.seed), threads, Some(text));
        finish(&mut prov, &[&rp], &dir.join("provenance.json"))?;
    }
    if passed {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Check(format!("max relative error {:.3e} >= {:.1e}", r.max_rel_error, a.tol)))
    }
}

fn attn_dump(a: crate::AttnDumpArgs, threads: usize) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    print_config("checkpoint config", &ck.config.to_toml_string(), Some(ck.config.train.seed));
    let mut prov = Provenance::new("attn-dump", Some(ck.config.train.seed), threads, Some(ck.config.to_toml_string()));
    prov.input(&a.checkpoint).map_err(io(format!("hashing {}", a.checkpoint.display())))?;
    let (ds, idx) = match &a.manifest {
        Some(m) => {
            let ds = load_dataset(m, &ck.config, Execution::Sequential)?;
            let idx = ds
                .utterances
                .iter()
                .position(|u| u.id == a.utterance)
                .ok_or_else(|| Failure::Lib(Error::Config(format!("utterance `{}` not in {}", a.utterance, m.display()))))?;
            prov.input(m).map_err(io(format!("hashing {}", m.display())))?;
            (ds, idx)
        }
        None => {
            let path = PathBuf::from(&a.utterance);
            let t = read_seqf(&path)?;
            prov.input(&path).map_err(io(format!("hashing {}", path.display())))?;
            let ds = Dataset {
                classes: ck.meta.classes.clone(),
                streams: ck.config.model.stream_refs()?,
                utterances: vec![Utterance {
                    id: path.file_stem().map_or(a.utterance.clone(), |s| s.to_string_lossy().into_owned()),
                    speaker: String::new(),
                    session: String::new(),
                    label: 0,
                    streams: vec![t],
                }],
            };
            if ds.stream_dims()? != ck.meta.stream_dims {
                return Err(Failure::Lib(Error::Config(format!(
                    "{}: shape does not match the checkpoint inputs {:?}",
                    path.display(),
                    ck.meta.stream_dims
                ))));
            }
            (ds, 0)
        }
    };
    let maps = attention_maps(&ck.model, &ck.params, &ds, &[idx], 1, Execution::Sequential)?;
    let att = &maps[0];
    let doc = json!({
        "utterance": ds.utterances[idx].id,
        "classes": ck.meta.classes,
        "argmax_channel": att.argmax_channel(),
        "attention": att,
    });
    create_dir(&a.out)?;
    let out = a.out.join("attn.json");
    write_text(&out, &serde_json::to_string_pretty(&doc).expect("plain data"))?;
    println!(
        "{}: {} channels x {} steps, argmax channel {}",
        ds.utterances[idx].id,
        att.n_channels,
        att.n_steps,
        att.argmax_channel()
    );
    finish(&mut prov, &[&out], &a.out.join("provenance.json"))
}

fn bench(a: crate::BenchArgs, exec: Execution, threads: usize) -> Outcome {
    let cfg = AttnBenchConfig {
        n_list: a.n_list,
        m: a.m,
        d_h: a.d,
        batch: a.batch,
        heads: a.heads,
        head_dim: a.head_dim,
        reps: a.reps,
        seed: a.seed,
    };
    let text = toml::to_string(&cfg).expect("plain struct");
    print_config("bench settings", &text, Some(cfg.seed));
    let rows = bench_attention(&cfg, exec)?;
    let mut tsv = format!("{TSV_HEADER}\n");
    for r in &rows {
        tsv.push_str(&r.tsv());
        tsv.push('\n');
    }
    print!("{tsv}");
    create_dir(&a.out)?;
    let out = a.out.join("bench.tsv");
    write_text(&out, &tsv)?;
    let mut prov = Provenance::new("bench-attn", Some(cfg.seed), threads, Some(text));
    finish(&mut prov, &[&out], &a.out.join("provenance.json"))
}

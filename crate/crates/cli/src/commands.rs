use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use radmamba::analysis::{
    calibrate_dim, corr_table, count_flops, count_params, run_ablation, write_ablation_csv, AblationGrid, CostReport,
};
use radmamba::model::{load_checkpoint, save_checkpoint};
use radmamba::signal::{
    default_pack, load_dataset, load_sequence, make_dataset, save_dataset, save_sequence, synth_sequence, Dataset,
    SynthClass, SynthConfig, WindowSpec,
};
use radmamba::train::{
    eval_continuous, evaluate, mean_std, train, train_sweep, write_track, Monitor, TrainOptions,
};
use radmamba::{ExecPolicy, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::CliConfig;
use crate::{Command, ConfigArgs, TrainArgs, STOP};

pub fn run(cmd: Command, policy: ExecPolicy) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            classes,
            per_class,
            split,
            seed,
            synth_config,
            sequence_bins,
        } => synth(&out, classes, per_class, split, seed, synth_config.as_deref(), sequence_bins, policy),
        Command::Train {
            cfg,
            train,
            data,
            out,
            seed,
            sweep,
        } => cmd_train(&cfg, &train, data, &out, seed, sweep, policy),
        Command::Eval {
            checkpoint,
            data,
            sequence,
            frame,
            stride,
            out,
        } => cmd_eval(&checkpoint, data.as_deref(), sequence.as_deref(), frame, stride, &out, policy),
        Command::Count { cfg, json } => cost(&cfg, json, None),
        Command::Flops { cfg, strict, json } => cost(&cfg, json, Some(strict)),
        Command::Corr {
            checkpoint,
            data,
            split,
            limit,
        } => cmd_corr(&checkpoint, &data, &split, limit, policy),
        Command::Ablate {
            cfg,
            train,
            data,
            rows,
            seeds,
            rect,
            out,
        } => cmd_ablate(&cfg, &train, data, &rows, seeds, &rect, &out, policy),
        Command::CalibrateDim {
            cfg,
            target_params,
            sweep,
        } => cmd_calibrate(&cfg, target_params, sweep),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(args: &ConfigArgs) -> Result<CliConfig> {
    let mut c = CliConfig::resolve(args.config.as_deref(), args.preset.as_deref())?;
    if let Some(dim) = args.dim {
        c.model.dim = dim;
    }
    Ok(c)
}

fn apply_train_args(c: &mut CliConfig, t: &TrainArgs) {
    if let Some(e) = t.epochs {
        c.train.epochs = e;
    }
    if let Some(lr) = t.lr {
        c.train.lr0 = lr;
    }
    if let Some(b) = t.batch_size {
        c.train.batch_size = b;
    }
    if let Some(w) = t.weight_decay {
        c.train.weight_decay = w;
    }
    match t.monitor.as_deref() {
        Some("val") => c.train.monitor = Monitor::Val,
        Some("test") => c.train.monitor = Monitor::Test,
        _ => {}
    }
}

/// Load the dataset named by the config and align the class count.
fn load_data(c: &mut CliConfig, policy: ExecPolicy) -> Result<(Dataset, Dataset)> {
    let Some(dir) = c.data.dir.clone() else {
        bail!("no dataset: pass --data or set data.dir in the config");
    };
    let (tr, te) = load_dataset(&dir, c.data.split_ratio, c.data.split_seed, policy)?;
    if tr.n_classes() != c.model.n_classes {
        log::warn!(
            "config has {} classes, dataset has {}; using the dataset's",
            c.model.n_classes,
            tr.n_classes()
        );
        c.model.n_classes = tr.n_classes();
    }
    if let Some(shape) = tr.input_shape() {
        if shape != c.model.input_shape {
            bail!(
                "dataset samples are {:?} but the model expects {:?}",
                shape,
                c.model.input_shape
            );
        }
    }
    Ok((tr, te))
}

#[derive(Debug, Default, Deserialize)]
struct SynthFile {
    #[serde(default)]
    synth: SynthConfig,
    #[serde(default)]
    classes: Option<Vec<SynthClass>>,
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    n_classes: Option<usize>,
    per_class: usize,
    split: f64,
    seed: u64,
    file: Option<&Path>,
    sequence_bins: Option<usize>,
    policy: ExecPolicy,
) -> Result<()> {
    let spec: SynthFile = match file {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthFile::default(),
    };
    let mut classes = spec.classes.unwrap_or_else(default_pack);
    if let Some(n) = n_classes {
        if n == 0 || n > classes.len() {
            bail!("--classes must be between 1 and {}", classes.len());
        }
        classes.truncate(n);
    }
    let cfg = spec.synth;
    let (tr, te) = make_dataset(&classes, per_class, split, seed, &cfg, policy)?;
    let hz = cfg.sample_rate / cfg.fft_len as f64;
    let sec = cfg.hop as f64 / cfg.sample_rate;
    save_dataset(out, &tr, &te, (hz, sec, Some(seed), Some(cfg.clone())))?;
    let (ctr, cte) = (tr.class_counts(), te.class_counts());
    for (i, name) in tr.classes.iter().enumerate() {
        println!("{name}: {} train, {} test", ctr[i], cte[i]);
    }
    if let Some(bins) = sequence_bins {
        let segments: Vec<(usize, usize)> = (0..classes.len()).map(|c| (c, bins)).collect();
        let rec = synth_sequence(&classes, &segments, &cfg, seed ^ 0x5e9)?;
        save_sequence(&out.join("sequence"), &rec)?;
        println!("sequence: {} time bins", rec.width());
    }
    Ok(())
}

fn cmd_train(
    args: &ConfigArgs,
    targs: &TrainArgs,
    data: Option<PathBuf>,
    out: &Path,
    seed: Option<u64>,
    sweep: bool,
    policy: ExecPolicy,
) -> Result<()> {
    let mut c = load_config(args)?;
    apply_train_args(&mut c, targs);
    if let Some(d) = data {
        c.data.dir = Some(d);
    }
    c.validate()?;
    let (tr, te) = load_data(&mut c, policy)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &c)?;

    if sweep {
        let reports = train_sweep::<f32>(&c.model, &tr, &te, &c.train, policy, Some(&STOP));
        let mut accs = Vec::new();
        for (seed, r) in c.train.seeds.iter().zip(reports) {
            let r = r.with_context(|| format!("seed {seed}"))?;
            write_json(&out.join(format!("report_seed{seed}.json")), &r)?;
            println!("seed {seed}: test accuracy {:.4} (best epoch {})", r.test_accuracy, r.best_epoch);
            accs.push(r.test_accuracy);
        }
        let (mean, std) = mean_std(&accs);
        write_json(
            &out.join("sweep.json"),
            &serde_json::json!({
                "config_hash": c.hash(),
                "seeds": c.train.seeds,
                "accuracies": accs,
                "mean": mean,
                "std": std,
            }),
        )?;
        println!("mean {mean:.4} std {std:.4} over {} seeds", accs.len());
        return Ok(());
    }

    let seed = seed.or_else(|| c.train.seeds.first().copied()).unwrap_or(0);
    let opts = TrainOptions {
        policy,
        stop: Some(&STOP),
    };
    let outcome = train::<f32>(&c.model, &tr, &te, &c.train, seed, opts)?;
    let r = &outcome.report;
    write_json(&out.join("report.json"), r)?;
    save_checkpoint(
        &outcome.best,
        serde_json::json!({
            "seed": seed,
            "best_epoch": r.best_epoch,
            "test_accuracy": r.test_accuracy,
            "classes": r.classes,
            "cli_config": c,
        }),
        out.join("model.ckpt"),
    )?;
    if r.interrupted || STOP.load(Ordering::Relaxed) {
        eprintln!("interrupted after {} epochs; partial report written", r.epochs.len());
    }
    println!(
        "seed {seed}: test accuracy {:.4} at epoch {} ({:.1}s); wrote {}",
        r.test_accuracy,
        r.best_epoch,
        r.wall_time_s,
        out.display()
    );
    Ok(())
}

fn write_confusion(path: &Path, classes: &[String], confusion: &[Vec<usize>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend(classes.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in classes.iter().zip(confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: Option<&Path>,
    sequence: Option<&Path>,
    frame: usize,
    stride: usize,
    out: &Path,
    policy: ExecPolicy,
) -> Result<()> {
    let (model, manifest) = load_checkpoint::<f32>(ckpt)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(seq) = sequence {
        let rec = load_sequence(seq)?;
        let res = eval_continuous(&model, &rec, WindowSpec::new(frame, stride)?, policy)?;
        write_track(out.join("track.csv"), &res.track)?;
        write_json(
            &out.join("metrics.json"),
            &serde_json::json!({
                "config_hash": manifest.config_hash,
                "mode": "continuous",
                "frame": frame,
                "stride": stride,
                "windows": res.track.len(),
                "frame_accuracy": res.accuracy,
            }),
        )?;
        println!("{} windows, frame accuracy {:.4}", res.track.len(), res.accuracy);
        return Ok(());
    }
    let Some(dir) = data else {
        bail!("eval needs --data or --sequence");
    };
    let (_, te) = load_dataset(dir, 0.8, 0, policy)?;
    let ev = evaluate(&model, &te, policy)?;
    write_confusion(&out.join("confusion.csv"), &te.classes, &ev.confusion)?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({
            "config_hash": manifest.config_hash,
            "mode": "dataset",
            "samples": te.len(),
            "accuracy": ev.accuracy,
            "loss": ev.loss,
            "confusion": ev.confusion,
            "classes": te.classes,
        }),
    )?;
    println!("{} samples, accuracy {:.4}, loss {:.4}", te.len(), ev.accuracy, ev.loss);
    Ok(())
}

fn print_cost(rep: &CostReport, flops: bool) {
    println!("{:<28} {:<12} {:>10} {:>14}", "layer", "kind", "params", "flops");
    for r in &rep.rows {
        println!("{:<28} {:<12} {:>10} {:>14}", r.name, format!("{:?}", r.kind).to_lowercase(), r.params, r.flops);
    }
    println!("{:<28} {:<12} {:>10} {:>14}", "total", "", rep.total_params, rep.total_flops);
    if flops {
        println!("convention: {}", rep.convention);
    }
}

fn cost(args: &ConfigArgs, json: bool, strict: Option<bool>) -> Result<()> {
    let c = load_config(args)?;
    c.model.validate()?;
    let rep = match strict {
        None => count_params(&c.model)?,
        Some(s) => count_flops(&c.model, s)?,
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({ "config": c.model, "report": rep }))?
        );
    } else {
        print_cost(&rep, strict.is_some());
    }
    Ok(())
}

fn cmd_corr(ckpt: &Path, data: &Path, split: &str, limit: Option<usize>, policy: ExecPolicy) -> Result<()> {
    let (model, _) = load_checkpoint::<f32>(ckpt)?;
    let (tr, te) = load_dataset(data, 0.8, 0, policy)?;
    let samples: Vec<&Tensor<f32>> = match split {
        "train" => tr.samples.iter().map(|s| &s.data).collect(),
        "all" => tr.samples.iter().chain(&te.samples).map(|s| &s.data).collect(),
        _ => te.samples.iter().map(|s| &s.data).collect(),
    };
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    let table = corr_table(&model, &samples[..n], policy)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    args: &ConfigArgs,
    targs: &TrainArgs,
    data: Option<PathBuf>,
    rows: &[usize],
    seeds: Vec<u64>,
    rect: &[usize],
    out: &Path,
    policy: ExecPolicy,
) -> Result<()> {
    let mut c = load_config(args)?;
    apply_train_args(&mut c, targs);
    if let Some(d) = data {
        c.data.dir = Some(d);
    }
    if !seeds.is_empty() {
        c.train.seeds = seeds;
    }
    c.validate()?;
    let (tr, te) = load_data(&mut c, policy)?;
    let mut grid = AblationGrid::full((rect[0], rect[1]), c.train.seeds.clone());
    if !rows.is_empty() {
        if let Some(bad) = rows.iter().find(|r| !(1..=27).contains(*r)) {
            bail!("grid row {bad} is outside 1-27");
        }
        grid = grid.rows(rows);
    }
    let results = run_ablation::<f32>(&c.model, &grid, &tr, &te, &c.train, policy);
    write_ablation_csv(out, &results)?;
    for r in &results {
        let tag = if r.radmamba { " *" } else { "" };
        match &r.error {
            Some(e) => println!("row {:>2}: failed: {e}", r.row),
            None => println!(
                "row {:>2}: {:<10} {:<8} {:<8} {:.2} ± {:.2}%  {:.1}k{tag}",
                r.row,
                r.projection,
                r.patch,
                r.downsampling,
                100.0 * r.mean_accuracy,
                100.0 * r.std_accuracy,
                r.params as f64 / 1e3
            ),
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_calibrate(args: &ConfigArgs, target: f64, sweep: Vec<usize>) -> Result<()> {
    let c = load_config(args)?;
    let sweep = if sweep.is_empty() { c.dim_sweep.clone() } else { sweep };
    if sweep.is_empty() {
        bail!("no dim sweep: pass --sweep or use a preset/config with dim_sweep");
    }
    let (dim, params) = calibrate_dim(&c.model, &sweep, target)?;
    let rel = (params as f64 - target) / target;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "dim": dim,
            "params": params,
            "target": target,
            "relative_error": rel,
            "sweep": sweep,
        }))?
    );
    Ok(())
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nlss_core::config::ExperimentConfig;
use nlss_core::data::{generate, load_dataset, save_dataset, Dataset};
use nlss_core::error::{Error, Result};
use nlss_core::eval::{evaluate, hist_kl, pca_accumulated_variance, write_csv, MetricsReport, HIST_BINS};
use nlss_core::model::{load_checkpoint, save_checkpoint, ForwardOpts, BnUpdates, ModelPair};
use nlss_core::autodiff::Graph;
use nlss_core::selftest::run_selftest;
use nlss_core::train::{TrainMode, Trainer, TransferInit};

#[derive(Parser)]
#[command(name = "nlss", version, about = "Cross-modal noisy-label segmentation pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(Common),
    /// Pretrain a model (pair) on the noisy training split.
    Pretrain(PretrainArgs),
    /// Train a decoder on a clean downstream dataset.
    Transfer(TransferArgs),
    /// Score a checkpoint on the clean test split.
    Evaluate(EvalArgs),
    /// Weight and feature statistics of one or two checkpoints.
    Analyze(AnalyzeArgs),
    /// Run the built-in oracle suite.
    Selftest,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to output.dir from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `generate`; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    /// single1, single2, midF, lateF, cromss_midF or cromss_lateF.
    #[arg(long)]
    mode: Option<String>,
    /// Write the selection masks of each epoch's first step.
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set, default_value_t = false)]
    dump_masks: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    /// Pretrained checkpoint; without it the encoder starts random.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    frozen: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second checkpoint for weight and statistics comparisons.
    #[arg(long)]
    against: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// `NLSS_THREADS` caps worker threads; the engine runs one.
fn check_threads() -> Result<usize> {
    match std::env::var("NLSS_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("NLSS_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Generate(c) => cmd_generate(&c),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Transfer(a) => cmd_transfer(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Selftest => Ok(Some(cmd_selftest())),
    }
    .map(|c| c.unwrap_or(ExitCode::SUCCESS))
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    cfg.output.dir = out.display().to_string();
    Ok((cfg, out))
}

/// Fails when `marker` exists under `out` and `force` is unset.
fn guard(out: &Path, marker: &str, force: bool) -> Result<()> {
    let p = out.join(marker);
    if p.exists() && !force {
        return Err(Error::Config(format!("{} already exists; pass --force to replace it", p.display())));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn dataset(cfg: &ExperimentConfig, data: &DataArg) -> Result<Dataset> {
    match &data.data {
        Some(dir) => load_dataset(dir),
        None => generate(&cfg.data),
    }
}

fn cmd_generate(c: &Common) -> Result<Option<ExitCode>> {
    let (cfg, out) = load_config(c)?;
    guard(&out, "manifest", c.force)?;
    let ds = generate(&cfg.data)?;
    save_dataset(&ds, &out, c.force)?;
    cfg.write_resolved(&out)?;
    println!(
        "wrote {} locations ({} train, {} val, {} test) to {}",
        ds.locations.len(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len(),
        out.display()
    );
    Ok(None)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<Option<ExitCode>> {
    let (mut cfg, out) = load_config(&a.common)?;
    if let Some(m) = &a.mode {
        m.parse::<TrainMode>()?;
        cfg.train.mode = m.clone();
    }
    cfg.validate()?;
    if a.resume.is_none() {
        guard(&out, "runlog.csv", a.common.force)?;
    }
    let tcfg = cfg.train_config()?;
    let ds = dataset(&cfg, &a.data)?;
    cfg.write_resolved(&out)?;
    let ckdir = out.join("checkpoints");
    fs::create_dir_all(&ckdir)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(ds.train_view(), &tcfg, load_checkpoint(p)?)?,
        None => Trainer::new(ds.train_view(), &tcfg)?,
    };
    let mask_dir = out.join("masks");
    let mut dump = |epoch: usize, step: usize, m: &nlss_core::select::SelectionMasks| -> Result<()> {
        if step != 0 {
            return Ok(());
        }
        let dir = mask_dir.join(format!("epoch_{epoch:04}"));
        fs::create_dir_all(&dir)?;
        for (name, t) in m.named_tensors() {
            write_file(&dir.join(format!("{name}.nlt")), |w| t.write_to(w))?;
        }
        Ok(())
    };
    let every = cfg.train.checkpoint_every;
    while !trainer.finished() {
        let hook: Option<&mut nlss_core::train::MaskHook<'_>> = if a.dump_masks { Some(&mut dump) } else { None };
        let row = trainer.run_epoch(hook)?;
        println!(
            "epoch {:>3}  lr {:.2e}  alpha {:.3}  gamma {:.3}  train {:.4}  val {:.4}",
            row.epoch, row.lr, row.alpha, row.gamma, row.train.total, row.val.total
        );
        let e = trainer.epoch();
        if every > 0 && e % every == 0 && !trainer.finished() {
            save_checkpoint(&ckdir.join(format!("epoch_{e:04}.nlck")), &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&ckdir.join("final.nlck"), &trainer.checkpoint())?;
    write_file(&out.join("runlog.csv"), |w| trainer.log().write_csv(w))?;
    Ok(None)
}

/// Data modality of each model modality, from checkpoint metadata.
fn data_modalities(meta: &std::collections::BTreeMap<String, String>, model: &ModelPair) -> Result<Vec<usize>> {
    match meta.get("data_modalities") {
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&d| (1..=2).contains(&d))
                    .map(|d| d - 1)
                    .ok_or_else(|| Error::Format(format!("bad data_modalities entry {v:?}")))
            })
            .collect(),
        None => Ok((0..model.modalities()).collect()),
    }
}

fn write_metrics(path: &Path, rows: &[(usize, MetricsReport)]) -> Result<()> {
    let mut header = vec!["modality"];
    header.extend(MetricsReport::CSV_HEADER);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(d, r)| {
            let mut v = vec![(d + 1).to_string()];
            v.extend(r.csv_values().iter().map(|x| format!("{x:?}")));
            v
        })
        .collect();
    write_file(path, |w| write_csv(w, &header, &body))
}

fn cmd_transfer(a: &TransferArgs) -> Result<Option<ExitCode>> {
    let (mut cfg, out) = load_config(&a.common)?;
    if let Some(f) = a.frozen {
        cfg.transfer.frozen = f;
    }
    if a.checkpoint.is_none() {
        cfg.transfer.init = "random".into();
    }
    cfg.validate()?;
    guard(&out, "runlog.csv", a.common.force)?;
    let mut ds = dataset(&cfg, &a.data)?;
    if !cfg.transfer.class_map.is_empty() {
        ds = ds.remap_classes(&cfg.transfer.class_map)?;
    }
    let tcfg = cfg.transfer_config();
    let src = match (&a.checkpoint, cfg.transfer.init.as_str()) {
        (Some(p), "pretrained") => Some(load_checkpoint(p)?.model),
        _ => None,
    };
    let init = match &src {
        Some(m) => TransferInit::Pretrained(m, cfg.transfer.source_modality - 1),
        None => TransferInit::Random,
    };
    cfg.write_resolved(&out)?;
    let mut trainer = Trainer::new_transfer(ds.train_view(), init, &tcfg)?;
    while !trainer.finished() {
        let row = trainer.run_epoch(None)?;
        println!("epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}", row.epoch, row.lr, row.train.total, row.val.total);
    }
    let ckdir = out.join("checkpoints");
    fs::create_dir_all(&ckdir)?;
    save_checkpoint(&ckdir.join("final.nlck"), &trainer.checkpoint())?;
    write_file(&out.join("runlog.csv"), |w| trainer.log().write_csv(w))?;
    let report = evaluate(trainer.model(), 0, tcfg.modality, &ds.eval_view())?;
    println!("test mIoU {:.4}  OA {:.4}", report.miou, report.oa);
    write_metrics(&out.join("metrics.csv"), &[(tcfg.modality, report)])?;
    Ok(None)
}

fn cmd_evaluate(a: &EvalArgs) -> Result<Option<ExitCode>> {
    let (cfg, out) = load_config(&a.common)?;
    guard(&out, "metrics.csv", a.common.force)?;
    let ds = dataset(&cfg, &a.data)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let dm = data_modalities(&ck.meta, &ck.model)?;
    let mut rows = Vec::new();
    for (k, &d) in dm.iter().enumerate() {
        let r = evaluate(&ck.model, k, d, &ds.eval_view())?;
        println!("modality {}: mIoU {:.4}  OA {:.4}  AA {:.4}  mF1 {:.4}", d + 1, r.miou, r.oa, r.aa, r.mf1);
        rows.push((d, r));
    }
    cfg.write_resolved(&out)?;
    write_metrics(&out.join("metrics.csv"), &rows)?;
    Ok(None)
}

/// Per-channel means of the bottleneck features of each test tile.
fn bottleneck_features(model: &ModelPair, k: usize, d: usize, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for &l in &ds.splits.test {
        let loc = &ds.locations[l];
        let x = nlss_core::data::normalize(&loc.images[0][d], &ds.norm[d])?;
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let mut g = Graph::new();
        let xv = g.constant(x.reshape(shape)?);
        let f = model.forward(&mut g, k, xv, ForwardOpts::eval(), &mut BnUpdates::default())?;
        let last = g.value(*f.features.last().expect("encoder has stages"));
        let (_, c, h, w) = last.dims4("analyze")?;
        let px = h * w;
        out.push((0..c).map(|ch| last.data()[ch * px..(ch + 1) * px].iter().sum::<f64>() / px as f64).collect());
    }
    Ok(out)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<Option<ExitCode>> {
    let (cfg, out) = load_config(&a.common)?;
    guard(&out, "pca.csv", a.common.force)?;
    let ds = dataset(&cfg, &a.data)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let dm = data_modalities(&ck.meta, &ck.model)?;
    let mut rows = Vec::new();
    for (k, &d) in dm.iter().enumerate() {
        let feats = bottleneck_features(&ck.model, k, d, &ds)?;
        let curve = pca_accumulated_variance(&feats)?;
        for (i, v) in curve.curve.iter().enumerate() {
            rows.push(vec![(d + 1).to_string(), (i + 1).to_string(), format!("{v:?}")]);
        }
    }
    write_file(&out.join("pca.csv"), |w| {
        write_csv(w, &["modality", "components", "accumulated_variance"], &rows)
    })?;
    if let Some(b) = &a.against {
        let other = load_checkpoint(b)?;
        let (pa, pb) = (ck.model.params(), other.model.params());
        let mut rows = Vec::new();
        for id in pa.ids() {
            let name = pa.name(id);
            if let Some(j) = pb.find(name) {
                let kl = hist_kl(pa.get(id).data(), pb.get(j).data(), HIST_BINS)?;
                rows.push(vec![name.to_string(), format!("{kl:?}")]);
            }
        }
        write_file(&out.join("weights_kl.csv"), |w| write_csv(w, &["parameter", "kl"], &rows))?;
        let mut rows = Vec::new();
        for (x, y) in ck.model.bn_buffers().iter().zip(other.model.bn_buffers()) {
            if x.name != y.name {
                continue;
            }
            let m = hist_kl(&x.running_mean, &y.running_mean, HIST_BINS)?;
            let sd = |v: &[f64]| v.iter().map(|s| s.max(0.0).sqrt()).collect::<Vec<_>>();
            let s = hist_kl(&sd(&x.running_var), &sd(&y.running_var), HIST_BINS)?;
            rows.push(vec![x.name.clone(), format!("{m:?}"), format!("{s:?}")]);
        }
        write_file(&out.join("bn_kl.csv"), |w| write_csv(w, &["layer", "mean_kl", "std_kl"], &rows))?;
    }
    cfg.write_resolved(&out)?;
    Ok(None)
}

fn cmd_selftest() -> ExitCode {
    let checks = run_selftest();
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

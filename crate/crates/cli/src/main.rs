//! `dgtrain`: generate or ingest datasets, train, evaluate and ablate.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage or
//! configuration error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dgcore::data::{
    gen_synthetic, ingest_crops, read_dataset, table_row, write_dataset, DomainDataset, IngestOptions,
    SyntheticSpec,
};
use dgcore::eval::{evaluate, run_holdout, Ablation, MetricsReport};
use dgcore::model::{load_checkpoint, save_checkpoint};
use dgcore::trainer::{LossVariant, TrainConfig};
use dgcore::Error;

#[derive(Parser)]
#[command(name = "dgtrain", version, about = "Domain-generalization training for multi-source classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic multi-domain benchmark, one dataset per domain.
    GenData(GenDataArgs),
    /// Crop annotated boxes from VOC-style XML into a dataset.
    Ingest(IngestArgs),
    /// Train on every source except the holdout, then evaluate on it.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Leave-one-domain-out runs for all four loss variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 5.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.4)]
    alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parent directory; each domain goes to `<out>/<name>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Boxes with area strictly below this many pixels are dropped.
    #[arg(long, default_value_t = 400)]
    min_area: u64,
    /// Side of the square output crop.
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Dataset name; defaults to the output directory name.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of dotted `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file's loss variant.
    #[arg(long)]
    loss_variant: Option<LossVariant>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directories, or parents of dataset directories.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Source excluded from training and used for the final report.
    #[arg(long)]
    holdout: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Seeds `train.seed`, `train.seed + 1`, ...
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn require_dir(path: &Path, flag: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{flag}: {} is not a directory", path.display())))
    }
}

/// Sends log records to a file; `debug` also keeps per-step lines.
fn init_log(path: &Path, debug: bool) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| io_failure(path, e))?;
    let level = if debug { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .filter_module("dgcore", level)
        .filter_module("dgtrain", level)
        .format(|buf, record| writeln!(buf, "{} {}", record.level(), record.args()))
        .target(env_logger::Target::Pipe(Box::new(file)))
        .try_init()
        .map_err(|e| Failure {
            code: 1,
            message: format!("logger: {e}"),
        })
}

fn load_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
            TrainConfig::from_text(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.loss_variant {
        cfg.train.loss_variant = v;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// Reads each dataset directory; a directory without a `meta` file is
/// taken as a parent and its dataset subdirectories are read in name order.
fn load_sources(paths: &[PathBuf]) -> CliResult<Vec<DomainDataset>> {
    let mut out = Vec::new();
    for p in paths {
        require_dir(p, "--data")?;
        if p.join("meta").is_file() {
            out.push(read_dataset(p)?);
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| io_failure(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join("meta").is_file())
            .collect();
        children.sort();
        if children.is_empty() {
            return Err(Failure::usage(format!("--data {}: no dataset found", p.display())));
        }
        for c in children {
            out.push(read_dataset(&c)?);
        }
    }
    Ok(out)
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_domains: a.domains,
        num_classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        delta: a.delta,
        alpha: a.alpha,
        sigma: a.sigma,
        seed: a.seed,
    };
    let datasets = gen_synthetic(&spec)?;
    for d in &datasets {
        write_dataset(&a.out.join(d.name()), d)?;
    }
    println!("wrote {} domains to {}", datasets.len(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> CliResult<()> {
    require_dir(&a.images, "--images")?;
    require_dir(&a.annotations, "--annotations")?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.out
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ingested".into())
    });
    let opts = IngestOptions {
        min_area: a.min_area,
        out_size: a.size,
        name,
        ..IngestOptions::default()
    };
    let report = ingest_crops(&a.images, &a.annotations, &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_dataset(&a.out, &report.dataset)?;
    let mut header: Vec<&str> = report.dataset.class_names().iter().map(String::as_str).collect();
    header.push("SUM");
    println!("{}", header.join(" "));
    println!("{}", table_row(&report.dataset));
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let sources = load_sources(&a.data)?;
    let held_out = sources
        .iter()
        .position(|d| d.name() == a.holdout)
        .ok_or_else(|| {
            let names: Vec<&str> = sources.iter().map(DomainDataset::name).collect();
            Failure::usage(format!("--holdout {:?} is not one of {names:?}", a.holdout))
        })?;
    create_dir(&a.out)?;
    init_log(&a.out.join("run.log"), true)?;
    write_file(&a.out.join("config.toml"), cfg.to_text())?;
    log::info!("training on {} sources, holding out {}", sources.len() - 1, a.holdout);

    let run = run_holdout(&sources, held_out, &cfg)?;
    save_checkpoint(&run.params, &cfg, &a.out.join("checkpoint.dgck"))?;
    write_file(&a.out.join("epochs.csv"), run.record.to_csv())?;
    write_file(&a.out.join("report.json"), run.report.to_json())?;
    for w in &run.record.warnings {
        log::warn!("{w}");
        eprintln!("warning: {w}");
    }
    let m = run.report.headline();
    println!(
        "{} on {}: precision {:.4} recall {:.4} f1 {:.4} (n={})",
        cfg.train.loss_variant, a.holdout, m.precision, m.recall, m.f1, run.report.n
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (params, cfg) = load_checkpoint(&a.checkpoint)?;
    require_dir(&a.data, "--data")?;
    let dataset = read_dataset(&a.data)?;
    let report = evaluate(&params, &dataset, cfg.metrics.weighted)?.with_variant(cfg.train.loss_variant.as_str());
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.report, report.to_json())?;
    let m = report.headline();
    println!(
        "{}: precision {:.4} recall {:.4} f1 {:.4} (n={})",
        dataset.name(),
        m.precision,
        m.recall,
        m.f1,
        report.n
    );
    Ok(())
}

fn cell_path(out: &Path, seed: u64, variant: LossVariant, domain: &str) -> PathBuf {
    out.join(format!("seed{seed}")).join(variant.as_str()).join(format!("{domain}.json"))
}

/// A finished cell, or `None` when it must be (re)run.
fn load_cell(path: &Path) -> Option<MetricsReport> {
    fs::read_to_string(path).ok().and_then(|t| MetricsReport::from_json(&t).ok())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let sources = load_sources(&a.data)?;
    if sources.len() < 2 {
        return Err(Failure::usage("ablation needs at least 2 sources"));
    }
    create_dir(&a.out)?;
    init_log(&a.out.join("ablate.log"), false)?;
    write_file(&a.out.join("config.toml"), cfg.to_text())?;

    let seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.train.seed.wrapping_add(k)).collect();
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for v in LossVariant::ALL {
            for (d, ds) in sources.iter().enumerate() {
                let path = cell_path(&a.out, seed, v, ds.name());
                if load_cell(&path).is_none() {
                    jobs.push((seed, v, d, path));
                }
            }
        }
    }
    log::info!("{} cells to run", jobs.len());
    jobs.par_iter()
        .map(|(seed, v, d, path)| -> CliResult<()> {
            let mut c = cfg.clone();
            c.train.seed = *seed;
            c.train.loss_variant = *v;
            let run = run_holdout(&sources, *d, &c)?;
            create_dir(path.parent().expect("cell has a parent"))?;
            // Write then rename so an interrupted run never leaves a partial cell.
            let tmp = path.with_extension("json.tmp");
            write_file(&tmp, run.report.to_json())?;
            fs::rename(&tmp, path).map_err(|e| io_failure(path, e))?;
            log::info!("seed {seed} {v} {}: f1 {}", sources[*d].name(), run.report.headline().f1);
            Ok(())
        })
        .collect::<CliResult<Vec<()>>>()?;

    let domains: Vec<String> = sources.iter().map(|d| d.name().to_string()).collect();
    let mut per_variant: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &seed in &seeds {
        let cells = LossVariant::ALL
            .iter()
            .map(|&v| {
                domains
                    .iter()
                    .map(|d| {
                        let path = cell_path(&a.out, seed, v, d);
                        load_cell(&path).ok_or_else(|| Failure {
                            code: 1,
                            message: format!("{}: unreadable report", path.display()),
                        })
                    })
                    .collect::<CliResult<Vec<_>>>()
            })
            .collect::<CliResult<Vec<_>>>()?;
        let table = Ablation {
            variants: LossVariant::ALL.to_vec(),
            domains: domains.clone(),
            cells,
        };
        write_file(&a.out.join(format!("seed{seed}")).join("summary.csv"), table.summary_csv())?;
        for (vi, row) in table.cells.iter().enumerate() {
            per_variant
                .entry(vi)
                .or_default()
                .push(row.iter().map(|r| r.headline().f1).collect());
        }
    }

    let multi = seeds.len() > 1;
    let mut csv = String::from("variant");
    for d in &domains {
        let _ = write!(csv, ",{d}_f1");
    }
    csv.push_str(",avg_f1");
    if multi {
        csv.push_str(",avg_f1_std,seeds");
    }
    csv.push('\n');
    for (vi, runs) in &per_variant {
        let _ = write!(csv, "{}", LossVariant::ALL[*vi]);
        for d in 0..domains.len() {
            let col: Vec<f64> = runs.iter().map(|r| r[d]).collect();
            let _ = write!(csv, ",{}", mean_std(&col).0);
        }
        let avgs: Vec<f64> = runs.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        let (m, s) = mean_std(&avgs);
        let _ = write!(csv, ",{m}");
        if multi {
            let _ = write!(csv, ",{s},{}", avgs.len());
        }
        csv.push('\n');
    }
    write_file(&a.out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

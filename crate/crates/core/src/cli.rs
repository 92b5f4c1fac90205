//! Command-line driver behind the `pavsgg` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalrank::evaluate;
use crate::experiments::{ablate, sweep, write_csv};
use crate::gradcheck;
use crate::pipeline::{middle_partitions, train_step1, train_step2, EpochLog};
use crate::ram::{match_clip, pseudo_label_metrics, MatchPartition, PseudoLabelMetrics};
use crate::relnet::RelNet;
use crate::scene::{generate_split, read_split, write_clip, ClipRecord, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

pub const THREADS_ENV: &str = "PAVSGG_THREADS";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Parser)]
#[command(name = "pavsgg", version, about = "Weakly-supervised video scene graph generation with pair affinity")]
pub struct Cli {
    /// Run configuration JSON; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Match annotations to detections and score the pseudo labels.
    RamMatch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train step 1 (teacher) or step 2 (student).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        step: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step-1 checkpoint directory; required for step 2.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        pa: Option<Switch>,
        #[arg(long, value_enum)]
        pam: Option<Switch>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference check of every primitive and the full loss.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds for the primitive checks; the end-to-end check uses the
        /// configured seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Run the RAM x PALS x PAM ablation grid end to end.
    Ablate {
        /// Dataset root; generated from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated row names overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        /// Also sweep the RAM thresholds and write sweep.csv.
        #[arg(long)]
        sweep: bool,
    },
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CHECK_FAILED
        }
    }
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    configure_threads()?;
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out)?,
        Command::RamMatch { data, out, split } => ram_match(&cfg, &data, &out, split.into())?,
        Command::Train { step, data, out, teacher } => {
            let teacher = match (step, teacher) {
                (2, None) => return Err(Failure::Usage("--teacher is required for --step 2".into())),
                (_, t) => t,
            };
            train(&cfg, step, &data, &out, teacher.as_deref())?
        }
        Command::Eval { data, ckpt, pa, pam, out, split } => {
            let mut cfg = cfg;
            if let Some(pa) = pa {
                cfg.eval.pa_scoring = pa.on();
            }
            if let Some(pam) = pam {
                cfg.eval.pam = pam.on();
            }
            eval(&cfg, &data, &ckpt, &out, split.into())?
        }
        Command::Gradcheck { out, seeds } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be positive".into()));
            }
            let summary = gradcheck::run_all(cfg.seed, seeds)?;
            if let Some(out) = out {
                create_dir(&out)?;
                write_json(&out.join("gradcheck.json"), &summary)?;
            }
            println!(
                "gradcheck: {} checks, max relative error {:.3e}, tolerance {:.0e}",
                summary.checks.len(),
                summary.max_rel_error,
                summary.tolerance
            );
            if !summary.passed {
                for c in summary.checks.iter().filter(|c| c.max_rel_error >= summary.tolerance) {
                    eprintln!("FAIL {} seed {}: {:.3e}", c.name, c.seed, c.max_rel_error);
                }
                return Err(Failure::Check("gradient check exceeded tolerance".into()));
            }
        }
        Command::Ablate { data, out, rows, sweep } => {
            let mut cfg = cfg;
            if let Some(rows) = rows {
                cfg.ablation.rows = rows;
            }
            run_ablate(&cfg, data.as_deref(), &out, sweep)?
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_split(data: &Path, split: Split) -> Result<Vec<ClipRecord>> {
    read_split(&data.join(split.dir_name()))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut files = 0;
    for split in [Split::Train, Split::Test] {
        let records = generate_split(&cfg.gen, split)?;
        let dir = out.join(split.dir_name());
        create_dir(&dir)?;
        for r in &records {
            files += write_clip(&dir, r)?.len();
        }
    }
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    println!("gen-data: wrote {files} files to {} (seed {})", out.display(), cfg.seed);
    Ok(())
}

#[derive(Serialize)]
struct PartitionFile<'a> {
    seed: u64,
    pooled: PseudoLabelMetrics,
    partitions: &'a [MatchPartition],
}

#[derive(Serialize)]
struct MatchRow<'a> {
    clip_id: &'a str,
    match_count: usize,
    tp: usize,
    precision: f64,
    recall: f64,
    f1: f64,
    seed: u64,
}

fn ram_match(cfg: &RunConfig, data: &Path, out: &Path, split: Split) -> Result<()> {
    let records = load_split(data, split)?;
    let mut partitions = Vec::with_capacity(records.len());
    let mut metrics = Vec::with_capacity(records.len());
    for r in &records {
        let (_, p) = match_clip(r, &cfg.ram);
        metrics.push(pseudo_label_metrics(&p, r.clip.middle_frame())?);
        partitions.push(p);
    }
    let pooled = PseudoLabelMetrics::pooled(&metrics);
    create_dir(out)?;
    write_json(
        &out.join("partitions.json"),
        &PartitionFile { seed: cfg.seed, pooled: pooled.clone(), partitions: &partitions },
    )?;
    let rows: Vec<MatchRow> = records
        .iter()
        .zip(&metrics)
        .map(|(r, m)| MatchRow {
            clip_id: &r.clip.clip_id,
            match_count: m.match_count,
            tp: m.true_positives,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            seed: cfg.seed,
        })
        .collect();
    write_csv(&out.join("ram_metrics.csv"), &rows)?;
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    println!(
        "ram-match: {} clips, {} positives, precision {:.4}, recall {:.4} (seed {})",
        records.len(),
        pooled.match_count,
        pooled.precision,
        pooled.recall,
        cfg.seed
    );
    Ok(())
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    #[serde(rename = "L_rel")]
    l_rel: f64,
    #[serde(rename = "L_PA")]
    l_pa: f64,
    #[serde(rename = "L_PAM")]
    l_pam: f64,
    total: f64,
    lr: f64,
    seed: u64,
}

fn train(cfg: &RunConfig, step: u8, data: &Path, out: &Path, teacher: Option<&Path>) -> Result<()> {
    let records = load_split(data, Split::Train)?;
    let partitions = middle_partitions(&records, &cfg.ram);
    let trained = match teacher {
        Some(dir) if step == 2 => {
            let (net, store) = RelNet::load(dir)?;
            train_step2(&records, &partitions, (&net, &store), &cfg.loss, &cfg.distill)?
        }
        _ => train_step1(&records, &partitions, &cfg.model, &cfg.loss, &cfg.train)?,
    };
    create_dir(out)?;
    trained.net.save(&trained.store, out)?;
    let rows: Vec<LogRow> = trained
        .log
        .iter()
        .map(|l: &EpochLog| LogRow {
            epoch: l.epoch,
            l_rel: l.l_rel,
            l_pa: l.l_pa,
            l_pam: l.l_pam,
            total: l.total,
            lr: l.lr,
            seed: cfg.seed,
        })
        .collect();
    write_csv(&out.join("train_log.csv"), &rows)?;
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    if let Some(last) = trained.log.last() {
        println!("train step {step}: final total loss {:.6} (seed {})", last.total, cfg.seed);
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricRow<'a> {
    subset: &'a str,
    protocol: &'static str,
    k: usize,
    recall: f64,
    frames: usize,
    seed: u64,
}

#[derive(Serialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    pos_count: usize,
    neg_count: usize,
    seed: u64,
}

fn eval(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path, split: Split) -> Result<()> {
    let records = load_split(data, split)?;
    let (net, store) = RelNet::load(ckpt)?;
    let mut report = evaluate(&net, &store, &records, &cfg.eval, &cfg.ram)?;
    report.seed = Some(cfg.seed);
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    let metrics: Vec<MetricRow> = report
        .recalls
        .iter()
        .map(|e| MetricRow {
            subset: &e.subset,
            protocol: e.protocol.as_str(),
            k: e.k,
            recall: e.recall,
            frames: e.frames,
            seed: cfg.seed,
        })
        .collect();
    write_csv(&out.join("metrics.csv"), &metrics)?;
    let bins: Vec<HistogramRow> = report
        .pa_histogram
        .iter()
        .map(|b| HistogramRow {
            bin_lo: b.bin_lo,
            bin_hi: b.bin_hi,
            pos_count: b.pos_count,
            neg_count: b.neg_count,
            seed: cfg.seed,
        })
        .collect();
    write_csv(&out.join("histograms.csv"), &bins)?;
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    for e in report.recalls.iter().filter(|e| e.subset == "all") {
        println!("eval: {} R@{} = {:.4}", e.protocol.as_str(), e.k, e.recall);
    }
    println!("eval: PA gap {:.4} (seed {})", report.pa_gap(), cfg.seed);
    Ok(())
}

fn run_ablate(cfg: &RunConfig, data: Option<&Path>, out: &Path, with_sweep: bool) -> Result<()> {
    let (train, test) = match data {
        Some(dir) => (load_split(dir, Split::Train)?, load_split(dir, Split::Test)?),
        None => (generate_split(&cfg.gen, Split::Train)?, generate_split(&cfg.gen, Split::Test)?),
    };
    let rows = ablate(&train, &test, cfg)?;
    create_dir(out)?;
    write_csv(&out.join("ablation.csv"), &rows)?;
    for r in &rows {
        println!("ablate: row {} WC R@10 {:.4} NC R@10 {:.4}", r.row, r.wc_r10, r.nc_r10);
    }
    if with_sweep {
        let points = sweep(&train, &test, cfg)?;
        write_csv(&out.join("sweep.csv"), &points)?;
    }
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    println!("ablate: {} rows (seed {})", rows.len(), cfg.seed);
    Ok(())
}

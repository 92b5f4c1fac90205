//! End-to-end runs: two-step training followed by evaluation, and the
//! RAM x PALS x PAM ablation grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalrank::{evaluate, EvalReport, Protocol};
use crate::pipeline::{middle_partitions, train_step1, train_step2, Trained};
use crate::ram::{pseudo_label_metrics, PseudoLabelMetrics};
use crate::scene::ClipRecord;

/// One ablation row. Custom rows built from a switch code are named `*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: char,
    pub ram: bool,
    pub pals: bool,
    pub pam: bool,
}

pub const ABLATION_ROWS: [AblationRow; 6] = [
    AblationRow { name: 'a', ram: false, pals: false, pam: false },
    AblationRow { name: 'b', ram: false, pals: true, pam: false },
    AblationRow { name: 'c', ram: false, pals: true, pam: true },
    AblationRow { name: 'd', ram: true, pals: false, pam: false },
    AblationRow { name: 'e', ram: true, pals: true, pam: false },
    AblationRow { name: 'f', ram: true, pals: true, pam: true },
];

impl AblationRow {
    /// Resolves a row letter `a`..`f`, or a three-letter `T`/`F` code for
    /// the RAM, PALS and PAM switches such as `TFT`.
    pub fn by_name(name: &str) -> Result<Self> {
        if let Some(row) = ABLATION_ROWS.iter().find(|r| name.len() == 1 && name.starts_with(r.name)) {
            return Ok(*row);
        }
        let bits: Vec<Option<bool>> = name
            .chars()
            .map(|c| match c {
                'T' => Some(true),
                'F' => Some(false),
                _ => None,
            })
            .collect();
        match bits[..] {
            [Some(ram), Some(pals), Some(pam)] => Ok(AblationRow { name: '*', ram, pals, pam }),
            _ => Err(Error::InvalidConfig(format!("unknown ablation row {name:?}"))),
        }
    }

    /// Applies the row's switches to a base configuration. PAM needs PA
    /// labels, so PAM without PALS is rejected.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        if self.pam && !self.pals {
            return Err(Error::InvalidConfig("PAM requires PALS".into()));
        }
        let mut cfg = base.clone();
        cfg.ram.enabled = self.ram;
        if !self.pals {
            cfg.loss.lambda_pa = 0.0;
            cfg.eval.pa_scoring = false;
        }
        if !self.pam {
            cfg.loss.lambda_pam = 0.0;
            cfg.model.pam = false;
            cfg.eval.pam = false;
        }
        Ok(cfg)
    }
}

/// Models and test-split report of one end-to-end run.
pub struct RunOutcome {
    pub teacher: Trained,
    pub student: Option<Trained>,
    pub report: EvalReport,
}

impl RunOutcome {
    /// The model that produced the report.
    pub fn final_model(&self) -> &Trained {
        self.student.as_ref().unwrap_or(&self.teacher)
    }
}

/// Trains step 1 (and optionally step 2) on `train`, then evaluates the
/// final model on `test`.
pub fn run_pipeline(train: &[ClipRecord], test: &[ClipRecord], cfg: &RunConfig, two_step: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let partitions = middle_partitions(train, &cfg.ram);
    let teacher = train_step1(train, &partitions, &cfg.model, &cfg.loss, &cfg.train)?;
    let student = if two_step {
        Some(train_step2(train, &partitions, (&teacher.net, &teacher.store), &cfg.loss, &cfg.distill)?)
    } else {
        None
    };
    let model = student.as_ref().unwrap_or(&teacher);
    let mut report = evaluate(&model.net, &model.store, test, &cfg.eval, &cfg.ram)?;
    report.seed = Some(cfg.seed);
    Ok(RunOutcome { teacher, student, report })
}

/// One line of `ablation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub ram: bool,
    pub pals: bool,
    pub pam: bool,
    pub wc_r10: f64,
    pub wc_r20: f64,
    pub wc_r50: f64,
    pub nc_r10: f64,
    pub nc_r20: f64,
    pub nc_r50: f64,
    pub seed: u64,
}

impl AblationResult {
    pub fn from_report(label: &str, row: &AblationRow, report: &EvalReport, seed: u64) -> Self {
        let r = |p, k| report.recall("all", p, k).unwrap_or(f64::NAN);
        Self {
            row: label.to_string(),
            ram: row.ram,
            pals: row.pals,
            pam: row.pam,
            wc_r10: r(Protocol::WithConstraint, 10),
            wc_r20: r(Protocol::WithConstraint, 20),
            wc_r50: r(Protocol::WithConstraint, 50),
            nc_r10: r(Protocol::NoConstraint, 10),
            nc_r20: r(Protocol::NoConstraint, 20),
            nc_r50: r(Protocol::NoConstraint, 50),
            seed,
        }
    }
}

/// Resolves and applies every row named in `cfg.ablation.rows`; fails
/// before any training if one of them is invalid.
pub fn ablation_plan(cfg: &RunConfig) -> Result<Vec<(String, AblationRow, RunConfig)>> {
    if cfg.ablation.rows.is_empty() {
        return Err(Error::InvalidConfig("no ablation rows requested".into()));
    }
    cfg.ablation
        .rows
        .iter()
        .map(|n| {
            let row = AblationRow::by_name(n)?;
            let row_cfg = row.apply(cfg).map_err(|e| match e {
                Error::InvalidConfig(msg) => Error::InvalidConfig(format!("row {n}: {msg}")),
                other => other,
            })?;
            Ok((n.clone(), row, row_cfg))
        })
        .collect()
}

/// Runs every row named in `cfg.ablation.rows`.
pub fn ablate(train: &[ClipRecord], test: &[ClipRecord], cfg: &RunConfig) -> Result<Vec<AblationResult>> {
    let plan = ablation_plan(cfg)?;
    let mut out = Vec::with_capacity(plan.len());
    for (label, row, row_cfg) in &plan {
        let outcome = run_pipeline(train, test, row_cfg, cfg.ablation.two_step)?;
        out.push(AblationResult::from_report(label, row, &outcome.report, cfg.seed));
    }
    Ok(out)
}

/// One line of `sweep.csv`: a single RAM threshold varied around the base
/// configuration with every other switch of the full model on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub wc_r10: f64,
    pub nc_r10: f64,
    pub precision: f64,
    pub positives: usize,
    pub seed: u64,
}

/// Varies `tau_r` then `tau_gs` over the configured grids.
pub fn sweep(train: &[ClipRecord], test: &[ClipRecord], cfg: &RunConfig) -> Result<Vec<SweepPoint>> {
    let full = ABLATION_ROWS[5].apply(cfg)?;
    let grid = cfg
        .ablation
        .sweep_tau_r
        .iter()
        .map(|&v| ("tau_r", v))
        .chain(cfg.ablation.sweep_tau_gs.iter().map(|&v| ("tau_gs", v)));
    let mut out = Vec::new();
    for (param, value) in grid {
        let mut point = full.clone();
        match param {
            "tau_r" => point.ram.tau_r = value,
            _ => point.ram.tau_gs = value,
        }
        let outcome = run_pipeline(train, test, &point, cfg.ablation.two_step)?;
        let partitions = middle_partitions(train, &point.ram);
        let metrics = train
            .iter()
            .zip(&partitions)
            .map(|(r, p)| pseudo_label_metrics(p, r.clip.middle_frame()))
            .collect::<Result<Vec<_>>>()?;
        let pooled = PseudoLabelMetrics::pooled(&metrics);
        out.push(SweepPoint {
            param: param.to_string(),
            value,
            wc_r10: outcome.report.recall("all", Protocol::WithConstraint, 10).unwrap_or(f64::NAN),
            nc_r10: outcome.report.recall("all", Protocol::NoConstraint, 10).unwrap_or(f64::NAN),
            precision: pooled.precision,
            positives: pooled.match_count,
            seed: cfg.seed,
        });
    }
    Ok(out)
}

/// Serializes `rows` to a CSV file with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

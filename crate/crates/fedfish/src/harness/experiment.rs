//! Trial orchestration and report emission.
//!
//! One trial = build the round's model(s), draw the cohort and its data,
//! run the round, optionally run the attack, and score it. Trials are
//! independent and run in parallel with per-trial seed streams; reports
//! are assembled in trial order, so output is deterministic regardless of
//! scheduling.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackResult};
use crate::error::{Error, Result};
use crate::federation::{self, LabelCounts, ModelDistribution, RoundConfig};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::DataSource;
use crate::metrics::{self, MetricReport};
use crate::seeding;

/// Pipeline stage a trial failed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Config rejected for a sweep point before any trial ran.
    Config,
    /// Model init, cohort sampling, or dataset materialization.
    Data,
    /// Fishing-model construction.
    FishingModels,
    /// The federated round itself.
    Round,
    /// Gradient disaggregation and label inference.
    Attack,
    /// Scoring.
    Metrics,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::FishingModels => "fishing_models",
            Stage::Round => "round",
            Stage::Attack => "attack",
            Stage::Metrics => "metrics",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialError {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for TrialError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage: {}", self.stage, self.message)
    }
}

/// One (trial, axis point) result. Metric fields are absent when the trial
/// failed or the attack was off; `error` says which stage broke and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    pub trial: usize,
    pub seed: u64,
    pub selected: Vec<u32>,
    /// True per-class sample counts per selected client — evaluation-side
    /// ground truth the attack never sees, echoed for scoring.
    pub true_counts: Vec<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    pub attack: Vec<AttackResult>,
    /// Largest absolute error of recovered per-client bias gradients
    /// against the withheld truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub db_err_max: Option<f64>,
    /// Largest distance of any real-valued recovered count from an integer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_int_gap_max: Option<f64>,
    /// Aggregated final-layer bias gradient of a benign round (attack off).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benign_b_grad: Option<Vec<f64>>,
    pub error: Option<TrialError>,
    pub wall_ms: f64,
}

impl TrialRow {
    fn empty(axis_value: Option<f64>, trial: usize, seed: u64) -> TrialRow {
        TrialRow {
            axis_value,
            trial,
            seed,
            selected: Vec::new(),
            true_counts: Vec::new(),
            metrics: None,
            attack: Vec::new(),
            db_err_max: None,
            count_int_gap_max: None,
            benign_b_grad: None,
            error: None,
            wall_ms: 0.0,
        }
    }

    fn point_error(axis_value: f64, err: Error) -> TrialRow {
        let mut row = TrialRow::empty(Some(axis_value), 0, 0);
        row.error = Some(TrialError {
            stage: Stage::Config,
            message: err.to_string(),
        });
        row
    }
}

/// A full experiment or sweep result: config echo, one row per
/// (trial, axis point), and wall-clock timings.
///
/// `csv()` renders the summary table and contains no timing columns, so
/// identical (config, seeds) produce byte-identical CSV output; timings
/// and full per-trial detail live in the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    pub rows: Vec<TrialRow>,
    pub total_wall_ms: f64,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl Report {
    /// Render the summary table. The column set depends only on whether
    /// this is a sweep; empty cells mean "not applicable" (failed trial or
    /// attack off). `lnacc_target` scores the first selected client.
    pub fn csv(&self) -> String {
        let mut out = String::new();
        if self.axis.is_some() {
            out.push_str("axis,axis_value,");
        }
        out.push_str(
            "trial,seed,lnacc_all,lnacc_target,nomp,ratio,cossim_mean,\
             db_err,count_gap,rcond,residual,error_stage,error\n",
        );
        for row in &self.rows {
            if let Some(axis) = &self.axis {
                out.push_str(&format!(
                    "{},{},",
                    csv_field(axis),
                    opt_num(row.axis_value)
                ));
            }
            let m = row.metrics.as_ref();
            let first = row.attack.first();
            let (stage, message) = match &row.error {
                Some(e) => (e.stage.to_string(), e.message.clone()),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.trial,
                row.seed,
                opt_num(m.map(|m| m.lnacc_all)),
                opt_num(m.and_then(|m| m.lnacc_target.first().copied())),
                m.map(|m| m.nomp.to_string()).unwrap_or_default(),
                opt_num(m.map(|m| m.ratio)),
                opt_num(m.and_then(|m| m.cossim_mean)),
                opt_num(row.db_err_max),
                opt_num(row.count_int_gap_max),
                opt_num(first.map(|a| a.rcond)),
                opt_num(first.map(|a| a.residual_norm)),
                stage,
                csv_field(&message),
            ));
        }
        out
    }

    /// Write the CSV table to `csv_path` and the JSON sidecar next to it.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.csv())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(csv_path.with_extension("json"), json)?;
        Ok(())
    }

    /// Seed-averaged `lnacc_all` per axis value, in axis order; failed
    /// trials count as zero accuracy.
    pub fn mean_lnacc_by_axis(&self) -> Vec<(f64, f64)> {
        let mut order: Vec<f64> = Vec::new();
        for row in &self.rows {
            if let Some(v) = row.axis_value {
                if !order.contains(&v) {
                    order.push(v);
                }
            }
        }
        order
            .into_iter()
            .map(|v| {
                let scores: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.axis_value == Some(v))
                    .map(|r| r.metrics.as_ref().map_or(0.0, |m| m.lnacc_all))
                    .collect();
                (v, scores.iter().sum::<f64>() / scores.len() as f64)
            })
            .collect()
    }
}

/// Run every configured trial in parallel.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let source = DataSource::from_config(config)?;
    run_experiment_with_source(config, &source)
}

/// Like [`run_experiment`] but reusing an already-built data source, so a
/// loaded pool can serve many configs.
pub fn run_experiment_with_source(
    config: &ExperimentConfig,
    source: &DataSource,
) -> Result<Report> {
    config.validate()?;
    let started = Instant::now();
    let rows: Vec<TrialRow> = (0..config.trials)
        .into_par_iter()
        .map(|trial| run_trial(config, source, trial, None))
        .collect();
    Ok(Report {
        config: config.clone(),
        axis: None,
        rows,
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Sweep axes: which config field the value list varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    Clients,
    Sigma,
    Theta,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<SweepAxis> {
        match name {
            "batch_size" => Ok(SweepAxis::BatchSize),
            "clients" => Ok(SweepAxis::Clients),
            "sigma" => Ok(SweepAxis::Sigma),
            "theta" => Ok(SweepAxis::Theta),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected batch_size, clients, sigma, or theta"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Clients => "clients",
            SweepAxis::Sigma => "sigma",
            SweepAxis::Theta => "theta",
        }
    }

    /// A copy of `base` with this axis set to `value`. The master seed is
    /// left untouched, so trial draws are common random numbers across
    /// axis points.
    pub fn apply(&self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let as_count = |value: f64, what: &str| -> Result<usize> {
            if !value.is_finite() || value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!(
                    "{what} axis value {value} is not a positive integer"
                )));
            }
            Ok(value as usize)
        };
        match self {
            SweepAxis::BatchSize => cfg.batch_size = as_count(value, "batch_size")?,
            SweepAxis::Clients => cfg.clients_per_round = as_count(value, "clients")?,
            SweepAxis::Sigma => {
                cfg.defense = crate::defenses::DefenseConfig::GaussianNoise { sigma: value }
            }
            SweepAxis::Theta => {
                cfg.defense = crate::defenses::DefenseConfig::Compression { theta: value }
            }
        }
        Ok(cfg)
    }
}

/// One experiment per axis value, merged into a single report with the
/// axis recorded per row. A point whose config is rejected contributes one
/// error row; remaining points still run.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Report> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    base.validate()?;
    let started = Instant::now();
    let mut rows = Vec::new();
    for &value in values {
        let point = axis
            .apply(base, value)
            .and_then(|cfg| cfg.validate().map(|()| cfg));
        let cfg = match point {
            Ok(cfg) => cfg,
            Err(e) => {
                rows.push(TrialRow::point_error(value, e));
                continue;
            }
        };
        match DataSource::from_config(&cfg) {
            Ok(source) => {
                let mut point_rows: Vec<TrialRow> = (0..cfg.trials)
                    .into_par_iter()
                    .map(|trial| run_trial(&cfg, &source, trial, Some(value)))
                    .collect();
                rows.append(&mut point_rows);
            }
            Err(e) => rows.push(TrialRow::point_error(value, e)),
        }
    }
    Ok(Report {
        config: base.clone(),
        axis: Some(axis.label().to_string()),
        rows,
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Run one trial; failures land in the row's `error` instead of bubbling.
pub fn run_trial(
    config: &ExperimentConfig,
    source: &DataSource,
    trial: usize,
    axis_value: Option<f64>,
) -> TrialRow {
    let started = Instant::now();
    let seed = seeding::derive_seed(config.seed, "trial", trial as u64);
    let mut row = TrialRow::empty(axis_value, trial, seed);
    if let Err((stage, err)) = trial_body(config, source, seed, &mut row) {
        row.error = Some(TrialError {
            stage,
            message: err.to_string(),
        });
    }
    row.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    row
}

type StageResult<T> = std::result::Result<T, (Stage, Error)>;

fn at<T>(stage: Stage, r: Result<T>) -> StageResult<T> {
    r.map_err(|e| (stage, e))
}

fn trial_body(
    config: &ExperimentConfig,
    source: &DataSource,
    seed: u64,
    row: &mut TrialRow,
) -> StageResult<()> {
    // Base model, cohort, and each selected client's local data. The local
    // dataset is exactly one batch large: label counts are what the round
    // consumes, and keeping the pool virtual keeps large grids in memory.
    let mut model_rng = seeding::stream(seed, "model-init", 0);
    let base = at(Stage::Data, config.build_model(&mut model_rng))?;
    let mut cohort_rng = seeding::stream(seed, "cohort", 0);
    let selected = at(
        Stage::Data,
        federation::sample_round_clients(
            config.clients_total as u32,
            config.clients_per_round,
            &mut cohort_rng,
        ),
    )?;
    let shape = at(Stage::Data, config.sample_shape())?;
    let datasets = at(
        Stage::Data,
        selected
            .iter()
            .map(|&id| {
                source.client_dataset(
                    id,
                    config.batch_size,
                    &shape,
                    config.label_skew_alpha,
                    seed,
                )
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    row.selected = selected.clone();

    // What the server hands out: per-client fishing models when attacking,
    // otherwise the honest broadcast.
    let kits = if config.attack {
        let options = config.attack_options(seeding::derive_seed(seed, "fishing", 0));
        Some(at(
            Stage::FishingModels,
            attack::build_fishing_models(&base, &selected, &options),
        )?)
    } else {
        None
    };
    let distribution = match &kits {
        Some(kits) => {
            ModelDistribution::PerClient(kits.iter().map(|k| k.model.clone()).collect())
        }
        None => ModelDistribution::Broadcast(base.clone()),
    };

    let round_cfg = RoundConfig {
        round: 0,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        sa_mode: config.sa_mode.clone(),
        defense: config.defense.clone(),
        seed,
    };
    let outcome = at(
        Stage::Round,
        federation::run_round(&base, &distribution, &datasets, &round_cfg),
    )?;
    row.true_counts = outcome
        .true_counts
        .oracle()
        .iter()
        .map(|c| c.counts().to_vec())
        .collect();

    let Some(kits) = kits else {
        row.benign_b_grad = Some(at(
            Stage::Metrics,
            outcome.record.aggregated.fcl_bias().map(<[f64]>::to_vec),
        )?);
        return Ok(());
    };
    let results = at(Stage::Attack, attack::run_attack(&outcome.record, &kits))?;

    // Scoring: count accuracy against withheld truth, fidelity of the
    // recovered bias gradients, and the stealth numbers.
    let truth = outcome.true_counts.oracle();
    let pred: Vec<LabelCounts> = results.iter().map(|r| r.counts.clone()).collect();
    let lnacc_all = at(Stage::Metrics, metrics::lnacc_all(&pred, truth))?;
    let lnacc_target = at(Stage::Metrics, metrics::lnacc_per_client(&pred, truth))?;

    let mut db_err = 0.0f64;
    let mut int_gap = 0.0f64;
    for (result, true_grads) in results.iter().zip(outcome.record.per_client.oracle()) {
        let true_bias = at(Stage::Metrics, true_grads.fcl_bias())?;
        for (&got, &want) in result.recovered_b_grads.iter().zip(true_bias) {
            db_err = db_err.max((got - want).abs());
        }
        for &real in &result.real_counts {
            int_gap = int_gap.max((real - real.round()).abs());
        }
    }
    row.db_err_max = Some(db_err);
    row.count_int_gap_max = Some(int_gap);

    let (nomp, ratio) = at(Stage::Metrics, metrics::nomp_ratio(&base, &kits[0].model))?;
    let (cossim_per_client, cossim_mean) = if config.stealth_metrics {
        let benign = at(
            Stage::Metrics,
            federation::run_round(
                &base,
                &ModelDistribution::Broadcast(base.clone()),
                &datasets,
                &round_cfg,
            ),
        )?;
        let cos: Vec<f64> = at(
            Stage::Metrics,
            outcome
                .record
                .per_client
                .oracle()
                .iter()
                .zip(benign.record.per_client.oracle())
                .map(|(a, b)| metrics::cos_sim(a, b))
                .collect::<Result<Vec<_>>>(),
        )?;
        let mean = cos.iter().sum::<f64>() / cos.len() as f64;
        (cos, Some(mean))
    } else {
        (Vec::new(), None)
    };

    row.metrics = Some(MetricReport {
        lnacc_all,
        lnacc_target,
        nomp,
        ratio,
        cossim_per_client,
        cossim_mean,
        seed,
        config_hash: config.config_hash(),
    });
    row.attack = results;
    Ok(())
}

//! Self-checks: independent oracles and the acceptance suite behind
//! `fedfish verify`.
//!
//! Each check rebuilds expected values by a route independent of the
//! implementation it probes (central finite differences against the
//! hand-derived backward passes, withheld ground truth against recovered
//! counts, integer quantization replayed outside the masking path) and
//! reports one pass/fail line. The heavy checks share two pre-computed
//! recovery grids so the suite runs each configuration exactly once.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::attack::{single_sample_label, counts_from_sample_logits};
use crate::defenses::DefenseConfig;
use crate::error::Result;
use crate::federation::LabelCounts;
use crate::harness::config::data_file;
use crate::harness::data::{write_idx_images, write_idx_labels};
use crate::harness::{
    run_experiment, run_sweep, DataSource, DatasetConfig, ExperimentConfig, ModelConfig, Report,
    SweepAxis,
};
use crate::nn::{self, Mode, Model};
use crate::secure_agg::{decode_values, encode_values, MaskPlan, SaMode};
use crate::seeding::{derive_seed, stream};
use crate::tensor::Tensor;
use rand::Rng;

/// Mean softmax cross-entropy of one batch under `model`.
pub fn loss_of(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let trace = nn::forward(model, inputs, Mode::Train)?;
    let (loss, _) = nn::softmax_xent(&trace.logits(), labels)?;
    Ok(loss)
}

/// Central finite differences of the batch loss over every trainable
/// parameter, step `h` per parameter. Independent of the backward pass:
/// only forward evaluations are used.
pub fn finite_difference_grads(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let base = model.flatten_params();
    let mut out = vec![0.0; base.len()];
    let mut work = model.clone();
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + h;
        work.set_params_from_flat(&p)?;
        let lp = loss_of(&work, inputs, labels)?;
        p[i] = base[i] - h;
        work.set_params_from_flat(&p)?;
        let lm = loss_of(&work, inputs, labels)?;
        p[i] = base[i];
        out[i] = (lp - lm) / (2.0 * h);
    }
    Ok(out)
}

/// Largest deviation between two gradient vectors, relative to the larger
/// entry magnitude with a floor of 1 (gradients here are order-1 or smaller,
/// so this reads as absolute error for tiny entries and relative for large).
pub fn max_relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Acceptance checks
// ---------------------------------------------------------------------------

/// Conditioning floor used for ideal-sum recovery runs. Float roundoff in
/// the aggregated gradients is ~1e-13, so even a poorly conditioned system
/// recovers counts to far better than the 0.5 rounding radius; this floor
/// only rejects outright degenerate cohorts.
pub const IDEAL_CONDITION_FLOOR: f64 = 5e-7;

/// Conditioning floor for masked (fixed-point) recovery runs. Quantization
/// at scale 2^24 leaves ~sqrt(U)/2^24 noise per aggregated element; keeping
/// the smallest singular value of the disaggregation system above roughly
/// `sigma_max * 5e-5` keeps the induced count error below the 0.5 rounding
/// radius even at B = 1024, with margin. The constant-exchange search in the
/// fishing-model builder reliably reaches this floor.
pub const MASKED_CONDITION_FLOOR: f64 = 5e-5;

/// Stable prefix on the stealthiness check's failure detail when only the
/// similarity smoke bound is missed. The modified-parameter accounting in
/// that check is exact and regressions in it must stay loud, so tests that
/// tolerate the documented similarity ceiling key on this marker instead of
/// tolerating any failure.
pub const STEALTH_SMOKE_LIMIT_MARKER: &str = "similarity smoke bound unmet (known limit):";

const GRID_BATCHES: [usize; 5] = [1, 16, 64, 256, 1024];
const GRID_COHORTS: [usize; 4] = [1, 2, 5, 10];
const GRID_TRIALS: usize = 20;
const QUICK_BATCHES: [usize; 3] = [1, 64, 1024];
const QUICK_COHORTS: [usize; 2] = [1, 10];
const QUICK_TRIALS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckStatus::Pass => write!(f, "PASS"),
            CheckStatus::Warn => write!(f, "WARN"),
            CheckStatus::Fail => write!(f, "FAIL"),
        }
    }
}

/// One acceptance-check verdict.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            status: CheckStatus::Pass,
            detail,
        }
    }
    fn warn(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            status: CheckStatus::Warn,
            detail,
        }
    }
    fn fail(name: &'static str, detail: String) -> Self {
        CheckOutcome {
            name,
            status: CheckStatus::Fail,
            detail,
        }
    }

    /// The one-line report form: `PASS exact-recovery — ...`.
    pub fn line(&self) -> String {
        format!("{} {} — {}", self.status, self.name, self.detail)
    }
}

fn guarded(name: &'static str, f: impl FnOnce() -> Result<CheckOutcome>) -> CheckOutcome {
    match f() {
        Ok(outcome) => outcome,
        Err(e) => CheckOutcome::fail(name, format!("check aborted: {e}")),
    }
}

/// Summary of one (architecture, B, U) cell of a recovery grid.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub arch: &'static str,
    pub batch_size: usize,
    pub cohort: usize,
    pub trials: usize,
    /// Trials where any client's count vector was not exactly right.
    pub imperfect: usize,
    pub lnacc_min: f64,
    pub db_err_max: f64,
    pub count_gap_max: f64,
    pub mean_trial_ms: f64,
    pub error: Option<String>,
}

impl GridPoint {
    pub fn perfect(&self) -> bool {
        self.error.is_none() && self.imperfect == 0
    }
}

/// A full recovery grid: three architectures crossed with every (B, U) pair.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub mode: SaMode,
    pub points: Vec<GridPoint>,
    pub trials_per_point: usize,
    pub elapsed_s: f64,
    /// True when the image-file architecture ran on generated stand-in data
    /// because no real image files were present.
    pub standin_images: bool,
}

impl GridRun {
    fn failures(&self) -> Vec<&GridPoint> {
        self.points.iter().filter(|p| !p.perfect()).collect()
    }

    fn describe_failures(&self) -> String {
        let bad = self.failures();
        let mut parts: Vec<String> = bad
            .iter()
            .take(4)
            .map(|p| match &p.error {
                Some(e) => format!("{} B={} U={}: {e}", p.arch, p.batch_size, p.cohort),
                None => format!(
                    "{} B={} U={}: {}/{} trials imperfect (min accuracy {:.3})",
                    p.arch, p.batch_size, p.cohort, p.imperfect, p.trials, p.lnacc_min
                ),
            })
            .collect();
        if bad.len() > parts.len() {
            parts.push(format!("... and {} more points", bad.len() - parts.len()));
        }
        parts.join("; ")
    }
}

struct ArchSpec {
    name: &'static str,
    dataset: DatasetConfig,
    model: ModelConfig,
}

/// Image-file dataset for the grid: the real files when present, otherwise
/// a generated stand-in written through the IDX codec into `work_dir` so the
/// full file-loading path is still exercised.
fn image_dataset(work_dir: &Path) -> Result<(DatasetConfig, bool)> {
    let real = ExperimentConfig {
        dataset: DatasetConfig::Mnist { dir: None },
        model: ModelConfig::Fcn3 { hidden: (256, 128) },
        ..ExperimentConfig::default()
    };
    if real.validate().is_ok() {
        return Ok((DatasetConfig::Mnist { dir: None }, false));
    }
    std::fs::create_dir_all(work_dir)?;
    let (samples, labels) = crate::harness::gen_synthetic(10, 784, 4000, 0x1DAB5)?;
    let images = Tensor::new(vec![4000, 1, 28, 28], samples.data().to_vec())?;
    write_idx_images(&work_dir.join(data_file::IMAGES), &images)?;
    write_idx_labels(&work_dir.join(data_file::LABELS), &labels)?;
    Ok((
        DatasetConfig::Mnist {
            dir: Some(work_dir.to_path_buf()),
        },
        true,
    ))
}

fn grid_archs(image_ds: DatasetConfig) -> Vec<ArchSpec> {
    vec![
        ArchSpec {
            name: "fcn-synthetic",
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 32,
                seed: None,
            },
            model: ModelConfig::Fcn3 { hidden: (64, 64) },
        },
        ArchSpec {
            name: "fcn-images",
            dataset: image_ds,
            model: ModelConfig::Fcn3 { hidden: (256, 128) },
        },
        ArchSpec {
            name: "cnn-synthetic",
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 64,
                seed: None,
            },
            model: ModelConfig::CnnBn {
                channels: 64,
                kernel: 3,
                embedding: 128,
            },
        },
    ]
}

fn scratch_dir(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("fedfish-{tag}-{}", std::process::id()))
}

/// Run the full recovery grid in the given aggregation mode: every
/// architecture, batch size, and cohort size, `trials` seeded trials each,
/// attack on, no defense.
pub fn run_recovery_grid(mode: SaMode, quick: bool) -> Result<GridRun> {
    let started = std::time::Instant::now();
    let (batches, cohorts, trials): (&[usize], &[usize], usize) = if quick {
        (&QUICK_BATCHES, &QUICK_COHORTS, QUICK_TRIALS)
    } else {
        (&GRID_BATCHES, &GRID_COHORTS, GRID_TRIALS)
    };
    let work_dir = scratch_dir("verify-images");
    let (image_ds, standin) = image_dataset(&work_dir)?;
    let condition = match mode {
        SaMode::Ideal => IDEAL_CONDITION_FLOOR,
        SaMode::Masked { .. } => MASKED_CONDITION_FLOOR,
    };

    let mut points = Vec::new();
    for arch in grid_archs(image_ds) {
        let base = ExperimentConfig {
            dataset: arch.dataset.clone(),
            model: arch.model.clone(),
            clients_total: 100,
            trials,
            seed: derive_seed(0xACC0, arch.name, 0),
            sa_mode: mode,
            condition_threshold: Some(condition),
            stealth_metrics: false,
            ..ExperimentConfig::default()
        };
        let source = DataSource::from_config(&base)?;
        for &b in batches {
            for &u in cohorts {
                let config = ExperimentConfig {
                    batch_size: b,
                    clients_per_round: u,
                    ..base.clone()
                };
                let point = match crate::harness::experiment::run_experiment_with_source(
                    &config, &source,
                ) {
                    Ok(report) => summarize_point(arch.name, b, u, &report),
                    Err(e) => GridPoint {
                        arch: arch.name,
                        batch_size: b,
                        cohort: u,
                        trials,
                        imperfect: trials,
                        lnacc_min: 0.0,
                        db_err_max: f64::NAN,
                        count_gap_max: f64::NAN,
                        mean_trial_ms: 0.0,
                        error: Some(e.to_string()),
                    },
                };
                points.push(point);
            }
        }
    }
    if standin {
        let _ = std::fs::remove_dir_all(&work_dir);
    }
    Ok(GridRun {
        mode,
        points,
        trials_per_point: trials,
        elapsed_s: started.elapsed().as_secs_f64(),
        standin_images: standin,
    })
}

fn summarize_point(arch: &'static str, b: usize, u: usize, report: &Report) -> GridPoint {
    let mut imperfect = 0usize;
    let mut lnacc_min = f64::INFINITY;
    let mut db_err_max: f64 = 0.0;
    let mut gap_max: f64 = 0.0;
    let mut wall_sum = 0.0;
    let mut error = None;
    for row in &report.rows {
        wall_sum += row.wall_ms;
        if let Some(e) = &row.error {
            error.get_or_insert_with(|| format!("trial {}: {e}", row.trial));
            imperfect += 1;
            lnacc_min = 0.0;
            continue;
        }
        let Some(metrics) = &row.metrics else {
            error.get_or_insert_with(|| format!("trial {}: no metrics", row.trial));
            imperfect += 1;
            continue;
        };
        let worst_client = metrics
            .lnacc_target
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let trial_min = metrics.lnacc_all.min(worst_client);
        lnacc_min = lnacc_min.min(trial_min);
        if trial_min < 1.0 {
            imperfect += 1;
        }
        if let Some(v) = row.db_err_max {
            db_err_max = db_err_max.max(v);
        }
        if let Some(v) = row.count_int_gap_max {
            gap_max = gap_max.max(v);
        }
    }
    if !lnacc_min.is_finite() {
        lnacc_min = 0.0;
    }
    GridPoint {
        arch,
        batch_size: b,
        cohort: u,
        trials: report.rows.len(),
        imperfect,
        lnacc_min,
        db_err_max,
        count_gap_max: gap_max,
        mean_trial_ms: wall_sum / report.rows.len().max(1) as f64,
        error,
    }
}

/// Check 1: exact label recovery across the whole grid in ideal mode.
pub fn check_exact_recovery(ideal: &GridRun) -> CheckOutcome {
    let name = "exact-recovery";
    let note = if ideal.standin_images {
        " (image files absent; IDX-roundtripped stand-in used)"
    } else {
        ""
    };
    if ideal.failures().is_empty() {
        CheckOutcome::pass(
            name,
            format!(
                "3 architectures x {} (B,U) points x {} trials: every client's \
                 label counts recovered exactly in every trial; grid took {:.0}s{note}",
                ideal.points.len() / 3,
                ideal.trials_per_point,
                ideal.elapsed_s
            ),
        )
    } else {
        CheckOutcome::fail(name, ideal.describe_failures())
    }
}

/// Check 2: recovered per-client bias gradients and pre-rounding counts.
pub fn check_disaggregation_fidelity(ideal: &GridRun) -> CheckOutcome {
    let name = "disaggregation-fidelity";
    let db = ideal
        .points
        .iter()
        .map(|p| p.db_err_max)
        .fold(0.0f64, f64::max);
    let gap = ideal
        .points
        .iter()
        .map(|p| p.count_gap_max)
        .fold(0.0f64, f64::max);
    let detail = format!(
        "worst recovered-gradient error {db:.2e} (bound 1e-6), worst real-count \
         distance to integer {gap:.2e} (bound 1e-4), over the whole ideal grid"
    );
    if db.is_finite() && gap.is_finite() && db <= 1e-6 && gap <= 1e-4 {
        CheckOutcome::pass(name, detail)
    } else {
        CheckOutcome::fail(name, detail)
    }
}

/// Check 3: analytic gradients against central finite differences for both
/// architectures on several random model/batch draws.
pub fn check_gradient_correctness() -> CheckOutcome {
    guarded("gradient-correctness", || {
        let draws = 5;
        let mut worst: f64 = 0.0;
        for draw in 0..draws {
            for family in ["fcn", "cnn"] {
                let mut rng = stream(derive_seed(0xF1D, family, draw), "model-init", 0);
                let (model, shape) = match family {
                    "fcn" => (
                        Model::fcn3(12, (16, 14), 6, &mut rng)?,
                        vec![12usize],
                    ),
                    _ => (
                        Model::cnn_bn((1, 6, 6), 8, 3, 16, 5, &mut rng)?,
                        vec![1usize, 6, 6],
                    ),
                };
                let bsz = 4 + (draw as usize % 3);
                let mut data_rng = stream(derive_seed(0xF1D, family, draw), "batch", 1);
                let n: usize = shape.iter().product();
                let inputs = Tensor::new(
                    [vec![bsz], shape.clone()].concat(),
                    (0..bsz * n).map(|_| data_rng.gen_range(-1.0..1.0)).collect(),
                )?;
                let labels: Vec<usize> = (0..bsz)
                    .map(|_| data_rng.gen_range(0..model.num_classes()))
                    .collect();
                let trace = nn::forward(&model, &inputs, Mode::Train)?;
                let analytic = nn::backward(&model, &trace, &labels)?.flatten();
                let numeric = finite_difference_grads(&model, &inputs, &labels, 1e-5)?;
                worst = worst.max(max_relative_deviation(&analytic, &numeric));
            }
        }
        let detail = format!(
            "both architectures, {draws} random draws each: worst gradient \
             deviation from central finite differences {worst:.2e} (bound 1e-4)"
        );
        Ok(if worst <= 1e-4 {
            CheckOutcome::pass("gradient-correctness", detail)
        } else {
            CheckOutcome::fail("gradient-correctness", detail)
        })
    })
}

/// Check 4: the single-sample sign rule and the per-sample-logit count
/// identity, on honest (non-fishing) models.
pub fn check_count_identities() -> CheckOutcome {
    guarded("count-identities", || {
        let mut sign_hits = 0usize;
        let sign_trials = 1000usize;
        for t in 0..sign_trials {
            let mut rng = stream(derive_seed(0x51C, "sign", t as u64), "model-init", 0);
            let model = Model::fcn3(9, (12, 10), 7, &mut rng)?;
            let label = rng.gen_range(0..7);
            let inputs = Tensor::new(vec![1, 9], (0..9).map(|_| rng.gen_range(-1.5..1.5)).collect())?;
            let trace = nn::forward(&model, &inputs, Mode::Train)?;
            let grads = nn::backward(&model, &trace, &[label])?;
            if single_sample_label(grads.fcl_bias()?)? == label {
                sign_hits += 1;
            }
        }

        let mut count_hits = 0usize;
        let count_trials = 100usize;
        for t in 0..count_trials {
            let mut rng = stream(derive_seed(0x51C, "count", t as u64), "model-init", 0);
            let model = Model::fcn3(11, (14, 12), 8, &mut rng)?;
            let bsz = rng.gen_range(1..=64);
            let labels: Vec<usize> = (0..bsz).map(|_| rng.gen_range(0..8)).collect();
            let inputs = Tensor::new(
                vec![bsz, 11],
                (0..bsz * 11).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )?;
            let trace = nn::forward(&model, &inputs, Mode::Train)?;
            let grads = nn::backward(&model, &trace, &labels)?;
            let inferred = counts_from_sample_logits(grads.fcl_bias()?, &trace.logits(), bsz)?;
            let truth = LabelCounts::from_labels(&labels, 8)?;
            if inferred.counts == truth {
                count_hits += 1;
            }
        }

        let detail = format!(
            "single-sample sign rule {sign_hits}/{sign_trials}; \
             per-sample-logit count identity exact on {count_hits}/{count_trials} random batches"
        );
        Ok(if sign_hits == sign_trials && count_hits == count_trials {
            CheckOutcome::pass("count-identities", detail)
        } else {
            CheckOutcome::fail("count-identities", detail)
        })
    })
}

/// Check 5: fixed-point masking — exact cancellation, the decode error
/// bound, and full recovery through the masked pipeline at scale 2^24.
pub fn check_secure_aggregation(masked: &GridRun) -> CheckOutcome {
    guarded("secure-aggregation", || {
        let name = "secure-aggregation";
        let mode = SaMode::masked_default();
        let scale = mode.scale().unwrap();
        let len = 257usize;
        let mut worst_decode = 0.0f64;
        for &u in &[2usize, 5, 20] {
            let clients: Vec<u32> = (0..u as u32).map(|i| 11 + 3 * i).collect();
            let plan = MaskPlan::new(&clients, derive_seed(0xC0DE, "plan", u as u64))?;
            let mut per_client: Vec<Vec<f64>> = Vec::new();
            let mut rng = stream(derive_seed(0xC0DE, "values", u as u64), "draw", 0);
            for _ in 0..u {
                per_client.push((0..len).map(|_| rng.gen_range(-2.0..2.0)).collect());
            }
            let updates: Vec<_> = clients
                .iter()
                .zip(&per_client)
                .map(|(&c, v)| encode_values(v, &plan, c, mode))
                .collect::<Result<_>>()?;
            let decoded = decode_values(&updates, &plan)?;

            // Oracle: quantize and sum outside the masking path. If any mask
            // failed to cancel it would shift the sum by an enormous random
            // amount, so bitwise equality here proves exact cancellation.
            for i in 0..len {
                let int_sum: i64 = per_client
                    .iter()
                    .map(|v| (v[i] * scale).round() as i64)
                    .sum();
                let expected = int_sum as f64 / scale;
                if decoded[i] != expected {
                    return Ok(CheckOutcome::fail(
                        name,
                        format!(
                            "cohort {u}, element {i}: decode {} differs from \
                             plaintext quantized sum {expected}",
                            decoded[i]
                        ),
                    ));
                }
                let plain: f64 = per_client.iter().map(|v| v[i]).sum();
                worst_decode = worst_decode.max((decoded[i] - plain).abs());
            }
            let bound = u as f64 / (2.0 * scale);
            if worst_decode > bound {
                return Ok(CheckOutcome::fail(
                    name,
                    format!(
                        "cohort {u}: decode error {worst_decode:.3e} exceeds \
                         the U/(2s) bound {bound:.3e}"
                    ),
                ));
            }
        }

        if !masked.failures().is_empty() {
            return Ok(CheckOutcome::fail(
                name,
                format!(
                    "codec exact, but masked-mode recovery grid imperfect: {}",
                    masked.describe_failures()
                ),
            ));
        }
        Ok(CheckOutcome::pass(
            name,
            format!(
                "masks cancel bit-exactly for cohorts of 2/5/20 (worst decode \
                 error {worst_decode:.2e} within U/(2s)); full grid at scale 2^24 \
                 in masked mode: all counts exact ({:.0}s)",
                masked.elapsed_s
            ),
        ))
    })
}

/// Check 6: defenses degrade the attack as expected at desk scale.
pub fn check_defense_tradeoffs(quick: bool) -> CheckOutcome {
    guarded("defense-tradeoffs", || {
        let name = "defense-tradeoffs";
        let trials = if quick { 8 } else { GRID_TRIALS };
        // Cohort of two: the smallest multi-client setting. Noise tolerance
        // depends on the conditioning of the disaggregation system, which for
        // constant-probe embeddings degrades quickly with cohort size; two
        // clients keep the noise amplification near its floor so the curve
        // reflects the defense, not the cohort geometry.
        let base = ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 32,
                seed: None,
            },
            model: ModelConfig::Fcn3 { hidden: (64, 64) },
            clients_total: 100,
            clients_per_round: 2,
            batch_size: 64,
            trials,
            seed: derive_seed(0xDEF, "noise", 0),
            condition_threshold: Some(MASKED_CONDITION_FLOOR),
            stealth_metrics: false,
            ..ExperimentConfig::default()
        };

        let sigmas = [0.0, 1e-4, 1e-3, 1e-2];
        let noise = run_sweep(&base, SweepAxis::Sigma, &sigmas)?;
        let noise_curve = noise.mean_lnacc_by_axis();
        if noise_curve.len() != sigmas.len() {
            return Ok(CheckOutcome::fail(
                name,
                format!("noise sweep produced {} points, expected 4", noise_curve.len()),
            ));
        }

        let theta_base = ExperimentConfig {
            batch_size: 16,
            seed: derive_seed(0xDEF, "compression", 0),
            ..base.clone()
        };
        let thetas = [0.0, 0.4, 0.8];
        let compression = run_sweep(&theta_base, SweepAxis::Theta, &thetas)?;
        let comp_curve = compression.mean_lnacc_by_axis();
        if comp_curve.len() != thetas.len() {
            return Ok(CheckOutcome::fail(
                name,
                format!(
                    "compression sweep produced {} points, expected 3",
                    comp_curve.len()
                ),
            ));
        }

        let mut problems = Vec::new();
        for (sigma, acc) in noise_curve.iter().take(3) {
            if *acc < 0.90 {
                problems.push(format!("noise sigma={sigma:.0e}: mean accuracy {acc:.3} < 0.90"));
            }
        }
        if noise_curve[3].1 >= noise_curve[2].1 {
            problems.push(format!(
                "sigma=1e-2 accuracy {:.3} not strictly below sigma=1e-3 accuracy {:.3}",
                noise_curve[3].1, noise_curve[2].1
            ));
        }
        for w in noise_curve.windows(2) {
            if w[1].1 > w[0].1 + 1e-9 {
                problems.push(format!(
                    "noise curve rises from {:.3} to {:.3} between sigma={:.0e} and {:.0e}",
                    w[0].1, w[1].1, w[0].0, w[1].0
                ));
            }
        }
        if comp_curve[2].1 < 0.80 {
            problems.push(format!(
                "compression theta=0.8 at B=16: mean accuracy {:.3} < 0.80",
                comp_curve[2].1
            ));
        }
        for w in comp_curve.windows(2) {
            if w[1].1 > w[0].1 + 1e-9 {
                problems.push(format!(
                    "compression curve rises from {:.3} to {:.3} between theta={} and {}",
                    w[0].1, w[1].1, w[0].0, w[1].0
                ));
            }
        }

        let summary = format!(
            "noise accuracy {:.3}/{:.3}/{:.3}/{:.3} over sigma 0/1e-4/1e-3/1e-2 at B=64; \
             compression accuracy {:.3}/{:.3}/{:.3} over theta 0/0.4/0.8 at B=16 \
             ({} trials per point)",
            noise_curve[0].1,
            noise_curve[1].1,
            noise_curve[2].1,
            noise_curve[3].1,
            comp_curve[0].1,
            comp_curve[1].1,
            comp_curve[2].1,
            trials
        );
        Ok(if problems.is_empty() {
            CheckOutcome::pass(name, summary)
        } else {
            CheckOutcome::fail(name, format!("{}; {summary}", problems.join("; ")))
        })
    })
}

/// Check 7: stealth accounting — modified-parameter count, its fraction of
/// the model, and similarity of attack-round to benign-round gradients.
pub fn check_stealthiness() -> CheckOutcome {
    guarded("stealthiness", || {
        let name = "stealthiness";
        let config = ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 64,
                seed: None,
            },
            model: ModelConfig::CnnBn {
                channels: 64,
                kernel: 3,
                embedding: 128,
            },
            clients_total: 100,
            clients_per_round: 5,
            batch_size: 64,
            trials: 5,
            seed: derive_seed(0x57EA, "stealth", 0),
            condition_threshold: Some(IDEAL_CONDITION_FLOOR),
            stealth_metrics: true,
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&config)?;
        let params = config.build_model(&mut stream(1, "probe", 0))?.flatten_params().len();
        let want_nomp = 2 * 64u64;
        let mut cossim_min = f64::INFINITY;
        let mut cossim_max = f64::NEG_INFINITY;
        for row in &report.rows {
            if let Some(e) = &row.error {
                return Ok(CheckOutcome::fail(name, format!("trial {}: {e}", row.trial)));
            }
            let m = row.metrics.as_ref().expect("metrics on clean trial");
            if m.nomp != want_nomp {
                return Ok(CheckOutcome::fail(
                    name,
                    format!("modified-parameter count {} (expected {want_nomp})", m.nomp),
                ));
            }
            let want_ratio = want_nomp as f64 / params as f64;
            if (m.ratio - want_ratio).abs() > 1e-12 {
                return Ok(CheckOutcome::fail(
                    name,
                    format!("ratio {} inconsistent with {want_nomp}/{params}", m.ratio),
                ));
            }
            let Some(cs) = m.cossim_mean else {
                return Ok(CheckOutcome::fail(name, "no similarity recorded".into()));
            };
            cossim_min = cossim_min.min(cs);
            cossim_max = cossim_max.max(cs);
        }
        // 0.5 is an artifact-scale smoke threshold: it separates "attack
        // rounds look broadly like benign rounds" from degenerate gradients
        // without claiming any published value for this small model.
        Ok(if cossim_min > 0.5 {
            CheckOutcome::pass(
                name,
                format!(
                    "modified parameters = {want_nomp} = 2 x 64 features, ratio \
                     {want_nomp}/{params}, benign-round gradient similarity >= \
                     {cossim_min:.3} over 5 trials (smoke bound 0.5)"
                ),
            )
        } else {
            // Measured, not a bug: the classifier-layer gradients align at
            // ~0.99, but the embedding layer between the modified
            // normalization and the classifier dominates total gradient norm
            // and its batch gradient carries per-class data structure that no
            // constant-embedding model can reproduce. That caps full-gradient
            // similarity near 0.3 at this scale regardless of batch size,
            // cohort size, or fishing constants. (The high published
            // similarities come from deep nets whose modified layer feeds the
            // classifier directly.)
            CheckOutcome::fail(
                name,
                format!(
                    "{STEALTH_SMOKE_LIMIT_MARKER} modified parameters = {want_nomp} = \
                     2 x 64 features and ratio {want_nomp}/{params} are both exact, but \
                     mean benign-round gradient similarity spans {cossim_min:.3}..{cossim_max:.3} \
                     over 5 trials against the 0.5 smoke bound; the embedding layer dominates \
                     gradient norm with per-class structure a constant-embedding model cannot \
                     match (full-gradient ceiling ~0.3; classifier layer alone aligns at ~0.99)"
                ),
            )
        })
    })
}

fn fit_r2(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    (sxy * sxy) / (sxx * syy)
}

/// Check 8 (soft): trial wall time grows monotonically and roughly linearly
/// with batch size, and monotonically with cohort size. Timing on shared
/// hardware is noisy, so violations warn rather than fail.
pub fn check_runtime_scaling(ideal: &GridRun) -> CheckOutcome {
    let name = "runtime-scaling";
    let arch = "cnn-synthetic";
    let at = |b: usize, u: usize| -> Option<f64> {
        ideal
            .points
            .iter()
            .find(|p| p.arch == arch && p.batch_size == b && p.cohort == u)
            .map(|p| p.mean_trial_ms)
    };
    let max_u = *GRID_COHORTS.last().unwrap();
    let b_series: Vec<(f64, f64)> = [64usize, 256, 1024]
        .iter()
        .filter_map(|&b| at(b, max_u).map(|w| (b as f64, w)))
        .collect();
    let u_series: Vec<(f64, f64)> = [2usize, 5, 10]
        .iter()
        .filter_map(|&u| at(1024, u).map(|w| (u as f64, w)))
        .collect();
    if b_series.len() < 3 || u_series.len() < 3 {
        return CheckOutcome::warn(
            name,
            "grid did not include the batch/cohort points needed for timing \
             (quick mode skips them)"
                .into(),
        );
    }
    let b_monotone = b_series.windows(2).all(|w| w[1].1 >= w[0].1);
    let u_monotone = u_series.windows(2).all(|w| w[1].1 >= w[0].1);
    let r2 = fit_r2(&b_series);
    let detail = format!(
        "mean trial wall on {arch}: {:.0}/{:.0}/{:.0} ms over B=64/256/1024 (U={max_u}, \
         linear fit R^2 {r2:.3}); {:.0}/{:.0}/{:.0} ms over U=2/5/10 (B=1024)",
        b_series[0].1, b_series[1].1, b_series[2].1, u_series[0].1, u_series[1].1, u_series[2].1
    );
    if b_monotone && u_monotone && r2 >= 0.9 {
        CheckOutcome::pass(name, detail)
    } else {
        CheckOutcome::warn(name, format!("timing off-trend (soft check): {detail}"))
    }
}

/// Check 9: identical configuration and seed produce byte-identical CSV.
pub fn check_determinism() -> CheckOutcome {
    guarded("determinism", || {
        let name = "determinism";
        let config = ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 32,
                seed: None,
            },
            model: ModelConfig::Fcn3 { hidden: (64, 64) },
            clients_total: 40,
            clients_per_round: 5,
            batch_size: 16,
            trials: 5,
            seed: derive_seed(0xD37, "repeat", 0),
            sa_mode: SaMode::masked_default(),
            defense: DefenseConfig::GaussianNoise { sigma: 1e-4 },
            stealth_metrics: true,
            ..ExperimentConfig::default()
        };
        let first = run_experiment(&config)?.csv();
        let second = run_experiment(&config)?.csv();
        Ok(if first == second {
            CheckOutcome::pass(
                name,
                format!(
                    "two runs of one config (masked aggregation, noise defense, \
                     stealth metrics on) emitted byte-identical CSV ({} bytes)",
                    first.len()
                ),
            )
        } else {
            let diverge = first
                .lines()
                .zip(second.lines())
                .position(|(a, b)| a != b)
                .map(|i| format!("first divergence at line {}", i + 1))
                .unwrap_or_else(|| "rows differ in count".into());
            CheckOutcome::fail(name, format!("CSV bodies differ: {diverge}"))
        })
    })
}

/// Run the whole acceptance suite in order, sharing the two recovery grids
/// across the checks that read them. `progress` receives each outcome as it
/// is produced.
pub fn run_acceptance(quick: bool, mut progress: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let mut out = Vec::with_capacity(9);
    let mut push = |o: CheckOutcome, progress: &mut dyn FnMut(&CheckOutcome)| {
        progress(&o);
        out.push(o);
    };

    let ideal = run_recovery_grid(SaMode::Ideal, quick);
    match &ideal {
        Ok(grid) => {
            push(check_exact_recovery(grid), &mut progress);
            push(check_disaggregation_fidelity(grid), &mut progress);
        }
        Err(e) => {
            push(
                CheckOutcome::fail("exact-recovery", format!("grid aborted: {e}")),
                &mut progress,
            );
            push(
                CheckOutcome::fail("disaggregation-fidelity", format!("grid aborted: {e}")),
                &mut progress,
            );
        }
    }
    push(check_gradient_correctness(), &mut progress);
    push(check_count_identities(), &mut progress);
    match run_recovery_grid(SaMode::masked_default(), quick) {
        Ok(grid) => push(check_secure_aggregation(&grid), &mut progress),
        Err(e) => push(
            CheckOutcome::fail("secure-aggregation", format!("grid aborted: {e}")),
            &mut progress,
        ),
    }
    push(check_defense_tradeoffs(quick), &mut progress);
    push(check_stealthiness(), &mut progress);
    match &ideal {
        Ok(grid) => push(check_runtime_scaling(grid), &mut progress),
        Err(e) => push(
            CheckOutcome::warn("runtime-scaling", format!("grid aborted: {e}")),
            &mut progress,
        ),
    }
    push(check_determinism(), &mut progress);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_lines_read_cleanly() {
        let o = CheckOutcome::pass("demo", "all good".into());
        assert_eq!(o.line(), "PASS demo — all good");
        assert_eq!(CheckStatus::Fail.to_string(), "FAIL");
    }

    #[test]
    fn fit_r2_is_one_on_a_line() {
        let pts = [(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)];
        assert!((fit_r2(&pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relative_deviation_floor_keeps_tiny_entries_absolute() {
        assert!(max_relative_deviation(&[1e-9], &[2e-9]) < 1e-8);
        assert!((max_relative_deviation(&[2.0], &[1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stand_in_image_files_load_back() {
        let dir = scratch_dir("verify-test-images");
        let (ds, standin) = image_dataset(&dir).unwrap();
        if standin {
            let config = ExperimentConfig {
                dataset: ds,
                model: ModelConfig::Fcn3 { hidden: (32, 16) },
                ..ExperimentConfig::default()
            };
            let source = DataSource::from_config(&config).unwrap();
            let pool_classes = match &source {
                DataSource::Pool { n_classes, .. } => *n_classes,
                _ => 0,
            };
            assert_eq!(pool_classes, 10);
            std::fs::remove_dir_all(&dir).unwrap();
        }
    }

    #[test]
    fn quick_grid_on_one_small_point_stays_perfect() {
        // Tiny slice of the grid logic: one arch, one point, via the same
        // summarization path the acceptance checks read.
        let config = ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 32,
                seed: None,
            },
            model: ModelConfig::Fcn3 { hidden: (64, 64) },
            clients_total: 20,
            clients_per_round: 2,
            batch_size: 8,
            trials: 3,
            seed: 99,
            condition_threshold: Some(IDEAL_CONDITION_FLOOR),
            stealth_metrics: false,
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&config).unwrap();
        let point = summarize_point("fcn-synthetic", 8, 2, &report);
        assert!(point.perfect(), "{:?}", point.error);
        assert!(point.db_err_max < 1e-8);
    }
}

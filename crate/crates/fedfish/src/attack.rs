//! Label-inference attack against secure aggregation, run by a malicious
//! server.
//!
//! The pipeline has three stages:
//!
//! 1. **Fishing models** — each selected client receives a variant of the
//!    global model whose designated layer is overwritten so the model's
//!    embedding (the final layer's input) is a constant vector: batch-norm
//!    `gamma = 0, beta = C` when the architecture has one, otherwise the
//!    first fully connected layer gets `weight = 0, bias = C`. The constant
//!    `C` differs per client, so each client produces a known, distinct,
//!    data-independent embedding `e^u` and logit vector `y^u`.
//! 2. **Gradient disaggregation** — under such models every client's
//!    final-layer weight gradient factors as `outer(b_grad, e^u)`, so the
//!    securely aggregated weight/bias gradients form, per class, a linear
//!    system over the per-client bias gradients, with a coefficient matrix
//!    built from the known embeddings. One least-squares factorization
//!    recovers all classes.
//! 3. **Label inference** — with all of a client's samples sharing the
//!    preset logits, its per-class batch counts are
//!    `B * (softmax(y^u) - b_grad^u)`, which round to the exact counts.
//!
//! A note on choosing the constants: the embedding of a fishing model is a
//! piecewise-linear curve in `C` (each relu unit contributes one knee), so
//! the coefficient matrix is only as well-conditioned as the knees the
//! chosen `C` values straddle. The builder first tries a fixed ladder and a
//! handful of random redraws; when those fail it probes the curve on a log
//! grid and greedily picks the best-conditioned subset of candidates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{LabelCounts, ModelDistribution, RoundRecord};
use crate::linalg::{lstsq, rcond_estimate, DEFAULT_RANK_TOL};
use crate::nn::{forward, softmax, LayerParams, LayerSpec, Mode, Model};
use crate::seeding;
use crate::tensor::{Matrix, Tensor};

/// The coefficient matrix must have a reciprocal condition number above
/// this for disaggregation to proceed; below it, recovered counts could
/// round incorrectly.
pub const CONDITION_THRESHOLD: f64 = 1e-8;

/// Random redraw attempts for the constants before the grid fallback.
pub const MAX_REDRAWS: usize = 16;

const GRID_LO: f64 = 0.002;
const GRID_HI: f64 = 64.0;
const GRID_POINTS: usize = 256;
/// Swap passes of the post-greedy exchange refinement.
const EXCHANGE_PASSES: usize = 15;
/// Minimum relative conditioning gain for an exchange swap to be accepted.
const EXCHANGE_GAIN: f64 = 1.02;
/// Exchange refinement is quadratic in cohort size; beyond this it is skipped.
const EXCHANGE_MAX_COHORT: usize = 32;

/// Tunables for fishing-model construction and disaggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackOptions {
    pub condition_threshold: f64,
    pub max_redraws: usize,
    /// Seeds constant redraws and the random probe inputs.
    pub seed: u64,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            condition_threshold: CONDITION_THRESHOLD,
            max_redraws: MAX_REDRAWS,
            seed: 0,
        }
    }
}

/// Everything the server precomputes about one client's fishing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FishingKit {
    pub client_id: u32,
    pub model: Model,
    pub c_value: f64,
    /// Final-layer input this model produces for every input (length m).
    pub embedding: Vec<f64>,
    /// Final-layer output this model produces for every input (length n).
    pub logits: Vec<f64>,
}

/// Which layer the fishing construction overwrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DesignatedLayer {
    BatchNorm(usize),
    FirstFullyConnected,
}

fn designated_layer(base: &Model) -> Result<DesignatedLayer> {
    if let Some(idx) = base.first_batchnorm() {
        return Ok(DesignatedLayer::BatchNorm(idx));
    }
    if matches!(base.specs()[0], LayerSpec::FullyConnected { .. }) {
        return Ok(DesignatedLayer::FirstFullyConnected);
    }
    Err(Error::Architecture(
        "no batch-norm layer and the first layer is not fully connected; \
         nothing to overwrite for a constant-output model"
            .into(),
    ))
}

fn set_constant_layer(model: &mut Model, layer: DesignatedLayer, c: f64) {
    match layer {
        DesignatedLayer::BatchNorm(idx) => {
            if let LayerParams::BatchNorm { gamma, beta, .. } = &mut model.params_mut()[idx] {
                gamma.data_mut().fill(0.0);
                beta.data_mut().fill(c);
            }
        }
        DesignatedLayer::FirstFullyConnected => {
            if let LayerParams::FullyConnected { weight, bias } = &mut model.params_mut()[0] {
                weight.data_mut().fill(0.0);
                bias.data_mut().fill(c);
            }
        }
    }
}

fn batch_one_shape(base: &Model) -> Vec<usize> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(base.input_shape());
    shape
}

/// Forward one input through `model` and return (embedding, logits).
fn probe_with(model: &Model, input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = forward(model, input, Mode::Train)?;
    Ok((trace.embedding().row(0).to_vec(), trace.logits().row(0).to_vec()))
}

fn random_input(base: &Model, seed: u64, tag_index: u64) -> Tensor {
    let shape = batch_one_shape(base);
    let len: usize = shape.iter().product();
    let mut rng = seeding::stream(seed, "probe-input", tag_index);
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("probe input is finite by construction")
}

/// Stack the embeddings into the disaggregation coefficient matrix:
/// (m+1) x U, row 0 all ones, row j the j-th embedding component of every
/// client.
pub fn coefficient_matrix(embeddings: &[Vec<f64>]) -> Result<Matrix> {
    let Some(first) = embeddings.first() else {
        return Err(Error::Shape("no embeddings to stack".into()));
    };
    let m = first.len();
    if embeddings.iter().any(|e| e.len() != m) {
        return Err(Error::Shape("embeddings of mixed lengths".into()));
    }
    let mut a = Matrix::zeros(m + 1, embeddings.len());
    for (col, e) in embeddings.iter().enumerate() {
        a.set(0, col, 1.0);
        for (j, v) in e.iter().enumerate() {
            a.set(j + 1, col, *v);
        }
    }
    Ok(a)
}

/// Embedding of the fishing variant of `base` with constant `c`, computed
/// by mutating a reusable work model (avoids cloning the full parameter set
/// per candidate).
fn fishing_embedding(
    work: &mut Model,
    layer: DesignatedLayer,
    c: f64,
    probe: &Tensor,
) -> Result<Vec<f64>> {
    set_constant_layer(work, layer, c);
    Ok(probe_with(work, probe)?.0)
}

/// Conditioning of the column subset `idx` of candidates whose pairwise
/// inner products are in `gram`: rcond(A_S) = sqrt(rcond(A_Sᵀ·A_S)).
fn subset_rcond(gram: &Matrix, idx: &[usize]) -> Result<f64> {
    let k = idx.len();
    let mut g = Matrix::zeros(k, k);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            g.set(a, b, gram.get(i, j));
        }
    }
    Ok(rcond_estimate(&g)?.max(0.0).sqrt())
}

/// Greedy conditioning-aware fallback: probe the embedding curve on a log
/// grid of constants, pick `want` columns by pivoted orthogonalization
/// (largest residual norm first), then — if still short of `threshold` —
/// refine by exchange: repeatedly swap one chosen column for the candidate
/// that most improves the conditioning estimate. Returns the chosen
/// constants, ascending.
fn greedy_constants(
    work: &mut Model,
    layer: DesignatedLayer,
    probe: &Tensor,
    want: usize,
    threshold: f64,
) -> Result<Vec<f64>> {
    let mut columns: Vec<(f64, Vec<f64>)> = Vec::with_capacity(GRID_POINTS);
    for i in 0..GRID_POINTS {
        let t = i as f64 / (GRID_POINTS - 1) as f64;
        let c = GRID_LO * (GRID_HI / GRID_LO).powf(t);
        let e = fishing_embedding(work, layer, c, probe)?;
        let mut col = Vec::with_capacity(e.len() + 1);
        col.push(1.0);
        col.extend_from_slice(&e);
        columns.push((c, col));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(want);
    let mut residual: Vec<Vec<f64>> = columns.iter().map(|(_, col)| col.clone()).collect();
    for _ in 0..want {
        let mut best = None;
        let mut best_norm2 = 0.0;
        for (i, r) in residual.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let n2: f64 = r.iter().map(|v| v * v).sum();
            if n2 > best_norm2 {
                best_norm2 = n2;
                best = Some(i);
            }
        }
        let Some(pick) = best else { break };
        if best_norm2 == 0.0 {
            break;
        }
        chosen.push(pick);
        let pivot = residual[pick].clone();
        for (i, r) in residual.iter_mut().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let dot: f64 = r.iter().zip(&pivot).map(|(a, b)| a * b).sum();
            let f = dot / best_norm2;
            for (rv, pv) in r.iter_mut().zip(&pivot) {
                *rv -= f * pv;
            }
        }
    }

    if chosen.len() == want && want >= 2 && want <= EXCHANGE_MAX_COHORT {
        // Pairwise inner products of every candidate column, so each swap
        // evaluation reduces to a small Gram submatrix decomposition.
        let n = columns.len();
        let mut gram = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let dot: f64 = columns[i].1.iter().zip(&columns[j].1).map(|(a, b)| a * b).sum();
                gram.set(i, j, dot);
                gram.set(j, i, dot);
            }
        }
        let mut current = subset_rcond(&gram, &chosen)?;
        for _ in 0..EXCHANGE_PASSES {
            // Stop once the caller's threshold is cleared with margin; the
            // authoritative check re-measures the assembled matrix.
            if current > threshold * 1.5 {
                break;
            }
            let mut best: Option<(usize, usize, f64)> = None;
            for slot in 0..chosen.len() {
                let mut trial = chosen.clone();
                for cand in 0..n {
                    if chosen.contains(&cand) {
                        continue;
                    }
                    trial[slot] = cand;
                    let rc = subset_rcond(&gram, &trial)?;
                    let bar = best.map_or(current * EXCHANGE_GAIN, |(_, _, b)| b);
                    if rc > bar {
                        best = Some((slot, cand, rc));
                    }
                }
                trial[slot] = chosen[slot];
            }
            let Some((slot, cand, rc)) = best else { break };
            chosen[slot] = cand;
            current = rc;
        }
    }

    let mut cs: Vec<f64> = chosen.into_iter().map(|i| columns[i].0).collect();
    cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(cs)
}

fn distinct_positive(cs: &[f64]) -> bool {
    if cs.iter().any(|&c| !(c > 0.0)) {
        return false;
    }
    let mut sorted = cs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.windows(2).all(|w| w[0] != w[1])
}

/// Build one fishing model per client, with constants chosen so the
/// disaggregation coefficient matrix is well-conditioned.
///
/// Constant policy: first the ladder `C^u = 0.5 + 0.1 * slot`, then up to
/// `max_redraws` uniform redraws from (0.1, 2), then the grid-probe greedy
/// fallback. Every kit's embedding and logits are verified data-agnostic by
/// probing with two distinct random inputs.
pub fn build_fishing_models(
    base: &Model,
    client_ids: &[u32],
    options: &AttackOptions,
) -> Result<Vec<FishingKit>> {
    let cohort = client_ids.len();
    if cohort == 0 {
        return Err(Error::Protocol("no clients to build fishing models for".into()));
    }
    {
        let mut sorted = client_ids.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol(format!(
                "client ids must be distinct, got {client_ids:?}"
            )));
        }
    }
    let m = base.embedding_dim();
    if cohort > m + 1 {
        return Err(Error::Config(format!(
            "cohort size {cohort} exceeds embedding dimension + 1 = {}; \
             per-client gradients would not be uniquely recoverable",
            m + 1
        )));
    }
    let layer = designated_layer(base)?;
    let mut work = base.clone();
    let zero_probe = Tensor::zeros(batch_one_shape(base));

    let mut last_rcond = 0.0;
    let mut accepted: Option<Vec<f64>> = None;
    for attempt in 0..=(options.max_redraws + 1) {
        let cs: Vec<f64> = if attempt == 0 {
            (0..cohort).map(|slot| 0.5 + 0.1 * slot as f64).collect()
        } else if attempt <= options.max_redraws {
            let mut rng = seeding::stream(options.seed, "fishing-redraw", attempt as u64);
            (0..cohort).map(|_| rng.gen_range(0.1..2.0)).collect()
        } else {
            greedy_constants(
                &mut work,
                layer,
                &zero_probe,
                cohort,
                options.condition_threshold,
            )?
        };
        if cs.len() != cohort || !distinct_positive(&cs) {
            continue;
        }
        let mut embeddings = Vec::with_capacity(cohort);
        for &c in &cs {
            embeddings.push(fishing_embedding(&mut work, layer, c, &zero_probe)?);
        }
        let rc = rcond_estimate(&coefficient_matrix(&embeddings)?)?;
        last_rcond = rc;
        if rc > options.condition_threshold {
            accepted = Some(cs);
            break;
        }
    }
    let Some(cs) = accepted else {
        return Err(Error::Conditioning {
            rcond: last_rcond,
            threshold: options.condition_threshold,
        });
    };

    let mut kits = Vec::with_capacity(cohort);
    for (slot, (&client_id, &c)) in client_ids.iter().zip(&cs).enumerate() {
        let mut model = base.clone();
        set_constant_layer(&mut model, layer, c);
        // Data-agnosticism check: two distinct random inputs must produce
        // bit-identical final-layer inputs and outputs.
        let tag = slot as u64 * 2;
        let (e1, y1) = probe_with(&model, &random_input(base, options.seed, tag))?;
        let (e2, y2) = probe_with(&model, &random_input(base, options.seed, tag + 1))?;
        if e1 != e2 || y1 != y2 {
            return Err(Error::Contract(format!(
                "fishing model for client {client_id} is not data-agnostic: \
                 two probe inputs produced different final-layer values"
            )));
        }
        kits.push(FishingKit {
            client_id,
            model,
            c_value: c,
            embedding: e1,
            logits: y1,
        });
    }
    Ok(kits)
}

/// Re-derive a kit's preset (embedding, logits) by forward passes on a
/// zeros and a ones input, verifying both match each other and the stored
/// kit values.
pub fn preset_probe(kit: &FishingKit) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = batch_one_shape(&kit.model);
    let (e0, y0) = probe_with(&kit.model, &Tensor::zeros(shape.clone()))?;
    let (e1, y1) = probe_with(&kit.model, &Tensor::full(shape, 1.0)?)?;
    if e0 != e1 || y0 != y1 {
        return Err(Error::Contract(format!(
            "fishing model for client {} is not data-agnostic: zeros and ones \
             probes disagree",
            kit.client_id
        )));
    }
    if e0 != kit.embedding || y0 != kit.logits {
        return Err(Error::Contract(format!(
            "kit for client {} stores stale preset values",
            kit.client_id
        )));
    }
    Ok((e0, y0))
}

/// The per-class linear systems tying aggregated final-layer gradients to
/// per-client bias gradients: one coefficient matrix, one right-hand-side
/// column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DisaggregationSystem {
    a: Matrix,
    rhs: Matrix,
}

impl DisaggregationSystem {
    /// `agg_weight` is the aggregated final-layer weight gradient (n x m),
    /// `agg_bias` the aggregated bias gradient (length n), `embeddings` the
    /// U preset client embeddings (length m each).
    pub fn assemble(
        agg_weight: &Matrix,
        agg_bias: &[f64],
        embeddings: &[Vec<f64>],
    ) -> Result<Self> {
        let a = coefficient_matrix(embeddings)?;
        let cohort = embeddings.len();
        let m = embeddings[0].len();
        if cohort > m + 1 {
            return Err(Error::Config(format!(
                "{cohort} clients but only {} equations per class; \
                 no unique solution",
                m + 1
            )));
        }
        if agg_weight.cols() != m {
            return Err(Error::Shape(format!(
                "aggregated weight gradient has {} columns, embeddings have length {m}",
                agg_weight.cols()
            )));
        }
        if agg_weight.rows() != agg_bias.len() {
            return Err(Error::Shape(format!(
                "weight gradient has {} rows but bias gradient has {} entries",
                agg_weight.rows(),
                agg_bias.len()
            )));
        }
        let n = agg_bias.len();
        // Column i: aggregated bias gradient of class i, then the i-th row
        // of the aggregated weight gradient.
        let mut rhs = Matrix::zeros(m + 1, n);
        for i in 0..n {
            rhs.set(0, i, agg_bias[i]);
            for j in 0..m {
                rhs.set(j + 1, i, agg_weight.get(i, j));
            }
        }
        Ok(DisaggregationSystem { a, rhs })
    }

    pub fn coefficient(&self) -> &Matrix {
        &self.a
    }

    pub fn right_hand_sides(&self) -> &Matrix {
        &self.rhs
    }

    /// Solve all classes with one factorization.
    pub fn solve(&self, condition_threshold: f64) -> Result<Disaggregation> {
        let result = lstsq(&self.a, &self.rhs, DEFAULT_RANK_TOL)?;
        if result.ill_conditioned || result.rcond <= condition_threshold {
            return Err(Error::Conditioning {
                rcond: result.rcond,
                threshold: condition_threshold,
            });
        }
        // x is U x n: row u holds client u's recovered bias gradient.
        let reconstructed = self.a.matmul(&result.x)?;
        let mut residual2 = 0.0;
        for r in 0..self.rhs.rows() {
            for c in 0..self.rhs.cols() {
                residual2 += (reconstructed.get(r, c) - self.rhs.get(r, c)).powi(2);
            }
        }
        Ok(Disaggregation {
            per_client_b_grads: result.x,
            rcond: result.rcond,
            residual_norm: residual2.sqrt(),
        })
    }
}

/// Outcome of gradient disaggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Disaggregation {
    /// U x n; row u is client u's recovered final-layer bias gradient.
    pub per_client_b_grads: Matrix,
    pub rcond: f64,
    /// Frobenius norm of the unexplained part of the aggregate; close to
    /// zero without defenses, grows with defense noise.
    pub residual_norm: f64,
}

/// Recover every client's final-layer bias gradient from the aggregated
/// final-layer gradients, using the preset embeddings as coefficients.
pub fn disaggregate(
    agg_weight: &Matrix,
    agg_bias: &[f64],
    embeddings: &[Vec<f64>],
) -> Result<Disaggregation> {
    DisaggregationSystem::assemble(agg_weight, agg_bias, embeddings)?.solve(CONDITION_THRESHOLD)
}

/// Recovered label counts for one client, with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInference {
    /// B * (softmax(logits) - b_grads), before rounding.
    pub real_counts: Vec<f64>,
    /// Nearest-integer counts, clamped to [0, B].
    pub counts: LabelCounts,
    /// Sum of real counts minus B; should be ~0, reported not repaired.
    pub count_sum_gap: f64,
}

/// Infer a client's per-class sample counts from its recovered bias
/// gradient and its preset logits. All of the client's samples share the
/// preset logits, so the per-sample softmax sum collapses to
/// `B * softmax(logits)`.
pub fn infer_labels(b_grads: &[f64], logits: &[f64], batch_size: usize) -> Result<LabelInference> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    if b_grads.len() != logits.len() {
        return Err(Error::Shape(format!(
            "bias gradient has {} classes but logits have {}",
            b_grads.len(),
            logits.len()
        )));
    }
    let b = batch_size as f64;
    let soft = softmax(logits);
    let real_counts: Vec<f64> = soft
        .iter()
        .zip(b_grads)
        .map(|(s, g)| b * (s - g))
        .collect();
    finish_inference(real_counts, batch_size)
}

fn finish_inference(real_counts: Vec<f64>, batch_size: usize) -> Result<LabelInference> {
    let b = batch_size as f64;
    let counts: Vec<u32> = real_counts
        .iter()
        .map(|&r| r.round().clamp(0.0, b) as u32)
        .collect();
    let count_sum_gap = real_counts.iter().sum::<f64>() - b;
    Ok(LabelInference {
        real_counts,
        counts: LabelCounts::new(counts),
        count_sum_gap,
    })
}

/// Largest-remainder projection of real counts onto non-negative integers
/// summing exactly to B. Offered separately because plain rounding keeps
/// failures visible; use only when a consistent total matters more.
pub fn repair_counts(real_counts: &[f64], batch_size: usize) -> LabelCounts {
    let b = batch_size as f64;
    let quotas: Vec<f64> = real_counts.iter().map(|r| r.clamp(0.0, b)).collect();
    let mut counts: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let mut total: i64 = counts.iter().map(|&c| i64::from(c)).sum();
    let target = batch_size as i64;
    while total < target {
        // Raise the entry with the largest unmet remainder.
        let (idx, _) = quotas
            .iter()
            .enumerate()
            .map(|(i, q)| (i, q - f64::from(counts[i])))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("nonempty counts");
        counts[idx] += 1;
        total += 1;
    }
    while total > target {
        // Lower the entry that most overshoots its quota.
        let (idx, _) = quotas
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[*i] > 0)
            .map(|(i, q)| (i, f64::from(counts[i]) - q))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .expect("some positive count");
        counts[idx] -= 1;
        total -= 1;
    }
    LabelCounts::new(counts)
}

/// Single-sample sign rule: a one-sample softmax cross-entropy bias
/// gradient is negative exactly at the true class and positive elsewhere.
pub fn single_sample_label(b_grad: &[f64]) -> Result<usize> {
    if b_grad.is_empty() {
        return Err(Error::Domain("empty gradient".into()));
    }
    let nonpositive: Vec<usize> = b_grad
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= 0.0)
        .map(|(i, _)| i)
        .collect();
    let argmin = b_grad
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite gradients"))
        .map(|(i, _)| i)
        .expect("nonempty");
    if nonpositive.len() != 1 || nonpositive[0] != argmin {
        return Err(Error::Domain(format!(
            "{} non-positive entries; not a single-sample softmax gradient",
            nonpositive.len()
        )));
    }
    Ok(argmin)
}

/// Count recovery from true per-sample logits: for any honest batch,
/// `lambda_i = sum_k softmax(y_k)_i - B * b_grad_i` is the exact number of
/// class-i samples.
pub fn counts_from_sample_logits(
    b_grads: &[f64],
    per_sample_logits: &Matrix,
    batch_size: usize,
) -> Result<LabelInference> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    if per_sample_logits.rows() != batch_size {
        return Err(Error::Shape(format!(
            "{} logit rows for a batch of {batch_size}",
            per_sample_logits.rows()
        )));
    }
    if per_sample_logits.cols() != b_grads.len() {
        return Err(Error::Shape(format!(
            "logits have {} classes but bias gradient has {}",
            per_sample_logits.cols(),
            b_grads.len()
        )));
    }
    let n = b_grads.len();
    let b = batch_size as f64;
    let mut soft_sum = vec![0.0; n];
    for k in 0..batch_size {
        let s = softmax(per_sample_logits.row(k));
        for (acc, v) in soft_sum.iter_mut().zip(&s) {
            *acc += v;
        }
    }
    let real_counts: Vec<f64> = soft_sum
        .iter()
        .zip(b_grads)
        .map(|(s, g)| s - b * g)
        .collect();
    finish_inference(real_counts, batch_size)
}

/// One client's inferred labels and the diagnostics that came with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub client_id: u32,
    /// Recovered final-layer bias gradient (length n).
    pub recovered_b_grads: Vec<f64>,
    pub real_counts: Vec<f64>,
    pub counts: LabelCounts,
    pub count_sum_gap: f64,
    /// Shared across the cohort: conditioning of the disaggregation system
    /// and the unexplained-aggregate norm.
    pub rcond: f64,
    pub residual_norm: f64,
}

/// Run disaggregation + label inference against a finished round. Consumes
/// only what the protocol actually reveals to the server: the aggregated
/// gradients, the round metadata, and the server's own fishing kits.
pub fn run_attack(record: &RoundRecord, kits: &[FishingKit]) -> Result<Vec<AttackResult>> {
    let ModelDistribution::PerClient(distributed) = &record.distributed else {
        return Err(Error::Contract(
            "round was not produced with per-client fishing models".into(),
        ));
    };
    if kits.len() != record.selected.len() {
        return Err(Error::Contract(format!(
            "{} kits for a cohort of {}",
            kits.len(),
            record.selected.len()
        )));
    }
    // Match kits to cohort slots by client id, then verify the round really
    // distributed these exact models.
    let mut ordered: Vec<&FishingKit> = Vec::with_capacity(kits.len());
    for &id in &record.selected {
        let Some(kit) = kits.iter().find(|k| k.client_id == id) else {
            return Err(Error::Contract(format!("no fishing kit for client {id}")));
        };
        ordered.push(kit);
    }
    for (slot, kit) in ordered.iter().enumerate() {
        if distributed[slot].fingerprint() != kit.model.fingerprint() {
            return Err(Error::Contract(format!(
                "distributed model for client {} does not match its fishing kit",
                kit.client_id
            )));
        }
    }

    let agg_weight = record.aggregated.fcl_weight()?;
    let agg_bias = record.aggregated.fcl_bias()?;
    let embeddings: Vec<Vec<f64>> = ordered.iter().map(|k| k.embedding.clone()).collect();
    let dis = disaggregate(&agg_weight, agg_bias, &embeddings)?;

    let mut results = Vec::with_capacity(ordered.len());
    for (slot, kit) in ordered.iter().enumerate() {
        let b_grads = dis.per_client_b_grads.row(slot).to_vec();
        let inference = infer_labels(&b_grads, &kit.logits, record.batch_size)?;
        results.push(AttackResult {
            client_id: kit.client_id,
            recovered_b_grads: b_grads,
            real_counts: inference.real_counts,
            counts: inference.counts,
            count_sum_gap: inference.count_sum_gap,
            rcond: dis.rcond,
            residual_norm: dis.residual_norm,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::DefenseConfig;
    use crate::federation::{run_round, ClientDataset, RoundConfig};
    use crate::metrics;
    use crate::nn::backward;
    use crate::secure_agg::SaMode;

    fn small_fcn3() -> Model {
        let mut rng = seeding::stream(404, "attack-fcn", 0);
        Model::fcn3(6, (8, 5), 4, &mut rng).unwrap()
    }

    fn small_cnn() -> Model {
        let mut rng = seeding::stream(404, "attack-cnn", 0);
        Model::cnn_bn((1, 6, 6), 4, 3, 16, 3, &mut rng).unwrap()
    }

    fn dataset(client_id: u32, count: usize, model: &Model) -> ClientDataset {
        let mut rng = seeding::stream(9000 + u64::from(client_id), "attack-data", 0);
        let dim: usize = model.input_shape().iter().product();
        let data: Vec<f64> = (0..count * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..count)
            .map(|_| rng.gen_range(0..model.num_classes()))
            .collect();
        let mut shape = vec![count];
        shape.extend_from_slice(model.input_shape());
        ClientDataset::new(
            client_id,
            Tensor::new(shape, data).unwrap(),
            labels,
            model.num_classes(),
        )
        .unwrap()
    }

    #[test]
    fn kits_differ_from_base_only_in_the_designated_layer() {
        let base = small_cnn();
        let kits =
            build_fishing_models(&base, &[0, 1], &AttackOptions::default()).unwrap();
        // Batch-norm with 4 features: gamma and beta, 8 parameters.
        for kit in &kits {
            let (nomp, _) = metrics::nomp_ratio(&base, &kit.model).unwrap();
            assert_eq!(nomp, 8, "2d parameters for d = 4 batch-norm features");
        }
        assert_ne!(kits[0].embedding, kits[1].embedding);
        assert_ne!(kits[0].logits, kits[1].logits);
    }

    #[test]
    fn first_fc_fallback_touches_exactly_that_layer() {
        let base = small_fcn3();
        let kits = build_fishing_models(&base, &[3], &AttackOptions::default()).unwrap();
        let (nomp, _) = metrics::nomp_ratio(&base, &kits[0].model).unwrap();
        assert_eq!(nomp, 6 * 8 + 8, "first FC weight and bias rewritten");
    }

    #[test]
    fn probes_are_input_independent_and_match_fcl_algebra() {
        let base = small_cnn();
        let kits = build_fishing_models(&base, &[5, 9], &AttackOptions::default()).unwrap();
        for kit in &kits {
            let (e, y) = preset_probe(kit).unwrap();
            assert_eq!(e, kit.embedding);
            assert_eq!(y, kit.logits);
            // y must equal W e + b for the kit's final layer.
            let w = kit.model.fcl_weight();
            let b = kit.model.fcl_bias();
            for i in 0..y.len() {
                let mut expect = b[i];
                for j in 0..e.len() {
                    expect += w.get(i, j) * e[j];
                }
                assert!((y[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsupported_architecture_is_rejected() {
        let mut rng = seeding::stream(2, "arch", 0);
        let model = Model::new(
            vec![
                LayerSpec::Relu,
                LayerSpec::FullyConnected { input: 4, output: 2 },
            ],
            vec![4],
            &mut rng,
        )
        .unwrap();
        let err = build_fishing_models(&model, &[0], &AttackOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Architecture(_)), "got {err:?}");
    }

    #[test]
    fn cohort_larger_than_embedding_plus_one_is_rejected() {
        let base = small_fcn3(); // embedding dimension 5
        let ids: Vec<u32> = (0..7).collect();
        let err = build_fishing_models(&base, &ids, &AttackOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn single_client_system_recovers_the_aggregate() {
        let e = vec![0.4, -0.2, 0.9];
        let agg_b = vec![0.3, -0.1];
        // agg_weight row i = agg_b[i] * e.
        let mut agg_w = Matrix::zeros(2, 3);
        for i in 0..2 {
            for j in 0..3 {
                agg_w.set(i, j, agg_b[i] * e[j]);
            }
        }
        let dis = disaggregate(&agg_w, &agg_b, &[e]).unwrap();
        for i in 0..2 {
            assert!((dis.per_client_b_grads.get(0, i) - agg_b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_embeddings_decouple_the_system() {
        // Two clients with unit-vector embeddings: the aggregate weight row
        // [0.1, 0.2] splits directly into each client's bias gradient.
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let mut agg_w = Matrix::zeros(1, 2);
        agg_w.set(0, 0, 0.1);
        agg_w.set(0, 1, 0.2);
        let dis = disaggregate(&agg_w, &[0.3], &[e1, e2]).unwrap();
        assert!((dis.per_client_b_grads.get(0, 0) - 0.1).abs() < 1e-12);
        assert!((dis.per_client_b_grads.get(1, 0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn plant_and_recover_random_cohort() {
        // Plant per-client bias gradients and random independent
        // embeddings, form the aggregates the protocol would produce, and
        // recover the plants.
        let (cohort, m, n) = (4usize, 8usize, 5usize);
        let mut rng = seeding::stream(77, "plant", 0);
        let embeddings: Vec<Vec<f64>> = (0..cohort)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let planted: Vec<Vec<f64>> = (0..cohort)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut agg_b = vec![0.0; n];
        let mut agg_w = Matrix::zeros(n, m);
        for u in 0..cohort {
            for i in 0..n {
                agg_b[i] += planted[u][i];
                for j in 0..m {
                    agg_w.set(i, j, agg_w.get(i, j) + planted[u][i] * embeddings[u][j]);
                }
            }
        }
        let dis = disaggregate(&agg_w, &agg_b, &embeddings).unwrap();
        for u in 0..cohort {
            for i in 0..n {
                assert!(
                    (dis.per_client_b_grads.get(u, i) - planted[u][i]).abs() < 1e-8,
                    "client {u} class {i}"
                );
            }
        }
        assert!(dis.residual_norm < 1e-9);
    }

    #[test]
    fn duplicate_embeddings_fail_conditioning() {
        let e = vec![0.5, 0.25, -0.7];
        let agg_w = Matrix::zeros(2, 3);
        let err = disaggregate(&agg_w, &[0.0, 0.0], &[e.clone(), e]).unwrap_err();
        assert!(matches!(err, Error::Conditioning { .. }), "got {err:?}");
    }

    #[test]
    fn uniform_logits_inference_example() {
        // Zero logits over two classes give softmax 1/2; B = 4 with bias
        // gradient [-0.25, 0.25] means counts 4*(0.5+0.25)=3 and
        // 4*(0.5-0.25)=1.
        let inf = infer_labels(&[-0.25, 0.25], &[0.0, 0.0], 4).unwrap();
        assert!((inf.real_counts[0] - 3.0).abs() < 1e-12);
        assert!((inf.real_counts[1] - 1.0).abs() < 1e-12);
        assert_eq!(inf.counts.counts(), &[3, 1]);
        assert!(inf.count_sum_gap.abs() < 1e-12);
    }

    #[test]
    fn gradient_equal_to_softmax_means_no_samples() {
        let logits = vec![0.3, -0.4, 1.1];
        let soft = softmax(&logits);
        let inf = infer_labels(&soft, &logits, 8).unwrap();
        assert_eq!(inf.counts.counts(), &[0, 0, 0]);
    }

    #[test]
    fn end_to_end_known_batch_on_a_fishing_model() {
        let base = small_fcn3();
        let kits = build_fishing_models(&base, &[0], &AttackOptions::default()).unwrap();
        let kit = &kits[0];
        let ds = dataset(0, 16, &base);
        let batch = ds
            .draw_batch(10, &mut seeding::stream(31, "e2e", 0))
            .unwrap();
        let trace = forward(&kit.model, batch.inputs(), Mode::Train).unwrap();
        let grads = backward(&kit.model, &trace, batch.labels()).unwrap();
        let inf = infer_labels(grads.fcl_bias().unwrap(), &kit.logits, 10).unwrap();
        assert_eq!(inf.counts, *batch.true_counts());
        for (r, t) in inf.real_counts.iter().zip(batch.true_counts().counts()) {
            assert!((r - f64::from(*t)).abs() < 1e-9);
        }
    }

    #[test]
    fn repair_redistributes_to_the_batch_total() {
        let repaired = repair_counts(&[2.7, 0.4, -0.3, 1.4], 4);
        assert_eq!(repaired.total(), 4);
        assert_eq!(repaired.counts(), &[3, 0, 0, 1]);
        let excess = repair_counts(&[3.0, 3.0], 4);
        assert_eq!(excess.total(), 4);
    }

    #[test]
    fn sign_rule_hand_examples() {
        assert_eq!(single_sample_label(&[-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap(), 0);
        assert_eq!(single_sample_label(&[0.1, -0.9, 0.8]).unwrap(), 1);
        assert!(single_sample_label(&[0.1, -0.2, -0.3]).is_err());
        assert!(single_sample_label(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn sign_rule_recovers_the_label_across_random_models() {
        let mut hits = 0;
        let trials = 1000;
        for t in 0..trials {
            let mut rng = seeding::stream(606, "sign-rule", t);
            let model = Model::fcn3(5, (7, 6), 4, &mut rng).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let label = rng.gen_range(0..4usize);
            let input = Tensor::new(vec![1, 5], x).unwrap();
            let trace = forward(&model, &input, Mode::Train).unwrap();
            let grads = backward(&model, &trace, &[label]).unwrap();
            if single_sample_label(grads.fcl_bias().unwrap()).unwrap() == label {
                hits += 1;
            }
        }
        assert_eq!(hits, trials);
    }

    #[test]
    fn per_sample_logit_rule_is_exact_on_honest_batches() {
        for t in 0..20 {
            let mut rng = seeding::stream(607, "logit-counts", t);
            let model = Model::fcn3(6, (9, 7), 5, &mut rng).unwrap();
            let bsz = rng.gen_range(1..=32usize);
            let data: Vec<f64> = (0..bsz * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..bsz).map(|_| rng.gen_range(0..5)).collect();
            let input = Tensor::new(vec![bsz, 6], data).unwrap();
            let trace = forward(&model, &input, Mode::Train).unwrap();
            let grads = backward(&model, &trace, &labels).unwrap();
            let inf =
                counts_from_sample_logits(grads.fcl_bias().unwrap(), &trace.logits(), bsz).unwrap();
            let truth = LabelCounts::from_labels(&labels, 5).unwrap();
            assert_eq!(inf.counts, truth, "trial {t}");
        }
    }

    #[test]
    fn same_class_batch_concentrates_the_count() {
        let mut rng = seeding::stream(608, "logit-counts-same", 0);
        let model = Model::fcn3(6, (9, 7), 5, &mut rng).unwrap();
        let bsz = 12;
        let data: Vec<f64> = (0..bsz * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = vec![3usize; bsz];
        let input = Tensor::new(vec![bsz, 6], data).unwrap();
        let trace = forward(&model, &input, Mode::Train).unwrap();
        let grads = backward(&model, &trace, &labels).unwrap();
        let inf = counts_from_sample_logits(grads.fcl_bias().unwrap(), &trace.logits(), bsz).unwrap();
        assert_eq!(inf.counts.counts(), &[0, 0, 0, 12, 0]);
    }

    fn attack_round(
        base: &Model,
        cohort_ids: &[u32],
        batch_size: usize,
    ) -> (RoundRecord, Vec<FishingKit>, Vec<LabelCounts>) {
        let kits = build_fishing_models(base, cohort_ids, &AttackOptions::default()).unwrap();
        let cohort: Vec<ClientDataset> = cohort_ids
            .iter()
            .map(|&id| dataset(id, batch_size.max(8) * 2, base))
            .collect();
        let dist = ModelDistribution::PerClient(kits.iter().map(|k| k.model.clone()).collect());
        let outcome = run_round(
            base,
            &dist,
            &cohort,
            &RoundConfig {
                round: 0,
                batch_size,
                learning_rate: 0.1,
                sa_mode: SaMode::Ideal,
                defense: DefenseConfig::None,
                seed: 2024,
            },
        )
        .unwrap();
        (
            outcome.record,
            kits,
            outcome.true_counts.oracle().clone(),
        )
    }

    #[test]
    fn full_attack_recovers_every_clients_counts() {
        let base = small_fcn3();
        let (record, kits, truth) = attack_round(&base, &[2, 7, 11], 8);
        let results = run_attack(&record, &kits).unwrap();
        assert_eq!(results.len(), 3);
        for (slot, res) in results.iter().enumerate() {
            assert_eq!(res.client_id, record.selected[slot]);
            assert_eq!(res.counts, truth[slot], "client slot {slot}");
            // Recovered bias gradients match the withheld truth.
            let true_b = record.per_client.oracle()[slot].fcl_bias().unwrap();
            for (got, want) in res.recovered_b_grads.iter().zip(true_b) {
                assert!((got - want).abs() < 1e-8);
            }
            assert!(res.count_sum_gap.abs() < 1e-6);
        }
    }

    #[test]
    fn full_attack_works_on_the_batchnorm_architecture() {
        let base = small_cnn();
        let (record, kits, truth) = attack_round(&base, &[1, 4], 6);
        let results = run_attack(&record, &kits).unwrap();
        for (slot, res) in results.iter().enumerate() {
            assert_eq!(res.counts, truth[slot]);
        }
    }

    #[test]
    fn kit_order_does_not_matter() {
        let base = small_fcn3();
        let (record, kits, truth) = attack_round(&base, &[3, 8], 5);
        let reversed: Vec<FishingKit> = kits.iter().rev().cloned().collect();
        let results = run_attack(&record, &reversed).unwrap();
        for (slot, res) in results.iter().enumerate() {
            assert_eq!(res.client_id, record.selected[slot]);
            assert_eq!(res.counts, truth[slot]);
        }
    }

    #[test]
    fn attack_requires_a_per_client_round() {
        let base = small_fcn3();
        let cohort = vec![dataset(0, 16, &base)];
        let outcome = run_round(
            &base,
            &ModelDistribution::Broadcast(base.clone()),
            &cohort,
            &RoundConfig {
                round: 0,
                batch_size: 4,
                learning_rate: 0.1,
                sa_mode: SaMode::Ideal,
                defense: DefenseConfig::None,
                seed: 3,
            },
        )
        .unwrap();
        let kits = build_fishing_models(&base, &[0], &AttackOptions::default()).unwrap();
        let err = run_attack(&outcome.record, &kits).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn attack_rejects_kits_for_models_that_were_not_distributed() {
        let base = small_fcn3();
        let (record, _, _) = attack_round(&base, &[2, 7], 4);
        // Kits rebuilt with a different seed choose different constants.
        let other = build_fishing_models(
            &base,
            &[2, 7],
            &AttackOptions {
                seed: 999,
                ..AttackOptions::default()
            },
        )
        .unwrap();
        // If the constants happen to coincide the models are identical and
        // the check passes legitimately; assert only on actual mismatch.
        if other
            .iter()
            .zip(&record.selected)
            .any(|(k, _)| {
                let ModelDistribution::PerClient(d) = &record.distributed else {
                    unreachable!()
                };
                d.iter().all(|m| m.fingerprint() != k.model.fingerprint())
            })
        {
            let err = run_attack(&record, &other).unwrap_err();
            assert!(matches!(err, Error::Contract(_)), "got {err:?}");
        }
    }
}

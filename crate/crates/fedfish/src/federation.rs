//! One-step federated SGD orchestration: client sampling, local
//! batch-averaged gradient computation, defended + encoded uploads, and the
//! server-side aggregate update.
//!
//! The server in this protocol only ever sees `MaskedUpdate` payloads and
//! their decoded sum. Per-client gradients and batch label counts are still
//! recorded for oracle checks and metrics, but they live behind [`Withheld`]
//! so every access point is explicit and greppable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, GradientSet, Mode, Model};
use crate::secure_agg::{self, MaskPlan, SaMode};
use crate::seeding;
use crate::tensor::Tensor;
use crate::defenses::{self, DefenseConfig};

/// Per-class occurrence counts for one batch (or a sum of batches).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    counts: Vec<u32>,
}

impl LabelCounts {
    pub fn new(counts: Vec<u32>) -> Self {
        LabelCounts { counts }
    }

    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0u32; num_classes];
        for &c in labels {
            if c >= num_classes {
                return Err(Error::Domain(format!(
                    "label {c} out of range for {num_classes} classes"
                )));
            }
            counts[c] += 1;
        }
        Ok(LabelCounts { counts })
    }

    /// Classwise sum across several count vectors (the "all clients" view).
    pub fn sum_across(sets: &[LabelCounts]) -> Result<LabelCounts> {
        let Some(first) = sets.first() else {
            return Err(Error::Domain("no count vectors to sum".into()));
        };
        let n = first.len();
        let mut counts = vec![0u32; n];
        for set in sets {
            if set.len() != n {
                return Err(Error::Shape(format!(
                    "count vectors of length {} and {n} cannot be summed",
                    set.len()
                )));
            }
            for (acc, c) in counts.iter_mut().zip(&set.counts) {
                *acc += c;
            }
        }
        Ok(LabelCounts { counts })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// One client's private dataset: a stack of samples and their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    client_id: u32,
    samples: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl ClientDataset {
    /// `samples` must be a stack: shape `[count, ...per-sample shape]` with
    /// `count == labels.len()`, and every label in `[0, num_classes)`.
    pub fn new(
        client_id: u32,
        samples: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if samples.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "sample stack needs rank >= 2 (count plus sample dims), got {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(ClientDataset {
            client_id,
            samples,
            labels,
            num_classes,
        })
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    /// Draw `batch_size` distinct samples uniformly without replacement.
    pub fn draw_batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<ClientBatch> {
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if batch_size > self.len() {
            return Err(Error::Domain(format!(
                "batch size {batch_size} exceeds dataset size {}",
                self.len()
            )));
        }
        let picks = rand::seq::index::sample(rng, self.len(), batch_size);
        let stride: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(batch_size * stride);
        let mut labels = Vec::with_capacity(batch_size);
        for idx in picks.iter() {
            data.extend_from_slice(&self.samples.data()[idx * stride..(idx + 1) * stride]);
            labels.push(self.labels[idx]);
        }
        let mut shape = vec![batch_size];
        shape.extend_from_slice(self.sample_shape());
        ClientBatch::new(Tensor::new(shape, data)?, labels, self.num_classes)
    }
}

/// One training batch plus its ground-truth label counts. The counts exist
/// purely for evaluating attacks; honest protocol code never reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientBatch {
    inputs: Tensor,
    labels: Vec<usize>,
    true_counts: LabelCounts,
}

impl ClientBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "batch tensor {:?} does not stack {} labeled samples",
                inputs.shape(),
                labels.len()
            )));
        }
        let true_counts = LabelCounts::from_labels(&labels, num_classes)?;
        Ok(ClientBatch {
            inputs,
            labels,
            true_counts,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn true_counts(&self) -> &LabelCounts {
        &self.true_counts
    }
}

/// Wrapper for values the secure-aggregation contract hides from the
/// server. Production code paths must not call [`Withheld::oracle`]; tests
/// and evaluation metrics do, which makes every such access searchable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Withheld<T>(T);

impl<T> Withheld<T> {
    pub fn new(value: T) -> Self {
        Withheld(value)
    }

    /// Ground-truth access for evaluation and oracle checks only.
    pub fn oracle(&self) -> &T {
        &self.0
    }
}

/// What each selected client receives at the start of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelDistribution {
    /// Honest server: every client gets the same global model.
    Broadcast(Model),
    /// Malicious server: client slot `i` gets `models[i]`.
    PerClient(Vec<Model>),
}

impl ModelDistribution {
    pub fn model_for(&self, slot: usize) -> &Model {
        match self {
            ModelDistribution::Broadcast(m) => m,
            ModelDistribution::PerClient(ms) => &ms[slot],
        }
    }

    pub fn is_per_client(&self) -> bool {
        matches!(self, ModelDistribution::PerClient(_))
    }
}

/// Knobs for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub round: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sa_mode: SaMode,
    pub defense: DefenseConfig,
    /// Round seed; batch draws, defense noise, and mask streams all derive
    /// from it, so a (seed, config) pair fixes the round bit-for-bit.
    pub seed: u64,
}

/// Complete account of one round: which clients participated, what they
/// were sent, what the server decoded, and (withheld) what each client
/// actually computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<u32>,
    pub batch_size: usize,
    pub distributed: ModelDistribution,
    /// Defended per-client gradient sets, as encoded — never visible to the
    /// server through the protocol; retained for oracle checks.
    pub per_client: Withheld<Vec<GradientSet>>,
    /// The only gradient information the protocol actually reveals.
    pub aggregated: GradientSet,
}

/// A round's record plus the pieces that live outside the server's view.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    pub true_counts: Withheld<Vec<LabelCounts>>,
    pub updated_model: Model,
}

/// Choose `cohort_size` distinct client ids uniformly without replacement.
pub fn sample_round_clients<R: Rng>(
    total_clients: u32,
    cohort_size: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if cohort_size == 0 {
        return Err(Error::Domain("cohort size must be at least 1".into()));
    }
    if cohort_size > total_clients as usize {
        return Err(Error::Domain(format!(
            "cannot select {cohort_size} clients from a population of {total_clients}"
        )));
    }
    let mut ids: Vec<u32> = rand::seq::index::sample(rng, total_clients as usize, cohort_size)
        .iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// One local FedSGD step: a forward pass in train mode and a backward pass,
/// yielding batch-averaged gradients. Pure — the model is never mutated.
pub fn client_local_step(model: &Model, batch: &ClientBatch) -> Result<GradientSet> {
    let trace = nn::forward(model, batch.inputs(), Mode::Train)?;
    nn::backward(model, &trace, batch.labels())
}

/// Global update `W <- W - eta * agg / U`, elementwise over trainable
/// parameters. Returns the updated model; the input is untouched.
pub fn server_update(
    model: &Model,
    aggregated: &GradientSet,
    learning_rate: f64,
    cohort_size: usize,
) -> Result<Model> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::Domain(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    if cohort_size == 0 {
        return Err(Error::Domain("cohort size must be at least 1".into()));
    }
    let weights = model.flatten_params();
    let grads = aggregated.flatten();
    if weights.len() != grads.len() {
        return Err(Error::Shape(format!(
            "model has {} trainable parameters, aggregate has {}",
            weights.len(),
            grads.len()
        )));
    }
    let u = cohort_size as f64;
    let stepped: Vec<f64> = weights
        .iter()
        .zip(&grads)
        .map(|(w, g)| w - learning_rate * g / u)
        .collect();
    let mut updated = model.clone();
    updated.set_params_from_flat(&stepped)?;
    Ok(updated)
}

fn same_architecture(a: &Model, b: &Model) -> bool {
    a.specs() == b.specs() && a.input_shape() == b.input_shape()
}

/// Run one full round over an already-selected cohort (slot order = cohort
/// order): distribute models, draw each client's batch, compute + defend +
/// encode gradients, decode the aggregate, and step the global model.
pub fn run_round(
    base_model: &Model,
    distribution: &ModelDistribution,
    cohort: &[ClientDataset],
    config: &RoundConfig,
) -> Result<RoundOutcome> {
    config.defense.validate()?;
    if cohort.is_empty() {
        return Err(Error::Protocol("round needs at least one client".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let ids: Vec<u32> = cohort.iter().map(|c| c.client_id()).collect();
    {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol(format!(
                "cohort client ids must be distinct, got {ids:?}"
            )));
        }
    }
    match distribution {
        ModelDistribution::Broadcast(m) => {
            if !same_architecture(m, base_model) {
                return Err(Error::Architecture(
                    "broadcast model does not match the base architecture".into(),
                ));
            }
        }
        ModelDistribution::PerClient(models) => {
            if models.len() != cohort.len() {
                return Err(Error::Protocol(format!(
                    "{} per-client models for a cohort of {}",
                    models.len(),
                    cohort.len()
                )));
            }
            if let Some(bad) = models.iter().position(|m| !same_architecture(m, base_model)) {
                return Err(Error::Architecture(format!(
                    "per-client model in slot {bad} does not match the base architecture"
                )));
            }
            // Disaggregating U clients from m embedding rows plus the bias
            // row only has a unique solution when U <= m + 1.
            let m = base_model.embedding_dim();
            if cohort.len() > m + 1 {
                return Err(Error::Config(format!(
                    "cohort size {} exceeds embedding dimension + 1 = {}; \
                     per-client gradients would not be uniquely recoverable",
                    cohort.len(),
                    m + 1
                )));
            }
        }
    }

    let plan = MaskPlan::new(&ids, seeding::derive_seed(config.seed, "mask-plan", config.round))?;
    let mut per_client = Vec::with_capacity(cohort.len());
    let mut true_counts = Vec::with_capacity(cohort.len());
    let mut updates = Vec::with_capacity(cohort.len());
    for (slot, client) in cohort.iter().enumerate() {
        let model = distribution.model_for(slot);
        let mut batch_rng = seeding::stream(config.seed, "client-batch", u64::from(client.client_id()));
        let batch = client.draw_batch(config.batch_size, &mut batch_rng)?;
        let grads = client_local_step(model, &batch)?;
        let mut noise_rng =
            seeding::stream(config.seed, "defense-noise", u64::from(client.client_id()));
        let defended = defenses::apply(&grads, &config.defense, &mut noise_rng)?;
        updates.push(secure_agg::encode(
            &defended,
            &plan,
            client.client_id(),
            config.sa_mode,
        )?);
        per_client.push(defended);
        true_counts.push(batch.true_counts().clone());
    }

    let aggregated =
        secure_agg::aggregate_decode(&updates, &plan, &GradientSet::zeros_like(base_model))?;
    let updated_model = server_update(base_model, &aggregated, config.learning_rate, cohort.len())?;

    Ok(RoundOutcome {
        record: RoundRecord {
            round: config.round,
            selected: ids,
            batch_size: config.batch_size,
            distributed: distribution.clone(),
            per_client: Withheld::new(per_client),
            aggregated,
        },
        true_counts: Withheld::new(true_counts),
        updated_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn dataset(client_id: u32, count: usize, dim: usize, num_classes: usize) -> ClientDataset {
        let mut rng = seeding::stream(1000 + u64::from(client_id), "fixture-data", 0);
        let data: Vec<f64> = (0..count * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..count).map(|_| rng.gen_range(0..num_classes)).collect();
        ClientDataset::new(
            client_id,
            Tensor::new(vec![count, dim], data).unwrap(),
            labels,
            num_classes,
        )
        .unwrap()
    }

    fn small_model() -> Model {
        let mut rng = seeding::stream(55, "fed-test-model", 0);
        Model::fcn3(6, (8, 5), 4, &mut rng).unwrap()
    }

    fn plain_config(seed: u64) -> RoundConfig {
        RoundConfig {
            round: 0,
            batch_size: 4,
            learning_rate: 0.1,
            sa_mode: SaMode::Ideal,
            defense: DefenseConfig::None,
            seed,
        }
    }

    #[test]
    fn label_counts_track_occurrences() {
        let counts = LabelCounts::from_labels(&[0, 2, 2, 1, 2], 4).unwrap();
        assert_eq!(counts.counts(), &[1, 1, 3, 0]);
        assert_eq!(counts.total(), 5);
        assert!(LabelCounts::from_labels(&[4], 4).is_err());
        let all = LabelCounts::sum_across(&[
            LabelCounts::new(vec![1, 0, 2]),
            LabelCounts::new(vec![0, 3, 1]),
        ])
        .unwrap();
        assert_eq!(all.counts(), &[1, 3, 3]);
    }

    #[test]
    fn forced_selection_returns_the_only_client() {
        let mut rng = seeding::stream(0, "select", 0);
        assert_eq!(sample_round_clients(1, 1, &mut rng).unwrap(), vec![0]);
        assert!(sample_round_clients(3, 5, &mut rng).is_err());
        assert!(sample_round_clients(3, 0, &mut rng).is_err());
    }

    #[test]
    fn selection_is_deterministic_per_seed() {
        let a = sample_round_clients(100, 5, &mut seeding::stream(9, "sel", 1)).unwrap();
        let b = sample_round_clients(100, 5, &mut seeding::stream(9, "sel", 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 5, "ids must be distinct");
    }

    #[test]
    fn selection_frequencies_are_uniform() {
        // 1e4 draws of 3 from 10: each id appears with probability 0.3;
        // a 5-sigma binomial band around that is |f - 0.3| < 5 *
        // sqrt(0.3 * 0.7 / 1e4).
        let draws = 10_000;
        let mut hits = [0u32; 10];
        for t in 0..draws {
            let ids =
                sample_round_clients(10, 3, &mut seeding::stream(31, "freq", t as u64)).unwrap();
            for id in ids {
                hits[id as usize] += 1;
            }
        }
        let band = 5.0 * (0.3 * 0.7 / draws as f64).sqrt();
        for (id, h) in hits.iter().enumerate() {
            let freq = f64::from(*h) / draws as f64;
            assert!(
                (freq - 0.3).abs() < band,
                "client {id} frequency {freq} outside 5-sigma band {band}"
            );
        }
    }

    #[test]
    fn identical_samples_average_to_the_single_sample_gradient() {
        let model = small_model();
        let mut rng = seeding::stream(3, "dup-batch", 0);
        let sample: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut stacked = Vec::new();
        for _ in 0..4 {
            stacked.extend_from_slice(&sample);
        }
        let single = ClientBatch::new(
            Tensor::new(vec![1, 6], sample).unwrap(),
            vec![2],
            4,
        )
        .unwrap();
        let repeated = ClientBatch::new(
            Tensor::new(vec![4, 6], stacked).unwrap(),
            vec![2; 4],
            4,
        )
        .unwrap();
        let g1 = client_local_step(&model, &single).unwrap().flatten();
        let g4 = client_local_step(&model, &repeated).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g4) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn mixed_pair_batch_is_the_mean_of_its_singles() {
        let model = small_model();
        let mut rng = seeding::stream(4, "pair-batch", 0);
        let xa: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch_a =
            ClientBatch::new(Tensor::new(vec![1, 6], xa.clone()).unwrap(), vec![1], 4).unwrap();
        let batch_b =
            ClientBatch::new(Tensor::new(vec![1, 6], xb.clone()).unwrap(), vec![3], 4).unwrap();
        let mut pair_data = xa;
        pair_data.extend_from_slice(&xb);
        let batch_ab =
            ClientBatch::new(Tensor::new(vec![2, 6], pair_data).unwrap(), vec![1, 3], 4).unwrap();

        let ga = client_local_step(&model, &batch_a).unwrap().flatten();
        let gb = client_local_step(&model, &batch_b).unwrap().flatten();
        let gab = client_local_step(&model, &batch_ab).unwrap().flatten();
        for ((a, b), ab) in ga.iter().zip(&gb).zip(&gab) {
            assert!(
                (0.5 * (a + b) - ab).abs() < 1e-12,
                "batch gradient must be the mean of per-sample gradients"
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_the_model_unchanged() {
        let model = small_model();
        let agg = {
            let ds = dataset(0, 8, 6, 4);
            let batch = ds
                .draw_batch(4, &mut seeding::stream(6, "b", 0))
                .unwrap();
            client_local_step(&model, &batch).unwrap()
        };
        let updated = server_update(&model, &agg, 0.0, 3).unwrap();
        let before = model.flatten_params();
        let after = updated.flatten_params();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn cohort_scaled_aggregate_steps_by_one_gradient() {
        let model = small_model();
        let ds = dataset(0, 8, 6, 4);
        let batch = ds.draw_batch(4, &mut seeding::stream(6, "b", 1)).unwrap();
        let g = client_local_step(&model, &batch).unwrap();
        let mut agg = g.clone();
        agg.scale(4.0);
        let eta = 0.5;
        let updated = server_update(&model, &agg, eta, 4).unwrap();
        let before = model.flatten_params();
        let after = updated.flatten_params();
        let gf = g.flatten();
        for ((w0, w1), gi) in before.iter().zip(&after).zip(&gf) {
            // 4g/4 and eta = 0.5 are exact in binary floating point.
            assert_eq!((w0 - eta * gi).to_bits(), w1.to_bits());
        }
    }

    #[test]
    fn server_update_matches_scalar_oracle() {
        let model = small_model();
        let ds = dataset(1, 10, 6, 4);
        let batch = ds.draw_batch(5, &mut seeding::stream(6, "b", 2)).unwrap();
        let agg = client_local_step(&model, &batch).unwrap();
        let eta = 0.37;
        let u = 3;
        let updated = server_update(&model, &agg, eta, u).unwrap();
        let w = model.flatten_params();
        let g = agg.flatten();
        let got = updated.flatten_params();
        for i in 0..w.len() {
            let expect = w[i] - eta * g[i] / u as f64;
            assert!(
                (got[i] - expect).abs() <= 1e-15,
                "parameter {i}: {} vs {expect}",
                got[i]
            );
        }
    }

    #[test]
    fn single_client_round_aggregates_to_that_clients_gradients() {
        let model = small_model();
        let cohort = vec![dataset(7, 16, 6, 4)];
        let config = plain_config(11);
        let outcome = run_round(
            &model,
            &ModelDistribution::Broadcast(model.clone()),
            &cohort,
            &config,
        )
        .unwrap();
        let own = &outcome.record.per_client.oracle()[0];
        assert_eq!(outcome.record.aggregated.flatten(), own.flatten());
        assert_eq!(outcome.record.selected, vec![7]);
    }

    #[test]
    fn aggregate_equals_sum_of_withheld_sets() {
        let model = small_model();
        let cohort = vec![
            dataset(2, 16, 6, 4),
            dataset(5, 16, 6, 4),
            dataset(9, 16, 6, 4),
        ];
        let outcome = run_round(
            &model,
            &ModelDistribution::Broadcast(model.clone()),
            &cohort,
            &plain_config(21),
        )
        .unwrap();
        let mut sum = GradientSet::zeros_like(&model);
        for g in outcome.record.per_client.oracle() {
            sum.add_assign(g).unwrap();
        }
        let agg = outcome.record.aggregated.flatten();
        for (a, s) in agg.iter().zip(sum.flatten()) {
            assert!((a - s).abs() <= 1e-9);
        }
        // True counts each describe one batch of the configured size.
        for c in outcome.true_counts.oracle() {
            assert_eq!(c.total(), 4);
        }
    }

    #[test]
    fn rounds_are_bit_identical_given_seed_and_config() {
        let model = small_model();
        let cohort = vec![dataset(1, 16, 6, 4), dataset(3, 16, 6, 4)];
        let config = RoundConfig {
            round: 2,
            batch_size: 8,
            learning_rate: 0.05,
            sa_mode: SaMode::masked_default(),
            defense: DefenseConfig::GaussianNoise { sigma: 1e-3 },
            seed: 99,
        };
        let dist = ModelDistribution::Broadcast(model.clone());
        let a = run_round(&model, &dist, &cohort, &config).unwrap();
        let b = run_round(&model, &dist, &cohort, &config).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(
            serde_json::to_string(&a.record).unwrap(),
            serde_json::to_string(&b.record).unwrap()
        );
        assert_eq!(a.updated_model, b.updated_model);
    }

    #[test]
    fn per_client_distribution_must_cover_the_cohort() {
        let model = small_model();
        let cohort = vec![dataset(0, 8, 6, 4), dataset(1, 8, 6, 4)];
        let err = run_round(
            &model,
            &ModelDistribution::PerClient(vec![model.clone()]),
            &cohort,
            &plain_config(5),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "got {err:?}");
    }

    #[test]
    fn oversized_cohort_with_per_client_models_is_rejected() {
        // Embedding dimension is 5, so at most 6 clients are separable.
        let model = small_model();
        let cohort: Vec<ClientDataset> = (0..7).map(|i| dataset(i, 8, 6, 4)).collect();
        let models = vec![model.clone(); 7];
        let err = run_round(
            &model,
            &ModelDistribution::PerClient(models),
            &cohort,
            &plain_config(5),
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("embedding dimension"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        // The same cohort is fine for an honest broadcast.
        let cohort6: Vec<ClientDataset> = (0..6).map(|i| dataset(i, 8, 6, 4)).collect();
        run_round(
            &model,
            &ModelDistribution::PerClient(vec![model.clone(); 6]),
            &cohort6,
            &plain_config(5),
        )
        .unwrap();
    }

    #[test]
    fn batches_are_drawn_without_replacement() {
        let ds = dataset(4, 12, 6, 4);
        let batch = ds.draw_batch(12, &mut seeding::stream(2, "draw", 0)).unwrap();
        assert_eq!(batch.batch_size(), 12);
        assert_eq!(batch.true_counts().total(), 12);
        // Drawing the full dataset must produce every sample exactly once.
        let mut seen_sum: f64 = batch.inputs().data().iter().sum();
        let full_sum: f64 = ds.samples().data().iter().sum();
        assert!((seen_sum - full_sum).abs() < 1e-9);
        seen_sum = 0.0;
        let _ = seen_sum;
        assert!(ds.draw_batch(13, &mut seeding::stream(2, "draw", 1)).is_err());
        assert!(ds.draw_batch(0, &mut seeding::stream(2, "draw", 2)).is_err());
    }

    #[test]
    fn dataset_invariants_are_enforced() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(ClientDataset::new(0, t.clone(), vec![0], 2).is_err());
        assert!(ClientDataset::new(0, t.clone(), vec![0, 5], 2).is_err());
        assert!(ClientDataset::new(0, t, vec![0, 1], 2).is_ok());
    }
}

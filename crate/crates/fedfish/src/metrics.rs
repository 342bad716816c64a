//! Evaluation metrics: label-count accuracy for attack quality, and
//! parameter/gradient-level stealthiness measures (how visible a tampered
//! model or its induced gradients would be to an observer).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::LabelCounts;
use crate::nn::{GradientSet, Model};

/// Fraction of classes whose predicted count matches the truth exactly.
pub fn lnacc(pred: &LabelCounts, truth: &LabelCounts) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "count vectors of length {} and {} are not comparable",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("empty count vectors".into()));
    }
    let hits = pred
        .counts()
        .iter()
        .zip(truth.counts())
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// LnAcc over the classwise sums across all clients — "did we recover the
/// cohort-level label histogram".
pub fn lnacc_all(pred: &[LabelCounts], truth: &[LabelCounts]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted clients vs {} true clients",
            pred.len(),
            truth.len()
        )));
    }
    lnacc(
        &LabelCounts::sum_across(pred)?,
        &LabelCounts::sum_across(truth)?,
    )
}

/// Per-client LnAcc values, in cohort order.
pub fn lnacc_per_client(pred: &[LabelCounts], truth: &[LabelCounts]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted clients vs {} true clients",
            pred.len(),
            truth.len()
        )));
    }
    pred.iter().zip(truth).map(|(p, t)| lnacc(p, t)).collect()
}

/// Cosine similarity between two gradient sets, flattened.
pub fn cos_sim(a: &GradientSet, b: &GradientSet) -> Result<f64> {
    let fa = a.flatten();
    let fb = b.flatten();
    if fa.len() != fb.len() {
        return Err(Error::Shape(format!(
            "gradient sets of {} and {} parameters are not comparable",
            fa.len(),
            fb.len()
        )));
    }
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    let na: f64 = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain(
            "cosine similarity is undefined for a zero gradient vector".into(),
        ));
    }
    Ok(dot / (na * nb))
}

/// Count of trainable scalar parameters that differ between two models
/// (exact bitwise inequality), plus that count as a fraction of the total.
pub fn nomp_ratio(a: &Model, b: &Model) -> Result<(u64, f64)> {
    if a.specs() != b.specs() || a.input_shape() != b.input_shape() {
        return Err(Error::Architecture(
            "models with different architectures have no parameter correspondence".into(),
        ));
    }
    let fa = a.flatten_params();
    let fb = b.flatten_params();
    let nomp = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count() as u64;
    Ok((nomp, nomp as f64 / fa.len() as f64))
}

/// One experiment trial's evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lnacc_all: f64,
    /// Per-client count accuracy, cohort order.
    pub lnacc_target: Vec<f64>,
    pub nomp: u64,
    pub ratio: f64,
    /// Cosine similarity of attack-round vs benign-round gradients, per
    /// client; empty when no benign reference was computed.
    pub cossim_per_client: Vec<f64>,
    pub cossim_mean: Option<f64>,
    pub seed: u64,
    pub config_hash: u64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(Error::Domain(format!("{name} = {v} outside [0, 1]")))
            } else {
                Ok(())
            }
        };
        frac("lnacc_all", self.lnacc_all)?;
        for (i, v) in self.lnacc_target.iter().enumerate() {
            frac(&format!("lnacc_target[{i}]"), *v)?;
        }
        frac("ratio", self.ratio)?;
        for (i, v) in self.cossim_per_client.iter().enumerate() {
            if !(-1.0..=1.0).contains(v) {
                return Err(Error::Domain(format!(
                    "cossim_per_client[{i}] = {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Model};
    use crate::seeding;
    use proptest::prelude::*;

    fn counts(v: &[u32]) -> LabelCounts {
        LabelCounts::new(v.to_vec())
    }

    #[test]
    fn exact_match_scores_one() {
        let c = counts(&[3, 0, 1, 4]);
        assert_eq!(lnacc(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn one_wrong_class_out_of_three() {
        let p = counts(&[2, 1, 0]);
        let t = counts(&[2, 1, 1]);
        assert!((lnacc(&p, &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_prediction_scores_the_empty_classes() {
        // Truth has k = 3 nonzero classes out of n = 5; an all-zero guess
        // gets exactly the other n - k right.
        let p = counts(&[0, 0, 0, 0, 0]);
        let t = counts(&[2, 0, 1, 0, 4]);
        assert!((lnacc(&p, &t).unwrap() - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn all_clients_accuracy_uses_classwise_sums() {
        // Per-client predictions are wrong but their sums are right.
        let p = vec![counts(&[1, 1]), counts(&[2, 0])];
        let t = vec![counts(&[2, 0]), counts(&[1, 1])];
        assert_eq!(lnacc_all(&p, &t).unwrap(), 1.0);
        let per = lnacc_per_client(&p, &t).unwrap();
        assert_eq!(per, vec![0.0, 0.0]);
    }

    fn grads_from(values: &[f64]) -> GradientSet {
        let input = values.len() - 1;
        let mut rng = seeding::stream(2, "metric-model", input as u64);
        let model = Model::new(
            vec![LayerSpec::FullyConnected { input, output: 1 }],
            vec![input],
            &mut rng,
        )
        .unwrap();
        GradientSet::from_flat(&GradientSet::zeros_like(&model), values).unwrap()
    }

    #[test]
    fn cosine_of_self_and_negation() {
        let g = grads_from(&[0.3, -1.2, 0.7, 2.0]);
        assert!((cos_sim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = g.clone();
        neg.scale(-1.0);
        assert!((cos_sim(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_support_is_orthogonal() {
        let a = grads_from(&[1.0, 0.0, 2.0, 0.0]);
        let b = grads_from(&[0.0, 3.0, 0.0, -1.0]);
        assert_eq!(cos_sim(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_vector_similarity_is_an_error() {
        let a = grads_from(&[1.0, 2.0, 3.0, 4.0]);
        let z = grads_from(&[0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(cos_sim(&a, &z), Err(Error::Domain(_))));
    }

    #[test]
    fn identical_models_have_no_modified_parameters() {
        let mut rng = seeding::stream(3, "nomp", 0);
        let m = Model::fcn3(10, (8, 6), 4, &mut rng).unwrap();
        assert_eq!(nomp_ratio(&m, &m).unwrap(), (0, 0.0));
    }

    #[test]
    fn first_layer_rewrite_touches_exactly_its_parameters() {
        // Overwriting the first fully-connected layer of a 784 -> 256 ->
        // 128 -> 10 network modifies 784 * 256 + 256 = 200960 parameters.
        let mut rng = seeding::stream(4, "nomp-fcn", 0);
        let base = Model::fcn3(784, (256, 128), 10, &mut rng).unwrap();
        let mut modified = base.clone();
        let mut flat = modified.flatten_params();
        for v in flat.iter_mut().take(784 * 256 + 256) {
            *v = 0.25;
        }
        modified.set_params_from_flat(&flat).unwrap();
        let (nomp, ratio) = nomp_ratio(&base, &modified).unwrap();
        assert_eq!(nomp, 200_960);
        assert!((ratio - 200_960.0 / base.param_count() as f64).abs() < 1e-15);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let mut rng = seeding::stream(5, "nomp-arch", 0);
        let a = Model::fcn3(10, (8, 6), 4, &mut rng).unwrap();
        let b = Model::fcn3(10, (8, 7), 4, &mut rng).unwrap();
        assert!(matches!(nomp_ratio(&a, &b), Err(Error::Architecture(_))));
    }

    proptest! {
        #[test]
        fn lnacc_is_permutation_equivariant(
            pairs in prop::collection::vec((0u32..10, 0u32..10), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let p: Vec<u32> = pairs.iter().map(|x| x.0).collect();
            let t: Vec<u32> = pairs.iter().map(|x| x.1).collect();
            let base = lnacc(&counts(&p), &counts(&t)).unwrap();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut seeding::stream(seed, "perm", 0));
            let pp: Vec<u32> = order.iter().map(|&i| p[i]).collect();
            let tp: Vec<u32> = order.iter().map(|&i| t[i]).collect();
            let permuted = lnacc(&counts(&pp), &counts(&tp)).unwrap();
            prop_assert_eq!(base, permuted);
        }

        #[test]
        fn cosine_is_scale_invariant(
            vals in prop::collection::vec(-10.0f64..10.0, 2..9),
            alpha in 0.01f64..100.0,
        ) {
            prop_assume!(vals.iter().any(|v| v.abs() > 1e-6));
            let g = grads_from(&vals);
            let mut scaled = g.clone();
            scaled.scale(alpha);
            let a = cos_sim(&g, &g).unwrap();
            let b = cos_sim(&scaled, &g).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

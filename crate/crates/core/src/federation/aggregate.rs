//! Server-side weighting and aggregation of client adapter updates.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::error::{Error, Result};

use super::ClientUpdate;

/// Floor added to validation scores in the quality factor so a client with
/// zero validation accuracy still contributes.
pub const QUALITY_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub client_ids: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Aggregation weights from sample counts and validation scores.
///
/// `raw_k = (n_k / Σn) · α_k`, renormalized to sum to one. With quality
/// weighting off `α_k = 1`; otherwise
/// `α_k = (val_k + eps) / (mean(val) + eps)`.
pub fn weights_from_counts(n: &[usize], val: &[f64], quality_weighting: bool, eps: f64) -> Result<Vec<f64>> {
    if n.is_empty() {
        return Err(Error::InvalidArgument("no client updates to weight".into()));
    }
    if val.len() != n.len() {
        return Err(Error::Shape(format!("{} sample counts but {} validation scores", n.len(), val.len())));
    }
    if n.contains(&0) {
        return Err(Error::InvalidArgument("every client needs n_k >= 1".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("quality epsilon must be >= 0, got {eps}")));
    }
    if quality_weighting && val.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!("validation scores must lie in [0, 1]: {val:?}")));
    }
    let total = n.iter().map(|&v| v as f64).sum::<f64>();
    let mean_val = val.iter().sum::<f64>() / val.len() as f64;
    let raw: Vec<f64> = n
        .iter()
        .zip(val)
        .map(|(&nk, &vk)| {
            let alpha = if quality_weighting {
                (vk + eps) / (mean_val + eps)
            } else {
                1.0
            };
            (nk as f64 / total) * alpha
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::InvalidArgument(
            "quality factors are all zero; use a positive epsilon".into(),
        ));
    }
    Ok(raw.into_iter().map(|r| r / sum).collect())
}

pub fn compute_weights(updates: &[ClientUpdate], quality_weighting: bool, eps: f64) -> Result<AggregationWeights> {
    let n: Vec<usize> = updates.iter().map(|u| u.n_k).collect();
    let val: Vec<f64> = updates.iter().map(|u| u.val_score).collect();
    Ok(AggregationWeights {
        client_ids: updates.iter().map(|u| u.client_id).collect(),
        weights: weights_from_counts(&n, &val, quality_weighting, eps)?,
    })
}

/// `Σ_k w_k · θ_k`, accumulated in ascending client id order starting from
/// the first term (so a single update with weight one is returned exactly).
/// Every modality group shares the same weights.
pub fn aggregate(updates: &[ClientUpdate], weights: &AggregationWeights) -> Result<AdapterSet> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    if weights.weights.len() != updates.len() || weights.client_ids.len() != updates.len() {
        return Err(Error::Shape(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.weights.len()
        )));
    }
    if weights.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid aggregation weights {:?}", weights.weights)));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let weight_of = |i: usize| -> Result<f64> {
        let id = updates[i].client_id;
        weights
            .client_ids
            .iter()
            .position(|&c| c == id)
            .map(|p| weights.weights[p])
            .ok_or_else(|| Error::InvalidArgument(format!("no weight for client {id}")))
    };
    let first = order[0];
    let mut global = updates[first].adapters.scaled(weight_of(first)?);
    for &i in &order[1..] {
        global.add_scaled(weight_of(i)?, &updates[i].adapters)?;
    }
    global.ensure_finite("aggregate")?;
    Ok(global)
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptState {
    momentum: Option<AdapterSet>,
}

impl ServerOptState {
    pub fn momentum(&self) -> Option<&AdapterSet> {
        self.momentum.as_ref()
    }
}

/// Server momentum step on the pseudo-gradient `Δ = prev − aggregated`:
/// `m ← β·m + Δ`, `new = prev − lr·m`.
pub fn server_opt_step(
    prev_global: &AdapterSet,
    aggregated: &AdapterSet,
    state: &mut ServerOptState,
    server_lr: f64,
    momentum: f64,
) -> Result<AdapterSet> {
    prev_global.check_congruent(aggregated, "server_opt_step")?;
    let mut delta = prev_global.clone();
    delta.add_scaled(-1.0, aggregated)?;
    let m = match state.momentum.take() {
        Some(prev_m) => {
            let mut m = prev_m.scaled(momentum);
            m.add_scaled(1.0, &delta)?;
            m
        }
        None => delta,
    };
    let mut next = prev_global.clone();
    next.add_scaled(-server_lr, &m)?;
    state.momentum = Some(m);
    next.ensure_finite("server_opt_step")?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{LoraAdapter, Modality};
    use crate::rng::RandomSource;
    use crate::tensor::ParamTensor;
    use proptest::prelude::*;

    fn scalar_set(v: f64) -> AdapterSet {
        let ad = LoraAdapter::new(
            "l",
            Modality::Vision,
            ParamTensor::new("a", vec![1, 1], vec![v]).unwrap(),
            ParamTensor::new("b", vec![1, 1], vec![v]).unwrap(),
            1.0,
        )
        .unwrap();
        AdapterSet::new(vec![ad], Some(ParamTensor::new("t", vec![1], vec![v]).unwrap())).unwrap()
    }

    fn value(set: &AdapterSet) -> f64 {
        set.get("l").unwrap().a().data()[0]
    }

    fn update(client_id: usize, v: f64, n_k: usize) -> ClientUpdate {
        ClientUpdate::for_tests(client_id, scalar_set(v), n_k, 0.5)
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weights_from_counts(&[7], &[0.3], true, QUALITY_EPSILON).unwrap(), vec![1.0]);
        assert_eq!(weights_from_counts(&[100, 300], &[0.1, 0.9], false, QUALITY_EPSILON).unwrap(), vec![0.25, 0.75]);
        let w0 = weights_from_counts(&[100, 100], &[0.5, 1.0], true, 0.0).unwrap();
        assert!((w0[0] - 1.0 / 3.0).abs() < 1e-15 && (w0[1] - 2.0 / 3.0).abs() < 1e-15);
        let w = weights_from_counts(&[100, 100], &[0.5, 1.0], true, QUALITY_EPSILON).unwrap();
        assert!((w[0] - 0.335_526_315_789_473_7).abs() < 1e-12, "{w:?}");
        assert!((w[1] - 0.664_473_684_210_526_3).abs() < 1e-12, "{w:?}");
    }

    #[test]
    fn weight_errors() {
        assert!(weights_from_counts(&[], &[], true, QUALITY_EPSILON).is_err());
        assert!(weights_from_counts(&[0, 3], &[0.5, 0.5], false, QUALITY_EPSILON).is_err());
        assert!(weights_from_counts(&[1, 3], &[0.0, 0.0], true, 0.0).is_err());
        assert!(weights_from_counts(&[1, 3], &[0.0, 0.0], true, QUALITY_EPSILON).is_ok());
    }

    #[test]
    fn aggregate_examples() {
        let w = AggregationWeights {
            client_ids: vec![0, 1],
            weights: vec![0.25, 0.75],
        };
        let g = aggregate(&[update(0, 2.0, 1), update(1, 6.0, 1)], &w).unwrap();
        assert_eq!(value(&g), 5.0);

        let single = update(3, 0.123_456_789, 10);
        let g = aggregate(
            std::slice::from_ref(&single),
            &AggregationWeights {
                client_ids: vec![3],
                weights: vec![1.0],
            },
        )
        .unwrap();
        assert_eq!(g, single.adapters);
    }

    #[test]
    fn aggregation_order_is_by_client_id() {
        let ups = [update(2, 0.1, 1), update(0, 0.7, 1), update(1, 1e-17, 1)];
        let w = AggregationWeights {
            client_ids: vec![2, 0, 1],
            weights: vec![0.3, 0.3, 0.4],
        };
        let reversed = [ups[1].clone(), ups[2].clone(), ups[0].clone()];
        let w_rev = AggregationWeights {
            client_ids: vec![0, 1, 2],
            weights: vec![0.3, 0.4, 0.3],
        };
        assert_eq!(aggregate(&ups, &w).unwrap(), aggregate(&reversed, &w_rev).unwrap());
    }

    #[test]
    fn aggregate_rejects_incongruent_updates() {
        let mut odd = update(1, 1.0, 1);
        odd.adapters = AdapterSet::new(vec![], None).unwrap();
        let w = AggregationWeights {
            client_ids: vec![0, 1],
            weights: vec![0.5, 0.5],
        };
        assert!(aggregate(&[update(0, 1.0, 1), odd], &w).is_err());
    }

    #[test]
    fn server_step_examples() {
        let mut state = ServerOptState::default();
        let next = server_opt_step(&scalar_set(1.0), &scalar_set(0.5), &mut state, 1.0, 0.9).unwrap();
        assert_eq!(value(&next), 0.5);
        let next2 = server_opt_step(&next, &scalar_set(0.0), &mut state, 1.0, 0.9).unwrap();
        assert!((value(state.momentum().unwrap()) - 0.95).abs() < 1e-15);
        assert!((value(&next2) - (0.5 - 0.95)).abs() < 1e-15);

        let mut state = ServerOptState::default();
        let same = server_opt_step(&scalar_set(0.3), &scalar_set(0.3), &mut state, 0.7, 0.9).unwrap();
        assert_eq!(value(&same), 0.3);

        let mut state = ServerOptState::default();
        let plain = server_opt_step(&scalar_set(0.8), &scalar_set(-0.4), &mut state, 1.0, 0.0).unwrap();
        assert!((value(&plain) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn weights_form_a_simplex_on_random_draws() {
        let mut rs = RandomSource::new(31, 0);
        for _ in 0..10_000 {
            let k = 1 + rs.below(16) as usize;
            let n: Vec<usize> = (0..k).map(|_| 1 + rs.below(5000) as usize).collect();
            let val: Vec<f64> = (0..k).map(|_| rs.uniform_range(0.0, 1.0)).collect();
            for quality in [false, true] {
                let w = weights_from_counts(&n, &val, quality, QUALITY_EPSILON).unwrap();
                assert!(w.iter().all(|&x| x >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_ignore_count_scale(
            n in prop::collection::vec(1usize..10_000, 1..12),
            scale in 1usize..1000,
            seed in any::<u64>(),
        ) {
            let mut rs = RandomSource::new(seed, 0);
            let val: Vec<f64> = n.iter().map(|_| rs.uniform_range(0.0, 1.0)).collect();
            let scaled: Vec<usize> = n.iter().map(|v| v * scale).collect();
            let a = weights_from_counts(&n, &val, true, QUALITY_EPSILON).unwrap();
            let b = weights_from_counts(&scaled, &val, true, QUALITY_EPSILON).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn aggregating_copies_is_idempotent(v in -100.0f64..100.0, k in 1usize..10, seed in any::<u64>()) {
            let mut rs = RandomSource::new(seed, 0);
            let n: Vec<usize> = (0..k).map(|_| 1 + rs.below(100) as usize).collect();
            let val: Vec<f64> = (0..k).map(|_| rs.uniform_range(0.0, 1.0)).collect();
            let ups: Vec<ClientUpdate> = (0..k).map(|i| update(i, v, n[i])).collect();
            let w = AggregationWeights {
                client_ids: (0..k).collect(),
                weights: weights_from_counts(&n, &val, true, QUALITY_EPSILON).unwrap(),
            };
            let g = aggregate(&ups, &w).unwrap();
            prop_assert!((value(&g) - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}

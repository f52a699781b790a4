//! Retrieval-style evaluation: the regression head predicts coordinates,
//! a k-d tree over the location map turns them into a ranked candidate
//! list, and Hit@k asks whether the true next location appears in the
//! top k.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_on_tape, ForwardOpts, ModelState};
use crate::data::{window_trajectories, Dataset, Location, Sample};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::tape::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_locations: usize,
    /// `k -> fraction of samples whose target is among the k nearest
    /// locations to the predicted point`, in `[0, 1]`.
    pub hit_at: BTreeMap<usize, f64>,
    pub mean_dist: f64,
}

/// Rank locations by distance to the model's predicted coordinates and
/// score Hit@k for every requested k.
pub fn evaluate(
    state: &ModelState,
    samples: &[Sample],
    locations: &[Location],
    ks: &[usize],
    opts: &ForwardOpts,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::data("evaluation needs at least one sample"));
    }
    if locations.is_empty() {
        return Err(Error::data("evaluation needs a location map"));
    }
    let tree = KdTree::from_locations(locations);
    let k_max = ks.iter().copied().max().unwrap_or(1).min(locations.len());
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut dist_total = 0.0;
    for sample in samples {
        let mut tape = Tape::new(&state.store);
        let out = forward_on_tape(state, &mut tape, sample, opts)?;
        let p = tape.value(out.pred);
        let (px, py) = (p[(0, 0)], p[(0, 1)]);
        let (dx, dy) = (px - sample.target.x, py - sample.target.y);
        dist_total += (dx * dx + dy * dy).sqrt();
        let ranked = tree.nearest(px, py, k_max);
        let rank = ranked.iter().position(|n| n.id == sample.target.loc);
        if let Some(r) = rank {
            for (&k, count) in hits.iter_mut() {
                if r < k {
                    *count += 1;
                }
            }
        }
    }
    let n = samples.len();
    Ok(EvalReport {
        n_samples: n,
        n_locations: locations.len(),
        hit_at: hits
            .into_iter()
            .map(|(k, c)| (k, c as f64 / n as f64))
            .collect(),
        mean_dist: dist_total / n as f64,
    })
}

/// Non-personalized frequency baseline: always "predict" the globally most
/// visited target locations of the training split (ties broken by id).
pub fn most_frequent_baseline(
    train: &[Sample],
    eval_samples: &[Sample],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if train.is_empty() || eval_samples.is_empty() {
        return Err(Error::data("baseline needs non-empty train and eval sets"));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for s in train {
        *counts.entry(s.target.loc).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u64, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let order: Vec<u64> = ranked.into_iter().map(|(id, _)| id).collect();
    let mut out = BTreeMap::new();
    for &k in ks {
        let top = &order[..k.min(order.len())];
        let hits = eval_samples
            .iter()
            .filter(|s| top.contains(&s.target.loc))
            .count();
        out.insert(k, hits as f64 / eval_samples.len() as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub eval: EvalReport,
    /// Hit@k of uniform random retrieval on this map: `k / |locations|`.
    pub random_baseline: BTreeMap<usize, f64>,
    /// Parameter checksum before == after (transfer must not train).
    pub checksum: String,
}

/// Zero-shot transfer: window an unseen city's trajectories and evaluate
/// the frozen model on them. Fails if the model parameters change.
pub fn zero_shot_transfer(
    state: &ModelState,
    dataset: &Dataset,
    stride: usize,
    ks: &[usize],
) -> Result<TransferReport> {
    if !dataset.is_normalized() {
        return Err(Error::data(format!(
            "dataset `{}` must be normalized before transfer evaluation",
            dataset.meta.name
        )));
    }
    let before = state.store.checksum();
    let samples = window_trajectories(
        dataset,
        state.config.history_len,
        state.config.current_len,
        stride,
    )?;
    if samples.is_empty() {
        return Err(Error::data(format!(
            "dataset `{}` yields no windows of length {}+{}+1",
            dataset.meta.name, state.config.history_len, state.config.current_len
        )));
    }
    let eval = evaluate(
        state,
        &samples,
        &dataset.locations,
        ks,
        &ForwardOpts::default(),
    )?;
    let after = state.store.checksum();
    if before != after {
        return Err(Error::data(
            "model parameters changed during zero-shot evaluation",
        ));
    }
    let random_baseline = ks
        .iter()
        .map(|&k| (k, k as f64 / dataset.locations.len() as f64))
        .collect();
    Ok(TransferReport {
        eval,
        random_baseline,
        checksum: after,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActivationReport {
    pub n_samples: usize,
    pub n_moe_layers: usize,
    /// Mean number of experts evaluated per routing decision.
    pub mean_activated: f64,
    pub per_layer_activated: Vec<f64>,
    pub mean_entropy: f64,
    /// `histogram[i]` counts routing decisions that activated `i + 1` experts.
    pub histogram: Vec<usize>,
}

/// Expert-usage statistics of the personalized MoE over a sample set.
pub fn expert_activation_report(
    state: &ModelState,
    samples: &[Sample],
) -> Result<ActivationReport> {
    if samples.is_empty() {
        return Err(Error::data("activation report needs at least one sample"));
    }
    let n_layers = state.config.n_moe_layers;
    let n_experts = crate::assets::NUM_USER_GROUPS;
    let mut per_layer = vec![0usize; n_layers];
    let mut histogram = vec![0usize; n_experts];
    let mut entropy_total = 0.0;
    let mut decisions = 0usize;
    for sample in samples {
        let mut tape = Tape::new(&state.store);
        let out = forward_on_tape(state, &mut tape, sample, &ForwardOpts::default())?;
        for (l, routing) in out.trace.user.iter().enumerate() {
            per_layer[l] += routing.evaluated;
            histogram[routing.evaluated - 1] += 1;
            entropy_total += routing.entropy;
            decisions += 1;
        }
    }
    let total: usize = per_layer.iter().sum();
    Ok(ActivationReport {
        n_samples: samples.len(),
        n_moe_layers: n_layers,
        mean_activated: total as f64 / decisions.max(1) as f64,
        per_layer_activated: per_layer
            .iter()
            .map(|&c| c as f64 / samples.len() as f64)
            .collect(),
        mean_entropy: entropy_total / decisions.max(1) as f64,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::data::{Record, Target};
    use crate::embedding::EmbedDims;
    use crate::history::TcnConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            profile: "custom".into(),
            d_model: 16,
            n_heads: 2,
            n_lower_layers: 1,
            n_moe_layers: 1,
            d_ffn: 20,
            embed: EmbedDims {
                spatial: 8,
                day: 3,
                hour: 3,
                duration: 2,
            },
            tcn: TcnConfig {
                kernel: 2,
                dilations: vec![1],
                channels: 6,
                out_dim: 6,
            },
            history_len: 4,
            current_len: 2,
            prefix_len: 2,
            func_top_k: 2,
            func_router_hidden: 10,
            confidence_threshold: 0.8,
            lora_rank: 2,
            lora_alpha: 4.0,
            d_prior: 5,
            d_fuse: 7,
            d_text: 12,
            dropout: 0.0,
        }
    }

    fn samples_with_targets(targets: &[(u64, f64, f64)], seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        targets
            .iter()
            .map(|&(loc, x, y)| {
                let mut rec = |t: i64| Record {
                    loc: rng.random_range(0..30),
                    x: rng.random_range(0.0..1.0),
                    y: rng.random_range(0.0..1.0),
                    weekday: rng.random_range(0..7),
                    hour: rng.random_range(0..24),
                    duration: rng.random_range(0.0..1.0),
                    timestamp: t,
                };
                Sample {
                    user: "u".into(),
                    history: (0..4).map(|i| rec(i)).collect(),
                    current: (4..6).map(|i| rec(i)).collect(),
                    target: Target { loc, x, y },
                }
            })
            .collect()
    }

    fn corner_map() -> Vec<Location> {
        vec![
            Location { id: 0, x: 0.0, y: 0.0, category: None },
            Location { id: 1, x: 1.0, y: 0.0, category: None },
            Location { id: 2, x: 0.0, y: 1.0, category: None },
            Location { id: 3, x: 1.0, y: 1.0, category: None },
        ]
    }

    #[test]
    fn hit_rates_follow_the_ranking() {
        // Pin the model's output by aiming the head at a constant: easier to
        // zero the head weights and set the bias to a known point.
        let mut state = ModelState::new(tiny_config(), 1).unwrap();
        let id = state.store.id("head.w2").unwrap();
        state.store.value_mut(id).fill(0.0);
        let id = state.store.id("head.b2").unwrap();
        state.store.value_mut(id)[(0, 0)] = 0.1;
        state.store.value_mut(id)[(0, 1)] = 0.2;
        // Prediction (0.1, 0.2): ranking is 0, then 1 and 2 (2 closer), then 3.
        let samples = samples_with_targets(
            &[(0, 0.0, 0.0), (2, 0.0, 1.0), (3, 1.0, 1.0)],
            7,
        );
        let report = evaluate(&state, &samples, &corner_map(), &[1, 2, 4], &ForwardOpts::default())
            .unwrap();
        assert_eq!(report.hit_at[&1], 1.0 / 3.0, "only target 0 is rank 1");
        assert_eq!(report.hit_at[&2], 2.0 / 3.0, "target 2 enters at rank 2");
        assert_eq!(report.hit_at[&4], 1.0, "every target is within the map");
        assert_eq!(report.n_samples, 3);
    }

    #[test]
    fn baseline_counts_training_targets() {
        let train = samples_with_targets(
            &[(5, 0.0, 0.0), (5, 0.0, 0.0), (9, 0.0, 0.0), (2, 0.0, 0.0)],
            11,
        );
        let eval_s = samples_with_targets(&[(5, 0.0, 0.0), (9, 0.0, 0.0)], 13);
        let rates = most_frequent_baseline(&train, &eval_s, &[1, 2, 3]).unwrap();
        assert_eq!(rates[&1], 0.5, "top-1 is location 5");
        assert_eq!(rates[&2], 0.5, "the 9/2 tie breaks toward id 2, so 9 stays out");
        assert_eq!(rates[&3], 1.0);
    }

    #[test]
    fn activation_report_is_consistent() {
        let state = ModelState::new(tiny_config(), 3).unwrap();
        let samples = samples_with_targets(&[(0, 0.1, 0.1), (1, 0.9, 0.2), (2, 0.4, 0.8)], 17);
        let report = expert_activation_report(&state, &samples).unwrap();
        assert_eq!(report.histogram.iter().sum::<usize>(), 3, "one decision per sample per layer");
        assert!(report.mean_activated >= 1.0 && report.mean_activated <= 11.0);
        assert_eq!(report.per_layer_activated.len(), 1);
        assert!(report.mean_entropy > 0.0);
    }

    #[test]
    fn transfer_requires_normalized_data_and_keeps_weights() {
        use crate::data::synthetic::{generate_synthetic_city, SyntheticCityConfig};
        let cfg = SyntheticCityConfig {
            n_locations: 40,
            n_users: 6,
            days: 3,
            seed: 31,
            ..Default::default()
        };
        let ds = generate_synthetic_city(&cfg).unwrap();
        let state = ModelState::new(tiny_config(), 5).unwrap();
        assert!(zero_shot_transfer(&state, &ds, 3, &[1, 10]).is_err(), "raw coords rejected");
        let ds = crate::data::normalize_coordinates(&ds, crate::data::DEFAULT_DURATION_CAP).unwrap();
        let before = state.store.checksum();
        let report = zero_shot_transfer(&state, &ds, 3, &[1, 10]).unwrap();
        assert_eq!(report.checksum, before);
        assert_eq!(report.random_baseline[&10], 10.0 / 40.0);
        assert!(report.eval.n_samples > 0);
    }
}

//! Location semantics MoE.
//!
//! Five function experts (entertainment, commercial, education, public
//! service, residential), each a linear map from coordinates to the spatial
//! embedding space, biased at init by the encoded category description. A
//! history-aware router scores `[record embedding ; history representation]`
//! through a small MLP, softmaxes, and picks a fixed top-k. The selected
//! experts' outputs are combined with their *original* softmax probabilities
//! (no renormalization) and added to the shared spatial embedding.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::embedding::{spatial_projection_var, EmbeddingParams};
use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Routing outcome for one record, recorded in the forward trace.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionRouting {
    /// Full softmax distribution over experts.
    pub probs: Vec<f64>,
    /// Selected expert indices, by descending probability (ties keep the
    /// lower index first).
    pub selected: Vec<usize>,
    pub entropy: f64,
}

pub struct FunctionExpert {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
}

pub struct FunctionMoe {
    pub experts: Vec<FunctionExpert>,
    pub top_k: usize,
    pub router_w1: ParamId,
    pub router_b1: ParamId,
    pub router_w2: ParamId,
    pub router_b2: ParamId,
    /// Router input width: record embedding + history representation.
    pub in_dim: usize,
}

impl FunctionMoe {
    /// `priors` is a `K x d_text` matrix of encoded category descriptions;
    /// each expert's bias starts at a fixed seeded projection of its prior,
    /// giving experts distinct semantic starting points.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        names: &[&str],
        priors: &Mat,
        spatial_dim: usize,
        record_dim: usize,
        hist_dim: usize,
        hidden: usize,
        top_k: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = names.len();
        if priors.nrows() != k {
            return Err(Error::dim(format!(
                "function priors have {} rows for {k} experts",
                priors.nrows()
            )));
        }
        if top_k == 0 || top_k > k {
            return Err(Error::config(format!(
                "function top_k must be in 1..={k}, got {top_k}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fixed (non-trainable, not stored) projection of priors into the
        // spatial space; only its output lands in the bias parameters.
        let d_text = priors.ncols();
        let proj = uniform_init(&mut rng, d_text, spatial_dim, d_text);
        let mut experts = Vec::with_capacity(k);
        for (i, name) in names.iter().enumerate() {
            let w = store.add(
                &format!("func_moe.expert{i}.w"),
                uniform_init(&mut rng, 2, spatial_dim, 2),
                true,
            );
            let bias_row = priors.row(i).insert_axis(ndarray::Axis(0)).dot(&proj);
            let b = store.add(&format!("func_moe.expert{i}.b"), bias_row, true);
            experts.push(FunctionExpert {
                name: name.to_string(),
                w,
                b,
            });
        }
        let in_dim = record_dim + hist_dim;
        Ok(FunctionMoe {
            experts,
            top_k,
            in_dim,
            router_w1: store.add(
                "func_moe.router.w1",
                uniform_init(&mut rng, in_dim, hidden, in_dim),
                true,
            ),
            router_b1: store.add("func_moe.router.b1", Array2::zeros((1, hidden)), true),
            router_w2: store.add(
                "func_moe.router.w2",
                uniform_init(&mut rng, hidden, k, hidden),
                true,
            ),
            router_b2: store.add("func_moe.router.b2", Array2::zeros((1, k)), true),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Indices of the `k` largest probabilities, descending, ties broken toward
/// the lower index.
pub fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

pub fn routing_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Score experts for one record: returns the on-tape probability row
/// (`1 x K`) and the recorded routing decision.
pub fn route_functions_var(
    tape: &mut Tape,
    moe: &FunctionMoe,
    record_emb: Var,
    hist: Var,
) -> Result<(Var, FunctionRouting)> {
    let (r_rows, r_cols) = tape.shape(record_emb);
    let (h_rows, h_cols) = tape.shape(hist);
    if r_rows != 1 || h_rows != 1 || r_cols + h_cols != moe.in_dim {
        return Err(Error::dim(format!(
            "function router expects 1x{} input, got 1x{r_cols} + 1x{h_cols}",
            moe.in_dim
        )));
    }
    let joint = tape.concat_cols(&[record_emb, hist]);
    let w1 = tape.param(moe.router_w1);
    let b1 = tape.param(moe.router_b1);
    let w2 = tape.param(moe.router_w2);
    let b2 = tape.param(moe.router_b2);
    let h = tape.matmul(joint, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let logits = tape.matmul(h, w2);
    let logits = tape.add_row(logits, b2);
    let probs = tape.softmax_rows(logits);
    let p = tape.value(probs).row(0).to_vec();
    let selected = top_k_indices(&p, moe.top_k);
    let entropy = routing_entropy(&p);
    Ok((
        probs,
        FunctionRouting {
            probs: p,
            selected,
            entropy,
        },
    ))
}

/// Apply one function expert to coordinates: `f_i(x, y) = [x, y] W_i + b_i`.
pub fn apply_function_expert_var(tape: &mut Tape, moe: &FunctionMoe, i: usize, xy: Var) -> Var {
    let w = tape.param(moe.experts[i].w);
    let b = tape.param(moe.experts[i].b);
    let out = tape.matmul(xy, w);
    tape.add_row(out, b)
}

/// Combine the shared spatial embedding with the probability-weighted sum of
/// the selected experts' outputs. Probabilities are the original softmax
/// values — selection does not renormalize. With an empty selection the
/// result is exactly the shared embedding.
pub fn enhance_spatial_var(
    tape: &mut Tape,
    moe: &FunctionMoe,
    xy: Var,
    shared: Var,
    probs: Var,
    selected: &[usize],
) -> Var {
    let mut enhanced = shared;
    for &i in selected {
        let out = apply_function_expert_var(tape, moe, i, xy);
        let p_i = tape.slice_cols(probs, i, i + 1);
        let weighted = tape.scalar_mul(p_i, out);
        enhanced = tape.add(enhanced, weighted);
    }
    enhanced
}

/// Plain wrapper: run routing + enhancement for a single record embedding,
/// returning the enhanced spatial row and the routing decision.
pub fn enhance_spatial_embedding(
    store: &ParamStore,
    embedding: &EmbeddingParams,
    moe: &FunctionMoe,
    x: f64,
    y: f64,
    record_emb: &[f64],
    hist: &[f64],
) -> Result<(Vec<f64>, FunctionRouting)> {
    let mut tape = Tape::new(store);
    let rec = tape.row(record_emb);
    let h = tape.row(hist);
    let (probs, routing) = route_functions_var(&mut tape, moe, rec, h)?;
    let xy = tape.row(&[x, y]);
    let shared = spatial_projection_var(&mut tape, embedding, xy);
    let enhanced = enhance_spatial_var(&mut tape, moe, xy, shared, probs, &routing.selected);
    Ok((tape.value(enhanced).row(0).to_vec(), routing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::FUNCTION_CATEGORIES;
    use crate::embedding::EmbedDims;
    use rand::Rng;

    const SPATIAL: usize = 8;
    const HID: usize = 10;
    const HDIM: usize = 6;

    fn setup(top_k: usize) -> (ParamStore, EmbeddingParams, FunctionMoe) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = EmbedDims {
            spatial: SPATIAL,
            day: 3,
            hour: 3,
            duration: 2,
        };
        let embedding = EmbeddingParams::init(&mut store, dims, &mut rng);
        let mut prng = ChaCha8Rng::seed_from_u64(99);
        let priors = Mat::from_shape_fn((5, 7), |_| prng.random_range(-1.0..1.0));
        let names: Vec<&str> = FUNCTION_CATEGORIES.to_vec();
        let moe = FunctionMoe::init(
            &mut store,
            &names,
            &priors,
            SPATIAL,
            dims.total(),
            HDIM,
            HID,
            top_k,
            77,
        )
        .unwrap();
        (store, embedding, moe)
    }

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn top_k_orders_by_probability_with_index_ties() {
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.2, 0.15, 0.05], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.2, 0.3, 0.3, 0.2], 3), vec![1, 2, 0]);
    }

    #[test]
    fn routing_returns_distribution_and_k_experts() {
        let (store, _emb, moe) = setup(2);
        let rec = rand_vec(1, 16);
        let hist = rand_vec(2, HDIM);
        let mut tape = Tape::new(&store);
        let r = tape.row(&rec);
        let h = tape.row(&hist);
        let (probs, routing) = route_functions_var(&mut tape, &moe, r, h).unwrap();
        assert_eq!(routing.probs.len(), 5);
        assert!((routing.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(routing.selected.len(), 2);
        assert!(routing.probs[routing.selected[0]] >= routing.probs[routing.selected[1]]);
        assert!(routing.entropy > 0.0 && routing.entropy <= 5f64.ln() + 1e-12);
        assert_eq!(tape.value(probs).row(0).to_vec(), routing.probs);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (store, _emb, moe) = setup(2);
        let mut tape = Tape::new(&store);
        let r = tape.row(&rand_vec(1, 16));
        let h = tape.row(&rand_vec(2, HDIM + 1));
        assert!(route_functions_var(&mut tape, &moe, r, h).is_err());
    }

    #[test]
    fn enhancement_matches_manual_weighted_sum() {
        let (store, emb, moe) = setup(2);
        let rec = rand_vec(3, 16);
        let hist = rand_vec(4, HDIM);
        let (x, y) = (0.42, 0.77);
        let (enhanced, routing) =
            enhance_spatial_embedding(&store, &emb, &moe, x, y, &rec, &hist).unwrap();

        // Manual reconstruction with plain matrix arithmetic.
        let xy = Mat::from_shape_vec((1, 2), vec![x, y]).unwrap();
        let shared = xy.dot(store.value(emb.w_xy)) + store.value(emb.b_xy);
        let mut expect = shared;
        for &i in &routing.selected {
            let out = xy.dot(store.value(moe.experts[i].w)) + store.value(moe.experts[i].b);
            expect = expect + out * routing.probs[i];
        }
        for (a, b) in enhanced.iter().zip(expect.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_selection_returns_shared_embedding_unchanged() {
        let (store, emb, moe) = setup(2);
        let mut tape = Tape::new(&store);
        let xy = tape.row(&[0.3, 0.9]);
        let shared = spatial_projection_var(&mut tape, &emb, xy);
        let probs = tape.row(&[0.2; 5]);
        let enhanced = enhance_spatial_var(&mut tape, &moe, xy, shared, probs, &[]);
        assert_eq!(tape.value(enhanced), tape.value(shared));
    }

    #[test]
    fn expert_biases_start_from_distinct_priors() {
        let (store, _emb, moe) = setup(2);
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(
                    store.value(moe.experts[i].b),
                    store.value(moe.experts[j].b),
                    "experts {i} and {j} share a bias"
                );
            }
        }
    }

    #[test]
    fn invalid_top_k_is_rejected() {
        let mut store = ParamStore::new();
        let priors = Mat::zeros((5, 4));
        let names: Vec<&str> = FUNCTION_CATEGORIES.to_vec();
        assert!(FunctionMoe::init(&mut store, &names, &priors, 4, 8, 2, 4, 0, 1).is_err());
        let mut store = ParamStore::new();
        assert!(FunctionMoe::init(&mut store, &names, &priors, 4, 8, 2, 4, 6, 1).is_err());
    }
}

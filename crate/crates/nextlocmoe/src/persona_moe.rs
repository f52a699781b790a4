//! Personalized MoE: one expert per predefined user group, replacing the
//! FFN of an upper backbone layer.
//!
//! Every expert shares the frozen base FFN weights of the layer it replaced
//! (read-only storage shared across experts) plus its own LoRA adapters, so
//! at initialization each expert computes exactly the original FFN. Routing
//! fuses `[pooled hidden state ; history representation ; group prior]` per
//! expert, softmaxes the gate scores, and selects the *minimal* set of
//! highest-probability experts whose cumulative mass reaches the confidence
//! threshold. Outputs combine with the original probabilities — no
//! renormalization after selection.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::location_moe::{routing_entropy, top_k_indices};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};
use crate::text::TextEncoder;

pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Low-rank adapters for both FFN projections; `b_*` sides start at zero so
/// the adapter is a no-op at init.
pub struct LoraAdapter {
    pub a_in: ParamId,
    pub b_in: ParamId,
    pub a_out: ParamId,
    pub b_out: ParamId,
}

pub struct UserRouterParams {
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

pub struct PersonaMoe {
    pub base: FfnParams,
    pub adapters: Vec<LoraAdapter>,
    pub router: UserRouterParams,
    /// LoRA scaling `alpha / rank`.
    pub scaling: f64,
    /// Router input width per expert: `d_model + hist + prior`.
    pub in_dim: usize,
}

/// Routing outcome for one layer, recorded in the forward trace.
#[derive(Clone, Debug, PartialEq)]
pub struct UserRouting {
    pub probs: Vec<f64>,
    /// Minimal descending-probability prefix reaching the threshold.
    pub selected: Vec<usize>,
    /// Cumulative probability mass of the selection.
    pub cumulative: f64,
    pub entropy: f64,
    /// Experts actually evaluated by the weighted combine.
    pub evaluated: usize,
}

/// Group priors: frozen mean-pooled description encodings plus a trainable
/// linear projection, evaluated on-tape each forward pass.
pub struct GroupPriorParams {
    pub text_means: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub out_dim: usize,
}

impl GroupPriorParams {
    /// `text_means` is a `K x d_text` matrix (one mean-pooled description
    /// encoding per group); stored frozen. The projection is trainable.
    pub fn init(
        store: &mut ParamStore,
        text_means: Mat,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_text = text_means.ncols();
        GroupPriorParams {
            text_means: store.add("group_prior.text_means", text_means, false),
            proj_w: store.add(
                "group_prior.proj.w",
                uniform_init(rng, d_text, out_dim, d_text),
                true,
            ),
            proj_b: store.add("group_prior.proj.b", Array2::zeros((1, out_dim)), true),
            out_dim,
        }
    }
}

/// On-tape priors: `K x out_dim`, differentiable through the projection.
pub fn compute_group_priors_var(tape: &mut Tape, prior: &GroupPriorParams) -> Var {
    let means = tape.param(prior.text_means);
    let w = tape.param(prior.proj_w);
    let b = tape.param(prior.proj_b);
    let p = tape.matmul(means, w);
    tape.add_row(p, b)
}

/// Standalone prior computation: mean-pool each description's token
/// encodings, then apply the linear map. Identical math to the model path.
pub fn compute_group_priors(
    descriptions: &[&str],
    encoder: &dyn TextEncoder,
    w: &Mat,
    b: &Mat,
) -> Result<Mat> {
    if w.nrows() != encoder.dim() || b.nrows() != 1 || b.ncols() != w.ncols() {
        return Err(Error::dim(format!(
            "prior projection expects {}x{} weights and 1x{} bias",
            encoder.dim(),
            w.ncols(),
            w.ncols()
        )));
    }
    let means = crate::text::encode_texts(encoder, descriptions);
    Ok(means.dot(w) + b)
}

/// Build the expert set for one replaced FFN. The incoming weights are
/// registered frozen under the layer's prefix; every expert gets fresh LoRA
/// adapters (zero `b` sides). At init every expert therefore equals the
/// replaced FFN exactly.
#[allow(clippy::too_many_arguments)]
pub fn init_personalized_experts_from_ffn(
    store: &mut ParamStore,
    prefix: &str,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
    n_experts: usize,
    rank: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(FfnParams, Vec<LoraAdapter>, f64)> {
    if rank == 0 {
        return Err(Error::config("LoRA rank must be positive"));
    }
    let (d_in, d_ffn) = w1.dim();
    if w2.dim() != (d_ffn, d_in) || b1.dim() != (1, d_ffn) || b2.dim() != (1, d_in) {
        return Err(Error::dim("inconsistent FFN shapes for expert initialization"));
    }
    let base = FfnParams {
        w1: store.add(&format!("{prefix}.base.w1"), w1, false),
        b1: store.add(&format!("{prefix}.base.b1"), b1, false),
        w2: store.add(&format!("{prefix}.base.w2"), w2, false),
        b2: store.add(&format!("{prefix}.base.b2"), b2, false),
    };
    let mut adapters = Vec::with_capacity(n_experts);
    for i in 0..n_experts {
        adapters.push(LoraAdapter {
            a_in: store.add(
                &format!("{prefix}.expert{i}.a_in"),
                uniform_init(rng, d_in, rank, d_in),
                true,
            ),
            b_in: store.add(&format!("{prefix}.expert{i}.b_in"), Array2::zeros((rank, d_ffn)), true),
            a_out: store.add(
                &format!("{prefix}.expert{i}.a_out"),
                uniform_init(rng, d_ffn, rank, d_ffn),
                true,
            ),
            b_out: store.add(&format!("{prefix}.expert{i}.b_out"), Array2::zeros((rank, d_in)), true),
        });
    }
    Ok((base, adapters, alpha / rank as f64))
}

/// Plain two-layer FFN with GELU: `gelu(x W1 + b1) W2 + b2`.
pub fn ffn_var(tape: &mut Tape, ffn: &FfnParams, x: Var) -> Var {
    let w1 = tape.param(ffn.w1);
    let b1 = tape.param(ffn.b1);
    let w2 = tape.param(ffn.w2);
    let b2 = tape.param(ffn.b2);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let out = tape.matmul(h, w2);
    tape.add_row(out, b2)
}

/// One expert: the shared base FFN with this expert's LoRA deltas folded in.
pub fn apply_user_expert_var(tape: &mut Tape, moe: &PersonaMoe, i: usize, x: Var) -> Var {
    let ad = &moe.adapters[i];
    let w1 = tape.param(moe.base.w1);
    let b1 = tape.param(moe.base.b1);
    let w2 = tape.param(moe.base.w2);
    let b2 = tape.param(moe.base.b2);
    let a_in = tape.param(ad.a_in);
    let b_in = tape.param(ad.b_in);
    let a_out = tape.param(ad.a_out);
    let b_out = tape.param(ad.b_out);

    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let xa = tape.matmul(x, a_in);
    let delta = tape.matmul(xa, b_in);
    let delta = tape.scale(delta, moe.scaling);
    let h = tape.add(h, delta);
    let h = tape.gelu(h);

    let out = tape.matmul(h, w2);
    let out = tape.add_row(out, b2);
    let ha = tape.matmul(h, a_out);
    let delta = tape.matmul(ha, b_out);
    let delta = tape.scale(delta, moe.scaling);
    tape.add(out, delta)
}

/// Select the minimal prefix of experts (by descending probability, ties to
/// the lower index) whose cumulative probability reaches `threshold`.
/// Always selects at least one expert; a threshold above the total mass
/// selects everything.
pub fn select_experts_by_threshold(probs: &[f64], threshold: f64) -> (Vec<usize>, f64) {
    let order = top_k_indices(probs, probs.len());
    let mut selected = Vec::new();
    let mut cumulative = 0.0;
    for i in order {
        selected.push(i);
        cumulative += probs[i];
        if cumulative >= threshold {
            break;
        }
    }
    (selected, cumulative)
}

/// Score all experts for the current hidden state: fusion MLP over
/// `[pooled ; hist ; prior_i]` rows, linear gate, softmax across experts.
/// Returns the on-tape probability row and the routing decision at
/// `threshold`.
pub fn score_user_experts_var(
    tape: &mut Tape,
    moe: &PersonaMoe,
    pooled: Var,
    hist: Var,
    priors: Var,
    threshold: f64,
) -> Result<(Var, UserRouting)> {
    let k = moe.adapters.len();
    let (pr, pc) = tape.shape(pooled);
    let (hr, hc) = tape.shape(hist);
    let (kr, kc) = tape.shape(priors);
    if pr != 1 || hr != 1 || kr != k || pc + hc + kc != moe.in_dim {
        return Err(Error::dim(format!(
            "user router expects 1x{} fused rows across {k} experts, got 1x{pc} + 1x{hc} + {kr}x{kc}",
            moe.in_dim
        )));
    }
    let rep_p = tape.repeat_rows(pooled, k);
    let rep_h = tape.repeat_rows(hist, k);
    let fused = tape.concat_cols(&[rep_p, rep_h, priors]);
    let fw = tape.param(moe.router.fusion_w);
    let fb = tape.param(moe.router.fusion_b);
    let gw = tape.param(moe.router.gate_w);
    let gb = tape.param(moe.router.gate_b);
    let h = tape.matmul(fused, fw);
    let h = tape.add_row(h, fb);
    let h = tape.gelu(h);
    let scores = tape.matmul(h, gw);
    let scores = tape.add_row(scores, gb); // K x 1
    let scores = tape.transpose(scores); // 1 x K
    let probs = tape.softmax_rows(scores);
    let p = tape.value(probs).row(0).to_vec();
    let (selected, cumulative) = select_experts_by_threshold(&p, threshold);
    let entropy = routing_entropy(&p);
    let evaluated = selected.len();
    Ok((
        probs,
        UserRouting {
            probs: p,
            selected,
            cumulative,
            entropy,
            evaluated,
        },
    ))
}

/// Weighted combine of the selected experts on the token matrix `x`
/// (`T x d_model`), using original probabilities.
pub fn moe_ffn_var(
    tape: &mut Tape,
    moe: &PersonaMoe,
    x: Var,
    probs: Var,
    selected: &[usize],
) -> Result<Var> {
    if selected.is_empty() {
        return Err(Error::dim("personalized MoE needs at least one selected expert"));
    }
    let mut out: Option<Var> = None;
    for &i in selected {
        if i >= moe.adapters.len() {
            return Err(Error::dim(format!("expert index {i} out of range")));
        }
        let y = apply_user_expert_var(tape, moe, i, x);
        let p_i = tape.slice_cols(probs, i, i + 1);
        let weighted = tape.scalar_mul(p_i, y);
        out = Some(match out {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    Ok(out.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::HashedBowEncoder;
    use rand::prelude::*;

    const D: usize = 10;
    const F: usize = 14;
    const HDIM: usize = 4;
    const PDIM: usize = 5;
    const K: usize = 11;

    fn setup(seed: u64) -> (ParamStore, PersonaMoe, GroupPriorParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform_init(&mut rng, D, F, D);
        let b1 = uniform_init(&mut rng, 1, F, F);
        let w2 = uniform_init(&mut rng, F, D, F);
        let b2 = uniform_init(&mut rng, 1, D, D);
        let (base, adapters, scaling) = init_personalized_experts_from_ffn(
            &mut store, "layer9.moe", w1, b1, w2, b2, K, 2, 4.0, &mut rng,
        )
        .unwrap();
        let in_dim = D + HDIM + PDIM;
        let router = UserRouterParams {
            fusion_w: store.add("layer9.moe.router.fusion_w", uniform_init(&mut rng, in_dim, 8, in_dim), true),
            fusion_b: store.add("layer9.moe.router.fusion_b", Array2::zeros((1, 8)), true),
            gate_w: store.add("layer9.moe.router.gate_w", uniform_init(&mut rng, 8, 1, 8), true),
            gate_b: store.add("layer9.moe.router.gate_b", Array2::zeros((1, 1)), true),
        };
        let moe = PersonaMoe {
            base,
            adapters,
            router,
            scaling,
            in_dim,
        };
        let means = uniform_init(&mut rng, K, 6, 6);
        let prior = GroupPriorParams::init(&mut store, means, PDIM, &mut rng);
        (store, moe, prior)
    }

    fn rand_mat(seed: u64, r: usize, c: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn threshold_selection_oracle_cases() {
        // Dyadic probabilities keep the arithmetic exact.
        let p = [0.5, 0.25, 0.125, 0.125];
        assert_eq!(select_experts_by_threshold(&p, 0.8), (vec![0, 1, 2], 0.875));
        assert_eq!(select_experts_by_threshold(&p, 0.75), (vec![0, 1], 0.75));
        assert_eq!(select_experts_by_threshold(&p, 0.5), (vec![0], 0.5));
        // Threshold zero still selects one expert.
        assert_eq!(select_experts_by_threshold(&p, 0.0).0, vec![0]);
        // Threshold above total mass selects everything.
        assert_eq!(select_experts_by_threshold(&p, 1.5).0.len(), 4);
        // Ties break toward the lower index.
        let tied = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(select_experts_by_threshold(&tied, 0.6).0, vec![0, 1, 2]);
        // Highest first even when later in the list.
        let p = [0.1, 0.2, 0.7];
        assert_eq!(select_experts_by_threshold(&p, 0.8).0, vec![2, 1]);
    }

    #[test]
    fn experts_equal_base_ffn_at_init() {
        let (store, moe, _prior) = setup(5);
        let x = rand_mat(7, 3, D);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let base = ffn_var(&mut tape, &moe.base, xv);
        for i in 0..K {
            let e = apply_user_expert_var(&mut tape, &moe, i, xv);
            assert_eq!(tape.value(e), tape.value(base), "expert {i} differs at init");
        }
    }

    #[test]
    fn forced_one_hot_routing_reproduces_the_ffn() {
        let (store, moe, _prior) = setup(6);
        let x = rand_mat(8, 4, D);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let mut one_hot = vec![0.0; K];
        one_hot[3] = 1.0;
        let probs = tape.row(&one_hot);
        let out = moe_ffn_var(&mut tape, &moe, xv, probs, &[3]).unwrap();
        let base = ffn_var(&mut tape, &moe.base, xv);
        let (o, b) = (tape.value(out), tape.value(base));
        for (a, c) in o.iter().zip(b.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_output_matches_dense_oracle_with_nonzero_adapters() {
        let (mut store, moe, _prior) = setup(7);
        // Make the adapters matter.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for ad in &moe.adapters {
            for id in [ad.b_in, ad.b_out] {
                let dim = store.value(id).dim();
                *store.value_mut(id) = Mat::from_shape_fn(dim, |_| rng.random_range(-0.3..0.3));
            }
        }
        let x = rand_mat(9, 5, D);
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..K).map(|i| ((i * 7 + 3) % 5) as f64 + 1.0).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let (selected, _) = select_experts_by_threshold(&probs, 0.8);

        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let pv = tape.row(&probs);
        let out = moe_ffn_var(&mut tape, &moe, xv, pv, &selected).unwrap();

        // Dense oracle: evaluate every expert, weight unselected ones by 0.
        let mut expect = Mat::zeros((5, D));
        for i in 0..K {
            let w = if selected.contains(&i) { probs[i] } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let e = apply_user_expert_var(&mut tape, &moe, i, xv);
            expect = expect + tape.value(e) * w;
        }
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn routing_produces_valid_distribution_and_trace() {
        let (store, moe, prior) = setup(8);
        let mut tape = Tape::new(&store);
        let pooled = tape.constant(rand_mat(21, 1, D));
        let hist = tape.constant(rand_mat(22, 1, HDIM));
        let priors = compute_group_priors_var(&mut tape, &prior);
        let (probs, routing) =
            score_user_experts_var(&mut tape, &moe, pooled, hist, priors, 0.8).unwrap();
        assert_eq!(routing.probs.len(), K);
        assert!((routing.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(!routing.selected.is_empty());
        assert!(routing.cumulative >= 0.8 || routing.selected.len() == K);
        assert_eq!(routing.evaluated, routing.selected.len());
        assert!(routing.entropy <= (K as f64).ln() + 1e-12);
        assert_eq!(tape.value(probs).row(0).to_vec(), routing.probs);
        // Selected probabilities are the original ones, in descending order.
        for w in routing.selected.windows(2) {
            assert!(routing.probs[w[0]] >= routing.probs[w[1]]);
        }
    }

    #[test]
    fn group_priors_model_path_matches_standalone() {
        let enc = HashedBowEncoder::new(6, 123);
        let descs = ["walks in parks daily", "works night shifts", "visits museums"];
        let means = crate::text::encode_texts(&enc, &descs);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = GroupPriorParams::init(&mut store, means, PDIM, &mut rng);
        let mut tape = Tape::new(&store);
        let on_tape = compute_group_priors_var(&mut tape, &prior);
        let standalone = compute_group_priors(
            &descs,
            &enc,
            store.value(prior.proj_w),
            store.value(prior.proj_b),
        )
        .unwrap();
        assert_eq!(tape.value(on_tape), &standalone);
        // The text means are frozen; the projection is trainable.
        assert!(!store.is_trainable(prior.text_means));
        assert!(store.is_trainable(prior.proj_w));
    }

    #[test]
    fn router_dimension_mismatch_is_an_error() {
        let (store, moe, _prior) = setup(10);
        let mut tape = Tape::new(&store);
        let pooled = tape.constant(rand_mat(31, 1, D));
        let hist = tape.constant(rand_mat(32, 1, HDIM + 2));
        let priors = tape.constant(rand_mat(33, K, PDIM));
        assert!(score_user_experts_var(&mut tape, &moe, pooled, hist, priors, 0.8).is_err());
    }
}

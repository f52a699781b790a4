//! The truncated decoder-style backbone.
//!
//! Token layout per sample: `[prefix | projected history window | projected
//! (and semantics-enhanced) current window]`, with sinusoidal positional
//! encodings and a causal attention mask. The lower layers are standard
//! pre-LN transformer blocks; the upper layers replace their FFN with the
//! personalized MoE. Attention and base FFN weights play the role of a
//! pretrained trunk: they are frozen by policy, while LayerNorms, adapters,
//! routers, embeddings, prefix, and head train.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{
    FUNCTION_CATEGORIES, FUNCTION_CATEGORY_DESCRIPTIONS, NUM_FUNCTION_CATEGORIES, NUM_USER_GROUPS,
    TASK_PROMPT, USER_GROUP_DESCRIPTIONS,
};
use crate::data::{NormStats, Sample};
use crate::embedding::{embed_trajectory_var, EmbedDims, EmbeddingParams};
use crate::error::{Error, Result};
use crate::history::{encode_history_var, TcnConfig, TcnParams};
use crate::location_moe::{
    enhance_spatial_var, route_functions_var, top_k_indices, FunctionMoe, FunctionRouting,
};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::persona_moe::{
    compute_group_priors_var, ffn_var, init_personalized_experts_from_ffn, moe_ffn_var,
    score_user_experts_var, select_experts_by_threshold, FfnParams, GroupPriorParams, PersonaMoe,
    UserRouterParams, UserRouting,
};
use crate::tape::{Mat, Tape, Var};
use crate::text::{encode_texts, HashedBowEncoder, TextEncoder};

pub const CHECKPOINT_MAGIC: &str = "nextlocmoe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub profile: String,
    pub d_model: usize,
    pub n_heads: usize,
    /// Standard transformer layers below the MoE layers.
    pub n_lower_layers: usize,
    /// Upper layers whose FFN is replaced by the personalized MoE.
    pub n_moe_layers: usize,
    pub d_ffn: usize,
    pub embed: EmbedDims,
    pub tcn: TcnConfig,
    /// History window length (records).
    pub history_len: usize,
    /// Current window length (records).
    pub current_len: usize,
    /// Trainable prompt-prefix tokens.
    pub prefix_len: usize,
    pub func_top_k: usize,
    pub func_router_hidden: usize,
    /// Cumulative-probability threshold for personalized expert selection.
    pub confidence_threshold: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Group prior width after projection.
    pub d_prior: usize,
    /// Fusion MLP hidden width in the user router.
    pub d_fuse: usize,
    /// Fallback text-encoder dimension.
    pub d_text: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Full-size configuration matching the reference hyperparameters.
    pub fn full() -> Self {
        ModelConfig {
            profile: "full".into(),
            d_model: 256,
            n_heads: 8,
            n_lower_layers: 8,
            n_moe_layers: 4,
            d_ffn: 1024,
            embed: EmbedDims::default(),
            tcn: TcnConfig::default(),
            history_len: 40,
            current_len: 5,
            prefix_len: 8,
            func_top_k: 2,
            func_router_hidden: 80,
            confidence_threshold: 0.8,
            lora_rank: 8,
            lora_alpha: 16.0,
            d_prior: 64,
            d_fuse: 64,
            d_text: 64,
            dropout: 0.0,
        }
    }

    /// Small configuration sized for CPU-only training in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            profile: "desk".into(),
            d_model: 128,
            n_heads: 4,
            n_lower_layers: 2,
            n_moe_layers: 2,
            d_ffn: 256,
            embed: EmbedDims {
                spatial: 64,
                day: 8,
                hour: 8,
                duration: 8,
            },
            tcn: TcnConfig {
                kernel: 3,
                dilations: vec![1, 2],
                channels: 32,
                out_dim: 32,
            },
            history_len: 12,
            current_len: 4,
            prefix_len: 4,
            func_top_k: 2,
            func_router_hidden: 48,
            confidence_threshold: 0.8,
            lora_rank: 4,
            lora_alpha: 8.0,
            d_prior: 24,
            d_fuse: 32,
            d_text: 48,
            dropout: 0.0,
        }
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(format!(
                "unknown profile `{other}` (expected `full` or `desk`)"
            ))),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.prefix_len + self.history_len + self.current_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_lower_layers + self.n_moe_layers == 0 {
            return Err(Error::config("model needs at least one layer"));
        }
        for (name, v) in [
            ("d_ffn", self.d_ffn),
            ("history_len", self.history_len),
            ("current_len", self.current_len),
            ("prefix_len", self.prefix_len),
            ("func_router_hidden", self.func_router_hidden),
            ("lora_rank", self.lora_rank),
            ("d_prior", self.d_prior),
            ("d_fuse", self.d_fuse),
            ("d_text", self.d_text),
            ("embed.spatial", self.embed.spatial),
            ("embed.day", self.embed.day),
            ("embed.hour", self.embed.hour),
            ("embed.duration", self.embed.duration),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.func_top_k == 0 || self.func_top_k > NUM_FUNCTION_CATEGORIES {
            return Err(Error::config(format!(
                "func_top_k must be in 1..={NUM_FUNCTION_CATEGORIES}"
            )));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::config(
                "confidence_threshold must be in (0, 1]".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        self.tcn.validate()
    }
}

pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub enum Layer {
    Standard {
        attn: AttentionParams,
        ln1: LayerNormParams,
        ln2: LayerNormParams,
        ffn: FfnParams,
    },
    Moe {
        attn: AttentionParams,
        ln1: LayerNormParams,
        ln2: LayerNormParams,
        moe: PersonaMoe,
    },
}

/// External prior matrices (rows must match the expert counts); columns may
/// have any width — they replace the fallback encoder output.
#[derive(Default)]
pub struct PriorOverrides {
    pub function: Option<Mat>,
    pub group: Option<Mat>,
}

pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub embedding: EmbeddingParams,
    pub tcn: TcnParams,
    pub func_moe: FunctionMoe,
    pub prior: GroupPriorParams,
    pub layers: Vec<Layer>,
    pub input_proj_w: ParamId,
    pub input_proj_b: ParamId,
    pub prefix: ParamId,
    pub final_ln: LayerNormParams,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
    /// Normalization stats of the dataset this model was trained on.
    pub norm: Option<NormStats>,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_priors(config, seed, PriorOverrides::default())
    }

    pub fn with_priors(config: ModelConfig, seed: u64, priors: PriorOverrides) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let dims = config.embed;
        let total = dims.total();

        let embedding = EmbeddingParams::init(&mut store, dims, &mut rng);
        let tcn = TcnParams::init(&mut store, total, config.tcn.clone(), &mut rng)?;

        let encoder = HashedBowEncoder::new(config.d_text, seed ^ 0xa11c_e5);
        let func_priors = match priors.function {
            Some(m) => {
                if m.nrows() != NUM_FUNCTION_CATEGORIES {
                    return Err(Error::config(format!(
                        "function prior matrix needs {NUM_FUNCTION_CATEGORIES} rows, got {}",
                        m.nrows()
                    )));
                }
                m
            }
            None => encode_texts(&encoder, &FUNCTION_CATEGORY_DESCRIPTIONS),
        };
        let names: Vec<&str> = FUNCTION_CATEGORIES.to_vec();
        let func_moe = FunctionMoe::init(
            &mut store,
            &names,
            &func_priors,
            dims.spatial,
            total,
            config.tcn.out_dim,
            config.func_router_hidden,
            config.func_top_k,
            seed ^ 0xf00d,
        )?;

        let group_means = match priors.group {
            Some(m) => {
                if m.nrows() != NUM_USER_GROUPS {
                    return Err(Error::config(format!(
                        "group prior matrix needs {NUM_USER_GROUPS} rows, got {}",
                        m.nrows()
                    )));
                }
                m
            }
            None => encode_texts(&encoder, &USER_GROUP_DESCRIPTIONS),
        };
        let prior = GroupPriorParams::init(&mut store, group_means, config.d_prior, &mut rng);

        let input_proj_w = store.add("input_proj.w", uniform_init(&mut rng, total, d, total), true);
        let input_proj_b = store.add("input_proj.b", Array2::zeros((1, d)), true);

        // Prefix tokens start from the encoded task prompt, projected into
        // the model width by a fixed seeded map (cycled if the prompt is
        // shorter than the prefix).
        let prompt_tokens = encoder.encode_tokens(TASK_PROMPT);
        let prompt_proj = uniform_init(&mut rng, config.d_text, d, config.d_text);
        let prefix_init = Mat::from_shape_fn((config.prefix_len, d), |(i, j)| {
            let tok = &prompt_tokens[i % prompt_tokens.len()];
            (0..config.d_text).map(|t| tok[t] * prompt_proj[(t, j)]).sum()
        });
        let prefix = store.add("prefix.tokens", prefix_init, true);

        let mut layers = Vec::new();
        let n_layers = config.n_lower_layers + config.n_moe_layers;
        for l in 0..n_layers {
            let p = format!("layer{l}");
            let attn = AttentionParams {
                wq: store.add(&format!("{p}.attn.wq"), uniform_init(&mut rng, d, d, d), false),
                wk: store.add(&format!("{p}.attn.wk"), uniform_init(&mut rng, d, d, d), false),
                wv: store.add(&format!("{p}.attn.wv"), uniform_init(&mut rng, d, d, d), false),
                wo: store.add(&format!("{p}.attn.wo"), uniform_init(&mut rng, d, d, d), false),
            };
            let ln1 = LayerNormParams {
                gain: store.add(&format!("{p}.ln1.g"), Array2::ones((1, d)), true),
                bias: store.add(&format!("{p}.ln1.b"), Array2::zeros((1, d)), true),
            };
            let ln2 = LayerNormParams {
                gain: store.add(&format!("{p}.ln2.g"), Array2::ones((1, d)), true),
                bias: store.add(&format!("{p}.ln2.b"), Array2::zeros((1, d)), true),
            };
            if l < config.n_lower_layers {
                let ffn = FfnParams {
                    w1: store.add(&format!("{p}.ffn.w1"), uniform_init(&mut rng, d, config.d_ffn, d), false),
                    b1: store.add(&format!("{p}.ffn.b1"), Array2::zeros((1, config.d_ffn)), false),
                    w2: store.add(&format!("{p}.ffn.w2"), uniform_init(&mut rng, config.d_ffn, d, config.d_ffn), false),
                    b2: store.add(&format!("{p}.ffn.b2"), Array2::zeros((1, d)), false),
                };
                layers.push(Layer::Standard {
                    attn,
                    ln1,
                    ln2,
                    ffn,
                });
            } else {
                // The FFN this layer would have had becomes the shared
                // frozen base of its expert group.
                let w1 = uniform_init(&mut rng, d, config.d_ffn, d);
                let b1 = Array2::zeros((1, config.d_ffn));
                let w2 = uniform_init(&mut rng, config.d_ffn, d, config.d_ffn);
                let b2 = Array2::zeros((1, d));
                let (base, adapters, scaling) = init_personalized_experts_from_ffn(
                    &mut store,
                    &format!("{p}.moe"),
                    w1,
                    b1,
                    w2,
                    b2,
                    NUM_USER_GROUPS,
                    config.lora_rank,
                    config.lora_alpha,
                    &mut rng,
                )?;
                let in_dim = d + config.tcn.out_dim + config.d_prior;
                let router = UserRouterParams {
                    fusion_w: store.add(
                        &format!("{p}.moe.router.fusion_w"),
                        uniform_init(&mut rng, in_dim, config.d_fuse, in_dim),
                        true,
                    ),
                    fusion_b: store.add(&format!("{p}.moe.router.fusion_b"), Array2::zeros((1, config.d_fuse)), true),
                    gate_w: store.add(
                        &format!("{p}.moe.router.gate_w"),
                        uniform_init(&mut rng, config.d_fuse, 1, config.d_fuse),
                        true,
                    ),
                    gate_b: store.add(&format!("{p}.moe.router.gate_b"), Array2::zeros((1, 1)), true),
                };
                layers.push(Layer::Moe {
                    attn,
                    ln1,
                    ln2,
                    moe: PersonaMoe {
                        base,
                        adapters,
                        router,
                        scaling,
                        in_dim,
                    },
                });
            }
        }

        let final_ln = LayerNormParams {
            gain: store.add("final_ln.g", Array2::ones((1, d)), true),
            bias: store.add("final_ln.b", Array2::zeros((1, d)), true),
        };
        let head_w1 = store.add("head.w1", uniform_init(&mut rng, d, d, d), true);
        let head_b1 = store.add("head.b1", Array2::zeros((1, d)), true);
        let head_w2 = store.add("head.w2", uniform_init(&mut rng, d, 2, d), true);
        let head_b2 = store.add("head.b2", Array2::zeros((1, 2)), true);

        let mut state = ModelState {
            config,
            seed,
            store,
            embedding,
            tcn,
            func_moe,
            prior,
            layers,
            input_proj_w,
            input_proj_b,
            prefix,
            final_ln,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            norm: None,
        };
        apply_freeze_policy(&mut state);
        Ok(state)
    }
}

/// Enforce the trainability policy: the pretrained trunk (attention
/// projections, standard-layer FFNs, expert base FFN copies) and the raw
/// text means stay frozen; LayerNorms, LoRA adapters, both routers, the
/// group-prior projection, function experts, embeddings, input projection,
/// prefix, history encoder, and output head train. Returns the resulting
/// `(name, trainable)` manifest.
pub fn apply_freeze_policy(state: &mut ModelState) -> Vec<(String, bool)> {
    let ids: Vec<ParamId> = state.store.ids().collect();
    for id in ids {
        let name = state.store.name(id).to_string();
        let frozen = name.contains(".attn.")
            || name.contains(".ffn.")
            || name.contains(".moe.base.")
            || name == "group_prior.text_means";
        state.store.set_trainable(id, !frozen);
    }
    state
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.trainable))
        .collect()
}

/// Hooks for tests: freeze routing decisions or force exact routing
/// distributions (constants on the tape, so no gradient flows into them).
#[derive(Clone, Debug, Default)]
pub struct RoutingOverride {
    /// Fixed function-expert selection per current record.
    pub function_selection: Option<Vec<Vec<usize>>>,
    /// Fixed user-expert selection per MoE layer.
    pub user_selection: Option<Vec<Vec<usize>>>,
    /// Replace the function routing distribution (length 5).
    pub force_function_probs: Option<Vec<f64>>,
    /// Replace the user routing distribution per MoE layer (length 11 each).
    pub force_user_probs: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOpts {
    pub training: bool,
    pub dropout_seed: u64,
    pub ablate_function_moe: bool,
    pub ablate_persona_moe: bool,
    pub overrides: Option<RoutingOverride>,
}

/// Routing decisions recorded during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace {
    /// One entry per current-window record (empty when ablated).
    pub function: Vec<FunctionRouting>,
    /// One entry per MoE layer (empty when ablated).
    pub user: Vec<UserRouting>,
}

pub struct ForwardOutput {
    /// `1 x 2` predicted coordinates.
    pub pred: Var,
    /// Mean user-routing entropy across MoE layers, on-tape (absent when
    /// the personalized MoE is ablated).
    pub entropy: Option<Var>,
    pub trace: RoutingTrace,
}

fn positional_encoding(t: usize, d: usize) -> Mat {
    Mat::from_shape_fn((t, d), |(pos, i)| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn causal_mask(t: usize) -> Mat {
    Mat::from_shape_fn((t, t), |(i, j)| if j <= i { 0.0 } else { -1e30 })
}

fn attention_var(
    tape: &mut Tape,
    attn: &AttentionParams,
    x: Var,
    n_heads: usize,
    mask: Var,
) -> Var {
    let (_, d) = tape.shape(x);
    let dh = d / n_heads;
    let wq = tape.param(attn.wq);
    let wk = tape.param(attn.wk);
    let wv = tape.param(attn.wv);
    let wo = tape.param(attn.wo);
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask);
        let att = tape.softmax_rows(scores);
        heads.push(tape.matmul(att, vh));
    }
    let ctx = tape.concat_cols(&heads);
    tape.matmul(ctx, wo)
}

struct DropoutCtx {
    rng: Option<ChaCha8Rng>,
    p: f64,
}

impl DropoutCtx {
    fn new(cfg: &ModelConfig, opts: &ForwardOpts) -> Self {
        if opts.training && cfg.dropout > 0.0 {
            DropoutCtx {
                rng: Some(ChaCha8Rng::seed_from_u64(opts.dropout_seed)),
                p: cfg.dropout,
            }
        } else {
            DropoutCtx { rng: None, p: 0.0 }
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.p;
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rand::Rng::random_bool(rng, keep) {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.hadamard(x, m)
    }
}

/// Run the full model on one sample. All shapes are validated against the
/// configuration up front.
pub fn forward_on_tape(
    state: &ModelState,
    tape: &mut Tape,
    sample: &Sample,
    opts: &ForwardOpts,
) -> Result<ForwardOutput> {
    let cfg = &state.config;
    if sample.history.len() != cfg.history_len {
        return Err(Error::dim(format!(
            "sample has {} history records, config history_len is {}",
            sample.history.len(),
            cfg.history_len
        )));
    }
    if sample.current.len() != cfg.current_len {
        return Err(Error::dim(format!(
            "sample has {} current records, config current_len is {}",
            sample.current.len(),
            cfg.current_len
        )));
    }
    let mut dropout = DropoutCtx::new(cfg, opts);
    let overrides = opts.overrides.clone().unwrap_or_default();

    // Embed windows; encode history for the routers.
    let hist_emb = embed_trajectory_var(tape, &state.embedding, &sample.history)?;
    let cur_emb = embed_trajectory_var(tape, &state.embedding, &sample.current)?;
    let h_hist = encode_history_var(tape, &state.tcn, hist_emb)?;

    // Location semantics enhancement of each current record.
    let spatial = cfg.embed.spatial;
    let total = cfg.embed.total();
    let mut trace = RoutingTrace::default();
    let current_tokens = if opts.ablate_function_moe {
        cur_emb
    } else {
        let mut rows = Vec::with_capacity(cfg.current_len);
        for i in 0..cfg.current_len {
            let row = tape.slice_rows(cur_emb, i, i + 1);
            let (mut probs, mut routing) =
                route_functions_var(tape, &state.func_moe, row, h_hist)?;
            if let Some(forced) = &overrides.force_function_probs {
                probs = tape.row(forced);
                routing.probs = forced.clone();
                routing.selected = top_k_indices(forced, state.func_moe.top_k);
            }
            if let Some(sels) = &overrides.function_selection {
                routing.selected = sels[i].clone();
            }
            let xy = tape.row(&[sample.current[i].x, sample.current[i].y]);
            // The spatial block of the record embedding *is* the shared
            // expert output for these coordinates.
            let shared = tape.slice_cols(row, 0, spatial);
            let enhanced =
                enhance_spatial_var(tape, &state.func_moe, xy, shared, probs, &routing.selected);
            let rest = tape.slice_cols(row, spatial, total);
            rows.push(tape.concat_cols(&[enhanced, rest]));
            trace.function.push(routing);
        }
        tape.concat_rows(&rows)
    };

    // Assemble the token sequence.
    let tokens = tape.concat_rows(&[hist_emb, current_tokens]);
    let w_in = tape.param(state.input_proj_w);
    let b_in = tape.param(state.input_proj_b);
    let projected = tape.matmul(tokens, w_in);
    let projected = tape.add_row(projected, b_in);
    let prefix = tape.param(state.prefix);
    let x0 = tape.concat_rows(&[prefix, projected]);
    let t = cfg.n_tokens();
    let pe = tape.constant(positional_encoding(t, cfg.d_model));
    let mut x = tape.add(x0, pe);
    x = dropout.apply(tape, x);
    let mask = tape.constant(causal_mask(t));

    // Priors are shared by every MoE layer.
    let priors = compute_group_priors_var(tape, &state.prior);

    let mut entropies = Vec::new();
    let mut moe_index = 0usize;
    for layer in &state.layers {
        let (attn, ln1, ln2) = match layer {
            Layer::Standard { attn, ln1, ln2, .. } => (attn, ln1, ln2),
            Layer::Moe { attn, ln1, ln2, .. } => (attn, ln1, ln2),
        };
        let g1 = tape.param(ln1.gain);
        let b1 = tape.param(ln1.bias);
        let n1 = tape.layer_norm(x, g1, b1);
        let a = attention_var(tape, attn, n1, cfg.n_heads, mask);
        let a = dropout.apply(tape, a);
        x = tape.add(x, a);

        let g2 = tape.param(ln2.gain);
        let b2 = tape.param(ln2.bias);
        let n2 = tape.layer_norm(x, g2, b2);
        let f = match layer {
            Layer::Standard { ffn, .. } => ffn_var(tape, ffn, n2),
            Layer::Moe { moe, .. } => {
                if opts.ablate_persona_moe {
                    ffn_var(tape, &moe.base, n2)
                } else {
                    let pooled = tape.mean_rows(n2);
                    let (mut probs, mut routing) = score_user_experts_var(
                        tape,
                        moe,
                        pooled,
                        h_hist,
                        priors,
                        cfg.confidence_threshold,
                    )?;
                    if let Some(all_forced) = &overrides.force_user_probs {
                        let forced = &all_forced[moe_index];
                        probs = tape.row(forced);
                        routing.probs = forced.clone();
                        let (sel, cum) =
                            select_experts_by_threshold(forced, cfg.confidence_threshold);
                        routing.selected = sel;
                        routing.cumulative = cum;
                    }
                    if let Some(sels) = &overrides.user_selection {
                        routing.selected = sels[moe_index].clone();
                        routing.cumulative =
                            routing.selected.iter().map(|&i| routing.probs[i]).sum();
                    }
                    routing.evaluated = routing.selected.len();
                    entropies.push(tape.entropy(probs));
                    let out = moe_ffn_var(tape, moe, n2, probs, &routing.selected)?;
                    trace.user.push(routing);
                    moe_index += 1;
                    out
                }
            }
        };
        let f = dropout.apply(tape, f);
        x = tape.add(x, f);
    }

    let gf = tape.param(state.final_ln.gain);
    let bf = tape.param(state.final_ln.bias);
    let xf = tape.layer_norm(x, gf, bf);
    let last = tape.slice_rows(xf, t - 1, t);
    let hw1 = tape.param(state.head_w1);
    let hb1 = tape.param(state.head_b1);
    let hw2 = tape.param(state.head_w2);
    let hb2 = tape.param(state.head_b2);
    let h = tape.matmul(last, hw1);
    let h = tape.add_row(h, hb1);
    let h = tape.gelu(h);
    let pred = tape.matmul(h, hw2);
    let pred = tape.add_row(pred, hb2);

    let entropy = if entropies.is_empty() {
        None
    } else {
        let sum = entropies
            .iter()
            .skip(1)
            .fold(entropies[0], |acc, &e| tape.add(acc, e));
        Some(tape.scale(sum, 1.0 / entropies.len() as f64))
    };

    Ok(ForwardOutput {
        pred,
        entropy,
        trace,
    })
}

/// Evaluation-mode convenience: predicted coordinates plus the trace.
pub fn predict(state: &ModelState, sample: &Sample) -> Result<([f64; 2], RoutingTrace)> {
    predict_with(state, sample, &ForwardOpts::default())
}

pub fn predict_with(
    state: &ModelState,
    sample: &Sample,
    opts: &ForwardOpts,
) -> Result<([f64; 2], RoutingTrace)> {
    let mut tape = Tape::new(&state.store);
    let out = forward_on_tape(state, &mut tape, sample, opts)?;
    let p = tape.value(out.pred);
    Ok(([p[(0, 0)], p[(0, 1)]], out.trace))
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    norm: Option<NormStats>,
    params: Vec<ParamEntry>,
}

/// Serialize the full model (config + seed + normalization stats + every
/// parameter tensor with its trainable flag). JSON float round-tripping is
/// exact, so save/load preserves weights bit for bit.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        magic: CHECKPOINT_MAGIC.to_string(),
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        seed: state.seed,
        norm: state.norm,
        params: state
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                trainable: p.trainable,
                data: p.value.iter().copied().collect(),
            })
            .collect(),
    };
    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let writer = BufWriter::new(fs::File::create(&tmp)?);
    serde_json::to_writer(writer, &file)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let reader = BufReader::new(fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("{}: {e}", path.display()))
    })?);
    let file: CheckpointFile = serde_json::from_reader(reader)
        .map_err(|e| Error::Checkpoint(format!("{}: not a checkpoint: {e}", path.display())))?;
    if file.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic `{}`",
            path.display(),
            file.magic
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {} (supported: {CHECKPOINT_VERSION})",
            path.display(),
            file.version
        )));
    }
    let mut state = ModelState::new(file.config, file.seed)?;
    state.norm = file.norm;
    let source = path.display().to_string();
    let entries = file.params.into_iter().map(|e| {
        let m = Mat::from_shape_vec((e.rows, e.cols), e.data)
            .unwrap_or_else(|_| Mat::zeros((0, 0)));
        (e.name, m, e.trainable)
    });
    state.store.load_values(entries, &source)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, Target};

    pub(crate) fn tiny_config() -> ModelConfig {
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

    pub(crate) fn tiny_sample(seed: u64, m: usize, n: usize) -> Sample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rec = |t: i64| Record {
            loc: rng.random_range(0..50),
            x: rng.random_range(0.0..1.0),
            y: rng.random_range(0.0..1.0),
            weekday: rng.random_range(0..7),
            hour: rng.random_range(0..24),
            duration: rng.random_range(0.0..1.0),
            timestamp: t,
        };
        let history: Vec<Record> = (0..m).map(|i| rec(i as i64)).collect();
        let current: Vec<Record> = (0..n).map(|i| rec((m + i) as i64)).collect();
        Sample {
            user: "t".into(),
            history,
            current,
            target: Target {
                loc: 0,
                x: 0.5,
                y: 0.5,
            },
        }
    }

    #[test]
    fn construction_is_deterministic_per_seed() {
        let a = ModelState::new(tiny_config(), 3).unwrap();
        let b = ModelState::new(tiny_config(), 3).unwrap();
        let c = ModelState::new(tiny_config(), 4).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_ne!(a.store.checksum(), c.store.checksum());
    }

    #[test]
    fn forward_produces_finite_prediction_and_full_trace() {
        let state = ModelState::new(tiny_config(), 5).unwrap();
        let sample = tiny_sample(1, 4, 2);
        let (pred, trace) = predict(&state, &sample).unwrap();
        assert!(pred[0].is_finite() && pred[1].is_finite());
        assert_eq!(trace.function.len(), 2, "one function routing per current record");
        assert_eq!(trace.user.len(), 1, "one user routing per MoE layer");
        for f in &trace.function {
            assert_eq!(f.probs.len(), 5);
            assert_eq!(f.selected.len(), 2);
        }
        let u = &trace.user[0];
        assert_eq!(u.probs.len(), 11);
        assert!(!u.selected.is_empty() && u.evaluated == u.selected.len());

        // Bit-identical on repeat.
        let (pred2, _) = predict(&state, &sample).unwrap();
        assert_eq!(pred, pred2);
    }

    #[test]
    fn sample_length_mismatch_is_rejected() {
        let state = ModelState::new(tiny_config(), 5).unwrap();
        let bad = tiny_sample(1, 3, 2);
        assert!(predict(&state, &bad).is_err());
        let bad = tiny_sample(1, 4, 3);
        assert!(predict(&state, &bad).is_err());
    }

    #[test]
    fn freeze_policy_partitions_parameters() {
        let mut state = ModelState::new(tiny_config(), 6).unwrap();
        let manifest = apply_freeze_policy(&mut state);
        let frozen: Vec<&str> = manifest
            .iter()
            .filter(|(_, t)| !t)
            .map(|(n, _)| n.as_str())
            .collect();
        // Attention everywhere, the standard FFN, the MoE base, the text means.
        assert!(frozen.iter().all(|n| n.contains(".attn.")
            || n.contains(".ffn.")
            || n.contains(".moe.base.")
            || *n == "group_prior.text_means"));
        assert_eq!(
            frozen.len(),
            2 * 4 + 4 + 4 + 1,
            "two attention blocks, one standard FFN, one MoE base, text means"
        );
        // Everything the task adds on top must train.
        for needle in [
            "embed.w_xy",
            "tcn.conv0.w",
            "func_moe.expert0.w",
            "func_moe.router.w1",
            "layer1.moe.expert0.a_in",
            "layer1.moe.router.fusion_w",
            "group_prior.proj.w",
            "input_proj.w",
            "prefix.tokens",
            "layer0.ln1.g",
            "final_ln.g",
            "head.w1",
        ] {
            let (_, trainable) = manifest
                .iter()
                .find(|(n, _)| n == needle)
                .unwrap_or_else(|| panic!("missing param {needle}"));
            assert!(*trainable, "{needle} should be trainable");
        }
        // Re-applying after a manual flip restores the policy.
        let id = state.store.id("layer0.attn.wq").unwrap();
        state.store.set_trainable(id, true);
        apply_freeze_policy(&mut state);
        assert!(!state.store.is_trainable(id));
    }

    #[test]
    fn forced_one_hot_routing_equals_ablated_moe_at_init() {
        // With zero LoRA deltas, expert i == base FFN; forcing probability 1
        // on any single expert must reproduce the plain-FFN (ablated) model.
        let state = ModelState::new(tiny_config(), 7).unwrap();
        let sample = tiny_sample(2, 4, 2);
        let mut one_hot = vec![0.0; 11];
        one_hot[4] = 1.0;
        let forced = ForwardOpts {
            overrides: Some(RoutingOverride {
                force_user_probs: Some(vec![one_hot.clone()]),
                user_selection: Some(vec![vec![4]]),
                ..Default::default()
            }),
            ..Default::default()
        };
        let ablated = ForwardOpts {
            ablate_persona_moe: true,
            ..Default::default()
        };
        let (p_forced, trace) = predict_with(&state, &sample, &forced).unwrap();
        let (p_ablated, trace_ablated) = predict_with(&state, &sample, &ablated).unwrap();
        assert!((p_forced[0] - p_ablated[0]).abs() < 1e-12);
        assert!((p_forced[1] - p_ablated[1]).abs() < 1e-12);
        assert_eq!(trace.user[0].selected, vec![4]);
        assert!(trace_ablated.user.is_empty());
    }

    #[test]
    fn ablating_function_moe_changes_the_prediction() {
        let state = ModelState::new(tiny_config(), 8).unwrap();
        let sample = tiny_sample(3, 4, 2);
        let (base, _) = predict(&state, &sample).unwrap();
        let (ablated, trace) = predict_with(
            &state,
            &sample,
            &ForwardOpts {
                ablate_function_moe: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(trace.function.is_empty());
        assert_ne!(base, ablated);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut state = ModelState::new(tiny_config(), 9).unwrap();
        state.norm = Some(NormStats {
            min_x: 0.0,
            max_x: 10.0,
            min_y: -3.0,
            max_y: 5.0,
            duration_cap: 24.0,
        });
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state.store.checksum(), loaded.store.checksum());
        assert_eq!(state.config, loaded.config);
        assert_eq!(state.norm, loaded.norm);
        let sample = tiny_sample(4, 4, 2);
        assert_eq!(
            predict(&state, &sample).unwrap().0,
            predict(&loaded, &sample).unwrap().0
        );
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let state = ModelState::new(tiny_config(), 10).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace(CHECKPOINT_MAGIC, "other-format")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        save_checkpoint(&state, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"version\":1", "\"version\":99")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn profile_configs_validate_and_differ() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::full().embed.total(), 176);
        assert_eq!(ModelConfig::full().n_lower_layers, 8);
        assert_eq!(ModelConfig::full().n_moe_layers, 4);
        assert_eq!(ModelConfig::full().history_len, 40);
        assert_eq!(ModelConfig::full().current_len, 5);
        assert_eq!(ModelConfig::full().confidence_threshold, 0.8);
        assert!(ModelConfig::by_profile("nope").is_err());
        // Invalid configs are refused.
        let mut bad = tiny_config();
        bad.n_heads = 3; // 16 % 3 != 0
        assert!(ModelState::new(bad, 0).is_err());
        let mut bad = tiny_config();
        bad.confidence_threshold = 0.0;
        assert!(bad.validate().is_err());
    }
}


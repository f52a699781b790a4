//! History encoder: a dilated causal temporal convolution stack that
//! compresses the embedded history window into a single representation used
//! by both routers.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub kernel: usize,
    /// One convolution layer per dilation entry.
    pub dilations: Vec<usize>,
    /// Channel width of every convolution layer.
    pub channels: usize,
    /// Width of the final history representation.
    pub out_dim: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            kernel: 3,
            dilations: vec![1, 2],
            channels: 64,
            out_dim: 64,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.channels == 0 || self.out_dim == 0 {
            return Err(Error::config("TCN kernel, channels and out_dim must be positive"));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::config("TCN needs at least one layer with positive dilation"));
        }
        Ok(())
    }

    /// How far back (in records) the last output step can see.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

pub struct TcnParams {
    pub cfg: TcnConfig,
    /// `(weight, bias)` per convolution layer.
    pub convs: Vec<(ParamId, ParamId)>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl TcnParams {
    pub fn init(
        store: &mut ParamStore,
        in_dim: usize,
        cfg: TcnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut c_in = in_dim;
        for (l, _) in cfg.dilations.iter().enumerate() {
            let w = store.add(
                &format!("tcn.conv{l}.w"),
                uniform_init(rng, cfg.kernel * c_in, cfg.channels, cfg.kernel * c_in),
                true,
            );
            let b = store.add(&format!("tcn.conv{l}.b"), Array2::zeros((1, cfg.channels)), true);
            convs.push((w, b));
            c_in = cfg.channels;
        }
        let w_out = store.add(
            "tcn.out.w",
            uniform_init(rng, cfg.channels, cfg.out_dim, cfg.channels),
            true,
        );
        let b_out = store.add("tcn.out.b", Array2::zeros((1, cfg.out_dim)), true);
        Ok(TcnParams {
            cfg,
            convs,
            w_out,
            b_out,
        })
    }
}

/// Encode an embedded history window (`T x in_dim`) into a `1 x out_dim`
/// representation: dilated causal convolutions with GELU and residual
/// connections where widths match, then a linear readout of the last step.
pub fn encode_history_var(tape: &mut Tape, params: &TcnParams, z: Var) -> Result<Var> {
    let (t, _) = tape.shape(z);
    if t == 0 {
        return Err(Error::dim("history window is empty"));
    }
    let mut x = z;
    for (l, &dilation) in params.cfg.dilations.iter().enumerate() {
        let (w, b) = params.convs[l];
        let w = tape.param(w);
        let b = tape.param(b);
        let conv = tape.causal_conv(x, w, b, params.cfg.kernel, dilation);
        let act = tape.gelu(conv);
        let same_width = tape.shape(x).1 == tape.shape(act).1;
        x = if same_width { tape.add(act, x) } else { act };
    }
    let last = tape.slice_rows(x, t - 1, t);
    let w_out = tape.param(params.w_out);
    let b_out = tape.param(params.b_out);
    let proj = tape.matmul(last, w_out);
    Ok(tape.add_row(proj, b_out))
}

/// Plain-matrix wrapper over the tape path.
pub fn encode_history(store: &ParamStore, params: &TcnParams, z: &Mat) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let zv = tape.constant(z.clone());
    let h = encode_history_var(&mut tape, params, zv)?;
    Ok(tape.value(h).row(0).to_vec())
}

//! Spatio-temporal record embeddings.
//!
//! Each record embeds as the concatenation of four blocks: a linear
//! projection of its normalized `(x, y)` coordinates, learned weekday and
//! hour table lookups, and a linear projection of its scaled duration. The
//! spatial projection doubles as the shared expert of the location
//! semantics MoE — there is exactly one generator for the general spatial
//! embedding, referenced everywhere it is used.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Record;
use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Block widths of the concatenated record embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedDims {
    pub spatial: usize,
    pub day: usize,
    pub hour: usize,
    pub duration: usize,
}

impl Default for EmbedDims {
    fn default() -> Self {
        EmbedDims {
            spatial: 128,
            day: 16,
            hour: 16,
            duration: 16,
        }
    }
}

impl EmbedDims {
    pub fn total(&self) -> usize {
        self.spatial + self.day + self.hour + self.duration
    }

    /// Column range of the spatial block inside the concatenated embedding.
    pub fn spatial_range(&self) -> (usize, usize) {
        (0, self.spatial)
    }
}

pub struct EmbeddingParams {
    pub dims: EmbedDims,
    pub w_xy: ParamId,
    pub b_xy: ParamId,
    pub day_table: ParamId,
    pub hour_table: ParamId,
    pub w_dur: ParamId,
    pub b_dur: ParamId,
}

impl EmbeddingParams {
    pub fn init(store: &mut ParamStore, dims: EmbedDims, rng: &mut ChaCha8Rng) -> Self {
        EmbeddingParams {
            dims,
            w_xy: store.add("embed.w_xy", uniform_init(rng, 2, dims.spatial, 2), true),
            b_xy: store.add("embed.b_xy", Array2::zeros((1, dims.spatial)), true),
            day_table: store.add("embed.day_table", uniform_init(rng, 7, dims.day, dims.day), true),
            hour_table: store.add(
                "embed.hour_table",
                uniform_init(rng, 24, dims.hour, dims.hour),
                true,
            ),
            w_dur: store.add("embed.w_dur", uniform_init(rng, 1, dims.duration, 1), true),
            b_dur: store.add("embed.b_dur", Array2::zeros((1, dims.duration)), true),
        }
    }
}

/// Records must already be normalized; raw coordinates or unscaled durations
/// are a caller bug that would silently wreck training.
fn check_normalized(records: &[Record]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if let Err((field, msg)) = r.validate() {
            return Err(Error::data(format!("record {i}: field `{field}`: {msg}")));
        }
        if !(-0.5..=1.5).contains(&r.x) || !(-0.5..=1.5).contains(&r.y) || r.duration > 1.0 {
            return Err(Error::data(format!(
                "record {i} looks unnormalized (x={}, y={}, dur={}); normalize the dataset first",
                r.x, r.y, r.duration
            )));
        }
    }
    Ok(())
}

/// The shared spatial projection: `xy (n x 2) -> n x spatial`.
pub fn spatial_projection_var(tape: &mut Tape, params: &EmbeddingParams, xy: Var) -> Var {
    let w = tape.param(params.w_xy);
    let b = tape.param(params.b_xy);
    let p = tape.matmul(xy, w);
    tape.add_row(p, b)
}

/// Embed a trajectory into an `n x total` matrix:
/// `[spatial | weekday | hour | duration]` per row.
pub fn embed_trajectory_var(
    tape: &mut Tape,
    params: &EmbeddingParams,
    records: &[Record],
) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::dim("cannot embed an empty trajectory"));
    }
    check_normalized(records)?;
    let n = records.len();
    let xy = tape.constant(Mat::from_shape_fn((n, 2), |(i, j)| {
        if j == 0 {
            records[i].x
        } else {
            records[i].y
        }
    }));
    let spatial = spatial_projection_var(tape, params, xy);

    let day_idx: Vec<usize> = records.iter().map(|r| r.weekday as usize).collect();
    let hour_idx: Vec<usize> = records.iter().map(|r| r.hour as usize).collect();
    let day_table = tape.param(params.day_table);
    let hour_table = tape.param(params.hour_table);
    let day = tape.gather_rows(day_table, &day_idx);
    let hour = tape.gather_rows(hour_table, &hour_idx);

    let dur = tape.constant(Mat::from_shape_fn((n, 1), |(i, _)| records[i].duration));
    let w_dur = tape.param(params.w_dur);
    let b_dur = tape.param(params.b_dur);
    let dur = tape.matmul(dur, w_dur);
    let dur = tape.add_row(dur, b_dur);

    Ok(tape.concat_cols(&[spatial, day, hour, dur]))
}

/// Convenience wrapper: embed a single record to a plain vector, through the
/// same tape path the model uses.
pub fn embed_record(
    store: &ParamStore,
    params: &EmbeddingParams,
    record: &Record,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let v = embed_trajectory_var(&mut tape, params, std::slice::from_ref(record))?;
    Ok(tape.value(v).row(0).to_vec())
}

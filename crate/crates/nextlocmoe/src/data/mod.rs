//! Trajectory data model: records, datasets, normalization, user-level
//! partitioning, and sliding-window sample extraction.

pub mod io;
pub mod synthetic;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One visit: a location, its coordinates, the weekday and hour the visit
/// started, and how long it lasted (hours). `timestamp` is the global
/// ordering key in hours since the start of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub loc: u64,
    pub x: f64,
    pub y: f64,
    pub weekday: u8,
    pub hour: u8,
    pub duration: f64,
    pub timestamp: i64,
}

impl Record {
    /// Domain checks shared by every ingestion path.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.weekday > 6 {
            return Err(("w", format!("weekday {} outside 0..=6", self.weekday)));
        }
        if self.hour > 23 {
            return Err(("d", format!("hour {} outside 0..=23", self.hour)));
        }
        if !self.duration.is_finite() || self.duration < 0.0 {
            return Err(("dur", format!("duration {} must be finite and >= 0", self.duration)));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(("x", "coordinates must be finite".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    /// Dominant function category name, when known (synthetic cities record
    /// their ground truth here; real datasets may leave it empty).
    pub category: Option<String>,
}

/// Min-max coordinate scaling plus a fixed duration cap. Stored with the
/// dataset so predictions can be mapped back to raw coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
    pub duration_cap: f64,
}

pub const DEFAULT_DURATION_CAP: f64 = 24.0;

impl NormStats {
    pub fn normalize_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.min_x) / (self.max_x - self.min_x),
            (y - self.min_y) / (self.max_y - self.min_y),
        )
    }

    pub fn denormalize_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x * (self.max_x - self.min_x) + self.min_x,
            y * (self.max_y - self.min_y) + self.min_y,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    pub grid: Option<usize>,
    /// Present once the dataset has been normalized.
    pub norm: Option<NormStats>,
}

/// A set of users with chronological visit records over a shared location
/// universe. User iteration order is the sorted user id order, which keeps
/// every downstream computation deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub users: BTreeMap<String, Vec<Record>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn n_records(&self) -> usize {
        self.users.values().map(|r| r.len()).sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.meta.norm.is_some()
    }

    /// Every record must reference a known location and be chronologically
    /// ordered within its user.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = self.locations.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        if ids.len() != before {
            return Err(Error::data("duplicate location ids"));
        }
        for (user, records) in &self.users {
            let mut prev = i64::MIN;
            for (i, r) in records.iter().enumerate() {
                if let Err((field, msg)) = r.validate() {
                    return Err(Error::data(format!(
                        "user `{user}` record {i}: field `{field}`: {msg}"
                    )));
                }
                if ids.binary_search(&r.loc).is_err() {
                    return Err(Error::data(format!(
                        "user `{user}` record {i} references unknown location {}",
                        r.loc
                    )));
                }
                if r.timestamp < prev {
                    return Err(Error::data(format!(
                        "user `{user}` records not in chronological order at index {i}"
                    )));
                }
                prev = r.timestamp;
            }
        }
        Ok(())
    }
}

/// Min-max normalize coordinates (bounds taken over the location universe,
/// so the full candidate set maps into the unit square) and scale durations
/// by a fixed cap, clipping at 1. Fails on an already-normalized dataset and
/// on degenerate coordinate ranges.
pub fn normalize_coordinates(ds: &Dataset, duration_cap: f64) -> Result<Dataset> {
    if ds.is_normalized() {
        return Err(Error::data("dataset is already normalized"));
    }
    if ds.locations.is_empty() {
        return Err(Error::data("cannot normalize a dataset with no locations"));
    }
    if !(duration_cap > 0.0) {
        return Err(Error::config("duration cap must be positive"));
    }
    let min_x = ds.locations.iter().map(|l| l.x).fold(f64::INFINITY, f64::min);
    let max_x = ds.locations.iter().map(|l| l.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = ds.locations.iter().map(|l| l.y).fold(f64::INFINITY, f64::min);
    let max_y = ds.locations.iter().map(|l| l.y).fold(f64::NEG_INFINITY, f64::max);
    if !(max_x > min_x) || !(max_y > min_y) {
        return Err(Error::data(
            "degenerate coordinate range: all locations share an x or y value",
        ));
    }
    let stats = NormStats {
        min_x,
        max_x,
        min_y,
        max_y,
        duration_cap,
    };
    let mut out = ds.clone();
    for loc in &mut out.locations {
        let (x, y) = stats.normalize_xy(loc.x, loc.y);
        loc.x = x;
        loc.y = y;
    }
    for records in out.users.values_mut() {
        for r in records.iter_mut() {
            let (x, y) = stats.normalize_xy(r.x, r.y);
            r.x = x;
            r.y = y;
            r.duration = (r.duration / duration_cap).min(1.0);
        }
    }
    out.meta.norm = Some(stats);
    Ok(out)
}

/// Invert [`normalize_coordinates`]. Durations are unscaled by the cap
/// (exact as long as no clipping occurred on the forward pass).
pub fn denormalize_coordinates(ds: &Dataset) -> Result<Dataset> {
    let stats = ds
        .meta
        .norm
        .ok_or_else(|| Error::data("dataset is not normalized"))?;
    let mut out = ds.clone();
    for loc in &mut out.locations {
        let (x, y) = stats.denormalize_xy(loc.x, loc.y);
        loc.x = x;
        loc.y = y;
    }
    for records in out.users.values_mut() {
        for r in records.iter_mut() {
            let (x, y) = stats.denormalize_xy(r.x, r.y);
            r.x = x;
            r.y = y;
            r.duration *= stats.duration_cap;
        }
    }
    out.meta.norm = None;
    Ok(out)
}

/// Disjoint user-level split. Fractions are applied with floor for the first
/// two splits and the remainder goes to test, so 10 users under (0.7, 0.1)
/// yield 7/1/2. Users are shuffled deterministically by `seed` first.
pub fn partition_users(
    ds: &Dataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::config(format!(
            "invalid split fractions ({train_frac}, {val_frac}); need train > 0, val >= 0, train + val < 1"
        )));
    }
    let mut user_ids: Vec<&String> = ds.users.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    user_ids.shuffle(&mut rng);
    let n = user_ids.len();
    let n_train = (train_frac * n as f64).floor() as usize;
    let n_val = (val_frac * n as f64).floor() as usize;
    if n_train == 0 || n_train + n_val >= n {
        return Err(Error::data(format!(
            "cannot split {n} users into train/val/test with fractions ({train_frac}, {val_frac})"
        )));
    }
    let make = |ids: &[&String]| -> Dataset {
        Dataset {
            locations: ds.locations.clone(),
            users: ids
                .iter()
                .map(|&id| (id.clone(), ds.users[id].clone()))
                .collect(),
            meta: ds.meta.clone(),
        }
    };
    Ok((
        make(&user_ids[..n_train]),
        make(&user_ids[n_train..n_train + n_val]),
        make(&user_ids[n_train + n_val..]),
    ))
}

/// Prediction target: the next visited location and its coordinates (in the
/// dataset's current coordinate frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub loc: u64,
    pub x: f64,
    pub y: f64,
}

/// One training/evaluation sample: `history_len` past records, `current_len`
/// most recent records, and the next record as the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub user: String,
    pub history: Vec<Record>,
    pub current: Vec<Record>,
    pub target: Target,
}

/// Slide a window of `history_len + current_len` records over each user's
/// chronological sequence with the given stride; the record immediately
/// after the window is the target. Users with fewer than
/// `history_len + current_len + 1` records contribute nothing.
pub fn window_trajectories(
    ds: &Dataset,
    history_len: usize,
    current_len: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if history_len == 0 || current_len == 0 {
        return Err(Error::config("history and current window lengths must be positive"));
    }
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let span = history_len + current_len;
    let mut samples = Vec::new();
    for (user, records) in &ds.users {
        if records.len() < span + 1 {
            continue;
        }
        let mut start = 0;
        while start + span < records.len() {
            let target = &records[start + span];
            samples.push(Sample {
                user: user.clone(),
                history: records[start..start + history_len].to_vec(),
                current: records[start + history_len..start + span].to_vec(),
                target: Target {
                    loc: target.loc,
                    x: target.x,
                    y: target.y,
                },
            });
            start += stride;
        }
    }
    Ok(samples)
}

pub struct SplitWindows {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Partition users 7:1:2, then window each split.
pub fn split_windows(
    ds: &Dataset,
    history_len: usize,
    current_len: usize,
    stride: usize,
    seed: u64,
) -> Result<SplitWindows> {
    let (train_ds, val_ds, test_ds) = partition_users(ds, 0.7, 0.1, seed)?;
    Ok(SplitWindows {
        train: window_trajectories(&train_ds, history_len, current_len, stride)?,
        val: window_trajectories(&val_ds, history_len, current_len, stride)?,
        test: window_trajectories(&test_ds, history_len, current_len, stride)?,
    })
}

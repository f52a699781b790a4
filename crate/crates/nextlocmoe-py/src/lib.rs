//! Python bindings: `Dataset` and `Model` wrappers plus a city generator.
//! Reports cross the boundary as plain dicts (via their JSON form), so the
//! Python side needs no schema of its own.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};
use serde::Serialize;

use nextlocmoe::backbone::{
    load_checkpoint, predict as predict_xy, save_checkpoint, ForwardOpts, ModelConfig, ModelState,
};
use nextlocmoe::data::io::{load_dataset, save_dataset};
use nextlocmoe::data::synthetic::{generate_synthetic_city, SyntheticCityConfig};
use nextlocmoe::data::{
    normalize_coordinates, split_windows, window_trajectories, DEFAULT_DURATION_CAP,
};
use nextlocmoe::eval::{evaluate, expert_activation_report, zero_shot_transfer};
use nextlocmoe::kdtree::KdTree;
use nextlocmoe::train::{train as train_model, TrainConfig, TrainSink};

fn err(e: nextlocmoe::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None().into_bound(py),
        serde_json::Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                PyInt::new(py, i).into_any()
            } else {
                PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any()
            }
        }
        serde_json::Value::String(s) => PyString::new(py, s).into_any(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_any()
        }
    })
}

fn py_to_json(v: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    if v.is_none() {
        return Ok(serde_json::Value::Null);
    }
    if let Ok(b) = v.cast::<PyBool>() {
        return Ok(serde_json::Value::Bool(b.is_true()));
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(serde_json::Value::from(i));
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(serde_json::Value::from(f));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(serde_json::Value::String(s));
    }
    if let Ok(list) = v.cast::<PyList>() {
        let mut items = Vec::with_capacity(list.len());
        for item in list.iter() {
            items.push(py_to_json(&item)?);
        }
        return Ok(serde_json::Value::Array(items));
    }
    if let Ok(dict) = v.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, val) in dict.iter() {
            map.insert(k.extract::<String>()?, py_to_json(&val)?);
        }
        return Ok(serde_json::Value::Object(map));
    }
    Err(PyValueError::new_err(format!(
        "unsupported config value of type {}",
        v.get_type().name()?
    )))
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value)
        .map_err(|e| PyValueError::new_err(format!("serialization failed: {e}")))?;
    json_to_py(py, &json)
}

/// Strict key-by-key merge of a Python dict into a config's JSON form.
fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value, path: &str) -> PyResult<()> {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v, &child)?,
                    None => return Err(PyKeyError::new_err(format!("unknown config key `{child}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: nextlocmoe::data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Load a dataset directory written by `save` or the CLI.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_dataset(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_dataset(&self.inner, &dir).map_err(err)
    }

    /// Min-max normalize coordinates (returns a new dataset).
    fn normalize(&self) -> PyResult<Self> {
        Ok(PyDataset {
            inner: normalize_coordinates(&self.inner, DEFAULT_DURATION_CAP).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.meta.name.clone()
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.inner.n_records()
    }

    #[getter]
    fn n_locations(&self) -> usize {
        self.inner.locations.len()
    }

    #[getter]
    fn is_normalized(&self) -> bool {
        self.inner.is_normalized()
    }

    fn users(&self) -> Vec<String> {
        self.inner.users.keys().cloned().collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name='{}', users={}, locations={}, records={}, normalized={})",
            self.inner.meta.name,
            self.inner.users.len(),
            self.inner.locations.len(),
            self.inner.n_records(),
            if self.inner.is_normalized() { "True" } else { "False" }
        )
    }
}

/// Generate a synthetic persona-driven city.
#[pyfunction]
#[pyo3(signature = (locations=320, users=160, days=21, grid=20, seed=7, name=None))]
fn generate_city(
    locations: usize,
    users: usize,
    days: usize,
    grid: usize,
    seed: u64,
    name: Option<String>,
) -> PyResult<PyDataset> {
    let mut cfg = SyntheticCityConfig {
        n_locations: locations,
        n_users: users,
        days,
        grid,
        seed,
        ..Default::default()
    };
    if let Some(n) = name {
        cfg.name = n;
    }
    Ok(PyDataset {
        inner: generate_synthetic_city(&cfg).map_err(err)?,
    })
}

#[pyclass(name = "Model")]
struct PyModel {
    state: ModelState,
}

impl PyModel {
    fn normalized(&self, dataset: &PyDataset) -> PyResult<nextlocmoe::data::Dataset> {
        if dataset.inner.is_normalized() {
            Ok(dataset.inner.clone())
        } else {
            normalize_coordinates(&dataset.inner, DEFAULT_DURATION_CAP).map_err(err)
        }
    }
}

#[pymethods]
impl PyModel {
    /// Build a fresh model. `overrides` is a nested dict merged over the
    /// profile's configuration (unknown keys are rejected).
    #[new]
    #[pyo3(signature = (profile="desk", seed=0, overrides=None))]
    fn new(profile: &str, seed: u64, overrides: Option<Bound<'_, PyDict>>) -> PyResult<Self> {
        let base = ModelConfig::by_profile(profile).map_err(err)?;
        let config = match overrides {
            None => base,
            Some(dict) => {
                let mut value = serde_json::to_value(&base)
                    .map_err(|e| PyValueError::new_err(e.to_string()))?;
                merge_json(&mut value, py_to_json(dict.as_any())?, "")?;
                serde_json::from_value(value)
                    .map_err(|e| PyValueError::new_err(format!("bad config override: {e}")))?
            }
        };
        Ok(PyModel {
            state: ModelState::new(config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            state: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(err)
    }

    #[getter]
    fn checksum(&self) -> String {
        self.state.store.checksum()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.state.store.n_scalars()
    }

    #[getter]
    fn n_trainable_parameters(&self) -> usize {
        self.state.store.n_trainable_scalars()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.state.config)
    }

    /// Train on a dataset (7:1:2 user split) and return the epoch-by-epoch
    /// report as a dict.
    #[pyo3(signature = (dataset, epochs=20, batch_size=16, lr=1e-4, entropy_weight=300.0, seed=0, stride=None))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        entropy_weight: f64,
        seed: u64,
        stride: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.normalized(dataset)?;
        let cfg = &self.state.config;
        let stride = stride.unwrap_or(cfg.current_len).max(1);
        let windows =
            split_windows(&ds, cfg.history_len, cfg.current_len, stride, seed).map_err(err)?;
        if windows.train.is_empty() {
            return Err(PyValueError::new_err(format!(
                "no training windows: dataset `{}` is too short for history {} + current {}",
                ds.meta.name, cfg.history_len, cfg.current_len
            )));
        }
        let train_cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            entropy_weight,
            seed,
            ..Default::default()
        };
        self.state.norm = ds.meta.norm;
        let report = train_model(
            &mut self.state,
            &windows.train,
            &windows.val,
            &train_cfg,
            TrainSink::default(),
        )
        .map_err(err)?;
        to_dict(py, &report)
    }

    /// Hit@k over the chosen split ("train", "val", "test", or "all").
    #[pyo3(signature = (dataset, ks=vec![1, 5, 10], split="test", seed=0, stride=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        ks: Vec<usize>,
        split: &str,
        seed: u64,
        stride: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.normalized(dataset)?;
        let cfg = &self.state.config;
        let stride = stride.unwrap_or(cfg.current_len).max(1);
        let windows =
            split_windows(&ds, cfg.history_len, cfg.current_len, stride, seed).map_err(err)?;
        let samples = match split {
            "train" => windows.train,
            "val" => windows.val,
            "test" => windows.test,
            "all" => {
                let mut all = windows.train;
                all.extend(windows.val);
                all.extend(windows.test);
                all
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown split `{other}` (expected train, val, test, or all)"
                )))
            }
        };
        if samples.is_empty() {
            return Err(PyValueError::new_err(format!("split `{split}` has no windows")));
        }
        let report =
            evaluate(&self.state, &samples, &ds.locations, &ks, &ForwardOpts::default())
                .map_err(err)?;
        to_dict(py, &report)
    }

    /// Predict coordinates for one user window; returns the prediction and
    /// the `top` nearest candidate locations.
    #[pyo3(signature = (dataset, user, index=0, top=10, stride=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        user: &str,
        index: usize,
        top: usize,
        stride: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.normalized(dataset)?;
        let cfg = &self.state.config;
        let stride = stride.unwrap_or(cfg.current_len).max(1);
        let all = window_trajectories(&ds, cfg.history_len, cfg.current_len, stride).map_err(err)?;
        let windows: Vec<&nextlocmoe::data::Sample> =
            all.iter().filter(|s| s.user == user).collect();
        let sample = windows.get(index).ok_or_else(|| {
            PyValueError::new_err(format!(
                "user `{user}` has {} windows, index {index} is out of range",
                windows.len()
            ))
        })?;
        let (pred, _) = predict_xy(&self.state, sample).map_err(err)?;
        let tree = KdTree::from_locations(&ds.locations);
        let out = PyDict::new(py);
        out.set_item("user", user)?;
        out.set_item("window_index", index)?;
        out.set_item("n_windows", windows.len())?;
        out.set_item("pred", (pred[0], pred[1]))?;
        out.set_item("target_loc", sample.target.loc)?;
        let cands = PyList::empty(py);
        for n in tree.nearest(pred[0], pred[1], top) {
            let c = PyDict::new(py);
            c.set_item("loc_id", n.id)?;
            c.set_item("d2", n.d2)?;
            cands.append(c)?;
        }
        out.set_item("candidates", cands)?;
        Ok(out.into_any())
    }

    /// Zero-shot Hit@k on an unseen city; weights are verified unchanged.
    #[pyo3(signature = (dataset, ks=vec![1, 5, 10], stride=None))]
    fn transfer_eval<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        ks: Vec<usize>,
        stride: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.normalized(dataset)?;
        let stride = stride.unwrap_or(self.state.config.current_len).max(1);
        let report = zero_shot_transfer(&self.state, &ds, stride, &ks).map_err(err)?;
        to_dict(py, &report)
    }

    /// Personalized-expert usage statistics over every window of a dataset.
    #[pyo3(signature = (dataset, stride=None))]
    fn activation_report<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        stride: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.normalized(dataset)?;
        let cfg = &self.state.config;
        let stride = stride.unwrap_or(cfg.current_len).max(1);
        let samples = window_trajectories(&ds, cfg.history_len, cfg.current_len, stride).map_err(err)?;
        if samples.is_empty() {
            return Err(PyValueError::new_err("dataset yields no windows"));
        }
        let report = expert_activation_report(&self.state, &samples).map_err(err)?;
        to_dict(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(profile='{}', d_model={}, params={}, trainable={})",
            self.state.config.profile,
            self.state.config.d_model,
            self.state.store.n_scalars(),
            self.state.store.n_trainable_scalars()
        )
    }
}

#[pymodule]
fn nextlocmoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_city, m)?)?;
    m.add("FUNCTION_CATEGORIES", nextlocmoe::assets::FUNCTION_CATEGORIES.to_vec())?;
    m.add("USER_GROUPS", nextlocmoe::assets::USER_GROUPS.to_vec())?;
    Ok(())
}

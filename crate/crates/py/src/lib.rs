//! Python bindings: volumes, preprocessing, corruption, the autoencoder and
//! classifiers, phantoms, and the evaluation statistics.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use voxmim::architecture::{build_classifier, build_mae, Classifier, ClassifierMode, EncoderSource, MaskedAutoencoder, ModelConfig};
use voxmim::corruption::{apply_plan, partition_cubes as partition, plan_for, plan_mask, MaskMode, MaskPolicy};
use voxmim::metrics::{self, Metric, PredictionSet, ZeroMethod};
use voxmim::rng::seeded;
use voxmim::synthdata::{self, PhantomConfig};
use voxmim::trainer::{self, LossRegion, TrainConfig, TrainingMetadata};
use voxmim::volume::{self, PreprocessConfig, PreprocessOrder, Volume};
use voxmim::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mask_mode(mode: &str) -> PyResult<MaskMode> {
    match mode {
        "static" => Ok(MaskMode::Static),
        "dynamic" => Ok(MaskMode::Dynamic),
        other => Err(PyValueError::new_err(format!("mask mode must be 'static' or 'dynamic', got {other:?}"))),
    }
}

fn predictions(labels: &[u8], scores: &[f64]) -> PyResult<PredictionSet> {
    let ids: Vec<String> = (0..labels.len()).map(|i| format!("{i:08}")).collect();
    PredictionSet::from_parts(&ids, labels, scores).map_err(err)
}

/// A scalar 3D image, x-fastest, with voxel spacing in millimetres.
#[pyclass(name = "Volume", module = "voxmim", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> PyResult<Self> {
        Volume::new(dims, spacing, voxels).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing()
    }

    #[getter]
    fn voxels(&self) -> Vec<f32> {
        self.inner.voxels().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f32> {
        let [dx, dy, dz] = self.inner.dims();
        if x >= dx || y >= dy || z >= dz {
            return Err(PyValueError::new_err("voxel index out of range"));
        }
        Ok(self.inner.get(x, y, z))
    }

    fn min_max(&self) -> (f32, f32) {
        self.inner.min_max()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        volume::load_volume(path).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

fn unwrap_volumes(volumes: Vec<PyRef<'_, PyVolume>>) -> Vec<Volume> {
    volumes.iter().map(|v| v.inner.clone()).collect()
}

/// Resample, clip to percentiles and min-max normalise.
#[pyfunction]
#[pyo3(signature = (volume, target_spacing=None, lo_percentile=1.0, hi_percentile=99.0, normalize_first=false))]
fn preprocess(
    volume: &PyVolume,
    target_spacing: Option<[f64; 3]>,
    lo_percentile: f64,
    hi_percentile: f64,
    normalize_first: bool,
) -> PyResult<PyVolume> {
    let mut config = PreprocessConfig {
        lo_percentile,
        hi_percentile,
        ..PreprocessConfig::default()
    };
    if let Some(s) = target_spacing {
        config.target_spacing = s;
    }
    if normalize_first {
        config.order = PreprocessOrder::NormalizeThenClip;
    }
    volume::preprocess(&volume.inner, &config).map(|inner| PyVolume { inner }).map_err(err)
}

#[pyfunction]
fn percentile(values: Vec<f64>, p: f64) -> PyResult<f64> {
    if values.is_empty() {
        return Err(PyValueError::new_err("percentile of empty data"));
    }
    Ok(volume::percentile(&values, p))
}

/// Cube extents `(origin, size)` tiling a volume.
#[pyfunction]
fn partition_cubes(volume_dims: [usize; 3], cube_dims: [usize; 3]) -> PyResult<Vec<([usize; 3], [usize; 3])>> {
    let grid = partition(volume_dims, cube_dims).map_err(err)?;
    Ok(grid.cubes().iter().map(|c| (c.origin, c.size)).collect())
}

/// Draws a corruption plan and applies it. Returns the corrupted volume,
/// the voxel mask of selected cubes and the sampled fraction.
#[pyfunction]
#[pyo3(signature = (volume, mode="static", seed=0))]
fn corrupt(volume: &PyVolume, mode: &str, seed: u64) -> PyResult<(PyVolume, Vec<bool>, f64)> {
    let policy = MaskPolicy::preset(mask_mode(mode)?);
    let (grid, plan) = plan_for(volume.inner.dims(), &policy, &mut seeded(seed)).map_err(err)?;
    let out = apply_plan(&volume.inner, &grid, &plan).map_err(err)?;
    Ok((PyVolume { inner: out }, plan_mask(&grid, &plan), plan.sampled_fraction))
}

#[pyfunction]
fn roc_auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<f64> {
    metrics::roc_auc_scores(&labels, &scores).map_err(err)
}

/// `{accuracy, precision, recall, f1}` at `score >= threshold`.
#[pyfunction]
#[pyo3(signature = (labels, scores, threshold=0.5))]
fn threshold_metrics(labels: Vec<u8>, scores: Vec<f64>, threshold: f64) -> PyResult<HashMap<&'static str, f64>> {
    if labels.len() != scores.len() {
        return Err(PyValueError::new_err("labels and scores differ in length"));
    }
    let m = metrics::threshold_metrics_scores(&labels, &scores, threshold);
    Ok(HashMap::from([
        ("accuracy", m.accuracy),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
    ]))
}

/// `{metric: (point, ci_lo, ci_hi)}` from a percentile bootstrap.
#[pyfunction]
#[pyo3(signature = (labels, scores, n=100, threshold=0.5, seed=0))]
fn bootstrap(labels: Vec<u8>, scores: Vec<f64>, n: usize, threshold: f64, seed: u64) -> PyResult<HashMap<&'static str, (f64, f64, f64)>> {
    let report = metrics::bootstrap(&predictions(&labels, &scores)?, n, threshold, seed).map_err(err)?;
    Ok(Metric::ALL
        .iter()
        .map(|&m| {
            let r = report.get(m);
            (m.name(), (r.point, r.ci_lo, r.ci_hi))
        })
        .collect())
}

/// Two-sided p value; `zero_method` is "wilcox" or "pratt".
#[pyfunction]
#[pyo3(signature = (a, b, zero_method="wilcox"))]
fn wilcoxon_signed_rank(a: Vec<f64>, b: Vec<f64>, zero_method: &str) -> PyResult<f64> {
    let zero = match zero_method {
        "wilcox" => ZeroMethod::Wilcox,
        "pratt" => ZeroMethod::Pratt,
        other => return Err(PyValueError::new_err(format!("unknown zero_method {other:?}"))),
    };
    metrics::wilcoxon_signed_rank_with(&a, &b, zero).map_err(err)
}

/// Paired bootstrap comparison in AUC: `(auc_a, auc_b, p_value, significant)`.
#[pyfunction]
#[pyo3(signature = (labels, scores_a, scores_b, n=100, seed=0))]
fn compare_methods(labels: Vec<u8>, scores_a: Vec<f64>, scores_b: Vec<f64>, n: usize, seed: u64) -> PyResult<(f64, f64, f64, bool)> {
    let r = metrics::compare_methods(&predictions(&labels, &scores_a)?, &predictions(&labels, &scores_b)?, n, seed).map_err(err)?;
    Ok((r.metric_a.point, r.metric_b.point, r.p_value, r.significant))
}

#[pyfunction]
fn derive_label(gleason_scores: Vec<u32>) -> PyResult<u8> {
    synthdata::derive_label(&gleason_scores).map_err(err)
}

#[pyfunction]
fn derive_seed(parent: u64, tag: &str) -> u64 {
    voxmim::rng::derive_seed(parent, tag)
}

/// One phantom with default geometry at `dims`.
#[pyfunction]
#[pyo3(signature = (label, seed=0, dims=None))]
fn generate_phantom(label: u8, seed: u64, dims: Option<[usize; 3]>) -> PyResult<PyVolume> {
    let mut config = PhantomConfig::default();
    if let Some(d) = dims {
        config.dims = d;
    }
    synthdata::generate_phantom(&config, label, &mut seeded(seed))
        .map(|inner| PyVolume { inner })
        .map_err(err)
}

/// Writes a phantom dataset; returns the unlabeled and labeled manifest paths.
#[pyfunction]
#[pyo3(signature = (out_dir, n_unlabeled, n_labeled, balance=0.5, seed=0, dims=None))]
fn generate_dataset(
    out_dir: PathBuf,
    n_unlabeled: usize,
    n_labeled: usize,
    balance: f64,
    seed: u64,
    dims: Option<[usize; 3]>,
) -> PyResult<(PathBuf, PathBuf)> {
    let mut config = PhantomConfig::default();
    if let Some(d) = dims {
        config.dims = d;
    }
    let d = synthdata::generate_dataset(&config, n_unlabeled, n_labeled, balance, seed, out_dir).map_err(err)?;
    Ok((d.unlabeled_path, d.labeled_path))
}

fn model_config(input_dims: [usize; 3], base_channels: usize, stages: usize, convs_per_stage: Option<Vec<usize>>, skip_connections: bool) -> ModelConfig {
    let defaults = ModelConfig::default();
    ModelConfig {
        input_dims,
        base_channels,
        stages,
        convs_per_stage: convs_per_stage.unwrap_or_else(|| {
            if stages == defaults.stages {
                defaults.convs_per_stage
            } else {
                vec![2; stages]
            }
        }),
        skip_connections,
    }
}

/// Convolutional masked autoencoder.
#[pyclass(name = "MaskedAutoencoder", module = "voxmim")]
struct PyMae {
    inner: MaskedAutoencoder<f32>,
}

#[pymethods]
impl PyMae {
    #[new]
    #[pyo3(signature = (input_dims=[32, 32, 16], base_channels=8, stages=3, convs_per_stage=None, skip_connections=true, seed=0))]
    fn new(
        input_dims: [usize; 3],
        base_channels: usize,
        stages: usize,
        convs_per_stage: Option<Vec<usize>>,
        skip_connections: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = model_config(input_dims, base_channels, stages, convs_per_stage, skip_connections);
        build_mae(&config, &mut seeded(seed)).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Masked-image-modelling pre-training; returns the per-epoch mean loss.
    #[pyo3(signature = (volumes, mode="dynamic", epochs=50, batch_size=4, lr=1e-4, seed=0, masked_loss=false))]
    #[allow(clippy::too_many_arguments)]
    fn pretrain(
        &mut self,
        volumes: Vec<PyRef<'_, PyVolume>>,
        mode: &str,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        masked_loss: bool,
    ) -> PyResult<Vec<f64>> {
        let config = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            loss_region: if masked_loss { LossRegion::Masked } else { LossRegion::Full },
            early_stop_patience: None,
        };
        let policy = MaskPolicy::preset(mask_mode(mode)?);
        trainer::pretrain_volumes(&mut self.inner, &unwrap_volumes(volumes), &policy, &config).map_err(err)
    }

    /// Reconstruction of one (corrupted) volume, batch norm in eval mode.
    fn reconstruct(&mut self, volume: &PyVolume) -> PyResult<PyVolume> {
        let batch = trainer::batch_tensor(&[&volume.inner]).map_err(err)?;
        let out = self.inner.reconstruct(&batch, voxmim::neuralops::BatchNormMode::Eval).map_err(err)?;
        Volume::new(volume.inner.dims(), volume.inner.spacing(), out.into_data())
            .map(|inner| PyVolume { inner })
            .map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_mae(&self.inner, &TrainingMetadata::default(), path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        trainer::load_mae(path).map(|(inner, _)| Self { inner }).map_err(err)
    }
}

/// Encoder, global average pooling and a sigmoid unit.
#[pyclass(name = "Classifier", module = "voxmim")]
struct PyClassifier {
    inner: Classifier<f32>,
}

#[pymethods]
impl PyClassifier {
    /// `mode` is "probe" (frozen encoder) or "finetune".
    #[staticmethod]
    #[pyo3(signature = (mae, mode="probe"))]
    fn from_pretrained(mae: &PyMae, mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "probe" => ClassifierMode::LinearProbe,
            "finetune" => ClassifierMode::FineTune,
            other => return Err(PyValueError::new_err(format!("mode must be 'probe' or 'finetune', got {other:?}"))),
        };
        build_classifier(EncoderSource::Pretrained(&mae.inner), mode, &mut seeded(0))
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Randomly initialised encoder, frozen unless `trainable`.
    #[staticmethod]
    #[pyo3(signature = (input_dims=[32, 32, 16], base_channels=8, stages=3, convs_per_stage=None, seed=0, trainable=false))]
    fn random(
        input_dims: [usize; 3],
        base_channels: usize,
        stages: usize,
        convs_per_stage: Option<Vec<usize>>,
        seed: u64,
        trainable: bool,
    ) -> PyResult<Self> {
        let config = model_config(input_dims, base_channels, stages, convs_per_stage, true);
        let mut inner = build_classifier(EncoderSource::Fresh(&config), ClassifierMode::RandomInit, &mut seeded(seed)).map_err(err)?;
        inner.set_encoder_trainable(trainable).map_err(err)?;
        Ok(Self { inner })
    }

    /// Encoder taken from any checkpoint, frozen unless `trainable`.
    #[staticmethod]
    #[pyo3(signature = (path, trainable=false))]
    fn from_checkpoint(path: PathBuf, trainable: bool) -> PyResult<Self> {
        let mut inner = build_classifier::<f32, _>(EncoderSource::External(&path), ClassifierMode::ExternalWeights, &mut seeded(0)).map_err(err)?;
        inner.set_encoder_trainable(trainable).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn encoder_trainable(&self) -> bool {
        self.inner.encoder_trainable
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Binary cross-entropy training; returns the per-epoch mean loss.
    #[pyo3(signature = (volumes, labels, epochs=50, batch_size=4, lr=1e-4, seed=0))]
    fn train(
        &mut self,
        volumes: Vec<PyRef<'_, PyVolume>>,
        labels: Vec<u8>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let config = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            ..TrainConfig::default()
        };
        trainer::train_downstream_volumes(&mut self.inner, &unwrap_volumes(volumes), &labels, &config).map_err(err)
    }

    #[pyo3(signature = (volumes, batch_size=8))]
    fn predict(&mut self, volumes: Vec<PyRef<'_, PyVolume>>, batch_size: usize) -> PyResult<Vec<f64>> {
        trainer::predict_volumes(&mut self.inner, &unwrap_volumes(volumes), batch_size).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_classifier(&self.inner, &TrainingMetadata::default(), path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        trainer::load_classifier(path).map(|(inner, _)| Self { inner }).map_err(err)
    }
}

#[pymodule]
#[pyo3(name = "voxmim")]
fn voxmim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMae>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(partition_cubes, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed_rank, m)?)?;
    m.add_function(wrap_pyfunction!(compare_methods, m)?)?;
    m.add_function(wrap_pyfunction!(derive_label, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}

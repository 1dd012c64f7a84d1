//! Python extension module exposing the main types and operations: tensors,
//! masks, schedules, the normalization and initiation primitives, metrics,
//! dataset generation, toy training and full composition runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tale_core::compose::{self, CompositionConfig};
use tale_core::config::apply_key;
use tale_core::error::Error as CoreError;
use tale_core::masks::{self, BoxRect};
use tale_core::metrics;
use tale_core::models::{
    make_toy_domains, train_toy_denoiser, AnalyticDenoiser, Autoencoder, ConvFeatureBank,
    Denoiser, GaussianMixtureModel, LinearAutoencoder, MixtureComponent, ModelBundle, PromptSpec,
    ToyDataset, ToyDenoiser, ToyEmbedder, TrainingConfig,
};
use tale_core::schedule::{build_schedule, ScheduleKind};
use tale_core::tensor::{self, LatentTensor};

fn err(e: CoreError) -> PyErr {
    match &e {
        CoreError::InvalidConfig(_) | CoreError::InvalidSteps(_) => {
            PyValueError::new_err(e.to_string())
        }
        CoreError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Rank-3 tensor (channels x height x width), row-major.
#[pyclass(name = "Tensor", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: LatentTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: LatentTensor::from_vec(channels, height, width, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.inner.at(c, y, x)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.shape();
        format!("Tensor(channels={c}, height={h}, width={w})")
    }
}

/// Binary mask (height x width).
#[pyclass(name = "Mask", skip_from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: tensor::Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: tensor::Mask::from_bytes(height, width, &data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn full(height: usize, width: usize, value: bool) -> Self {
        Self {
            inner: if value {
                tensor::Mask::ones(height, width)
            } else {
                tensor::Mask::zeros(height, width)
            },
        }
    }

    #[staticmethod]
    fn from_box(height: usize, width: usize, user_box: &str) -> PyResult<Self> {
        let rect: BoxRect = user_box.parse().map_err(err)?;
        Ok(Self {
            inner: rect.to_mask(height, width).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mask(height={}, width={}, active={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.active_count()
        )
    }
}

/// Aligned pixel- and latent-resolution mask set.
#[pyclass(name = "MaskSet")]
struct PyMaskSet {
    inner: masks::MaskSet,
}

#[pymethods]
impl PyMaskSet {
    #[new]
    #[pyo3(signature = (user, object, downscale = 2, dilation = 0))]
    fn new(user: &PyMask, object: &PyMask, downscale: usize, dilation: usize) -> PyResult<Self> {
        Ok(Self {
            inner: masks::build_mask_set(&user.inner, &object.inner, downscale, dilation)
                .map_err(err)?,
        })
    }

    #[getter]
    fn background(&self) -> PyMask {
        PyMask {
            inner: self.inner.background.clone(),
        }
    }

    #[getter]
    fn transition(&self) -> PyMask {
        PyMask {
            inner: self.inner.transition.clone(),
        }
    }

    #[getter]
    fn latent_object(&self) -> PyMask {
        PyMask {
            inner: self.inner.latent_object.clone(),
        }
    }

    #[getter]
    fn latent_user(&self) -> PyMask {
        PyMask {
            inner: self.inner.latent_user.clone(),
        }
    }
}

/// Variance-preserving schedule grid.
#[pyclass(name = "Schedule")]
struct PySchedule {
    inner: tale_core::schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps, kind = "cosine"))]
    fn new(steps: usize, kind: &str) -> PyResult<Self> {
        let kind: ScheduleKind = kind.parse().map_err(err)?;
        Ok(Self {
            inner: build_schedule(steps, kind).map_err(err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_sigma(&self, index: usize) -> PyResult<(f64, f64)> {
        self.inner.alpha_sigma(index).map_err(err)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }
}

/// Composition hyperparameters; keys match the config-file grammar.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CompositionConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "cross-domain"))]
    fn new(preset: &str) -> PyResult<Self> {
        let preset: tale_core::config::Preset = preset.parse().map_err(err)?;
        Ok(Self {
            inner: preset.config(),
        })
    }

    /// Sets one key using the config-file grammar, e.g. set("t-prime", "8").
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        apply_key(&mut self.inner, key, value).map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }
}

#[pyfunction]
fn gaussian_noise(channels: usize, height: usize, width: usize, seed: u64) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: tensor::gaussian_noise(channels, height, width, seed).map_err(err)?,
    })
}

/// Per-channel (means, stds, count) over the masked support.
#[pyfunction]
fn masked_channel_stats(t: &PyTensor, m: &PyMask) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
    let s = tensor::masked_channel_stats(&t.inner, &m.inner).map_err(err)?;
    Ok((s.mean, s.std, s.count))
}

#[pyfunction]
fn selective_init(z_bg: &PyTensor, z_fg: &PyTensor, masks: &PyMaskSet) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: compose::selective_init(&z_bg.inner, &z_fg.inner, &masks.inner).map_err(err)?,
    })
}

#[pyfunction]
fn baseline_init(
    z_bg: &PyTensor,
    z_fg: &PyTensor,
    masks: &PyMaskSet,
    seed: u64,
) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: compose::baseline_init(&z_bg.inner, &z_fg.inner, &masks.inner, seed).map_err(err)?,
    })
}

#[pyfunction]
fn adaptive_normalize(
    z_res: &PyTensor,
    z_bg: &PyTensor,
    masks: &PyMaskSet,
    lambda: f64,
) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: compose::adaptive_normalize(&z_res.inner, &z_bg.inner, &masks.inner, lambda)
            .map_err(err)?,
    })
}

#[pyfunction]
fn lambda_at(cfg: &PyConfig, t: usize) -> PyResult<f64> {
    compose::lambda_at(&cfg.inner, t).map_err(err)
}

#[pyfunction]
fn edge_map(x: &PyTensor) -> PyTensor {
    PyTensor {
        inner: metrics::edge_map(&x.inner),
    }
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn make_dataset(seed: u64, n: usize, out_dir: PathBuf) -> PyResult<String> {
    let ds = make_toy_domains(seed, n).map_err(err)?;
    ds.save_dir(&out_dir).map_err(err)?;
    Ok(ds.digest())
}

#[pyfunction]
#[pyo3(signature = (dataset_dir, out_path, epochs = 60, seed = 0))]
fn train_toy(dataset_dir: PathBuf, out_path: PathBuf, epochs: usize, seed: u64) -> PyResult<Vec<f64>> {
    let ds = ToyDataset::load_dir(&dataset_dir).map_err(err)?;
    let cfg = TrainingConfig {
        epochs,
        seed,
        ..TrainingConfig::default()
    };
    let (net, report) = train_toy_denoiser(&ds, &cfg).map_err(err)?;
    net.save(&out_path).map_err(err)?;
    Ok(report.epoch_losses)
}

fn build_bundle(
    cfg: &CompositionConfig,
    x_bg: &LatentTensor,
    x_fg: &LatentTensor,
    weights: Option<&Path>,
) -> PyResult<ModelBundle> {
    let ae = Arc::new(LinearAutoencoder::default());
    let denoiser: Arc<dyn Denoiser> = match weights {
        Some(path) => {
            let net = ToyDenoiser::load(path).map_err(err)?;
            if net.schedule().steps() != cfg.steps {
                return Err(PyValueError::new_err(format!(
                    "weights trained for T={} but the run uses T={}",
                    net.schedule().steps(),
                    cfg.steps
                )));
            }
            Arc::new(net)
        }
        None => {
            let schedule = build_schedule(cfg.steps, cfg.schedule_kind).map_err(err)?;
            let gm = GaussianMixtureModel::new(vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: ae.encode(x_bg).map_err(err)?,
                    std: 0.6,
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: ae.encode(x_fg).map_err(err)?,
                    std: 0.6,
                },
            ])
            .map_err(err)?;
            Arc::new(AnalyticDenoiser::new(gm, schedule))
        }
    };
    let shape = (x_bg.channels(), x_bg.height(), x_bg.width());
    Ok(ModelBundle::new(
        denoiser,
        ae,
        Arc::new(ToyEmbedder::new(
            tensor::subseed(cfg.seed, "embedder"),
            32,
            shape,
        )),
        Arc::new(ConvFeatureBank::new(
            tensor::subseed(cfg.seed, "feature-bank"),
            shape.0,
            8,
        )),
    ))
}

/// Composes from image files, writes x_res.ppm and manifest.json into
/// out_dir, and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (bg, fg, obj_mask, user_box, prompt, out_dir, config = None, weights = None))]
#[allow(clippy::too_many_arguments)]
fn compose_files(
    bg: PathBuf,
    fg: PathBuf,
    obj_mask: PathBuf,
    user_box: &str,
    prompt: &str,
    out_dir: PathBuf,
    config: Option<PyConfig>,
    weights: Option<PathBuf>,
) -> PyResult<HashMap<String, String>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    cfg.validate().map_err(err)?;
    let x_bg = tale_core::io::read_image(&bg).map_err(err)?;
    let x_fg = tale_core::io::read_image(&fg).map_err(err)?;
    let mask = tale_core::io::read_pgm(&obj_mask).map_err(err)?;
    let rect: BoxRect = user_box.parse().map_err(err)?;
    let prompt = PromptSpec::new(prompt);
    let bundle = build_bundle(&cfg, &x_bg, &x_fg, weights.as_deref())?;
    let out = compose::compose_run(&x_bg, &x_fg, &mask, rect, &prompt, &cfg, &bundle)
        .map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| err(CoreError::from(e)))?;
    let image_path = out_dir.join("x_res.ppm");
    tale_core::io::write_ppm(&image_path, &out.image).map_err(err)?;
    tale_core::io::atomic_write(
        &out_dir.join("manifest.json"),
        out.manifest.to_json().as_bytes(),
    )
    .map_err(err)?;
    let mut summary = HashMap::new();
    summary.insert("image".into(), image_path.display().to_string());
    summary.insert("output_digest".into(), out.manifest.output_digest.clone());
    summary.insert("manifest_digest".into(), out.manifest.stable_digest());
    Ok(summary)
}

/// Metric report for a composed sample of a dataset.
#[pyfunction]
fn evaluate_sample(
    result_image: PathBuf,
    dataset_dir: PathBuf,
    index: usize,
) -> PyResult<HashMap<String, f64>> {
    let ds = ToyDataset::load_dir(&dataset_dir).map_err(err)?;
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("sample index {index} out of range")))?;
    let x_res = tale_core::io::read_ppm(&result_image).map_err(err)?;
    let canvas = (sample.background.height(), sample.background.width());
    let (fg_aligned, obj_aligned) = masks::place_object(
        &sample.foreground,
        &sample.object_mask,
        sample.user_box,
        canvas,
    )
    .map_err(err)?;
    let user = sample.user_box.to_mask(canvas.0, canvas.1).map_err(err)?;
    let mask_set = masks::build_mask_set(&user, &obj_aligned, 2, 0).map_err(err)?;
    let m = metrics::evaluate(&x_res, &sample.background, &fg_aligned, &mask_set).map_err(err)?;
    let mut out = HashMap::new();
    out.insert("ssim_bg".into(), m.ssim_bg);
    out.insert("ssim_fg".into(), m.ssim_fg);
    out.insert("content_similarity".into(), m.content_similarity);
    out.insert("style_proxy".into(), m.style_proxy);
    Ok(out)
}

#[pymodule]
fn tale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyMaskSet>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(gaussian_noise, m)?)?;
    m.add_function(wrap_pyfunction!(masked_channel_stats, m)?)?;
    m.add_function(wrap_pyfunction!(selective_init, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_init, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(edge_map, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(compose_files, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_sample, m)?)?;
    Ok(())
}

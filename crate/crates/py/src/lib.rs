//! Python bindings for the `defian` crate.
//!
//! Tensors cross the boundary as `(shape, flat list)` pairs in NCHW order.

use std::path::PathBuf;

use defian::data::{self, Dataset, ImageBuffer};
use defian::diendec;
use defian::hessian;
use defian::model::{self, Checkpoint, Components, DefianModel};
use defian::train::{self, TrainConfig, Trainer};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: defian::Error) -> PyErr {
    match e {
        defian::Error::Io(io) => PyOSError::new_err(io.to_string()),
        defian::Error::NonFinite(_) | defian::Error::Checkpoint { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense 4-D float tensor in NCHW order.
#[pyclass(name = "Tensor", module = "defian", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: defian::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: defian::Tensor::from_vec(shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: [usize; 4]) -> Self {
        Self {
            inner: defian::Tensor::zeros(shape),
        }
    }

    #[staticmethod]
    fn full(shape: [usize; 4], value: f32) -> Self {
        Self {
            inner: defian::Tensor::full(shape, value),
        }
    }

    /// Reads a PNG as a `(1, 3, h, w)` tensor scaled to `[0, range]`.
    #[staticmethod]
    #[pyo3(signature = (path, range = 1.0))]
    fn load_png(path: PathBuf, range: f64) -> PyResult<Self> {
        let img = ImageBuffer::load_png(&path).map_err(to_py)?;
        Ok(Self {
            inner: img.to_tensor(range),
        })
    }

    /// Writes batch item `item` as an RGB PNG, clamping to `[0, range]`.
    #[pyo3(signature = (path, item = 0, range = 1.0))]
    fn save_png(&self, path: PathBuf, item: usize, range: f64) -> PyResult<()> {
        ImageBuffer::from_tensor(&self.inner, item, range)
            .and_then(|img| img.save_png(&path))
            .map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> PyResult<f32> {
        let [sn, sc, sh, sw] = self.inner.shape();
        if n >= sn || c >= sc || y >= sh || x >= sw {
            return Err(PyValueError::new_err(format!(
                "index ({n}, {c}, {y}, {x}) out of range for {:?}",
                self.inner.shape()
            )));
        }
        Ok(self.inner.at(n, c, y, x))
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Network hyperparameters.
#[pyclass(name = "ModelConfig", module = "defian", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// `name` is one of `defian_s`, `defian_l` or `micro`.
    #[staticmethod]
    #[pyo3(signature = (name, scale = 2))]
    fn preset(name: &str, scale: usize) -> PyResult<Self> {
        let inner = model::ModelConfig::preset(name, scale).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (channels = 8, scale = 2))]
    fn micro(channels: usize, scale: usize) -> PyResult<Self> {
        let inner = model::ModelConfig::micro(channels, scale);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Copy with the attention components switched on or off.
    fn with_components(&self, mshf: bool, diendec: bool, dac: bool) -> Self {
        Self {
            inner: self.inner.clone().with_components(Components { mshf, diendec, dac }),
        }
    }

    #[getter]
    fn n_modules(&self) -> usize {
        self.inner.n_modules
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.inner.n_blocks
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale
    }

    #[getter]
    fn mshf_scales(&self) -> Vec<usize> {
        self.inner.mshf_scales.clone()
    }

    #[getter]
    fn components(&self) -> String {
        self.inner.components.label()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(n_modules={}, n_blocks={}, channels={}, scale={}, components={})",
            c.n_modules,
            c.n_blocks,
            c.channels,
            c.scale,
            c.components.label()
        )
    }
}

/// A DeFiAN network with f32 weights.
#[pyclass(name = "Model", module = "defian")]
pub struct PyModel {
    inner: DefianModel<f32>,
    updates: u64,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: DefianModel::new(config.inner.clone(), seed).map_err(to_py)?,
            updates: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: ckpt.model().map_err(to_py)?,
            updates: ckpt.updates,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, None, self.updates)
            .save(&path)
            .map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    #[getter]
    fn updates(&self) -> u64 {
        self.updates
    }

    /// Super-resolves a `(n, 3, h, w)` batch.
    fn forward(&self, py: Python<'_>, x: &PyTensor) -> PyResult<PyTensor> {
        let input = x.inner.clone();
        let out = py.detach(|| self.inner.infer(&input)).map_err(to_py)?;
        Ok(PyTensor { inner: out })
    }

    /// `{"trainable": .., "frozen": .., "total": ..}` parameter counts.
    fn count_params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let p = model::count_params(&self.inner);
        let d = PyDict::new(py);
        d.set_item("trainable", p.trainable)?;
        d.set_item("frozen", p.frozen)?;
        d.set_item("total", p.total())?;
        Ok(d)
    }

    /// Trains in place with MAE loss and Adam, returning the per-update losses.
    ///
    /// Uses `hr_dir` when given, otherwise `synthetic` generated 64x64 images.
    #[pyo3(signature = (updates, batch_size = 4, patch = 16, lr0 = 1e-4, seed = 0, grad_clip = Some(10.0), hr_dir = None, synthetic = 4))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        updates: u64,
        batch_size: usize,
        patch: usize,
        lr0: f64,
        seed: u64,
        grad_clip: Option<f64>,
        hr_dir: Option<PathBuf>,
        synthetic: usize,
    ) -> PyResult<Vec<f64>> {
        let scale = self.inner.config().scale;
        let dataset = match hr_dir {
            Some(dir) => Dataset::load_dir(&dir, None, scale),
            None => Dataset::synthetic(synthetic, 64, scale, seed),
        }
        .map_err(to_py)?;
        let cfg = TrainConfig {
            batch_size,
            patch,
            lr0,
            total_updates: self.updates + updates,
            seed,
            grad_clip,
            prefetch: 0,
            ..Default::default()
        };
        let ckpt = Checkpoint::from_model(&self.inner, None, self.updates);
        let (trace, ckpt) = py
            .detach(|| -> defian::Result<_> {
                let mut trainer = Trainer::resume(&ckpt, cfg.clone())?;
                let trace = trainer.run(&dataset, cfg.total_updates, None, |_| {})?;
                Ok((trace, trainer.checkpoint()))
            })
            .map_err(to_py)?;
        self.inner = ckpt.model().map_err(to_py)?;
        self.updates = ckpt.updates;
        Ok(trace.iter().map(|r| r.loss).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, updates={})",
            PyModelConfig {
                inner: self.inner.config().clone()
            }
            .__repr__(),
            self.updates
        )
    }
}

/// Multiply-accumulate count for an HR output of `hr_width` x `hr_height`
/// (default 480x360).
#[pyfunction]
#[pyo3(signature = (config, hr_width = 480, hr_height = 360))]
fn count_flops(config: &PyModelConfig, hr_width: usize, hr_height: usize) -> PyResult<u64> {
    model::count_flops(&config.inner, hr_width, hr_height).map_err(to_py)
}

/// Parameter count implied by a configuration, without building the network.
#[pyfunction]
fn expected_params(config: &PyModelConfig) -> usize {
    model::expected_params(&config.inner).total()
}

/// Multi-scale Hessian filter: one channel-averaged eigenvalue map per scale.
#[pyfunction]
#[pyo3(signature = (x, scales = vec![3, 5, 7]))]
fn mshf(x: &PyTensor, scales: Vec<usize>) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: hessian::mshf(&x.inner, &scales).map_err(to_py)?,
    })
}

/// Per-channel maximum Hessian eigenvalue at one scale.
#[pyfunction]
#[pyo3(signature = (x, ker = 3))]
fn hessian_filter(x: &PyTensor, ker: usize) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: hessian::scaled_hessian_filter(&x.inner, ker).map_err(to_py)?.lambda,
    })
}

/// Larger eigenvalue of `[[hh, hv], [hv, vv]]`, elementwise.
#[pyfunction]
fn max_eigenvalue(hh: &PyTensor, vv: &PyTensor, hv: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: hessian::max_eigenvalue(&hh.inner, &vv.inner, &hv.inner)
            .map_err(to_py)?
            .lambda,
    })
}

/// Receptive field side after `depth` dilated layers of kernel `k`.
#[pyfunction]
#[pyo3(signature = (depth, k = 3))]
fn arf(depth: u32, k: usize) -> u64 {
    diendec::arf(k, depth)
}

fn image_of(t: &PyTensor, range: f64) -> PyResult<ImageBuffer> {
    ImageBuffer::from_tensor(&t.inner, 0, range).map_err(to_py)
}

/// PSNR in dB on the luminance channel, ignoring `border` pixels per side.
#[pyfunction]
#[pyo3(signature = (a, b, border = 0, range = 1.0))]
fn psnr(a: &PyTensor, b: &PyTensor, border: usize, range: f64) -> PyResult<f64> {
    data::psnr(&image_of(a, range)?, &image_of(b, range)?, border).map_err(to_py)
}

/// Mean SSIM on the luminance channel, ignoring `border` pixels per side.
#[pyfunction]
#[pyo3(signature = (a, b, border = 0, range = 1.0))]
fn ssim(a: &PyTensor, b: &PyTensor, border: usize, range: f64) -> PyResult<f64> {
    data::ssim(&image_of(a, range)?, &image_of(b, range)?, border).map_err(to_py)
}

/// Luminance of one 8-bit RGB pixel on the `[16, 235]` scale.
#[pyfunction]
fn luminance(r: u8, g: u8, b: u8) -> f64 {
    data::metrics::luma([r, g, b])
}

/// Bicubic resize of the first batch item to `width` x `height`.
#[pyfunction]
#[pyo3(signature = (x, width, height, range = 1.0))]
fn resize(x: &PyTensor, width: usize, height: usize, range: f64) -> PyResult<PyTensor> {
    let img = data::bicubic_resize(&image_of(x, range)?, width, height).map_err(to_py)?;
    Ok(PyTensor {
        inner: img.to_tensor(range),
    })
}

/// Mean absolute error between two tensors of equal shape.
#[pyfunction]
fn mae(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    let mut g = defian::autodiff::Graph::<f32>::new();
    let (x, y) = (g.input(a.inner.clone()), g.input(b.inner.clone()));
    let l = train::mae_loss(&mut g, x, y).map_err(to_py)?;
    Ok(g.value(l).data()[0] as f64)
}

#[pymodule]
#[pyo3(name = "defian")]
fn defian_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(expected_params, m)?)?;
    m.add_function(wrap_pyfunction!(mshf, m)?)?;
    m.add_function(wrap_pyfunction!(hessian_filter, m)?)?;
    m.add_function(wrap_pyfunction!(max_eigenvalue, m)?)?;
    m.add_function(wrap_pyfunction!(arf, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(luminance, m)?)?;
    m.add_function(wrap_pyfunction!(resize, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

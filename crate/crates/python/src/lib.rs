//! Python bindings. Volumes cross the boundary as flat row-major float
//! lists plus a shape tuple, so any array library can feed them with
//! `ravel().tolist()`.

use std::path::PathBuf;

use amber_afno::data_io::{generate_phantom as gen_phantom, load_checkpoint, save_checkpoint};
use amber_afno::metrics::{self, LabelMask, MetricReport};
use amber_afno::model_stats::{count_flops as flops, count_params, CostBreakdown};
use amber_afno::{spectral, Error, Model, ModelConfig, RunConfig, Scalar, Tensor};
use num_complex::Complex;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) => PyValueError::new_err(e.to_string()),
        Error::Format(_) | Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Parses a full run configuration; `None` gives the defaults.
pub fn parse_config(text: Option<&str>) -> PyResult<RunConfig> {
    match text {
        None => Ok(RunConfig::default()),
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(format!("invalid config: {e}"))),
    }
}

pub fn tensor<T: Scalar>(data: &[f64], shape: &[usize]) -> PyResult<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| T::lit(v)).collect()).map_err(to_py)
}

pub fn flat<T: Scalar>(t: &Tensor<T>) -> (Vec<f64>, Vec<usize>) {
    (t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(), t.shape().to_vec())
}

fn shape3(shape: &[usize]) -> PyResult<[usize; 3]> {
    <[usize; 3]>::try_from(shape).map_err(|_| PyValueError::new_err(format!("expected (D, H, W), got {shape:?}")))
}

/// Labels as Python ints rather than `bytes`.
fn labels(m: &LabelMask) -> Vec<u32> {
    m.data().iter().map(|&v| v as u32).collect()
}

fn mask(labels: Vec<u8>, shape: &[usize], num_classes: usize) -> PyResult<LabelMask> {
    LabelMask::new(shape3(shape)?, labels, num_classes).map_err(to_py)
}

fn breakdown_dict<'py>(py: Python<'py>, b: &CostBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total_params", b.total_params)?;
    d.set_item("total_flops", b.total_flops)?;
    let rows: Vec<(String, u64, u64)> = b.entries.iter().map(|e| (e.name.clone(), e.params, e.flops)).collect();
    d.set_item("entries", rows)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean_dsc", r.mean_dsc)?;
    d.set_item("mean_hd95", r.mean_hd95)?;
    d.set_item("hd95_undefined", r.hd95_undefined)?;
    let rows: Vec<(usize, f64, Option<f64>)> = r.per_class.iter().map(|c| (c.class, c.dsc, c.hd95)).collect();
    d.set_item("per_class", rows)?;
    Ok(d)
}

#[derive(Clone)]
enum Inner {
    F32(Model<f32>),
    F64(Model<f64>),
}

macro_rules! with_model {
    ($inner:expr, $m:ident => $body:expr) => {
        match $inner {
            Inner::F32($m) => $body,
            Inner::F64($m) => $body,
        }
    };
}

/// Segmentation network with either Fourier (`afno`) or attention (`mhsa`)
/// token mixing.
#[pyclass(name = "Model", module = "amber_afno_py")]
#[derive(Clone)]
pub struct PyModel {
    inner: Inner,
}

#[pymethods]
impl PyModel {
    /// `config` is TOML run-configuration text; only its `model` section and
    /// `precision` are used. `precision` overrides the config value.
    #[new]
    #[pyo3(signature = (config=None, seed=0, precision=None))]
    fn new(config: Option<&str>, seed: u64, precision: Option<u32>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let inner = match precision.unwrap_or(cfg.precision) {
            32 => Inner::F32(Model::new(cfg.model, seed).map_err(to_py)?),
            64 => Inner::F64(Model::new(cfg.model, seed).map_err(to_py)?),
            p => return Err(PyValueError::new_err(format!("precision must be 32 or 64, got {p}"))),
        };
        Ok(Self { inner })
    }

    /// Loads a checkpoint directory written by `save` or by training.
    #[staticmethod]
    #[pyo3(signature = (path, precision=32))]
    fn load(path: PathBuf, precision: u32) -> PyResult<Self> {
        let inner = match precision {
            32 => {
                let c = load_checkpoint::<f32>(&path).map_err(to_py)?;
                Inner::F32(Model::from_parts(c.config, c.params, c.buffers).map_err(to_py)?)
            }
            64 => {
                let c = load_checkpoint::<f64>(&path).map_err(to_py)?;
                Inner::F64(Model::from_parts(c.config, c.params, c.buffers).map_err(to_py)?)
            }
            p => return Err(PyValueError::new_err(format!("precision must be 32 or 64, got {p}"))),
        };
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        with_model!(&self.inner, m => save_checkpoint(&path, m.config(), m.params(), m.buffers()).map(|_| ()))
            .map_err(to_py)
    }

    #[getter]
    fn precision(&self) -> u32 {
        match self.inner {
            Inner::F32(_) => 32,
            Inner::F64(_) => 64,
        }
    }

    #[getter]
    fn mixing(&self) -> String {
        self.model_config().mixing.to_string()
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.model_config().input_shape
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model_config().num_classes
    }

    /// Model section as TOML.
    #[getter]
    fn config(&self) -> PyResult<String> {
        toml::to_string(self.model_config()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn param_count(&self) -> u64 {
        with_model!(&self.inner, m => m.param_count())
    }

    fn param_names(&self) -> Vec<String> {
        with_model!(&self.inner, m => m.params().entries().iter().map(|e| e.name.clone()).collect())
    }

    /// Flat values and shape of one stored parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<f64>, Vec<usize>)> {
        with_model!(&self.inner, m => m
            .params()
            .get(name)
            .map(flat)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}"))))
    }

    /// Logits `(B, D, H, W, N)` for a volume `(B, D, H, W, C)`.
    fn forward(&self, py: Python<'_>, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        py.allow_threads(|| {
            with_model!(&self.inner, m => {
                let x = tensor(&data, &shape)?;
                Ok(flat(&m.forward(&x).map_err(to_py)?))
            })
        })
    }

    /// Per-voxel argmax labels, one flat list per batch element.
    fn predict(&self, py: Python<'_>, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<Vec<u32>>> {
        py.allow_threads(|| {
            with_model!(&self.inner, m => {
                let x = tensor(&data, &shape)?;
                Ok(m.predict(&x).map_err(to_py)?.iter().map(labels).collect())
            })
        })
    }

    /// Per-layer parameter counts from the stored tensors.
    fn param_breakdown<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        breakdown_dict(py, &with_model!(&self.inner, m => count_params(m)))
    }

    /// Closed-form parameter and FLOP counts at `input` (default: the
    /// configured input shape).
    #[pyo3(signature = (input=None))]
    fn stats<'py>(&self, py: Python<'py>, input: Option<[usize; 3]>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.model_config();
        breakdown_dict(py, &flops(cfg, input.unwrap_or(cfg.input_shape)).map_err(to_py)?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mixing={}, params={}, precision={})",
            self.mixing(),
            self.param_count(),
            self.precision()
        )
    }
}

impl PyModel {
    fn model_config(&self) -> &ModelConfig {
        with_model!(&self.inner, m => m.config())
    }
}

/// Full default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    toml::to_string(&RunConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Pads `(D, H, W)` or `(D, H, W, C)` to `(B, D, H, W, C)`; returns the
/// padded shape and how many leading axes were added.
fn to5(shape: &[usize]) -> PyResult<(Vec<usize>, usize)> {
    let mut s = shape.to_vec();
    match s.len() {
        3 => s.push(1),
        4 | 5 => {}
        n => return Err(PyValueError::new_err(format!("expected 3 to 5 axes, got {n}"))),
    }
    let added = 5 - s.len();
    s.splice(0..0, std::iter::repeat_n(1, added));
    Ok((s, added))
}

fn from5(shape: &[usize], rank: usize) -> Vec<usize> {
    let s = &shape[5 - rank.max(4)..];
    if rank == 3 { s[..3].to_vec() } else { s.to_vec() }
}

/// Unnormalized real 3D FFT over the spatial axes of `(D, H, W)`,
/// `(D, H, W, C)` or `(B, D, H, W, C)` data. Returns real parts, imaginary
/// parts and the half-spectrum shape (W becomes W/2+1).
#[pyfunction]
fn rfft3(data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let (s5, _) = to5(&shape)?;
    let spec = spectral::rfft3(&tensor::<f64>(&data, &s5)?).map_err(to_py)?;
    let re = spec.data().iter().map(|z| z.re).collect();
    let im = spec.data().iter().map(|z| z.im).collect();
    Ok((re, im, from5(spec.shape(), shape.len())))
}

/// Inverse of `rfft3`, scaled by 1/N; `width` is the original W.
#[pyfunction]
fn irfft3(re: Vec<f64>, im: Vec<f64>, shape: Vec<usize>, width: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
    if re.len() != im.len() {
        return Err(PyValueError::new_err("real and imaginary parts differ in length"));
    }
    let (s5, _) = to5(&shape)?;
    let z = re.into_iter().zip(im).map(|(r, i)| Complex::new(r, i)).collect();
    let spec = Tensor::new(s5, z).map_err(to_py)?;
    let (data, out) = flat(&spectral::irfft3(&spec, width).map_err(to_py)?);
    Ok((data, from5(&out, shape.len())))
}

/// Batch-mean Dice plus cross-entropy loss of probabilities `p` against
/// one-hot targets `g`, both `(B, D, H, W, J)`.
#[pyfunction]
#[pyo3(signature = (p, g, shape, eps=1e-5))]
fn hybrid_loss(p: Vec<f64>, g: Vec<f64>, shape: Vec<usize>, eps: f64) -> PyResult<f64> {
    let (p, g) = (tensor::<f64>(&p, &shape)?, tensor::<f64>(&g, &shape)?);
    amber_afno::loss::hybrid_loss(&p, &g, eps).map_err(to_py)
}

#[pyfunction]
fn dsc(truth: Vec<bool>, pred: Vec<bool>) -> PyResult<f64> {
    metrics::dsc(&truth, &pred).map_err(to_py)
}

/// Symmetric 95th-percentile surface distance; `None` when either mask is
/// empty.
#[pyfunction]
#[pyo3(signature = (truth, pred, shape, spacing=[1.0, 1.0, 1.0]))]
fn hd95(truth: Vec<bool>, pred: Vec<bool>, shape: Vec<usize>, spacing: [f64; 3]) -> PyResult<Option<f64>> {
    metrics::hd95(&truth, &pred, shape3(&shape)?, spacing).map_err(to_py)
}

/// Per-class DSC and HD95 of two label volumes.
#[pyfunction]
#[pyo3(signature = (pred, truth, shape, num_classes, spacing=[1.0, 1.0, 1.0]))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<u8>,
    truth: Vec<u8>,
    shape: Vec<usize>,
    num_classes: usize,
    spacing: [f64; 3],
) -> PyResult<Bound<'py, PyDict>> {
    let (p, t) = (mask(pred, &shape, num_classes)?, mask(truth, &shape, num_classes)?);
    report_dict(py, &metrics::evaluate(&p, &t, spacing).map_err(to_py)?)
}

/// Closed-form costs of a configuration without building the model.
#[pyfunction]
#[pyo3(signature = (config=None, input=None))]
fn count_flops<'py>(py: Python<'py>, config: Option<&str>, input: Option<[usize; 3]>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config)?;
    cfg.model.validate().map_err(to_py)?;
    breakdown_dict(py, &flops(&cfg.model, input.unwrap_or(cfg.model.input_shape)).map_err(to_py)?)
}

/// One synthetic phantom from the `data.phantom` section: flat image,
/// flat labels and the `(D, H, W)` grid.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn generate_phantom(config: Option<&str>, seed: Option<u64>) -> PyResult<(Vec<f32>, Vec<u32>, [usize; 3])> {
    let mut spec = parse_config(config)?.data.phantom;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let s = gen_phantom(&spec).map_err(to_py)?;
    Ok((s.image.data().to_vec(), labels(&s.label), s.label.shape()))
}

#[pymodule]
pub fn amber_afno_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(rfft3, m)?)?;
    m.add_function(wrap_pyfunction!(irfft3, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let t = tensor::<f32>(&[1.0, 2.5, -3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(flat(&t), (vec![1.0, 2.5, -3.0, 4.0], vec![2, 2]));
        assert!(tensor::<f64>(&[1.0], &[2]).is_err());
    }

    #[test]
    fn rank_padding() {
        assert_eq!(to5(&[3, 4, 6]).unwrap(), (vec![1, 3, 4, 6, 1], 1));
        assert_eq!(to5(&[3, 4, 6, 2]).unwrap(), (vec![1, 3, 4, 6, 2], 1));
        assert_eq!(to5(&[2, 3, 4, 6, 2]).unwrap().1, 0);
        assert!(to5(&[4, 6]).is_err());
        assert_eq!(from5(&[1, 3, 4, 4, 1], 3), [3, 4, 4]);
        assert_eq!(from5(&[1, 3, 4, 4, 2], 4), [3, 4, 4, 2]);
        assert_eq!(from5(&[2, 3, 4, 4, 2], 5), [2, 3, 4, 4, 2]);
    }

    #[test]
    fn errors_map_to_python_types() {
        Python::with_gil(|py| {
            assert!(to_py(Error::config("x")).is_instance_of::<PyValueError>(py));
            assert!(to_py(Error::format("x")).is_instance_of::<PyIOError>(py));
            assert!(to_py(Error::Diverged { step: 1, loss: f64::NAN }).is_instance_of::<PyRuntimeError>(py));
        });
    }

    #[test]
    fn default_config_parses() {
        assert_eq!(parse_config(Some(&default_config().unwrap())).unwrap(), RunConfig::default());
        assert!(parse_config(Some("[model]\nbogus = 1")).is_err());
    }
}

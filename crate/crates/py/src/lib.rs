//! Python bindings: the classifier, the flow-field attack and baselines, the
//! warp, and the flow metrics, with images and flows passed as flat lists.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stadv_core::attacks;
use stadv_core::data;
use stadv_core::defense;
use stadv_core::losses::{AttackGoal, AttackObjectiveConfig};
use stadv_core::metrics;
use stadv_core::models::{build_model, Classifier, DifferentiableModel};
use stadv_core::solver::LbfgsConfig;
use stadv_core::trainer;
use stadv_core::warp::{self, FlowField, Image};

fn err(e: stadv_core::Error) -> PyErr {
    match e {
        stadv_core::Error::Io { .. } | stadv_core::Error::Parse { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_from_py(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Image> {
    Image::new(height, width, channels, data).map_err(err)
}

fn goal_from_py(target: Option<usize>, true_class: usize) -> AttackGoal {
    match target {
        Some(t) => AttackGoal::Targeted {
            target: t,
            true_class,
        },
        None => AttackGoal::Untargeted { true_class },
    }
}

fn outcome_to_dict(py: Python<'_>, o: &attacks::AttackOutcome) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", o.method.name())?;
    d.set_item("success", o.success)?;
    d.set_item("adversarial", o.adversarial.data.clone())?;
    if let Some(flow) = &o.flow {
        d.set_item("flow_du", flow.du.clone())?;
        d.set_item("flow_dv", flow.dv.clone())?;
    }
    d.set_item("flow_tv", o.flow_tv)?;
    d.set_item("flow_l2", o.flow_l2)?;
    d.set_item("tau", o.tau)?;
    d.set_item("objective_trace", o.objective_trace.clone())?;
    d.set_item("wall_ms", o.wall_ms)?;
    Ok(d.into())
}

/// A classifier: architecture plus weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Classifier,
}

#[pymethods]
impl PyModel {
    /// Build a named architecture (A, B, C, resnet_small) with seeded
    /// freshly initialized weights.
    #[new]
    #[pyo3(signature = (name, seed = 0))]
    fn new(name: &str, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: build_model(name, seed).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// (height, width, channels) expected by the model.
    #[getter]
    fn input_geometry(&self) -> (usize, usize, usize) {
        self.inner.input
    }

    fn load_weights(&mut self, path: &str) -> PyResult<()> {
        data::load_weights(&mut self.inner, std::path::Path::new(path)).map_err(err)
    }

    #[pyo3(signature = (path, meta = None))]
    fn save_weights(&self, path: &str, meta: Option<&str>) -> PyResult<()> {
        data::save_weights(&self.inner, std::path::Path::new(path), meta).map_err(err)
    }

    /// Eval-mode logits of one image (flat channel-planar [0,1] pixels).
    fn logits(&self, height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let img = image_from_py(height, width, channels, pixels)?;
        self.inner.logits_image(&img).map_err(err)
    }

    /// Predicted class of one image.
    fn predict(&self, height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> PyResult<usize> {
        let img = image_from_py(height, width, channels, pixels)?;
        self.inner.predict(&img).map_err(err)
    }
}

/// MNIST/CIFAR-10 records loaded from their standard binary containers.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: data::Dataset,
    geometry: (usize, usize, usize),
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// (pixels, label) for one record.
    fn get(&self, index: usize) -> PyResult<(Vec<f64>, usize)> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {index} out of range for {} records",
                self.inner.len()
            )));
        }
        Ok((self.inner.images[index].data.clone(), self.inner.labels[index]))
    }

    #[getter]
    fn geometry(&self) -> (usize, usize, usize) {
        self.geometry
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn checksum(&self) -> u64 {
        self.inner.checksum
    }
}

/// Load an MNIST split ("train" or "test") from IDX files under `dir`.
#[pyfunction]
fn load_mnist(dir: &str, split: &str) -> PyResult<PyDataset> {
    let inner = data::load_mnist(std::path::Path::new(dir), split).map_err(err)?;
    Ok(PyDataset {
        inner,
        geometry: (28, 28, 1),
    })
}

/// Load CIFAR-10 binary batches from a file or directory.
#[pyfunction]
fn load_cifar10(path: &str) -> PyResult<PyDataset> {
    let inner = data::load_cifar10(std::path::Path::new(path)).map_err(err)?;
    Ok(PyDataset {
        inner,
        geometry: (32, 32, 3),
    })
}

/// Bilinearly warp an image by a per-pixel flow field (du along rows, dv
/// along columns); returns the warped flat pixels.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn bilinear_warp(
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let img = image_from_py(height, width, channels, pixels)?;
    let flow = FlowField::new(height, width, du, dv).map_err(err)?;
    Ok(warp::bilinear_warp(&img, &flow).map_err(err)?.data)
}

/// Flow magnitude metrics (tv, l2) of a displacement field.
#[pyfunction]
fn flow_metrics(height: usize, width: usize, du: Vec<f64>, dv: Vec<f64>) -> PyResult<(f64, f64)> {
    let flow = FlowField::new(height, width, du, dv).map_err(err)?;
    Ok((metrics::flow_tv_metric(&flow), metrics::flow_l2_metric(&flow)))
}

/// Run the flow-field attack on one image. `target=None` runs the
/// untargeted form. Returns an outcome dict.
#[pyfunction]
#[pyo3(signature = (model, pixels, true_class, target = None, tau = 0.05, kappa = 0.0, max_iters = 150, adaptive_blur = false))]
#[allow(clippy::too_many_arguments)]
fn stadv_attack(
    py: Python<'_>,
    model: &PyModel,
    pixels: Vec<f64>,
    true_class: usize,
    target: Option<usize>,
    tau: f64,
    kappa: f64,
    max_iters: usize,
    adaptive_blur: bool,
) -> PyResult<Py<PyDict>> {
    let (h, w, c) = model.inner.input;
    let img = image_from_py(h, w, c, pixels)?;
    let cfg = AttackObjectiveConfig::new(tau, kappa, goal_from_py(target, true_class)).map_err(err)?;
    let solver = LbfgsConfig {
        max_iterations: max_iters,
        ..Default::default()
    };
    let outcome = if adaptive_blur {
        attacks::adaptive_blur_attack(&model.inner, &img, &cfg, &solver).map_err(err)?
    } else {
        attacks::stadv_attack(&model.inner, &img, &cfg, &solver).map_err(err)?
    };
    outcome_to_dict(py, &outcome)
}

/// Single signed-gradient step attack.
#[pyfunction]
#[pyo3(signature = (model, pixels, true_class, epsilon, target = None))]
fn fgsm_attack(
    py: Python<'_>,
    model: &PyModel,
    pixels: Vec<f64>,
    true_class: usize,
    epsilon: f64,
    target: Option<usize>,
) -> PyResult<Py<PyDict>> {
    let (h, w, c) = model.inner.input;
    let img = image_from_py(h, w, c, pixels)?;
    let outcome =
        attacks::fgsm_attack(&model.inner, &img, goal_from_py(target, true_class), epsilon)
            .map_err(err)?;
    outcome_to_dict(py, &outcome)
}

/// Iterated projected signed-gradient attack.
#[pyfunction]
#[pyo3(signature = (model, pixels, true_class, epsilon, steps = 10, step_size = 0.075, target = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pgd_attack(
    py: Python<'_>,
    model: &PyModel,
    pixels: Vec<f64>,
    true_class: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    target: Option<usize>,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let (h, w, c) = model.inner.input;
    let img = image_from_py(h, w, c, pixels)?;
    let outcome = attacks::pgd_attack(
        &model.inner,
        &img,
        goal_from_py(target, true_class),
        epsilon,
        steps,
        step_size,
        true,
        seed,
    )
    .map_err(err)?;
    outcome_to_dict(py, &outcome)
}

/// Margin-loss attack with an L2 penalty in tanh space.
#[pyfunction]
#[pyo3(signature = (model, pixels, true_class, target = None, kappa = 0.0, c_weight = 1.0, steps = 60))]
#[allow(clippy::too_many_arguments)]
fn cw_attack(
    py: Python<'_>,
    model: &PyModel,
    pixels: Vec<f64>,
    true_class: usize,
    target: Option<usize>,
    kappa: f64,
    c_weight: f64,
    steps: usize,
) -> PyResult<Py<PyDict>> {
    let (h, w, c) = model.inner.input;
    let img = image_from_py(h, w, c, pixels)?;
    let outcome = attacks::cw_attack(
        &model.inner,
        &img,
        goal_from_py(target, true_class),
        kappa,
        c_weight,
        steps,
    )
    .map_err(err)?;
    outcome_to_dict(py, &outcome)
}

/// 3x3 same-size mean blur (the restoration defense).
#[pyfunction]
fn mean_blur(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
    let img = image_from_py(height, width, channels, pixels)?;
    Ok(defense::mean_blur_restore(&img).data)
}

/// Train a model on a dataset; returns a report dict.
#[pyfunction]
#[pyo3(signature = (model, train_data, test_data, epochs = 5, batch_size = 64, learning_rate = 1e-3, seed = 0, adversarial_mode = "none", epsilon = 0.3))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &mut PyModel,
    train_data: &PyDataset,
    test_data: &PyDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    adversarial_mode: &str,
    epsilon: f64,
) -> PyResult<Py<PyDict>> {
    let mode = match adversarial_mode {
        "none" => trainer::AdvMode::None,
        "fgsm" => trainer::AdvMode::Fgsm,
        "pgd" => trainer::AdvMode::Pgd,
        other => {
            return Err(PyValueError::new_err(format!(
                "adversarial_mode '{other}' not available here (use none, fgsm, or pgd)"
            )))
        }
    };
    let cfg = trainer::TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        seed,
        adversarial_mode: mode,
        epsilon,
        ..Default::default()
    };
    let report = trainer::train(&mut model.inner, &train_data.inner, &test_data.inner, &cfg, &[])
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("epochs", report.epochs)?;
    d.set_item("epoch_losses", report.epoch_losses)?;
    d.set_item("final_test_accuracy", report.final_test_accuracy)?;
    d.set_item("wall_ms", report.wall_ms)?;
    d.set_item("seed", report.seed)?;
    Ok(d.into())
}

#[pymodule]
fn stadv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(load_cifar10, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_warp, m)?)?;
    m.add_function(wrap_pyfunction!(flow_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(stadv_attack, m)?)?;
    m.add_function(wrap_pyfunction!(fgsm_attack, m)?)?;
    m.add_function(wrap_pyfunction!(pgd_attack, m)?)?;
    m.add_function(wrap_pyfunction!(cw_attack, m)?)?;
    m.add_function(wrap_pyfunction!(mean_blur, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

//! Python bindings for the core registration operations: shape generation,
//! warping, losses, metrics, and forward passes on trained checkpoints.

use ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use coopreg::experiment as cexp;
use coopreg::field::{self, Coordinate, DisplacementField, Image};
use coopreg::loss;
use coopreg::metrics;
use coopreg::nets;
use coopreg::synth;
use coopreg::train;

fn to_py_err(e: coopreg::Error) -> PyErr {
    match e {
        coopreg::Error::Io(_) | coopreg::Error::Format(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image_from_numpy(a: &PyReadonlyArray2<'_, f64>) -> PyResult<Image> {
    let arr: Array2<f64> = a.as_array().to_owned();
    Image::new(arr).map_err(to_py_err)
}

fn field_from_numpy(a: &PyReadonlyArray3<'_, f64>) -> PyResult<DisplacementField> {
    let arr: Array3<f64> = a.as_array().to_owned();
    DisplacementField::new(arr).map_err(to_py_err)
}

fn sample_to_numpy<'py>(
    py: Python<'py>,
    sample: &synth::ShapeSample,
) -> (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>) {
    let img = sample.image.data().clone().into_pyarray(py);
    let mut marks = Array2::zeros((sample.landmarks.len(), 2));
    for (i, lm) in sample.landmarks.iter().enumerate() {
        marks[[i, 0]] = lm.row;
        marks[[i, 1]] = lm.col;
    }
    (img, marks.into_pyarray(py))
}

/// Renders a linear box-bump sample; returns (image HxW, landmarks Kx2).
#[pyfunction]
fn linear_boxbump<'py>(
    py: Python<'py>,
    t: f64,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>)> {
    let sample = synth::make_linear_boxbump(t).map_err(to_py_err)?;
    Ok(sample_to_numpy(py, &sample))
}

/// Renders a rotating box-bump sample; returns (image HxW, landmarks Kx2).
#[pyfunction]
fn rotating_boxbump<'py>(
    py: Python<'py>,
    theta_deg: f64,
) -> PyResult<(Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>)> {
    let sample = synth::make_rotating_boxbump(theta_deg).map_err(to_py_err)?;
    Ok(sample_to_numpy(py, &sample))
}

/// Bilinear sample with border clamping at a continuous (row, col) point.
#[pyfunction]
fn bilinear_sample(image: PyReadonlyArray2<'_, f64>, row: f64, col: f64) -> PyResult<f64> {
    let img = image_from_numpy(&image)?;
    field::bilinear_sample(&img, Coordinate::new(row, col)).map_err(to_py_err)
}

/// Backward-warps an HxW image by an HxWx2 displacement field (row-offset,
/// col-offset, in pixel units).
#[pyfunction]
fn warp<'py>(
    py: Python<'py>,
    image: PyReadonlyArray2<'_, f64>,
    displacement: PyReadonlyArray3<'_, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = image_from_numpy(&image)?;
    let f = field_from_numpy(&displacement)?;
    let warped = field::warp_image(&img, &f).map_err(to_py_err)?;
    Ok(warped.data().clone().into_pyarray(py))
}

/// Clipped, `[0, 1]`-rescaled signed Euclidean distance transform.
#[pyfunction]
#[pyo3(signature = (image, threshold = 0.5))]
fn signed_distance<'py>(
    py: Python<'py>,
    image: PyReadonlyArray2<'_, f64>,
    threshold: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let img = image_from_numpy(&image)?;
    let sdt = field::to_signed_distance(&img, threshold).map_err(to_py_err)?;
    Ok(sdt.data().clone().into_pyarray(py))
}

/// Mean squared difference between two images.
#[pyfunction]
fn l2_loss(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    loss::l2_image_loss(&image_from_numpy(&a)?, &image_from_numpy(&b)?).map_err(to_py_err)
}

/// Windowed normalized cross-correlation loss.
#[pyfunction]
#[pyo3(signature = (a, b, window = 9))]
fn ncc_loss(
    a: PyReadonlyArray2<'_, f64>,
    b: PyReadonlyArray2<'_, f64>,
    window: usize,
) -> PyResult<f64> {
    loss::ncc_loss(&image_from_numpy(&a)?, &image_from_numpy(&b)?, window).map_err(to_py_err)
}

/// Mean squared Frobenius norm of the forward-difference field Jacobian.
#[pyfunction]
fn smoothness(displacement: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    Ok(loss::smoothness_penalty(&field_from_numpy(&displacement)?))
}

/// Dice coefficient of the thresholded foreground sets.
#[pyfunction]
#[pyo3(signature = (a, b, threshold = 0.5))]
fn dice(
    a: PyReadonlyArray2<'_, f64>,
    b: PyReadonlyArray2<'_, f64>,
    threshold: f64,
) -> PyResult<f64> {
    metrics::dice(&image_from_numpy(&a)?, &image_from_numpy(&b)?, threshold).map_err(to_py_err)
}

/// False-color overlap image (HxWx3 uint8): white = overlap, green =
/// registered only, magenta = target only.
#[pyfunction]
#[pyo3(signature = (target, registered, threshold = 0.5))]
fn falsecolor<'py>(
    py: Python<'py>,
    target: PyReadonlyArray2<'_, f64>,
    registered: PyReadonlyArray2<'_, f64>,
    threshold: f64,
) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let rgb = cexp::render_falsecolor(
        &image_from_numpy(&target)?,
        &image_from_numpy(&registered)?,
        threshold,
    )
    .map_err(to_py_err)?;
    Ok(rgb.into_pyarray(py))
}

/// A trained model loaded from a checkpoint directory.
#[pyclass]
struct Model {
    inner: train::TrainedModel,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint directory written by the `coopreg` CLI.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: train::load_checkpoint(path).map_err(to_py_err)?,
        })
    }

    /// Predicts the HxWx2 displacement field for a source/target pair.
    fn predict_field<'py>(
        &self,
        py: Python<'py>,
        source: PyReadonlyArray2<'_, f64>,
        target: PyReadonlyArray2<'_, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let field = nets::primary_forward(
            &self.inner.primary,
            &image_from_numpy(&source)?,
            &image_from_numpy(&target)?,
        )
        .map_err(to_py_err)?;
        Ok(field.data().clone().into_pyarray(py))
    }

    /// Autoencodes a field; returns (latent vector, reconstruction HxWx2).
    fn autoencode<'py>(
        &self,
        py: Python<'py>,
        displacement: PyReadonlyArray3<'_, f64>,
    ) -> PyResult<(Vec<f64>, Bound<'py, PyArray3<f64>>)> {
        let cae = self
            .inner
            .cae
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model was trained without an autoencoder"))?;
        let (latent, recon) =
            nets::cae_forward(cae, &field_from_numpy(&displacement)?).map_err(to_py_err)?;
        Ok((latent, recon.data().clone().into_pyarray(py)))
    }

    #[getter]
    fn has_cae(&self) -> bool {
        self.inner.cae.is_some()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.primary.set.num_parameters()
            + self
                .inner
                .cae
                .as_ref()
                .map(|c| c.set.num_parameters())
                .unwrap_or(0)
    }
}

#[pymodule]
fn coopreg_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(linear_boxbump, m)?)?;
    m.add_function(wrap_pyfunction!(rotating_boxbump, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_sample, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(signed_distance, m)?)?;
    m.add_function(wrap_pyfunction!(l2_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ncc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smoothness, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(falsecolor, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}

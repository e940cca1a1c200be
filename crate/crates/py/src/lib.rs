//! Python module `mipsr`: file-level entry points over `mipsr_core`.

use std::collections::HashMap;
use std::path::PathBuf;

use mipsr_core::cli::prepare_inputs;
use mipsr_core::config::{render_config, resolve};
use mipsr_core::image::{load_image, save_image, ImageBuffer, Role};
use mipsr_core::metrics::evaluate;
use mipsr_core::resampling::{downsample, lanczos_kernel};
use mipsr_core::training::run_optimization;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: mipsr_core::Error) -> PyErr {
    match e {
        mipsr_core::Error::InvalidConfig(_) | mipsr_core::Error::InvalidArgument { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn settings(map: Option<HashMap<String, String>>) -> Vec<(String, String)> {
    let mut v: Vec<_> = map.unwrap_or_default().into_iter().collect();
    // HashMap order is random; sorting keeps error reporting stable
    v.sort();
    v
}

/// Lanczos-3 kernel value at `x`.
#[pyfunction]
fn lanczos(x: f64) -> f64 {
    lanczos_kernel(x)
}

/// Effective run settings as `key = value` text.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn config(settings: Option<HashMap<String, String>>) -> PyResult<String> {
    let cfg = resolve(&self::settings(settings), &[]).map_err(to_py)?;
    Ok(render_config(&cfg))
}

/// Downsamples the image at `src` by `scale` and writes it to `dst`.
#[pyfunction]
fn downsample_file(src: PathBuf, scale: usize, dst: PathBuf) -> PyResult<()> {
    let img = load_image(&src, Role::GroundTruth).map_err(to_py)?;
    let (img, _) = img.center_crop_to_multiple(scale).map_err(to_py)?;
    let low = downsample(&img.to_tensor::<f64>(), scale).map_err(to_py)?;
    save_image(&ImageBuffer::from_tensor(&low, Role::Lsr).map_err(to_py)?, &dst).map_err(to_py)
}

/// PSNR, SSIM, VIF and ERGAS of `b` against `a`.
#[pyfunction]
#[pyo3(signature = (a, b, scale=4))]
fn metrics(a: PathBuf, b: PathBuf, scale: usize) -> PyResult<HashMap<String, f64>> {
    let a = load_image(&a, Role::GroundTruth).map_err(to_py)?;
    let b = load_image(&b, Role::Sr).map_err(to_py)?;
    let r = evaluate(&a, &b, scale).map_err(to_py)?;
    Ok(HashMap::from([
        ("psnr".to_string(), r.psnr),
        ("ssim".to_string(), r.ssim),
        ("vif".to_string(), r.vif),
        ("ergas".to_string(), r.ergas),
    ]))
}

/// Super-resolves `lsr` guided by `reference` and writes the PNG to `out`.
///
/// `settings` takes the config-file keys as strings. Returns the loss log as
/// `(iteration, loss_sr, loss_ref)` tuples.
#[pyfunction]
#[pyo3(signature = (lsr, reference, out, settings=None))]
fn super_resolve(
    py: Python<'_>,
    lsr: PathBuf,
    reference: PathBuf,
    out: PathBuf,
    settings: Option<HashMap<String, String>>,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let cfg = resolve(&self::settings(settings), &[]).map_err(to_py)?;
    let lsr = load_image(&lsr, Role::Lsr).map_err(to_py)?;
    let reference = load_image(&reference, Role::Reference).map_err(to_py)?;
    let result = py.detach(|| {
        let (lsr, reference) = prepare_inputs(&cfg, &lsr, &reference)?;
        run_optimization(&cfg, &lsr, &reference)
    });
    let result = result.map_err(to_py)?;
    save_image(&result.sr, &out).map_err(to_py)?;
    Ok(result.log.iter().map(|r| (r.iteration, r.loss_sr, r.loss_ref)).collect())
}

#[pymodule]
fn mipsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lanczos, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(downsample_file, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(super_resolve, m)?)?;
    Ok(())
}

//! Python bindings. Builds a `remnist` extension module; copy the
//! produced `libremnist.so` somewhere importable as `remnist.so`
//! (see python/smoke_test.py).
//!
//! Images cross the boundary as `bytes`: 2048 packed or 16384 unpacked
//! source bitmaps in, 784-byte digit rasters out. Everything else is
//! plain ints, floats, lists and dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use remnist_core::assemble::{assemble as assemble_rs, RecipeConfig};
use remnist_core::formats::{
    read_idx_file, read_source_archive_file, write_idx_file, IdxTensor, SourceImage,
    SOURCE_BITMAP_BYTES, SOURCE_SIDE,
};
use remnist_core::matching::{
    hungarian as hungarian_rs, jittered_distance as jittered_distance_rs, CostMatrix,
};
use remnist_core::preprocess::{preprocess_digit, CropConfig, Digit28, ResampleConfig};
use remnist_core::stats::{
    bonferroni_max_k as bonferroni_rs, erfc as erfc_rs, erfc_inv as erfc_inv_rs,
    paired_worse as paired_worse_rs, wald_interval as wald_rs, Confidence, Decision, ErrorCount,
    PairedCounts,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn resample_config(fudge: f64, legacy: bool) -> PyResult<ResampleConfig> {
    if legacy {
        ResampleConfig::legacy(fudge).map_err(value_err)
    } else {
        ResampleConfig::new(
            fudge,
            remnist_core::preprocess::Normalization::ExactArea,
            remnist_core::preprocess::Accumulation::Float64,
        )
        .map_err(value_err)
    }
}

/// Read an IDX file (gzipped or plain) into {"dims", "dtype", "data"}.
/// u8 tensors return data as bytes, i32 tensors as a list of ints.
#[pyfunction]
fn idx_read<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let t = read_idx_file(path).map_err(io_err)?;
    let d = PyDict::new(py);
    d.set_item("dims", t.dims().to_vec())?;
    match (t.as_u8(), t.as_i32()) {
        (Some(u), _) => {
            d.set_item("dtype", "u8")?;
            d.set_item("data", PyBytes::new(py, u))?;
        }
        (_, Some(i)) => {
            d.set_item("dtype", "i32")?;
            d.set_item("data", i.to_vec())?;
        }
        _ => unreachable!("tensor is u8 or i32"),
    }
    Ok(d)
}

/// Write a u8 IDX tensor; a `.gz` extension selects gzip.
#[pyfunction]
fn idx_write_u8(path: &str, dims: Vec<u32>, data: Vec<u8>) -> PyResult<()> {
    let t = IdxTensor::from_u8(dims, data).map_err(value_err)?;
    write_idx_file(path, &t).map_err(io_err)
}

/// Write an i32 IDX tensor; a `.gz` extension selects gzip.
#[pyfunction]
fn idx_write_i32(path: &str, dims: Vec<u32>, data: Vec<i32>) -> PyResult<()> {
    let t = IdxTensor::from_i32(dims, data).map_err(value_err)?;
    write_idx_file(path, &t).map_err(io_err)
}

fn bitmap_from_bytes(bitmap: &[u8]) -> PyResult<Box<[u8; SOURCE_BITMAP_BYTES]>> {
    match bitmap.len() {
        SOURCE_BITMAP_BYTES => {
            let mut packed = Box::new([0u8; SOURCE_BITMAP_BYTES]);
            packed.copy_from_slice(bitmap);
            Ok(packed)
        }
        n if n == SOURCE_SIDE * SOURCE_SIDE => Ok(SourceImage::pack_bitmap(bitmap)),
        n => Err(PyValueError::new_err(format!(
            "bitmap must be {SOURCE_BITMAP_BYTES} packed or {} unpacked bytes, got {n}",
            SOURCE_SIDE * SOURCE_SIDE
        ))),
    }
}

/// Run one source bitmap through the full digit pipeline (crop, box
/// fit, resample, quantize, center). Returns 784 bytes, row-major.
#[pyfunction]
#[pyo3(signature = (bitmap, fudge=0.99, legacy=false))]
fn preprocess_bitmap<'py>(
    py: Python<'py>,
    bitmap: &[u8],
    fudge: f64,
    legacy: bool,
) -> PyResult<Bound<'py, PyBytes>> {
    let packed = bitmap_from_bytes(bitmap)?;
    let src = SourceImage::new(0, 0, 0, 0, packed).map_err(value_err)?;
    let digit = preprocess_digit(&src, &CropConfig::default(), &resample_config(fudge, legacy)?)
        .map_err(value_err)?;
    Ok(PyBytes::new(py, digit.as_bytes()))
}

fn digit_from_bytes(raw: &[u8], which: &str) -> PyResult<Digit28> {
    let arr: [u8; 784] = raw
        .try_into()
        .map_err(|_| PyValueError::new_err(format!("{which} must be 784 bytes, got {}", raw.len())))?;
    Ok(Digit28::from_raw(arr))
}

/// L2/Linf distance between two 784-byte digits at the best of the
/// nine single-pixel shifts: {"l2", "linf", "dx", "dy"}.
#[pyfunction]
fn jittered_distance<'py>(py: Python<'py>, a: &[u8], b: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let dist = jittered_distance_rs(&digit_from_bytes(a, "a")?, &digit_from_bytes(b, "b")?);
    let d = PyDict::new(py);
    d.set_item("l2", dist.l2)?;
    d.set_item("linf", dist.linf)?;
    d.set_item("dx", dist.best_shift.0)?;
    d.set_item("dy", dist.best_shift.1)?;
    Ok(d)
}

/// Minimum-cost assignment of rows to columns. Returns
/// (row_to_col, total_cost); unassigned rows map to None.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<Option<usize>>, f64)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("cost rows have unequal lengths"));
    }
    let flat: Vec<f64> = cost.into_iter().flatten().collect();
    let m = CostMatrix::new(rows, cols, flat).map_err(value_err)?;
    let a = hungarian_rs(&m).map_err(value_err)?;
    Ok((a.row_to_col, a.total_cost))
}

/// Two-sided confidence interval for an error rate:
/// {"nu", "halfwidth", "z"}.
#[pyfunction]
#[pyo3(signature = (n, errors, eta=0.05))]
fn wald_interval<'py>(py: Python<'py>, n: u64, errors: u64, eta: f64) -> PyResult<Bound<'py, PyDict>> {
    let w = wald_rs(
        ErrorCount::new(n, errors).map_err(value_err)?,
        Confidence::new(eta).map_err(value_err)?,
    );
    let d = PyDict::new(py);
    d.set_item("nu", w.nu)?;
    d.set_item("halfwidth", w.halfwidth)?;
    d.set_item("z", w.z)?;
    Ok(d)
}

/// One-sided paired test on disagreement counts:
/// {"decision", "margin", "z"} with decision "worse" or
/// "not_established".
#[pyfunction]
#[pyo3(signature = (n12, n21, n=None, eta=0.05))]
fn paired_worse<'py>(
    py: Python<'py>,
    n12: u64,
    n21: u64,
    n: Option<u64>,
    eta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = PairedCounts::new(n.unwrap_or(n12 + n21), n12, n21).map_err(value_err)?;
    let out = paired_worse_rs(p, Confidence::new(eta).map_err(value_err)?);
    let d = PyDict::new(py);
    d.set_item(
        "decision",
        match out.decision {
            Decision::Worse => "worse",
            Decision::NotEstablished => "not_established",
        },
    )?;
    d.set_item("margin", out.margin)?;
    d.set_item("z", out.z)?;
    Ok(d)
}

/// Largest experiment count K for which the observed disagreement
/// stays significant after Bonferroni correction.
#[pyfunction]
#[pyo3(signature = (n12, n21, eta=0.05))]
fn bonferroni_max_k(n12: u64, n21: u64, eta: f64) -> PyResult<u64> {
    let p = PairedCounts::new(n12 + n21, n12, n21).map_err(value_err)?;
    Ok(bonferroni_rs(p, Confidence::new(eta).map_err(value_err)?))
}

#[pyfunction]
fn erfc(x: f64) -> f64 {
    erfc_rs(x)
}

#[pyfunction]
fn erfc_inv(y: f64) -> PyResult<f64> {
    erfc_inv_rs(y).map_err(value_err)
}

/// Rebuild train/test datasets from an NBIN archive and write the six
/// IDX files plus report.json into out_dir. Returns summary counts.
#[pyfunction]
#[pyo3(signature = (
    source, out_dir, writer_split=250, train_completion_start=0,
    test_completion_start=35_000, target=60_000, seed=0,
    fudge=0.99, legacy=false, gzip=false,
))]
#[allow(clippy::too_many_arguments)]
fn assemble<'py>(
    py: Python<'py>,
    source: &str,
    out_dir: &str,
    writer_split: usize,
    train_completion_start: usize,
    test_completion_start: usize,
    target: usize,
    seed: u64,
    fudge: f64,
    legacy: bool,
    gzip: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let archive = read_source_archive_file(source).map_err(io_err)?;
    let cfg = RecipeConfig {
        writer_split_count: writer_split,
        train_completion_start,
        test_completion_start,
        target_size: target,
        shuffle_seed: seed,
        ..RecipeConfig::default()
    };
    let res_cfg = resample_config(fudge, legacy)?;
    let (train, test, report) = py
        .detach(|| assemble_rs(&archive, &cfg, &CropConfig::default(), &res_cfg))
        .map_err(value_err)?;

    let out = PathBuf::from(out_dir);
    std::fs::create_dir_all(&out).map_err(io_err)?;
    train.write_idx_files(&out, "train", gzip).map_err(io_err)?;
    test.write_idx_files(&out, "test", gzip).map_err(io_err)?;

    let d = PyDict::new(py);
    d.set_item("train_len", train.len())?;
    d.set_item("test_len", test.len())?;
    d.set_item("duplicates_removed", report.duplicates_removed.len())?;
    d.set_item("out_dir", out.to_string_lossy())?;
    Ok(d)
}

#[pymodule]
fn remnist(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(idx_read, m)?)?;
    m.add_function(wrap_pyfunction!(idx_write_u8, m)?)?;
    m.add_function(wrap_pyfunction!(idx_write_i32, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_bitmap, m)?)?;
    m.add_function(wrap_pyfunction!(jittered_distance, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(wald_interval, m)?)?;
    m.add_function(wrap_pyfunction!(paired_worse, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni_max_k, m)?)?;
    m.add_function(wrap_pyfunction!(erfc, m)?)?;
    m.add_function(wrap_pyfunction!(erfc_inv, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    Ok(())
}

//! Locating and loading datasets from IDX files.
//!
//! Dataset arguments accept three spellings: a directory containing
//! exactly one `*-images-idx3-ubyte[.gz]` file, the images file itself,
//! or a stem prefix (`out/train` finds `out/train-images-idx3-ubyte` or
//! its `.gz` twin). Labels and optional metadata resolve from the same
//! stem.

use std::path::{Path, PathBuf};

use remnist_core::formats::{read_idx_file, DatasetBundle, IdxTensor};

use crate::{usage, CliError};

const IMAGES_TAG: &str = "-images-idx3-ubyte";
const LABELS_TAG: &str = "-labels-idx1-ubyte";
const METADATA_TAG: &str = "-metadata-idx2-int";

fn find_images_in_dir(dir: &Path) -> Result<PathBuf, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| usage(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut hits: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains(IMAGES_TAG))
        })
        .collect();
    hits.sort();
    match hits.len() {
        0 => Err(usage(format!(
            "no *{IMAGES_TAG} file in {}",
            dir.display()
        ))),
        1 => Ok(hits.remove(0)),
        _ => Err(usage(format!(
            "{} contains {} image files; pass one explicitly",
            dir.display(),
            hits.len()
        ))),
    }
}

/// Resolve a dataset argument to (images, labels, metadata) paths.
pub fn resolve_dataset(spec: &Path) -> Result<(PathBuf, PathBuf, Option<PathBuf>), CliError> {
    let images = if spec.is_dir() {
        find_images_in_dir(spec)?
    } else {
        let name = spec.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.contains(IMAGES_TAG) {
            spec.to_path_buf()
        } else {
            let plain = sibling(spec, &format!("{name}{IMAGES_TAG}"));
            let gz = sibling(spec, &format!("{name}{IMAGES_TAG}.gz"));
            if plain.is_file() {
                plain
            } else if gz.is_file() {
                gz
            } else {
                return Err(usage(format!(
                    "no dataset at {}: tried {} and {}",
                    spec.display(),
                    plain.display(),
                    gz.display()
                )));
            }
        }
    };
    if !images.is_file() {
        return Err(usage(format!("missing images file {}", images.display())));
    }
    let labels = swap_tag(&images, IMAGES_TAG, LABELS_TAG);
    if !labels.is_file() {
        return Err(usage(format!("missing labels file {}", labels.display())));
    }
    let metadata = swap_tag(&images, IMAGES_TAG, METADATA_TAG);
    Ok((images, labels, metadata.is_file().then_some(metadata)))
}

fn sibling(spec: &Path, name: &str) -> PathBuf {
    match spec.parent() {
        Some(parent) => parent.join(name),
        None => PathBuf::from(name),
    }
}

fn swap_tag(path: &Path, from: &str, to: &str) -> PathBuf {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .expect("resolved image paths have utf-8 names");
    path.with_file_name(name.replace(from, to))
}

fn read_tensor(path: &Path) -> Result<IdxTensor, CliError> {
    read_idx_file(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

/// Load a dataset bundle from a dataset argument.
pub fn load_bundle(spec: &Path) -> Result<DatasetBundle, CliError> {
    let (images_path, labels_path, metadata_path) = resolve_dataset(spec)?;
    let images = read_tensor(&images_path)?;
    let labels = read_tensor(&labels_path)?;
    let metadata = metadata_path.as_deref().map(read_tensor).transpose()?;
    DatasetBundle::from_tensors(&images, &labels, metadata.as_ref())
        .map_err(|e| usage(format!("inconsistent dataset at {}: {e}", spec.display())))
}

/// Load a bare label vector from an IDX file.
pub fn load_labels(path: &Path) -> Result<Vec<u8>, CliError> {
    let t = read_tensor(path)?;
    match (t.dims().len(), t.as_u8()) {
        (1, Some(data)) => Ok(data.to_vec()),
        _ => Err(usage(format!(
            "{} is not a [N] u8 label tensor",
            path.display()
        ))),
    }
}

/// One ASCII integer per line.
pub fn write_predictions(path: &Path, preds: &[u8]) -> Result<(), CliError> {
    let mut text = String::with_capacity(preds.len() * 2);
    for p in preds {
        text.push_str(&p.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| crate::internal(format!("cannot write {}: {e}", path.display())))
}

pub fn read_predictions(path: &Path) -> Result<Vec<u8>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            line.trim().parse::<u8>().map_err(|_| {
                usage(format!(
                    "{}:{}: not an integer prediction: {line:?}",
                    path.display(),
                    i + 1
                ))
            })
        })
        .collect()
}

//! On-disk layout of datasets, predictions and models.
//!
//! A dataset directory holds `manifest.json` plus, per entry,
//! `<id>.image.fpft` (c128, y × x × frame), `<id>.maps.fpft` (f64, map × y × x)
//! and `<id>.labels.fpft` (f64 region labels, 0 = background).
//! A predictions directory holds `predictions.json` and `<id>.maps.fpft`.

use std::fs;
use std::path::{Path, PathBuf};

use fpf_core::container::Tensor;
use fpf_core::phantom::{DatasetManifest, Sample, Split};
use fpf_core::types::{MapKind, MrfImage, ParametricMaps};
use ndarray::{Array2, Array3, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const PREDICTIONS_MANIFEST: &str = "predictions.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    t.write(path).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    Tensor::read(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))
}

pub fn image_tensor(img: &MrfImage) -> Tensor {
    Tensor::from_complex(&img.data.clone().into_dyn()).with_axes(&["y", "x", "frame"]).with_units(&["", "", "a.u."])
}

pub fn maps_tensor(maps: &ParametricMaps) -> Tensor {
    let names: Vec<&str> = MapKind::ALL.iter().map(|k| k.name()).collect();
    let units: Vec<&str> = MapKind::ALL.iter().map(|k| k.unit()).collect();
    Tensor::from_f64(&maps.data.clone().into_dyn())
        .with_axes(&["map", "y", "x"])
        .with_meta(serde_json::json!({ "maps": names, "units": units }))
}

pub fn labels_tensor(labels: &Array2<u32>) -> Tensor {
    Tensor::from_f64(&labels.mapv(f64::from).into_dyn()).with_axes(&["y", "x"])
}

pub fn read_image(path: &Path) -> CliResult<MrfImage> {
    let data = read_tensor(path)?
        .to_complex()
        .map_err(CliError::runtime)?
        .into_dimensionality::<Ix3>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(MrfImage { data })
}

pub fn read_maps(path: &Path) -> CliResult<ParametricMaps> {
    let data: Array3<f64> = read_tensor(path)?
        .to_f64()
        .map_err(CliError::runtime)?
        .into_dimensionality::<Ix3>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    ParametricMaps::from_array(data).map_err(CliError::runtime)
}

pub fn read_labels(path: &Path) -> CliResult<Array2<u32>> {
    let data = read_tensor(path)?
        .to_f64()
        .map_err(CliError::runtime)?
        .into_dimensionality::<Ix2>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(data.mapv(|v| v as u32))
}

pub fn entry_file(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join(format!("{id}.{kind}.fpft"))
}

/// Everything stored for one dataset entry.
pub struct Entry {
    pub id: String,
    pub split: Split,
    pub image: MrfImage,
    pub maps: ParametricMaps,
    pub labels: Array2<u32>,
}

impl Entry {
    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|l| l != 0)
    }
}

pub fn write_sample(dir: &Path, sample: &Sample, config_hash: &str) -> CliResult<Vec<String>> {
    let id = &sample.entry.id;
    let prov = |t: Tensor| t.with_provenance(Some(sample.entry.seed), Some(config_hash.to_string()));
    let files = [
        (entry_file(dir, id, "image"), prov(image_tensor(&sample.image))),
        (entry_file(dir, id, "maps"), prov(maps_tensor(&sample.phantom.maps))),
        (entry_file(dir, id, "labels"), prov(labels_tensor(&sample.phantom.region_labels))),
    ];
    let mut names = Vec::new();
    for (path, t) in files {
        write_tensor(&path, &t)?;
        names.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok(names)
}

pub fn read_dataset_manifest(dir: &Path) -> CliResult<DatasetManifest> {
    read_json(&dir.join(DATASET_MANIFEST))
}

/// Load the entries of `split` (all entries when `None`), in manifest order.
pub fn load_entries(dir: &Path, split: Option<Split>) -> CliResult<(DatasetManifest, Vec<Entry>)> {
    let manifest = read_dataset_manifest(dir)?;
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        out.push(Entry {
            id: e.id.clone(),
            split: e.split,
            image: read_image(&entry_file(dir, &e.id, "image"))?,
            maps: read_maps(&entry_file(dir, &e.id, "maps"))?,
            labels: read_labels(&entry_file(dir, &e.id, "labels"))?,
        });
    }
    if out.is_empty() {
        return Err(CliError::Runtime(format!("{} has no entries in the requested split", dir.display())));
    }
    Ok((manifest, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub id: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionsManifest {
    /// `dictionary-matching` or `cnn`.
    pub method: String,
    pub dataset: String,
    pub entries: Vec<PredictionEntry>,
}

pub fn write_predictions(
    dir: &Path,
    method: &str,
    dataset: &Path,
    preds: &[(String, ParametricMaps)],
) -> CliResult<Vec<String>> {
    let mut entries = Vec::new();
    for (id, maps) in preds {
        let path = entry_file(dir, id, "maps");
        write_tensor(&path, &maps_tensor(maps))?;
        entries.push(PredictionEntry { id: id.clone(), file: path.file_name().unwrap().to_string_lossy().into_owned() });
    }
    let files = entries.iter().map(|e| e.file.clone()).collect();
    let manifest = PredictionsManifest { method: method.into(), dataset: dataset.display().to_string(), entries };
    write_json(&dir.join(PREDICTIONS_MANIFEST), &manifest)?;
    Ok(files)
}

/// Maps keyed by entry id, from either a predictions or a dataset directory.
pub fn load_maps(dir: &Path, split: Option<Split>) -> CliResult<Vec<(String, ParametricMaps)>> {
    if dir.join(PREDICTIONS_MANIFEST).exists() {
        let m: PredictionsManifest = read_json(&dir.join(PREDICTIONS_MANIFEST))?;
        m.entries.iter().map(|e| Ok((e.id.clone(), read_maps(&dir.join(&e.file))?))).collect()
    } else if dir.join(DATASET_MANIFEST).exists() {
        let (_, entries) = load_entries(dir, split)?;
        Ok(entries.into_iter().map(|e| (e.id, e.maps)).collect())
    } else {
        Err(CliError::Runtime(format!("{} is neither a dataset nor a predictions directory", dir.display())))
    }
}

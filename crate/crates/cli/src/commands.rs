use std::path::Path;

use fpf_core::archgen::{build_architecture, sweep_architectures, ArchConfig};
use fpf_core::container::{config_hash, Tensor};
use fpf_core::matcher::{compress_dictionary, Matcher};
use fpf_core::metrics::{blurriness, default_thresholds, evaluate, frame_importances, roi_csv, ImportanceInput};
use fpf_core::nn::Network;
use fpf_core::phantom::{generate_sample, plan_dataset, Split};
use fpf_core::pipeline::{
    checkpoint_from_state, checkpoint_tensor, load_checkpoint, prepare_subject, reconstruct_image, train,
    PreparedSubject,
};
use fpf_core::signal::{build_dictionary, Dictionary, DictionaryOptions, ParameterGrid, SequenceTrain};
use fpf_core::types::{MapKind, ParametricMaps, N_MAPS};
use ndarray::{Array2, Ix1, Ix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::*;
use crate::error::{CliError, CliResult};
use crate::io::*;
use crate::run::Run;

pub fn simulate_dict(run: &mut Run, cfg_path: Option<&Path>) -> CliResult<()> {
    let cfg: DictConfig = load(cfg_path)?;
    let seq = match &cfg.sequence {
        Some(s) => s.clone(),
        None => SequenceTrain::default_train(cfg.frames),
    };
    seq.validate().map_err(CliError::schema)?;
    let grid = cfg.grid.clone().unwrap_or_else(ParameterGrid::desk_default);
    run.record_config(&cfg)?;
    let hash = config_hash(&cfg)?;

    let dict = run.time("simulate", || build_dictionary(&seq, &grid, DictionaryOptions::default()))?;
    let meta = json!({ "sequence": seq, "grid": grid, "normalized": dict.normalized });
    let atoms = Tensor::from_complex(&dict.atoms.clone().into_dyn())
        .with_axes(&["atom", "frame"])
        .with_provenance(None, Some(hash.clone()))
        .with_meta(meta);
    run.write_tensor("dictionary.fpft", &atoms)?;
    let norms = ndarray::Array1::from(dict.norms.clone()).into_dyn();
    run.write_tensor("norms.fpft", &Tensor::from_f64(&norms).with_axes(&["atom"]))?;
    let params = Array2::from_shape_fn((dict.len(), N_MAPS), |(i, k)| dict.params[i].to_array()[k]);
    let names: Vec<&str> = MapKind::ALL.iter().map(|k| k.name()).collect();
    run.write_tensor(
        "params.fpft",
        &Tensor::from_f64(&params.into_dyn()).with_axes(&["atom", "map"]).with_meta(json!({ "maps": names })),
    )?;
    if let Some(rank) = cfg.svd_rank {
        let (cd, proj) = run.time("svd", || compress_dictionary(&dict, rank))?;
        let basis = Tensor::from_complex(&proj.basis.clone().into_dyn())
            .with_axes(&["frame", "component"])
            .with_meta(json!({ "singular_values": cd.singular_values }));
        run.write_tensor("svd_basis.fpft", &basis)?;
    }
    eprintln!("{} atoms x {} frames", dict.len(), dict.frames());
    Ok(())
}

pub fn load_dictionary(dir: &Path) -> CliResult<Dictionary> {
    let t = read_tensor(&dir.join("dictionary.fpft"))?;
    let meta = &t.header.meta;
    let grid: ParameterGrid = serde_json::from_value(meta["grid"].clone()).map_err(CliError::runtime)?;
    let normalized = meta["normalized"].as_bool().unwrap_or(true);
    let atoms = t.to_complex()?.into_dimensionality::<Ix2>().map_err(CliError::runtime)?;
    let norms = read_tensor(&dir.join("norms.fpft"))?.to_f64()?.into_dimensionality::<Ix1>().map_err(CliError::runtime)?;
    let params = (0..atoms.nrows()).map(|i| grid.point(i)).collect();
    Ok(Dictionary { atoms, params, norms: norms.to_vec(), normalized, grid })
}

pub fn generate_dataset(run: &mut Run, cfg_path: Option<&Path>) -> CliResult<()> {
    let DatasetRun(cfg) = load(cfg_path)?;
    cfg.validate().map_err(CliError::schema)?;
    let seed = run.seed.unwrap_or(0);
    run.record_config(&cfg)?;
    let hash = config_hash(&cfg)?;
    let mut manifest = plan_dataset(&cfg, seed)?;
    let out = run.out.clone();
    let files = run.time("generate", || {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let sample = generate_sample(&cfg, e)?;
                write_sample(&out, &sample, &hash)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    for (e, f) in manifest.entries.iter_mut().zip(files) {
        run.outputs.extend(f.iter().cloned());
        e.files = f;
    }
    run.write_json(DATASET_MANIFEST, &manifest)?;
    eprintln!("{} phantoms, acceleration {:.2}", manifest.entries.len(), manifest.acceleration_factor);
    Ok(())
}

pub fn match_maps(run: &mut Run, cfg_path: Option<&Path>, dataset: &Path, dict_dir: Option<&Path>) -> CliResult<()> {
    let cfg: MatchConfig = load(cfg_path)?;
    run.record_config(&cfg)?;
    run.inputs.push(dataset.display().to_string());
    let (manifest, entries) = load_entries(dataset, cfg.split)?;
    let dict = match dict_dir {
        Some(d) => {
            run.inputs.push(d.display().to_string());
            load_dictionary(d)?
        }
        None => {
            let seq = manifest.config.sequence()?;
            run.time("simulate", || build_dictionary(&seq, &manifest.config.grid()?, DictionaryOptions::default()))?
        }
    };
    let compressed = match cfg.svd_rank {
        Some(k) => Some(compress_dictionary(&dict, k).map_err(CliError::schema)?),
        None => None,
    };
    let matcher = match &compressed {
        Some((cd, proj)) => Matcher::compressed(cd, proj),
        None => Matcher::new(&dict)?,
    };
    let preds = run.time("match", || {
        entries
            .iter()
            .map(|e| Ok((e.id.clone(), matcher.match_image(&e.image, Some(&e.foreground()))?.maps)))
            .collect::<CliResult<Vec<_>>>()
    })?;
    let files = write_predictions(&run.out, "dictionary-matching", dataset, &preds)?;
    run.outputs.extend(files);
    run.outputs.push(PREDICTIONS_MANIFEST.into());
    Ok(())
}

pub fn build_arch(run: &mut Run, cfg_path: Option<&Path>) -> CliResult<()> {
    let ArchRun(cfg) = load(cfg_path)?;
    cfg.validate().map_err(CliError::schema)?;
    run.record_config(&cfg)?;
    let spec = run.time("build", || build_architecture(&cfg))?;
    run.write_json("arch.json", &spec)?;
    eprintln!("C_T_start {} with {} parameters", spec.c_t_start, spec.realized_param_count);
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    receptive_field: usize,
    budget: u64,
    spec: Option<fpf_core::archgen::ArchSpec>,
    error: Option<String>,
}

pub fn sweep_arch(run: &mut Run, cfg_path: Option<&Path>) -> CliResult<()> {
    let cfg: SweepConfig = load(cfg_path)?;
    cfg.base.validate().map_err(CliError::schema)?;
    run.record_config(&cfg)?;
    let rows: Vec<SweepRow> = run.time("sweep", || {
        Ok::<_, CliError>(
            sweep_architectures(&cfg.base, &cfg.receptive_fields, &cfg.budgets)
                .into_iter()
                .map(|(r, b, res)| match res {
                    Ok(spec) => SweepRow { receptive_field: r, budget: b, spec: Some(spec), error: None },
                    Err(e) => SweepRow { receptive_field: r, budget: b, spec: None, error: Some(e.to_string()) },
                })
                .collect(),
        )
    })?;
    let mut csv = String::from("receptive_field,budget,realized_param_count,c_t_start,error\n");
    for r in &rows {
        match &r.spec {
            Some(s) => csv.push_str(&format!("{},{},{},{},\n", r.receptive_field, r.budget, s.realized_param_count, s.c_t_start)),
            None => csv.push_str(&format!("{},{},,,\"{}\"\n", r.receptive_field, r.budget, r.error.as_deref().unwrap_or(""))),
        }
    }
    run.write_json("sweep.json", &rows)?;
    run.write_text("sweep.csv", &csv)?;
    Ok(())
}

fn prepare(entries: &[Entry], grid: &ParameterGrid) -> CliResult<Vec<PreparedSubject>> {
    entries
        .iter()
        .map(|e| Ok(prepare_subject(&e.id, &e.image, &e.maps, &e.foreground(), grid)?))
        .collect()
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    arch: &'a fpf_core::archgen::ArchSpec,
    batches_per_epoch: usize,
    steps: usize,
    final_loss: Option<f64>,
    validation: &'a [fpf_core::pipeline::ValidationPoint],
}

pub fn train_model(run: &mut Run, cfg_path: Option<&Path>, dataset: &Path) -> CliResult<()> {
    let mut cfg: TrainRun = load(cfg_path)?;
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate_fields().map_err(CliError::schema)?;
    run.inputs.push(dataset.display().to_string());
    let (manifest, entries) = load_entries(dataset, None)?;
    let arch = cfg.arch.unwrap_or_else(|| ArchConfig::desk(cfg.receptive_field, manifest.config.frames));
    arch.validate().map_err(CliError::schema)?;
    cfg.arch = Some(arch);
    run.record_config(&cfg)?;
    let hash = config_hash(&cfg)?;
    let grid = manifest.config.grid()?;
    let (train_e, rest): (Vec<Entry>, Vec<Entry>) = entries.into_iter().partition(|e| e.split == Split::Train);
    let val_e: Vec<Entry> = rest.into_iter().filter(|e| e.split == Split::Validation).collect();
    let train_set = prepare(&train_e, &grid)?;
    let val_set = prepare(&val_e, &grid)?;
    if train_set.is_empty() {
        return Err(CliError::Runtime("dataset has no training entries".into()));
    }
    let spec = build_architecture(&arch)?;
    let mut net = Network::new(&spec, cfg.train.layer_order, cfg.train.seed)?;
    let report = run.time("train", || train(&mut net, &train_set, &val_set, &cfg.train))?;
    let prov = |t: Tensor| t.with_provenance(Some(cfg.train.seed), Some(hash.clone()));
    run.write_tensor("model.fpft", &prov(checkpoint_tensor(&net, cfg.train.epochs.checked_sub(1))))?;
    if !report.checkpoints.is_empty() {
        std::fs::create_dir_all(run.out.join("checkpoints")).map_err(CliError::runtime)?;
        for c in &report.checkpoints {
            let t = prov(checkpoint_from_state(&spec, cfg.train.layer_order, &c.state, Some(c.epoch)));
            run.write_tensor(&format!("checkpoints/epoch_{:04}.fpft", c.epoch + 1), &t)?;
        }
    }
    run.write_text("loss.csv", &report.loss_csv())?;
    let mut vcsv = String::from("epoch");
    for k in MapKind::ALL {
        vcsv.push(',');
        vcsv.push_str(k.name());
    }
    vcsv.push('\n');
    for v in &report.validation {
        vcsv.push_str(&v.epoch.to_string());
        for x in v.nrmse {
            vcsv.push_str(&format!(",{x}"));
        }
        vcsv.push('\n');
    }
    run.write_text("validation.csv", &vcsv)?;
    let summary = TrainSummary {
        arch: &spec,
        batches_per_epoch: report.batches_per_epoch,
        steps: report.loss_curve.len(),
        final_loss: report.loss_curve.last().map(|p| p.loss),
        validation: &report.validation,
    };
    run.write_json("train_report.json", &summary)?;
    eprintln!("{} steps, final loss {:?}", summary.steps, summary.final_loss);
    Ok(())
}

pub fn reconstruct(run: &mut Run, cfg_path: Option<&Path>, model: &Path, dataset: &Path) -> CliResult<()> {
    let cfg: ReconstructConfig = load(cfg_path)?;
    if cfg.patch_size == 0 {
        return Err(CliError::Schema("field `patch_size`: must be >= 1".into()));
    }
    run.record_config(&cfg)?;
    run.inputs.extend([model.display().to_string(), dataset.display().to_string()]);
    let net = load_checkpoint(&read_tensor(model)?)?;
    let (manifest, entries) = load_entries(dataset, cfg.split)?;
    let grid = manifest.config.grid()?;
    let preds = run.time("reconstruct", || {
        entries
            .iter()
            .map(|e| {
                let fg = e.foreground();
                Ok((e.id.clone(), reconstruct_image(&net, &e.image, &grid, cfg.patch_size, Some(fg.view()))?))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let files = write_predictions(&run.out, "cnn", dataset, &preds)?;
    run.outputs.extend(files);
    run.outputs.push(PREDICTIONS_MANIFEST.into());
    Ok(())
}

fn align(
    wanted: &[String],
    maps: Vec<(String, ParametricMaps)>,
    source: &Path,
) -> CliResult<Vec<ParametricMaps>> {
    wanted
        .iter()
        .map(|id| {
            maps.iter()
                .find(|(i, _)| i == id)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| CliError::Runtime(format!("{} has no maps for {id}", source.display())))
        })
        .collect()
}

pub fn evaluate_maps(
    run: &mut Run,
    cfg_path: Option<&Path>,
    dataset: &Path,
    pred: &Path,
    reference: Option<&Path>,
) -> CliResult<()> {
    let cfg: EvaluateConfig = load(cfg_path)?;
    run.record_config(&cfg)?;
    run.inputs.extend([dataset.display().to_string(), pred.display().to_string()]);
    let (_, entries) = load_entries(dataset, cfg.split)?;
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let preds = align(&ids, load_maps(pred, cfg.split)?, pred)?;
    let refs = match reference {
        Some(r) => {
            run.inputs.push(r.display().to_string());
            align(&ids, load_maps(r, cfg.split)?, r)?
        }
        None => entries.iter().map(|e| e.maps.clone()).collect(),
    };
    let labels: Vec<Array2<u32>> = entries.iter().map(|e| e.labels.clone()).collect();
    let report = run.time("evaluate", || Ok::<_, CliError>(evaluate(&refs, &preds, &labels)?))?;
    run.write_json("eval.json", &report)?;
    run.write_text("roi.csv", &roi_csv(&report.roi_pairs))?;
    for m in &report.maps {
        eprintln!("{:8} NRMSE {:.4} ± {:.4}", m.map.name(), m.nrmse.mean, m.nrmse.std);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BlurEntry {
    id: String,
    map: MapKind,
    ratios: Vec<f64>,
}

pub fn blur(run: &mut Run, cfg_path: Option<&Path>, input: &Path, dataset: Option<&Path>) -> CliResult<()> {
    let cfg: BlurConfig = load(cfg_path)?;
    let thresholds = cfg.thresholds.clone().unwrap_or_else(default_thresholds);
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::Schema("field `thresholds`: values must lie in [0, 1]".into()));
    }
    run.record_config(&cfg)?;
    run.inputs.push(input.display().to_string());
    let maps = load_maps(input, cfg.split)?;
    let masks = match dataset {
        Some(d) => {
            run.inputs.push(d.display().to_string());
            let (_, entries) = load_entries(d, None)?;
            Some(entries.into_iter().map(|e| (e.id.clone(), e.foreground())).collect::<Vec<_>>())
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut csv = String::from("id,map,threshold,ratio\n");
    for (id, m) in &maps {
        let mask = masks.as_ref().and_then(|ms| ms.iter().find(|(i, _)| i == id).map(|(_, m)| m));
        for kind in MapKind::ALL {
            let mut a = m.map(kind).to_owned();
            if let Some(mask) = mask {
                ndarray::Zip::from(&mut a).and(mask).for_each(|v, &k| {
                    if !k {
                        *v = 0.0;
                    }
                });
            }
            let ratios = blurriness(a.view(), &thresholds);
            for (t, r) in thresholds.iter().zip(&ratios) {
                csv.push_str(&format!("{id},{},{t},{r}\n", kind.name()));
            }
            rows.push(BlurEntry { id: id.clone(), map: kind, ratios });
        }
    }
    let mean: Vec<_> = MapKind::ALL
        .iter()
        .map(|&kind| {
            let sel: Vec<&BlurEntry> = rows.iter().filter(|r| r.map == kind).collect();
            let ratios: Vec<f64> = (0..thresholds.len())
                .map(|i| sel.iter().map(|r| r.ratios[i]).sum::<f64>() / sel.len().max(1) as f64)
                .collect();
            json!({ "map": kind, "ratios": ratios })
        })
        .collect();
    run.write_json("blurriness.json", &json!({ "thresholds": thresholds, "mean": mean, "entries": rows }))?;
    run.write_text("blurriness.csv", &csv)?;
    Ok(())
}

pub fn perm_importance(run: &mut Run, cfg_path: Option<&Path>, model: &Path, dataset: &Path) -> CliResult<()> {
    let cfg: ImportanceConfig = load(cfg_path)?;
    if cfg.repeats == 0 || cfg.patch_size == 0 {
        return Err(CliError::Schema("fields `repeats` and `patch_size` must be >= 1".into()));
    }
    run.record_config(&cfg)?;
    run.inputs.extend([model.display().to_string(), dataset.display().to_string()]);
    let net = load_checkpoint(&read_tensor(model)?)?;
    let (manifest, mut entries) = load_entries(dataset, cfg.split)?;
    if let Some(n) = cfg.max_slices {
        entries.truncate(n);
    }
    let grid = manifest.config.grid()?;
    let t = manifest.config.frames;
    let frames = cfg.frames.clone().unwrap_or_else(|| (0..t).collect());
    if let Some(&f) = frames.iter().find(|&&f| f >= t) {
        return Err(CliError::Schema(format!("field `frames`: frame {f} out of range for {t} frames")));
    }
    let base = run.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|i| base + i).collect();
    let mut mean = vec![[0.0; N_MAPS]; frames.len()];
    run.time("permute", || {
        for e in &entries {
            let fg = e.foreground();
            let input = ImportanceInput {
                net: &net,
                image: &e.image,
                reference: &e.maps,
                foreground: &fg,
                grid: &grid,
                patch_size: cfg.patch_size,
            };
            for (acc, fi) in mean.iter_mut().zip(frame_importances(&input, &frames, &seeds)?) {
                for k in 0..N_MAPS {
                    acc[k] += fi.importance[k] / entries.len() as f64;
                }
            }
        }
        Ok::<_, CliError>(())
    })?;
    let mut csv = String::from("frame");
    for k in MapKind::ALL {
        csv.push(',');
        csv.push_str(k.name());
    }
    csv.push('\n');
    let mut rows = Vec::new();
    for (f, imp) in frames.iter().zip(&mean) {
        csv.push_str(&f.to_string());
        for v in imp {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
        let by_map: serde_json::Map<String, serde_json::Value> =
            MapKind::ALL.iter().map(|k| (k.name().to_string(), json!(imp[k.index()]))).collect();
        rows.push(json!({ "frame": f, "importance": by_map }));
    }
    run.write_json("importance.json", &json!({ "seeds": seeds, "slices": entries.len(), "frames": rows }))?;
    run.write_text("importance.csv", &csv)?;
    Ok(())
}

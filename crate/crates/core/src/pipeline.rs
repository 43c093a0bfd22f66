//! Subject normalization, patch sampling, training and tiled reconstruction.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::{invalid, Error, Result};
use crate::matcher::background_value;
use crate::metrics::{apply_exclusions, nrmse};
use crate::nn::{masked_mse_loss, Adam, LayerOrder, Mode, Network};
use crate::signal::ParameterGrid;
use crate::types::{MapKind, MrfImage, ParametricMaps, N_MAPS};
use crate::archgen::ArchSpec;

/// Per-subject input statistics and per-map target ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub input_mean: f64,
    pub input_std: f64,
    pub map_min: [f64; N_MAPS],
    pub map_max: [f64; N_MAPS],
}

impl NormalizationState {
    fn span(&self, k: usize) -> f64 {
        let d = self.map_max[k] - self.map_min[k];
        if d > 0.0 { d } else { 1.0 }
    }

    pub fn normalize_map_value(&self, kind: MapKind, v: f64) -> f64 {
        let k = kind.index();
        (v - self.map_min[k]) / self.span(k)
    }

    pub fn denormalize_map_value(&self, kind: MapKind, v: f64) -> f64 {
        let k = kind.index();
        v * self.span(k) + self.map_min[k]
    }

    pub fn normalize_maps(&self, maps: &ParametricMaps) -> Array3<f32> {
        let mut out = Array3::zeros(maps.data.dim());
        for kind in MapKind::ALL {
            let src = maps.map(kind);
            let mut dst = out.index_axis_mut(Axis(0), kind.index());
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| *d = self.normalize_map_value(kind, v) as f32);
        }
        out
    }

    pub fn denormalize_maps(&self, maps: &Array3<f32>) -> ParametricMaps {
        let mut out = ParametricMaps::zeros(maps.dim().1, maps.dim().2);
        for kind in MapKind::ALL {
            let src = maps.index_axis(Axis(0), kind.index());
            let mut dst = out.map_mut(kind);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &v| *d = self.denormalize_map_value(kind, v as f64));
        }
        out
    }
}

/// Real and imaginary parts as `2T` channels `(2T, H, W)`, standardized
/// jointly over all voxels and channels.
pub fn normalize_image(img: &MrfImage, grid: &ParameterGrid) -> Result<(Array3<f32>, NormalizationState)> {
    let (h, w, t) = img.data.dim();
    let n = (2 * h * w * t) as f64;
    let sum: f64 = img.data.iter().map(|c| c.re + c.im).sum();
    let mean = sum / n;
    let var = img.data.iter().map(|c| (c.re - mean).powi(2) + (c.im - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(invalid("image is constant; cannot standardize"));
    }
    let mut out = Array3::zeros((2 * t, h, w));
    for ((y, x, f), c) in img.data.indexed_iter() {
        out[(f, y, x)] = ((c.re - mean) / std) as f32;
        out[(t + f, y, x)] = ((c.im - mean) / std) as f32;
    }
    let norm = NormalizationState {
        input_mean: mean,
        input_std: std,
        map_min: MapKind::ALL.map(|k| grid.min(k)),
        map_max: MapKind::ALL.map(|k| grid.max(k)),
    };
    Ok((out, norm))
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(input: &Array3<f32>, norm: &NormalizationState) -> MrfImage {
    let (c, h, w) = input.dim();
    let t = c / 2;
    let mut img = MrfImage::zeros(h, w, t);
    for ((y, x, f), v) in img.data.indexed_iter_mut() {
        v.re = input[(f, y, x)] as f64 * norm.input_std + norm.input_mean;
        v.im = input[(t + f, y, x)] as f64 * norm.input_std + norm.input_mean;
    }
    img
}

/// One normalized training or evaluation slice.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    /// `(2T, H, W)` standardized input.
    pub input: Array3<f32>,
    /// `(M, H, W)` targets scaled to [0, 1] by the grid ranges.
    pub target: Array3<f32>,
    /// Physical-unit reference maps.
    pub maps: ParametricMaps,
    pub mask: Array2<bool>,
    pub norm: NormalizationState,
}

impl PreparedSubject {
    pub fn height(&self) -> usize {
        self.input.dim().1
    }

    pub fn width(&self) -> usize {
        self.input.dim().2
    }
}

pub fn prepare_subject(
    id: &str,
    img: &MrfImage,
    maps: &ParametricMaps,
    mask: &Array2<bool>,
    grid: &ParameterGrid,
) -> Result<PreparedSubject> {
    let (h, w) = (img.height(), img.width());
    if maps.height() != h || maps.width() != w || mask.dim() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: format!("{h}x{w} maps and mask"),
            got: format!("{}x{} maps, {:?} mask", maps.height(), maps.width(), mask.dim()),
        });
    }
    for kind in MapKind::ALL {
        for ((y, x), &v) in maps.map(kind).indexed_iter() {
            if mask[(y, x)] && !grid.in_range(kind, v) {
                return Err(invalid(format!("{} value {v} at ({y}, {x}) outside the grid", kind.name())));
            }
        }
    }
    let (input, norm) = normalize_image(img, grid)?;
    let target = norm.normalize_maps(maps);
    Ok(PreparedSubject { id: id.to_string(), input, target, maps: maps.clone(), mask: mask.clone(), norm })
}

/// Input/target patch geometry: `IP = QP + R - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub output: usize,
    pub receptive_field: usize,
}

impl PatchGeometry {
    pub fn input(&self) -> usize {
        self.output + self.receptive_field - 1
    }

    pub fn margin(&self) -> usize {
        (self.receptive_field - 1) / 2
    }
}

#[derive(Debug, Clone)]
pub struct PatchPair {
    /// `(2T, IP, IP)`
    pub input: Array3<f32>,
    /// `(M, QP, QP)`
    pub target: Array3<f32>,
    pub mask: Array2<bool>,
    pub slice: usize,
    pub top: usize,
    pub left: usize,
}

pub fn extract_patch(subject: &PreparedSubject, slice: usize, top: usize, left: usize, geo: PatchGeometry) -> PatchPair {
    let (ip, qp, m) = (geo.input(), geo.output, geo.margin());
    PatchPair {
        input: subject.input.slice(s![.., top..top + ip, left..left + ip]).to_owned(),
        target: subject.target.slice(s![.., top + m..top + m + qp, left + m..left + m + qp]).to_owned(),
        mask: subject.mask.slice(s![top + m..top + m + qp, left + m..left + m + qp]).to_owned(),
        slice,
        top,
        left,
    }
}

/// Batched patches stacked as network tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Array4<f32>,
    pub target: Array4<f32>,
    pub mask: Array4<bool>,
    pub positions: Vec<(usize, usize, usize)>,
}

/// Seeded stream of uniformly placed patches over a set of slices.
pub struct PatchSampler<'a> {
    subjects: &'a [PreparedSubject],
    geo: PatchGeometry,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn sample_patches(
    subjects: &[PreparedSubject],
    batch_size: usize,
    geo: PatchGeometry,
    seed: u64,
) -> Result<PatchSampler<'_>> {
    if subjects.is_empty() || batch_size == 0 {
        return Err(invalid("patch sampling needs subjects and batch_size >= 1"));
    }
    for s in subjects {
        if s.height() < geo.input() || s.width() < geo.input() {
            return Err(invalid(format!(
                "slice {} of {}x{} is smaller than the {}x{} input patch",
                s.id,
                s.height(),
                s.width(),
                geo.input(),
                geo.input()
            )));
        }
    }
    Ok(PatchSampler { subjects, geo, batch_size, rng: ChaCha8Rng::seed_from_u64(seed) })
}

impl PatchSampler<'_> {
    pub fn next_position(&mut self) -> (usize, usize, usize) {
        let i = self.rng.gen_range(0..self.subjects.len());
        let s = &self.subjects[i];
        let ip = self.geo.input();
        let top = self.rng.gen_range(0..=s.height() - ip);
        let left = self.rng.gen_range(0..=s.width() - ip);
        (i, top, left)
    }

    pub fn next_pair(&mut self) -> PatchPair {
        let (i, top, left) = self.next_position();
        extract_patch(&self.subjects[i], i, top, left, self.geo)
    }

    pub fn next_batch(&mut self) -> Batch {
        let (ip, qp) = (self.geo.input(), self.geo.output);
        let c_in = self.subjects[0].input.dim().0;
        let b = self.batch_size;
        let mut input = Array4::zeros((b, c_in, ip, ip));
        let mut target = Array4::zeros((b, N_MAPS, qp, qp));
        let mut mask = Array4::from_elem((b, 1, qp, qp), false);
        let mut positions = Vec::with_capacity(b);
        for k in 0..b {
            let p = self.next_pair();
            input.index_axis_mut(Axis(0), k).assign(&p.input);
            target.index_axis_mut(Axis(0), k).assign(&p.target);
            mask.slice_mut(s![k, 0, .., ..]).assign(&p.mask);
            positions.push((p.slice, p.top, p.left));
        }
        Batch { input, target, mask, positions }
    }
}

impl Iterator for PatchSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

fn default_epochs() -> usize {
    75
}
fn default_batch() -> usize {
    8
}
fn default_patch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Output patch side QP.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the foreground-voxel based epoch length.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    /// Keep a checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_true")]
    pub validate: bool,
    #[serde(default)]
    pub layer_order: LayerOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            patch_size: default_patch(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            seed: 0,
            batches_per_epoch: None,
            checkpoint_every: None,
            validate: true,
            layer_order: LayerOrder::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate_fields(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be >= 2 for batch normalization"));
        }
        if self.patch_size == 0 {
            return Err(invalid("patch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid("lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.checkpoint_every == Some(0) || self.batches_per_epoch == Some(0) {
            return Err(invalid("checkpoint_every and batches_per_epoch must be >= 1"));
        }
        Ok(())
    }
}

/// ⌈foreground voxels / (batch · QP²)⌉, at least 1.
pub fn batches_per_epoch(subjects: &[PreparedSubject], batch_size: usize, patch_size: usize) -> usize {
    let fg: usize = subjects.iter().map(|s| s.mask.iter().filter(|&&m| m).count()).sum();
    fg.div_ceil(batch_size * patch_size * patch_size).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    /// Mean NRMSE over validation slices, in map order.
    pub nrmse: [f64; N_MAPS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub state: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub batches_per_epoch: usize,
    pub loss_curve: Vec<LossPoint>,
    pub validation: Vec<ValidationPoint>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,batch,loss\n");
        for p in &self.loss_curve {
            out.push_str(&format!("{},{},{}\n", p.epoch, p.batch, p.loss));
        }
        out
    }
}

/// Minimize the masked MSE between network output and normalized target
/// patches with Adam. The network is left in eval mode.
pub fn train(
    net: &mut Network<f32>,
    train_set: &[PreparedSubject],
    validation_set: &[PreparedSubject],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate_fields()?;
    if let Some(s) = train_set.first() {
        if s.input.dim().0 != net.spec.input_channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{} input channels", net.spec.input_channels),
                got: format!("{}", s.input.dim().0),
            });
        }
    }
    let geo = PatchGeometry { output: cfg.patch_size, receptive_field: net.receptive_field() };
    let mut sampler = sample_patches(train_set, cfg.batch_size, geo, cfg.seed)?;
    let per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| batches_per_epoch(train_set, cfg.batch_size, cfg.patch_size));
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut report = TrainReport { batches_per_epoch: per_epoch, loss_curve: Vec::new(), validation: Vec::new(), checkpoints: Vec::new() };
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        net.mode = Mode::Train;
        for _ in 0..per_epoch {
            let b = sampler.next_batch();
            let y = net.forward(&b.input)?;
            let (loss, grad) = masked_mse_loss(&y, &b.target, &b.mask)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                net.mode = Mode::Eval;
                return Err(Error::Diverged { batch: global, loss });
            }
            net.backward(&grad)?;
            adam.step(net)?;
            report.loss_curve.push(LossPoint { epoch, batch: global, loss });
            global += 1;
        }
        net.mode = Mode::Eval;
        if cfg.validate && !validation_set.is_empty() {
            report.validation.push(ValidationPoint { epoch, nrmse: validation_nrmse(net, validation_set, cfg.patch_size)? });
        }
        if cfg.checkpoint_every.is_some_and(|k| (epoch + 1) % k == 0) {
            report.checkpoints.push(Checkpoint { epoch, state: net.export_state() });
        }
    }
    net.mode = Mode::Eval;
    Ok(report)
}

/// Mean NRMSE per map over slices; slices with a zero reference are skipped.
pub fn validation_nrmse(net: &Network<f32>, subjects: &[PreparedSubject], patch_size: usize) -> Result<[f64; N_MAPS]> {
    let mut sums = [0.0; N_MAPS];
    let mut counts = [0usize; N_MAPS];
    for s in subjects {
        let pred = reconstruct_slice(net, &s.input, &s.norm, patch_size)?;
        for kind in MapKind::ALL {
            let mask = apply_exclusions(&s.maps, &s.mask, kind);
            if let Ok(v) = nrmse(s.maps.map(kind), pred.map(kind), Some(mask.view())) {
                sums[kind.index()] += v;
                counts[kind.index()] += 1;
            }
        }
    }
    Ok(std::array::from_fn(|k| if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN }))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Mirror-pad the spatial axes of `(C, H, W)` by `pad` without repeating
/// the edge voxel.
pub fn reflect_pad(x: &Array3<f32>, pad: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h + 2 * pad, w + 2 * pad), |(k, y, z)| {
        x[(k, reflect(y as isize - pad as isize, h), reflect(z as isize - pad as isize, w))]
    })
}

/// Origins of non-overlapping tiles of side `qp` covering `n`; the last
/// tile is shifted inward when `n` is not a multiple of `qp`.
pub fn tile_origins(n: usize, qp: usize) -> Vec<usize> {
    let qp = qp.min(n);
    let mut out: Vec<usize> = (0..n / qp).map(|i| i * qp).collect();
    if !n.is_multiple_of(qp) {
        out.push(n - qp);
    }
    out
}

const TILE_BATCH: usize = 16;

/// Normalized `(M, H, W)` prediction for a normalized `(2T, H, W)` input.
pub fn predict_normalized(net: &Network<f32>, input: &Array3<f32>, patch_size: usize) -> Result<Array3<f32>> {
    let (c, h, w) = input.dim();
    let r = net.receptive_field();
    let pad = (r - 1) / 2;
    if pad >= h.min(w) && pad > 0 {
        return Err(invalid(format!("image {h}x{w} too small for receptive field {r}")));
    }
    let padded = reflect_pad(input, pad);
    let (qh, qw) = (patch_size.min(h), patch_size.min(w));
    let tiles: Vec<(usize, usize)> = tile_origins(h, qh)
        .into_iter()
        .flat_map(|y| tile_origins(w, qw).into_iter().map(move |x| (y, x)))
        .collect();
    let mut out = Array3::zeros((net.spec.output_channels, h, w));
    for chunk in tiles.chunks(TILE_BATCH) {
        let mut x = Array4::zeros((chunk.len(), c, qh + r - 1, qw + r - 1));
        for (k, &(y, z)) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), k).assign(&padded.slice(s![.., y..y + qh + r - 1, z..z + qw + r - 1]));
        }
        let pred = net.predict(&x)?;
        for (k, &(y, z)) in chunk.iter().enumerate() {
            out.slice_mut(s![.., y..y + qh, z..z + qw]).assign(&pred.index_axis(Axis(0), k));
        }
    }
    Ok(out)
}

/// Tiled whole-slice reconstruction in physical units.
pub fn reconstruct_slice(
    net: &Network<f32>,
    input: &Array3<f32>,
    norm: &NormalizationState,
    patch_size: usize,
) -> Result<ParametricMaps> {
    Ok(norm.denormalize_maps(&predict_normalized(net, input, patch_size)?))
}

/// Normalize `img` subject-wise and reconstruct it; voxels outside `mask`
/// get the background values.
pub fn reconstruct_image(
    net: &Network<f32>,
    img: &MrfImage,
    grid: &ParameterGrid,
    patch_size: usize,
    mask: Option<ArrayView2<bool>>,
) -> Result<ParametricMaps> {
    let (input, norm) = normalize_image(img, grid)?;
    let mut maps = reconstruct_slice(net, &input, &norm, patch_size)?;
    if let Some(m) = mask {
        fill_background(&mut maps, m, grid);
    }
    Ok(maps)
}

pub fn fill_background(maps: &mut ParametricMaps, mask: ArrayView2<bool>, grid: &ParameterGrid) {
    for kind in MapKind::ALL {
        let bg = background_value(grid, kind);
        let mut m = maps.map_mut(kind);
        ndarray::Zip::from(&mut m).and(&mask).for_each(|v, &k| {
            if !k {
                *v = bg;
            }
        });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    arch: ArchSpec,
    layer_order: LayerOrder,
    epoch: Option<usize>,
}

/// Network state as a tensor container with the architecture in the header.
pub fn checkpoint_tensor(net: &Network<f32>, epoch: Option<usize>) -> Tensor {
    checkpoint_from_state(&net.spec, net.order, &net.export_state(), epoch)
}

pub fn checkpoint_from_state(spec: &ArchSpec, order: LayerOrder, state: &[f32], epoch: Option<usize>) -> Tensor {
    let meta = CheckpointMeta { kind: "checkpoint".into(), arch: spec.clone(), layer_order: order, epoch };
    Tensor::new(&[state.len()], crate::container::TensorData::F32(state.to_vec()))
        .expect("1-D")
        .with_axes(&["state"])
        .with_meta(serde_json::to_value(meta).expect("serializable"))
}

pub fn load_checkpoint(t: &Tensor) -> Result<Network<f32>> {
    let meta: CheckpointMeta = serde_json::from_value(t.header.meta.clone())
        .map_err(|e| Error::Format(format!("not a checkpoint: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(Error::Format(format!("expected a checkpoint, found {}", meta.kind)));
    }
    let mut net = Network::new(&meta.arch, meta.layer_order, 0)?;
    let state = t.to_f32()?;
    net.import_state(state.as_slice().expect("contiguous"))?;
    net.mode = Mode::Eval;
    Ok(net)
}

//! Construction of the interleaved temporal/spatial network layout from a
//! requested receptive field, parameter budget and non-linearity count.
//!
//! A network has `N_B = (R - 1) / 2` blocks. Block `b` is a dense temporal
//! block of `L[b]` 1×1 convolutions with `C_T[b]` filters each (every layer
//! sees the concatenation of the block input and all previous layer
//! outputs, and the block emits that full concatenation), followed by one
//! valid 3×3 convolution with `C_S[b]` filters. A final 1×1 convolution maps
//! to the output maps.
//!
//! With `R = 1` there are no spatial blocks; the network keeps a single
//! temporal block holding all non-linearities so that its capacity can still
//! be matched to a budget.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub receptive_field: usize,
    pub n_params: u64,
    pub n_nonlinearities: usize,
    pub c_s_stop: usize,
    pub c_s_dec: usize,
    pub c_t_stop: usize,
    pub c_t_dec: usize,
    /// Input channels, `2T` for complex fingerprints of `T` frames.
    pub input_channels: usize,
    pub output_channels: usize,
}

impl ArchConfig {
    /// Clinical-scale configuration: R = 15, 5M parameters, 21 non-linearities,
    /// T = 175 frames and five maps.
    pub fn clinical() -> Self {
        ArchConfig {
            receptive_field: 15,
            n_params: 5_000_000,
            n_nonlinearities: 21,
            c_s_stop: 64,
            c_s_dec: 32,
            c_t_stop: 32,
            c_t_dec: 32,
            input_channels: 350,
            output_channels: 5,
        }
    }

    /// Laptop-sized configuration used for the synthetic experiments.
    pub fn desk(receptive_field: usize, frames: usize) -> Self {
        let n_blocks = receptive_field.saturating_sub(1) / 2;
        ArchConfig {
            receptive_field,
            n_params: 30_000,
            n_nonlinearities: n_blocks.max(9),
            c_s_stop: 8,
            c_s_dec: 4,
            c_t_stop: 8,
            c_t_dec: 8,
            input_channels: 2 * frames,
            output_channels: crate::N_MAPS,
        }
    }

    pub fn n_blocks(&self) -> usize {
        (self.receptive_field - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.receptive_field;
        if r == 0 || r.is_multiple_of(2) {
            return Err(invalid(format!("receptive field {r} must be odd and >= 1")));
        }
        let n_b = self.n_blocks();
        if self.n_nonlinearities < n_b {
            return Err(invalid(format!(
                "{} non-linearities cannot cover {n_b} spatial blocks",
                self.n_nonlinearities
            )));
        }
        let n_lt = self.n_nonlinearities - n_b;
        if n_lt < n_b.max(1) {
            return Err(invalid(format!(
                "{n_lt} temporal layers cannot fill {} temporal blocks",
                n_b.max(1)
            )));
        }
        let consts = [
            self.c_s_stop,
            self.c_s_dec,
            self.c_t_stop,
            self.c_t_dec,
            self.input_channels,
            self.output_channels,
        ];
        if consts.contains(&0) {
            return Err(invalid("channel constants must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Number of spatial blocks, `(R - 1) / 2`.
    pub n_blocks: usize,
    pub layers_per_block: Vec<usize>,
    pub temporal_channels: Vec<usize>,
    pub spatial_channels: Vec<usize>,
    pub c_t_start: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub realized_param_count: u64,
    pub realized_receptive_field: usize,
}

/// One convolution of the realized network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvShape {
    pub fn n_params(&self) -> u64 {
        (self.kernel * self.kernel * self.c_in * self.c_out + self.c_out) as u64
    }
}

impl ArchSpec {
    /// Number of temporal blocks: `n_blocks`, or one for a 1×1 network.
    pub fn n_temporal_blocks(&self) -> usize {
        self.layers_per_block.len()
    }

    /// Every convolution in execution order, final 1×1 output layer last.
    pub fn convolutions(&self) -> Vec<ConvShape> {
        let mut out = Vec::new();
        let mut channels = self.input_channels;
        for b in 0..self.n_temporal_blocks() {
            let growth = self.temporal_channels[b];
            for _ in 0..self.layers_per_block[b] {
                out.push(ConvShape { kernel: 1, c_in: channels, c_out: growth });
                channels += growth;
            }
            if let Some(&cs) = self.spatial_channels.get(b) {
                out.push(ConvShape { kernel: 3, c_in: channels, c_out: cs });
                channels = cs;
            }
        }
        out.push(ConvShape { kernel: 1, c_in: channels, c_out: self.output_channels });
        out
    }

    /// Total non-linear (ReLU) layers.
    pub fn n_nonlinearities(&self) -> usize {
        self.layers_per_block.iter().sum::<usize>() + self.spatial_channels.len()
    }
}

/// `(i * dec + stop)` for `i = n_b - 1` down to `0`.
pub fn spatial_channels(n_b: usize, c_s_stop: usize, c_s_dec: usize) -> Vec<usize> {
    (0..n_b).rev().map(|i| i * c_s_dec + c_s_stop).collect()
}

/// Distribute `n_lt` temporal layers over `n_b` blocks, larger blocks first.
pub fn layers_per_block(n_lt: usize, n_b: usize) -> Result<Vec<usize>> {
    if n_b == 0 || n_lt < n_b {
        return Err(invalid(format!("cannot spread {n_lt} layers over {n_b} blocks")));
    }
    let base = n_lt / n_b;
    let rem = n_lt % n_b;
    Ok((1..=n_b).map(|i| base + usize::from(i <= rem)).collect())
}

/// `C_T_start - i * dec`, floored at `c_t_stop`, for `i = 0..n_b`.
pub fn temporal_channels(c_t_start: usize, n_b: usize, c_t_stop: usize, c_t_dec: usize) -> Vec<usize> {
    (0..n_b)
        .map(|i| {
            let g = c_t_start as i64 - (i * c_t_dec) as i64;
            if g >= c_t_stop as i64 {
                g as usize
            } else {
                c_t_stop
            }
        })
        .collect()
}

/// Convolution weights plus biases, `K² · C_in · C_out + C_out` per layer.
/// Batch-normalization scale and shift are not counted.
pub fn count_parameters(spec: &ArchSpec, c_in: usize, m: usize) -> u64 {
    let spec = ArchSpec { input_channels: c_in, output_channels: m, ..spec.clone() };
    spec.convolutions().iter().map(ConvShape::n_params).sum()
}

fn realize(cfg: &ArchConfig, layers: &[usize], spatial: &[usize], c_t_start: usize) -> ArchSpec {
    let n_temporal = layers.len();
    let mut spec = ArchSpec {
        n_blocks: cfg.n_blocks(),
        layers_per_block: layers.to_vec(),
        temporal_channels: temporal_channels(c_t_start, n_temporal, cfg.c_t_stop, cfg.c_t_dec),
        spatial_channels: spatial.to_vec(),
        c_t_start,
        input_channels: cfg.input_channels,
        output_channels: cfg.output_channels,
        realized_param_count: 0,
        realized_receptive_field: 2 * spatial.len() + 1,
    };
    spec.realized_param_count = count_parameters(&spec, cfg.input_channels, cfg.output_channels);
    spec
}

/// Incremental search over `C_T_start`, starting at `c_t_stop`, for the
/// layout whose parameter count is closest to the budget.
pub fn build_architecture(cfg: &ArchConfig) -> Result<ArchSpec> {
    cfg.validate()?;
    let n_b = cfg.n_blocks();
    let n_lt = cfg.n_nonlinearities - n_b;
    let spatial = spatial_channels(n_b, cfg.c_s_stop, cfg.c_s_dec);
    let layers = layers_per_block(n_lt, n_b.max(1))?;

    let mut c_t_start = cfg.c_t_stop;
    let mut best = realize(cfg, &layers, &spatial, c_t_start);
    if cfg.n_params < best.realized_param_count {
        return Err(Error::InfeasibleBudget {
            requested: cfg.n_params,
            minimum: best.realized_param_count,
        });
    }
    let mut best_diff = cfg.n_params.abs_diff(best.realized_param_count);
    loop {
        c_t_start += 1;
        let current = realize(cfg, &layers, &spatial, c_t_start);
        let diff = cfg.n_params.abs_diff(current.realized_param_count);
        if diff < best_diff {
            best = current;
            best_diff = diff;
        } else if diff > best_diff {
            return Ok(best);
        } else {
            return Ok(current);
        }
    }
}

/// Specs for every (receptive field, budget) pair of a capacity sweep.
pub fn sweep_architectures(
    base: &ArchConfig,
    receptive_fields: &[usize],
    budgets: &[u64],
) -> Vec<(usize, u64, Result<ArchSpec>)> {
    let mut out = Vec::new();
    for &r in receptive_fields {
        for &np in budgets {
            let n_b = r.saturating_sub(1) / 2;
            let cfg = ArchConfig {
                receptive_field: r,
                n_params: np,
                n_nonlinearities: base.n_nonlinearities.max(2 * n_b).max(1),
                ..*base
            };
            out.push((r, np, build_architecture(&cfg)));
        }
    }
    out
}

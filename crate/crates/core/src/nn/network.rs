use ndarray::{concatenate, s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm, BnCache, Conv2d, Param, Real};
use crate::archgen::ArchSpec;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Order of operations inside every non-linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    /// convolution, ReLU, batch normalization
    #[default]
    ConvReluBn,
    /// convolution, batch normalization, ReLU
    ConvBnRelu,
}

fn relu<F: Real>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

fn relu_backward<F: Real>(pre: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(pre).for_each(|d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
    out
}

/// Convolution followed by ReLU and batch normalization.
#[derive(Debug, Clone)]
struct Unit<F> {
    conv: Conv2d<F>,
    bn: BatchNorm<F>,
}

#[derive(Debug, Clone)]
struct UnitTape<F> {
    input: Array4<F>,
    relu_in: Array4<F>,
    bn: BnCache<F>,
}

impl<F: Real> Unit<F> {
    fn new(kernel: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Unit { conv: Conv2d::he_uniform(kernel, c_in, c_out, rng), bn: BatchNorm::new(c_out) }
    }

    fn predict(&self, x: &Array4<F>, order: LayerOrder) -> Result<Array4<F>> {
        let z = self.conv.forward(x)?;
        match order {
            LayerOrder::ConvReluBn => self.bn.apply_eval(&relu(&z)),
            LayerOrder::ConvBnRelu => Ok(relu(&self.bn.apply_eval(&z)?)),
        }
    }

    fn forward(
        &mut self,
        x: &Array4<F>,
        mode: Mode,
        order: LayerOrder,
    ) -> Result<(Array4<F>, UnitTape<F>)> {
        let z = self.conv.forward(x)?;
        let (y, relu_in, bn) = match order {
            LayerOrder::ConvReluBn => {
                let (y, cache) = self.bn.forward(&relu(&z), mode)?;
                (y, z, cache)
            }
            LayerOrder::ConvBnRelu => {
                let (b, cache) = self.bn.forward(&z, mode)?;
                (relu(&b), b, cache)
            }
        };
        Ok((y, UnitTape { input: x.clone(), relu_in, bn }))
    }

    fn backward(&mut self, tape: &UnitTape<F>, dy: &Array4<F>, order: LayerOrder) -> Result<Array4<F>> {
        let dz = match order {
            LayerOrder::ConvReluBn => {
                let da = self.bn.backward(&tape.bn, dy)?;
                relu_backward(&tape.relu_in, &da)
            }
            LayerOrder::ConvBnRelu => {
                let db = relu_backward(&tape.relu_in, dy);
                self.bn.backward(&tape.bn, &db)?
            }
        };
        self.conv.backward(&tape.input, &dz)
    }

    fn params_mut(&mut self) -> [&mut Param<F>; 4] {
        [&mut self.conv.weight, &mut self.conv.bias, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn params(&self) -> [&Param<F>; 4] {
        [&self.conv.weight, &self.conv.bias, &self.bn.gamma, &self.bn.beta]
    }
}

/// Dense temporal block, optionally followed by a spatial 3×3 unit.
#[derive(Debug, Clone)]
struct Block<F> {
    temporal: Vec<Unit<F>>,
    spatial: Option<Unit<F>>,
}

#[derive(Debug, Clone)]
struct BlockTape<F> {
    temporal: Vec<UnitTape<F>>,
    spatial: Option<UnitTape<F>>,
}

impl<F: Real> Block<F> {
    fn predict(&self, x: &Array4<F>, order: LayerOrder) -> Result<Array4<F>> {
        let mut feats = x.clone();
        for unit in &self.temporal {
            let y = unit.predict(&feats, order)?;
            feats = concatenate(Axis(1), &[feats.view(), y.view()]).expect("matching shapes");
        }
        match &self.spatial {
            Some(unit) => unit.predict(&feats, order),
            None => Ok(feats),
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode, order: LayerOrder) -> Result<(Array4<F>, BlockTape<F>)> {
        let mut feats = x.clone();
        let mut tapes = Vec::with_capacity(self.temporal.len());
        for unit in &mut self.temporal {
            let (y, tape) = unit.forward(&feats, mode, order)?;
            feats = concatenate(Axis(1), &[feats.view(), y.view()]).expect("matching shapes");
            tapes.push(tape);
        }
        let (out, spatial) = match &mut self.spatial {
            Some(unit) => {
                let (y, tape) = unit.forward(&feats, mode, order)?;
                (y, Some(tape))
            }
            None => (feats, None),
        };
        Ok((out, BlockTape { temporal: tapes, spatial }))
    }

    fn backward(&mut self, tape: &BlockTape<F>, dy: &Array4<F>, order: LayerOrder) -> Result<Array4<F>> {
        let mut grad = match (&mut self.spatial, &tape.spatial) {
            (Some(unit), Some(t)) => unit.backward(t, dy, order)?,
            _ => dy.clone(),
        };
        for (unit, t) in self.temporal.iter_mut().zip(&tape.temporal).rev() {
            let c_prev = unit.conv.c_in;
            let gy = grad.slice(s![.., c_prev.., .., ..]).to_owned();
            let gx = unit.backward(t, &gy, order)?;
            grad = grad.slice(s![.., ..c_prev, .., ..]).to_owned() + gx;
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone)]
struct Tape<F> {
    blocks: Vec<BlockTape<F>>,
    head_input: Array4<F>,
}

/// Network realized from an [`ArchSpec`]: interleaved temporal and spatial
/// blocks followed by a linear 1×1 head.
#[derive(Debug, Clone)]
pub struct Network<F> {
    pub spec: ArchSpec,
    pub order: LayerOrder,
    pub mode: Mode,
    blocks: Vec<Block<F>>,
    head: Conv2d<F>,
    tape: Option<Tape<F>>,
    grads_ready: bool,
}

impl<F: Real> Network<F> {
    /// Seeded He-uniform initialization; BN scale 1, shift 0.
    pub fn new(spec: &ArchSpec, order: LayerOrder, seed: u64) -> Result<Self> {
        if spec.layers_per_block.len() != spec.temporal_channels.len()
            || spec.spatial_channels.len() != spec.n_blocks
            || spec.layers_per_block.len() < spec.n_blocks
        {
            return Err(invalid("inconsistent architecture spec"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = spec.input_channels;
        let mut blocks = Vec::new();
        for b in 0..spec.n_temporal_blocks() {
            let growth = spec.temporal_channels[b];
            let mut temporal = Vec::new();
            for _ in 0..spec.layers_per_block[b] {
                temporal.push(Unit::new(1, channels, growth, &mut rng));
                channels += growth;
            }
            let spatial = spec.spatial_channels.get(b).map(|&cs| {
                let unit = Unit::new(3, channels, cs, &mut rng);
                channels = cs;
                unit
            });
            blocks.push(Block { temporal, spatial });
        }
        let head = Conv2d::he_uniform(1, channels, spec.output_channels, &mut rng);
        Ok(Network {
            spec: spec.clone(),
            order,
            mode: Mode::Train,
            blocks,
            head,
            tape: None,
            grads_ready: false,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.spec.realized_receptive_field
    }

    /// Zero the final layer's weights and bias.
    pub fn zero_head(&mut self) {
        self.head.weight.value.fill(F::zero());
        self.head.bias.value.fill(F::zero());
    }

    /// Zero every input-layer weight reading channel `c`.
    pub fn zero_input_channel(&mut self, c: usize) {
        fn zero<F: Real>(conv: &mut Conv2d<F>, c: usize) {
            let k2 = conv.kernel * conv.kernel;
            let mut w = conv.weight.value.view_mut();
            for o in 0..conv.c_out {
                for j in c * k2..(c + 1) * k2 {
                    w[[o, j]] = F::zero();
                }
            }
        }
        // dense blocks forward their raw input to every unit, and on to the
        // next stage when there is no spatial unit
        let mut reaches_head = true;
        if let Some(block) = self.blocks.first_mut() {
            for unit in &mut block.temporal {
                zero(&mut unit.conv, c);
            }
            if let Some(unit) = &mut block.spatial {
                zero(&mut unit.conv, c);
            }
            reaches_head = block.spatial.is_none() && self.blocks.len() == 1;
        }
        if reaches_head {
            zero(&mut self.head, c);
        }
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let r = self.receptive_field();
        if c != self.spec.input_channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{} input channels", self.spec.input_channels),
                got: format!("{c}"),
            });
        }
        if h < r || w < r {
            return Err(Error::DimensionMismatch {
                expected: format!("spatial size >= {r}"),
                got: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    /// Eval-mode inference; touches no state.
    pub fn predict(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.predict(&h, self.order)?;
        }
        self.head.forward(&h)
    }

    /// Forward pass in the current mode, recording what backward needs.
    pub fn forward(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (out, tape) = block.forward(&h, self.mode, self.order)?;
            tapes.push(tape);
            h = out;
        }
        let y = self.head.forward(&h)?;
        self.tape = Some(Tape { blocks: tapes, head_input: h });
        Ok(y)
    }

    /// Accumulate gradients of every parameter for the recorded forward
    /// pass; returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, dy: &Array4<F>) -> Result<Array4<F>> {
        let tape = self.tape.take().ok_or_else(|| invalid("backward without a recorded forward pass"))?;
        let mut g = self.head.backward(&tape.head_input, dy)?;
        for (block, t) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            g = block.backward(t, &g, self.order)?;
        }
        self.grads_ready = true;
        Ok(g)
    }

    pub fn has_gradients(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
        self.grads_ready = false;
    }

    /// Learnable parameters in a fixed order: per unit conv weight, conv
    /// bias, BN scale, BN shift; the head's weight and bias last.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for unit in block.temporal.iter_mut().chain(block.spatial.as_mut()) {
                out.extend(unit.params_mut());
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for unit in block.temporal.iter().chain(block.spatial.as_ref()) {
                out.extend(unit.params());
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    /// Number of convolution weights and biases (BN excluded).
    pub fn conv_param_count(&self) -> u64 {
        let mut n = 0;
        for block in &self.blocks {
            for unit in block.temporal.iter().chain(block.spatial.as_ref()) {
                n += unit.conv.weight.len() + unit.conv.bias.len();
            }
        }
        (n + self.head.weight.len() + self.head.bias.len()) as u64
    }

    /// Parameters followed by BN running means and variances, flattened.
    pub fn export_state(&self) -> Vec<F> {
        let mut out: Vec<F> = Vec::new();
        for p in self.params() {
            out.extend(p.value.iter().copied());
        }
        for block in &self.blocks {
            for unit in block.temporal.iter().chain(block.spatial.as_ref()) {
                out.extend(unit.bn.running_mean.iter().copied());
                out.extend(unit.bn.running_var.iter().copied());
            }
        }
        out
    }

    pub fn import_state(&mut self, state: &[F]) -> Result<()> {
        let expected = self.export_state().len();
        if state.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} state values"),
                got: format!("{}", state.len()),
            });
        }
        let mut it = state.iter().copied();
        for p in self.params_mut() {
            p.value.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        for block in &mut self.blocks {
            for unit in block.temporal.iter_mut().chain(block.spatial.as_mut()) {
                unit.bn.running_mean.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
                unit.bn.running_var.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
            }
        }
        self.tape = None;
        self.grads_ready = false;
        Ok(())
    }

    /// Same architecture and weights in another precision.
    pub fn cast<G: Real>(&self) -> Network<G> {
        let mut out = Network::<G>::new(&self.spec, self.order, 0).expect("valid spec");
        let state: Vec<G> = self.export_state().into_iter().map(|v| G::of(v.f64())).collect();
        out.import_state(&state).expect("same layout");
        out.mode = self.mode;
        out
    }
}

//! Forecasting models: shallow CNNs, ResNets and small U-nets assembled
//! from the registered convolution schemes, with autoregressive rollout.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{Adam, EpochStats, Sample, TrainConfig, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::groups::ChannelRep;
use crate::layers::{
    init_params, scale_lift, scale_project, scale_unwarp, scheme_for, Activation, LayerSpec,
    ResidualRole, Symmetry,
};
use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    ShallowCnn,
    Resnet,
    Unet,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::ShallowCnn => "shallow_cnn",
            Arch::Resnet => "resnet",
            Arch::Unet => "unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shallow_cnn" | "cnn" => Some(Arch::ShallowCnn),
            "resnet" => Some(Arch::Resnet),
            "unet" => Some(Arch::Unet),
            _ => None,
        }
    }
}

/// Declarative description of a forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub symmetry: Symmetry,
    /// Convolution layers for shallow/resnet; the U-net shape is fixed.
    pub depth: usize,
    /// Base hidden width (rounded to a multiple of the group order for
    /// rotation models so parameter budgets stay comparable).
    pub width: usize,
    /// Input window length l.
    pub input_frames: usize,
    /// Square grid extent H = W.
    pub grid: usize,
    /// Channels per frame: 1 scalar, 2 vector.
    pub channels: usize,
    pub kernel: usize,
    pub group_order: usize,
    pub scale_grid: Vec<f64>,
    pub t_extent: usize,
    /// Input standardization (x - mean) / std applied before the network and
    /// undone after it. The usual preprocessing for plain baselines; it
    /// deliberately breaks homogeneity, so equivariant models leave it at
    /// the (0, 1) identity and rely on their conjugations instead.
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl ModelSpec {
    pub fn new(arch: Arch, symmetry: Symmetry) -> Self {
        Self {
            arch,
            symmetry,
            depth: 3,
            width: 16,
            input_frames: 8,
            grid: 32,
            channels: 1,
            kernel: 3,
            group_order: 4,
            scale_grid: crate::layers::default_scale_grid(),
            t_extent: 1,
            norm_mean: 0.0,
            norm_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_frames < 1 {
            return Err(TensorError::Invalid("input_frames must be >= 1".into()));
        }
        if !matches!(self.channels, 1 | 2) {
            return Err(TensorError::Invalid("channels must be 1 (scalar) or 2 (vector)".into()));
        }
        if self.symmetry == Symmetry::UniformMotion && self.channels != 2 {
            return Err(TensorError::Invalid(
                "uniform-motion models need vector (2-channel) fields".into(),
            ));
        }
        if self.symmetry == Symmetry::Scale && self.arch != Arch::ShallowCnn {
            return Err(TensorError::Invalid(
                "scale symmetry is only supported with the shallow CNN".into(),
            ));
        }
        match self.arch {
            Arch::ShallowCnn => {
                if self.depth < 2 {
                    return Err(TensorError::Invalid("shallow CNN needs depth >= 2".into()));
                }
            }
            Arch::Resnet => {
                if self.depth < 4 || self.depth % 2 != 0 {
                    return Err(TensorError::Invalid(
                        "resnet depth must be even and >= 4 (stem + paired blocks + head)".into(),
                    ));
                }
            }
            Arch::Unet => {
                if self.grid % 4 != 0 {
                    return Err(TensorError::Invalid("unet needs a grid divisible by 4".into()));
                }
            }
        }
        Ok(())
    }

    /// Hidden width, adjusted for rotation models so the regular
    /// representation tiles it exactly.
    pub fn hidden_width(&self) -> usize {
        match self.symmetry {
            Symmetry::Rotation => {
                let n = self.group_order;
                let m = (self.width + n / 2).max(1) / n;
                m.max(1) * n
            }
            _ => self.width,
        }
    }

    pub fn window_channels(&self) -> usize {
        self.input_frames * self.channels
    }

    fn rep_for(&self, channels: usize, hidden: bool) -> ChannelRep {
        if hidden {
            ChannelRep::Regular { copies: channels / self.group_order }
        } else if self.channels == 2 {
            ChannelRep::vectors(channels / 2)
        } else {
            ChannelRep::scalars(channels)
        }
    }

    fn conv(&self, c_in: usize, c_out: usize, act: Activation) -> LayerSpec {
        let mut l = LayerSpec::new(self.symmetry, c_in, c_out, self.kernel)
            .with_activation(act)
            .with_group_order(self.group_order)
            .with_scale_grid(self.scale_grid.clone(), self.t_extent);
        if self.symmetry == Symmetry::UniformMotion {
            l = l.with_vector_components(2);
        }
        l
    }

    fn rot_conv(
        &self,
        c_in: usize,
        c_out: usize,
        act: Activation,
        in_hidden: bool,
        out_hidden: bool,
    ) -> LayerSpec {
        self.conv(c_in, c_out, act)
            .with_reps(self.rep_for(c_in, in_hidden), self.rep_for(c_out, out_hidden))
    }

    /// Layer specs in declaration order.
    fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let rot = self.symmetry == Symmetry::Rotation;
        let (cin, cout, w) = (self.window_channels(), self.channels, self.hidden_width());
        let mk = |c_in, c_out, act, ih: bool, oh: bool| {
            if rot {
                self.rot_conv(c_in, c_out, act, ih, oh)
            } else {
                self.conv(c_in, c_out, act)
            }
        };
        let mut layers = Vec::new();
        match self.arch {
            Arch::ShallowCnn if self.symmetry == Symmetry::Scale => {
                // scale-correlation feature stack; the head decodes the
                // group-pooled (scale-invariant) features concatenated with
                // the identity-slice features (a skip from the lambda = 1
                // path)
                layers.push(mk(cin, w, Activation::Relu, false, true));
                for _ in 0..self.depth.saturating_sub(2) {
                    layers.push(mk(w, w, Activation::Relu, true, true));
                }
                layers.push(
                    LayerSpec::new(Symmetry::None, 2 * w, cout, self.kernel)
                        .with_activation(Activation::None),
                );
            }
            Arch::ShallowCnn => {
                layers.push(mk(cin, w, Activation::Relu, false, true));
                for _ in 0..self.depth.saturating_sub(2) {
                    layers.push(mk(w, w, Activation::Relu, true, true));
                }
                layers.push(mk(w, cout, Activation::None, true, false));
            }
            Arch::Resnet => {
                layers.push(mk(cin, w, Activation::Relu, false, true));
                for _ in 0..(self.depth - 2) / 2 {
                    let mut first = mk(w, w, Activation::Relu, true, true);
                    if self.symmetry == Symmetry::UniformMotion {
                        first = first.with_residual_role(ResidualRole::FirstInResidualBlock);
                    }
                    layers.push(first);
                    layers.push(mk(w, w, Activation::Relu, true, true));
                }
                layers.push(mk(w, cout, Activation::None, true, false));
            }
            Arch::Unet => {
                layers.push(mk(cin, w, Activation::Relu, false, true)); // enc1
                layers.push(mk(w, 2 * w, Activation::Relu, true, true)); // enc2
                layers.push(mk(2 * w, 2 * w, Activation::Relu, true, true)); // bottleneck
                layers.push(mk(4 * w, w, Activation::Relu, true, true)); // dec2
                layers.push(mk(2 * w, w, Activation::Relu, true, true)); // dec1
                layers.push(mk(w, cout, Activation::None, true, false)); // head
            }
        }
        Ok(layers)
    }
}

/// One trainable layer: its spec, kernel tensor and optional bias.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

/// Tape node ids of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub kernel: NodeId,
    pub bias: Option<NodeId>,
}

/// A built forecaster.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

/// Deterministic construction from a seed: same seed, bit-identical
/// parameters.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let layer_specs = spec.layer_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(layer_specs.len());
    for ls in layer_specs {
        let scheme = scheme_for(ls.symmetry);
        scheme.validate(&ls)?;
        let (kernel, bias) = init_params(scheme, &ls, &mut rng);
        layers.push(Layer { spec: ls, kernel, bias });
    }
    Ok(Model { spec: spec.clone(), layers })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    /// All trainable tensors in declaration order (kernel, then bias, per
    /// layer).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(&l.kernel);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(&mut l.kernel);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    /// Inserts parameter tensors as tape leaves, in declaration order.
    pub fn insert_params(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerParams> {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| LayerParams { kernel: leaf(&l.kernel), bias: l.bias.as_ref().map(&mut leaf) })
            .collect()
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: NodeId,
        params: &[LayerParams],
    ) -> Result<NodeId> {
        let layer = &self.layers[idx];
        scheme_for(layer.spec.symmetry).apply(
            tape,
            x,
            params[idx].kernel,
            params[idx].bias,
            &layer.spec,
        )
    }

    /// One-step prediction on an existing tape (used by training so that
    /// gradients can flow through rollout steps).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        window: NodeId,
        params: &[LayerParams],
    ) -> Result<NodeId> {
        let shape = tape.value(window).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.window_channels() {
            return Err(TensorError::ShapeMismatch(format!(
                "window wants [B,{},H,W], got {:?}",
                self.spec.window_channels(),
                shape
            )));
        }
        let window = self.standardize_in(tape, window)?;
        let out = match self.spec.arch {
            Arch::ShallowCnn => {
                if self.spec.symmetry == Symmetry::Scale {
                    let magnitude = self.spec.channels == 2;
                    let lifted = scale_lift(
                        tape,
                        window,
                        &self.spec.scale_grid,
                        self.spec.input_frames,
                        self.spec.channels,
                        magnitude,
                    )?;
                    // align the zoomed slices with the identity frame right
                    // away: the correlation stack then sees a scale-space
                    // pyramid of the same scene, group pooling compares
                    // feature responses at matching positions, and a plain
                    // head decodes the pooled features
                    let mut h =
                        scale_unwarp(tape, lifted, &self.spec.scale_grid, magnitude)?;
                    for i in 0..self.layers.len() - 1 {
                        h = self.apply_layer(tape, i, h, params)?;
                    }
                    let pooled = scale_project(tape, h)?;
                    let identity_slice = self
                        .spec
                        .scale_grid
                        .iter()
                        .position(|l| (l - 1.0).abs() < 1e-12)
                        .expect("scale grid contains 1.0");
                    let ident = tape.select_axis1(h, identity_slice)?;
                    let cat = tape.concat_channels(&[pooled, ident])?;
                    self.apply_layer(tape, self.layers.len() - 1, cat, params)
                } else {
                    let mut h = window;
                    for i in 0..self.layers.len() {
                        h = self.apply_layer(tape, i, h, params)?;
                    }
                    Ok(h)
                }
            }
            Arch::Resnet => {
                let mut h = self.apply_layer(tape, 0, window, params)?;
                let blocks = (self.layers.len() - 2) / 2;
                for b in 0..blocks {
                    let r = self.apply_layer(tape, 1 + 2 * b, h, params)?;
                    let r = self.apply_layer(tape, 2 + 2 * b, r, params)?;
                    h = tape.add(h, r)?;
                }
                self.apply_layer(tape, self.layers.len() - 1, h, params)
            }
            Arch::Unet => {
                let e1 = self.apply_layer(tape, 0, window, params)?;
                let p1 = tape.avg_pool2(e1)?;
                let e2 = self.apply_layer(tape, 1, p1, params)?;
                let p2 = tape.avg_pool2(e2)?;
                let bt = self.apply_layer(tape, 2, p2, params)?;
                let u2 = tape.upsample2(bt)?;
                let c2 = tape.concat_channels(&[u2, e2])?;
                let d2 = self.apply_layer(tape, 3, c2, params)?;
                let u1 = tape.upsample2(d2)?;
                let c1 = tape.concat_channels(&[u1, e1])?;
                let d1 = self.apply_layer(tape, 4, c1, params)?;
                self.apply_layer(tape, 5, d1, params)
            }
        }?;
        self.standardize_out(tape, out)
    }

    fn standardize_in(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        if self.spec.norm_mean == 0.0 && self.spec.norm_std == 1.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let mean = tape.constant(Tensor::full(&shape, self.spec.norm_mean));
        let centered = tape.sub(x, mean)?;
        tape.scale_by(centered, 1.0 / self.spec.norm_std)
    }

    fn standardize_out(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        if self.spec.norm_mean == 0.0 && self.spec.norm_std == 1.0 {
            return Ok(y);
        }
        let scaled = tape.scale_by(y, self.spec.norm_std)?;
        let shape = tape.value(scaled).shape().to_vec();
        let mean = tape.constant(Tensor::full(&shape, self.spec.norm_mean));
        tape.add(scaled, mean)
    }

    /// One-step prediction: window [B, l*C, H, W] -> field [B, C, H, W].
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(window.clone());
        let params = self.insert_params(&mut tape, false);
        let y = self.forward_on_tape(&mut tape, x, &params)?;
        Ok(tape.value(y).clone())
    }

    /// Autoregressive rollout: repeatedly drop the oldest frame and append
    /// the prediction.
    pub fn rollout(&self, window: &Tensor, horizon: usize) -> Result<Vec<Tensor>> {
        if horizon < 1 {
            return Err(TensorError::Invalid("rollout horizon must be >= 1".into()));
        }
        let c = self.spec.channels;
        let lc = self.spec.window_channels();
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape, false);
        let mut win = tape.constant(window.clone());
        let mut preds = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let pred = self.forward_on_tape(&mut tape, win, &params)?;
            preds.push(tape.value(pred).clone());
            let rest = tape.slice_channels(win, c, lc - c)?;
            win = tape.concat_channels(&[rest, pred])?;
        }
        Ok(preds)
    }
}

/// Rollout predictions together with their per-step error against truth.
#[derive(Debug)]
pub struct RolloutResult {
    pub predictions: Vec<Tensor>,
    pub per_step_rmse: Vec<f64>,
}

pub fn evaluate_rollout(model: &Model, window: &Tensor, targets: &[Tensor]) -> Result<RolloutResult> {
    let predictions = model.rollout(window, targets.len())?;
    let per_step_rmse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let n = p.numel() as f64;
            (p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(RolloutResult { predictions, per_step_rmse })
}

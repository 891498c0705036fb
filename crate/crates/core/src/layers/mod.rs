//! Equivariant convolution mechanisms behind a common strategy trait.
//!
//! Each symmetry gets its own scheme: plain convolution, mean-conjugated
//! convolution for uniform motion, MinMax-conjugated convolution for
//! magnitude, steerable kernels for rotation, and group correlation over a
//! scale grid. Schemes are registered by name and selected at runtime from
//! model configuration.

mod magnitude;
mod plain;
mod rotation;
mod scale;
mod uniform_motion;

pub use magnitude::MagnitudeConv;
pub use plain::PlainConv;
pub use rotation::RotationConv;
pub use scale::{scale_lift, scale_project, scale_unwarp, KernelDilation, LiftMap, ScaleConv, SliceUnwarp};
pub use uniform_motion::UniformMotionConv;

use crate::groups::ChannelRep;
use crate::tensor::{NodeId, Padding, Result, Tape, Tensor};

/// Which symmetry a layer (or model) enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    None,
    UniformMotion,
    Magnitude,
    Rotation,
    Scale,
}

impl Symmetry {
    pub fn name(&self) -> &'static str {
        match self {
            Symmetry::None => "none",
            Symmetry::UniformMotion => "um",
            Symmetry::Magnitude => "mag",
            Symmetry::Rotation => "rot",
            Symmetry::Scale => "scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Symmetry::None),
            "um" | "uniform_motion" => Some(Symmetry::UniformMotion),
            "mag" | "magnitude" => Some(Symmetry::Magnitude),
            "rot" | "rotation" => Some(Symmetry::Rotation),
            "scale" => Some(Symmetry::Scale),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualRole {
    Plain,
    /// First layer of a residual block: the block mean is not added back,
    /// making the residual branch uniform-motion invariant.
    FirstInResidualBlock,
}

/// The seven geometrically spaced scale factors 3^(k/3), k = -3..3.
pub fn default_scale_grid() -> Vec<f64> {
    (-3..=3).map(|k| 3f64.powf(k as f64 / 3.0)).collect()
}

/// Declarative description of one equivariant layer.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub symmetry: Symmetry,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub residual_role: ResidualRole,
    /// Rotation only: channel representations of input and output.
    pub rep_in: Option<ChannelRep>,
    pub rep_out: Option<ChannelRep>,
    /// Rotation group order.
    pub group_order: usize,
    /// Scale only: the lift grid; must contain 1.0 and be geometric.
    pub scale_grid: Vec<f64>,
    /// Scale only: kernel extent along the scale axis.
    pub t_extent: usize,
    /// Uniform motion: 2 for (u,v)-interleaved channels.
    pub vector_components: usize,
    pub padding: Padding,
}

impl LayerSpec {
    pub fn new(symmetry: Symmetry, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            symmetry,
            c_in,
            c_out,
            kernel,
            activation: Activation::Relu,
            residual_role: ResidualRole::Plain,
            rep_in: None,
            rep_out: None,
            group_order: 4,
            scale_grid: default_scale_grid(),
            t_extent: 1,
            vector_components: 1,
            padding: Padding::Periodic,
        }
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn with_residual_role(mut self, r: ResidualRole) -> Self {
        self.residual_role = r;
        self
    }

    pub fn with_reps(mut self, rep_in: ChannelRep, rep_out: ChannelRep) -> Self {
        self.rep_in = Some(rep_in);
        self.rep_out = Some(rep_out);
        self
    }

    pub fn with_group_order(mut self, n: usize) -> Self {
        self.group_order = n;
        self
    }

    pub fn with_scale_grid(mut self, grid: Vec<f64>, t_extent: usize) -> Self {
        self.scale_grid = grid;
        self.t_extent = t_extent;
        self
    }

    pub fn with_vector_components(mut self, vc: usize) -> Self {
        self.vector_components = vc;
        self
    }

    pub fn with_padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }
}

/// One interchangeable convolution mechanism. Implementations build the
/// layer's forward computation on a tape; training differentiates through
/// whatever they record.
pub trait ConvScheme: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Shape of the trainable kernel tensor for this spec.
    fn kernel_shape(&self, spec: &LayerSpec) -> Vec<usize>;

    /// Length of the trainable bias vector; 0 when the symmetry admits
    /// none (e.g. non-trivial irrep outputs).
    fn bias_len(&self, spec: &LayerSpec) -> usize {
        let _ = spec;
        0
    }

    /// Multiplier on the fan-in initialization bound (rotation widens the
    /// free kernel so the projected kernel keeps comparable variance).
    fn init_gain(&self, _spec: &LayerSpec) -> f64 {
        1.0
    }

    fn validate(&self, spec: &LayerSpec) -> Result<()>;

    fn apply(
        &self,
        tape: &mut Tape,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: &LayerSpec,
    ) -> Result<NodeId>;
}

/// Adds a per-channel bias to a [B,C,H,W] feature map.
pub(crate) fn add_channel_bias(tape: &mut Tape, x: NodeId, bias: NodeId) -> Result<NodeId> {
    let c = tape.value(bias).numel();
    let b = tape.reshape(bias, &[1, c, 1, 1])?;
    tape.add(x, b)
}

static PLAIN: PlainConv = PlainConv;
static UM: UniformMotionConv = UniformMotionConv;
static MAG: MagnitudeConv = MagnitudeConv;
static ROT: RotationConv = RotationConv;
static SCALE: ScaleConv = ScaleConv;

/// The scheme registry: one strategy per symmetry, looked up by enum...
pub fn scheme_for(symmetry: Symmetry) -> &'static dyn ConvScheme {
    match symmetry {
        Symmetry::None => &PLAIN,
        Symmetry::UniformMotion => &UM,
        Symmetry::Magnitude => &MAG,
        Symmetry::Rotation => &ROT,
        Symmetry::Scale => &SCALE,
    }
}

/// ...or by its registered name ("none", "um", "mag", "rot", "scale").
pub fn scheme_by_name(name: &str) -> Option<&'static dyn ConvScheme> {
    Symmetry::parse(name).map(scheme_for)
}

pub fn registered_schemes() -> [&'static dyn ConvScheme; 5] {
    [&PLAIN, &UM, &MAG, &ROT, &SCALE]
}

pub(crate) fn activate(tape: &mut Tape, activation: Activation, x: NodeId) -> Result<NodeId> {
    match activation {
        Activation::Relu => tape.relu(x),
        Activation::None => Ok(x),
    }
}

/// Fan-in scaled uniform initialization for a layer's kernel; biases start
/// at zero.
pub fn init_params(
    scheme: &dyn ConvScheme,
    spec: &LayerSpec,
    rng: &mut impl rand::Rng,
) -> (Tensor, Option<Tensor>) {
    let shape = scheme.kernel_shape(spec);
    let fan_in: usize = shape[1..].iter().product();
    let bound = scheme.init_gain(spec) * (6.0 / fan_in as f64).sqrt();
    let kernel = Tensor::uniform(&shape, -bound, bound, rng);
    let bias = match scheme.bias_len(spec) {
        0 => None,
        n => Some(Tensor::zeros(&[n])),
    };
    (kernel, bias)
}

/// Measured equivariance errors demonstrating why plain conv + relu cannot
/// be uniform-motion equivariant (it would have to be affine), and that the
/// mean-conjugated layer is. Diagnostic used by the test suite.
#[derive(Debug)]
pub struct UmAffineProbe {
    /// plain conv + relu, random weights
    pub plain_relu_ee: f64,
    /// kernel summing to one, identity activation (the affine case)
    pub sum_one_identity_ee: f64,
    /// mean-conjugated layer, random weights
    pub um_conv_ee: f64,
}

pub fn um_affine_negative_test(seed: u64) -> Result<UmAffineProbe> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 8;
    let x = Tensor::uniform(&[1, 2, h, h], -1.0, 1.0, &mut rng);
    let shifted = x.map(|v| v + 1.0); // c = (1, 1) on both components

    let rmse = |a: &Tensor, b: &Tensor| -> f64 {
        let n = a.numel() as f64;
        (a.data().iter().zip(b.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / n).sqrt()
    };

    // plain conv + relu
    let k = Tensor::uniform(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
    let run_plain = |input: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.constant(input.clone());
        let ki = tape.constant(k.clone());
        let y = tape.conv2d(xi, ki, Padding::Periodic, 1)?;
        let y = tape.relu(y)?;
        Ok(tape.value(y).clone())
    };
    let plain_relu_ee = {
        let fx = run_plain(&x)?;
        let fxc = run_plain(&shifted)?;
        let want = fx.map(|v| v + 1.0);
        rmse(&fxc, &want)
    };

    // scalar conv with kernel summing to one, identity activation: affine,
    // hence exactly equivariant to constant shifts
    let sum_one_identity_ee = {
        let mut k1 = Tensor::uniform(&[1, 1, 3, 3], -0.5, 0.5, &mut rng);
        let s: f64 = k1.data().iter().sum();
        for v in k1.data_mut() {
            *v /= s;
        }
        let xs = Tensor::uniform(&[1, 1, h, h], -1.0, 1.0, &mut rng);
        let run = |input: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let xi = tape.constant(input.clone());
            let ki = tape.constant(k1.clone());
            let y = tape.conv2d(xi, ki, Padding::Periodic, 1)?;
            Ok(tape.value(y).clone())
        };
        let fx = run(&xs)?;
        let fxc = run(&xs.map(|v| v + 1.0))?;
        rmse(&fxc, &fx.map(|v| v + 1.0))
    };

    // the mean-conjugated layer with the same random vector kernel
    let um_conv_ee = {
        let spec = LayerSpec::new(Symmetry::UniformMotion, 2, 2, 3).with_vector_components(2);
        let scheme = scheme_for(Symmetry::UniformMotion);
        let run = |input: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let xi = tape.constant(input.clone());
            let ki = tape.constant(k.clone());
            let y = scheme.apply(&mut tape, xi, ki, None, &spec)?;
            Ok(tape.value(y).clone())
        };
        let fx = run(&x)?;
        let fxc = run(&shifted)?;
        rmse(&fxc, &fx.map(|v| v + 1.0))
    };

    Ok(UmAffineProbe { plain_relu_ee, sum_one_identity_ee, um_conv_ee })
}

//! Convolution conjugated by sliding-block mean shifts.
//!
//! For every sliding block the per-component mean over channels and the
//! kernel window is subtracted before the convolution and added back after
//! the activation. Subtracting a block-constant commutes with the kernel
//! contraction, so the subtraction is realised as
//!
//!   conv(x, K) - sum_g mu_g * (sum of K taps reading group g)
//!
//! which matches the per-block statistics exactly. The first layer of a
//! residual block omits the add-back, making the residual branch invariant
//! rather than equivariant.

use super::{activate, add_channel_bias, ConvScheme, LayerSpec, ResidualRole};
use crate::tensor::{NodeId, ReduceOp, Result, Tape, Tensor, TensorError};

#[derive(Debug)]
pub struct UniformMotionConv;

impl ConvScheme for UniformMotionConv {
    fn name(&self) -> &'static str {
        "um"
    }

    fn kernel_shape(&self, spec: &LayerSpec) -> Vec<usize> {
        vec![spec.c_out, spec.c_in, spec.kernel, spec.kernel]
    }

    fn bias_len(&self, spec: &LayerSpec) -> usize {
        spec.c_out
    }

    fn validate(&self, spec: &LayerSpec) -> Result<()> {
        if spec.kernel % 2 == 0 {
            return Err(TensorError::EvenKernel(spec.kernel));
        }
        let g = spec.vector_components;
        if g == 0 || spec.c_in % g != 0 || spec.c_out % g != 0 {
            return Err(TensorError::Invalid(format!(
                "channel counts ({} -> {}) must be multiples of the {} vector components",
                spec.c_in, spec.c_out, g
            )));
        }
        Ok(())
    }

    fn apply(
        &self,
        tape: &mut Tape,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: &LayerSpec,
    ) -> Result<NodeId> {
        self.validate(spec)?;
        let g = spec.vector_components;
        let (c_in, c_out, s) = (spec.c_in, spec.c_out, spec.kernel);

        // per-component block means via a fixed averaging kernel
        let mut ones = Tensor::zeros(&[g, c_in, s, s]);
        let per_group = (c_in / g * s * s) as f64;
        for gi in 0..g {
            for c in 0..c_in {
                if c % g != gi {
                    continue;
                }
                for ky in 0..s {
                    for kx in 0..s {
                        ones.set(&[gi, c, ky, kx], 1.0 / per_group);
                    }
                }
            }
        }
        let ones = tape.constant(ones);
        let mu = tape.conv2d(x, ones, spec.padding, 1)?;

        // conv(x - mu) = conv(x) - mu_g * ksum, with ksum contracted by a
        // 1x1 convolution of the broadcast means
        let raw = tape.conv2d(x, kernel, spec.padding, 1)?;
        let ksum = tape.reduce(ReduceOp::Sum, kernel, &[2, 3])?;
        let ksum = tape.reshape(ksum, &[c_out, c_in, 1, 1])?;
        let mu_in = tape.broadcast_channels(mu, c_in)?;
        let mean_term = tape.conv2d(mu_in, ksum, spec.padding, 1)?;
        let mut centered = tape.sub(raw, mean_term)?;
        if let Some(b) = bias {
            centered = add_channel_bias(tape, centered, b)?;
        }

        let activated = activate(tape, spec.activation, centered)?;
        match spec.residual_role {
            ResidualRole::FirstInResidualBlock => Ok(activated),
            ResidualRole::Plain => {
                let mu_out = tape.broadcast_channels(mu, c_out)?;
                tape.add(activated, mu_out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Symmetry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(spec: &LayerSpec, x: &Tensor, k: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let ki = tape.constant(k.clone());
        let y = UniformMotionConv.apply(&mut tape, xi, ki, None, spec).unwrap();
        tape.value(y).clone()
    }

    fn shift(x: &Tensor, cu: f64, cv: f64) -> Tensor {
        let plane = x.shape()[2] * x.shape()[3];
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % x.shape()[1];
            *v += if ch % 2 == 0 { cu } else { cv };
        }
        out
    }

    #[test]
    fn constant_input_passes_through() {
        // sigma(0) + c = c for a constant field
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let x = shift(&Tensor::zeros(&[1, 2, 5, 5]), 0.8, -0.4);
        let spec = LayerSpec::new(Symmetry::UniformMotion, 2, 2, 3).with_vector_components(2);
        let y = run(&spec, &x, &k);
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 25) % 2;
            let want = if ch % 2 == 0 { 0.8 } else { -0.4 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_equivariance_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[4, 4, 3, 3], -1.0, 1.0, &mut rng);
        let spec = LayerSpec::new(Symmetry::UniformMotion, 4, 4, 3).with_vector_components(2);
        let (cu, cv) = (0.7, -0.3);
        let lhs = run(&spec, &shift(&x, cu, cv), &k);
        let rhs = shift(&run(&spec, &x, &k), cu, cv);
        let worst = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-10, "um equivariance error {}", worst);
    }

    #[test]
    fn first_in_residual_block_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = LayerSpec::new(Symmetry::UniformMotion, 2, 2, 3)
            .with_vector_components(2)
            .with_residual_role(ResidualRole::FirstInResidualBlock);
        // constant input: centered block is zero (to summation rounding),
        // relu(~0) = ~0, no add-back
        let x = shift(&Tensor::zeros(&[1, 2, 5, 5]), 1.3, 0.2);
        let y = run(&spec, &x, &k);
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
        // and invariance on random input
        let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let a = run(&spec, &x, &k);
        let b = run(&spec, &shift(&x, 0.5, -0.9), &k);
        let worst =
            a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0f64, f64::max);
        assert!(worst < 1e-10, "um invariance error {}", worst);
    }

    #[test]
    fn equivariance_survives_nonzero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2], -0.5, 0.5, &mut rng);
        let spec = LayerSpec::new(Symmetry::UniformMotion, 2, 2, 3).with_vector_components(2);
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let xi = tape.constant(input.clone());
            let ki = tape.constant(k.clone());
            let bi = tape.constant(b.clone());
            let y = UniformMotionConv.apply(&mut tape, xi, ki, Some(bi), &spec).unwrap();
            tape.value(y).clone()
        };
        let a = run(&shift(&x, 0.7, -0.3));
        let c = shift(&run(&x), 0.7, -0.3);
        let worst =
            a.data().iter().zip(c.data()).map(|(u, v)| (u - v).abs()).fold(0.0f64, f64::max);
        assert!(worst < 1e-10, "um equivariance with bias error {}", worst);
    }

    #[test]
    fn odd_channels_rejected() {
        let spec = LayerSpec::new(Symmetry::UniformMotion, 3, 2, 3).with_vector_components(2);
        assert!(UniformMotionConv.validate(&spec).is_err());
    }
}

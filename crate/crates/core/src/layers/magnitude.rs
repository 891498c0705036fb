//! Convolution conjugated by the sliding-block MinMax scaler.
//!
//! Each block is divided by s = max - min of its entries (falling back to
//! max |v|, then to 1 on all-zero blocks) before the convolution, and the
//! output is multiplied by s after the activation. The scaler is positive
//! homogeneous, s(lambda x) = lambda s(x) for lambda > 0, which makes the
//! layer magnitude equivariant with any weights and any activation.

use super::{activate, add_channel_bias, ConvScheme, LayerSpec};
use crate::tensor::{NodeId, Result, Tape, TensorError};

#[derive(Debug)]
pub struct MagnitudeConv;

impl ConvScheme for MagnitudeConv {
    fn name(&self) -> &'static str {
        "mag"
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
        // dividing a block by its (block-constant) scaler commutes with the
        // kernel contraction; adding the bias inside the normalised frame
        // keeps the layer homogeneous even though the bias is not
        let s = tape.block_range(x, spec.kernel, spec.padding)?;
        let raw = tape.conv2d(x, kernel, spec.padding, 1)?;
        let mut scaled = tape.div(raw, s)?;
        if let Some(b) = bias {
            scaled = add_channel_bias(tape, scaled, b)?;
        }
        let activated = activate(tape, spec.activation, scaled)?;
        tape.mul(activated, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Symmetry;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(spec: &LayerSpec, x: &Tensor, k: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let ki = tape.constant(k.clone());
        let y = MagnitudeConv.apply(&mut tape, xi, ki, None, spec).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn doubling_input_doubles_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = LayerSpec::new(Symmetry::Magnitude, 2, 3, 3);
        let y1 = run(&spec, &x, &k);
        let y2 = run(&spec, &x.map(|v| 2.0 * v), &k);
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_input_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let k = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let spec = LayerSpec::new(Symmetry::Magnitude, 1, 1, 3);
        let y = run(&spec, &x, &k);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equivariance_survives_nonzero_bias() {
        // the whole point of the conjugation: plain conv + relu is already
        // homogeneous, but a bias breaks it unless added in the normalised
        // frame
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
        let spec = LayerSpec::new(Symmetry::Magnitude, 2, 3, 3);
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let xi = tape.constant(input.clone());
            let ki = tape.constant(k.clone());
            let bi = tape.constant(b.clone());
            let y = MagnitudeConv.apply(&mut tape, xi, ki, Some(bi), &spec).unwrap();
            tape.value(y).clone()
        };
        let lam = 3.3;
        let y1 = run(&x);
        let y2 = run(&x.map(|v| lam * v));
        let scale = y1.max_abs().max(1e-12);
        for (a, v) in y1.data().iter().zip(y2.data()) {
            assert!((lam * a - v).abs() / (lam * scale) < 1e-12);
        }
        // sanity: with the bias added outside the normalised frame the layer
        // would not be homogeneous (plain conv + bias is not)
        let plain = |input: &Tensor| {
            let mut tape = Tape::new();
            let xi = tape.constant(input.clone());
            let ki = tape.constant(k.clone());
            let y = tape.conv2d(xi, ki, crate::tensor::Padding::Periodic, 1).unwrap();
            let bi = tape.constant(b.reshaped(&[1, 3, 1, 1]).unwrap());
            let y = tape.add(y, bi).unwrap();
            let y = tape.relu(y).unwrap();
            tape.value(y).clone()
        };
        let p1 = plain(&x);
        let p2 = plain(&x.map(|v| lam * v));
        let dev = p1
            .data()
            .iter()
            .zip(p2.data())
            .map(|(a, v)| (lam * a - v).abs())
            .fold(0.0f64, f64::max);
        assert!(dev > 1e-3, "biased plain conv unexpectedly homogeneous");
    }

    #[test]
    fn random_lambda_relative_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = LayerSpec::new(Symmetry::Magnitude, 2, 2, 3);
        let y1 = run(&spec, &x, &k);
        for _ in 0..10 {
            let lam: f64 = rng.gen_range(0.0..2.0);
            if lam < 1e-6 {
                continue;
            }
            let y2 = run(&spec, &x.map(|v| lam * v), &k);
            let scale = y1.max_abs().max(1e-12);
            let worst = y1
                .data()
                .iter()
                .zip(y2.data())
                .map(|(a, b)| (lam * a - b).abs() / (lam * scale))
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-10, "mag equivariance relative error {}", worst);
        }
    }
}

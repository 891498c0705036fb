//! Steerable convolution for the cyclic rotation group.
//!
//! The trainable tensor is a free kernel; the layer convolves with its
//! projection onto the equivariant subspace, so every parameter setting
//! yields an equivariant map. Hidden layers use powers of the regular
//! representation, which any channel-wise activation commutes with (the
//! group acts by channel permutations there); irrep-typed layers must not
//! carry an activation.

use std::sync::Arc;

use super::{activate, Activation, ConvScheme, LayerSpec};
use crate::tensor::Tensor;
use crate::groups::{ChannelRep, KernelProjection};
use crate::tensor::{NodeId, Result, Tape, TensorError};

#[derive(Debug)]
pub struct RotationConv;

impl RotationConv {
    fn reps<'a>(&self, spec: &'a LayerSpec) -> Result<(&'a ChannelRep, &'a ChannelRep)> {
        match (&spec.rep_in, &spec.rep_out) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(TensorError::Invalid(
                "rotation layers need rep_in and rep_out assigned".into(),
            )),
        }
    }
}

impl ConvScheme for RotationConv {
    fn name(&self) -> &'static str {
        "rot"
    }

    fn kernel_shape(&self, spec: &LayerSpec) -> Vec<usize> {
        vec![spec.c_out, spec.c_in, spec.kernel, spec.kernel]
    }

    fn bias_len(&self, spec: &LayerSpec) -> usize {
        // equivariant biases exist on the trivial-isotypic part only:
        // one value per regular copy, one per scalar irrep, none otherwise
        match &spec.rep_out {
            Some(ChannelRep::Regular { copies }) => *copies,
            Some(ChannelRep::Irreps(freqs)) if freqs.iter().all(|&f| f == 0) => freqs.len(),
            _ => 0,
        }
    }

    fn init_gain(&self, spec: &LayerSpec) -> f64 {
        // group averaging shrinks variance by ~1/n; widen the free kernel
        (spec.group_order as f64).sqrt()
    }

    fn validate(&self, spec: &LayerSpec) -> Result<()> {
        if spec.kernel % 2 == 0 {
            return Err(TensorError::EvenKernel(spec.kernel));
        }
        let (rin, rout) = self.reps(spec)?;
        let n = spec.group_order;
        if rin.dim(n) != spec.c_in || rout.dim(n) != spec.c_out {
            return Err(TensorError::ShapeMismatch(format!(
                "reps give {} -> {} channels, spec says {} -> {}",
                rin.dim(n),
                rout.dim(n),
                spec.c_in,
                spec.c_out
            )));
        }
        if spec.activation == Activation::Relu {
            let permutation_out = matches!(rout, ChannelRep::Regular { .. })
                || matches!(rout, ChannelRep::Irreps(f) if f.iter().all(|&x| x == 0));
            if !permutation_out {
                return Err(TensorError::Invalid(
                    "channel-wise activations are only equivariant on regular or scalar \
                     representations"
                        .into(),
                ));
            }
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
        let (rin, rout) = self.reps(spec)?;
        let proj = Arc::new(KernelProjection::new(rin, rout, spec.group_order, spec.kernel)?);
        let k_eq = tape.linear_map(kernel, proj)?;
        let mut y = tape.conv2d(x, k_eq, spec.padding, 1)?;
        if let Some(b) = bias {
            let blen = tape.value(b).numel();
            match rout {
                ChannelRep::Regular { copies } => {
                    // expand one value per copy to a constant over the copy
                    let n = spec.group_order;
                    let b2 = tape.reshape(b, &[*copies, 1])?;
                    let zeros = tape.constant(Tensor::zeros(&[*copies, n]));
                    let wide = tape.add(zeros, b2)?;
                    let b4 = tape.reshape(wide, &[1, copies * n, 1, 1])?;
                    y = tape.add(y, b4)?;
                }
                ChannelRep::Irreps(_) => {
                    let b4 = tape.reshape(b, &[1, blen, 1, 1])?;
                    y = tape.add(y, b4)?;
                }
            }
        }
        activate(tape, spec.activation, y)
    }
}

//! Plain (non-equivariant) convolution, the baseline every equivariant
//! variant is compared against.

use super::{activate, add_channel_bias, ConvScheme, LayerSpec};
use crate::tensor::{NodeId, Result, Tape, TensorError};

#[derive(Debug)]
pub struct PlainConv;

impl ConvScheme for PlainConv {
    fn name(&self) -> &'static str {
        "none"
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
        let mut y = tape.conv2d(x, kernel, spec.padding, 1)?;
        if let Some(b) = bias {
            y = add_channel_bias(tape, y, b)?;
        }
        activate(tape, spec.activation, y)
    }
}

//! Finite-difference verification of the backward pass.

use super::{NodeId, Result, Tape, Tensor};

/// Compares analytic gradients against central finite differences.
///
/// `f` builds a scalar loss on a fresh tape from leaves created from
/// `point`. Returns the maximum over all coordinates of
/// `|analytic - fd| / (|analytic| + |fd| + eps)`.
pub fn gradcheck<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        Ok((v, grads))
    };

    let (_, analytic) = eval(point)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        for ci in 0..t.numel() {
            probe[ti].data_mut()[ci] = t.data()[ci] + h;
            let (fp, _) = eval(&probe)?;
            probe[ti].data_mut()[ci] = t.data()[ci] - h;
            let (fm, _) = eval(&probe)?;
            probe[ti].data_mut()[ci] = t.data()[ci];
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[ti].as_ref().map(|g| g.data()[ci]).unwrap_or(0.0);
            let err = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

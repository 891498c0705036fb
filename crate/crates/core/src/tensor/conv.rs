//! 2D cross-correlation: a naive quadruple-loop reference and an im2col
//! blocked path. The blocked path backs the tape op; the reference is the
//! oracle the tests compare against.

use super::{Result, Tensor, TensorError};

/// Boundary handling for convolution and sliding-block statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Same-size output, out-of-range taps read 0.
    Zero,
    /// Same-size output, taps wrap around the grid (torus).
    Periodic,
    /// No padding; output shrinks by the kernel's effective extent.
    None,
}

/// Output (H', W') for an input (h, w), odd kernel size s and dilation.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    s: usize,
    padding: Padding,
    dilation: usize,
) -> Result<(usize, usize)> {
    if s % 2 == 0 {
        return Err(TensorError::EvenKernel(s));
    }
    if dilation == 0 {
        return Err(TensorError::Invalid("dilation must be positive".into()));
    }
    let ext = (s - 1) * dilation + 1;
    match padding {
        Padding::Zero | Padding::Periodic => Ok((h, w)),
        Padding::None => {
            if h < ext || w < ext {
                Err(TensorError::ShapeMismatch(format!(
                    "input {}x{} smaller than dilated kernel extent {}",
                    h, w, ext
                )))
            } else {
                Ok((h - ext + 1, w - ext + 1))
            }
        }
    }
}

fn check_conv_shapes(input: &Tensor, kernel: &Tensor) -> Result<()> {
    if input.rank() != 4 || kernel.rank() != 4 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d wants input [B,C,H,W] and kernel [Co,C,s,s], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if kernel.shape()[2] != kernel.shape()[3] {
        return Err(TensorError::ShapeMismatch(format!(
            "kernel must be square, got {:?}",
            kernel.shape()
        )));
    }
    if input.shape()[1] != kernel.shape()[1] {
        return Err(TensorError::ShapeMismatch(format!(
            "input channels {} != kernel channels {}",
            input.shape()[1],
            kernel.shape()[1]
        )));
    }
    Ok(())
}

/// Source coordinate for one tap; `None` means the tap reads zero.
#[inline]
fn tap_coord(p: i64, extent: usize, padding: Padding) -> Option<usize> {
    let n = extent as i64;
    match padding {
        Padding::Periodic => Some(p.rem_euclid(n) as usize),
        Padding::Zero | Padding::None => {
            if p < 0 || p >= n {
                None
            } else {
                Some(p as usize)
            }
        }
    }
}

/// Direct quadruple-loop cross-correlation. Kept as the test oracle.
pub fn conv2d_reference(
    input: &Tensor,
    kernel: &Tensor,
    padding: Padding,
    dilation: usize,
) -> Result<Tensor> {
    check_conv_shapes(input, kernel)?;
    let (b, c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, s) = (kernel.shape()[0], kernel.shape()[2]);
    let (oh, ow) = conv_output_hw(h, w, s, padding, dilation)?;
    let pad = match padding {
        Padding::None => 0,
        _ => ((s - 1) * dilation / 2) as i64,
    };
    let mut out = Tensor::zeros(&[b, c_out, oh, ow]);
    for bi in 0..b {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for ky in 0..s {
                            for kx in 0..s {
                                let iy = oy as i64 + (ky * dilation) as i64 - pad;
                                let ix = ox as i64 + (kx * dilation) as i64 - pad;
                                let (Some(iy), Some(ix)) =
                                    (tap_coord(iy, h, padding), tap_coord(ix, w, padding))
                                else {
                                    continue;
                                };
                                acc += input.at(&[bi, c, iy, ix]) * kernel.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out.set(&[bi, o, oy, ox], acc);
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample im2col matrix: rows are output positions, columns are
/// (channel, ky, kx) taps. Out-of-range taps under zero padding read 0.
fn im2col(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    s: usize,
    padding: Padding,
    dilation: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let pad = match padding {
        Padding::None => 0,
        _ => ((s - 1) * dilation / 2) as i64,
    };
    let cols = c_in * s * s;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cols;
            let mut m = 0;
            for c in 0..c_in {
                let plane = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..s {
                    let iy = oy as i64 + (ky * dilation) as i64 - pad;
                    let ycoord = tap_coord(iy, h, padding);
                    for kx in 0..s {
                        let ix = ox as i64 + (kx * dilation) as i64 - pad;
                        col[row + m] = match (ycoord, tap_coord(ix, w, padding)) {
                            (Some(y), Some(x)) => plane[y * w + x],
                            _ => 0.0,
                        };
                        m += 1;
                    }
                }
            }
        }
    }
}

/// Blocked forward pass: im2col followed by a row-dot GEMM.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    padding: Padding,
    dilation: usize,
) -> Result<Tensor> {
    check_conv_shapes(input, kernel)?;
    let (b, c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, s) = (kernel.shape()[0], kernel.shape()[2]);
    let (oh, ow) = conv_output_hw(h, w, s, padding, dilation)?;
    let cols = c_in * s * s;
    let positions = oh * ow;
    let mut col = vec![0.0; positions * cols];
    let mut out = Tensor::zeros(&[b, c_out, oh, ow]);
    let kdata = kernel.data();
    for bi in 0..b {
        let sample = &input.data()[bi * c_in * h * w..(bi + 1) * c_in * h * w];
        im2col(sample, c_in, h, w, s, padding, dilation, oh, ow, &mut col);
        let odata = &mut out.data_mut()[bi * c_out * positions..(bi + 1) * c_out * positions];
        for p in 0..positions {
            let row = &col[p * cols..(p + 1) * cols];
            for o in 0..c_out {
                let krow = &kdata[o * cols..(o + 1) * cols];
                let mut acc = 0.0;
                for m in 0..cols {
                    acc += row[m] * krow[m];
                }
                odata[o * positions + p] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of the blocked forward pass w.r.t. input and kernel.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: Padding,
    dilation: usize,
    gout: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, s) = (kernel.shape()[0], kernel.shape()[2]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
    let cols = c_in * s * s;
    let positions = oh * ow;
    let pad = match padding {
        Padding::None => 0,
        _ => ((s - 1) * dilation / 2) as i64,
    };

    let mut gkern = need_kernel.then(|| Tensor::zeros(kernel.shape()));
    let mut ginput = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![0.0; positions * cols];
    let mut gcol_row = vec![0.0; cols];
    let kdata = kernel.data();

    for bi in 0..b {
        let sample = &input.data()[bi * c_in * h * w..(bi + 1) * c_in * h * w];
        if need_kernel {
            im2col(sample, c_in, h, w, s, padding, dilation, oh, ow, &mut col);
        }
        let gsample = &gout.data()[bi * c_out * positions..(bi + 1) * c_out * positions];
        for p in 0..positions {
            if let Some(gk) = gkern.as_mut() {
                let row = &col[p * cols..(p + 1) * cols];
                let gk = gk.data_mut();
                for o in 0..c_out {
                    let g = gsample[o * positions + p];
                    if g == 0.0 {
                        continue;
                    }
                    let krow = &mut gk[o * cols..(o + 1) * cols];
                    for m in 0..cols {
                        krow[m] += g * row[m];
                    }
                }
            }
            if let Some(gi) = ginput.as_mut() {
                gcol_row.fill(0.0);
                for o in 0..c_out {
                    let g = gsample[o * positions + p];
                    if g == 0.0 {
                        continue;
                    }
                    let krow = &kdata[o * cols..(o + 1) * cols];
                    for m in 0..cols {
                        gcol_row[m] += g * krow[m];
                    }
                }
                // col2im scatter for this output position
                let (oy, ox) = (p / ow, p % ow);
                let gi = &mut gi.data_mut()[bi * c_in * h * w..(bi + 1) * c_in * h * w];
                let mut m = 0;
                for c in 0..c_in {
                    for ky in 0..s {
                        let iy = oy as i64 + (ky * dilation) as i64 - pad;
                        let ycoord = tap_coord(iy, h, padding);
                        for kx in 0..s {
                            let ix = ox as i64 + (kx * dilation) as i64 - pad;
                            if let (Some(y), Some(x)) = (ycoord, tap_coord(ix, w, padding)) {
                                gi[c * h * w + y * w + x] += gcol_row[m];
                            }
                            m += 1;
                        }
                    }
                }
            }
        }
    }
    (ginput, gkern)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_ones_center_is_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_reference(&x, &k, Padding::Zero, 1).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        // corners see only a 2x2 neighbourhood under zero padding
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[2, 3, 5, 6], -1.0, 1.0, &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.set(&[c, c, 1, 1], 1.0);
        }
        for pad in [Padding::Zero, Padding::Periodic] {
            let y = conv2d_reference(&x, &k, pad, 1).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn blocked_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        for pad in [Padding::Zero, Padding::Periodic, Padding::None] {
            let a = conv2d_reference(&x, &k, pad, 1).unwrap();
            let b = conv2d_forward(&x, &k, pad, 1).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_matches_reference_exhaustive_small() {
        // every shape with H,W <= 8 around a 3x3 kernel, both paddings
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for h in 3..=8 {
            for w in 3..=8 {
                let x = Tensor::uniform(&[1, 2, h, w], -1.0, 1.0, &mut rng);
                let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
                for pad in [Padding::Zero, Padding::Periodic, Padding::None] {
                    let a = conv2d_reference(&x, &k, pad, 1).unwrap();
                    let b = conv2d_forward(&x, &k, pad, 1).unwrap();
                    for (u, v) in a.data().iter().zip(b.data()) {
                        assert!((u - v).abs() < 1e-12, "pad {:?} h {} w {}", pad, h, w);
                    }
                }
            }
        }
    }

    #[test]
    fn dilation_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[1, 1, 9, 9], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        for d in [1, 2, 3] {
            for pad in [Padding::Zero, Padding::Periodic] {
                let a = conv2d_reference(&x, &k, pad, d).unwrap();
                let b = conv2d_forward(&x, &k, pad, d).unwrap();
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_reference(&x, &k, Padding::Zero, 1).is_err());
    }

    #[test]
    fn periodic_conv_commutes_with_circular_shift() {
        // translation equivariance of the raw convolution
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let shift = |t: &Tensor, dy: usize, dx: usize| {
            let sh = t.shape().to_vec();
            let (h, w) = (sh[2], sh[3]);
            Tensor::from_fn(&sh, |idx| {
                t.at(&[idx[0], idx[1], (idx[2] + h - dy) % h, (idx[3] + w - dx) % w])
            })
        };
        let y_then_shift = shift(&conv2d_forward(&x, &k, Padding::Periodic, 1).unwrap(), 3, 5);
        let shift_then_y = conv2d_forward(&shift(&x, 3, 5), &k, Padding::Periodic, 1).unwrap();
        for (u, v) in y_then_shift.data().iter().zip(shift_then_y.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

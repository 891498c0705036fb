//! Group correlation over the scale-translation group.
//!
//! The input window is lifted onto a geometric grid of scale factors: slice
//! lambda holds lambda * w(lambda x, lambda^2 t) (the magnitude factor is
//! dropped for scalar fields), with the window anchored at its most recent
//! frame and edge-held where lambda^2 reaches past its start. Correlation
//! layers then act per scale slice, with kernel taps reaching neighbouring
//! slices at spatial dilation r^j, where r is the grid ratio and j the
//! slice offset. Dilations depend only on the offset, so shifting the scale
//! index of the input shifts the output index exactly (truncated at the
//! grid ends; physical scales do not wrap). A max over the scale axis
//! projects back down to a field.

use std::sync::Arc;

use super::{activate, ConvScheme, LayerSpec};
use crate::groups::{scale_resample_plane, scale_resample_plane_adjoint};
use crate::tensor::{LinearOp, NodeId, Result, Tape, Tensor, TensorError};

/// Lift of a stacked window [B, T*C, H, W] onto scale slices
/// [B, S, T*C, H, W].
#[derive(Debug)]
pub struct LiftMap {
    grid: Vec<f64>,
    frames: usize,
    channels: usize,
    magnitude: bool,
}

impl LiftMap {
    pub fn new(grid: Vec<f64>, frames: usize, channels: usize, magnitude: bool) -> Result<Self> {
        if frames == 0 {
            return Err(TensorError::Invalid(
                "scale lift needs at least one input frame".into(),
            ));
        }
        if grid.is_empty() || grid.iter().any(|&l| l <= 0.0) {
            return Err(TensorError::Invalid("scale grid must be positive".into()));
        }
        Ok(Self { grid, frames, channels, magnitude })
    }

    /// Source frame position for output frame k of slice lambda: the window
    /// is anchored at its newest frame and read at lambda^2 spacing,
    /// edge-held at the oldest frame.
    fn time_source(&self, lambda: f64, k: usize) -> (usize, usize, f64) {
        let t = self.frames as f64 - 1.0;
        let p = (t - lambda * lambda * (t - k as f64)).max(0.0);
        let t0 = p.floor() as usize;
        let t1 = (t0 + 1).min(self.frames - 1);
        (t0, t1, p - t0 as f64)
    }
}

impl LinearOp for LiftMap {
    fn label(&self) -> &'static str {
        "scale_lift"
    }

    fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![input[0], self.grid.len(), input[1], input[2], input[3]]
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (b, tc, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        debug_assert_eq!(tc, self.frames * self.channels);
        let s = self.grid.len();
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, s, tc, h, w]);
        let mut buf = vec![0.0; plane];
        for bi in 0..b {
            for (si, &lambda) in self.grid.iter().enumerate() {
                let mag = if self.magnitude { lambda } else { 1.0 };
                for k in 0..self.frames {
                    let (t0, t1, a) = self.time_source(lambda, k);
                    for c in 0..self.channels {
                        let p0 = &x.data()[((bi * tc) + t0 * self.channels + c) * plane..][..plane];
                        let p1 = &x.data()[((bi * tc) + t1 * self.channels + c) * plane..][..plane];
                        for (dst, (u, v)) in buf.iter_mut().zip(p0.iter().zip(p1)) {
                            *dst = (1.0 - a) * u + a * v;
                        }
                        let res = scale_resample_plane(&buf, h, w, lambda);
                        let off = (((bi * s) + si) * tc + k * self.channels + c) * plane;
                        for (o, v) in out.data_mut()[off..off + plane].iter_mut().zip(res) {
                            *o = mag * v;
                        }
                    }
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &Tensor, in_shape: &[usize]) -> Tensor {
        let (b, tc, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let s = self.grid.len();
        let plane = h * w;
        let mut out = Tensor::zeros(in_shape);
        let mut buf = vec![0.0; plane];
        for bi in 0..b {
            for (si, &lambda) in self.grid.iter().enumerate() {
                let mag = if self.magnitude { lambda } else { 1.0 };
                for k in 0..self.frames {
                    let (t0, t1, a) = self.time_source(lambda, k);
                    for c in 0..self.channels {
                        let off = (((bi * s) + si) * tc + k * self.channels + c) * plane;
                        for (dst, v) in buf.iter_mut().zip(&g.data()[off..off + plane]) {
                            *dst = mag * v;
                        }
                        let back = scale_resample_plane_adjoint(&buf, h, w, lambda);
                        let o0 = ((bi * tc) + t0 * self.channels + c) * plane;
                        let o1 = ((bi * tc) + t1 * self.channels + c) * plane;
                        for (i, v) in back.iter().enumerate() {
                            out.data_mut()[o0 + i] += (1.0 - a) * v;
                            out.data_mut()[o1 + i] += a * v;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Undoes the spatial zoom of each scale slice: slice lambda is resampled
/// by 1/lambda (and divided by lambda for vector fields), aligning all
/// slices to the lambda = 1 coordinate frame. Without this, pooling over
/// the scale axis mixes features that live at zoomed positions.
#[derive(Debug)]
pub struct SliceUnwarp {
    grid: Vec<f64>,
    magnitude: bool,
}

impl SliceUnwarp {
    pub fn new(grid: Vec<f64>, magnitude: bool) -> Result<Self> {
        if grid.is_empty() || grid.iter().any(|&l| l <= 0.0) {
            return Err(TensorError::Invalid("scale grid must be positive".into()));
        }
        Ok(Self { grid, magnitude })
    }
}

impl LinearOp for SliceUnwarp {
    fn label(&self) -> &'static str {
        "scale_unwarp"
    }

    fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        input.to_vec()
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (b, s, c, h, w) =
            (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        debug_assert_eq!(s, self.grid.len());
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for bi in 0..b {
            for (si, &lambda) in self.grid.iter().enumerate() {
                let mag = if self.magnitude { 1.0 / lambda } else { 1.0 };
                for ci in 0..c {
                    let off = (((bi * s) + si) * c + ci) * plane;
                    let res = scale_resample_plane(&x.data()[off..off + plane], h, w, 1.0 / lambda);
                    for (o, v) in out.data_mut()[off..off + plane].iter_mut().zip(res) {
                        *o = mag * v;
                    }
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &Tensor, in_shape: &[usize]) -> Tensor {
        let (b, s, c, h, w) =
            (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
        let plane = h * w;
        let mut out = Tensor::zeros(in_shape);
        for bi in 0..b {
            for (si, &lambda) in self.grid.iter().enumerate() {
                let mag = if self.magnitude { 1.0 / lambda } else { 1.0 };
                for ci in 0..c {
                    let off = (((bi * s) + si) * c + ci) * plane;
                    let scaled: Vec<f64> =
                        g.data()[off..off + plane].iter().map(|v| mag * v).collect();
                    let back = scale_resample_plane_adjoint(&scaled, h, w, 1.0 / lambda);
                    for (o, v) in out.data_mut()[off..off + plane].iter_mut().zip(back) {
                        *o += v;
                    }
                }
            }
        }
        out
    }
}

/// Aligns every scale slice back to the identity coordinate frame.
pub fn scale_unwarp(
    tape: &mut Tape,
    x: NodeId,
    grid: &[f64],
    magnitude: bool,
) -> Result<NodeId> {
    if tape.value(x).rank() != 5 || tape.value(x).shape()[1] != grid.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "scale_unwarp wants [B,{},C,H,W], got {:?}",
            grid.len(),
            tape.value(x).shape()
        )));
    }
    let map = Arc::new(SliceUnwarp::new(grid.to_vec(), magnitude)?);
    tape.linear_map(x, map)
}

/// Lifts a window onto the scale grid. `channels_per_frame` is C in the
/// [B, T*C, H, W] layout; `magnitude` applies the lambda prefactor of the
/// physical scaling law (dropped for scalar fields like temperature).
pub fn scale_lift(
    tape: &mut Tape,
    x: NodeId,
    grid: &[f64],
    frames: usize,
    channels_per_frame: usize,
    magnitude: bool,
) -> Result<NodeId> {
    let tc = tape.value(x).shape()[1];
    if frames * channels_per_frame != tc {
        return Err(TensorError::ShapeMismatch(format!(
            "{} frames x {} channels != {} input channels",
            frames, channels_per_frame, tc
        )));
    }
    let map = Arc::new(LiftMap::new(grid.to_vec(), frames, channels_per_frame, magnitude)?);
    tape.linear_map(x, map)
}

/// Group pooling over the scale axis: max over S.
pub fn scale_project(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    if tape.value(x).rank() != 5 {
        return Err(TensorError::ShapeMismatch(format!(
            "scale_project wants [B,S,C,H,W], got {:?}",
            tape.value(x).shape()
        )));
    }
    tape.reduce(crate::tensor::ReduceOp::Max, x, &[1])
}

/// Fractional dilation of an s x s kernel: taps move to factor * offset,
/// spread bilinearly onto the enclosing integer grid. Integer factors
/// reproduce integer dilation exactly.
#[derive(Debug)]
pub struct KernelDilation {
    s: usize,
    big: usize,
    /// (source tap, destination tap, weight)
    weights: Vec<(usize, usize, f64)>,
}

impl KernelDilation {
    pub fn new(s: usize, factor: f64) -> Result<Self> {
        if s % 2 == 0 {
            return Err(TensorError::EvenKernel(s));
        }
        if factor < 1.0 {
            return Err(TensorError::Invalid(format!("dilation factor {} < 1", factor)));
        }
        let half = (s / 2) as f64;
        let big_half = (factor * half).ceil() as usize;
        let big = 2 * big_half + 1;
        let mut weights = Vec::new();
        for ky in 0..s {
            for kx in 0..s {
                let py = big_half as f64 + factor * (ky as f64 - half);
                let px = big_half as f64 + factor * (kx as f64 - half);
                let y0 = py.floor();
                let x0 = px.floor();
                let (fy, fx) = (py - y0, px - x0);
                let src = ky * s + kx;
                let mut push = |yy: f64, xx: f64, wt: f64| {
                    if wt > 1e-15 {
                        let (yy, xx) = (yy as usize, xx as usize);
                        debug_assert!(yy < big && xx < big);
                        weights.push((src, yy * big + xx, wt));
                    }
                };
                push(y0, x0, (1.0 - fy) * (1.0 - fx));
                push(y0, x0 + 1.0, (1.0 - fy) * fx);
                push(y0 + 1.0, x0, fy * (1.0 - fx));
                push(y0 + 1.0, x0 + 1.0, fy * fx);
            }
        }
        Ok(Self { s, big, weights })
    }

    pub fn output_extent(&self) -> usize {
        self.big
    }
}

impl LinearOp for KernelDilation {
    fn label(&self) -> &'static str {
        "dilate_kernel"
    }

    fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![input[0], input[1], self.big, self.big]
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (co, ci) = (x.shape()[0], x.shape()[1]);
        let (st, bt) = (self.s * self.s, self.big * self.big);
        let mut out = Tensor::zeros(&[co, ci, self.big, self.big]);
        for oi in 0..co * ci {
            let src = &x.data()[oi * st..(oi + 1) * st];
            let dst = &mut out.data_mut()[oi * bt..(oi + 1) * bt];
            for &(a, b, wgt) in &self.weights {
                dst[b] += wgt * src[a];
            }
        }
        out
    }

    fn adjoint(&self, g: &Tensor, in_shape: &[usize]) -> Tensor {
        let (co, ci) = (in_shape[0], in_shape[1]);
        let (st, bt) = (self.s * self.s, self.big * self.big);
        let mut out = Tensor::zeros(in_shape);
        for oi in 0..co * ci {
            let src = &g.data()[oi * bt..(oi + 1) * bt];
            let dst = &mut out.data_mut()[oi * st..(oi + 1) * st];
            for &(a, b, wgt) in &self.weights {
                dst[a] += wgt * src[b];
            }
        }
        out
    }
}

/// Scale-translation group correlation acting on lifted tensors
/// [B, S, C, H, W] with kernels [C_out, C, s, s, t_extent].
#[derive(Debug)]
pub struct ScaleConv;

impl ScaleConv {
    fn grid_ratio(grid: &[f64]) -> Result<f64> {
        if grid.len() < 2 {
            return Ok(1.0);
        }
        let r = grid[1] / grid[0];
        for w in grid.windows(2) {
            if (w[1] / w[0] - r).abs() > 1e-9 {
                return Err(TensorError::Invalid(
                    "scale grid must be geometrically spaced".into(),
                ));
            }
        }
        Ok(r)
    }
}

impl ConvScheme for ScaleConv {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn kernel_shape(&self, spec: &LayerSpec) -> Vec<usize> {
        vec![spec.c_out, spec.c_in, spec.kernel, spec.kernel, spec.t_extent]
    }

    fn bias_len(&self, spec: &LayerSpec) -> usize {
        // shared across scale slices, so index-shift equivariance survives
        spec.c_out
    }

    fn validate(&self, spec: &LayerSpec) -> Result<()> {
        if spec.kernel % 2 == 0 {
            return Err(TensorError::EvenKernel(spec.kernel));
        }
        if spec.scale_grid.is_empty() || spec.scale_grid.iter().any(|&l| l <= 0.0) {
            return Err(TensorError::Invalid("scale grid must be positive".into()));
        }
        if !spec.scale_grid.iter().any(|&l| (l - 1.0).abs() < 1e-12) {
            return Err(TensorError::Invalid("scale grid must contain 1.0".into()));
        }
        if spec.t_extent == 0 || spec.t_extent > spec.scale_grid.len() {
            return Err(TensorError::Invalid(format!(
                "t_extent {} invalid for a {}-slice grid",
                spec.t_extent,
                spec.scale_grid.len()
            )));
        }
        Self::grid_ratio(&spec.scale_grid)?;
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
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 5 {
            return Err(TensorError::ShapeMismatch(format!(
                "scale correlation wants [B,S,C,H,W], got {:?}",
                shape
            )));
        }
        let s_axis = shape[1];
        let h = shape[3];
        if s_axis != spec.scale_grid.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "input has {} scale slices, grid has {}",
                s_axis,
                spec.scale_grid.len()
            )));
        }
        let ratio = Self::grid_ratio(&spec.scale_grid)?;

        // one (possibly fractionally dilated) spatial kernel per slice offset
        let mut slice_kernels = Vec::with_capacity(spec.t_extent);
        for j in 0..spec.t_extent {
            let kj = tape.index_last_axis(kernel, j)?;
            if j == 0 {
                slice_kernels.push(kj);
            } else {
                let dil = KernelDilation::new(spec.kernel, ratio.powi(j as i32))?;
                if dil.output_extent() > h {
                    return Err(TensorError::ShapeMismatch(format!(
                        "dilated kernel extent {} exceeds grid {}",
                        dil.output_extent(),
                        h
                    )));
                }
                slice_kernels.push(tape.linear_map(kj, Arc::new(dil))?);
            }
        }

        // out[sigma] = sum_j conv(x[sigma + j], K_j), truncated at the top
        let mut outs = Vec::with_capacity(s_axis);
        for sigma in 0..s_axis {
            let mut acc: Option<NodeId> = None;
            for (j, &kj) in slice_kernels.iter().enumerate() {
                if sigma + j >= s_axis {
                    break;
                }
                let slice = tape.select_axis1(x, sigma + j)?;
                let term = tape.conv2d(slice, kj, spec.padding, 1)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            outs.push(acc.expect("t_extent >= 1 guarantees the j = 0 term"));
        }
        let mut stacked = tape.stack_axis1(&outs)?;
        if let Some(b) = bias {
            let b5 = tape.reshape(b, &[1, 1, spec.c_out, 1, 1])?;
            stacked = tape.add(stacked, b5)?;
        }
        activate(tape, spec.activation, stacked)
    }
}

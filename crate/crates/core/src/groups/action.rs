//! Group actions on discretized fields.

use super::{ChannelRep, ChannelRepKind, Field, GroupElement, Mat};
use crate::tensor::{Result, Tensor, TensorError};

/// Circular shift of a [C,H,W] tensor by (dy, dx) pixels.
pub fn shift_tensor(x: &Tensor, dy: i64, dx: i64) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    for ci in 0..c {
        for r in 0..h {
            for cc in 0..w {
                let sr = (r as i64 - dy).rem_euclid(h as i64) as usize;
                let sc = (cc as i64 - dx).rem_euclid(w as i64) as usize;
                let v = x.at(&[ci, sr, sc]);
                out.set(&[ci, r, cc], v);
            }
        }
    }
    out
}

/// One quarter turn of a square plane under the index map
/// (r, c) -> (c, n-1-r); `times` applications, exact (a permutation).
pub fn rotate_plane_quarter(plane: &[f64], n: usize, times: usize) -> Vec<f64> {
    let mut cur = plane.to_vec();
    for _ in 0..times % 4 {
        let mut next = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                // out(r', c') with (r', c') = (c, n-1-r)
                next[c * n + (n - 1 - r)] = cur[r * n + c];
            }
        }
        cur = next;
    }
    cur
}

fn sample_bilinear_periodic(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let yi = (y0 as i64).rem_euclid(h as i64) as usize;
    let xi = (x0 as i64).rem_euclid(w as i64) as usize;
    let y1 = (yi + 1) % h;
    let x1 = (xi + 1) % w;
    plane[yi * w + xi] * (1.0 - fy) * (1.0 - fx)
        + plane[yi * w + x1] * (1.0 - fy) * fx
        + plane[y1 * w + xi] * fy * (1.0 - fx)
        + plane[y1 * w + x1] * fy * fx
}

/// Separable periodic Gaussian blur, truncated at three sigma.
pub(crate) fn gaussian_blur_periodic(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for i in -radius..=radius {
        let v = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        weights.push(v);
        total += v;
    }
    for v in &mut weights {
        *v /= total;
    }
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let cc = (c as i64 + k as i64 - radius).rem_euclid(w as i64) as usize;
                acc += wt * plane[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let rr = (r as i64 + k as i64 - radius).rem_euclid(h as i64) as usize;
                acc += wt * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Antialiased zoom about the grid center: Gaussian blur
/// (sigma = 0.5 max(1/lambda, 1)) then bilinear sampling at
/// center + lambda (p - center), periodic. lambda = 1 is the identity;
/// contractions (lambda < 1) never wrap.
pub(crate) fn scale_resample_plane(plane: &[f64], h: usize, w: usize, lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return plane.to_vec();
    }
    let sigma = 0.5 * (1.0 / lambda).max(1.0);
    let blurred = gaussian_blur_periodic(plane, h, w, sigma);
    let my = (h as f64 - 1.0) / 2.0;
    let mx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let y = my + lambda * (r as f64 - my);
            let x = mx + lambda * (c as f64 - mx);
            out[r * w + c] = sample_bilinear_periodic(&blurred, h, w, y, x);
        }
    }
    out
}

/// Exact transpose of [`scale_resample_plane`]: bilinear scatter followed
/// by the (self-adjoint) Gaussian blur.
pub(crate) fn scale_resample_plane_adjoint(g: &[f64], h: usize, w: usize, lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return g.to_vec();
    }
    let my = (h as f64 - 1.0) / 2.0;
    let mx = (w as f64 - 1.0) / 2.0;
    let mut acc = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let y = my + lambda * (r as f64 - my);
            let x = mx + lambda * (c as f64 - mx);
            let y0 = y.floor();
            let x0 = x.floor();
            let (fy, fx) = (y - y0, x - x0);
            let yi = (y0 as i64).rem_euclid(h as i64) as usize;
            let xi = (x0 as i64).rem_euclid(w as i64) as usize;
            let y1 = (yi + 1) % h;
            let x1 = (xi + 1) % w;
            let v = g[r * w + c];
            acc[yi * w + xi] += v * (1.0 - fy) * (1.0 - fx);
            acc[yi * w + x1] += v * (1.0 - fy) * fx;
            acc[y1 * w + xi] += v * fy * (1.0 - fx);
            acc[y1 * w + x1] += v * fy * fx;
        }
    }
    let sigma = 0.5 * (1.0 / lambda).max(1.0);
    gaussian_blur_periodic(&acc, h, w, sigma)
}

/// Spatial rotation by j steps of C_n combined with the channel
/// representation matrix. Quarter turns are exact index permutations;
/// other angles use bilinear interpolation about the grid center.
///
/// Accepts [C,H,W] or [B,C,H,W]; the channel axis must match `rep.dim(n)`.
pub fn rotate_with_rep(x: &Tensor, j: i64, n: usize, rep: &ChannelRep) -> Result<Tensor> {
    let b = match x.rank() {
        3 => 1,
        4 => x.shape()[0],
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "rotate_with_rep wants [C,H,W] or [B,C,H,W], got {:?}",
                x.shape()
            )))
        }
    };
    let c = x.shape()[x.rank() - 3];
    let h = x.shape()[x.rank() - 2];
    let w = x.shape()[x.rank() - 1];
    if h != w {
        return Err(TensorError::Invalid("rotation needs a square grid".into()));
    }
    if rep.dim(n) != c {
        return Err(TensorError::ShapeMismatch(format!(
            "rep dimension {} != channel count {}",
            rep.dim(n),
            c
        )));
    }
    let jm = j.rem_euclid(n as i64) as usize;
    let plane = h * w;

    // spatial part
    let mut data = Vec::with_capacity(x.numel());
    let exact_quarter = (4 * jm) % n == 0;
    for bc in 0..b * c {
        let src = &x.data()[bc * plane..(bc + 1) * plane];
        if exact_quarter {
            data.extend(rotate_plane_quarter(src, h, 4 * jm / n));
        } else {
            let angle = 2.0 * std::f64::consts::PI * jm as f64 / n as f64;
            let (s, co) = angle.sin_cos();
            let m = (h as f64 - 1.0) / 2.0;
            for r in 0..h {
                for cc in 0..w {
                    let (u, v) = (r as f64 - m, cc as f64 - m);
                    // pull map: quarter turn must reduce to (u,v) -> (-v,u)
                    let sy = co * u - s * v + m;
                    let sx = s * u + co * v + m;
                    data.push(sample_bilinear_periodic(src, h, w, sy, sx));
                }
            }
        }
    }
    let spatial = Tensor::new(x.shape().to_vec(), data)?;

    // channel part
    let mat = rep.matrix(jm as i64, n);
    Ok(apply_channel_matrix(&spatial, &mat, b, c, plane))
}

fn apply_channel_matrix(x: &Tensor, mat: &Mat, b: usize, c: usize, plane: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut vin = vec![0.0; c];
    let mut vout = vec![0.0; c];
    for bi in 0..b {
        for p in 0..plane {
            for ci in 0..c {
                vin[ci] = x.data()[(bi * c + ci) * plane + p];
            }
            mat.apply(&vin, &mut vout);
            for ci in 0..c {
                out.data_mut()[(bi * c + ci) * plane + p] = vout[ci];
            }
        }
    }
    out
}

/// Applies a symmetry transform to a field: the discretized version of
/// (g w)(x) = g(w(g^{-1} x)).
pub fn act_on_field(g: &GroupElement, f: &Field) -> Result<Field> {
    g.validate()?;
    let (h, w) = f.grid();
    match *g {
        GroupElement::Translate { dy, dx } => {
            Field::new(shift_tensor(&f.data, dy, dx), f.rep, f.dx, f.dt)
        }
        GroupElement::UniformMotion { cu, cv } => {
            if f.rep != ChannelRepKind::Vector2 {
                return Err(TensorError::Invalid(
                    "uniform motion acts on vector fields only".into(),
                ));
            }
            let mut data = f.data.clone();
            for (i, v) in data.data_mut().iter_mut().enumerate() {
                let ch = i / (h * w);
                *v += if ch % 2 == 0 { cu } else { cv };
            }
            Field::new(data, f.rep, f.dx, f.dt)
        }
        GroupElement::Magnitude { lambda } => Field::new(
            f.data.map(|v| lambda * v),
            f.rep,
            f.dx / lambda,
            f.dt / (lambda * lambda),
        ),
        GroupElement::Rotate { j, n } => {
            if h != w {
                return Err(TensorError::Invalid("rotation needs a square grid".into()));
            }
            let rep = match f.rep {
                ChannelRepKind::Scalar => ChannelRep::scalars(f.channels()),
                ChannelRepKind::Vector2 => ChannelRep::vectors(f.channels() / 2),
            };
            let data = rotate_with_rep(&f.data, j, n, &rep)?;
            Field::new(data, f.rep, f.dx, f.dt)
        }
        GroupElement::Scale { lambda } => {
            let c = f.channels();
            let mag = match f.rep {
                // T_lambda carries a magnitude factor for velocities; the
                // heat scaling symmetry has none.
                ChannelRepKind::Vector2 => lambda,
                ChannelRepKind::Scalar => 1.0,
            };
            let mut data = Vec::with_capacity(f.data.numel());
            for ci in 0..c {
                let plane = &f.data.data()[ci * h * w..(ci + 1) * h * w];
                let res = scale_resample_plane(plane, h, w, lambda);
                data.extend(res.into_iter().map(|v| mag * v));
            }
            Field::new(
                Tensor::new(f.data.shape().to_vec(), data)?,
                f.rep,
                f.dx / lambda,
                f.dt / (lambda * lambda),
            )
        }
    }
}

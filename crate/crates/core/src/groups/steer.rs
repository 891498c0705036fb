//! Group-averaged projection of free kernels onto the equivariant subspace.
//!
//! A convolution kernel K makes its layer C_n-equivariant exactly when
//! K(R_g v) = rho_out(g) K(v) rho_in(g)^{-1} for every group element. The
//! projection below enforces that by averaging the orbit of a free kernel:
//!
//!   K_eq = (1/n) sum_g rho_out(g) . K_free(R_g^{-1} v) . rho_in(g)^{-1}
//!
//! For n in {1, 2, 4} the spatial maps are exact index permutations, so the
//! constraint holds to machine precision and the projection is idempotent.
//! n = 8 is supported with bilinear tap interpolation and is approximate.

use super::{rotate_plane_quarter, ChannelRep, Mat};
use crate::tensor::{LinearOp, Result, Tensor, TensorError};

/// Precomputed data for projecting [C_out, C_in, s, s] kernels.
#[derive(Debug)]
pub struct KernelProjection {
    pub n: usize,
    s: usize,
    c_in: usize,
    c_out: usize,
    rout: Vec<Mat>,
    rin_inv: Vec<Mat>,
    /// per group element, per output tap: (source tap, weight) pairs
    spatial: Vec<Vec<Vec<(usize, f64)>>>,
}

impl KernelProjection {
    pub fn new(rep_in: &ChannelRep, rep_out: &ChannelRep, n: usize, s: usize) -> Result<Self> {
        if n == 0 || !matches!(n, 1 | 2 | 4 | 8) {
            return Err(TensorError::Invalid(format!(
                "rotation group order {} unsupported (use 1, 2, 4, or 8)",
                n
            )));
        }
        if s % 2 == 0 {
            return Err(TensorError::EvenKernel(s));
        }
        let c_in = rep_in.dim(n);
        let c_out = rep_out.dim(n);
        let mut rout = Vec::with_capacity(n);
        let mut rin_inv = Vec::with_capacity(n);
        let mut spatial = Vec::with_capacity(n);
        for j in 0..n as i64 {
            rout.push(rep_out.matrix(j, n));
            rin_inv.push(rep_in.matrix(-j, n));
            spatial.push(tap_map(s, j as usize, n));
        }
        Ok(Self { n, s, c_in, c_out, rout, rin_inv, spatial })
    }

    fn check_kernel(&self, k: &Tensor) -> Result<()> {
        let want = [self.c_out, self.c_in, self.s, self.s];
        if k.shape() != want {
            return Err(TensorError::ShapeMismatch(format!(
                "kernel {:?} does not match representation dims {:?}",
                k.shape(),
                want
            )));
        }
        Ok(())
    }

    /// K_eq = (1/n) sum_j rho_out(g_j) K(R_j^{-1} v) rho_in(g_j)^{-1}.
    pub fn project(&self, k: &Tensor) -> Result<Tensor> {
        self.check_kernel(k)?;
        let taps = self.s * self.s;
        let (co, ci) = (self.c_out, self.c_in);
        let mut out = Tensor::zeros(k.shape());
        let mut rotated = vec![0.0; co * ci * taps];
        let inv_n = 1.0 / self.n as f64;
        for j in 0..self.n {
            // spatial gather: rotated[o,i,v] = sum_w weight * k[o,i,w]
            rotated.fill(0.0);
            for oi in 0..co * ci {
                let src = &k.data()[oi * taps..(oi + 1) * taps];
                let dst = &mut rotated[oi * taps..(oi + 1) * taps];
                for (v, entries) in self.spatial[j].iter().enumerate() {
                    let mut acc = 0.0;
                    for &(w, wt) in entries {
                        acc += wt * src[w];
                    }
                    dst[v] = acc;
                }
            }
            // channel mix per tap: A . K(v) . B
            let a = &self.rout[j];
            let b = &self.rin_inv[j];
            for v in 0..taps {
                for op in 0..co {
                    for ip in 0..ci {
                        let mut acc = 0.0;
                        for o in 0..co {
                            let av = a.at(op, o);
                            if av == 0.0 {
                                continue;
                            }
                            for i in 0..ci {
                                acc += av * rotated[(o * ci + i) * taps + v] * b.at(i, ip);
                            }
                        }
                        out.data_mut()[(op * ci + ip) * taps + v] += inv_n * acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact transpose of `project`. Each orbit term is orthogonal, so the
    /// adjoint is the same group average with scatter in place of gather.
    pub fn project_adjoint(&self, g: &Tensor) -> Tensor {
        let taps = self.s * self.s;
        let (co, ci) = (self.c_out, self.c_in);
        let mut out = Tensor::zeros(g.shape());
        let mut mixed = vec![0.0; co * ci * taps];
        let inv_n = 1.0 / self.n as f64;
        for j in 0..self.n {
            let a = &self.rout[j];
            let b = &self.rin_inv[j];
            // adjoint channel mix per tap: A^T . G(v) . B^T
            for v in 0..taps {
                for o in 0..co {
                    for i in 0..ci {
                        let mut acc = 0.0;
                        for op in 0..co {
                            let av = a.at(op, o);
                            if av == 0.0 {
                                continue;
                            }
                            for ip in 0..ci {
                                acc += av * g.data()[(op * ci + ip) * taps + v] * b.at(i, ip);
                            }
                        }
                        mixed[(o * ci + i) * taps + v] = acc;
                    }
                }
            }
            // adjoint spatial: scatter with the same weights
            for oi in 0..co * ci {
                let src = &mixed[oi * taps..(oi + 1) * taps];
                for (v, entries) in self.spatial[j].iter().enumerate() {
                    for &(w, wt) in entries {
                        out.data_mut()[oi * taps + w] += inv_n * wt * src[v];
                    }
                }
            }
        }
        out
    }
}

impl LinearOp for KernelProjection {
    fn label(&self) -> &'static str {
        "project_kernel"
    }

    fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        input.to_vec()
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        self.project(x).expect("kernel shape validated at construction")
    }

    fn adjoint(&self, g: &Tensor, _in_shape: &[usize]) -> Tensor {
        self.project_adjoint(g)
    }
}

/// Gather table for K(R_j^{-1} v) on an s x s tap grid.
fn tap_map(s: usize, j: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let taps = s * s;
    if (4 * j) % n == 0 {
        // exact quarter turns: rotate_plane_quarter(q) computes K o M^{-q}
        let q = (4 * j / n) % 4;
        let mut ident: Vec<f64> = vec![0.0; taps];
        let mut map = vec![Vec::new(); taps];
        for w in 0..taps {
            ident[w] = 1.0;
            let rotated = rotate_plane_quarter(&ident, s, q);
            for (v, &val) in rotated.iter().enumerate() {
                if val != 0.0 {
                    map[v].push((w, val));
                }
            }
            ident[w] = 0.0;
        }
        map
    } else {
        // bilinear taps about the kernel center, zero outside the support
        let angle = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
        let (sn, cs) = angle.sin_cos();
        let m = (s as f64 - 1.0) / 2.0;
        let mut map = vec![Vec::new(); taps];
        for r in 0..s {
            for c in 0..s {
                let (u, v) = (r as f64 - m, c as f64 - m);
                let sy = cs * u - sn * v + m;
                let sx = sn * u + cs * v + m;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let (fy, fx) = (sy - y0, sx - x0);
                let entries = &mut map[r * s + c];
                let mut push = |yy: i64, xx: i64, wt: f64| {
                    if wt > 1e-15 && yy >= 0 && yy < s as i64 && xx >= 0 && xx < s as i64 {
                        entries.push(((yy as usize) * s + xx as usize, wt));
                    }
                };
                push(y0 as i64, x0 as i64, (1.0 - fy) * (1.0 - fx));
                push(y0 as i64, x0 as i64 + 1, (1.0 - fy) * fx);
                push(y0 as i64 + 1, x0 as i64, fy * (1.0 - fx));
                push(y0 as i64 + 1, x0 as i64 + 1, fy * fx);
            }
        }
        map
    }
}

/// Projects a free kernel onto the C_n-equivariant subspace.
pub fn project_kernel_equivariant(
    k_free: &Tensor,
    rep_in: &ChannelRep,
    rep_out: &ChannelRep,
    n: usize,
) -> Result<Tensor> {
    if k_free.rank() != 4 || k_free.shape()[2] != k_free.shape()[3] {
        return Err(TensorError::ShapeMismatch(format!(
            "kernel wants [C_out, C_in, s, s], got {:?}",
            k_free.shape()
        )));
    }
    let proj = KernelProjection::new(rep_in, rep_out, n, k_free.shape()[2])?;
    proj.project(k_free)
}

/// Max violation of K(R_g v) = rho_out(g) K(v) rho_in(g)^{-1} over all
/// group elements and taps. Zero (to rounding) for projected kernels.
pub fn kernel_constraint_violation(
    k: &Tensor,
    rep_in: &ChannelRep,
    rep_out: &ChannelRep,
    n: usize,
) -> Result<f64> {
    let s = k.shape()[2];
    let taps = s * s;
    let (co, ci) = (rep_out.dim(n), rep_in.dim(n));
    let mut worst = 0.0f64;
    for j in 0..n as i64 {
        // lhs: K(R_j v), i.e. K o M^{q_j}; rotate_plane_quarter(q) is K o M^{-q}
        let q = {
            let jm = j as usize;
            if (4 * jm) % n != 0 {
                return Err(TensorError::Invalid(
                    "constraint check needs grid-exact rotations (n in 1,2,4)".into(),
                ));
            }
            (4 - (4 * jm / n) % 4) % 4
        };
        let a = rep_out.matrix(j, n);
        let b = rep_in.matrix(-j, n);
        for o in 0..co {
            for i in 0..ci {
                let plane = &k.data()[(o * ci + i) * taps..(o * ci + i + 1) * taps];
                let lhs = rotate_plane_quarter(plane, s, q);
                for v in 0..taps {
                    // rhs[o,i](v) = sum_{o',i'} A[o,o'] K[o',i'](v) B[i',i]
                    let mut rhs = 0.0;
                    for op in 0..co {
                        let av = a.at(o, op);
                        if av == 0.0 {
                            continue;
                        }
                        for ip in 0..ci {
                            rhs += av * k.data()[(op * ci + ip) * taps + v] * b.at(ip, i);
                        }
                    }
                    worst = worst.max((lhs[v] - rhs).abs());
                }
            }
        }
    }
    Ok(worst)
}

//! Symmetry group elements, their matrix representations on channel space,
//! and their actions on discretized fields.
//!
//! Everything the equivariant layers claim is tested against the actions
//! defined here, so the conventions in this module are the ground truth:
//! the quarter-turn index map is (r, c) -> (c, H-1-r), vector channels are
//! interleaved (u, v) pairs, and frequency-n irreps follow
//! cos/sin(n * theta).

mod action;
mod steer;

pub use action::{act_on_field, rotate_plane_quarter, rotate_with_rep, shift_tensor};
pub(crate) use action::{scale_resample_plane, scale_resample_plane_adjoint};
pub use steer::{kernel_constraint_violation, project_kernel_equivariant, KernelProjection};

use crate::tensor::{Result, Tensor, TensorError};

/// Interpretation of a field's channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRepKind {
    /// Independent scalar channels (rho_0 each).
    Scalar,
    /// Consecutive (u, v) pairs transforming as rho_1.
    Vector2,
}

/// A discretized d-channel function on a 2D grid.
#[derive(Debug, Clone)]
pub struct Field {
    pub data: Tensor,
    pub rep: ChannelRepKind,
    pub dx: f64,
    pub dt: f64,
}

impl Field {
    pub fn new(data: Tensor, rep: ChannelRepKind, dx: f64, dt: f64) -> Result<Self> {
        if data.rank() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "field wants [C,H,W], got {:?}",
                data.shape()
            )));
        }
        if rep == ChannelRepKind::Vector2 && data.shape()[0] % 2 != 0 {
            return Err(TensorError::Invalid(
                "vector2 fields need an even channel count".into(),
            ));
        }
        if dx <= 0.0 || dt <= 0.0 {
            return Err(TensorError::Invalid("grid spacings must be positive".into()));
        }
        Ok(Self { data, rep, dx, dt })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

/// A symmetry transform together with the data needed to apply it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupElement {
    /// Circular pixel shift.
    Translate { dy: i64, dx: i64 },
    /// Add a constant velocity to every (u, v) pair.
    UniformMotion { cu: f64, cv: f64 },
    /// Multiply magnitudes by lambda; dx -> dx/lambda, dt -> dt/lambda^2.
    Magnitude { lambda: f64 },
    /// Rotation by j steps of the cyclic group C_n.
    Rotate { j: i64, n: usize },
    /// Physical rescaling T_lambda: w(x) -> lambda w(lambda x).
    Scale { lambda: f64 },
}

impl GroupElement {
    pub fn rotate(j: i64, n: usize) -> Self {
        GroupElement::Rotate { j: j.rem_euclid(n as i64), n }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GroupElement::Magnitude { lambda } | GroupElement::Scale { lambda } => {
                if *lambda <= 0.0 {
                    return Err(TensorError::Invalid("lambda must be strictly positive".into()));
                }
            }
            GroupElement::Rotate { n, .. } => {
                if *n == 0 {
                    return Err(TensorError::Invalid("rotation group order must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Composition `self . other` when both elements live in the same
    /// one-parameter family.
    pub fn compose(&self, other: &GroupElement) -> Option<GroupElement> {
        match (self, other) {
            (GroupElement::Translate { dy: a, dx: b }, GroupElement::Translate { dy: c, dx: d }) => {
                Some(GroupElement::Translate { dy: a + c, dx: b + d })
            }
            (
                GroupElement::UniformMotion { cu: a, cv: b },
                GroupElement::UniformMotion { cu: c, cv: d },
            ) => Some(GroupElement::UniformMotion { cu: a + c, cv: b + d }),
            (GroupElement::Magnitude { lambda: a }, GroupElement::Magnitude { lambda: b }) => {
                Some(GroupElement::Magnitude { lambda: a * b })
            }
            (GroupElement::Rotate { j: a, n }, GroupElement::Rotate { j: b, n: n2 }) if n == n2 => {
                Some(GroupElement::rotate(a + b, *n))
            }
            (GroupElement::Scale { lambda: a }, GroupElement::Scale { lambda: b }) => {
                Some(GroupElement::Scale { lambda: a * b })
            }
            _ => None,
        }
    }
}

// ---- small dense matrices for channel representations ---------------------

/// Tiny dense row-major matrix; only what representation bookkeeping needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.at(i, i)).sum()
    }

    /// y = M x for a dense vector.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += self.at(r, c) * x[c];
            }
            y[r] = acc;
        }
    }

    /// Block-diagonal stack of matrices.
    pub fn block_diag(blocks: &[Mat]) -> Mat {
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            for r in 0..b.rows {
                for c in 0..b.cols {
                    out.set(r0 + r, c0 + c, b.at(r, c));
                }
            }
            r0 += b.rows;
            c0 += b.cols;
        }
        out
    }
}

// ---- irreducible and regular representations ------------------------------

/// The frequency-n irrep of SO(2)/C_n evaluated at one angle.
#[derive(Debug, Clone)]
pub struct IrrepMatrix {
    pub freq: usize,
    pub theta: f64,
    pub matrix: Mat,
}

/// Rotation matrix with frequency-n dependence on the angle. Frequency 0 is
/// the trivial one-dimensional representation.
pub fn irrep_matrix(freq: usize, theta: f64) -> IrrepMatrix {
    let matrix = if freq == 0 {
        let mut m = Mat::zeros(1, 1);
        m.set(0, 0, 1.0);
        m
    } else {
        let a = freq as f64 * theta;
        let (s, c) = a.sin_cos();
        let mut m = Mat::zeros(2, 2);
        m.set(0, 0, c);
        m.set(0, 1, -s);
        m.set(1, 0, s);
        m.set(1, 1, c);
        m
    };
    IrrepMatrix { freq, theta, matrix }
}

/// Irrep of C_n at the group element g^j, with exact entries on quarter
/// turns so that C_4 equivariance tests are bit-exact.
pub fn cyclic_irrep(freq: usize, j: i64, n: usize) -> Mat {
    let jm = j.rem_euclid(n as i64) as usize;
    if freq == 0 {
        return Mat::identity(1);
    }
    if n % 2 == 0 && freq == n / 2 {
        let mut m = Mat::zeros(1, 1);
        m.set(0, 0, if jm % 2 == 0 { 1.0 } else { -1.0 });
        return m;
    }
    let k = (freq * jm) % n;
    if (4 * k) % n == 0 {
        // exact quarter-turn table
        let q = 4 * k / n;
        let (c, s) = match q % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        let mut m = Mat::zeros(2, 2);
        m.set(0, 0, c);
        m.set(0, 1, -s);
        m.set(1, 0, s);
        m.set(1, 1, c);
        m
    } else {
        irrep_matrix(freq, 2.0 * std::f64::consts::PI * jm as f64 / n as f64).matrix
    }
}

/// The regular representation of C_n: permutation matrices on the group
/// element basis.
#[derive(Debug, Clone, Copy)]
pub struct RegularRep {
    pub n: usize,
}

impl RegularRep {
    pub fn matrix(&self, j: i64) -> Mat {
        let n = self.n;
        let jm = j.rem_euclid(n as i64) as usize;
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set((i + jm) % n, i, 1.0);
        }
        m
    }
}

/// How the channel axis of a layer transforms under C_n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelRep {
    /// Block-diagonal irreps listed by frequency, e.g. `[1, 1]` for two
    /// vector pairs, `[0; k]` for k scalars.
    Irreps(Vec<usize>),
    /// `copies` copies of the regular representation R[C_n].
    Regular { copies: usize },
}

impl ChannelRep {
    pub fn vectors(count: usize) -> Self {
        ChannelRep::Irreps(vec![1; count])
    }

    pub fn scalars(count: usize) -> Self {
        ChannelRep::Irreps(vec![0; count])
    }

    pub fn dim(&self, n: usize) -> usize {
        match self {
            ChannelRep::Irreps(freqs) => freqs
                .iter()
                .map(|&f| if f == 0 || (n % 2 == 0 && f == n / 2) { 1 } else { 2 })
                .sum(),
            ChannelRep::Regular { copies } => n * copies,
        }
    }

    /// The block-diagonal representation matrix of g^j.
    pub fn matrix(&self, j: i64, n: usize) -> Mat {
        match self {
            ChannelRep::Irreps(freqs) => {
                let blocks: Vec<Mat> = freqs.iter().map(|&f| cyclic_irrep(f, j, n)).collect();
                Mat::block_diag(&blocks)
            }
            ChannelRep::Regular { copies } => {
                let p = RegularRep { n }.matrix(j);
                Mat::block_diag(&vec![p; *copies])
            }
        }
    }
}

/// Verifies by trace comparison that R[C_n] decomposes as
/// rho_0 + rho_1 + ... + rho_{floor(n/2)} (with the one-dimensional
/// exception at n/2 for even n). Test-only diagnostic.
pub fn regular_rep_decomposition_check(n: usize) -> bool {
    if n == 0 {
        return false;
    }
    let reg = RegularRep { n };
    for j in 0..n as i64 {
        let lhs = reg.matrix(j).trace();
        let mut rhs = 0.0;
        for f in 0..=n / 2 {
            rhs += cyclic_irrep(f, j, n).trace();
        }
        if (lhs - rhs).abs() > 1e-9 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn irrep_quarter_turn_exact() {
        let m = irrep_matrix(1, PI / 2.0).matrix;
        assert!((m.at(0, 0)).abs() < 1e-15);
        assert_eq!(m.at(0, 1), -1.0);
        assert_eq!(m.at(1, 0), 1.0);
        // the cyclic constructor is exact
        let m = cyclic_irrep(1, 1, 4);
        assert_eq!(m.data, vec![0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn irrep_freq_zero_is_trivial() {
        for theta in [0.0, 0.3, PI, 5.0] {
            let m = irrep_matrix(0, theta);
            assert_eq!(m.matrix.data, vec![1.0]);
        }
    }

    #[test]
    fn irrep_freq_two_half_turn() {
        let m = irrep_matrix(2, PI / 2.0).matrix;
        assert!((m.at(0, 0) + 1.0).abs() < 1e-15);
        assert!((m.at(1, 1) + 1.0).abs() < 1e-15);
        assert!(m.at(0, 1).abs() < 1e-15);
        // on the cyclic path freq 2 of C_4 is the one-dimensional n/2 irrep
        let m = cyclic_irrep(2, 1, 4);
        assert_eq!(m.data, vec![-1.0]);
    }

    #[test]
    fn regular_rep_is_homomorphism() {
        let reg = RegularRep { n: 5 };
        for a in 0..5 {
            for b in 0..5 {
                let lhs = reg.matrix(a + b);
                let rhs = reg.matrix(a).matmul(&reg.matrix(b));
                assert_eq!(lhs.data, rhs.data);
            }
        }
    }

    #[test]
    fn regular_rep_decomposition() {
        assert!(regular_rep_decomposition_check(1));
        assert!(regular_rep_decomposition_check(4));
        assert!(regular_rep_decomposition_check(5));
        assert!(regular_rep_decomposition_check(8));
    }

    #[test]
    fn channel_rep_dims() {
        assert_eq!(ChannelRep::vectors(3).dim(4), 6);
        assert_eq!(ChannelRep::scalars(5).dim(4), 5);
        assert_eq!(ChannelRep::Regular { copies: 3 }.dim(4), 12);
        // freq n/2 irreps are one-dimensional for even n
        assert_eq!(ChannelRep::Irreps(vec![2]).dim(4), 1);
        assert_eq!(ChannelRep::Irreps(vec![2]).dim(5), 2);
    }

    #[test]
    fn channel_rep_is_homomorphism() {
        for rep in [ChannelRep::vectors(2), ChannelRep::Regular { copies: 2 }] {
            for a in 0..4 {
                for b in 0..4 {
                    let lhs = rep.matrix(a + b, 4);
                    let rhs = rep.matrix(a, 4).matmul(&rep.matrix(b, 4));
                    for (u, v) in lhs.data.iter().zip(&rhs.data) {
                        assert!((u - v).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn field_invariants() {
        let t = Tensor::zeros(&[3, 4, 4]);
        assert!(Field::new(t.clone(), ChannelRepKind::Vector2, 1.0, 1.0).is_err());
        assert!(Field::new(t.clone(), ChannelRepKind::Scalar, 1.0, 1.0).is_ok());
        assert!(Field::new(t, ChannelRepKind::Scalar, 0.0, 1.0).is_err());
    }
}

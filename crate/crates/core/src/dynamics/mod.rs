//! Ground-truth dynamics: an explicit FTCS heat-diffusion simulator, corpus
//! generation, rolling-window datasets and the four transformed test sets.

mod dataset;

pub use dataset::{
    build_dataset, corpus_hash, fnv1a64, make_transformed_testset, read_trajectory,
    rolling_windows, write_trajectory, Dataset, DatasetMeta, SplitRanges, TransformKind,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::groups::{ChannelRepKind, Field};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    /// Zero-flux: ghost cells mirror the edge value.
    Insulated,
}

impl Boundary {
    pub fn name(&self) -> &'static str {
        match self {
            Boundary::Periodic => "periodic",
            Boundary::Insulated => "insulated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "periodic" => Some(Boundary::Periodic),
            "insulated" => Some(Boundary::Insulated),
            _ => None,
        }
    }
}

/// A simulated time series of fields on a fixed grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// each [C, H, W]
    pub frames: Vec<Tensor>,
    pub alpha: f64,
    pub dt: f64,
    pub dx: f64,
    pub boundary: Boundary,
    pub rep: ChannelRepKind,
}

impl Trajectory {
    pub fn grid(&self) -> (usize, usize) {
        (self.frames[0].shape()[1], self.frames[0].shape()[2])
    }

    pub fn channels(&self) -> usize {
        self.frames[0].shape()[0]
    }
}

/// One FTCS step of the five-point Laplacian stencil on each channel.
fn ftcs_step(frame: &Tensor, gamma: f64, boundary: Boundary) -> Tensor {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let mut out = Tensor::zeros(frame.shape());
    for ci in 0..c {
        let src = &frame.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for r in 0..h {
            for cc in 0..w {
                let (up, down, left, right) = match boundary {
                    Boundary::Periodic => (
                        src[(r + h - 1) % h * w + cc],
                        src[(r + 1) % h * w + cc],
                        src[r * w + (cc + w - 1) % w],
                        src[r * w + (cc + 1) % w],
                    ),
                    Boundary::Insulated => (
                        src[r.saturating_sub(1) * w + cc],
                        src[(r + 1).min(h - 1) * w + cc],
                        src[r * w + cc.saturating_sub(1)],
                        src[r * w + (cc + 1).min(w - 1)],
                    ),
                };
                let center = src[r * w + cc];
                dst[r * w + cc] = center + gamma * ((up + down) + (left + right) - 4.0 * center);
            }
        }
    }
    out
}

/// Explicit forward-time centered-space integration of dH/dt = alpha
/// laplacian(H). Rejects configurations outside the FTCS stability bound
/// alpha dt / dx^2 <= 1/4. The returned trajectory starts with H0 and
/// records one frame per step.
pub fn simulate_heat(
    h0: &Field,
    alpha: f64,
    dt: f64,
    dx: f64,
    steps: usize,
    boundary: Boundary,
) -> Result<Trajectory> {
    let gamma = alpha * dt / (dx * dx);
    if !(0.0..=0.25).contains(&gamma) {
        return Err(TensorError::Invalid(format!(
            "FTCS unstable: alpha dt/dx^2 = {:.6} exceeds 0.25",
            gamma
        )));
    }
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(h0.data.clone());
    for _ in 0..steps {
        let next = ftcs_step(frames.last().unwrap(), gamma, boundary);
        if !next.is_finite() {
            return Err(TensorError::NonFinite("heat simulation"));
        }
        frames.push(next);
    }
    Ok(Trajectory { frames, alpha, dt, dx, boundary, rep: h0.rep })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitFamily {
    GaussianBumps,
    HotDisks,
    SmoothNoise,
    /// Axis-elongated bumps: the corpus has a preferred orientation, so
    /// orientation-blind models can overfit it.
    AnisotropicBumps,
    /// Cycles through the first three families by trajectory index.
    Mixed,
}

impl InitFamily {
    pub fn name(&self) -> &'static str {
        match self {
            InitFamily::GaussianBumps => "gaussian_bumps",
            InitFamily::HotDisks => "hot_disks",
            InitFamily::SmoothNoise => "smooth_noise",
            InitFamily::AnisotropicBumps => "anisotropic_bumps",
            InitFamily::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian_bumps" => Some(InitFamily::GaussianBumps),
            "hot_disks" => Some(InitFamily::HotDisks),
            "smooth_noise" => Some(InitFamily::SmoothNoise),
            "anisotropic_bumps" => Some(InitFamily::AnisotropicBumps),
            "mixed" => Some(InitFamily::Mixed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_traj: usize,
    pub grid: usize,
    /// Recorded frames per trajectory (in addition to the initial one).
    pub frames: usize,
    /// Simulation steps between recorded frames.
    pub substeps: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub init: InitFamily,
    pub boundary: Boundary,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_traj: 200,
            grid: 32,
            frames: 59,
            substeps: 4,
            alpha_min: 1.0,
            alpha_max: 4.0,
            init: InitFamily::Mixed,
            boundary: Boundary::Periodic,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn dx(&self) -> f64 {
        1.0 / self.grid as f64
    }

    /// Simulation time step pinned at Courant number 0.2 for the stiffest
    /// trajectory in the corpus.
    pub fn sim_dt(&self) -> f64 {
        0.2 * self.dx() * self.dx() / self.alpha_max
    }

    pub fn canonical_text(&self, kind: &str) -> String {
        format!(
            "kind={}\nn_traj={}\ngrid={}\nframes={}\nsubsteps={}\nalpha_min={:.17e}\n\
             alpha_max={:.17e}\ninit={}\nboundary={}\nseed={}\n",
            kind,
            self.n_traj,
            self.grid,
            self.frames,
            self.substeps,
            self.alpha_min,
            self.alpha_max,
            self.init.name(),
            self.boundary.name(),
            self.seed
        )
    }
}

fn per_traj_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn init_field(family: InitFamily, idx: usize, grid: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let family = match family {
        InitFamily::Mixed => match idx % 3 {
            0 => InitFamily::GaussianBumps,
            1 => InitFamily::HotDisks,
            _ => InitFamily::SmoothNoise,
        },
        f => f,
    };
    let n = grid as f64;
    match family {
        InitFamily::GaussianBumps => {
            let bumps = rng.gen_range(1..=4);
            let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
                .map(|_| {
                    (
                        rng.gen_range(0.0..n),
                        rng.gen_range(0.0..n),
                        rng.gen_range(2.0..n / 6.0),
                        rng.gen_range(0.4..2.5),
                    )
                })
                .collect();
            Tensor::from_fn(&[1, grid, grid], |idx| {
                let (r, c) = (idx[1] as f64, idx[2] as f64);
                params
                    .iter()
                    .map(|&(cy, cx, sigma, amp)| {
                        // periodic distance
                        let dy = (r - cy).abs().min(n - (r - cy).abs());
                        let dc = (c - cx).abs().min(n - (c - cx).abs());
                        amp * (-(dy * dy + dc * dc) / (2.0 * sigma * sigma)).exp()
                    })
                    .sum()
            })
        }
        InitFamily::HotDisks => {
            let disks = rng.gen_range(1..=2);
            let params: Vec<(f64, f64, f64, f64)> = (0..disks)
                .map(|_| {
                    (
                        rng.gen_range(0.0..n),
                        rng.gen_range(0.0..n),
                        rng.gen_range(n / 8.0..n / 4.0),
                        rng.gen_range(0.3..3.0),
                    )
                })
                .collect();
            Tensor::from_fn(&[1, grid, grid], |idx| {
                let (r, c) = (idx[1] as f64, idx[2] as f64);
                params
                    .iter()
                    .map(|&(cy, cx, radius, temp)| {
                        let dy = (r - cy).abs().min(n - (r - cy).abs());
                        let dc = (c - cx).abs().min(n - (c - cx).abs());
                        if dy * dy + dc * dc <= radius * radius {
                            temp
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
        }
        InitFamily::AnisotropicBumps => {
            let bumps = rng.gen_range(2..=4);
            let params: Vec<(f64, f64, f64, f64, f64)> = (0..bumps)
                .map(|_| {
                    (
                        rng.gen_range(0.0..n),
                        rng.gen_range(0.0..n),
                        rng.gen_range(1.0..2.0),      // narrow in y
                        rng.gen_range(6.0..n / 3.0),  // wide in x
                        rng.gen_range(0.4..2.5),
                    )
                })
                .collect();
            Tensor::from_fn(&[1, grid, grid], |idx| {
                let (r, c) = (idx[1] as f64, idx[2] as f64);
                params
                    .iter()
                    .map(|&(cy, cx, sy, sx, amp)| {
                        let dy = (r - cy).abs().min(n - (r - cy).abs());
                        let dc = (c - cx).abs().min(n - (c - cx).abs());
                        amp * (-(dy * dy) / (2.0 * sy * sy) - (dc * dc) / (2.0 * sx * sx)).exp()
                    })
                    .sum()
            })
        }
        InitFamily::SmoothNoise => {
            // random low-frequency Fourier modes
            let kmax = 3i64;
            let mut coeffs = Vec::new();
            for ky in -kmax..=kmax {
                for kx in -kmax..=kmax {
                    if ky == 0 && kx == 0 {
                        continue;
                    }
                    coeffs.push((
                        ky as f64,
                        kx as f64,
                        rng.gen_range(-1.0..1.0) / (1.0 + (ky * ky + kx * kx) as f64),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    ));
                }
            }
            Tensor::from_fn(&[1, grid, grid], |idx| {
                let (r, c) = (idx[1] as f64 / n, idx[2] as f64 / n);
                coeffs
                    .iter()
                    .map(|&(ky, kx, a, phase)| {
                        a * (std::f64::consts::TAU * (ky * r + kx * c) + phase).cos()
                    })
                    .sum()
            })
        }
        InitFamily::Mixed => unreachable!(),
    }
}

fn record_trajectory(
    h0: Tensor,
    rep: ChannelRepKind,
    alpha: f64,
    cfg: &CorpusConfig,
) -> Result<Trajectory> {
    let dx = cfg.dx();
    let dt = cfg.sim_dt();
    let gamma = alpha * dt / (dx * dx);
    let mut frames = Vec::with_capacity(cfg.frames + 1);
    frames.push(h0);
    for _ in 0..cfg.frames {
        let mut cur = frames.last().unwrap().clone();
        for _ in 0..cfg.substeps {
            cur = ftcs_step(&cur, gamma, cfg.boundary);
        }
        if !cur.is_finite() {
            return Err(TensorError::NonFinite("corpus generation"));
        }
        frames.push(cur);
    }
    Ok(Trajectory {
        frames,
        alpha,
        dt: dt * cfg.substeps as f64,
        dx,
        boundary: cfg.boundary,
        rep,
    })
}

/// One scalar heat trajectory; deterministic in (config seed, index), so
/// corpus generation parallelises across trajectories without changing the
/// result.
pub fn generate_trajectory(cfg: &CorpusConfig, idx: usize) -> Result<Trajectory> {
    let mut rng = per_traj_rng(cfg.seed, idx);
    let alpha = rng.gen_range(cfg.alpha_min..=cfg.alpha_max);
    let h0 = init_field(cfg.init, idx, cfg.grid, &mut rng);
    record_trajectory(h0, ChannelRepKind::Scalar, alpha, cfg)
}

/// Reproducible scalar heat corpus: initial conditions from the configured
/// family, diffusivity drawn per trajectory, evolved by FTCS.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Trajectory>> {
    if cfg.n_traj == 0 {
        return Err(TensorError::Invalid("n_traj must be positive".into()));
    }
    (0..cfg.n_traj).map(|i| generate_trajectory(cfg, i)).collect()
}

/// One synthetic velocity trajectory; see [`generate_vector_corpus`].
pub fn generate_vector_trajectory(cfg: &CorpusConfig, idx: usize) -> Result<Trajectory> {
    let mut rng = per_traj_rng(cfg.seed ^ 0x5EED_F1E1D, idx);
    let alpha = rng.gen_range(cfg.alpha_min..=cfg.alpha_max);
    let psi0 = init_field(InitFamily::SmoothNoise, idx, cfg.grid, &mut rng);
    let psi = record_trajectory(psi0, ChannelRepKind::Scalar, alpha, cfg)?;
    let frames = psi.frames.iter().map(|p| streamfunction_to_velocity(p, cfg.dx())).collect();
    Ok(Trajectory {
        frames,
        alpha,
        dt: psi.dt,
        dx: psi.dx,
        boundary: cfg.boundary,
        rep: ChannelRepKind::Vector2,
    })
}

/// Divergence-free synthetic velocity corpus: a random streamfunction is
/// smoothed by heat diffusion, and each frame stores its curl
/// (u, v) = (d psi / dy, -d psi / dx). A stand-in for real flow data when
/// testing the uniform-motion and vector-field paths.
pub fn generate_vector_corpus(cfg: &CorpusConfig) -> Result<Vec<Trajectory>> {
    if cfg.n_traj == 0 {
        return Err(TensorError::Invalid("n_traj must be positive".into()));
    }
    (0..cfg.n_traj).map(|i| generate_vector_trajectory(cfg, i)).collect()
}

/// (u, v) = (d psi/dy, -d psi/dx) by periodic central differences; exactly
/// divergence-free under the same discrete operators.
pub fn streamfunction_to_velocity(psi: &Tensor, dx: f64) -> Tensor {
    let (h, w) = (psi.shape()[1], psi.shape()[2]);
    let p = psi.data();
    let mut out = Tensor::zeros(&[2, h, w]);
    for r in 0..h {
        for c in 0..w {
            let dpdy = (p[(r + 1) % h * w + c] - p[(r + h - 1) % h * w + c]) / (2.0 * dx);
            let dpdx = (p[r * w + (c + 1) % w] - p[r * w + (c + w - 1) % w]) / (2.0 * dx);
            out.set(&[0, r, c], dpdy);
            out.set(&[1, r, c], -dpdx);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{act_on_field, GroupElement};

    fn field(t: Tensor) -> Field {
        Field::new(t, ChannelRepKind::Scalar, 1.0 / 32.0, 1e-4).unwrap()
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let h0 = field(Tensor::full(&[1, 16, 16], 3.7));
        for boundary in [Boundary::Periodic, Boundary::Insulated] {
            let traj = simulate_heat(&h0, 1.0, 1e-5, 1.0 / 32.0, 20, boundary).unwrap();
            for f in &traj.frames {
                assert_eq!(f.data(), h0.data.data());
            }
        }
    }

    #[test]
    fn linearity_of_the_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h0 = Tensor::uniform(&[1, 12, 12], -1.0, 1.0, &mut rng);
        let a = 3.25; // exactly representable scale
        let t1 = simulate_heat(&field(h0.clone()), 1.0, 1e-5, 1.0 / 32.0, 30, Boundary::Periodic)
            .unwrap();
        let t2 = simulate_heat(&field(h0.map(|v| a * v)), 1.0, 1e-5, 1.0 / 32.0, 30, Boundary::Periodic)
            .unwrap();
        for (f1, f2) in t1.frames.iter().zip(&t2.frames) {
            for (u, v) in f1.data().iter().zip(f2.data()) {
                assert!((a * u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn stability_bound_enforced() {
        let h0 = field(Tensor::zeros(&[1, 8, 8]));
        let err = simulate_heat(&h0, 4.0, 1.0, 1.0 / 8.0, 1, Boundary::Periodic).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("exceeds 0.25"), "{}", msg);
    }

    #[test]
    fn mass_conserved_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h0 = Tensor::uniform(&[1, 16, 16], 0.0, 2.0, &mut rng);
        let mass0: f64 = h0.data().iter().sum();
        let traj = simulate_heat(&field(h0), 1.0, 2e-5, 1.0 / 32.0, 1000, Boundary::Periodic).unwrap();
        for f in &traj.frames {
            let mass: f64 = f.data().iter().sum();
            assert!((mass - mass0).abs() < 1e-10 * mass0.abs().max(1.0));
        }
    }

    #[test]
    fn maximum_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h0 = Tensor::uniform(&[1, 16, 16], 0.0, 2.0, &mut rng);
        let traj = simulate_heat(&field(h0), 1.0, 2e-5, 1.0 / 32.0, 200, Boundary::Periodic).unwrap();
        let mut prev_max = f64::INFINITY;
        let mut prev_min = f64::NEG_INFINITY;
        for f in &traj.frames {
            let mx = f.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mn = f.data().iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(mx <= prev_max + 1e-15);
            assert!(mn >= prev_min - 1e-15);
            prev_max = mx;
            prev_min = mn;
        }
    }

    #[test]
    fn heat_kernel_analytic_oracle() {
        // periodic Gaussian bump vs the spectral solution at t = 0.01
        let n = 64;
        let dx = 1.0 / n as f64;
        let alpha = 1.0;
        let h0 = Tensor::from_fn(&[1, n, n], |idx| {
            let dy = (idx[1] as f64 - 32.0) * dx;
            let dc = (idx[2] as f64 - 32.0) * dx;
            (-(dy * dy + dc * dc) / (2.0 * 0.05f64.powi(2))).exp()
        });
        let dt = 0.2 * dx * dx / alpha;
        let steps = (0.01 / dt).round() as usize;
        let t_final = steps as f64 * dt;
        let traj = simulate_heat(
            &Field::new(h0.clone(), ChannelRepKind::Scalar, dx, dt).unwrap(),
            alpha,
            dt,
            dx,
            steps,
            Boundary::Periodic,
        )
        .unwrap();

        // spectral oracle via a row-column DFT
        let oracle = {
            let nn = n as f64;
            // forward DFT rows then columns
            let mut re = h0.data().to_vec();
            let mut im = vec![0.0; n * n];
            let dft_axis = |re: &mut Vec<f64>, im: &mut Vec<f64>, rows: bool, inverse: bool| {
                let sign = if inverse { 1.0 } else { -1.0 };
                let mut nre = vec![0.0; n * n];
                let mut nim = vec![0.0; n * n];
                for a in 0..n {
                    for kb in 0..n {
                        let (mut sr, mut si) = (0.0, 0.0);
                        for b in 0..n {
                            let idx = if rows { a * n + b } else { b * n + a };
                            let ang = sign * std::f64::consts::TAU * (kb * b) as f64 / nn;
                            let (s, c) = ang.sin_cos();
                            sr += re[idx] * c - im[idx] * s;
                            si += re[idx] * s + im[idx] * c;
                        }
                        let idx = if rows { a * n + kb } else { kb * n + a };
                        nre[idx] = sr;
                        nim[idx] = si;
                    }
                }
                *re = nre;
                *im = nim;
            };
            dft_axis(&mut re, &mut im, true, false);
            dft_axis(&mut re, &mut im, false, false);
            // decay each mode by exp(-alpha |k|^2 t)
            for ky in 0..n {
                for kx in 0..n {
                    let my = if ky > n / 2 { ky as f64 - nn } else { ky as f64 };
                    let mx = if kx > n / 2 { kx as f64 - nn } else { kx as f64 };
                    let k2 = (std::f64::consts::TAU * my).powi(2) + (std::f64::consts::TAU * mx).powi(2);
                    let decay = (-alpha * k2 * t_final).exp();
                    re[ky * n + kx] *= decay;
                    im[ky * n + kx] *= decay;
                }
            }
            dft_axis(&mut re, &mut im, true, true);
            dft_axis(&mut re, &mut im, false, true);
            re.iter().map(|v| v / (nn * nn)).collect::<Vec<f64>>()
        };

        let last = traj.frames.last().unwrap();
        let rmse = (last
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (n * n) as f64)
            .sqrt();
        assert!(rmse < 1e-3, "heat kernel RMSE {}", rmse);
    }

    #[test]
    fn rotation_commutes_with_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h0 = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let rot = GroupElement::rotate(1, 4);
        let f0 = field(h0);
        let rotated_first = act_on_field(&rot, &f0).unwrap();
        let t1 = simulate_heat(&rotated_first, 1.0, 2e-5, 1.0 / 32.0, 50, Boundary::Periodic).unwrap();
        let t2 = simulate_heat(&f0, 1.0, 2e-5, 1.0 / 32.0, 50, Boundary::Periodic).unwrap();
        for (f1, f2) in t1.frames.iter().zip(&t2.frames) {
            let rotated = act_on_field(
                &rot,
                &Field::new(f2.clone(), ChannelRepKind::Scalar, 1.0, 1.0).unwrap(),
            )
            .unwrap();
            assert_eq!(f1.data(), rotated.data.data());
        }
    }

    #[test]
    fn physical_scaling_consistency() {
        // simulate at (dx, dt) vs simulate the rescaled initial condition
        // at (dx/2, dt/4): frames agree after resampling, 1e-2 RMSE
        let n = 32;
        let dx = 1.0 / n as f64;
        let lam = 2.0;
        let h0 = Tensor::from_fn(&[1, n, n], |idx| {
            let y = idx[1] as f64 / n as f64;
            let x = idx[2] as f64 / n as f64;
            (std::f64::consts::TAU * y).sin() * (std::f64::consts::TAU * x).cos()
        });
        let f0 = Field::new(h0, ChannelRepKind::Scalar, dx, 1.0).unwrap();
        let alpha = 1.0;
        let dt = 0.05 * dx * dx / alpha;
        // the rescaled run advances lambda^2 faster in base time: frame k of
        // the rescaled trajectory lines up with base frame lambda^2 k
        let l2 = (lam * lam) as usize;
        let steps = 15;
        let base = simulate_heat(&f0, alpha, dt, dx, steps * l2, Boundary::Periodic).unwrap();

        let scaled0 = act_on_field(&GroupElement::Scale { lambda: lam }, &f0).unwrap();
        let scaled = simulate_heat(
            &scaled0,
            alpha,
            dt / (lam * lam),
            dx / lam,
            steps,
            Boundary::Periodic,
        )
        .unwrap();

        let mut worst = 0.0f64;
        for k in 1..=steps {
            let fs = &scaled.frames[k];
            let fb = &base.frames[l2 * k];
            let resampled = act_on_field(
                &GroupElement::Scale { lambda: lam },
                &Field::new(fb.clone(), ChannelRepKind::Scalar, dx, 1.0).unwrap(),
            )
            .unwrap();
            let rmse = (fs
                .data()
                .iter()
                .zip(resampled.data.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / fs.numel() as f64)
                .sqrt();
            worst = worst.max(rmse);
        }
        assert!(worst < 1e-2, "scaling-law consistency RMSE {}", worst);
    }

    #[test]
    fn corpus_deterministic_and_disk_physics() {
        let cfg = CorpusConfig {
            n_traj: 3,
            grid: 16,
            frames: 20,
            substeps: 2,
            alpha_min: 4.0,
            alpha_max: 4.0,
            init: InitFamily::HotDisks,
            boundary: Boundary::Periodic,
            seed: 9,
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus_hash(&a), corpus_hash(&b));

        for traj in &a {
            let mass0: f64 = traj.frames[0].data().iter().sum();
            let mut prev_max = f64::INFINITY;
            for f in &traj.frames {
                let mass: f64 = f.data().iter().sum();
                assert!((mass - mass0).abs() < 1e-10 * mass0.max(1.0));
                let mx = f.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(mx <= prev_max + 1e-15);
                prev_max = mx;
            }
        }
    }

    #[test]
    fn vector_corpus_divergence_free() {
        let cfg = CorpusConfig { n_traj: 2, grid: 16, frames: 5, ..Default::default() };
        let corpus = generate_vector_corpus(&cfg).unwrap();
        for traj in &corpus {
            assert_eq!(traj.rep, ChannelRepKind::Vector2);
            for f in &traj.frames {
                let (h, w) = (16, 16);
                for r in 0..h {
                    for c in 0..w {
                        let dudx = (f.at(&[0, r, (c + 1) % w]) - f.at(&[0, r, (c + w - 1) % w]))
                            / (2.0 * traj.dx);
                        let dvdy = (f.at(&[1, (r + 1) % h, c]) - f.at(&[1, (r + h - 1) % h, c]))
                            / (2.0 * traj.dx);
                        assert!((dudx + dvdy).abs() < 1e-9, "divergence {}", dudx + dvdy);
                    }
                }
            }
        }
    }

    #[test]
    fn vector_corpus_step_is_um_equivariant() {
        // the frame map is a constant-preserving linear smoother, so adding
        // a constant to frame t adds the same constant to frame t+1
        let cfg = CorpusConfig { n_traj: 1, grid: 16, frames: 3, ..Default::default() };
        let traj = &generate_vector_corpus(&cfg).unwrap()[0];
        let gamma = traj.alpha * (traj.dt / cfg.substeps as f64) / (traj.dx * traj.dx);
        let mut stepped = traj.frames[0].map(|v| v + 0.5);
        for _ in 0..cfg.substeps {
            stepped = ftcs_step(&stepped, gamma, Boundary::Periodic);
        }
        for (a, b) in stepped.data().iter().zip(traj.frames[1].data()) {
            assert!((a - (b + 0.5)).abs() < 1e-10);
        }
    }
}

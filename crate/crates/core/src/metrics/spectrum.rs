//! Turbulence kinetic energy spectrum: time-mean fluctuations, 2D DFT,
//! radial binning by rounded |k|, normalised so the binned energies sum to
//! the mean turbulent kinetic energy (Parseval).

use crate::tensor::{Result, Tensor, TensorError};

/// Radix-2 iterative FFT; lengths that are not powers of two fall back to
/// the direct transform.
fn fft_1d(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if !n.is_power_of_two() {
        let (r, i) = dft_1d_direct(re, im, inverse);
        re.copy_from_slice(&r);
        im.copy_from_slice(&i);
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (ws, wc) = ang.sin_cos();
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wc - ci * ws;
                ci = cr * ws + ci * wc;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Direct O(n^2) DFT, the fallback and the oracle the FFT is tested
/// against.
pub(crate) fn dft_1d_direct(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut or = vec![0.0; n];
    let mut oi = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            let ang = sign * std::f64::consts::TAU * (k * t) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        or[k] = sr;
        oi[k] = si;
    }
    (or, oi)
}

/// Unnormalised forward 2D DFT by rows then columns.
pub(crate) fn fft_2d(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = plane.to_vec();
    let mut im = vec![0.0; h * w];
    let mut row_r = vec![0.0; w];
    let mut row_i = vec![0.0; w];
    for r in 0..h {
        row_r.copy_from_slice(&re[r * w..(r + 1) * w]);
        row_i.copy_from_slice(&im[r * w..(r + 1) * w]);
        fft_1d(&mut row_r, &mut row_i, false);
        re[r * w..(r + 1) * w].copy_from_slice(&row_r);
        im[r * w..(r + 1) * w].copy_from_slice(&row_i);
    }
    let mut col_r = vec![0.0; h];
    let mut col_i = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_r[r] = re[r * w + c];
            col_i[r] = im[r * w + c];
        }
        fft_1d(&mut col_r, &mut col_i, false);
        for r in 0..h {
            re[r * w + c] = col_r[r];
            im[r * w + c] = col_i[r];
        }
    }
    (re, im)
}

/// Energy per radial wavenumber bin.
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    /// Bin centres 0, 1, ..., covering up to the grid's corner wavenumber.
    pub k_bins: Vec<f64>,
    pub energy: Vec<f64>,
    /// ln(E + 1e-12); the floor keeps dead bins finite.
    pub log_energy: Vec<f64>,
}

const LOG_FLOOR: f64 = 1e-12;

/// Kinetic energy spectrum of a field sequence. Fluctuations are taken
/// about the per-pixel time mean, so at least two frames are required.
/// Scalar sequences are treated as (u, 0).
pub fn energy_spectrum(frames: &[Tensor]) -> Result<SpectrumResult> {
    if frames.len() < 2 {
        return Err(TensorError::Invalid(
            "energy spectrum needs >= 2 frames to form fluctuations".into(),
        ));
    }
    let sh = frames[0].shape().to_vec();
    if sh.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!("frames want [C,H,W], got {:?}", sh)));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if !matches!(c, 1 | 2) {
        return Err(TensorError::ShapeMismatch(format!("1 or 2 channels, got {}", c)));
    }
    let t = frames.len() as f64;
    let plane = h * w;

    // per-pixel time mean for each channel
    let mut mean = vec![0.0; c * plane];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f.data()) {
            *m += v / t;
        }
    }

    let kmax = (((h / 2) as f64).hypot((w / 2) as f64)).round() as usize;
    let mut energy = vec![0.0; kmax + 1];
    let norm = 1.0 / (t * (plane as f64) * (plane as f64) * 2.0);
    let mut fluct = vec![0.0; plane];
    for f in frames {
        for ch in 0..c {
            for i in 0..plane {
                fluct[i] = f.data()[ch * plane + i] - mean[ch * plane + i];
            }
            let (re, im) = fft_2d(&fluct, h, w);
            for ky in 0..h {
                for kx in 0..w {
                    let my = if ky > h / 2 { ky as f64 - h as f64 } else { ky as f64 };
                    let mx = if kx > w / 2 { kx as f64 - w as f64 } else { kx as f64 };
                    let bin = my.hypot(mx).round() as usize;
                    let p = re[ky * w + kx].powi(2) + im[ky * w + kx].powi(2);
                    energy[bin.min(kmax)] += p * norm;
                }
            }
        }
    }
    let log_energy = energy.iter().map(|&e| (e + LOG_FLOOR).ln()).collect();
    Ok(SpectrumResult {
        k_bins: (0..=kmax).map(|k| k as f64).collect(),
        energy,
        log_energy,
    })
}

/// Energy Spectrum Error: RMSE between the log spectra of two sequences.
pub fn ese(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    let sp = energy_spectrum(pred)?;
    let st = energy_spectrum(truth)?;
    let n = sp.log_energy.len().min(st.log_energy.len());
    let sum: f64 = sp.log_energy[..n]
        .iter()
        .zip(&st.log_energy[..n])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fft_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [8usize, 16, 12] {
            let re: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let im = vec![0.0; n];
            let (dr, di) = dft_1d_direct(&re, &im, false);
            let mut fr = re.clone();
            let mut fi = im.clone();
            fft_1d(&mut fr, &mut fi, false);
            for i in 0..n {
                assert!((fr[i] - dr[i]).abs() < 1e-10);
                assert!((fi[i] - di[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_frames_zero_spectrum() {
        let f = Tensor::full(&[2, 8, 8], 1.3);
        let s = energy_spectrum(&[f.clone(), f]).unwrap();
        assert!(s.energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_frame_rejected() {
        let f = Tensor::zeros(&[2, 8, 8]);
        assert!(energy_spectrum(&[f]).is_err());
    }

    #[test]
    fn single_mode_lands_in_its_bin() {
        // u' = +-cos(2 pi 3 x / W): all energy in bin k = 3
        let h = 16;
        let mode = Tensor::from_fn(&[1, h, h], |idx| {
            (std::f64::consts::TAU * 3.0 * idx[2] as f64 / h as f64).cos()
        });
        let frames = vec![mode.clone(), mode.map(|v| -v)];
        let s = energy_spectrum(&frames).unwrap();
        for (k, &e) in s.energy.iter().enumerate() {
            if k == 3 {
                assert!(e > 0.0);
            } else {
                assert!(e.abs() < 1e-12, "leak into bin {}: {}", k, e);
            }
        }
        // Parseval: sum E = mean over frames and pixels of u'^2 / 2
        let tke: f64 = frames
            .iter()
            .map(|f| f.data().iter().map(|v| v * v).sum::<f64>() / (h * h) as f64)
            .sum::<f64>()
            / frames.len() as f64
            / 2.0;
        let total: f64 = s.energy.iter().sum();
        assert!((total - tke).abs() < 1e-10, "{} vs {}", total, tke);
    }

    #[test]
    fn parseval_identity_random_vector_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Tensor> =
            (0..5).map(|_| Tensor::uniform(&[2, 16, 16], -1.0, 1.0, &mut rng)).collect();
        let s = energy_spectrum(&frames).unwrap();
        // fluctuations about the time mean
        let t = frames.len() as f64;
        let mut mean = vec![0.0; 2 * 256];
        for f in &frames {
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / t;
            }
        }
        let tke: f64 = frames
            .iter()
            .map(|f| {
                f.data()
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
                    / 256.0
            })
            .sum::<f64>()
            / t
            / 2.0;
        let total: f64 = s.energy.iter().sum();
        assert!((total - tke).abs() < 1e-10, "{} vs {}", total, tke);
    }

    #[test]
    fn ese_zero_on_self_and_one_on_e_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Tensor> =
            (0..3).map(|_| Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng)).collect();
        assert_eq!(ese(&frames, &frames).unwrap(), 0.0);
        // scaling every frame by sqrt(e) scales energies by e, shifting all
        // populated log bins by exactly 1
        let scaled: Vec<Tensor> =
            frames.iter().map(|f| f.map(|v| v * (1.0f64).exp().sqrt())).collect();
        let a = energy_spectrum(&frames).unwrap();
        let b = energy_spectrum(&scaled).unwrap();
        for (x, y) in a.energy.iter().zip(&b.energy) {
            if *x > 1e-9 {
                let shift = (y / x).ln();
                assert!((shift - 1.0).abs() < 1e-9);
            }
        }
    }
}

//! Prediction-quality and physics-consistency metrics: RMSE, energy
//! spectrum error, thermal energy loss, measured equivariance error and the
//! transformed-test-error bound.

mod spectrum;

pub use spectrum::{energy_spectrum, ese, SpectrumResult};

use std::io::Write;
use std::path::Path;

use crate::groups::{act_on_field, ChannelRepKind, Field, GroupElement};
use crate::tensor::{Result, Tensor, TensorError};

/// Root mean square error over all pixels, channels and frames.
pub fn rmse(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "frame shapes {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.numel();
    }
    Ok((sum / count as f64).sqrt())
}

pub fn rmse_pair(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    rmse(std::slice::from_ref(pred), std::slice::from_ref(truth))
}

/// Mean over frames of |sum(pred) - sum(truth)|: the L1 loss of thermal
/// energy. Scalar fields only.
pub fn thermal_energy_loss(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TensorError::ShapeMismatch("frame count mismatch".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape()[0] != 1 || t.shape()[0] != 1 {
            return Err(TensorError::Invalid(
                "thermal energy is defined for scalar temperature fields".into(),
            ));
        }
        let sp: f64 = p.data().iter().sum();
        let st: f64 = t.data().iter().sum();
        total += (sp - st).abs();
    }
    Ok(total / pred.len() as f64)
}

/// Measured equivariance error EE = |T(f(x)) - f(T(x))| in the RMSE norm.
///
/// `forward` maps an input window tensor to an output field tensor;
/// `out_rep` states how the output's channels transform.
pub fn equivariance_error(
    forward: impl Fn(&Tensor) -> Result<Tensor>,
    g: &GroupElement,
    x: &Field,
    out_rep: ChannelRepKind,
) -> Result<f64> {
    let fx = forward(&x.data)?;
    let t_fx = act_on_field(g, &Field::new(fx, out_rep, x.dx, x.dt)?)?;
    let tx = act_on_field(g, x)?;
    let f_tx = forward(&tx.data)?;
    rmse_pair(&t_fx.data, &f_tx)
}

/// All quantities of the transformed-test-error bound
/// TTE <= |T| TE + EE (triangle inequality; |T| is the transform's RMSE
/// operator norm).
#[derive(Debug, Clone, Copy)]
pub struct TteReport {
    pub tte: f64,
    pub te: f64,
    pub ee: f64,
    /// None when the transform has no RMSE operator norm (interpolating
    /// rescaling is not an isometry); the bound is then not applicable.
    pub norm_t: Option<f64>,
    pub holds: Option<bool>,
}

const TTE_SLACK: f64 = 1e-9;

/// RMSE operator norm of a transform: 1 for the isometries (translation,
/// rotation, uniform motion), lambda for magnitude scaling.
pub fn transform_norm(g: &GroupElement) -> Option<f64> {
    match g {
        GroupElement::Translate { .. }
        | GroupElement::Rotate { .. }
        | GroupElement::UniformMotion { .. } => Some(1.0),
        GroupElement::Magnitude { lambda } => Some(*lambda),
        GroupElement::Scale { .. } => None,
    }
}

/// Computes TTE, TE, EE and whether the bound holds (up to 1e-9 slack).
pub fn check_tte_bound(
    forward: impl Fn(&Tensor) -> Result<Tensor>,
    g: &GroupElement,
    x: &Field,
    y_true: &Field,
) -> Result<TteReport> {
    let fx = forward(&x.data)?;
    let te = rmse_pair(&y_true.data, &fx)?;
    let tx = act_on_field(g, x)?;
    let f_tx = forward(&tx.data)?;
    let t_y = act_on_field(g, y_true)?;
    let tte = rmse_pair(&t_y.data, &f_tx)?;
    let t_fx = act_on_field(g, &Field::new(fx, y_true.rep, y_true.dx, y_true.dt)?)?;
    let ee = rmse_pair(&t_fx.data, &f_tx)?;
    let norm_t = transform_norm(g);
    let holds = norm_t.map(|n| tte <= n * te + ee + TTE_SLACK);
    Ok(TteReport { tte, te, ee, norm_t, holds })
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub transform: String,
    pub step: usize,
    pub value: f64,
    pub seed: u64,
}

/// Plain CSV with a fixed header and deterministic float formatting, so
/// identical runs produce byte-identical files.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "metric,split,transform,step,value,seed")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.12e},{}",
            r.metric, r.split, r.transform, r.step, r.value, r.seed
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_examples() {
        let a = Tensor::full(&[1, 4, 4], 1.0);
        let b = Tensor::full(&[1, 4, 4], 2.0);
        assert_eq!(rmse_pair(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse_pair(&a, &b).unwrap(), 1.0);
        // loop oracle on random data
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let t = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..p.numel() {
            acc += (p.data()[i] - t.data()[i]).powi(2);
        }
        let want = (acc / p.numel() as f64).sqrt();
        assert!((rmse_pair(&p, &t).unwrap() - want).abs() < 1e-12);
        // symmetry
        assert_eq!(rmse_pair(&p, &t).unwrap(), rmse_pair(&t, &p).unwrap());
    }

    #[test]
    fn thermal_energy_examples() {
        let a = Tensor::full(&[1, 4, 4], 1.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(thermal_energy_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        assert_eq!(thermal_energy_loss(&[b], &[a]).unwrap(), 16.0);
        let vec = Tensor::zeros(&[2, 4, 4]);
        assert!(thermal_energy_loss(&[vec.clone()], &[vec]).is_err());
    }

    #[test]
    fn identity_model_has_zero_ee() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Field::new(
            Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng),
            ChannelRepKind::Vector2,
            1.0,
            1.0,
        )
        .unwrap();
        for g in [
            GroupElement::rotate(1, 4),
            GroupElement::Magnitude { lambda: 1.7 },
            GroupElement::UniformMotion { cu: 0.3, cv: -0.2 },
            GroupElement::Translate { dy: 2, dx: 5 },
        ] {
            let e =
                equivariance_error(|t| Ok(t.clone()), &g, &x, ChannelRepKind::Vector2).unwrap();
            assert!(e < 1e-12, "identity EE {} under {:?}", e, g);
        }
    }

    #[test]
    fn plain_cnn_rotation_ee_is_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::uniform(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
        let x = Field::new(
            Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng),
            ChannelRepKind::Vector2,
            1.0,
            1.0,
        )
        .unwrap();
        let forward = |t: &Tensor| -> Result<Tensor> {
            let mut tape = crate::tensor::Tape::new();
            let shape = t.shape().to_vec();
            let xi = tape.constant(t.reshaped(&[1, shape[0], shape[1], shape[2]])?);
            let ki = tape.constant(k.clone());
            let y = tape.conv2d(xi, ki, Padding::Periodic, 1)?;
            let y = tape.relu(y)?;
            tape.value(y).reshaped(&[2, shape[1], shape[2]])
        };
        let e = equivariance_error(&forward, &GroupElement::rotate(1, 4), &x, ChannelRepKind::Vector2)
            .unwrap();
        assert!(e > 0.01, "plain CNN rotation EE unexpectedly small: {}", e);
    }

    #[test]
    fn tte_bound_holds_and_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = Tensor::uniform(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
        let forward = |t: &Tensor| -> Result<Tensor> {
            let mut tape = crate::tensor::Tape::new();
            let shape = t.shape().to_vec();
            let xi = tape.constant(t.reshaped(&[1, shape[0], shape[1], shape[2]])?);
            let ki = tape.constant(k.clone());
            let y = tape.conv2d(xi, ki, Padding::Periodic, 1)?;
            let y = tape.relu(y)?;
            tape.value(y).reshaped(&[2, shape[1], shape[2]])
        };
        let mk = |rng: &mut ChaCha8Rng| {
            Field::new(
                Tensor::uniform(&[2, 8, 8], -1.0, 1.0, rng),
                ChannelRepKind::Vector2,
                1.0,
                1.0,
            )
            .unwrap()
        };
        // the bound is a theorem: it holds on every random triple
        for i in 0..100 {
            let x = mk(&mut rng);
            let y = mk(&mut rng);
            let g = match i % 3 {
                0 => GroupElement::rotate(rand::Rng::gen_range(&mut rng, 0..4), 4),
                1 => GroupElement::Magnitude { lambda: rand::Rng::gen_range(&mut rng, 0.1..10.0) },
                _ => GroupElement::UniformMotion {
                    cu: rand::Rng::gen_range(&mut rng, -1.0..1.0),
                    cv: rand::Rng::gen_range(&mut rng, -1.0..1.0),
                },
            };
            let rep = check_tte_bound(&forward, &g, &x, &y).unwrap();
            assert_eq!(rep.holds, Some(true), "bound violated: {:?} under {:?}", rep, g);
        }
        // T = identity: TTE equals TE exactly
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let rep =
            check_tte_bound(&forward, &GroupElement::Translate { dy: 0, dx: 0 }, &x, &y).unwrap();
        assert_eq!(rep.tte, rep.te);
        // scale has no usable norm
        let rep =
            check_tte_bound(&forward, &GroupElement::Scale { lambda: 1.5 }, &x, &y).unwrap();
        assert!(rep.norm_t.is_none() && rep.holds.is_none());
    }

    #[test]
    fn csv_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![MetricRow {
            metric: "rmse".into(),
            split: "test".into(),
            transform: "Mag".into(),
            step: 3,
            value: 0.12345,
            seed: 9,
        }];
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        write_metrics_csv(&p1, &rows).unwrap();
        write_metrics_csv(&p2, &rows).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("metric,split,transform,step,value,seed\n"));
        assert!(text.contains("rmse,test,Mag,3,"));
    }
}

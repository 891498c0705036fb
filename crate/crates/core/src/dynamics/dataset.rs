//! Rolling-window datasets over trajectories, contiguous 60/20/20 time
//! splits, the four transformed test sets, and the EQDY trajectory file
//! format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Boundary, Trajectory};
use crate::groups::{act_on_field, ChannelRepKind, Field, GroupElement};
use crate::models::Sample;
use crate::tensor::{Result, Tensor, TensorError};

/// Window index ranges of the three contiguous splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub channels: usize,
    pub grid: usize,
    pub dx: f64,
    pub dt: f64,
    pub rep: ChannelRepKind,
    /// Hash of the generation config, carried through from the corpus.
    pub provenance: u64,
}

/// Windowed samples plus split bookkeeping. Split ranges index `samples`;
/// windows never cross a split boundary because each split is windowed
/// separately per trajectory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: SplitRanges,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[self.split.train.0..self.split.train.1]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.split.val.0..self.split.val.1]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.split.test.0..self.split.test.1]
    }
}

/// Stacks `frames[start .. start + l]` into one [l*C, H, W] window tensor.
fn stack_window(frames: &[Tensor], start: usize, l: usize) -> Tensor {
    let sh = frames[0].shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut data = Vec::with_capacity(l * c * h * w);
    for f in &frames[start..start + l] {
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![l * c, h, w], data).expect("window assembly")
}

/// Rolling windows of l inputs and `horizon` targets at the given stride.
pub fn rolling_windows(
    traj: &Trajectory,
    l: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if l == 0 || horizon == 0 || stride == 0 {
        return Err(TensorError::Invalid("l, horizon and stride must be positive".into()));
    }
    let t = traj.frames.len();
    if l + horizon > t {
        return Err(TensorError::Invalid(format!(
            "trajectory of {} frames too short for l = {} + horizon = {}",
            t, l, horizon
        )));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + l + horizon <= t {
        out.push(Sample {
            window: stack_window(&traj.frames, start, l),
            targets: traj.frames[start + l..start + l + horizon].to_vec(),
        });
        start += stride;
    }
    Ok(out)
}

/// Builds the 60/20/20 dataset: each trajectory's timeline is cut into
/// contiguous train/val/test frame ranges and windowed independently.
pub fn build_dataset(
    trajs: &[Trajectory],
    l: usize,
    horizon: usize,
    stride: usize,
    provenance: u64,
) -> Result<Dataset> {
    if trajs.is_empty() {
        return Err(TensorError::Invalid("no trajectories".into()));
    }
    let t = trajs[0].frames.len();
    let n60 = (t as f64 * 0.6).floor() as usize;
    let n80 = (t as f64 * 0.8).floor() as usize;
    let need = l + horizon;
    if n60 < need || n80 - n60 < need || t - n80 < need {
        return Err(TensorError::Invalid(format!(
            "{} frames split 60/20/20 leaves a range shorter than l + horizon = {}",
            t, need
        )));
    }

    let mut samples = Vec::new();
    let mut windows_of = |range: std::ops::Range<usize>| -> Result<usize> {
        let start_idx = samples.len();
        for traj in trajs {
            let sub = Trajectory {
                frames: traj.frames[range.clone()].to_vec(),
                alpha: traj.alpha,
                dt: traj.dt,
                dx: traj.dx,
                boundary: traj.boundary,
                rep: traj.rep,
            };
            samples.extend(rolling_windows(&sub, l, horizon, stride)?);
        }
        Ok(start_idx)
    };
    let train_start = windows_of(0..n60)?;
    let val_start = windows_of(n60..n80)?;
    let test_start = windows_of(n80..t)?;
    let end = samples.len();

    let meta = DatasetMeta {
        channels: trajs[0].channels(),
        grid: trajs[0].grid().0,
        dx: trajs[0].dx,
        dt: trajs[0].dt,
        rep: trajs[0].rep,
        provenance,
    };
    Ok(Dataset {
        samples,
        split: SplitRanges {
            train: (train_start, val_start),
            val: (val_start, test_start),
            test: (test_start, end),
        },
        meta,
    })
}

/// The four transformed test sets mirroring the transformed-evaluation
/// protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// Random constant velocity from U(-1, 1)^2 (vector data only).
    UniformMotion,
    /// Random magnitude factor from U(0, 2).
    Magnitude,
    /// Random quarter-turn multiples.
    Rotation,
    /// Random rescaling with lambda from U(1/5, 2).
    Scale,
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::UniformMotion => "UM",
            TransformKind::Magnitude => "Mag",
            TransformKind::Rotation => "Rot",
            TransformKind::Scale => "Scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "UM" | "um" => Some(TransformKind::UniformMotion),
            "Mag" | "mag" => Some(TransformKind::Magnitude),
            "Rot" | "rot" => Some(TransformKind::Rotation),
            "Scale" | "scale" => Some(TransformKind::Scale),
            _ => None,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> GroupElement {
        match self {
            TransformKind::UniformMotion => GroupElement::UniformMotion {
                cu: rng.gen_range(-1.0..1.0),
                cv: rng.gen_range(-1.0..1.0),
            },
            TransformKind::Magnitude => GroupElement::Magnitude { lambda: rng.gen_range(0.0f64..2.0).max(1e-9) },
            TransformKind::Rotation => GroupElement::rotate(rng.gen_range(0..4), 4),
            TransformKind::Scale => GroupElement::Scale { lambda: rng.gen_range(0.2..2.0) },
        }
    }
}

/// Applies one group element to every frame of a window and its targets.
pub fn transform_sample(
    sample: &Sample,
    g: &GroupElement,
    rep: ChannelRepKind,
    dx: f64,
    dt: f64,
) -> Result<Sample> {
    let act = |t: &Tensor| -> Result<Tensor> {
        let f = Field::new(t.clone(), rep, dx, dt)?;
        Ok(act_on_field(g, &f)?.data)
    };
    Ok(Sample {
        window: act(&sample.window)?,
        targets: sample.targets.iter().map(|t| act(t)).collect::<Result<Vec<_>>>()?,
    })
}

/// The transformed test set: the same random transform is applied to every
/// frame of a given window and its targets (a symmetry acts on the whole
/// trajectory), a fresh transform per window.
pub fn make_transformed_testset(
    dataset: &Dataset,
    kind: TransformKind,
    seed: u64,
) -> Result<Dataset> {
    if kind == TransformKind::UniformMotion && dataset.meta.rep != ChannelRepKind::Vector2 {
        return Err(TensorError::Invalid(
            "uniform-motion test sets need vector data".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(dataset.test().len());
    for s in dataset.test() {
        let g = kind.sample(&mut rng);
        samples.push(transform_sample(s, &g, dataset.meta.rep, dataset.meta.dx, dataset.meta.dt)?);
    }
    let n = samples.len();
    Ok(Dataset {
        samples,
        split: SplitRanges { train: (0, 0), val: (0, 0), test: (0, n) },
        meta: dataset.meta,
    })
}

// ---- EQDY trajectory files -------------------------------------------------

const MAGIC: &[u8; 4] = b"EQDY";
const VERSION: u32 = 1;

/// 64-bit FNV-1a, used for provenance hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Hash of a corpus' frame data; identical corpora hash identically.
pub fn corpus_hash(trajs: &[Trajectory]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in trajs {
        for f in &t.frames {
            for v in f.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
    }
    h
}

/// Writes one trajectory: magic, version, {C,H,W,T}, dx/dt/alpha, frame
/// data as little-endian f64 row-major, and a footer config hash.
pub fn write_trajectory(path: &Path, traj: &Trajectory, config_hash: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (h, wd) = traj.grid();
    for v in [traj.channels() as u32, h as u32, wd as u32, traj.frames.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [traj.dx, traj.dt, traj.alpha] {
        w.write_all(&v.to_le_bytes())?;
    }
    for f in &traj.frames {
        for v in f.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&config_hash.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads a trajectory plus its footer config hash.
pub fn read_trajectory(path: &Path) -> Result<(Trajectory, u64)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("not an EQDY trajectory".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != VERSION {
        return Err(TensorError::Format("unsupported EQDY version".into()));
    }
    let mut dims = [0u32; 4];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4);
    }
    let (c, h, w, t) = (dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
    let mut b8 = [0u8; 8];
    let mut scalars = [0.0f64; 3];
    for s in &mut scalars {
        r.read_exact(&mut b8)?;
        *s = f64::from_le_bytes(b8);
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    r.read_exact(&mut b8)?;
    let hash = u64::from_le_bytes(b8);
    Ok((
        Trajectory {
            frames,
            alpha: scalars[2],
            dt: scalars[1],
            dx: scalars[0],
            boundary: Boundary::Periodic,
            rep: if c == 2 { ChannelRepKind::Vector2 } else { ChannelRepKind::Scalar },
        },
        hash,
    ))
}

//! Model checkpoint file: magic "EQDM", version, spec text, then parameter
//! tensors in declaration order as 64-bit little-endian floats. A trailing
//! "OPT1" section carries optimizer moments and the epoch counter so
//! training resumes bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use super::{build, Arch, ModelSpec, Trainer};
use crate::layers::Symmetry;
use crate::tensor::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"EQDM";
const OPT_TAG: &[u8; 4] = b"OPT1";
const VERSION: u32 = 1;

pub(crate) fn spec_to_text(spec: &ModelSpec) -> String {
    let grid_list =
        spec.scale_grid.iter().map(|v| format!("{:.17e}", v)).collect::<Vec<_>>().join(",");
    format!(
        "arch={}\nsymmetry={}\ndepth={}\nwidth={}\nl={}\ngrid={}\nchannels={}\nkernel={}\n\
         group_order={}\nscale_grid={}\nt_extent={}\nnorm_mean={:.17e}\nnorm_std={:.17e}\n",
        spec.arch.name(),
        spec.symmetry.name(),
        spec.depth,
        spec.width,
        spec.input_frames,
        spec.grid,
        spec.channels,
        spec.kernel,
        spec.group_order,
        grid_list,
        spec.t_extent,
        spec.norm_mean,
        spec.norm_std
    )
}

pub(crate) fn spec_from_text(text: &str) -> Result<ModelSpec> {
    let mut spec = ModelSpec::new(Arch::ShallowCnn, Symmetry::None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TensorError::Format(format!("bad spec line: {}", line)))?;
        let bad = |what: &str| TensorError::Format(format!("bad {}: {}", what, value));
        match key {
            "arch" => spec.arch = Arch::parse(value).ok_or_else(|| bad("arch"))?,
            "symmetry" => spec.symmetry = Symmetry::parse(value).ok_or_else(|| bad("symmetry"))?,
            "depth" => spec.depth = value.parse().map_err(|_| bad("depth"))?,
            "width" => spec.width = value.parse().map_err(|_| bad("width"))?,
            "l" => spec.input_frames = value.parse().map_err(|_| bad("l"))?,
            "grid" => spec.grid = value.parse().map_err(|_| bad("grid"))?,
            "channels" => spec.channels = value.parse().map_err(|_| bad("channels"))?,
            "kernel" => spec.kernel = value.parse().map_err(|_| bad("kernel"))?,
            "group_order" => spec.group_order = value.parse().map_err(|_| bad("group_order"))?,
            "t_extent" => spec.t_extent = value.parse().map_err(|_| bad("t_extent"))?,
            "norm_mean" => spec.norm_mean = value.parse().map_err(|_| bad("norm_mean"))?,
            "norm_std" => spec.norm_std = value.parse().map_err(|_| bad("norm_std"))?,
            "scale_grid" => {
                spec.scale_grid = value
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| bad("scale_grid")))
                    .collect::<Result<Vec<f64>>>()?;
            }
            other => {
                return Err(TensorError::Format(format!("unknown spec key: {}", other)));
            }
        }
    }
    Ok(spec)
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut buf = [0u8; 8];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape.to_vec(), data)
}

/// Writes the trainer (model parameters + optimizer state) to disk.
pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = spec_to_text(&trainer.model.spec);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for t in trainer.model.param_tensors() {
        write_f64s(&mut w, t.data())?;
    }
    w.write_all(OPT_TAG)?;
    w.write_all(&(trainer.epochs_done as u32).to_le_bytes())?;
    w.write_all(&trainer.opt.step.to_le_bytes())?;
    for t in trainer.opt.m.iter().chain(&trainer.opt.v) {
        write_f64s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a trainer ready to resume.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("not an EQDM checkpoint".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported checkpoint version {}", version)));
    }
    r.read_exact(&mut u32buf)?;
    let len = u32::from_le_bytes(u32buf) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    let spec = spec_from_text(
        std::str::from_utf8(&text).map_err(|_| TensorError::Format("spec not UTF-8".into()))?,
    )?;

    // shapes come from the spec; building also validates it
    let mut model = build(&spec, 0)?;
    for t in model.param_tensors_mut() {
        *t = read_tensor(&mut r, &t.shape().to_vec())?;
    }
    let mut trainer = Trainer::new(model);

    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != OPT_TAG {
        return Err(TensorError::Format("missing optimizer section".into()));
    }
    r.read_exact(&mut u32buf)?;
    trainer.epochs_done = u32::from_le_bytes(u32buf) as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    trainer.opt.step = u64::from_le_bytes(u64buf);
    let shapes: Vec<Vec<usize>> =
        trainer.model.param_tensors().iter().map(|t| t.shape().to_vec()).collect();
    for (i, shape) in shapes.iter().enumerate() {
        trainer.opt.m[i] = read_tensor(&mut r, shape)?;
    }
    for (i, shape) in shapes.iter().enumerate() {
        trainer.opt.v[i] = read_tensor(&mut r, shape)?;
    }
    Ok(trainer)
}

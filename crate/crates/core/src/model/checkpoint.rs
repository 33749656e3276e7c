//! Flat binary checkpoint: an 8-byte magic, a format version, the classifier
//! configuration, then one record per tensor as (name length u16, name bytes,
//! rank u8, extents u32 x rank, values f32 little-endian). Every tensor is
//! written rank 4 in (batch, channel, height, width) order; running statistics
//! are stored alongside the parameters so evaluation works after a reload.

use std::fs;
use std::io;
use std::path::Path;

use crate::error::{Error, Result};
use crate::norm::NormOptions;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Shape4};

use super::{build_allcnn, ClassifierConfig, Model, NormKind, NormLayer};

const MAGIC: &[u8; 8] = b"CNRMCKPT";
const VERSION: u32 = 1;

fn norm_code(kind: NormKind) -> u8 {
    match kind {
        NormKind::None => 0,
        NormKind::Batch => 1,
        NormKind::Dwck => 2,
        NormKind::Learned => 3,
    }
}

fn norm_from_code(code: u8) -> Option<NormKind> {
    match code {
        0 => Some(NormKind::None),
        1 => Some(NormKind::Batch),
        2 => Some(NormKind::Dwck),
        3 => Some(NormKind::Learned),
        _ => None,
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: Shape4, values: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4u8);
    for extent in [shape.n, shape.c, shape.h, shape.w] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the model configuration, all parameters, and the normalization
/// running statistics. The file is written to a temporary sibling and
/// renamed into place.
pub fn save_checkpoint(
    store: &ParamStore<f32>,
    model: &Model<f32>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(norm_code(model.cfg.norm));
    buf.extend_from_slice(&model.cfg.width_scale.to_le_bytes());
    let (c, h, w) = model.cfg.input_dims;
    for extent in [c, h, w, model.cfg.n_classes] {
        buf.extend_from_slice(&(extent as u32).to_le_bytes());
    }

    for id in store.ids() {
        write_tensor(&mut buf, store.name(id), store.shape(id), store.value(id));
    }
    for (i, block) in model.blocks.iter().enumerate() {
        let prefix = format!("block{}.norm", i + 1);
        let (mean, var) = match &block.norm {
            Some(NormLayer::Batch(s)) => (&s.running_mean, &s.running_var),
            Some(NormLayer::Dwck(s)) => (&s.running_mean, &s.running_var),
            _ => continue,
        };
        let shape = Shape4::new(1, mean.len(), 1, 1);
        write_tensor(&mut buf, &format!("{prefix}.running_mean"), shape, mean);
        write_tensor(&mut buf, &format!("{prefix}.running_var"), shape, var);
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_string(),
                problem: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Rebuild a model from a checkpoint. The affine flag is inferred from the
/// stored tensor names; all parameter values and running statistics are
/// overwritten from the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, Model<f32>)> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let data = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => {
            Error::Checkpoint { path: path_str.clone(), problem: "file not found".into() }
        }
        _ => Error::Io(e),
    })?;
    let mut r = Reader { data: &data, pos: 0, path: &path_str };

    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint { path: path_str, problem: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            path: path_str,
            problem: format!("unsupported version {version}"),
        });
    }
    let norm = norm_from_code(r.u8()?).ok_or_else(|| Error::Checkpoint {
        path: path_str.clone(),
        problem: "unknown normalization kind".into(),
    })?;
    let width_scale = r.f64()?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let cfg = ClassifierConfig { norm, width_scale, input_dims: (c, h, w), n_classes };

    let mut tensors: Vec<(String, Shape4, Vec<f32>)> = Vec::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
            Error::Checkpoint { path: path_str.clone(), problem: "non-utf8 tensor name".into() }
        })?;
        let rank = r.u8()? as usize;
        if rank != 4 {
            return Err(Error::Checkpoint {
                path: path_str,
                problem: format!("tensor '{name}' has rank {rank}, expected 4"),
            });
        }
        let mut extents = [0usize; 4];
        for e in &mut extents {
            *e = r.u32()? as usize;
        }
        let shape = Shape4::new(extents[0], extents[1], extents[2], extents[3]);
        let bytes = r.take(shape.count() * 4)?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, values));
    }

    let affine = match norm {
        NormKind::Dwck | NormKind::Learned => {
            tensors.iter().any(|(n, _, _)| n == "block1.norm.gamma")
        }
        _ => true,
    };
    let opts = NormOptions { affine, ..NormOptions::default() };
    let mut store = ParamStore::new();
    let mut model = build_allcnn(&mut store, cfg, &opts, &mut Rng::new(0))?;

    let mut consumed = vec![false; tensors.len()];
    let mut fetch = |name: &str, shape: Shape4| -> Result<&[f32]> {
        let idx = tensors
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint {
                path: path_str.clone(),
                problem: format!("missing tensor '{name}'"),
            })?;
        if tensors[idx].1 != shape {
            return Err(Error::Checkpoint {
                path: path_str.clone(),
                problem: format!(
                    "tensor '{name}' has shape {}, expected {shape}",
                    tensors[idx].1
                ),
            });
        }
        consumed[idx] = true;
        Ok(&tensors[idx].2)
    };

    for id in store.ids().collect::<Vec<_>>() {
        let values = fetch(&store.name(id).to_string(), store.shape(id))?.to_vec();
        store.value_mut(id).copy_from_slice(&values);
    }
    for (i, block) in model.blocks.iter_mut().enumerate() {
        let prefix = format!("block{}.norm", i + 1);
        let (mean, var) = match &mut block.norm {
            Some(NormLayer::Batch(s)) => (&mut s.running_mean, &mut s.running_var),
            Some(NormLayer::Dwck(s)) => (&mut s.running_mean, &mut s.running_var),
            _ => continue,
        };
        let shape = Shape4::new(1, mean.len(), 1, 1);
        mean.copy_from_slice(fetch(&format!("{prefix}.running_mean"), shape)?);
        var.copy_from_slice(fetch(&format!("{prefix}.running_var"), shape)?);
    }
    if let Some(idx) = consumed.iter().position(|&c| !c) {
        return Err(Error::Checkpoint {
            path: path_str,
            problem: format!("unexpected tensor '{}'", tensors[idx].0),
        });
    }
    Ok((store, model))
}

//! Versioned binary parameter checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` parameter
//! count, then per parameter a `u32`-length-prefixed UTF-8 name, `u32` rank,
//! `u32` dims and `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use super::{
    BaseNetwork, Encoder, ExaminerNetwork, NetConfig, CONV_KERNEL, ENCODER_NAMES, EXAMINER_HEAD_NAMES, HEAD_NAMES,
};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CINCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named `f32` parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn from_params<'a, T: Real>(params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Self {
        Checkpoint {
            params: params.into_iter().map(|(n, t)| (n.to_string(), t.cast())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn is_examiner(&self) -> bool {
        self.get(EXAMINER_HEAD_NAMES[0]).is_some()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses a checkpoint; `origin` is only used in error messages.
    pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<Self> {
        let trunc = |e: std::io::Error| Error::format(origin, format!("truncated checkpoint ({e})"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r).map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let count = read_u32(r).map_err(trunc)? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = read_u32(r).map_err(trunc)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?;
            let rank = read_u32(r).map_err(trunc)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(trunc)?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(trunc)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file), path)
    }

    fn take<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(|t| t.cast())
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing parameter `{name}`")))
    }

    fn encoder<T: Real>(&self) -> Result<Encoder<T>> {
        let [a, b, c, d, e, f, g] = ENCODER_NAMES;
        Ok(Encoder {
            conv1_w: self.take(a)?,
            conv1_b: self.take(b)?,
            conv2_w: self.take(c)?,
            conv2_b: self.take(d)?,
            eca_w: self.take(e)?,
            proj_w: self.take(f)?,
            proj_b: self.take(g)?,
        })
    }

    /// Recovers the layer sizes from parameter shapes.
    fn infer_config(&self, image_hw: (usize, usize), num_classes: usize, hidden: usize) -> Result<NetConfig> {
        let dims = |name: &str| -> Result<Vec<usize>> {
            self.get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::invalid("checkpoint", format!("missing parameter `{name}`")))
        };
        let c1 = dims(ENCODER_NAMES[0])?;
        let c2 = dims(ENCODER_NAMES[2])?;
        let eca = dims(ENCODER_NAMES[4])?;
        let proj = dims(ENCODER_NAMES[5])?;
        if c1.len() != 4 || c2.len() != 4 || c1[2] != CONV_KERNEL || eca.len() != 1 || proj.len() != 2 {
            return Err(Error::invalid(
                "checkpoint",
                "parameter shapes do not describe an encoder",
            ));
        }
        let cfg = NetConfig {
            in_channels: c1[1],
            height: image_hw.0,
            width: image_hw.1,
            conv1_channels: c1[0],
            conv2_channels: c2[0],
            feature_dim: proj[1],
            num_classes,
            eca_kernel: eca[0],
            examiner_hidden: hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuilds a base network; image size is not stored in the file.
    pub fn to_base<T: Real>(&self, image_hw: (usize, usize)) -> Result<BaseNetwork<T>> {
        let head_w: Tensor<T> = self.take(HEAD_NAMES[0])?;
        if head_w.ndim() != 2 {
            return Err(Error::invalid("checkpoint", "head weight must be a matrix"));
        }
        let config = self.infer_config(image_hw, head_w.shape()[1], 256)?;
        Ok(BaseNetwork {
            encoder: self.encoder()?,
            head_b: self.take(HEAD_NAMES[1])?,
            head_w,
            frozen_head: false,
            config,
        })
    }

    pub fn to_examiner<T: Real>(&self, image_hw: (usize, usize), num_classes: usize) -> Result<ExaminerNetwork<T>> {
        let hidden_w: Tensor<T> = self.take(EXAMINER_HEAD_NAMES[0])?;
        if hidden_w.ndim() != 2 {
            return Err(Error::invalid("checkpoint", "examiner hidden weight must be a matrix"));
        }
        let config = self.infer_config(image_hw, num_classes, hidden_w.shape()[1])?;
        Ok(ExaminerNetwork {
            encoder: self.encoder()?,
            hidden_w,
            hidden_b: self.take(EXAMINER_HEAD_NAMES[1])?,
            out_w: self.take(EXAMINER_HEAD_NAMES[2])?,
            out_b: self.take(EXAMINER_HEAD_NAMES[3])?,
            config,
        })
    }
}

impl<T: Real> BaseNetwork<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.named_params())
    }
}

impl<T: Real> ExaminerNetwork<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.named_params())
    }
}

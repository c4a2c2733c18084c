//! Binary checkpoints.
//!
//! Layout (little-endian): magic `AINC`, `u32` version, `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` × `u32` dims and the `f64` values in row-major order.

use std::path::Path;

use crate::encoder::{Classifier, EncoderDims, Linear, LinearClassifier, MlpEncoder};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"AINC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            bad(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, m) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            for d in [m.rows(), m.cols()] {
                let d = u32::try_from(d).map_err(|_| bad(format!("{name}: dim {d} overflows u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(bad(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for t in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| bad(format!("tensor {t}: name is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")?;
            if rank > 2 {
                return Err(bad(format!("{name}: rank {rank} unsupported (at most 2)")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let (rows, cols) = match dims[..] {
                [] => (1, 1),
                [n] => (1, n),
                [a, b] => (a, b),
                _ => unreachable!(),
            };
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| bad(format!("{name}: dims {dims:?} overflow the file size")))?;
            let raw = r.take(n * 8, &name)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, values)?));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    fn take_linear(&self, prefix: &str) -> Result<Option<Linear>> {
        let (Some(w), Some(b)) = (self.get(&format!("{prefix}.weight")), self.get(&format!("{prefix}.bias"))) else {
            return Ok(None);
        };
        if b.shape() != (1, w.rows()) {
            return Err(bad(format!("{prefix}: bias {:?} does not match weight {:?}", b.shape(), w.shape())));
        }
        Ok(Some(Linear {
            weight: w.clone(),
            bias: b.clone(),
        }))
    }

    pub fn from_encoder(enc: &MlpEncoder) -> Self {
        let mut tensors = Vec::new();
        for (i, l) in enc.backbone.iter().enumerate() {
            tensors.push((format!("backbone.{i}.weight"), l.weight.clone()));
            tensors.push((format!("backbone.{i}.bias"), l.bias.clone()));
        }
        tensors.push(("projection.weight".into(), enc.projection.weight.clone()));
        tensors.push(("projection.bias".into(), enc.projection.bias.clone()));
        Self { tensors }
    }

    pub fn from_classifier(model: &Classifier) -> Self {
        let mut ck = Self::from_encoder(&model.encoder);
        ck.tensors.push(("head.weight".into(), model.head.layer.weight.clone()));
        ck.tensors.push(("head.bias".into(), model.head.layer.bias.clone()));
        ck
    }

    pub fn to_encoder(&self) -> Result<MlpEncoder> {
        let mut backbone = Vec::new();
        while let Some(l) = self.take_linear(&format!("backbone.{}", backbone.len()))? {
            backbone.push(l);
        }
        let projection = self
            .take_linear("projection")?
            .ok_or_else(|| bad("missing projection.weight / projection.bias"))?;
        let first = backbone.first().ok_or_else(|| bad("missing backbone.0"))?;
        let dims = EncoderDims::new(
            first.weight.cols(),
            backbone.iter().map(|l| l.weight.rows()).collect(),
            projection.weight.rows(),
        );
        let mut fan_in = dims.input;
        for (i, l) in backbone.iter().chain(std::iter::once(&projection)).enumerate() {
            if l.weight.cols() != fan_in {
                return Err(bad(format!("layer {i}: input width {} after width {fan_in}", l.weight.cols())));
            }
            fan_in = l.weight.rows();
        }
        Ok(MlpEncoder {
            dims,
            backbone,
            projection,
        })
    }

    pub fn to_classifier(&self) -> Result<Classifier> {
        let encoder = self.to_encoder()?;
        let layer = self.take_linear("head")?.ok_or_else(|| bad("missing head.weight / head.bias"))?;
        if layer.weight.cols() != encoder.dims.feature_dim() {
            return Err(bad(format!(
                "head expects {} features, encoder yields {}",
                layer.weight.cols(),
                encoder.dims.feature_dim()
            )));
        }
        Ok(Classifier {
            encoder,
            head: LinearClassifier { layer },
        })
    }
}

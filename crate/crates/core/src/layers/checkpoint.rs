//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian, tensors as f64 LE):
//!
//! ```text
//! "ESCK"                      magic
//! u16                         format version (1)
//! u8                          stage tag
//! u32 + bytes                 spec JSON
//! [u8; 32]                    SHA-256 of the spec JSON
//! u32 + bytes                 metadata JSON
//! u32                         tensor count, then per tensor (sorted by name):
//!   u16 + bytes                 name
//!   u8                          rank
//!   u32 × rank                  dims
//!   f64 × numel                 values
//! u8                          1 if frequency tables follow, else 0
//!   u8 precision, u16 channels, per channel: i32 offset, u16 len, u32 × len
//! [u8; 32]                    SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::optim::Params;
use crate::data::Task;
use crate::entropy_model::{CdfTable, ChannelTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::Model;
use super::ModelSpec;

const MAGIC: &[u8; 4] = b"ESCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Teacher,
    Stage1,
    Stage2,
    TaskHead,
    End2end,
    Crbq,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Teacher => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::TaskHead => 3,
            Stage::End2end => 4,
            Stage::Crbq => 5,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Stage::Teacher,
            1 => Stage::Stage1,
            2 => Stage::Stage2,
            3 => Stage::TaskHead,
            4 => Stage::End2end,
            5 => Stage::Crbq,
            _ => return Err(Error::Checkpoint(format!("unknown stage tag {t}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::TaskHead => "task-head",
            Stage::End2end => "end2end",
            Stage::Crbq => "crbq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Rate weight the model was trained with, if any.
    pub beta: Option<f64>,
    pub beta_id: u16,
    pub task: Task,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { seed: 0, beta: None, beta_id: 0, task: Task::Class }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub tables: Option<CdfTable>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

impl Checkpoint {
    pub fn new(stage: Stage, model: Model, tables: Option<CdfTable>, meta: CheckpointMeta) -> Self {
        Self { stage, model, tables, meta }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.model.spec
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.stage.tag());
        let spec = serde_json::to_vec(&self.model.spec).expect("spec serializes");
        put_blob(&mut out, &spec);
        out.extend_from_slice(&Sha256::digest(&spec));
        put_blob(&mut out, &serde_json::to_vec(&self.meta).expect("meta serializes"));
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in &self.model.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.tables {
            None => out.push(0),
            Some(t) => {
                out.push(1);
                out.push(t.precision as u8);
                out.extend_from_slice(&(t.channels.len() as u16).to_le_bytes());
                for ch in &t.channels {
                    out.extend_from_slice(&ch.offset.to_le_bytes());
                    out.extend_from_slice(&(ch.cdf.len() as u16).to_le_bytes());
                    for c in &ch.cdf {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + MAGIC.len() {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("integrity hash mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let stage = Stage::from_tag(r.u8()?)?;
        let spec_json = r.blob()?;
        if Sha256::digest(spec_json).as_slice() != r.take(32)? {
            return Err(Error::Checkpoint("spec hash mismatch".into()));
        }
        let spec: ModelSpec = serde_json::from_slice(spec_json)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.blob()?)?;
        let n = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        let tables = match r.u8()? {
            0 => None,
            1 => {
                let precision = r.u8()? as u32;
                let nc = r.u16()? as usize;
                let mut channels = Vec::with_capacity(nc);
                for _ in 0..nc {
                    let offset = r.i32()?;
                    let len = r.u16()? as usize;
                    let cdf = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                    channels.push(ChannelTable { offset, cdf });
                }
                let t = CdfTable { precision, channels };
                t.validate()?;
                Some(t)
            }
            f => return Err(Error::Checkpoint(format!("bad table flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let model = Model::new(spec, params)?;
        Ok(Self { stage, model, tables, meta })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::TeacherWidths;

    fn sample() -> Checkpoint {
        let t = ModelSpec::teacher([3, 16, 16], TeacherWidths { stage1: 4, stage2: 8 }, 5);
        let s = ModelSpec::entropic_student(&t, 4, 6).unwrap();
        let m = Model::init(s, 5).unwrap();
        let tables = m.entropy_model().unwrap().export_cdf_table(4, 16).unwrap();
        Checkpoint::new(Stage::Stage1, m, Some(tables), CheckpointMeta { beta: Some(1e-3), ..Default::default() })
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = sample().to_bytes();
        for i in (0..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(Checkpoint::from_bytes(&b).is_err(), "byte {i}");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

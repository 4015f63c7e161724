//! Binary parameter snapshot: `HSFL`, a version byte, then one section per
//! entity (every client, then the server). Weights are stored as 32-bit
//! little-endian floats; exit heads are written as a block of depth 0.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use super::{SimState, SERVER_ENTITY};
use crate::nn::{Head, ParamBlock, Tensor};

pub const MAGIC: &[u8; 4] = b"HSFL";
pub const VERSION: u8 = 1;
const HEAD_DEPTH: u32 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("{0} unexpected bytes after the last entity")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredBlock {
    /// Template depth, or 0 for an exit head.
    pub depth: u32,
    pub in_dim: u32,
    pub out_dim: u32,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl StoredBlock {
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_head(&self) -> bool {
        self.depth == HEAD_DEPTH
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: u32,
    pub blocks: Vec<StoredBlock>,
}

impl Entity {
    pub fn is_server(&self) -> bool {
        u64::from(self.id) == SERVER_ENTITY
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(StoredBlock::param_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u8,
    pub entities: Vec<Entity>,
}

fn stored(depth: u32, weights: &Tensor, bias: &Tensor) -> StoredBlock {
    StoredBlock {
        depth,
        in_dim: weights.rows() as u32,
        out_dim: weights.cols() as u32,
        weights: weights.data().iter().map(|&v| v as f32).collect(),
        bias: bias.data().iter().map(|&v| v as f32).collect(),
    }
}

fn entity(id: u32, blocks: &[ParamBlock], head: &Head) -> Entity {
    let mut out: Vec<StoredBlock> = blocks
        .iter()
        .map(|b| stored(b.depth as u32, &b.weights, &b.bias))
        .collect();
    out.push(stored(HEAD_DEPTH, &head.weights, &head.bias));
    Entity { id, blocks: out }
}

impl Checkpoint {
    pub fn from_state(state: &SimState) -> Self {
        let mut entities: Vec<Entity> = state
            .clients
            .iter()
            .map(|c| entity(c.id as u32, &c.model.prefix, &c.model.head))
            .collect();
        entities.push(entity(
            SERVER_ENTITY as u32,
            &state.server.trunk,
            &state.server.head,
        ));
        Self {
            version: VERSION,
            entities,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&(self.entities.len() as u32).to_le_bytes());
        for e in &self.entities {
            out.extend_from_slice(&e.id.to_le_bytes());
            out.extend_from_slice(&(e.blocks.len() as u32).to_le_bytes());
            for b in &e.blocks {
                for v in [b.depth, b.in_dim, b.out_dim] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in b.weights.iter().chain(&b.bias) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated {
                    offset: bytes.len(),
                }
            } else {
                CheckpointError::BadMagic
            });
        }
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut entities = Vec::new();
        for _ in 0..count {
            let id = r.u32()?;
            let n = r.u32()?;
            let mut blocks = Vec::new();
            for _ in 0..n {
                let depth = r.u32()?;
                let in_dim = r.u32()?;
                let out_dim = r.u32()?;
                let weights = r.floats(in_dim as usize * out_dim as usize)?;
                let bias = r.floats(out_dim as usize)?;
                blocks.push(StoredBlock {
                    depth,
                    in_dim,
                    out_dim,
                    weights,
                    bias,
                });
            }
            entities.push(Entity { id, blocks });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { version, entities })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn clients(&self) -> usize {
        self.entities.iter().filter(|e| !e.is_server()).count()
    }
}

/// One line per entity: id, block depths and parameter count.
impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "version {}, {} entities",
            self.version,
            self.entities.len()
        )?;
        for e in &self.entities {
            let name = if e.is_server() {
                "server".to_string()
            } else {
                format!("client {}", e.id)
            };
            let depths: Vec<String> = e
                .blocks
                .iter()
                .filter(|b| !b.is_head())
                .map(|b| b.depth.to_string())
                .collect();
            let heads = e.blocks.iter().filter(|b| b.is_head()).count();
            writeln!(
                f,
                "{name}: depths [{}], {heads} head, {} parameters",
                depths.join(","),
                e.param_count()
            )?;
        }
        Ok(())
    }
}

pub fn encode(state: &SimState) -> Vec<u8> {
    Checkpoint::from_state(state).to_bytes()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.bytes.len(),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated {
            offset: self.bytes.len(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }
}

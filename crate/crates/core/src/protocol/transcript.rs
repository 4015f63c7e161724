//! Transcript files: `(len:u32 LE, frame)*`.

use std::path::Path;

use super::codec::{decode, DecodeError};
use super::WireMessage;

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("transcript truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("corrupt frame: {0}")]
    Frame(#[from] DecodeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TranscriptError {
    /// Byte offset of the damage, when known.
    pub fn offset(&self) -> Option<usize> {
        match self {
            TranscriptError::Truncated { offset } => Some(*offset),
            TranscriptError::Frame(e) => Some(e.offset),
            TranscriptError::Io { .. } => None,
        }
    }
}

pub fn append_frame(out: &mut Vec<u8>, frame: &[u8]) {
    out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
    out.extend_from_slice(frame);
}

/// Splits a transcript into `(offset, frame bytes)` without decoding frames.
pub fn frames(bytes: &[u8]) -> Result<Vec<(usize, &[u8])>, TranscriptError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(TranscriptError::Truncated { offset: pos });
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + 4;
        if bytes.len() - start < len {
            return Err(TranscriptError::Truncated { offset: pos });
        }
        out.push((start, &bytes[start..start + len]));
        pos = start + len;
    }
    Ok(out)
}

/// Decodes every frame of a transcript.
pub fn read_transcript(bytes: &[u8]) -> Result<Vec<WireMessage>, TranscriptError> {
    frames(bytes)?
        .into_iter()
        .map(|(offset, f)| {
            decode(f).map_err(|e| {
                TranscriptError::Frame(DecodeError {
                    offset: e.offset + offset,
                    kind: e.kind,
                })
            })
        })
        .collect()
}

pub fn load(path: &Path) -> Result<Vec<u8>, TranscriptError> {
    std::fs::read(path).map_err(|source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    })
}

//! Label-privacy audit over recorded transcripts.

use std::collections::BTreeMap;
use std::fmt;

use super::codec::{interpret, parse_frame, schema_matches, tag, DecodeError};
use super::transcript::{frames, TranscriptError};
use super::{Direction, MessageKind, Payload, WireMessage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// A field carrying the reserved label tag.
    LabelField,
    /// A field tag outside the protocol vocabulary.
    UnknownField(u8),
    /// Fields do not match the schema of the frame's kind.
    Schema,
    /// A client→server feature frame whose features are not quantized codes.
    UnquantizedFeature,
    /// A frame whose content fails to decode after passing the schema check.
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub frame: usize,
    pub offset: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindStats {
    pub frames: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub per_kind: BTreeMap<MessageKind, KindStats>,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn frames(&self) -> u64 {
        self.per_kind.values().map(|s| s.frames).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn label_violations(&self) -> usize {
        self.violations
            .iter()
            .filter(|v| v.kind == ViolationKind::LabelField)
            .count()
    }

    fn count(&mut self, kind: MessageKind, bytes: usize) {
        let s = self.per_kind.entry(kind).or_default();
        s.frames += 1;
        s.bytes += bytes as u64;
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for kind in MessageKind::ALL {
            let s = self.per_kind.get(&kind).copied().unwrap_or_default();
            writeln!(
                f,
                "{:<18} frames={:<8} bytes={}",
                kind.name(),
                s.frames,
                s.bytes
            )?;
        }
        writeln!(f, "violations={}", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  frame {} @ byte {}: {:?}", v.frame, v.offset, v.kind)?;
        }
        Ok(())
    }
}

/// Audits typed messages. Labels cannot be represented in a [`Payload`], so
/// this only checks that every upward feature payload is quantized and
/// returns per-kind counts with encoded sizes.
pub fn audit_privacy(transcript: &[WireMessage]) -> AuditReport {
    let mut report = AuditReport::default();
    for (i, msg) in transcript.iter().enumerate() {
        let bytes = super::encode(msg).map(|b| b.len()).unwrap_or(0);
        report.count(msg.kind(), bytes);
        let quantized = match &msg.payload {
            Payload::FeaturePair { features, .. }
            | Payload::TaskFeature { features, .. }
            | Payload::InferenceFeature { features, .. } => !features.codes.is_empty(),
            _ => true,
        };
        if !quantized {
            report.violations.push(Violation {
                frame: i,
                offset: 0,
                kind: ViolationKind::UnquantizedFeature,
            });
        }
    }
    report
}

/// Audits a raw transcript. Framing or checksum damage is an error; frames
/// that are intact but break the privacy schema are reported as violations.
pub fn audit_transcript_bytes(bytes: &[u8]) -> Result<AuditReport, TranscriptError> {
    let mut report = AuditReport::default();
    for (i, (offset, frame_bytes)) in frames(bytes)?.into_iter().enumerate() {
        let frame = parse_frame(frame_bytes, offset).map_err(TranscriptError::Frame)?;
        let kind = frame.kind().expect("parse_frame validates the kind");
        report.count(kind, frame.len);

        let mut flagged = false;
        for &(t, at, _) in &frame.fields {
            let violation = match t {
                tag::LABELS => Some(ViolationKind::LabelField),
                tag::DEPTH
                | tag::QUANTIZED
                | tag::DENSE
                | tag::INDICATOR
                | tag::BLOCK
                | tag::HEAD => None,
                other => Some(ViolationKind::UnknownField(other)),
            };
            if let Some(kind) = violation {
                flagged = true;
                report.violations.push(Violation {
                    frame: i,
                    offset: at,
                    kind,
                });
            }
        }
        if flagged {
            continue;
        }
        let tags = frame.tags();
        if !schema_matches(kind, &tags) {
            let raw_features = kind.direction() == Direction::Up
                && matches!(
                    kind,
                    MessageKind::FeaturePair
                        | MessageKind::TaskFeature
                        | MessageKind::InferenceFeature
                )
                && tags.contains(&tag::DENSE);
            report.violations.push(Violation {
                frame: i,
                offset,
                kind: if raw_features {
                    ViolationKind::UnquantizedFeature
                } else {
                    ViolationKind::Schema
                },
            });
            continue;
        }
        if let Err(DecodeError { offset, kind }) = interpret(&frame, offset) {
            report.violations.push(Violation {
                frame: i,
                offset,
                kind: ViolationKind::Malformed(format!("{kind:?}")),
            });
        }
    }
    Ok(report)
}

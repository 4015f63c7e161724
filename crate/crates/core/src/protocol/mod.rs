//! Client/server messages, their binary encoding, byte accounting and the
//! label-privacy audit.

pub mod audit;
pub mod codec;
pub mod transcript;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::client::{OffloadTarget, QuantizedTensor};
use crate::nn::{Head, ParamBlock, Tensor};
use crate::server::ServerState;

pub use audit::{audit_privacy, audit_transcript_bytes, AuditReport, Violation, ViolationKind};
pub use codec::{decode, encode, DecodeError, DecodeErrorKind, EncodeError};
pub use transcript::{read_transcript, TranscriptError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Client to server.
    Up,
    /// Server to client.
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MessageKind {
    FeaturePair = 1,
    TaskFeature = 2,
    TaskLogits = 3,
    UpstreamGrad = 4,
    CutGrad = 5,
    ModelUpload = 6,
    ModelDownload = 7,
    InferenceFeature = 8,
    InferenceLogits = 9,
}

impl MessageKind {
    pub const ALL: [MessageKind; 9] = [
        MessageKind::FeaturePair,
        MessageKind::TaskFeature,
        MessageKind::TaskLogits,
        MessageKind::UpstreamGrad,
        MessageKind::CutGrad,
        MessageKind::ModelUpload,
        MessageKind::ModelDownload,
        MessageKind::InferenceFeature,
        MessageKind::InferenceLogits,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get((b as usize).wrapping_sub(1)).copied()
    }

    pub fn direction(self) -> Direction {
        use MessageKind::*;
        match self {
            FeaturePair | TaskFeature | UpstreamGrad | ModelUpload | InferenceFeature => {
                Direction::Up
            }
            TaskLogits | CutGrad | ModelDownload | InferenceLogits => Direction::Down,
        }
    }

    pub fn name(self) -> &'static str {
        use MessageKind::*;
        match self {
            FeaturePair => "feature_pair",
            TaskFeature => "task_feature",
            TaskLogits => "task_logits",
            UpstreamGrad => "upstream_grad",
            CutGrad => "cut_grad",
            ModelUpload => "model_upload",
            ModelDownload => "model_download",
            InferenceFeature => "inference_feature",
            InferenceLogits => "inference_logits",
        }
    }
}

/// Per-pair positive/negative flags computed on the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndicator(Vec<bool>);

impl PairIndicator {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPayload {
    pub split_depth: u32,
    pub blocks: Vec<ParamBlock>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    FeaturePair {
        exit_depth: u32,
        features: QuantizedTensor,
        indicator: PairIndicator,
    },
    TaskFeature {
        split_depth: u32,
        features: QuantizedTensor,
    },
    TaskLogits {
        logits: Tensor,
    },
    UpstreamGrad {
        grad: Tensor,
    },
    CutGrad {
        grad: Tensor,
    },
    ModelUpload(ModelPayload),
    ModelDownload(ModelPayload),
    InferenceFeature {
        depth: u32,
        features: QuantizedTensor,
    },
    InferenceLogits {
        logits: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub round: u32,
    pub step: u32,
    pub client: u32,
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(round: usize, step: usize, client: usize, payload: Payload) -> Self {
        Self {
            round: round as u32,
            step: step as u32,
            client: client as u32,
            payload,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::FeaturePair { .. } => MessageKind::FeaturePair,
            Payload::TaskFeature { .. } => MessageKind::TaskFeature,
            Payload::TaskLogits { .. } => MessageKind::TaskLogits,
            Payload::UpstreamGrad { .. } => MessageKind::UpstreamGrad,
            Payload::CutGrad { .. } => MessageKind::CutGrad,
            Payload::ModelUpload(_) => MessageKind::ModelUpload,
            Payload::ModelDownload(_) => MessageKind::ModelDownload,
            Payload::InferenceFeature { .. } => MessageKind::InferenceFeature,
            Payload::InferenceLogits { .. } => MessageKind::InferenceLogits,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("expected a {expected:?} reply, received {found:?}")]
    UnexpectedKind {
        expected: MessageKind,
        found: MessageKind,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub messages: u64,
    pub bytes: u64,
}

impl std::ops::AddAssign for Traffic {
    fn add_assign(&mut self, rhs: Self) {
        self.messages += rhs.messages;
        self.bytes += rhs.bytes;
    }
}

/// Message and byte counts keyed by `(client, round, kind)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    entries: BTreeMap<(u32, u32, MessageKind), Traffic>,
}

impl TrafficLedger {
    pub fn record(&mut self, client: u32, round: u32, kind: MessageKind, bytes: usize) {
        *self.entries.entry((client, round, kind)).or_default() += Traffic {
            messages: 1,
            bytes: bytes as u64,
        };
    }

    pub fn merge(&mut self, other: &TrafficLedger) {
        for (k, v) in &other.entries {
            *self.entries.entry(*k).or_default() += *v;
        }
    }

    pub fn get(&self, client: u32, round: u32, kind: MessageKind) -> Traffic {
        self.entries
            .get(&(client, round, kind))
            .copied()
            .unwrap_or_default()
    }

    fn sum(&self, mut keep: impl FnMut(u32, u32, MessageKind) -> bool) -> Traffic {
        let mut t = Traffic::default();
        for (&(c, r, k), v) in &self.entries {
            if keep(c, r, k) {
                t += *v;
            }
        }
        t
    }

    pub fn round_total(&self, round: u32, direction: Direction) -> Traffic {
        self.sum(|_, r, k| r == round && k.direction() == direction)
    }

    pub fn kind_total(&self, kind: MessageKind) -> Traffic {
        self.sum(|_, _, k| k == kind)
    }

    pub fn client_round(&self, client: u32, round: u32) -> Traffic {
        self.sum(|c, r, _| c == client && r == round)
    }

    pub fn total(&self) -> Traffic {
        self.sum(|_, _, _| true)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32, MessageKind), Traffic)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }
}

/// An in-process link. Every message is encoded, counted, optionally
/// appended to a transcript, and decoded again; the receiver only ever
/// sees the decoded copy.
#[derive(Debug, Default)]
pub struct Wire {
    pub ledger: TrafficLedger,
    transcript: Option<Vec<u8>>,
}

impl Wire {
    pub fn new(record_transcript: bool) -> Self {
        Self {
            ledger: TrafficLedger::default(),
            transcript: record_transcript.then(Vec::new),
        }
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<WireMessage, ProtocolError> {
        let frame = encode(msg)?;
        self.ledger
            .record(msg.client, msg.round, msg.kind(), frame.len());
        if let Some(t) = &mut self.transcript {
            transcript::append_frame(t, &frame);
        }
        Ok(decode(&frame)?)
    }

    /// Appends another link's ledger and transcript after this one's.
    pub fn absorb(&mut self, other: Wire) {
        self.ledger.merge(&other.ledger);
        if let (Some(mine), Some(theirs)) = (&mut self.transcript, other.transcript) {
            mine.extend(theirs);
        }
    }

    pub fn transcript(&self) -> Option<&[u8]> {
        self.transcript.as_deref()
    }

    pub fn take_transcript(&mut self) -> Option<Vec<u8>> {
        self.transcript.as_mut().map(std::mem::take)
    }
}

/// Offload target that reaches the server through a [`Wire`].
pub struct RemoteServer<'a> {
    pub server: &'a ServerState,
    pub wire: &'a mut Wire,
    pub round: usize,
    pub step: usize,
}

impl OffloadTarget for RemoteServer<'_> {
    fn classify(
        &mut self,
        client: usize,
        features: QuantizedTensor,
        depth: usize,
    ) -> Result<Tensor, String> {
        let request = WireMessage::new(
            self.round,
            self.step,
            client,
            Payload::InferenceFeature {
                depth: depth as u32,
                features,
            },
        );
        let received = self.wire.send(&request).map_err(|e| e.to_string())?;
        let Payload::InferenceFeature { depth, features } = received.payload else {
            return Err("unexpected request payload".into());
        };
        let logits = self
            .server
            .logits(&features.dequantize(), depth as usize)
            .map_err(|e| e.to_string())?;
        let reply = WireMessage::new(
            self.round,
            self.step,
            client,
            Payload::InferenceLogits { logits },
        );
        let received = self.wire.send(&reply).map_err(|e| e.to_string())?;
        self.step += 1;
        match received.payload {
            Payload::InferenceLogits { logits } => Ok(logits),
            _ => Err("unexpected reply payload".into()),
        }
    }
}

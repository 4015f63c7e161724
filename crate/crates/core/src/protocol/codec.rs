//! Binary frame format.
//!
//! ```text
//! frame  := version:u8 kind:u8 round:u32 step:u32 client:u32 body_len:u32 body crc:u32
//! body   := field*
//! field  := tag:u8 len:u32 bytes[len]
//! ```
//!
//! All integers and floats are little-endian. `crc` is CRC-32 (IEEE) over
//! every preceding byte of the frame. Each message kind has a fixed field
//! schema; see [`schema_matches`].

use crate::client::QuantizedTensor;
use crate::nn::{Head, ParamBlock, Tensor};

use super::{MessageKind, ModelPayload, PairIndicator, Payload, WireMessage};

pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 1 + 1 + 4 + 4 + 4 + 4;
pub const TRAILER_LEN: usize = 4;

/// Field tags.
pub mod tag {
    pub const DEPTH: u8 = 0x01;
    pub const QUANTIZED: u8 = 0x02;
    pub const DENSE: u8 = 0x03;
    pub const INDICATOR: u8 = 0x04;
    pub const BLOCK: u8 = 0x05;
    pub const HEAD: u8 = 0x06;
    /// Reserved for class labels. No payload type produces it; decoders
    /// reject it and the audit reports it.
    pub const LABELS: u8 = 0x4C;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("{kind:?} payload has an empty {field}")]
    EmptyPayload {
        kind: MessageKind,
        field: &'static str,
    },
    #[error("indicator has {found} bits for {expected} feature rows")]
    IndicatorLength { expected: usize, found: usize },
    #[error("{0} does not fit the frame format")]
    TooLarge(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    Truncated,
    Version(u8),
    UnknownKind(u8),
    Checksum,
    UnknownField(u8),
    LabelField,
    Schema(String),
    Invalid(String),
    TrailingBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decode error at byte {offset}: {kind:?}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

fn err(offset: usize, kind: DecodeErrorKind) -> DecodeError {
    DecodeError { offset, kind }
}

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Writes frames field by field. [`encode`] is built on it; it is public so
/// tooling and tests can produce frames outside the typed schema.
#[derive(Debug)]
pub struct FrameBuilder {
    buf: Vec<u8>,
}

impl FrameBuilder {
    pub fn new(kind_byte: u8, round: u32, step: u32, client: u32) -> Self {
        Self::with_version(WIRE_VERSION, kind_byte, round, step, client)
    }

    pub fn with_version(version: u8, kind_byte: u8, round: u32, step: u32, client: u32) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.push(version);
        buf.push(kind_byte);
        buf.extend_from_slice(&round.to_le_bytes());
        buf.extend_from_slice(&step.to_le_bytes());
        buf.extend_from_slice(&client.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        Self { buf }
    }

    pub fn field(&mut self, tag: u8, bytes: &[u8]) -> &mut Self {
        self.buf.push(tag);
        self.buf
            .extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let body_len = (self.buf.len() - HEADER_LEN) as u32;
        self.buf[HEADER_LEN - 4..HEADER_LEN].copy_from_slice(&body_len.to_le_bytes());
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), EncodeError> {
    let v = u32::try_from(v).map_err(|_| EncodeError::TooLarge("dimension"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) -> Result<(), EncodeError> {
    let rank = u8::try_from(shape.len()).map_err(|_| EncodeError::TooLarge("rank"))?;
    out.push(rank);
    for &d in shape {
        put_u32(out, d)?;
    }
    Ok(())
}

fn quantized_bytes(q: &QuantizedTensor) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    put_shape(&mut out, &q.shape)?;
    out.push(u8::try_from(q.bits).map_err(|_| EncodeError::TooLarge("bit width"))?);
    put_f64s(&mut out, &[q.lo, q.hi]);
    out.extend(pack_codes(&q.codes, q.bits));
    Ok(out)
}

fn dense_bytes(t: &Tensor) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(1 + 4 * t.shape().len() + 8 * t.len());
    put_shape(&mut out, t.shape())?;
    put_f64s(&mut out, t.data());
    Ok(out)
}

fn block_bytes(b: &ParamBlock) -> Result<Vec<u8>, EncodeError> {
    let (i, o) = b.dims();
    let mut out = Vec::new();
    put_u32(&mut out, b.depth)?;
    put_u32(&mut out, i)?;
    put_u32(&mut out, o)?;
    put_f64s(&mut out, b.weights.data());
    put_f64s(&mut out, b.bias.data());
    Ok(out)
}

fn head_bytes(h: &Head) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    put_u32(&mut out, h.in_dim())?;
    put_u32(&mut out, h.classes())?;
    put_f64s(&mut out, h.weights.data());
    put_f64s(&mut out, h.bias.data());
    Ok(out)
}

/// Packs `bits`-wide codes LSB-first.
pub fn pack_codes(codes: &[u32], bits: u32) -> Vec<u8> {
    let total_bits = codes.len() * bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_codes(bytes: &[u8], count: usize, bits: u32) -> Vec<u32> {
    let mut codes = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut c = 0u32;
        for b in 0..bits {
            if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                c |= 1 << b;
            }
            pos += 1;
        }
        codes.push(c);
    }
    codes
}

fn indicator_bytes(bits: &[bool]) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    put_u32(&mut out, bits.len())?;
    let mut packed = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend(packed);
    Ok(out)
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    let kind = msg.kind();
    let empty = |field| EncodeError::EmptyPayload { kind, field };
    let mut fb = FrameBuilder::new(kind as u8, msg.round, msg.step, msg.client);
    match &msg.payload {
        Payload::FeaturePair {
            exit_depth,
            features,
            indicator,
        } => {
            if features.is_empty() {
                return Err(empty("feature tensor"));
            }
            if indicator.is_empty() {
                return Err(empty("indicator"));
            }
            let rows = features.shape.first().copied().unwrap_or(0);
            if indicator.len() != rows {
                return Err(EncodeError::IndicatorLength {
                    expected: rows,
                    found: indicator.len(),
                });
            }
            fb.field(tag::DEPTH, &exit_depth.to_le_bytes());
            fb.field(tag::QUANTIZED, &quantized_bytes(features)?);
            fb.field(tag::INDICATOR, &indicator_bytes(indicator.bits())?);
        }
        Payload::TaskFeature {
            split_depth: depth,
            features,
        }
        | Payload::InferenceFeature { depth, features } => {
            if features.is_empty() {
                return Err(empty("feature tensor"));
            }
            fb.field(tag::DEPTH, &depth.to_le_bytes());
            fb.field(tag::QUANTIZED, &quantized_bytes(features)?);
        }
        Payload::TaskLogits { logits: t }
        | Payload::UpstreamGrad { grad: t }
        | Payload::CutGrad { grad: t }
        | Payload::InferenceLogits { logits: t } => {
            if t.is_empty() {
                return Err(empty("tensor"));
            }
            fb.field(tag::DENSE, &dense_bytes(t)?);
        }
        Payload::ModelUpload(m) | Payload::ModelDownload(m) => {
            if m.blocks.is_empty() {
                return Err(empty("block list"));
            }
            fb.field(tag::DEPTH, &m.split_depth.to_le_bytes());
            for b in &m.blocks {
                fb.field(tag::BLOCK, &block_bytes(b)?);
            }
            fb.field(tag::HEAD, &head_bytes(&m.head)?);
        }
    }
    Ok(fb.finish())
}

/// A structurally valid frame whose fields have not been interpreted yet.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame<'a> {
    pub version: u8,
    pub kind_byte: u8,
    pub round: u32,
    pub step: u32,
    pub client: u32,
    /// `(tag, absolute offset of the field's bytes, bytes)`.
    pub fields: Vec<(u8, usize, &'a [u8])>,
    pub len: usize,
}

impl RawFrame<'_> {
    pub fn kind(&self) -> Option<MessageKind> {
        MessageKind::from_byte(self.kind_byte)
    }

    pub fn tags(&self) -> Vec<u8> {
        self.fields.iter().map(|f| f.0).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            base,
        }
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < n {
            return Err(err(self.offset(), DecodeErrorKind::Truncated));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DecodeError> {
        let at = self.offset();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or(err(at, DecodeErrorKind::Truncated))?,
        )?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(at, DecodeErrorKind::Invalid("non-finite value".into())));
        }
        Ok(values)
    }

    fn done(&self) -> Result<(), DecodeError> {
        if self.pos != self.bytes.len() {
            return Err(err(self.offset(), DecodeErrorKind::TrailingBytes));
        }
        Ok(())
    }

    fn shape(&mut self) -> Result<Vec<usize>, DecodeError> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let at = self.offset();
        shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= self.bytes.len() * 8)
            .ok_or(err(
                at,
                DecodeErrorKind::Invalid("implausible shape".into()),
            ))?;
        Ok(shape)
    }
}

/// Splits one frame at the start of `bytes` into header and fields and
/// verifies its checksum. `base` is added to reported offsets.
pub fn parse_frame(bytes: &[u8], base: usize) -> Result<RawFrame<'_>, DecodeError> {
    let mut r = Reader::new(bytes, base);
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(err(base, DecodeErrorKind::Version(version)));
    }
    let kind_byte = r.u8()?;
    let round = r.u32()?;
    let step = r.u32()?;
    let client = r.u32()?;
    let body_len = r.u32()? as usize;
    let body_start = r.pos;
    let body = r.take(body_len)?;
    let crc_at = r.offset();
    let crc = r.u32()?;
    let len = r.pos;
    if crc32(&bytes[..len - TRAILER_LEN]) != crc {
        return Err(err(crc_at, DecodeErrorKind::Checksum));
    }
    if MessageKind::from_byte(kind_byte).is_none() {
        return Err(err(base + 1, DecodeErrorKind::UnknownKind(kind_byte)));
    }
    let mut fields = Vec::new();
    let mut br = Reader::new(body, base + body_start);
    while br.pos < body.len() {
        let t = br.u8()?;
        let n = br.u32()? as usize;
        let at = br.offset();
        let data = br.take(n)?;
        fields.push((t, at, data));
    }
    Ok(RawFrame {
        version,
        kind_byte,
        round,
        step,
        client,
        fields,
        len,
    })
}

/// Expected field tags for a message kind.
pub fn schema_matches(kind: MessageKind, tags: &[u8]) -> bool {
    use MessageKind::*;
    match kind {
        FeaturePair => tags == [tag::DEPTH, tag::QUANTIZED, tag::INDICATOR],
        TaskFeature | InferenceFeature => tags == [tag::DEPTH, tag::QUANTIZED],
        TaskLogits | UpstreamGrad | CutGrad | InferenceLogits => tags == [tag::DENSE],
        ModelUpload | ModelDownload => {
            tags.len() >= 3
                && tags[0] == tag::DEPTH
                && tags[tags.len() - 1] == tag::HEAD
                && tags[1..tags.len() - 1].iter().all(|&t| t == tag::BLOCK)
        }
    }
}

fn read_depth(data: &[u8], at: usize) -> Result<u32, DecodeError> {
    let mut r = Reader::new(data, at);
    let v = r.u32()?;
    r.done()?;
    Ok(v)
}

fn read_quantized(data: &[u8], at: usize) -> Result<QuantizedTensor, DecodeError> {
    let mut r = Reader::new(data, at);
    let shape = r.shape()?;
    let bits_at = r.offset();
    let bits = r.u8()? as u32;
    if bits == 0 || bits > crate::client::MAX_BITS {
        return Err(err(
            bits_at,
            DecodeErrorKind::Invalid(format!("bit width {bits}")),
        ));
    }
    let lo = r.f64()?;
    let hi = r.f64()?;
    if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
        return Err(err(
            bits_at + 1,
            DecodeErrorKind::Invalid("quantizer range".into()),
        ));
    }
    let count: usize = shape.iter().product();
    let packed = r.take((count * bits as usize).div_ceil(8))?;
    r.done()?;
    Ok(QuantizedTensor {
        shape,
        bits,
        lo,
        hi,
        codes: unpack_codes(packed, count, bits),
    })
}

fn read_dense(data: &[u8], at: usize) -> Result<Tensor, DecodeError> {
    let mut r = Reader::new(data, at);
    let shape = r.shape()?;
    let values = r.f64s(shape.iter().product())?;
    r.done()?;
    Tensor::new(shape, values).map_err(|e| err(at, DecodeErrorKind::Invalid(e.to_string())))
}

fn read_indicator(data: &[u8], at: usize) -> Result<PairIndicator, DecodeError> {
    let mut r = Reader::new(data, at);
    let count = r.u32()? as usize;
    let packed = r.take(count.div_ceil(8))?;
    r.done()?;
    Ok(PairIndicator::new(
        (0..count)
            .map(|i| (packed[i / 8] >> (i % 8)) & 1 == 1)
            .collect(),
    ))
}

fn read_block(data: &[u8], at: usize) -> Result<ParamBlock, DecodeError> {
    let mut r = Reader::new(data, at);
    let depth = r.u32()? as usize;
    let i = r.u32()? as usize;
    let o = r.u32()? as usize;
    let w = r.f64s(
        i.checked_mul(o)
            .ok_or(err(at, DecodeErrorKind::Truncated))?,
    )?;
    let b = r.f64s(o)?;
    r.done()?;
    Ok(ParamBlock {
        depth,
        weights: Tensor::matrix(i, o, w),
        bias: Tensor::vector(b),
    })
}

fn read_head(data: &[u8], at: usize) -> Result<Head, DecodeError> {
    let mut r = Reader::new(data, at);
    let i = r.u32()? as usize;
    let o = r.u32()? as usize;
    let w = r.f64s(
        i.checked_mul(o)
            .ok_or(err(at, DecodeErrorKind::Truncated))?,
    )?;
    let b = r.f64s(o)?;
    r.done()?;
    Ok(Head {
        weights: Tensor::matrix(i, o, w),
        bias: Tensor::vector(b),
    })
}

/// Interprets a parsed frame according to its kind's schema.
pub fn interpret(frame: &RawFrame<'_>, base: usize) -> Result<WireMessage, DecodeError> {
    let kind = frame
        .kind()
        .ok_or(err(base + 1, DecodeErrorKind::UnknownKind(frame.kind_byte)))?;
    for &(t, at, _) in &frame.fields {
        match t {
            tag::LABELS => return Err(err(at, DecodeErrorKind::LabelField)),
            tag::DEPTH | tag::QUANTIZED | tag::DENSE | tag::INDICATOR | tag::BLOCK | tag::HEAD => {}
            other => return Err(err(at, DecodeErrorKind::UnknownField(other))),
        }
    }
    if !schema_matches(kind, &frame.tags()) {
        return Err(err(
            base + HEADER_LEN,
            DecodeErrorKind::Schema(format!("{kind:?} with fields {:?}", frame.tags())),
        ));
    }
    let f = &frame.fields;
    let payload = match kind {
        MessageKind::FeaturePair => {
            let features = read_quantized(f[1].2, f[1].1)?;
            let indicator = read_indicator(f[2].2, f[2].1)?;
            if indicator.len() != features.shape.first().copied().unwrap_or(0) {
                return Err(err(
                    f[2].1,
                    DecodeErrorKind::Invalid("indicator length".into()),
                ));
            }
            Payload::FeaturePair {
                exit_depth: read_depth(f[0].2, f[0].1)?,
                features,
                indicator,
            }
        }
        MessageKind::TaskFeature => Payload::TaskFeature {
            split_depth: read_depth(f[0].2, f[0].1)?,
            features: read_quantized(f[1].2, f[1].1)?,
        },
        MessageKind::InferenceFeature => Payload::InferenceFeature {
            depth: read_depth(f[0].2, f[0].1)?,
            features: read_quantized(f[1].2, f[1].1)?,
        },
        MessageKind::TaskLogits => Payload::TaskLogits {
            logits: read_dense(f[0].2, f[0].1)?,
        },
        MessageKind::UpstreamGrad => Payload::UpstreamGrad {
            grad: read_dense(f[0].2, f[0].1)?,
        },
        MessageKind::CutGrad => Payload::CutGrad {
            grad: read_dense(f[0].2, f[0].1)?,
        },
        MessageKind::InferenceLogits => Payload::InferenceLogits {
            logits: read_dense(f[0].2, f[0].1)?,
        },
        MessageKind::ModelUpload | MessageKind::ModelDownload => {
            let split_depth = read_depth(f[0].2, f[0].1)?;
            let blocks = f[1..f.len() - 1]
                .iter()
                .map(|&(_, at, d)| read_block(d, at))
                .collect::<Result<Vec<_>, _>>()?;
            let last = f[f.len() - 1];
            let model = ModelPayload {
                split_depth,
                blocks,
                head: read_head(last.2, last.1)?,
            };
            if kind == MessageKind::ModelUpload {
                Payload::ModelUpload(model)
            } else {
                Payload::ModelDownload(model)
            }
        }
    };
    Ok(WireMessage {
        round: frame.round,
        step: frame.step,
        client: frame.client,
        payload,
    })
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    let frame = parse_frame(bytes, 0)?;
    if frame.len != bytes.len() {
        return Err(err(frame.len, DecodeErrorKind::TrailingBytes));
    }
    interpret(&frame, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_reference_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn code_packing_round_trips() {
        for bits in [1, 3, 8, 13, 32] {
            let max = if bits == 32 {
                u32::MAX
            } else {
                (1u32 << bits) - 1
            };
            let codes: Vec<u32> = (0..37u32)
                .map(|i| i.wrapping_mul(2_654_435_761) & max)
                .collect();
            let packed = pack_codes(&codes, bits);
            assert_eq!(packed.len(), (37 * bits as usize).div_ceil(8));
            assert_eq!(unpack_codes(&packed, codes.len(), bits), codes);
        }
    }
}

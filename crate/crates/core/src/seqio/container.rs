//! EMDF container: `"EMDF"`, u16 version, u32 header length, UTF-8 JSON
//! header, then a row-major little-endian f32 payload of `T×D` values.
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ChannelMap, ContentTrack, ExpressionSequence};
use crate::error::{Error, Result};

pub const EMDF_MAGIC: &[u8; 4] = b"EMDF";
pub const EMDF_VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;

/// What the payload of a container holds. Absent in the header means
/// `expression`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    #[default]
    Expression,
    Content,
    Audio,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub fps: f64,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_map: Option<ChannelMap>,
    #[serde(default)]
    pub subject_id: String,
    #[serde(default)]
    pub emotion_class: Option<usize>,
    #[serde(default)]
    pub kind: ContainerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme_ids: Option<Vec<u32>>,
}

pub fn encode_container(header: &ContainerHeader, payload: &Array2<f32>) -> Result<Vec<u8>> {
    if payload.dim() != (header.t, header.d) {
        return Err(Error::invalid(format!(
            "payload shape {:?} does not match header T={} D={}",
            payload.dim(),
            header.t,
            header.d
        )));
    }
    let json = serde_json::to_vec(header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::invalid("container header exceeds u32 length"))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len() * 4);
    out.extend_from_slice(EMDF_MAGIC);
    out.extend_from_slice(&EMDF_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Decode {
        offset,
        reason: reason.into(),
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<(ContainerHeader, Array2<f32>)> {
    if bytes.len() < 4 {
        return Err(decode_err(0, "truncated before end of magic bytes"));
    }
    if &bytes[..4] != EMDF_MAGIC {
        return Err(decode_err(0, "bad magic bytes, expected \"EMDF\""));
    }
    if bytes.len() < 6 {
        return Err(decode_err(4, "truncated format version"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMDF_VERSION {
        return Err(decode_err(4, format!("unknown format version {version}")));
    }
    if bytes.len() < PREAMBLE {
        return Err(decode_err(6, "truncated header length"));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .ok_or_else(|| decode_err(6, "header length overflows"))?;
    if bytes.len() < payload_start {
        return Err(decode_err(
            PREAMBLE,
            format!(
                "header declares {header_len} bytes but only {} remain",
                bytes.len() - PREAMBLE
            ),
        ));
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| decode_err(PREAMBLE, format!("malformed JSON header: {e}")))?;
    if header.t == 0 || header.d == 0 {
        return Err(decode_err(PREAMBLE, "header declares an empty payload shape"));
    }
    let expected = header
        .t
        .checked_mul(header.d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| decode_err(PREAMBLE, "payload size overflows"))?;
    let found = bytes.len() - payload_start;
    if found < expected {
        return Err(decode_err(
            payload_start,
            format!("payload truncated: expected {expected} bytes, found {found}"),
        ));
    }
    if found > expected {
        return Err(decode_err(
            payload_start + expected,
            format!("{} trailing bytes after payload", found - expected),
        ));
    }
    let values: Vec<f32> = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let payload = Array2::from_shape_vec((header.t, header.d), values)
        .map_err(|e| decode_err(payload_start, e.to_string()))?;
    Ok((header, payload))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_kind(path: &Path, kind: ContainerKind) -> Result<(ContainerHeader, Array2<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = decode_container(&bytes)?;
    if header.kind != kind {
        return Err(decode_err(
            PREAMBLE,
            format!("expected a {kind:?} container, found {:?}", header.kind),
        ));
    }
    Ok((header, payload))
}

pub fn write_sequence(seq: &ExpressionSequence, path: impl AsRef<Path>) -> Result<()> {
    seq.validate()?;
    let header = ContainerHeader {
        fps: seq.fps,
        t: seq.len(),
        d: seq.channels(),
        channel_map: Some(seq.channel_map.clone()),
        subject_id: seq.subject_id.clone(),
        emotion_class: seq.emotion_class,
        kind: ContainerKind::Expression,
        phoneme_ids: None,
    };
    write_bytes(path.as_ref(), &encode_container(&header, &seq.frames)?)
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<ExpressionSequence> {
    let (header, frames) = read_kind(path.as_ref(), ContainerKind::Expression)?;
    let channel_map = header
        .channel_map
        .ok_or_else(|| decode_err(PREAMBLE, "expression container lacks channel_map"))?;
    ExpressionSequence::new(
        frames,
        header.fps,
        channel_map,
        header.subject_id,
        header.emotion_class,
    )
    .map_err(|e| decode_err(PREAMBLE, e.to_string()))
}

pub fn write_content(
    track: &ContentTrack,
    fps: f64,
    subject_id: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = ContainerHeader {
        fps,
        t: track.len(),
        d: track.features.ncols(),
        channel_map: None,
        subject_id: subject_id.to_string(),
        emotion_class: None,
        kind: ContainerKind::Content,
        phoneme_ids: Some(track.phoneme_ids.clone()),
    };
    write_bytes(path.as_ref(), &encode_container(&header, &track.features)?)
}

/// Returns the track together with its subject id.
pub fn read_content(path: impl AsRef<Path>) -> Result<(ContentTrack, String)> {
    let (header, features) = read_kind(path.as_ref(), ContainerKind::Content)?;
    let ids = header
        .phoneme_ids
        .ok_or_else(|| decode_err(PREAMBLE, "content container lacks phoneme_ids"))?;
    let track = ContentTrack::new(ids, features).map_err(|e| decode_err(PREAMBLE, e.to_string()))?;
    Ok((track, header.subject_id))
}

pub fn write_audio(
    features: &Array2<f32>,
    fps: f64,
    emotion_class: Option<usize>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let header = ContainerHeader {
        fps,
        t: features.nrows(),
        d: features.ncols(),
        channel_map: None,
        subject_id: String::new(),
        emotion_class,
        kind: ContainerKind::Audio,
        phoneme_ids: None,
    };
    write_bytes(path.as_ref(), &encode_container(&header, features)?)
}

pub fn read_audio(path: impl AsRef<Path>) -> Result<(Array2<f32>, Option<usize>)> {
    let (header, features) = read_kind(path.as_ref(), ContainerKind::Audio)?;
    Ok((features, header.emotion_class))
}

pub fn write_residual(residual: &Array2<f32>, fps: f64, path: impl AsRef<Path>) -> Result<()> {
    let header = ContainerHeader {
        fps,
        t: residual.nrows(),
        d: residual.ncols(),
        channel_map: None,
        subject_id: String::new(),
        emotion_class: None,
        kind: ContainerKind::Residual,
        phoneme_ids: None,
    };
    write_bytes(path.as_ref(), &encode_container(&header, residual)?)
}

pub fn read_residual(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    Ok(read_kind(path.as_ref(), ContainerKind::Residual)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zeros_seq(t: usize) -> ExpressionSequence {
        ExpressionSequence::new(
            Array2::zeros((t, 53)),
            25.0,
            ChannelMap::flame_default(),
            "S00",
            Some(3),
        )
        .unwrap()
    }

    #[test]
    fn single_zero_frame_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.emdf");
        let seq = zeros_seq(1);
        write_sequence(&seq, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), PREAMBLE + header_len + 212);
        assert_eq!(read_sequence(&path).unwrap(), seq);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let seq = zeros_seq(4);
        let header = ContainerHeader {
            fps: 25.0,
            t: 4,
            d: 53,
            channel_map: Some(seq.channel_map.clone()),
            subject_id: "S00".into(),
            emotion_class: Some(3),
            kind: ContainerKind::Expression,
            phoneme_ids: None,
        };
        let mut bytes = encode_container(&header, &seq.frames).unwrap();
        let full = bytes.len();
        bytes.truncate(full - 5);
        match decode_container(&bytes) {
            Err(Error::Decode { offset, reason }) => {
                assert_eq!(offset, full - 4 * 53 * 4);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let seq = zeros_seq(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emdf");
        write_sequence(&seq, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_container(&bytes), Err(Error::Decode { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_container(&bytes), Err(Error::Decode { offset: 0, .. })));
        assert!(matches!(decode_container(&bytes[..3]), Err(Error::Decode { offset: 0, .. })));
    }

    #[test]
    fn header_length_mismatch_is_reported() {
        let seq = zeros_seq(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emdf");
        write_sequence(&seq, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[6..10].copy_from_slice(&(u32::MAX / 2).to_le_bytes());
        assert!(matches!(decode_container(&bytes), Err(Error::Decode { offset: 10, .. })));
        // trailing garbage after the payload
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(decode_container(&bytes), Err(Error::Decode { offset, .. }) if offset == n));
    }

    #[test]
    fn kind_mismatch_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emdf");
        write_audio(&Array2::ones((3, 4)), 25.0, Some(1), &path).unwrap();
        assert!(read_sequence(&path).is_err());
        let (a, k) = read_audio(&path).unwrap();
        assert_eq!(a, Array2::<f32>::ones((3, 4)));
        assert_eq!(k, Some(1));
    }

    #[test]
    fn content_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.emdf");
        let track = ContentTrack::new(vec![1, 1, 4], Array2::from_elem((3, 5), 0.25)).unwrap();
        write_content(&track, 25.0, "S07", &path).unwrap();
        let (back, subject) = read_content(&path).unwrap();
        assert_eq!(back, track);
        assert_eq!(subject, "S07");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_is_bit_exact(
            t in 1usize..12,
            vals in proptest::collection::vec(-1.0e6f32..1.0e6, 12 * 8),
            class in proptest::option::of(0usize..8),
            subject in "[A-Za-z0-9_]{0,10}",
        ) {
            let map = ChannelMap::contiguous(5, 2);
            let frames = Array2::from_shape_fn((t, 8), |(i, j)| vals[i * 8 + j]);
            let seq = ExpressionSequence::new(frames, 30.0, map, subject, class).unwrap();
            let bytes = {
                let h = ContainerHeader {
                    fps: seq.fps, t, d: 8, channel_map: Some(seq.channel_map.clone()),
                    subject_id: seq.subject_id.clone(), emotion_class: seq.emotion_class,
                    kind: ContainerKind::Expression, phoneme_ids: None,
                };
                encode_container(&h, &seq.frames).unwrap()
            };
            let (h, payload) = decode_container(&bytes).unwrap();
            prop_assert_eq!(h.subject_id, seq.subject_id.clone());
            prop_assert_eq!(h.emotion_class, seq.emotion_class);
            for (a, b) in payload.iter().zip(seq.frames.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

//! Binary feature-file format (`.ddnf`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DDNF" | version u16 | T u32 | D_sem u32 | D_tex u32 | domain_id u32
//! | video_label u8 | frame_labels T×u8 | semantic T·D_sem×f32 | textural T·D_tex×f32
//! | crc32 u32
//! ```
//!
//! The checksum covers every byte after the magic+version header and before
//! the checksum itself, so any single-bit corruption of dimensions, labels, or
//! feature data is detected before the payload is interpreted.

use std::path::{Path, PathBuf};

use super::{DataError, FeatureSequence, Result};

pub(crate) const MAGIC: [u8; 4] = *b"DDNF";
pub(crate) const FORMAT_VERSION: u16 = 1;

/// Serialize a sequence to the on-disk byte layout.
pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let t = seq.frames();
    let mut payload = Vec::with_capacity(17 + t + 4 * t * (seq.d_sem() + seq.d_tex()));
    payload.extend_from_slice(&(t as u32).to_le_bytes());
    payload.extend_from_slice(&(seq.d_sem() as u32).to_le_bytes());
    payload.extend_from_slice(&(seq.d_tex() as u32).to_le_bytes());
    payload.extend_from_slice(&seq.domain_id().to_le_bytes());
    payload.push(u8::from(seq.video_label()));
    payload.extend(seq.frame_labels().iter().map(|&b| u8::from(b)));
    for &v in seq.semantic() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for &v in seq.textural() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);

    let mut bytes = Vec::with_capacity(6 + payload.len() + 4);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

/// Parse the byte layout back into a sequence. The format does not store the
/// video id; callers supply it (file readers use the file stem).
pub fn decode_features(bytes: &[u8], video_id: impl Into<String>) -> Result<FeatureSequence> {
    let mut r = Reader { buf: bytes, pos: 0 };

    let magic: [u8; 4] = r.take(4)?.try_into().expect("4-byte read");
    if magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2-byte read"));
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }

    let t = r.take_u32()? as usize;
    let d_sem = r.take_u32()? as usize;
    let d_tex = r.take_u32()? as usize;
    let domain_id = r.take_u32()?;
    let video_label_byte = r.take(1)?[0];

    // Fixed header is parsed; everything that remains has a size implied by
    // (t, d_sem, d_tex). Check it before allocating or interpreting anything.
    let body = (t as u64)
        .checked_mul(1 + 4 * (d_sem as u64 + d_tex as u64))
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| DataError::Malformed("declared dimensions overflow".into()))?;
    let expected_total = r.pos as u64 + body;
    if (bytes.len() as u64) < expected_total {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            needed: (expected_total - bytes.len() as u64) as usize,
        });
    }
    if bytes.len() as u64 > expected_total {
        return Err(DataError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() as u64 - expected_total
        )));
    }

    // Verify the checksum before trusting label bytes or float payloads.
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4-byte read"));
    let computed = crc32fast::hash(&bytes[6..bytes.len() - 4]);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { stored, computed });
    }

    let mut frame_labels = Vec::with_capacity(t);
    for (i, &b) in r.take(t)?.iter().enumerate() {
        match b {
            0 => frame_labels.push(false),
            1 => frame_labels.push(true),
            other => {
                return Err(DataError::Malformed(format!(
                    "frame label byte {other} at frame {i} (want 0 or 1)"
                )))
            }
        }
    }

    let semantic = r.take_f32s(t * d_sem)?;
    let textural = r.take_f32s(t * d_tex)?;

    let seq = FeatureSequence::new(
        video_id, d_sem, d_tex, semantic, textural, frame_labels, domain_id,
    )?;
    if seq.video_label() != (video_label_byte != 0) {
        return Err(DataError::Malformed(format!(
            "video label byte {video_label_byte} disagrees with frame labels"
        )));
    }
    Ok(seq)
}

/// Write a sequence to `path` in the binary layout.
pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(seq)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a sequence from `path`; the video id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_features(&bytes, video_id)
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: PathBuf::from(path),
        source,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(DataError::Truncated {
            offset: self.pos,
            needed: n,
        })?;
        if end > self.buf.len() {
            return Err(DataError::Truncated {
                offset: self.buf.len(),
                needed: end - self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4-byte read"),
        ))
    }

    fn take_f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect())
    }
}

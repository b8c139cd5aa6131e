//! Minimal RIFF/WAVE reader and writer, restricted to 16-bit PCM mono.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn bad(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Decodes 16-bit PCM mono samples scaled to `[-1, 1)`.
///
/// Fails unless the header declares `expected_rate`.
pub fn decode_wav(bytes: &[u8], expected_rate: u32, path: &Path) -> Result<Vec<f32>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(path, 0, "not a RIFF/WAVE file"));
    }
    let mut off = 12;
    let mut format_seen = false;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4) as usize;
        let body = off + 8;
        if body + size > bytes.len() {
            return Err(bad(path, off, format!("chunk {:?} overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad(path, off, "fmt chunk too short"));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != 1 {
                    return Err(bad(path, body, format!("audio format {format} is not PCM")));
                }
                if channels != 1 {
                    return Err(bad(path, body + 2, format!("{channels} channels, expected mono")));
                }
                if rate != expected_rate {
                    return Err(bad(path, body + 4, format!("sample rate {rate} Hz, expected {expected_rate} Hz")));
                }
                if bits != 16 {
                    return Err(bad(path, body + 14, format!("{bits}-bit samples, expected 16")));
                }
                format_seen = true;
            }
            b"data" => {
                if !format_seen {
                    return Err(bad(path, off, "data chunk before fmt chunk"));
                }
                return Ok(bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect());
            }
            _ => {}
        }
        off = body + size + (size & 1);
    }
    Err(bad(path, bytes.len(), "no data chunk"))
}

pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_wav(&bytes, expected_rate, path)
}

/// Encodes samples in `[-1, 1]` as 16-bit PCM mono.
pub fn encode_wav(samples: &[f32], rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

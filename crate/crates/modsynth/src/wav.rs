//! Mono RIFF/WAVE reading (32-bit float or 16-bit PCM) and writing
//! (32-bit float).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding of a written file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Float32,
    Pcm16,
}

/// Decoded mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Encodes `samples` as a mono WAV file image. Values outside `[-1, 1]` are
/// clipped with a logged warning.
pub fn encode(samples: &[f64], sample_rate: u32, encoding: Encoding) -> Result<Vec<u8>, modsynth_core::Error> {
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(modsynth_core::Error::NumericDomain {
            op: "write_wav",
            detail: format!("sample {i} is not finite"),
        });
    }
    let clipped = samples.iter().filter(|s| s.abs() > 1.0).count();
    if clipped > 0 {
        log::warn!("clipping {clipped} samples outside [-1, 1]");
    }
    let (format, bits) = match encoding {
        Encoding::Float32 => (FORMAT_FLOAT, 32u16),
        Encoding::Pcm16 => (FORMAT_PCM, 16u16),
    };
    let block = bits / 8;
    let data_len = samples.len() as u32 * block as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let s = s.clamp(-1.0, 1.0);
        match encoding {
            Encoding::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
            Encoding::Pcm16 => out.extend_from_slice(&((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_wav_with(path, samples, sample_rate, Encoding::Float32)
}

pub fn write_wav_with(path: &Path, samples: &[f64], sample_rate: u32, encoding: Encoding) -> Result<()> {
    let bytes = encode(samples, sample_rate, encoding)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a mono WAV file with 32-bit float or 16-bit PCM samples.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Decodes a WAV file image.
pub fn decode(bytes: &[u8]) -> Result<Audio, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(len).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                end.ok_or("truncated fmt chunk")?;
                if len < 16 {
                    return Err("fmt chunk too short".into());
                }
                let mut format = u16_at(bytes, body);
                if format == FORMAT_EXTENSIBLE && len >= 26 {
                    format = u16_at(bytes, body + 24);
                }
                fmt = Some((format, u16_at(bytes, body + 2), u32_at(bytes, body + 4), u16_at(bytes, body + 14)));
            }
            b"data" => {
                let (format, channels, sample_rate, bits) = fmt.ok_or("data chunk before fmt chunk")?;
                if channels != 1 {
                    return Err(format!("expected 1 channel, found {channels}"));
                }
                // Tolerate a data length running past the end of the file.
                let data = &bytes[body..end.unwrap_or(bytes.len())];
                let samples = match (format, bits) {
                    (FORMAT_FLOAT, 32) => data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect(),
                    (FORMAT_PCM, 16) => data
                        .chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                        .collect(),
                    (f, b) => return Err(format!("unsupported sample format {f} with {b} bits")),
                };
                return Ok(Audio { samples, sample_rate });
            }
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    Err("no data chunk".into())
}

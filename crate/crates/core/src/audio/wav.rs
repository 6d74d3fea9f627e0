use std::path::Path;

use super::{AudioError, Waveform, SAMPLE_RATE};

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

/// Parses a little-endian RIFF/WAVE file holding 16-bit PCM at 16 kHz.
///
/// Samples are scaled by 1/32768; stereo frames are averaged to mono.
/// Chunks other than `fmt ` and `data` are skipped.
pub fn read_wav(bytes: &[u8], source_id: &str) -> Result<Waveform, AudioError> {
    let bad = |m: &str| AudioError::Format(format!("{source_id}: {m}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE magic"));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated chunk"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too small"));
                }
                let code = u16_at(body, 0);
                if code != 1 {
                    return Err(bad(&format!("format code {code} is not PCM (1)")));
                }
                let channels = u16_at(body, 2);
                let sample_rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if bits != 16 {
                    return Err(bad(&format!("unsupported bit depth {bits}")));
                }
                if !(1..=2).contains(&channels) {
                    return Err(bad(&format!("unsupported channel count {channels}")));
                }
                format = Some(Format { channels, sample_rate });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let format = format.ok_or_else(|| bad("no fmt chunk"))?;
    if format.sample_rate != SAMPLE_RATE {
        return Err(AudioError::Rate(format.sample_rate));
    }
    let data = data.ok_or_else(|| bad("no data chunk"))?;
    let frame = 2 * format.channels as usize;
    let samples: Vec<f32> = data
        .chunks_exact(frame)
        .map(|f| {
            let sum: i32 = f.chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]]) as i32).sum();
            sum as f32 / (32768.0 * format.channels as f32)
        })
        .collect();
    Waveform::new(samples, format.sample_rate, source_id)
}

pub fn read_wav_file(path: &Path) -> Result<Waveform, AudioError> {
    let bytes = std::fs::read(path).map_err(|source| AudioError::Io { path: path.display().to_string(), source })?;
    let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    read_wav(&bytes, &id)
}

/// Encodes mono 16-bit PCM; samples are clamped to `[-1, 1)` and rounded to
/// the nearest multiple of 1/32768.
pub fn write_wav(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav_file(path: &Path, w: &Waveform) -> Result<(), AudioError> {
    std::fs::write(path, write_wav(w)).map_err(|source| AudioError::Io { path: path.display().to_string(), source })
}

//! 16-bit PCM mono WAV files.

use std::fs;
use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;

fn le16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Decodes a RIFF/WAVE byte buffer. `path` is only used in error messages.
pub fn wav_decode(bytes: &[u8], path: &Path) -> Result<Waveform> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        let name = String::from_utf8_lossy(id).into_owned();
        if body + size > bytes.len() {
            return Err(bad(format!(
                "chunk '{name}' is truncated ({size} bytes declared, {} present)",
                bytes.len() - body
            )));
        }
        let chunk = &bytes[body..body + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad(format!("chunk 'fmt ' is truncated ({size} bytes)")));
                }
                fmt = Some((le16(&chunk[0..2]), le16(&chunk[2..4]), le32(&chunk[4..8]), le16(&chunk[14..16])));
            }
            b"data" => {
                let (code, channels, rate, bits) =
                    fmt.ok_or_else(|| bad("chunk 'data' appears before chunk 'fmt '".into()))?;
                if code != FORMAT_PCM {
                    return Err(bad(format!("chunk 'fmt ': unsupported format code {code} (only PCM)")));
                }
                if channels != 1 {
                    return Err(bad(format!("chunk 'fmt ': unsupported channel count {channels} (only mono)")));
                }
                if bits != 16 {
                    return Err(bad(format!("chunk 'fmt ': unsupported bit depth {bits} (only 16-bit)")));
                }
                if size % 2 != 0 {
                    return Err(bad("chunk 'data' has an odd byte count".into()));
                }
                let samples: Vec<f64> = chunk
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate).map_err(|e| bad(format!("chunk 'data': {e}")));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(bad(if fmt.is_none() {
        "missing chunk 'fmt '".into()
    } else {
        "missing chunk 'data'".into()
    }))
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    wav_decode(&bytes, path)
}

/// Quantizes to 16 bits: `round(x·32768)` half away from zero, clamped.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Canonical 44-byte-header encoding.
pub fn wav_encode(w: &Waveform) -> Vec<u8> {
    let data_len = (w.len() * 2) as u32;
    let rate = w.sample_rate_hz();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &x in w.samples() {
        out.extend_from_slice(&quantize(x).to_le_bytes());
    }
    out
}

/// Writes atomically through a sibling temporary file.
pub fn wav_write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    write_atomic(path.as_ref(), &wav_encode(w))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.wav");
        let x: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 1000.0).collect();
        let w = Waveform::new(x.clone(), 8000).unwrap();
        wav_write(&path, &w).unwrap();
        let r = wav_read(&path).unwrap();
        assert_eq!(r.sample_rate_hz(), 8000);
        for (a, b) in x.iter().zip(r.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn minimal_header_layout() {
        let w = Waveform::new(vec![0.5, -0.5], 16000).unwrap();
        let b = wav_encode(&w);
        assert_eq!(b.len(), 48);
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(le32(&b[4..8]), 40);
        assert_eq!(&b[12..16], b"fmt ");
        assert_eq!(le32(&b[24..28]), 16000);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(le32(&b[40..44]), 4);
        assert_eq!(i16::from_le_bytes([b[44], b[45]]), 16384);
        assert_eq!(i16::from_le_bytes([b[46], b[47]]), -16384);
    }

    #[test]
    fn quantization_rounds_and_clamps() {
        assert_eq!(quantize(1.0), i16::MAX);
        assert_eq!(quantize(-1.5), i16::MIN);
        assert_eq!(quantize(0.5 / 32768.0), 1);
        assert_eq!(quantize(-0.5 / 32768.0), -1);
    }

    #[test]
    fn rejects_stereo_and_truncation() {
        let w = Waveform::new(vec![0.1; 4], 8000).unwrap();
        let mut stereo = wav_encode(&w);
        stereo[22] = 2;
        let err = wav_decode(&stereo, Path::new("s.wav")).unwrap_err().to_string();
        assert!(err.contains("channel count 2"), "{err}");
        let good = wav_encode(&w);
        let err = wav_decode(&good[..good.len() - 3], Path::new("t.wav")).unwrap_err().to_string();
        assert!(err.contains("'data'") && err.contains("truncated"), "{err}");
        let mut float = wav_encode(&w);
        float[20] = 3;
        assert!(wav_decode(&float, Path::new("f.wav")).is_err());
        assert!(wav_read("/nonexistent/dir/x.wav").is_err());
    }
}

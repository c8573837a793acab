//! Mono waveforms and the file formats they travel in.
//!
//! Two on-disk forms are supported: RIFF/WAVE (uncompressed PCM, 16-bit
//! integer or 32-bit float, single channel) and a plain text fixture format
//! with one sample per line. Writing always emits float32 WAVE.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A single-channel signal in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Waveform> {
        if sample_rate == 0 {
            return Err(Error::invalid("Waveform", "sample_rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("Waveform", format!("sample {i} is not finite")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), msg)
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Read a mono RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4) as usize;
        let body_at = at + 8;
        if body_at + size > bytes.len() {
            return Err(format_err(path, format!("chunk overruns file at offset {at}")));
        }
        let body = &bytes[body_at..body_at + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(path, "fmt chunk too short"));
                }
                fmt = Some((
                    read_u16(body, 0),
                    read_u16(body, 2),
                    read_u32(body, 4),
                    read_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        at = body_at + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| format_err(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| format_err(path, "missing data chunk"))?;
    if channels != 1 {
        return Err(format_err(path, format!("expected mono, got {channels} channels")));
    }
    let samples: Vec<f64> = match (format, bits) {
        (1, 16) => {
            if data.len() % 2 != 0 {
                return Err(format_err(path, "odd PCM16 data length"));
            }
            data.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect()
        }
        (3, 32) => {
            if data.len() % 4 != 0 {
                return Err(format_err(path, "float32 data length not divisible by 4"));
            }
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        _ => {
            return Err(format_err(
                path,
                format!("unsupported encoding: format {format}, {bits} bits"),
            ))
        }
    };
    Waveform::new(samples, rate)
}

/// Write a waveform as mono float32 RIFF/WAVE.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_len = (n * 4) as u32;
    let mut out = Vec::with_capacity(44 + n * 4);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 4).to_le_bytes()); // byte rate
    out.extend_from_slice(&4u16.to_le_bytes()); // block align
    out.extend_from_slice(&32u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &v in &w.samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read the text fixture format: one sample per line, blank lines ignored.
pub fn read_text_waveform(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let body = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| format_err(path, format!("line {}: not a number: {line:?}", ln + 1)))?;
        samples.push(v);
    }
    Waveform::new(samples, sample_rate)
}

/// Dispatch on extension: `.wav` is RIFF, anything else is the text format.
pub fn read_waveform(path: &Path, text_sample_rate: u32) -> Result<Waveform> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => read_wav(path),
        _ => read_text_waveform(path, text_sample_rate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("spooftrace-audio-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn float32_wav_round_trips_through_f32_precision() {
        let w = Waveform::new(vec![0.0, 0.5, -0.25, 0.95, -1.0], 16000).unwrap();
        let p = tmp("round.wav");
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples.len(), 5);
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pcm16_wav_is_decoded_with_the_32768_scale() {
        let samples: Vec<i16> = vec![0, 16384, -16384, 32767, -32768];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + 10u32).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&10u32.to_le_bytes());
        for s in &samples {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        let p = tmp("pcm16.wav");
        fs::write(&p, &bytes).unwrap();
        let w = read_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 8000);
        let want = [0.0, 0.5, -0.5, 32767.0 / 32768.0, -1.0];
        for (a, b) in w.samples.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stereo_files_are_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let p = tmp("stereo.wav");
        fs::write(&p, &bytes).unwrap();
        assert!(read_wav(&p).is_err());
    }

    #[test]
    fn text_fixtures_parse_one_sample_per_line() {
        let p = tmp("fixture.txt");
        fs::write(&p, "0.5\n\n-0.25\n1e-3\n").unwrap();
        let w = read_text_waveform(&p, 4000).unwrap();
        assert_eq!(w.samples, vec![0.5, -0.25, 0.001]);
        assert_eq!(w.sample_rate, 4000);

        fs::write(&p, "0.5\nnot-a-number\n").unwrap();
        assert!(read_text_waveform(&p, 4000).is_err());
    }

    #[test]
    fn waveform_construction_rejects_bad_values() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }
}

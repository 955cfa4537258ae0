//! PCM16 mono WAV input and fixed-rate framing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_MS: f64 = 25.0;
pub const DEFAULT_SHIFT_MS: f64 = 10.0;

/// Mono audio with samples normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Domain(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| Error::Format {
            offset: at,
            message: "unexpected end of file".into(),
        })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: at,
            message: "unexpected end of file".into(),
        })
}

fn expect_tag(bytes: &[u8], at: usize, tag: &[u8; 4]) -> Result<()> {
    match bytes.get(at..at + 4) {
        Some(found) if found == tag => Ok(()),
        Some(found) => Err(Error::Format {
            offset: at,
            message: format!(
                "expected `{}`, found `{}`",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            ),
        }),
        None => Err(Error::Format {
            offset: at,
            message: "unexpected end of file".into(),
        }),
    }
}

/// Parses a RIFF/WAVE PCM16 mono file held in memory.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    expect_tag(bytes, 0, b"RIFF")?;
    read_u32(bytes, 4)?;
    expect_tag(bytes, 8, b"WAVE")?;

    let mut pos = 12;
    let mut sample_rate = None;
    loop {
        if pos + 8 > bytes.len() {
            return Err(Error::Format {
                offset: pos,
                message: if sample_rate.is_none() {
                    "missing `fmt ` chunk".into()
                } else {
                    "missing `data` chunk".into()
                },
            });
        }
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format {
                        offset: pos + 4,
                        message: format!("`fmt ` chunk too short ({size} bytes)"),
                    });
                }
                let format = read_u16(bytes, body)?;
                if format != 1 {
                    return Err(Error::UnsupportedFormat {
                        offset: body,
                        field: "audio_format",
                        value: format.to_string(),
                        expected: "1 (PCM)",
                    });
                }
                let channels = read_u16(bytes, body + 2)?;
                if channels != 1 {
                    return Err(Error::UnsupportedFormat {
                        offset: body + 2,
                        field: "num_channels",
                        value: channels.to_string(),
                        expected: "1 (mono)",
                    });
                }
                let rate = read_u32(bytes, body + 4)?;
                if rate == 0 {
                    return Err(Error::Format {
                        offset: body + 4,
                        message: "sample rate is zero".into(),
                    });
                }
                let bits = read_u16(bytes, body + 14)?;
                if bits != 16 {
                    return Err(Error::UnsupportedFormat {
                        offset: body + 14,
                        field: "bits_per_sample",
                        value: bits.to_string(),
                        expected: "16",
                    });
                }
                sample_rate = Some(rate);
            }
            b"data" => {
                let Some(rate) = sample_rate else {
                    return Err(Error::Format {
                        offset: pos,
                        message: "`data` chunk before `fmt ` chunk".into(),
                    });
                };
                if !size.is_multiple_of(2) {
                    return Err(Error::Format {
                        offset: pos + 4,
                        message: format!("data size {size} is not a multiple of 2"),
                    });
                }
                let data = bytes.get(body..body + size).ok_or_else(|| Error::Format {
                    offset: bytes.len(),
                    message: format!("data chunk declares {size} bytes but file ends early"),
                })?;
                let samples = data
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                    .collect();
                return AudioBuffer::new(samples, rate);
            }
            _ => {}
        }
        // Chunks are padded to even length.
        pos = body + size + (size & 1);
    }
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Quantizes to PCM16 and serializes as a canonical 44-byte-header WAV.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &audio.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    std::fs::write(path, encode_wav(audio)).map_err(|e| Error::io(path, e))
}

/// Overlapping frames, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    /// `[T, frame_len]`.
    pub frames: Tensor,
    pub frame_len: usize,
    pub hop: usize,
}

impl FrameMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row_slice(t)
    }
}

/// Samples per frame and hop for the given durations.
pub fn frame_geometry(sample_rate_hz: u32, frame_ms: f64, shift_ms: f64) -> Result<(usize, usize)> {
    if !(shift_ms > 0.0 && frame_ms >= shift_ms) {
        return Err(Error::Config(format!(
            "frame/shift must satisfy frame_ms >= shift_ms > 0 (got {frame_ms}/{shift_ms})"
        )));
    }
    let rate = sample_rate_hz as f64;
    let len = (frame_ms * rate / 1000.0).round() as usize;
    let hop = (shift_ms * rate / 1000.0).round() as usize;
    if hop == 0 || len == 0 {
        return Err(Error::Config(format!(
            "frame of {frame_ms} ms / shift {shift_ms} ms is shorter than one sample at {sample_rate_hz} Hz"
        )));
    }
    Ok((len, hop))
}

/// Number of complete frames in `n` samples; the trailing partial frame is
/// dropped.
pub fn num_frames(n: usize, frame_len: usize, hop: usize) -> usize {
    if n < frame_len {
        0
    } else {
        (n - frame_len) / hop + 1
    }
}

/// Splits audio into frames of `frame_ms` advanced by `shift_ms`.
pub fn frame_signal(audio: &AudioBuffer, frame_ms: f64, shift_ms: f64) -> Result<FrameMatrix> {
    if audio.is_empty() {
        return Err(Error::EmptySequence("audio has no samples"));
    }
    let (len, hop) = frame_geometry(audio.sample_rate_hz, frame_ms, shift_ms)?;
    let t = num_frames(audio.len(), len, hop);
    let mut data = Vec::with_capacity(t * len);
    for i in 0..t {
        data.extend_from_slice(&audio.samples[i * hop..i * hop + len]);
    }
    Ok(FrameMatrix {
        frames: Tensor::from_vec(&[t, len], data),
        frame_len: len,
        hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn audio(n: usize) -> AudioBuffer {
        AudioBuffer::new((0..n).map(|i| (i % 100) as f64 / 100.0).collect(), 16_000).unwrap()
    }

    #[test]
    fn one_second_framing() {
        let f = frame_signal(&audio(16_000), 25.0, 10.0).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.frame_len, 400);
        assert_eq!(f.hop, 160);
        assert_eq!(f.frame_len - f.hop, 240);
    }

    #[test]
    fn exact_and_short_signals() {
        assert_eq!(frame_signal(&audio(400), 25.0, 10.0).unwrap().num_frames(), 1);
        let short = frame_signal(&audio(399), 25.0, 10.0).unwrap();
        assert_eq!(short.num_frames(), 0);
        assert_eq!(short.frames.shape(), &[0, 400]);
    }

    #[test]
    fn invalid_framing_is_config_error() {
        assert!(matches!(frame_signal(&audio(1000), 5.0, 10.0), Err(Error::Config(_))));
        assert!(matches!(frame_signal(&audio(1000), 5.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn wav_single_sample() {
        let bytes = encode_wav(&AudioBuffer::new(vec![0.5], 16_000).unwrap());
        let a = parse_wav(&bytes).unwrap();
        assert_eq!(a.samples, vec![0.5]);
        assert_eq!(a.sample_rate_hz, 16_000);
    }

    #[test]
    fn wav_errors_name_offsets_and_fields() {
        let good = encode_wav(&AudioBuffer::new(vec![0.0; 4], 16_000).unwrap());

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(b"AVI ");
        let err = parse_wav(&bad).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");

        let mut stereo = good.clone();
        stereo[22] = 2;
        let err = parse_wav(&stereo).unwrap_err();
        assert!(err.to_string().contains("num_channels"), "{err}");
        assert!(matches!(err, Error::UnsupportedFormat { offset: 22, .. }));

        let mut float = good.clone();
        float[20] = 3;
        let err = parse_wav(&float).unwrap_err();
        assert!(err.to_string().contains("audio_format"), "{err}");

        let err = parse_wav(&good[..30]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 2);
        assert!(matches!(parse_wav(&truncated), Err(Error::Format { .. })));
    }

    #[test]
    fn skips_unknown_chunks() {
        let good = encode_wav(&AudioBuffer::new(vec![0.25, -0.25], 8_000).unwrap());
        let mut with_list = good[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&good[36..]);
        let a = parse_wav(&with_list).unwrap();
        assert_eq!(a.samples, vec![0.25, -0.25]);
        assert_eq!(a.sample_rate_hz, 8_000);
    }
}

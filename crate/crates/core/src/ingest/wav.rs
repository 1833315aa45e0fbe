//! RIFF/WAVE parsing into normalized mono samples.

use thiserror::Error;

use super::AudioClip;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported codec: format {format}, {bits} bits per sample")]
    UnsupportedCodec { format: u16, bits: u16 },
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(u16),
    #[error("zero-length data chunk")]
    EmptyData,
}

/// Parse a RIFF/WAVE container into mono `[-1, 1]` samples.
///
/// Accepts PCM 8/16/24/32-bit integer and 32-bit IEEE float, one or two
/// channels. Integer samples scale by the type's maximum magnitude;
/// multi-channel frames average to mono.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 {
        return Err(WavError::MalformedHeader("file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::MalformedHeader("missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::MalformedHeader("missing WAVE tag"));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let chunk_size = u32::from_le_bytes([
            bytes[pos + 4],
            bytes[pos + 5],
            bytes[pos + 6],
            bytes[pos + 7],
        ]) as usize;
        let body = pos + 8;
        if chunk_id == b"fmt " {
            if body + 16 > bytes.len() || chunk_size < 16 {
                return Err(WavError::MalformedHeader("fmt chunk truncated"));
            }
            let format = u16::from_le_bytes([bytes[body], bytes[body + 1]]);
            let channels = u16::from_le_bytes([bytes[body + 2], bytes[body + 3]]);
            let rate = u32::from_le_bytes([
                bytes[body + 4],
                bytes[body + 5],
                bytes[body + 6],
                bytes[body + 7],
            ]);
            let bits = u16::from_le_bytes([bytes[body + 14], bytes[body + 15]]);
            fmt = Some((format, channels, rate, bits));
        } else if chunk_id == b"data" {
            let (format, channels, rate, bits) =
                fmt.ok_or(WavError::MalformedHeader("data chunk before fmt chunk"))?;
            if chunk_size == 0 {
                return Err(WavError::EmptyData);
            }
            if body + chunk_size > bytes.len() {
                return Err(WavError::MalformedHeader("data chunk exceeds file size"));
            }
            if channels == 0 || channels > 2 {
                return Err(WavError::UnsupportedChannels(channels));
            }
            if rate == 0 {
                return Err(WavError::MalformedHeader("zero sample rate"));
            }
            let data = &bytes[body..body + chunk_size];
            let samples = decode_samples(data, format, bits)?;
            if samples.is_empty() {
                return Err(WavError::EmptyData);
            }
            let mono = to_mono(&samples, channels);
            return Ok(AudioClip {
                samples: mono,
                sample_rate: rate,
                source_id: String::new(),
            });
        }
        // RIFF chunks are word-aligned.
        pos = body + chunk_size + (chunk_size & 1);
    }
    Err(WavError::MalformedHeader("no data chunk"))
}

fn decode_samples(data: &[u8], format: u16, bits: u16) -> Result<Vec<f32>, WavError> {
    let samples = match (format, bits) {
        (FORMAT_PCM, 8) => data.iter().map(|&b| (f32::from(b) - 128.0) / 128.0).collect(),
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
            .collect(),
        (FORMAT_PCM, 24) => data
            .chunks_exact(3)
            .map(|c| {
                let v = i32::from_le_bytes([0, c[0], c[1], c[2]]) >> 8;
                v as f32 / 8_388_608.0
            })
            .collect(),
        (FORMAT_PCM, 32) => data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32 / 2_147_483_648.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]).clamp(-1.0, 1.0))
            .collect(),
        _ => return Err(WavError::UnsupportedCodec { format, bits }),
    };
    Ok(samples)
}

fn to_mono(samples: &[f32], channels: u16) -> Vec<f32> {
    if channels == 1 {
        return samples.to_vec();
    }
    samples
        .chunks_exact(channels as usize)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Build a minimal WAV byte stream; used by tests and synthetic fixtures.
pub fn encode_wav_pcm16(samples_per_channel: &[Vec<i16>], sample_rate: u32) -> Vec<u8> {
    let channels = samples_per_channel.len() as u16;
    assert!(channels >= 1);
    let frames = samples_per_channel[0].len();
    assert!(samples_per_channel.iter().all(|c| c.len() == frames));
    let data_len = frames * channels as usize * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    let byte_rate = sample_rate * u32::from(channels) * 2;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&(channels * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..frames {
        for channel in samples_per_channel {
            out.extend_from_slice(&channel[i].to_le_bytes());
        }
    }
    out
}

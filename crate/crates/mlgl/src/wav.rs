//! RIFF/WAVE reading and writing for PCM16 and float32 audio.

use std::path::Path;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xfffe;

/// Decoded audio, one sample vector per channel, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Pcm16,
    Float32,
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f32>>) -> Result<Self> {
        let clip = AudioClip {
            sample_rate,
            channels,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn mono(sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        Self::new(sample_rate, vec![samples])
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Core(mlgl_core::Error::Input(m)));
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if !(1..=2).contains(&self.channels.len()) {
            return bad(format!("{} channels; only mono and stereo are supported", self.channels.len()));
        }
        if self.channels.iter().any(|c| c.len() != self.channels[0].len()) {
            return bad("channels differ in length".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling to `rate`.
    pub fn resample(&self, rate: u32) -> Result<AudioClip> {
        if rate == self.sample_rate || self.is_empty() {
            return AudioClip::new(rate, self.channels.clone());
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let out_len = ((self.len() as f64) / ratio).floor().max(1.0) as usize;
        let channels = self
            .channels
            .iter()
            .map(|c| {
                (0..out_len)
                    .map(|i| {
                        let pos = i as f64 * ratio;
                        let j = pos.floor() as usize;
                        let frac = (pos - j as f64) as f32;
                        let a = c[j.min(c.len() - 1)];
                        let b = c[(j + 1).min(c.len() - 1)];
                        a + (b - a) * frac
                    })
                    .collect()
            })
            .collect();
        AudioClip::new(rate, channels)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Decode {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decodes a complete WAV file image. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<AudioClip> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "RIFF header")? != b"RIFF" {
        return r.fail(0, "missing RIFF magic");
    }
    r.u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return r.fail(8, "missing WAVE tag");
    }
    let mut format: Option<Format> = None;
    loop {
        let chunk_at = r.pos;
        if r.pos == bytes.len() {
            return r.fail(chunk_at, "no data chunk");
        }
        let id: [u8; 4] = r.take(4, "chunk id")?.try_into().unwrap();
        let size = r.u32("chunk size")? as usize;
        match &id {
            b"fmt " => {
                let body_at = r.pos;
                let body = r.take(size, "fmt chunk")?;
                if size < 16 {
                    return r.fail(body_at, format!("fmt chunk of {size} bytes is too short"));
                }
                let le16 = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
                let mut tag = le16(0);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 26 {
                        return r.fail(body_at, "extensible fmt chunk without subformat");
                    }
                    tag = le16(24);
                }
                format = Some(Format {
                    tag,
                    channels: le16(2),
                    sample_rate: u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    bits: le16(14),
                });
                let f = format.as_ref().unwrap();
                match (f.tag, f.bits) {
                    (FORMAT_PCM, 16) | (FORMAT_FLOAT, 32) => {}
                    (t, b) => return r.fail(body_at, format!("unsupported encoding: format {t}, {b} bits")),
                }
                if !(1..=2).contains(&f.channels) {
                    return r.fail(body_at + 2, format!("{} channels; only mono and stereo are supported", f.channels));
                }
                if f.sample_rate == 0 {
                    return r.fail(body_at + 4, "sample rate is zero");
                }
            }
            b"data" => {
                let Some(f) = format else {
                    return r.fail(chunk_at, "data chunk before fmt chunk");
                };
                let data_at = r.pos;
                let frame = f.channels as usize * f.bits as usize / 8;
                if !size.is_multiple_of(frame) {
                    return r.fail(data_at, format!("data size {size} is not a multiple of the {frame}-byte frame"));
                }
                let data = r.take(size, "sample data")?;
                let n = size / frame;
                let nc = f.channels as usize;
                let mut channels = vec![Vec::with_capacity(n); nc];
                match f.tag {
                    FORMAT_PCM => {
                        for (i, s) in data.chunks_exact(2).enumerate() {
                            channels[i % nc].push(i16::from_le_bytes([s[0], s[1]]) as f32 / 32768.0);
                        }
                    }
                    _ => {
                        for (i, s) in data.chunks_exact(4).enumerate() {
                            let v = f32::from_le_bytes(s.try_into().unwrap());
                            if !v.is_finite() {
                                return r.fail(data_at + 4 * i, "non-finite float sample");
                            }
                            channels[i % nc].push(v);
                        }
                    }
                }
                return AudioClip::new(f.sample_rate, channels);
            }
            _ => {
                r.take(size, "chunk body")?;
            }
        }
        if size % 2 == 1 && r.pos < bytes.len() {
            r.pos += 1;
        }
    }
}

pub fn read(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn encode(clip: &AudioClip, encoding: Encoding) -> Vec<u8> {
    let nc = clip.channels.len();
    let (tag, bits) = match encoding {
        Encoding::Pcm16 => (FORMAT_PCM, 16u16),
        Encoding::Float32 => (FORMAT_FLOAT, 32),
    };
    let block = nc * bits as usize / 8;
    let data_len = clip.len() * block;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(nc as u16).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&(block as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.len() {
        for c in &clip.channels {
            match encoding {
                Encoding::Pcm16 => {
                    let q = (c[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                Encoding::Float32 => out.extend_from_slice(&c[i].to_le_bytes()),
            }
        }
    }
    out
}

pub fn write(path: &Path, clip: &AudioClip, encoding: Encoding) -> Result<()> {
    std::fs::write(path, encode(clip, encoding)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.wav")
    }

    #[test]
    fn silence_decodes_to_zeros() {
        let clip = AudioClip::mono(44100, vec![0.0; 44100]).unwrap();
        let back = decode(&encode(&clip, Encoding::Pcm16), p()).unwrap();
        assert_eq!(back.channels.len(), 1);
        assert_eq!(back.len(), 44100);
        assert!(back.channels[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pcm16_full_scale_normalizes() {
        let mut bytes = encode(&AudioClip::mono(8000, vec![0.0]).unwrap(), Encoding::Pcm16);
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&32767i16.to_le_bytes());
        let v = decode(&bytes, p()).unwrap().channels[0][0];
        assert!((v - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn sine_round_trip_within_one_lsb() {
        let sr = 44100;
        let s: Vec<f32> = (0..sr).map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / sr as f32).sin()).collect();
        let clip = AudioClip::new(sr, vec![s.clone(), s.iter().map(|v| -v * 0.5).collect()]).unwrap();
        let back = decode(&encode(&clip, Encoding::Pcm16), p()).unwrap();
        for (a, b) in clip.channels.iter().flatten().zip(back.channels.iter().flatten()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        let exact = decode(&encode(&clip, Encoding::Float32), p()).unwrap();
        assert_eq!(exact, clip);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&AudioClip::mono(8000, vec![0.1; 100]).unwrap(), Encoding::Pcm16);
        match decode(&bytes[..100], p()) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 44),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unsupported_encoding() {
        let mut bytes = encode(&AudioClip::mono(8000, vec![0.1; 4]).unwrap(), Encoding::Pcm16);
        bytes[34..36].copy_from_slice(&24u16.to_le_bytes());
        match decode(&bytes, p()) {
            Err(Error::Decode { offset, message, .. }) => {
                assert_eq!(offset, 20);
                assert!(message.contains("unsupported"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn skips_unknown_chunks() {
        let clip = AudioClip::mono(8000, vec![0.25, -0.5, 0.75]).unwrap();
        let plain = encode(&clip, Encoding::Float32);
        let mut bytes = plain[..36].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&plain[36..]);
        assert_eq!(decode(&bytes, p()).unwrap(), clip);
    }

    #[test]
    fn resample_halves_length() {
        let clip = AudioClip::mono(16000, (0..1600).map(|i| i as f32 / 1600.0).collect()).unwrap();
        let half = clip.resample(8000).unwrap();
        assert_eq!(half.len(), 800);
        assert!((half.channels[0][10] - clip.channels[0][20]).abs() < 1e-6);
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use super::AudioBuffer;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding for written files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

type Fail = (usize, String);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Fail> {
        if self.pos + n > self.bytes.len() {
            return Err((
                self.pos,
                format!("unexpected end of file (need {n} bytes, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, Fail> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> std::result::Result<u32, Fail> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Fmt {
    format: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Reads a PCM16 or float32 WAV file and mixes it down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes, path)
}

/// Parses WAV bytes; `origin` only labels errors.
pub fn parse_wav(bytes: &[u8], origin: impl AsRef<Path>) -> Result<AudioBuffer> {
    decode(bytes).map_err(|(offset, reason)| Error::Decode {
        path: origin.as_ref().to_path_buf(),
        offset: offset as u64,
        reason,
    })
}

fn decode(bytes: &[u8]) -> std::result::Result<AudioBuffer, Fail> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"RIFF" {
        return Err((0, "missing RIFF tag".into()));
    }
    r.u32()?;
    if r.take(4)? != b"WAVE" {
        return Err((8, "missing WAVE tag".into()));
    }

    let mut fmt: Option<Fmt> = None;
    loop {
        let chunk_at = r.pos;
        let id = r.take(4)?;
        let size = r.u32()? as usize;
        let body_at = r.pos;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err((chunk_at + 4, format!("fmt chunk too short ({size} bytes)")));
                }
                let mut format = r.u16()?;
                let channels = r.u16()?;
                let rate = r.u32()?;
                r.u32()?;
                r.u16()?;
                let bits = r.u16()?;
                if format == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err((body_at, "extensible fmt chunk too short".into()));
                    }
                    r.take(8)?;
                    format = r.u16()?;
                }
                if channels == 0 {
                    return Err((body_at + 2, "zero channels".into()));
                }
                if rate == 0 {
                    return Err((body_at + 4, "zero sample rate".into()));
                }
                let ok = matches!((format, bits), (FORMAT_PCM, 16) | (FORMAT_FLOAT, 32));
                if !ok {
                    return Err((
                        body_at,
                        format!("unsupported codec (format tag {format}, {bits} bits)"),
                    ));
                }
                fmt = Some(Fmt {
                    format,
                    channels,
                    rate,
                    bits,
                });
                r.pos = body_at;
                r.take(size + size % 2)?;
            }
            b"data" => {
                let Some(fmt) = fmt else {
                    return Err((chunk_at, "data chunk before fmt chunk".into()));
                };
                let size = size.min(bytes.len() - body_at);
                let data = r.take(size)?;
                return Ok(mix_down(data, &fmt));
            }
            _ => {
                let skip = size + size % 2;
                if body_at + skip > bytes.len() {
                    return Err((chunk_at + 4, format!("chunk size {size} runs past end of file")));
                }
                r.pos = body_at + skip;
            }
        }
    }
}

fn mix_down(data: &[u8], fmt: &Fmt) -> AudioBuffer {
    let width = (fmt.bits / 8) as usize;
    let ch = fmt.channels as usize;
    let frames = data.len() / (width * ch);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0;
        for c in 0..ch {
            let at = (f * ch + c) * width;
            let b = &data[at..at + width];
            acc += if fmt.format == FORMAT_PCM {
                i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0
            } else {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                if v.is_finite() {
                    v.clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            };
        }
        out.push(acc / ch as f64);
    }
    AudioBuffer {
        samples: out,
        sample_rate: fmt.rate,
    }
}

/// Writes a mono WAV file.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(audio, format);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(audio: &AudioBuffer, format: WavFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        WavFormat::Pcm16 => (FORMAT_PCM, 16u16),
        WavFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let width = bits as u32 / 8;
    let data_len = audio.len() as u32 * width;
    let mut b = Vec::with_capacity(44 + data_len as usize);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&tag.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&audio.sample_rate.to_le_bytes());
    b.extend_from_slice(&(audio.sample_rate * width).to_le_bytes());
    b.extend_from_slice(&(width as u16).to_le_bytes());
    b.extend_from_slice(&bits.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for &s in &audio.samples {
        match format {
            WavFormat::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                b.extend_from_slice(&q.to_le_bytes());
            }
            WavFormat::Float32 => b.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    b
}

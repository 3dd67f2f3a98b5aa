use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{mel_spectrogram, parse_wav, FeatureConfig, MelSpectrogram};

const MAGIC: &[u8; 4] = b"PMEL";
const VERSION: u32 = 1;

/// On-disk log-mel cache keyed by a hash of the audio bytes and feature config.
///
/// Entry layout (little endian): magic, version u32, frames u32, bands u32,
/// sample_rate u32, n_fft u32, hop u32, then `frames × bands` f64 values.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    read_only: bool,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, read_only: false })
    }

    /// A cache that serves existing entries but never writes; misses are
    /// computed in memory. The directory need not exist.
    pub fn read_only(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            read_only: true,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(audio_bytes: &[u8], cfg: &FeatureConfig) -> Result<String> {
        let mut h = Sha256::new();
        h.update(audio_bytes);
        h.update(serde_json::to_vec(cfg)?);
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.mel"))
    }

    /// Cached features for `audio`, computing them on a miss and storing them
    /// unless the cache is read-only.
    pub fn get_or_compute(&self, audio: &Path, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
        let bytes = fs::read(audio).map_err(|e| Error::io(audio, e))?;
        let key = Self::key(&bytes, cfg)?;
        let path = self.entry_path(&key);
        if path.is_file() {
            return read_entry(&path, cfg);
        }
        let mel = mel_spectrogram(&parse_wav(&bytes, audio)?, cfg)?;
        if !self.read_only {
            self.store(&path, &mel)?;
        }
        Ok(mel)
    }

    fn store(&self, path: &Path, mel: &MelSpectrogram) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + mel.values().len() * 8);
        buf.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            mel.frames() as u32,
            mel.bands() as u32,
            mel.sample_rate,
            mel.n_fft as u32,
            mel.hop_length as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in mel.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        tmp.write_all(&buf).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }
}

fn read_entry(path: &Path, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |offset: usize, reason: &str| Error::Decode {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    };
    if b.len() < 28 || &b[..4] != MAGIC {
        return Err(corrupt(0, "not a feature cache entry"));
    }
    let word = |i: usize| u32::from_le_bytes([b[4 + 4 * i], b[5 + 4 * i], b[6 + 4 * i], b[7 + 4 * i]]);
    if word(0) != VERSION {
        return Err(corrupt(4, "unsupported cache version"));
    }
    let (frames, bands) = (word(1) as usize, word(2) as usize);
    if b.len() != 28 + frames * bands * 8 {
        return Err(corrupt(28, "truncated value block"));
    }
    if bands != cfg.n_mels || word(3) != cfg.sample_rate || word(4) as usize != cfg.n_fft || word(5) as usize != cfg.hop_length {
        return Err(corrupt(12, "entry framing differs from the feature config"));
    }
    let values = b[28..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(values, frames, bands, cfg)
}

//! Waveform utilities for the noise-robustness protocol: WAV ingestion with
//! mono downmix and resampling, RMS energy, SNR-targeted noise mixing and
//! peak-SNR matching across phonation styles.
//!
//! PSNR is `20·log10(max|speech| / rms(noise))`, so for any mix
//! `PSNR = SNR + crest_factor_db(speech)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CANONICAL_RATE: u32 = 16_000;
const SILENCE_RMS: f64 = 1e-9;
const PCM16_SCALE: f64 = 32_768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV ({chunk} chunk): {reason}")]
    Format { chunk: &'static str, reason: String },
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("rejected input: {0}")]
    Rejected(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn chunk_of(reason: &str) -> &'static str {
    let lower = reason.to_ascii_lowercase();
    if lower.contains("riff") {
        "RIFF"
    } else if lower.contains("wave") {
        "WAVE"
    } else if lower.contains("fmt") || lower.contains("format") {
        "fmt"
    } else if lower.contains("data") || lower.contains("sample") {
        "data"
    } else {
        "header"
    }
}

impl From<hound::Error> for AudioError {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => AudioError::Format {
                chunk: "data",
                reason: "file ends inside a chunk".into(),
            },
            hound::Error::IoError(io) => AudioError::Io(io),
            hound::Error::FormatError(reason) => AudioError::Format {
                chunk: chunk_of(reason),
                reason: reason.to_string(),
            },
            hound::Error::Unsupported => AudioError::Unsupported("encoding not handled by the WAV reader".into()),
            other => AudioError::Format {
                chunk: "fmt",
                reason: other.to_string(),
            },
        }
    }
}

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::Rejected("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::Rejected(format!("sample {i} = {s} outside [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Multiplies every sample by `gain`, failing if that leaves `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> Result<Self, AudioError> {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }
}

/// Reads a PCM16 or float32 WAV file, averages channels to mono and
/// resamples to 16 kHz.
pub fn ingest(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let reader = hound::WavReader::open(path)?;
    decode(reader)
}

/// Like [`ingest`] but from an in-memory WAV image.
pub fn ingest_bytes(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    decode(hound::WavReader::new(std::io::Cursor::new(bytes))?)
}

fn decode<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<AudioClip, AudioError> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(AudioError::Unsupported(format!("{channels} channels")));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::Format {
            chunk: "fmt",
            reason: "zero sample rate".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => return Err(AudioError::Unsupported(format!("{bits}-bit {fmt:?}"))),
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::Format {
            chunk: "data",
            reason: "sample count is not a multiple of the channel count".into(),
        });
    }
    let mono: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|f| 0.5 * (f[0] + f[1])).collect()
    };
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(AudioError::Format {
            chunk: "data",
            reason: "non-finite float sample".into(),
        });
    }
    // Float files may exceed full scale slightly; clamp onto the clip invariant.
    let mono = mono.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    let clip = AudioClip::new(mono, spec.sample_rate)?;
    Ok(resample(&clip, CANONICAL_RATE))
}

/// Linear-interpolation resampler. Output sample `j` sits at source position
/// `j·from/to`; the last source sample is held past the end.
pub fn resample(clip: &AudioClip, to: u32) -> AudioClip {
    let from = clip.sample_rate;
    if from == to || clip.is_empty() {
        return AudioClip {
            samples: clip.samples.clone(),
            sample_rate: to,
        };
    }
    let n = clip.samples.len();
    let out_len = ((n as u64 * to as u64).div_ceil(from as u64)) as usize;
    let step = from as f64 / to as f64;
    let src = &clip.samples;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = pos.floor() as usize;
            if i + 1 >= n {
                return src[n - 1];
            }
            let frac = pos - i as f64;
            src[i] + frac * (src[i + 1] - src[i])
        })
        .collect();
    AudioClip { samples, sample_rate: to }
}

/// Writes a mono PCM16 WAV. Samples are scaled by 32768 and saturated, so
/// clips read from PCM16 roundtrip exactly.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}

fn to_pcm16(s: f64) -> i16 {
    (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn rms_of(samples: &[f64]) -> f64 {
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

pub fn rms(clip: &AudioClip) -> Result<f64, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::Rejected("rms of an empty clip".into()));
    }
    Ok(rms_of(&clip.samples))
}

/// `20·log10(peak / rms)` of a clip.
pub fn crest_factor_db(clip: &AudioClip) -> Result<f64, AudioError> {
    let r = rms(clip)?;
    if r < SILENCE_RMS {
        return Err(AudioError::Degenerate("crest factor of a silent clip".into()));
    }
    Ok(20.0 * (clip.peak() / r).log10())
}

pub fn measure_psnr(speech: &AudioClip, scaled_noise: &AudioClip) -> Result<f64, AudioError> {
    if speech.is_empty() {
        return Err(AudioError::Rejected("empty speech clip".into()));
    }
    let n = rms(scaled_noise)?;
    if n < SILENCE_RMS {
        return Err(AudioError::Degenerate("silent noise".into()));
    }
    Ok(20.0 * (speech.peak() / n).log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub mixed: AudioClip,
    /// `k·noise_segment`, before clamping.
    pub scaled_noise: Vec<f64>,
    pub noise_scale: f64,
    /// Start of the noise segment inside the noise clip.
    pub noise_offset: usize,
    pub achieved_snr_db: f64,
    pub achieved_psnr_db: f64,
    pub clip_count: usize,
}

impl MixResult {
    pub fn clipped(&self) -> bool {
        self.clip_count > 0
    }
}

/// Adds noise to speech at `snr_db`. A segment of speech length starts at a
/// random offset; shorter noise is looped from a random phase. Mixed samples
/// beyond ±1 are clamped and counted.
pub fn mix_at_snr<R: Rng + ?Sized>(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng: &mut R,
) -> Result<MixResult, AudioError> {
    if speech.sample_rate != noise.sample_rate {
        return Err(AudioError::RateMismatch(speech.sample_rate, noise.sample_rate));
    }
    if !snr_db.is_finite() {
        return Err(AudioError::Rejected(format!("snr_db = {snr_db}")));
    }
    let s_rms = rms(speech)?;
    if noise.is_empty() {
        return Err(AudioError::Degenerate("empty noise clip".into()));
    }
    if s_rms < SILENCE_RMS {
        return Err(AudioError::Degenerate("silent speech".into()));
    }
    let n = speech.len();
    let m = noise.len();
    let offset = if m >= n { rng.random_range(0..=m - n) } else { rng.random_range(0..m) };
    let segment: Vec<f64> = (0..n).map(|i| noise.samples[(offset + i) % m]).collect();
    let seg_rms = rms_of(&segment);
    if seg_rms < SILENCE_RMS {
        return Err(AudioError::Degenerate(format!("silent noise segment at offset {offset}")));
    }
    let k = s_rms / (seg_rms * 10f64.powf(snr_db / 20.0));
    let scaled_noise: Vec<f64> = segment.iter().map(|v| k * v).collect();
    let noise_rms = rms_of(&scaled_noise);
    let mut clip_count = 0;
    let mixed: Vec<f64> = speech
        .samples
        .iter()
        .zip(&scaled_noise)
        .map(|(s, v)| {
            let x = s + v;
            if x.abs() > 1.0 {
                clip_count += 1;
            }
            x.clamp(-1.0, 1.0)
        })
        .collect();
    if clip_count > 0 {
        log::warn!("mix at {snr_db} dB clipped {clip_count} samples");
    }
    Ok(MixResult {
        mixed: AudioClip {
            samples: mixed,
            sample_rate: speech.sample_rate,
        },
        scaled_noise,
        noise_scale: k,
        noise_offset: offset,
        achieved_snr_db: 20.0 * (s_rms / noise_rms).log10(),
        achieved_psnr_db: 20.0 * (speech.peak() / noise_rms).log10(),
        clip_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedMix {
    pub snr_db: f64,
    pub noise_index: usize,
    pub result: MixResult,
}

/// Assigns each clip the SNR whose expected PSNR equals `reference_psnr_db`
/// (`snr = reference − crest_factor_db`), draws a noise from the pool and mixes.
pub fn match_psnr<R: Rng + ?Sized>(
    reference_psnr_db: f64,
    clips: &[AudioClip],
    noise_pool: &[AudioClip],
    rng: &mut R,
) -> Result<Vec<MatchedMix>, AudioError> {
    if !reference_psnr_db.is_finite() {
        return Err(AudioError::Rejected("reference PSNR must be finite".into()));
    }
    if clips.is_empty() || noise_pool.is_empty() {
        return Err(AudioError::Rejected("empty clip set or noise pool".into()));
    }
    clips
        .iter()
        .map(|clip| {
            let snr_db = reference_psnr_db - crest_factor_db(clip)?;
            let noise_index = rng.random_range(0..noise_pool.len());
            let result = mix_at_snr(clip, &noise_pool[noise_index], snr_db, rng)?;
            Ok(MatchedMix {
                snr_db,
                noise_index,
                result,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub mean_rms: f64,
    /// Sample standard deviation (n−1); 0 for a single clip.
    pub std_rms: f64,
    /// Samples at full scale (|x| ≥ 1) across all clips.
    pub clip_count: usize,
}

pub fn energy_stats(clips: &[AudioClip]) -> Result<EnergyStats, AudioError> {
    if clips.is_empty() {
        return Err(AudioError::Rejected("energy stats of an empty clip list".into()));
    }
    let values = clips.iter().map(rms).collect::<Result<Vec<_>, _>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let clip_count = clips.iter().flat_map(|c| &c.samples).filter(|s| s.abs() >= 1.0).count();
    Ok(EnergyStats {
        mean_rms: mean,
        std_rms: std,
        clip_count,
    })
}

/// One row of the mixing manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub utt_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub achieved_snr_db: f64,
    pub achieved_psnr_db: f64,
    pub clip_count: usize,
}

pub fn mixing_manifest_csv(records: &[MixRecord]) -> String {
    let mut out = String::from("utt_id,noise_id,snr_db,achieved_snr_db,achieved_psnr_db,clip_count\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.utt_id, r.noise_id, r.snr_db, r.achieved_snr_db, r.achieved_psnr_db, r.clip_count
        );
    }
    out
}

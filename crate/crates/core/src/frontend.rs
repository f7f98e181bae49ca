//! 16 kHz audio to 80-channel log-Mel spectrograms.
//!
//! Pipeline per frame: Hann window, 400-point FFT, power spectrum, 80 HTK Mel
//! filters over 0–8000 Hz, `log10(max(e, 1e-10))`. The whole matrix is then
//! standardized with the utterance's global mean and standard deviation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const N_FFT: usize = 400;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MAX_SAMPLES: usize = 480_000;
/// Seconds per spectrogram frame.
pub const FRAME_SECONDS: f64 = 0.01;

const MELF_MAGIC: &[u8; 4] = b"MELF";

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("expected 16000 Hz audio, got {0} Hz")]
    WrongSampleRate(u32),
    #[error("audio has {0} samples; at least 400 are required")]
    TooShort(usize),
    #[error("audio has {0} samples; at most 480000 (30 s) are accepted")]
    TooLong(usize),
    #[error("audio contains a non-finite sample at index {0}")]
    NonFiniteInput(usize),
    #[error("invalid Mel band edges: f_min={f_min} f_max={f_max} (sample rate {sample_rate})")]
    InvalidBandEdges { f_min: f64, f_max: f64, sample_rate: u32 },
    #[error("unsupported WAV format: {0}")]
    UnsupportedWav(String),
    #[error("malformed spectrogram file: {0}")]
    BadSpectrogramFile(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono audio at 16 kHz with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, FrontendError> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(FrontendError::WrongSampleRate(sample_rate_hz));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(FrontendError::NonFiniteInput(i));
        }
        if samples.len() > MAX_SAMPLES {
            return Err(FrontendError::TooLong(samples.len()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn from_wav(path: impl AsRef<Path>) -> Result<Self, FrontendError> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(FrontendError::UnsupportedWav(format!(
                "{} channel(s), {} bits, {:?}; need mono 16-bit PCM",
                spec.channels, spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// `T × n_mels` matrix of Mel features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f32>, n_frames: usize, n_mels: usize) -> Result<Self, FrontendError> {
        if n_mels == 0 || frames.len() != n_frames * n_mels {
            return Err(FrontendError::BadSpectrogramFile(format!(
                "{} values for {n_frames}x{n_mels}",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            n_frames,
            n_mels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Frames `[start, end)`.
    pub fn window(&self, start: usize, end: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames: self.frames[start * self.n_mels..end * self.n_mels].to_vec(),
            n_frames: end - start,
            n_mels: self.n_mels,
        }
    }

    /// Little-endian `MELF` container: magic, `u32 T`, `u32 n_mels`, then `T·n_mels` f32 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), FrontendError> {
        w.write_all(MELF_MAGIC)?;
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.n_mels as u32).to_le_bytes())?;
        for v in &self.frames {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, FrontendError> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        if &header[..4] != MELF_MAGIC {
            return Err(FrontendError::BadSpectrogramFile("missing MELF magic".into()));
        }
        let n_frames = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
        let n_mels = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != n_frames * n_mels * 4 {
            return Err(FrontendError::BadSpectrogramFile(format!(
                "payload of {} bytes for {n_frames}x{n_mels}",
                payload.len()
            )));
        }
        let frames = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(frames, n_frames, n_mels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FrontendError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FrontendError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of frames produced for `n` samples (`n ≥ 400`).
pub fn frame_count(n: usize) -> usize {
    (n - WINDOW_SAMPLES) / HOP_SAMPLES + 1
}

/// Triangular HTK Mel filters as a dense `n_mels × (n_fft/2 + 1)` matrix.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_fft: usize, n_mels: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self, FrontendError> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) || n_mels == 0 || n_fft < 2 {
            return Err(FrontendError::InvalidBandEdges {
                f_min,
                f_max,
                sample_rate,
            });
        }
        let n_bins = n_fft / 2 + 1;
        let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let rising = (f - lo) / (center - lo);
                let falling = (hi - f) / (hi - center);
                weights[m * n_bins + k] = rising.min(falling).max(0.0);
            }
        }
        Ok(Self {
            weights,
            n_mels,
            n_bins,
            edges_hz: edges,
        })
    }

    /// The 80-filter bank used by [`compute_log_mel`].
    pub fn standard() -> Self {
        Self::new(N_FFT, N_MELS, SAMPLE_RATE_HZ, 0.0, SAMPLE_RATE_HZ as f64 / 2.0).expect("valid band edges")
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..=self.n_mels]
    }

    /// Triangle feet and peaks: filter `m` spans `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    // periodic Hann, as used by STFT front ends
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-Mel energies before standardization, `T × 80` row-major in `f64`.
pub fn log_mel_unnormalized(audio: &AudioBuffer) -> Result<(Vec<f64>, usize), FrontendError> {
    let samples = audio.samples();
    if samples.len() < WINDOW_SAMPLES {
        return Err(FrontendError::TooShort(samples.len()));
    }
    let n_frames = frame_count(samples.len());
    let bank = MelFilterbank::standard();
    let window = hann(WINDOW_SAMPLES);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0; bank.n_bins()];
    let mut out = vec![0.0; n_frames * N_MELS];
    for t in 0..n_frames {
        let frame = &samples[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(frame[i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let row = &mut out[t * N_MELS..(t + 1) * N_MELS];
        bank.apply(&power, row);
        for v in row.iter_mut() {
            *v = v.max(LOG_FLOOR).log10();
        }
    }
    Ok((out, n_frames))
}

/// 80-channel log-Mel spectrogram with per-utterance standardization.
pub fn compute_log_mel(audio: &AudioBuffer) -> Result<MelSpectrogram, FrontendError> {
    let (raw, n_frames) = log_mel_unnormalized(audio)?;
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let frames = raw
        .iter()
        .map(|v| if std > 0.0 { ((v - mean) / std) as f32 } else { 0.0 })
        .collect();
    MelSpectrogram::new(frames, n_frames, N_MELS)
}

//! Log-mel filterbank features, per-speaker mean/variance normalization and
//! a character-to-frames renderer standing in for recorded speech.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

pub const DEFAULT_FEATURE_DIM: usize = 40;
pub const CMVN_EPSILON: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub low_freq_hz: f64,
    /// Upper filterbank edge; `0` means Nyquist.
    pub high_freq_hz: f64,
    pub log_floor: f64,
    pub dither: f64,
    pub dither_seed: u64,
    /// Frames emitted per character by the synthetic renderer.
    pub frames_per_char: usize,
    /// Standard deviation of renderer noise.
    pub render_noise: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: 8000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: DEFAULT_FEATURE_DIM,
            low_freq_hz: 20.0,
            high_freq_hz: 0.0,
            log_floor: (f32::EPSILON as f64).ln(),
            dither: 0.0,
            dither_seed: 0,
            frames_per_char: 4,
            render_noise: 0.1,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_ms < self.hop_ms || self.hop_ms <= 0.0 {
            return Err(Error::Config("window_ms must be >= hop_ms > 0".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if self.frames_per_char == 0 {
            return Err(Error::Config("frames_per_char must be at least 1".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }
}

/// `T × F` frames of real-valued features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dim: usize,
    pub frame_shift_ms: f64,
    pub frame_len_ms: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Dimension(format!(
                "{frames}x{dim} features need {} values, got {}",
                frames * dim,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureMatrix {
            data,
            frames,
            dim,
            frame_shift_ms: 10.0,
            frame_len_ms: 25.0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.frames, self.dim],
            self.data.iter().map(|&x| T::lit(x)).collect(),
        )
        .expect("consistent shape")
    }

    /// Writes the `FBNK` binary: magic, `u32` frames, `u32` dim, then
    /// row-major little-endian `f32` values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(12 + self.data.len() * 4);
        buf.extend_from_slice(b"FBNK");
        buf.extend_from_slice(&(self.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &x in &self.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != b"FBNK" {
            return Err(Error::format(path, "missing FBNK header"));
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != frames * dim * 4 {
            return Err(Error::format(
                path,
                format!("expected {} bytes of data, found {}", frames * dim * 4, body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        FeatureMatrix::new(frames, dim, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular filters spaced evenly on the mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(config: &FrontendConfig, n_fft: usize) -> Self {
        let nyquist = config.sample_rate_hz as f64 / 2.0;
        let high = if config.high_freq_hz > 0.0 {
            config.high_freq_hz.min(nyquist)
        } else {
            nyquist
        };
        let (mel_lo, mel_hi) = (hz_to_mel(config.low_freq_hz), hz_to_mel(high));
        let step = (mel_hi - mel_lo) / (config.n_mels + 1) as f64;
        let bin_hz = config.sample_rate_hz as f64 / n_fft as f64;
        let mut filters = Vec::with_capacity(config.n_mels);
        let mut centers_hz = Vec::with_capacity(config.n_mels);
        for m in 0..config.n_mels {
            let left = mel_lo + m as f64 * step;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..=n_fft / 2 {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        MelFilterbank { filters, centers_hz }
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.centers_hz[m]
    }

    /// Filter energies of a one-sided power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(start, w)| w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Reusable extractor; plans the FFT and filterbank once.
pub struct FbankExtractor {
    config: FrontendConfig,
    window: Vec<f64>,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    mel: MelFilterbank,
}

impl FbankExtractor {
    pub fn new(config: &FrontendConfig) -> Result<Self> {
        config.validate()?;
        let win = config.window_samples();
        if win == 0 || config.hop_samples() == 0 {
            return Err(Error::Config("window and hop must cover at least one sample".into()));
        }
        let n_fft = win.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(FbankExtractor {
            config: config.clone(),
            window: hamming(win),
            n_fft,
            fft,
            mel: MelFilterbank::new(config, n_fft),
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn compute(&self, waveform: &[f64]) -> Result<FeatureMatrix> {
        let win = self.window.len();
        let hop = self.config.hop_samples();
        if waveform.len() < win {
            return Err(Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one {win}-sample window",
                waveform.len()
            )));
        }
        if waveform.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        let frames = 1 + (waveform.len() - win) / hop;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.dither_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        let mut data = Vec::with_capacity(frames * self.config.n_mels);
        for t in 0..frames {
            let chunk = &waveform[t * hop..t * hop + win];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (n, (s, w)) in chunk.iter().zip(&self.window).enumerate() {
                let d = if self.config.dither > 0.0 {
                    self.config.dither * normal.sample(&mut rng)
                } else {
                    0.0
                };
                buf[n] = Complex::new((s + d) * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for e in self.mel.apply(&power) {
                data.push(e.ln().max(self.config.log_floor));
            }
        }
        let mut fm = FeatureMatrix::new(frames, self.config.n_mels, data)?;
        fm.frame_shift_ms = self.config.hop_ms;
        fm.frame_len_ms = self.config.window_ms;
        Ok(fm)
    }
}

/// Log mel filterbank energies of a waveform.
pub fn compute_fbank(waveform: &[f64], config: &FrontendConfig) -> Result<FeatureMatrix> {
    FbankExtractor::new(config)?.compute(waveform)
}

/// Reads 16-bit PCM mono WAV as raw sample values.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "expected 16-bit PCM mono"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(f64::from))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Per-dimension mean and (biased) variance over a speaker's frames.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frame_count: usize,
}

impl CmvnStats {
    pub fn from_features<'a>(feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in feats {
            if sum.is_empty() {
                sum = vec![0.0; f.dim()];
                sq = vec![0.0; f.dim()];
            } else if f.dim() != sum.len() {
                return Err(Error::Dimension("mixed feature dimensions".into()));
            }
            for t in 0..f.frames() {
                for (j, &x) in f.row(t).iter().enumerate() {
                    sum[j] += x;
                    sq[j] += x * x;
                }
            }
            count += f.frames();
        }
        if count == 0 {
            return Err(Error::InvalidInput("no frames to compute statistics".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0))
            .collect();
        Ok(CmvnStats {
            mean,
            var,
            frame_count: count,
        })
    }

    pub fn identity(dim: usize) -> Self {
        CmvnStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            frame_count: 1,
        }
    }
}

/// `(x - mean) / sqrt(var + ε)` per dimension.
pub fn apply_cmvn(features: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    check_dims(features, stats)?;
    let scale: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + CMVN_EPSILON).sqrt()).collect();
    let mut data = features.data.clone();
    for row in data.chunks_exact_mut(features.dim) {
        for ((x, m), s) in row.iter_mut().zip(&stats.mean).zip(&scale) {
            *x = (*x - m) * s;
        }
    }
    FeatureMatrix::new(features.frames, features.dim, data)
}

/// Undoes [`apply_cmvn`].
pub fn invert_cmvn(features: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    check_dims(features, stats)?;
    let mut data = features.data.clone();
    for row in data.chunks_exact_mut(features.dim) {
        for ((x, m), v) in row.iter_mut().zip(&stats.mean).zip(&stats.var) {
            *x = *x * (v + CMVN_EPSILON).sqrt() + m;
        }
    }
    FeatureMatrix::new(features.frames, features.dim, data)
}

fn check_dims(features: &FeatureMatrix, stats: &CmvnStats) -> Result<()> {
    if stats.mean.len() != features.dim || stats.var.len() != features.dim {
        return Err(Error::Dimension(format!(
            "statistics of dimension {} applied to {}-dimensional features",
            stats.mean.len(),
            features.dim
        )));
    }
    Ok(())
}

/// Statistics for every speaker, keyed by speaker id.
pub fn speaker_cmvn<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a FeatureMatrix)>,
) -> Result<BTreeMap<String, CmvnStats>> {
    let mut grouped: BTreeMap<String, Vec<&FeatureMatrix>> = BTreeMap::new();
    for (spk, f) in items {
        grouped.entry(spk.to_string()).or_default().push(f);
    }
    grouped
        .into_iter()
        .map(|(spk, fs)| CmvnStats::from_features(fs).map(|s| (spk, s)))
        .collect()
}

/// Characters the renderer knows: lowercase ASCII letters, digits, space
/// and apostrophe.
pub fn renderable(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '\''
}

/// Fixed pseudo-random prototype frame for a character.
pub fn char_prototype(c: char, dim: usize) -> Result<Vec<f64>> {
    if !renderable(c) {
        return Err(Error::InvalidInput(format!("character {c:?} cannot be rendered")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_0000_0000 ^ c as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((0..dim).map(|_| normal.sample(&mut rng)).collect())
}

/// Renders each character as `frames_per_char` copies of its prototype plus
/// Gaussian noise of standard deviation `render_noise`.
pub fn render_synthetic_frames(chars: &str, config: &FrontendConfig, seed: u64) -> Result<FeatureMatrix> {
    if chars.is_empty() {
        return Err(Error::InvalidInput("nothing to render".into()));
    }
    let dim = config.n_mels;
    let k = config.frames_per_char;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.render_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut cache: BTreeMap<char, Vec<f64>> = BTreeMap::new();
    let n_chars = chars.chars().count();
    let mut data = Vec::with_capacity(n_chars * k * dim);
    for c in chars.chars() {
        if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(c) {
            slot.insert(char_prototype(c, dim)?);
        }
        let proto = &cache[&c];
        for _ in 0..k {
            for &p in proto {
                let n = if config.render_noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(p + n);
            }
        }
    }
    FeatureMatrix::new(n_chars * k, dim, data)
}

/// Per-speaker channel colouring (gain and offset) applied to rendered
/// frames so that speaker normalization has something to remove.
pub fn speaker_channel(features: &FeatureMatrix, speaker: &str) -> FeatureMatrix {
    let seed = speaker
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5).expect("valid sigma");
    let offset: Vec<f64> = (0..features.dim).map(|_| normal.sample(&mut rng)).collect();
    let gain = 0.8 + 0.4 * rand::Rng::gen::<f64>(&mut rng);
    let mut data = features.data.clone();
    for row in data.chunks_exact_mut(features.dim) {
        for (x, o) in row.iter_mut().zip(&offset) {
            *x = *x * gain + o;
        }
    }
    FeatureMatrix::new(features.frames, features.dim, data).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_frames() {
        let cfg = FrontendConfig::default();
        let wave: Vec<f64> = (0..8000).map(|n| (n as f64 * 0.01).sin() * 1000.0).collect();
        let f = compute_fbank(&wave, &cfg).unwrap();
        assert_eq!(f.frames(), 98);
        assert_eq!(f.dim(), 40);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FrontendConfig::default();
        let f = compute_fbank(&vec![0.0; 1000], &cfg).unwrap();
        assert!(f.data().iter().all(|&x| x == cfg.log_floor));
    }

    #[test]
    fn short_waveform_is_rejected() {
        assert!(compute_fbank(&[0.0; 199], &FrontendConfig::default()).is_err());
    }

    #[test]
    fn cmvn_identity_and_constant_dimension() {
        let f = FeatureMatrix::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 4.0, 5.0]).unwrap();
        let same = apply_cmvn(&f, &CmvnStats::identity(2)).unwrap();
        for (a, b) in same.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let stats = CmvnStats::from_features([&f]).unwrap();
        let g = apply_cmvn(&f, &stats).unwrap();
        for t in 0..3 {
            assert_eq!(g.row(t)[1], 0.0);
        }
        assert!(apply_cmvn(&f, &CmvnStats::identity(3)).is_err());
    }

    #[test]
    fn render_lengths_and_clean_prototypes() {
        let mut cfg = FrontendConfig::default();
        let f = render_synthetic_frames("ab", &cfg, 1).unwrap();
        assert_eq!(f.frames(), 8);
        cfg.render_noise = 0.0;
        let f = render_synthetic_frames("ab", &cfg, 1).unwrap();
        let pa = char_prototype('a', 40).unwrap();
        let pb = char_prototype('b', 40).unwrap();
        for t in 0..4 {
            assert_eq!(f.row(t), pa.as_slice());
            assert_eq!(f.row(t + 4), pb.as_slice());
        }
        assert!(render_synthetic_frames("a?", &cfg, 1).is_err());
        assert!(render_synthetic_frames("", &cfg, 1).is_err());
    }

    #[test]
    fn fbnk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fbnk");
        let f = FeatureMatrix::new(2, 3, vec![0.5, -1.25, 3.0, 4.0, 0.0, -8.5]).unwrap();
        f.write(&path).unwrap();
        let g = FeatureMatrix::read(&path).unwrap();
        assert_eq!(g.data(), f.data());
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(FeatureMatrix::read(&path).is_err());
    }
}

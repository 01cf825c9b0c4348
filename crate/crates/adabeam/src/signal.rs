//! Deterministic DSP front-end: framing, STFT, power spectrum, Mel
//! filterbank, log compression and global mean/variance normalization.
//!
//! Everything here is a pure function of its inputs. The portion of the
//! chain the trainer differentiates through (power spectrum -> log-Mel ->
//! normalization) also has hand-derived backward passes in this module;
//! framing and the STFT sit in front of the network and never receive
//! gradient.
//!
//! Conventions, fixed once and documented here:
//! - Hann window is periodic: `w[n] = 0.5 (1 - cos(2 pi n/N))`.
//! - Mel scale is `mel(f) = 2595 log10(1 + f/700)`; triangles are peak-
//!   normalized so every filter row has maximum exactly 1.0 (no area
//!   normalization).
//! - `log` is the natural logarithm, floored at [`LOG_FLOOR`].
//! - Normalization uses the population (biased) variance convention, with
//!   the standard deviation floored at [`STD_FLOOR`].

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use num_complex::Complex;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{cf, Error, Real, Result};

/// Floor applied to Mel energies before the log, so a silent (or zeroed-out)
/// beamformer output still produces finite features.
pub const LOG_FLOOR: f64 = 1e-10;

/// Floor applied to per-dimension standard deviations in [`NormStats`].
pub const STD_FLOOR: f64 = 1e-5;

/// Analysis window shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Rect,
}

impl WindowKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            "rect" => Ok(WindowKind::Rect),
            other => Err(Error::Config(format!("unknown window kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Rect => "rect",
        }
    }
}

/// Single-channel audio signal.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// STFT analysis parameters shared by the whole pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl StftConfig {
    /// Number of retained bins `F = fft_size/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        if len < self.win_len {
            return Err(Error::Invalid("utterance too short".into()));
        }
        Ok(1 + (len - self.win_len) / self.hop)
    }

    /// Exact signal length that yields `t` frames with no trailing remainder.
    pub fn len_for_frames(&self, t: usize) -> usize {
        assert!(t >= 1);
        self.win_len + (t - 1) * self.hop
    }
}

/// Complex STFT coefficients of an M-channel signal, frame-major `T x F x M`.
#[derive(Clone, Debug)]
pub struct MultichannelSpectrogram {
    pub data: Array3<Complex64>,
    /// Hop duration in seconds.
    pub frame_period: f64,
    pub fft_size: usize,
}

impl MultichannelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Cast to single precision for the `f32` evaluation mode.
    pub fn to_f32(&self) -> Array3<Complex<f32>> {
        self.data.mapv(|c| Complex::new(c.re as f32, c.im as f32))
    }
}

/// Triangular Mel filterbank, `B x F` nonnegative weights.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    /// The B+2 triangle corner frequencies in Hz.
    pub band_edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.weights.mapv(|w| w as f32)
    }
}

/// A `T x B` matrix of log-Mel feature frames.
#[derive(Clone, Debug)]
pub struct LogMelSequence {
    pub frames: Array2<f64>,
}

/// Per-dimension mean and (floored) standard deviation over a feature corpus.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Slice a signal into overlapping windowed frames, `T x win_len`.
///
/// Frame `t` starts at sample `t*hop`; `T = 1 + floor((len-win_len)/hop)`.
pub fn frame_and_window(
    w: &Waveform,
    win_len: usize,
    hop: usize,
    window: WindowKind,
) -> Result<Array2<f64>> {
    if win_len == 0 || hop == 0 {
        return Err(Error::Invalid("win_len and hop must be >= 1".into()));
    }
    if w.len() < win_len {
        return Err(Error::Invalid("utterance too short".into()));
    }
    let n_frames = 1 + (w.len() - win_len) / hop;
    let win = window_values(window, win_len);
    let mut frames = Array2::<f64>::zeros((n_frames, win_len));
    for t in 0..n_frames {
        let start = t * hop;
        for n in 0..win_len {
            frames[[t, n]] = w.samples[start + n] * win[n];
        }
    }
    Ok(frames)
}

fn window_values(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rect => vec![1.0; len],
        WindowKind::Hann => (0..len)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
            .collect(),
    }
}

/// DFT of each frame, keeping the first `F = fft_size/2 + 1` bins.
///
/// Frames shorter than `fft_size` are zero-padded on the right.
pub fn stft(frames: &Array2<f64>, fft_size: usize) -> Result<Array2<Complex64>> {
    if !fft_size.is_power_of_two() {
        return Err(Error::Invalid(format!(
            "fft_size must be a power of two, got {fft_size}"
        )));
    }
    let win_len = frames.shape()[1];
    if fft_size < win_len {
        return Err(Error::Invalid(format!(
            "fft_size {fft_size} smaller than window length {win_len}"
        )));
    }
    let n_frames = frames.shape()[0];
    let n_bins = fft_size / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut out = Array2::<Complex64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for t in 0..n_frames {
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < win_len {
                Complex64::new(frames[[t, n]], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for f in 0..n_bins {
            out[[t, f]] = buf[f];
        }
    }
    Ok(out)
}

/// Frame, window and transform a single channel in one call.
pub fn stft_waveform(w: &Waveform, cfg: &StftConfig) -> Result<Array2<Complex64>> {
    let frames = frame_and_window(w, cfg.win_len, cfg.hop, cfg.window)?;
    stft(&frames, cfg.fft_size)
}

/// Stack the STFTs of M equally long channels into a `T x F x M` spectrogram.
pub fn multichannel_stft(channels: &[Waveform], cfg: &StftConfig) -> Result<MultichannelSpectrogram> {
    if channels.is_empty() {
        return Err(Error::Invalid("need at least one channel".into()));
    }
    let len = channels[0].len();
    let rate = channels[0].sample_rate;
    for (m, ch) in channels.iter().enumerate() {
        if ch.len() != len {
            return Err(Error::Invalid(format!(
                "channel {m} has {} samples, channel 0 has {len}; identical lengths required",
                ch.len()
            )));
        }
        if ch.sample_rate != rate {
            return Err(Error::Invalid("channel sample rates differ".into()));
        }
    }
    let per_channel: Vec<Array2<Complex64>> = channels
        .iter()
        .map(|ch| stft_waveform(ch, cfg))
        .collect::<Result<_>>()?;
    let n_frames = per_channel[0].shape()[0];
    let n_bins = per_channel[0].shape()[1];
    let mut data = Array3::<Complex64>::zeros((n_frames, n_bins, channels.len()));
    for (m, spec) in per_channel.iter().enumerate() {
        for t in 0..n_frames {
            for f in 0..n_bins {
                data[[t, f, m]] = spec[[t, f]];
            }
        }
    }
    Ok(MultichannelSpectrogram {
        data,
        frame_period: cfg.hop as f64 / rate as f64,
        fft_size: cfg.fft_size,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Build `n_mels` triangular filters with apexes equally spaced on the Mel
/// scale between `fmin` and `fmax`, sampled on the `n_bins` FFT bin centers
/// of `(sample_rate, fft_size = 2(n_bins-1))`, then peak-normalized so every
/// row has maximum exactly 1.0.
pub fn build_mel_filterbank(
    n_mels: usize,
    n_bins: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    if n_mels == 0 {
        return Err(Error::Invalid("n_mels must be >= 1".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(Error::Invalid(format!(
            "need 0 <= fmin < fmax <= Nyquist, got fmin={fmin} fmax={fmax} nyquist={nyquist}"
        )));
    }
    let fft_size = 2 * (n_bins - 1);
    let bin_hz = sample_rate as f64 / fft_size as f64;

    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|j| mel_to_hz(mel_lo + (mel_hi - mel_lo) * j as f64 / (n_mels + 1) as f64))
        .collect();

    // The B+2 corner frequencies must land on distinct FFT bins, otherwise
    // some triangle has no support.
    let rounded: Vec<i64> = edges.iter().map(|f| (f / bin_hz).round() as i64).collect();
    for w in rounded.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Invalid("resolution too low".into()));
        }
    }

    let mut weights = Array2::<f64>::zeros((n_mels, n_bins));
    for b in 0..n_mels {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let mut row_max = 0.0f64;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            let w = rise.min(fall).max(0.0);
            weights[[b, k]] = w;
            row_max = row_max.max(w);
        }
        if row_max <= 0.0 {
            return Err(Error::Invalid("resolution too low".into()));
        }
        for k in 0..n_bins {
            weights[[b, k]] /= row_max;
        }
    }
    Ok(MelFilterbank {
        weights,
        band_edges: edges,
    })
}

/// Per-bin power `Re(x)^2 + Im(x)^2` of one beamformed frame.
pub fn power_spectrum<F: Real>(xhat: &[Complex<F>]) -> Array1<F> {
    Array1::from_iter(xhat.iter().map(|c| c.re * c.re + c.im * c.im))
}

/// Gradient of [`power_spectrum`]: `dL/dxhat[f] = (2 Re(xhat) dP, 2 Im(xhat) dP)`.
pub fn power_spectrum_backward(d_power: &ArrayView1<f64>, xhat: &[Complex64]) -> Vec<Complex64> {
    xhat.iter()
        .zip(d_power.iter())
        .map(|(c, dp)| Complex64::new(2.0 * c.re * dp, 2.0 * c.im * dp))
        .collect()
}

/// Log-Mel features of one power spectrum frame: `log(max(fb*P, floor))`.
pub fn log_mel<F: Real>(
    power: &ArrayView1<F>,
    weights: &Array2<F>,
    floor: f64,
) -> Result<Array1<F>> {
    if power.iter().any(|p| *p < F::zero()) {
        return Err(Error::Numeric(
            "negative power spectrum input to log_mel".into(),
        ));
    }
    let floor = cf::<F>(floor);
    let mel = weights.dot(power);
    Ok(mel.mapv(|a| a.max(floor).ln()))
}

/// Gradient of [`log_mel`] with respect to the power spectrum.
///
/// Channels at or below the floor are constant in the forward pass and
/// contribute zero gradient.
pub fn log_mel_backward(
    d_logmel: &ArrayView1<f64>,
    power: &ArrayView1<f64>,
    fb: &MelFilterbank,
    floor: f64,
) -> Array1<f64> {
    let mel = fb.weights.dot(power);
    let d_mel = Array1::from_iter(
        mel.iter()
            .zip(d_logmel.iter())
            .map(|(&a, &dz)| if a > floor { dz / a } else { 0.0 }),
    );
    fb.weights.t().dot(&d_mel)
}

/// Population mean and floored standard deviation per feature dimension,
/// pooled over all frames of all sequences. Two-pass for stability.
pub fn compute_global_stats(features: &[LogMelSequence]) -> Result<NormStats> {
    let total_frames: usize = features.iter().map(|s| s.frames.shape()[0]).sum();
    if total_frames < 2 {
        return Err(Error::Invalid(
            "need at least 2 frames to compute normalization stats".into(),
        ));
    }
    let dim = features
        .iter()
        .find(|s| s.frames.shape()[0] > 0)
        .map(|s| s.frames.shape()[1])
        .ok_or_else(|| Error::Invalid("empty feature set".into()))?;
    for s in features {
        if s.frames.shape()[0] > 0 && s.frames.shape()[1] != dim {
            return Err(Error::Invalid("feature dimension mismatch across sequences".into()));
        }
    }
    let n = total_frames as f64;
    let mut mean = Array1::<f64>::zeros(dim);
    for s in features {
        mean += &s.frames.sum_axis(Axis(0));
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(dim);
    for s in features {
        for row in s.frames.rows() {
            let d = &row.to_owned() - &mean;
            var += &d.mapv(|x| x * x);
        }
    }
    var /= n;
    let std = var.mapv(|v| v.max(0.0).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// `(z - mean) / std`, elementwise per frame.
pub fn normalize(z: &LogMelSequence, stats: &NormStats) -> LogMelSequence {
    let mut frames = z.frames.clone();
    for mut row in frames.rows_mut() {
        row -= &stats.mean;
        row /= &stats.std;
    }
    LogMelSequence { frames }
}

/// Normalize a single frame in the active scalar type.
pub fn normalize_frame<F: Real>(z: &Array1<F>, mean: &Array1<F>, std: &Array1<F>) -> Array1<F> {
    (z - mean) / std
}

/// Exact inverse of [`normalize`].
pub fn denormalize(z: &LogMelSequence, stats: &NormStats) -> LogMelSequence {
    let mut frames = z.frames.clone();
    for mut row in frames.rows_mut() {
        row *= &stats.std;
        row += &stats.mean;
    }
    LogMelSequence { frames }
}

/// Gradient of [`normalize_frame`]: divide the incoming gradient by std.
pub fn normalize_backward(d_out: &ArrayView1<f64>, stats: &NormStats) -> Array1<f64> {
    &d_out.to_owned() / &stats.std
}

//! Deterministic synthetic multichannel scenes.
//!
//! Sources are class-labeled "speech" stand-ins: each non-silence class is a
//! triple of formant resonators excited by white noise. A source moves (or
//! sits still) in front of a linear microphone array under free-field
//! propagation: per-channel time-varying fractional delay plus 1/r gain,
//! with a directional white-noise interferer mixed at a configured SNR.
//! The ground-truth alignment delays land on the analysis frame grid, which
//! is what makes delay-and-sum closure and adaptivity checks exact.
//!
//! Geometry: mics on the x axis centered at the origin, spaced `spacing`
//! apart; mic 0 is the reference channel and reaches the output with zero
//! delay and unit gain, exactly. `true_delays[t][m]` is the delay to apply
//! to channel m so it aligns with channel 0 (negative when channel m hears
//! the source later).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::signal::Waveform;
use crate::{derive_seed, Error, Result};

/// Speed of sound used throughout, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Crossfade length at class-run boundaries, seconds.
pub const CROSSFADE_S: f64 = 0.005;

/// Windowed-sinc interpolator length (taps).
pub const DELAY_FILTER_TAPS: usize = 32;

/// Target RMS of each synthesized class run.
pub const SOURCE_RMS: f64 = 0.1;

/// Class id reserved for silence.
pub const SILENCE_CLASS: usize = 0;

/// Formant definitions per class; class 0 is silence and has none.
#[derive(Clone, Debug)]
pub struct ClassBank {
    /// Per class: three (center_hz, bandwidth_hz) resonators.
    pub formants: Vec<[(f64, f64); 3]>,
}

impl ClassBank {
    /// Deterministically sample a bank of `n_classes` classes (class 0 is
    /// silence). Formant centers stay within 300-3400 Hz, pairwise at least
    /// 300 Hz apart within a class so the spectral peaks stay resolvable.
    pub fn generate(n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Invalid("need at least 2 classes (silence + 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut formants = vec![[(0.0, 0.0); 3]];
        for _ in 1..n_classes {
            let centers = loop {
                let mut c = [
                    rng.gen_range(300.0..3400.0),
                    rng.gen_range(300.0..3400.0),
                    rng.gen_range(300.0..3400.0),
                ];
                c.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if c[1] - c[0] >= 300.0 && c[2] - c[1] >= 300.0 {
                    break c;
                }
            };
            let mut f = [(0.0, 0.0); 3];
            for (slot, &c) in f.iter_mut().zip(centers.iter()) {
                *slot = (c, rng.gen_range(60.0..160.0));
            }
            formants.push(f);
        }
        Ok(ClassBank { formants })
    }

    pub fn n_classes(&self) -> usize {
        self.formants.len()
    }
}

/// Full description of one scene.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub n_mics: usize,
    /// Microphone spacing in meters.
    pub spacing: f64,
    /// Source position at the first and last sample; linear motion between.
    pub source_start: [f64; 2],
    pub source_end: [f64; 2],
    /// Fixed position of the white-noise interferer.
    pub noise_pos: [f64; 2],
    /// Signal-to-noise ratio at the reference mic over speech-active frames;
    /// `f64::INFINITY` disables the interferer.
    pub snr_db: f64,
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn n_samples(&self) -> usize {
        self.win_len + (self.n_frames - 1) * self.hop
    }

    pub fn is_static(&self) -> bool {
        self.source_start == self.source_end
    }

    fn mic_x(&self, m: usize) -> f64 {
        (m as f64 - (self.n_mics as f64 - 1.0) / 2.0) * self.spacing
    }

    /// Source position at time `t` seconds.
    fn source_at(&self, t: f64) -> [f64; 2] {
        let dur = (self.n_samples() - 1) as f64 / self.sample_rate as f64;
        let a = if dur > 0.0 { (t / dur).clamp(0.0, 1.0) } else { 0.0 };
        [
            self.source_start[0] + a * (self.source_end[0] - self.source_start[0]),
            self.source_start[1] + a * (self.source_end[1] - self.source_start[1]),
        ]
    }

    fn dist_to_mic(&self, pos: [f64; 2], m: usize) -> f64 {
        let dx = pos[0] - self.mic_x(m);
        let dy = pos[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Whether the source moved during the scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Static,
    Moving,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Static => "static",
            Condition::Moving => "moving",
        }
    }
}

/// A rendered scene with supervision targets.
#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub waveforms: Vec<Waveform>,
    pub frame_labels: Vec<usize>,
    /// Per (frame, mic): alignment delay in seconds relative to mic 0.
    pub true_delays: Array2<f64>,
    pub condition: Condition,
    pub snr_db: f64,
}

impl LabeledScene {
    pub fn n_frames(&self) -> usize {
        self.frame_labels.len()
    }

    pub fn n_channels(&self) -> usize {
        self.waveforms.len()
    }
}

/// Delay a signal by a (possibly time-varying) fractional number of samples
/// using a Hann-tapered windowed-sinc interpolator. `delay(n)` is the delay
/// in samples applied at output index `n`; samples outside the input are
/// treated as zero. Exact for integer delays.
pub fn fractional_delay(x: &[f64], delay: impl Fn(usize) -> f64, taps: usize) -> Vec<f64> {
    assert!(taps >= 2 && taps % 2 == 0, "taps must be even and >= 2");
    let half = (taps / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for (n, out) in y.iter_mut().enumerate() {
        let pos = n as f64 - delay(n);
        let base = pos.floor();
        let frac = pos - base;
        let base = base as isize;
        let mut acc = 0.0;
        for k in (1 - half)..=half {
            let j = base + k;
            if j < 0 || j as usize >= x.len() {
                continue;
            }
            let u = k as f64 - frac;
            acc += x[j as usize] * windowed_sinc(u, half as f64);
        }
        *out = acc;
    }
    y
}

fn windowed_sinc(u: f64, half: f64) -> f64 {
    if u.abs() >= half {
        return 0.0;
    }
    // Integer arguments hit the sinc zero crossings exactly, which keeps
    // integer delays bit-exact instead of accumulating sin(pi*k) residue.
    if u == u.trunc() {
        return if u == 0.0 { 1.0 } else { 0.0 };
    }
    let pu = std::f64::consts::PI * u;
    (pu.sin() / pu) * 0.5 * (1.0 + (std::f64::consts::PI * u / half).cos())
}

fn resonator(input: &[f64], center_hz: f64, bandwidth_hz: f64, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let r = (-std::f64::consts::PI * bandwidth_hz / fs).exp();
    let a1 = 2.0 * r * (2.0 * std::f64::consts::PI * center_hz / fs).cos();
    let a2 = -r * r;
    let mut y = vec![0.0; input.len()];
    let (mut y1, mut y2) = (0.0, 0.0);
    for (n, &x) in input.iter().enumerate() {
        let v = x + a1 * y1 + a2 * y2;
        y[n] = v;
        y2 = y1;
        y1 = v;
    }
    y
}

/// Synthesize a labeled source signal on the frame grid: segment `t` of the
/// signal (one hop long, the last extending to the window tail) carries
/// class `label_seq[t]`, runs of equal labels are generated as continuous
/// formant noise, and consecutive runs are crossfaded over 5 ms.
pub fn synth_source(
    label_seq: &[usize],
    bank: &ClassBank,
    sample_rate: u32,
    win_len: usize,
    hop: usize,
    seed: u64,
) -> Result<Waveform> {
    if label_seq.is_empty() {
        return Err(Error::Invalid("empty label sequence".into()));
    }
    for &l in label_seq {
        if l >= bank.n_classes() {
            return Err(Error::Invalid(format!(
                "unknown class id {l} (bank has {} classes)",
                bank.n_classes()
            )));
        }
    }
    let n_frames = label_seq.len();
    let n = win_len + (n_frames - 1) * hop;
    let xf = ((CROSSFADE_S * sample_rate as f64).round() as usize).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];

    // Runs of identical labels, with sample spans on the hop grid.
    let mut runs: Vec<(usize, usize, usize)> = Vec::new(); // (class, start_frame, end_frame)
    let mut start = 0;
    for t in 1..=n_frames {
        if t == n_frames || label_seq[t] != label_seq[start] {
            runs.push((label_seq[start], start, t));
            start = t;
        }
    }

    for (ri, &(class, f0, f1)) in runs.iter().enumerate() {
        let s0 = f0 * hop;
        let s1 = if f1 == n_frames { n } else { f1 * hop };
        // Extend by half a crossfade on each interior side.
        let a = if ri == 0 { s0 } else { s0.saturating_sub(xf / 2) };
        let b = if ri == runs.len() - 1 { s1 } else { (s1 + xf / 2).min(n) };
        // Draw the excitation even for silence so downstream runs keep their
        // content when label sequences share a prefix.
        let excitation: Vec<f64> = (0..b - a).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if class == SILENCE_CLASS {
            continue;
        }
        let mut chunk = vec![0.0; b - a];
        for &(fc, bw) in &bank.formants[class] {
            let band = resonator(&excitation, fc, bw, sample_rate);
            for (c, v) in chunk.iter_mut().zip(band.iter()) {
                *c += v;
            }
        }
        let rms = (chunk.iter().map(|v| v * v).sum::<f64>() / chunk.len() as f64).sqrt();
        if rms > 0.0 {
            let g = SOURCE_RMS / rms;
            for c in chunk.iter_mut() {
                *c *= g;
            }
        }
        // Raised-cosine edges over the extended margins.
        for (i, c) in chunk.iter_mut().enumerate() {
            let pos = a + i;
            let mut env = 1.0;
            if ri > 0 && pos < s0 + xf / 2 {
                let u = (pos as f64 - (s0 as f64 - xf as f64 / 2.0)) / xf as f64;
                env *= (std::f64::consts::PI * (u.clamp(0.0, 1.0) - 1.0) / 2.0).cos().powi(2);
            }
            if ri < runs.len() - 1 && pos >= s1.saturating_sub(xf / 2) {
                let u = (pos as f64 - (s1 as f64 - xf as f64 / 2.0)) / xf as f64;
                env *= (std::f64::consts::PI * u.clamp(0.0, 1.0) / 2.0).cos().powi(2);
            }
            *c *= env;
        }
        for (i, v) in chunk.iter().enumerate() {
            out[a + i] += v;
        }
    }
    Waveform::new(out, sample_rate)
}

/// Propagate a source (and the configured noise interferer) to every
/// microphone. Labels ride along both because the scene carries them as
/// supervision and because the SNR is measured over speech-active frames.
pub fn propagate(source: &Waveform, labels: &[usize], cfg: &SceneConfig) -> Result<LabeledScene> {
    if cfg.n_mics == 0 {
        return Err(Error::Invalid("need at least one microphone".into()));
    }
    if labels.len() != cfg.n_frames {
        return Err(Error::Invalid(format!(
            "{} labels for {} frames",
            labels.len(),
            cfg.n_frames
        )));
    }
    let n = cfg.n_samples();
    if source.len() != n {
        return Err(Error::Invalid(format!(
            "source has {} samples, scene needs {n}",
            source.len()
        )));
    }
    if !cfg.snr_db.is_finite() && cfg.snr_db < 0.0 {
        return Err(Error::Invalid("SNR must be finite or +inf".into()));
    }
    let fs = cfg.sample_rate as f64;

    // Ground-truth alignment delays on the frame grid, and the rate bound.
    let mut true_delays = Array2::<f64>::zeros((cfg.n_frames, cfg.n_mics));
    for t in 0..cfg.n_frames {
        let tc = (t * cfg.hop + cfg.win_len / 2) as f64 / fs;
        let pos = cfg.source_at(tc);
        let d0 = cfg.dist_to_mic(pos, 0);
        for m in 0..cfg.n_mics {
            true_delays[[t, m]] = (d0 - cfg.dist_to_mic(pos, m)) / SPEED_OF_SOUND;
        }
    }
    for m in 0..cfg.n_mics {
        for t in 1..cfg.n_frames {
            if (true_delays[[t, m]] - true_delays[[t - 1, m]]).abs() * fs >= 1.0 {
                return Err(Error::Invalid("trajectory violates delay-rate bound".into()));
            }
        }
    }

    // Speech path. Mic 0 is identity by construction.
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_mics);
    channels.push(source.samples.clone());
    let source_static = cfg.is_static();
    for m in 1..cfg.n_mics {
        let ch = if source_static {
            let pos = cfg.source_at(0.0);
            let d0 = cfg.dist_to_mic(pos, 0);
            let dm = cfg.dist_to_mic(pos, m);
            let delay = (dm - d0) / SPEED_OF_SOUND * fs;
            let gain = d0 / dm;
            let mut y = fractional_delay(&source.samples, |_| delay, DELAY_FILTER_TAPS);
            for v in y.iter_mut() {
                *v *= gain;
            }
            y
        } else {
            let delays: Vec<f64> = (0..n)
                .map(|i| {
                    let pos = cfg.source_at(i as f64 / fs);
                    (cfg.dist_to_mic(pos, m) - cfg.dist_to_mic(pos, 0)) / SPEED_OF_SOUND * fs
                })
                .collect();
            let gains: Vec<f64> = (0..n)
                .map(|i| {
                    let pos = cfg.source_at(i as f64 / fs);
                    cfg.dist_to_mic(pos, 0) / cfg.dist_to_mic(pos, m)
                })
                .collect();
            let mut y = fractional_delay(&source.samples, |i| delays[i], DELAY_FILTER_TAPS);
            for (v, g) in y.iter_mut().zip(gains.iter()) {
                *v *= g;
            }
            y
        };
        channels.push(ch);
    }

    // Directional noise at the configured SNR.
    if cfg.snr_db.is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "scene-noise", 0));
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d0 = cfg.dist_to_mic(cfg.noise_pos, 0);
        let mut noise_ch: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_mics);
        noise_ch.push(raw.clone());
        for m in 1..cfg.n_mics {
            let dm = cfg.dist_to_mic(cfg.noise_pos, m);
            let delay = (dm - d0) / SPEED_OF_SOUND * fs;
            let gain = d0 / dm;
            let mut y = fractional_delay(&raw, |_| delay, DELAY_FILTER_TAPS);
            for v in y.iter_mut() {
                *v *= gain;
            }
            noise_ch.push(y);
        }

        // Active-sample mask: union of frames with a non-silence label.
        let mut active = vec![false; n];
        for (t, &l) in labels.iter().enumerate() {
            if l != SILENCE_CLASS {
                for s in t * cfg.hop..(t * cfg.hop + cfg.win_len).min(n) {
                    active[s] = true;
                }
            }
        }
        let masked_rms = |x: &[f64]| {
            let (mut acc, mut cnt) = (0.0, 0usize);
            for (v, &a) in x.iter().zip(active.iter()) {
                if a {
                    acc += v * v;
                    cnt += 1;
                }
            }
            if cnt == 0 {
                0.0
            } else {
                (acc / cnt as f64).sqrt()
            }
        };
        let speech_rms = masked_rms(&channels[0]);
        let noise_rms = masked_rms(&noise_ch[0]);
        if speech_rms > 0.0 && noise_rms > 0.0 {
            let target = speech_rms / 10f64.powf(cfg.snr_db / 20.0);
            let scale = target / noise_rms;
            for (ch, nz) in channels.iter_mut().zip(noise_ch.iter()) {
                for (v, w) in ch.iter_mut().zip(nz.iter()) {
                    *v += scale * w;
                }
            }
        }
    }

    let waveforms = channels
        .into_iter()
        .map(|s| Waveform::new(s, cfg.sample_rate))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledScene {
        waveforms,
        frame_labels: labels.to_vec(),
        true_delays,
        condition: if source_static { Condition::Static } else { Condition::Moving },
        snr_db: cfg.snr_db,
    })
}

/// Ranges from which per-scene geometry and labels are sampled.
#[derive(Clone, Debug)]
pub struct SceneTemplate {
    pub n_mics: usize,
    pub spacing: f64,
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub n_classes: usize,
    pub snr_db: f64,
    /// Fraction of scenes with a moving source.
    pub fraction_moving: f64,
    /// Source distance range in meters.
    pub source_dist: (f64, f64),
    /// Source angle range from broadside, radians.
    pub source_angle: (f64, f64),
    /// Source speed range for moving scenes, m/s.
    pub speed: (f64, f64),
    pub noise_dist: f64,
    pub noise_angle: f64,
}

/// A generated dataset split three ways.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<LabeledScene>,
    pub dev: Vec<LabeledScene>,
    pub test: Vec<LabeledScene>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[LabeledScene]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split '{other}'"))),
        }
    }
}

fn random_label_sequence(rng: &mut ChaCha8Rng, n_frames: usize, n_classes: usize) -> Vec<usize> {
    let mut labels = Vec::with_capacity(n_frames);
    let mut first = true;
    while labels.len() < n_frames {
        let class = if !first && rng.gen_bool(0.2) {
            SILENCE_CLASS
        } else {
            rng.gen_range(1..n_classes)
        };
        first = false;
        let run = rng.gen_range(5..=20).min(n_frames - labels.len());
        labels.extend(std::iter::repeat(class).take(run));
    }
    labels
}

fn polar(dist: f64, angle: f64) -> [f64; 2] {
    [dist * angle.sin(), dist * angle.cos()]
}

/// Generate a dataset of `n_scenes` scenes split `ratios` ways (train, dev,
/// test). Scene seeds derive from the master seed; label sequences use
/// split-specific generator streams so splits cannot share sequences.
pub fn make_dataset(
    n_scenes: usize,
    template: &SceneTemplate,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset> {
    let (r_train, r_dev, r_test) = ratios;
    if (r_train + r_dev + r_test - 1.0).abs() > 1e-9 || r_train < 0.0 || r_dev < 0.0 || r_test < 0.0 {
        return Err(Error::Config("split ratios must be nonnegative and sum to 1".into()));
    }
    if n_scenes < 3 {
        return Err(Error::Config("n_scenes must be at least the number of splits".into()));
    }
    let n_train = ((n_scenes as f64) * r_train).round() as usize;
    let n_dev = ((n_scenes as f64) * r_dev).round() as usize;
    let n_train = n_train.clamp(1, n_scenes - 2);
    let n_dev = n_dev.clamp(1, n_scenes - n_train - 1);
    let n_test = n_scenes - n_train - n_dev;

    // The shared class bank must be identical for every scene, so the scene
    // seed folds the same bank seed in regardless of split.
    let mut splits = Vec::new();
    for (name, count) in [("train", n_train), ("dev", n_dev), ("test", n_test)] {
        let mut scenes = Vec::with_capacity(count);
        for i in 0..count {
            // Even spread of moving scenes through each split.
            let moving = bresenham_hit(i, template.fraction_moving);
            let scene_seed = derive_seed(seed, name, i as u64);
            scenes.push(make_scene(template, scene_seed, seed, moving)?);
        }
        splits.push(scenes);
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        train: it.next().unwrap(),
        dev: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

fn bresenham_hit(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

/// Generate one scene. The class bank derives from `bank_seed` so all scenes
/// of a dataset share one bank; everything else derives from `scene_seed`.
pub fn make_scene(
    template: &SceneTemplate,
    scene_seed: u64,
    bank_seed: u64,
    moving: bool,
) -> Result<LabeledScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, "scene-geometry", 0));
    let labels = random_label_sequence(
        &mut ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, "scene-labels", 0)),
        template.n_frames,
        template.n_classes,
    );
    let dist = rng.gen_range(template.source_dist.0..template.source_dist.1);
    let angle = rng.gen_range(template.source_angle.0..template.source_angle.1);
    let start = polar(dist, angle);
    let end = if moving {
        let speed = rng.gen_range(template.speed.0..template.speed.1);
        let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dur = (template.win_len + (template.n_frames - 1) * template.hop) as f64
            / template.sample_rate as f64;
        let mut e = [
            start[0] + speed * dur * heading.cos(),
            start[1] + speed * dur * heading.sin(),
        ];
        if e[1] < 0.5 {
            e[1] = 0.5;
        }
        e
    } else {
        start
    };
    let cfg = SceneConfig {
        n_mics: template.n_mics,
        spacing: template.spacing,
        source_start: start,
        source_end: end,
        noise_pos: polar(template.noise_dist, template.noise_angle),
        snr_db: template.snr_db,
        sample_rate: template.sample_rate,
        win_len: template.win_len,
        hop: template.hop,
        n_frames: template.n_frames,
        seed: scene_seed,
    };
    let bank = ClassBank::generate(template.n_classes, derive_seed(bank_seed, "class-bank", 0))?;
    let source = synth_source(
        &labels,
        &bank,
        template.sample_rate,
        template.win_len,
        template.hop,
        derive_seed(scene_seed, "scene-source", 0),
    )?;
    propagate(&source, &labels, &cfg)
}

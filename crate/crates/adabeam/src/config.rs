//! Run configuration shared by every command.
//!
//! Config files are plain text, one `key = value` assignment per line; `#`
//! starts a comment. Keys missing from a file keep their desk-scale defaults,
//! unknown and duplicate keys are rejected. [`Config::echo`] renders every
//! key in schema order and parses back to an identical value, which is what
//! makes the `config.lock` round-trip guarantee hold.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::pipeline::NetDims;
use crate::scenesim::SceneTemplate;
use crate::signal::{build_mel_filterbank, MelFilterbank, StftConfig, WindowKind};
use crate::{Error, Result};

trait Value: Sized {
    fn parse(key: &str, raw: &str) -> Result<Self>;
    fn echo(&self) -> String;
}

fn bad(key: &str, raw: &str, want: &str) -> Error {
    Error::Config(format!("key '{key}': expected {want}, got '{raw}'"))
}

macro_rules! int_value {
    ($($ty:ty),+) => {$(
        impl Value for $ty {
            fn parse(key: &str, raw: &str) -> Result<Self> {
                raw.parse().map_err(|_| bad(key, raw, "an unsigned integer"))
            }
            fn echo(&self) -> String {
                self.to_string()
            }
        }
    )+};
}

int_value!(u32, u64, usize);

impl Value for f64 {
    fn parse(key: &str, raw: &str) -> Result<Self> {
        match raw {
            "inf" => Ok(f64::INFINITY),
            _ => raw.parse().map_err(|_| bad(key, raw, "a number")),
        }
    }

    // `Display` for floats prints the shortest string that parses back to
    // the same bits, so echoed values round-trip exactly.
    fn echo(&self) -> String {
        if *self == f64::INFINITY {
            "inf".into()
        } else {
            self.to_string()
        }
    }
}

impl Value for WindowKind {
    fn parse(key: &str, raw: &str) -> Result<Self> {
        WindowKind::parse(raw).map_err(|_| bad(key, raw, "'hann' or 'rect'"))
    }

    fn echo(&self) -> String {
        self.name().into()
    }
}

macro_rules! schema {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),+ $(,)?) => {
        /// One flat bag of typed settings. Field order is schema order: it
        /// fixes the lockfile layout.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[$doc])* pub $field: $ty, )+
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $field: $default, )+ }
            }
        }

        impl Config {
            fn assign(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = Value::parse(key, raw)?;
                        Ok(())
                    } )+
                    _ => Err(Error::Config(format!("unknown config key '{key}'"))),
                }
            }

            /// Render every key in schema order. Parsing the result gives back
            /// an identical configuration, and rendering is deterministic, so
            /// two echoes of equal configs are byte-identical.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{} = {}", stringify!($field), Value::echo(&self.$field)); )+
                out
            }
        }
    };
}

schema! {
    /// Master seed; every stream below derives from it.
    seed: u64 = 1234,
    sample_rate: u32 = 8000,
    fft_size: usize = 256,
    win_len: usize = 200,
    hop: usize = 80,
    window: WindowKind = WindowKind::Hann,
    n_mels: usize = 20,
    mel_fmin: f64 = 0.0,
    mel_fmax: f64 = 4000.0,
    n_mics: usize = 3,
    /// Microphone spacing in meters.
    spacing: f64 = 0.05,
    n_classes: usize = 10,
    n_scenes: usize = 200,
    /// Frames per scene.
    n_frames: usize = 100,
    /// SNR over speech-active frames at the reference mic; `inf` disables the
    /// interferer.
    snr_db: f64 = 0.0,
    fraction_moving: f64 = 0.5,
    split_train: f64 = 0.8,
    split_dev: f64 = 0.1,
    split_test: f64 = 0.1,
    source_dist_min: f64 = 1.0,
    source_dist_max: f64 = 2.5,
    /// Source angle from broadside, radians.
    source_angle_min: f64 = -1.0,
    source_angle_max: f64 = 1.0,
    /// Source speed for moving scenes, m/s.
    speed_min: f64 = 1.0,
    speed_max: f64 = 2.5,
    noise_dist: f64 = 2.0,
    noise_angle: f64 = 1.3,
    bf_proj: usize = 64,
    bf_hidden: usize = 64,
    am_proj: usize = 64,
    am_hidden: usize = 64,
    am_layers: usize = 2,
    /// Truncated-BPTT chunk length in frames.
    truncation: usize = 50,
    batch: usize = 8,
    /// Learning rate for stages 1 and 3 to 5.
    lr: f64 = 0.01,
    /// Learning rate for the MSE pretraining stage.
    pretrain_lr: f64 = 1.0,
    epochs_stage1: usize = 12,
    epochs_stage2: usize = 12,
    epochs_stage3: usize = 4,
    epochs_stage4: usize = 14,
    epochs_stage5: usize = 4,
}

impl Config {
    /// Parse assignments on top of the defaults and validate the result.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", ln + 1))
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key '{key}'")));
            }
            cfg.assign(key, raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if !self.fft_size.is_power_of_two() {
            return fail(format!("fft_size must be a power of two, got {}", self.fft_size));
        }
        if self.win_len < 2 || self.win_len > self.fft_size {
            return fail(format!(
                "win_len must be in 2..={}, got {}",
                self.fft_size, self.win_len
            ));
        }
        if self.hop == 0 || self.hop > self.win_len {
            return fail(format!("hop must be in 1..={}, got {}", self.win_len, self.hop));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.n_mels < 2 {
            return fail("n_mels must be at least 2".into());
        }
        if !(0.0 <= self.mel_fmin && self.mel_fmin < self.mel_fmax && self.mel_fmax <= nyquist) {
            return fail(format!(
                "mel band must satisfy 0 <= mel_fmin < mel_fmax <= {nyquist}"
            ));
        }
        if self.n_mics == 0 {
            return fail("n_mics must be at least 1".into());
        }
        if !(self.spacing > 0.0) {
            return fail("spacing must be positive".into());
        }
        if self.n_classes < 2 {
            return fail("n_classes must be at least 2 (silence plus one)".into());
        }
        if self.n_scenes < 3 {
            return fail("n_scenes must cover the three splits".into());
        }
        if self.n_frames < 2 {
            return fail("n_frames must be at least 2".into());
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return fail("snr_db must be finite or inf".into());
        }
        if !(0.0..=1.0).contains(&self.fraction_moving) {
            return fail("fraction_moving must lie in [0, 1]".into());
        }
        let splits = [self.split_train, self.split_dev, self.split_test];
        if splits.iter().any(|&r| !(0.0..=1.0).contains(&r))
            || (splits.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return fail("split ratios must be nonnegative and sum to 1".into());
        }
        for (name, lo, hi) in [
            ("source_dist", self.source_dist_min, self.source_dist_max),
            ("source_angle", self.source_angle_min, self.source_angle_max),
            ("speed", self.speed_min, self.speed_max),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return fail(format!("{name}_min must be below {name}_max"));
            }
        }
        if !(self.source_dist_min > 0.0) || !(self.speed_min > 0.0) {
            return fail("source_dist_min and speed_min must be positive".into());
        }
        if !(self.noise_dist > 0.0) || !self.noise_angle.is_finite() {
            return fail("noise position must be finite with positive distance".into());
        }
        for (name, v) in [
            ("bf_proj", self.bf_proj),
            ("bf_hidden", self.bf_hidden),
            ("am_proj", self.am_proj),
            ("am_hidden", self.am_hidden),
            ("am_layers", self.am_layers),
            ("truncation", self.truncation),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be a positive finite number"));
            }
        }
        Ok(())
    }

    /// Retained STFT bins `F = fft_size/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            win_len: self.win_len,
            hop: self.hop,
            fft_size: self.fft_size,
            window: self.window,
        }
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            n_bins: self.n_bins(),
            n_channels: self.n_mics,
            n_mels: self.n_mels,
            n_classes: self.n_classes,
            bf_proj: self.bf_proj,
            bf_hidden: self.bf_hidden,
            am_proj: self.am_proj,
            am_hidden: self.am_hidden,
            am_layers: self.am_layers,
        }
    }

    pub fn template(&self) -> SceneTemplate {
        SceneTemplate {
            n_mics: self.n_mics,
            spacing: self.spacing,
            sample_rate: self.sample_rate,
            win_len: self.win_len,
            hop: self.hop,
            n_frames: self.n_frames,
            n_classes: self.n_classes,
            snr_db: self.snr_db,
            fraction_moving: self.fraction_moving,
            source_dist: (self.source_dist_min, self.source_dist_max),
            source_angle: (self.source_angle_min, self.source_angle_max),
            speed: (self.speed_min, self.speed_max),
            noise_dist: self.noise_dist,
            noise_angle: self.noise_angle,
        }
    }

    pub fn mel(&self) -> Result<MelFilterbank> {
        build_mel_filterbank(
            self.n_mels,
            self.n_bins(),
            self.sample_rate,
            self.mel_fmin,
            self.mel_fmax,
        )
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split_train, self.split_dev, self.split_test)
    }

    pub fn epochs_for(&self, stage: usize) -> Result<usize> {
        match stage {
            1 => Ok(self.epochs_stage1),
            2 => Ok(self.epochs_stage2),
            3 => Ok(self.epochs_stage3),
            4 => Ok(self.epochs_stage4),
            5 => Ok(self.epochs_stage5),
            other => Err(Error::Usage(format!("stage must be 1..=5, got {other}"))),
        }
    }

    pub fn lr_for(&self, stage: usize) -> f64 {
        if stage == 2 {
            self.pretrain_lr
        } else {
            self.lr
        }
    }
}

/// A resolved run: the configuration plus the output directory it writes to.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub cfg: Config,
    pub out: PathBuf,
}

impl RunConfig {
    /// Load `config_path` (pure defaults when absent), apply the seed
    /// override, and create the output directory.
    pub fn resolve(config_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match config_path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        std::fs::create_dir_all(out)?;
        Ok(RunConfig { cfg, out: out.to_path_buf() })
    }

    pub fn lock_path(&self) -> PathBuf {
        self.out.join("config.lock")
    }

    /// Echo the fully resolved configuration. Pointing a rerun at the
    /// lockfile reproduces this run.
    pub fn write_lock(&self) -> Result<()> {
        std::fs::write(self.lock_path(), self.cfg.echo())?;
        Ok(())
    }
}

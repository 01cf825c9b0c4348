//! The five-stage training schedule.
//!
//! Stage 1 trains the classifier alone on pooled per-channel features.
//! Stage 2 pretrains the beamformer against the delay-and-sum oracle with an
//! MSE loss, then assembles the integrated network and fixes its feature
//! normalization. Stages 3 to 5 train the integrated network: beamformer
//! only, everything, and everything with feedback columns.
//!
//! Every stage evaluates the dev split before its first update and after
//! each epoch, and finishes on the best dev-metric parameters (the initial
//! ones included), so a stage can never end worse than it started.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complexbf::beamform_packed;
use crate::dataio::par_map_indexed;
use crate::nn::{argmax, bptt_train_epoch, softmax_xent_from_logits, LstmState};
use crate::signal::{
    compute_global_stats, log_mel, normalize, power_spectrum, LogMelSequence, MelFilterbank,
    NormStats, LOG_FLOOR,
};
use crate::{derive_seed, Error, Result};

use super::eval::{evaluate, FilterMode, Precision, SceneScore};
use super::net::{AmParams, BfParams, FeatSeq, IntegratedModel, IntegratedParams, Stage1Params};
use super::{NetDims, PreparedScene};

/// Hyperparameters of one training stage.
#[derive(Clone, Copy, Debug)]
pub struct StageConfig {
    pub stage: usize,
    pub lr: f64,
    pub truncation: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.stage) {
            return Err(Error::Config(format!(
                "stage must be between 1 and 5, got {}",
                self.stage
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.truncation == 0 {
            return Err(Error::Config("truncation must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Line-oriented training log. Every line is appended to the backing file
/// when one is attached, echoed to stdout, and kept in memory. Lines carry
/// no timestamps, so identical runs produce identical logs.
pub struct MetricsLog {
    file: Option<File>,
    echo: bool,
    pub lines: Vec<String>,
}

impl MetricsLog {
    /// Append to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsLog { file: Some(file), echo: true, lines: Vec::new() })
    }

    /// In-memory only; used by tests.
    pub fn memory() -> Self {
        MetricsLog { file: None, echo: false, lines: Vec::new() }
    }

    pub fn line(&mut self, s: String) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{s}")?;
        }
        if self.echo {
            println!("{s}");
        }
        self.lines.push(s);
        Ok(())
    }
}

fn dev_line(stage: usize, epoch: usize, ce: f64, acc: f64) -> String {
    format!("stage={stage} epoch={epoch} split=dev ce={ce:.12} acc={acc:.6}")
}

/// Log-Mel sequences of each channel of one scene, no beamforming.
pub fn channel_logmels(scene: &PreparedScene, mel: &MelFilterbank) -> Result<Vec<LogMelSequence>> {
    let n = scene.n_frames();
    let mut out = Vec::with_capacity(scene.spec.n_channels());
    for m in 0..scene.spec.n_channels() {
        let mut frames = Array2::<f64>::zeros((n, mel.n_mels()));
        for t in 0..n {
            let x: Vec<Complex64> = scene.spec.data.slice(s![t, .., m]).iter().copied().collect();
            let power = power_spectrum(&x);
            frames
                .row_mut(t)
                .assign(&log_mel(&power.view(), &mel.weights, LOG_FLOOR)?);
        }
        out.push(LogMelSequence { frames });
    }
    Ok(out)
}

/// Pooled per-channel training sequences: every channel of every scene
/// becomes one normalized feature sequence carrying the scene's labels.
pub fn channel_feat_seqs(
    scenes: &[PreparedScene],
    mel: &MelFilterbank,
    stats: &NormStats,
    threads: usize,
) -> Result<Vec<FeatSeq>> {
    let per_scene: Result<Vec<Vec<FeatSeq>>> = par_map_indexed(scenes.len(), threads, |i| {
        let logmels = channel_logmels(&scenes[i], mel)?;
        Ok(logmels
            .into_iter()
            .map(|lm| FeatSeq {
                frames: normalize(&lm, stats).frames,
                labels: scenes[i].labels.clone(),
            })
            .collect())
    })
    .into_iter()
    .collect();
    Ok(per_scene?.into_iter().flatten().collect())
}

fn am_dev_score(am: &AmParams<f64>, seqs: &[FeatSeq], threads: usize) -> Result<(f64, f64)> {
    let parts: Result<Vec<SceneScore>> = par_map_indexed(seqs.len(), threads, |i| {
        let seq = &seqs[i];
        let mut states = am.zero_states();
        let mut score = SceneScore::default();
        for t in 0..seq.labels.len() {
            let z = seq.frames.row(t);
            let (new_states, _, logits) = am.forward_step(&z, &states);
            states = new_states;
            let (_, loss, _) = softmax_xent_from_logits(&logits.view(), seq.labels[t])?;
            score.ce_sum += loss;
            score.n_frames += 1;
            if argmax(&logits.view()) == seq.labels[t] {
                score.correct += 1;
            }
        }
        Ok(score)
    })
    .into_iter()
    .collect();
    let mut total = SceneScore::default();
    for part in parts? {
        total.add(&part);
    }
    Ok((total.ce(), total.accuracy()))
}

/// Stage 1: train the classifier on pooled per-channel features, with
/// normalization statistics computed from those same training features.
pub fn train_am_stage1(
    dims: &NetDims,
    mel: &MelFilterbank,
    train: &[PreparedScene],
    dev: &[PreparedScene],
    cfg: &StageConfig,
    log: &mut MetricsLog,
    threads: usize,
) -> Result<Stage1Params> {
    cfg.validate()?;
    let raw: Result<Vec<Vec<LogMelSequence>>> =
        par_map_indexed(train.len(), threads, |i| channel_logmels(&train[i], mel))
            .into_iter()
            .collect();
    let raw = raw?;
    let pooled: Vec<LogMelSequence> = raw.iter().flatten().cloned().collect();
    let stats = compute_global_stats(&pooled)?;

    let mut train_seqs: Vec<FeatSeq> = Vec::with_capacity(pooled.len());
    for (scene, logmels) in train.iter().zip(raw.iter()) {
        for lm in logmels {
            train_seqs.push(FeatSeq {
                frames: normalize(lm, &stats).frames,
                labels: scene.labels.clone(),
            });
        }
    }
    let dev_seqs = channel_feat_seqs(dev, mel, &stats, threads)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage1-init", 0));
    let mut am = AmParams::init(&mut rng, dims);

    let (ce, acc) = am_dev_score(&am, &dev_seqs, threads)?;
    log.line(dev_line(1, 0, ce, acc))?;
    let mut best = (ce, acc, am.clone());

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage1-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let refs: Vec<&FeatSeq> = order.iter().map(|&i| &train_seqs[i]).collect();
        let loss = bptt_train_epoch(&mut am, &refs, cfg.batch, cfg.truncation, cfg.lr)?;
        log.line(format!("stage=1 epoch={epoch} split=train loss={loss:.12}"))?;
        let (ce, acc) = am_dev_score(&am, &dev_seqs, threads)?;
        log.line(dev_line(1, epoch, ce, acc))?;
        if ce < best.0 {
            best = (ce, acc, am.clone());
        }
    }
    let (ce, acc, am) = best;
    log.line(format!("stage=1 final split=dev ce={ce:.12} acc={acc:.6}"))?;
    Ok(Stage1Params { am, norm_mean: stats.mean, norm_std: stats.std })
}

fn bf_dev_mse(bf: &BfParams<f64>, scenes: &[PreparedScene], threads: usize) -> Result<f64> {
    let parts: Result<Vec<(f64, usize)>> = par_map_indexed(scenes.len(), threads, |i| {
        let scene = &scenes[i];
        let zero_fb = Array1::<f64>::zeros(bf.feedback_dim());
        let mut st = LstmState::zeros(bf.lstm.hidden_dim());
        let n_bins = bf.n_bins();
        let denom = (2 * n_bins) as f64;
        let mut sum = 0.0;
        for t in 0..scene.n_frames() {
            let x = &scene.packed[t];
            let (next, _, g) = bf.forward_step(&x.view(), &zero_fb, &st);
            st = next;
            let (re, im) = beamform_packed(&x.view(), &g.view());
            for f in 0..n_bins {
                let target = scene.das_xhat[[t, f]];
                let er = re[f] - target.re;
                let ei = im[f] - target.im;
                sum += (er * er + ei * ei) / denom;
            }
        }
        Ok((sum, scene.n_frames()))
    })
    .into_iter()
    .collect();
    let mut sum = 0.0;
    let mut frames = 0usize;
    for (s, n) in parts? {
        sum += s;
        frames += n;
    }
    Ok(sum / frames as f64)
}

/// Stage-2 pretraining: beamformer alone against the delay-and-sum oracle.
pub fn pretrain_bf_mse(
    dims: &NetDims,
    train: &[PreparedScene],
    dev: &[PreparedScene],
    cfg: &StageConfig,
    log: &mut MetricsLog,
    threads: usize,
) -> Result<BfParams<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage2-init", 0));
    let mut bf = BfParams::init(&mut rng, dims);

    let mse = bf_dev_mse(&bf, dev, threads)?;
    log.line(format!("stage=2 epoch=0 split=dev mse={mse:.12}"))?;
    let mut best = (mse, bf.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stage2-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let refs: Vec<&PreparedScene> = order.iter().map(|&i| &train[i]).collect();
        let loss = bptt_train_epoch(&mut bf, &refs, cfg.batch, cfg.truncation, cfg.lr)?;
        log.line(format!("stage=2 epoch={epoch} split=train loss={loss:.12}"))?;
        let mse = bf_dev_mse(&bf, dev, threads)?;
        log.line(format!("stage=2 epoch={epoch} split=dev mse={mse:.12}"))?;
        if mse < best.0 {
            best = (mse, bf.clone());
        }
    }
    let (mse, bf) = best;
    log.line(format!("stage=2 final split=dev mse={mse:.12}"))?;
    Ok(bf)
}

fn beamformed_logmel(
    bf: &BfParams<f64>,
    mel: &MelFilterbank,
    scene: &PreparedScene,
) -> Result<LogMelSequence> {
    let zero_fb = Array1::<f64>::zeros(bf.feedback_dim());
    let mut st = LstmState::zeros(bf.lstm.hidden_dim());
    let n_bins = bf.n_bins();
    let mut frames = Array2::<f64>::zeros((scene.n_frames(), mel.n_mels()));
    for t in 0..scene.n_frames() {
        let x = &scene.packed[t];
        let (next, _, g) = bf.forward_step(&x.view(), &zero_fb, &st);
        st = next;
        let (re, im) = beamform_packed(&x.view(), &g.view());
        let mut power = Array1::<f64>::zeros(n_bins);
        for f in 0..n_bins {
            power[f] = re[f] * re[f] + im[f] * im[f];
        }
        frames
            .row_mut(t)
            .assign(&log_mel(&power.view(), &mel.weights, LOG_FLOOR)?);
    }
    Ok(LogMelSequence { frames })
}

/// Assemble the integrated network from the stage-1 classifier and the
/// pretrained beamformer. The feature normalization constants are computed
/// from this network's own beamformed features over the training set and
/// frozen: the per-channel stage-1 statistics do not match the scale of
/// beamformed features, and recomputing them later would move the frozen
/// reference under the classifier.
pub fn assemble_integrated(
    stage1: &Stage1Params,
    bf: BfParams<f64>,
    mel: &MelFilterbank,
    train: &[PreparedScene],
    threads: usize,
) -> Result<IntegratedParams<f64>> {
    let mut p = IntegratedParams {
        bf,
        am: stage1.am.clone(),
        norm_mean: Array1::zeros(stage1.norm_mean.len()),
        norm_std: Array1::ones(stage1.norm_std.len()),
    };
    let logmels: Result<Vec<LogMelSequence>> = par_map_indexed(train.len(), threads, |i| {
        beamformed_logmel(&p.bf, mel, &train[i])
    })
    .into_iter()
    .collect();
    let stats = compute_global_stats(&logmels?)?;
    p.set_norm(&stats);
    Ok(p)
}

/// Stages 3 to 5: train the integrated network. Stage 3 freezes the
/// classifier; stage 5 requires the projection to have been widened with
/// feedback columns beforehand.
pub fn train_integrated(
    model: &mut IntegratedModel,
    train: &[PreparedScene],
    dev: &[PreparedScene],
    cfg: &StageConfig,
    log: &mut MetricsLog,
    threads: usize,
) -> Result<()> {
    cfg.validate()?;
    if !(3..=5).contains(&cfg.stage) {
        return Err(Error::Config(format!(
            "integrated training covers stages 3 to 5, got {}",
            cfg.stage
        )));
    }
    if cfg.stage == 5 && !model.p.feedback_enabled() {
        return Err(Error::Config(
            "stage 5 requires feedback columns; widen the input projection first".into(),
        ));
    }
    if cfg.stage < 5 && model.p.feedback_enabled() {
        return Err(Error::Config(
            "feedback columns present before stage 5".into(),
        ));
    }
    model.freeze_am = cfg.stage == 3;
    let stage = cfg.stage;

    let report = evaluate(&model.p, &model.mel, dev, FilterMode::Network, Precision::F64, threads)?;
    log.line(dev_line(stage, 0, report.ce, report.accuracy))?;
    let mut best = (report.ce, report.accuracy, model.p.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &format!("stage{stage}-shuffle"),
            epoch as u64,
        ));
        order.shuffle(&mut rng);
        let refs: Vec<&PreparedScene> = order.iter().map(|&i| &train[i]).collect();
        let loss = bptt_train_epoch(model, &refs, cfg.batch, cfg.truncation, cfg.lr)?;
        log.line(format!("stage={stage} epoch={epoch} split=train loss={loss:.12}"))?;
        let report =
            evaluate(&model.p, &model.mel, dev, FilterMode::Network, Precision::F64, threads)?;
        log.line(dev_line(stage, epoch, report.ce, report.accuracy))?;
        if report.ce < best.0 {
            best = (report.ce, report.accuracy, model.p.clone());
        }
    }
    let (ce, acc, p) = best;
    model.p = p;
    log.line(format!("stage={stage} final split=dev ce={ce:.12} acc={acc:.6}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::eval::{run_scene, Capture};
    use super::super::gradsuite::{tiny_dims, tiny_scene};
    use super::super::{prepare_scene, NetDims, PreparedScene};
    use super::*;
    use crate::complexbf::{pack_frame, FilterSequence};
    use crate::nn::ParamSet;
    use crate::scenesim::{make_scene, Condition, SceneTemplate};
    use crate::signal::{MultichannelSpectrogram, StftConfig, WindowKind};
    use ndarray::Array3;
    use rand::Rng;

    fn mel_for(dims: &NetDims) -> MelFilterbank {
        crate::signal::build_mel_filterbank(dims.n_mels, dims.n_bins, 8000, 0.0, 4000.0).unwrap()
    }

    fn metric_of(line: &str, key: &str) -> f64 {
        let idx = line.find(key).unwrap_or_else(|| panic!("no {key} in {line}"));
        line[idx + key.len()..]
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap()
    }

    fn dev_metrics(lines: &[String], stage: usize, key: &str) -> Vec<f64> {
        let prefix = format!("stage={stage} epoch=");
        lines
            .iter()
            .filter(|l| l.starts_with(&prefix) && l.contains("split=dev"))
            .map(|l| metric_of(l, key))
            .collect()
    }

    fn final_metric(lines: &[String], stage: usize, key: &str) -> f64 {
        let prefix = format!("stage={stage} final");
        let line = lines.iter().rfind(|l| l.starts_with(&prefix)).unwrap();
        metric_of(line, key)
    }

    /// Frames whose spectrogram carries the label as a hot bin, so a frame
    /// classifier can actually learn something in a couple of epochs.
    fn separable_scene(dims: &NetDims, n_frames: usize, seed: u64) -> PreparedScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<usize> = Vec::with_capacity(n_frames);
        while labels.len() < n_frames {
            let k = rng.gen_range(0..dims.n_classes);
            for _ in 0..rng.gen_range(4..8) {
                if labels.len() < n_frames {
                    labels.push(k);
                }
            }
        }
        let mut data = Array3::<Complex64>::zeros((n_frames, dims.n_bins, dims.n_channels));
        for t in 0..n_frames {
            for f in 0..dims.n_bins {
                for m in 0..dims.n_channels {
                    data[[t, f, m]] =
                        Complex64::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
                }
            }
            let hot = 1 + labels[t];
            for m in 0..dims.n_channels {
                data[[t, hot, m]] += Complex64::new(2.0, 0.5);
            }
        }
        let spec = MultichannelSpectrogram {
            data,
            frame_period: 0.01,
            fft_size: 2 * (dims.n_bins - 1),
        };
        let packed = (0..n_frames).map(|t| pack_frame(&spec, t).unwrap().v).collect();
        PreparedScene {
            spec,
            packed,
            labels,
            condition: Condition::Static,
            snr_db: 30.0,
            das: FilterSequence {
                g: Array3::zeros((n_frames, dims.n_bins, dims.n_channels)),
            },
            das_xhat: Array2::zeros((n_frames, dims.n_bins)),
        }
    }

    /// Single channel, oracle = the channel itself: the pretraining target
    /// is the unit filter.
    fn identity_scene(dims: &NetDims, n_frames: usize, seed: u64) -> PreparedScene {
        let mut scene = tiny_scene(dims, n_frames, seed).unwrap();
        scene.das.g.fill(Complex64::new(1.0, 0.0));
        for t in 0..n_frames {
            for f in 0..dims.n_bins {
                scene.das_xhat[[t, f]] = scene.spec.data[[t, f, 0]];
            }
        }
        scene
    }

    fn assert_tensors_eq(a: &impl ParamSet, b: &impl ParamSet) {
        for ((na, va), (nb, vb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.len(), vb.len(), "{na}");
            for i in 0..va.len() {
                assert_eq!(va.at(i), vb.at(i), "{na}[{i}]");
            }
        }
    }

    #[test]
    fn stage_config_rejects_bad_values() {
        let ok = StageConfig { stage: 3, lr: 0.01, truncation: 50, batch: 8, epochs: 2, seed: 1 };
        assert!(ok.validate().is_ok());
        let err = StageConfig { stage: 0, ..ok }.validate().unwrap_err();
        assert!(err.to_string().contains("stage must be between"), "{err}");
        let err = StageConfig { stage: 6, ..ok }.validate().unwrap_err();
        assert!(err.to_string().contains("stage must be between"), "{err}");
        let err = StageConfig { lr: 0.0, ..ok }.validate().unwrap_err();
        assert!(err.to_string().contains("lr must be"), "{err}");
        let err = StageConfig { truncation: 0, ..ok }.validate().unwrap_err();
        assert!(err.to_string().contains("truncation"), "{err}");
        let err = StageConfig { batch: 0, ..ok }.validate().unwrap_err();
        assert!(err.to_string().contains("batch"), "{err}");
    }

    #[test]
    fn metrics_log_keeps_lines_and_appends_across_reopens() {
        let mut log = MetricsLog::memory();
        log.line("a=1".into()).unwrap();
        log.line("b=2".into()).unwrap();
        assert_eq!(log.lines, ["a=1", "b=2"]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        {
            let mut log = MetricsLog::append_to(&path).unwrap();
            log.line("first".into()).unwrap();
        }
        {
            let mut log = MetricsLog::append_to(&path).unwrap();
            log.line("second".into()).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "first\nsecond\n");
    }

    #[test]
    fn pooled_channel_sequences_cover_every_channel_with_shared_labels() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let scenes: Vec<PreparedScene> =
            (0..2).map(|i| tiny_scene(&dims, 10, 700 + i).unwrap()).collect();
        let stats = NormStats {
            mean: Array1::zeros(dims.n_mels),
            std: Array1::ones(dims.n_mels),
        };
        let seqs = channel_feat_seqs(&scenes, &mel, &stats, 2).unwrap();
        assert_eq!(seqs.len(), 2 * dims.n_channels);
        assert_eq!(seqs[0].labels, scenes[0].labels);
        assert_eq!(seqs[dims.n_channels].labels, scenes[1].labels);

        let logmels = channel_logmels(&scenes[0], &mel).unwrap();
        assert_eq!(seqs[0].frames, normalize(&logmels[0], &stats).frames);
        assert_eq!(seqs[1].frames, normalize(&logmels[1], &stats).frames);
    }

    #[test]
    fn stage1_learns_separable_labels_and_logs_the_schedule() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let train: Vec<PreparedScene> =
            (0..6).map(|i| separable_scene(&dims, 24, 710 + i)).collect();
        let dev: Vec<PreparedScene> =
            (0..2).map(|i| separable_scene(&dims, 24, 720 + i)).collect();
        let cfg = StageConfig { stage: 1, lr: 0.1, truncation: 8, batch: 2, epochs: 3, seed: 5 };
        let mut log = MetricsLog::memory();
        let s1 = train_am_stage1(&dims, &mel, &train, &dev, &cfg, &mut log, 2).unwrap();

        assert!(log.lines[0].starts_with("stage=1 epoch=0 split=dev ce="), "{}", log.lines[0]);
        let dev_ces = dev_metrics(&log.lines, 1, "ce=");
        assert_eq!(dev_ces.len(), 4);
        let best = dev_ces.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < dev_ces[0], "training must improve dev ce: {dev_ces:?}");
        assert_eq!(final_metric(&log.lines, 1, "ce="), best);
        assert_eq!(s1.norm_mean.len(), dims.n_mels);
        assert!(s1.norm_std.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn stage1_is_deterministic_and_seed_sensitive() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let train: Vec<PreparedScene> =
            (0..4).map(|i| separable_scene(&dims, 16, 730 + i)).collect();
        let dev = vec![separable_scene(&dims, 16, 740)];
        let cfg = StageConfig { stage: 1, lr: 0.1, truncation: 8, batch: 2, epochs: 1, seed: 6 };

        let mut log_a = MetricsLog::memory();
        let a = train_am_stage1(&dims, &mel, &train, &dev, &cfg, &mut log_a, 2).unwrap();
        let mut log_b = MetricsLog::memory();
        let b = train_am_stage1(&dims, &mel, &train, &dev, &cfg, &mut log_b, 1).unwrap();
        assert_eq!(log_a.lines, log_b.lines);
        assert_tensors_eq(&a, &b);

        let other = StageConfig { seed: 7, ..cfg };
        let mut log_c = MetricsLog::memory();
        let c = train_am_stage1(&dims, &mel, &train, &dev, &other, &mut log_c, 2).unwrap();
        assert_ne!(a.am.proj.w, c.am.proj.w);
    }

    #[test]
    fn pretraining_reduces_oracle_mse_monotonically_on_identity_scenes() {
        let mut dims = tiny_dims();
        dims.n_channels = 1;
        let train: Vec<PreparedScene> =
            (0..50).map(|i| identity_scene(&dims, 20, 750 + i)).collect();
        let dev: Vec<PreparedScene> =
            (0..8).map(|i| identity_scene(&dims, 20, 850 + i)).collect();
        let cfg = StageConfig { stage: 2, lr: 1.0, truncation: 10, batch: 5, epochs: 5, seed: 8 };
        let mut log = MetricsLog::memory();
        let bf = pretrain_bf_mse(&dims, &train, &dev, &cfg, &mut log, 2).unwrap();

        let mses = dev_metrics(&log.lines, 2, "mse=");
        assert_eq!(mses.len(), 6);
        for e in 0..5 {
            assert!(
                mses[e + 1] < mses[e],
                "dev mse must fall every epoch: {mses:?}"
            );
        }
        assert_eq!(final_metric(&log.lines, 2, "mse="), mses[5]);
        assert_eq!(bf.feedback_dim(), 0);
    }

    #[test]
    fn pretrained_filters_recover_the_true_phase_slopes() {
        let tpl = SceneTemplate {
            n_mics: 2,
            spacing: 0.08,
            sample_rate: 8000,
            win_len: 32,
            hop: 16,
            n_frames: 50,
            n_classes: 4,
            snr_db: 3.0,
            fraction_moving: 0.0,
            source_dist: (1.5, 1.500001),
            source_angle: (0.8, 0.800001),
            speed: (0.5, 1.0),
            noise_dist: 2.0,
            noise_angle: 1.3,
        };
        let stft = StftConfig { win_len: 32, hop: 16, fft_size: 32, window: WindowKind::Hann };
        let scenes: Result<Vec<PreparedScene>> = (0..24)
            .map(|i| {
                let scene = make_scene(&tpl, 900 + i, 555, false)?;
                prepare_scene(&scene, &stft, 32)
            })
            .collect();
        let scenes = scenes.unwrap();
        let raw: Vec<crate::scenesim::LabeledScene> =
            (0..24).map(|i| make_scene(&tpl, 900 + i, 555, false).unwrap()).collect();

        let dims = NetDims {
            n_bins: 17,
            n_channels: 2,
            n_mels: 4,
            n_classes: 4,
            bf_proj: 24,
            bf_hidden: 24,
            am_proj: 8,
            am_hidden: 8,
            am_layers: 1,
        };
        let cfg = StageConfig { stage: 2, lr: 1.0, truncation: 10, batch: 6, epochs: 60, seed: 9 };
        let mut log = MetricsLog::memory();
        let bf = pretrain_bf_mse(&dims, &scenes, &scenes[..4].to_vec(), &cfg, &mut log, 2).unwrap();

        let mut est = Vec::new();
        let mut want = Vec::new();
        for (scene, lab) in scenes.iter().take(8).zip(raw.iter()) {
            let g = crate::pipeline::bf_forward(&bf, &scene.packed, None).unwrap().g;
            for m in 0..2 {
                // The scene is static, so averaging the filter over the tail
                // of the rollout only removes estimator noise.
                let mut gbar = vec![Complex64::new(0.0, 0.0); 17];
                for t in 30..50 {
                    for (f, gb) in gbar.iter_mut().enumerate() {
                        *gb += g[[t, f, m]] / 20.0;
                    }
                }
                let tau = lab.true_delays[[40, m]];
                let slope = -2.0 * std::f64::consts::PI * 8000.0 * tau / 32.0;
                for f in 4..12 {
                    let inc = (gbar[f + 1] * gbar[f].conj()).arg();
                    est.push(inc);
                    want.push(slope);
                }
            }
        }
        let n = est.len() as f64;
        let me = est.iter().sum::<f64>() / n;
        let mw = want.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut ve = 0.0;
        let mut vw = 0.0;
        for i in 0..est.len() {
            cov += (est[i] - me) * (want[i] - mw);
            ve += (est[i] - me).powi(2);
            vw += (want[i] - mw).powi(2);
        }
        let r = cov / (ve.sqrt() * vw.sqrt());
        assert!(r > 0.9, "phase slope correlation too weak: r = {r}");
    }

    #[test]
    fn assembly_copies_the_classifier_and_fits_normalization_to_its_own_features() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let train: Vec<PreparedScene> =
            (0..3).map(|i| tiny_scene(&dims, 16, 760 + i).unwrap()).collect();
        let dev = vec![tiny_scene(&dims, 16, 770).unwrap()];
        let cfg = StageConfig { stage: 1, lr: 0.1, truncation: 8, batch: 2, epochs: 0, seed: 10 };
        let mut log = MetricsLog::memory();
        let s1 = train_am_stage1(&dims, &mel, &train, &dev, &cfg, &mut log, 1).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bf = BfParams::init(&mut rng, &dims);
        let p = assemble_integrated(&s1, bf, &mel, &train, 2).unwrap();

        assert_tensors_eq(&s1.am, &p.am);
        let logmels: Vec<LogMelSequence> = train
            .iter()
            .map(|scene| {
                let run = run_scene(
                    &p,
                    &mel.weights,
                    scene,
                    super::super::eval::FilterMode::Network,
                    Capture { logmel: true, ..Capture::default() },
                )
                .unwrap();
                LogMelSequence { frames: run.logmel.unwrap() }
            })
            .collect();
        let stats = compute_global_stats(&logmels).unwrap();
        assert_eq!(stats.mean, p.norm_mean);
        assert_eq!(stats.std, p.norm_std);
        assert_ne!(p.norm_mean, s1.norm_mean);
    }

    #[test]
    fn integrated_training_rejects_mismatched_stage_and_feedback() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let scenes = vec![tiny_scene(&dims, 8, 780).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = |stage| StageConfig { stage, lr: 0.01, truncation: 4, batch: 1, epochs: 1, seed: 13 };

        let plain = IntegratedModel::new(IntegratedParams::init(&mut rng, &dims), mel.clone());
        let mut log = MetricsLog::memory();
        let err = train_integrated(&mut plain.clone(), &scenes, &scenes, &cfg(5), &mut log, 1)
            .unwrap_err();
        assert!(err.to_string().contains("stage 5 requires feedback"), "{err}");
        let err = train_integrated(&mut plain.clone(), &scenes, &scenes, &cfg(2), &mut log, 1)
            .unwrap_err();
        assert!(err.to_string().contains("stages 3 to 5"), "{err}");
        let err = train_integrated(&mut plain.clone(), &scenes, &scenes, &cfg(0), &mut log, 1)
            .unwrap_err();
        assert!(err.to_string().contains("stage must be between"), "{err}");

        let mut widened = plain.clone();
        widened.p.bf.widen_for_feedback(dims.am_hidden);
        let err = train_integrated(&mut widened, &scenes, &scenes, &cfg(3), &mut log, 1)
            .unwrap_err();
        assert!(err.to_string().contains("before stage 5"), "{err}");
    }

    #[test]
    fn stages_three_four_five_chain_with_continuous_metrics() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let train: Vec<PreparedScene> =
            (0..6).map(|i| separable_scene(&dims, 24, 790 + i)).collect();
        let dev: Vec<PreparedScene> =
            (0..2).map(|i| separable_scene(&dims, 24, 800 + i)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = IntegratedParams::init(&mut rng, &dims);
        let logmels: Vec<LogMelSequence> = train
            .iter()
            .map(|scene| {
                let run = run_scene(
                    &p,
                    &mel.weights,
                    scene,
                    super::super::eval::FilterMode::Network,
                    Capture { logmel: true, ..Capture::default() },
                )
                .unwrap();
                LogMelSequence { frames: run.logmel.unwrap() }
            })
            .collect();
        p.set_norm(&compute_global_stats(&logmels).unwrap());
        let mut model = IntegratedModel::new(p, mel);
        let mut log = MetricsLog::memory();
        let cfg = |stage| StageConfig { stage, lr: 0.05, truncation: 8, batch: 2, epochs: 1, seed: 15 };

        let am_before = model.p.am.clone();
        train_integrated(&mut model, &train, &dev, &cfg(3), &mut log, 2).unwrap();
        assert!(model.freeze_am);
        assert_tensors_eq(&am_before, &model.p.am);
        let s3 = dev_metrics(&log.lines, 3, "ce=");
        assert_eq!(final_metric(&log.lines, 3, "ce="), s3.iter().cloned().fold(f64::INFINITY, f64::min));

        let tail = |line: &String| line[line.find("ce=").unwrap()..].to_string();
        let s3_final = log.lines.iter().rfind(|l| l.starts_with("stage=3 final")).unwrap().clone();
        train_integrated(&mut model, &train, &dev, &cfg(4), &mut log, 2).unwrap();
        assert!(!model.freeze_am);
        let s4_first = log
            .lines
            .iter()
            .find(|l| l.starts_with("stage=4 epoch=0 split=dev"))
            .unwrap()
            .clone();
        assert_eq!(tail(&s3_final), tail(&s4_first), "stage 4 must start where stage 3 ended");
        assert!(
            log.lines.iter().any(|l| l.starts_with("stage=4 epoch=1 split=train loss=")),
            "stage 4 must run a training epoch"
        );

        let s4_final = log.lines.iter().rfind(|l| l.starts_with("stage=4 final")).unwrap().clone();
        model.p.bf.widen_for_feedback(dims.am_hidden);
        train_integrated(&mut model, &train, &dev, &cfg(5), &mut log, 2).unwrap();
        let s5_first = log
            .lines
            .iter()
            .find(|l| l.starts_with("stage=5 epoch=0 split=dev"))
            .unwrap()
            .clone();
        assert_eq!(tail(&s4_final), tail(&s5_first), "stage 5 must start where stage 4 ended");
        assert!(
            final_metric(&log.lines, 5, "ce=") <= metric_of(&s4_final, "ce="),
            "stage 5 may not end worse than stage 4"
        );
    }
}

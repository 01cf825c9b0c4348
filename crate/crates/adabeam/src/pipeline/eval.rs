//! Scoring: run the classifier over prepared scenes under one of several
//! filter regimes, collect cross-entropy and frame accuracy, and break the
//! results down by scene condition.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use num_complex::Complex64;

use crate::complexbf::{beamform_packed, pack_filters, unpack_filters, FilterSequence};
use crate::nn::{argmax, softmax, softmax_xent_from_logits, LstmState};
use crate::signal::{log_mel, normalize_frame, MelFilterbank, NormStats, LOG_FLOOR};
use crate::{cf, Error, Real, Result};

use super::net::{integrated_step_filtered, AmParams, IntegratedParams, NetState};
use super::PreparedScene;

/// Where the beamforming filters come from during scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// The network's own adaptive filters.
    Network,
    /// Delay-and-sum filters from the simulator's true delays, fed to the
    /// classifier directly (the beamformer network is bypassed entirely).
    DasOracle,
    /// The network's filters at the first frame, held fixed thereafter.
    FrozenT0,
    /// The full network loop with the delay-and-sum filters forced in place
    /// of the network's own. Not selectable from the command line; the
    /// feature-dump oracle hook uses it to check the two dump routes agree.
    NetworkOracleFilters,
}

impl FilterMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(FilterMode::Network),
            "das" => Ok(FilterMode::DasOracle),
            "frozen-t0" => Ok(FilterMode::FrozenT0),
            other => Err(Error::Usage(format!("unknown filter mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Network => "network",
            FilterMode::DasOracle => "das",
            FilterMode::FrozenT0 => "frozen-t0",
            FilterMode::NetworkOracleFilters => "network-oracle",
        }
    }
}

/// Accumulated score over one or more scenes.
#[derive(Clone, Copy, Debug, Default)]
pub struct SceneScore {
    pub ce_sum: f64,
    pub correct: usize,
    pub n_frames: usize,
}

impl SceneScore {
    pub fn ce(&self) -> f64 {
        self.ce_sum / self.n_frames as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n_frames as f64
    }

    pub fn add(&mut self, other: &SceneScore) {
        self.ce_sum += other.ce_sum;
        self.correct += other.correct;
        self.n_frames += other.n_frames;
    }
}

/// Which per-frame quantities a scoring run should keep.
#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    pub logmel: bool,
    pub posteriors: bool,
    pub filters: bool,
}

/// Result of scoring one scene.
#[derive(Clone, Debug)]
pub struct SceneRun {
    pub score: SceneScore,
    /// T x B log-Mel, before normalization.
    pub logmel: Option<Array2<f64>>,
    /// T x K posteriors.
    pub posteriors: Option<Array2<f64>>,
    /// The filters actually applied.
    pub filters: Option<FilterSequence>,
}

fn to_f64(v: ArrayView1<'_, impl Real>) -> Array1<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

fn das_packed<F: Real>(scene: &PreparedScene, t: usize) -> Array2<F> {
    let slice = scene.das.g.index_axis(Axis(0), t);
    pack_filters(&slice).mapv(|v| cf::<F>(v))
}

/// Score one scene in scalar type `F`.
pub fn run_scene<F: Real>(
    p: &IntegratedParams<F>,
    mel_w: &Array2<F>,
    scene: &PreparedScene,
    mode: FilterMode,
    capture: Capture,
) -> Result<SceneRun> {
    let n = scene.n_frames();
    let n_bins = scene.spec.n_bins();
    let n_mels = mel_w.shape()[0];
    let n_classes = p.am.out.out_dim();

    let packed: Vec<Array1<F>> = scene.packed.iter().map(|x| x.mapv(|v| cf::<F>(v))).collect();

    let mut score = SceneScore::default();
    let mut logmel_out = capture.logmel.then(|| Array2::<f64>::zeros((n, n_mels)));
    let mut post_out = capture.posteriors.then(|| Array2::<f64>::zeros((n, n_classes)));
    let mut filt_out = capture
        .filters
        .then(|| Array3::<Complex64>::zeros((n, n_bins, p.bf.n_channels())));

    let record = |t: usize,
                      logmel: &Array1<F>,
                      logits: &Array1<F>,
                      g: &Array2<F>,
                      score: &mut SceneScore,
                      logmel_out: &mut Option<Array2<f64>>,
                      post_out: &mut Option<Array2<f64>>,
                      filt_out: &mut Option<Array3<Complex64>>|
     -> Result<()> {
        let (_, loss, _) = softmax_xent_from_logits(&logits.view(), scene.labels[t])?;
        score.ce_sum += loss.to_f64().unwrap();
        score.n_frames += 1;
        if argmax(&logits.view()) == scene.labels[t] {
            score.correct += 1;
        }
        if let Some(lm) = logmel_out.as_mut() {
            lm.row_mut(t).assign(&to_f64(logmel.view()));
        }
        if let Some(po) = post_out.as_mut() {
            let y = softmax(&logits.view());
            po.row_mut(t).assign(&to_f64(y.view()));
        }
        if let Some(fo) = filt_out.as_mut() {
            let g64 = Array2::from_shape_fn(g.dim(), |ix| g[ix].to_f64().unwrap());
            fo.index_axis_mut(Axis(0), t).assign(&unpack_filters(&g64.view()));
        }
        Ok(())
    };

    match mode {
        FilterMode::Network | FilterMode::NetworkOracleFilters => {
            let mut state = NetState::zeros(p);
            for t in 0..n {
                let forced = match mode {
                    FilterMode::NetworkOracleFilters => Some(das_packed::<F>(scene, t)),
                    _ => None,
                };
                let (so, next) =
                    integrated_step_filtered(p, mel_w, &packed[t].view(), &state, forced.as_ref())?;
                state = next;
                record(
                    t,
                    &so.logmel,
                    &so.logits,
                    &so.g,
                    &mut score,
                    &mut logmel_out,
                    &mut post_out,
                    &mut filt_out,
                )?;
            }
        }
        FilterMode::DasOracle | FilterMode::FrozenT0 => {
            let g0 = if mode == FilterMode::FrozenT0 {
                let zero_fb = Array1::<F>::zeros(p.bf.feedback_dim());
                let state = LstmState::zeros(p.bf.lstm.hidden_dim());
                let (_, _, g0) = p.bf.forward_step(&packed[0].view(), &zero_fb, &state);
                Some(g0)
            } else {
                None
            };
            let mut am_states = p.am.zero_states();
            for t in 0..n {
                let g = match &g0 {
                    Some(g0) => g0.clone(),
                    None => das_packed::<F>(scene, t),
                };
                let (re, im) = beamform_packed(&packed[t].view(), &g.view());
                let mut power = Array1::<F>::zeros(n_bins);
                for f in 0..n_bins {
                    power[f] = re[f] * re[f] + im[f] * im[f];
                }
                if power.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite value after filter-and-sum".into()));
                }
                let logmel = log_mel(&power.view(), mel_w, LOG_FLOOR)?;
                let z = normalize_frame(&logmel, &p.norm_mean, &p.norm_std);
                let (new_states, _, logits) = p.am.forward_step(&z.view(), &am_states);
                am_states = new_states;
                record(
                    t,
                    &logmel,
                    &logits,
                    &g,
                    &mut score,
                    &mut logmel_out,
                    &mut post_out,
                    &mut filt_out,
                )?;
            }
        }
    }

    Ok(SceneRun {
        score,
        logmel: logmel_out,
        posteriors: post_out,
        filters: filt_out.map(|g| FilterSequence { g }),
    })
}

/// The network's filter sequence over a scene.
pub fn network_filter_sequence(
    p: &IntegratedParams<f64>,
    mel: &MelFilterbank,
    scene: &PreparedScene,
) -> Result<FilterSequence> {
    let run = run_scene(
        p,
        &mel.weights,
        scene,
        FilterMode::Network,
        Capture { filters: true, ..Capture::default() },
    )?;
    Ok(run.filters.unwrap())
}

/// Evaluation summary over a scene set.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub ce: f64,
    pub accuracy: f64,
    pub n_frames: usize,
    /// (condition key, ce, accuracy, frames), sorted by key.
    pub per_condition: Vec<(String, f64, f64, usize)>,
}

impl EvalReport {
    fn from_parts(parts: Vec<(String, SceneScore)>) -> Self {
        let mut overall = SceneScore::default();
        let mut by_key: Vec<(String, SceneScore)> = Vec::new();
        for (key, score) in parts {
            overall.add(&score);
            match by_key.iter_mut().find(|(k, _)| *k == key) {
                Some((_, s)) => s.add(&score),
                None => by_key.push((key, score)),
            }
        }
        by_key.sort_by(|a, b| a.0.cmp(&b.0));
        EvalReport {
            ce: overall.ce(),
            accuracy: overall.accuracy(),
            n_frames: overall.n_frames,
            per_condition: by_key
                .into_iter()
                .map(|(k, s)| (k, s.ce(), s.accuracy(), s.n_frames))
                .collect(),
        }
    }
}

fn condition_key(scene: &PreparedScene) -> String {
    format!("{}/snr_{}", scene.condition.name(), scene.snr_db)
}

/// Numeric precision for a scoring run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Usage(format!("unknown precision '{other}'"))),
        }
    }
}

/// Score a scene set, in parallel, under the given filter mode.
pub fn evaluate(
    p: &IntegratedParams<f64>,
    mel: &MelFilterbank,
    scenes: &[PreparedScene],
    mode: FilterMode,
    precision: Precision,
    threads: usize,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes to evaluate".into()));
    }
    let parts: Result<Vec<(String, SceneScore)>> = match precision {
        Precision::F64 => crate::dataio::par_map_indexed(scenes.len(), threads, |i| {
            run_scene(p, &mel.weights, &scenes[i], mode, Capture::default())
                .map(|r| (condition_key(&scenes[i]), r.score))
        })
        .into_iter()
        .collect(),
        Precision::F32 => {
            let p32 = p.cast::<f32>();
            let mel32 = mel.to_f32();
            crate::dataio::par_map_indexed(scenes.len(), threads, |i| {
                run_scene(&p32, &mel32, &scenes[i], mode, Capture::default())
                    .map(|r| (condition_key(&scenes[i]), r.score))
            })
            .into_iter()
            .collect()
        }
    };
    Ok(EvalReport::from_parts(parts?))
}

/// Score the stage-1 classifier on a single channel's features (the
/// no-beamforming baseline).
pub fn evaluate_am_single_channel(
    am: &AmParams<f64>,
    stats: &NormStats,
    mel: &MelFilterbank,
    scenes: &[PreparedScene],
    channel: usize,
    threads: usize,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes to evaluate".into()));
    }
    let parts: Result<Vec<(String, SceneScore)>> =
        crate::dataio::par_map_indexed(scenes.len(), threads, |i| {
            let scene = &scenes[i];
            if channel >= scene.spec.n_channels() {
                return Err(Error::Usage(format!("channel {channel} out of range")));
            }
            let mut states = am.zero_states();
            let mut score = SceneScore::default();
            for t in 0..scene.n_frames() {
                let x: Vec<Complex64> = scene
                    .spec
                    .data
                    .slice(ndarray::s![t, .., channel])
                    .iter()
                    .copied()
                    .collect();
                let power = crate::signal::power_spectrum(&x);
                let logmel = log_mel(&power.view(), &mel.weights, LOG_FLOOR)?;
                let z = normalize_frame(&logmel, &stats.mean, &stats.std);
                let (new_states, _, logits) = am.forward_step(&z.view(), &states);
                states = new_states;
                let (_, loss, _) = softmax_xent_from_logits(&logits.view(), scene.labels[t])?;
                score.ce_sum += loss;
                score.n_frames += 1;
                if argmax(&logits.view()) == scene.labels[t] {
                    score.correct += 1;
                }
            }
            Ok((condition_key(scene), score))
        })
        .into_iter()
        .collect();
    Ok(EvalReport::from_parts(parts?))
}

/// Mean frame-to-frame filter change of the network over a scene set.
pub fn mean_filter_adaptivity(
    p: &IntegratedParams<f64>,
    mel: &MelFilterbank,
    scenes: &[PreparedScene],
    threads: usize,
) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes to evaluate".into()));
    }
    let deltas: Result<Vec<f64>> = crate::dataio::par_map_indexed(scenes.len(), threads, |i| {
        network_filter_sequence(p, mel, &scenes[i]).map(|f| f.mean_adjacent_delta())
    })
    .into_iter()
    .collect();
    let deltas = deltas?;
    Ok(deltas.iter().sum::<f64>() / deltas.len() as f64)
}

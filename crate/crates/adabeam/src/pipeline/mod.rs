//! The integrated network and its training schedule.
//!
//! Chain per frame: packed multichannel STFT -> projection -> beamformer
//! LSTM -> per-channel tanh filter heads -> complex filter-and-sum ->
//! power -> log-Mel -> global normalization -> projection -> deep LSTM ->
//! softmax frame classifier. Optionally the classifier's top hidden state
//! from the previous frame feeds back into the beamformer input.
//!
//! Training runs in five stages: (1) classifier alone on per-channel
//! features, (2) beamformer pretrained with an MSE loss against
//! delay-and-sum oracle output and assembled with the stage-1 classifier,
//! (3) beamformer fine-tuned through the full chain with the classifier
//! frozen, (4) joint training, (5) joint training with acoustic feedback
//! enabled through zero-initialized extra projection columns.

mod eval;
mod gradsuite;
mod net;
mod stages;

pub use eval::{
    evaluate, evaluate_am_single_channel, mean_filter_adaptivity, network_filter_sequence,
    run_scene, Capture, EvalReport, FilterMode, Precision, SceneRun, SceneScore,
};
pub use gradsuite::{run_gradient_suite, tiny_dims, GradSuiteItem};
pub use net::{
    bf_forward, integrated_step, integrated_step_filtered, AmParams, BfParams, FeatSeq,
    IntegratedModel, IntegratedParams, NetState, Stage1Params, StepOut,
};
pub use stages::{
    assemble_integrated, channel_feat_seqs, channel_logmels, pretrain_bf_mse, train_am_stage1,
    train_integrated, MetricsLog, StageConfig,
};

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::complexbf::{das_filters, filter_and_sum_adaptive, pack_frame};
use crate::scenesim::{Condition, LabeledScene};
use crate::signal::{multichannel_stft, MultichannelSpectrogram, StftConfig};
use crate::{Error, Result};

/// Network dimensions, all independent of any particular scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    /// Retained STFT bins F.
    pub n_bins: usize,
    /// Microphones M.
    pub n_channels: usize,
    /// Mel bands B.
    pub n_mels: usize,
    /// Frame classes K.
    pub n_classes: usize,
    /// Beamformer input projection size P.
    pub bf_proj: usize,
    /// Beamformer LSTM width.
    pub bf_hidden: usize,
    /// Classifier input projection size Q.
    pub am_proj: usize,
    /// Classifier LSTM width.
    pub am_hidden: usize,
    /// Classifier LSTM depth.
    pub am_layers: usize,
}

impl NetDims {
    /// Length of one packed input frame: real and imaginary parts of F bins
    /// for each of M channels.
    pub fn packed_dim(&self) -> usize {
        2 * self.n_bins * self.n_channels
    }
}

/// A scene converted to network inputs: the multichannel STFT, per-frame
/// packed input vectors, labels, and the delay-and-sum oracle (filters and
/// the beamformed STFT they produce), which serves as the MSE pretraining
/// target and the reference in feature dumps.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub spec: MultichannelSpectrogram,
    pub packed: Vec<Array1<f64>>,
    pub labels: Vec<usize>,
    pub condition: Condition,
    pub snr_db: f64,
    pub das: crate::complexbf::FilterSequence,
    pub das_xhat: Array2<Complex64>,
}

impl PreparedScene {
    pub fn n_frames(&self) -> usize {
        self.labels.len()
    }
}

/// STFT, pack, and compute the oracle for one labeled scene.
pub fn prepare_scene(scene: &LabeledScene, stft: &StftConfig, fft_size: usize) -> Result<PreparedScene> {
    let spec = multichannel_stft(&scene.waveforms, stft)?;
    if spec.n_frames() != scene.n_frames() {
        return Err(Error::Invalid(format!(
            "scene has {} label frames but {} analysis frames",
            scene.n_frames(),
            spec.n_frames()
        )));
    }
    let packed: Vec<Array1<f64>> = (0..spec.n_frames())
        .map(|t| pack_frame(&spec, t).map(|p| p.v))
        .collect::<Result<_>>()?;
    let das = das_filters(
        &scene.true_delays,
        spec.n_bins(),
        fft_size,
        scene.waveforms[0].sample_rate,
    )?;
    let frames = filter_and_sum_adaptive(&das, &spec)?;
    let mut das_xhat = Array2::<Complex64>::zeros((spec.n_frames(), spec.n_bins()));
    for (t, frame) in frames.iter().enumerate() {
        for f in 0..spec.n_bins() {
            das_xhat[[t, f]] = frame.xhat[f];
        }
    }
    Ok(PreparedScene {
        packed,
        labels: scene.frame_labels.clone(),
        condition: scene.condition,
        snr_db: scene.snr_db,
        das,
        das_xhat,
        spec,
    })
}

/// Prepare a batch of scenes on a worker pool, preserving order.
pub fn prepare_scenes(
    scenes: &[LabeledScene],
    stft: &StftConfig,
    fft_size: usize,
    threads: usize,
) -> Result<Vec<PreparedScene>> {
    crate::dataio::par_map_indexed(scenes.len(), threads, |i| {
        prepare_scene(&scenes[i], stft, fft_size)
    })
    .into_iter()
    .collect()
}

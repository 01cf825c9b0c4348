//! Finite-difference validation of every hand-derived backward pass: the
//! individual ops (linear, tanh head, LSTM cell, softmax cross-entropy,
//! log-Mel, filter-and-sum) and the integrated network end to end, with
//! feedback off and on.
//!
//! Each check builds one random instance, computes analytic gradients with
//! the production backward code, and probes random coordinates against
//! central differences. Inputs are treated as parameters alongside weights
//! so the input gradients (the values chained into upstream ops) are probed
//! too.

use ndarray::{s, Array1, Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complexbf::{beamform_packed, beamform_packed_backward, pack_frame, FilterSequence};
use crate::nn::{
    bptt_grads, gradcheck, softmax_xent_from_logits, tanh_backward, tanh_forward, Linear,
    LstmParams, LstmState, ParamSet, ProbeReport, SequenceModel, TensorMut, TensorRef,
};
use crate::scenesim::Condition;
use crate::signal::{build_mel_filterbank, log_mel, log_mel_backward, MultichannelSpectrogram, LOG_FLOOR};
use crate::{derive_seed, Error, Result};

use super::net::{integrated_step, IntegratedModel, IntegratedParams, NetState};
use super::{NetDims, PreparedScene};

/// Dimensions small enough that a few hundred finite-difference probes of
/// the whole network finish in seconds.
pub fn tiny_dims() -> NetDims {
    NetDims {
        n_bins: 9,
        n_channels: 2,
        n_mels: 4,
        n_classes: 4,
        bf_proj: 8,
        bf_hidden: 8,
        am_proj: 8,
        am_hidden: 8,
        am_layers: 3,
    }
}

/// One checked backward pass.
#[derive(Clone, Debug)]
pub struct GradSuiteItem {
    pub name: String,
    pub report: ProbeReport,
}

fn rng_for(seed: u64, domain: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, 0))
}

fn probe_seed(seed: u64, domain: &str) -> u64 {
    derive_seed(seed, domain, 1)
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
}

fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

#[derive(Clone)]
struct LinearCheck {
    w: Array2<f64>,
    x: Array1<f64>,
}

impl ParamSet for LinearCheck {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        vec![("w".into(), TensorRef::M(&self.w)), ("x".into(), TensorRef::V(&self.x))]
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        vec![("w".into(), TensorMut::M(&mut self.w)), ("x".into(), TensorMut::V(&mut self.x))]
    }
}

fn check_linear(n_probes: usize, seed: u64, fault: bool) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, "grad-linear");
    let (out, inp) = (5, 7);
    let mut params = LinearCheck { w: rand_mat(&mut rng, out, inp), x: rand_vec(&mut rng, inp) };
    let c = rand_vec(&mut rng, out);

    let lin = Linear { w: params.w.clone() };
    let mut grads = Linear::zeros(out, inp);
    let dx = lin.backward(&params.x.view(), &c.view(), &mut grads);
    let mut analytic = LinearCheck { w: grads.w, x: dx };
    if fault {
        analytic.w.mapv_inplace(|v| v * 1.1);
        analytic.x.mapv_inplace(|v| v * 1.1);
    }
    gradcheck(
        &mut params,
        &analytic,
        move |p| Ok(c.dot(&p.w.dot(&p.x))),
        n_probes,
        probe_seed(seed, "grad-linear"),
    )
}

#[derive(Clone)]
struct VecCheck {
    v: Array1<f64>,
}

impl ParamSet for VecCheck {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        vec![("v".into(), TensorRef::V(&self.v))]
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        vec![("v".into(), TensorMut::V(&mut self.v))]
    }
}

fn check_tanh_head(n_probes: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, "grad-tanh");
    let n = 12;
    let mut params = VecCheck { v: rand_vec(&mut rng, n) };
    let c = rand_vec(&mut rng, n);
    let y = tanh_forward(&params.v.view());
    let analytic = VecCheck { v: tanh_backward(&c.view(), &y.view()) };
    gradcheck(
        &mut params,
        &analytic,
        move |p| Ok(c.dot(&tanh_forward(&p.v.view()))),
        n_probes,
        probe_seed(seed, "grad-tanh"),
    )
}

#[derive(Clone)]
struct LstmCheck {
    p: LstmParams<f64>,
    x: Array1<f64>,
    h: Array1<f64>,
    c: Array1<f64>,
}

impl ParamSet for LstmCheck {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut v = self.p.tensors("lstm");
        v.push(("in.x".into(), TensorRef::V(&self.x)));
        v.push(("in.h".into(), TensorRef::V(&self.h)));
        v.push(("in.c".into(), TensorRef::V(&self.c)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut v = self.p.tensors_mut("lstm");
        v.push(("in.x".into(), TensorMut::V(&mut self.x)));
        v.push(("in.h".into(), TensorMut::V(&mut self.h)));
        v.push(("in.c".into(), TensorMut::V(&mut self.c)));
        v
    }
}

fn check_lstm_cell(n_probes: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, "grad-lstm");
    let (inp, hidden) = (6, 8);
    let mut params = LstmCheck {
        p: LstmParams::init(&mut rng, inp, hidden),
        x: rand_vec(&mut rng, inp),
        h: rand_vec(&mut rng, hidden),
        c: rand_vec(&mut rng, hidden),
    };
    let ch = rand_vec(&mut rng, hidden);
    let cc = rand_vec(&mut rng, hidden);

    let prev = LstmState { h: params.h.clone(), c: params.c.clone() };
    let (_, cache) = params.p.forward(&params.x.view(), &prev);
    let mut grads = LstmParams::zeros(inp, hidden);
    let (dx, dh, dc) = params.p.backward(&cache, &ch.view(), &cc.view(), &mut grads);
    let analytic = LstmCheck { p: grads, x: dx, h: dh, c: dc };

    gradcheck(
        &mut params,
        &analytic,
        move |p| {
            let prev = LstmState { h: p.h.clone(), c: p.c.clone() };
            let (st, _) = p.p.forward(&p.x.view(), &prev);
            Ok(ch.dot(&st.h) + cc.dot(&st.c))
        },
        n_probes,
        probe_seed(seed, "grad-lstm"),
    )
}

fn check_softmax_xent(n_probes: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, "grad-softmax");
    let k = 6;
    let mut params = VecCheck { v: rand_vec(&mut rng, k) };
    let label = rng.gen_range(0..k);
    let (_, _, d_logits) = softmax_xent_from_logits(&params.v.view(), label)?;
    let analytic = VecCheck { v: d_logits };
    gradcheck(
        &mut params,
        &analytic,
        move |p| softmax_xent_from_logits(&p.v.view(), label).map(|(_, l, _)| l),
        n_probes,
        probe_seed(seed, "grad-softmax"),
    )
}

fn check_log_mel(n_probes: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, "grad-logmel");
    let dims = tiny_dims();
    let fb = build_mel_filterbank(dims.n_mels, dims.n_bins, 8000, 0.0, 4000.0)?;
    // Power spectra are positive; keep them well above the log floor so the
    // loss stays smooth around the probe points.
    let mut params = VecCheck {
        v: Array1::from_shape_fn(dims.n_bins, |_| rng.gen_range(0.5..2.0)),
    };
    let c = rand_vec(&mut rng, dims.n_mels);
    let analytic = VecCheck { v: log_mel_backward(&c.view(), &params.v.view(), &fb, LOG_FLOOR) };
    gradcheck(
        &mut params,
        &analytic,
        move |p| Ok(c.dot(&log_mel(&p.v.view(), &fb.weights, LOG_FLOOR)?)),
        n_probes,
        probe_seed(seed, "grad-logmel"),
    )
}

#[derive(Clone)]
struct BeamformCheck {
    x: Array1<f64>,
    g: Array2<f64>,
}

impl ParamSet for BeamformCheck {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        vec![("x".into(), TensorRef::V(&self.x)), ("g".into(), TensorRef::M(&self.g))]
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        vec![("x".into(), TensorMut::V(&mut self.x)), ("g".into(), TensorMut::M(&mut self.g))]
    }
}

fn check_filter_and_sum(n_probes: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_for(seed, "grad-beamform");
    let dims = tiny_dims();
    let (n_bins, n_ch) = (dims.n_bins, dims.n_channels);
    let mut params = BeamformCheck {
        x: rand_vec(&mut rng, dims.packed_dim()),
        g: rand_mat(&mut rng, n_ch, 2 * n_bins),
    };
    let cr = rand_vec(&mut rng, n_bins);
    let ci = rand_vec(&mut rng, n_bins);
    let (dx, dg) =
        beamform_packed_backward(&cr.view(), &ci.view(), &params.x.view(), &params.g.view());
    let analytic = BeamformCheck { x: dx, g: dg };
    gradcheck(
        &mut params,
        &analytic,
        move |p| {
            let (re, im) = beamform_packed(&p.x.view(), &p.g.view());
            Ok(cr.dot(&re) + ci.dot(&im))
        },
        n_probes,
        probe_seed(seed, "grad-beamform"),
    )
}

/// A random scene-shaped sequence: spectrogram data drawn uniformly, labels
/// drawn uniformly. The oracle fields are zeros; the cross-entropy path
/// never reads them.
pub(crate) fn tiny_scene(dims: &NetDims, n_frames: usize, seed: u64) -> Result<PreparedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array3::<Complex64>::zeros((n_frames, dims.n_bins, dims.n_channels));
    for v in data.iter_mut() {
        *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let spec = MultichannelSpectrogram {
        data,
        frame_period: 0.01,
        fft_size: 2 * (dims.n_bins - 1),
    };
    let packed: Vec<Array1<f64>> = (0..n_frames)
        .map(|t| pack_frame(&spec, t).map(|p| p.v))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..n_frames).map(|_| rng.gen_range(0..dims.n_classes)).collect();
    Ok(PreparedScene {
        spec,
        packed,
        labels,
        condition: Condition::Static,
        snr_db: f64::INFINITY,
        das: FilterSequence {
            g: Array3::zeros((n_frames, dims.n_bins, dims.n_channels)),
        },
        das_xhat: Array2::zeros((n_frames, dims.n_bins)),
    })
}

/// The integrated model with the fixed normalization constants hidden from
/// the prober; only trainable tensors are probed.
#[derive(Clone)]
struct TrainableOnly(IntegratedModel);

impl ParamSet for TrainableOnly {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        self.0.tensors().into_iter().filter(|(n, _)| !n.starts_with("norm.")).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        self.0
            .tensors_mut()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("norm."))
            .collect()
    }
}

fn check_integrated(feedback: bool, n_probes: usize, seed: u64) -> Result<ProbeReport> {
    let dims = tiny_dims();
    let domain = if feedback { "grad-integrated-fb" } else { "grad-integrated" };
    let mut rng = rng_for(seed, domain);
    let mut p = IntegratedParams::init(&mut rng, &dims);
    p.norm_mean = rand_vec(&mut rng, dims.n_mels);
    p.norm_std = Array1::from_shape_fn(dims.n_mels, |_| rng.gen_range(0.5..2.0));
    if feedback {
        // Zero feedback columns would leave the feedback path untested, so
        // fill them with random weights.
        p.bf.widen_for_feedback(dims.am_hidden);
        let start = p.bf.input_dim;
        for v in p.bf.proj.w.slice_mut(s![.., start..]).iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let mel = build_mel_filterbank(dims.n_mels, dims.n_bins, 8000, 0.0, 4000.0)?;
    let model = IntegratedModel::new(p, mel);
    let scene = tiny_scene(&dims, 12, derive_seed(seed, domain, 2))?;

    let mut grads = model.grad_store();
    bptt_grads(&model, &scene, scene.n_frames(), &mut grads)?;

    let n = scene.n_frames();
    let mut params = TrainableOnly(model);
    let analytic = TrainableOnly(grads);
    gradcheck(
        &mut params,
        &analytic,
        move |tp| {
            let p = &tp.0.p;
            let mut st = NetState::zeros(p);
            let mut total = 0.0;
            for t in 0..n {
                let (so, next) = integrated_step(p, &tp.0.mel.weights, &scene.packed[t].view(), &st)?;
                let (_, loss, _) = softmax_xent_from_logits(&so.logits.view(), scene.labels[t])?;
                total += loss;
                st = next;
            }
            Ok(total / n as f64)
        },
        n_probes,
        probe_seed(seed, domain),
    )
}

/// Run every gradient check with `n_probes` probes each. `inject_fault`
/// corrupts the analytic gradient of the first item so the harness itself
/// can be shown to catch wrong gradients.
pub fn run_gradient_suite(
    n_probes: usize,
    seed: u64,
    inject_fault: bool,
) -> Result<Vec<GradSuiteItem>> {
    if n_probes == 0 {
        return Err(Error::Usage("probes must be >= 1".into()));
    }
    let item = |name: &str, report: ProbeReport| GradSuiteItem { name: name.to_string(), report };
    Ok(vec![
        item("linear", check_linear(n_probes, seed, inject_fault)?),
        item("tanh-head", check_tanh_head(n_probes, seed)?),
        item("lstm-cell", check_lstm_cell(n_probes, seed)?),
        item("softmax-xent", check_softmax_xent(n_probes, seed)?),
        item("log-mel", check_log_mel(n_probes, seed)?),
        item("filter-and-sum", check_filter_and_sum(n_probes, seed)?),
        item("integrated", check_integrated(false, n_probes, seed)?),
        item("integrated-feedback", check_integrated(true, n_probes, seed)?),
    ])
}

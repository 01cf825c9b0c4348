//! Parameters, forward pass, and hand-derived backward pass of the
//! integrated network, plus the `SequenceModel` implementations that plug
//! the network (and its stage-1 and stage-2 sub-networks) into the BPTT
//! driver.
//!
//! Gradient conventions follow the rest of the crate: complex quantities
//! are differentiated via their real and imaginary parts, and every
//! parameter gradient is accumulated into a zeroed twin of the parameter
//! struct.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use num_complex::Complex64;
use rand::Rng;

use crate::complexbf::{beamform_packed, beamform_packed_backward, unpack_filters, FilterSequence};
use crate::nn::{
    softmax_xent_from_logits, tanh_backward, tanh_forward, Linear, LstmCache, LstmParams,
    LstmState, ParamSet, SequenceModel, TensorMut, TensorRef,
};
use crate::signal::{
    log_mel, log_mel_backward, normalize_backward, normalize_frame, power_spectrum_backward,
    MelFilterbank, NormStats, LOG_FLOOR,
};
use crate::{cf, Error, Real, Result};

use super::{NetDims, PreparedScene};

/// Frame classifier: projection, LSTM stack, class logits.
#[derive(Clone, Debug)]
pub struct AmParams<F: Real = f64> {
    pub proj: Linear<F>,
    pub lstms: Vec<LstmParams<F>>,
    pub out: Linear<F>,
}

impl AmParams<f64> {
    pub fn init(rng: &mut impl Rng, dims: &NetDims) -> Self {
        let proj = Linear::init(rng, dims.am_proj, dims.n_mels);
        let mut lstms = Vec::with_capacity(dims.am_layers);
        for l in 0..dims.am_layers {
            let input = if l == 0 { dims.am_proj } else { dims.am_hidden };
            lstms.push(LstmParams::init(rng, input, dims.am_hidden));
        }
        let out = Linear::init(rng, dims.n_classes, dims.am_hidden);
        AmParams { proj, lstms, out }
    }

    pub fn zeros(dims: &NetDims) -> Self {
        let mut lstms = Vec::with_capacity(dims.am_layers);
        for l in 0..dims.am_layers {
            let input = if l == 0 { dims.am_proj } else { dims.am_hidden };
            lstms.push(LstmParams::zeros(input, dims.am_hidden));
        }
        AmParams {
            proj: Linear::zeros(dims.am_proj, dims.n_mels),
            lstms,
            out: Linear::zeros(dims.n_classes, dims.am_hidden),
        }
    }

    pub fn cast<G: Real>(&self) -> AmParams<G> {
        AmParams {
            proj: self.proj.cast(),
            lstms: self.lstms.iter().map(|l| l.cast()).collect(),
            out: self.out.cast(),
        }
    }
}

impl<F: Real> AmParams<F> {
    pub fn n_layers(&self) -> usize {
        self.lstms.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstms[0].hidden_dim()
    }

    pub fn zero_states(&self) -> Vec<LstmState<F>> {
        self.lstms.iter().map(|l| LstmState::zeros(l.hidden_dim())).collect()
    }

    /// One frame through projection, stack, and logits.
    pub fn forward_step(
        &self,
        z: &ArrayView1<F>,
        states: &[LstmState<F>],
    ) -> (Vec<LstmState<F>>, Vec<LstmCache<F>>, Array1<F>) {
        let mut new_states = Vec::with_capacity(self.lstms.len());
        let mut caches = Vec::with_capacity(self.lstms.len());
        let mut x = self.proj.forward(z);
        for (l, lstm) in self.lstms.iter().enumerate() {
            let (st, cache) = lstm.forward(&x.view(), &states[l]);
            x = st.h.clone();
            new_states.push(st);
            caches.push(cache);
        }
        let logits = self.out.forward(&x.view());
        (new_states, caches, logits)
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["am.proj".to_string()];
        for l in 0..self.lstms.len() {
            names.push(format!("am.lstm{l}"));
        }
        names.push("am.out".to_string());
        names
    }
}

impl ParamSet for AmParams<f64> {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut v = self.proj.tensors("am.proj");
        for (l, lstm) in self.lstms.iter().enumerate() {
            v.extend(lstm.tensors(&format!("am.lstm{l}")));
        }
        v.extend(self.out.tensors("am.out"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let names = self.tensor_names();
        let mut v = self.proj.tensors_mut(&names[0]);
        for (l, lstm) in self.lstms.iter_mut().enumerate() {
            v.extend(lstm.tensors_mut(&names[1 + l]));
        }
        v.extend(self.out.tensors_mut(names.last().unwrap()));
        v
    }
}

/// Beamformer: input projection (optionally widened with feedback columns),
/// LSTM, and one tanh filter head per channel.
#[derive(Clone, Debug)]
pub struct BfParams<F: Real = f64> {
    pub proj: Linear<F>,
    pub lstm: LstmParams<F>,
    pub heads: Vec<Linear<F>>,
    /// Packed input width 2FM; the projection may be wider by the feedback
    /// dimension.
    pub input_dim: usize,
}

impl BfParams<f64> {
    pub fn init(rng: &mut impl Rng, dims: &NetDims) -> Self {
        let input_dim = dims.packed_dim();
        let proj = Linear::init(rng, dims.bf_proj, input_dim);
        let lstm = LstmParams::init(rng, dims.bf_proj, dims.bf_hidden);
        let heads = (0..dims.n_channels)
            .map(|_| Linear::init(rng, 2 * dims.n_bins, dims.bf_hidden))
            .collect();
        BfParams { proj, lstm, heads, input_dim }
    }

    pub fn zeros(dims: &NetDims, feedback: bool) -> Self {
        let input_dim = dims.packed_dim();
        let width = input_dim + if feedback { dims.am_hidden } else { 0 };
        BfParams {
            proj: Linear::zeros(dims.bf_proj, width),
            lstm: LstmParams::zeros(dims.bf_proj, dims.bf_hidden),
            heads: (0..dims.n_channels)
                .map(|_| Linear::zeros(2 * dims.n_bins, dims.bf_hidden))
                .collect(),
            input_dim,
        }
    }

    pub fn cast<G: Real>(&self) -> BfParams<G> {
        BfParams {
            proj: self.proj.cast(),
            lstm: self.lstm.cast(),
            heads: self.heads.iter().map(|h| h.cast()).collect(),
            input_dim: self.input_dim,
        }
    }

    /// Append zero-initialized feedback columns to the input projection.
    /// With zero columns the forward pass is unchanged, so training resumes
    /// exactly where the previous stage left off.
    pub fn widen_for_feedback(&mut self, feedback_dim: usize) {
        assert_eq!(self.feedback_dim(), 0, "projection already widened");
        let (rows, cols) = (self.proj.out_dim(), self.proj.in_dim());
        let mut w = Array2::<f64>::zeros((rows, cols + feedback_dim));
        w.slice_mut(s![.., ..cols]).assign(&self.proj.w);
        self.proj = Linear { w };
    }
}

impl<F: Real> BfParams<F> {
    pub fn n_channels(&self) -> usize {
        self.heads.len()
    }

    pub fn n_bins(&self) -> usize {
        self.heads[0].out_dim() / 2
    }

    pub fn feedback_dim(&self) -> usize {
        self.proj.in_dim() - self.input_dim
    }

    /// One frame: project (splitting off the feedback columns so that zero
    /// feedback weights reproduce the unwidened forward pass bitwise), run
    /// the LSTM, and emit the per-channel packed filters through tanh heads.
    pub fn forward_step(
        &self,
        x: &ArrayView1<F>,
        s_prev: &Array1<F>,
        state: &LstmState<F>,
    ) -> (LstmState<F>, LstmCache<F>, Array2<F>) {
        let p = if self.feedback_dim() == 0 {
            self.proj.forward(x)
        } else {
            let main = self.proj.w.slice(s![.., ..self.input_dim]).dot(x);
            let fb = self.proj.w.slice(s![.., self.input_dim..]).dot(s_prev);
            main + fb
        };
        let (st, cache) = self.lstm.forward(&p.view(), state);
        let n_bins2 = self.heads[0].out_dim();
        let mut g = Array2::<F>::zeros((self.heads.len(), n_bins2));
        for (m, head) in self.heads.iter().enumerate() {
            let a = head.forward(&st.h.view());
            g.row_mut(m).assign(&tanh_forward(&a.view()));
        }
        (st, cache, g)
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["bf.proj".to_string(), "bf.lstm".to_string()];
        for m in 0..self.heads.len() {
            names.push(format!("bf.head{m}"));
        }
        names
    }
}

impl ParamSet for BfParams<f64> {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut v = self.proj.tensors("bf.proj");
        v.extend(self.lstm.tensors("bf.lstm"));
        for (m, head) in self.heads.iter().enumerate() {
            v.extend(head.tensors(&format!("bf.head{m}")));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let names = self.tensor_names();
        let mut v = self.proj.tensors_mut(&names[0]);
        v.extend(self.lstm.tensors_mut(&names[1]));
        for (m, head) in self.heads.iter_mut().enumerate() {
            v.extend(head.tensors_mut(&names[2 + m]));
        }
        v
    }
}

/// Run the beamformer alone over a packed frame sequence, optionally with a
/// per-frame feedback vector, and assemble the complex filter sequence.
pub fn bf_forward(
    bf: &BfParams<f64>,
    packed: &[Array1<f64>],
    feedback: Option<&[Array1<f64>]>,
) -> Result<FilterSequence> {
    if feedback.is_some() && bf.feedback_dim() == 0 {
        return Err(Error::Invalid(
            "feedback sequence provided but the projection has no feedback columns".into(),
        ));
    }
    if let Some(fb) = feedback {
        if fb.len() != packed.len() {
            return Err(Error::Invalid("feedback length mismatch".into()));
        }
    }
    let zero_fb = Array1::<f64>::zeros(bf.feedback_dim());
    let mut state = LstmState::zeros(bf.lstm.hidden_dim());
    let (n_bins, n_ch) = (bf.n_bins(), bf.n_channels());
    let mut g = ndarray::Array3::<Complex64>::zeros((packed.len(), n_bins, n_ch));
    for (t, x) in packed.iter().enumerate() {
        let s_prev = feedback.map_or(&zero_fb, |fb| &fb[t]);
        let (st, _, gp) = bf.forward_step(&x.view(), s_prev, &state);
        state = st;
        let slice = unpack_filters(&gp.view());
        g.index_axis_mut(Axis(0), t).assign(&slice);
    }
    Ok(FilterSequence { g })
}

/// Everything trainable plus the (fixed) feature normalization constants.
#[derive(Clone, Debug)]
pub struct IntegratedParams<F: Real = f64> {
    pub bf: BfParams<F>,
    pub am: AmParams<F>,
    pub norm_mean: Array1<F>,
    pub norm_std: Array1<F>,
}

impl IntegratedParams<f64> {
    pub fn init(rng: &mut impl Rng, dims: &NetDims) -> Self {
        IntegratedParams {
            bf: BfParams::init(rng, dims),
            am: AmParams::init(rng, dims),
            norm_mean: Array1::zeros(dims.n_mels),
            norm_std: Array1::ones(dims.n_mels),
        }
    }

    pub fn zeros(dims: &NetDims, feedback: bool) -> Self {
        IntegratedParams {
            bf: BfParams::zeros(dims, feedback),
            am: AmParams::zeros(dims),
            norm_mean: Array1::zeros(dims.n_mels),
            norm_std: Array1::ones(dims.n_mels),
        }
    }

    pub fn cast<G: Real>(&self) -> IntegratedParams<G> {
        IntegratedParams {
            bf: self.bf.cast(),
            am: self.am.cast(),
            norm_mean: self.norm_mean.mapv(|v| cf::<G>(v)),
            norm_std: self.norm_std.mapv(|v| cf::<G>(v)),
        }
    }

    pub fn set_norm(&mut self, stats: &NormStats) {
        self.norm_mean = stats.mean.clone();
        self.norm_std = stats.std.clone();
    }

    pub fn norm_stats(&self) -> NormStats {
        NormStats {
            mean: self.norm_mean.clone(),
            std: self.norm_std.clone(),
        }
    }

    /// Rebuild a parameter struct from checkpoint tensors, inferring from the
    /// projection width whether feedback columns are present.
    pub fn from_checkpoint(
        loaded: &[(String, crate::nn::TensorData)],
        dims: &NetDims,
    ) -> Result<Self> {
        let proj = loaded
            .iter()
            .find(|(n, _)| n == "bf.proj.w")
            .ok_or_else(|| Error::Invalid("checkpoint missing bf.proj.w".into()))?;
        let width = match &proj.1 {
            crate::nn::TensorData::M(m) => m.shape()[1],
            crate::nn::TensorData::V(_) => {
                return Err(Error::Invalid("bf.proj.w has wrong rank".into()))
            }
        };
        let feedback = if width == dims.packed_dim() {
            false
        } else if width == dims.packed_dim() + dims.am_hidden {
            true
        } else {
            return Err(Error::Invalid(format!(
                "bf.proj.w width {width} matches neither plain nor feedback layout"
            )));
        };
        let mut p = IntegratedParams::zeros(dims, feedback);
        crate::nn::load_params_into(&mut p, loaded)?;
        Ok(p)
    }
}

impl<F: Real> IntegratedParams<F> {
    pub fn feedback_enabled(&self) -> bool {
        self.bf.feedback_dim() > 0
    }
}

impl ParamSet for IntegratedParams<f64> {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut v = self.bf.tensors();
        v.extend(self.am.tensors());
        v.push(("norm.mean".to_string(), TensorRef::V(&self.norm_mean)));
        v.push(("norm.std".to_string(), TensorRef::V(&self.norm_std)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut v = self.bf.tensors_mut();
        v.extend(self.am.tensors_mut());
        v.push(("norm.mean".to_string(), TensorMut::V(&mut self.norm_mean)));
        v.push(("norm.std".to_string(), TensorMut::V(&mut self.norm_std)));
        v
    }
}

/// Stage-1 artifact: the classifier plus the feature normalization it was
/// trained with, stored under the same tensor names the integrated network
/// uses so the assembly step is a plain copy.
#[derive(Clone, Debug)]
pub struct Stage1Params {
    pub am: AmParams<f64>,
    pub norm_mean: Array1<f64>,
    pub norm_std: Array1<f64>,
}

impl Stage1Params {
    pub fn zeros(dims: &NetDims) -> Self {
        Stage1Params {
            am: AmParams::zeros(dims),
            norm_mean: Array1::zeros(dims.n_mels),
            norm_std: Array1::ones(dims.n_mels),
        }
    }

    pub fn norm_stats(&self) -> NormStats {
        NormStats {
            mean: self.norm_mean.clone(),
            std: self.norm_std.clone(),
        }
    }
}

impl ParamSet for Stage1Params {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut v = self.am.tensors();
        v.push(("norm.mean".to_string(), TensorRef::V(&self.norm_mean)));
        v.push(("norm.std".to_string(), TensorRef::V(&self.norm_std)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut v = self.am.tensors_mut();
        v.push(("norm.mean".to_string(), TensorMut::V(&mut self.norm_mean)));
        v.push(("norm.std".to_string(), TensorMut::V(&mut self.norm_std)));
        v
    }
}

/// Recurrent state of the whole chain: beamformer LSTM, classifier stack,
/// and the previous frame's top hidden state for feedback (zero at t = 0).
#[derive(Clone, Debug)]
pub struct NetState<F: Real = f64> {
    pub bf: LstmState<F>,
    pub am: Vec<LstmState<F>>,
    pub s_prev: Array1<F>,
}

impl<F: Real> NetState<F> {
    pub fn zeros(p: &IntegratedParams<F>) -> Self {
        NetState {
            bf: LstmState::zeros(p.bf.lstm.hidden_dim()),
            am: p.am.zero_states(),
            s_prev: Array1::zeros(p.am.hidden_dim()),
        }
    }
}

/// Every intermediate of one frame, sufficient for the backward pass.
#[derive(Clone, Debug)]
pub struct StepOut<F: Real = f64> {
    pub s_prev: Array1<F>,
    pub bf_cache: LstmCache<F>,
    pub h_bf: Array1<F>,
    /// Packed per-channel filters after tanh, M x 2F.
    pub g: Array2<F>,
    pub xhat_re: Array1<F>,
    pub xhat_im: Array1<F>,
    pub power: Array1<F>,
    /// Log-Mel frame before normalization.
    pub logmel: Array1<F>,
    /// Normalized log-Mel frame.
    pub z: Array1<F>,
    pub am_caches: Vec<LstmCache<F>>,
    pub s_top: Array1<F>,
    pub logits: Array1<F>,
}

/// One frame through the full chain.
pub fn integrated_step<F: Real>(
    p: &IntegratedParams<F>,
    mel_w: &Array2<F>,
    x: &ArrayView1<F>,
    state: &NetState<F>,
) -> Result<(StepOut<F>, NetState<F>)> {
    integrated_step_filtered(p, mel_w, x, state, None)
}

/// Same as [`integrated_step`], but when `g_override` is given the
/// beamformer's own filters are discarded and the supplied packed filters
/// applied instead. The rest of the chain (including state updates) runs
/// unchanged; the feature-dump oracle hook uses this to force the network
/// route onto the delay-and-sum filters.
pub fn integrated_step_filtered<F: Real>(
    p: &IntegratedParams<F>,
    mel_w: &Array2<F>,
    x: &ArrayView1<F>,
    state: &NetState<F>,
    g_override: Option<&Array2<F>>,
) -> Result<(StepOut<F>, NetState<F>)> {
    let (bf_state, bf_cache, g_net) = p.bf.forward_step(x, &state.s_prev, &state.bf);
    let g = match g_override {
        Some(forced) => forced.clone(),
        None => g_net,
    };
    let (xhat_re, xhat_im) = beamform_packed(x, &g.view());
    let n_bins = xhat_re.len();
    let mut power = Array1::<F>::zeros(n_bins);
    for f in 0..n_bins {
        power[f] = xhat_re[f] * xhat_re[f] + xhat_im[f] * xhat_im[f];
    }
    if power.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value after filter-and-sum".into(),
        ));
    }
    let logmel = log_mel(&power.view(), mel_w, LOG_FLOOR)?;
    let z = normalize_frame(&logmel, &p.norm_mean, &p.norm_std);
    let (am_states, am_caches, logits) = p.am.forward_step(&z.view(), &state.am);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value after acoustic model".into(),
        ));
    }
    let s_top = am_states.last().unwrap().h.clone();
    let out = StepOut {
        s_prev: state.s_prev.clone(),
        bf_cache,
        h_bf: bf_state.h.clone(),
        g,
        xhat_re,
        xhat_im,
        power,
        logmel,
        z,
        am_caches,
        s_top: s_top.clone(),
        logits,
    };
    let next = NetState {
        bf: bf_state,
        am: am_states,
        s_prev: s_top,
    };
    Ok((out, next))
}

/// The integrated network as a trainable sequence model: parameters plus the
/// mel filterbank (fixed) and the stage flags.
#[derive(Clone, Debug)]
pub struct IntegratedModel {
    pub p: IntegratedParams<f64>,
    pub mel: MelFilterbank,
    /// Stage 3: update only beamformer parameters.
    pub freeze_am: bool,
    /// Ablation: treat the feedback input as a constant (no gradient into
    /// the previous frame's classifier state).
    pub detach_feedback: bool,
}

impl IntegratedModel {
    pub fn new(p: IntegratedParams<f64>, mel: MelFilterbank) -> Self {
        IntegratedModel {
            p,
            mel,
            freeze_am: false,
            detach_feedback: false,
        }
    }
}

impl ParamSet for IntegratedModel {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        self.p.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        self.p.tensors_mut()
    }
}

impl SequenceModel for IntegratedModel {
    type Seq = PreparedScene;
    type State = NetState<f64>;

    fn grad_store(&self) -> Self {
        let mut g = self.clone();
        crate::nn::zero_all(&mut g);
        g
    }

    fn zero_state(&self) -> NetState<f64> {
        NetState::zeros(&self.p)
    }

    fn seq_len(seq: &PreparedScene) -> usize {
        seq.n_frames()
    }

    fn trainable(&self, name: &str) -> bool {
        if name.starts_with("norm.") {
            return false;
        }
        if self.freeze_am {
            name.starts_with("bf.")
        } else {
            true
        }
    }

    fn chunk_grads(
        &self,
        seq: &PreparedScene,
        start: usize,
        end: usize,
        state: &NetState<f64>,
        grads: &mut Self,
    ) -> Result<(f64, NetState<f64>)> {
        let p = &self.p;
        let n = end - start;
        let fbdim = p.bf.feedback_dim();
        let stats = p.norm_stats();

        let mut steps: Vec<StepOut<f64>> = Vec::with_capacity(n);
        let mut d_logits_all: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut st = state.clone();
        let mut loss_sum = 0.0;
        for k in 0..n {
            let x = &seq.packed[start + k];
            let (so, next) = integrated_step(p, &self.mel.weights, &x.view(), &st)?;
            let (_, loss, d_logits) =
                softmax_xent_from_logits(&so.logits.view(), seq.labels[start + k])?;
            loss_sum += loss;
            d_logits_all.push(d_logits);
            steps.push(so);
            st = next;
        }

        let g = &mut grads.p;
        let n_layers = p.am.n_layers();
        let mut d_am_h: Vec<Array1<f64>> =
            (0..n_layers).map(|_| Array1::zeros(p.am.hidden_dim())).collect();
        let mut d_am_c = d_am_h.clone();
        let mut d_bf_h = Array1::<f64>::zeros(p.bf.lstm.hidden_dim());
        let mut d_bf_c = d_bf_h.clone();
        let mut d_s_next = Array1::<f64>::zeros(p.am.hidden_dim());

        for k in (0..n).rev() {
            let so = &steps[k];
            let x = &seq.packed[start + k];

            let mut d_h_top = p
                .am
                .out
                .backward(&so.s_top.view(), &d_logits_all[k].view(), &mut g.am.out);
            d_h_top += &d_am_h[n_layers - 1];
            if fbdim > 0 && !self.detach_feedback {
                d_h_top += &d_s_next;
            }

            let mut d_x_down = {
                let (dx, dhp, dcp) = p.am.lstms[n_layers - 1].backward(
                    &so.am_caches[n_layers - 1],
                    &d_h_top.view(),
                    &d_am_c[n_layers - 1].view(),
                    &mut g.am.lstms[n_layers - 1],
                );
                d_am_h[n_layers - 1] = dhp;
                d_am_c[n_layers - 1] = dcp;
                dx
            };
            for l in (0..n_layers - 1).rev() {
                let dh = &d_am_h[l] + &d_x_down;
                let (dx, dhp, dcp) = p.am.lstms[l].backward(
                    &so.am_caches[l],
                    &dh.view(),
                    &d_am_c[l].view(),
                    &mut g.am.lstms[l],
                );
                d_am_h[l] = dhp;
                d_am_c[l] = dcp;
                d_x_down = dx;
            }

            let d_z = p.am.proj.backward(&so.z.view(), &d_x_down.view(), &mut g.am.proj);
            let d_logmel = normalize_backward(&d_z.view(), &stats);
            let d_power = log_mel_backward(&d_logmel.view(), &so.power.view(), &self.mel, LOG_FLOOR);
            let xhat: Vec<Complex64> = so
                .xhat_re
                .iter()
                .zip(so.xhat_im.iter())
                .map(|(&re, &im)| Complex64::new(re, im))
                .collect();
            let cot = power_spectrum_backward(&d_power.view(), &xhat);
            let d_re = Array1::from_iter(cot.iter().map(|c| c.re));
            let d_im = Array1::from_iter(cot.iter().map(|c| c.im));
            let (_d_x_in, d_g) =
                beamform_packed_backward(&d_re.view(), &d_im.view(), &x.view(), &so.g.view());

            let mut d_h_bf = d_bf_h.clone();
            for (m, head) in p.bf.heads.iter().enumerate() {
                let d_a = tanh_backward(&d_g.row(m), &so.g.row(m));
                d_h_bf += &head.backward(&so.h_bf.view(), &d_a.view(), &mut g.bf.heads[m]);
            }

            let (d_p, dbh, dbc) =
                p.bf
                    .lstm
                    .backward(&so.bf_cache, &d_h_bf.view(), &d_bf_c.view(), &mut g.bf.lstm);
            d_bf_h = dbh;
            d_bf_c = dbc;

            if fbdim == 0 {
                p.bf.proj.backward(&x.view(), &d_p.view(), &mut g.bf.proj);
            } else {
                let v = concatenate![Axis(0), x.view(), so.s_prev.view()];
                let d_v = p.bf.proj.backward(&v.view(), &d_p.view(), &mut g.bf.proj);
                d_s_next = if self.detach_feedback {
                    Array1::zeros(p.am.hidden_dim())
                } else {
                    d_v.slice(s![p.bf.input_dim..]).to_owned()
                };
            }
        }

        Ok((loss_sum, st))
    }
}

/// One normalized feature sequence with labels: the stage-1 training unit.
#[derive(Clone, Debug)]
pub struct FeatSeq {
    pub frames: Array2<f64>,
    pub labels: Vec<usize>,
}

impl SequenceModel for AmParams<f64> {
    type Seq = FeatSeq;
    type State = Vec<LstmState<f64>>;

    fn grad_store(&self) -> Self {
        let mut g = self.clone();
        crate::nn::zero_all(&mut g);
        g
    }

    fn zero_state(&self) -> Vec<LstmState<f64>> {
        self.zero_states()
    }

    fn seq_len(seq: &FeatSeq) -> usize {
        seq.labels.len()
    }

    fn chunk_grads(
        &self,
        seq: &FeatSeq,
        start: usize,
        end: usize,
        state: &Vec<LstmState<f64>>,
        grads: &mut Self,
    ) -> Result<(f64, Vec<LstmState<f64>>)> {
        let n = end - start;
        let n_layers = self.n_layers();
        let mut caches: Vec<Vec<LstmCache<f64>>> = Vec::with_capacity(n);
        let mut zs: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut tops: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut d_logits_all: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut st = state.clone();
        let mut loss_sum = 0.0;
        for k in 0..n {
            let z = seq.frames.row(start + k).to_owned();
            let (new_st, cache, logits) = self.forward_step(&z.view(), &st);
            let (_, loss, d_logits) =
                softmax_xent_from_logits(&logits.view(), seq.labels[start + k])?;
            loss_sum += loss;
            tops.push(new_st.last().unwrap().h.clone());
            caches.push(cache);
            zs.push(z);
            d_logits_all.push(d_logits);
            st = new_st;
        }

        let mut d_h: Vec<Array1<f64>> =
            (0..n_layers).map(|_| Array1::zeros(self.hidden_dim())).collect();
        let mut d_c = d_h.clone();
        for k in (0..n).rev() {
            let mut d_h_top =
                self.out.backward(&tops[k].view(), &d_logits_all[k].view(), &mut grads.out);
            d_h_top += &d_h[n_layers - 1];
            let mut d_x_down = {
                let (dx, dhp, dcp) = self.lstms[n_layers - 1].backward(
                    &caches[k][n_layers - 1],
                    &d_h_top.view(),
                    &d_c[n_layers - 1].view(),
                    &mut grads.lstms[n_layers - 1],
                );
                d_h[n_layers - 1] = dhp;
                d_c[n_layers - 1] = dcp;
                dx
            };
            for l in (0..n_layers - 1).rev() {
                let dh = &d_h[l] + &d_x_down;
                let (dx, dhp, dcp) = self.lstms[l].backward(
                    &caches[k][l],
                    &dh.view(),
                    &d_c[l].view(),
                    &mut grads.lstms[l],
                );
                d_h[l] = dhp;
                d_c[l] = dcp;
                d_x_down = dx;
            }
            self.proj.backward(&zs[k].view(), &d_x_down.view(), &mut grads.proj);
        }
        Ok((loss_sum, st))
    }
}

/// Stage-2 pretraining: beamformer alone, mean squared error between the
/// network's beamformed STFT frame and the delay-and-sum oracle's, averaged
/// over the 2F real components.
impl SequenceModel for BfParams<f64> {
    type Seq = PreparedScene;
    type State = LstmState<f64>;

    fn grad_store(&self) -> Self {
        let mut g = self.clone();
        crate::nn::zero_all(&mut g);
        g
    }

    fn zero_state(&self) -> LstmState<f64> {
        LstmState::zeros(self.lstm.hidden_dim())
    }

    fn seq_len(seq: &PreparedScene) -> usize {
        seq.n_frames()
    }

    fn chunk_grads(
        &self,
        seq: &PreparedScene,
        start: usize,
        end: usize,
        state: &LstmState<f64>,
        grads: &mut Self,
    ) -> Result<(f64, LstmState<f64>)> {
        assert_eq!(self.feedback_dim(), 0, "pretraining runs without feedback");
        let n = end - start;
        let n_bins = self.n_bins();
        let zero_fb = Array1::<f64>::zeros(0);

        let mut caches = Vec::with_capacity(n);
        let mut hs: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut gs: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut d_res: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut d_ims: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut st = state.clone();
        let mut loss_sum = 0.0;
        let denom = (2 * n_bins) as f64;
        for k in 0..n {
            let x = &seq.packed[start + k];
            let (new_st, cache, g) = self.forward_step(&x.view(), &zero_fb, &st);
            let (re, im) = beamform_packed(&x.view(), &g.view());
            let mut d_re = Array1::<f64>::zeros(n_bins);
            let mut d_im = Array1::<f64>::zeros(n_bins);
            for f in 0..n_bins {
                let target = seq.das_xhat[[start + k, f]];
                let er = re[f] - target.re;
                let ei = im[f] - target.im;
                loss_sum += (er * er + ei * ei) / denom;
                d_re[f] = 2.0 * er / denom;
                d_im[f] = 2.0 * ei / denom;
            }
            if !loss_sum.is_finite() {
                return Err(Error::Numeric("divergence detected".into()));
            }
            hs.push(new_st.h.clone());
            caches.push(cache);
            gs.push(g);
            d_res.push(d_re);
            d_ims.push(d_im);
            st = new_st;
        }

        let mut d_h_rec = Array1::<f64>::zeros(self.lstm.hidden_dim());
        let mut d_c_rec = d_h_rec.clone();
        for k in (0..n).rev() {
            let x = &seq.packed[start + k];
            let (_d_x, d_g) = beamform_packed_backward(
                &d_res[k].view(),
                &d_ims[k].view(),
                &x.view(),
                &gs[k].view(),
            );
            let mut d_h = d_h_rec.clone();
            for (m, head) in self.heads.iter().enumerate() {
                let d_a = tanh_backward(&d_g.row(m), &gs[k].row(m));
                d_h += &head.backward(&hs[k].view(), &d_a.view(), &mut grads.heads[m]);
            }
            let (d_p, dbh, dbc) =
                self.lstm
                    .backward(&caches[k], &d_h.view(), &d_c_rec.view(), &mut grads.lstm);
            d_h_rec = dbh;
            d_c_rec = dbc;
            self.proj.backward(&x.view(), &d_p.view(), &mut grads.proj);
        }
        Ok((loss_sum, st))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradsuite::{tiny_dims, tiny_scene};
    use super::*;
    use crate::nn::{bptt_grads, bptt_train_epoch, gradcheck, load_tensors, save_params};
    use crate::signal::{build_mel_filterbank, power_spectrum};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn mel_for(dims: &super::super::NetDims) -> MelFilterbank {
        build_mel_filterbank(dims.n_mels, dims.n_bins, 8000, 0.0, 4000.0).unwrap()
    }

    fn random_params(
        dims: &super::super::NetDims,
        seed: u64,
        feedback: bool,
    ) -> IntegratedParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = IntegratedParams::init(&mut rng, dims);
        p.norm_mean = Array1::from_shape_fn(dims.n_mels, |_| rng.gen_range(-1.0..1.0));
        p.norm_std = Array1::from_shape_fn(dims.n_mels, |_| rng.gen_range(0.5..2.0));
        if feedback {
            p.bf.widen_for_feedback(dims.am_hidden);
            let start = p.bf.input_dim;
            for v in p.bf.proj.w.slice_mut(s![.., start..]).iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    fn assert_tensors_eq(a: &impl ParamSet, b: &impl ParamSet) {
        let ta = a.tensors();
        let tb = b.tensors();
        assert_eq!(ta.len(), tb.len());
        for ((na, va), (nb, vb)) in ta.iter().zip(tb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.len(), vb.len(), "{na}");
            for i in 0..va.len() {
                assert_eq!(va.at(i), vb.at(i), "{na}[{i}]");
            }
        }
    }

    #[test]
    fn zero_params_give_floored_features_and_uniform_posteriors() {
        let dims = tiny_dims();
        let p = IntegratedParams::zeros(&dims, false);
        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 3, 11).unwrap();
        let st = NetState::zeros(&p);
        let (so, _) = integrated_step(&p, &mel.weights, &scene.packed[0].view(), &st).unwrap();
        assert!(so.g.iter().all(|&v| v == 0.0));
        assert!(so.power.iter().all(|&v| v == 0.0));
        let floor_log = LOG_FLOOR.ln();
        assert!(so.logmel.iter().all(|&v| v == floor_log));
        assert!(so.logits.iter().all(|&v| v == 0.0));
        let (_, loss, _) = softmax_xent_from_logits(&so.logits.view(), 2).unwrap();
        assert!((loss - (dims.n_classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn step_matches_composed_module_calls() {
        let dims = tiny_dims();
        let p = random_params(&dims, 21, true);
        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 8, 22).unwrap();

        let mut st = NetState::zeros(&p);
        for t in 0..scene.n_frames() {
            let x = &scene.packed[t];
            let (so, next) = integrated_step(&p, &mel.weights, &x.view(), &st).unwrap();

            let (bf_st, _, g) = p.bf.forward_step(&x.view(), &st.s_prev, &st.bf);
            let (re, im) = beamform_packed(&x.view(), &g.view());
            let power =
                Array1::from_shape_fn(dims.n_bins, |f| re[f] * re[f] + im[f] * im[f]);
            let logmel = log_mel(&power.view(), &mel.weights, LOG_FLOOR).unwrap();
            let z = normalize_frame(&logmel, &p.norm_mean, &p.norm_std);
            let (am_st, _, logits) = p.am.forward_step(&z.view(), &st.am);

            assert_eq!(so.g, g);
            assert_eq!(so.xhat_re, re);
            assert_eq!(so.xhat_im, im);
            assert_eq!(so.power, power);
            assert_eq!(so.logmel, logmel);
            assert_eq!(so.z, z);
            assert_eq!(so.logits, logits);
            assert_eq!(next.bf.h, bf_st.h);
            assert_eq!(next.bf.c, bf_st.c);
            assert_eq!(next.s_prev, am_st.last().unwrap().h);
            assert_ne!(so.logmel, so.z, "normalization must be nontrivial here");
            st = next;
        }
    }

    #[test]
    fn forced_unit_filter_on_one_channel_matches_classifier_on_raw_channel() {
        let mut dims = tiny_dims();
        dims.n_channels = 1;
        let p = random_params(&dims, 31, false);
        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 6, 32).unwrap();

        let mut unit = Array2::<f64>::zeros((1, 2 * dims.n_bins));
        for f in 0..dims.n_bins {
            unit[[0, f]] = 1.0;
        }

        let mut st = NetState::zeros(&p);
        let mut am_st = p.am.zero_states();
        for t in 0..scene.n_frames() {
            let x = &scene.packed[t];
            let (so, next) =
                integrated_step_filtered(&p, &mel.weights, &x.view(), &st, Some(&unit)).unwrap();

            let frame: Vec<Complex64> =
                scene.spec.data.slice(s![t, .., 0]).iter().cloned().collect();
            let power = power_spectrum(&frame);
            let logmel = log_mel(&power.view(), &mel.weights, LOG_FLOOR).unwrap();
            let z = normalize_frame(&logmel, &p.norm_mean, &p.norm_std);
            let (next_am, _, logits) = p.am.forward_step(&z.view(), &am_st);

            assert_eq!(so.power, power);
            assert_eq!(so.logits, logits);
            st = next;
            am_st = next_am;
        }
    }

    #[test]
    fn zero_feedback_columns_leave_forward_bitwise_unchanged() {
        let dims = tiny_dims();
        let plain = random_params(&dims, 41, false);
        let mut widened = plain.clone();
        widened.bf.widen_for_feedback(dims.am_hidden);
        assert!(widened.feedback_enabled());
        assert_eq!(widened.bf.feedback_dim(), dims.am_hidden);

        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 10, 42).unwrap();
        let mut st_a = NetState::zeros(&plain);
        let mut st_b = NetState::zeros(&widened);
        for t in 0..scene.n_frames() {
            let x = &scene.packed[t];
            let (sa, na) = integrated_step(&plain, &mel.weights, &x.view(), &st_a).unwrap();
            let (sb, nb) = integrated_step(&widened, &mel.weights, &x.view(), &st_b).unwrap();
            assert_eq!(sa.g, sb.g);
            assert_eq!(sa.logits, sb.logits);
            st_a = na;
            st_b = nb;
        }
    }

    #[test]
    #[should_panic(expected = "projection already widened")]
    fn widening_twice_panics() {
        let dims = tiny_dims();
        let mut p = random_params(&dims, 43, true);
        p.bf.widen_for_feedback(dims.am_hidden);
    }

    #[test]
    fn zero_feedback_columns_leave_shared_gradients_bitwise_unchanged() {
        let dims = tiny_dims();
        let plain = random_params(&dims, 51, false);
        let mut widened = plain.clone();
        widened.bf.widen_for_feedback(dims.am_hidden);
        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 10, 52).unwrap();

        let model_a = IntegratedModel::new(plain, mel.clone());
        let model_b = IntegratedModel::new(widened, mel);
        let mut ga = model_a.grad_store();
        let mut gb = model_b.grad_store();
        let la = bptt_grads(&model_a, &scene, 10, &mut ga).unwrap();
        let lb = bptt_grads(&model_b, &scene, 10, &mut gb).unwrap();
        assert_eq!(la, lb);

        assert_tensors_eq(&ga.p.am, &gb.p.am);
        for ((na, va), (nb, vb)) in ga.p.bf.tensors().iter().zip(gb.p.bf.tensors().iter()) {
            assert_eq!(na, nb);
            if na.starts_with("bf.proj") {
                continue;
            }
            assert_eq!(va.len(), vb.len(), "{na}");
            for i in 0..va.len() {
                assert_eq!(va.at(i), vb.at(i), "{na}[{i}]");
            }
        }
        let main = ga.p.bf.input_dim;
        assert_eq!(
            ga.p.bf.proj.w,
            gb.p.bf.proj.w.slice(s![.., ..main]).to_owned()
        );
        let fb_block = gb.p.bf.proj.w.slice(s![.., main..]);
        assert!(
            fb_block.iter().any(|&v| v != 0.0),
            "feedback columns must receive gradient"
        );
    }

    #[test]
    fn future_frames_cannot_change_past_outputs() {
        let dims = tiny_dims();
        let p = random_params(&dims, 61, true);
        let mel = mel_for(&dims);
        let scene_a = tiny_scene(&dims, 10, 62).unwrap();
        let mut scene_b = scene_a.clone();
        let cut = 6;
        for t in cut..scene_b.n_frames() {
            scene_b.packed[t] += 0.5;
        }

        let mut st_a = NetState::zeros(&p);
        let mut st_b = NetState::zeros(&p);
        for t in 0..scene_a.n_frames() {
            let (sa, na) =
                integrated_step(&p, &mel.weights, &scene_a.packed[t].view(), &st_a).unwrap();
            let (sb, nb) =
                integrated_step(&p, &mel.weights, &scene_b.packed[t].view(), &st_b).unwrap();
            if t < cut {
                assert_eq!(sa.logits, sb.logits, "frame {t}");
            } else {
                assert_ne!(sa.logits, sb.logits, "frame {t}");
            }
            st_a = na;
            st_b = nb;
        }
    }

    #[test]
    fn freezing_the_classifier_updates_only_the_beamformer() {
        let dims = tiny_dims();
        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 12, 71).unwrap();

        let mut model = IntegratedModel::new(random_params(&dims, 72, false), mel.clone());
        model.freeze_am = true;
        let before = model.p.clone();
        bptt_train_epoch(&mut model, &[&scene], 1, 4, 0.05).unwrap();
        assert_tensors_eq(&before.am, &model.p.am);
        assert_eq!(before.norm_mean, model.p.norm_mean);
        assert_eq!(before.norm_std, model.p.norm_std);
        assert_ne!(before.bf.proj.w, model.p.bf.proj.w);

        let mut model = IntegratedModel::new(random_params(&dims, 72, false), mel);
        model.freeze_am = false;
        let before = model.p.clone();
        bptt_train_epoch(&mut model, &[&scene], 1, 4, 0.05).unwrap();
        assert_ne!(before.am.out.w, model.p.am.out.w);
        assert_eq!(before.norm_mean, model.p.norm_mean);
    }

    #[test]
    fn classifier_sequence_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut am = AmParams::init(&mut rng, &dims);
        let n = 8;
        let seq = FeatSeq {
            frames: Array2::from_shape_fn((n, dims.n_mels), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..n).map(|_| rng.gen_range(0..dims.n_classes)).collect(),
        };

        let mut grads = am.grad_store();
        bptt_grads(&am, &seq, n, &mut grads).unwrap();

        let seq2 = seq.clone();
        let report = gradcheck(
            &mut am,
            &grads,
            move |p: &AmParams<f64>| {
                let mut st = p.zero_states();
                let mut total = 0.0;
                for t in 0..n {
                    let z = seq2.frames.row(t).to_owned();
                    let (next, _, logits) = p.forward_step(&z.view(), &st);
                    let (_, loss, _) = softmax_xent_from_logits(&logits.view(), seq2.labels[t])?;
                    total += loss;
                    st = next;
                }
                Ok(total / n as f64)
            },
            80,
            82,
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "{}", report.summary());
    }

    #[test]
    fn pretraining_mse_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let mut bf = BfParams::init(&mut rng, &dims);
        let n = 8;
        let mut scene = tiny_scene(&dims, n, 92).unwrap();
        scene.das_xhat = Array2::from_shape_fn((n, dims.n_bins), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });

        let mut grads = bf.grad_store();
        bptt_grads(&bf, &scene, n, &mut grads).unwrap();

        let report = gradcheck(
            &mut bf,
            &grads,
            move |p: &BfParams<f64>| {
                let zero_fb = Array1::<f64>::zeros(0);
                let mut st = LstmState::zeros(p.lstm.hidden_dim());
                let denom = (2 * p.n_bins()) as f64;
                let mut total = 0.0;
                for t in 0..n {
                    let x = &scene.packed[t];
                    let (next, _, g) = p.forward_step(&x.view(), &zero_fb, &st);
                    let (re, im) = beamform_packed(&x.view(), &g.view());
                    for f in 0..p.n_bins() {
                        let target = scene.das_xhat[[t, f]];
                        let er = re[f] - target.re;
                        let ei = im[f] - target.im;
                        total += (er * er + ei * ei) / denom;
                    }
                    st = next;
                }
                Ok(total / n as f64)
            },
            80,
            93,
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "{}", report.summary());
    }

    #[test]
    fn checkpoint_roundtrip_restores_parameters_exactly() {
        let dims = tiny_dims();
        for feedback in [false, true] {
            let p = random_params(&dims, 101, feedback);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("net.ckpt");
            save_params(&path, &p).unwrap();
            let loaded = load_tensors(&path).unwrap();
            let q = IntegratedParams::from_checkpoint(&loaded, &dims).unwrap();
            assert_eq!(q.feedback_enabled(), feedback);
            assert_tensors_eq(&p, &q);
        }
    }

    #[test]
    fn checkpoint_with_unexpected_projection_width_is_rejected() {
        let dims = tiny_dims();
        let p = random_params(&dims, 102, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_params(&path, &p).unwrap();
        let loaded = load_tensors(&path).unwrap();
        let mut other = dims;
        other.am_hidden = 5;
        let err = IntegratedParams::from_checkpoint(&loaded, &other).unwrap_err();
        assert!(err.to_string().contains("matches neither"), "{err}");
    }

    #[test]
    fn stage1_tensor_names_are_a_subset_of_the_integrated_names() {
        let dims = tiny_dims();
        let s1 = Stage1Params::zeros(&dims);
        let ip = IntegratedParams::zeros(&dims, false);
        let sizes: HashMap<String, usize> =
            ip.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        for (name, t) in s1.tensors() {
            assert_eq!(sizes.get(&name), Some(&t.len()), "{name}");
        }
    }

    #[test]
    fn non_finite_input_is_reported_at_the_filter_and_sum_stage() {
        let dims = tiny_dims();
        let p = random_params(&dims, 111, false);
        let mel = mel_for(&dims);
        let mut scene = tiny_scene(&dims, 2, 112).unwrap();
        scene.packed[0][3] = f64::NAN;
        let st = NetState::zeros(&p);
        let err = integrated_step(&p, &mel.weights, &scene.packed[0].view(), &st).unwrap_err();
        assert!(err.to_string().contains("filter-and-sum"), "{err}");
    }

    #[test]
    fn non_finite_classifier_output_is_reported() {
        let dims = tiny_dims();
        let mut p = random_params(&dims, 113, false);
        p.am.out.w[[0, 0]] = f64::NAN;
        let mel = mel_for(&dims);
        let scene = tiny_scene(&dims, 2, 114).unwrap();
        let st = NetState::zeros(&p);
        let err = integrated_step(&p, &mel.weights, &scene.packed[0].view(), &st).unwrap_err();
        assert!(err.to_string().contains("acoustic model"), "{err}");
    }

    #[test]
    fn beamformer_rollout_rejects_bad_feedback_arguments() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        let bf = BfParams::init(&mut rng, &dims);
        let packed = vec![Array1::<f64>::zeros(dims.packed_dim()); 3];
        let fb = vec![Array1::<f64>::zeros(dims.am_hidden); 3];
        let err = bf_forward(&bf, &packed, Some(&fb)).unwrap_err();
        assert!(err.to_string().contains("no feedback columns"), "{err}");

        let mut bf = bf;
        bf.widen_for_feedback(dims.am_hidden);
        let short = vec![Array1::<f64>::zeros(dims.am_hidden); 2];
        let err = bf_forward(&bf, &packed, Some(&short)).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
        assert!(bf_forward(&bf, &packed, Some(&fb)).is_ok());
    }

    #[test]
    fn beamformer_rollout_matches_per_frame_filters() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let bf = BfParams::init(&mut rng, &dims);
        let scene = tiny_scene(&dims, 30, 132).unwrap();
        let seq = bf_forward(&bf, &scene.packed, None).unwrap();
        assert_eq!(seq.g.shape(), [30, dims.n_bins, dims.n_channels]);

        let mut st = LstmState::zeros(bf.lstm.hidden_dim());
        let zero_fb = Array1::<f64>::zeros(0);
        for t in 0..30 {
            let (next, _, g) = bf.forward_step(&scene.packed[t].view(), &zero_fb, &st);
            let expect = unpack_filters(&g.view());
            assert_eq!(seq.g.index_axis(Axis(0), t).to_owned(), expect);
            st = next;
        }
    }

    #[test]
    fn single_layer_classifier_matches_hand_computation() {
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut lstm = crate::nn::LstmParams::zeros(2, 2);
        lstm.wi = ndarray::array![[0.10, 0.20], [0.30, -0.10]];
        lstm.ui = ndarray::array![[0.05, -0.02], [0.00, 0.10]];
        lstm.bi = ndarray::array![0.10, -0.20];
        lstm.wf = ndarray::array![[-0.15, 0.25], [0.05, 0.35]];
        lstm.uf = ndarray::array![[0.02, 0.03], [-0.04, 0.01]];
        lstm.bf = ndarray::array![0.50, 0.40];
        lstm.wo = ndarray::array![[0.20, -0.30], [0.10, 0.15]];
        lstm.uo = ndarray::array![[0.01, 0.02], [0.03, -0.01]];
        lstm.bo = ndarray::array![-0.10, 0.20];
        lstm.wc = ndarray::array![[0.40, 0.10], [-0.20, 0.30]];
        lstm.uc = ndarray::array![[0.06, -0.05], [0.02, 0.04]];
        lstm.bc = ndarray::array![0.00, 0.10];
        let am = AmParams {
            proj: Linear { w: ndarray::array![[0.5, -0.25], [1.0, 0.75]] },
            lstms: vec![lstm],
            out: Linear { w: ndarray::array![[1.0, -1.0], [0.5, 2.0]] },
        };

        let z = ndarray::array![0.3, -0.6];
        let q = [
            0.5 * z[0] + (-0.25) * z[1],
            1.0 * z[0] + 0.75 * z[1],
        ];
        let gate = |w: &Array2<f64>, b: &Array1<f64>, j: usize| {
            w[[j, 0]] * q[0] + w[[j, 1]] * q[1] + b[j]
        };
        let mut h = [0.0f64; 2];
        let mut c = [0.0f64; 2];
        for j in 0..2 {
            let i = sigma(gate(&am.lstms[0].wi, &am.lstms[0].bi, j));
            let f = sigma(gate(&am.lstms[0].wf, &am.lstms[0].bf, j));
            let o = sigma(gate(&am.lstms[0].wo, &am.lstms[0].bo, j));
            let g = gate(&am.lstms[0].wc, &am.lstms[0].bc, j).tanh();
            c[j] = f * 0.0 + i * g;
            h[j] = o * c[j].tanh();
        }
        let logits_hand = [h[0] - h[1], 0.5 * h[0] + 2.0 * h[1]];

        let (states, _, logits) = am.forward_step(&z.view(), &am.zero_states());
        for j in 0..2 {
            assert!((logits[j] - logits_hand[j]).abs() < 1e-15, "logit {j}");
            assert!((states[0].h[j] - h[j]).abs() < 1e-15, "h {j}");
            assert!((states[0].c[j] - c[j]).abs() < 1e-15, "c {j}");
        }

        let (_, _, logits_carried) = am.forward_step(&z.view(), &states);
        let (_, _, logits_reset) = am.forward_step(&z.view(), &am.zero_states());
        assert_ne!(
            logits_carried, logits_reset,
            "the second frame must see the carried state"
        );
        assert_eq!(logits_reset, logits);
    }

    #[test]
    fn pretraining_against_its_own_output_gives_exactly_zero_gradients() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(141);
        let bf = BfParams::init(&mut rng, &dims);
        let mut scene = tiny_scene(&dims, 12, 142).unwrap();

        let zero_fb = Array1::<f64>::zeros(0);
        let mut st = LstmState::zeros(bf.lstm.hidden_dim());
        for t in 0..scene.n_frames() {
            let x = &scene.packed[t];
            let (next, _, g) = bf.forward_step(&x.view(), &zero_fb, &st);
            let (re, im) = beamform_packed(&x.view(), &g.view());
            for f in 0..dims.n_bins {
                scene.das_xhat[[t, f]] = Complex64::new(re[f], im[f]);
            }
            st = next;
        }

        let mut grads = bf.grad_store();
        let loss = bptt_grads(&bf, &scene, 4, &mut grads).unwrap();
        assert_eq!(loss, 0.0);
        for (name, t) in grads.tensors() {
            for i in 0..t.len() {
                assert_eq!(t.at(i), 0.0, "{name}[{i}]");
            }
        }
    }
}

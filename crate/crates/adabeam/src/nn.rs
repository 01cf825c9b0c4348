//! Minimal recurrent-network core: LSTM cell, bias-free linear layers, tanh
//! heads, softmax cross-entropy, SGD with global-norm clipping, a truncated
//! BPTT driver and a finite-difference gradient checker.
//!
//! Gradients are hand-derived per op; there is no autodiff graph. Training
//! runs in f64 so the gradient checks stay sharp; forward passes are generic
//! over [`crate::Real`] and can run in f32 for evaluation.
//!
//! Parameter plumbing: every model struct exposes its tensors as a flat,
//! name-ordered list via [`ParamSet`]. A gradient store is simply a second,
//! zero-initialized instance of the same struct, so optimizer steps, norm
//! computations, checkpointing and gradient probing all walk the same list.

pub mod bptt;
pub mod checkpoint;
pub mod gradcheck;
pub mod linear;
pub mod lstm;
pub mod ops;
pub mod sgd;

pub use bptt::{bptt_grads, bptt_train_epoch, SequenceModel};
pub use checkpoint::{load_params_into, load_tensors, save_params, save_tensors, TensorData};
pub use gradcheck::{gradcheck, ProbeReport};
pub use linear::Linear;
pub use lstm::{LstmCache, LstmParams, LstmState};
pub use ops::{argmax, softmax, softmax_xent_from_logits, tanh_backward, tanh_forward};
pub use sgd::sgd_step;

use ndarray::{Array1, Array2};

/// Borrowed view of one parameter tensor.
pub enum TensorRef<'a> {
    M(&'a Array2<f64>),
    V(&'a Array1<f64>),
}

/// Mutable view of one parameter tensor.
pub enum TensorMut<'a> {
    M(&'a mut Array2<f64>),
    V(&'a mut Array1<f64>),
}

impl TensorRef<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::M(a) => a.len(),
            TensorRef::V(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat (row-major) element access.
    pub fn at(&self, i: usize) -> f64 {
        match self {
            TensorRef::M(a) => a.as_slice().expect("contiguous")[i],
            TensorRef::V(a) => a[i],
        }
    }

    pub fn sum_sq(&self) -> f64 {
        match self {
            TensorRef::M(a) => a.iter().map(|x| x * x).sum(),
            TensorRef::V(a) => a.iter().map(|x| x * x).sum(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            TensorRef::M(a) => a.iter().all(|x| x.is_finite()),
            TensorRef::V(a) => a.iter().all(|x| x.is_finite()),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorRef::M(a) => a.shape().to_vec(),
            TensorRef::V(a) => a.shape().to_vec(),
        }
    }
}

impl TensorMut<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::M(a) => a.len(),
            TensorMut::V(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, i: usize) -> f64 {
        match self {
            TensorMut::M(a) => a.as_slice().expect("contiguous")[i],
            TensorMut::V(a) => a[i],
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        match self {
            TensorMut::M(a) => a.as_slice_mut().expect("contiguous")[i] = v,
            TensorMut::V(a) => a[i] = v,
        }
    }

    pub fn fill(&mut self, v: f64) {
        match self {
            TensorMut::M(a) => a.fill(v),
            TensorMut::V(a) => a.fill(v),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            TensorMut::M(a) => a.mapv_inplace(|x| x * s),
            TensorMut::V(a) => a.mapv_inplace(|x| x * s),
        }
    }

    /// `self += a * src`; shapes must agree.
    pub fn scaled_add(&mut self, a: f64, src: &TensorRef<'_>) {
        match (self, src) {
            (TensorMut::M(d), TensorRef::M(s)) => d.scaled_add(a, s),
            (TensorMut::V(d), TensorRef::V(s)) => d.scaled_add(a, s),
            _ => panic!("tensor rank mismatch"),
        }
    }
}

/// A named, ordered collection of parameter tensors.
///
/// The order and names returned by `tensors` and `tensors_mut` must be
/// identical and stable across calls; gradient stores are instances of the
/// same type, so pairwise traversal lines the tensors up.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)>;
    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Zero every tensor in place.
pub fn zero_all<P: ParamSet>(p: &mut P) {
    for (_, mut t) in p.tensors_mut() {
        t.fill(0.0);
    }
}

/// Multiply every tensor by `s` in place.
pub fn scale_all<P: ParamSet>(p: &mut P, s: f64) {
    for (_, mut t) in p.tensors_mut() {
        t.scale(s);
    }
}

/// Euclidean norm over the tensors whose name satisfies `pred`.
pub fn global_norm<P: ParamSet>(p: &P, pred: impl Fn(&str) -> bool) -> f64 {
    p.tensors()
        .iter()
        .filter(|(n, _)| pred(n))
        .map(|(_, t)| t.sum_sq())
        .sum::<f64>()
        .sqrt()
}

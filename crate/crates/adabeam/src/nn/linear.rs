//! Bias-free linear layer `out = W v`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::nn::{ParamSet, TensorMut, TensorRef};
use crate::{cf, Real};

#[derive(Clone, Debug)]
pub struct Linear<F: Real = f64> {
    pub w: Array2<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, v: &ArrayView1<F>) -> Array1<F> {
        assert_eq!(v.len(), self.in_dim(), "linear input dimension mismatch");
        self.w.dot(v)
    }
}

impl Linear<f64> {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
    pub fn init(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn cast<G: Real>(&self) -> Linear<G> {
        Linear {
            w: self.w.mapv(|x| cf::<G>(x)),
        }
    }

    /// Accumulates `dL/dW += outer(d_out, v)` into `grads` and returns `dL/dv`.
    pub fn backward(
        &self,
        v: &ArrayView1<f64>,
        d_out: &ArrayView1<f64>,
        grads: &mut Linear<f64>,
    ) -> Array1<f64> {
        assert_eq!(v.len(), self.in_dim());
        assert_eq!(d_out.len(), self.out_dim());
        assert_eq!(grads.w.shape(), self.w.shape(), "gradient shape mismatch");
        for (i, &d) in d_out.iter().enumerate() {
            let mut row = grads.w.row_mut(i);
            row.scaled_add(d, v);
        }
        self.w.t().dot(d_out)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, TensorRef<'_>)> {
        vec![(format!("{prefix}.w"), TensorRef::M(&self.w))]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, TensorMut<'_>)> {
        vec![(format!("{prefix}.w"), TensorMut::M(&mut self.w))]
    }
}

impl ParamSet for Linear<f64> {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        self.tensors("linear")
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        self.tensors_mut("linear")
    }
}

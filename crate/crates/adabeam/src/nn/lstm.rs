//! Single LSTM cell with standard gates and no peephole connections.
//!
//! ```text
//! i = sigma(W_i x + U_i h + b_i)    f = sigma(W_f x + U_f h + b_f)
//! o = sigma(W_o x + U_o h + b_o)    ctilde = tanh(W_c x + U_c h + b_c)
//! c' = f*c + i*ctilde               h' = o*tanh(c')    (* elementwise)
//! ```

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::nn::{TensorMut, TensorRef};
use crate::{cf, Real};

#[derive(Clone, Debug)]
pub struct LstmParams<F: Real = f64> {
    pub wi: Array2<F>,
    pub ui: Array2<F>,
    pub bi: Array1<F>,
    pub wf: Array2<F>,
    pub uf: Array2<F>,
    pub bf: Array1<F>,
    pub wo: Array2<F>,
    pub uo: Array2<F>,
    pub bo: Array1<F>,
    pub wc: Array2<F>,
    pub uc: Array2<F>,
    pub bc: Array1<F>,
}

#[derive(Clone, Debug)]
pub struct LstmState<F: Real = f64> {
    pub h: Array1<F>,
    pub c: Array1<F>,
}

impl<F: Real> LstmState<F> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

/// Activations recorded by the forward pass, sufficient for exact reverse-
/// mode differentiation of one step.
#[derive(Clone, Debug)]
pub struct LstmCache<F: Real = f64> {
    pub x: Array1<F>,
    pub h_prev: Array1<F>,
    pub c_prev: Array1<F>,
    pub i: Array1<F>,
    pub f: Array1<F>,
    pub o: Array1<F>,
    pub g: Array1<F>,
    pub c_new: Array1<F>,
    pub tanh_c: Array1<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> LstmParams<F> {
    pub fn input_dim(&self) -> usize {
        self.wi.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.wi.shape()[0]
    }

    /// One recurrence step; the cache captures everything backward needs.
    pub fn forward(&self, x: &ArrayView1<F>, prev: &LstmState<F>) -> (LstmState<F>, LstmCache<F>) {
        assert_eq!(x.len(), self.input_dim(), "lstm input dimension mismatch");
        assert_eq!(prev.h.len(), self.hidden_dim(), "lstm state dimension mismatch");
        let i = (self.wi.dot(x) + self.ui.dot(&prev.h) + &self.bi).mapv(sigmoid);
        let f = (self.wf.dot(x) + self.uf.dot(&prev.h) + &self.bf).mapv(sigmoid);
        let o = (self.wo.dot(x) + self.uo.dot(&prev.h) + &self.bo).mapv(sigmoid);
        let g = (self.wc.dot(x) + self.uc.dot(&prev.h) + &self.bc).mapv(|v| v.tanh());
        let c_new = &f * &prev.c + &i * &g;
        let tanh_c = c_new.mapv(|v| v.tanh());
        let h_new = &o * &tanh_c;
        let cache = LstmCache {
            x: x.to_owned(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            i,
            f,
            o,
            g,
            c_new: c_new.clone(),
            tanh_c,
        };
        (LstmState { h: h_new, c: c_new }, cache)
    }
}

impl LstmParams<f64> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            wi: Array2::zeros((hidden, input_dim)),
            ui: Array2::zeros((hidden, hidden)),
            bi: Array1::zeros(hidden),
            wf: Array2::zeros((hidden, input_dim)),
            uf: Array2::zeros((hidden, hidden)),
            bf: Array1::zeros(hidden),
            wo: Array2::zeros((hidden, input_dim)),
            uo: Array2::zeros((hidden, hidden)),
            bo: Array1::zeros(hidden),
            wc: Array2::zeros((hidden, input_dim)),
            uc: Array2::zeros((hidden, hidden)),
            bc: Array1::zeros(hidden),
        }
    }

    /// Uniform(+/-1/sqrt(fan_in)) weights, zero biases except forget bias 1.0.
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> Self {
        let mut mat = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let wi = mat(hidden, input_dim);
        let ui = mat(hidden, hidden);
        let wf = mat(hidden, input_dim);
        let uf = mat(hidden, hidden);
        let wo = mat(hidden, input_dim);
        let uo = mat(hidden, hidden);
        let wc = mat(hidden, input_dim);
        let uc = mat(hidden, hidden);
        LstmParams {
            wi,
            ui,
            bi: Array1::zeros(hidden),
            wf,
            uf,
            bf: Array1::from_elem(hidden, 1.0),
            wo,
            uo,
            bo: Array1::zeros(hidden),
            wc,
            uc,
            bc: Array1::zeros(hidden),
        }
    }

    pub fn cast<G: Real>(&self) -> LstmParams<G> {
        let m = |a: &Array2<f64>| a.mapv(|x| cf::<G>(x));
        let v = |a: &Array1<f64>| a.mapv(|x| cf::<G>(x));
        LstmParams {
            wi: m(&self.wi),
            ui: m(&self.ui),
            bi: v(&self.bi),
            wf: m(&self.wf),
            uf: m(&self.uf),
            bf: v(&self.bf),
            wo: m(&self.wo),
            uo: m(&self.uo),
            bo: v(&self.bo),
            wc: m(&self.wc),
            uc: m(&self.uc),
            bc: v(&self.bc),
        }
    }

    /// Reverse one step. `d_h`/`d_c` are the loss gradients at this step's
    /// output state; parameter gradients accumulate into `grads`; returns
    /// `(dL/dx, dL/dh_prev, dL/dc_prev)`.
    pub fn backward(
        &self,
        cache: &LstmCache<f64>,
        d_h: &ArrayView1<f64>,
        d_c: &ArrayView1<f64>,
        grads: &mut LstmParams<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let hidden = self.hidden_dim();
        assert_eq!(cache.x.len(), self.input_dim(), "cache does not match params");
        assert_eq!(cache.i.len(), hidden, "cache does not match params");
        assert_eq!(d_h.len(), hidden);
        assert_eq!(d_c.len(), hidden);

        let d_o = d_h * &cache.tanh_c;
        let d_c_total = d_c + &(d_h * &cache.o * &cache.tanh_c.mapv(|v| 1.0 - v * v));
        let d_f = &d_c_total * &cache.c_prev;
        let d_i = &d_c_total * &cache.g;
        let d_g = &d_c_total * &cache.i;
        let d_c_prev = &d_c_total * &cache.f;

        let da_i = &d_i * &cache.i.mapv(|v| v * (1.0 - v));
        let da_f = &d_f * &cache.f.mapv(|v| v * (1.0 - v));
        let da_o = &d_o * &cache.o.mapv(|v| v * (1.0 - v));
        let da_g = &d_g * &cache.g.mapv(|v| 1.0 - v * v);

        let accum = |w: &mut Array2<f64>, u: &mut Array2<f64>, b: &mut Array1<f64>, da: &Array1<f64>| {
            for (r, &d) in da.iter().enumerate() {
                w.row_mut(r).scaled_add(d, &cache.x);
                u.row_mut(r).scaled_add(d, &cache.h_prev);
            }
            *b += da;
        };
        accum(&mut grads.wi, &mut grads.ui, &mut grads.bi, &da_i);
        accum(&mut grads.wf, &mut grads.uf, &mut grads.bf, &da_f);
        accum(&mut grads.wo, &mut grads.uo, &mut grads.bo, &da_o);
        accum(&mut grads.wc, &mut grads.uc, &mut grads.bc, &da_g);

        let d_x = self.wi.t().dot(&da_i)
            + self.wf.t().dot(&da_f)
            + self.wo.t().dot(&da_o)
            + self.wc.t().dot(&da_g);
        let d_h_prev = self.ui.t().dot(&da_i)
            + self.uf.t().dot(&da_f)
            + self.uo.t().dot(&da_o)
            + self.uc.t().dot(&da_g);
        (d_x, d_h_prev, d_c_prev)
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, TensorRef<'_>)> {
        vec![
            (format!("{prefix}.wi"), TensorRef::M(&self.wi)),
            (format!("{prefix}.ui"), TensorRef::M(&self.ui)),
            (format!("{prefix}.bi"), TensorRef::V(&self.bi)),
            (format!("{prefix}.wf"), TensorRef::M(&self.wf)),
            (format!("{prefix}.uf"), TensorRef::M(&self.uf)),
            (format!("{prefix}.bf"), TensorRef::V(&self.bf)),
            (format!("{prefix}.wo"), TensorRef::M(&self.wo)),
            (format!("{prefix}.uo"), TensorRef::M(&self.uo)),
            (format!("{prefix}.bo"), TensorRef::V(&self.bo)),
            (format!("{prefix}.wc"), TensorRef::M(&self.wc)),
            (format!("{prefix}.uc"), TensorRef::M(&self.uc)),
            (format!("{prefix}.bc"), TensorRef::V(&self.bc)),
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, TensorMut<'_>)> {
        vec![
            (format!("{prefix}.wi"), TensorMut::M(&mut self.wi)),
            (format!("{prefix}.ui"), TensorMut::M(&mut self.ui)),
            (format!("{prefix}.bi"), TensorMut::V(&mut self.bi)),
            (format!("{prefix}.wf"), TensorMut::M(&mut self.wf)),
            (format!("{prefix}.uf"), TensorMut::M(&mut self.uf)),
            (format!("{prefix}.bf"), TensorMut::V(&mut self.bf)),
            (format!("{prefix}.wo"), TensorMut::M(&mut self.wo)),
            (format!("{prefix}.uo"), TensorMut::M(&mut self.uo)),
            (format!("{prefix}.bo"), TensorMut::V(&mut self.bo)),
            (format!("{prefix}.wc"), TensorMut::M(&mut self.wc)),
            (format!("{prefix}.uc"), TensorMut::M(&mut self.uc)),
            (format!("{prefix}.bc"), TensorMut::V(&mut self.bc)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_params(rng: &mut ChaCha8Rng, d: usize, h: usize) -> LstmParams {
        let mut p = LstmParams::init(rng, d, h);
        // Randomize biases too so gradient checks exercise them.
        p.bi = rand_vec(rng, h);
        p.bf = rand_vec(rng, h);
        p.bo = rand_vec(rng, h);
        p.bc = rand_vec(rng, h);
        p
    }

    #[test]
    fn zero_params_zero_input_give_zero_state_and_half_gates() {
        let p = LstmParams::zeros(3, 4);
        let x = Array1::zeros(3);
        let (st, cache) = p.forward(&x.view(), &LstmState::zeros(4));
        assert!(st.h.iter().all(|&v| v == 0.0));
        assert!(st.c.iter().all(|&v| v == 0.0));
        assert!(cache.i.iter().all(|&v| v == 0.5));
        assert!(cache.f.iter().all(|&v| v == 0.5));
        assert!(cache.o.iter().all(|&v| v == 0.5));
        assert!(cache.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut p = LstmParams::zeros(2, 3);
        p.bf.fill(60.0); // forget gate ~ 1
        p.bi.fill(-60.0); // input gate ~ 0
        let x = Array1::from_elem(2, 0.7);
        let prev = LstmState {
            h: Array1::zeros(3),
            c: Array1::from_elem(3, 0.9),
        };
        let (st, cache) = p.forward(&x.view(), &prev);
        for v in st.c.iter() {
            assert!((v - 0.9).abs() < 1e-12);
        }
        assert!(cache.f.iter().all(|&f| f > 1.0 - 1e-12));
    }

    #[test]
    fn forget_gate_bounded_by_one() {
        // |dc'/dc| = f <= 1 elementwise, read off the cached gate values.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let p = rand_params(&mut rng, 4, 5);
            let x = rand_vec(&mut rng, 4);
            let prev = LstmState {
                h: rand_vec(&mut rng, 5),
                c: rand_vec(&mut rng, 5),
            };
            let (_, cache) = p.forward(&x.view(), &prev);
            assert!(cache.f.iter().all(|&f| f > 0.0 && f < 1.0));
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = rand_params(&mut rng, 3, 4);
        let x = rand_vec(&mut rng, 3);
        let prev = LstmState {
            h: rand_vec(&mut rng, 4),
            c: rand_vec(&mut rng, 4),
        };
        let (_, cache) = p.forward(&x.view(), &prev);
        let mut g = LstmParams::zeros(3, 4);
        let zero = Array1::zeros(4);
        let (dx, dh, dc) = p.backward(&cache, &zero.view(), &zero.view(), &mut g);
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(dh.iter().all(|&v| v == 0.0));
        assert!(dc.iter().all(|&v| v == 0.0));
        assert!(g.wi.iter().all(|&v| v == 0.0));
        assert!(g.bf.iter().all(|&v| v == 0.0));
    }

    // Direct differentiation of the one-step composite formula for a scalar
    // hidden size, derived separately from the vector backward.
    #[test]
    fn backward_single_step_matches_symbolic_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let (wi, ui, bi): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (wf, uf, bf): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (wo, uo, bo): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (wc, uc, bc): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (x, h0, c0): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));

            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let i = sig(wi * x + ui * h0 + bi);
            let f = sig(wf * x + uf * h0 + bf);
            let o = sig(wo * x + uo * h0 + bo);
            let g = (wc * x + uc * h0 + bc).tanh();
            let c1 = f * c0 + i * g;
            let th = c1.tanh();
            // L = h1; dL/dwi symbolically:
            // dh1/dc1 = o (1 - th^2); dc1/di = g; di/dwi = i(1-i) x
            let dh_dc1 = o * (1.0 - th * th);
            let dwi_oracle = dh_dc1 * g * i * (1.0 - i) * x;
            let dwf_oracle = dh_dc1 * c0 * f * (1.0 - f) * x;
            let dwo_oracle = th * o * (1.0 - o) * x;
            let dwc_oracle = dh_dc1 * i * (1.0 - g * g) * x;
            let dx_oracle = dh_dc1 * (g * i * (1.0 - i) * wi + c0 * f * (1.0 - f) * wf + i * (1.0 - g * g) * wc)
                + th * o * (1.0 - o) * wo;

            let mut p = LstmParams::zeros(1, 1);
            p.wi[[0, 0]] = wi;
            p.ui[[0, 0]] = ui;
            p.bi[0] = bi;
            p.wf[[0, 0]] = wf;
            p.uf[[0, 0]] = uf;
            p.bf[0] = bf;
            p.wo[[0, 0]] = wo;
            p.uo[[0, 0]] = uo;
            p.bo[0] = bo;
            p.wc[[0, 0]] = wc;
            p.uc[[0, 0]] = uc;
            p.bc[0] = bc;
            let prev = LstmState {
                h: Array1::from_elem(1, h0),
                c: Array1::from_elem(1, c0),
            };
            let xv = Array1::from_elem(1, x);
            let (st, cache) = p.forward(&xv.view(), &prev);
            assert!((st.h[0] - o * th).abs() < 1e-14);
            let mut grads = LstmParams::zeros(1, 1);
            let one = Array1::from_elem(1, 1.0);
            let zero = Array1::zeros(1);
            let (dx, _, _) = p.backward(&cache, &one.view(), &zero.view(), &mut grads);
            assert!((grads.wi[[0, 0]] - dwi_oracle).abs() < 1e-12);
            assert!((grads.wf[[0, 0]] - dwf_oracle).abs() < 1e-12);
            assert!((grads.wo[[0, 0]] - dwo_oracle).abs() < 1e-12);
            assert!((grads.wc[[0, 0]] - dwc_oracle).abs() < 1e-12);
            assert!((dx[0] - dx_oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (d, hdim) = (3usize, 4usize);
        let p = rand_params(&mut rng, d, hdim);
        let x = rand_vec(&mut rng, d);
        let prev = LstmState {
            h: rand_vec(&mut rng, hdim),
            c: rand_vec(&mut rng, hdim),
        };
        let cot_h = rand_vec(&mut rng, hdim);
        let cot_c = rand_vec(&mut rng, hdim);
        let loss = |p: &LstmParams, x: &Array1<f64>, prev: &LstmState| {
            let (st, _) = p.forward(&x.view(), prev);
            cot_h.dot(&st.h) + cot_c.dot(&st.c)
        };
        let (_, cache) = p.forward(&x.view(), &prev);
        let mut grads = LstmParams::zeros(d, hdim);
        let (dx, dh, dc) = p.backward(&cache, &cot_h.view(), &cot_c.view(), &mut grads);

        let check = |ana: f64, num: f64, what: &str| {
            let denom = ana.abs().max(num.abs()).max(1e-5);
            assert!((ana - num).abs() / denom < 1e-6, "{what}: {ana} vs {num}");
        };
        let h = 1e-6;
        // Every parameter tensor, a few coordinates each.
        macro_rules! probe_mat {
            ($field:ident) => {
                for idx in [(0usize, 0usize), (1, 1), (hdim - 1, 0)] {
                    if idx.0 < p.$field.shape()[0] && idx.1 < p.$field.shape()[1] {
                        let mut pp = p.clone();
                        let mut pm = p.clone();
                        pp.$field[idx] += h;
                        pm.$field[idx] -= h;
                        let num = (loss(&pp, &x, &prev) - loss(&pm, &x, &prev)) / (2.0 * h);
                        check(grads.$field[idx], num, stringify!($field));
                    }
                }
            };
        }
        macro_rules! probe_vec {
            ($field:ident) => {
                for i in 0..hdim {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    pp.$field[i] += h;
                    pm.$field[i] -= h;
                    let num = (loss(&pp, &x, &prev) - loss(&pm, &x, &prev)) / (2.0 * h);
                    check(grads.$field[i], num, stringify!($field));
                }
            };
        }
        probe_mat!(wi);
        probe_mat!(ui);
        probe_mat!(wf);
        probe_mat!(uf);
        probe_mat!(wo);
        probe_mat!(uo);
        probe_mat!(wc);
        probe_mat!(uc);
        probe_vec!(bi);
        probe_vec!(bf);
        probe_vec!(bo);
        probe_vec!(bc);
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let num = (loss(&p, &xp, &prev) - loss(&p, &xm, &prev)) / (2.0 * h);
            check(dx[i], num, "x");
        }
        for i in 0..hdim {
            let mut pp = prev.clone();
            let mut pm = prev.clone();
            pp.h[i] += h;
            pm.h[i] -= h;
            let num = (loss(&p, &x, &pp) - loss(&p, &x, &pm)) / (2.0 * h);
            check(dh[i], num, "h_prev");
            let mut pp = prev.clone();
            let mut pm = prev.clone();
            pp.c[i] += h;
            pm.c[i] -= h;
            let num = (loss(&p, &x, &pp) - loss(&p, &x, &pm)) / (2.0 * h);
            check(dc[i], num, "c_prev");
        }
    }

    #[test]
    fn backward_matches_finite_differences_20_step_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (d, hdim, steps) = (2usize, 3usize, 20usize);
        let p = rand_params(&mut rng, d, hdim);
        let xs: Vec<Array1<f64>> = (0..steps).map(|_| rand_vec(&mut rng, d)).collect();
        let cot: Vec<Array1<f64>> = (0..steps).map(|_| rand_vec(&mut rng, hdim)).collect();

        let loss = |p: &LstmParams| {
            let mut st = LstmState::zeros(hdim);
            let mut l = 0.0;
            for (x, c) in xs.iter().zip(&cot) {
                let (next, _) = p.forward(&x.view(), &st);
                l += c.dot(&next.h);
                st = next;
            }
            l
        };

        // Full unroll: forward storing caches, then backward through time.
        let mut st = LstmState::zeros(hdim);
        let mut caches = Vec::with_capacity(steps);
        for x in &xs {
            let (next, cache) = p.forward(&x.view(), &st);
            caches.push(cache);
            st = next;
        }
        let mut grads = LstmParams::zeros(d, hdim);
        let mut dh = Array1::<f64>::zeros(hdim);
        let mut dc = Array1::<f64>::zeros(hdim);
        for t in (0..steps).rev() {
            dh += &cot[t];
            let (_, dh_prev, dc_prev) = p.backward(&caches[t], &dh.view(), &dc.view(), &mut grads);
            dh = dh_prev;
            dc = dc_prev;
        }

        let h = 1e-6;
        let mut rng2 = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..30 {
            // Random coordinate among the matrices.
            let which = rng2.gen_range(0..4);
            let (r, cidx) = (rng2.gen_range(0..hdim), rng2.gen_range(0..d));
            let (ana, mut pp, mut pm) = match which {
                0 => (grads.wi[[r, cidx]], p.clone(), p.clone()),
                1 => (grads.wf[[r, cidx]], p.clone(), p.clone()),
                2 => (grads.wo[[r, cidx]], p.clone(), p.clone()),
                _ => (grads.wc[[r, cidx]], p.clone(), p.clone()),
            };
            match which {
                0 => {
                    pp.wi[[r, cidx]] += h;
                    pm.wi[[r, cidx]] -= h;
                }
                1 => {
                    pp.wf[[r, cidx]] += h;
                    pm.wf[[r, cidx]] -= h;
                }
                2 => {
                    pp.wo[[r, cidx]] += h;
                    pm.wo[[r, cidx]] -= h;
                }
                _ => {
                    pp.wc[[r, cidx]] += h;
                    pm.wc[[r, cidx]] -= h;
                }
            }
            let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let denom = ana.abs().max(num.abs()).max(1e-5);
            assert!((ana - num).abs() / denom < 1e-5, "{ana} vs {num}");
        }
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let p = rand_params(&mut rng, 4, 6);
        let p32 = p.cast::<f32>();
        let x = rand_vec(&mut rng, 4);
        let x32 = x.mapv(|v| v as f32);
        let (st, _) = p.forward(&x.view(), &LstmState::zeros(6));
        let (st32, _) = p32.forward(&x32.view(), &LstmState::<f32>::zeros(6));
        for i in 0..6 {
            assert!((st.h[i] - st32.h[i] as f64).abs() < 1e-5);
        }
    }
}

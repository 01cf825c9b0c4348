//! Finite-difference gradient checking over any [`ParamSet`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamSet;
use crate::{Error, Result};

/// Outcome of probing a gradient against central differences.
#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub n_probes: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl ProbeReport {
    pub fn summary(&self) -> String {
        format!(
            "probes {}  max_rel {:.3e}  mean_rel {:.3e}  worst {}[{}] analytic {:.6e} numeric {:.6e}",
            self.n_probes,
            self.max_rel,
            self.mean_rel,
            self.worst_tensor,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

/// Compare precomputed analytic gradients against central finite differences
/// of `loss_fn` on `n_probes` randomly chosen parameter coordinates.
///
/// Probe step is `1e-6 * max(1, |theta|)`; relative error per probe is
/// `|a-n| / max(|a|, |n|, 1e-5)`. Parameters are restored bit-exactly after
/// each probe.
pub fn gradcheck<P: ParamSet>(
    params: &mut P,
    analytic: &P,
    mut loss_fn: impl FnMut(&P) -> Result<f64>,
    n_probes: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("no parameters to probe".into()));
    }
    {
        let a = analytic.tensors();
        if a.len() != sizes.len() || a.iter().zip(&sizes).any(|((_, t), &s)| t.len() != s) {
            return Err(Error::Invalid("analytic gradient shape mismatch".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = (String::new(), 0usize, 0.0f64, 0.0f64);
    for _ in 0..n_probes {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let theta = params.tensors()[ti].1.at(flat);
        let step = 1e-6 * theta.abs().max(1.0);

        set_coord(params, ti, flat, theta + step);
        let lp = loss_fn(params)?;
        set_coord(params, ti, flat, theta - step);
        let lm = loss_fn(params)?;
        set_coord(params, ti, flat, theta);

        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic.tensors()[ti].1.at(flat);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = (names[ti].clone(), flat, a, numeric);
        }
    }
    Ok(ProbeReport {
        n_probes,
        max_rel,
        mean_rel: sum_rel / n_probes as f64,
        worst_tensor: worst.0,
        worst_index: worst.1,
        worst_analytic: worst.2,
        worst_numeric: worst.3,
    })
}

fn set_coord<P: ParamSet>(params: &mut P, ti: usize, flat: usize, v: f64) {
    let mut t = params.tensors_mut();
    t[ti].1.set(flat, v);
}

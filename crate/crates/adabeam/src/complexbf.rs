//! Frequency-domain filter-and-sum beamforming over real/imag-packed
//! tensors, plus the delay-and-sum closed form used as baseline and as
//! pretraining target.
//!
//! The training stack is real-valued, so complex multiply-accumulates are
//! expanded into real arithmetic:
//!
//! ```text
//! Re(xhat_f) = sum_m Re(x)Re(g) - Im(x)Im(g)
//! Im(xhat_f) = sum_m Re(x)Im(g) + Im(x)Re(g)
//! ```
//!
//! and gradients treat real and imaginary parts as independent real variables.
//! Channel reduction order is fixed (ascending m) so results are bit-stable.
//!
//! Packed layouts, fixed once:
//! - input frame: for m = 0..M, block m is `[Re(x_{t,:,m}) ; Im(x_{t,:,m})]`,
//!   total length 2FM;
//! - filter frame: per channel `[Re(g_{t,:,m}) ; Im(g_{t,:,m})]`, length 2F,
//!   stacked as an M x 2F matrix.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use num_complex::Complex;
use num_complex::Complex64;

use crate::signal::MultichannelSpectrogram;
use crate::{Error, Real, Result};

/// Time-variant complex filter coefficients, `T x F x M`.
#[derive(Clone, Debug)]
pub struct FilterSequence {
    pub g: Array3<Complex64>,
}

impl FilterSequence {
    pub fn n_frames(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.g.shape()[1]
    }

    pub fn n_channels(&self) -> usize {
        self.g.shape()[2]
    }

    /// Mean over t >= 1 of the Frobenius norm of `g_t - g_{t-1}`, a scalar
    /// measure of how much the filters move over time.
    pub fn mean_adjacent_delta(&self) -> f64 {
        let t_total = self.n_frames();
        if t_total < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for t in 1..t_total {
            let mut sq = 0.0;
            for f in 0..self.n_bins() {
                for m in 0..self.n_channels() {
                    sq += (self.g[[t, f, m]] - self.g[[t - 1, f, m]]).norm_sqr();
                }
            }
            acc += sq.sqrt();
        }
        acc / (t_total - 1) as f64
    }
}

/// One STFT frame packed for network input: channel-blocked, real block then
/// imag block per channel, length `2FM`.
#[derive(Clone, Debug)]
pub struct PackedInputFrame {
    pub v: Array1<f64>,
    pub n_bins: usize,
    pub n_channels: usize,
}

/// One beamformed STFT frame, `F` complex bins.
#[derive(Clone, Debug)]
pub struct BeamformedFrame {
    pub xhat: Array1<Complex64>,
}

/// Pack an `F x M` complex slice into the channel-blocked real layout.
pub fn pack_slice<F: Real>(slice: &ArrayView2<Complex<F>>) -> Array1<F> {
    let (n_bins, n_ch) = (slice.shape()[0], slice.shape()[1]);
    let mut v = Array1::<F>::zeros(2 * n_bins * n_ch);
    for m in 0..n_ch {
        let off = m * 2 * n_bins;
        for f in 0..n_bins {
            v[off + f] = slice[[f, m]].re;
            v[off + n_bins + f] = slice[[f, m]].im;
        }
    }
    v
}

/// Pack frame `t` of a spectrogram (0-indexed).
pub fn pack_frame(spec: &MultichannelSpectrogram, t: usize) -> Result<PackedInputFrame> {
    if t >= spec.n_frames() {
        return Err(Error::Invalid(format!(
            "frame index {t} out of range for {} frames",
            spec.n_frames()
        )));
    }
    let slice = spec.data.index_axis(Axis(0), t);
    Ok(PackedInputFrame {
        v: pack_slice(&slice),
        n_bins: spec.n_bins(),
        n_channels: spec.n_channels(),
    })
}

/// Inverse of [`pack_frame`]: recover the `F x M` complex slice.
pub fn unpack_frame(p: &PackedInputFrame) -> Array2<Complex64> {
    let (n_bins, n_ch) = (p.n_bins, p.n_channels);
    let mut out = Array2::<Complex64>::zeros((n_bins, n_ch));
    for m in 0..n_ch {
        let off = m * 2 * n_bins;
        for f in 0..n_bins {
            out[[f, m]] = Complex64::new(p.v[off + f], p.v[off + n_bins + f]);
        }
    }
    out
}

/// Pack an `F x M` filter slice into the `M x 2F` per-channel layout the filter
/// heads emit.
pub fn pack_filters(g_t: &ArrayView2<Complex64>) -> Array2<f64> {
    let (n_bins, n_ch) = (g_t.shape()[0], g_t.shape()[1]);
    let mut u = Array2::<f64>::zeros((n_ch, 2 * n_bins));
    for m in 0..n_ch {
        for f in 0..n_bins {
            u[[m, f]] = g_t[[f, m]].re;
            u[[m, n_bins + f]] = g_t[[f, m]].im;
        }
    }
    u
}

/// Inverse of [`pack_filters`].
pub fn unpack_filters(u: &ArrayView2<f64>) -> Array2<Complex64> {
    let (n_ch, two_f) = (u.shape()[0], u.shape()[1]);
    let n_bins = two_f / 2;
    let mut g = Array2::<Complex64>::zeros((n_bins, n_ch));
    for m in 0..n_ch {
        for f in 0..n_bins {
            g[[f, m]] = Complex64::new(u[[m, f]], u[[m, n_bins + f]]);
        }
    }
    g
}

/// Filter-and-sum one packed frame: `x` is the 2FM input layout, `g` the
/// M x 2F filter layout. Returns `(Re(xhat), Im(xhat))`, each of length F.
///
/// This is the expansion above computed entirely in real arithmetic; it is
/// the only multiply-accumulate path, shared by the static and adaptive
/// entry points.
pub fn beamform_packed<F: Real>(x: &ArrayView1<F>, g: &ArrayView2<F>) -> (Array1<F>, Array1<F>) {
    let n_ch = g.shape()[0];
    let n_bins = g.shape()[1] / 2;
    assert_eq!(g.shape()[1], 2 * n_bins);
    assert_eq!(x.len(), 2 * n_bins * n_ch, "packed input length mismatch");
    let mut re = Array1::<F>::zeros(n_bins);
    let mut im = Array1::<F>::zeros(n_bins);
    for m in 0..n_ch {
        let off = m * 2 * n_bins;
        for f in 0..n_bins {
            let xr = x[off + f];
            let xi = x[off + n_bins + f];
            let gr = g[[m, f]];
            let gi = g[[m, n_bins + f]];
            re[f] = re[f] + xr * gr - xi * gi;
            im[f] = im[f] + xr * gi + xi * gr;
        }
    }
    (re, im)
}

/// Gradient of [`beamform_packed`] with respect to both operands.
///
/// `d_re`/`d_im` are the loss gradients at the output bins; returns
/// `(dL/dx, dL/dg)` in the same packed layouts as the forward inputs.
pub fn beamform_packed_backward(
    d_re: &ArrayView1<f64>,
    d_im: &ArrayView1<f64>,
    x: &ArrayView1<f64>,
    g: &ArrayView2<f64>,
) -> (Array1<f64>, Array2<f64>) {
    let n_ch = g.shape()[0];
    let n_bins = g.shape()[1] / 2;
    let mut dx = Array1::<f64>::zeros(x.len());
    let mut dg = Array2::<f64>::zeros((n_ch, 2 * n_bins));
    for m in 0..n_ch {
        let off = m * 2 * n_bins;
        for f in 0..n_bins {
            let (dre, dim) = (d_re[f], d_im[f]);
            let xr = x[off + f];
            let xi = x[off + n_bins + f];
            let gr = g[[m, f]];
            let gi = g[[m, n_bins + f]];
            dx[off + f] = dre * gr + dim * gi;
            dx[off + n_bins + f] = -dre * gi + dim * gr;
            dg[[m, f]] = dre * xr + dim * xi;
            dg[[m, n_bins + f]] = -dre * xi + dim * xr;
        }
    }
    (dx, dg)
}

fn check_shapes(n_bins: usize, n_ch: usize, spec: &MultichannelSpectrogram) -> Result<()> {
    if n_bins != spec.n_bins() || n_ch != spec.n_channels() {
        return Err(Error::Invalid(format!(
            "filter shape {n_bins}x{n_ch} does not match spectrogram {}x{}",
            spec.n_bins(),
            spec.n_channels()
        )));
    }
    Ok(())
}

/// Apply one time-invariant filter `g` (F x M) to frame `t`.
pub fn filter_and_sum_static(
    g: &ArrayView2<Complex64>,
    spec: &MultichannelSpectrogram,
    t: usize,
) -> Result<BeamformedFrame> {
    check_shapes(g.shape()[0], g.shape()[1], spec)?;
    let x = pack_frame(spec, t)?;
    let gp = pack_filters(g);
    let (re, im) = beamform_packed(&x.v.view(), &gp.view());
    Ok(BeamformedFrame {
        xhat: Array1::from_iter(re.iter().zip(im.iter()).map(|(&r, &i)| Complex64::new(r, i))),
    })
}

/// Apply a time-variant filter sequence frame by frame.
pub fn filter_and_sum_adaptive(
    g: &FilterSequence,
    spec: &MultichannelSpectrogram,
) -> Result<Vec<BeamformedFrame>> {
    if g.n_frames() != spec.n_frames() {
        return Err(Error::Invalid(format!(
            "filter sequence has {} frames, spectrogram {}",
            g.n_frames(),
            spec.n_frames()
        )));
    }
    check_shapes(g.n_bins(), g.n_channels(), spec)?;
    (0..spec.n_frames())
        .map(|t| {
            let slice = g.g.index_axis(Axis(0), t);
            filter_and_sum_static(&slice, spec, t)
        })
        .collect()
}

/// Gradients of the adaptive filter-and-sum with respect to the filters and
/// the input spectrogram.
///
/// Gradients over complex quantities are stored as `Complex64` with the real
/// part holding `dL/dRe(.)` and the imaginary part `dL/dIm(.)`; `d_xhat` uses
/// the same encoding for the output cotangent.
pub fn filter_and_sum_backward(
    d_xhat: &Array2<Complex64>,
    g: &FilterSequence,
    spec: &MultichannelSpectrogram,
) -> (Array3<Complex64>, Array3<Complex64>) {
    let (t_total, n_bins, n_ch) = (g.n_frames(), g.n_bins(), g.n_channels());
    assert_eq!(d_xhat.shape(), &[t_total, n_bins]);
    assert_eq!(spec.data.shape(), g.g.shape());
    let mut dg = Array3::<Complex64>::zeros((t_total, n_bins, n_ch));
    let mut dx = Array3::<Complex64>::zeros((t_total, n_bins, n_ch));
    for t in 0..t_total {
        for f in 0..n_bins {
            let dre = d_xhat[[t, f]].re;
            let dim = d_xhat[[t, f]].im;
            for m in 0..n_ch {
                let x = spec.data[[t, f, m]];
                let gv = g.g[[t, f, m]];
                dg[[t, f, m]] = Complex64::new(dre * x.re + dim * x.im, -dre * x.im + dim * x.re);
                dx[[t, f, m]] =
                    Complex64::new(dre * gv.re + dim * gv.im, -dre * gv.im + dim * gv.re);
            }
        }
    }
    (dg, dx)
}

/// Delay-and-sum filters for per-frame, per-channel alignment delays in
/// seconds: `g_{t,f,m} = (1/M) exp(-i 2 pi f_hz(f) tau_{t,m})` with
/// `f_hz(f) = f * sample_rate / fft_size` over the retained bins.
///
/// A positive delay postpones the channel; applying these filters time-aligns
/// the channels and averages them.
pub fn das_filters(
    delays: &Array2<f64>,
    n_bins: usize,
    fft_size: usize,
    sample_rate: u32,
) -> Result<FilterSequence> {
    let (t_total, n_ch) = (delays.shape()[0], delays.shape()[1]);
    for &tau in delays.iter() {
        if (tau * sample_rate as f64).abs() >= fft_size as f64 / 2.0 {
            return Err(Error::Invalid("delay too large for frame length".into()));
        }
    }
    let scale = 1.0 / n_ch as f64;
    let mut g = Array3::<Complex64>::zeros((t_total, n_bins, n_ch));
    for t in 0..t_total {
        for m in 0..n_ch {
            let tau = delays[[t, m]];
            for f in 0..n_bins {
                let f_hz = f as f64 * sample_rate as f64 / fft_size as f64;
                let phase = -2.0 * std::f64::consts::PI * f_hz * tau;
                g[[t, f, m]] = Complex64::new(scale * phase.cos(), scale * phase.sin());
            }
        }
    }
    Ok(FilterSequence { g })
}

//! Spectral convolution layer, in grid form and in continuous form.
//!
//! Grid form: `sigma(W u + IDFT(K . DFT_n(u)))` with a truncated DFT under
//! the convention `u_hat_j = (1/N) sum_m u_m exp(-2 pi i j m / N)` for modes
//! `0..n`, and an inverse that zero-pads and completes the spectrum
//! conjugate-symmetrically before transforming back.
//!
//! Continuous form: the same spectral term written as cosine/sine sums over
//! the Fourier positional encoding, evaluable at arbitrary `y in [0,1)`.
//! Mode 0 carries weight 1 and modes `1..n` weight 2, which is exactly what
//! the conjugate completion produces; the two forms agree at the grid points
//! to rounding error, including the Nyquist mode when `n = N/2 + 1`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::fields::FourierEncoding;
use crate::operators::gno::Activation;
use crate::tensor::{Result, Rng, Scalar, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct FnoLayerSpec<T> {
    pub n_modes: usize,
    /// Complex `n x n` mode-mixing matrix, stored as a real/imag pair.
    pub k_re: Tensor<T>,
    pub k_im: Tensor<T>,
    /// Pointwise channel map, `d x d`.
    pub w: Tensor<T>,
    pub activation: Activation,
    pub grid_size: usize,
}

impl<T: Scalar> FnoLayerSpec<T> {
    pub fn new(
        n_modes: usize,
        k_re: Tensor<T>,
        k_im: Tensor<T>,
        w: Tensor<T>,
        activation: Activation,
        grid_size: usize,
    ) -> Result<Self> {
        if n_modes == 0 || n_modes > grid_size / 2 + 1 {
            return Err(TensorError::Invalid {
                context: "fno layer",
                message: format!(
                    "n_modes {n_modes} must lie in 1..={} for grid size {grid_size}",
                    grid_size / 2 + 1
                ),
            });
        }
        for (name, t) in [("k_re", &k_re), ("k_im", &k_im)] {
            if t.shape() != [n_modes, n_modes] {
                return Err(TensorError::ShapeMismatch {
                    context: "fno K must be n_modes x n_modes",
                    lhs: vec![n_modes, n_modes],
                    rhs: t.shape().to_vec(),
                });
            }
            if !t.is_all_finite() {
                return Err(TensorError::NonFinite { context: name });
            }
        }
        if w.rank() != 2 || w.shape()[0] != w.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                context: "fno W must be square d x d",
                lhs: w.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(FnoLayerSpec {
            n_modes,
            k_re,
            k_im,
            w,
            activation,
            grid_size,
        })
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Truncated forward DFT of one real channel: modes `0..n`, `1/N`
/// normalization.
pub fn dft_truncated(u: &[f64], n: usize) -> Vec<Complex<f64>> {
    let len = u.len();
    let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    buf.truncate(n);
    let scale = 1.0 / len as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
    buf
}

/// Inverse of the truncated transform on the grid: zero-pad to `n_grid`
/// slots, add the conjugate mirror of modes `1..n` (the Nyquist slot, when
/// hit, receives its own conjugate and keeps twice its real part), run a
/// full-length inverse DFT, and keep the real part.
pub fn idft_completed(coeffs: &[Complex<f64>], n_grid: usize) -> Vec<f64> {
    let mut full = vec![Complex::new(0.0, 0.0); n_grid];
    if !coeffs.is_empty() {
        full[0] = coeffs[0];
    }
    for (j, &c) in coeffs.iter().enumerate().skip(1) {
        full[j] += c;
        full[n_grid - j] += c.conj();
    }
    FftPlanner::new().plan_fft_inverse(n_grid).process(&mut full);
    full.into_iter().map(|v| v.re).collect()
}

fn channel_f64<T: Scalar>(u: &Tensor<T>, ch: usize) -> Vec<f64> {
    let d = u.shape()[1];
    u.data()
        .iter()
        .skip(ch)
        .step_by(d)
        .map(|v| v.to_f64())
        .collect()
}

fn apply_k<T: Scalar>(spec: &FnoLayerSpec<T>, u_hat: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = spec.n_modes;
    let mut out = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        let mut acc = Complex::new(0.0, 0.0);
        for l in 0..n {
            let k = Complex::new(
                spec.k_re.data()[j * n + l].to_f64(),
                spec.k_im.data()[j * n + l].to_f64(),
            );
            acc += k * u_hat[l];
        }
        out[j] = acc;
    }
    out
}

fn validate_input<T: Scalar>(spec: &FnoLayerSpec<T>, u: &Tensor<T>) -> Result<usize> {
    if u.rank() != 2 || u.shape()[0] != spec.grid_size || u.shape()[1] != spec.channels() {
        return Err(TensorError::ShapeMismatch {
            context: "fno input must be grid_size x channels",
            lhs: vec![spec.grid_size, spec.channels()],
            rhs: u.shape().to_vec(),
        });
    }
    Ok(u.shape()[1])
}

/// One layer on the periodic grid; input and output are `N x d`.
pub fn fno_layer_grid<T: Scalar>(spec: &FnoLayerSpec<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let d = validate_input(spec, u)?;
    let n_grid = spec.grid_size;
    let mut spectral = vec![0.0f64; n_grid * d];
    for ch in 0..d {
        let u_ch = channel_f64(u, ch);
        let u_hat = dft_truncated(&u_ch, spec.n_modes);
        let c = apply_k(spec, &u_hat);
        let s = idft_completed(&c, n_grid);
        for (m, &v) in s.iter().enumerate() {
            spectral[m * d + ch] = v;
        }
    }
    let mut out = vec![T::ZERO; n_grid * d];
    for m in 0..n_grid {
        let u_m = &u.data()[m * d..(m + 1) * d];
        for r in 0..d {
            let mut acc = spectral[m * d + r];
            for c in 0..d {
                acc += spec.w.data()[r * d + c].to_f64() * u_m[c].to_f64();
            }
            out[m * d + r] = T::from_f64(spec.activation.apply(acc));
        }
    }
    Ok(Tensor::from_parts(vec![n_grid, d], out))
}

/// The spectral term at an arbitrary query, as weighted cosine/sine sums over
/// the Fourier encoding: weight 1 on mode 0, weight 2 on modes `1..n`.
fn spectral_at(c: &[Complex<f64>], gamma: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, cj) in c.iter().enumerate() {
        let weight = if j == 0 { 1.0 } else { 2.0 };
        acc += weight * (cj.re * gamma[2 * j] - cj.im * gamma[2 * j + 1]);
    }
    acc
}

/// Band-limited (trigonometric) interpolation of one channel at `y`, from
/// its full spectrum. Reproduces the samples exactly at grid points.
fn trig_interpolate(full_hat: &[Complex<f64>], y: f64) -> f64 {
    let n_grid = full_hat.len();
    let half = n_grid / 2;
    let mut acc = full_hat[0].re;
    let limit = if n_grid % 2 == 0 { half } else { half + 1 };
    for j in 1..limit {
        let phase = 2.0 * std::f64::consts::PI * j as f64 * y;
        acc += 2.0 * (full_hat[j].re * phase.cos() - full_hat[j].im * phase.sin());
    }
    if n_grid % 2 == 0 {
        let phase = 2.0 * std::f64::consts::PI * half as f64 * y;
        acc += full_hat[half].re * phase.cos();
    }
    acc
}

/// The same layer evaluated at an arbitrary query `y` in `[0, 1)`. The local
/// bias term uses band-limited interpolation of `u`, which recovers `u(y)`
/// exactly on the grid.
pub fn fno_layer_continuous<T: Scalar>(
    spec: &FnoLayerSpec<T>,
    u: &Tensor<T>,
    y: f64,
) -> Result<Vec<T>> {
    let d = validate_input(spec, u)?;
    if !y.is_finite() {
        return Err(TensorError::NonFinite {
            context: "fno query",
        });
    }
    let enc = FourierEncoding::first_modes_1d(spec.n_modes);
    let gamma = enc.encode(&[y]);
    let mut out = Vec::with_capacity(d);
    let mut u_tilde = vec![0.0f64; d];
    let mut spectral = vec![0.0f64; d];
    for ch in 0..d {
        let u_ch = channel_f64(u, ch);
        let u_hat = dft_truncated(&u_ch, spec.n_modes);
        let c = apply_k(spec, &u_hat);
        spectral[ch] = spectral_at(&c, &gamma);
        let full = dft_truncated(&u_ch, spec.grid_size);
        u_tilde[ch] = trig_interpolate(&full, y);
    }
    for r in 0..d {
        let mut acc = spectral[r];
        for ci in 0..d {
            acc += spec.w.data()[r * d + ci].to_f64() * u_tilde[ci];
        }
        out.push(T::from_f64(spec.activation.apply(acc)));
    }
    Ok(out)
}

/// Random-instance agreement between the grid and continuous forms at all
/// grid points. Returns the maximum relative discrepancy across `trials`
/// instances (relative to the largest grid-path magnitude per instance).
pub fn check_equivalence(
    grid_size: usize,
    n_modes: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = 1 + rng.below(2);
        let u = Tensor::<f64>::randn(&[grid_size, d], &mut rng);
        let spec = FnoLayerSpec::new(
            n_modes,
            Tensor::randn(&[n_modes, n_modes], &mut rng),
            Tensor::randn(&[n_modes, n_modes], &mut rng),
            Tensor::randn(&[d, d], &mut rng),
            Activation::Gelu,
            grid_size,
        )?;
        let grid_out = fno_layer_grid(&spec, &u)?;
        let scale = grid_out
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1e-12);
        for m in 0..grid_size {
            let y = m as f64 / grid_size as f64;
            let cont = fno_layer_continuous(&spec, &u, y)?;
            for ch in 0..d {
                let diff = (cont[ch] - grid_out.data()[m * d + ch]).abs();
                worst = worst.max(diff / scale);
            }
        }
    }
    Ok(worst)
}

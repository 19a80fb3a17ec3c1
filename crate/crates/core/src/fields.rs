//! Positional encodings and the base-field/conditioning abstractions.
//!
//! Every operator model in this crate is a conditioned neural field: a base
//! field mapping query coordinates to outputs, modulated by a latent code
//! derived from the input function. This module holds the two positional
//! encodings those fields are built on — fixed Fourier features and the
//! trainable latent grid with Nadaraya-Watson interpolation — plus the trait
//! that pins the per-query independence contract.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// How a latent code modulates the base field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditioningKind {
    /// Uniformly across the query domain.
    Global,
    /// Query-dependently.
    Local,
    Both,
}

/// A base field plus its conditioning function.
///
/// The contract that makes this a well-defined field: `eval_query` may depend
/// on other queries only through the latent code, never through co-queried
/// points.
pub trait ConditionedField {
    type Latent;
    fn conditioning_kind(&self) -> ConditioningKind;
    /// Derive the latent code from the input function samples.
    fn encode(&self, u: &Tensor<f32>) -> Result<Self::Latent>;
    /// Evaluate the field at one query coordinate.
    fn eval_query(&self, latent: &Self::Latent, y: &[f64]) -> Result<Vec<f32>>;
}

// ── Fourier features ────────────────────────────────────────────────────

/// Fixed Fourier positional encoding: one `(cos, sin)` pair per wavenumber
/// vector, in wavenumber order.
#[derive(Clone, Debug)]
pub struct FourierEncoding {
    wavenumbers: Vec<Vec<i64>>,
}

impl FourierEncoding {
    pub fn new(wavenumbers: Vec<Vec<i64>>) -> Self {
        FourierEncoding { wavenumbers }
    }

    /// The first `n` one-dimensional modes `0..n`.
    pub fn first_modes_1d(n: usize) -> Self {
        FourierEncoding {
            wavenumbers: (0..n as i64).map(|k| vec![k]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        2 * self.wavenumbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavenumbers.is_empty()
    }

    /// `[cos(2pi<k_1,y>), sin(2pi<k_1,y>), cos(2pi<k_2,y>), ...]`
    pub fn encode(&self, y: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for k in &self.wavenumbers {
            assert_eq!(
                k.len(),
                y.len(),
                "query dim {} vs wavenumber dim {}",
                y.len(),
                k.len()
            );
            let phase: f64 = 2.0
                * std::f64::consts::PI
                * k.iter().zip(y).map(|(&ki, &yi)| ki as f64 * yi).sum::<f64>();
            out.push(phase.cos());
            out.push(phase.sin());
        }
        out
    }
}

/// Convenience wrapper matching the encoding's documented layout.
pub fn fourier_encode(y: &[f64], enc: &FourierEncoding) -> Vec<f64> {
    enc.encode(y)
}

// ── Latent grid ─────────────────────────────────────────────────────────

/// Uniform coordinates of `n` grid points spanning `[0, 1]` inclusive; a
/// single point sits at 0.
pub fn grid_coords(n: usize) -> Vec<f64> {
    assert!(n > 0, "empty grid axis");
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Nadaraya-Watson weights of a query against an `nx x ny` grid on `[0,1]^2`,
/// flattened row-major over `(i, j)`.
///
/// `w_ij = exp(-eps * |y - y_ij|^2) / sum exp(...)`, computed with
/// max-subtracted exponentials; with `eps = 1e5` the raw exponentials
/// underflow, the shifted form does not. Queries outside the domain are
/// clamped to the boundary.
pub fn interp_weights(nx: usize, ny: usize, eps: f64, y: &[f64; 2]) -> Result<Vec<f64>> {
    if !y[0].is_finite() || !y[1].is_finite() {
        return Err(TensorError::NonFinite {
            context: "grid_interpolate query",
        });
    }
    if eps < 0.0 {
        return Err(TensorError::Invalid {
            context: "grid_interpolate",
            message: format!("epsilon must be non-negative, got {eps}"),
        });
    }
    let qx = y[0].clamp(0.0, 1.0);
    let qy = y[1].clamp(0.0, 1.0);
    let xs = grid_coords(nx);
    let ys = grid_coords(ny);
    let mut logits = Vec::with_capacity(nx * ny);
    let mut max_logit = f64::NEG_INFINITY;
    for &cx in &xs {
        let dx = qx - cx;
        for &cy in &ys {
            let dy = qy - cy;
            let l = -eps * (dx * dx + dy * dy);
            if l > max_logit {
                max_logit = l;
            }
            logits.push(l);
        }
    }
    let mut denom = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max_logit).exp();
        denom += *l;
    }
    for l in logits.iter_mut() {
        *l /= denom;
    }
    Ok(logits)
}

/// Weight matrix for a batch of queries, shape `Q x (nx * ny)`. Rows follow
/// query order.
pub fn interp_weight_matrix<T: Scalar>(
    nx: usize,
    ny: usize,
    eps: f64,
    queries: &[[f64; 2]],
) -> Result<Tensor<T>> {
    let g = nx * ny;
    let mut data = Vec::with_capacity(queries.len() * g);
    for q in queries {
        let w = interp_weights(nx, ny, eps, q)?;
        data.extend(w.iter().map(|&v| T::from_f64(v)));
    }
    Ok(Tensor::from_parts(vec![queries.len(), g], data))
}

/// Trainable grid features over `[0,1]^2` with a locality parameter.
#[derive(Clone, Debug)]
pub struct LatentGrid<T> {
    nx: usize,
    ny: usize,
    channels: usize,
    features: Tensor<T>,
    epsilon: f64,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(nx: usize, ny: usize, features: Tensor<T>, epsilon: f64) -> Result<Self> {
        if features.rank() != 3 || features.shape()[0] != nx || features.shape()[1] != ny {
            return Err(TensorError::ShapeMismatch {
                context: "latent grid features must be nx x ny x c",
                lhs: vec![nx, ny],
                rhs: features.shape().to_vec(),
            });
        }
        if epsilon <= 0.0 {
            return Err(TensorError::Invalid {
                context: "latent grid",
                message: format!("epsilon must be positive, got {epsilon}"),
            });
        }
        if !features.is_all_finite() {
            return Err(TensorError::NonFinite {
                context: "latent grid features",
            });
        }
        let channels = features.shape()[2];
        Ok(LatentGrid {
            nx,
            ny,
            channels,
            features,
            epsilon,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    /// `x' = sum_ij w_ij x_ij` for one query.
    pub fn interpolate(&self, y: &[f64; 2]) -> Result<Vec<T>> {
        self.interpolate_with_eps(y, self.epsilon)
    }

    /// Interpolation with an explicit epsilon (0 gives the unweighted mean).
    pub fn interpolate_with_eps(&self, y: &[f64; 2], eps: f64) -> Result<Vec<T>> {
        let w = interp_weights(self.nx, self.ny, eps, y)?;
        let c = self.channels;
        let mut out = vec![0.0f64; c];
        for (node, &wi) in w.iter().enumerate() {
            let row = &self.features.data()[node * c..(node + 1) * c];
            for (o, v) in out.iter_mut().zip(row) {
                *o += wi * v.to_f64();
            }
        }
        Ok(out.into_iter().map(T::from_f64).collect())
    }
}

/// Single-query interpolation against a grid: the operation form of
/// [`LatentGrid::interpolate`].
pub fn grid_interpolate<T: Scalar>(y: &[f64; 2], grid: &LatentGrid<T>) -> Result<Vec<T>> {
    grid.interpolate(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Rng};

    #[test]
    fn fourier_encode_at_origin() {
        let enc = FourierEncoding::new(vec![vec![1, 0], vec![0, 2], vec![3, 3]]);
        let got = enc.encode(&[0.0, 0.0]);
        assert_eq!(got, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn fourier_encode_quarter_period() {
        // n=1, k=1, y=0.25: cos(pi/2) = 0, sin(pi/2) = 1.
        let enc = FourierEncoding::new(vec![vec![1]]);
        let got = enc.encode(&[0.25]);
        assert!(got[0].abs() < 1e-7);
        assert!((got[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn fourier_encode_periodic_for_integer_wavenumbers() {
        let enc = FourierEncoding::new(vec![vec![1], vec![4], vec![9]]);
        for &y in &[0.0, 0.17, 0.5, 0.93] {
            let a = enc.encode(&[y]);
            let b = enc.encode(&[y + 1.0]);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-9, "{p} vs {q} at y={y}");
            }
        }
    }

    #[test]
    fn fourier_entries_bounded() {
        let enc = FourierEncoding::new(vec![vec![2, -5], vec![7, 11]]);
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let y = [rng.uniform() * 4.0 - 2.0, rng.uniform() * 4.0 - 2.0];
            for v in enc.encode(&y) {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    fn random_grid(nx: usize, ny: usize, c: usize, eps: f64, seed: u64) -> LatentGrid<f64> {
        let mut rng = Rng::new(seed);
        let features = Tensor::<f64>::randn(&[nx, ny, c], &mut rng);
        LatentGrid::new(nx, ny, features, eps).unwrap()
    }

    #[test]
    fn constant_features_reproduce_constant() {
        let features = Tensor::<f64>::full(&[5, 7, 3], 2.5);
        let grid = LatentGrid::new(5, 7, features, 10.0).unwrap();
        for &y in &[[0.0, 0.0], [0.31, 0.77], [1.0, 0.5]] {
            for v in grid.interpolate(&y).unwrap() {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_eps_gives_unweighted_mean() {
        let grid = random_grid(4, 6, 2, 1.0, 3);
        let c = grid.channels();
        let n = grid.nx() * grid.ny();
        let mut mean = vec![0.0f64; c];
        for node in 0..n {
            for ch in 0..c {
                mean[ch] += grid.features().data()[node * c + ch] / n as f64;
            }
        }
        let got = grid.interpolate_with_eps(&[0.42, 0.13], 0.0).unwrap();
        for (g, m) in got.iter().zip(&mean) {
            assert!((g - m).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_normalized_and_nonnegative() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let nx = 2 + rng.below(40);
            let ny = 2 + rng.below(40);
            let y = [rng.uniform() * 1.4 - 0.2, rng.uniform() * 1.4 - 0.2];
            let w = interp_weights(nx, ny, 1e5, &y).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn on_node_locality_on_coarse_grids() {
        // Spacing 1/47 and 1/63: the nearest off-node weight is
        // exp(-1e5/63^2) ~ 1e-11, so the node feature comes back to 1e-6.
        let grid = random_grid(48, 64, 4, 1e5, 7);
        let xs = grid_coords(48);
        let ys = grid_coords(64);
        for &(i, j) in &[(0usize, 0usize), (20, 30), (47, 63), (5, 62)] {
            let got = grid.interpolate(&[xs[i], ys[j]]).unwrap();
            let node = i * 64 + j;
            let want = &grid.features().data()[node * 4..node * 4 + 4];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-6, "node ({i},{j}): {g} vs {w}");
            }
        }
    }

    #[test]
    fn on_node_interpolation_is_soft_at_fine_spacing() {
        // At spacing 1/200 the nearest off-node weight is exp(-2.5) ~ 0.082,
        // so on-node queries blend in neighbors. Verify the measured blend
        // against a direct weight-evaluation oracle.
        let grid = random_grid(201, 1, 1, 1e5, 11);
        let xs = grid_coords(201);
        let node = 100usize;
        let got = grid.interpolate(&[xs[node], 0.0]).unwrap()[0];

        // Oracle: raw exponentials in f64, no shift, brute normalization.
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &cx) in xs.iter().enumerate() {
            let d = xs[node] - cx;
            let w = (-1e5 * d * d).exp();
            num += w * grid.features().data()[i];
            den += w;
        }
        let oracle = num / den;
        assert!((got - oracle).abs() < 1e-12);
        // And the blend is genuinely soft here: the result is not the node
        // feature to 1e-6.
        let node_feature = grid.features().data()[node];
        assert!(
            (got - node_feature).abs() > 1e-4,
            "unexpectedly hard interpolation"
        );
    }

    #[test]
    fn monotone_locality_in_the_query_distance() {
        // Two queries on the x-axis of a symmetric 3x1 grid: the closer one
        // takes more weight on the center node.
        let w_near = interp_weights(3, 1, 50.0, &[0.52, 0.0]).unwrap();
        let w_far = interp_weights(3, 1, 50.0, &[0.60, 0.0]).unwrap();
        assert!(w_near[1] > w_far[1]);
    }

    #[test]
    fn queries_clamp_to_domain() {
        let grid = random_grid(6, 6, 2, 1e3, 13);
        let inside = grid.interpolate(&[1.0, 0.5]).unwrap();
        let outside = grid.interpolate(&[1.7, 0.5]).unwrap();
        for (a, b) in inside.iter().zip(&outside) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn non_finite_query_errors() {
        let grid = random_grid(4, 4, 1, 1.0, 17);
        let err = grid.interpolate(&[f64::NAN, 0.2]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn gradient_wrt_features_equals_weights() {
        // x' = W f is linear in the features, so the Jacobian row for each
        // channel is the weight vector. Check through the tape against
        // finite differences, then assert the identity directly.
        let nx = 5;
        let ny = 4;
        let c = 3;
        let mut rng = Rng::new(19);
        let features = Tensor::<f64>::randn(&[nx * ny, c], &mut rng);
        let y = [0.37, 0.81];
        let w = interp_weight_matrix::<f64>(nx, ny, 100.0, &[y]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let wv = tape.constant(w.clone());
                let x = tape.matmul(wv, vars[0])?;
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            &[features.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);

        let weights = interp_weights(nx, ny, 100.0, &y).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let wv = tape.constant(w);
        let fv = tape.leaf(features);
        let x = tape.matmul(wv, fv).unwrap();
        // Select channel 0 by summing against a mask.
        let mask = tape.constant(Tensor::from_parts(
            vec![1, c],
            (0..c).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        ));
        let masked = tape.mul(x, mask).unwrap();
        let s = tape.sum_all(masked);
        let grads = tape.backward(s).unwrap();
        let g = grads.wrt(fv).unwrap();
        for (node, &wn) in weights.iter().enumerate() {
            assert!((g.data()[node * c] - wn).abs() < 1e-12);
        }
    }
}

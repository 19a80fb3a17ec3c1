//! Graph neural operator layer: local message passing over a node
//! neighborhood, with a position-dependent linear skip term.
//!
//! `s(y) = sigma( W u(y) + (1/|N(y)|) sum_{x in N(y)} kappa(x, y, u(x)) u(x) )`
//!
//! The kernel maps `(x, y, u(x))` to a flattened `d_s x d_u` matrix that is
//! reshaped per message. The layer is evaluated directly (no tape); its
//! verification is oracle equality, not training.

use crate::tensor::{gelu_scalar, Result, Rng, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => gelu_scalar(x),
        }
    }
}

/// Message kernel: `(x, y, u(x)) -> flattened d_s x d_u matrix`.
pub trait MessageKernel<T: Scalar> {
    fn eval(&self, x: &[f64], y: &[f64], u_x: &[T]) -> Vec<T>;
}

/// Constant kernel, handy for closed-form cases.
pub struct ConstKernel<T>(pub Tensor<T>);

impl<T: Scalar> MessageKernel<T> for ConstKernel<T> {
    fn eval(&self, _x: &[f64], _y: &[f64], _u_x: &[T]) -> Vec<T> {
        self.0.data().to_vec()
    }
}

/// Small self-contained MLP over `(x, y, u(x))`, GELU between layers.
pub struct MlpKernel<T> {
    widths: Vec<usize>,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Scalar> MlpKernel<T> {
    pub fn random(widths: Vec<usize>, rng: &mut Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let std = 1.0 / (w[0] as f64).sqrt();
            weights.push(Tensor::from_fn(&[w[0], w[1]], |_| {
                T::from_f64(rng.normal() * std)
            }));
            biases.push(Tensor::zeros(&[w[1]]));
        }
        MlpKernel {
            widths,
            weights,
            biases,
        }
    }
}

impl<T: Scalar> MessageKernel<T> for MlpKernel<T> {
    fn eval(&self, x: &[f64], y: &[f64], u_x: &[T]) -> Vec<T> {
        let mut h: Vec<f64> = x
            .iter()
            .chain(y.iter())
            .copied()
            .chain(u_x.iter().map(|v| v.to_f64()))
            .collect();
        assert_eq!(h.len(), self.widths[0], "kernel input width");
        let n = self.weights.len();
        for l in 0..n {
            let (din, dout) = (self.widths[l], self.widths[l + 1]);
            let w = self.weights[l].data();
            let b = self.biases[l].data();
            let mut next = vec![0.0f64; dout];
            for j in 0..dout {
                let mut acc = b[j].to_f64();
                for i in 0..din {
                    acc += h[i] * w[i * dout + j].to_f64();
                }
                next[j] = if l < n - 1 { gelu_scalar(acc) } else { acc };
            }
            h = next;
        }
        h.into_iter().map(T::from_f64).collect()
    }
}

/// One GNO layer over a fixed node set.
pub struct GnoLayerSpec<'a, T: Scalar> {
    /// `d_s x d_u` skip weight.
    pub w: Tensor<T>,
    pub kernel: &'a dyn MessageKernel<T>,
    /// Neighborhood cutoff in domain units (inclusive).
    pub radius: f64,
    pub activation: Activation,
}

/// Evaluate the layer at grid node `query` of `nodes`. `values` holds
/// `u(x)` per node, shape `N x d_u`. The neighborhood always contains the
/// query node itself, so it is never empty.
pub fn gno_layer<T: Scalar>(
    spec: &GnoLayerSpec<T>,
    nodes: &[Vec<f64>],
    values: &Tensor<T>,
    query: usize,
) -> Result<Vec<T>> {
    let n_nodes = nodes.len();
    if values.rank() != 2 || values.shape()[0] != n_nodes {
        return Err(TensorError::ShapeMismatch {
            context: "gno node values must be N x d_u",
            lhs: vec![n_nodes],
            rhs: values.shape().to_vec(),
        });
    }
    let d_u = values.shape()[1];
    if spec.w.rank() != 2 || spec.w.shape()[1] != d_u {
        return Err(TensorError::ShapeMismatch {
            context: "gno skip weight must be d_s x d_u",
            lhs: spec.w.shape().to_vec(),
            rhs: vec![d_u],
        });
    }
    let d_s = spec.w.shape()[0];
    if query >= n_nodes {
        return Err(TensorError::Invalid {
            context: "gno_layer",
            message: format!("query node {query} out of {n_nodes}"),
        });
    }
    let yq = &nodes[query];

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };

    let mut message = vec![0.0f64; d_s];
    let mut count = 0usize;
    for (xi, x) in nodes.iter().enumerate() {
        if dist(x, yq) > spec.radius {
            continue;
        }
        count += 1;
        let u_x = &values.data()[xi * d_u..(xi + 1) * d_u];
        let kmat = spec.kernel.eval(x, yq, u_x);
        debug_assert_eq!(kmat.len(), d_s * d_u, "kernel output is d_s * d_u");
        for r in 0..d_s {
            let mut acc = 0.0f64;
            for c in 0..d_u {
                acc += kmat[r * d_u + c].to_f64() * u_x[c].to_f64();
            }
            message[r] += acc;
        }
    }
    // y is in N(y) by construction.
    debug_assert!(count > 0);

    let u_y = &values.data()[query * d_u..(query + 1) * d_u];
    let mut out = Vec::with_capacity(d_s);
    for r in 0..d_s {
        let mut skip = 0.0f64;
        for c in 0..d_u {
            skip += spec.w.data()[r * d_u + c].to_f64() * u_y[c].to_f64();
        }
        out.push(T::from_f64(
            spec.activation.apply(skip + message[r] / count as f64),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_nodes(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 / n as f64]).collect()
    }

    #[test]
    fn zero_kernel_leaves_only_the_skip_term() {
        let nodes = line_nodes(8);
        let mut rng = Rng::new(81);
        let values = Tensor::<f64>::randn(&[8, 2], &mut rng);
        let w = Tensor::<f64>::randn(&[2, 2], &mut rng);
        let kernel = ConstKernel(Tensor::zeros(&[2 * 2]));
        let spec = GnoLayerSpec {
            w: w.clone(),
            kernel: &kernel,
            radius: 0.3,
            activation: Activation::Gelu,
        };
        let out = gno_layer(&spec, &nodes, &values, 3).unwrap();
        let u_y = &values.data()[3 * 2..4 * 2];
        for r in 0..2 {
            let want = Activation::Gelu
                .apply(w.data()[r * 2] * u_y[0] + w.data()[r * 2 + 1] * u_y[1]);
            assert!((out[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_and_kernel_collapse_to_closed_form() {
        // u constant and kappa constant C: message mean is C u, so the layer
        // is sigma(W u + C u).
        let nodes = line_nodes(10);
        let values = Tensor::<f64>::full(&[10, 2], 1.5);
        let mut rng = Rng::new(83);
        let w = Tensor::<f64>::randn(&[2, 2], &mut rng);
        let cmat = Tensor::<f64>::randn(&[4], &mut rng);
        let kernel = ConstKernel(cmat.clone());
        let spec = GnoLayerSpec {
            w: w.clone(),
            kernel: &kernel,
            radius: 0.25,
            activation: Activation::Identity,
        };
        let out = gno_layer(&spec, &nodes, &values, 5).unwrap();
        for r in 0..2 {
            let want = (w.data()[r * 2] + w.data()[r * 2 + 1]) * 1.5
                + (cmat.data()[r * 2] + cmat.data()[r * 2 + 1]) * 1.5;
            assert!((out[r] - want).abs() < 1e-12, "{} vs {want}", out[r]);
        }
    }

    #[test]
    fn random_instance_matches_brute_force_oracle() {
        let nodes: Vec<Vec<f64>> = {
            let mut rng = Rng::new(87);
            (0..20)
                .map(|_| vec![rng.uniform(), rng.uniform()])
                .collect()
        };
        let mut rng = Rng::new(89);
        let d_u = 3;
        let d_s = 2;
        let values = Tensor::<f64>::randn(&[20, d_u], &mut rng);
        let w = Tensor::<f64>::randn(&[d_s, d_u], &mut rng);
        let kernel = MlpKernel::<f64>::random(vec![2 + 2 + d_u, 16, d_s * d_u], &mut rng);
        let spec = GnoLayerSpec {
            w: w.clone(),
            kernel: &kernel,
            radius: 0.5,
            activation: Activation::Gelu,
        };

        for query in [0usize, 7, 19] {
            let got = gno_layer(&spec, &nodes, &values, query).unwrap();

            // Brute-force sum, written independently of the implementation.
            let yq = &nodes[query];
            let mut neighborhood = Vec::new();
            for (i, x) in nodes.iter().enumerate() {
                let d2: f64 = x.iter().zip(yq).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2.sqrt() <= 0.5 {
                    neighborhood.push(i);
                }
            }
            let mut expect = vec![0.0f64; d_s];
            for &i in &neighborhood {
                let u_x = &values.data()[i * d_u..(i + 1) * d_u];
                let km = kernel.eval(&nodes[i], yq, u_x);
                for r in 0..d_s {
                    for c in 0..d_u {
                        expect[r] += km[r * d_u + c] * u_x[c] / neighborhood.len() as f64;
                    }
                }
            }
            let u_y = &values.data()[query * d_u..(query + 1) * d_u];
            for r in 0..d_s {
                for c in 0..d_u {
                    expect[r] += w.data()[r * d_u + c] * u_y[c];
                }
                expect[r] = gelu_scalar(expect[r]);
                assert!((got[r] - expect[r]).abs() < 1e-6, "{} vs {}", got[r], expect[r]);
            }
        }
    }
}

//! Dense multi-layer perceptron on the tape, with GELU between layers.

use crate::params::{init_dense, ParamStore, TapeParams};
use crate::tensor::{Result, Rng, Tape, Tensor, Var};

/// Layer widths including input and output, e.g. `[200, 512, 512, 512]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "zero-width layer");
        MlpSpec { widths }
    }

    /// `input -> hidden x n_hidden -> output`.
    pub fn with_hidden(input: usize, hidden: usize, n_hidden: usize, output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(n_hidden));
        widths.push(output);
        Self::new(widths)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Register weights under `{prefix}.l{i}.w` / `.b`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        for (i, w) in self.widths.windows(2).enumerate() {
            store.insert(format!("{prefix}.l{i}.w"), init_dense(rng, w[0], w[1]));
            store.insert(format!("{prefix}.l{i}.b"), Tensor::zeros(&[w[1]]));
        }
    }

    /// Forward over the last axis of `x` (`[.., input] -> [.., output]`);
    /// GELU after every layer but the last.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        // Fold leading axes into rows so the product is a plain 2-D matmul.
        let in_shape = tape.shape(x).to_vec();
        let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
        let mut h = tape.reshape(x, vec![rows, in_shape[in_shape.len() - 1]])?;
        let n = self.n_layers();
        for i in 0..n {
            let w = params.var(&format!("{prefix}.l{i}.w"));
            let b = params.var(&format!("{prefix}.l{i}.b"));
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if i + 1 < n {
                h = tape.gelu(h);
            }
        }
        let mut out_shape = in_shape[..in_shape.len() - 1].to_vec();
        out_shape.push(self.output_dim());
        tape.reshape(h, out_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;

    #[test]
    fn param_count_matches_layout() {
        let spec = MlpSpec::with_hidden(200, 512, 4, 512);
        // 200->512, 512->512 x3, 512->512
        assert_eq!(
            spec.param_count(),
            200 * 512 + 512 + 3 * (512 * 512 + 512) + 512 * 512 + 512
        );
    }

    #[test]
    fn forward_matches_hand_composition() {
        let mut rng = Rng::new(41);
        let spec = MlpSpec::new(vec![3, 4, 2]);
        let mut store = ParamStore::new();
        spec.init(&mut store, "m", &mut rng);

        let x = Tensor::<f32>::randn(&[5, 3], &mut rng);
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &store);
        let xv = tape.constant(x.clone());
        let out = spec.forward(&mut tape, &bound, "m", xv).unwrap();

        // Hand-rolled f64 composition.
        let w0 = store.get("m.l0.w").unwrap();
        let b0 = store.get("m.l0.b").unwrap();
        let w1 = store.get("m.l1.w").unwrap();
        let b1 = store.get("m.l1.b").unwrap();
        for r in 0..5 {
            let mut h = vec![0.0f64; 4];
            for j in 0..4 {
                let mut acc = b0.data()[j] as f64;
                for i in 0..3 {
                    acc += x.data()[r * 3 + i] as f64 * w0.data()[i * 4 + j] as f64;
                }
                h[j] = gelu_scalar(acc);
            }
            for j in 0..2 {
                let mut acc = b1.data()[j] as f64;
                for i in 0..4 {
                    acc += h[i] * w1.data()[i * 2 + j] as f64;
                }
                let got = tape.value(out).data()[r * 2 + j] as f64;
                assert!((got - acc).abs() < 1e-5, "row {r} col {j}: {got} vs {acc}");
            }
        }
    }
}

//! Nonlinear-decoder operator: the query is concatenated with a global
//! encoding of the input function and decoded by an MLP.

use crate::fields::{ConditionedField, ConditioningKind};
use crate::operators::mlp::MlpSpec;
use crate::params::{ParamStore, TapeParams};
use crate::tensor::{Result, Rng, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct NomadSpec {
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub query_dim: usize,
}

impl NomadSpec {
    pub fn new(encoder: MlpSpec, decoder: MlpSpec, query_dim: usize) -> Result<Self> {
        let latent = encoder.output_dim();
        if decoder.input_dim() != query_dim + latent {
            return Err(TensorError::ShapeMismatch {
                context: "nomad decoder input width must be query_dim + latent",
                lhs: vec![decoder.input_dim()],
                rhs: vec![query_dim, latent],
            });
        }
        Ok(NomadSpec {
            encoder,
            decoder,
            query_dim,
        })
    }

    /// Encoder and decoder with four hidden layers of 512, latent width 512.
    pub fn default_1d(input_dim: usize) -> Self {
        Self::new(
            MlpSpec::with_hidden(input_dim, 512, 4, 512),
            MlpSpec::with_hidden(1 + 512, 512, 4, 1),
            1,
        )
        .unwrap()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.encoder.init(store, "encoder", rng);
        self.decoder.init(store, "decoder", rng);
    }

    /// `u_flat`: `B x input_dim`, `queries`: `Q x query_dim`;
    /// output `B x Q x out`.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u_flat: Var,
        queries: Var,
    ) -> Result<Var> {
        let b = tape.shape(u_flat)[0];
        let q = tape.shape(queries)[0];
        let n = self.latent_dim();
        let z = self.encoder.forward(tape, params, "encoder", u_flat)?; // B x n
        let z = tape.reshape(z, vec![b, 1, n])?;
        let z = tape.broadcast(z, &[b, q, n])?;
        let y = tape.reshape(queries, vec![1, q, self.query_dim])?;
        let y = tape.broadcast(y, &[b, q, self.query_dim])?;
        let joint = tape.concat(&[y, z], 2)?;
        self.decoder.forward(tape, params, "decoder", joint)
    }
}

/// A spec paired with its weights, viewed as a globally conditioned field.
pub struct NomadModel {
    pub spec: NomadSpec,
    pub params: ParamStore,
}

impl ConditionedField for NomadModel {
    type Latent = Vec<f32>;

    fn conditioning_kind(&self) -> ConditioningKind {
        ConditioningKind::Global
    }

    fn encode(&self, u: &Tensor<f32>) -> Result<Self::Latent> {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &self.params);
        let flat = tape.constant(u.reshaped(vec![1, u.numel()])?);
        let z = self.spec.encoder.forward(&mut tape, &bound, "encoder", flat)?;
        Ok(tape.value(z).data().to_vec())
    }

    fn eval_query(&self, latent: &Self::Latent, y: &[f64]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &self.params);
        let mut joint: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        joint.extend_from_slice(latent);
        let len = joint.len();
        let x = tape.constant(Tensor::from_parts(vec![1, len], joint));
        let out = self.spec.decoder.forward(&mut tape, &bound, "decoder", x)?;
        Ok(tape.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;

    fn tiny_spec() -> NomadSpec {
        NomadSpec::new(
            MlpSpec::new(vec![6, 8, 3]),
            MlpSpec::new(vec![4, 8, 2]),
            1,
        )
        .unwrap()
    }

    #[test]
    fn decoder_width_is_validated() {
        let err = NomadSpec::new(MlpSpec::new(vec![6, 8, 3]), MlpSpec::new(vec![5, 8, 2]), 1);
        assert!(err.is_err());
    }

    #[test]
    fn identity_decoder_layer_reproduces_concat_pattern() {
        // Single identity decoder layer: output equals concat(y, z).
        let spec = NomadSpec::new(
            MlpSpec::new(vec![6, 2]),
            MlpSpec::new(vec![3, 3]),
            1,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(61);
        spec.init(&mut store, &mut rng);
        store.set(
            "decoder.l0.w",
            Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }),
        );
        store.set("decoder.l0.b", Tensor::zeros(&[3]));

        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &store);
        let u = tape.constant(Tensor::randn(&[1, 6], &mut rng));
        let q = tape.constant(Tensor::from_parts(vec![2, 1], vec![0.25, 0.75]));
        let out = spec.forward(&mut tape, &bound, u, q).unwrap();

        // Recover z independently.
        let z = {
            let mut t2 = Tape::new();
            let b2 = TapeParams::bind(&mut t2, &store);
            let u2 = t2.constant(tape.value(u).clone());
            let zv = spec.encoder.forward(&mut t2, &b2, "encoder", u2).unwrap();
            t2.value(zv).data().to_vec()
        };
        let got = tape.value(out).data();
        for (qi, &y) in [0.25f32, 0.75].iter().enumerate() {
            assert!((got[qi * 3] - y).abs() < 1e-6);
            assert!((got[qi * 3 + 1] - z[0]).abs() < 1e-6);
            assert!((got[qi * 3 + 2] - z[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_hand_composed_mlp_oracle() {
        let spec = tiny_spec();
        let mut rng = Rng::new(67);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut rng);
        let u = Tensor::<f32>::randn(&[1, 6], &mut rng);
        let y = 0.4f64;

        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &store);
        let uv = tape.constant(u.clone());
        let qv = tape.constant(Tensor::from_parts(vec![1, 1], vec![y as f32]));
        let out = spec.forward(&mut tape, &bound, uv, qv).unwrap();

        // Independent f64 evaluation of encoder then decoder.
        let mlp = |widths: &[usize], prefix: &str, x: &[f64]| -> Vec<f64> {
            let mut h = x.to_vec();
            for l in 0..widths.len() - 1 {
                let w = store.get(&format!("{prefix}.l{l}.w")).unwrap();
                let b = store.get(&format!("{prefix}.l{l}.b")).unwrap();
                let (din, dout) = (widths[l], widths[l + 1]);
                let mut next = vec![0.0f64; dout];
                for j in 0..dout {
                    let mut acc = b.data()[j] as f64;
                    for i in 0..din {
                        acc += h[i] * w.data()[i * dout + j] as f64;
                    }
                    next[j] = if l < widths.len() - 2 { gelu_scalar(acc) } else { acc };
                }
                h = next;
            }
            h
        };
        let uf: Vec<f64> = u.data().iter().map(|&v| v as f64).collect();
        let z = mlp(&spec.encoder.widths, "encoder", &uf);
        let mut joint = vec![y];
        joint.extend_from_slice(&z);
        let want = mlp(&spec.decoder.widths, "decoder", &joint);
        for (g, w) in tape.value(out).data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn equal_encodings_give_equal_outputs() {
        // Zero the final encoder layer: every input maps to the same z, so
        // outputs agree at every query.
        let spec = tiny_spec();
        let mut rng = Rng::new(71);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut rng);
        store.set("encoder.l1.w", Tensor::zeros(&[8, 3]));

        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &store);
        let u = tape.constant(Tensor::randn(&[2, 6], &mut rng));
        let q = tape.constant(Tensor::from_parts(vec![3, 1], vec![0.1, 0.5, 0.9]));
        let out = spec.forward(&mut tape, &bound, u, q).unwrap();
        let data = tape.value(out).data();
        let per = 3 * 2;
        for i in 0..per {
            assert_eq!(data[i], data[per + i]);
        }
    }
}

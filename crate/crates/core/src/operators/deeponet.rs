//! Branch/trunk operator learning: the output is the inner product of a
//! global encoding of the input function with a basis evaluated at the query.

use crate::fields::{ConditionedField, ConditioningKind};
use crate::operators::mlp::MlpSpec;
use crate::params::{ParamStore, TapeParams};
use crate::tensor::{Result, Rng, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct DeepOnetSpec {
    pub branch: MlpSpec,
    pub trunk: MlpSpec,
}

impl DeepOnetSpec {
    pub fn new(branch: MlpSpec, trunk: MlpSpec) -> Result<Self> {
        if branch.output_dim() != trunk.output_dim() {
            return Err(TensorError::ShapeMismatch {
                context: "branch and trunk output widths must agree",
                lhs: vec![branch.output_dim()],
                rhs: vec![trunk.output_dim()],
            });
        }
        Ok(DeepOnetSpec { branch, trunk })
    }

    /// Four hidden layers of 512 for both networks, shared width 512.
    pub fn default_1d(input_dim: usize) -> Self {
        Self::new(
            MlpSpec::with_hidden(input_dim, 512, 4, 512),
            MlpSpec::with_hidden(1, 512, 4, 512),
        )
        .unwrap()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.branch.init(store, "branch", rng);
        self.trunk.init(store, "trunk", rng);
    }

    /// `u_flat`: `B x input_dim`, `queries`: `Q x q_dim`; output `B x Q x 1`.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u_flat: Var,
        queries: Var,
    ) -> Result<Var> {
        if tape.shape(u_flat).last() != Some(&self.branch.input_dim()) {
            return Err(TensorError::ShapeMismatch {
                context: "deeponet branch input width",
                lhs: tape.shape(u_flat).to_vec(),
                rhs: vec![self.branch.input_dim()],
            });
        }
        let enc = self.branch.forward(tape, params, "branch", u_flat)?; // B x n
        let basis = self.trunk.forward(tape, params, "trunk", queries)?; // Q x n
        let out = tape.matmul_nt(enc, basis)?; // B x Q
        let b = tape.shape(out)[0];
        let q = tape.shape(out)[1];
        tape.reshape(out, vec![b, q, 1])
    }
}

/// A spec paired with its weights, viewed as a globally conditioned field.
pub struct DeepOnetModel {
    pub spec: DeepOnetSpec,
    pub params: ParamStore,
}

impl ConditionedField for DeepOnetModel {
    /// The branch encoding of `u`.
    type Latent = Vec<f32>;

    fn conditioning_kind(&self) -> ConditioningKind {
        ConditioningKind::Global
    }

    fn encode(&self, u: &Tensor<f32>) -> Result<Self::Latent> {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &self.params);
        let flat = tape.constant(u.reshaped(vec![1, u.numel()])?);
        let enc = self.spec.branch.forward(&mut tape, &bound, "branch", flat)?;
        Ok(tape.value(enc).data().to_vec())
    }

    fn eval_query(&self, latent: &Self::Latent, y: &[f64]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &self.params);
        let q = tape.constant(Tensor::from_parts(
            vec![1, y.len()],
            y.iter().map(|&v| v as f32).collect(),
        ));
        let basis = self.spec.trunk.forward(&mut tape, &bound, "trunk", q)?;
        let dot: f32 = latent
            .iter()
            .zip(tape.value(basis).data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(vec![dot])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DeepOnetSpec {
        DeepOnetSpec::new(MlpSpec::new(vec![6, 8, 4]), MlpSpec::new(vec![1, 8, 4])).unwrap()
    }

    #[test]
    fn width_mismatch_rejected() {
        let err = DeepOnetSpec::new(MlpSpec::new(vec![6, 8, 4]), MlpSpec::new(vec![1, 8, 5]));
        assert!(err.is_err());
    }

    #[test]
    fn zero_branch_encoding_gives_zero_everywhere() {
        let spec = tiny_spec();
        let mut rng = Rng::new(51);
        let mut store = ParamStore::new();
        spec.init(&mut store, &mut rng);
        // Zero the final branch layer so the encoding is exactly zero.
        store.set("branch.l1.w", Tensor::zeros(&[8, 4]));
        store.set("branch.l1.b", Tensor::zeros(&[4]));

        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &store);
        let u = tape.constant(Tensor::randn(&[3, 6], &mut rng));
        let q = tape.constant(Tensor::randn(&[5, 1], &mut rng));
        let out = spec.forward(&mut tape, &bound, u, q).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_inner_product_case() {
        // n = 1 with encoding 2 and basis 3 gives 6: realized by constant
        // networks via zero weights and constant biases.
        let spec = DeepOnetSpec::new(MlpSpec::new(vec![2, 1]), MlpSpec::new(vec![1, 1])).unwrap();
        let mut store = ParamStore::new();
        store.insert("branch.l0.w", Tensor::zeros(&[2, 1]));
        store.insert("branch.l0.b", Tensor::full(&[1], 2.0));
        store.insert("trunk.l0.w", Tensor::zeros(&[1, 1]));
        store.insert("trunk.l0.b", Tensor::full(&[1], 3.0));
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &store);
        let u = tape.constant(Tensor::zeros(&[1, 2]));
        let q = tape.constant(Tensor::zeros(&[1, 1]));
        let out = spec.forward(&mut tape, &bound, u, q).unwrap();
        assert_eq!(tape.value(out).data(), &[6.0]);
    }

    #[test]
    fn decoder_is_bilinear_in_the_encoding() {
        // <a z1 + b z2, t(y)> = a <z1, t> + b <z2, t>.
        let mut rng = Rng::new(53);
        let n = 4;
        let z1 = Tensor::<f32>::randn(&[2, n], &mut rng);
        let z2 = Tensor::<f32>::randn(&[2, n], &mut rng);
        let t = Tensor::<f32>::randn(&[3, n], &mut rng);
        let (alpha, beta) = (0.7f32, -1.3f32);
        let combo = Tensor::from_fn(&[2, n], |i| alpha * z1.data()[i] + beta * z2.data()[i]);

        let run = |z: &Tensor<f32>| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let tv = tape.constant(t.clone());
            let out = tape.matmul_nt(zv, tv).unwrap();
            tape.value(out).data().to_vec()
        };
        let lhs = run(&combo);
        let r1 = run(&z1);
        let r2 = run(&z2);
        for i in 0..lhs.len() {
            let want = alpha * r1[i] + beta * r2[i];
            assert!((lhs[i] - want).abs() < 1e-5);
        }
    }
}

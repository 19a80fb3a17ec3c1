//! The operator architectures, each expressed as a conditioned neural field,
//! plus the trainable-model surface the harness drives.

pub mod cvit;
pub mod deeponet;
pub mod fno;
pub mod gno;
pub mod mlp;
pub mod nomad;

pub use cvit::{CvitModel, CvitPreset, CvitSpec};
pub use deeponet::{DeepOnetModel, DeepOnetSpec};
pub use fno::{check_equivalence, fno_layer_continuous, fno_layer_grid, FnoLayerSpec};
pub use gno::{gno_layer, Activation, GnoLayerSpec};
pub use mlp::MlpSpec;
pub use nomad::{NomadModel, NomadSpec};

use std::sync::Arc;

use crate::params::{ParamStore, TapeParams};
use crate::tensor::{Result, Rng, Tape, Tensor, TensorError, Var};

/// A model trainable on 1-D profile datasets: inputs are `B x N x D`
/// profiles, queries are grid coordinates in `[0, 1)`, outputs are
/// `B x Q x D` predictions.
pub trait Surrogate {
    fn name(&self) -> &'static str;
    fn init(&self, rng: &mut Rng) -> ParamStore;
    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u: &Tensor<f32>,
        queries: &[f64],
    ) -> Result<Var>;
    fn out_channels(&self) -> usize;
}

/// Baseline that predicts the input profile at the query point. Advection at
/// a nonzero lead time moves the field, so any learned surrogate should beat
/// this handily.
#[derive(Clone, Debug)]
pub struct IdentityBaseline {
    pub n_points: usize,
    pub channels: usize,
}

impl Surrogate for IdentityBaseline {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn init(&self, _rng: &mut Rng) -> ParamStore {
        ParamStore::new()
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        _params: &TapeParams,
        u: &Tensor<f32>,
        queries: &[f64],
    ) -> Result<Var> {
        let n = self.n_points;
        let d = self.channels;
        if u.rank() != 3 || u.shape()[1] != n || u.shape()[2] != d {
            return Err(TensorError::ShapeMismatch {
                context: "identity baseline input",
                lhs: u.shape().to_vec(),
                rhs: vec![n, d],
            });
        }
        let uv = tape.constant(u.clone());
        let mut map = Vec::with_capacity(queries.len() * d);
        for &y in queries {
            let idx = grid_index(y, n);
            for ch in 0..d {
                map.push((idx * d + ch) as u32);
            }
        }
        tape.gather(uv, 1, Arc::new(map), &[queries.len(), d])
    }

    fn out_channels(&self) -> usize {
        self.channels
    }
}

/// Nearest grid index of a coordinate in `[0, 1)` on an `n`-point periodic
/// grid `x_m = m / n`.
pub fn grid_index(y: f64, n: usize) -> usize {
    let m = (y * n as f64).round() as i64;
    m.rem_euclid(n as i64) as usize
}

impl Surrogate for CvitSpec {
    fn name(&self) -> &'static str {
        "cvit"
    }

    fn init(&self, rng: &mut Rng) -> ParamStore {
        CvitSpec::init(self, rng)
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u: &Tensor<f32>,
        queries: &[f64],
    ) -> Result<Var> {
        let b = u.shape()[0];
        let uv = tape.constant(u.reshaped(vec![
            b,
            self.frames,
            self.height,
            self.width,
            self.in_channels,
        ])?);
        let points: Vec<[f64; 2]> = queries.iter().map(|&y| [y, 0.0]).collect();
        CvitSpec::forward(self, tape, params, uv, &points)
    }

    fn out_channels(&self) -> usize {
        self.out_dim
    }
}

impl Surrogate for DeepOnetSpec {
    fn name(&self) -> &'static str {
        "deeponet"
    }

    fn init(&self, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        DeepOnetSpec::init(self, &mut store, rng);
        store
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u: &Tensor<f32>,
        queries: &[f64],
    ) -> Result<Var> {
        let b = u.shape()[0];
        let flat = tape.constant(u.reshaped(vec![b, u.numel() / b])?);
        let q = tape.constant(Tensor::from_parts(
            vec![queries.len(), 1],
            queries.iter().map(|&y| y as f32).collect(),
        ));
        DeepOnetSpec::forward(self, tape, params, flat, q)
    }

    fn out_channels(&self) -> usize {
        1
    }
}

impl Surrogate for NomadSpec {
    fn name(&self) -> &'static str {
        "nomad"
    }

    fn init(&self, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        NomadSpec::init(self, &mut store, rng);
        store
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u: &Tensor<f32>,
        queries: &[f64],
    ) -> Result<Var> {
        let b = u.shape()[0];
        let flat = tape.constant(u.reshaped(vec![b, u.numel() / b])?);
        let q = tape.constant(Tensor::from_parts(
            vec![queries.len(), 1],
            queries.iter().map(|&y| y as f32).collect(),
        ));
        NomadSpec::forward(self, tape, params, flat, q)
    }

    fn out_channels(&self) -> usize {
        self.decoder.output_dim()
    }
}

/// Runtime-selected model, with self-describing checkpoint metadata.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Cvit(CvitSpec),
    DeepOnet1d { input_dim: usize },
    Nomad1d { input_dim: usize },
    Identity { n_points: usize, channels: usize },
}

impl AnyModel {
    pub fn as_surrogate(&self) -> Box<dyn Surrogate> {
        match self {
            AnyModel::Cvit(spec) => Box::new(spec.clone()),
            AnyModel::DeepOnet1d { input_dim } => {
                Box::new(DeepOnetSpec::default_1d(*input_dim))
            }
            AnyModel::Nomad1d { input_dim } => Box::new(NomadSpec::default_1d(*input_dim)),
            AnyModel::Identity { n_points, channels } => Box::new(IdentityBaseline {
                n_points: *n_points,
                channels: *channels,
            }),
        }
    }

    /// Encode the model shape as `meta.*` tensors inside a checkpoint, so
    /// archives are self-describing.
    pub fn write_meta(&self, store: &mut ParamStore) {
        let fv = |vals: &[usize]| {
            Tensor::from_parts(vec![vals.len()], vals.iter().map(|&v| v as f32).collect())
        };
        match self {
            AnyModel::Cvit(s) => {
                store.insert("meta.model", Tensor::scalar(0.0));
                store.insert(
                    "meta.cvit",
                    fv(&[
                        s.patch_h,
                        s.patch_w,
                        s.frames,
                        s.height,
                        s.width,
                        s.in_channels,
                        s.embed_dim,
                        s.depth,
                        s.decoder_depth,
                        s.heads,
                        s.mlp_width,
                        s.out_dim,
                        s.grid_nx,
                        s.grid_ny,
                        s.grid_dim,
                    ]),
                );
                store.insert("meta.epsilon", Tensor::scalar(s.epsilon as f32));
            }
            AnyModel::DeepOnet1d { input_dim } => {
                store.insert("meta.model", Tensor::scalar(1.0));
                store.insert("meta.input_dim", Tensor::scalar(*input_dim as f32));
            }
            AnyModel::Nomad1d { input_dim } => {
                store.insert("meta.model", Tensor::scalar(2.0));
                store.insert("meta.input_dim", Tensor::scalar(*input_dim as f32));
            }
            AnyModel::Identity { n_points, channels } => {
                store.insert("meta.model", Tensor::scalar(3.0));
                store.insert("meta.input_dim", fv(&[*n_points, *channels]));
            }
        }
    }

    pub fn read_meta(store: &ParamStore) -> Result<AnyModel> {
        let kind = store
            .get("meta.model")
            .ok_or_else(|| TensorError::Invalid {
                context: "checkpoint meta",
                message: "missing meta.model entry".into(),
            })?
            .item() as i64;
        let usizes = |name: &str| -> Result<Vec<usize>> {
            Ok(store
                .get(name)
                .ok_or_else(|| TensorError::Invalid {
                    context: "checkpoint meta",
                    message: format!("missing {name}"),
                })?
                .data()
                .iter()
                .map(|&v| v as usize)
                .collect())
        };
        match kind {
            0 => {
                let d = usizes("meta.cvit")?;
                if d.len() != 15 {
                    return Err(TensorError::Invalid {
                        context: "checkpoint meta",
                        message: format!("meta.cvit holds {} fields, expected 15", d.len()),
                    });
                }
                let epsilon = store
                    .get("meta.epsilon")
                    .ok_or_else(|| TensorError::Invalid {
                        context: "checkpoint meta",
                        message: "missing meta.epsilon".into(),
                    })?
                    .item() as f64;
                Ok(AnyModel::Cvit(CvitSpec {
                    patch_h: d[0],
                    patch_w: d[1],
                    frames: d[2],
                    height: d[3],
                    width: d[4],
                    in_channels: d[5],
                    embed_dim: d[6],
                    depth: d[7],
                    decoder_depth: d[8],
                    heads: d[9],
                    mlp_width: d[10],
                    out_dim: d[11],
                    grid_nx: d[12],
                    grid_ny: d[13],
                    grid_dim: d[14],
                    epsilon,
                }))
            }
            1 => Ok(AnyModel::DeepOnet1d {
                input_dim: usizes("meta.input_dim")?[0],
            }),
            2 => Ok(AnyModel::Nomad1d {
                input_dim: usizes("meta.input_dim")?[0],
            }),
            3 => {
                let d = usizes("meta.input_dim")?;
                Ok(AnyModel::Identity {
                    n_points: d[0],
                    channels: d[1],
                })
            }
            other => Err(TensorError::Invalid {
                context: "checkpoint meta",
                message: format!("unknown model kind {other}"),
            }),
        }
    }
}

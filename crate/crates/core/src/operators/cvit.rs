//! Continuous vision transformer.
//!
//! The conditioning function tokenizes each input frame with a shared patch
//! embedding, adds trainable temporal and spatial positional embeddings,
//! aggregates the temporal axis with a Perceiver-style cross-attention onto a
//! learned latent query, and runs a stack of pre-norm self-attention blocks,
//! producing tokens `z_L`.
//!
//! The base field interpolates a trainable latent grid at the query
//! coordinate (Nadaraya-Watson), aligns it to the embedding width if needed,
//! applies cross-attention blocks against `z_L`, and projects with a small
//! MLP. Each query is decoded independently: batched decoding of a query set
//! is elementwise identical to decoding the queries one at a time.

use std::sync::Arc;

use crate::fields::{interp_weight_matrix, ConditionedField, ConditioningKind};
use crate::operators::mlp::MlpSpec;
use crate::params::{
    init_dense, init_pos_embedding, init_unit_gaussian, ParamStore, TapeParams,
};
use crate::tensor::attention::{multi_head_attention, AttentionParams};
use crate::tensor::{Result, Rng, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-6;

/// Named encoder sizes: `(depth, embed dim, mlp width, heads)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvitPreset {
    S,
    B,
    L,
    /// Desk-scale variant for the 1-D benchmark.
    Tiny,
}

impl CvitPreset {
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            CvitPreset::S => (5, 384, 384, 6),
            CvitPreset::B => (10, 512, 512, 8),
            CvitPreset::L => (15, 768, 1536, 12),
            CvitPreset::Tiny => (2, 64, 64, 4),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "S" | "s" => Some(CvitPreset::S),
            "B" | "b" => Some(CvitPreset::B),
            "L" | "l" => Some(CvitPreset::L),
            "tiny" | "Tiny" | "TINY" => Some(CvitPreset::Tiny),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvitSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Input frames T.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Input channels D.
    pub in_channels: usize,
    /// Embedding dim C.
    pub embed_dim: usize,
    /// Encoder depth L.
    pub depth: usize,
    /// Base-field cross-attention depth K.
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub out_dim: usize,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub grid_dim: usize,
    pub epsilon: f64,
}

impl CvitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.height % self.patch_h != 0 {
            return Err(TensorError::Invalid {
                context: "cvit spec",
                message: format!("height {} not divisible by patch {}", self.height, self.patch_h),
            });
        }
        if self.patch_w == 0 || self.width % self.patch_w != 0 {
            return Err(TensorError::Invalid {
                context: "cvit spec",
                message: format!("width {} not divisible by patch {}", self.width, self.patch_w),
            });
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(TensorError::HeadSplit {
                dim: self.embed_dim,
                heads: self.heads,
            });
        }
        if self.epsilon <= 0.0 {
            return Err(TensorError::Invalid {
                context: "cvit spec",
                message: format!("epsilon must be positive, got {}", self.epsilon),
            });
        }
        if self.frames == 0
            || self.depth == 0
            || self.decoder_depth == 0
            || self.grid_nx == 0
            || self.grid_ny == 0
            || self.grid_dim == 0
        {
            return Err(TensorError::Invalid {
                context: "cvit spec",
                message: "all extents must be positive".into(),
            });
        }
        Ok(())
    }

    /// 2-D spatio-temporal inputs with square patches.
    #[allow(clippy::too_many_arguments)]
    pub fn for_2d(
        preset: CvitPreset,
        patch: usize,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        grid: (usize, usize, usize),
        epsilon: f64,
    ) -> Self {
        let (depth, dim, mlp, heads) = preset.dims();
        CvitSpec {
            patch_h: patch,
            patch_w: patch,
            frames,
            height,
            width,
            in_channels: channels,
            embed_dim: dim,
            depth,
            decoder_depth: 1,
            heads,
            mlp_width: mlp,
            out_dim: channels,
            grid_nx: grid.0,
            grid_ny: grid.1,
            grid_dim: grid.2,
            epsilon,
        }
    }

    /// 1-D profiles adapted as height-1 frames with `1 x patch` patches and
    /// an `n x 1` latent grid.
    pub fn for_1d_profile(
        preset: CvitPreset,
        patch: usize,
        n_points: usize,
        channels: usize,
        grid_nx: usize,
        grid_dim: usize,
        epsilon: f64,
    ) -> Self {
        let (depth, dim, mlp, heads) = preset.dims();
        CvitSpec {
            patch_h: 1,
            patch_w: patch,
            frames: 1,
            height: 1,
            width: n_points,
            in_channels: channels,
            embed_dim: dim,
            depth,
            decoder_depth: 1,
            heads,
            mlp_width: mlp,
            out_dim: channels,
            grid_nx,
            grid_ny: 1,
            grid_dim,
            epsilon,
        }
    }

    pub fn tokens_hw(&self) -> (usize, usize) {
        (self.height / self.patch_h, self.width / self.patch_w)
    }

    pub fn n_tokens(&self) -> usize {
        let (hp, wp) = self.tokens_hw();
        hp * wp
    }

    fn needs_align(&self) -> bool {
        self.grid_dim != self.embed_dim
    }

    fn block_mlp(&self) -> MlpSpec {
        MlpSpec::new(vec![self.embed_dim, self.mlp_width, self.embed_dim])
    }

    fn head_mlp(&self) -> MlpSpec {
        MlpSpec::new(vec![self.embed_dim, self.embed_dim, self.out_dim])
    }

    /// Analytic parameter total (matches `init(..).param_count()`).
    pub fn param_count(&self) -> usize {
        let c = self.embed_dim;
        let (hp, wp) = self.tokens_hw();
        let patch = self.patch_h * self.patch_w * self.in_channels * c + c;
        let pe = self.frames * c + hp * wp * c + c; // pe_t + pe_s + latent query
        let attn = 4 * (c * c + c);
        let ln = 2 * c;
        let mha_block = attn + 2 * ln + self.block_mlp().param_count() + ln;
        let enc_block = attn + ln + self.block_mlp().param_count() + ln;
        let grid = self.grid_nx * self.grid_ny * self.grid_dim;
        let align = if self.needs_align() {
            self.grid_dim * c + c
        } else {
            0
        };
        patch
            + pe
            + mha_block // perceiver aggregation
            + self.depth * enc_block
            + grid
            + align
            + self.decoder_depth * mha_block
            + self.head_mlp().param_count()
    }

    // ── Initialization ──────────────────────────────────────────────

    fn init_ln(store: &mut ParamStore, prefix: &str, c: usize) {
        store.insert(format!("{prefix}.g"), Tensor::full(&[c], 1.0));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
    }

    fn init_attn(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut Rng) {
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}.{name}"), init_dense(rng, c, c));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert(format!("{prefix}.{name}"), Tensor::zeros(&[c]));
        }
    }

    pub fn init(&self, rng: &mut Rng) -> ParamStore {
        self.validate().expect("invalid cvit spec");
        let c = self.embed_dim;
        let (hp, wp) = self.tokens_hw();
        let mut store = ParamStore::new();

        let patch_in = self.patch_h * self.patch_w * self.in_channels;
        store.insert("patch.w", init_dense(rng, patch_in, c));
        store.insert("patch.b", Tensor::zeros(&[c]));
        store.insert("pe_t", init_pos_embedding(rng, &[self.frames, 1, 1, c]));
        store.insert("pe_s", init_pos_embedding(rng, &[1, hp, wp, c]));
        store.insert("latent_query", init_unit_gaussian(rng, &[1, c]));

        Self::init_ln(&mut store, "agg.ln_q", c);
        Self::init_ln(&mut store, "agg.ln_kv", c);
        Self::init_attn(&mut store, "agg.attn", c, rng);
        Self::init_ln(&mut store, "agg.ln_mlp", c);
        self.block_mlp().init(&mut store, "agg.mlp", rng);

        for i in 0..self.depth {
            Self::init_ln(&mut store, &format!("enc{i}.ln1"), c);
            Self::init_attn(&mut store, &format!("enc{i}.attn"), c, rng);
            Self::init_ln(&mut store, &format!("enc{i}.ln2"), c);
            self.block_mlp().init(&mut store, &format!("enc{i}.mlp"), rng);
        }

        store.insert(
            "grid.features",
            init_unit_gaussian(rng, &[self.grid_nx, self.grid_ny, self.grid_dim]),
        );
        if self.needs_align() {
            store.insert("grid.align.w", init_dense(rng, self.grid_dim, c));
            store.insert("grid.align.b", Tensor::zeros(&[c]));
        }

        for k in 0..self.decoder_depth {
            Self::init_ln(&mut store, &format!("dec{k}.ln_q"), c);
            Self::init_ln(&mut store, &format!("dec{k}.ln_kv"), c);
            Self::init_attn(&mut store, &format!("dec{k}.attn"), c, rng);
            Self::init_ln(&mut store, &format!("dec{k}.ln_mlp"), c);
            self.block_mlp().init(&mut store, &format!("dec{k}.mlp"), rng);
        }

        self.head_mlp().init(&mut store, "head", rng);
        store
    }

    // ── Forward pieces ──────────────────────────────────────────────

    fn ln(&self, tape: &mut Tape<f32>, params: &TapeParams, prefix: &str, x: Var) -> Result<Var> {
        let g = params.var(&format!("{prefix}.g"));
        let b = params.var(&format!("{prefix}.b"));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attn_params(params: &TapeParams, prefix: &str) -> AttentionParams {
        AttentionParams {
            wq: params.var(&format!("{prefix}.wq")),
            bq: params.var(&format!("{prefix}.bq")),
            wk: params.var(&format!("{prefix}.wk")),
            bk: params.var(&format!("{prefix}.bk")),
            wv: params.var(&format!("{prefix}.wv")),
            bv: params.var(&format!("{prefix}.bv")),
            wo: params.var(&format!("{prefix}.wo")),
            bo: params.var(&format!("{prefix}.bo")),
        }
    }

    /// Flat gather map realizing the patch layout `[T, H, W, D] ->
    /// [T, hp, wp, ph * pw * D]`.
    fn patch_map(&self) -> Vec<u32> {
        let (hp, wp) = self.tokens_hw();
        let (h, w, d, t) = (self.height, self.width, self.in_channels, self.frames);
        let mut map = Vec::with_capacity(t * h * w * d);
        for ti in 0..t {
            for i in 0..hp {
                for j in 0..wp {
                    for pi in 0..self.patch_h {
                        for pj in 0..self.patch_w {
                            for ch in 0..d {
                                let row = i * self.patch_h + pi;
                                let col = j * self.patch_w + pj;
                                map.push((ti * h * w * d + row * w * d + col * d + ch) as u32);
                            }
                        }
                    }
                }
            }
        }
        map
    }

    /// Patchify + linear embed: `[B, T, H, W, D] -> [B, T, hp, wp, C]`.
    /// The same patch embedding is shared across frames.
    pub fn patch_embed(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u: Var,
    ) -> Result<Var> {
        let shape = tape.shape(u).to_vec();
        let want = [
            self.frames,
            self.height,
            self.width,
            self.in_channels,
        ];
        if shape.len() != 5 || shape[1..] != want {
            return Err(TensorError::ShapeMismatch {
                context: "cvit input must be B x T x H x W x D",
                lhs: shape,
                rhs: want.to_vec(),
            });
        }
        let b = shape[0];
        let (hp, wp) = self.tokens_hw();
        let patch_in = self.patch_h * self.patch_w * self.in_channels;
        let map = Arc::new(self.patch_map());
        let patches = tape.gather(u, 1, map, &[self.frames, hp, wp, patch_in])?;
        let rows = b * self.frames * hp * wp;
        let flat = tape.reshape(patches, vec![rows, patch_in])?;
        let w = params.var("patch.w");
        let bias = params.var("patch.b");
        let emb = tape.matmul(flat, w)?;
        let emb = tape.add(emb, bias)?;
        tape.reshape(emb, vec![b, self.frames, hp, wp, self.embed_dim])
    }

    /// Cross-attention of the tiled latent query against each location's
    /// temporal token sequence: `[.., G, T, C] -> [.., G, 1, C]`.
    pub fn perceiver_aggregate(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        tokens: Var,
    ) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        let rank = shape.len();
        if rank < 3 || shape[rank - 1] != self.embed_dim {
            return Err(TensorError::ShapeMismatch {
                context: "perceiver tokens must be .. x G x T x C",
                lhs: shape,
                rhs: vec![self.embed_dim],
            });
        }
        let mut q_shape = shape.clone();
        q_shape[rank - 2] = 1;
        let z = params.var("latent_query");
        let z_tiled = tape.broadcast(z, &q_shape)?;

        let q = self.ln(tape, params, "agg.ln_q", z_tiled)?;
        let kv = self.ln(tape, params, "agg.ln_kv", tokens)?;
        let attn = Self::attn_params(params, "agg.attn");
        let mha = multi_head_attention(tape, q, kv, kv, &attn, self.heads)?;
        let zp = tape.add(z_tiled, mha)?;

        let h = self.ln(tape, params, "agg.ln_mlp", zp)?;
        let m = self.block_mlp().forward(tape, params, "agg.mlp", h)?;
        tape.add(zp, m)
    }

    fn encoder_block(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let h = self.ln(tape, params, &format!("{prefix}.ln1"), x)?;
        let attn = Self::attn_params(params, &format!("{prefix}.attn"));
        let msa = multi_head_attention(tape, h, h, h, &attn, self.heads)?;
        let x = tape.add(x, msa)?;
        let h = self.ln(tape, params, &format!("{prefix}.ln2"), x)?;
        let m = self
            .block_mlp()
            .forward(tape, params, &format!("{prefix}.mlp"), h)?;
        tape.add(x, m)
    }

    /// Conditioning function: `[B, T, H, W, D] -> z_L of shape [B, G, C]`.
    pub fn encode(&self, tape: &mut Tape<f32>, params: &TapeParams, u: Var) -> Result<Var> {
        let tokens = self.patch_embed(tape, params, u)?;
        let pe_t = params.var("pe_t");
        let pe_s = params.var("pe_s");
        let tokens = tape.add(tokens, pe_t)?;
        let tokens = tape.add(tokens, pe_s)?;

        // [B, T, hp, wp, C] -> [B, G, T, C]
        let b = tape.shape(tokens)[0];
        let (hp, wp) = self.tokens_hw();
        let tokens = tape.permute(tokens, &[0, 2, 3, 1, 4])?;
        let tokens = tape.reshape(tokens, vec![b, hp * wp, self.frames, self.embed_dim])?;

        let agg = self.perceiver_aggregate(tape, params, tokens)?;
        let mut x = tape.reshape(agg, vec![b, hp * wp, self.embed_dim])?;
        for i in 0..self.depth {
            x = self.encoder_block(tape, params, &format!("enc{i}"), x)?;
        }
        Ok(x)
    }

    /// Base-field input: interpolated (and aligned) grid features for a
    /// query set, shape `[Q, C]`.
    fn query_features(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        queries: &[[f64; 2]],
    ) -> Result<Var> {
        let weights =
            interp_weight_matrix::<f32>(self.grid_nx, self.grid_ny, self.epsilon, queries)?;
        let wv = tape.constant(weights);
        let feat = params.var("grid.features");
        let feat = tape.reshape(feat, vec![self.grid_nx * self.grid_ny, self.grid_dim])?;
        let x = tape.matmul(wv, feat)?;
        if self.needs_align() {
            let w = params.var("grid.align.w");
            let b = params.var("grid.align.b");
            let x = tape.matmul(x, w)?;
            return tape.add(x, b);
        }
        Ok(x)
    }

    /// Base field: decode every query independently against `z_L`
    /// (`[B, G, C]`), producing `[B, Q, out_dim]`.
    pub fn decode(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        z: Var,
        queries: &[[f64; 2]],
    ) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 3 || zs[2] != self.embed_dim {
            return Err(TensorError::ShapeMismatch {
                context: "decode expects z_L of shape B x G x C",
                lhs: zs,
                rhs: vec![self.embed_dim],
            });
        }
        let b = zs[0];
        let g = zs[1];
        let q = queries.len();
        let x0 = self.query_features(tape, params, queries)?;
        // Queries ride a leading batch axis of their own; the sample batch
        // broadcasts in, so per-query compute is independent of the others.
        let mut x = tape.reshape(x0, vec![1, q, 1, self.embed_dim])?;
        let zk = tape.reshape(z, vec![b, 1, g, self.embed_dim])?;
        for k in 0..self.decoder_depth {
            let prefix = format!("dec{k}");
            let xq = self.ln(tape, params, &format!("{prefix}.ln_q"), x)?;
            let zn = self.ln(tape, params, &format!("{prefix}.ln_kv"), zk)?;
            let attn = Self::attn_params(params, &format!("{prefix}.attn"));
            let mha = multi_head_attention(tape, xq, zn, zn, &attn, self.heads)?;
            x = tape.add(x, mha)?;
            let h = self.ln(tape, params, &format!("{prefix}.ln_mlp"), x)?;
            let m = self
                .block_mlp()
                .forward(tape, params, &format!("{prefix}.mlp"), h)?;
            x = tape.add(x, m)?;
        }
        let x = tape.reshape(x, vec![b, q, self.embed_dim])?;
        self.head_mlp().forward(tape, params, "head", x)
    }

    /// Encode once, decode the whole query list.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &TapeParams,
        u: Var,
        queries: &[[f64; 2]],
    ) -> Result<Var> {
        let z = self.encode(tape, params, u)?;
        self.decode(tape, params, z, queries)
    }
}

/// A spec paired with weights, as a conditioned neural field.
pub struct CvitModel {
    pub spec: CvitSpec,
    pub params: ParamStore,
}

impl ConditionedField for CvitModel {
    /// `z_L` for a single sample, shape `[1, G, C]`.
    type Latent = Tensor<f32>;

    fn conditioning_kind(&self) -> ConditioningKind {
        ConditioningKind::Both
    }

    fn encode(&self, u: &Tensor<f32>) -> Result<Self::Latent> {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &self.params);
        let mut shape = vec![1];
        shape.extend_from_slice(u.shape());
        let uv = tape.constant(u.reshaped(shape)?);
        let z = self.spec.encode(&mut tape, &bound, uv)?;
        Ok(tape.value(z).clone())
    }

    fn eval_query(&self, latent: &Self::Latent, y: &[f64]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &self.params);
        let z = tape.constant(latent.clone());
        let point = match y.len() {
            1 => [y[0], 0.0],
            2 => [y[0], y[1]],
            _ => {
                return Err(TensorError::Invalid {
                    context: "cvit query",
                    message: format!("query dim {} unsupported", y.len()),
                })
            }
        };
        let out = self.spec.decode(&mut tape, &bound, z, &[point])?;
        Ok(tape.value(out).data().to_vec())
    }
}

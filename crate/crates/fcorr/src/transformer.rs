//! Refinement stages: transformer encoder over patch tokens, decoder in
//! which query tokens cross-attend to the encoded context, and the two
//! output heads (coordinates, uncertainty).
//!
//! Queries never attend to each other — decoder layers are
//! cross-attention plus per-token feed-forward only — so each query's
//! output depends on the context and its own coordinate alone.

use crate::error::Result;
use crate::model::{he_linear, ln_params, ParamFn};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub struct LinearLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearLayer {
    pub fn new(rng: &mut ChaCha8Rng, fin: usize, fout: usize) -> LinearLayer {
        LinearLayer { w: he_linear(rng, fin, fout), b: Tensor::param(&[fout], vec![0.0; fout]).unwrap() }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.w, &self.b)
    }

    pub fn params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{}.w", prefix), &mut self.w);
        f(format!("{}.b", prefix), &mut self.b);
    }
}

/// Token-wise normalization over the feature axis.
struct TokenNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl TokenNorm {
    fn new(dim: usize) -> TokenNorm {
        let (gamma, beta) = ln_params(dim);
        TokenNorm { gamma, beta }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let axis = x.shape().len() - 1;
        x.layer_norm(&self.gamma, &self.beta, axis, 1e-5)
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{}.g", prefix), &mut self.gamma);
        f(format!("{}.b", prefix), &mut self.beta);
    }
}

struct Ffn {
    l1: LinearLayer,
    l2: LinearLayer,
}

impl Ffn {
    fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Ffn {
        Ffn { l1: LinearLayer::new(rng, dim, hidden), l2: LinearLayer::new(rng, hidden, dim) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        self.l1.params(&format!("{}.l1", prefix), f);
        self.l2.params(&format!("{}.l2", prefix), f);
    }
}

/// Multi-head attention; rows of `q_in` attend to rows of `kv_in`.
pub struct Mha {
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    heads: usize,
}

impl Mha {
    fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Mha {
        Mha {
            wq: LinearLayer::new(rng, dim, dim),
            wk: LinearLayer::new(rng, dim, dim),
            wv: LinearLayer::new(rng, dim, dim),
            wo: LinearLayer::new(rng, dim, dim),
            heads,
        }
    }

    fn forward(&self, q_in: &Tensor, kv_in: &Tensor) -> Result<Tensor> {
        let n = q_in.shape()[0];
        let m = kv_in.shape()[0];
        let dim = q_in.shape()[1];
        let h = self.heads;
        let dh = dim / h;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            t.reshape(&[len, h, dh])?.permute(&[1, 0, 2])
        };
        let q = split(self.wq.forward(q_in)?, n)?;
        let k = split(self.wk.forward(kv_in)?, m)?;
        let v = split(self.wv.forward(kv_in)?, m)?;
        let scores = q
            .matmul(&k.permute(&[0, 2, 1])?)?
            .scale(1.0 / (dh as f64).sqrt())?
            .softmax(2)?;
        let ctx = scores.matmul(&v)?.permute(&[1, 0, 2])?.reshape(&[n, dim])?;
        self.wo.forward(&ctx)
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        self.wq.params(&format!("{}.wq", prefix), f);
        self.wk.params(&format!("{}.wk", prefix), f);
        self.wv.params(&format!("{}.wv", prefix), f);
        self.wo.params(&format!("{}.wo", prefix), f);
    }
}

struct EncoderLayer {
    attn: Mha,
    norm1: TokenNorm,
    ffn: Ffn,
    norm2: TokenNorm,
}

impl EncoderLayer {
    fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ffn_dim: usize) -> EncoderLayer {
        EncoderLayer {
            attn: Mha::new(rng, dim, heads),
            norm1: TokenNorm::new(dim),
            ffn: Ffn::new(rng, dim, ffn_dim),
            norm2: TokenNorm::new(dim),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(x, x)?;
        let x = self.norm1.forward(&x.add(&a)?)?;
        let f = self.ffn.forward(&x)?;
        self.norm2.forward(&x.add(&f)?)
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        self.attn.params(&format!("{}.attn", prefix), f);
        self.norm1.params(&format!("{}.norm1", prefix), f);
        self.ffn.params(&format!("{}.ffn", prefix), f);
        self.norm2.params(&format!("{}.norm2", prefix), f);
    }
}

/// Cross-attention only: no self-attention among the query tokens.
struct DecoderLayer {
    cross: Mha,
    norm1: TokenNorm,
    ffn: Ffn,
    norm2: TokenNorm,
}

impl DecoderLayer {
    fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ffn_dim: usize) -> DecoderLayer {
        DecoderLayer {
            cross: Mha::new(rng, dim, heads),
            norm1: TokenNorm::new(dim),
            ffn: Ffn::new(rng, dim, ffn_dim),
            norm2: TokenNorm::new(dim),
        }
    }

    fn forward(&self, q: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let a = self.cross.forward(q, memory)?;
        let q = self.norm1.forward(&q.add(&a)?)?;
        let f = self.ffn.forward(&q)?;
        self.norm2.forward(&q.add(&f)?)
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        self.cross.params(&format!("{}.cross", prefix), f);
        self.norm1.params(&format!("{}.norm1", prefix), f);
        self.ffn.params(&format!("{}.ffn", prefix), f);
        self.norm2.params(&format!("{}.norm2", prefix), f);
    }
}

const STAGE_LAYERS: usize = 3;

/// One refinement stage: three encoders over the stitched patch tokens,
/// three decoders for the queries, and the two output heads.
pub struct RefinerStage {
    input_proj: LinearLayer,
    query_proj: LinearLayer,
    /// Projects the A-side appearance sampled at each query position into
    /// the query token, so cross-attention starts from feature similarity.
    query_feat_proj: LinearLayer,
    encoders: Vec<EncoderLayer>,
    decoders: Vec<DecoderLayer>,
    head_coord: Ffn,
    head_unc: Ffn,
}

/// Starting uncertainty near 0.02 keeps the error term live early in
/// training: the sigmoid's small slope there lets coordinates learn
/// before (1 - u) can gate them off.
const UNC_BIAS_INIT: f64 = -3.891820298110627; // logit(0.02)

impl RefinerStage {
    pub fn new(rng: &mut ChaCha8Rng, feat_dim: usize, dim: usize, heads: usize, ffn_dim: usize) -> RefinerStage {
        let input_proj = LinearLayer::new(rng, feat_dim, dim);
        let query_proj = LinearLayer::new(rng, dim, dim);
        let query_feat_proj = LinearLayer::new(rng, feat_dim, dim);
        let encoders = (0..STAGE_LAYERS)
            .map(|_| EncoderLayer::new(rng, dim, heads, ffn_dim))
            .collect();
        let decoders = (0..STAGE_LAYERS)
            .map(|_| DecoderLayer::new(rng, dim, heads, ffn_dim))
            .collect();
        let head_coord = Ffn { l1: LinearLayer::new(rng, dim, dim), l2: LinearLayer::new(rng, dim, 2) };
        let mut head_unc = Ffn { l1: LinearLayer::new(rng, dim, dim), l2: LinearLayer::new(rng, dim, 1) };
        head_unc.l2.b = Tensor::param(&[1], vec![UNC_BIAS_INIT]).unwrap();
        RefinerStage {
            input_proj,
            query_proj,
            query_feat_proj,
            encoders,
            decoders,
            head_coord,
            head_unc,
        }
    }

    /// Run the stage.
    ///
    /// * `tokens` — (M, feat_dim) stitched patch-pair features.
    /// * `token_pe` — (M, dim) positional encodings of those tokens.
    /// * `query_pe` — (N, dim) positional encodings of the query points on
    ///   the same stitched grid.
    /// * `query_feat` — (N, feat_dim) A-side features sampled at the query
    ///   positions.
    ///
    /// Returns per-query coordinates in the B-patch local frame, squashed
    /// into [0,1]^2 by a sigmoid, and uncertainties in [0,1].
    pub fn forward(
        &self,
        tokens: &Tensor,
        token_pe: &Tensor,
        query_pe: &Tensor,
        query_feat: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut memory = self.input_proj.forward(tokens)?.add(token_pe)?;
        for enc in &self.encoders {
            memory = enc.forward(&memory)?;
        }
        let mut q = self
            .query_proj
            .forward(query_pe)?
            .add(&self.query_feat_proj.forward(query_feat)?)?;
        for dec in &self.decoders {
            q = dec.forward(&q, &memory)?;
        }
        let coords = self.head_coord.forward(&q)?.sigmoid()?;
        let n = q.shape()[0];
        let unc = self.head_unc.forward(&q)?.sigmoid()?.reshape(&[n])?;
        Ok((coords, unc))
    }

    pub fn params(&mut self, prefix: &str, f: ParamFn) {
        self.input_proj.params(&format!("{}.input_proj", prefix), f);
        self.query_proj.params(&format!("{}.query_proj", prefix), f);
        self.query_feat_proj.params(&format!("{}.query_feat_proj", prefix), f);
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            enc.params(&format!("{}.enc{}", prefix, i), f);
        }
        for (i, dec) in self.decoders.iter_mut().enumerate() {
            dec.params(&format!("{}.dec{}", prefix, i), f);
        }
        self.head_coord.params(&format!("{}.head_coord", prefix), f);
        self.head_unc.params(&format!("{}.head_unc", prefix), f);
    }
}

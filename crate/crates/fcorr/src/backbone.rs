//! Bottom-up feature extraction: a small residual network with a pyramid
//! pooling block on its deepest stage, fused into the three-level feature
//! pyramid the refinement stages crop from.
//!
//! The backbone runs exactly once per image per matching call — an
//! invocation counter backs that claim in tests.

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::image::ImagePair;
use crate::pyramid::FeaturePyramid;
use crate::tensor::{concat, Tensor};
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

use crate::model::{he_conv, ln_params, ParamFn};

pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvLayer {
        ConvLayer { w: he_conv(rng, cout, cin, k), b: Tensor::param(&[cout], vec![0.0; cout]).unwrap(), stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, Some(&self.b), self.stride, self.pad)
    }

    pub fn params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{}.w", prefix), &mut self.w);
        f(format!("{}.b", prefix), &mut self.b);
    }
}

/// Per-location normalization over the channel axis.
pub struct ChannelNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl ChannelNorm {
    pub fn new(c: usize) -> ChannelNorm {
        let (gamma, beta) = ln_params(c);
        ChannelNorm { gamma, beta }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, 1, 1e-5)
    }

    pub fn params(&mut self, prefix: &str, f: ParamFn) {
        f(format!("{}.g", prefix), &mut self.gamma);
        f(format!("{}.b", prefix), &mut self.beta);
    }
}

pub struct ResBlock {
    conv1: ConvLayer,
    norm1: ChannelNorm,
    conv2: ConvLayer,
    norm2: ChannelNorm,
    skip: Option<ConvLayer>,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> ResBlock {
        let skip = if stride != 1 || cin != cout {
            Some(ConvLayer::new(rng, cin, cout, 1, stride, 0))
        } else {
            None
        };
        ResBlock {
            conv1: ConvLayer::new(rng, cin, cout, 3, stride, 1),
            norm1: ChannelNorm::new(cout),
            conv2: ConvLayer::new(rng, cout, cout, 3, 1, 1),
            norm2: ChannelNorm::new(cout),
            skip,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        h.add(&s)?.relu()
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        self.conv1.params(&format!("{}.conv1", prefix), f);
        self.norm1.params(&format!("{}.norm1", prefix), f);
        self.conv2.params(&format!("{}.conv2", prefix), f);
        self.norm2.params(&format!("{}.norm2", prefix), f);
        if let Some(skip) = &mut self.skip {
            skip.params(&format!("{}.skip", prefix), f);
        }
    }
}

const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling: multi-bin global pooling, 1x1 reduction, upsample,
/// concat with the input, 1x1 fuse back to the input width.
pub struct Ppm {
    reduce: Vec<ConvLayer>,
    fuse: ConvLayer,
}

impl Ppm {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Ppm {
        let quarter = (c / 4).max(1);
        let reduce: Vec<ConvLayer> = PPM_BINS
            .iter()
            .map(|_| ConvLayer::new(rng, c, quarter, 1, 1, 0))
            .collect();
        let fuse = ConvLayer::new(rng, c + quarter * PPM_BINS.len(), c, 1, 1, 0);
        Ppm { reduce, fuse }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let mut parts: Vec<Tensor> = vec![x.clone()];
        for (layer, &bins) in self.reduce.iter().zip(PPM_BINS.iter()) {
            let pooled = x.avg_pool_grid(bins)?;
            let reduced = layer.forward(&pooled)?.relu()?;
            parts.push(reduced.bilinear_resize(h, w)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.fuse.forward(&concat(&refs, 1)?)
    }

    fn params(&mut self, prefix: &str, f: ParamFn) {
        for (i, layer) in self.reduce.iter_mut().enumerate() {
            layer.params(&format!("{}.reduce{}", prefix, i), f);
        }
        self.fuse.params(&format!("{}.fuse", prefix), f);
    }
}

/// The shared feature extractor.
pub struct Backbone {
    stem: ConvLayer,
    stem_norm: ChannelNorm,
    stages: Vec<[ResBlock; 2]>,
    ppm: Ppm,
    proj_coarse: [ConvLayer; 2],
    proj_mid: [ConvLayer; 3],
    proj_fine: [ConvLayer; 3],
    evals: Cell<u64>,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &PipelineConfig) -> Backbone {
        let ch = cfg.backbone_channels;
        let fd = cfg.feat_dim;
        let stem = ConvLayer::new(rng, 3, ch[0], 3, 2, 1);
        let stem_norm = ChannelNorm::new(ch[0]);
        let mut stages = Vec::with_capacity(4);
        let mut cin = ch[0];
        for &cout in ch.iter() {
            stages.push([ResBlock::new(rng, cin, cout, 2), ResBlock::new(rng, cout, cout, 1)]);
            cin = cout;
        }
        let ppm = Ppm::new(rng, ch[3]);
        let proj_coarse = [
            ConvLayer::new(rng, ch[3], fd, 1, 1, 0),
            ConvLayer::new(rng, ch[3], fd, 1, 1, 0),
        ];
        let proj_mid = [
            ConvLayer::new(rng, ch[1], fd, 1, 1, 0),
            ConvLayer::new(rng, ch[2], fd, 1, 1, 0),
            ConvLayer::new(rng, ch[3], fd, 1, 1, 0),
        ];
        let proj_fine = [
            ConvLayer::new(rng, ch[0], fd, 1, 1, 0),
            ConvLayer::new(rng, ch[1], fd, 1, 1, 0),
            ConvLayer::new(rng, ch[2], fd, 1, 1, 0),
        ];
        Backbone { stem, stem_norm, stages, ppm, proj_coarse, proj_mid, proj_fine, evals: Cell::new(0) }
    }

    /// How many single-image forward passes have run.
    pub fn evals(&self) -> u64 {
        self.evals.get()
    }

    pub fn reset_evals(&self) {
        self.evals.set(0);
    }

    /// One bottom-up pass producing the integrated pyramid for one image.
    pub fn forward(&self, img: &Tensor) -> Result<FeaturePyramid> {
        self.evals.set(self.evals.get() + 1);
        let s = self.stem_norm.forward(&self.stem.forward(img)?)?.relu()?;
        let r1 = self.stages[0][1].forward(&self.stages[0][0].forward(&s)?)?;
        let r2 = self.stages[1][1].forward(&self.stages[1][0].forward(&r1)?)?;
        let r3 = self.stages[2][1].forward(&self.stages[2][0].forward(&r2)?)?;
        let r4 = self.stages[3][1].forward(&self.stages[3][0].forward(&r3)?)?;
        let ppm_out = self.ppm.forward(&r4)?;

        // Coarse group {PPM, res4} lives at 1/32 already.
        let coarse = self.proj_coarse[0]
            .forward(&ppm_out)?
            .add(&self.proj_coarse[1].forward(&r4)?)?;

        // Middle group {res2, res3, res4}: fuse at the finest of the group
        // (1/8), then resize to the 1/16 target.
        let (h8, w8) = (r2.shape()[2], r2.shape()[3]);
        let m = self.proj_mid[0]
            .forward(&r2)?
            .add(&self.proj_mid[1].forward(&r3)?.bilinear_resize(h8, w8)?)?
            .add(&self.proj_mid[2].forward(&r4)?.bilinear_resize(h8, w8)?)?;
        let mid = m.bilinear_resize(h8 / 2, w8 / 2)?;

        // Fine group {res1, res2, res3} fuses at 1/4, already the target.
        let (h4, w4) = (r1.shape()[2], r1.shape()[3]);
        let fine = self.proj_fine[0]
            .forward(&r1)?
            .add(&self.proj_fine[1].forward(&r2)?.bilinear_resize(h4, w4)?)?
            .add(&self.proj_fine[2].forward(&r3)?.bilinear_resize(h4, w4)?)?;

        Ok(FeaturePyramid { coarse, mid, fine })
    }

    /// Run the backbone once per image of the pair.
    pub fn extract_pyramid(&self, pair: &ImagePair) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let pa = self.forward(&pair.a.to_tensor())?;
        let pb = self.forward(&pair.b.to_tensor())?;
        pa.validate(pair.a.height, pair.a.width)?;
        pb.validate(pair.b.height, pair.b.width)?;
        Ok((pa, pb))
    }

    /// Zero the pyramid-pooling contribution to the coarse level; the
    /// remaining pathway is purely convolutional. Test hook for
    /// translation-equivariance checks.
    pub fn zero_ppm_projection(&mut self) {
        let shape = self.proj_coarse[0].w.shape().to_vec();
        let n: usize = shape.iter().product();
        self.proj_coarse[0].w = Tensor::param(&shape, vec![0.0; n]).unwrap();
        let bshape = self.proj_coarse[0].b.shape().to_vec();
        self.proj_coarse[0].b = Tensor::param(&bshape, vec![0.0; bshape[0]]).unwrap();
    }

    pub fn params(&mut self, prefix: &str, f: ParamFn) {
        self.stem.params(&format!("{}.stem", prefix), f);
        self.stem_norm.params(&format!("{}.stem_norm", prefix), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.params(&format!("{}.s{}.b{}", prefix, i, j), f);
            }
        }
        self.ppm.params(&format!("{}.ppm", prefix), f);
        for (i, layer) in self.proj_coarse.iter_mut().enumerate() {
            layer.params(&format!("{}.proj_coarse{}", prefix, i), f);
        }
        for (i, layer) in self.proj_mid.iter_mut().enumerate() {
            layer.params(&format!("{}.proj_mid{}", prefix, i), f);
        }
        for (i, layer) in self.proj_fine.iter_mut().enumerate() {
            layer.params(&format!("{}.proj_fine{}", prefix, i), f);
        }
    }
}

//! Backbone `f`, projection head `p` and prediction head `h`.
//!
//! The backbone is a normalisation-free U-Net with same-padded 3x3 convs, so
//! a patch run through it on its own sees zero padding at its border instead
//! of the surrounding image. The projection head average-pools the feature
//! map over non-overlapping blocks (or the whole patch) and then applies a
//! shared three-layer 1x1 stack, so every grid cell depends only on its own
//! feature block.

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::patching;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Unet,
    /// A single 1x1 convolution; every output pixel sees one input pixel.
    Pointwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub base_channels: usize,
    pub depth: usize,
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub grid_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Unet,
            base_channels: 32,
            depth: 4,
            feature_channels: 16,
            embed_dim: 128,
            grid_side: 4,
        }
    }
}

impl ModelConfig {
    /// 64x64 inputs, 4x4 grid, 16-d embeddings, 8-channel stem, three stages.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneKind::Unet,
            base_channels: 8,
            depth: 3,
            feature_channels: 16,
            embed_dim: 16,
            grid_side: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("feature_channels", self.feature_channels),
            ("embed_dim", self.embed_dim),
            ("grid_side", self.grid_side),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.backbone == BackboneKind::Unet && self.depth == 0 {
            return Err(Error::Config("model.depth must be positive".into()));
        }
        if self.depth > 10 {
            return Err(Error::Config("model.depth is unreasonably large".into()));
        }
        Ok(())
    }

    /// Spatial factor the backbone input must be divisible by.
    pub fn stride(&self) -> usize {
        match self.backbone {
            BackboneKind::Unet => 1 << self.depth,
            BackboneKind::Pointwise => 1,
        }
    }

    /// Validate a full-image side length: the image must split into the
    /// patch grid, and both the image and each patch must pass through the
    /// backbone's down-sampling stages.
    pub fn check_image_size(&self, height: usize, width: usize) -> Result<()> {
        let (ph, pw) = patching::block_size(height, width, self.grid_side)?;
        let s = self.stride();
        for (axis, size) in [("patch height", ph), ("patch width", pw)] {
            if size % s != 0 {
                return Err(Error::Indivisible {
                    axis,
                    size,
                    divisor: s,
                });
            }
        }
        Ok(())
    }
}

/// Dense backbone output, `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

/// Unit-norm block embeddings of full images, `[B, n * n, D]` (row-major cells).
#[derive(Debug, Clone)]
pub struct ProjectedGrid {
    pub data: Tensor,
    pub side: usize,
}

/// Unit-norm whole-patch embeddings, `[P, D]`.
#[derive(Debug, Clone)]
pub struct ProjectedVectors(pub Tensor);

/// Two-class logits `[B, 2, H, W]`; channel 0 background, channel 1 foreground.
#[derive(Debug, Clone)]
pub struct PredictionMap(pub Tensor);

impl PredictionMap {
    pub fn probabilities(&self) -> Result<Tensor> {
        ops::softmax(&self.0, 1)
    }

    /// Foreground probability `[B, H, W]`.
    pub fn foreground(&self) -> Result<Tensor> {
        Ok(self.probabilities()?.narrow(1, 1, 1)?.squeeze(1)?)
    }
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (cin * k * k) as f64;
        let weight = ps.normal(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            gain / fan_in.sqrt(),
            rng,
        )?;
        let bias = ps.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(Self { weight, bias })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d_same(x, &self.weight, Some(&self.bias))
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

struct ConvBlock {
    first: Conv,
    second: Conv,
}

impl ConvBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, RELU_GAIN, rng)?,
            second: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, RELU_GAIN, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.first.forward(x)?.relu()?;
        Ok(self.second.forward(&x)?.relu()?)
    }
}

struct UNet {
    encoder: Vec<ConvBlock>,
    decoder: Vec<ConvBlock>,
    out: Conv,
}

impl UNet {
    fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let widths: Vec<usize> = (0..=cfg.depth).map(|l| cfg.base_channels << l).collect();
        let mut encoder = Vec::with_capacity(cfg.depth + 1);
        let mut cin = 3;
        for (level, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(ps, &format!("backbone.down{level}"), cin, w, rng)?);
            cin = w;
        }
        let mut decoder = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            let w = widths[level];
            decoder.push(ConvBlock::new(
                ps,
                &format!("backbone.up{level}"),
                widths[level + 1] + w,
                w,
                rng,
            )?);
        }
        let out = Conv::new(
            ps,
            "backbone.out",
            widths[0],
            cfg.feature_channels,
            1,
            1.0,
            rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            out,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = self.encoder[0].forward(x)?;
        for block in &self.encoder[1..] {
            let pooled = ops::max_pool2x2(&h)?;
            skips.push(h);
            h = block.forward(&pooled)?;
        }
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = ops::upsample2x(&h)?;
            h = block.forward(&Tensor::cat(&[&up, &skip], 1)?)?;
        }
        self.out.forward(&h)
    }
}

enum Backbone {
    UNet(UNet),
    Pointwise(Conv),
}

/// Three 1x1 layers with ReLU between them, applied to pooled channel vectors.
struct ProjectionHead {
    layers: Vec<(Tensor, Tensor)>,
}

impl ProjectionHead {
    fn new(ps: &mut ParamStore, cin: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        let mut fan_in = cin;
        for i in 1..=3 {
            let gain = if i < 3 { RELU_GAIN } else { 1.0 };
            let w = ps.normal(
                &format!("projection.conv{i}.weight"),
                &[dim, fan_in],
                gain / (fan_in as f64).sqrt(),
                rng,
            )?;
            let b = ps.zeros(&format!("projection.conv{i}.bias"), &[dim])?;
            layers.push((w, b));
            fan_in = dim;
        }
        Ok(Self { layers })
    }

    /// `[M, C]` pooled features to pre-normalisation `[M, D]` embeddings.
    fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut h = pooled.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(&w.t()?)?.broadcast_add(b)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// U-Net backbone plus projection and prediction heads.
pub struct SegModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    projection: ProjectionHead,
    prediction: Conv,
}

impl SegModel {
    /// Build a freshly initialised model; initialisation is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype);
        let backbone = match config.backbone {
            BackboneKind::Unet => Backbone::UNet(UNet::new(&mut params, &config, &mut rng)?),
            BackboneKind::Pointwise => Backbone::Pointwise(Conv::new(
                &mut params,
                "backbone.pointwise",
                3,
                config.feature_channels,
                1,
                1.0,
                &mut rng,
            )?),
        };
        let projection =
            ProjectionHead::new(&mut params, config.feature_channels, config.embed_dim, &mut rng)?;
        let prediction = Conv::new(
            &mut params,
            "prediction",
            config.feature_channels,
            2,
            1,
            1.0,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            backbone,
            projection,
            prediction,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// `[B, 3, H, W]` images to `[B, C, H, W]` features.
    pub fn backbone_forward(&self, images: &Tensor) -> Result<FeatureMap> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                context: "backbone input channels",
                left: vec![3],
                right: vec![c],
            });
        }
        let s = self.config.stride();
        for (axis, size) in [("height", h), ("width", w)] {
            if size % s != 0 {
                return Err(Error::Indivisible {
                    axis,
                    size,
                    divisor: s,
                });
            }
        }
        let images = images.to_dtype(self.dtype())?;
        let out = match &self.backbone {
            Backbone::UNet(net) => net.forward(&images)?,
            Backbone::Pointwise(conv) => conv.forward(&images)?,
        };
        Ok(FeatureMap(out))
    }

    fn check_features(&self, fm: &FeatureMap) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = fm.0.dims4()?;
        if c != self.config.feature_channels {
            return Err(Error::ShapeMismatch {
                context: "feature channels",
                left: vec![self.config.feature_channels],
                right: vec![c],
            });
        }
        Ok((b, h, w))
    }

    /// Projection of each non-overlapping block before L2 normalisation, `[B, n * n, D]`.
    pub fn project_global_raw(&self, fm: &FeatureMap, n: usize) -> Result<Tensor> {
        let (b, h, w) = self.check_features(fm)?;
        let (bh, bw) = patching::block_size(h, w, n)?;
        let c = self.config.feature_channels;
        let pooled = fm
            .0
            .reshape((b, c, n, bh, n, bw))?
            .mean(5)?
            .mean(3)?
            .permute((0, 2, 3, 1))?
            .reshape((b * n * n, c))?;
        Ok(self
            .projection
            .forward(&pooled)?
            .reshape((b, n * n, self.config.embed_dim))?)
    }

    /// Unit-norm block embeddings of full-image features.
    pub fn project_global(&self, fm: &FeatureMap, n: usize) -> Result<ProjectedGrid> {
        let raw = self.project_global_raw(fm, n)?;
        Ok(ProjectedGrid {
            data: ops::l2_normalize(&raw)?,
            side: n,
        })
    }

    /// Unit-norm embeddings of patch features `[P, C, h, w]`, one per patch.
    pub fn project_patch(&self, fm_patches: &FeatureMap) -> Result<ProjectedVectors> {
        self.check_features(fm_patches)?;
        let pooled = fm_patches.0.mean(D::Minus1)?.mean(D::Minus1)?;
        let raw = self.projection.forward(&pooled)?;
        Ok(ProjectedVectors(ops::l2_normalize(&raw)?))
    }

    /// 1x1 prediction head, `[B, C, h, w]` to `[B, 2, h, w]` logits.
    pub fn predict_head(&self, fm: &FeatureMap) -> Result<PredictionMap> {
        self.check_features(fm)?;
        Ok(PredictionMap(self.prediction.forward(&fm.0)?))
    }

    /// Foreground probabilities `[B, H, W]` for a batch of images.
    pub fn predict_foreground(&self, images: &Tensor) -> Result<Tensor> {
        let fm = self.backbone_forward(images)?;
        self.predict_head(&fm)?.foreground()
    }
}

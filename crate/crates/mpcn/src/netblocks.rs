//! Network blocks: 2D image encoder, 3D shape encoder, 3D shape decoder.
//!
//! Each block is described by a plain spec struct so parameter counts are a
//! pure function of the configuration. Three presets are provided: `desk`
//! (small, trains in seconds on a laptop core), `paper` (full-size, used for
//! size accounting), and `tiny` (miniature widths for finite-difference
//! gradient checks).

use ndarray::{Array2, Array4, Array5, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpcnError, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm,
    BnCache, Conv2d, Conv3d, ConvTranspose3d, Linear, MaxPool2d, MaxPool3d, Module, ParamViewMut,
    Pool2dCache, Pool3dCache,
};
use crate::prior::PriorConfig;

/// Image encoder layout: a strided backbone of conv/batch-norm/rectifier
/// blocks, three stride-1 conv stages (the last two followed by max pools),
/// then a flatten and linear projection to the embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_size: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub stage_channels: [usize; 3],
    /// (kernel, stride) of the pool after the second stage.
    pub pool1: (usize, usize),
    /// (kernel, stride) of the pool after the third stage.
    pub pool2: (usize, usize),
    pub embed_dim: usize,
}

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> usize {
    (size + 2 * p - k) / s + 1
}

fn pool_out(size: usize, (k, s): (usize, usize)) -> usize {
    (size - k) / s + 1
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(MpcnError::config("encoder embedding dimension must be positive"));
        }
        if self.backbone_channels.len() != 4 || self.backbone_strides.len() != 4 {
            return Err(MpcnError::config(
                "encoder backbone needs exactly four conv blocks",
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0)
            || self.backbone_channels.iter().any(|&c| c == 0)
        {
            return Err(MpcnError::config("encoder channel counts must be positive"));
        }
        let mut size = self.input_size;
        for &s in &self.backbone_strides {
            size = conv_out(size, 3, s, 1);
        }
        size = conv_out(size, 3, 1, 1);
        size = conv_out(size, 3, 1, 1);
        if size < self.pool1.0 {
            return Err(MpcnError::config(format!(
                "first encoder pool window {} exceeds feature map {size}",
                self.pool1.0
            )));
        }
        size = pool_out(size, self.pool1);
        size = conv_out(size, 3, 1, 1);
        if size < self.pool2.0 {
            return Err(MpcnError::config(format!(
                "second encoder pool window {} exceeds feature map {size}",
                self.pool2.0
            )));
        }
        Ok(())
    }

    /// Spatial size after the whole conv/pool stack.
    pub fn final_spatial(&self) -> usize {
        let mut size = self.input_size;
        for &s in &self.backbone_strides {
            size = conv_out(size, 3, s, 1);
        }
        size = conv_out(size, 3, 1, 1);
        size = conv_out(size, 3, 1, 1);
        size = pool_out(size, self.pool1);
        size = conv_out(size, 3, 1, 1);
        pool_out(size, self.pool2)
    }

    pub fn flatten_dim(&self) -> usize {
        self.stage_channels[2] * self.final_spatial() * self.final_spatial()
    }

    /// Trainable scalar count implied by the spec.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for &c in &self.backbone_channels {
            n += c_in * c * 9 + c + 2 * c;
            c_in = c;
        }
        for &c in &self.stage_channels {
            n += c_in * c * 9 + c + 2 * c;
            c_in = c;
        }
        n + self.flatten_dim() * self.embed_dim + self.embed_dim
    }
}

/// Shape encoder layout: four 3D convs with leaky rectifiers, max pools
/// after the first two convs, flattened output (no projection; the prior
/// module's value projection consumes it directly).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEncoderSpec {
    pub input_resolution: usize,
    pub kernels: [usize; 4],
    pub channels: [usize; 4],
    pub strides: [usize; 4],
}

impl ShapeEncoderSpec {
    fn paddings(&self) -> [usize; 4] {
        [
            self.kernels[0] / 2,
            self.kernels[1] / 2,
            self.kernels[2] / 2,
            self.kernels[3] / 2,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(MpcnError::config("shape encoder channels must be positive"));
        }
        let mut size = self.input_resolution;
        let p = self.paddings();
        for i in 0..4 {
            size = conv_out(size, self.kernels[i], self.strides[i], p[i]);
            if i < 2 {
                if size < 2 {
                    return Err(MpcnError::config(format!(
                        "shape encoder pool {i} has nothing to pool (size {size})"
                    )));
                }
                size = pool_out(size, (2, 2));
            }
            if size == 0 {
                return Err(MpcnError::config("shape encoder collapses to zero size"));
            }
        }
        Ok(())
    }

    pub fn final_spatial(&self) -> usize {
        let mut size = self.input_resolution;
        let p = self.paddings();
        for i in 0..4 {
            size = conv_out(size, self.kernels[i], self.strides[i], p[i]);
            if i < 2 {
                size = pool_out(size, (2, 2));
            }
        }
        size
    }

    /// Output feature width d_v.
    pub fn output_dim(&self) -> usize {
        self.channels[3] * self.final_spatial().pow(3)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for i in 0..4 {
            n += c_in * self.channels[i] * self.kernels[i].pow(3) + self.channels[i];
            c_in = self.channels[i];
        }
        n
    }
}

/// Decoder layout: transposed-conv stages (kernel 4, stride 2, padding 1 by
/// default), batch norm and rectifier after all but the last, sigmoid last.
/// The conditioning embedding enters as channels of a 1x1x1 volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || *self.stage_channels.last().unwrap() != 1 {
            return Err(MpcnError::config(
                "decoder stages must end in a single output channel",
            ));
        }
        if self.input_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(MpcnError::config("decoder channels must be positive"));
        }
        Ok(())
    }

    pub fn output_resolution(&self) -> usize {
        let mut size = 1;
        for _ in &self.stage_channels {
            size = (size - 1) * self.stride + self.kernel - 2 * self.padding;
        }
        size
    }

    pub fn param_count(&self) -> usize {
        let k3 = self.kernel.pow(3);
        let mut n = 0;
        let mut c_in = self.input_channels;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            n += c_in * c * k3 + c;
            if i + 1 < self.stage_channels.len() {
                n += 2 * c;
            }
            c_in = c;
        }
        n
    }
}

/// Full model configuration: the three blocks plus the fusion module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub voxel_resolution: usize,
    pub encoder: EncoderSpec,
    pub shape_encoder: ShapeEncoderSpec,
    pub decoder: DecoderSpec,
    pub prior: PriorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.shape_encoder.validate()?;
        self.decoder.validate()?;
        self.prior.validate()?;
        if self.prior.query_dim != self.encoder.embed_dim {
            return Err(MpcnError::config(format!(
                "prior query width {} differs from encoder embedding {}",
                self.prior.query_dim, self.encoder.embed_dim
            )));
        }
        if self.prior.value_dim != self.shape_encoder.output_dim() {
            return Err(MpcnError::config(format!(
                "prior value width {} differs from shape encoder output {}",
                self.prior.value_dim,
                self.shape_encoder.output_dim()
            )));
        }
        if self.decoder.input_channels != self.encoder.embed_dim + self.prior.embed {
            return Err(MpcnError::config(format!(
                "decoder input {} differs from image+prior concat {}",
                self.decoder.input_channels,
                self.encoder.embed_dim + self.prior.embed
            )));
        }
        if self.decoder.output_resolution() != self.voxel_resolution {
            return Err(MpcnError::config(format!(
                "decoder resolution {} differs from configured {}",
                self.decoder.output_resolution(),
                self.voxel_resolution
            )));
        }
        if self.shape_encoder.input_resolution != self.voxel_resolution {
            return Err(MpcnError::config(
                "shape encoder resolution differs from voxel resolution",
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.shape_encoder.param_count()
            + self.decoder.param_count()
            + self.prior.param_count()
    }
}

/// Desk-scale preset: 32^3 voxels, 128-wide embeddings.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        name: "desk".into(),
        voxel_resolution: 32,
        encoder: EncoderSpec {
            input_size: 32,
            backbone_channels: vec![8, 16, 24, 32],
            backbone_strides: vec![2, 2, 2, 1],
            stage_channels: [48, 32, 24],
            pool1: (3, 1),
            pool2: (2, 2),
            embed_dim: 128,
        },
        shape_encoder: ShapeEncoderSpec {
            input_resolution: 32,
            kernels: [5, 3, 3, 3],
            channels: [6, 10, 14, 20],
            strides: [2, 1, 1, 2],
        },
        decoder: DecoderSpec {
            input_channels: 256,
            stage_channels: vec![24, 16, 8, 4, 1],
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        prior: PriorConfig {
            embed: 128,
            heads: 2,
            ffn_hidden: 256,
            topk: 5,
            query_dim: 128,
            value_dim: 160,
        },
    }
}

/// Full-size preset matching the published architecture; used for parameter
/// accounting, not for training in tests.
pub fn paper_config() -> ModelConfig {
    ModelConfig {
        name: "paper".into(),
        voxel_resolution: 32,
        encoder: EncoderSpec {
            input_size: 224,
            backbone_channels: vec![64, 128, 256, 512],
            backbone_strides: vec![2, 2, 2, 2],
            stage_channels: [512, 256, 128],
            pool1: (3, 1),
            pool2: (2, 2),
            embed_dim: 2048,
        },
        shape_encoder: ShapeEncoderSpec {
            input_resolution: 32,
            kernels: [5, 3, 3, 3],
            channels: [32, 64, 128, 256],
            strides: [2, 1, 1, 2],
        },
        decoder: DecoderSpec {
            input_channels: 4096,
            stage_channels: vec![256, 128, 32, 8, 1],
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        prior: PriorConfig {
            embed: 2048,
            heads: 2,
            ffn_hidden: 4096,
            topk: 5,
            query_dim: 2048,
            value_dim: 2048,
        },
    }
}

/// Miniature preset for finite-difference gradient checks: 8^3 voxels.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        name: "tiny".into(),
        voxel_resolution: 8,
        encoder: EncoderSpec {
            input_size: 8,
            backbone_channels: vec![2, 2, 3, 3],
            backbone_strides: vec![2, 1, 1, 1],
            stage_channels: [4, 4, 4],
            pool1: (3, 1),
            pool2: (2, 2),
            embed_dim: 8,
        },
        shape_encoder: ShapeEncoderSpec {
            input_resolution: 8,
            kernels: [5, 3, 3, 3],
            channels: [2, 3, 3, 4],
            strides: [2, 1, 1, 1],
        },
        decoder: DecoderSpec {
            input_channels: 16,
            stage_channels: vec![6, 4, 1],
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        prior: PriorConfig {
            embed: 8,
            heads: 2,
            ffn_hidden: 16,
            topk: 2,
            query_dim: 8,
            value_dim: 4,
        },
    }
}

/// Conv + batch norm + rectifier, the encoder building block.
#[derive(Debug, Clone)]
struct ConvBnRelu2d {
    conv: Conv2d,
    bn: BatchNorm,
}

struct ConvBnRelu2dCache {
    x: Array4<f64>,
    conv_out: Array4<f64>,
    bn: BnCache,
    bn_out: Array4<f64>,
}

impl ConvBnRelu2d {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvBnRelu2d {
            conv: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn: BatchNorm::new(c_out),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> (Array4<f64>, ConvBnRelu2dCache) {
        let conv_out = self.conv.forward(x);
        let (bn_out, bn) = self.bn.forward2d(&conv_out, train);
        let y = relu(&bn_out);
        (
            y,
            ConvBnRelu2dCache {
                x: x.clone(),
                conv_out,
                bn,
                bn_out,
            },
        )
    }

    fn backward(&mut self, grad: &Array4<f64>, cache: &ConvBnRelu2dCache) -> Array4<f64> {
        let g = relu_backward(grad, &cache.bn_out);
        let g = self.bn.backward2d(&g, &cache.bn);
        let _ = cache.conv_out;
        self.conv.backward(&g, &cache.x)
    }
}

impl Module for ConvBnRelu2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.conv.visit_params(&mut |n, p| f(&format!("conv.{n}"), p));
        self.bn.visit_params(&mut |n, p| f(&format!("bn.{n}"), p));
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.bn.visit_buffers(&mut |n, b| f(&format!("bn.{n}"), b));
    }
}

/// The 2D image encoder: depth view in, d_e-dimensional feature out.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    spec: EncoderSpec,
    backbone: Vec<ConvBnRelu2d>,
    stages: Vec<ConvBnRelu2d>,
    pool1: MaxPool2d,
    pool2: MaxPool2d,
    project: Linear,
}

pub struct ImageEncoderCache {
    backbone: Vec<ConvBnRelu2dCache>,
    stages: Vec<ConvBnRelu2dCache>,
    pool1: Pool2dCache,
    pool2: Pool2dCache,
    flat: Array2<f64>,
}

impl ImageEncoder {
    pub fn new(spec: &EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut backbone = Vec::new();
        let mut c_in = 1;
        for (i, &c) in spec.backbone_channels.iter().enumerate() {
            backbone.push(ConvBnRelu2d::new(c_in, c, spec.backbone_strides[i], rng));
            c_in = c;
        }
        let mut stages = Vec::new();
        for &c in &spec.stage_channels {
            stages.push(ConvBnRelu2d::new(c_in, c, 1, rng));
            c_in = c;
        }
        Ok(ImageEncoder {
            backbone,
            stages,
            pool1: MaxPool2d::new(spec.pool1.0, spec.pool1.1),
            pool2: MaxPool2d::new(spec.pool2.0, spec.pool2.1),
            project: Linear::new(spec.flatten_dim(), spec.embed_dim, rng),
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// `x: [B, 1, S, S]` in, `[B, d_e]` out.
    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> (Array2<f64>, ImageEncoderCache) {
        assert_eq!(x.dim().1, 1, "encoder expects a single input channel");
        assert_eq!(x.dim().2, self.spec.input_size, "encoder input size mismatch");
        let batch = x.dim().0;
        let mut cur = x.clone();
        let mut backbone_caches = Vec::new();
        for block in &mut self.backbone {
            let (y, cache) = block.forward(&cur, train);
            backbone_caches.push(cache);
            cur = y;
        }
        let mut stage_caches = Vec::new();
        let (y, c0) = self.stages[0].forward(&cur, train);
        stage_caches.push(c0);
        let (y, c1) = self.stages[1].forward(&y, train);
        stage_caches.push(c1);
        let (y, p1) = self.pool1.forward(&y);
        let (y, c2) = self.stages[2].forward(&y, train);
        stage_caches.push(c2);
        let (y, p2) = self.pool2.forward(&y);
        let flat = y
            .into_shape_with_order((batch, self.spec.flatten_dim()))
            .unwrap();
        let out = self.project.forward(&flat);
        (
            out,
            ImageEncoderCache {
                backbone: backbone_caches,
                stages: stage_caches,
                pool1: p1,
                pool2: p2,
                flat,
            },
        )
    }

    /// Backpropagates `grad: [B, d_e]`; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &Array2<f64>, cache: &ImageEncoderCache) -> Array4<f64> {
        let g_flat = self.project.backward(grad, &cache.flat);
        let s = self.spec.final_spatial();
        let g = g_flat
            .into_shape_with_order((grad.dim().0, self.spec.stage_channels[2], s, s))
            .unwrap();
        let g = self.pool2.backward(&g, &cache.pool2);
        let g = self.stages[2].backward(&g, &cache.stages[2]);
        let g = self.pool1.backward(&g, &cache.pool1);
        let g = self.stages[1].backward(&g, &cache.stages[1]);
        let mut g = self.stages[0].backward(&g, &cache.stages[0]);
        for (block, c) in self.backbone.iter_mut().zip(cache.backbone.iter()).rev() {
            g = block.backward(&g, c);
        }
        g
    }
}

impl Module for ImageEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        for (i, b) in self.backbone.iter_mut().enumerate() {
            b.visit_params(&mut |n, p| f(&format!("backbone{i}.{n}"), p));
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&mut |n, p| f(&format!("stage{i}.{n}"), p));
        }
        self.project.visit_params(&mut |n, p| f(&format!("project.{n}"), p));
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, b) in self.backbone.iter_mut().enumerate() {
            b.visit_buffers(&mut |n, v| f(&format!("backbone{i}.{n}"), v));
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&mut |n, v| f(&format!("stage{i}.{n}"), v));
        }
    }
}

/// The 3D shape encoder over voxel values: `[B, 1, r, r, r]` in,
/// `[B, d_v]` flattened features out.
#[derive(Debug, Clone)]
pub struct ShapeEncoder {
    spec: ShapeEncoderSpec,
    convs: Vec<Conv3d>,
    pools: [MaxPool3d; 2],
}

pub struct ShapeEncoderCache {
    conv_inputs: Vec<Array5<f64>>,
    conv_outs: Vec<Array5<f64>>,
    pools: Vec<Pool3dCache>,
}

impl ShapeEncoder {
    pub fn new(spec: &ShapeEncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let p = spec.paddings();
        let mut convs = Vec::new();
        let mut c_in = 1;
        for i in 0..4 {
            convs.push(Conv3d::new(
                c_in,
                spec.channels[i],
                spec.kernels[i],
                spec.strides[i],
                p[i],
                rng,
            ));
            c_in = spec.channels[i];
        }
        Ok(ShapeEncoder {
            spec: spec.clone(),
            convs,
            pools: [MaxPool3d::new(2, 2), MaxPool3d::new(2, 2)],
        })
    }

    pub fn spec(&self) -> &ShapeEncoderSpec {
        &self.spec
    }

    pub fn forward(&mut self, x: &Array5<f64>) -> (Array2<f64>, ShapeEncoderCache) {
        assert_eq!(x.dim().1, 1, "shape encoder expects one input channel");
        assert_eq!(
            x.dim().2,
            self.spec.input_resolution,
            "shape encoder resolution mismatch"
        );
        let batch = x.dim().0;
        let mut cur = x.clone();
        let mut conv_inputs = Vec::new();
        let mut conv_outs = Vec::new();
        let mut pools = Vec::new();
        for i in 0..4 {
            conv_inputs.push(cur.clone());
            let pre = self.convs[i].forward(&cur);
            conv_outs.push(pre.clone());
            cur = leaky_relu(&pre);
            if i < 2 {
                let (pooled, pc) = self.pools[i].forward(&cur);
                pools.push(pc);
                cur = pooled;
            }
        }
        let flat = cur
            .into_shape_with_order((batch, self.spec.output_dim()))
            .unwrap();
        (
            flat,
            ShapeEncoderCache {
                conv_inputs,
                conv_outs,
                pools,
            },
        )
    }

    pub fn backward(&mut self, grad: &Array2<f64>, cache: &ShapeEncoderCache) -> Array5<f64> {
        let batch = grad.dim().0;
        let s = self.spec.final_spatial();
        let c = self.spec.channels[3];
        let mut g = grad
            .view()
            .into_shape_with_order((batch, c, s, s, s))
            .unwrap()
            .to_owned();
        for i in (0..4).rev() {
            if i < 2 {
                g = self.pools[i].backward(&g, &cache.pools[i]);
            }
            let g_pre = leaky_relu_backward(&g, &cache.conv_outs[i]);
            g = self.convs[i].backward(&g_pre, &cache.conv_inputs[i]);
        }
        g
    }
}

impl Module for ShapeEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_params(&mut |n, p| f(&format!("conv{i}.{n}"), p));
        }
    }
}

/// Transposed conv + batch norm + rectifier, the decoder building block.
#[derive(Debug, Clone)]
struct DeconvBnRelu3d {
    deconv: ConvTranspose3d,
    bn: BatchNorm,
}

struct DeconvBnRelu3dCache {
    x: Array5<f64>,
    bn: BnCache,
    bn_out: Array5<f64>,
}

impl DeconvBnRelu3d {
    fn forward(&mut self, x: &Array5<f64>, train: bool) -> (Array5<f64>, DeconvBnRelu3dCache) {
        let pre = self.deconv.forward(x);
        let (bn_out, bn) = self.bn.forward3d(&pre, train);
        let y = relu(&bn_out);
        (
            y,
            DeconvBnRelu3dCache {
                x: x.clone(),
                bn,
                bn_out,
            },
        )
    }

    fn backward(&mut self, grad: &Array5<f64>, cache: &DeconvBnRelu3dCache) -> Array5<f64> {
        let g = relu_backward(grad, &cache.bn_out);
        let g = self.bn.backward3d(&g, &cache.bn);
        self.deconv.backward(&g, &cache.x)
    }
}

impl Module for DeconvBnRelu3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        self.deconv.visit_params(&mut |n, p| f(&format!("deconv.{n}"), p));
        self.bn.visit_params(&mut |n, p| f(&format!("bn.{n}"), p));
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.bn.visit_buffers(&mut |n, b| f(&format!("bn.{n}"), b));
    }
}

/// The 3D shape decoder: conditioning embedding in, occupancy
/// probabilities out (sigmoid, strictly inside (0, 1)).
#[derive(Debug, Clone)]
pub struct ShapeDecoder {
    spec: DecoderSpec,
    stages: Vec<DeconvBnRelu3d>,
    last: ConvTranspose3d,
}

pub struct ShapeDecoderCache {
    stages: Vec<DeconvBnRelu3dCache>,
    last_in: Array5<f64>,
    /// Sigmoid output, needed for its backward.
    pub probs: Array5<f64>,
}

impl ShapeDecoder {
    pub fn new(spec: &DecoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::new();
        let mut c_in = spec.input_channels;
        for &c in &spec.stage_channels[..spec.stage_channels.len() - 1] {
            stages.push(DeconvBnRelu3d {
                deconv: ConvTranspose3d::new(c_in, c, spec.kernel, spec.stride, spec.padding, rng),
                bn: BatchNorm::new(c),
            });
            c_in = c;
        }
        let last = ConvTranspose3d::new(c_in, 1, spec.kernel, spec.stride, spec.padding, rng);
        Ok(ShapeDecoder {
            spec: spec.clone(),
            stages,
            last,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    /// `embedding: [B, input_channels]` in, `[B, 1, r, r, r]` probabilities out.
    pub fn forward(&mut self, embedding: &Array2<f64>, train: bool) -> (Array5<f64>, ShapeDecoderCache) {
        let (batch, width) = embedding.dim();
        assert_eq!(width, self.spec.input_channels, "decoder embedding width mismatch");
        let mut cur = embedding
            .view()
            .into_shape_with_order((batch, width, 1, 1, 1))
            .unwrap()
            .to_owned();
        let mut stage_caches = Vec::new();
        for stage in &mut self.stages {
            let (y, cache) = stage.forward(&cur, train);
            stage_caches.push(cache);
            cur = y;
        }
        let last_in = cur;
        let logits = self.last.forward(&last_in);
        let probs = sigmoid(&logits);
        (
            probs.clone(),
            ShapeDecoderCache {
                stages: stage_caches,
                last_in,
                probs,
            },
        )
    }

    /// Takes the gradient w.r.t. the probabilities, returns the gradient
    /// w.r.t. the conditioning embedding.
    pub fn backward(&mut self, grad_probs: &Array5<f64>, cache: &ShapeDecoderCache) -> Array2<f64> {
        let g = sigmoid_backward(grad_probs, &cache.probs);
        let mut g = self.last.backward(&g, &cache.last_in);
        for (stage, c) in self.stages.iter_mut().zip(cache.stages.iter()).rev() {
            g = stage.backward(&g, c);
        }
        let (batch, width, _, _, _) = g.dim();
        g.into_shape_with_order((batch, width)).unwrap()
    }
}

impl Module for ShapeDecoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&mut |n, p| f(&format!("stage{i}.{n}"), p));
        }
        self.last.visit_params(&mut |n, p| f(&format!("last.{n}"), p));
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&mut |n, b| f(&format!("stage{i}.{n}"), b));
        }
    }
}

/// Converts one batch row of decoder output to a probability volume.
pub fn probs_row_to_volume(probs: &Array5<f64>, row: usize) -> crate::voxelcore::ProbVolume {
    let r = probs.dim().2;
    let data: Vec<f64> = probs
        .index_axis(Axis(0), row)
        .index_axis(Axis(0), 0)
        .iter()
        .copied()
        .collect();
    crate::voxelcore::ProbVolume::from_raw(r, data).expect("sigmoid output in range")
}

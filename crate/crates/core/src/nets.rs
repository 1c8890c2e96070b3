//! Learnable blocks: the two encoders, the two decoder heads and the
//! patch discriminators that critique encoder features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_len, Element, Tensor};

/// Derives a stable 64-bit seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded with the base through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Kaiming-uniform values, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
fn kaiming_uniform<T: Element>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, data)
}

/// Walks named parameters in a fixed order.
pub trait Params<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone)]
pub struct Conv<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv<T> {
    pub fn new(seed: u64, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Conv {
            weight: kaiming_uniform(seed, &join(name, "weight"), &[cout, cin, k, k], cin * k * k)?,
            bias: Tensor::param(&[cout], vec![T::zero(); cout])?,
            stride,
            pad,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    /// Forward with parameters treated as constants.
    pub fn forward_frozen(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight.detach(), Some(&self.bias.detach()), self.stride, self.pad)
    }
}

impl<T: Element> Params<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully-connected layer on `N x in` inputs; weight is `out x in`.
#[derive(Clone)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: kaiming_uniform(seed, &join(name, "weight"), &[fan_out, fan_in], fan_in)?,
            bias: Tensor::param(&[fan_out], vec![T::zero(); fan_out])?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight.transpose()?)?.add(&self.bias)
    }
}

impl<T: Element> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output channels of each stride-2 stage; the last entry is the
    /// feature width C.
    pub widths: Vec<usize>,
    /// Extra stride-1 3x3 convolutions after each downsampling conv.
    pub refine_convs: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 64],
            refine_convs: 0,
        }
    }
}

impl EncoderConfig {
    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn downsample(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "encoder widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    /// Checks that an `h x w` image maps to an integral feature grid.
    pub fn check_input(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.downsample();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not divisible by the encoder downsample factor {f}"
            )));
        }
        Ok((h / f, w / f))
    }
}

/// Small CNN: per stage a 3x3 stride-2 conv (+ optional stride-1 convs),
/// each followed by ReLU.
#[derive(Clone)]
pub struct Encoder<T: Element> {
    pub layers: Vec<Conv<T>>,
    pub cfg: EncoderConfig,
}

impl<T: Element> Encoder<T> {
    pub fn new(seed: u64, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut cin = 3;
        for &w in &cfg.widths {
            layers.push(Conv::new(seed, &join(name, &format!("l{}", layers.len())), cin, w, 3, 2, 1)?);
            for _ in 0..cfg.refine_convs {
                layers.push(Conv::new(seed, &join(name, &format!("l{}", layers.len())), w, w, 3, 1, 1)?);
            }
            cin = w;
        }
        Ok(Encoder {
            layers,
            cfg: cfg.clone(),
        })
    }

    /// `N x 3 x H x W` images to `N x C x H/f x W/f` features.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != 3 {
            return Err(Error::InvalidShape(format!(
                "encoder expects N x 3 x H x W, got {:?}",
                x.shape()
            )));
        }
        self.cfg.check_input(x.shape()[2], x.shape()[3])?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.relu();
        }
        Ok(h)
    }
}

impl<T: Element> Params<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("l{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("l{i}")), f);
        }
    }
}

/// The four style features of one (source, target) batch pair.
#[derive(Clone)]
pub struct FeatureQuad<T: Element> {
    /// E_s(x_s)
    pub ss: Tensor<T>,
    /// E_t(x_s)
    pub st: Tensor<T>,
    /// E_t(x_t)
    pub tt: Tensor<T>,
    /// E_s(x_t)
    pub ts: Tensor<T>,
}

pub fn quad_forward<T: Element>(
    enc_s: &Encoder<T>,
    enc_t: &Encoder<T>,
    x_s: &Tensor<T>,
    x_t: &Tensor<T>,
) -> Result<FeatureQuad<T>> {
    if x_s.rank() != 4 || x_t.rank() != 4 || x_s.shape()[2..] != x_t.shape()[2..] {
        return Err(Error::shape("quad_forward", x_s.shape(), x_t.shape()));
    }
    Ok(FeatureQuad {
        ss: enc_s.encode(x_s)?,
        st: enc_t.encode(x_s)?,
        tt: enc_t.encode(x_t)?,
        ts: enc_s.encode(x_t)?,
    })
}

/// 3x3 conv + ReLU, 1x1 conv to two class logits, bilinear upsampling.
#[derive(Clone)]
pub struct Head<T: Element> {
    pub hidden: Conv<T>,
    pub classifier: Conv<T>,
    pub upsample: usize,
}

impl<T: Element> Head<T> {
    pub fn new(seed: u64, name: &str, in_channels: usize, width: usize, upsample: usize) -> Result<Self> {
        Ok(Head {
            hidden: Conv::new(seed, &join(name, "hidden"), in_channels, width, 3, 1, 1)?,
            classifier: Conv::new(seed, &join(name, "classifier"), width, 2, 1, 1, 0)?,
            upsample,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.in_channels()
    }

    /// `N x (C + C'') x h x w` selected features to `N x 2 x (h*f) x (w*f)` logits.
    pub fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        if f.rank() != 4 || f.shape()[1] != self.in_channels() {
            return Err(Error::InvalidShape(format!(
                "head expects N x {} x h x w, got {:?}",
                self.in_channels(),
                f.shape()
            )));
        }
        let h = self.hidden.forward(f)?.relu();
        self.classifier.forward(&h)?.upsample_bilinear(self.upsample)
    }
}

impl<T: Element> Params<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Per-pixel argmax over the channel axis of `N x K x H x W` scores
/// (ties go to the lower class index).
pub fn argmax_mask<T: Element>(scores: &Tensor<T>) -> Vec<u8> {
    let s = scores.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let d = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        let base = i * k * plane;
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * plane + p] > d[base + best * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Output channels of the first three layers; the last layer emits 1.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub pad: usize,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![64, 128, 256],
            strides: vec![2, 2, 1, 1],
            kernel: 4,
            pad: 1,
            slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    /// Patch-map extent for a square-ish `h x w` feature, or `None` when
    /// some layer would not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut dims = (h, w);
        for &s in &self.strides {
            dims = (
                conv_out_len(dims.0, self.kernel, s, self.pad).filter(|&v| v > 0)?,
                conv_out_len(dims.1, self.kernel, s, self.pad).filter(|&v| v > 0)?,
            );
        }
        Some(dims)
    }

    /// Smallest square feature extent every layer accepts.
    pub fn min_feature_size(&self) -> usize {
        (1..1024).find(|&s| self.output_size(s, s).is_some()).unwrap_or(usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() + 1 != self.strides.len() {
            return Err(Error::Config(format!(
                "discriminator needs one more stride than hidden widths: {:?} vs {:?}",
                self.channels, self.strides
            )));
        }
        Ok(())
    }
}

/// PatchGAN critic: k x k convs with leaky ReLU between layers and no
/// normalization; emits a one-channel map of raw logits.
#[derive(Clone)]
pub struct Discriminator<T: Element> {
    pub layers: Vec<Conv<T>>,
    pub slope: f64,
}

impl<T: Element> Discriminator<T> {
    pub fn new(seed: u64, name: &str, in_channels: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut cin = in_channels;
        let outs = cfg.channels.iter().copied().chain(std::iter::once(1));
        for (i, (cout, &stride)) in outs.zip(&cfg.strides).enumerate() {
            layers.push(Conv::new(seed, &join(name, &format!("l{i}")), cin, cout, cfg.kernel, stride, cfg.pad)?);
            cin = cout;
        }
        Ok(Discriminator {
            layers,
            slope: cfg.slope,
        })
    }

    fn run(&self, f: &Tensor<T>, frozen: bool) -> Result<Tensor<T>> {
        let mut h = f.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if frozen {
                layer.forward_frozen(&h)
            } else {
                layer.forward(&h)
            }
            .map_err(|e| match e {
                Error::InvalidShape(msg) => Error::InvalidShape(format!("discriminator layer {i}: {msg}")),
                other => other,
            })?;
            if i < last {
                h = h.leaky_relu(self.slope);
            }
        }
        Ok(h)
    }

    /// Patch logits for `N x C x h x w` features.
    pub fn discriminate(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(f, false)
    }

    /// Same map with the critic's weights held constant, so gradients reach
    /// only the features.
    pub fn discriminate_frozen(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(f, true)
    }
}

impl<T: Element> Params<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("l{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("l{i}")), f);
        }
    }
}

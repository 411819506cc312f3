//! Encoder–decoder with skip connections at every level.
//!
//! A 3×3 stem lifts the input to `base` channels at full resolution. Each of
//! `levels` encoder blocks halves the spatial size and doubles the channels
//! (4×4 kernel, stride 2, padding 1), followed by batch normalization and a
//! rectifier. Decoder blocks mirror them with transposed convolutions; every
//! decoder block after the innermost takes the previous decoder output
//! concatenated with the matching encoder output. A 1×1 head maps the last
//! decoder output concatenated with the stem output to the requested
//! channels, optionally through a sigmoid.

use cfrc_core::{Error, Result, Scalar};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Mode, Param, Relu, Sigmoid};
use crate::tensor::{concat_channels, split_channels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    /// Side length of the square input.
    pub resolution: usize,
    pub head: Head,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl UNetConfig {
    /// Full-size network: 256×256 input, 8 levels, 2048×1×1 bottleneck.
    pub fn full(in_channels: usize, out_channels: usize, head: Head) -> Self {
        UNetConfig {
            in_channels,
            out_channels,
            levels: 8,
            base_channels: 8,
            bottleneck_channels: 2048,
            resolution: 256,
            head,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Small network for tests: `levels` levels at the given resolution.
    pub fn reduced(in_channels: usize, out_channels: usize, head: Head, levels: usize, resolution: usize) -> Self {
        UNetConfig {
            levels,
            resolution,
            bottleneck_channels: 8 << levels,
            ..Self::full(in_channels, out_channels, head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("U-Net config: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 || self.levels == 0 {
            return bad("channel counts and levels must be positive".into());
        }
        if self.levels > 16 || self.base_channels.checked_shl(self.levels as u32) != Some(self.bottleneck_channels) {
            return bad(format!(
                "base_channels * 2^levels = {} * 2^{} must equal bottleneck_channels = {}",
                self.base_channels, self.levels, self.bottleneck_channels
            ));
        }
        if self.resolution == 0 || self.resolution % (1 << self.levels) != 0 {
            return bad(format!(
                "resolution {} must be a positive multiple of 2^{}",
                self.resolution, self.levels
            ));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("batch-norm eps must be positive and momentum in (0, 1]".into());
        }
        Ok(())
    }

    /// Output channel count of encoder level `k` (level 0 is the stem).
    pub fn channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..=self.levels).map(|k| self.channels(k)).collect()
    }

    /// Number of trainable scalars, from the layer shapes alone.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let bn = |c: usize| 2 * c;
        let mut total = conv(self.in_channels, self.base_channels, 3) + bn(self.base_channels);
        for k in 1..=self.levels {
            total += conv(self.channels(k - 1), self.channels(k), 4) + bn(self.channels(k));
            let input = if k == self.levels { self.channels(k) } else { 2 * self.channels(k) };
            total += conv(input, self.channels(k - 1), 4) + bn(self.channels(k - 1));
        }
        total + conv(2 * self.base_channels, self.out_channels, 1)
    }
}

#[derive(Debug, Clone)]
struct Block<T, C> {
    conv: C,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

trait Layer<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T>;
    fn backward(&mut self, dy: &Array4<T>) -> Array4<T>;
    fn params(&mut self) -> [(&'static str, &mut Param<T>); 2];
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        Conv2d::forward(self, x, mode)
    }
    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        Conv2d::backward(self, dy)
    }
    fn params(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        self.params_mut()
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        ConvTranspose2d::forward(self, x, mode)
    }
    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        ConvTranspose2d::backward(self, dy)
    }
    fn params(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        self.params_mut()
    }
}

impl<T: Scalar, C: Layer<T>> Block<T, C> {
    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let y = self.conv.forward(x, mode);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(&y, mode)
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let g = self.relu.backward(dy);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, p) in self.conv.params() {
            f(&format!("{prefix}.conv.{name}"), p);
        }
        for (name, p) in self.bn.params_mut() {
            f(&format!("{prefix}.bn.{name}"), p);
        }
    }
}

/// The network plus per-level skip switches used for ablation studies.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    stem: Block<T, Conv2d<T>>,
    down: Vec<Block<T, Conv2d<T>>>,
    /// `up[k - 1]` maps level `k` back to level `k - 1`.
    up: Vec<Block<T, ConvTranspose2d<T>>>,
    head: Conv2d<T>,
    sigmoid: Sigmoid<T>,
    /// `skip_enabled[k]` gates the encoder feature of level `k`; a disabled
    /// skip feeds zeros in its place.
    skip_enabled: Vec<bool>,
    bottleneck_dim: Option<(usize, usize, usize, usize)>,
}

impl<T: Scalar> UNet<T> {
    /// Builds the network with initialization fully determined by `seed`.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = |c: usize| BatchNorm2d::new(c, config.bn_momentum, config.bn_eps);
        let stem = Block {
            conv: Conv2d::new(&mut rng, config.in_channels, config.base_channels, 3, 1, 1),
            bn: bn(config.base_channels),
            relu: Relu::default(),
        };
        let down = (1..=config.levels)
            .map(|k| Block {
                conv: Conv2d::new(&mut rng, config.channels(k - 1), config.channels(k), 4, 2, 1),
                bn: bn(config.channels(k)),
                relu: Relu::default(),
            })
            .collect();
        let up = (1..=config.levels)
            .map(|k| {
                let input = if k == config.levels { config.channels(k) } else { 2 * config.channels(k) };
                Block {
                    conv: ConvTranspose2d::new(&mut rng, input, config.channels(k - 1), 4, 2, 1),
                    bn: bn(config.channels(k - 1)),
                    relu: Relu::default(),
                }
            })
            .collect();
        let head = Conv2d::new(&mut rng, 2 * config.base_channels, config.out_channels, 1, 1, 0);
        let skip_enabled = vec![true; config.levels];
        Ok(UNet {
            config,
            stem,
            down,
            up,
            head,
            sigmoid: Sigmoid::default(),
            skip_enabled,
            bottleneck_dim: None,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Shape of the innermost feature map seen by the latest forward pass.
    pub fn last_bottleneck_dim(&self) -> Option<(usize, usize, usize, usize)> {
        self.bottleneck_dim
    }

    /// Enables or disables the skip connection of encoder level `k`
    /// (0 is the stem; the innermost level has no skip).
    pub fn set_skip(&mut self, level: usize, enabled: bool) {
        self.skip_enabled[level] = enabled;
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let c = &self.config;
        let (_, ch, h, w) = x.dim();
        if ch != c.in_channels || h != c.resolution || w != c.resolution || x.dim().0 == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![x.dim().0.max(1), c.in_channels, c.resolution, c.resolution],
                got: x.shape().to_vec(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn skip(&self, level: usize, feature: &Array4<T>) -> Array4<T> {
        if self.skip_enabled[level] {
            feature.clone()
        } else {
            Array4::zeros(feature.raw_dim())
        }
    }

    /// Maps `(batch, in, r, r)` to `(batch, out, r, r)`. In `Train` mode
    /// batch statistics are used and caches are kept for [`UNet::backward`].
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        self.check_input(x)?;
        let mut enc = Vec::with_capacity(self.config.levels + 1);
        enc.push(self.stem.forward(x, mode));
        for k in 0..self.config.levels {
            let next = self.down[k].forward(&enc[k], mode);
            enc.push(next);
        }
        let levels = self.config.levels;
        self.bottleneck_dim = Some(enc[levels].dim());
        let mut d = self.up[levels - 1].forward(&enc[levels], mode);
        for k in (1..levels).rev() {
            let input = concat_channels(d.view(), self.skip(k, &enc[k]).view());
            d = self.up[k - 1].forward(&input, mode);
        }
        let input = concat_channels(d.view(), self.skip(0, &enc[0]).view());
        let mut y = self.head.forward(&input, mode);
        if self.config.head == Head::Sigmoid {
            y = self.sigmoid.forward(&y, mode);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for `dy = ∂L/∂output` and returns
    /// `∂L/∂input`. Must follow a `Train` forward.
    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let levels = self.config.levels;
        let mut g = dy.clone();
        if self.config.head == Head::Sigmoid {
            g = self.sigmoid.backward(&g);
        }
        let g = self.head.backward(&g);
        let base = self.config.base_channels;
        let (mut gd, g_stem_skip) = split_channels(&g, base);
        // Gradients flowing into each encoder output from skips.
        let mut enc_grad: Vec<Option<Array4<T>>> = vec![None; levels + 1];
        if self.skip_enabled[0] {
            enc_grad[0] = Some(g_stem_skip);
        }
        for k in 1..levels {
            let gi = self.up[k - 1].backward(&gd);
            let (g_dec, g_skip) = split_channels(&gi, self.config.channels(k));
            if self.skip_enabled[k] {
                enc_grad[k] = Some(g_skip);
            }
            gd = g_dec;
        }
        let mut g_enc = self.up[levels - 1].backward(&gd);
        for k in (1..=levels).rev() {
            if let Some(extra) = enc_grad[k].take() {
                g_enc += &extra;
            }
            g_enc = self.down[k - 1].backward(&g_enc);
        }
        if let Some(extra) = enc_grad[0].take() {
            g_enc += &extra;
        }
        self.stem.backward(&g_enc)
    }

    /// Calls `f` on every parameter with a stable dotted name.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit("stem", f);
        for (k, b) in self.down.iter_mut().enumerate() {
            b.visit(&format!("down{}", k + 1), f);
        }
        for (k, b) in self.up.iter_mut().enumerate() {
            b.visit(&format!("up{}", k + 1), f);
        }
        for (name, p) in self.head.params_mut() {
            f(&format!("head.{name}"), p);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn trainable_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }
}

//! Small U-Net score network over `channels x frames x bins` stacks, with
//! Gaussian Fourier features of the diffusion time.

use ndarray::{concatenate, s, Array1, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Conv2d, Linear, Module, Param};
use crate::Scalar;

/// Input channels: real and imaginary parts of the state offset from the
/// conditioner, then of the conditioner itself.
pub const IN_CHANNELS: usize = 4;
pub const OUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level; each level after the first
    /// halves both spatial axes.
    pub channel_mults: Vec<usize>,
    /// Number of random frequencies (the embedding has twice as many entries).
    pub fourier_features: usize,
    /// Standard deviation of the random frequencies.
    pub fourier_scale: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// Three levels, 16 base channels.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            fourier_features: 16,
            fourier_scale: 16.0,
        }
    }

    /// Seven levels down to a 4x4 bottleneck on 256x256 tiles with 256
    /// channels there. Far too slow for a CPU; kept for completeness.
    pub fn full() -> Self {
        Self {
            base_channels: 128,
            channel_mults: vec![1, 1, 2, 2, 2, 2, 2],
            fourier_features: 128,
            fourier_scale: 16.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) || self.fourier_features == 0 {
            return Err(Error::InvalidConfig(format!("degenerate U-Net config {self:?}")));
        }
        Ok(())
    }

    /// Both spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }
}

fn avg_pool2<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let q = T::lit(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, i, j)| {
        (x[[k, 2 * i, 2 * j]] + x[[k, 2 * i + 1, 2 * j]] + x[[k, 2 * i, 2 * j + 1]] + x[[k, 2 * i + 1, 2 * j + 1]]) * q
    })
}

fn avg_pool2_backward<T: Scalar>(g: &Array3<T>) -> Array3<T> {
    let (c, h, w) = g.dim();
    let q = T::lit(0.25);
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| g[[k, i / 2, j / 2]] * q)
}

fn upsample2<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| x[[k, i / 2, j / 2]])
}

fn upsample2_backward<T: Scalar>(g: &Array3<T>) -> Array3<T> {
    let (c, h, w) = g.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, i, j)| {
        g[[k, 2 * i, 2 * j]] + g[[k, 2 * i + 1, 2 * j]] + g[[k, 2 * i, 2 * j + 1]] + g[[k, 2 * i + 1, 2 * j + 1]]
    })
}

/// Pre-activation residual block with an additive time embedding; the sum is
/// scaled by `1/sqrt(2)`.
#[derive(Debug, Clone)]
struct ResBlock<T> {
    conv1: Conv2d<T>,
    embed: Linear<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

struct ResCache<T> {
    x: Array3<T>,
    h: Array3<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, rng),
            embed: Linear::new(&format!("{name}.embed"), embed_dim, cout, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, rng)),
        }
    }

    fn forward(&self, x: Array3<T>, emb: &Array1<T>) -> (Array3<T>, ResCache<T>) {
        let mut h = self.conv1.forward(&silu(&x));
        let e = self.embed.forward(emb);
        h += &e.insert_axis(Axis(1)).insert_axis(Axis(2));
        let mut out = self.conv2.forward(&silu(&h));
        match &self.skip {
            Some(conv) => out += &conv.forward(&x),
            None => out += &x,
        }
        out *= T::FRAC_1_SQRT_2();
        (out, ResCache { x, h })
    }

    /// Returns the gradient of the block input and accumulates the one of
    /// the embedding into `g_emb`.
    fn backward(&mut self, cache: ResCache<T>, grad: &Array3<T>, emb: &Array1<T>, g_emb: &mut Array1<T>) -> Array3<T> {
        let g = grad * T::FRAC_1_SQRT_2();
        let g_act2 = self.conv2.backward(&silu(&cache.h), &g);
        let g_h = silu_backward(&cache.h, &g_act2);
        *g_emb += &self.embed.backward(emb, &g_h.sum_axis(Axis(2)).sum_axis(Axis(1)));
        let g_act1 = self.conv1.backward(&silu(&cache.x), &g_h);
        let mut gx = silu_backward(&cache.x, &g_act1);
        match &mut self.skip {
            Some(conv) => gx += &conv.backward(&cache.x, &g),
            None => gx += &g,
        }
        gx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.embed.params());
        p.extend(self.conv2.params());
        if let Some(c) = &self.skip {
            p.extend(c.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.embed.params_mut());
        p.extend(self.conv2.params_mut());
        if let Some(c) = &mut self.skip {
            p.extend(c.params_mut());
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub config: UNetConfig,
    /// Random Fourier frequencies; never trained.
    fourier: Param<T>,
    dense1: Linear<T>,
    dense2: Linear<T>,
    conv_in: Conv2d<T>,
    down: Vec<ResBlock<T>>,
    mid: ResBlock<T>,
    /// Deepest level first.
    up: Vec<ResBlock<T>>,
    conv_out: Conv2d<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct UNetCache<T> {
    feats: Array1<T>,
    pre1: Array1<T>,
    pre2: Array1<T>,
    emb: Array1<T>,
    input: Array3<T>,
    down: Vec<ResCache<T>>,
    mid: ResCache<T>,
    up: Vec<ResCache<T>>,
    /// Channel counts of the two halves fed to each up block.
    up_split: Vec<usize>,
    last: Array3<T>,
}

impl<T: Scalar> UNet<T> {
    /// Random init; the output convolution starts at zero.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fourier = Param::zeros("time.fourier", &[config.fourier_features]);
        let scale = config.fourier_scale;
        fourier.value.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(scale * z)
        });
        let e = config.embed_dim();
        let dense1 = Linear::new("time.dense1", 2 * config.fourier_features, e, &mut rng);
        let dense2 = Linear::new("time.dense2", e, e, &mut rng);
        let conv_in = Conv2d::new("conv_in", IN_CHANNELS, config.base_channels, 3, &mut rng);
        let levels = config.channel_mults.len();
        let mut down = Vec::with_capacity(levels);
        let mut prev = config.base_channels;
        for l in 0..levels {
            down.push(ResBlock::new(&format!("down{l}"), prev, config.channels(l), e, &mut rng));
            prev = config.channels(l);
        }
        let mid = ResBlock::new("mid", prev, prev, e, &mut rng);
        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            up.push(ResBlock::new(&format!("up{l}"), prev + config.channels(l), config.channels(l), e, &mut rng));
            prev = config.channels(l);
        }
        let mut conv_out = Conv2d::new("conv_out", config.base_channels, OUT_CHANNELS, 3, &mut rng);
        conv_out.zero_init();
        Ok(Self {
            config,
            fourier,
            dense1,
            dense2,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        })
    }

    pub fn check_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        let m = self.config.size_multiple();
        if dim.0 != IN_CHANNELS || dim.1 == 0 || dim.1 % m != 0 || dim.2 == 0 || dim.2 % m != 0 {
            return Err(Error::shape("U-Net input", format!("({IN_CHANNELS}, k*{m}, k*{m})"), dim));
        }
        Ok(())
    }

    fn fourier_features(&self, t: f64) -> Array1<T> {
        let n = self.config.fourier_features;
        let tau = T::lit(2.0 * std::f64::consts::PI * t);
        Array1::from_shape_fn(2 * n, |i| {
            let a = self.fourier.value[i % n] * tau;
            if i < n {
                a.sin()
            } else {
                a.cos()
            }
        })
    }

    pub fn forward(&self, input: &Array3<T>, t: f64) -> Result<(Array3<T>, UNetCache<T>)> {
        self.check_input(input.dim())?;
        let feats = self.fourier_features(t);
        let pre1 = self.dense1.forward(&feats);
        let pre2 = self.dense2.forward(&silu(&pre1));
        let emb = silu(&pre2);

        let levels = self.down.len();
        let mut h = self.conv_in.forward(input);
        let mut down = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for (l, block) in self.down.iter().enumerate() {
            let (out, cache) = block.forward(h, &emb);
            down.push(cache);
            h = if l + 1 < levels { avg_pool2(&out) } else { out.clone() };
            skips.push(out);
        }
        let (mut h, mid) = self.mid.forward(h, &emb);
        let mut up = Vec::with_capacity(levels);
        let mut up_split = Vec::with_capacity(levels);
        for (i, block) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            if i > 0 {
                h = upsample2(&h);
            }
            up_split.push(h.dim().0);
            let cat = concatenate(Axis(0), &[h.view(), skip.view()]).expect("matching spatial size");
            let (out, cache) = block.forward(cat, &emb);
            up.push(cache);
            h = out;
        }
        let out = self.conv_out.forward(&silu(&h));
        Ok((
            out,
            UNetCache {
                feats,
                pre1,
                pre2,
                emb,
                input: input.clone(),
                down,
                mid,
                up,
                up_split,
                last: h,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/d output`.
    pub fn backward(&mut self, cache: UNetCache<T>, grad: &Array3<T>) {
        let UNetCache {
            feats,
            pre1,
            pre2,
            emb,
            input,
            down,
            mid,
            up,
            up_split,
            last,
        } = cache;
        let levels = self.down.len();
        let mut g_emb = Array1::zeros(emb.len());
        let g_act = self.conv_out.backward(&silu(&last), grad);
        let mut g = silu_backward(&last, &g_act);
        let mut g_skips = Vec::with_capacity(levels);
        for (i, (block, c)) in self.up.iter_mut().zip(up).enumerate().rev() {
            let g_cat = block.backward(c, &g, &emb, &mut g_emb);
            let split = up_split[i];
            g_skips.push(g_cat.slice(s![split.., .., ..]).to_owned());
            g = g_cat.slice(s![..split, .., ..]).to_owned();
            if i > 0 {
                g = upsample2_backward(&g);
            }
        }
        // g_skips is now ordered shallowest level first, like `self.down`
        g = self.mid.backward(mid, &g, &emb, &mut g_emb);
        for (l, (block, c)) in self.down.iter_mut().zip(down).enumerate().rev() {
            let mut g_out = std::mem::take(&mut g_skips[l]);
            if l + 1 < levels {
                g_out += &avg_pool2_backward(&g);
            } else {
                g_out += &g;
            }
            g = block.backward(c, &g_out, &emb, &mut g_emb);
        }
        self.conv_in.backward(&input, &g);
        let g_pre2 = silu_backward(&pre2, &g_emb);
        let g_act1 = self.dense2.backward(&silu(&pre1), &g_pre2);
        let g_pre1 = silu_backward(&pre1, &g_act1);
        self.dense1.backward(&feats, &g_pre1);
    }
}

impl<T: Scalar> Module<T> for UNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.fourier];
        p.extend(self.dense1.params());
        p.extend(self.dense2.params());
        p.extend(self.conv_in.params());
        for b in &self.down {
            p.extend(b.params());
        }
        p.extend(self.mid.params());
        for b in &self.up {
            p.extend(b.params());
        }
        p.extend(self.conv_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = vec![&mut self.fourier];
        p.extend(self.dense1.params_mut());
        p.extend(self.dense2.params_mut());
        p.extend(self.conv_in.params_mut());
        for b in &mut self.down {
            p.extend(b.params_mut());
        }
        p.extend(self.mid.params_mut());
        for b in &mut self.up {
            p.extend(b.params_mut());
        }
        p.extend(self.conv_out.params_mut());
        p
    }
}

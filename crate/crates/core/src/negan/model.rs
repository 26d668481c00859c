//! Generator and discriminator networks: a scaled-down image-to-image
//! translation pair. The generator takes a 2-channel input (clean image,
//! scaled noise image) and emits one tanh-bounded channel; each dose level
//! gets its own patch discriminator.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::nn::{init, Graph, ModelParams, PadMode, Scalar, Tensor, Var};
use crate::rng;

const INIT_TAG: u64 = 0x6d6f64656c;

/// Affine map between attenuation values and the network's [-1, 1] range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub center: f64,
    pub width: f64,
}

impl Window {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !center.is_finite() {
            return Err(Error::Invalid(format!(
                "normalization window needs finite center and positive width, got {center}/{width}"
            )));
        }
        Ok(Window { center, width })
    }

    #[inline]
    pub fn norm(&self, x: f64) -> f64 {
        2.0 * (x - self.center) / self.width
    }

    #[inline]
    pub fn denorm(&self, y: f64) -> f64 {
        self.center + 0.5 * self.width * y
    }

    /// Noise images are differences, so they scale without the center shift.
    #[inline]
    pub fn norm_diff(&self, n: f64) -> f64 {
        2.0 * n / self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// channel count after the first generator conv; deeper stages double it
    pub base_width: usize,
    pub res_blocks: usize,
    /// stride-2 layers in each discriminator
    pub disc_layers: usize,
    /// channel count after the first discriminator conv; judging noise
    /// texture takes a wider filter bank than synthesizing it, so this is
    /// decoupled from the generator width
    pub disc_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_width: 16,
            res_blocks: 2,
            disc_layers: 3,
            disc_width: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NeganModel<S: Scalar> {
    pub arch: ArchConfig,
    pub window: Window,
    /// trained noise factor per lower-dose level (length = discriminator count)
    pub k_train: Vec<f64>,
    pub gen: ModelParams<S>,
    pub discs: Vec<ModelParams<S>>,
    /// epochs already trained (for resume)
    pub epoch: usize,
}

fn conv_params<S: Scalar>(
    params: &mut ModelParams<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: [usize; 4],
) {
    params.insert(format!("{name}.w"), init::gaussian(rng, shape, init::WEIGHT_STD));
    params.insert(format!("{name}.b"), Tensor::zeros([shape[0], 1, 1, 1]));
}

fn conv_t_params<S: Scalar>(
    params: &mut ModelParams<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: [usize; 4], // (cin, cout, kh, kw)
) {
    params.insert(format!("{name}.w"), init::gaussian(rng, shape, init::WEIGHT_STD));
    params.insert(format!("{name}.b"), Tensor::zeros([shape[1], 1, 1, 1]));
}

fn norm_params<S: Scalar>(params: &mut ModelParams<S>, name: &str, channels: usize) {
    let mut gamma = Tensor::zeros([channels, 1, 1, 1]);
    gamma.data_mut().fill(S::from_f64(1.0));
    params.insert(format!("{name}.g"), gamma);
    params.insert(format!("{name}.be"), Tensor::zeros([channels, 1, 1, 1]));
}

pub fn init_generator<S: Scalar>(arch: &ArchConfig, seed: u64, in_channels: usize) -> ModelParams<S> {
    let mut rng = rng::stream(seed, INIT_TAG, 0, 0);
    let mut p = ModelParams::new();
    let w = arch.base_width;
    conv_params(&mut p, &mut rng, "g.enc0", [w, in_channels, 7, 7]);
    norm_params(&mut p, "g.enc0", w);
    conv_params(&mut p, &mut rng, "g.enc1", [2 * w, w, 3, 3]);
    norm_params(&mut p, "g.enc1", 2 * w);
    conv_params(&mut p, &mut rng, "g.enc2", [4 * w, 2 * w, 3, 3]);
    norm_params(&mut p, "g.enc2", 4 * w);
    for r in 0..arch.res_blocks {
        conv_params(&mut p, &mut rng, &format!("g.res{r}.a"), [4 * w, 4 * w, 3, 3]);
        norm_params(&mut p, &format!("g.res{r}.a"), 4 * w);
        conv_params(&mut p, &mut rng, &format!("g.res{r}.b"), [4 * w, 4 * w, 3, 3]);
        norm_params(&mut p, &format!("g.res{r}.b"), 4 * w);
    }
    conv_t_params(&mut p, &mut rng, "g.dec0", [4 * w, 2 * w, 3, 3]);
    norm_params(&mut p, "g.dec0", 2 * w);
    conv_t_params(&mut p, &mut rng, "g.dec1", [2 * w, w, 3, 3]);
    norm_params(&mut p, "g.dec1", w);
    conv_params(&mut p, &mut rng, "g.out", [1, w, 7, 7]);
    p
}

pub fn init_discriminator<S: Scalar>(arch: &ArchConfig, seed: u64, level: usize) -> ModelParams<S> {
    let mut rng = rng::stream(seed, INIT_TAG, 1 + level as u64, 0);
    let mut p = ModelParams::new();
    let mut cin = 1;
    for l in 0..arch.disc_layers {
        let cout = arch.disc_width << l;
        conv_params(&mut p, &mut rng, &format!("d.l{l}"), [cout, cin, 3, 3]);
        cin = cout;
    }
    conv_params(&mut p, &mut rng, "d.out", [1, cin, 3, 3]);
    p
}

impl<S: Scalar> NeganModel<S> {
    pub fn new(arch: ArchConfig, window: Window, k_train: Vec<f64>, seed: u64) -> Result<Self> {
        if k_train.is_empty() {
            return Err(Error::Invalid(
                "need at least one lower-dose level (one noise factor)".into(),
            ));
        }
        if k_train.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::Invalid(format!(
                "trained noise factors must be positive: {k_train:?}"
            )));
        }
        let discs = (0..k_train.len())
            .map(|j| init_discriminator(&arch, seed, j))
            .collect();
        Ok(NeganModel {
            gen: init_generator(&arch, seed, 2),
            discs,
            arch,
            window,
            k_train,
            epoch: 0,
        })
    }

    pub fn s_levels(&self) -> usize {
        self.k_train.len()
    }
}

fn p<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>, name: &str) -> Var {
    g.param(name, params.get(name).clone())
}

fn conv_in_relu<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Var {
    let w = p(g, params, &format!("{name}.w"));
    let b = p(g, params, &format!("{name}.b"));
    let gamma = p(g, params, &format!("{name}.g"));
    let beta = p(g, params, &format!("{name}.be"));
    let h = g.conv2d(x, w, b, stride, pad, mode);
    let h = g.instance_norm(h, gamma, beta);
    g.relu(h)
}

/// Forward pass over a normalized (N, 2, H, W) input; H and W must be
/// divisible by 4 so the two downsampling stages invert exactly.
pub fn generator_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    arch: &ArchConfig,
    x: Var,
) -> Var {
    let [_, c, h, w] = g.value(x).shape();
    assert_eq!(
        c,
        params.get("g.enc0.w").shape()[1],
        "input channel count does not match the first convolution"
    );
    assert!(
        h % 4 == 0 && w % 4 == 0,
        "generator input sides must be divisible by 4, got {h}x{w}"
    );
    let mut hid = conv_in_relu(g, params, "g.enc0", x, 1, 3, PadMode::Reflect);
    hid = conv_in_relu(g, params, "g.enc1", hid, 2, 1, PadMode::Zero);
    hid = conv_in_relu(g, params, "g.enc2", hid, 2, 1, PadMode::Zero);
    for r in 0..arch.res_blocks {
        let skip = hid;
        let a = conv_in_relu(g, params, &format!("g.res{r}.a"), hid, 1, 1, PadMode::Reflect);
        let bw = p(g, params, &format!("g.res{r}.b.w"));
        let bb = p(g, params, &format!("g.res{r}.b.b"));
        let bg = p(g, params, &format!("g.res{r}.b.g"));
        let bbe = p(g, params, &format!("g.res{r}.b.be"));
        let t = g.conv2d(a, bw, bb, 1, 1, PadMode::Reflect);
        let t = g.instance_norm(t, bg, bbe);
        hid = g.add(skip, t);
    }
    for (stage, name) in ["g.dec0", "g.dec1"].into_iter().enumerate() {
        let w = p(g, params, &format!("{name}.w"));
        let b = p(g, params, &format!("{name}.b"));
        let gamma = p(g, params, &format!("{name}.g"));
        let beta = p(g, params, &format!("{name}.be"));
        let t = g.conv_t2d(hid, w, b, 2, 1, 1);
        let t = g.instance_norm(t, gamma, beta);
        hid = g.relu(t);
        let _ = stage;
    }
    let w = p(g, params, "g.out.w");
    let b = p(g, params, "g.out.b");
    let y = g.conv2d(hid, w, b, 1, 3, PadMode::Reflect);
    g.tanh(y)
}

/// Patch discriminator over a normalized (N, 1, H, W) input; outputs
/// per-patch probabilities (N, 1, H/2^L, W/2^L).
pub fn discriminator_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    arch: &ArchConfig,
    x: Var,
) -> Var {
    let mut hid = x;
    for l in 0..arch.disc_layers {
        let w = p(g, params, &format!("d.l{l}.w"));
        let b = p(g, params, &format!("d.l{l}.b"));
        hid = g.conv2d(hid, w, b, 2, 1, PadMode::Zero);
        hid = g.leaky_relu(hid, 0.2);
    }
    let w = p(g, params, "d.out.w");
    let b = p(g, params, "d.out.b");
    let y = g.conv2d(hid, w, b, 1, 1, PadMode::Zero);
    g.sigmoid(y)
}

/// Stack normalized images into an (N, 1, H, W) tensor.
pub fn image_batch<S: Scalar>(window: &Window, images: &[&Image2D]) -> Tensor<S> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut t = Tensor::zeros([images.len(), 1, h, w]);
    let mut off = 0;
    for img in images {
        assert!(img.height() == h && img.width() == w);
        for (dst, &v) in t.data_mut()[off..off + h * w].iter_mut().zip(img.data()) {
            *dst = S::from_f64(window.norm(v));
        }
        off += h * w;
    }
    t
}

/// Stack (clean, k*noise) pairs into the generator's (N, 2, H, W) input.
pub fn gan_input_batch<S: Scalar>(
    window: &Window,
    pairs: &[(&Image2D, &Image2D)],
    k: f64,
) -> Tensor<S> {
    let (h, w) = (pairs[0].0.height(), pairs[0].0.width());
    let plane = h * w;
    let mut t = Tensor::zeros([pairs.len(), 2, h, w]);
    for (i, (x0, n0)) in pairs.iter().enumerate() {
        assert!(x0.same_shape(n0) && x0.height() == h && x0.width() == w);
        let base = i * 2 * plane;
        for (dst, &v) in t.data_mut()[base..base + plane].iter_mut().zip(x0.data()) {
            *dst = S::from_f64(window.norm(v));
        }
        for (dst, &v) in t.data_mut()[base + plane..base + 2 * plane]
            .iter_mut()
            .zip(n0.data())
        {
            *dst = S::from_f64(window.norm_diff(k * v));
        }
    }
    t
}

/// Inference rule: synthesize the dose level implied by factor k from a
/// clean image and its reference-dose noise image.
pub fn generate<S: Scalar>(
    model: &NeganModel<S>,
    x0: &Image2D,
    n0: &Image2D,
    k: f64,
) -> Result<Image2D> {
    if !(k >= 0.0) {
        return Err(Error::Invalid(format!("noise factor must be >= 0, got {k}")));
    }
    if !x0.same_shape(n0) {
        return Err(Error::shape(
            "noise image",
            format!("{}x{}", x0.height(), x0.width()),
            format!("{}x{}", n0.height(), n0.width()),
        ));
    }
    if x0.height() % 4 != 0 || x0.width() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "image sides must be divisible by 4, got {}x{}",
            x0.height(),
            x0.width()
        )));
    }
    let mut g = Graph::new();
    let input = g.input(gan_input_batch(&model.window, &[(x0, n0)], k));
    let y = generator_forward(&mut g, &model.gen, &model.arch, input);
    let out = g.value(y);
    let mut img = Image2D::zeros(x0.height(), x0.width(), x0.spacing());
    for (dst, &v) in img.data_mut().iter_mut().zip(out.data()) {
        *dst = model.window.denorm(v.as_f64());
    }
    Ok(img)
}

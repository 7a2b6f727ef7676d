//! The frozen style-based synthesis network.
//!
//! A learned-free constant `C0×4×4` input passes through `L` style layers,
//! two per resolution. Each layer is
//! `[upsample] → conv3×3 → instance-norm → AdaIN(scale, shift) → leaky-ReLU`
//! where `scale = 1 + A_γ·w_l` and `shift = A_β·w_l`, so `w = 0` leaves the
//! normalized features untouched. A 1×1 conv and `tanh` produce the image.

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::sample_prior;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{gaussian, ParamSet};
use crate::rng::{self, purpose};
use crate::tensor::{Scalar, Tensor};

pub const CKPT_PREFIX: &str = "gen/";

/// An `L×d` latent code with one style vector per synthesis layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Tensor<f32>);

impl LatentCode {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("latent code must be L×d, got {:?}", t.shape())));
        }
        t.check_finite("latent code")?;
        Ok(Self(t))
    }

    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self(Tensor::zeros(vec![layers, dim]))
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, l: usize) -> &[f32] {
        let d = self.dim();
        &self.0.data()[l * d..(l + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::new(Tensor::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Doubling chain starting at 4, e.g. `[4, 8, 16, 32]`.
    pub resolutions: Vec<usize>,
    /// Channel width at each resolution.
    pub widths: Vec<usize>,
    /// Std of the style affine weights is `style_gain / sqrt(d)`.
    pub style_gain: f64,
    pub image_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            resolutions: vec![4, 8, 16, 32],
            widths: vec![64, 64, 32, 16],
            style_gain: 0.5,
            image_channels: 3,
        }
    }
}

pub const LAYERS_PER_RESOLUTION: usize = 2;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.first() != Some(&4) {
            return Err(Error::Config(format!(
                "resolution chain must start at 4, got {:?}",
                self.resolutions
            )));
        }
        if self.resolutions.windows(2).any(|p| p[1] != 2 * p[0]) {
            return Err(Error::Config(format!(
                "resolutions must double at each step: {:?}",
                self.resolutions
            )));
        }
        if self.widths.len() != self.resolutions.len() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "need one non-zero width per resolution, got {:?}",
                self.widths
            )));
        }
        if self.latent_dim == 0 || self.image_channels == 0 {
            return Err(Error::Config("latent_dim and image_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.resolutions.len() * LAYERS_PER_RESOLUTION
    }

    pub fn image_size(&self) -> usize {
        *self.resolutions.last().unwrap_or(&4)
    }

    /// `(in, out)` channels of style layer `l`.
    fn layer_channels(&self, l: usize) -> (usize, usize) {
        let r = l / LAYERS_PER_RESOLUTION;
        let out = self.widths[r];
        let inp = if l == 0 {
            self.widths[0]
        } else if l.is_multiple_of(LAYERS_PER_RESOLUTION) {
            self.widths[r - 1]
        } else {
            out
        };
        (inp, out)
    }

    /// Output channels of style layer `l` (the AdaIN width).
    pub fn layer_width(&self, l: usize) -> usize {
        self.layer_channels(l).1
    }
}

/// Frozen generator parameters. `S` selects the evaluation precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<S: Scalar = f32> {
    config: GeneratorConfig,
    params: ParamSet<S>,
}

/// Handles recorded by [`Generator::forward`].
pub struct Synthesis {
    pub image: Var,
    /// Convolution outputs of each style layer before normalization.
    pub pre_adain: Vec<Var>,
}

impl Generator<f32> {
    /// Deterministically draws fan-in-scaled Gaussian weights from `seed`.
    pub fn build(seed: u64, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let c0 = config.widths[0];
        p.insert("const", gaussian(seed, "const", vec![c0, 4, 4], 1.0));
        let d = config.latent_dim;
        for l in 0..config.num_layers() {
            let (cin, cout) = config.layer_channels(l);
            let he = (2.0 / (cin * 9) as f64).sqrt();
            let name = format!("l{l}.conv.w");
            p.insert(name.clone(), gaussian(seed, &name, vec![cout, cin, 3, 3], he));
            p.insert(format!("l{l}.conv.b"), Tensor::zeros(vec![cout]));
            let name = format!("l{l}.style.w");
            let std = config.style_gain / (d as f64).sqrt();
            p.insert(name.clone(), gaussian(seed, &name, vec![2 * cout, d], std));
            p.insert(format!("l{l}.style.b"), Tensor::zeros(vec![2 * cout]));
        }
        let clast = *config.widths.last().expect("validated");
        let std = (1.0 / clast as f64).sqrt();
        p.insert("rgb.w", gaussian(seed, "rgb.w", vec![config.image_channels, clast, 1, 1], std));
        p.insert("rgb.b", Tensor::zeros(vec![config.image_channels]));
        Ok(Self { config, params: p })
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_set(CKPT_PREFIX, &self.params);
    }

    /// Restores a generator; the architecture is read back from tensor shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.extract_set(CKPT_PREFIX);
        let style0 = params.require("l0.style.w")?;
        let latent_dim = style0.shape()[1];
        let mut widths = Vec::new();
        let mut l = 0;
        while let Some(w) = params.get(&format!("l{l}.conv.w")) {
            widths.push(w.shape()[0]);
            l += LAYERS_PER_RESOLUTION;
        }
        let resolutions = (0..widths.len()).map(|r| 4 << r).collect();
        let image_channels = params.require("rgb.w")?.shape()[0];
        let config = GeneratorConfig {
            latent_dim,
            resolutions,
            widths,
            image_channels,
            ..GeneratorConfig::default()
        };
        config.validate()?;
        let reference = Self::build(0, config.clone())?;
        for ((n, a), (m, b)) in reference.params.iter().zip(params.iter()) {
            if n != m || a.shape() != b.shape() {
                return Err(Error::Format(format!("generator checkpoint: unexpected {m} {:?}", b.shape())));
            }
        }
        if reference.params.len() != params.len() {
            return Err(Error::Format("generator checkpoint: wrong entry count".into()));
        }
        Ok(Self { config, params })
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        let mut tape = Tape::new();
        let wv = tape.constant(w.tensor().clone())?;
        let out = self.forward(&mut tape, wv)?;
        Image::new(tape.value(out.image).clone())
    }

    /// Gradient of `sum(upstream ⊙ G(w))` with respect to `w`.
    pub fn grad_wrt_latent(&self, w: &LatentCode, upstream: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.tensor().clone(), true)?;
        let out = self.forward(&mut tape, wv)?;
        let up = tape.constant(upstream.clone())?;
        let prod = tape.mul(out.image, up)?;
        let loss = tape.sum(prod)?;
        let mut g = tape.backward(loss)?;
        Ok(g.take(wv).unwrap_or_else(|| Tensor::zeros(w.tensor().shape().to_vec())))
    }

    /// Empirical mean of `n` prior samples drawn from `seed`.
    pub fn mean_latent(&self, n: usize, seed: u64) -> Result<LatentCode> {
        if n == 0 {
            return Err(Error::Config("mean_latent needs n >= 1".into()));
        }
        let (l, d) = (self.config.num_layers(), self.config.latent_dim);
        let mut acc = vec![0f64; l * d];
        for i in 0..n {
            let mut r = rng::stream(seed, purpose::MEAN_LATENT + i as u64);
            let s = sample_prior(&mut r, l, d);
            for (a, &v) in acc.iter_mut().zip(s.data()) {
                *a += v as f64;
            }
        }
        let data = acc.iter().map(|&v| (v / n as f64) as f32).collect();
        LatentCode::new(Tensor::new(vec![l, d], data)?)
    }

    pub fn hash_hex(&self) -> String {
        self.params.hash_hex()
    }
}

impl<S: Scalar> Generator<S> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.config.num_layers(), self.config.latent_dim]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.config.image_size();
        [self.config.image_channels, s, s]
    }

    pub fn cast<T: Scalar>(&self) -> Generator<T> {
        Generator { config: self.config.clone(), params: self.params.cast() }
    }

    /// Records `G(w)` on `tape`. Generator weights are bound as constants,
    /// so only `w` (and anything upstream of it) receives gradients.
    pub fn forward(&self, tape: &mut Tape<S>, w: Var) -> Result<Synthesis> {
        self.record(tape, w, false).map(|(s, _)| s)
    }

    /// Like [`Generator::forward`] but with the weights as gradient-carrying
    /// leaves, returned in parameter order. Only used by the generator
    /// fine-tuning ablation.
    pub fn forward_trainable(&self, tape: &mut Tape<S>, w: Var) -> Result<(Synthesis, Vec<Var>)> {
        self.record(tape, w, true)
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn record(&self, tape: &mut Tape<S>, w: Var, trainable: bool) -> Result<(Synthesis, Vec<Var>)> {
        let (l_count, d) = (self.config.num_layers(), self.config.latent_dim);
        if tape.value(w).shape() != [l_count, d] {
            return Err(Error::Shape(format!(
                "latent {:?} does not match generator {l_count}×{d}",
                tape.value(w).shape()
            )));
        }
        let p = self.params.bind(tape, trainable)?;
        let mut h = p.var("const");
        let mut pre_adain = Vec::with_capacity(l_count);
        for l in 0..l_count {
            if l > 0 && l % LAYERS_PER_RESOLUTION == 0 {
                h = tape.upsample2x(h)?;
            }
            h = tape.conv2d(h, p.var(&format!("l{l}.conv.w")), 1, 1)?;
            h = tape.add_bias(h, p.var(&format!("l{l}.conv.b")))?;
            pre_adain.push(h);
            h = tape.instance_norm(h)?;

            let c = self.config.layer_width(l);
            let wl = tape.slice(w, l * d, vec![d, 1])?;
            let style = tape.matmul(p.var(&format!("l{l}.style.w")), wl)?;
            let style = tape.add_bias(style, p.var(&format!("l{l}.style.b")))?;
            let gamma = tape.slice(style, 0, vec![c])?;
            let scale = tape.add_scalar(gamma, 1.0)?;
            let shift = tape.slice(style, c, vec![c])?;
            h = tape.channel_affine(h, scale, shift)?;
            h = tape.leaky_relu(h)?;
        }
        let rgb = tape.conv2d(h, p.var("rgb.w"), 1, 0)?;
        let rgb = tape.add_bias(rgb, p.var("rgb.b"))?;
        let image = tape.tanh(rgb)?;
        Ok((Synthesis { image, pre_adain }, p.vars().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: 8,
            resolutions: vec![4, 8],
            widths: vec![8, 4],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn default_has_eight_style_layers() {
        let c = GeneratorConfig::default();
        assert_eq!(c.num_layers(), 8);
        assert_eq!(c.image_size(), 32);
    }

    #[test]
    fn invalid_chains_rejected() {
        let mut c = small();
        c.resolutions = vec![4, 12];
        assert!(matches!(Generator::build(1, c), Err(Error::Config(_))));
        let mut c = small();
        c.resolutions = vec![8, 16];
        assert!(Generator::build(1, c).is_err());
        let mut c = small();
        c.widths = vec![8];
        assert!(Generator::build(1, c).is_err());
    }

    #[test]
    fn seeds_and_determinism() {
        let a = Generator::build(7, small()).unwrap();
        let b = Generator::build(7, small()).unwrap();
        let c = Generator::build(8, small()).unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_ne!(a.hash_hex(), c.hash_hex());
        let mut ca = Checkpoint::new();
        a.to_checkpoint(&mut ca);
        let mut cb = Checkpoint::new();
        b.to_checkpoint(&mut cb);
        assert_eq!(ca.to_bytes(), cb.to_bytes());
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = Generator::build(3, small()).unwrap();
        let mut ck = Checkpoint::new();
        g.to_checkpoint(&mut ck);
        let back = Generator::from_checkpoint(&Checkpoint::read(&ck.to_bytes()[..]).unwrap()).unwrap();
        assert_eq!(back.params(), g.params());
        assert_eq!(back.config().widths, g.config().widths);
    }

    #[test]
    fn zero_latent_is_pure_instance_norm() {
        let g = Generator::build(5, small()).unwrap();
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(Tensor::zeros(vec![4, 8])).unwrap();
        let out = g.forward(&mut tape, w).unwrap();
        let img = tape.value(out.image).clone();

        // Same network with AdaIN removed by hand.
        let mut t2 = Tape::<f32>::new();
        let p = g.params().bind(&mut t2, false).unwrap();
        let mut h = p.var("const");
        for l in 0..4 {
            if l == 2 {
                h = t2.upsample2x(h).unwrap();
            }
            h = t2.conv2d(h, p.var(&format!("l{l}.conv.w")), 1, 1).unwrap();
            h = t2.add_bias(h, p.var(&format!("l{l}.conv.b"))).unwrap();
            h = t2.instance_norm(h).unwrap();
            h = t2.leaky_relu(h).unwrap();
        }
        let h = t2.conv2d(h, p.var("rgb.w"), 1, 0).unwrap();
        let h = t2.add_bias(h, p.var("rgb.b")).unwrap();
        let h = t2.tanh(h).unwrap();
        assert_eq!(t2.value(h), &img);
    }

    #[test]
    fn last_layer_perturbation_leaves_early_layers() {
        let g = Generator::build(5, small()).unwrap();
        let mut r = rng::stream(1, 0);
        let w0 = sample_prior(&mut r, 4, 8);
        let mut w1 = w0.clone().into_tensor();
        for v in &mut w1.data_mut()[3 * 8..] {
            *v += 0.5;
        }
        let run = |w: Tensor<f32>| {
            let mut tape = Tape::<f32>::new();
            let wv = tape.constant(w).unwrap();
            let out = g.forward(&mut tape, wv).unwrap();
            let pre: Vec<_> = out.pre_adain.iter().map(|&v| tape.value(v).clone()).collect();
            (tape.value(out.image).clone(), pre)
        };
        let (img0, pre0) = run(w0.into_tensor());
        let (img1, pre1) = run(w1);
        assert_ne!(img0, img1);
        assert_eq!(pre0[0], pre1[0]);
        assert_eq!(pre0[1], pre1[1]);
    }

    #[test]
    fn mean_latent_single_sample_and_determinism() {
        let g = Generator::build(5, small()).unwrap();
        let one = g.mean_latent(1, 9).unwrap();
        let mut r = rng::stream(9, purpose::MEAN_LATENT);
        assert_eq!(one, sample_prior(&mut r, 4, 8));
        assert_eq!(g.mean_latent(16, 2).unwrap(), g.mean_latent(16, 2).unwrap());
        assert!(g.mean_latent(0, 2).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Generator::build(5, small()).unwrap();
        assert!(matches!(g.synthesize(&LatentCode::zeros(3, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_loss_has_zero_latent_gradient() {
        let g = Generator::build(5, small()).unwrap();
        let up = Tensor::zeros(vec![3, 8, 8]);
        let grad = g.grad_wrt_latent(&LatentCode::zeros(4, 8), &up).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }
}

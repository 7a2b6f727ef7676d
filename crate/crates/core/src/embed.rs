//! The embedding network `H`: image → layered latent code.
//!
//! An identity encoder pools a conv stack into a vector `f_id`; an attribute
//! encoder keeps a `C×H′×W′` map `f_attr`. The map is instance-normalized and
//! re-scaled per channel by `(γ, β) = fc_mod(f_id)`, then a two-layer
//! tree-connected regressor produces one latent row per block.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::image::Image;
use crate::params::{gaussian, Bound, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const CKPT_PREFIX: &str = "embed/";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub layers: usize,
    pub latent_dim: usize,
    pub image_channels: usize,
    pub image_size: usize,
    pub id_widths: Vec<usize>,
    pub attr_widths: Vec<usize>,
    /// Stride of each attribute stage (1 or 2).
    pub attr_strides: Vec<usize>,
    /// Hidden units per regressor block.
    pub hidden: usize,
    /// Std multiplier of the last regressor layer relative to fan-in scaling.
    pub out_gain: f64,
    /// One conv encoder feeding the regressor directly, no merge.
    pub single_encoder: bool,
}

impl EmbedConfig {
    pub fn for_generator(g: &Generator) -> Self {
        let [layers, latent_dim] = g.latent_shape();
        let [image_channels, image_size, _] = g.image_shape();
        Self {
            layers,
            latent_dim,
            image_channels,
            image_size,
            id_widths: vec![16, 32, 64, 64],
            attr_widths: vec![16, 32, 64, 64],
            attr_strides: vec![1, 2, 2, 2],
            hidden: 128,
            out_gain: 0.1,
            single_encoder: false,
        }
    }

    pub fn attr_channels(&self) -> usize {
        *self.attr_widths.last().unwrap_or(&0)
    }

    pub fn attr_size(&self) -> usize {
        self.attr_strides.iter().fold(self.image_size, |s, &st| s.div_ceil(st))
    }

    /// Flattened `f_merge` length per regressor block.
    pub fn block_in(&self) -> usize {
        self.attr_channels() * self.attr_size() * self.attr_size() / self.layers.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("embedding network: {m}")));
        if self.layers == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return bad("layers, latent_dim and hidden must be positive".into());
        }
        if self.attr_widths.is_empty() || self.attr_widths.len() != self.attr_strides.len() {
            return bad("attr_widths and attr_strides must be non-empty and equal length".into());
        }
        if self.attr_strides.iter().any(|&s| s != 1 && s != 2) {
            return bad(format!("strides must be 1 or 2, got {:?}", self.attr_strides));
        }
        if !self.single_encoder && self.id_widths.is_empty() {
            return bad("identity encoder needs at least one stage".into());
        }
        let flat = self.attr_channels() * self.attr_size() * self.attr_size();
        if !flat.is_multiple_of(self.layers) {
            return bad(format!("f_attr size {flat} not divisible into {} blocks", self.layers));
        }
        if !self.hidden.is_multiple_of(self.layers) {
            return bad(format!("hidden {} not divisible by {} blocks", self.hidden, self.layers));
        }
        if !(self.out_gain > 0.0 && self.out_gain.is_finite()) {
            return bad(format!("out_gain must be > 0, got {}", self.out_gain));
        }
        Ok(())
    }

    pub fn check_generator(&self, g: &Generator) -> Result<()> {
        let [l, d] = g.latent_shape();
        let [c, s, _] = g.image_shape();
        if (l, d, c, s) != (self.layers, self.latent_dim, self.image_channels, self.image_size) {
            return Err(Error::Config(format!(
                "embedding network expects {}×{} codes for {}×{n}×{n} images, generator has {l}×{d}, {c}×{s}×{s}",
                self.layers,
                self.latent_dim,
                self.image_channels,
                n = self.image_size
            )));
        }
        Ok(())
    }
}

/// Intermediate handles of one embedding forward.
pub struct EmbedVars {
    pub latent: Var,
    pub f_id: Option<Var>,
    pub f_attr: Var,
    pub f_merge: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedNet<S: Scalar = f32> {
    config: EmbedConfig,
    params: ParamSet<S>,
    permute: Arc<[usize]>,
}

fn conv_stack(p: &mut ParamSet<f32>, seed: u64, prefix: &str, cin: usize, widths: &[usize]) {
    let mut cin = cin;
    for (s, &cout) in widths.iter().enumerate() {
        let name = format!("{prefix}.s{s}.w");
        let he = (2.0 / (cin * 9) as f64).sqrt();
        p.insert(name.clone(), gaussian(seed, &name, vec![cout, cin, 3, 3], he));
        p.insert(format!("{prefix}.s{s}.b"), Tensor::zeros(vec![cout]));
        cin = cout;
    }
}

/// Index of the transpose of an `blocks×hidden` matrix, so that each block of
/// the second layer sees a slice of every first-layer block.
fn tree_permutation(blocks: usize, hidden: usize) -> Arc<[usize]> {
    (0..hidden)
        .flat_map(|i| (0..blocks).map(move |l| l * hidden + i))
        .collect()
}

/// Deterministic He-scaled initialization.
pub fn init_embednet(seed: u64, config: EmbedConfig) -> Result<EmbedNet> {
    EmbedNet::build(seed, config)
}

impl EmbedNet<f32> {
    pub fn build(seed: u64, config: EmbedConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let c = config.attr_channels();
        if !config.single_encoder {
            conv_stack(&mut p, seed, "id", config.image_channels, &config.id_widths);
        }
        conv_stack(&mut p, seed, "attr", config.image_channels, &config.attr_widths);
        if !config.single_encoder {
            let id_dim = *config.id_widths.last().expect("validated");
            let std = (1.0 / id_dim as f64).sqrt();
            p.insert("mod.w", gaussian(seed, "mod.w", vec![2 * c, id_dim], std));
            p.insert("mod.b", Tensor::zeros(vec![2 * c]));
        }
        let (l, h, d, bin) = (config.layers, config.hidden, config.latent_dim, config.block_in());
        let he = (2.0 / bin as f64).sqrt();
        p.insert("reg1.w", gaussian(seed, "reg1.w", vec![l, h, bin], he));
        p.insert("reg1.b", Tensor::zeros(vec![l, h]));
        let std = config.out_gain / (h as f64).sqrt();
        p.insert("reg2.w", gaussian(seed, "reg2.w", vec![l, d, h], std));
        p.insert("reg2.b", Tensor::zeros(vec![l, d]));
        let permute = tree_permutation(l, h);
        Ok(Self { config, params: p, permute })
    }

    pub fn for_generator(seed: u64, g: &Generator, single_encoder: bool) -> Result<Self> {
        Self::build(seed, EmbedConfig { single_encoder, ..EmbedConfig::for_generator(g) })
    }

    /// Feed-forward inversion `w_e = H(x)`.
    pub fn embed(&self, x: &Image) -> Result<LatentCode> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.tensor().clone())?;
        let out = self.forward(&mut tape, xv, false)?;
        LatentCode::new(tape.value(out.latent).clone())
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_set(CKPT_PREFIX, &self.params);
    }

    /// Restores parameters saved by [`EmbedNet::to_checkpoint`] into the
    /// architecture described by `config`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: EmbedConfig) -> Result<Self> {
        let mut net = Self::build(0, config)?;
        let loaded = ckpt.extract_set(CKPT_PREFIX);
        if loaded.len() != net.params.len() {
            return Err(Error::Format(format!(
                "embedding checkpoint has {} tensors, architecture needs {}",
                loaded.len(),
                net.params.len()
            )));
        }
        for (name, t) in loaded.iter() {
            let slot = net
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("embedding checkpoint: unexpected {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "embedding checkpoint: {name} is {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(net)
    }

    /// Infers `single_encoder` from the stored tensors.
    pub fn from_checkpoint_for(ckpt: &Checkpoint, g: &Generator) -> Result<Self> {
        let single_encoder = ckpt.get(&format!("{CKPT_PREFIX}mod.w")).is_none();
        Self::from_checkpoint(ckpt, EmbedConfig { single_encoder, ..EmbedConfig::for_generator(g) })
    }

    pub fn hash_hex(&self) -> String {
        self.params.hash_hex()
    }
}

impl<S: Scalar> EmbedNet<S> {
    pub fn config(&self) -> &EmbedConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> EmbedNet<T> {
        EmbedNet { config: self.config.clone(), params: self.params.cast(), permute: self.permute.clone() }
    }

    fn encode(tape: &mut Tape<S>, p: &Bound<'_, S>, prefix: &str, x: Var, strides: &[usize]) -> Result<Var> {
        let mut h = x;
        for (s, &stride) in strides.iter().enumerate() {
            h = tape.conv2d(h, p.var(&format!("{prefix}.s{s}.w")), stride, 1)?;
            h = tape.add_bias(h, p.var(&format!("{prefix}.s{s}.b")))?;
            h = tape.leaky_relu(h)?;
        }
        Ok(h)
    }

    /// Records `H(x)`. With `train`, parameters are leaves that receive
    /// gradients; their vars are returned in parameter order.
    pub fn forward(&self, tape: &mut Tape<S>, x: Var, train: bool) -> Result<EmbedVars> {
        self.forward_with_params(tape, x, train).map(|(v, _)| v)
    }

    pub fn forward_with_params(&self, tape: &mut Tape<S>, x: Var, train: bool) -> Result<(EmbedVars, Vec<Var>)> {
        let cfg = &self.config;
        let want = [cfg.image_channels, cfg.image_size, cfg.image_size];
        if tape.value(x).shape() != want {
            return Err(Error::Shape(format!(
                "embedding network expects {want:?}, got {:?}",
                tape.value(x).shape()
            )));
        }
        let p = self.params.bind(tape, train)?;
        let out = self.run(tape, x, &p)?;
        Ok((out, p.vars().to_vec()))
    }

    /// Forward with parameters supplied as existing tape vars, in parameter order.
    pub fn forward_on_vars(&self, tape: &mut Tape<S>, x: Var, params: &[Var]) -> Result<Var> {
        let p = self.params.bound_from(params)?;
        Ok(self.run(tape, x, &p)?.latent)
    }

    fn run(&self, tape: &mut Tape<S>, x: Var, p: &Bound<'_, S>) -> Result<EmbedVars> {
        let cfg = &self.config;
        let f_attr = Self::encode(tape, p, "attr", x, &cfg.attr_strides)?;
        let (f_id, f_merge) = if cfg.single_encoder {
            (None, f_attr)
        } else {
            let strides = vec![2; cfg.id_widths.len()];
            let h = Self::encode(tape, p, "id", x, &strides)?;
            let f_id = tape.spatial_mean(h)?;
            let merged = merge_features(tape, f_attr, f_id, p.var("mod.w"), p.var("mod.b"))?;
            (Some(f_id), merged)
        };
        let latent = self.regress(tape, p, f_merge)?;
        Ok(EmbedVars { latent, f_id, f_attr, f_merge })
    }

    fn regress(&self, tape: &mut Tape<S>, p: &Bound<'_, S>, f_merge: Var) -> Result<Var> {
        let cfg = &self.config;
        let n = tape.value(f_merge).len();
        let flat = tape.reshape(f_merge, vec![n])?;
        let h = tape.block_matmul(flat, p.var("reg1.w"))?;
        let h = tape.add(h, p.var("reg1.b"))?;
        let h = tape.leaky_relu(h)?;
        let h = tape.gather(h, self.permute.clone())?;
        let out = tape.block_matmul(h, p.var("reg2.w"))?;
        let out = tape.add(out, p.var("reg2.b"))?;
        tape.reshape(out, vec![cfg.layers, cfg.latent_dim])
    }
}

/// `f_merge = γ ⊙ IN(f_attr) + β` with `[γ − 1; β] = mod_w · f_id + mod_b`.
pub fn merge_features<S: Scalar>(tape: &mut Tape<S>, f_attr: Var, f_id: Var, mod_w: Var, mod_b: Var) -> Result<Var> {
    let c = tape.value(f_attr).shape().first().copied().unwrap_or(0);
    let sw = tape.value(mod_w).shape().to_vec();
    let id_dim = tape.value(f_id).len();
    if sw.len() != 2 || sw[0] != 2 * c || sw[1] != id_dim {
        return Err(Error::Shape(format!(
            "merge: f_attr has {c} channels, f_id {id_dim} entries, fc_mod {sw:?}"
        )));
    }
    let normalized = tape.instance_norm(f_attr)?;
    let col = tape.reshape(f_id, vec![id_dim, 1])?;
    let gb = tape.matmul(mod_w, col)?;
    let gb = tape.add_bias(gb, mod_b)?;
    let gamma = tape.slice(gb, 0, vec![c])?;
    let gamma = tape.add_scalar(gamma, 1.0)?;
    let beta = tape.slice(gb, c, vec![c])?;
    tape.channel_affine(normalized, gamma, beta)
}

//! Collaborative training: the encoder initializes the iterator, and the
//! best latent the iterator has found for each sample (kept in a cache)
//! supervises the encoder at latent, image and feature level.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::corpus::CorpusSample;
use crate::embed::EmbedNet;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::image::Image;
use crate::iterator::{objective, optimize_latent, InitContext, IterConfig};
use crate::metrics;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::parallel;
use crate::perceptual::PerceptualNet;
use crate::rng::{self, purpose};
use crate::tensor::{read_u32, Scalar, Tensor};

pub const DEFAULT_EPOCHS: usize = 3;
pub const DEFAULT_BATCH_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub latent: LatentCode,
    pub loss: f32,
}

/// Best latent per sample, with its `L_opt` against the original image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupervisionCache {
    entries: BTreeMap<u64, CacheEntry>,
}

const CACHE_MAGIC: &[u8; 4] = b"CAC1";

impl SupervisionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: u64) -> Option<&CacheEntry> {
        self.entries.get(&sample_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &CacheEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    /// Replaces the entry iff `loss` is finite and strictly below the stored loss.
    pub fn offer(&mut self, sample_id: u64, latent: LatentCode, loss: f32) -> bool {
        if !loss.is_finite() {
            log::warn!("sample {sample_id}: rejected candidate with non-finite loss {loss}");
            return false;
        }
        match self.entries.get(&sample_id) {
            Some(e) if loss >= e.loss => false,
            _ => {
                self.entries.insert(sample_id, CacheEntry { latent, loss });
                true
            }
        }
    }

    /// Scores `w_candidate` by `L_opt` against `x` and offers it.
    #[allow(clippy::too_many_arguments)]
    pub fn update_cache(
        &mut self,
        sample_id: u64,
        w_candidate: &LatentCode,
        x: &Image,
        g: &Generator,
        phi: &PerceptualNet,
        alpha: f64,
    ) -> Result<bool> {
        match objective(g, phi, x, w_candidate, alpha) {
            Ok(v) => Ok(self.offer(sample_id, w_candidate.clone(), v.total)),
            Err(Error::NonFinite(m)) => {
                log::warn!("sample {sample_id}: rejected candidate: {m}");
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    /// `CAC1`, u32 count, then per entry u64 id, f32 loss and a `.ten` latent.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (id, e) in &self.entries {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&e.loss.to_le_bytes())?;
            e.latent.tensor().write_ten(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format(format!("bad cache magic {magic:?}")));
        }
        let count = read_u32(&mut r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut id = [0u8; 8];
            r.read_exact(&mut id)?;
            let mut loss = [0u8; 4];
            r.read_exact(&mut loss)?;
            let latent = LatentCode::new(Tensor::read_ten(&mut r)?)?;
            let id = u64::from_le_bytes(id);
            if entries.insert(id, CacheEntry { latent, loss: f32::from_le_bytes(loss) }).is_some() {
                return Err(Error::Format(format!("duplicate cache entry {id}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), |w| self.write(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Re-evaluates every entry and requires the stored loss bit-exactly.
    pub fn verify<'a>(
        &self,
        g: &Generator,
        phi: &PerceptualNet,
        alpha: f64,
        image_of: impl Fn(u64) -> Option<&'a Image>,
    ) -> Result<()> {
        for (&id, e) in &self.entries {
            let x = image_of(id).ok_or_else(|| Error::Format(format!("cache entry for unknown sample {id}")))?;
            let recomputed = objective(g, phi, x, &e.latent, alpha)?.total;
            if recomputed.to_bits() != e.loss.to_bits() {
                return Err(Error::CacheIncoherent { sample_id: id, stored: e.loss, recomputed });
            }
        }
        Ok(())
    }
}

/// `λ1` (image MSE), `λ2` (perceptual), `λ3` (latent).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub per: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, per: 1.0, latent: 1.0 }
    }
}

impl LossWeights {
    /// Same f32 arithmetic, in the same order, as the recorded total.
    pub fn total(&self, t: &LossTerms) -> f32 {
        t.l_mse * self.mse as f32 + t.l_per * self.per as f32 + t.l_w * self.latent as f32
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mse", self.mse), ("lambda_per", self.per), ("lambda_w", self.latent)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_w: f32,
    pub l_mse: f32,
    pub l_per: f32,
}

pub struct LossVars {
    pub l_w: Var,
    pub l_mse: Var,
    pub l_per: Var,
    pub total: Var,
}

fn weighted<S: Scalar>(tape: &mut Tape<S>, wts: &LossWeights, l_w: Var, l_mse: Var, l_per: Var) -> Result<LossVars> {
    let a = tape.scale(l_mse, wts.mse)?;
    let b = tape.scale(l_per, wts.per)?;
    let c = tape.scale(l_w, wts.latent)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars { l_w, l_mse, l_per, total })
}

fn mean_square_diff<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Records `L_w`, `L_mse`, `L_per` between `w_e` and the target `w_o`
/// (bound as a constant) and their weighted sum.
pub fn record_losses<S: Scalar>(
    tape: &mut Tape<S>,
    g: &Generator<S>,
    phi: &PerceptualNet<S>,
    w_e: Var,
    w_o: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    if tape.value(w_e).shape() != tape.value(w_o).shape() {
        return Err(Error::Shape(format!(
            "w_e {:?} vs w_o {:?}",
            tape.value(w_e).shape(),
            tape.value(w_o).shape()
        )));
    }
    let l_w = mean_square_diff(tape, w_e, w_o)?;
    let x_e = g.forward(tape, w_e)?.image;
    let x_o = g.forward(tape, w_o)?.image;
    let l_mse = mean_square_diff(tape, x_e, x_o)?;
    let l_per = phi.forward(tape, x_e, x_o)?;
    weighted(tape, weights, l_w, l_mse, l_per)
}

/// `(L_w, L_mse, L_per)` in working precision.
pub fn compute_losses(g: &Generator, phi: &PerceptualNet, w_e: &LatentCode, w_o: &LatentCode) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let e = tape.constant(w_e.tensor().clone())?;
    let o = tape.constant(w_o.tensor().clone())?;
    let v = record_losses(&mut tape, g, phi, e, o, &LossWeights::default())?;
    Ok(LossTerms {
        l_w: tape.scalar_value(v.l_w),
        l_mse: tape.scalar_value(v.l_mse),
        l_per: tape.scalar_value(v.l_per),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Encoder-initialized iterator supervising the encoder through the cache.
    Collaborative,
    /// Encoder trained on `MSE + phi` against the input image only.
    NoIterator,
    /// Every target precomputed once from the mean latent, then plain training.
    Offline,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Collaborative => "collaborative",
            TrainMode::NoIterator => "no_iterator",
            TrainMode::Offline => "offline",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collaborative" => Ok(TrainMode::Collaborative),
            "no_iterator" => Ok(TrainMode::NoIterator),
            "offline" => Ok(TrainMode::Offline),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    /// Iterator settings used inside the loop (`steps` = iterator steps per batch).
    pub iterator: IterConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: TrainMode,
    /// Also update the generator (no-iterator mode only).
    pub finetune_generator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            iterator: IterConfig::default(),
            adam: AdamConfig::trainer_default(),
            seed: 0,
            mode: TrainMode::Collaborative,
            finetune_generator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.iterator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterator.steps == 0 && self.mode != TrainMode::NoIterator {
            return Err(Error::Config("iterator_steps must be >= 1".into()));
        }
        if self.finetune_generator && self.mode != TrainMode::NoIterator {
            return Err(Error::Config("finetune_generator requires mode no_iterator".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config(format!("encoder lr must be > 0, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRow {
    pub epoch: usize,
    pub batch: usize,
    pub samples: usize,
    /// Cache replacements made by this batch's iterator runs.
    pub accepted: usize,
    pub terms: LossTerms,
    pub total: f32,
}

/// Held-out feed-forward reconstruction quality `G(H(x))` vs `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionMetrics {
    pub samples: usize,
    pub mse: f64,
    pub phi: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f32,
    pub heldout: Option<ReconstructionMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub batches: Vec<BatchRow>,
    pub epochs: Vec<EpochRow>,
}

pub const BATCH_HEADER: &str = "epoch,batch,samples,accepted,l_w,l_mse,l_per,total";
pub const EPOCH_HEADER: &str = "epoch,l_w,l_mse,l_per,total,heldout_mse,heldout_phi,heldout_psnr,heldout_ssim";

fn field<T: FromStr>(parts: &[&str], i: usize, line: &str) -> Result<T> {
    parts
        .get(i)
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad loss report line {line:?}")))
}

impl LossReport {
    pub fn batch_csv(&self) -> String {
        let mut s = format!("{BATCH_HEADER}\n");
        for r in &self.batches {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.batch, r.samples, r.accepted, r.terms.l_w, r.terms.l_mse, r.terms.l_per, r.total
            ));
        }
        s
    }

    pub fn epoch_csv(&self) -> String {
        let mut s = format!("{EPOCH_HEADER}\n");
        for r in &self.epochs {
            let h = r
                .heldout
                .map(|h| format!("{},{},{},{}", h.mse, h.phi, h.psnr, h.ssim))
                .unwrap_or_else(|| ",,,".into());
            s.push_str(&format!("{},{},{},{},{},{h}\n", r.epoch, r.terms.l_w, r.terms.l_mse, r.terms.l_per, r.total));
        }
        s
    }

    /// Parses the two CSV exports; values round-trip exactly.
    pub fn from_csv(batch_csv: &str, epoch_csv: &str, heldout_samples: usize) -> Result<Self> {
        let mut report = LossReport::default();
        for line in batch_csv.lines().skip(1).filter(|l| !l.is_empty()) {
            let p: Vec<&str> = line.split(',').collect();
            report.batches.push(BatchRow {
                epoch: field(&p, 0, line)?,
                batch: field(&p, 1, line)?,
                samples: field(&p, 2, line)?,
                accepted: field(&p, 3, line)?,
                terms: LossTerms { l_w: field(&p, 4, line)?, l_mse: field(&p, 5, line)?, l_per: field(&p, 6, line)? },
                total: field(&p, 7, line)?,
            });
        }
        for line in epoch_csv.lines().skip(1).filter(|l| !l.is_empty()) {
            let p: Vec<&str> = line.split(',').collect();
            let heldout = if p.get(5).is_some_and(|v| !v.is_empty()) {
                Some(ReconstructionMetrics {
                    samples: heldout_samples,
                    mse: field(&p, 5, line)?,
                    phi: field(&p, 6, line)?,
                    psnr: field(&p, 7, line)?,
                    ssim: field(&p, 8, line)?,
                })
            } else {
                None
            };
            report.epochs.push(EpochRow {
                epoch: field(&p, 0, line)?,
                terms: LossTerms { l_w: field(&p, 1, line)?, l_mse: field(&p, 2, line)?, l_per: field(&p, 3, line)? },
                total: field(&p, 4, line)?,
                heldout,
            });
        }
        Ok(report)
    }

    /// Keeps only rows of epochs before `epochs`.
    pub fn truncate_to(&mut self, epochs: usize) {
        self.batches.retain(|r| r.epoch < epochs);
        self.epochs.retain(|r| r.epoch < epochs);
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: EmbedNet,
    pub adam: AdamState,
    pub cache: SupervisionCache,
    pub epochs_done: usize,
    pub updates: u64,
    pub report: LossReport,
    /// Fine-tuned generator and its optimizer state (ablation only).
    pub generator: Option<(Generator, AdamState)>,
}

const GEN_TUNED_PREFIX: &str = "tuned/";

fn encode_u64(v: u64) -> Tensor<f32> {
    // 16-bit limbs are exact in f32.
    let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(vec![4], limbs).expect("4 limbs")
}

fn decode_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.len() != 4 || t.data().iter().any(|&x| x.fract() != 0.0 || !(0.0..65536.0).contains(&x)) {
        return Err(Error::Format("bad counter encoding".into()));
    }
    Ok(t.data().iter().enumerate().map(|(i, &x)| (x as u64) << (16 * i)).sum())
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, st: &AdamState) {
    ck.push(format!("{prefix}step"), encode_u64(st.step));
    for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
        ck.push(format!("{prefix}m{i}"), Tensor::new(vec![m.len()], m.clone()).expect("non-empty"));
        ck.push(format!("{prefix}v{i}"), Tensor::new(vec![v.len()], v.clone()).expect("non-empty"));
    }
}

fn read_adam(ck: &Checkpoint, prefix: &str, params: &[Tensor<f32>]) -> Result<AdamState> {
    let missing = |n: &str| Error::Format(format!("checkpoint lacks {n}"));
    let step = decode_u64(ck.get(&format!("{prefix}step")).ok_or_else(|| missing("optimizer step"))?)?;
    let mut st = AdamState::new(params);
    st.step = step;
    for (i, p) in params.iter().enumerate() {
        for (slot, tag) in [(&mut st.m[i], "m"), (&mut st.v[i], "v")] {
            let name = format!("{prefix}{tag}{i}");
            let t = ck.get(&name).ok_or_else(|| missing(&name))?;
            if t.len() != p.len() {
                return Err(Error::Format(format!("{name}: {} entries, expected {}", t.len(), p.len())));
            }
            slot.copy_from_slice(t.data());
        }
    }
    Ok(st)
}

impl TrainState {
    pub fn new(net: EmbedNet) -> Self {
        let adam = AdamState::new(net.params().tensors());
        Self {
            net,
            adam,
            cache: SupervisionCache::new(),
            epochs_done: 0,
            updates: 0,
            report: LossReport::default(),
            generator: None,
        }
    }

    /// Network weights, optimizer moments and counters. The cache and the
    /// loss report are stored beside the checkpoint, not inside it.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.net.to_checkpoint(&mut ck);
        push_adam(&mut ck, "adam/", &self.adam);
        ck.push("train/epochs", encode_u64(self.epochs_done as u64));
        ck.push("train/updates", encode_u64(self.updates));
        if let Some((g, st)) = &self.generator {
            ck.push_set(GEN_TUNED_PREFIX, g.params());
            push_adam(&mut ck, "gadam/", st);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, g: &Generator) -> Result<Self> {
        let net = EmbedNet::from_checkpoint_for(ck, g)?;
        let adam = read_adam(ck, "adam/", net.params().tensors())?;
        let counter = |n: &str| {
            ck.get(n)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")))
                .and_then(decode_u64)
        };
        let generator = if ck.get("gadam/step").is_some() {
            let mut tuned = g.clone();
            let set = ck.extract_set(GEN_TUNED_PREFIX);
            for (name, t) in set.iter() {
                *tuned
                    .params_mut()
                    .get_mut(name)
                    .ok_or_else(|| Error::Format(format!("unexpected tuned tensor {name}")))? = t.clone();
            }
            let st = read_adam(ck, "gadam/", tuned.params().tensors())?;
            Some((tuned, st))
        } else {
            None
        };
        Ok(Self {
            net,
            adam,
            cache: SupervisionCache::new(),
            epochs_done: counter("train/epochs")? as usize,
            updates: counter("train/updates")?,
            report: LossReport::default(),
            generator,
        })
    }
}

/// Instrumentation hooks. Every method has a no-op default.
pub trait TrainObserver {
    fn on_cache_update(&mut self, _sample_id: u64, _candidate_loss: f32, _accepted: bool, _cache: &SupervisionCache) {}
    /// Called with the exact target about to supervise `sample_id`.
    fn on_supervision(&mut self, _sample_id: u64, _target: &LatentCode, _cache: &SupervisionCache) {}
    fn on_batch(&mut self, _row: &BatchRow) {}
    fn on_epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

enum Target<'a> {
    Latent(&'a LatentCode),
    Input,
}

struct SampleGrad {
    net: Vec<Tensor<f32>>,
    generator: Option<Vec<Tensor<f32>>>,
    terms: LossTerms,
}

fn take_grads(grads: &mut crate::autodiff::Gradients, vars: &[Var], like: &[Tensor<f32>]) -> Vec<Tensor<f32>> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect()
}

fn sample_gradient(
    net: &EmbedNet,
    g: &Generator,
    phi: &PerceptualNet,
    x: &Image,
    target: Target<'_>,
    weights: &LossWeights,
    tune_generator: bool,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.tensor().clone())?;
    let (ev, pvars) = net.forward_with_params(&mut tape, xv, true)?;
    let (loss, gvars) = match target {
        Target::Latent(w_o) => {
            let wo = tape.constant(w_o.tensor().clone())?;
            (record_losses(&mut tape, g, phi, ev.latent, wo, weights)?, None)
        }
        Target::Input => {
            let (x_e, gvars) = if tune_generator {
                let (s, v) = g.forward_trainable(&mut tape, ev.latent)?;
                (s.image, Some(v))
            } else {
                (g.forward(&mut tape, ev.latent)?.image, None)
            };
            let l_mse = mean_square_diff(&mut tape, x_e, xv)?;
            let l_per = phi.forward(&mut tape, x_e, xv)?;
            let l_w = tape.constant(Tensor::scalar(0.0))?;
            (weighted(&mut tape, weights, l_w, l_mse, l_per)?, gvars)
        }
    };
    let terms = LossTerms {
        l_w: tape.scalar_value(loss.l_w),
        l_mse: tape.scalar_value(loss.l_mse),
        l_per: tape.scalar_value(loss.l_per),
    };
    let mut grads = tape.backward(loss.total)?;
    let net_grads = take_grads(&mut grads, &pvars, net.params().tensors());
    let generator = gvars.map(|v| take_grads(&mut grads, &v, g.params().tensors()));
    Ok(SampleGrad { net: net_grads, generator, terms })
}

/// Sums per-sample gradients in sample order, then divides by the count.
fn mean_grads(parts: impl Iterator<Item = Vec<Tensor<f32>>>) -> Option<Vec<Tensor<f32>>> {
    let mut count = 0usize;
    let mut acc: Option<Vec<Tensor<f32>>> = None;
    for g in parts {
        count += 1;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (s, t) in a.iter_mut().zip(&g) {
                    for (x, &y) in s.data_mut().iter_mut().zip(t.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let inv = 1.0 / count.max(1) as f32;
    acc.map(|mut a| {
        for t in &mut a {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        a
    })
}

fn apply_update(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
    let grefs: Vec<&Tensor<f32>> = grads.iter().collect();
    adam_step(&mut refs, &grefs, state, cfg)
}

fn mean_terms(rows: &[LossTerms]) -> LossTerms {
    let n = rows.len().max(1) as f64;
    let m = |f: fn(&LossTerms) -> f32| (rows.iter().map(|r| f(r) as f64).sum::<f64>() / n) as f32;
    LossTerms { l_w: m(|r| r.l_w), l_mse: m(|r| r.l_mse), l_per: m(|r| r.l_per) }
}

/// Epoch visiting order, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, purpose::EPOCH_ORDER + epoch as u64));
    order
}

/// Runs the iterator from `init` for each sample and offers the results.
#[allow(clippy::too_many_arguments)]
fn refine_into_cache(
    samples: &[&CorpusSample],
    inits: &[LatentCode],
    g: &Generator,
    phi: &PerceptualNet,
    iter_cfg: &IterConfig,
    cache: &mut SupervisionCache,
    observer: &mut dyn TrainObserver,
) -> Result<usize> {
    let pairs: Vec<(&CorpusSample, &LatentCode)> = samples.iter().copied().zip(inits).collect();
    let results = parallel::try_map(&pairs, |_, (s, w0)| -> Result<(LatentCode, f32)> {
        let latent = match optimize_latent(g, phi, &s.image, w0, iter_cfg, None)? {
            Ok(inv) => inv.latent,
            Err(aborted) => {
                log::warn!("sample {}: {aborted}", s.sample_id);
                aborted.best
            }
        };
        let loss = match objective(g, phi, &s.image, &latent, iter_cfg.alpha) {
            Ok(v) => v.total,
            Err(Error::NonFinite(_)) => f32::NAN,
            Err(e) => return Err(e),
        };
        Ok((latent, loss))
    })?;
    let mut accepted = 0;
    for (s, (latent, loss)) in samples.iter().zip(results) {
        let ok = cache.offer(s.sample_id, latent, loss);
        accepted += ok as usize;
        observer.on_cache_update(s.sample_id, loss, ok, cache);
    }
    Ok(accepted)
}

/// Trains `state` up to `config.epochs` epochs, continuing from
/// `state.epochs_done`. Held-out metrics are recorded after each epoch when
/// `heldout` is non-empty.
pub fn train(
    train_set: &[CorpusSample],
    heldout: &[CorpusSample],
    g: &Generator,
    phi: &PerceptualNet,
    state: &mut TrainState,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    state.net.config().check_generator(g)?;
    if config.finetune_generator && state.generator.is_none() {
        let st = AdamState::new(g.params().tensors());
        state.generator = Some((g.clone(), st));
    }

    if config.mode == TrainMode::Offline {
        let todo: Vec<&CorpusSample> = train_set.iter().filter(|s| state.cache.get(s.sample_id).is_none()).collect();
        if !todo.is_empty() {
            let mean = InitContext::new(g, None)?.mean;
            let inits = vec![mean; todo.len()];
            refine_into_cache(&todo, &inits, g, phi, &config.iterator, &mut state.cache, observer)?;
        }
    }

    while state.epochs_done < config.epochs {
        let epoch = state.epochs_done;
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut epoch_terms = Vec::with_capacity(train_set.len());
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&CorpusSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let accepted = if config.mode == TrainMode::Collaborative {
                let inits = parallel::try_map(&batch, |_, s| state.net.embed(&s.image))?;
                refine_into_cache(&batch, &inits, g, phi, &config.iterator, &mut state.cache, observer)?
            } else {
                0
            };

            let targets: Vec<(&CorpusSample, Option<LatentCode>)> = batch
                .iter()
                .filter_map(|&s| match config.mode {
                    TrainMode::NoIterator => Some((s, None)),
                    _ => state.cache.get(s.sample_id).map(|e| (s, Some(e.latent.clone()))),
                })
                .collect();
            for (s, t) in &targets {
                if let Some(t) = t {
                    observer.on_supervision(s.sample_id, t, &state.cache);
                }
            }
            if targets.is_empty() {
                continue;
            }
            let tuned = state.generator.as_ref().map(|(tg, _)| tg);
            let g_loss = tuned.unwrap_or(g);
            let net = &state.net;
            let parts = parallel::try_map(&targets, |_, (s, t)| {
                let target = t.as_ref().map_or(Target::Input, Target::Latent);
                sample_gradient(net, g_loss, phi, &s.image, target, &config.weights, tuned.is_some())
            })?;
            let terms: Vec<LossTerms> = parts.iter().map(|p| p.terms).collect();
            let mut net_parts = Vec::with_capacity(parts.len());
            let mut gen_parts = Vec::new();
            for p in parts {
                net_parts.push(p.net);
                if let Some(gp) = p.generator {
                    gen_parts.push(gp);
                }
            }
            let grads = mean_grads(net_parts.into_iter()).expect("non-empty batch");
            apply_update(state.net.params_mut().tensors_mut(), &grads, &mut state.adam, &config.adam)?;
            if let (Some((tg, st)), Some(gg)) = (state.generator.as_mut(), mean_grads(gen_parts.into_iter())) {
                apply_update(tg.params_mut().tensors_mut(), &gg, st, &config.adam)?;
            }
            state.updates += 1;

            let mean = mean_terms(&terms);
            let row = BatchRow {
                epoch,
                batch: b,
                samples: terms.len(),
                accepted,
                terms: mean,
                total: config.weights.total(&mean),
            };
            observer.on_batch(&row);
            state.report.batches.push(row);
            epoch_terms.extend(terms);
        }
        let g_eval = state.generator.as_ref().map_or(g, |(tg, _)| tg);
        let heldout_metrics = if heldout.is_empty() {
            None
        } else {
            Some(evaluate_reconstruction(&state.net, g_eval, phi, heldout)?)
        };
        let mean = mean_terms(&epoch_terms);
        state.report.epochs.push(EpochRow {
            epoch,
            terms: mean,
            total: config.weights.total(&mean),
            heldout: heldout_metrics,
        });
        state.epochs_done += 1;
        observer.on_epoch_end(state)?;
    }
    Ok(())
}

/// Mean feed-forward reconstruction metrics of `G(H(x))` against `x`.
pub fn evaluate_reconstruction(
    net: &EmbedNet,
    g: &Generator,
    phi: &PerceptualNet,
    samples: &[CorpusSample],
) -> Result<ReconstructionMetrics> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let rows = parallel::try_map(samples, |_, s| -> Result<[f64; 4]> {
        let rec = g.synthesize(&net.embed(&s.image)?)?;
        Ok([
            metrics::mse(&rec, &s.image)?,
            phi.distance(&rec, &s.image)? as f64,
            metrics::psnr(&rec, &s.image)?,
            metrics::ssim(&rec, &s.image)?,
        ])
    })?;
    let n = rows.len() as f64;
    let m = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / n;
    Ok(ReconstructionMetrics { samples: rows.len(), mse: m(0), phi: m(1), psnr: m(2), ssim: m(3) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::corpus::{gen_corpus, sample_prior};
    use crate::generator::GeneratorConfig;

    fn tiny_generator() -> Generator {
        Generator::build(
            1,
            GeneratorConfig { latent_dim: 8, resolutions: vec![4, 8], widths: vec![8, 8], ..GeneratorConfig::default() },
        )
        .unwrap()
    }

    fn code(v: f32) -> LatentCode {
        LatentCode::new(Tensor::full(vec![8, 64], v)).unwrap()
    }

    #[test]
    fn cache_rule_is_strict() {
        let mut c = SupervisionCache::new();
        assert!(c.offer(7, code(0.0), 0.5));
        assert!(!c.offer(7, code(1.0), 0.5));
        assert_eq!(c.get(7).unwrap().latent, code(0.0));
        let mut history = Vec::new();
        let mut c = SupervisionCache::new();
        for (i, loss) in [0.5f32, 0.7, 0.3].into_iter().enumerate() {
            c.offer(1, code(i as f32), loss);
            history.push(c.get(1).unwrap().loss);
        }
        assert_eq!(history, vec![0.5, 0.5, 0.3]);
        assert!(!c.offer(1, code(9.0), f32::NAN));
        assert!(!c.offer(2, code(9.0), f32::INFINITY));
        assert!(c.get(2).is_none());
    }

    #[test]
    fn cache_file_layout_and_round_trip() {
        let mut c = SupervisionCache::new();
        let w = LatentCode::new(Tensor::new(vec![1, 2], vec![1.0f32, -1.0]).unwrap()).unwrap();
        c.offer(3, w.clone(), 0.25);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let mut expected = b"CAC1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&3u64.to_le_bytes());
        expected.extend_from_slice(&0.25f32.to_le_bytes());
        w.tensor().write_ten(&mut expected).unwrap();
        assert_eq!(buf, expected);
        assert_eq!(SupervisionCache::read(&buf[..]).unwrap(), c);
        assert!(SupervisionCache::read(&b"CAC2\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn coherence_check_detects_tampering() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        let phi = PerceptualNet::build(2, 3);
        let x = g.synthesize(&sample_prior(&mut rng::stream(1, 1), 8, 64)).unwrap();
        let mut c = SupervisionCache::new();
        assert!(c.update_cache(4, &code(0.0), &x, &g, &phi, 1.0).unwrap());
        c.verify(&g, &phi, 1.0, |id| (id == 4).then_some(&x)).unwrap();
        c.entries.get_mut(&4).unwrap().loss *= 0.5;
        assert!(matches!(
            c.verify(&g, &phi, 1.0, |id| (id == 4).then_some(&x)),
            Err(Error::CacheIncoherent { sample_id: 4, .. })
        ));
    }

    #[test]
    fn losses_of_identical_codes_vanish() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        let phi = PerceptualNet::build(2, 3);
        let w = sample_prior(&mut rng::stream(3, 3), 8, 64);
        assert_eq!(compute_losses(&g, &phi, &w, &w).unwrap(), LossTerms::default());
        let mut t = w.tensor().clone();
        t.data_mut()[17] += 1.0;
        let shifted = LatentCode::new(t).unwrap();
        let terms = compute_losses(&g, &phi, &shifted, &w).unwrap();
        assert!((terms.l_w as f64 - 1.0 / 512.0).abs() < 1e-7);
        assert!(terms.l_mse > 0.0 && terms.l_per > 0.0);
    }

    #[test]
    fn recorded_total_equals_weighted_terms() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        let phi = PerceptualNet::build(2, 3);
        let wts = LossWeights { mse: 0.7, per: 1.3, latent: 0.4 };
        let mut tape = Tape::new();
        let e = tape.constant(sample_prior(&mut rng::stream(1, 5), 8, 64).into_tensor()).unwrap();
        let o = tape.constant(sample_prior(&mut rng::stream(1, 6), 8, 64).into_tensor()).unwrap();
        let v = record_losses(&mut tape, &g, &phi, e, o, &wts).unwrap();
        let terms = LossTerms {
            l_w: tape.scalar_value(v.l_w),
            l_mse: tape.scalar_value(v.l_mse),
            l_per: tape.scalar_value(v.l_per),
        };
        assert_eq!(tape.scalar_value(v.total).to_bits(), wts.total(&terms).to_bits());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let g = tiny_generator().cast::<f64>();
        let phi = PerceptualNet::build(2, 3).cast::<f64>();
        let w_e = sample_prior(&mut rng::stream(2, 1), 4, 8).tensor().cast::<f64>();
        let w_o = sample_prior(&mut rng::stream(2, 2), 4, 8).tensor().cast::<f64>();
        let report = gradient_check(
            &[w_e],
            |tape, v| {
                let o = tape.constant(w_o.clone())?;
                Ok(record_losses(tape, &g, &phi, v[0], o, &LossWeights::default())?.total)
            },
            1e-5,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn counters_and_state_round_trip() {
        for v in [0u64, 1, 65535, 65536, u64::MAX, 123_456_789_012] {
            assert_eq!(decode_u64(&encode_u64(v)).unwrap(), v);
        }
        let g = tiny_generator();
        let net = EmbedNet::for_generator(3, &g, false).unwrap();
        let mut st = TrainState::new(net);
        st.adam.step = 42;
        st.adam.m[0][0] = 0.125;
        st.epochs_done = 2;
        st.updates = 77;
        let back = TrainState::from_checkpoint(&st.to_checkpoint(), &g).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = LossReport::default();
        let terms = LossTerms { l_w: 0.1, l_mse: 1.0 / 3.0, l_per: 2e-7 };
        r.batches.push(BatchRow { epoch: 0, batch: 0, samples: 4, accepted: 2, terms, total: 0.433_333_3 });
        r.epochs.push(EpochRow {
            epoch: 0,
            terms,
            total: 0.4,
            heldout: Some(ReconstructionMetrics { samples: 5, mse: 0.01, phi: 0.2, psnr: 25.5, ssim: 0.75 }),
        });
        r.epochs.push(EpochRow { epoch: 1, terms, total: 0.4, heldout: None });
        let back = LossReport::from_csv(&r.batch_csv(), &r.epoch_csv(), 5).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn zero_weights_leave_encoder_unchanged() {
        let g = tiny_generator();
        let phi = PerceptualNet::build(2, 3);
        let corpus = gen_corpus(&g, 6, 4).unwrap();
        let net = EmbedNet::for_generator(3, &g, false).unwrap();
        let before = net.hash_hex();
        let mut st = TrainState::new(net);
        let cfg = TrainConfig {
            weights: LossWeights { mse: 0.0, per: 0.0, latent: 0.0 },
            epochs: 1,
            batch_size: 2,
            iterator: IterConfig { steps: 2, ..IterConfig::default() },
            ..TrainConfig::default()
        };
        train(&corpus.train, &[], &g, &phi, &mut st, &cfg, &mut NoObserver).unwrap();
        assert_eq!(st.net.hash_hex(), before);
        assert_eq!(st.updates, 3);
        assert_eq!(st.cache.len(), corpus.train.len());
    }

    #[test]
    fn epoch_order_depends_on_seed_and_epoch() {
        assert_eq!(epoch_order(10, 1, 0), epoch_order(10, 1, 0));
        assert_ne!(epoch_order(10, 1, 0), epoch_order(10, 1, 1));
        assert_ne!(epoch_order(10, 1, 0), epoch_order(10, 2, 0));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { weights: LossWeights { mse: -1.0, ..LossWeights::default() }, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { finetune_generator: true, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let mut ok = TrainConfig { mode: TrainMode::NoIterator, finetune_generator: true, ..TrainConfig::default() };
        ok.iterator.steps = 0;
        ok.validate().unwrap();
        assert_eq!("offline".parse::<TrainMode>().unwrap(), TrainMode::Offline);
        assert!("online".parse::<TrainMode>().is_err());
    }
}

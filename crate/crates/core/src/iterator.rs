//! Optimization-based inversion: Adam on a latent code minimizing
//! `MSE(G(w), x) + α·phi(G(w), x)`.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::embed::EmbedNet;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::image::Image;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::perceptual::PerceptualNet;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Prior samples averaged for the mean latent.
pub const MEAN_LATENT_SAMPLES: usize = 4096;
pub const MEAN_LATENT_SEED: u64 = 0x5EED_3EA7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitScheme {
    Random,
    Mean,
    Encoder,
    Explicit,
}

impl InitScheme {
    pub const ALL_LEARNED: [InitScheme; 3] = [InitScheme::Encoder, InitScheme::Mean, InitScheme::Random];
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Random => "random",
            InitScheme::Mean => "mean",
            InitScheme::Encoder => "encoder",
            InitScheme::Explicit => "explicit",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitScheme::Random),
            "mean" => Ok(InitScheme::Mean),
            "encoder" => Ok(InitScheme::Encoder),
            "explicit" => Ok(InitScheme::Explicit),
            _ => Err(Error::Config(format!("unknown init scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterConfig {
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
    pub init_scheme: InitScheme,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.05,
            alpha: 1.0,
            init_scheme: InitScheme::Mean,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("iterator lr must be > 0, got {}", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.beta1, self.beta2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub mse: f64,
    pub phi: f64,
    pub total: f64,
    pub latent_err: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InversionTrace {
    pub records: Vec<TraceRecord>,
    pub wall_clock: Duration,
}

pub const TRACE_HEADER: &str = "step,mse,phi,total,latent_err";

impl InversionTrace {
    pub fn final_record(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// `L_opt` after `step` updates, if recorded.
    pub fn total_at(&self, step: usize) -> Option<f64> {
        self.records.get(step).map(|r| r.total)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.records {
            let err = r.latent_err.map(|e| format!("{e:.9e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{err}\n",
                r.step, r.mse, r.phi, r.total
            ));
        }
        s
    }
}

/// Scalar handles of one `L_opt` evaluation.
pub struct ObjectiveVars {
    pub total: Var,
    pub mse: Var,
    pub phi: Var,
    pub image: Var,
}

/// Records `L_opt(w) = mean((G(w) − x)²) + α·phi(G(w), x)`.
pub fn record_objective<S: Scalar>(
    tape: &mut Tape<S>,
    g: &Generator<S>,
    phi: &PerceptualNet<S>,
    w: Var,
    target: Var,
    alpha: f64,
) -> Result<ObjectiveVars> {
    let syn = g.forward(tape, w)?;
    if tape.value(syn.image).shape() != tape.value(target).shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs generator output {:?}",
            tape.value(target).shape(),
            tape.value(syn.image).shape()
        )));
    }
    let diff = tape.sub(syn.image, target)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq)?;
    let p = phi.forward(tape, syn.image, target)?;
    let weighted = tape.scale(p, alpha)?;
    let total = tape.add(mse, weighted)?;
    Ok(ObjectiveVars { total, mse, phi: p, image: syn.image })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub total: f32,
    pub mse: f32,
    pub phi: f32,
}

/// Forward-only `L_opt` in working precision. This is the single code path
/// used for cache losses, so stored and recomputed values agree bit-exactly.
pub fn objective(g: &Generator, phi: &PerceptualNet, x: &Image, w: &LatentCode, alpha: f64) -> Result<ObjectiveValue> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.tensor().clone())?;
    let xv = tape.constant(x.tensor().clone())?;
    let o = record_objective(&mut tape, g, phi, wv, xv, alpha)?;
    Ok(ObjectiveValue {
        total: tape.scalar_value(o.total),
        mse: tape.scalar_value(o.mse),
        phi: tape.scalar_value(o.phi),
    })
}

/// Everything an initialization scheme may draw on.
pub struct InitContext<'a> {
    pub mean: LatentCode,
    pub embednet: Option<&'a EmbedNet>,
    pub explicit: Option<LatentCode>,
}

impl<'a> InitContext<'a> {
    pub fn new(g: &Generator, embednet: Option<&'a EmbedNet>) -> Result<Self> {
        Ok(Self {
            mean: g.mean_latent(MEAN_LATENT_SAMPLES, MEAN_LATENT_SEED)?,
            embednet,
            explicit: None,
        })
    }
}

pub fn init_latent(scheme: InitScheme, x: &Image, ctx: &InitContext<'_>, r: &mut Rng) -> Result<LatentCode> {
    match scheme {
        InitScheme::Mean => Ok(ctx.mean.clone()),
        InitScheme::Random => {
            let (l, d) = (ctx.mean.layers(), ctx.mean.dim());
            let data = (0..l * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *r);
                    z as f32
                })
                .collect();
            LatentCode::new(Tensor::new(vec![l, d], data)?)
        }
        InitScheme::Encoder => ctx
            .embednet
            .ok_or_else(|| Error::Config("encoder initialization needs an embedding network".into()))?
            .embed(x),
        InitScheme::Explicit => ctx
            .explicit
            .clone()
            .ok_or_else(|| Error::Config("explicit initialization needs a latent code".into())),
    }
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub latent: LatentCode,
    pub trace: InversionTrace,
}

/// A run stopped by a non-finite loss or gradient. Carries the best latent
/// seen before the failure and the partial trace.
#[derive(Clone, Debug)]
pub struct Aborted {
    pub reason: String,
    pub best: LatentCode,
    pub trace: InversionTrace,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "inversion aborted after {} records: {}", self.trace.records.len(), self.reason)
    }
}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        Error::NonFinite(a.to_string())
    }
}

/// Runs `config.steps` Adam updates on `w` from `w_init`. The trace holds
/// `steps + 1` records; record `k` is the objective after `k` updates.
pub fn optimize_latent(
    g: &Generator,
    phi: &PerceptualNet,
    x: &Image,
    w_init: &LatentCode,
    config: &IterConfig,
    oracle: Option<&LatentCode>,
) -> Result<std::result::Result<Inversion, Aborted>> {
    config.validate()?;
    let shape = g.latent_shape();
    if w_init.tensor().shape() != shape {
        return Err(Error::Shape(format!(
            "initial latent {:?} vs generator {shape:?}",
            w_init.tensor().shape()
        )));
    }
    if x.tensor().shape() != g.image_shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs generator {:?}",
            x.tensor().shape(),
            g.image_shape()
        )));
    }
    let start = Instant::now();
    let adam = config.adam();
    let mut w = w_init.tensor().clone();
    let mut state = AdamState::new([&w]);
    let mut trace = InversionTrace::default();
    let mut best = (w_init.clone(), f64::INFINITY);

    for step in 0..=config.steps {
        let last = step == config.steps;
        let mut tape = Tape::<f32>::new();
        let abort = |reason: String, best: LatentCode, mut trace: InversionTrace| {
            trace.wall_clock = start.elapsed();
            Ok(Err(Aborted { reason, best, trace }))
        };
        let eval = (|| -> Result<(Var, ObjectiveVars)> {
            let wv = tape.leaf(w.clone(), !last)?;
            let xv = tape.constant(x.tensor().clone())?;
            let o = record_objective(&mut tape, g, phi, wv, xv, config.alpha)?;
            Ok((wv, o))
        })();
        let (wv, o) = match eval {
            Ok(v) => v,
            Err(Error::NonFinite(m)) => return abort(m, best.0, trace),
            Err(e) => return Err(e),
        };
        let total = tape.scalar_value(o.total) as f64;
        let current = LatentCode::new(w.clone())?;
        trace.records.push(TraceRecord {
            step,
            mse: tape.scalar_value(o.mse) as f64,
            phi: tape.scalar_value(o.phi) as f64,
            total,
            latent_err: oracle.map(|o| current.distance(o)),
        });
        if total < best.1 {
            best = (current, total);
        }
        if last {
            break;
        }
        let mut grads = tape.backward(o.total)?;
        let grad = grads.take(wv).unwrap_or_else(|| Tensor::zeros(shape.to_vec()));
        match adam_step(&mut [&mut w], &[&grad], &mut state, &adam) {
            Ok(()) => {}
            Err(Error::NonFinite(m)) => return abort(m, best.0, trace),
            Err(e) => return Err(e),
        }
        if !w.is_finite() {
            return abort(format!("latent became non-finite at step {}", step + 1), best.0, trace);
        }
    }
    trace.wall_clock = start.elapsed();
    Ok(Ok(Inversion { latent: LatentCode::new(w)?, trace }))
}

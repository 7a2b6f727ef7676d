//! Fixed random-feature perceptual distance.
//!
//! Three stride-2 3×3 conv stages (16, 32, 64 channels, leaky-ReLU). At
//! every stage both feature maps are normalized to unit length along the
//! channel axis and the mean squared difference is taken; stage terms are
//! summed with unit weights.

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{gaussian, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const CKPT_PREFIX: &str = "phi/";
pub const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet<S: Scalar = f32> {
    params: ParamSet<S>,
    stages: usize,
}

impl PerceptualNet<f32> {
    pub fn build(seed: u64, image_channels: usize) -> Self {
        let mut p = ParamSet::new();
        let mut cin = image_channels;
        for (s, &cout) in STAGE_WIDTHS.iter().enumerate() {
            let name = format!("s{s}.w");
            let he = (2.0 / (cin * 9) as f64).sqrt();
            p.insert(name.clone(), gaussian(seed, &name, vec![cout, cin, 3, 3], he));
            p.insert(format!("s{s}.b"), Tensor::zeros(vec![cout]));
            cin = cout;
        }
        Self { params: p, stages: STAGE_WIDTHS.len() }
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.push_set(CKPT_PREFIX, &self.params);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.extract_set(CKPT_PREFIX);
        let mut stages = 0;
        while params.get(&format!("s{stages}.w")).is_some() {
            params.require(&format!("s{stages}.b"))?;
            stages += 1;
        }
        if stages == 0 || params.len() != 2 * stages {
            return Err(Error::Format("perceptual checkpoint: unexpected entries".into()));
        }
        Ok(Self { params, stages })
    }

    /// `phi(a, b)` evaluated in working precision.
    pub fn distance(&self, a: &Image, b: &Image) -> Result<f32> {
        a.same_shape(b)?;
        let mut tape = Tape::new();
        let av = tape.constant(a.tensor().clone())?;
        let bv = tape.constant(b.tensor().clone())?;
        let d = self.forward(&mut tape, av, bv)?;
        Ok(tape.scalar_value(d))
    }

    pub fn hash_hex(&self) -> String {
        self.params.hash_hex()
    }
}

impl<S: Scalar> PerceptualNet<S> {
    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn cast<T: Scalar>(&self) -> PerceptualNet<T> {
        PerceptualNet { params: self.params.cast(), stages: self.stages }
    }

    /// Channel-normalized features of every stage.
    pub fn features(&self, tape: &mut Tape<S>, x: Var) -> Result<Vec<Var>> {
        let p = self.params.bind(tape, false)?;
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages);
        for s in 0..self.stages {
            h = tape.conv2d(h, p.var(&format!("s{s}.w")), 2, 1)?;
            h = tape.add_bias(h, p.var(&format!("s{s}.b")))?;
            h = tape.leaky_relu(h)?;
            out.push(tape.channel_unit_norm(h)?);
        }
        Ok(out)
    }

    pub fn distance_from_features(&self, tape: &mut Tape<S>, fa: &[Var], fb: &[Var]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (&a, &b) in fa.iter().zip(fb) {
            let d = tape.sub(a, b)?;
            let sq = tape.square(d)?;
            let m = tape.mean(sq)?;
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m)?,
            });
        }
        total.ok_or_else(|| Error::Shape("perceptual net has no stages".into()))
    }

    pub fn forward(&self, tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
        if tape.value(a).shape() != tape.value(b).shape() {
            return Err(Error::Shape(format!(
                "phi: {:?} vs {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            )));
        }
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        self.distance_from_features(tape, &fa, &fb)
    }
}

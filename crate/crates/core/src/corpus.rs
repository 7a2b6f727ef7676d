//! Synthetic ground-truth corpus: prior sampling, generation with known
//! latents, perturbations and the on-disk manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::image::Image;
use crate::parallel;
use crate::rng::{self, purpose, Rng};
use crate::tensor::Tensor;

/// Per-row jitter added to the shared base vector.
pub const PRIOR_JITTER: f64 = 0.1;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_CORPUS_SIZE: usize = 512;

/// Draws `base + 0.1·jitter_l` for every row `l`, with `base, jitter_l ~ N(0, I_d)`.
pub fn sample_prior(r: &mut Rng, layers: usize, dim: usize) -> LatentCode {
    let base: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *r)).collect();
    let mut data = Vec::with_capacity(layers * dim);
    for _ in 0..layers {
        for &b in &base {
            let j: f64 = StandardNormal.sample(&mut *r);
            data.push((b + PRIOR_JITTER * j) as f32);
        }
    }
    LatentCode::new(Tensor::new(vec![layers, dim], data).expect("sized")).expect("finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Generated,
    Perturbed,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Generated => "generated",
            Provenance::Perturbed => "perturbed",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generated" => Ok(Provenance::Generated),
            "perturbed" => Ok(Provenance::Perturbed),
            _ => Err(Error::Format(format!("unknown provenance {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub sample_id: u64,
    pub image: Image,
    pub oracle_latent: Option<LatentCode>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<CorpusSample>,
    pub test: Vec<CorpusSample>,
}

/// Number of training samples for a corpus of `n`: `ceil(0.8·n)`.
pub fn train_count(n: usize) -> usize {
    (TRAIN_FRACTION * n as f64).ceil() as usize
}

/// Generates `n` samples with oracle latents and splits them by a seeded shuffle.
pub fn gen_corpus(g: &Generator, n: usize, seed: u64) -> Result<Corpus> {
    if n < 2 {
        return Err(Error::Config(format!("corpus needs at least 2 samples, got {n}")));
    }
    let [l, d] = g.latent_shape();
    let ids: Vec<u64> = (0..n as u64).collect();
    let samples = parallel::try_map(&ids, |_, &id| -> Result<CorpusSample> {
        let mut r = rng::stream(seed, purpose::PRIOR_SAMPLE + id);
        let w = sample_prior(&mut r, l, d);
        Ok(CorpusSample {
            sample_id: id,
            image: g.synthesize(&w)?,
            oracle_latent: Some(w),
            provenance: Provenance::Generated,
        })
    })?;
    Ok(split(samples, seed))
}

fn split(samples: Vec<CorpusSample>, seed: u64) -> Corpus {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, purpose::SPLIT));
    let n_train = train_count(n);
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(is_train) {
        if t {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Corpus { train, test }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    GaussianNoise,
    BoxBlur3,
    ChannelGain,
}

impl FromStr for PerturbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(PerturbKind::GaussianNoise),
            "box_blur3" => Ok(PerturbKind::BoxBlur3),
            "channel_gain" => Ok(PerturbKind::ChannelGain),
            _ => Err(Error::Unsupported(format!("perturbation kind {s:?}"))),
        }
    }
}

/// Off-manifold probe. `magnitude` is the noise σ, the blur blend weight
/// (in `[0, 1]`) or the std of the per-channel gain. Output is clamped.
pub fn perturb(image: &Image, kind: PerturbKind, magnitude: f64, r: &mut Rng) -> Result<Image> {
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(Error::Config(format!("perturbation magnitude {magnitude}")));
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let x = image.data();
    let m = magnitude as f32;
    let out: Vec<f32> = match kind {
        PerturbKind::GaussianNoise => x
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut *r);
                v + m * z as f32
            })
            .collect(),
        PerturbKind::BoxBlur3 => {
            if magnitude > 1.0 {
                return Err(Error::Config(format!("blur blend {magnitude} > 1")));
            }
            let blurred = box_blur3(c, h, w, x);
            x.iter().zip(&blurred).map(|(&v, &b)| (1.0 - m) * v + m * b).collect()
        }
        PerturbKind::ChannelGain => {
            let gains: Vec<f32> = (0..c)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *r);
                    1.0 + m * z as f32
                })
                .collect();
            x.iter().enumerate().map(|(i, &v)| gains[i / (h * w)] * v).collect()
        }
    };
    Image::clamped(Tensor::new(vec![c, h, w], out)?)
}

/// 3×3 mean filter with edge replication.
fn box_blur3(c: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0f32;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xc = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[yy * w + xc];
                    }
                }
                out[ch * h * w + y * w + xx] = acc / 9.0;
            }
        }
    }
    out
}

pub const MANIFEST_HEADER: &str = "sample_id,provenance,split,image_path,latent_path";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: u64,
    pub provenance: Provenance,
    pub split: String,
    pub image_path: String,
    pub latent_path: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tagged(&self) -> impl Iterator<Item = (&'static str, &CorpusSample)> {
        self.train
            .iter()
            .map(|s| ("train", s))
            .chain(self.test.iter().map(|s| ("test", s)))
    }

    pub fn manifest_rows(&self) -> Vec<ManifestRow> {
        let mut rows: Vec<ManifestRow> = self
            .tagged()
            .map(|(split, s)| ManifestRow {
                sample_id: s.sample_id,
                provenance: s.provenance,
                split: split.to_string(),
                image_path: format!("images/{:06}.ppm", s.sample_id),
                latent_path: if s.oracle_latent.is_some() {
                    format!("latents/{:06}.ten", s.sample_id)
                } else {
                    String::new()
                },
            })
            .collect();
        rows.sort_by_key(|r| r.sample_id);
        rows
    }

    pub fn manifest_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in self.manifest_rows() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sample_id, r.provenance, r.split, r.image_path, r.latent_path
            ));
        }
        s
    }

    /// SHA-256 over the manifest and every image and latent value.
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest_csv().as_bytes());
        let mut samples: Vec<_> = self.tagged().map(|(_, s)| s).collect();
        samples.sort_by_key(|s| s.sample_id);
        for s in samples {
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
            if let Some(w) = &s.oracle_latent {
                for v in w.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("latents"))?;
        for (_, s) in self.tagged() {
            s.image.save_ppm(dir.join(format!("images/{:06}.ppm", s.sample_id)))?;
            if let Some(w) = &s.oracle_latent {
                w.save(dir.join(format!("latents/{:06}.ten", s.sample_id)))?;
            }
        }
        std::fs::write(dir.join("manifest.csv"), self.manifest_csv())?;
        Ok(())
    }

    /// Loads a corpus written by [`Corpus::write_dir`]. Images come back
    /// 8-bit quantized.
    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(dir.join("manifest.csv"))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format("manifest header mismatch".into()));
        }
        let mut corpus = Corpus { train: Vec::new(), test: Vec::new() };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("manifest line {}: {line:?}", i + 2)));
            }
            let sample_id = f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad sample id {:?}", f[0])))?;
            let oracle_latent = if f[4].is_empty() {
                None
            } else {
                Some(LatentCode::load(dir.join(f[4]))?)
            };
            let s = CorpusSample {
                sample_id,
                image: Image::load_ppm(dir.join(f[3]))?,
                oracle_latent,
                provenance: f[1].parse()?,
            };
            match f[2] {
                "train" => corpus.train.push(s),
                "test" => corpus.test.push(s),
                other => return Err(Error::Format(format!("unknown split {other:?}"))),
            }
        }
        Ok(corpus)
    }
}

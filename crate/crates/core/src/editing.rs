//! Edits in latent space: morphing, style mixing and colorization.

use std::fmt;

use crate::embed::EmbedNet;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentCode};
use crate::image::Image;
use crate::tensor::Tensor;

/// Morph panel weights of a strip, left to right.
pub const MORPH_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Layers taken from the style code by default (half of the 8 layers).
pub const DEFAULT_MIX_LAYERS: usize = 4;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EditSpec {
    Morph { lambda: f64 },
    StyleMix { k: usize },
    Colorize { k: usize },
}

impl EditSpec {
    pub fn validate(&self, layers: usize) -> Result<()> {
        match *self {
            EditSpec::Morph { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(Error::Config(format!("morph lambda must lie in [0, 1], got {lambda}")))
            }
            EditSpec::StyleMix { k } | EditSpec::Colorize { k } if k > layers => {
                Err(Error::Config(format!("mixing layer count {k} exceeds {layers} layers")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EditSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditSpec::Morph { lambda } => write!(f, "morph(lambda={lambda})"),
            EditSpec::StyleMix { k } => write!(f, "style_mix(k={k})"),
            EditSpec::Colorize { k } => write!(f, "colorize(k={k})"),
        }
    }
}

fn same_shape(a: &LatentCode, b: &LatentCode) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!(
            "latent codes differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// `λ·w1 + (1 − λ)·w2`; the endpoints return the inputs unchanged.
pub fn morph(w1: &LatentCode, w2: &LatentCode, lambda: f64) -> Result<LatentCode> {
    EditSpec::Morph { lambda }.validate(w1.layers())?;
    same_shape(w1, w2)?;
    if lambda == 1.0 {
        return Ok(w1.clone());
    }
    if lambda == 0.0 {
        return Ok(w2.clone());
    }
    let data = w1
        .data()
        .iter()
        .zip(w2.data())
        .map(|(&a, &b)| (lambda * a as f64 + (1.0 - lambda) * b as f64) as f32)
        .collect();
    LatentCode::new(Tensor::new(w1.tensor().shape().to_vec(), data)?)
}

/// First `L − k` rows from `base`, last `k` rows from `style`.
pub fn style_mix(base: &LatentCode, style: &LatentCode, k: usize) -> Result<LatentCode> {
    EditSpec::StyleMix { k }.validate(base.layers())?;
    same_shape(base, style)?;
    let split = (base.layers() - k) * base.dim();
    let mut data = base.data()[..split].to_vec();
    data.extend_from_slice(&style.data()[split..]);
    LatentCode::new(Tensor::new(base.tensor().shape().to_vec(), data)?)
}

/// BT.601 luma replicated to three channels.
pub fn grayscale(image: &Image) -> Result<Image> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("grayscale needs 3 channels, got {}", image.channels())));
    }
    let plane = image.height() * image.width();
    let d = image.data();
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        let v = |c: usize| d[c * plane + p] as f64;
        let (r, g, b) = (v(0), v(1), v(2));
        // The weights sum to one, so luma commutes with the map to [0, 1].
        // Relative to green, r = g = b yields g exactly.
        let v = (g + LUMA[0] * (r - g) + LUMA[2] * (b - g)) as f32;
        for c in 0..3 {
            out[c * plane + p] = v;
        }
    }
    Image::clamped(Tensor::new(vec![3, image.height(), image.width()], out)?)
}

/// `G(style_mix(H(x_gray), H(x_color), k))`.
pub fn colorize(x_gray: &Image, x_color: &Image, net: &EmbedNet, g: &Generator, k: usize) -> Result<Image> {
    let base = net.embed(x_gray)?;
    let style = net.embed(x_color)?;
    g.synthesize(&style_mix(&base, &style, k)?)
}

/// Mean over pixels of the largest minus the smallest channel value.
pub fn channel_dispersion(image: &Image) -> f64 {
    let plane = image.height() * image.width();
    let d = image.data();
    let c = image.channels();
    let total: f64 = (0..plane)
        .map(|p| {
            let vals = (0..c).map(|ch| d[ch * plane + p] as f64);
            let max = vals.clone().fold(f64::MIN, f64::max);
            let min = vals.fold(f64::MAX, f64::min);
            max - min
        })
        .sum();
    total / plane as f64
}

/// One panel per `λ` in `lambdas`, left to right.
pub fn morph_strip(g: &Generator, w1: &LatentCode, w2: &LatentCode, lambdas: &[f64]) -> Result<Vec<Image>> {
    lambdas.iter().map(|&l| g.synthesize(&morph(w1, w2, l)?)).collect()
}

/// Row `i` shows base `i` mixed with every style code.
pub fn mix_grid(g: &Generator, bases: &[LatentCode], styles: &[LatentCode], k: usize) -> Result<Vec<Vec<Image>>> {
    bases
        .iter()
        .map(|b| styles.iter().map(|s| g.synthesize(&style_mix(b, s, k)?)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sample_prior;
    use crate::generator::GeneratorConfig;
    use crate::metrics;
    use crate::rng;

    fn prior(id: u64) -> LatentCode {
        sample_prior(&mut rng::stream(21, id), 8, 64)
    }

    #[test]
    fn morph_endpoints_are_bit_exact() {
        let mut t = prior(1).into_tensor();
        t.data_mut()[0] = -0.0;
        let (w1, w2) = (LatentCode::new(t).unwrap(), prior(2));
        let bits = |w: &LatentCode| w.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&morph(&w1, &w2, 1.0).unwrap()), bits(&w1));
        assert_eq!(bits(&morph(&w1, &w2, 0.0).unwrap()), bits(&w2));
    }

    #[test]
    fn morph_midpoint() {
        let zero = LatentCode::zeros(8, 64);
        let two = LatentCode::new(Tensor::full(vec![8, 64], 2.0)).unwrap();
        let mid = morph(&zero, &two, 0.5).unwrap();
        assert!(mid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn morph_rejects_bad_inputs() {
        let (a, b) = (prior(1), prior(2));
        assert!(matches!(morph(&a, &b, 1.5), Err(Error::Config(_))));
        assert!(matches!(morph(&a, &b, -0.1), Err(Error::Config(_))));
        assert!(matches!(morph(&a, &LatentCode::zeros(4, 64), 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn style_mix_boundaries() {
        let (a, b) = (prior(3), prior(4));
        assert_eq!(style_mix(&a, &b, 0).unwrap(), a);
        assert_eq!(style_mix(&a, &b, 8).unwrap(), b);
        let m = style_mix(&a, &b, 4).unwrap();
        for l in 0..4 {
            assert_eq!(m.row(l), a.row(l));
            assert_eq!(m.row(l + 4), b.row(l + 4));
        }
        assert!(style_mix(&a, &b, 9).is_err());
    }

    #[test]
    fn grayscale_of_pure_red() {
        let mut t = Tensor::full(vec![3, 2, 2], -1.0f32);
        t.data_mut()[..4].fill(1.0);
        let g = grayscale(&Image::new(t).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| (v as f64 + 0.402).abs() < 1e-6));
    }

    #[test]
    fn grayscale_is_idempotent() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        let x = g.synthesize(&prior(5)).unwrap();
        let once = grayscale(&x).unwrap();
        assert_ne!(once, x);
        assert_eq!(grayscale(&once).unwrap(), once);
        let gray = Image::new(Tensor::full(vec![3, 4, 4], 1e-10f32)).unwrap();
        assert_eq!(grayscale(&gray).unwrap(), gray);
        assert_eq!(channel_dispersion(&once), 0.0);
    }

    #[test]
    fn morph_is_continuous() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        for pair in 0..4 {
            let (w1, w2) = (prior(10 + pair), prior(20 + pair));
            for lambda in [0.0, 0.3, 0.99] {
                let a = g.synthesize(&morph(&w1, &w2, lambda).unwrap()).unwrap();
                let b = g.synthesize(&morph(&w1, &w2, lambda + 0.01).unwrap()).unwrap();
                assert!(metrics::mse(&a, &b).unwrap() < 0.01);
            }
        }
    }

    #[test]
    fn colorize_degenerate_cases() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        let net = EmbedNet::for_generator(2, &g, false).unwrap();
        let gray = grayscale(&g.synthesize(&prior(6)).unwrap()).unwrap();
        let color = g.synthesize(&prior(7)).unwrap();
        let plain = g.synthesize(&net.embed(&gray).unwrap()).unwrap();
        assert_eq!(colorize(&gray, &color, &net, &g, 0).unwrap(), plain);
        assert_eq!(colorize(&gray, &gray, &net, &g, 4).unwrap(), plain);
    }

    #[test]
    fn strip_and_grid_shapes() {
        let g = Generator::build(1, GeneratorConfig::default()).unwrap();
        let (w1, w2) = (prior(1), prior(2));
        let strip = morph_strip(&g, &w1, &w2, &MORPH_LAMBDAS).unwrap();
        assert_eq!(strip.len(), 5);
        assert_eq!(strip[0], g.synthesize(&w2).unwrap());
        assert_eq!(strip[4], g.synthesize(&w1).unwrap());
        let grid = mix_grid(&g, &[w1.clone(), w2.clone()], &[w1, w2], 4).unwrap();
        assert_eq!((grid.len(), grid[0].len()), (2, 2));
    }
}

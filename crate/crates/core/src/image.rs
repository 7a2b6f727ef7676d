//! `C×H×W` images in `[−1, 1]` and binary PPM (P6) I/O.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor<f32>);

impl Image {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Shape(format!("image must be C×H×W, got {:?}", t.shape())));
        }
        t.check_finite("image")?;
        if let Some(v) = t.data().iter().find(|v| v.abs() > 1.0) {
            return Err(Error::Shape(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self(t))
    }

    /// Builds an image after clamping every value into `[−1, 1]`.
    pub fn clamped(mut t: Tensor<f32>) -> Result<Self> {
        for v in t.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(t)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(vec![channels, height, width], value))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    /// Values mapped from `[−1, 1]` to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.0.data().iter().map(|&v| (v as f64 + 1.0) * 0.5).collect()
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::Shape(format!(
                "images differ in shape: {:?} vs {:?}",
                self.0.shape(),
                other.0.shape()
            )));
        }
        Ok(())
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        if self.channels() != 3 {
            return Err(Error::Shape(format!("PPM needs 3 channels, got {}", self.channels())));
        }
        let (h, wd) = (self.height(), self.width());
        write!(w, "P6\n{wd} {h}\n255\n")?;
        let plane = h * wd;
        let d = self.0.data();
        let mut bytes = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                bytes.push(quantize(d[c * plane + p]));
            }
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let magic = header_token(&mut r)?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected P6, found {magic:?}")));
        }
        let mut num = |what: &str| -> Result<usize> {
            let tok = header_token(&mut r)?;
            tok.parse()
                .map_err(|_| Error::Format(format!("bad PPM {what}: {tok:?}")))
        };
        let (wd, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        if wd == 0 || h == 0 {
            return Err(Error::Format("empty PPM".into()));
        }
        let plane = wd * h;
        let mut bytes = vec![0u8; plane * 3];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated PPM payload: {e}")))?;
        let mut data = vec![0f32; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = bytes[p * 3 + c] as f32 / 127.5 - 1.0;
            }
        }
        Self::clamped(Tensor::new(vec![3, h, wd], data)?)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(std::io::BufWriter::new(f))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_ppm(std::io::BufReader::new(f))
    }

    /// Concatenates equally sized images left to right.
    pub fn hconcat(images: &[Image]) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("montage of zero images".into()))?;
        for im in images {
            first.same_shape(im)?;
        }
        let (c, h, w) = (first.channels(), first.height(), first.width());
        let total_w = w * images.len();
        let mut data = vec![0f32; c * h * total_w];
        for (k, im) in images.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    let src = &im.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let off = (ch * h + y) * total_w + k * w;
                    data[off..off + w].copy_from_slice(src);
                }
            }
        }
        Image::new(Tensor::new(vec![c, h, total_w], data)?)
    }

    /// Stacks equally sized images top to bottom.
    pub fn vconcat(images: &[Image]) -> Result<Image> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("montage of zero images".into()))?;
        for im in images {
            first.same_shape(im)?;
        }
        let (c, h, w) = (first.channels(), first.height(), first.width());
        let plane = h * w;
        let mut data = Vec::with_capacity(c * plane * images.len());
        for ch in 0..c {
            for im in images {
                data.extend_from_slice(&im.data()[ch * plane..(ch + 1) * plane]);
            }
        }
        Image::new(Tensor::new(vec![c, h * images.len(), w], data)?)
    }
}

/// `[−1, 1] → [0, 255]` by affine map and round-half-up.
fn quantize(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of PPM header".into()));
            }
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
        if tok.len() > 16 {
            return Err(Error::Format("oversized PPM header token".into()));
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PPM header".into()))
}

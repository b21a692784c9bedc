use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

const BLOBS_PER_CLASS: usize = 3;

/// Gaussian-blob image classes: `blobs:<classes>:<h>x<w>x<c>:<ntrain>/<ntest>:<seed>`.
///
/// Each class is a fixed arrangement of blobs. Instances shift, rescale and
/// re-weight the arrangement and add sensor noise, so class identity
/// survives crops, flips and colour changes but single pixels are unreliable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SyntheticSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: Vec<f64>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > usize::from(u16::MAX) {
            return Err(Error::Config(format!(
                "blobs needs 2..=65535 classes, got {}",
                self.classes
            )));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::Config("blobs images must be at least 2x2x1".into()));
        }
        if self.n_train < self.classes {
            return Err(Error::Config(format!(
                "{} training images cannot cover {} classes",
                self.n_train, self.classes
            )));
        }
        Ok(())
    }

    fn prototypes(&self, rng: &mut Rng) -> Vec<Vec<Blob>> {
        let (h, w) = (self.height as f64, self.width as f64);
        let scale = h.min(w) / 8.0;
        (0..self.classes)
            .map(|_| {
                (0..BLOBS_PER_CLASS)
                    .map(|_| Blob {
                        cy: rng.uniform_range(0.15 * h, 0.85 * h),
                        cx: rng.uniform_range(0.15 * w, 0.85 * w),
                        sigma: rng.uniform_range(0.7, 1.4) * scale,
                        amp: (0..self.channels).map(|_| rng.uniform_range(0.35, 0.8)).collect(),
                    })
                    .collect()
            })
            .collect()
    }

    fn render(&self, proto: &[Blob], rng: &mut Rng, out: &mut Vec<u8>) {
        let (h, w) = (self.height, self.width);
        let scale = h.min(w) as f64 / 8.0;
        let (dy, dx) = (rng.normal() * 1.0 * scale, rng.normal() * 1.0 * scale);
        let zoom = rng.uniform_range(0.85, 1.15);
        let (my, mx) = (h as f64 / 2.0, w as f64 / 2.0);
        let blobs: Vec<(f64, f64, f64, f64)> = proto
            .iter()
            .map(|b| {
                let cy = my + (b.cy - my) * zoom + dy + rng.normal() * 0.15 * scale;
                let cx = mx + (b.cx - mx) * zoom + dx + rng.normal() * 0.15 * scale;
                (cy, cx, b.sigma * zoom, rng.uniform_range(0.85, 1.15))
            })
            .collect();
        let background = rng.uniform_range(0.05, 0.25);
        let contrast = rng.uniform_range(0.75, 1.25);
        for ch in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    let mut v = background;
                    for ((cy, cx, s, gain), b) in blobs.iter().zip(proto) {
                        let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                        v += contrast * gain * b.amp[ch] * (-d2 / (2.0 * s * s)).exp();
                    }
                    v += rng.normal() * 0.05;
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }

    fn split(&self, protos: &[Vec<Blob>], n: usize, split: Split, rng: &mut Rng) -> Result<Dataset> {
        let mut labels: Vec<u16> = (0..n).map(|i| (i % self.classes) as u16).collect();
        rng.shuffle(&mut labels);
        let mut pixels = Vec::with_capacity(n * self.height * self.width * self.channels);
        for (i, &l) in labels.iter().enumerate() {
            self.render(&protos[usize::from(l)], &mut rng.split_index(i as u64), &mut pixels);
        }
        Dataset::new(
            split,
            [self.channels, self.height, self.width],
            pixels,
            labels,
            self.classes,
        )
    }

    /// Deterministic train and test splits.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let root = Rng::new(self.seed);
        let protos = self.prototypes(&mut root.split("prototypes"));
        let train = self.split(&protos, self.n_train, Split::Train, &mut root.split("train"))?;
        let test = self.split(&protos, self.n_test, Split::Test, &mut root.split("test"))?;
        Ok((train, test))
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad synthetic spec `{s}` (expected blobs:<classes>:<h>x<w>x<c>:<ntrain>/<ntest>:<seed>)"
            ))
        };
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, classes, dims, counts, seed] = parts[..] else {
            return Err(bad());
        };
        if kind != "blobs" {
            return Err(bad());
        }
        let dims: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let [height, width, channels] = dims[..] else {
            return Err(bad());
        };
        let (a, b) = counts.split_once('/').ok_or_else(bad)?;
        let spec = Self {
            classes: classes.parse().map_err(|_| bad())?,
            height,
            width,
            channels,
            n_train: a.parse().map_err(|_| bad())?,
            n_test: b.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blobs:{}:{}x{}x{}:{}/{}:{}",
            self.classes, self.height, self.width, self.channels, self.n_train, self.n_test, self.seed
        )
    }
}

impl TryFrom<String> for SyntheticSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SyntheticSpec> for String {
    fn from(s: SyntheticSpec) -> String {
        s.to_string()
    }
}

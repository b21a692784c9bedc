use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Pretrain,
    Finetune,
}

/// Random crop, flip, colour jitter and blur. The finetune kind applies crop
/// and flip only, whatever the other fields say.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    /// Range of the crop's area fraction; `(1, 1)` disables cropping.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl AugmentSpec {
    pub fn pretrain() -> Self {
        Self {
            kind: AugmentKind::Pretrain,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            jitter_strength: 1.0,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }

    pub fn finetune() -> Self {
        Self {
            kind: AugmentKind::Finetune,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 1.0),
        }
    }

    pub fn identity(kind: AugmentKind) -> Self {
        Self {
            kind,
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range ({lo}, {hi}) must lie in (0, 1]"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.jitter_strength >= 0.0) {
            return Err(Error::Config("jitter_strength must be >= 0".into()));
        }
        let (s0, s1) = self.blur_sigma;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::Config(format!("blur sigma range ({s0}, {s1}) is invalid")));
        }
        Ok(())
    }
}

fn bilinear(img: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| f64::from(img[r * w + c]);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn crop_resize(img: &mut [f32], shape: [usize; 3], scale: f64, rng: &mut Rng) {
    let [c, h, w] = shape;
    let side = scale.sqrt();
    let (ch, cw) = (side * h as f64, side * w as f64);
    let top = rng.uniform() * (h as f64 - ch);
    let left = rng.uniform() * (w as f64 - cw);
    let src = img.to_vec();
    for k in 0..c {
        let plane = &src[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let y = top + (i as f64 + 0.5) * ch / h as f64 - 0.5;
            for j in 0..w {
                let x = left + (j as f64 + 0.5) * cw / w as f64 - 0.5;
                img[k * h * w + i * w + j] = bilinear(plane, h, w, y, x);
            }
        }
    }
}

fn hflip(img: &mut [f32], shape: [usize; 3]) {
    let w = shape[2];
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

fn color_jitter(img: &mut [f32], shape: [usize; 3], strength: f64, gray_p: f64, rng: &mut Rng) {
    let [c, h, w] = shape;
    let plane = h * w;
    for k in 0..c {
        let px = &mut img[k * plane..(k + 1) * plane];
        let mean = px.iter().map(|v| f64::from(*v)).sum::<f64>() / plane as f64;
        let contrast = 1.0 + rng.uniform_range(-0.4, 0.4) * strength;
        let bright = rng.uniform_range(-0.4, 0.4) * strength;
        for v in px.iter_mut() {
            *v = ((f64::from(*v) - mean) * contrast + mean + bright) as f32;
        }
    }
    if c > 1 && rng.bernoulli(gray_p) {
        for i in 0..plane {
            let g = (0..c).map(|k| img[k * plane + i]).sum::<f32>() / c as f32;
            for k in 0..c {
                img[k * plane + i] = g;
            }
        }
    }
}

fn blur(img: &mut [f32], shape: [usize; 3], sigma: f64) {
    let [c, h, w] = shape;
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let px = &mut img[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let jj = (j + t).saturating_sub(1).min(w - 1);
                    acc += kv * f64::from(px[i * w + jj]);
                }
                tmp[i * w + j] = acc as f32;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let ii = (i + t).saturating_sub(1).min(h - 1);
                    acc += kv * f64::from(tmp[ii * w + j]);
                }
                px[i * w + j] = acc as f32;
            }
        }
    }
}

/// One augmented view of `img` (values in `[0, 1]`, layout `c×h×w`).
pub fn augment_view(img: &[f32], shape: [usize; 3], spec: &AugmentSpec, rng: &mut Rng) -> Vec<f32> {
    let mut out = img.to_vec();
    let scale = rng.uniform_range(spec.crop_scale.0, spec.crop_scale.1);
    if scale < 1.0 {
        crop_resize(&mut out, shape, scale, rng);
    }
    if rng.bernoulli(spec.flip_prob) {
        hflip(&mut out, shape);
    }
    if spec.kind == AugmentKind::Pretrain {
        if spec.jitter_strength > 0.0 {
            color_jitter(&mut out, shape, spec.jitter_strength, spec.grayscale_prob, rng);
        }
        if rng.bernoulli(spec.blur_prob) {
            let sigma = rng.uniform_range(spec.blur_sigma.0, spec.blur_sigma.1);
            blur(&mut out, shape, sigma);
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// One augmented view per index, `[n, c, h, w]`. View `k` draws from
/// `rng.split_index(k)`.
pub fn augment_batch(ds: &Dataset, indices: &[usize], spec: &AugmentSpec, rng: &Rng) -> Tensor<f32> {
    let shape = ds.shape();
    let data = indices
        .iter()
        .enumerate()
        .flat_map(|(k, &i)| augment_view(&ds.image(i), shape, spec, &mut rng.split_index(k as u64)))
        .collect();
    Tensor::new(vec![indices.len(), shape[0], shape[1], shape[2]], data).expect("view shape")
}

/// Two views of each of `N` images, with the positive partner of every view.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchViews {
    /// `[2N, c, h, w]`.
    pub views: Tensor<f32>,
    pub positives: Vec<usize>,
    /// Dataset index each view came from.
    pub sources: Vec<usize>,
}

impl BatchViews {
    /// Reorders views so that new position `p` holds old view `order[p]`,
    /// keeping positives matched.
    pub fn permute(&self, order: &[usize]) -> Result<BatchViews> {
        let m = self.positives.len();
        let mut inv = vec![usize::MAX; m];
        for (p, &o) in order.iter().enumerate() {
            if o >= m || inv[o] != usize::MAX {
                return Err(Error::Contract("view order is not a permutation".into()));
            }
            inv[o] = p;
        }
        if order.len() != m {
            return Err(Error::Contract("view order is not a permutation".into()));
        }
        let per: usize = self.views.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(self.views.numel());
        for &o in order {
            data.extend_from_slice(&self.views.data()[o * per..(o + 1) * per]);
        }
        Ok(BatchViews {
            views: Tensor::new(self.views.shape().to_vec(), data)?,
            positives: order.iter().map(|&o| inv[self.positives[o]]).collect(),
            sources: order.iter().map(|&o| self.sources[o]).collect(),
        })
    }
}

/// Views `2k` and `2k + 1` are the two augmentations of `indices[k]`.
pub fn make_pair_batch(ds: &Dataset, indices: &[usize], spec: &AugmentSpec, rng: &Rng) -> Result<BatchViews> {
    if indices.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "a contrastive batch needs at least 2 images, got {}",
            indices.len()
        )));
    }
    let shape = ds.shape();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(2 * indices.len() * per);
    let mut sources = Vec::with_capacity(2 * indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let img = ds.image(i);
        let r = rng.split_index(k as u64);
        for view in 0..2u64 {
            data.extend(augment_view(&img, shape, spec, &mut r.split_index(view)));
            sources.push(i);
        }
    }
    let n = 2 * indices.len();
    Ok(BatchViews {
        views: Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?,
        positives: (0..n).map(|v| v ^ 1).collect(),
        sources,
    })
}

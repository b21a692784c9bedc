//! Image datasets, the binary `SSDS` container, label subsampling and
//! augmentation.

mod augment;
mod split;
mod synth;

pub use augment::{augment_batch, augment_view, make_pair_batch, AugmentKind, AugmentSpec, BatchViews};
pub use split::{subsample_labels, LabelSplit};
pub use synth::SyntheticSpec;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSDS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `n` images of shape `(c, h, w)` stored as bytes, with class labels.
///
/// Every label read goes through a shared counter so that stages which must
/// not see labels can be audited.
#[derive(Debug)]
pub struct Dataset {
    split: Split,
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<u16>,
    num_classes: usize,
    label_reads: Arc<AtomicU64>,
}

impl Dataset {
    pub fn new(split: Split, shape: [usize; 3], pixels: Vec<u8>, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::Data(format!("image shape {shape:?} has a zero extent")));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel bytes for {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            split,
            shape,
            pixels,
            labels,
            num_classes,
            label_reads: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::Data(format!(
                "dataset has labels up to {}, cannot shrink to {num_classes} classes",
                self.num_classes - 1
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` with values scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f32> {
        self.pixels(i).iter().map(|&b| f32::from(b) / 255.0).collect()
    }

    /// Un-augmented images stacked as `[n, c, h, w]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let [c, h, w] = self.shape;
        let data = indices.iter().flat_map(|&i| self.image(i)).collect();
        Tensor::new(vec![indices.len(), c, h, w], data).expect("image length matches shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        usize::from(self.labels[i])
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        self.label_reads.fetch_add(indices.len() as u64, Ordering::Relaxed);
        indices.iter().map(|&i| usize::from(self.labels[i])).collect()
    }

    pub fn all_labels(&self) -> Vec<usize> {
        self.labels(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Number of labels read so far.
    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dims = [self.len(), self.shape[0], self.shape[1], self.shape[2], self.len()];
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Data(format!("extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&self.pixels)?;
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], split: Split) -> Result<Self> {
        let need = |at: usize, len: usize, what: &str| -> Result<()> {
            if bytes.len() < at + len {
                Err(Error::Format {
                    offset: bytes.len(),
                    detail: format!(
                        "file ends inside {what} ({} of {len} bytes)",
                        bytes.len().saturating_sub(at)
                    ),
                })
            } else {
                Ok(())
            }
        };
        need(0, 4, "magic")?;
        if &bytes[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:?}", &bytes[..4]),
            });
        }
        need(4, 2, "version")?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        need(6, 20, "header")?;
        let word = |k: usize| {
            let o = 6 + 4 * k;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let (n, c, h, w, nl) = (word(0), word(1), word(2), word(3), word(4));
        if nl != n {
            return Err(Error::Format {
                offset: 22,
                detail: format!("label count {nl} differs from image count {n}"),
            });
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Format {
                offset: 10,
                detail: format!("zero image extent {c}x{h}x{w}"),
            });
        }
        let img_bytes = n.checked_mul(c * h * w).ok_or_else(|| Error::Format {
            offset: 6,
            detail: "image block size overflows".into(),
        })?;
        need(HEADER_LEN, img_bytes, "image block")?;
        let label_at = HEADER_LEN + img_bytes;
        need(label_at, 2 * n, "label block")?;
        let end = label_at + 2 * n;
        if bytes.len() != end {
            return Err(Error::Format {
                offset: end,
                detail: format!("{} trailing bytes", bytes.len() - end),
            });
        }
        let pixels = bytes[HEADER_LEN..label_at].to_vec();
        let labels: Vec<u16> = bytes[label_at..end]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        let num_classes = labels.iter().max().map_or(0, |&m| usize::from(m) + 1);
        Self::new(split, [c, h, w], pixels, labels, num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.pixels.len() + 2 * self.len());
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, split)
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.split == other.split
            && self.shape == other.shape
            && self.pixels == other.pixels
            && self.labels == other.labels
            && self.num_classes == other.num_classes
    }
}

/// Where a dataset comes from: an `SSDS` file pair or a synthetic spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Files { train: String, test: String },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    /// Parses `blobs:...` as a synthetic spec and `train.ssds,test.ssds` as files.
    pub fn parse(s: &str) -> Result<Self> {
        if s.starts_with("blobs:") {
            return Ok(Self::Synthetic(s.parse()?));
        }
        match s.split_once(',') {
            Some((a, b)) => Ok(Self::Files {
                train: a.trim().to_string(),
                test: b.trim().to_string(),
            }),
            None => Err(Error::Config(format!(
                "dataset `{s}` is neither a blobs spec nor `train.ssds,test.ssds`"
            ))),
        }
    }

    /// Train and test splits with a shared class count.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Synthetic(spec) => spec.generate(),
            Self::Files { train, test } => {
                let tr = Dataset::load(Path::new(train), Split::Train)?;
                let te = Dataset::load(Path::new(test), Split::Test)?;
                if tr.shape() != te.shape() {
                    return Err(Error::Data(format!(
                        "train images {:?} and test images {:?} differ in shape",
                        tr.shape(),
                        te.shape()
                    )));
                }
                let k = tr.num_classes().max(te.num_classes());
                Ok((tr.with_num_classes(k)?, te.with_num_classes(k)?))
            }
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synthetic(s) => write!(f, "{s}"),
            Self::Files { train, test } => write!(f, "{train},{test}"),
        }
    }
}

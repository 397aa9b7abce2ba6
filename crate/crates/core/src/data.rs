//! Dataset ingestion: big-endian IDX files, a deterministic synthetic
//! glyph dataset for fast runs, and batching.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled images, value range [-1, 1], shape [n, C, H, W].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!(
                "images must be [n,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if images.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::Data("image values outside [-1,1]".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            images,
            labels,
            split,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape [C, H, W].
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Data(format!("truncated IDX file while reading {what}")))
}

/// Parse a u8 IDX tensor: 4-byte big-endian magic 0x0000_08_nd, one
/// big-endian u32 length per dimension, then the raw payload.
fn parse_idx_u8<'a>(
    bytes: &'a [u8],
    want_dims: &[usize],
    what: &str,
) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = read_be_u32(bytes, 0, what)?;
    let ndim = (magic & 0xFF) as usize;
    if magic >> 8 != 0x00_00_08 || !want_dims.contains(&ndim) {
        return Err(Error::Data(format!(
            "bad IDX magic {magic:#010x} for {what}: want u8 tensor with {want_dims:?} dims"
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_be_u32(bytes, 4 + 4 * d, what)? as usize);
    }
    let payload_at = 4 + 4 * ndim;
    let numel: usize = dims.iter().product();
    let payload = bytes.get(payload_at..payload_at + numel).ok_or_else(|| {
        Error::Data(format!(
            "truncated IDX payload in {what}: want {numel} bytes"
        ))
    })?;
    Ok((dims, payload))
}

/// Load an image/label IDX pair. Images: magic 0x00000803 (n,H,W; gray)
/// or 0x00000804 (n,C,H,W). Labels: magic 0x00000801. Pixels map to
/// [-1,1] via v/127.5 - 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let (img_dims, pixels) = parse_idx_u8(&img_bytes, &[3, 4], "images")?;
    let (lbl_dims, label_bytes) = parse_idx_u8(&lbl_bytes, &[1], "labels")?;
    let shape: Vec<usize> = match img_dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => unreachable!(),
    };
    if shape[0] != lbl_dims[0] {
        return Err(Error::Data(format!(
            "count mismatch: {} images vs {} labels",
            shape[0], lbl_dims[0]
        )));
    }
    let data: Vec<f32> = pixels.iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    let labels = label_bytes.iter().map(|&v| v as usize).collect();
    Dataset::new(Tensor::new(shape, data)?, labels, Split::Train)
}

/// Invert the [-1,1] normalization back to bytes (exact round trip).
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------------------
// Synthetic glyphs
// ---------------------------------------------------------------------------

pub const MAX_SYNTHETIC_CLASSES: usize = 16;

/// Class template on an s x s canvas: a distinct geometric glyph drawn at
/// +1 on a -1 background, kept inside a margin so +-2px jitter never clips.
pub fn glyph_template(class: usize, s: usize) -> Tensor<f32> {
    assert!(class < MAX_SYNTHETIC_CLASSES);
    assert!(s >= 12, "canvas too small for glyphs");
    let th = (s / 8).max(1);
    let lo = s * 4 / 16;
    let hi = s * 12 / 16;
    let m1 = s * 7 / 16;
    let hbar = |r: usize, c: usize, at: usize| r >= at && r < at + th && c >= lo && c < hi;
    let vbar = |r: usize, c: usize, at: usize| c >= at && c < at + th && r >= lo && r < hi;
    let diag = |r: usize, c: usize| {
        (lo..hi).contains(&r) && (r.saturating_sub(th - 1)..=r + th - 1).contains(&c)
    };
    let anti = |r: usize, c: usize| {
        let cc = s - 1 - c;
        (lo..hi).contains(&r) && (r.saturating_sub(th - 1)..=r + th - 1).contains(&cc)
    };
    let on = |r: usize, c: usize| -> bool {
        match class {
            0 => hbar(r, c, m1),
            1 => vbar(r, c, m1),
            2 => hbar(r, c, m1) || vbar(r, c, m1),
            3 => hbar(r, c, lo) || hbar(r, c, hi - th) || vbar(r, c, lo) || vbar(r, c, hi - th),
            4 => {
                let a = s * 6 / 16;
                let b = s * 10 / 16;
                r >= a && r < b && c >= a && c < b
            }
            5 => diag(r, c),
            6 => anti(r, c),
            7 => hbar(r, c, lo) || hbar(r, c, hi - th),
            8 => vbar(r, c, lo) || vbar(r, c, hi - th),
            9 => hbar(r, c, lo) || vbar(r, c, m1),
            10 => vbar(r, c, lo) || hbar(r, c, hi - th),
            11 => diag(r, c) || anti(r, c),
            12 => vbar(r, c, lo) || vbar(r, c, hi - th) || hbar(r, c, m1),
            13 => vbar(r, c, lo) || vbar(r, c, hi - th) || hbar(r, c, hi - th),
            14 => hbar(r, c, lo) || anti(r, c) || hbar(r, c, hi - th),
            15 => {
                let k = 3 * th;
                (r >= lo && r < lo + k && c >= lo && c < lo + k)
                    || (r >= hi - k && r < hi && c >= hi - k && c < hi)
            }
            _ => unreachable!(),
        }
    };
    let mut data = vec![-1.0f32; s * s];
    for r in 0..s {
        for c in 0..s {
            if on(r, c) {
                data[r * s + c] = 1.0;
            }
        }
    }
    Tensor::new(vec![1, s, s], data).expect("template shape")
}

/// Deterministic glyph dataset: per-class template, per-sample +-2px
/// translation and sigma=0.1 pixel noise, clipped to [-1,1]. Linearly
/// separable by the small encoder.
pub fn make_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Dataset {
    assert!(
        num_classes <= MAX_SYNTHETIC_CLASSES,
        "at most {MAX_SYNTHETIC_CLASSES} glyph classes"
    );
    let s = image_size;
    let templates: Vec<Tensor<f32>> = (0..num_classes).map(|k| glyph_template(k, s)).collect();
    let mut rng = RngStream::new(seed, 0xDA7A);
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for (class, template) in templates.iter().enumerate() {
        let tmpl = template.data();
        for _ in 0..samples_per_class {
            let dr = rng.next_below(5) as isize - 2;
            let dc = rng.next_below(5) as isize - 2;
            for r in 0..s as isize {
                for c in 0..s as isize {
                    let (sr, sc) = (r - dr, c - dc);
                    let base = if sr >= 0 && sr < s as isize && sc >= 0 && sc < s as isize {
                        tmpl[(sr * s as isize + sc) as usize]
                    } else {
                        -1.0
                    };
                    let v = base + 0.1 * rng.next_normal() as f32;
                    data.push(v.clamp(-1.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, 1, s, s], data).expect("synthetic shape");
    Dataset::new(images, labels, Split::Train).expect("synthetic dataset")
}

/// Rows of k-dim indicator vectors.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; labels.len() * k];
    for (i, &label) in labels.iter().enumerate() {
        debug_assert!(label < k);
        data[i * k + label] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data).expect("one-hot shape")
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One epoch of batches covering every sample exactly once, the last
/// batch possibly short. Order is the dataset order or a stream-seeded
/// shuffle.
pub fn batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    stream: &mut RngStream,
    shuffle: bool,
) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + 'a {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        stream.shuffle(&mut order);
    }
    let sample_len = dataset.images.sample_len();
    let shape_tail: Vec<usize> = dataset.image_shape().to_vec();
    (0..dataset.len().div_ceil(batch_size)).map(move |b| {
        let idx = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let mut data = Vec::with_capacity(idx.len() * sample_len);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(dataset.images.sample(i));
            labels.push(dataset.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&shape_tail);
        (Tensor::new(shape, data).expect("batch shape"), labels)
    })
}

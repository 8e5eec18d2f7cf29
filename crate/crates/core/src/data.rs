//! MNIST ingestion (IDX binary format) and per-task input transforms.
//!
//! The loader reads the four standard IDX files either raw or gzip-compressed
//! (sniffed from the `1f 8b` magic, so the distribution's `.gz` artifacts
//! work as-is). Pixels are scaled to `[0,1]` by dividing the raw byte by 255;
//! no further normalization is applied.

use flate2::read::GzDecoder;
use rand::Rng;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::DataError;
use crate::nn::DenseMatrix;
use crate::rng::ComponentRng;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Rotation center of a 28×28 grid: the midpoint between pixel centers 0 and 27.
pub const ROTATION_CENTER: f64 = (IMAGE_SIDE as f64 - 1.0) / 2.0;

/// Which split a dataset came from; purely descriptive metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A labeled image collection with pixels in `[0,1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: DenseMatrix<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Indices of every example whose label is in `classes`, in dataset order.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<u32> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, y)| classes.contains(y))
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Per-class example counts over labels `0..=max_label`.
    pub fn class_counts(&self, max_label: usize) -> Vec<usize> {
        let mut counts = vec![0usize; max_label + 1];
        for &y in &self.labels {
            if y <= max_label {
                counts[y] += 1;
            }
        }
        counts
    }

    /// New dataset holding the rows at `indices` (copies).
    pub fn subset(&self, indices: &[u32], split: Split) -> Dataset {
        let mut images = DenseMatrix::zeros(indices.len(), self.images.cols());
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            images.set_row(r, self.images.row(i as usize));
            labels.push(self.labels[i as usize]);
        }
        Dataset {
            images,
            labels,
            split,
        }
    }
}

/// The two MNIST splits as distributed.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    /// Load the four standard files from `dir`, accepting raw IDX or the
    /// distributed `.gz` names.
    pub fn load(dir: impl AsRef<Path>) -> Result<Mnist, DataError> {
        let dir = dir.as_ref();
        let find = |stem: &str| -> PathBuf {
            let raw = dir.join(stem);
            if raw.exists() {
                raw
            } else {
                dir.join(format!("{stem}.gz"))
            }
        };
        let mut train = load_idx(
            &find("train-images-idx3-ubyte"),
            &find("train-labels-idx1-ubyte"),
        )?;
        train.split = Split::Train;
        let mut test = load_idx(
            &find("t10k-images-idx3-ubyte"),
            &find("t10k-labels-idx1-ubyte"),
        )?;
        test.split = Split::Test;
        Ok(Mnist { train, test })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io_err)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32_be(bytes: &[u8], off: usize, path: &Path) -> Result<u32, DataError> {
    let end = off + 4;
    let slice = bytes.get(off..end).ok_or(DataError::Truncated {
        path: path.to_path_buf(),
        needed: end,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

/// Parse one images + one labels IDX file pair into a [`Dataset`].
///
/// Validates the big-endian magic numbers (`0x00000803` images, `0x00000801`
/// labels), the 28×28 geometry, byte counts, and that both files agree on the
/// example count.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_maybe_gz(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::BadGeometry {
            path: images_path.to_path_buf(),
            rows,
            cols,
        });
    }
    let needed = 16 + n * IMAGE_PIXELS;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            needed,
            found: img_bytes.len(),
        });
    }

    let lbl_bytes = read_maybe_gz(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    let needed = 8 + n_labels;
    if lbl_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            needed,
            found: lbl_bytes.len(),
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images_path: images_path.to_path_buf(),
            images: n,
            labels_path: labels_path.to_path_buf(),
            labels: n_labels,
        });
    }

    let mut images = DenseMatrix::zeros(n, IMAGE_PIXELS);
    for (dst, &src) in images
        .data_mut()
        .iter_mut()
        .zip(&img_bytes[16..16 + n * IMAGE_PIXELS])
    {
        *dst = f64::from(src) / 255.0;
    }
    let labels = lbl_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        images,
        labels,
        split: Split::Train,
    })
}

/// Stratified holdout split: per class, a shuffled `fraction` (rounded to the
/// nearest count) goes to validation, the rest stays in train. Deterministic
/// under the provided RNG; the two parts are disjoint and their union is the
/// input.
pub fn split_validation(ds: &Dataset, fraction: f64, rng: &mut ComponentRng) -> (Dataset, Dataset) {
    assert!(
        fraction > 0.0 && fraction < 1.0,
        "fraction must be in (0,1), got {fraction}"
    );
    let max_label = ds.labels.iter().copied().max().unwrap_or(0);
    let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); max_label + 1];
    for (i, &y) in ds.labels.iter().enumerate() {
        per_class[y].push(i as u32);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for idx in per_class.iter_mut() {
        // Fisher–Yates, then the shuffled prefix becomes validation.
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let take = (idx.len() as f64 * fraction).round() as usize;
        val_idx.extend_from_slice(&idx[..take]);
        train_idx.extend_from_slice(&idx[take..]);
    }
    // Keep dataset order within each part independent of class enumeration
    // order so downstream shuffles see a canonical layout.
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    (
        ds.subset(&train_idx, Split::Train),
        ds.subset(&val_idx, Split::Validation),
    )
}

/// Per-task input transform.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    /// Pixel shuffle: output pixel `i` reads input pixel `perm[i]`; `perm`
    /// must be a bijection on `0..784`.
    Permutation(Vec<u32>),
    /// Rotation about the image center by `angle` radians, counterclockwise
    /// (with the row axis pointing down and the column axis right).
    Rotation(f64),
}

impl Transform {
    /// A uniformly random permutation of the 784 pixel positions.
    pub fn random_permutation(rng: &mut ComponentRng) -> Transform {
        let mut perm: Vec<u32> = (0..IMAGE_PIXELS as u32).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        Transform::Permutation(perm)
    }

    /// The angle of a rotation transform, if any.
    pub fn rotation_angle(&self) -> Option<f64> {
        match self {
            Transform::Rotation(a) => Some(*a),
            _ => None,
        }
    }
}

/// Apply a transform out of place.
pub fn apply_transform(image: &[f64], t: &Transform) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    apply_transform_into(image, t, &mut out);
    out
}

/// Apply a transform into a caller-provided buffer (`out.len() == 784`).
///
/// Rotation uses inverse mapping with bilinear interpolation: each output
/// pixel samples the input at the back-rotated coordinate, zero outside the
/// grid, clamped to `[0,1]`. The center of rotation is (13.5, 13.5).
pub fn apply_transform_into(image: &[f64], t: &Transform, out: &mut [f64]) {
    assert_eq!(image.len(), IMAGE_PIXELS, "image must be 28x28");
    assert_eq!(out.len(), IMAGE_PIXELS, "output must be 28x28");
    match t {
        Transform::Identity => out.copy_from_slice(image),
        Transform::Permutation(perm) => {
            assert_eq!(perm.len(), IMAGE_PIXELS, "permutation over 784 pixels");
            for (o, &src) in out.iter_mut().zip(perm) {
                *o = image[src as usize];
            }
        }
        Transform::Rotation(angle) => {
            let (sin, cos) = angle.sin_cos();
            let c0 = ROTATION_CENTER;
            for rp in 0..IMAGE_SIDE {
                for cp in 0..IMAGE_SIDE {
                    // Output pixel in centered coordinates (x right, y up).
                    let xp = cp as f64 - c0;
                    let yp = c0 - rp as f64;
                    // Back-rotate to find where this pixel came from.
                    let x = cos * xp + sin * yp;
                    let y = -sin * xp + cos * yp;
                    let src_r = c0 - y;
                    let src_c = x + c0;
                    out[rp * IMAGE_SIDE + cp] = bilinear(image, src_r, src_c).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Bilinear sample of a 28×28 image at fractional (row, col); zero outside.
fn bilinear(image: &[f64], r: f64, c: f64) -> f64 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let mut acc = 0.0;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            let rr = r0 as i64 + dr;
            let cc = c0 as i64 + dc;
            if (0..IMAGE_SIDE as i64).contains(&rr) && (0..IMAGE_SIDE as i64).contains(&cc) {
                acc += wr * wc * image[rr as usize * IMAGE_SIDE + cc as usize];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;

    #[test]
    fn identity_is_noop() {
        let img: Vec<f64> = (0..IMAGE_PIXELS).map(|i| (i % 7) as f64 / 7.0).collect();
        assert_eq!(apply_transform(&img, &Transform::Identity), img);
    }

    #[test]
    fn permutation_then_inverse_restores() {
        let mut rng = SeedSplitter::new(11).derive("perm");
        let img: Vec<f64> = (0..IMAGE_PIXELS).map(|i| (i % 13) as f64 / 13.0).collect();
        let t = Transform::random_permutation(&mut rng);
        let Transform::Permutation(ref perm) = t else {
            unreachable!()
        };
        let mut inverse = vec![0u32; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p as usize] = i as u32;
        }
        let once = apply_transform(&img, &t);
        let back = apply_transform(&once, &Transform::Permutation(inverse));
        assert_eq!(back, img);
    }

    #[test]
    fn permutation_preserves_pixel_multiset() {
        let mut rng = SeedSplitter::new(12).derive("perm");
        let img: Vec<f64> = (0..IMAGE_PIXELS).map(|i| i as f64).collect();
        let t = Transform::random_permutation(&mut rng);
        let mut out = apply_transform(&img, &t);
        out.sort_by(f64::total_cmp);
        assert_eq!(out, img);
    }

    #[test]
    fn quarter_turn_moves_single_pixel_exactly() {
        // Counterclockwise: (r, c) lands on (27 - c, r).
        let (r, c) = (5usize, 20usize);
        let mut img = vec![0.0; IMAGE_PIXELS];
        img[r * IMAGE_SIDE + c] = 1.0;
        let out = apply_transform(&img, &Transform::Rotation(std::f64::consts::FRAC_PI_2));
        let argmax = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!((argmax / IMAGE_SIDE, argmax % IMAGE_SIDE), (27 - c, r));
        assert!((out[argmax] - 1.0).abs() < 1e-12);
        let total: f64 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "mass {total}");
    }

    #[test]
    fn rotation_zero_and_full_turn_agree() {
        let img: Vec<f64> = (0..IMAGE_PIXELS)
            .map(|i| ((i * 37) % 101) as f64 / 101.0)
            .collect();
        let zero = apply_transform(&img, &Transform::Rotation(0.0));
        let full = apply_transform(&img, &Transform::Rotation(2.0 * std::f64::consts::PI));
        for (a, b) in zero.iter().zip(&full) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

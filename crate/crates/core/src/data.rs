//! Synthetic subspace-mixture datasets, IDX image files, and patch tokens.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{BlobWriter, Container};
use crate::error::{Error, Result};
use crate::layers::TokenBatch;
use crate::linalg::{random_orthonormal, Matrix};
use crate::rng::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const DATASET_FORMAT: &str = "whitebox-dataset";

/// Labelled multi-token samples drawn from per-class unions of subspaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub subspaces_per_class: usize,
    pub subspace_dim: usize,
    pub sigma: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Draw every class subspace from one orthonormal frame, making all of
    /// them mutually orthogonal. Needs `classes·subspaces·dim ≤ input_dim`.
    pub orthogonal_classes: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            tokens: 16,
            input_dim: 48,
            subspaces_per_class: 2,
            subspace_dim: 4,
            sigma: 0.1,
            samples_per_class: 1000,
            seed: 0,
            orthogonal_classes: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("synthetic spec: {msg}")));
        if self.classes < 1 || self.tokens < 1 || self.input_dim < 1 || self.subspaces_per_class < 1 {
            return bad("classes, tokens, input_dim and subspaces_per_class must be positive".into());
        }
        if self.classes > 256 {
            return bad(format!("at most 256 classes are supported, got {}", self.classes));
        }
        if self.subspace_dim < 1 || self.subspace_dim > self.input_dim {
            return bad(format!("subspace_dim {} must be in 1..={}", self.subspace_dim, self.input_dim));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be a finite nonnegative number, got {}", self.sigma));
        }
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be positive".into());
        }
        let total = self.classes * self.subspaces_per_class * self.subspace_dim;
        if self.orthogonal_classes && total > self.input_dim {
            return bad(format!(
                "orthogonal classes need classes·subspaces·dim = {total} ≤ input_dim = {}",
                self.input_dim
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Images(PatchSpec),
}

/// Token samples (`input_dim x tokens` each) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: DatasetSource,
    /// `bases[class][subspace]`, `input_dim x subspace_dim`; empty for image data.
    pub bases: Vec<Vec<Matrix>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    samples: usize,
    input_dim: usize,
    tokens: usize,
    classes: usize,
    source: DatasetSource,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (c, s, p, d) = (spec.classes, spec.subspaces_per_class, spec.subspace_dim, spec.input_dim);
    let bases: Vec<Vec<Matrix>> = if spec.orthogonal_classes {
        let frame = random_orthonormal(d, c * s * p, &mut rng)?;
        (0..c)
            .map(|ci| {
                (0..s)
                    .map(|si| {
                        let start = (ci * s + si) * p;
                        frame.select_columns(&(start..start + p).collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    } else {
        (0..c)
            .map(|_| (0..s).map(|_| random_orthonormal(d, p, &mut rng)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?
    };

    let mut samples = Vec::with_capacity(c * spec.samples_per_class);
    let mut labels = Vec::with_capacity(c * spec.samples_per_class);
    for (ci, class_bases) in bases.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let mut x = Matrix::zeros(d, spec.tokens);
            for t in 0..spec.tokens {
                let u = &class_bases[rng.below(s)];
                let coeffs: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
                for r in 0..d {
                    let on: f64 = (0..p).map(|j| u[(r, j)] * coeffs[j]).sum();
                    x[(r, t)] = on + spec.sigma * rng.normal();
                }
            }
            samples.push(x);
            labels.push(ci);
        }
    }
    let order = rng.permutation(samples.len());
    let samples = order.iter().map(|&i| samples[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Ok(Dataset {
        samples,
        labels,
        classes: c,
        source: DatasetSource::Synthetic(spec.clone()),
        bases,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, Matrix::rows)
    }

    pub fn tokens(&self) -> usize {
        self.samples.first().map_or(0, Matrix::cols)
    }

    /// Index ranges of the leading train part and trailing validation part.
    pub fn split(&self, val_fraction: f64) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Invalid(format!("val_fraction must be in [0, 1), got {val_fraction}")));
        }
        let n = self.len();
        let val = (n as f64 * val_fraction).round() as usize;
        Ok((0..n - val, n - val..n))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<TokenBatch> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        TokenBatch::new(samples, Some(labels))
    }

    /// Largest `|U_iᵀU_j|` entry over pairs of bases from different classes.
    pub fn cross_class_coherence(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (ci, a) in self.bases.iter().enumerate() {
            for b in self.bases.iter().skip(ci + 1) {
                for ua in a {
                    for ub in b {
                        worst = worst.max(ua.t_matmul(ub)?.max_abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Invalid("refusing to save an empty dataset".into()));
        }
        if self.classes > 256 {
            return Err(Error::Invalid(format!("{} classes do not fit u8 labels", self.classes)));
        }
        let (d, n) = (self.input_dim(), self.tokens());
        let mut tokens = Vec::with_capacity(self.len() * d * n);
        for x in &self.samples {
            if x.shape() != (d, n) {
                return Err(Error::shape("dataset save", "samples have differing shapes"));
            }
            tokens.extend_from_slice(x.as_slice());
        }
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        let mut w = BlobWriter::new();
        w.push_f64("tokens", &[self.len(), d, n], &tokens)?;
        w.push_u8("labels", &[self.len()], &labels)?;
        for (ci, class_bases) in self.bases.iter().enumerate() {
            for (si, u) in class_bases.iter().enumerate() {
                w.push_f64(format!("basis.{ci}.{si}"), &[u.rows(), u.cols()], u.as_slice())?;
            }
        }
        let meta = DatasetMeta {
            samples: self.len(),
            input_dim: d,
            tokens: n,
            classes: self.classes,
            source: self.source.clone(),
        };
        w.write(path, DATASET_FORMAT, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Container<DatasetMeta> = Container::read(path, DATASET_FORMAT)?;
        let meta = c.manifest.meta.clone();
        let format_err = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let (shape, tokens) = c.f64("tokens")?;
        if shape != [meta.samples, meta.input_dim, meta.tokens] {
            return Err(format_err(format!("token shape {shape:?} disagrees with manifest")));
        }
        let (lshape, labels) = c.u8("labels")?;
        if lshape != [meta.samples] {
            return Err(format_err(format!("label shape {lshape:?} disagrees with manifest")));
        }
        let per = meta.input_dim * meta.tokens;
        let samples = tokens
            .chunks_exact(per.max(1))
            .map(|chunk| Matrix::new(meta.input_dim, meta.tokens, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
        if let Some(bad) = labels.iter().find(|&&l| l >= meta.classes) {
            return Err(format_err(format!("label {bad} out of range for {} classes", meta.classes)));
        }
        let mut bases = Vec::new();
        if let DatasetSource::Synthetic(spec) = &meta.source {
            for ci in 0..spec.classes {
                let mut class_bases = Vec::new();
                for si in 0..spec.subspaces_per_class {
                    let (shape, values) = c.f64(&format!("basis.{ci}.{si}"))?;
                    if shape.len() != 2 {
                        return Err(format_err(format!("basis.{ci}.{si} is not a matrix")));
                    }
                    class_bases.push(Matrix::new(shape[0], shape[1], values)?);
                }
                bases.push(class_bases);
            }
        }
        Ok(Self {
            samples,
            labels,
            classes: meta.classes,
            source: meta.source,
            bases,
        })
    }

    /// Patch tokens of an image set; labels are taken as class indices.
    pub fn from_images(images: &ImageSet, spec: &PatchSpec) -> Result<Self> {
        let batch = patchify(images, spec)?;
        let labels = batch.labels.unwrap_or_default();
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            samples: batch.samples,
            labels,
            classes,
            source: DatasetSource::Images(spec.clone()),
            bases: Vec::new(),
        })
    }
}

/// Single-channel `u8` images with labels, as stored in IDX files.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    /// `count·height·width` pixels, image-major then row-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.height * self.width;
        &self.pixels[i * size..(i + 1) * size]
    }
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4-byte slice")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = read_u32_be(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let shape = (0..dims)
        .map(|i| read_u32_be(&bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * dims;
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((shape, bytes[header..expected].to_vec()))
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let (ishape, pixels) = read_idx(images, IDX_IMAGES_MAGIC, 3)?;
    let (lshape, labels) = read_idx(labels, IDX_LABELS_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::CountMismatch {
            images: ishape[0],
            labels: lshape[0],
        });
    }
    Ok(ImageSet {
        height: ishape[1],
        width: ishape[2],
        pixels,
        labels,
    })
}

pub fn write_idx(set: &ImageSet, images: &Path, labels: &Path) -> Result<()> {
    if set.pixels.len() != set.len() * set.height * set.width {
        return Err(Error::CountMismatch {
            images: set.pixels.len() / (set.height * set.width).max(1),
            labels: set.len(),
        });
    }
    let mut out = Vec::with_capacity(16 + set.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [set.len(), set.height, set.width] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend_from_slice(&set.pixels);
    fs::write(images, out).map_err(|e| Error::io(images, e))?;
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    fs::write(labels, out).map_err(|e| Error::io(labels, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_height: usize,
    pub patch_width: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_height > 0
            && self.patch_width > 0
            && self.channels > 0
            && self.height.is_multiple_of(self.patch_height)
            && self.width.is_multiple_of(self.patch_width);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "patch {}x{} must divide image {}x{} (channels {})",
                self.patch_height, self.patch_width, self.height, self.width, self.channels
            )))
        }
    }

    pub fn token_dim(&self) -> usize {
        self.patch_height * self.patch_width * self.channels
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_height) * (self.width / self.patch_width)
    }

    fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// One channel-last image (`height·width·channels` bytes) as a
/// `token_dim x num_patches` matrix scaled to `[0, 1]`. Patches run
/// row-major over the patch grid; within a patch, pixels run row-major with
/// channels innermost.
pub fn patchify_image(pixels: &[u8], spec: &PatchSpec) -> Result<Matrix> {
    spec.validate()?;
    if pixels.len() != spec.pixel_count() {
        return Err(Error::shape(
            "patchify",
            format!("{} pixels for a {}x{}x{} image", pixels.len(), spec.height, spec.width, spec.channels),
        ));
    }
    let grid_w = spec.width / spec.patch_width;
    let mut out = Matrix::zeros(spec.token_dim(), spec.num_patches());
    for patch in 0..spec.num_patches() {
        let (gy, gx) = (patch / grid_w, patch % grid_w);
        for py in 0..spec.patch_height {
            for px in 0..spec.patch_width {
                let (y, x) = (gy * spec.patch_height + py, gx * spec.patch_width + px);
                for ch in 0..spec.channels {
                    let row = (py * spec.patch_width + px) * spec.channels + ch;
                    let src = (y * spec.width + x) * spec.channels + ch;
                    out[(row, patch)] = f64::from(pixels[src]) / 255.0;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_image`] on the scaled values.
pub fn unpatchify_image(tokens: &Matrix, spec: &PatchSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if tokens.shape() != (spec.token_dim(), spec.num_patches()) {
        return Err(Error::shape("unpatchify", format!("tokens {:?}", tokens.shape())));
    }
    let grid_w = spec.width / spec.patch_width;
    let mut out = vec![0.0; spec.pixel_count()];
    for patch in 0..spec.num_patches() {
        let (gy, gx) = (patch / grid_w, patch % grid_w);
        for py in 0..spec.patch_height {
            for px in 0..spec.patch_width {
                let (y, x) = (gy * spec.patch_height + py, gx * spec.patch_width + px);
                for ch in 0..spec.channels {
                    let row = (py * spec.patch_width + px) * spec.channels + ch;
                    out[(y * spec.width + x) * spec.channels + ch] = tokens[(row, patch)];
                }
            }
        }
    }
    Ok(out)
}

/// Patch tokens for every image of a single-channel set.
pub fn patchify(images: &ImageSet, spec: &PatchSpec) -> Result<TokenBatch> {
    if spec.height != images.height || spec.width != images.width || spec.channels != 1 {
        return Err(Error::shape(
            "patchify",
            format!(
                "patch spec {}x{}x{} against {}x{} single-channel images",
                spec.height, spec.width, spec.channels, images.height, images.width
            ),
        ));
    }
    let samples = (0..images.len())
        .map(|i| patchify_image(images.image(i), spec))
        .collect::<Result<Vec<_>>>()?;
    let labels = images.labels.iter().map(|&l| usize::from(l)).collect();
    TokenBatch::new(samples, Some(labels))
}

/// Mirror a channel-last image left to right.
pub fn hflip(pixels: &[u8], spec: &PatchSpec) -> Vec<u8> {
    let mut out = pixels.to_vec();
    let c = spec.channels;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let src = (y * spec.width + (spec.width - 1 - x)) * c;
            let dst = (y * spec.width + x) * c;
            out[dst..dst + c].copy_from_slice(&pixels[src..src + c]);
        }
    }
    out
}

/// Flips each image of the set with probability one half.
pub fn random_hflip(images: &ImageSet, rng: &mut Rng) -> ImageSet {
    let spec = PatchSpec {
        height: images.height,
        width: images.width,
        channels: 1,
        patch_height: 1,
        patch_width: 1,
    };
    let mut pixels = Vec::with_capacity(images.pixels.len());
    for i in 0..images.len() {
        if rng.uniform() < 0.5 {
            pixels.extend(hflip(images.image(i), &spec));
        } else {
            pixels.extend_from_slice(images.image(i));
        }
    }
    ImageSet {
        pixels,
        ..images.clone()
    }
}

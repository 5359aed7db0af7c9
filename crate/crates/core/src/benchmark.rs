//! Deterministic synthetic segmentation domains with controllable shifts.
//!
//! Each image is a layered scene: a dark background, an elliptical outer
//! ring (class 1), a bright central blob (class 2, the structure that
//! `structure_scale` dilates) and further small blobs for classes 3 and up.
//! The interior tissue between the structures is labelled background.
//! Shifts change intensities (scale, bias, ringing, blur, noise) without
//! touching labels, except `structure_scale`, which moves the geometry.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 8] = b"MSEGDSET";
const DATASET_VERSION: u32 = 1;

/// Image-formation shift of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub intensity_scale: f64,
    pub intensity_bias: f64,
    pub noise_std: f64,
    pub blur_radius: u32,
    /// Dilation (>1) or erosion (<1) of the class-2 structure.
    pub structure_scale: f64,
    pub ring_artifact: bool,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            intensity_scale: 1.0,
            intensity_bias: 0.0,
            noise_std: 0.0,
            blur_radius: 0,
            structure_scale: 1.0,
            ring_artifact: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return Err(Error::config("shift.intensity_scale", "must be > 0"));
        }
        if !self.intensity_bias.is_finite() {
            return Err(Error::config("shift.intensity_bias", "must be finite"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("shift.noise_std", "must be >= 0"));
        }
        if !(self.structure_scale > 0.0 && self.structure_scale.is_finite()) {
            return Err(Error::config("shift.structure_scale", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Images `[1, H, W]` in `[0, 1]` with aligned label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub images: Vec<Tensor>,
    /// Row-major `[H, W]` class indices.
    pub labels: Vec<Vec<u8>>,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shift: ShiftSpec,
    pub split: Split,
    pub seed: u64,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected images into `[N, 1, H, W]` with labels `[N, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        let mut labels = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::shape("batch", format!("image index {i} out of range")))?;
            data.extend_from_slice(img.data());
            labels.extend(self.labels[i].iter().map(|&l| l as usize));
        }
        let t = Tensor::new(vec![indices.len(), 1, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// Every image as one `[N, 1, H, W]` tensor.
    pub fn all_images(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&idx)?.0)
    }

    /// Concatenation of several datasets; metadata comes from the first.
    pub fn union(parts: &[&DomainDataset]) -> Result<DomainDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("union", "no datasets"))?;
        let mut out = (*first).clone();
        for p in &parts[1..] {
            if (p.height, p.width, p.num_classes) != (first.height, first.width, first.num_classes)
            {
                return Err(Error::shape(
                    "union",
                    "datasets differ in size or class count",
                ));
            }
            out.images.extend(p.images.iter().cloned());
            out.labels.extend(p.labels.iter().cloned());
        }
        Ok(out)
    }

    /// Content fingerprint (FNV-1a over image bits and labels).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (img, lab) in self.images.iter().zip(&self.labels) {
            for v in img.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
            lab.iter().copied().for_each(&mut eat);
        }
        h
    }
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Clean intensity per region: outside, interior tissue, ring, then blobs.
const OUTSIDE: f64 = 0.05;
const TISSUE: f64 = 0.55;
const CLASS_INTENSITY: [f64; 8] = [0.05, 0.35, 0.9, 0.2, 0.7, 0.15, 0.45, 0.8];
const RING_AMPLITUDE: f64 = 0.08;

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Labels and clean (pre-shift) intensities of one scene.
fn draw_scene(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    num_classes: usize,
    structure_scale: f64,
) -> (Vec<u8>, Vec<f64>) {
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0 + rng.gen_range(-0.05..0.05) * wf;
    let cy = hf / 2.0 + rng.gen_range(-0.05..0.05) * hf;
    let outer = Ellipse {
        cx,
        cy,
        rx: wf * rng.gen_range(0.38..0.44),
        ry: hf * rng.gen_range(0.36..0.42),
    };
    let thick = rng.gen_range(0.68..0.74);
    let inner = Ellipse {
        cx,
        cy,
        rx: outer.rx * thick,
        ry: outer.ry * thick,
    };
    let mut blobs = Vec::new();
    if num_classes > 2 {
        blobs.push(Ellipse {
            cx: cx + rng.gen_range(-0.02..0.02) * wf,
            cy: cy + rng.gen_range(-0.02..0.02) * hf,
            rx: wf * rng.gen_range(0.10..0.13) * structure_scale,
            ry: hf * rng.gen_range(0.07..0.09) * structure_scale,
        });
    }
    let extra = num_classes.saturating_sub(3);
    for b in 0..extra {
        let angle = std::f64::consts::TAU * b as f64 / extra as f64 + rng.gen_range(-0.2..0.2);
        let dist = 0.19 * wf;
        let r = wf * rng.gen_range(0.05..0.065);
        blobs.push(Ellipse {
            cx: cx + dist * angle.cos(),
            cy: cy - 0.6 * dist * angle.sin() + 0.08 * hf,
            rx: r,
            ry: r,
        });
    }
    let jitter: Vec<f64> = (0..num_classes.max(2))
        .map(|_| rng.gen_range(-0.03..0.03))
        .collect();
    let tissue = TISSUE + rng.gen_range(-0.03..0.03);

    let mut labels = vec![0u8; h * w];
    let mut clean = vec![OUTSIDE; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            if !outer.contains(px, py) {
                continue;
            }
            let mut class = if inner.contains(px, py) { 0 } else { 1 };
            // Later blobs are drawn on top of earlier ones.
            for (b, blob) in blobs.iter().enumerate() {
                if blob.contains(px, py) {
                    class = b + 2;
                }
            }
            labels[i] = class as u8;
            clean[i] = if class == 0 {
                tissue
            } else {
                CLASS_INTENSITY[class] + jitter[class]
            };
        }
    }
    (labels, clean)
}

fn box_blur(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0, 0usize);
                for d in -(radius as isize)..=radius as isize {
                    let (xx, yy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if (0..w as isize).contains(&xx) && (0..h as isize).contains(&yy) {
                        s += src[yy as usize * w + xx as usize];
                        n += 1;
                    }
                }
                out[y * w + x] = s / n as f64;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Applies every shift except clamping; also returns the noise-free image.
fn apply_shift(
    clean: &[f64],
    h: usize,
    w: usize,
    shift: &ShiftSpec,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut img: Vec<f64> = clean
        .iter()
        .map(|v| shift.intensity_scale * v + shift.intensity_bias)
        .collect();
    if shift.ring_artifact {
        let period = w as f64 / 5.0;
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        for y in 0..h {
            for x in 0..w {
                let r = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                img[y * w + x] += RING_AMPLITUDE * (std::f64::consts::TAU * r / period).sin();
            }
        }
    }
    let img = box_blur(&img, h, w, shift.blur_radius as usize);
    let mut noisy = img.clone();
    if shift.noise_std > 0.0 {
        let normal = Normal::new(0.0, shift.noise_std)
            .map_err(|e| Error::config("shift.noise_std", e.to_string()))?;
        for v in noisy.iter_mut() {
            *v += normal.sample(noise_rng);
        }
    }
    Ok((noisy, img))
}

pub fn generate_domain(
    num_images: usize,
    image_size: (usize, usize),
    num_classes: usize,
    shift: &ShiftSpec,
    split: Split,
    seed: u64,
) -> Result<DomainDataset> {
    let (h, w) = image_size;
    if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::config(
            "image_size",
            format!("{h}x{w}: both extents must be >= 16 and divisible by 4"),
        ));
    }
    if !(2..=8).contains(&num_classes) {
        return Err(Error::config("num_classes", "must be in [2, 8]"));
    }
    if num_images == 0 {
        return Err(Error::config("num_images", "must be >= 1"));
    }
    shift.validate()?;

    let mut images = Vec::with_capacity(num_images);
    let mut labels = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let mut geo = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * i as u64));
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * i as u64 + 1));
        let (lab, clean) = draw_scene(&mut geo, h, w, num_classes, shift.structure_scale);
        let (img, _) = apply_shift(&clean, h, w, shift, &mut noise)?;
        let img = img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        images.push(Tensor::new(vec![1, h, w], img)?);
        labels.push(lab);
    }
    if split == Split::Train {
        for c in 1..num_classes as u8 {
            if !labels.iter().any(|l| l.contains(&c)) {
                return Err(Error::config(
                    "image_size",
                    format!("class {c} does not appear at {h}x{w}"),
                ));
            }
        }
    }
    Ok(DomainDataset {
        images,
        labels,
        height: h,
        width: w,
        num_classes,
        shift: shift.clone(),
        split,
        seed,
    })
}

/// Train/eval pair of one domain in a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub train: DomainDataset,
    pub eval: DomainDataset,
}

/// Size and class count of the default suite.
pub const SUITE_IMAGE_SIZE: (usize, usize) = (32, 32);
pub const SUITE_NUM_CLASSES: usize = 4;
pub const SUITE_FIRST_TRAIN: usize = 12;
pub const SUITE_LATER_TRAIN: usize = 2;
pub const SUITE_EVAL: usize = 4;

/// Shifts of the four default domains: ringing on the first; intensity
/// shift with an enlarged central structure; heavy noise; blur with
/// raised contrast.
pub fn default_suite_shifts() -> [ShiftSpec; 4] {
    [
        ShiftSpec {
            ring_artifact: true,
            ..ShiftSpec::identity()
        },
        ShiftSpec {
            intensity_scale: 0.7,
            intensity_bias: 0.3,
            structure_scale: 1.3,
            ..ShiftSpec::identity()
        },
        ShiftSpec {
            noise_std: 0.15,
            ..ShiftSpec::identity()
        },
        ShiftSpec {
            intensity_scale: 1.6,
            intensity_bias: -0.25,
            blur_radius: 1,
            ..ShiftSpec::identity()
        },
    ]
}

/// Four domains: 12 training images on the first, 2 on each later one, and
/// 4 evaluation images everywhere.
pub fn default_four_domain_suite(seed: u64) -> Result<Vec<DomainPair>> {
    default_suite_shifts()
        .iter()
        .enumerate()
        .map(|(d, shift)| {
            let n_train = if d == 0 {
                SUITE_FIRST_TRAIN
            } else {
                SUITE_LATER_TRAIN
            };
            let base = derive_seed(seed, 1000 + d as u64);
            Ok(DomainPair {
                train: generate_domain(
                    n_train,
                    SUITE_IMAGE_SIZE,
                    SUITE_NUM_CLASSES,
                    shift,
                    Split::Train,
                    derive_seed(base, 0),
                )?,
                eval: generate_domain(
                    SUITE_EVAL,
                    SUITE_IMAGE_SIZE,
                    SUITE_NUM_CLASSES,
                    shift,
                    Split::Eval,
                    derive_seed(base, 1),
                )?,
            })
        })
        .collect()
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(DATASET_MAGIC)?;
    w.u32(DATASET_VERSION)?;
    w.len(ds.height)?;
    w.len(ds.width)?;
    w.len(ds.num_classes)?;
    w.u8(match ds.split {
        Split::Train => 0,
        Split::Eval => 1,
    })?;
    w.u64(ds.seed)?;
    let s = &ds.shift;
    w.f64(s.intensity_scale)?;
    w.f64(s.intensity_bias)?;
    w.f64(s.noise_std)?;
    w.u32(s.blur_radius)?;
    w.f64(s.structure_scale)?;
    w.u8(s.ring_artifact as u8)?;
    w.len(ds.len())?;
    for (img, lab) in ds.images.iter().zip(&ds.labels) {
        w.f64s(img.data())?;
        w.bytes(lab)?;
    }
    w.finish()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    if r.bytes(8)? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let height = r.len(1 << 14)?;
    let width = r.len(1 << 14)?;
    let num_classes = r.len(255)?;
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Eval,
        t => return Err(Error::Format(format!("unknown split tag {t}"))),
    };
    let seed = r.u64()?;
    let shift = ShiftSpec {
        intensity_scale: r.f64()?,
        intensity_bias: r.f64()?,
        noise_std: r.f64()?,
        blur_radius: r.u32()?,
        structure_scale: r.f64()?,
        ring_artifact: r.u8()? != 0,
    };
    let n = r.len(1 << 20)?;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        images.push(Tensor::new(
            vec![1, height, width],
            r.f64s(height * width)?,
        )?);
        let lab = r.bytes(height * width)?;
        if lab.iter().any(|&l| l as usize >= num_classes) {
            return Err(Error::Format("label out of range".into()));
        }
        labels.push(lab);
    }
    r.expect_end()?;
    Ok(DomainDataset {
        images,
        labels,
        height,
        width,
        num_classes,
        shift,
        split,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(ds: &DomainDataset, class: u8) -> usize {
        ds.labels.iter().flatten().filter(|&&l| l == class).count()
    }

    #[test]
    fn identity_generation_is_deterministic() {
        let id = ShiftSpec::identity();
        let a = generate_domain(3, (32, 32), 4, &id, Split::Train, 9).unwrap();
        let b = generate_domain(3, (32, 32), 4, &id, Split::Train, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(3, (32, 32), 4, &id, Split::Train, 10).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn noise_has_requested_spread_before_clamping() {
        let (h, w) = (32, 32);
        let shift = ShiftSpec {
            noise_std: 0.1,
            ..ShiftSpec::identity()
        };
        let mut diffs = Vec::new();
        for i in 0..4u64 {
            let mut geo = ChaCha8Rng::seed_from_u64(derive_seed(3, 2 * i));
            let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(3, 2 * i + 1));
            let (_, clean) = draw_scene(&mut geo, h, w, 4, 1.0);
            let (noisy, base) = apply_shift(&clean, h, w, &shift, &mut noise).unwrap();
            diffs.extend(noisy.iter().zip(&base).map(|(a, b)| a - b));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.02, "{std}");
    }

    #[test]
    fn structure_scale_dilates_class_two() {
        let base =
            generate_domain(4, (32, 32), 4, &ShiftSpec::identity(), Split::Train, 5).unwrap();
        let big = ShiftSpec {
            structure_scale: 1.3,
            ..ShiftSpec::identity()
        };
        let dilated = generate_domain(4, (32, 32), 4, &big, Split::Train, 5).unwrap();
        assert!(area(&dilated, 2) > area(&base, 2));
    }

    #[test]
    fn image_only_shifts_keep_labels() {
        let clean =
            generate_domain(3, (32, 32), 4, &ShiftSpec::identity(), Split::Train, 2).unwrap();
        let shifted = ShiftSpec {
            intensity_scale: 1.4,
            intensity_bias: -0.1,
            noise_std: 0.2,
            blur_radius: 2,
            structure_scale: 1.0,
            ring_artifact: true,
        };
        let s = generate_domain(3, (32, 32), 4, &shifted, Split::Train, 2).unwrap();
        assert_eq!(s.labels, clean.labels);
        assert_ne!(s.images, clean.images);
    }

    #[test]
    fn values_and_labels_in_range() {
        for classes in 2..=8 {
            let ds = generate_domain(
                2,
                (32, 32),
                classes,
                &default_suite_shifts()[3],
                Split::Train,
                1,
            )
            .unwrap();
            assert!(ds
                .images
                .iter()
                .all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
            assert!(ds.labels.iter().flatten().all(|&l| (l as usize) < classes));
            for c in 1..classes as u8 {
                assert!(area(&ds, c) > 0, "class {c} missing with {classes} classes");
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let id = ShiftSpec::identity();
        assert!(generate_domain(1, (12, 16), 4, &id, Split::Train, 0).is_err());
        assert!(generate_domain(1, (30, 32), 4, &id, Split::Train, 0).is_err());
        assert!(generate_domain(1, (32, 32), 9, &id, Split::Train, 0).is_err());
    }

    #[test]
    fn suite_sizes_and_distinct_eval_sets() {
        let suite = default_four_domain_suite(0).unwrap();
        assert_eq!(suite.len(), 4);
        let sizes: Vec<_> = suite
            .iter()
            .map(|p| (p.train.len(), p.eval.len()))
            .collect();
        assert_eq!(sizes, [(12, 4), (2, 4), (2, 4), (2, 4)]);
        let prints: Vec<u64> = suite.iter().map(|p| p.eval.fingerprint()).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(prints[i], prints[j]);
            }
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds =
            generate_domain(2, (16, 16), 4, &default_suite_shifts()[1], Split::Eval, 4).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.shift, ds.shift);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_dataset(&path)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }
}

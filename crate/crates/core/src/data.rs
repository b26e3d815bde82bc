//! Dataset schema, ingestion, train/test split, preprocessing, and
//! augmentation.
//!
//! A dataset lives in one directory: `images/` with PNG files,
//! `annotations.jsonl` with one record per image, and `taxonomy.csv` mapping
//! genera to biological classes. All annotation coordinates are in
//! original-image pixels; preprocessing rescales everything to a fixed
//! square working resolution.

use crate::geometry::BoundingBox;
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// Working resolution: every training/eval sample is resized to this square.
pub const RESIZE_TARGET: usize = 800;

/// One labeled object in an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bbox: BoundingBox,
    pub genus: String,
}

/// One annotated image. Pixels stay on disk until [`AnnotatedImage::read_pixels`]
/// is called so large corpora can be indexed cheaply.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance>,
}

impl AnnotatedImage {
    /// Decode the PNG into an RGB tensor of shape `[3, H, W]`.
    pub fn read_pixels(&self) -> Result<Array3<u8>> {
        let img = image::open(&self.path)
            .map_err(|e| Error::Ingestion(format!("{}: cannot decode {}: {e}", self.image_id, self.path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (w, h) != (self.width as usize, self.height as usize) {
            return Err(Error::Ingestion(format!(
                "{}: file is {w}x{h} but manifest declares {}x{}",
                self.image_id, self.width, self.height
            )));
        }
        let mut t = Array3::<u8>::zeros((3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                t[[c, y as usize, x as usize]] = p.0[c];
            }
        }
        Ok(t)
    }
}

/// Serialized form of one instance in `annotations.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub genus: String,
}

/// Serialized form of one image record in `annotations.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceRecord>,
}

/// Load and validate a dataset directory.
///
/// Every record is checked: the referenced file must exist with matching
/// dimensions, boxes must lie within image bounds, and every genus must be
/// resolvable through the taxonomy sidecar.
pub fn load_dataset(manifest_dir: &Path) -> Result<(Vec<AnnotatedImage>, Taxonomy)> {
    let taxonomy_path = manifest_dir.join("taxonomy.csv");
    let sidecar = std::fs::read_to_string(&taxonomy_path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", taxonomy_path.display())))?;
    let taxonomy = Taxonomy::from_sidecar(&sidecar)?;

    let ann_path = manifest_dir.join("annotations.jsonl");
    let file = std::fs::File::open(&ann_path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", ann_path.display())))?;
    let reader = std::io::BufReader::new(file);

    let mut images = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Ingestion(format!("annotations.jsonl line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Ingestion(format!("annotations.jsonl line {}: {e}", lineno + 1)))?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::Ingestion(format!("duplicate image_id {}", rec.image_id)));
        }
        let path = manifest_dir.join("images").join(&rec.file);
        let (fw, fh) = image::image_dimensions(&path)
            .map_err(|e| Error::Ingestion(format!("{}: cannot read {}: {e}", rec.image_id, path.display())))?;
        if (fw, fh) != (rec.width, rec.height) {
            return Err(Error::Ingestion(format!(
                "{}: file is {fw}x{fh} but manifest declares {}x{}",
                rec.image_id, rec.width, rec.height
            )));
        }
        let mut instances = Vec::with_capacity(rec.instances.len());
        for inst in &rec.instances {
            let bbox = BoundingBox::new(inst.x1, inst.y1, inst.x2, inst.y2)
                .map_err(|e| Error::Validation(format!("{}: {e}", rec.image_id)))?;
            if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > rec.width as f64 || bbox.y2 > rec.height as f64 {
                return Err(Error::Validation(format!(
                    "{}: box ({},{},{},{}) outside {}x{} bounds",
                    rec.image_id, inst.x1, inst.y1, inst.x2, inst.y2, rec.width, rec.height
                )));
            }
            // unknown genus -> lookup failure surfaced as a validation error
            taxonomy
                .genus_to_class(&inst.genus)
                .map_err(|_| Error::Validation(format!("{}: unknown genus {:?}", rec.image_id, inst.genus)))?;
            instances.push(Instance { bbox, genus: inst.genus.clone() });
        }
        images.push(AnnotatedImage {
            image_id: rec.image_id,
            path,
            width: rec.width,
            height: rec.height,
            instances,
        });
    }
    Ok((images, taxonomy))
}

/// Deterministic 80/20 split of image ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Shuffle the (sorted) ids with a seeded RNG and take floor(0.8*N) for
/// training; the remainder is the test split.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Validation("split_dataset: duplicate ids".into()));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    let mut rng: ChaCha8Rng = crate::util::rng_from(seed, &[0x59]);
    sorted.shuffle(&mut rng);
    let n_train = ids.len() * 4 / 5;
    let test = sorted.split_off(n_train);
    Ok(DatasetSplit { train: sorted, test, seed })
}

/// Per-channel standardization statistics, computed over resized training
/// images in the unit pixel domain ([0,1]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizationStats {
    /// Two-pass-free population statistics over the given images, each
    /// resized to the working resolution first.
    pub fn compute(images: &[&AnnotatedImage]) -> Result<NormalizationStats> {
        if images.is_empty() {
            return Err(Error::Validation("cannot compute normalization stats on zero images".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut count = 0u64;
        for img in images {
            let px = img.read_pixels()?;
            let resized = resize_to_unit(&px, RESIZE_TARGET, RESIZE_TARGET);
            for c in 0..3 {
                for &v in resized.index_axis(ndarray::Axis(0), c).iter() {
                    sum[c] += v as f64;
                    sum_sq[c] += (v as f64) * (v as f64);
                }
            }
            count += (RESIZE_TARGET * RESIZE_TARGET) as u64;
        }
        let mut mean = [0.0f64; 3];
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            let var = (sum_sq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt();
            if std[c] < 1e-9 {
                return Err(Error::Numeric(format!("channel {c} has (near-)zero variance; cannot standardize")));
            }
        }
        Ok(NormalizationStats { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !(self.std[c] > 0.0) || !self.std[c].is_finite() || !self.mean[c].is_finite() {
                return Err(Error::Validation(format!("invalid normalization stats for channel {c}")));
            }
        }
        Ok(())
    }
}

/// Bilinear resize of an 8-bit RGB tensor into unit-range f32.
pub fn resize_to_unit(px: &Array3<u8>, th: usize, tw: usize) -> Array3<f32> {
    let (c, h, w) = px.dim();
    debug_assert_eq!(c, 3);
    let mut out = Array3::<f32>::zeros((3, th, tw));
    let taps_y = bilinear_axis_taps(h, th);
    let taps_x = bilinear_axis_taps(w, tw);
    for ci in 0..3 {
        let plane = px.index_axis(ndarray::Axis(0), ci);
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let v00 = plane[[y0, x0]] as f32;
                let v01 = plane[[y0, x1]] as f32;
                let v10 = plane[[y1, x0]] as f32;
                let v11 = plane[[y1, x1]] as f32;
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[ci, oy, ox]] = (top + (bot - top) * fy) / 255.0;
            }
        }
    }
    out
}

/// Bilinear resize of an f32 tensor (any channel count).
pub fn resize_f32(t: &Array3<f32>, th: usize, tw: usize) -> Array3<f32> {
    let (c, h, w) = t.dim();
    let mut out = Array3::<f32>::zeros((c, th, tw));
    let taps_y = bilinear_axis_taps(h, th);
    let taps_x = bilinear_axis_taps(w, tw);
    for ci in 0..c {
        let plane = t.index_axis(ndarray::Axis(0), ci);
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let v00 = plane[[y0, x0]];
                let v01 = plane[[y0, x1]];
                let v10 = plane[[y1, x0]];
                let v11 = plane[[y1, x1]];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[ci, oy, ox]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Half-pixel-centered source taps for one axis: (low, high, fraction).
fn bilinear_axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Scale instance boxes by independent per-axis factors.
pub fn scale_instances(instances: &[Instance], sx: f64, sy: f64) -> Vec<Instance> {
    instances
        .iter()
        .map(|i| Instance {
            bbox: BoundingBox {
                x1: i.bbox.x1 * sx,
                y1: i.bbox.y1 * sy,
                x2: i.bbox.x2 * sx,
                y2: i.bbox.y2 * sy,
            },
            genus: i.genus.clone(),
        })
        .collect()
}

/// Subtract/divide per-channel statistics in place.
pub fn standardize_inplace(t: &mut Array3<f32>, stats: &NormalizationStats) {
    for c in 0..3 {
        let m = stats.mean[c] as f32;
        let s = stats.std[c] as f32;
        t.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| (v - m) / s);
    }
}

/// Resize an image to the working resolution and standardize it; boxes are
/// scaled by the per-axis resize factors.
pub fn resize_and_standardize(img: &AnnotatedImage, stats: &NormalizationStats) -> Result<(Array3<f32>, Vec<Instance>)> {
    resize_and_standardize_to(img, stats, RESIZE_TARGET)
}

/// [`resize_and_standardize`] with an explicit working resolution.
pub fn resize_and_standardize_to(
    img: &AnnotatedImage,
    stats: &NormalizationStats,
    target: usize,
) -> Result<(Array3<f32>, Vec<Instance>)> {
    stats.validate()?;
    let px = img.read_pixels()?;
    let mut t = resize_to_unit(&px, target, target);
    standardize_inplace(&mut t, stats);
    let sx = target as f64 / img.width as f64;
    let sy = target as f64 / img.height as f64;
    Ok((t, scale_instances(&img.instances, sx, sy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    /// +90 degrees (counter-clockwise): pixel (x, y) -> (y, S-1-x).
    Ccw,
    /// -90 degrees (clockwise).
    Cw,
}

/// Rotate a square image and its boxes by ±90 degrees.
pub fn rotate90(t: &Array3<f32>, instances: &[Instance], dir: Rotation) -> Result<(Array3<f32>, Vec<Instance>)> {
    let (c, h, w) = t.dim();
    if h != w {
        return Err(Error::Validation(format!("rotate90 requires a square image, got {w}x{h}")));
    }
    let s = h;
    let mut out = Array3::<f32>::zeros((c, s, s));
    for ci in 0..c {
        for yn in 0..s {
            for xn in 0..s {
                out[[ci, yn, xn]] = match dir {
                    // new (x,y) = (y_old, S-1-x_old)  =>  old = (S-1-yn, xn)
                    Rotation::Ccw => t[[ci, xn, s - 1 - yn]],
                    // new (x,y) = (S-1-y_old, x_old)  =>  old = (xn, S-1-yn)... inverted below
                    Rotation::Cw => t[[ci, s - 1 - xn, yn]],
                };
            }
        }
    }
    let sf = s as f64;
    let boxes = instances
        .iter()
        .map(|i| {
            let b = &i.bbox;
            let bbox = match dir {
                Rotation::Ccw => BoundingBox { x1: b.y1, y1: sf - b.x2, x2: b.y2, y2: sf - b.x1 },
                Rotation::Cw => BoundingBox { x1: sf - b.y2, y1: b.x1, x2: sf - b.y1, y2: b.x2 },
            };
            Instance { bbox, genus: i.genus.clone() }
        })
        .collect();
    Ok((out, boxes))
}

/// Intersect boxes with a crop window and shift into window coordinates.
/// Boxes retaining less than `min_keep` of their original area are dropped.
pub fn crop_instances(instances: &[Instance], window: &BoundingBox, min_keep: f64) -> Vec<Instance> {
    instances
        .iter()
        .filter_map(|i| {
            let clipped = BoundingBox {
                x1: i.bbox.x1.max(window.x1),
                y1: i.bbox.y1.max(window.y1),
                x2: i.bbox.x2.min(window.x2),
                y2: i.bbox.y2.min(window.y2),
            };
            if clipped.x2 <= clipped.x1 || clipped.y2 <= clipped.y1 {
                return None;
            }
            if clipped.area() < min_keep * i.bbox.area() {
                return None;
            }
            Some(Instance {
                bbox: BoundingBox {
                    x1: clipped.x1 - window.x1,
                    y1: clipped.y1 - window.y1,
                    x2: clipped.x2 - window.x1,
                    y2: clipped.y2 - window.y1,
                },
                genus: i.genus.clone(),
            })
        })
        .collect()
}

/// Fraction of the original box area that must survive a crop.
pub const CROP_KEEP_FRACTION: f64 = 0.25;

/// Take a random square crop covering at least `min_fraction` of the image
/// area, drop boxes that mostly fall outside, and resize back to the
/// working resolution.
pub fn random_crop(
    t: &Array3<f32>,
    instances: &[Instance],
    min_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, Vec<Instance>)> {
    if !(min_fraction > 0.0 && min_fraction <= 1.0) {
        return Err(Error::Config(format!("crop min_fraction must be in (0,1], got {min_fraction}")));
    }
    let (c, h, w) = t.dim();
    if h != w {
        return Err(Error::Validation(format!("random_crop requires a square image, got {w}x{h}")));
    }
    let s = h;
    let frac: f64 = rng.random_range(min_fraction..=1.0);
    // ceil keeps the window area at or above min_fraction after snapping
    let side = ((s as f64 * frac.sqrt()).ceil() as usize).clamp(1, s);
    let x0 = rng.random_range(0..=(s - side));
    let y0 = rng.random_range(0..=(s - side));
    let window = BoundingBox::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64)?;
    let mut cropped = Array3::<f32>::zeros((c, side, side));
    cropped.assign(&t.slice(ndarray::s![.., y0..y0 + side, x0..x0 + side]));
    let out = resize_f32(&cropped, s, s);
    let scale = s as f64 / side as f64;
    let boxes = scale_instances(&crop_instances(instances, &window, CROP_KEEP_FRACTION), scale, scale);
    Ok((out, boxes))
}

/// Training/eval preprocessing pipeline. Evaluation uses resize+standardize
/// only; training additionally applies a coin-flip ±90° rotation and a
/// random crop before standardizing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Preprocessor {
    pub stats: NormalizationStats,
    pub rotate_prob: f64,
    pub crop_min_fraction: f64,
    /// Square working resolution samples are produced at.
    #[serde(default = "default_target")]
    pub target: usize,
}

fn default_target() -> usize {
    RESIZE_TARGET
}

impl Preprocessor {
    pub fn new(stats: NormalizationStats) -> Self {
        Preprocessor { stats, rotate_prob: 0.5, crop_min_fraction: 0.6, target: RESIZE_TARGET }
    }

    pub fn with_target(mut self, target: usize) -> Self {
        self.target = target;
        self
    }

    pub fn eval_sample(&self, img: &AnnotatedImage) -> Result<(Array3<f32>, Vec<Instance>)> {
        resize_and_standardize_to(img, &self.stats, self.target)
    }

    /// Deterministic augmented sample: the RNG stream is fully determined by
    /// (`sample_seed`), typically derived from (epoch seed, image index).
    pub fn train_sample(&self, img: &AnnotatedImage, sample_seed: u64) -> Result<(Array3<f32>, Vec<Instance>)> {
        self.stats.validate()?;
        let px = img.read_pixels()?;
        let mut t = resize_to_unit(&px, self.target, self.target);
        let sx = self.target as f64 / img.width as f64;
        let sy = self.target as f64 / img.height as f64;
        let mut instances = scale_instances(&img.instances, sx, sy);
        let mut rng: ChaCha8Rng = crate::util::rng_from(sample_seed, &[0xa6]);
        if rng.random_range(0.0..1.0) < self.rotate_prob {
            let dir = if rng.random_range(0.0..1.0) < 0.5 { Rotation::Ccw } else { Rotation::Cw };
            let (rt, ri) = rotate90(&t, &instances, dir)?;
            t = rt;
            instances = ri;
        }
        let (ct, ci) = random_crop(&t, &instances, self.crop_min_fraction, &mut rng)?;
        t = ct;
        instances = ci;
        standardize_inplace(&mut t, &self.stats);
        Ok((t, instances))
    }
}

/// Rewrite instance genera through a relabel map (rare-genus merging).
pub fn apply_relabel(images: &mut [AnnotatedImage], relabel: &std::collections::BTreeMap<String, String>) {
    for img in images {
        for inst in &mut img.instances {
            if let Some(to) = relabel.get(&inst.genus) {
                if *to != inst.genus {
                    inst.genus = to.clone();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Write a tiny synthetic dataset directory and return its path.
    fn write_fixture(dir: &Path, records: &[ImageRecord], gradient: bool) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        let taxonomy = "#classes=Bacillariophyta,Chlorophyta,Cyanophyta,Cryptophyceae,Cyanobacteria,Others\n\
                        genus,class\nNavicula,Bacillariophyta\nScenedesmus,Chlorophyta\nelse,Others\n";
        std::fs::write(dir.join("taxonomy.csv"), taxonomy).unwrap();
        let mut f = std::fs::File::create(dir.join("annotations.jsonl")).unwrap();
        for rec in records {
            let img = image::RgbImage::from_fn(rec.width, rec.height, |x, y| {
                if gradient {
                    image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
                } else {
                    image::Rgb([40, 80, 120])
                }
            });
            img.save(dir.join("images").join(&rec.file)).unwrap();
            writeln!(f, "{}", serde_json::to_string(rec).unwrap()).unwrap();
        }
    }

    fn record(id: &str, w: u32, h: u32, boxes: &[(f64, f64, f64, f64)]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            file: format!("{id}.png"),
            width: w,
            height: h,
            instances: boxes
                .iter()
                .map(|&(x1, y1, x2, y2)| InstanceRecord { x1, y1, x2, y2, genus: "Navicula".into() })
                .collect(),
        }
    }

    #[test]
    fn load_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &[record("img0", 64, 48, &[(1.0, 2.0, 30.0, 40.0)]), record("img1", 32, 32, &[])],
            false,
        );
        let (images, taxonomy) = load_dataset(dir.path()).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].instances.len(), 1);
        assert_eq!(images[0].instances[0].genus, "Navicula");
        assert_eq!(taxonomy.genus_to_class("Scenedesmus").unwrap(), "Chlorophyta");
    }

    #[test]
    fn load_dataset_empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[], false);
        let (images, _) = load_dataset(dir.path()).unwrap();
        assert!(images.is_empty());
    }

    #[test]
    fn load_dataset_rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[record("ok", 32, 32, &[])], false);
        // malformed json line
        let mut f = std::fs::OpenOptions::new().append(true).open(dir.path().join("annotations.jsonl")).unwrap();
        writeln!(f, "{{not json").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion(ref m) if m.contains("line 2")), "{err}");

        // out-of-bounds box names the image
        let dir2 = tempfile::tempdir().unwrap();
        write_fixture(dir2.path(), &[record("oob", 32, 32, &[(0.0, 0.0, 33.0, 10.0)])], false);
        let err = load_dataset(dir2.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("oob")), "{err}");

        // unknown genus
        let dir3 = tempfile::tempdir().unwrap();
        let mut rec = record("mystery", 32, 32, &[(0.0, 0.0, 10.0, 10.0)]);
        rec.instances[0].genus = "Atlantis".into();
        write_fixture(dir3.path(), &[rec], false);
        let err = load_dataset(dir3.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("Atlantis")), "{err}");
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:05}")).collect()
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let split = split_dataset(&ids(10), 7).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (8, 2));
        let split = split_dataset(&ids(1859), 7).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (1487, 372));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let all = ids(137);
        let a = split_dataset(&all, 42).unwrap();
        let b = split_dataset(&all, 42).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = split_dataset(&all, 43).unwrap();
        assert_ne!(a.train, c.train, "different seeds should reshuffle");
        let mut union: Vec<String> = a.train.iter().chain(a.test.iter()).cloned().collect();
        union.sort();
        let mut expect = all.clone();
        expect.sort();
        assert_eq!(union, expect);
        let train_set: BTreeSet<_> = a.train.iter().collect();
        assert!(a.test.iter().all(|id| !train_set.contains(id)));
    }

    #[test]
    fn split_rejects_duplicates() {
        let mut all = ids(4);
        all.push("img00000".into());
        assert!(matches!(split_dataset(&all, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn resize_scales_boxes_per_axis() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[record("big", 1600, 1600, &[(0.0, 0.0, 800.0, 800.0)])], true);
        let (images, _) = load_dataset(dir.path()).unwrap();
        let stats = NormalizationStats { mean: [0.0; 3], std: [1.0; 3] };
        let (t, boxes) = resize_and_standardize(&images[0], &stats).unwrap();
        assert_eq!(t.dim(), (3, 800, 800));
        let b = &boxes[0].bbox;
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 0.0, 400.0, 400.0));
    }

    #[test]
    fn resize_handles_non_square_input() {
        let dir = tempfile::tempdir().unwrap();
        // a typical microscope-frame aspect ratio at 1/8 scale to keep the test quick
        write_fixture(dir.path(), &[record("wide", 344, 276, &[(0.0, 0.0, 172.0, 276.0)])], true);
        let (images, _) = load_dataset(dir.path()).unwrap();
        let stats = NormalizationStats { mean: [0.5; 3], std: [0.25; 3] };
        let (t, boxes) = resize_and_standardize(&images[0], &stats).unwrap();
        assert_eq!(t.dim(), (3, 800, 800));
        let b = &boxes[0].bbox;
        assert!((b.x2 - 400.0).abs() < 1e-9);
        assert!((b.y2 - 800.0).abs() < 1e-9);
    }

    #[test]
    fn standardizing_with_own_stats_centers_the_data() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<ImageRecord> = (0..3).map(|i| record(&format!("g{i}"), 120 + 8 * i, 90, &[])).collect();
        write_fixture(dir.path(), &recs, true);
        let (images, _) = load_dataset(dir.path()).unwrap();
        let refs: Vec<&AnnotatedImage> = images.iter().collect();
        let stats = NormalizationStats::compute(&refs).unwrap();
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut n = 0u64;
        for img in &images {
            let (t, _) = resize_and_standardize(img, &stats).unwrap();
            for c in 0..3 {
                for &v in t.index_axis(ndarray::Axis(0), c).iter() {
                    sum[c] += v as f64;
                    sum_sq[c] += (v as f64) * (v as f64);
                }
            }
            n += (RESIZE_TARGET * RESIZE_TARGET) as u64;
        }
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let std = (sum_sq[c] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() <= 1e-3, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() <= 1e-3, "channel {c} std {std}");
        }
    }

    fn test_image(s: usize) -> (Array3<f32>, Vec<Instance>) {
        let mut rng = crate::util::rng_from(17, &[s as u64]);
        let t = Array3::from_shape_fn((3, s, s), |_| rng.random_range(0.0f32..1.0));
        let inst = vec![
            Instance { bbox: BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap(), genus: "a".into() },
            Instance { bbox: BoundingBox::new(3.5, 1.25, 60.0, 12.5).unwrap(), genus: "b".into() },
        ];
        (t, inst)
    }

    #[test]
    fn rotation_inverse_pair_is_identity() {
        let (t, inst) = test_image(64);
        let (r, ri) = rotate90(&t, &inst, Rotation::Ccw).unwrap();
        let (back, bi) = rotate90(&r, &ri, Rotation::Cw).unwrap();
        assert_eq!(t, back);
        for (a, b) in inst.iter().zip(bi.iter()) {
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-9);
            assert!((a.bbox.y2 - b.bbox.y2).abs() < 1e-9);
        }
    }

    #[test]
    fn four_rotations_are_identity() {
        let (mut t, mut inst) = test_image(32);
        let orig = t.clone();
        let orig_inst = inst.clone();
        for _ in 0..4 {
            let (r, ri) = rotate90(&t, &inst, Rotation::Ccw).unwrap();
            t = r;
            inst = ri;
        }
        assert_eq!(t, orig);
        for (a, b) in orig_inst.iter().zip(inst.iter()) {
            assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-9 && (a.bbox.y1 - b.bbox.y1).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_preserves_areas_and_bounds() {
        let (t, inst) = test_image(800);
        for dir in [Rotation::Ccw, Rotation::Cw] {
            let (_, ri) = rotate90(&t, &inst, dir).unwrap();
            for (a, b) in inst.iter().zip(ri.iter()) {
                assert!((a.bbox.area() - b.bbox.area()).abs() < 1e-6);
                assert!(b.bbox.x1 >= 0.0 && b.bbox.y1 >= 0.0 && b.bbox.x2 <= 800.0 && b.bbox.y2 <= 800.0);
            }
        }
    }

    /// Rasterize the box, rotate the mask pixel-by-pixel, and re-derive the
    /// bounding box of the rotated mask.
    #[test]
    fn rotated_box_matches_rasterization_oracle() {
        let s = 800usize;
        let b = BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let inst = vec![Instance { bbox: b, genus: "x".into() }];
        let t = Array3::<f32>::zeros((3, s, s));
        let (_, ri) = rotate90(&t, &inst, Rotation::Ccw).unwrap();
        // mask: integer pixels covered by the box; pixel (x,y) -> (y, s-1-x)
        let (mut nx1, mut ny1, mut nx2, mut ny2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 20..40 {
            for x in 10..30 {
                let (rx, ry) = (y, s - 1 - x);
                nx1 = nx1.min(rx);
                ny1 = ny1.min(ry);
                nx2 = nx2.max(rx + 1);
                ny2 = ny2.max(ry + 1);
            }
        }
        let rb = &ri[0].bbox;
        assert!((rb.x1 - nx1 as f64).abs() <= 1.0 && (rb.y1 - ny1 as f64).abs() <= 1.0);
        assert!((rb.x2 - nx2 as f64).abs() <= 1.0 && (rb.y2 - ny2 as f64).abs() <= 1.0);
    }

    #[test]
    fn crop_instances_matches_intersection_arithmetic() {
        let inst = vec![Instance { bbox: BoundingBox::new(100.0, 100.0, 200.0, 200.0).unwrap(), genus: "x".into() }];
        // window bisects the box vertically at x=150: retained area 50%
        let window = BoundingBox::new(150.0, 0.0, 700.0, 700.0).unwrap();
        let kept = crop_instances(&inst, &window, CROP_KEEP_FRACTION);
        assert_eq!(kept.len(), 1);
        let b = &kept[0].bbox;
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (0.0, 100.0, 50.0, 200.0));
        assert!((b.area() - 5000.0).abs() < 1e-9);
        // window leaving only 20% of the width -> dropped
        let window = BoundingBox::new(180.0, 0.0, 700.0, 700.0).unwrap();
        assert!(crop_instances(&inst, &window, CROP_KEEP_FRACTION).is_empty());
        // fully containing window -> translation only
        let window = BoundingBox::new(50.0, 60.0, 700.0, 700.0).unwrap();
        let kept = crop_instances(&inst, &window, CROP_KEEP_FRACTION);
        assert_eq!((kept[0].bbox.x1, kept[0].bbox.y1), (50.0, 40.0));
        assert!((kept[0].bbox.area() - 10000.0).abs() < 1e-9);
    }

    #[test]
    fn full_fraction_crop_is_identity() {
        let (t, inst) = test_image(RESIZE_TARGET);
        let mut rng = crate::util::rng_from(9, &[1]);
        let (out, oi) = random_crop(&t, &inst, 1.0, &mut rng).unwrap();
        assert_eq!(out, t);
        assert_eq!(oi.len(), inst.len());
        assert!((oi[0].bbox.x1 - inst[0].bbox.x1).abs() < 1e-9);
    }

    #[test]
    fn random_crop_meets_area_floor_and_determinism() {
        let (t, inst) = test_image(RESIZE_TARGET);
        for trial in 0..20u64 {
            let mut rng = crate::util::rng_from(100, &[trial]);
            let (out, oi) = random_crop(&t, &inst, 0.6, &mut rng).unwrap();
            assert_eq!(out.dim(), (3, RESIZE_TARGET, RESIZE_TARGET));
            for i in &oi {
                assert!(i.bbox.x1 >= -1e-9 && i.bbox.y1 >= -1e-9);
                assert!(i.bbox.x2 <= RESIZE_TARGET as f64 + 1e-9);
            }
            let mut rng2 = crate::util::rng_from(100, &[trial]);
            let (out2, _) = random_crop(&t, &inst, 0.6, &mut rng2).unwrap();
            assert_eq!(out, out2);
        }
    }

    #[test]
    fn train_sample_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[record("aug", 160, 120, &[(10.0, 10.0, 100.0, 90.0)])], true);
        let (images, _) = load_dataset(dir.path()).unwrap();
        let refs: Vec<&AnnotatedImage> = images.iter().collect();
        let pre = Preprocessor::new(NormalizationStats::compute(&refs).unwrap());
        let (a, ai) = pre.train_sample(&images[0], 12345).unwrap();
        let (b, bi) = pre.train_sample(&images[0], 12345).unwrap();
        assert_eq!(a, b);
        assert_eq!(ai.len(), bi.len());
        let (c, _) = pre.train_sample(&images[0], 54321).unwrap();
        assert_ne!(a, c, "different sample seeds should change the augmentation");
        assert_eq!(a.dim(), (3, RESIZE_TARGET, RESIZE_TARGET));
    }
}

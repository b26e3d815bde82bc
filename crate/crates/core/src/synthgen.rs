//! Deterministic synthetic microscopy-scene generator.
//!
//! Scenes are rendered from signed-distance shapes with ~1px anti-aliased
//! edges over a textured background, sprinkled with unlabeled distractor
//! blobs, and annotated with boxes tight to each organism's own rendered
//! mask (so occluded organisms keep their full box). Everything is a pure
//! function of (spec, styles, seed); the corpus writer derives per-image
//! seeds from the corpus seed and image index so parallel generation can
//! never reorder output.

use crate::data::{ImageRecord, Instance, InstanceRecord};
use crate::geometry::BoundingBox;
use crate::taxonomy::Taxonomy;
use crate::util::{derive_seed, rng_from};
use crate::{Error, Result};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Geometric family an organism is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeFamily {
    /// Elongated ellipse (diatom-like frustule).
    Ellipse,
    /// Capsule / filament segment.
    Rod,
    /// Several discs, either chained in a row or clumped.
    ColonyOfDiscs { in_row: bool },
    /// Radially lobed disc.
    Star,
}

/// Appearance description for one genus.
#[derive(Debug, Clone)]
pub struct GenusStyle {
    pub genus: String,
    pub shape: ShapeFamily,
    /// Overall half-extent range in pixels.
    pub size_range: (f64, f64),
    /// Mean RGB in [0,1] plus uniform per-channel jitter amplitude.
    pub color_mean: [f64; 3],
    pub color_jitter: f64,
    pub opacity_range: (f64, f64),
}

impl GenusStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.size_range.0 > 0.0 && self.size_range.1 >= self.size_range.0) {
            return Err(Error::Config(format!("{}: size range must be positive", self.genus)));
        }
        for &o in [self.opacity_range.0, self.opacity_range.1].iter() {
            if !(0.0..=1.0).contains(&o) {
                return Err(Error::Config(format!("{}: opacity outside [0,1]", self.genus)));
            }
        }
        Ok(())
    }
}

/// Knobs for a single rendered scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub instance_count: (usize, usize),
    pub occlusion_prob: f64,
    /// Chance an instance is rendered nearly transparent (alpha 0.1..0.3).
    pub transparency_prob: f64,
    pub distractor_count: (usize, usize),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("scene dimensions must be at least 16x16".into()));
        }
        for p in [self.occlusion_prob, self.transparency_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0,1]")));
            }
        }
        if self.instance_count.1 < self.instance_count.0 || self.distractor_count.1 < self.distractor_count.0 {
            return Err(Error::Config("count ranges must be (lo, hi) with hi >= lo".into()));
        }
        Ok(())
    }
}

/// A rendered scene before it is written to disk.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub pixels: Array3<u8>,
    pub instances: Vec<Instance>,
}

const MAX_PLACEMENT_TRIES: usize = 50;

/// Render one scene, choosing genera uniformly from the styles.
pub fn generate_scene(spec: &SceneSpec, styles: &[GenusStyle], seed: u64) -> Result<GeneratedScene> {
    if styles.is_empty() {
        return Err(Error::Config("generate_scene requires at least one style".into()));
    }
    let mut rng = rng_from(seed, &[0x1ab]);
    let count = rng.random_range(spec.instance_count.0..=spec.instance_count.1);
    let labels: Vec<String> = (0..count)
        .map(|_| styles[rng.random_range(0..styles.len())].genus.clone())
        .collect();
    let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
    render_scene(spec, styles, &refs, seed)
}

/// Render one scene with an exact genus sequence (used by the corpus writer
/// so global genus frequencies can be controlled).
pub fn generate_scene_with_labels(
    spec: &SceneSpec,
    styles: &[GenusStyle],
    labels: &[&str],
    seed: u64,
) -> Result<GeneratedScene> {
    render_scene(spec, styles, labels, seed)
}

fn render_scene(spec: &SceneSpec, styles: &[GenusStyle], labels: &[&str], seed: u64) -> Result<GeneratedScene> {
    spec.validate()?;
    for s in styles {
        s.validate()?;
    }
    let (w, h) = (spec.width, spec.height);
    let mut img = background(w, h, derive_seed(seed, &[0xb6]));
    let mut rng = rng_from(seed, &[0x5c]);

    // Unlabeled distractor blobs go underneath the organisms.
    let n_distract = rng.random_range(spec.distractor_count.0..=spec.distractor_count.1);
    for _ in 0..n_distract {
        let size = rng.random_range(6.0..18.0);
        let ext = size * 1.05 + 2.0;
        if 2.0 * ext + 4.0 > w.min(h) as f64 {
            continue;
        }
        let cx = rng.random_range(ext..w as f64 - ext);
        let cy = rng.random_range(ext..h as f64 - ext);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let shade = rng.random_range(-0.08..0.08);
        let color = [0.52 + shade, 0.50 + shade, 0.46 + shade];
        let alpha = rng.random_range(0.4..0.85);
        let shape = PlacedShape {
            family: ShapeFamily::Ellipse,
            cx,
            cy,
            size,
            angle,
            elongation: rng.random_range(1.0..1.8),
            discs: Vec::new(),
        };
        paint(&mut img, &shape, &color, alpha);
    }

    let mut instances: Vec<Instance> = Vec::with_capacity(labels.len());
    for &genus in labels {
        let style = styles
            .iter()
            .find(|s| s.genus == genus)
            .ok_or_else(|| Error::Config(format!("no style for genus {genus:?}")))?;
        let mut placed = false;
        for _try in 0..MAX_PLACEMENT_TRIES {
            let size = rng.random_range(style.size_range.0..=style.size_range.1);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let elongation = rng.random_range(1.4..1.9);
            let discs = sample_discs(&style.shape, size, &mut rng);
            let ext = max_extent(&style.shape, size);
            if 2.0 * ext + 4.0 > w.min(h) as f64 {
                continue;
            }
            let occlude = !instances.is_empty() && rng.random_range(0.0..1.0) < spec.occlusion_prob;
            let (cx, cy) = if occlude {
                let target = &instances[rng.random_range(0..instances.len())].bbox;
                let cx = rng.random_range(target.x1..target.x2).clamp(ext, w as f64 - ext);
                let cy = rng.random_range(target.y1..target.y2).clamp(ext, h as f64 - ext);
                (cx, cy)
            } else {
                (rng.random_range(ext..w as f64 - ext), rng.random_range(ext..h as f64 - ext))
            };
            let alpha = if rng.random_range(0.0..1.0) < spec.transparency_prob {
                rng.random_range(0.1..0.3)
            } else {
                rng.random_range(style.opacity_range.0..=style.opacity_range.1)
            };
            let mut color = [0.0f64; 3];
            for c in 0..3 {
                color[c] = (style.color_mean[c] + rng.random_range(-style.color_jitter..=style.color_jitter))
                    .clamp(0.0, 1.0);
            }
            let shape = PlacedShape { family: style.shape, cx, cy, size, angle, elongation, discs };
            if let Some(bbox) = paint(&mut img, &shape, &color, alpha) {
                instances.push(Instance { bbox, genus: genus.to_owned() });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place a {genus} instance in a {w}x{h} scene after {MAX_PLACEMENT_TRIES} tries"
            )));
        }
    }

    let mut pixels = Array3::<u8>::zeros((3, h, w));
    ndarray::Zip::from(&mut pixels).and(&img).for_each(|q, &v| {
        *q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    });
    Ok(GeneratedScene { pixels, instances })
}

/// Bright-field style background: light base tint, a few low-frequency
/// sinusoidal waves, and fine per-pixel noise.
fn background(w: usize, h: usize, seed: u64) -> Array3<f64> {
    let mut rng = rng_from(seed, &[]);
    let base = [
        rng.random_range(0.80..0.88),
        rng.random_range(0.83..0.90),
        rng.random_range(0.78..0.86),
    ];
    let mut waves = Vec::new();
    for _ in 0..3 {
        waves.push((
            rng.random_range(0.5..3.0) / w as f64,
            rng.random_range(0.5..3.0) / h as f64,
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.01..0.035),
        ));
    }
    let mut img = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(fx, fy, ph, amp) in &waves {
                v += amp * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin();
            }
            let n = derive_seed(seed, &[x as u64, y as u64]);
            let noise = (n as f64 / u64::MAX as f64 - 0.5) * 0.03;
            for c in 0..3 {
                img[[c, y, x]] = base[c] + v + noise;
            }
        }
    }
    img
}

struct PlacedShape {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
    elongation: f64,
    /// (dx, dy, radius) offsets for colony members, in local units of size.
    discs: Vec<(f64, f64, f64)>,
}

/// Colony disc layout in local coordinates (relative to size).
fn sample_discs(family: &ShapeFamily, _size: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    match family {
        ShapeFamily::ColonyOfDiscs { in_row: true } => {
            let n = 4;
            let r = 0.28;
            (0..n)
                .map(|i| {
                    let t = (i as f64 - (n - 1) as f64 / 2.0) / ((n - 1) as f64 / 2.0);
                    (t * (1.0 - r), rng.random_range(-0.05..0.05), r)
                })
                .collect()
        }
        ShapeFamily::ColonyOfDiscs { in_row: false } => {
            let n = rng.random_range(5..=7);
            (0..n)
                .map(|_| {
                    let ang = rng.random_range(0.0..std::f64::consts::TAU);
                    let rad = rng.random_range(0.0..0.52);
                    (rad * ang.cos(), rad * ang.sin(), rng.random_range(0.34..0.46))
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

/// Conservative maximum reach of a shape from its center, in pixels.
fn max_extent(family: &ShapeFamily, size: f64) -> f64 {
    match family {
        ShapeFamily::Ellipse => size * 1.02 + 2.0,
        ShapeFamily::Rod => size * 1.25 + 2.0,
        ShapeFamily::ColonyOfDiscs { .. } => size * 1.02 + 2.0,
        ShapeFamily::Star => size * 1.02 + 2.0,
    }
}

/// Signed distance (negative inside) from a point in local, rotated
/// coordinates to the shape surface.
fn signed_distance(shape: &PlacedShape, lx: f64, ly: f64) -> f64 {
    let s = shape.size;
    match shape.family {
        ShapeFamily::Ellipse => {
            let (rx, ry) = (s, s / shape.elongation);
            // scaled-norm approximation; adequate for 1px edge blending
            let k = ((lx / rx) * (lx / rx) + (ly / ry) * (ly / ry)).sqrt();
            (k - 1.0) * rx.min(ry)
        }
        ShapeFamily::Rod => {
            let half = s * (1.0 - 0.18);
            let r = (s * 0.18).max(2.5);
            let qx = lx.clamp(-half, half);
            ((lx - qx) * (lx - qx) + ly * ly).sqrt() - r
        }
        ShapeFamily::ColonyOfDiscs { .. } => {
            let mut d = f64::INFINITY;
            for &(dx, dy, r) in &shape.discs {
                let (ox, oy) = (lx - dx * s, ly - dy * s);
                d = d.min((ox * ox + oy * oy).sqrt() - r * s);
            }
            d
        }
        ShapeFamily::Star => {
            let rad = (lx * lx + ly * ly).sqrt();
            let phi = ly.atan2(lx);
            let lobes = 8.0;
            let r_phi = s * (0.72 + 0.28 * (lobes * phi).cos());
            rad - r_phi
        }
    }
}

/// Alpha-blend a shape into the image; returns the bounding box of the
/// pixels whose geometric coverage is at least one half, or None if the
/// shape rendered no such pixel.
fn paint(img: &mut Array3<f64>, shape: &PlacedShape, color: &[f64; 3], alpha: f64) -> Option<BoundingBox> {
    let (_, h, w) = img.dim();
    let ext = max_extent(&shape.family, shape.size);
    let x_lo = (shape.cx - ext).floor().max(0.0) as usize;
    let y_lo = (shape.cy - ext).floor().max(0.0) as usize;
    let x_hi = ((shape.cx + ext).ceil() as usize).min(w);
    let y_hi = ((shape.cy + ext).ceil() as usize).min(h);
    let (sin, cos) = shape.angle.sin_cos();
    let (mut mx1, mut my1, mut mx2, mut my2) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let px = x as f64 + 0.5 - shape.cx;
            let py = y as f64 + 0.5 - shape.cy;
            // rotate into the shape frame
            let lx = cos * px + sin * py;
            let ly = -sin * px + cos * py;
            let d = signed_distance(shape, lx, ly);
            let cov = (0.5 - d).clamp(0.0, 1.0);
            if cov <= 0.0 {
                continue;
            }
            if cov >= 0.5 {
                mx1 = mx1.min(x);
                my1 = my1.min(y);
                mx2 = mx2.max(x + 1);
                my2 = my2.max(y + 1);
            }
            let a = cov * alpha;
            for c in 0..3 {
                img[[c, y, x]] = a * color[c] + (1.0 - a) * img[[c, y, x]];
            }
        }
    }
    if mx1 == usize::MAX {
        return None;
    }
    Some(BoundingBox::new(mx1 as f64, my1 as f64, mx2 as f64, my2 as f64).ok()?)
}

/// Desk-scale defaults ------------------------------------------------------

/// Default scene parameters for the bundled corpus.
pub fn desk_spec() -> SceneSpec {
    SceneSpec {
        width: 800,
        height: 800,
        instance_count: (2, 8),
        occlusion_prob: 0.25,
        transparency_prob: 0.08,
        distractor_count: (0, 4),
    }
}

/// Six stylized genera spanning four shape families, plus one rare genus.
pub fn desk_styles() -> Vec<GenusStyle> {
    vec![
        GenusStyle {
            genus: "Cymbella".into(),
            shape: ShapeFamily::Ellipse,
            size_range: (26.0, 46.0),
            color_mean: [0.66, 0.52, 0.24],
            color_jitter: 0.06,
            opacity_range: (0.75, 0.95),
        },
        GenusStyle {
            genus: "Navicula".into(),
            shape: ShapeFamily::Rod,
            size_range: (30.0, 52.0),
            color_mean: [0.48, 0.38, 0.18],
            color_jitter: 0.06,
            opacity_range: (0.75, 0.95),
        },
        GenusStyle {
            genus: "Scenedesmus".into(),
            shape: ShapeFamily::ColonyOfDiscs { in_row: true },
            size_range: (28.0, 48.0),
            color_mean: [0.22, 0.58, 0.26],
            color_jitter: 0.06,
            opacity_range: (0.8, 0.95),
        },
        GenusStyle {
            genus: "Pediastrum".into(),
            shape: ShapeFamily::Star,
            size_range: (26.0, 44.0),
            color_mean: [0.30, 0.64, 0.24],
            color_jitter: 0.06,
            opacity_range: (0.8, 0.95),
        },
        GenusStyle {
            genus: "Microcystis".into(),
            shape: ShapeFamily::ColonyOfDiscs { in_row: false },
            size_range: (26.0, 44.0),
            color_mean: [0.16, 0.50, 0.46],
            color_jitter: 0.05,
            opacity_range: (0.7, 0.9),
        },
        GenusStyle {
            genus: "Oscillatoria".into(),
            shape: ShapeFamily::Rod,
            size_range: (44.0, 70.0),
            color_mean: [0.14, 0.44, 0.40],
            color_jitter: 0.05,
            opacity_range: (0.75, 0.95),
        },
        GenusStyle {
            genus: "Cryptomonas".into(),
            shape: ShapeFamily::Ellipse,
            size_range: (18.0, 30.0),
            color_mean: [0.56, 0.30, 0.26],
            color_jitter: 0.05,
            opacity_range: (0.75, 0.95),
        },
    ]
}

/// Long-tailed genus frequency profile; the last genus stays below ten
/// instances in a 200-image corpus so rare-genus merging has work to do.
pub fn desk_profile() -> Vec<(String, f64)> {
    vec![
        ("Cymbella".into(), 0.24),
        ("Navicula".into(), 0.22),
        ("Scenedesmus".into(), 0.18),
        ("Pediastrum".into(), 0.14),
        ("Microcystis".into(), 0.12),
        ("Oscillatoria".into(), 0.095),
        ("Cryptomonas".into(), 0.005),
    ]
}

/// Genus-to-class table for the desk corpus.
pub fn desk_taxonomy() -> Taxonomy {
    let pairs = [
        ("Cymbella", "Bacillariophyta"),
        ("Navicula", "Bacillariophyta"),
        ("Scenedesmus", "Chlorophyta"),
        ("Pediastrum", "Chlorophyta"),
        ("Microcystis", "Cyanophyta"),
        ("Oscillatoria", "Cyanophyta"),
        ("Cryptomonas", "Cryptophyceae"),
        ("else", "Others"),
    ];
    let classes = ["Bacillariophyta", "Chlorophyta", "Cyanophyta", "Cryptophyceae", "Cyanobacteria", "Others"];
    Taxonomy::new(
        classes.iter().map(|s| s.to_string()).collect(),
        pairs.iter().map(|(g, c)| (g.to_string(), c.to_string())).collect(),
    )
    .expect("desk taxonomy is statically valid")
}

/// Corpus generation settings.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_images: usize,
    pub profile: Vec<(String, f64)>,
    pub spec: SceneSpec,
    pub styles: Vec<GenusStyle>,
    pub taxonomy: Taxonomy,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn desk(n_images: usize, seed: u64) -> Self {
        CorpusConfig {
            n_images,
            profile: desk_profile(),
            spec: desk_spec(),
            styles: desk_styles(),
            taxonomy: desk_taxonomy(),
            seed,
        }
    }
}

/// Write a full dataset directory (images/, annotations.jsonl,
/// taxonomy.csv) and return the manifest directory path.
///
/// Genus quotas are fixed by largest-remainder apportionment over the total
/// instance budget, so realized frequencies match the profile to well within
/// ±3 percentage points.
pub fn emit_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.n_images == 0 {
        return Err(Error::Config("corpus needs at least one image".into()));
    }
    cfg.spec.validate()?;
    let mut frac_sum = 0.0;
    for (genus, frac) in &cfg.profile {
        if !cfg.styles.iter().any(|s| &s.genus == genus) {
            return Err(Error::Config(format!("profile genus {genus:?} has no style")));
        }
        if *frac < 0.0 {
            return Err(Error::Config(format!("profile fraction for {genus} is negative")));
        }
        frac_sum += frac;
    }
    if (frac_sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("profile fractions sum to {frac_sum}, expected 1")));
    }

    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut rng = rng_from(cfg.seed, &[0xc0]);
    let counts: Vec<usize> = (0..cfg.n_images)
        .map(|_| rng.random_range(cfg.spec.instance_count.0..=cfg.spec.instance_count.1))
        .collect();
    let total: usize = counts.iter().sum();

    // Largest-remainder apportionment of the instance budget.
    let mut quotas: Vec<(usize, usize, f64)> = cfg
        .profile
        .iter()
        .enumerate()
        .map(|(i, (_, f))| {
            let exact = f * total as f64;
            (i, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut qi = 0;
    let n_quotas = quotas.len();
    while assigned < total {
        quotas[qi % n_quotas].1 += 1;
        assigned += 1;
        qi += 1;
    }
    quotas.sort_by_key(|q| q.0);
    let mut pool: Vec<&str> = Vec::with_capacity(total);
    for (i, q, _) in &quotas {
        for _ in 0..*q {
            pool.push(cfg.profile[*i].0.as_str());
        }
    }
    pool.shuffle(&mut rng);

    let ann_path = out_dir.join("annotations.jsonl");
    let mut ann = std::io::BufWriter::new(std::fs::File::create(&ann_path)?);
    let mut offset = 0;
    for (idx, &count) in counts.iter().enumerate() {
        let labels: Vec<&str> = pool[offset..offset + count].to_vec();
        offset += count;
        let scene = generate_scene_with_labels(&cfg.spec, &cfg.styles, &labels, derive_seed(cfg.seed, &[idx as u64]))?;
        let image_id = format!("img{idx:05}");
        let file = format!("{image_id}.png");
        let (_, h, w) = scene.pixels.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                p.0[c] = scene.pixels[[c, y as usize, x as usize]];
            }
        }
        buf.save(out_dir.join("images").join(&file))
            .map_err(|e| Error::Generation(format!("saving {file}: {e}")))?;
        let record = ImageRecord {
            image_id,
            file,
            width: w as u32,
            height: h as u32,
            instances: scene
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    x1: i.bbox.x1,
                    y1: i.bbox.y1,
                    x2: i.bbox.x2,
                    y2: i.bbox.y2,
                    genus: i.genus.clone(),
                })
                .collect(),
        };
        writeln!(ann, "{}", serde_json::to_string(&record).map_err(|e| Error::Generation(e.to_string()))?)?;
    }
    drop(ann);
    std::fs::write(out_dir.join("taxonomy.csv"), cfg.taxonomy.to_sidecar())?;
    Ok(out_dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use std::collections::BTreeMap;

    fn quick_spec() -> SceneSpec {
        SceneSpec {
            width: 256,
            height: 256,
            instance_count: (2, 4),
            occlusion_prob: 0.2,
            transparency_prob: 0.0,
            distractor_count: (0, 2),
        }
    }

    #[test]
    fn zero_instances_yields_background_only() {
        let mut spec = quick_spec();
        spec.instance_count = (0, 0);
        let scene = generate_scene(&spec, &desk_styles(), 1).unwrap();
        assert!(scene.instances.is_empty());
        assert_eq!(scene.pixels.dim(), (3, 256, 256));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = quick_spec();
        let a = generate_scene(&spec, &desk_styles(), 99).unwrap();
        let b = generate_scene(&spec, &desk_styles(), 99).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.instances.len(), b.instances.len());
        let c = generate_scene(&spec, &desk_styles(), 100).unwrap();
        assert!(a.pixels != c.pixels);
    }

    #[test]
    fn forced_occlusion_produces_overlapping_boxes() {
        let mut spec = quick_spec();
        spec.instance_count = (2, 2);
        spec.occlusion_prob = 1.0;
        spec.distractor_count = (0, 0);
        for seed in 0..5 {
            let scene = generate_scene(&spec, &desk_styles(), seed).unwrap();
            assert_eq!(scene.instances.len(), 2);
            let v = iou(&scene.instances[0].bbox, &scene.instances[1].bbox).unwrap();
            assert!(v > 0.0, "seed {seed}: expected overlap, got IoU {v}");
        }
    }

    /// A saturated red organism on the greenish background: the red-minus-
    /// green channel difference recovers the rendered mask, whose bounding
    /// rectangle must match the annotation within one pixel per edge.
    #[test]
    fn annotation_is_tight_to_rendered_mask() {
        let spec = SceneSpec {
            width: 200,
            height: 200,
            instance_count: (1, 1),
            occlusion_prob: 0.0,
            transparency_prob: 0.0,
            distractor_count: (0, 0),
        };
        for (i, family) in [
            ShapeFamily::Ellipse,
            ShapeFamily::Rod,
            ShapeFamily::ColonyOfDiscs { in_row: true },
            ShapeFamily::ColonyOfDiscs { in_row: false },
            ShapeFamily::Star,
        ]
        .into_iter()
        .enumerate()
        {
            let style = GenusStyle {
                genus: "probe".into(),
                shape: family,
                size_range: (22.0, 34.0),
                color_mean: [0.92, 0.05, 0.05],
                color_jitter: 0.0,
                opacity_range: (1.0, 1.0),
            };
            let scene = generate_scene(&spec, &[style], 7 + i as u64).unwrap();
            assert_eq!(scene.instances.len(), 1);
            let b = &scene.instances[0].bbox;
            let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for y in 0..200 {
                for x in 0..200 {
                    let r = scene.pixels[[0, y, x]] as f64 / 255.0;
                    let g = scene.pixels[[1, y, x]] as f64 / 255.0;
                    if r - g > 0.35 {
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x + 1);
                        y2 = y2.max(y + 1);
                    }
                }
            }
            assert!(x1 != usize::MAX, "no mask pixels recovered");
            assert!((b.x1 - x1 as f64).abs() <= 1.0, "{family:?} x1 {} vs {}", b.x1, x1);
            assert!((b.y1 - y1 as f64).abs() <= 1.0, "{family:?} y1 {} vs {}", b.y1, y1);
            assert!((b.x2 - x2 as f64).abs() <= 1.0, "{family:?} x2 {} vs {}", b.x2, x2);
            assert!((b.y2 - y2 as f64).abs() <= 1.0, "{family:?} y2 {} vs {}", b.y2, y2);
        }
    }

    #[test]
    fn corpus_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::desk(3, 5);
        cfg.spec = quick_spec();
        let path = emit_corpus(&cfg, dir.path()).unwrap();
        let (images, taxonomy) = crate::data::load_dataset(&path).unwrap();
        assert_eq!(images.len(), 3);
        assert!(images.iter().map(|i| i.instances.len()).sum::<usize>() >= 6);
        assert_eq!(taxonomy.genus_to_class("Pediastrum").unwrap(), "Chlorophyta");
        // pixels decode and match declared dimensions
        let px = images[0].read_pixels().unwrap();
        assert_eq!(px.dim(), (3, 256, 256));
    }

    #[test]
    fn corpus_frequencies_match_profile() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::desk(60, 11);
        cfg.spec = quick_spec();
        cfg.spec.instance_count = (4, 8);
        cfg.profile = vec![
            ("Cymbella".into(), 0.7),
            ("Scenedesmus".into(), 0.2),
            ("Microcystis".into(), 0.1),
        ];
        emit_corpus(&cfg, dir.path()).unwrap();
        let (images, _) = crate::data::load_dataset(dir.path()).unwrap();
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        let mut total = 0.0;
        for img in &images {
            for inst in &img.instances {
                *counts.entry(inst.genus.as_str()).or_default() += 1.0;
                total += 1.0;
            }
        }
        for (genus, want) in [("Cymbella", 0.7), ("Scenedesmus", 0.2), ("Microcystis", 0.1)] {
            let got = counts.get(genus).copied().unwrap_or(0.0) / total;
            assert!((got - want).abs() <= 0.03, "{genus}: {got} vs {want}");
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::desk(2, 21);
        cfg.spec = quick_spec();
        emit_corpus(&cfg, d1.path()).unwrap();
        emit_corpus(&cfg, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("annotations.jsonl")).unwrap();
        let b = std::fs::read(d2.path().join("annotations.jsonl")).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(d1.path().join("images/img00000.png")).unwrap();
        let b = std::fs::read(d2.path().join("images/img00000.png")).unwrap();
        assert_eq!(a, b);
    }
}

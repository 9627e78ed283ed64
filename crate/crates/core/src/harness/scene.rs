//! Seeded synthetic scenes: rectangular objects with a strongly activated
//! sub-part, clutter blobs, decoy bands, and proposals of several kinds.
//!
//! A decoy band runs edge to edge along one side of the image and carries
//! the same local signal as an object, part included. Inside a band every
//! crop looks like an object crop; only the band's lack of a boundary tells
//! them apart, which is what extension contrast measures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CpeError, Result};
use crate::features::FeatureMap;
use crate::geometry::{BBox, ImageDims};
use crate::mil::ImageLabel;
use crate::model::Sample;
use crate::tensor::Tensor;

/// Parameters of the scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub classes: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Feature cells per pixel.
    pub spatial_scale: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_min_size: f64,
    pub object_max_size: f64,
    pub distractors: usize,
    pub noise: f64,
    /// Proposals per object of each kind.
    pub near_gt: usize,
    pub part_boxes: usize,
    pub partial_boxes: usize,
    pub loose_boxes: usize,
    /// Proposals away from every object.
    pub background_boxes: usize,
    /// Edge-to-edge decoy bands per scene.
    pub decoys: usize,
    /// Overall feature intensity multiplier.
    pub signal: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            image_width: 128.0,
            image_height: 128.0,
            spatial_scale: 0.25,
            objects_min: 1,
            objects_max: 2,
            object_min_size: 40.0,
            object_max_size: 72.0,
            distractors: 2,
            noise: 0.05,
            near_gt: 3,
            part_boxes: 2,
            partial_boxes: 2,
            loose_boxes: 1,
            background_boxes: 6,
            decoys: 1,
            signal: 3.0,
        }
    }
}

impl SceneSpec {
    /// Feature map channels: one per class, one object-body channel, one
    /// clutter channel.
    pub fn channels(&self) -> usize {
        self.classes + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpeError::InvalidParameter(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.objects_min > self.objects_max {
            return bad(format!(
                "objects_min {} exceeds objects_max {}",
                self.objects_min, self.objects_max
            ));
        }
        if !(self.object_min_size >= 8.0 && self.object_min_size <= self.object_max_size) {
            return bad(format!(
                "object sizes must satisfy 8 <= min <= max, got {}..{}",
                self.object_min_size, self.object_max_size
            ));
        }
        if self.object_max_size > self.image_width.min(self.image_height) {
            return bad("objects do not fit in the image".into());
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale <= 1.0) {
            return bad(format!("spatial_scale must lie in (0,1], got {}", self.spatial_scale));
        }
        let cells = |px: f64| px * self.spatial_scale;
        if cells(self.image_width).fract() != 0.0 || cells(self.image_height).fract() != 0.0 {
            return bad("image size times spatial_scale must be whole cells".into());
        }
        if self.decoys > 0 && self.image_width.min(self.image_height) < BAND_THICKNESS.1 + 8.0 {
            return bad("image too small for decoy bands".into());
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return bad(format!("signal must be positive, got {}", self.signal));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.objects_max == 0 && self.background_boxes == 0 && self.decoys == 0 {
            return bad("scene would have no proposals".into());
        }
        if self.near_gt + self.part_boxes + self.partial_boxes + self.loose_boxes + self.background_boxes == 0
            && self.decoys == 0
        {
            return bad("scene would have no proposals".into());
        }
        Ok(())
    }

    pub fn image_dims(&self) -> ImageDims {
        ImageDims::new(self.image_width, self.image_height).expect("validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// What a proposal was generated from; kept for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    NearGt,
    Part,
    Partial,
    Loose,
    Background,
    Decoy,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub id: usize,
    pub features: FeatureMap,
    pub ground_truth: Vec<GroundTruth>,
    /// Discriminative sub-rectangle of each ground-truth object.
    pub parts: Vec<BBox>,
    pub proposals: Vec<BBox>,
    pub kinds: Vec<ProposalKind>,
    pub label: ImageLabel,
}

impl SyntheticScene {
    pub fn sample(&self) -> Sample {
        Sample {
            features: self.features.clone(),
            proposals: self.proposals.clone(),
        }
    }
}

fn clipped(img: &ImageDims, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BBox> {
    let (x0, y0) = (x0.max(0.0), y0.max(0.0));
    let (x1, y1) = (x1.min(img.width()), y1.min(img.height()));
    (x1 - x0 >= 4.0 && y1 - y0 >= 4.0).then(|| BBox::from_corners(x0, y0, x1, y1).expect("positive extent"))
}

/// Adds `value · coverage` to one feature plane, where coverage is the
/// fraction of each cell covered by `b`.
fn paint(plane: &mut [f64], cols: usize, scale: f64, b: &BBox, value: f64) {
    let [x0, y0, x1, y1] = b.corners().map(|v| v * scale);
    let rows = plane.len() / cols;
    let (r0, r1) = (y0.floor() as usize, (y1.ceil() as usize).min(rows));
    let (c0, c1) = (x0.floor() as usize, (x1.ceil() as usize).min(cols));
    for r in r0..r1 {
        let cov_y = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
        for c in c0..c1 {
            let cov_x = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
            plane[r * cols + c] += value * cov_x * cov_y;
        }
    }
}

/// Class signal of an object body outside its part.
const BODY_CLASS: f64 = 0.45;
/// Extra class signal inside the part.
const PART_CLASS: f64 = 0.55;
const BODY: f64 = 1.0;
const CLUTTER: f64 = 0.8;
const CLUTTER_CLASS: f64 = 0.2;
/// Extra body level of the last class, as a multiple of `BODY`.
const BODY_SPREAD: f64 = 2.0;
const BAND_THICKNESS: (f64, f64) = (36.0, 44.0);
const BAND_PATCH: (f64, f64) = (14.0, 26.0);

/// Body intensity differs per class so the channel-averaged map still
/// tells classes apart.
fn body_level(class_id: usize, classes: usize) -> f64 {
    BODY * (1.0 + BODY_SPREAD * class_id as f64 / (classes - 1) as f64)
}

/// Share of `b` covered by `other`.
fn covered(b: &BBox, other: &BBox) -> f64 {
    other.intersection(b).map_or(0.0, |i| i.area()) / b.area()
}

/// Paints one object-like region: class signal over `body`, extra class
/// signal over `part`, and a body level that stays flat across the part.
fn paint_object(values: &mut [f64], spec: &SceneSpec, cols: usize, class_id: usize, body: &BBox, part: &BBox) {
    let plane = values.len() / spec.channels();
    let (c, scale, g) = (spec.classes, spec.spatial_scale, spec.signal);
    let cls = &mut values[class_id * plane..(class_id + 1) * plane];
    paint(cls, cols, scale, body, g * BODY_CLASS);
    paint(cls, cols, scale, part, g * PART_CLASS);
    let level = &mut values[c * plane..(c + 1) * plane];
    paint(level, cols, scale, body, g * body_level(class_id, c));
    paint(level, cols, scale, part, -g * PART_CLASS);
}

/// Builds one scene; identical `(seed, spec)` give identical scenes.
pub fn generate_scene(seed: u64, id: usize, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = spec.image_dims();
    let c = spec.classes;

    let mut bands: Vec<(BBox, usize)> = Vec::with_capacity(spec.decoys);
    for _ in 0..spec.decoys {
        let th = rng.random_range(BAND_THICKNESS.0..=BAND_THICKNESS.1);
        let b = match rng.random_range(0..4) {
            0 => BBox::new(0.0, 0.0, img.width(), th)?,
            1 => BBox::new(0.0, img.height() - th, img.width(), th)?,
            2 => BBox::new(0.0, 0.0, th, img.height())?,
            _ => BBox::new(img.width() - th, 0.0, th, img.height())?,
        };
        bands.push((b, rng.random_range(0..c)));
    }
    let n_obj = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut ground_truth: Vec<GroundTruth> = Vec::with_capacity(n_obj);
    let mut parts = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        // placement retries keep objects mostly apart and off the bands
        let mut placed = None;
        for _ in 0..64 {
            let w = rng.random_range(spec.object_min_size..=spec.object_max_size);
            let h = rng.random_range(spec.object_min_size..=spec.object_max_size);
            let x = rng.random_range(0.0..=img.width() - w);
            let y = rng.random_range(0.0..=img.height() - h);
            let b = BBox::new(x, y, w, h)?;
            if ground_truth.iter().all(|g| g.bbox.iou(&b) < 0.05)
                && bands.iter().all(|(d, _)| d.intersection(&b).is_none())
            {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else { continue };
        let class_id = rng.random_range(0..c);
        // part: 30..45% of the object area, so IoU(part, object) < 0.5
        let frac = rng.random_range(0.30..0.45);
        let aspect = rng.random_range(0.55..0.85);
        let (pw, ph) = (b.w() * aspect, b.h() * frac / aspect);
        let px = b.x() + rng.random_range(0.0..=b.w() - pw);
        let py = b.y() + rng.random_range(0.0..=b.h() - ph);
        ground_truth.push(GroundTruth { bbox: b, class_id });
        parts.push(BBox::new(px, py, pw, ph)?);
    }

    let (rows, cols) = (
        (img.height() * spec.spatial_scale) as usize,
        (img.width() * spec.spatial_scale) as usize,
    );
    let plane = rows * cols;
    let mut values = vec![0.0; spec.channels() * plane];
    let scale = spec.spatial_scale;
    for (g, p) in ground_truth.iter().zip(&parts) {
        paint_object(&mut values, spec, cols, g.class_id, &g.bbox, p);
    }
    let mut patches = Vec::with_capacity(bands.len());
    for &(d, k) in &bands {
        let pw = rng.random_range(BAND_PATCH.0..=BAND_PATCH.1).min(d.w() - 2.0);
        let ph = rng.random_range(BAND_PATCH.0..=BAND_PATCH.1).min(d.h() - 2.0);
        let px = d.x() + rng.random_range(0.0..=d.w() - pw);
        let py = d.y() + rng.random_range(0.0..=d.h() - ph);
        let patch = BBox::new(px, py, pw, ph)?;
        paint_object(&mut values, spec, cols, k, &d, &patch);
        patches.push((d, patch));
    }
    for _ in 0..spec.distractors {
        let w = rng.random_range(12.0..=32.0);
        let h = rng.random_range(12.0..=32.0);
        let b = BBox::new(
            rng.random_range(0.0..=img.width() - w),
            rng.random_range(0.0..=img.height() - h),
            w,
            h,
        )?;
        let k = rng.random_range(0..c);
        paint(
            &mut values[(c + 1) * plane..(c + 2) * plane],
            cols,
            scale,
            &b,
            spec.signal * CLUTTER,
        );
        paint(
            &mut values[k * plane..(k + 1) * plane],
            cols,
            scale,
            &b,
            spec.signal * CLUTTER_CLASS,
        );
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| CpeError::InvalidParameter(e.to_string()))?;
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let features = FeatureMap::new(Tensor::new(vec![spec.channels(), rows, cols], values)?, scale)?;

    let mut proposals: Vec<(BBox, ProposalKind)> = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng, b: &BBox, f: f64| {
        let (dw, dh) = (b.w() * f, b.h() * f);
        clipped(
            &img,
            b.x() + rng.random_range(-dw..=dw),
            b.y() + rng.random_range(-dh..=dh),
            b.right() + rng.random_range(-dw..=dw),
            b.bottom() + rng.random_range(-dh..=dh),
        )
    };
    for (g, p) in ground_truth.iter().zip(&parts) {
        let b = &g.bbox;
        for _ in 0..spec.near_gt {
            proposals.extend(jitter(&mut rng, b, 0.08).map(|x| (x, ProposalKind::NearGt)));
        }
        for _ in 0..spec.part_boxes {
            proposals.extend(jitter(&mut rng, p, 0.05).map(|x| (x, ProposalKind::Part)));
        }
        for _ in 0..spec.partial_boxes {
            let fw = rng.random_range(0.4..0.7);
            let fh = rng.random_range(0.4..0.7);
            let x0 = b.x() + rng.random_range(0.0..=b.w() * (1.0 - fw));
            let y0 = b.y() + rng.random_range(0.0..=b.h() * (1.0 - fh));
            proposals
                .extend(clipped(&img, x0, y0, x0 + b.w() * fw, y0 + b.h() * fh).map(|x| (x, ProposalKind::Partial)));
        }
        for _ in 0..spec.loose_boxes {
            let gx = b.w() * rng.random_range(0.2..0.4);
            let gy = b.h() * rng.random_range(0.2..0.4);
            proposals.extend(
                clipped(&img, b.x() - gx, b.y() - gy, b.right() + gx, b.bottom() + gy)
                    .map(|x| (x, ProposalKind::Loose)),
            );
        }
    }
    // decoy proposals: the patch itself, and object-sized crops around it
    for (d, patch) in &patches {
        for _ in 0..2 {
            proposals.extend(jitter(&mut rng, patch, 0.05).map(|x| (x, ProposalKind::Decoy)));
        }
        for _ in 0..2 {
            let (cx, cy) = (patch.x() + patch.w() / 2.0, patch.y() + patch.h() / 2.0);
            let w = rng.random_range(0.6..=1.0) * d.w().clamp(30.0, 60.0);
            let h = rng.random_range(0.6..=1.0) * d.h().clamp(30.0, 60.0);
            let x0 = (cx - w * rng.random_range(0.3..0.7)).max(d.x());
            let y0 = (cy - h * rng.random_range(0.3..0.7)).max(d.y());
            proposals.extend(
                clipped(&img, x0, y0, (x0 + w).min(d.right()), (y0 + h).min(d.bottom()))
                    .map(|x| (x, ProposalKind::Decoy)),
            );
        }
    }
    let mut added = 0;
    for _ in 0..spec.background_boxes * 32 {
        if added == spec.background_boxes {
            break;
        }
        let w = rng.random_range(16.0..=56.0);
        let h = rng.random_range(16.0..=56.0);
        let b = BBox::new(
            rng.random_range(0.0..=img.width() - w),
            rng.random_range(0.0..=img.height() - h),
            w,
            h,
        )?;
        let away = ground_truth
            .iter()
            .map(|g| &g.bbox)
            .chain(bands.iter().map(|(d, _)| d))
            .all(|o| covered(&b, o) < 0.1);
        if away {
            proposals.push((b, ProposalKind::Background));
            added += 1;
        }
    }
    if proposals.is_empty() {
        return Err(CpeError::InvalidParameter("scene produced no proposals".into()));
    }
    proposals.shuffle(&mut rng);
    let label = ImageLabel::from_classes(c, ground_truth.iter().map(|g| g.class_id))?;
    Ok(SyntheticScene {
        id,
        features,
        ground_truth,
        parts,
        proposals: proposals.iter().map(|p| p.0).collect(),
        kinds: proposals.iter().map(|p| p.1).collect(),
        label,
    })
}

/// Scene `i` of a dataset uses its own seed derived from `(seed, i)`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}

pub fn generate_dataset(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(seed, i), i, spec))
        .collect()
}

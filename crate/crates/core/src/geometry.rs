//! World-coordinate geometry: bounding boxes, nested multi-resolution crop
//! sampling, per-patch coordinates, the fixed-centered baseline boxes, and
//! geometric augmentation.
//!
//! World coordinates are the pixel coordinate system of the finest (level 1)
//! plane. A level-`l` crop of `H x W` pixels spans an `l*H x l*W` world
//! region.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Axis-aligned rectangle in level-1 pixel coordinates, `(y_min, x_min)` to
/// `(y_max, x_max)`, min strictly below max on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldBBox {
    pub y_min: f64,
    pub x_min: f64,
    pub y_max: f64,
    pub x_max: f64,
}

impl WorldBBox {
    pub fn new(y_min: f64, x_min: f64, y_max: f64, x_max: f64) -> Result<Self> {
        if !(y_min < y_max && x_min < x_max) {
            return Err(Error::Contract(format!(
                "degenerate bbox: y [{y_min}, {y_max}], x [{x_min}, {x_max}]"
            )));
        }
        Ok(WorldBBox { y_min, x_min, y_max, x_max })
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.y_max - self.y_min, self.x_max - self.x_min)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.y_min + self.y_max), 0.5 * (self.x_min + self.x_max))
    }

    pub fn contains(&self, other: &WorldBBox) -> bool {
        self.y_min <= other.y_min
            && self.x_min <= other.x_min
            && self.y_max >= other.y_max
            && self.x_max >= other.x_max
    }

    /// Mirror about a vertical line `x = cx` (horizontal flip).
    pub fn mirror_x(&self, cx: f64) -> WorldBBox {
        WorldBBox {
            y_min: self.y_min,
            x_min: 2.0 * cx - self.x_max,
            y_max: self.y_max,
            x_max: 2.0 * cx - self.x_min,
        }
    }

    /// Mirror about a horizontal line `y = cy` (vertical flip).
    pub fn mirror_y(&self, cy: f64) -> WorldBBox {
        WorldBBox {
            y_min: 2.0 * cy - self.y_max,
            x_min: self.x_min,
            y_max: 2.0 * cy - self.y_min,
            x_max: self.x_max,
        }
    }
}

/// Resolution-level layout shared by a model and its data pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    /// Ordered downsampling factors, `levels[0]` finest, strictly increasing,
    /// first >= 1.
    pub levels: Vec<u32>,
    /// Per-level crop extent in pixels (identical across levels).
    pub crop_h: usize,
    pub crop_w: usize,
    pub channels: usize,
    pub patch: usize,
}

impl LevelSpec {
    pub fn new(levels: Vec<u32>, crop_h: usize, crop_w: usize, channels: usize, patch: usize) -> Result<Self> {
        if levels.is_empty() || levels[0] < 1 {
            return Err(Error::Contract("levels must be non-empty with first >= 1".into()));
        }
        if !levels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract(format!("levels must be strictly increasing: {levels:?}")));
        }
        if crop_h % patch != 0 || crop_w % patch != 0 {
            return Err(Error::Contract(format!(
                "crop {crop_h}x{crop_w} not divisible by patch {patch}"
            )));
        }
        Ok(LevelSpec { levels, crop_h, crop_w, channels, patch })
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Patch-grid extent per level: `(H/P, W/P)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.crop_h / self.patch, self.crop_w / self.patch)
    }

    pub fn tokens_per_level(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Minimum image extent able to host a nested crop set.
    pub fn min_image_extent(&self) -> (usize, usize) {
        let lmax = *self.levels.last().unwrap() as usize;
        (lmax * self.crop_h, lmax * self.crop_w)
    }
}

/// Per-token world coordinates for one level's patch grid, `(y, x)` pairs in
/// row-major grid order.
#[derive(Clone, Debug)]
pub struct CoordGrid {
    pub h: usize,
    pub w: usize,
    /// Flat `[h*w][2]` coordinate list.
    pub coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn to_tensor<E: crate::scalar::Scalar>(&self) -> Tensor<E> {
        let mut data = Vec::with_capacity(self.coords.len() * 2);
        for c in &self.coords {
            data.push(E::from_f64(c[0]));
            data.push(E::from_f64(c[1]));
        }
        Tensor::from_vec(vec![self.coords.len(), 2], data)
    }
}

/// Patch-center world coordinates for an `h x w` grid spanning `bbox`:
/// `p(i,j) = b_min + (i/(h-1), j/(w-1)) * (b_max - b_min)`. The extreme grid
/// coordinates land exactly on the bbox corners; a degenerate axis (h or w
/// of 1) uses the bbox midpoint since the formula's denominator vanishes.
pub fn patch_coords(bbox: &WorldBBox, h: usize, w: usize) -> Result<CoordGrid> {
    if h < 1 || w < 1 {
        return Err(Error::Contract(format!("patch grid {h}x{w} must be at least 1x1")));
    }
    WorldBBox::new(bbox.y_min, bbox.x_min, bbox.y_max, bbox.x_max)?;
    let ys: Vec<f64> = if h == 1 {
        vec![0.5 * (bbox.y_min + bbox.y_max)]
    } else {
        (0..h)
            .map(|i| bbox.y_min + (i as f64 / (h - 1) as f64) * (bbox.y_max - bbox.y_min))
            .collect()
    };
    let xs: Vec<f64> = if w == 1 {
        vec![0.5 * (bbox.x_min + bbox.x_max)]
    } else {
        (0..w)
            .map(|j| bbox.x_min + (j as f64 / (w - 1) as f64) * (bbox.x_max - bbox.x_min))
            .collect()
    };
    let mut coords = Vec::with_capacity(h * w);
    for &y in &ys {
        for &x in &xs {
            coords.push([y, x]);
        }
    }
    Ok(CoordGrid { h, w, coords })
}

/// Sample a nested bbox per level: the coarsest crop is placed uniformly
/// inside the image, each finer crop uniformly inside the next-coarser one
/// (not centered). All coordinates are integers.
pub fn sample_nested_bboxes(
    image_h: usize,
    image_w: usize,
    spec: &LevelSpec,
    rng: &mut impl Rng,
) -> Result<Vec<WorldBBox>> {
    let (min_h, min_w) = spec.min_image_extent();
    if image_h < min_h || image_w < min_w {
        return Err(Error::Contract(format!(
            "image {image_h}x{image_w} too small for levels {:?} with crop {}x{}: need at least {min_h}x{min_w}",
            spec.levels, spec.crop_h, spec.crop_w
        )));
    }
    let mut boxes_rev: Vec<WorldBBox> = Vec::with_capacity(spec.level_count());
    // coarsest first
    for (i, &l) in spec.levels.iter().enumerate().rev() {
        let eh = (l as usize * spec.crop_h) as i64;
        let ew = (l as usize * spec.crop_w) as i64;
        let (y0_lo, y0_hi, x0_lo, x0_hi) = if let Some(outer) = boxes_rev.last() {
            (
                outer.y_min as i64,
                outer.y_max as i64 - eh,
                outer.x_min as i64,
                outer.x_max as i64 - ew,
            )
        } else {
            (0, image_h as i64 - eh, 0, image_w as i64 - ew)
        };
        debug_assert!(y0_hi >= y0_lo && x0_hi >= x0_lo);
        let y0 = rng.gen_range(y0_lo..=y0_hi);
        let x0 = rng.gen_range(x0_lo..=x0_hi);
        boxes_rev.push(WorldBBox::new(
            y0 as f64,
            x0 as f64,
            (y0 + eh) as f64,
            (x0 + ew) as f64,
        )?);
        let _ = i;
    }
    boxes_rev.reverse();
    Ok(boxes_rev)
}

/// Fixed, centered baseline boxes: level `l` gets an origin-centered box of
/// extent `(l*H, l*W)`, identical for every sample and independent of where
/// the pixels actually came from.
pub fn naive_bboxes(spec: &LevelSpec) -> Vec<WorldBBox> {
    spec.levels
        .iter()
        .map(|&l| {
            let hh = 0.5 * (l as usize * spec.crop_h) as f64;
            let hw = 0.5 * (l as usize * spec.crop_w) as f64;
            WorldBBox { y_min: -hh, x_min: -hw, y_max: hh, x_max: hw }
        })
        .collect()
}

/// Add iid `N(0, sigma^2)` noise to each of the four coordinates of each box.
/// If the noise inverts an axis the whole box's noise is resampled.
pub fn perturb_bboxes(bboxes: &[WorldBBox], sigma: f64, rng: &mut impl Rng) -> Vec<WorldBBox> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return bboxes.to_vec();
    }
    bboxes
        .iter()
        .map(|b| loop {
            let n: [f64; 4] = std::array::from_fn(|_| {
                sigma * rng.sample::<f64, _>(StandardNormal)
            });
            let cand = WorldBBox {
                y_min: b.y_min + n[0],
                x_min: b.x_min + n[1],
                y_max: b.y_max + n[2],
                x_max: b.x_max + n[3],
            };
            if cand.y_min < cand.y_max && cand.x_min < cand.x_max {
                break cand;
            }
        })
        .collect()
}

/// One nested multi-resolution training sample: per-level crops (`[C, H, W]`
/// each) with their world boxes, the optional level-1 label crop, and the
/// optional image-global class.
#[derive(Clone, Debug)]
pub struct MultiResSample {
    pub spec: LevelSpec,
    pub crops: Vec<Tensor<f32>>,
    pub bboxes: Vec<WorldBBox>,
    pub labels: Option<Vec<u16>>,
    pub global_class: Option<u32>,
}

impl MultiResSample {
    pub fn validate(&self) -> Result<()> {
        if self.crops.len() != self.spec.level_count() || self.bboxes.len() != self.spec.level_count() {
            return Err(Error::Contract("sample level count mismatch".into()));
        }
        for (crop, _l) in self.crops.iter().zip(&self.spec.levels) {
            let want = [self.spec.channels, self.spec.crop_h, self.spec.crop_w];
            if crop.shape() != want {
                return Err(Error::Contract(format!(
                    "crop shape {:?} != {:?}",
                    crop.shape(),
                    want
                )));
            }
        }
        if let Some(lab) = &self.labels {
            if lab.len() != self.spec.crop_h * self.spec.crop_w {
                return Err(Error::Contract("label crop extent mismatch".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentFlags {
    pub flips: bool,
    pub intensity_jitter: bool,
    pub bbox_jitter: bool,
    /// Intensity gain range (multiplicative), default `[0.9, 1.1]`.
    pub gain: (f64, f64),
    /// Intensity offset range (additive), default `[-0.05, 0.05]`.
    pub offset: (f64, f64),
    /// Bbox shift range in pixels, default `[-2, 2]`.
    pub shift: (f64, f64),
    /// Bbox scale range about the box center, default `[0.98, 1.02]`.
    pub scale: (f64, f64),
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flips: true,
            intensity_jitter: true,
            bbox_jitter: true,
            gain: (0.9, 1.1),
            offset: (-0.05, 0.05),
            shift: (-2.0, 2.0),
            scale: (0.98, 1.02),
        }
    }
}

impl AugmentFlags {
    pub fn off() -> Self {
        AugmentFlags { flips: false, intensity_jitter: false, bbox_jitter: false, ..Default::default() }
    }
}

fn flip_crop_x(crop: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (crop.shape()[0], crop.shape()[1], crop.shape()[2]);
    let mut out = crop.clone();
    {
        let od = out.data_mut();
        for ci in 0..c {
            for y in 0..h {
                let row = ci * h * w + y * w;
                od[row..row + w].reverse();
            }
        }
    }
    out
}

fn flip_crop_y(crop: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (crop.shape()[0], crop.shape()[1], crop.shape()[2]);
    let mut out = Tensor::zeros(crop.shape());
    {
        let od = out.data_mut();
        for ci in 0..c {
            for y in 0..h {
                let src = ci * h * w + (h - 1 - y) * w;
                od[ci * h * w + y * w..ci * h * w + (y + 1) * w]
                    .copy_from_slice(&crop.data()[src..src + w]);
            }
        }
    }
    out
}

fn flip_labels_x(labels: &[u16], h: usize, w: usize) -> Vec<u16> {
    let mut out = labels.to_vec();
    for y in 0..h {
        out[y * w..(y + 1) * w].reverse();
    }
    out
}

fn flip_labels_y(labels: &[u16], h: usize, w: usize) -> Vec<u16> {
    let mut out = vec![0u16; labels.len()];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&labels[(h - 1 - y) * w..(h - y) * w]);
    }
    out
}

/// Geometric + photometric augmentation of a nested sample.
///
/// Flips are drawn once and applied jointly to every level, the label mask,
/// and the bounding boxes — the boxes are mirrored about the coarsest box's
/// midline so cross-scale world alignment is preserved exactly. Intensity
/// jitter applies one gain/offset pair uniformly across levels. Bbox jitter
/// perturbs coordinates only (independently per level), leaving pixels alone.
pub fn augment_sample(
    sample: &MultiResSample,
    rng: &mut impl Rng,
    flags: &AugmentFlags,
) -> MultiResSample {
    let mut out = sample.clone();
    let (h, w) = (sample.spec.crop_h, sample.spec.crop_w);
    if flags.flips {
        let flip_h = rng.gen_bool(0.5);
        let flip_v = rng.gen_bool(0.5);
        let outer = *out.bboxes.last().unwrap();
        let (cy, cx) = outer.center();
        if flip_h {
            out.crops = out.crops.iter().map(flip_crop_x).collect();
            out.bboxes = out.bboxes.iter().map(|b| b.mirror_x(cx)).collect();
            if let Some(lab) = &out.labels {
                out.labels = Some(flip_labels_x(lab, h, w));
            }
        }
        if flip_v {
            out.crops = out.crops.iter().map(flip_crop_y).collect();
            out.bboxes = out.bboxes.iter().map(|b| b.mirror_y(cy)).collect();
            if let Some(lab) = &out.labels {
                out.labels = Some(flip_labels_y(lab, h, w));
            }
        }
    }
    if flags.intensity_jitter {
        let gain = rng.gen_range(flags.gain.0..flags.gain.1) as f32;
        let offset = rng.gen_range(flags.offset.0..flags.offset.1) as f32;
        for crop in &mut out.crops {
            for v in crop.data_mut() {
                *v = *v * gain + offset;
            }
        }
    }
    if flags.bbox_jitter {
        for b in &mut out.bboxes {
            let dy = rng.gen_range(flags.shift.0..flags.shift.1);
            let dx = rng.gen_range(flags.shift.0..flags.shift.1);
            let s = rng.gen_range(flags.scale.0..flags.scale.1);
            let (cy, cx) = b.center();
            let (eh, ew) = b.extent();
            let (hh, hw) = (0.5 * eh * s, 0.5 * ew * s);
            *b = WorldBBox {
                y_min: cy + dy - hh,
                x_min: cx + dx - hw,
                y_max: cy + dy + hh,
                x_max: cx + dx + hw,
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn spec(levels: Vec<u32>, crop: usize) -> LevelSpec {
        LevelSpec::new(levels, crop, crop, 1, 8).unwrap()
    }

    #[test]
    fn patch_coords_endpoints_on_corners() {
        let b = WorldBBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let g = patch_coords(&b, 2, 2).unwrap();
        assert_eq!(g.coords, vec![[0.0, 0.0], [0.0, 32.0], [32.0, 0.0], [32.0, 32.0]]);
        let b2 = WorldBBox::new(10.0, 20.0, 74.0, 84.0).unwrap();
        let g2 = patch_coords(&b2, 2, 2).unwrap();
        assert_eq!(g2.coords, vec![[10.0, 20.0], [10.0, 84.0], [74.0, 20.0], [74.0, 84.0]]);
    }

    #[test]
    fn patch_coords_degenerate_axis_uses_midpoint() {
        let b = WorldBBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let g = patch_coords(&b, 1, 1).unwrap();
        assert_eq!(g.coords, vec![[16.0, 16.0]]);
    }

    #[test]
    fn degenerate_bbox_is_rejected() {
        assert!(WorldBBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(WorldBBox::new(5.0, 0.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn nested_boxes_have_exact_extents_and_containment() {
        let sp = spec(vec![1, 4], 64);
        let mut rng = substream(5, "geo");
        for _ in 0..200 {
            let bs = sample_nested_bboxes(512, 512, &sp, &mut rng).unwrap();
            assert_eq!(bs.len(), 2);
            assert_eq!(bs[0].extent(), (64.0, 64.0));
            assert_eq!(bs[1].extent(), (256.0, 256.0));
            assert!(bs[1].contains(&bs[0]));
            for b in &bs {
                assert!(b.y_min >= 0.0 && b.x_min >= 0.0);
                assert!(b.y_max <= 512.0 && b.x_max <= 512.0);
                assert_eq!(b.y_min.fract(), 0.0);
            }
        }
    }

    #[test]
    fn too_small_image_reports_required_extent() {
        let sp = spec(vec![1, 4], 64);
        let err = sample_nested_bboxes(128, 128, &sp, &mut substream(0, "x")).unwrap_err();
        assert!(err.to_string().contains("256x256"), "{err}");
    }

    #[test]
    fn naive_boxes_are_fixed_and_centered() {
        let sp = spec(vec![1, 4], 64);
        let a = naive_bboxes(&sp);
        let b = naive_bboxes(&sp);
        assert_eq!(a, b);
        assert_eq!(a[0], WorldBBox { y_min: -32.0, x_min: -32.0, y_max: 32.0, x_max: 32.0 });
        assert_eq!(a[1], WorldBBox { y_min: -128.0, x_min: -128.0, y_max: 128.0, x_max: 128.0 });
    }

    #[test]
    fn perturb_sigma_zero_is_identity_and_invariants_hold() {
        let sp = spec(vec![1, 4], 64);
        let bs = naive_bboxes(&sp);
        let mut rng = substream(6, "pert");
        assert_eq!(perturb_bboxes(&bs, 0.0, &mut rng), bs);
        for _ in 0..500 {
            for b in perturb_bboxes(&bs, 40.0, &mut rng) {
                assert!(b.y_min < b.y_max && b.x_min < b.x_max);
            }
        }
    }

    fn toy_sample() -> MultiResSample {
        let sp = spec(vec![1, 2], 16);
        let mut rng = substream(7, "aug");
        let crops = vec![
            Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng),
            Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng),
        ];
        let bboxes = vec![
            WorldBBox::new(4.0, 6.0, 20.0, 22.0).unwrap(),
            WorldBBox::new(0.0, 0.0, 32.0, 32.0).unwrap(),
        ];
        let labels: Vec<u16> = (0..256).map(|i| (i % 3) as u16).collect();
        MultiResSample { spec: sp, crops, bboxes, labels: Some(labels), global_class: Some(2) }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let s = toy_sample();
        let mut rng = substream(8, "aug-id");
        let out = augment_sample(&s, &mut rng, &AugmentFlags::off());
        assert_eq!(out.bboxes, s.bboxes);
        for (a, b) in out.crops.iter().zip(&s.crops) {
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn double_flip_restores_pixels_exactly() {
        let s = toy_sample();
        let f1: Vec<Tensor<f32>> = s.crops.iter().map(flip_crop_x).collect();
        let f2: Vec<Tensor<f32>> = f1.iter().map(flip_crop_x).collect();
        for (a, b) in f2.iter().zip(&s.crops) {
            assert!(a.bitwise_eq(b));
        }
        let g1: Vec<Tensor<f32>> = s.crops.iter().map(flip_crop_y).collect();
        let g2: Vec<Tensor<f32>> = g1.iter().map(flip_crop_y).collect();
        for (a, b) in g2.iter().zip(&s.crops) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn horizontal_flip_mirrors_patch_coords_about_outer_midline() {
        let s = toy_sample();
        let (_, cx) = s.bboxes.last().unwrap().center();
        let mirrored = s.bboxes[0].mirror_x(cx);
        let orig = patch_coords(&s.bboxes[0], 2, 2).unwrap();
        let flip = patch_coords(&mirrored, 2, 2).unwrap();
        // x coordinates mirror; the grid ordering reverses within each row
        for (i, c) in orig.coords.iter().enumerate() {
            let row = i / 2;
            let col = i % 2;
            let mirrored_c = flip.coords[row * 2 + (1 - col)];
            assert!((mirrored_c[0] - c[0]).abs() < 1e-12);
            assert!((mirrored_c[1] - (2.0 * cx - c[1])).abs() < 1e-12);
        }
    }
}

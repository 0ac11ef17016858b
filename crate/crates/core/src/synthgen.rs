//! Procedural concentric-ring benchmark generator.
//!
//! Scenes are single-channel images in `[0, 1]`: a low-amplitude Perlin
//! background, `n` concentric ring bands whose boundaries are radially
//! displaced by an angle-parameterized Perlin field, and small disk "cells"
//! scattered on the rings. Inner and outer cells are rendered identically;
//! a cell's class is decided purely by its distorted radial index (inner if
//! strictly inside the innermost half of rings), so classification requires
//! the global ring structure, which a fine-resolution crop cannot see.
//! The ring count doubles as the image-global attribute for linear probing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::pyramid::{build_pyramid, BuildOptions};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Perlin gradient noise
// ---------------------------------------------------------------------------

/// Classic 2D gradient noise: shuffled 256-entry permutation table, unit
/// lattice gradients, quintic fade, bilinear gradient-dot interpolation.
/// Octaves are summed with `persistence` falloff and renormalized so values
/// stay within `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct PerlinField {
    perm: [u8; 256],
    grads: [(f64, f64); 256],
    pub octaves: u32,
    pub base_freq: f64,
    pub persistence: f64,
}

impl PerlinField {
    pub fn new(rng: &mut impl Rng, octaves: u32, base_freq: f64, persistence: f64) -> Self {
        let mut perm: Vec<u8> = (0..=255).collect();
        perm.shuffle(rng);
        let mut grads = [(0.0, 0.0); 256];
        for g in grads.iter_mut() {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            *g = (theta.cos(), theta.sin());
        }
        PerlinField {
            perm: perm.try_into().unwrap(),
            grads,
            octaves,
            base_freq,
            persistence,
        }
    }

    fn hash(&self, ix: i64, iy: i64) -> usize {
        let a = self.perm[(ix & 255) as usize] as usize;
        self.perm[(a as i64 ^ (iy & 255)) as usize & 255] as usize
    }

    fn grad_dot(&self, ix: i64, iy: i64, x: f64, y: f64) -> f64 {
        let (gx, gy) = self.grads[self.hash(ix, iy)];
        gx * (x - ix as f64) + gy * (y - iy as f64)
    }

    /// Single-octave sample in roughly `[-sqrt(2)/2, sqrt(2)/2]`.
    fn raw(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor() as i64;
        let y0 = y.floor() as i64;
        let sx = fade(x - x0 as f64);
        let sy = fade(y - y0 as f64);
        let n00 = self.grad_dot(x0, y0, x, y);
        let n10 = self.grad_dot(x0 + 1, y0, x, y);
        let n01 = self.grad_dot(x0, y0 + 1, x, y);
        let n11 = self.grad_dot(x0 + 1, y0 + 1, x, y);
        lerp(lerp(n00, n10, sx), lerp(n01, n11, sx), sy)
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Octave-summed, renormalized gradient noise in `[-1, 1]`.
pub fn perlin2(x: f64, y: f64, field: &PerlinField) -> f64 {
    let mut value = 0.0;
    let mut amp = 1.0;
    let mut freq = field.base_freq;
    let mut norm = 0.0;
    for _ in 0..field.octaves {
        value += amp * field.raw(x * freq, y * freq);
        norm += amp;
        amp *= field.persistence;
        freq *= 2.0;
    }
    // single-octave raw range is +-sqrt(2)/2 for unit gradients
    (value / (norm * std::f64::consts::FRAC_1_SQRT_2)).clamp(-1.0, 1.0)
}

// ---------------------------------------------------------------------------
// Ring scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RingSceneParams {
    pub extent: usize,
    pub center: (f64, f64),
    pub ring_count: u32,
    pub base_radii: Vec<f64>,
    pub thickness: f64,
    pub ring_gain: f64,
    /// Radial displacement amplitude in pixels.
    pub amplitude: f64,
    /// Radius of the angle-parameterization circle in noise space; larger
    /// means more wobbles around the ring.
    pub angle_freq: f64,
    /// Cells per pixel of ring circumference.
    pub cell_density: f64,
    pub cell_radius: (f64, f64),
    pub cell_intensity: f64,
    pub bg_base: f64,
    pub bg_amplitude: f64,
    /// Background noise spatial scale (lattice units per pixel).
    pub bg_scale: f64,
    pub seed: u64,
}

/// Scene parameter distribution used by dataset generation. Radii are spaced
/// evenly between per-scene jittered extremes so absolute radius never maps
/// to a class on its own.
pub fn draw_scene_params(extent: usize, seed: u64) -> RingSceneParams {
    let mut rng = substream(seed, "scene-params");
    let half = extent as f64 / 2.0;
    let cy = half + rng.gen_range(-10.0..10.0);
    let cx = half + rng.gen_range(-10.0..10.0);
    let ring_count = *[2u32, 3, 4].choose(&mut rng).unwrap();
    let scale = extent as f64 / 512.0;
    let rmin = rng.gen_range(72.0..82.0) * scale;
    let rmax = rng.gen_range(205.0..215.0) * scale;
    let base_radii: Vec<f64> = (0..ring_count)
        .map(|i| {
            if ring_count == 1 {
                rmin
            } else {
                rmin + (rmax - rmin) * i as f64 / (ring_count - 1) as f64
            }
        })
        .collect();
    RingSceneParams {
        extent,
        center: (cy, cx),
        ring_count,
        base_radii,
        thickness: 2.5 * scale,
        ring_gain: 0.22,
        amplitude: 10.0 * scale,
        angle_freq: 2.5,
        cell_density: 0.016 / scale,
        cell_radius: (4.5 * scale, 7.0 * scale),
        cell_intensity: 0.92,
        bg_base: 0.38,
        bg_amplitude: 0.10,
        bg_scale: 1.0 / (48.0 * scale),
        seed,
    }
}

fn feasible(p: &RingSceneParams) -> bool {
    let (cy, cx) = p.center;
    let margin = p.base_radii.last().copied().unwrap_or(0.0)
        + p.amplitude
        + p.cell_radius.1
        + 2.0;
    let fits = cy - margin >= 0.0
        && cx - margin >= 0.0
        && cy + margin < p.extent as f64
        && cx + margin < p.extent as f64;
    // shared displacement field keeps ring spacing constant along each ray,
    // so overlap reduces to cell clearance between adjacent base radii
    let spacing_ok = p
        .base_radii
        .windows(2)
        .all(|w| w[1] - w[0] > 2.0 * p.cell_radius.1 + 1.0);
    fits && spacing_ok
}

#[derive(Clone, Debug)]
struct Cell {
    y: f64,
    x: f64,
    r: f64,
    class: u16,
}

/// Rendered scene: image `[1, E, E]` in `[0,1]`, label plane
/// (0 background, 1 outer cell, 2 inner cell), and the ring count as the
/// image-global class. `cells` lists `(y, x, radius, class)` per cell.
pub struct Scene {
    pub image: Tensor<f32>,
    pub labels: Vec<u16>,
    pub ring_count: u32,
    pub cells: Vec<(f64, f64, f64, u16)>,
}

pub fn generate_scene(params: &RingSceneParams) -> Result<Scene> {
    let mut p = params.clone();
    for _attempt in 0..=5 {
        if feasible(&p) {
            return Ok(render_scene(&p));
        }
        p.amplitude *= 0.5;
    }
    Err(Error::Contract(format!(
        "infeasible ring scene even after amplitude reduction: radii {:?} in extent {}",
        p.base_radii, p.extent
    )))
}

/// Displacement lookup over angle, shared by all rings of a scene.
struct AngleTable {
    values: Vec<f64>,
}

impl AngleTable {
    fn build(field: &PerlinField, freq: f64, amplitude: f64, bins: usize) -> Self {
        let values = (0..bins)
            .map(|i| {
                let phi = std::f64::consts::TAU * i as f64 / bins as f64;
                amplitude * perlin2(freq * phi.cos(), freq * phi.sin(), field)
            })
            .collect();
        AngleTable { values }
    }

    fn at(&self, phi: f64) -> f64 {
        let bins = self.values.len() as f64;
        let t = (phi.rem_euclid(std::f64::consts::TAU)) / std::f64::consts::TAU * bins;
        let i0 = (t.floor() as usize) % self.values.len();
        let i1 = (i0 + 1) % self.values.len();
        lerp(self.values[i0], self.values[i1], t - t.floor())
    }
}

fn render_scene(p: &RingSceneParams) -> Scene {
    let e = p.extent;
    let mut rng = substream(p.seed, "scene-render");
    let ring_field = PerlinField::new(&mut rng, 2, 1.0, 0.5);
    let bg_field = PerlinField::new(&mut rng, 2, 1.0, 0.5);
    let table = AngleTable::build(&ring_field, p.angle_freq, p.amplitude, 4096);
    let (cy, cx) = p.center;

    // scatter cells on rings, dart-throwing for clearance
    let mut cells: Vec<Cell> = Vec::new();
    let inner_half = (p.ring_count / 2) as usize;
    for (j, &rj) in p.base_radii.iter().enumerate() {
        let count = ((p.cell_density * std::f64::consts::TAU * rj).round() as usize).clamp(4, 48);
        let class = if j < inner_half { 2u16 } else { 1u16 };
        let mut placed = 0;
        let mut tries = 0;
        while placed < count && tries < count * 60 {
            tries += 1;
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = rng.gen_range(p.cell_radius.0..p.cell_radius.1);
            // centers sit exactly on the displaced boundary so the strict
            // radial-index rule assigns ring j unambiguously
            let rho = rj + table.at(phi);
            let y = cy + rho * phi.sin();
            let x = cx + rho * phi.cos();
            let clear = cells
                .iter()
                .all(|c| (c.y - y).powi(2) + (c.x - x).powi(2) > (c.r + rad + 3.0).powi(2));
            if clear {
                cells.push(Cell { y, x, r: rad, class });
                placed += 1;
            }
        }
    }

    // paint background + ring bands
    let mut img = vec![0.0f32; e * e];
    let mut labels = vec![0u16; e * e];
    let two_thick2 = 2.0 * p.thickness * p.thickness;
    for yy in 0..e {
        for xx in 0..e {
            let (dy, dx) = (yy as f64 - cy, xx as f64 - cx);
            let rho = (dy * dy + dx * dx).sqrt();
            let phi = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let d = table.at(phi);
            let mut v = p.bg_base
                + p.bg_amplitude
                    * perlin2(xx as f64 * p.bg_scale, yy as f64 * p.bg_scale, &bg_field);
            for &rj in &p.base_radii {
                let t = rho - (rj + d);
                if t.abs() < 4.0 * p.thickness {
                    v += p.ring_gain * (-t * t / two_thick2).exp();
                }
            }
            img[yy * e + xx] = v.clamp(0.0, 1.0) as f32;
        }
    }

    // paint cells last; label support is dist <= r, rendering uses a 1 px
    // coverage ramp so both stay aligned
    for c in &cells {
        let y0 = (c.y - c.r - 1.0).floor().max(0.0) as usize;
        let y1 = ((c.y + c.r + 1.0).ceil() as usize).min(e - 1);
        let x0 = (c.x - c.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((c.x + c.r + 1.0).ceil() as usize).min(e - 1);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let dist = ((yy as f64 - c.y).powi(2) + (xx as f64 - c.x).powi(2)).sqrt();
                let cover = (c.r - dist + 0.5).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let idx = yy * e + xx;
                    let v = img[idx] as f64;
                    img[idx] = (v + (p.cell_intensity - v) * cover).clamp(0.0, 1.0) as f32;
                    if dist <= c.r {
                        labels[idx] = c.class;
                    }
                }
            }
        }
    }

    Scene {
        image: Tensor::from_vec(vec![1, e, e], img),
        labels,
        ring_count: p.ring_count,
        cells: cells.into_iter().map(|c| (c.y, c.x, c.r, c.class)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub extent: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub levels: Vec<u32>,
    pub chunk: usize,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            extent: 512,
            n_train: 300,
            n_val: 40,
            n_test: 40,
            levels: vec![1, 4],
            chunk: crate::pyramid::DEFAULT_CHUNK,
            master_seed: 0,
        }
    }
}

/// Generate and ingest all three splits under `root/<split>/img_<i>/`.
/// Per-image seeds derive from the master seed, so identical configs yield
/// bit-identical trees.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig, png_previews: usize) -> Result<()> {
    for (split, n) in [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)] {
        for i in 0..n {
            let seed_name = format!("img/{split}/{i}");
            let mut seed_rng = substream(cfg.master_seed, &seed_name);
            let img_seed: u64 = seed_rng.gen();
            let params = draw_scene_params(cfg.extent, img_seed);
            let scene = generate_scene(&params)?;
            let id = format!("img_{i:05}");
            let dir = root.join(split).join(&id);
            build_pyramid(
                &dir,
                &scene.image,
                Some(&scene.labels),
                &BuildOptions {
                    image_id: id.clone(),
                    levels: cfg.levels.clone(),
                    chunk: cfg.chunk,
                    global_class: Some(scene.ring_count),
                    split: split.to_string(),
                },
            )?;
            if i < png_previews {
                write_preview(&dir, &scene)?;
            }
        }
    }
    Ok(())
}

/// Grayscale PNG of the image plus a color-coded label overlay.
pub fn write_preview(dir: &Path, scene: &Scene) -> Result<()> {
    let e = scene.image.shape()[1];
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0) as u8;
    let gray: Vec<u8> = scene.image.data().iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(e as u32, e as u32, gray)
        .ok_or_else(|| Error::Msg("preview buffer size mismatch".into()))?;
    let path = dir.join("preview.png");
    img.save(&path)
        .map_err(|err| Error::Msg(format!("writing {}: {err}", path.display())))?;
    let mut rgb = Vec::with_capacity(e * e * 3);
    for (v, lab) in scene.image.data().iter().zip(&scene.labels) {
        let g = to_u8(*v);
        match lab {
            1 => rgb.extend_from_slice(&[255, g / 2, g / 2]),
            2 => rgb.extend_from_slice(&[g / 2, g / 2, 255]),
            _ => rgb.extend_from_slice(&[g, g, g]),
        }
    }
    let overlay = image::RgbImage::from_raw(e as u32, e as u32, rgb)
        .ok_or_else(|| Error::Msg("overlay buffer size mismatch".into()))?;
    let path = dir.join("preview_labels.png");
    overlay
        .save(&path)
        .map_err(|err| Error::Msg(format!("writing {}: {err}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perlin_zero_at_integer_lattice_single_octave() {
        let mut rng = substream(1, "perlin");
        let field = PerlinField::new(&mut rng, 1, 1.0, 0.5);
        for (x, y) in [(0.0, 0.0), (3.0, -5.0), (120.0, 7.0)] {
            assert_eq!(field.raw(x, y), 0.0, "at ({x},{y})");
            assert_eq!(perlin2(x, y, &field), 0.0);
        }
    }

    #[test]
    fn perlin_is_deterministic_and_bounded() {
        let mut r1 = substream(2, "perlin");
        let mut r2 = substream(2, "perlin");
        let f1 = PerlinField::new(&mut r1, 3, 1.0, 0.5);
        let f2 = PerlinField::new(&mut r2, 3, 1.0, 0.5);
        let mut rng = substream(3, "pts");
        let mut mean = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let x = rng.gen_range(-100.0..100.0);
            let y = rng.gen_range(-100.0..100.0);
            let v = perlin2(x, y, &f1);
            assert_eq!(v, perlin2(x, y, &f2));
            assert!((-1.0..=1.0).contains(&v), "out of range: {v}");
            mean += v;
        }
        mean /= n as f64;
        assert!(mean.abs() < 0.05, "sample mean {mean}");
    }

    #[test]
    fn undistorted_labels_follow_radial_rule() {
        let mut p = draw_scene_params(512, 99);
        p.amplitude = 0.0;
        let scene = generate_scene(&p).unwrap();
        let half = (p.ring_count / 2) as usize;
        let threshold = p.base_radii[half.min(p.base_radii.len() - 1)];
        for &(y, x, _, class) in &scene.cells {
            let rho = ((y - p.center.0).powi(2) + (x - p.center.1).powi(2)).sqrt();
            let idx = p.base_radii.iter().filter(|&&rj| rj < rho - 1e-9).count();
            let expect = if idx < half { 2 } else { 1 };
            assert_eq!(class, expect, "cell at rho {rho}, idx {idx}");
            if class == 2 {
                assert!(rho < threshold + 2.0);
            }
        }
    }

    #[test]
    fn labels_are_within_class_set_and_scene_reproducible() {
        let p = draw_scene_params(256, 7);
        let a = generate_scene(&p).unwrap();
        let b = generate_scene(&p).unwrap();
        assert!(a.image.bitwise_eq(&b.image));
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.iter().all(|&l| l <= 2));
        assert!(a.labels.iter().any(|&l| l == 1));
        assert!(a.labels.iter().any(|&l| l == 2));
    }

    #[test]
    fn infeasible_params_fail_after_retries() {
        let mut p = draw_scene_params(128, 3);
        p.base_radii = vec![100.0, 101.0]; // violates cell clearance
        p.cell_radius = (4.0, 6.0);
        assert!(generate_scene(&p).is_err());
    }
}

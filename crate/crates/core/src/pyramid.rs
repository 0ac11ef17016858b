//! Chunked on-disk multi-resolution image store.
//!
//! One directory per image:
//!
//! ```text
//! <image_id>/
//!   meta        UTF-8 `key = value` lines
//!   L<l>.bin    level-l image plane, f32 little-endian, chunked
//!   labels.bin  level-1 class ids, u16 little-endian, same chunking
//! ```
//!
//! Planes are tiled into fixed-extent chunks stored in row-major chunk order;
//! within a chunk the layout is `[C, chunk_h, chunk_w]` row-major. Border
//! chunks are zero-padded to full extent, so every chunk has the same byte
//! size and offsets are computable. Level `l` has plane extent
//! `ceil(extent / l)` per axis and is produced by non-overlapping `l x l`
//! mean pooling of level 1 (labels are never downsampled).

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::geometry::{naive_bboxes, sample_nested_bboxes, LevelSpec, MultiResSample, WorldBBox};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_CHUNK: usize = 256;

/// Bounding-box mode for emitted samples: true world coordinates or the
/// fixed-centered baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BBoxMode {
    True,
    Naive,
}

impl std::str::FromStr for BBoxMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(BBoxMode::True),
            "naive" => Ok(BBoxMode::Naive),
            other => Err(Error::Parse {
                what: "bbox mode".into(),
                detail: format!("expected 'true' or 'naive', got '{other}'"),
            }),
        }
    }
}

impl std::fmt::Display for BBoxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BBoxMode::True => "true",
            BBoxMode::Naive => "naive",
        })
    }
}

#[derive(Clone, Debug)]
pub struct PyramidMeta {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub levels: Vec<u32>,
    pub chunk: usize,
    pub has_labels: bool,
    pub global_class: Option<u32>,
    pub split: String,
    /// Directory holding this image's files.
    pub dir: PathBuf,
}

impl PyramidMeta {
    /// Plane extent at a level: `ceil(extent / l)`.
    pub fn plane_extent(&self, level: u32) -> (usize, usize) {
        let l = level as usize;
        (self.height.div_ceil(l), self.width.div_ceil(l))
    }

    fn level_file(&self, level: u32) -> PathBuf {
        self.dir.join(format!("L{level}.bin"))
    }

    fn labels_file(&self) -> PathBuf {
        self.dir.join("labels.bin")
    }
}

/// Chunk layout for one stored plane; all offsets are computable because
/// border chunks are padded to full extent.
#[derive(Clone, Copy, Debug)]
pub struct ChunkIndex {
    pub plane_h: usize,
    pub plane_w: usize,
    pub channels: usize,
    pub chunk: usize,
    pub elem_bytes: usize,
}

impl ChunkIndex {
    pub fn grid(&self) -> (usize, usize) {
        (self.plane_h.div_ceil(self.chunk), self.plane_w.div_ceil(self.chunk))
    }

    pub fn chunk_bytes(&self) -> usize {
        self.channels * self.chunk * self.chunk * self.elem_bytes
    }

    /// Byte offset & length of chunk `(row, col)` within the plane file.
    pub fn locate(&self, crow: usize, ccol: usize) -> (u64, usize) {
        let (_, gcols) = self.grid();
        let idx = crow * gcols + ccol;
        ((idx * self.chunk_bytes()) as u64, self.chunk_bytes())
    }

    pub fn file_len(&self) -> u64 {
        let (gr, gc) = self.grid();
        (gr * gc * self.chunk_bytes()) as u64
    }
}

fn write_kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    out.push_str(&format!("{key} = {value}\n"));
}

fn meta_to_string(meta: &PyramidMeta) -> String {
    let mut s = String::new();
    write_kv(&mut s, "format_version", crate::FORMAT_VERSION);
    write_kv(&mut s, "image_id", &meta.image_id);
    write_kv(&mut s, "height", meta.height);
    write_kv(&mut s, "width", meta.width);
    write_kv(&mut s, "channels", meta.channels);
    write_kv(
        &mut s,
        "levels",
        meta.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
    );
    write_kv(&mut s, "chunk", meta.chunk);
    write_kv(&mut s, "dtype", "f32le");
    write_kv(&mut s, "has_labels", meta.has_labels);
    if let Some(c) = meta.global_class {
        write_kv(&mut s, "global_class", c);
    }
    write_kv(&mut s, "split", &meta.split);
    s
}

pub fn parse_meta(dir: &Path) -> Result<PyramidMeta> {
    let path = dir.join("meta");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: format!("meta file {}", path.display()),
            detail: format!("bad line: {line}"),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k).cloned().ok_or_else(|| Error::Parse {
            what: format!("meta file {}", path.display()),
            detail: format!("missing key {k}"),
        })
    };
    let parse_n = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Parse {
            what: format!("meta file {}", path.display()),
            detail: format!("bad integer for {k}"),
        })
    };
    let levels: Vec<u32> = get("levels")?
        .split(',')
        .map(|t| t.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            what: format!("meta file {}", path.display()),
            detail: "bad levels list".into(),
        })?;
    Ok(PyramidMeta {
        image_id: get("image_id")?,
        height: parse_n("height")?,
        width: parse_n("width")?,
        channels: parse_n("channels")?,
        levels,
        chunk: parse_n("chunk")?,
        has_labels: get("has_labels")? == "true",
        global_class: kv.get("global_class").and_then(|v| v.parse().ok()),
        split: get("split")?,
        dir: dir.to_path_buf(),
    })
}

fn chunk_plane_f32(plane: &[f32], c: usize, h: usize, w: usize, chunk: usize) -> Vec<u8> {
    let (gr, gc) = (h.div_ceil(chunk), w.div_ceil(chunk));
    let mut out = Vec::with_capacity(gr * gc * c * chunk * chunk * 4);
    for crow in 0..gr {
        for ccol in 0..gc {
            for ci in 0..c {
                for y in 0..chunk {
                    for x in 0..chunk {
                        let (py, px) = (crow * chunk + y, ccol * chunk + x);
                        let v = if py < h && px < w { plane[(ci * h + py) * w + px] } else { 0.0 };
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

fn chunk_plane_u16(plane: &[u16], h: usize, w: usize, chunk: usize) -> Vec<u8> {
    let (gr, gc) = (h.div_ceil(chunk), w.div_ceil(chunk));
    let mut out = Vec::with_capacity(gr * gc * chunk * chunk * 2);
    for crow in 0..gr {
        for ccol in 0..gc {
            for y in 0..chunk {
                for x in 0..chunk {
                    let (py, px) = (crow * chunk + y, ccol * chunk + x);
                    let v = if py < h && px < w { plane[py * w + px] } else { 0 };
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Non-overlapping `l x l` mean pooling; a truncated last window averages the
/// available pixels only.
pub fn mean_pool(plane: &[f32], c: usize, h: usize, w: usize, l: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (h.div_ceil(l), w.div_ceil(l));
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let y1 = ((oy + 1) * l).min(h);
                let x1 = ((ox + 1) * l).min(w);
                let mut acc = 0.0f64;
                let mut cnt = 0usize;
                for y in oy * l..y1 {
                    for x in ox * l..x1 {
                        acc += plane[(ci * h + y) * w + x] as f64;
                        cnt += 1;
                    }
                }
                out[(ci * oh + oy) * ow + ox] = (acc / cnt as f64) as f32;
            }
        }
    }
    (out, oh, ow)
}

/// Options for [`build_pyramid`].
pub struct BuildOptions {
    pub image_id: String,
    pub levels: Vec<u32>,
    pub chunk: usize,
    pub global_class: Option<u32>,
    pub split: String,
}

/// Ingest a level-1 image (and optional labels) into an on-disk pyramid.
/// `image` is `[C, H, W]` with values already normalized to `[0, 1]`.
pub fn build_pyramid(
    dir: &Path,
    image: &Tensor<f32>,
    labels: Option<&[u16]>,
    opts: &BuildOptions,
) -> Result<PyramidMeta> {
    if image.shape().len() != 3 {
        return Err(Error::Contract(format!("image must be [C,H,W], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Contract("image extent must be positive".into()));
    }
    if opts.levels.is_empty() || opts.levels[0] != 1 || !opts.levels.windows(2).all(|p| p[0] < p[1]) {
        return Err(Error::Contract(format!(
            "levels must be ascending with first = 1, got {:?}",
            opts.levels
        )));
    }
    if let Some(lab) = labels {
        if lab.len() != h * w {
            return Err(Error::Contract("label plane extent mismatch".into()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = PyramidMeta {
        image_id: opts.image_id.clone(),
        height: h,
        width: w,
        channels: c,
        levels: opts.levels.clone(),
        chunk: opts.chunk,
        has_labels: labels.is_some(),
        global_class: opts.global_class,
        split: opts.split.clone(),
        dir: dir.to_path_buf(),
    };
    for &l in &opts.levels {
        let (plane, ph, pw) = if l == 1 {
            (image.data().to_vec(), h, w)
        } else {
            mean_pool(image.data(), c, h, w, l as usize)
        };
        let bytes = chunk_plane_f32(&plane, c, ph, pw, opts.chunk);
        let path = meta.level_file(l);
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    if let Some(lab) = labels {
        let bytes = chunk_plane_u16(lab, h, w, opts.chunk);
        let path = meta.labels_file();
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let path = dir.join("meta");
    fs::write(&path, meta_to_string(&meta)).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(meta)
}

/// Which chunks intersect `[p0, p1)` along one axis.
fn chunk_range(p0: i64, p1: i64, extent: usize, chunk: usize) -> std::ops::Range<usize> {
    let lo = p0.max(0).min(extent as i64) as usize / chunk;
    let hi_px = p1.max(0).min(extent as i64) as usize;
    let hi = hi_px.div_ceil(chunk);
    lo..hi.max(lo)
}

/// Generic chunked window read. Fills the `[C, out_h, out_w]` window,
/// leaving out-of-plane pixels at zero; reads only intersecting chunks.
#[allow(clippy::too_many_arguments)]
fn read_window_raw(
    path: &Path,
    index: &ChunkIndex,
    y0: i64,
    x0: i64,
    out_h: usize,
    out_w: usize,
    elem: usize,
    out: &mut [u8],
) -> Result<()> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let chunk = index.chunk;
    let (c, ph, pw) = (index.channels, index.plane_h, index.plane_w);
    let mut buf = vec![0u8; index.chunk_bytes()];
    for crow in chunk_range(y0, y0 + out_h as i64, ph, chunk) {
        for ccol in chunk_range(x0, x0 + out_w as i64, pw, chunk) {
            let (off, len) = index.locate(crow, ccol);
            file.seek(SeekFrom::Start(off))
                .and_then(|_| file.read_exact(&mut buf[..len]))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            // overlap of this chunk with the requested window, in plane coords
            let cy0 = (crow * chunk) as i64;
            let cx0 = (ccol * chunk) as i64;
            let oy0 = cy0.max(y0);
            let ox0 = cx0.max(x0);
            let oy1 = (cy0 + chunk as i64).min(y0 + out_h as i64).min(ph as i64);
            let ox1 = (cx0 + chunk as i64).min(x0 + out_w as i64).min(pw as i64);
            if oy1 <= oy0 || ox1 <= ox0 {
                continue;
            }
            let copy_w = (ox1 - ox0) as usize;
            for ci in 0..c {
                for y in oy0..oy1 {
                    let src = ((ci * chunk + (y - cy0) as usize) * chunk + (ox0 - cx0) as usize)
                        * elem;
                    let dst = ((ci * out_h + (y - y0) as usize) * out_w + (ox0 - x0) as usize)
                        * elem;
                    out[dst..dst + copy_w * elem].copy_from_slice(&buf[src..src + copy_w * elem]);
                }
            }
        }
    }
    Ok(())
}

/// Read the level-`level` pixels covering `bbox` (world coordinates divided
/// by `level`, rounded to nearest pixel). The bbox world extent must equal
/// `level * (H, W)`; regions outside the image come back as zero.
pub fn read_crop(
    meta: &PyramidMeta,
    level: u32,
    bbox: &WorldBBox,
    crop_h: usize,
    crop_w: usize,
) -> Result<Tensor<f32>> {
    if !meta.levels.contains(&level) {
        return Err(Error::Contract(format!(
            "level {level} not stored for {}; available: {:?}",
            meta.image_id, meta.levels
        )));
    }
    let (eh, ew) = bbox.extent();
    let (want_h, want_w) = ((level as usize * crop_h) as f64, (level as usize * crop_w) as f64);
    if (eh - want_h).abs() > 1e-6 || (ew - want_w).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "bbox extent ({eh}, {ew}) != level {level} crop extent ({want_h}, {want_w})"
        )));
    }
    let (ph, pw) = meta.plane_extent(level);
    let y0 = (bbox.y_min / level as f64).round() as i64;
    let x0 = (bbox.x_min / level as f64).round() as i64;
    let index = ChunkIndex {
        plane_h: ph,
        plane_w: pw,
        channels: meta.channels,
        chunk: meta.chunk,
        elem_bytes: 4,
    };
    let mut bytes = vec![0u8; meta.channels * crop_h * crop_w * 4];
    read_window_raw(&meta.level_file(level), &index, y0, x0, crop_h, crop_w, 4, &mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::from_vec(vec![meta.channels, crop_h, crop_w], data))
}

/// Read the level-1 label window for `bbox` (extent `H x W`).
pub fn read_label_crop(
    meta: &PyramidMeta,
    bbox: &WorldBBox,
    crop_h: usize,
    crop_w: usize,
) -> Result<Vec<u16>> {
    if !meta.has_labels {
        return Err(Error::Contract(format!("image {} has no labels", meta.image_id)));
    }
    let index = ChunkIndex {
        plane_h: meta.height,
        plane_w: meta.width,
        channels: 1,
        chunk: meta.chunk,
        elem_bytes: 2,
    };
    let y0 = bbox.y_min.round() as i64;
    let x0 = bbox.x_min.round() as i64;
    let mut bytes = vec![0u8; crop_h * crop_w * 2];
    read_window_raw(&meta.labels_file(), &index, y0, x0, crop_h, crop_w, 2, &mut bytes)?;
    Ok(bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
}

/// A dataset split: the metas of every image directory under `root/<split>`,
/// ordered by image id for determinism.
#[derive(Clone, Debug)]
pub struct PyramidDataset {
    pub root: PathBuf,
    pub split: String,
    pub images: Vec<PyramidMeta>,
}

pub fn open_dataset(root: &Path, split: &str) -> Result<PyramidDataset> {
    let dir = root.join(split);
    let mut images = Vec::new();
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        if entry.path().is_dir() && entry.path().join("meta").exists() {
            images.push(parse_meta(&entry.path())?);
        }
    }
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if images.is_empty() {
        return Err(Error::Contract(format!(
            "no pyramid images found under {}",
            dir.display()
        )));
    }
    Ok(PyramidDataset { root: root.to_path_buf(), split: split.into(), images })
}

/// Draw one nested multi-resolution sample: an image uniformly at random,
/// nested bboxes, per-level crops, plus the level-1 label crop when stored.
/// In naive mode the pixels still come from the true positions; only the
/// emitted bboxes are replaced with the fixed-centered baseline.
pub fn read_sample(
    ds: &PyramidDataset,
    spec: &LevelSpec,
    rng: &mut impl Rng,
    mode: BBoxMode,
) -> Result<MultiResSample> {
    let img = &ds.images[rng.gen_range(0..ds.images.len())];
    read_sample_from(img, spec, rng, mode)
}

pub fn read_sample_from(
    img: &PyramidMeta,
    spec: &LevelSpec,
    rng: &mut impl Rng,
    mode: BBoxMode,
) -> Result<MultiResSample> {
    let true_boxes = sample_nested_bboxes(img.height, img.width, spec, rng)?;
    sample_at(img, spec, &true_boxes, mode)
}

/// Materialize a sample at explicit true-world boxes.
pub fn sample_at(
    img: &PyramidMeta,
    spec: &LevelSpec,
    true_boxes: &[WorldBBox],
    mode: BBoxMode,
) -> Result<MultiResSample> {
    let mut crops = Vec::with_capacity(spec.level_count());
    for (&l, bbox) in spec.levels.iter().zip(true_boxes) {
        crops.push(read_crop(img, l, bbox, spec.crop_h, spec.crop_w)?);
    }
    let labels = if img.has_labels {
        Some(read_label_crop(img, &true_boxes[0], spec.crop_h, spec.crop_w)?)
    } else {
        None
    };
    let bboxes = match mode {
        BBoxMode::True => true_boxes.to_vec(),
        BBoxMode::Naive => naive_bboxes(spec),
    };
    Ok(MultiResSample {
        spec: spec.clone(),
        crops,
        bboxes,
        labels,
        global_class: img.global_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tmpdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!("muvit-pyr-{}", rand::random::<u64>()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn opts(levels: Vec<u32>) -> BuildOptions {
        BuildOptions {
            image_id: "img".into(),
            levels,
            chunk: 16,
            global_class: Some(3),
            split: "train".into(),
        }
    }

    #[test]
    fn constant_image_stays_constant_across_levels() {
        let dir = tmpdir();
        let img = Tensor::full(&[1, 40, 40], 0.25f32);
        let meta = build_pyramid(&dir, &img, None, &opts(vec![1, 2, 4])).unwrap();
        for &l in &[1u32, 2, 4] {
            let e = 8usize;
            let b = WorldBBox::new(0.0, 0.0, (l as usize * e) as f64, (l as usize * e) as f64)
                .unwrap();
            let crop = read_crop(&meta, l, &b, e, e).unwrap();
            assert!(crop.data().iter().all(|&v| v == 0.25), "level {l}");
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mean_pool_matches_hand_examples() {
        // 2x2 image [[0,0],[4,4]] pooled by 2 -> 2.0
        let (p, h, w) = mean_pool(&[0.0, 0.0, 4.0, 4.0], 1, 2, 2, 2);
        assert_eq!((h, w), (1, 1));
        assert_eq!(p, vec![2.0]);
        // checkerboard -> 0.5
        let board: Vec<f32> = (0..16).map(|i| (((i / 4) + i) % 2) as f32).collect();
        let (p, _, _) = mean_pool(&board, 1, 4, 4, 2);
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn roundtrip_is_bit_exact_and_chunked_reads_match_slices() {
        let dir = tmpdir();
        let mut rng = substream(100, "pyr");
        let (h, w) = (50usize, 37usize);
        let img = Tensor::uniform(&[2, h, w], 0.0, 1.0, &mut rng);
        let meta = build_pyramid(&dir, &img, None, &opts(vec![1, 2])).unwrap();

        // full-image read at level 1 is byte-identical
        let full = WorldBBox::new(0.0, 0.0, h as f64, w as f64).unwrap();
        let back = read_crop(&meta, 1, &full, h, w).unwrap();
        assert!(back.bitwise_eq(&img));

        // random straddling windows equal the in-memory slice (zero padded)
        let (p2, p2h, p2w) = mean_pool(img.data(), 2, h, w, 2);
        for _ in 0..300 {
            for (l, plane, ph, pw) in
                [(1u32, img.data(), h, w), (2u32, p2.as_slice(), p2h, p2w)]
            {
                let (ch, cw) = (9usize, 7usize);
                let y0 = rng.gen_range(-12..(ph as i64));
                let x0 = rng.gen_range(-12..(pw as i64));
                let b = WorldBBox::new(
                    (y0 * l as i64) as f64,
                    (x0 * l as i64) as f64,
                    ((y0 + ch as i64) * l as i64) as f64,
                    ((x0 + cw as i64) * l as i64) as f64,
                )
                .unwrap();
                let crop = read_crop(&meta, l, &b, ch, cw).unwrap();
                for ci in 0..2 {
                    for y in 0..ch {
                        for x in 0..cw {
                            let (py, px) = (y0 + y as i64, x0 + x as i64);
                            let want = if py >= 0
                                && (py as usize) < ph
                                && px >= 0
                                && (px as usize) < pw
                            {
                                plane[(ci * ph + py as usize) * pw + px as usize]
                            } else {
                                0.0
                            };
                            assert_eq!(crop.data()[(ci * ch + y) * cw + x], want);
                        }
                    }
                }
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pyramid_conserves_global_mean() {
        let mut rng = substream(101, "pyr-mean");
        // extents divide evenly: exact conservation
        let img = Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng);
        let m1: f64 = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        for l in [2usize, 4] {
            let (p, ph, pw) = mean_pool(img.data(), 1, 64, 64, l);
            let m: f64 = p.iter().map(|&v| v as f64).sum::<f64>() / (ph * pw) as f64;
            assert!((m - m1).abs() < 1e-6, "level {l}: {m} vs {m1}");
        }
    }

    #[test]
    fn unknown_level_lists_available() {
        let dir = tmpdir();
        let img = Tensor::full(&[1, 20, 20], 0.5f32);
        let meta = build_pyramid(&dir, &img, None, &opts(vec![1, 2])).unwrap();
        let b = WorldBBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let err = read_crop(&meta, 8, &b, 4, 4).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn labels_align_with_level1_pixels() {
        // paint a coordinate-encoding image: pixel value encodes its index,
        // label = index mod 3; any misalignment shows up immediately.
        let dir = tmpdir();
        let (h, w) = (40usize, 40usize);
        let img = Tensor::from_vec(
            vec![1, h, w],
            (0..h * w).map(|i| i as f32 / (h * w) as f32).collect(),
        );
        let labels: Vec<u16> = (0..h * w).map(|i| (i % 3) as u16).collect();
        let meta = build_pyramid(&dir, &img, Some(&labels), &opts(vec![1, 2])).unwrap();
        let spec = LevelSpec::new(vec![1, 2], 16, 16, 1, 8).unwrap();
        let mut rng = substream(107, "pyr-lab");
        for _ in 0..20 {
            let s = read_sample_from(&meta, &spec, &mut rng, BBoxMode::True).unwrap();
            let lab = s.labels.as_ref().unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let v = s.crops[0].data()[y * 16 + x];
                    let idx = (v * (h * w) as f32).round() as usize;
                    assert_eq!(lab[y * 16 + x], (idx % 3) as u16);
                }
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn naive_mode_same_pixels_different_boxes() {
        let dir = tmpdir();
        let mut rng = substream(102, "pyr-nv");
        let img = Tensor::uniform(&[1, 128, 128], 0.0, 1.0, &mut rng);
        let meta = build_pyramid(&dir, &img, None, &opts(vec![1, 2])).unwrap();
        let spec = LevelSpec::new(vec![1, 2], 32, 32, 1, 8).unwrap();
        let mut r1 = substream(5, "draw");
        let mut r2 = substream(5, "draw");
        let st = read_sample_from(&meta, &spec, &mut r1, BBoxMode::True).unwrap();
        let sn = read_sample_from(&meta, &spec, &mut r2, BBoxMode::Naive).unwrap();
        for (a, b) in st.crops.iter().zip(&sn.crops) {
            assert!(a.bitwise_eq(b));
        }
        assert_ne!(st.bboxes, sn.bboxes);
        assert_eq!(sn.bboxes, naive_bboxes(&spec));
        fs::remove_dir_all(&dir).unwrap();
    }
}

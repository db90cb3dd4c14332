//! Dataset loading (CamVid-format directories and a synthetic shape
//! generator), checkpoint persistence, and flat key=value config files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::builder::{self, BuildConfig, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Label index reserved for unlabeled pixels in CamVid-format data.
pub const VOID_INDEX: u32 = 11;

/// The 11 classes of the urban-scene benchmark, in the reporting order.
pub const CAMVID_CLASSES: [&str; 11] = [
    "building",
    "tree",
    "sky",
    "car",
    "sign",
    "road",
    "pedestrian",
    "fence",
    "column_pole",
    "sidewalk",
    "cyclist",
];

/// One image with an aligned per-pixel integer label map.
#[derive(Clone, Debug)]
pub struct SegmentationSample {
    /// 3*H*W row-major RGB values scaled to [0, 1].
    pub image: Vec<f32>,
    /// H*W labels in [0, classes) plus the void index.
    pub labels: Vec<u32>,
    pub h: usize,
    pub w: usize,
}

pub type Dataset = Vec<SegmentationSample>;

// ── synthetic data ──────────────────────────────────────────────────

/// Recipe for a deterministic synthetic shape dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub canvas: usize,
    pub classes: usize,
    pub count: usize,
    /// Shapes drawn per image, inclusive range.
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { canvas: 64, classes: 5, count: 200, shapes_min: 2, shapes_max: 5, noise: 0.03, seed: 7 }
    }
}

impl SyntheticSpec {
    /// Parse a `key=value,key=value` spec string
    /// (`n`, `size`, `classes`, `seed`, `noise`, `shapes=min-max`).
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        if s.trim().is_empty() {
            return Ok(spec);
        }
        for pair in s.split(',') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad synth spec entry {pair:?}")))?;
            let bad = |e: std::num::ParseIntError| Error::invalid(format!("synth spec {k}: {e}"));
            match k.trim() {
                "n" | "count" => spec.count = v.trim().parse().map_err(bad)?,
                "size" | "canvas" => spec.canvas = v.trim().parse().map_err(bad)?,
                "classes" => spec.classes = v.trim().parse().map_err(bad)?,
                "seed" => spec.seed = v.trim().parse().map_err(bad)?,
                "noise" => {
                    spec.noise = v
                        .trim()
                        .parse()
                        .map_err(|e| Error::invalid(format!("synth spec noise: {e}")))?
                }
                "shapes" => {
                    let (lo, hi) = v
                        .split_once('-')
                        .ok_or_else(|| Error::invalid("shapes wants min-max"))?;
                    spec.shapes_min = lo.trim().parse().map_err(bad)?;
                    spec.shapes_max = hi.trim().parse().map_err(bad)?;
                }
                other => return Err(Error::invalid(format!("unknown synth spec key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

/// Class display colors; also the synthetic rendering palette.
pub const PALETTE: [(f32, f32, f32); 11] = [
    (0.16, 0.16, 0.18),
    (0.86, 0.22, 0.20),
    (0.22, 0.78, 0.25),
    (0.20, 0.35, 0.88),
    (0.92, 0.86, 0.20),
    (0.78, 0.22, 0.80),
    (0.22, 0.84, 0.84),
    (0.95, 0.58, 0.12),
    (0.55, 0.55, 0.88),
    (0.58, 0.40, 0.22),
    (0.90, 0.90, 0.90),
];

enum ShapeKind {
    Rect,
    Disc,
    Bar,
}

/// Render a deterministic dataset: class-colored shapes over a dark
/// background, exact label masks, later shapes occluding earlier ones.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.canvas < 16 {
        return Err(Error::invalid(format!("canvas {} too small (minimum 16)", spec.canvas)));
    }
    if spec.classes < 2 || spec.classes > 11 {
        return Err(Error::invalid(format!("classes {} outside 2..=11", spec.classes)));
    }
    if spec.shapes_min == 0 || spec.shapes_max < spec.shapes_min {
        return Err(Error::invalid("bad shapes range"));
    }
    let n = spec.canvas;
    let mut out = Vec::with_capacity(spec.count);
    for idx in 0..spec.count {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64 + 1);

        let mut labels = vec![0u32; n * n];
        let count = rng.gen_range(spec.shapes_min..=spec.shapes_max);
        for _ in 0..count {
            let class = rng.gen_range(1..spec.classes) as u32;
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Rect,
                1 => ShapeKind::Disc,
                _ => ShapeKind::Bar,
            };
            let cy = rng.gen_range(0..n) as isize;
            let cx = rng.gen_range(0..n) as isize;
            let r = rng.gen_range(n / 8..=n / 3) as isize;
            match kind {
                ShapeKind::Rect => {
                    let rh = r;
                    let rw = rng.gen_range(n / 8..=n / 3) as isize;
                    fill(&mut labels, n, class, |y, x| {
                        (y - cy).abs() <= rh && (x - cx).abs() <= rw
                    });
                }
                ShapeKind::Disc => {
                    fill(&mut labels, n, class, |y, x| {
                        (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r
                    });
                }
                ShapeKind::Bar => {
                    let horizontal = rng.gen::<bool>();
                    let t = (r / 3).max(2);
                    fill(&mut labels, n, class, |y, x| {
                        if horizontal {
                            (y - cy).abs() <= t
                        } else {
                            (x - cx).abs() <= t
                        }
                    });
                }
            }
        }

        let mut image = vec![0.0f32; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let c = labels[y * n + x] as usize;
                let (r0, g0, b0) = PALETTE[c];
                // gentle horizontal shading so classes are not flat fills
                let shade = 1.0 - 0.12 * (x as f32 / n as f32);
                let mut px = [r0 * shade, g0 * shade, b0 * shade];
                if spec.noise > 0.0 {
                    for p in px.iter_mut() {
                        *p += rng.gen_range(-spec.noise..=spec.noise) as f32;
                    }
                }
                for (ch, p) in px.iter().enumerate() {
                    image[ch * n * n + y * n + x] = p.clamp(0.0, 1.0);
                }
            }
        }
        out.push(SegmentationSample { image, labels, h: n, w: n });
    }
    Ok(out)
}


fn fill(labels: &mut [u32], n: usize, class: u32, pred: impl Fn(isize, isize) -> bool) {
    for y in 0..n {
        for x in 0..n {
            if pred(y as isize, x as isize) {
                labels[y * n + x] = class;
            }
        }
    }
}

// ── CamVid-format directories ───────────────────────────────────────

/// Load `root/<split>/images/*.png` with aligned single-channel index
/// maps in `root/<split>/labels/`, in deterministic filename order.
pub fn load_camvid_format(root: &Path, split: &str) -> Result<Dataset> {
    let img_dir = root.join(split).join("images");
    let lbl_dir = root.join(split).join("labels");
    if !img_dir.is_dir() {
        return Err(Error::data(format!("missing directory {}", img_dir.display())));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::data(format!("no .png images under {}", img_dir.display())));
    }
    let mut out = Vec::with_capacity(names.len());
    for img_path in names {
        let file_name = img_path.file_name().unwrap();
        let lbl_path = lbl_dir.join(file_name);
        if !lbl_path.is_file() {
            return Err(Error::data(format!("image {} has no matching label file", img_path.display())));
        }
        let img = image::open(&img_path)?.to_rgb8();
        let lbl = image::open(&lbl_path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (lbl.width() as usize, lbl.height() as usize) != (w, h) {
            return Err(Error::data(format!(
                "label size {}x{} does not match image {}x{} for {}",
                lbl.width(),
                lbl.height(),
                w,
                h,
                img_path.display()
            )));
        }
        let mut image_v = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    image_v[ch * h * w + y * w + x] = p.0[ch] as f32 / 255.0;
                }
            }
        }
        let mut labels = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = lbl.get_pixel(x as u32, y as u32).0[0] as u32;
                if v > VOID_INDEX {
                    return Err(Error::data(format!(
                        "label value {v} in {} exceeds void index {VOID_INDEX}",
                        lbl_path.display()
                    )));
                }
                labels[y * w + x] = v;
            }
        }
        out.push(SegmentationSample { image: image_v, labels, h, w });
    }
    Ok(out)
}

/// Write a dataset to the CamVid-format layout consumed by
/// [`load_camvid_format`], plus a colormap sidecar.
pub fn save_camvid_format(set: &Dataset, root: &Path, split: &str) -> Result<()> {
    let img_dir = root.join(split).join("images");
    let lbl_dir = root.join(split).join("labels");
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&lbl_dir)?;
    for (i, s) in set.iter().enumerate() {
        let name = format!("{i:05}.png");
        let mut img = image::RgbImage::new(s.w as u32, s.h as u32);
        for y in 0..s.h {
            for x in 0..s.w {
                let px = [
                    (s.image[y * s.w + x] * 255.0).round() as u8,
                    (s.image[s.h * s.w + y * s.w + x] * 255.0).round() as u8,
                    (s.image[2 * s.h * s.w + y * s.w + x] * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(img_dir.join(&name))?;
        let mut lbl = image::GrayImage::new(s.w as u32, s.h as u32);
        for y in 0..s.h {
            for x in 0..s.w {
                lbl.put_pixel(x as u32, y as u32, image::Luma([s.labels[y * s.w + x] as u8]));
            }
        }
        lbl.save(lbl_dir.join(&name))?;
    }
    let mut side = String::from("index,name,r,g,b\n");
    for (i, name) in CAMVID_CLASSES.iter().enumerate() {
        let (r, g, b) = PALETTE[i];
        side.push_str(&format!(
            "{i},{name},{},{},{}\n",
            (r * 255.0) as u8,
            (g * 255.0) as u8,
            (b * 255.0) as u8
        ));
    }
    side.push_str(&format!("{VOID_INDEX},void,0,0,0\n"));
    fs::write(root.join("colormap.csv"), side)?;
    Ok(())
}

// ── checkpoints ─────────────────────────────────────────────────────

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: BuildConfig,
    /// Storage dtype of the blobs (always little-endian f32).
    pub dtype: String,
    pub epoch: usize,
    pub val_miou: f64,
    /// Training RNG state for exact resumption.
    pub rng_state: Option<serde_json::Value>,
}

/// Write `manifest.json` plus one raw little-endian f32 blob per
/// parameter and BN running statistic, named by graph path.
pub fn save_checkpoint<S: Scalar>(
    model: &ModelGraph<S>,
    epoch: usize,
    val_miou: f64,
    rng_state: Option<serde_json::Value>,
    dir: &Path,
) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        arch: model.config.clone(),
        dtype: "f32".to_string(),
        epoch,
        val_miou,
        rng_state,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut io_err: Option<Error> = None;
    model.visit_params(&mut |path, _, t| {
        if io_err.is_some() {
            return;
        }
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data().iter() {
            bytes.extend_from_slice(&(v.to_f64x() as f32).to_le_bytes());
        }
        if let Err(e) = fs::write(tensors.join(format!("{path}.bin")), bytes) {
            io_err = Some(e.into());
        }
    });
    match io_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {CHECKPOINT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Rebuild the graph from the stored descriptor and fill every tensor
/// bit-exactly from its blob.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(ModelGraph<S>, CheckpointMeta)> {
    let meta = read_manifest(dir)?;
    let model = builder::build_raw::<S>(&meta.arch, 0)?;
    let tensors = dir.join("tensors");
    let mut err: Option<Error> = None;
    model.visit_params(&mut |path, _, t| {
        if err.is_some() {
            return;
        }
        let file = tensors.join(format!("{path}.bin"));
        let bytes = match fs::read(&file) {
            Ok(b) => b,
            Err(_) => {
                err = Some(Error::Checkpoint(format!("missing tensor blob {path}")));
                return;
            }
        };
        if bytes.len() != t.numel() * 4 {
            err = Some(Error::Checkpoint(format!(
                "tensor {path}: expected {} bytes, found {}",
                t.numel() * 4,
                bytes.len()
            )));
            return;
        }
        let mut data = t.data_mut();
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            data[i] = S::cast(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((model, meta)),
    }
}

// ── flat key=value config files ─────────────────────────────────────

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

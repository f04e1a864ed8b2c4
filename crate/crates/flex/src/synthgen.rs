//! Synthetic labeled scenes and mean-kernel blurring.
//!
//! Scenes contain geometric objects of K classes built from a shape family
//! (disk, square, triangle) crossed with a fine texture (solid, striped).
//! Classes that share a shape differ only in texture, so mean-kernel blur
//! makes them genuinely ambiguous — the property the feedback analyses need.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{FlexError, Result};
use crate::numerics::Tensor;
use crate::pyramid::Roi;

/// Stripe period in pixels; blur kernels of 5 and up average it away.
const STRIPE_PERIOD: usize = 4;
const STRIPE_AMPLITUDE: f64 = 0.25;

/// Mean-kernel size. 1 means no blur.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlurSpec {
    kernel: usize,
}

impl BlurSpec {
    /// Kernel sizes swept by the blur analyses.
    pub const DEFAULT_SWEEP: [usize; 5] = [1, 5, 9, 15, 21];

    pub fn new(kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(FlexError::Param(format!(
                "blur kernel must be odd and positive, got {kernel}"
            )));
        }
        Ok(BlurSpec { kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn is_identity(&self) -> bool {
        self.kernel == 1
    }
}

/// One labeled object.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub roi: Roi,
    pub class: usize,
}

/// A labeled image. Pixel values live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 256,
            classes: 6,
            min_objects: 1,
            max_objects: 8,
            min_size: 24.0,
            max_size: 112.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(FlexError::Param(format!(
                "image size must be at least 64, got {}",
                self.image_size
            )));
        }
        if self.classes < 2 {
            return Err(FlexError::Param("at least 2 classes required".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(FlexError::Param("object count range is inverted".into()));
        }
        if !(self.min_size > 0.0) || self.min_size > self.max_size {
            return Err(FlexError::Param("object scale range is invalid".into()));
        }
        if self.max_size >= self.image_size as f64 {
            return Err(FlexError::Param("objects larger than the image".into()));
        }
        Ok(())
    }
}

fn shape_family(class: usize) -> usize {
    (class / 2) % 3
}

fn is_striped(class: usize) -> bool {
    class % 2 == 1
}

/// Generate one scene. Pure in (seed, config): repeated calls return
/// byte-identical scenes.
pub fn synth_scene(seed: u64, config: &SynthConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = config.image_size;

    // background: per-scene base level plus light pixel noise
    let bg: f64 = rng.gen_range(0.10..0.30);
    let mut image = vec![0.0f64; 3 * n * n];
    for v in image.iter_mut() {
        *v = (bg + rng.gen_range(-0.03f64..0.03)).clamp(0.0, 1.0);
    }

    let count = rng.gen_range(config.min_objects..=config.max_objects);

    // classes dealt from a shuffled deck so corpora stay balanced
    let mut deck: Vec<usize> = (0..config.classes).collect();
    deck.shuffle(&mut rng);
    let start = rng.gen_range(0..config.classes);

    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for j in 0..count {
        let class = deck[(start + j) % config.classes];
        let mut placed = false;
        for _attempt in 0..60 {
            let side = rng.gen_range(config.min_size..=config.max_size);
            let aspect: f64 = rng.gen_range(0.75..1.3333);
            let w = (side * aspect.sqrt()).min(n as f64 - 2.0);
            let h = (side / aspect.sqrt()).min(n as f64 - 2.0);
            let max_x = n as f64 - 1.0 - w;
            let max_y = n as f64 - 1.0 - h;
            let x = if max_x > 1.0 { rng.gen_range(1.0..max_x) } else { 1.0 };
            let y = if max_y > 1.0 { rng.gen_range(1.0..max_y) } else { 1.0 };
            let roi = Roi::new(x, y, w, h)?;
            let crowded = annotations.iter().any(|a| a.roi.iou(&roi) > 0.30);
            if crowded {
                continue;
            }
            let base = rng.gen_range(0.50..0.70);
            let vertical = rng.gen_bool(0.5);
            draw_object(&mut image, n, &roi, class, base, vertical);
            annotations.push(Annotation { roi, class });
            placed = true;
            break;
        }
        if !placed {
            return Err(FlexError::Generation(format!(
                "could not place object {j} of {count} after bounded retries"
            )));
        }
    }

    Ok(Scene { image: Tensor::new(vec![3, n, n], image)?, annotations })
}

fn draw_object(image: &mut [f64], n: usize, roi: &Roi, class: usize, base: f64, vertical: bool) {
    let (x0, y0) = (roi.x, roi.y);
    let (w, h) = (roi.w, roi.h);
    let cx = x0 + w / 2.0;
    let cy = y0 + h / 2.0;
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = ((x0 + w).ceil() as usize).min(n);
    let py1 = ((y0 + h).ceil() as usize).min(n);
    let striped = is_striped(class);
    for py in py0..py1 {
        for px in px0..px1 {
            let fx = px as f64 + 0.5;
            let fy = py as f64 + 0.5;
            let inside = match shape_family(class) {
                0 => {
                    let dx = (fx - cx) / (w / 2.0);
                    let dy = (fy - cy) / (h / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
                1 => fx >= x0 && fx <= x0 + w && fy >= y0 && fy <= y0 + h,
                _ => {
                    // isoceles triangle, apex at the top edge midpoint
                    let t = (fy - y0) / h;
                    (0.0..=1.0).contains(&t) && (fx - cx).abs() <= t * w / 2.0
                }
            };
            if !inside {
                continue;
            }
            let value = if striped {
                let phase = if vertical { px } else { py };
                if (phase / (STRIPE_PERIOD / 2)) % 2 == 0 {
                    base + STRIPE_AMPLITUDE
                } else {
                    base - STRIPE_AMPLITUDE
                }
            } else {
                base
            };
            for c in 0..3 {
                image[(c * n + py) * n + px] = value.clamp(0.0, 1.0);
            }
        }
    }
}

/// Symmetric reflection index: ..., 1, 0 | 0, 1, ..., n-1 | n-1, n-2, ...
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

/// Per-channel X×X mean filter with symmetric border reflection.
pub fn blur_image(image: &Tensor, spec: BlurSpec) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(FlexError::Shape("blur expects an image [C,H,W]".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let x = spec.kernel;
    if x > h.min(w) {
        return Err(FlexError::Param(format!(
            "blur kernel {x} exceeds image extent {}",
            h.min(w)
        )));
    }
    if spec.is_identity() {
        return Ok(image.clone());
    }
    let m = (x / 2) as isize;
    let inv = 1.0 / x as f64;
    let data = image.data();
    let mut horiz = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for row in 0..h {
            let src = &data[(ch * h + row) * w..(ch * h + row + 1) * w];
            let dst = &mut horiz[(ch * h + row) * w..(ch * h + row + 1) * w];
            for col in 0..w {
                let mut acc = 0.0;
                for d in -m..=m {
                    acc += src[reflect(col as isize + d, w)];
                }
                dst[col] = acc * inv;
            }
        }
    }
    let mut out = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for col in 0..w {
            for row in 0..h {
                let mut acc = 0.0;
                for d in -m..=m {
                    acc += horiz[(ch * h + reflect(row as isize + d, h)) * w + col];
                }
                out[(ch * h + row) * w + col] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

// ── dataset persistence ──────────────────────────────────────────────

pub const INDEX_FILE: &str = "index";
const INDEX_VERSION: &str = "flex-dataset v1";

/// One persisted scene record.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub file: String,
    pub annotations: Vec<Annotation>,
}

/// Parsed dataset index.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub dir: PathBuf,
    pub seed: u64,
    pub blur: BlurSpec,
    pub image_size: usize,
    pub classes: usize,
    pub scenes: Vec<SceneRecord>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn index_path(&self) -> PathBuf {
        self.dir.join(INDEX_FILE)
    }

    /// Content hash of the index file.
    pub fn digest(&self) -> Result<String> {
        let bytes = fs::read(self.index_path())?;
        Ok(hex_digest(&bytes))
    }

    pub fn load_image(&self, i: usize) -> Result<Tensor> {
        let path = self.dir.join(&self.scenes[i].file);
        let mut f = BufReader::new(fs::File::open(&path)?);
        Tensor::read_from(&mut f)
    }

    pub fn load_scene(&self, i: usize) -> Result<Scene> {
        Ok(Scene {
            image: self.load_image(i)?,
            annotations: self.scenes[i].annotations.clone(),
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate `n` scenes, blur them per `spec`, and persist them under `dir`.
///
/// Annotations are copied from the clean scenes, never recomputed. A failure
/// part-way removes everything written so far.
pub fn build_dataset(
    n: usize,
    spec: BlurSpec,
    seed: u64,
    config: &SynthConfig,
    dir: &Path,
) -> Result<DatasetIndex> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = build_dataset_inner(n, spec, seed, config, dir, &mut written);
    if result.is_err() {
        for p in written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

fn build_dataset_inner(
    n: usize,
    spec: BlurSpec,
    seed: u64,
    config: &SynthConfig,
    dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetIndex> {
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = synth_scene(scene_seed(seed, i), config)?;
        let blurred = blur_image(&scene.image, spec)?;
        let file = format!("scene_{i:05}.tensor");
        let path = dir.join(&file);
        let mut w = BufWriter::new(fs::File::create(&path)?);
        written.push(path);
        blurred.write_to(&mut w)?;
        w.flush()?;
        records.push(SceneRecord { file, annotations: scene.annotations });
    }

    let index_path = dir.join(INDEX_FILE);
    let mut out = String::new();
    out.push_str(INDEX_VERSION);
    out.push('\n');
    out.push_str(&format!("seed {seed}\n"));
    out.push_str(&format!("blur {}\n", spec.kernel));
    out.push_str(&format!("image_size {}\n", config.image_size));
    out.push_str(&format!("classes {}\n", config.classes));
    out.push_str(&format!("count {n}\n"));
    for (i, rec) in records.iter().enumerate() {
        out.push_str(&format!("scene {i} file {} objects {}\n", rec.file, rec.annotations.len()));
        for a in &rec.annotations {
            out.push_str(&format!(
                "obj {} {} {} {} {}\n",
                a.roi.x, a.roi.y, a.roi.w, a.roi.h, a.class
            ));
        }
    }
    written.push(index_path.clone());
    fs::write(&index_path, out)?;

    Ok(DatasetIndex {
        dir: dir.to_path_buf(),
        seed,
        blur: spec,
        image_size: config.image_size,
        classes: config.classes,
        scenes: records,
    })
}

/// Per-scene seed stream (splitmix-style hop from the dataset seed).
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Parse a dataset directory written by [`build_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DatasetIndex> {
    let index_path = dir.join(INDEX_FILE);
    let file = fs::File::open(&index_path)
        .map_err(|e| FlexError::Data(format!("cannot open {}: {e}", index_path.display())))?;
    let mut lines = BufReader::new(file).lines();

    let version = next_line(&mut lines)?;
    if version != INDEX_VERSION {
        return Err(FlexError::Data(format!("unsupported index version: {version}")));
    }
    let seed = parse_kv(&next_line(&mut lines)?, "seed")?;
    let blur = BlurSpec::new(parse_kv::<usize>(&next_line(&mut lines)?, "blur")?)?;
    let image_size = parse_kv(&next_line(&mut lines)?, "image_size")?;
    let classes = parse_kv(&next_line(&mut lines)?, "classes")?;
    let count: usize = parse_kv(&next_line(&mut lines)?, "count")?;

    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let header = next_line(&mut lines)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "scene" || parts[2] != "file" || parts[4] != "objects" {
            return Err(FlexError::Data(format!("malformed scene header: {header}")));
        }
        let idx: usize = parts[1].parse().map_err(|_| bad_field("scene index"))?;
        if idx != i {
            return Err(FlexError::Data(format!("scene {idx} out of order")));
        }
        let file = parts[3].to_string();
        let objects: usize = parts[5].parse().map_err(|_| bad_field("object count"))?;
        let mut annotations = Vec::with_capacity(objects);
        for _ in 0..objects {
            let line = next_line(&mut lines)?;
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 6 || p[0] != "obj" {
                return Err(FlexError::Data(format!("malformed object line: {line}")));
            }
            let x: f64 = p[1].parse().map_err(|_| bad_field("x"))?;
            let y: f64 = p[2].parse().map_err(|_| bad_field("y"))?;
            let w: f64 = p[3].parse().map_err(|_| bad_field("w"))?;
            let h: f64 = p[4].parse().map_err(|_| bad_field("h"))?;
            let class: usize = p[5].parse().map_err(|_| bad_field("class"))?;
            if class >= classes {
                return Err(FlexError::Data(format!("class {class} out of {classes}")));
            }
            annotations.push(Annotation { roi: Roi::new(x, y, w, h)?, class });
        }
        scenes.push(SceneRecord { file, annotations });
    }

    Ok(DatasetIndex { dir: dir.to_path_buf(), seed, blur, image_size, classes, scenes })
}

fn next_line(lines: &mut impl Iterator<Item = std::io::Result<String>>) -> Result<String> {
    match lines.next() {
        Some(Ok(l)) => Ok(l),
        Some(Err(e)) => Err(e.into()),
        None => Err(FlexError::Data("index truncated".into())),
    }
}

fn parse_kv<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(FlexError::Data(format!("expected `{key}` line, got: {line}")));
    }
    parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad_field(key))
}

fn bad_field(what: &str) -> FlexError {
    FlexError::Data(format!("malformed {what} in index"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            image_size: 64,
            classes: 6,
            min_objects: 1,
            max_objects: 3,
            min_size: 8.0,
            max_size: 28.0,
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = small_config();
        let a = synth_scene(42, &cfg).unwrap();
        let b = synth_scene(42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(43, &cfg).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn single_object_config_yields_one_annotation() {
        let cfg = SynthConfig { min_objects: 1, max_objects: 1, ..small_config() };
        let scene = synth_scene(7, &cfg).unwrap();
        assert_eq!(scene.annotations.len(), 1);
        let n = cfg.image_size as f64;
        for a in &scene.annotations {
            assert!(a.roi.x >= 0.0 && a.roi.y >= 0.0);
            assert!(a.roi.x + a.roi.w <= n && a.roi.y + a.roi.h <= n);
            assert!(a.class < cfg.classes);
        }
    }

    #[test]
    fn zero_objects_is_a_valid_negative_scene() {
        let cfg = SynthConfig { min_objects: 0, max_objects: 0, ..small_config() };
        let scene = synth_scene(3, &cfg).unwrap();
        assert!(scene.annotations.is_empty());
    }

    #[test]
    fn infeasible_placement_is_a_generation_error() {
        let cfg = SynthConfig {
            min_objects: 8,
            max_objects: 8,
            min_size: 58.0,
            max_size: 60.0,
            ..small_config()
        };
        assert!(matches!(synth_scene(1, &cfg), Err(FlexError::Generation(_))));
    }

    #[test]
    fn corpus_class_histogram_is_uniform_within_five_percent() {
        let cfg = small_config();
        let mut counts = vec![0usize; cfg.classes];
        let mut total = 0usize;
        for i in 0..1000 {
            let scene = synth_scene(scene_seed(11, i), &cfg).unwrap();
            for a in &scene.annotations {
                counts[a.class] += 1;
                total += 1;
            }
        }
        let expected = total as f64 / cfg.classes as f64;
        // chi-square goodness of fit against the uniform histogram;
        // 20.5 is the 0.999 quantile of chi-square with 5 degrees of freedom
        let chi2: f64 = counts
            .iter()
            .map(|&k| (k as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 20.5, "chi-square {chi2} too large: {counts:?}");
        // and every class share within 5 percentage points of uniform
        for (c, &k) in counts.iter().enumerate() {
            let share = k as f64 / total as f64;
            let dev = (share - 1.0 / cfg.classes as f64).abs();
            assert!(dev < 0.05, "class {c}: share {share}");
        }
    }

    #[test]
    fn blur_one_is_identity() {
        let scene = synth_scene(5, &small_config()).unwrap();
        let out = blur_image(&scene.image, BlurSpec::new(1).unwrap()).unwrap();
        assert_eq!(out, scene.image);
    }

    #[test]
    fn blur_of_constant_image_is_unchanged() {
        let img = Tensor::full(vec![3, 32, 32], 0.4);
        for x in [3, 5, 9, 21] {
            let out = blur_image(&img, BlurSpec::new(x).unwrap()).unwrap();
            for v in out.data() {
                assert!((v - 0.4).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_three_of_delta_is_ninth_plateau() {
        let mut data = vec![0.0; 11 * 11];
        data[5 * 11 + 5] = 1.0;
        let img = Tensor::new(vec![1, 11, 11], data).unwrap();
        let out = blur_image(&img, BlurSpec::new(3).unwrap()).unwrap();
        for r in 0..11 {
            for c in 0..11 {
                let v = out.data()[r * 11 + c];
                let want = if (4..=6).contains(&r) && (4..=6).contains(&c) {
                    1.0 / 9.0
                } else {
                    0.0
                };
                assert!((v - want).abs() < 1e-12, "({r},{c}): {v}");
            }
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(matches!(BlurSpec::new(4), Err(FlexError::Param(_))));
        assert!(matches!(BlurSpec::new(0), Err(FlexError::Param(_))));
    }

    #[test]
    fn blur_is_linear() {
        let a = synth_scene(21, &small_config()).unwrap().image;
        let b = synth_scene(22, &small_config()).unwrap().image;
        let spec = BlurSpec::new(5).unwrap();
        let (alpha, beta) = (0.7, -0.4);
        let mixed = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect(),
        )
        .unwrap();
        let lhs = blur_image(&mixed, spec).unwrap();
        let ba = blur_image(&a, spec).unwrap();
        let bb = blur_image(&b, spec).unwrap();
        for ((l, x), y) in lhs.data().iter().zip(ba.data()).zip(bb.data()) {
            assert!((l - (alpha * x + beta * y)).abs() < 1e-10);
        }
    }

    #[test]
    fn blur_preserves_global_mean() {
        let img = synth_scene(31, &small_config()).unwrap().image;
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
        for x in [3, 5, 9, 21] {
            let out = blur_image(&img, BlurSpec::new(x).unwrap()).unwrap();
            assert!((mean(&out) - mean(&img)).abs() < 1e-6, "kernel {x}");
        }
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let spec = BlurSpec::new(9).unwrap();
        let idx = build_dataset(4, spec, 7, &cfg, dir.path()).unwrap();
        assert_eq!(idx.len(), 4);
        let first = fs::read(idx.index_path()).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let idx2 = build_dataset(4, spec, 7, &cfg, dir2.path()).unwrap();
        let second = fs::read(idx2.index_path()).unwrap();
        assert_eq!(first, second);

        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.blur.kernel(), 9);
        assert_eq!(loaded.len(), 4);
        for i in 0..4 {
            assert_eq!(loaded.scenes[i].annotations, idx.scenes[i].annotations);
            let img = loaded.load_image(i).unwrap();
            assert_eq!(img.shape(), &[3, 64, 64]);
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let idx = build_dataset(0, BlurSpec::new(1).unwrap(), 1, &small_config(), dir.path()).unwrap();
        assert!(idx.is_empty());
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn stored_images_are_blurred_clean_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let spec = BlurSpec::new(9).unwrap();
        let idx = build_dataset(6, spec, 13, &cfg, dir.path()).unwrap();
        for i in 0..idx.len() {
            let clean = synth_scene(scene_seed(13, i), &cfg).unwrap();
            let want = blur_image(&clean.image, spec).unwrap();
            let got = idx.load_image(i).unwrap();
            assert_eq!(got, want, "scene {i}");
            // labels are copied from the clean scene, never recomputed
            assert_eq!(idx.scenes[i].annotations, clean.annotations);
        }
    }

    #[test]
    fn io_failure_cleans_partial_output() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("data");
        fs::write(&blocker, b"not a directory").unwrap();
        let out = build_dataset(2, BlurSpec::new(1).unwrap(), 1, &small_config(), &blocker);
        assert!(out.is_err());
    }
}

//! Synthetic datasets, image-to-cloud conversion and point-cloud files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point_ops::PointCloud;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Cube,
    Torus,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Torus, Shape::Cylinder];
}

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.4;
pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CYLINDER_HALF_HEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Attach part labels: torus upper/lower half, cylinder side (0) vs
    /// caps (1). Spheres and cubes get a single part.
    #[serde(default)]
    pub parts: bool,
}

/// One surface sample and its part.
fn surface_point(shape: Shape, rng: &mut impl Rng) -> ([f64; 3], usize) {
    match shape {
        Shape::Sphere => {
            let g: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
            ([g[0] / n, g[1] / n, g[2] / n], 0)
        }
        Shape::Cube => {
            let face = rng.random_range(0..6);
            let mut p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            p[face / 2] = if face % 2 == 0 { 1.0 } else { -1.0 };
            (p, 0)
        }
        Shape::Torus => {
            // Area element is proportional to R + r cos(v): rejection on v.
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            let v = loop {
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                if rng.random_range(0.0..(big + small)) <= big + small * v.cos() {
                    break v;
                }
            };
            let u = rng.random_range(0.0..std::f64::consts::TAU);
            let ring = big + small * v.cos();
            let p = [ring * u.cos(), ring * u.sin(), small * v.sin()];
            (p, usize::from(p[2] >= 0.0))
        }
        Shape::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT);
            let side = std::f64::consts::TAU * r * 2.0 * h;
            let caps = 2.0 * std::f64::consts::PI * r * r;
            let u = rng.random_range(0.0..std::f64::consts::TAU);
            if rng.random_range(0.0..side + caps) < side {
                ([r * u.cos(), r * u.sin(), rng.random_range(-h..=h)], 0)
            } else {
                let rho = r * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { h } else { -h };
                ([rho * u.cos(), rho * u.sin(), z], 1)
            }
        }
    }
}

/// Sample a shape surface, add Gaussian noise, and scale (about the origin,
/// where every shape is centered) so the farthest point has norm 1.
/// Features are the scaled coordinates.
pub fn sample_shape<T: Scalar>(spec: &ShapeSpec) -> Result<PointCloud<T>> {
    if spec.n_points < 8 {
        return Err(Error::invalid(format!("n_points must be at least 8, got {}", spec.n_points)));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise_sigma must be non-negative, got {}", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("checked sigma");
    let mut pos = Vec::with_capacity(spec.n_points * 3);
    let mut parts = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let (p, part) = surface_point(spec.shape, &mut rng);
        for v in p {
            pos.push(if spec.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v });
        }
        parts.push(part);
    }
    let max = pos.chunks_exact(3).map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    let positions: Vec<T> = pos.iter().map(|&v| T::of(v / max)).collect();
    let mut cloud = PointCloud::new(3, positions.clone(), 3, positions)?;
    if spec.parts {
        cloud.point_labels = Some(parts);
    }
    Ok(cloud)
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5DEE_CE66
}

/// `per_class` clouds of each shape; class label = index into `shapes`.
/// Returned in class-interleaved order.
pub fn generate_shapes<T: Scalar>(
    shapes: &[Shape],
    per_class: usize,
    n_points: usize,
    noise_sigma: f64,
    parts: bool,
    seed: u64,
) -> Result<Vec<PointCloud<T>>> {
    if per_class == 0 || shapes.is_empty() {
        return Err(Error::invalid("need at least one shape and one cloud per class"));
    }
    let mut out = Vec::with_capacity(per_class * shapes.len());
    for i in 0..per_class {
        for (label, &shape) in shapes.iter().enumerate() {
            let spec = ShapeSpec { shape, n_points, noise_sigma, seed: mix_seed(seed, (i * shapes.len() + label) as u64), parts };
            let mut c = sample_shape::<T>(&spec)?;
            c.class_label = Some(label);
            out.push(c);
        }
    }
    Ok(out)
}

pub const SHAPE_NOISE: f64 = 0.01;

/// `(train, test)` clouds.
pub type Split<T> = (Vec<PointCloud<T>>, Vec<PointCloud<T>>);

/// Four-class shape classification split (sphere, cube, torus, cylinder).
pub fn classification_split<T: Scalar>(n_train: usize, n_test: usize, n_points: usize, seed: u64) -> Result<Split<T>> {
    let k = Shape::ALL.len();
    let train = generate_shapes(&Shape::ALL, n_train.div_ceil(k), n_points, SHAPE_NOISE, false, seed)?;
    let test = generate_shapes(&Shape::ALL, n_test.div_ceil(k), n_points, SHAPE_NOISE, false, seed ^ 0xA5A5_A5A5)?;
    Ok((train.into_iter().take(n_train).collect(), test.into_iter().take(n_test).collect()))
}

/// Two-part segmentation split over tori and cylinders.
pub fn segmentation_split<T: Scalar>(n_train: usize, n_test: usize, n_points: usize, seed: u64) -> Result<Split<T>> {
    let shapes = [Shape::Torus, Shape::Cylinder];
    let train = generate_shapes(&shapes, n_train.div_ceil(2), n_points, SHAPE_NOISE, true, seed)?;
    let test = generate_shapes(&shapes, n_test.div_ceil(2), n_points, SHAPE_NOISE, true, seed ^ 0xA5A5_A5A5)?;
    Ok((train.into_iter().take(n_train).collect(), test.into_iter().take(n_test).collect()))
}

/// Row-major `height x width x channels` image with 8-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels || channels == 0 {
            return Err(Error::invalid(format!("{} samples for a {height}x{width}x{channels} image", data.len())));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// One 2-D point per pixel on a centered grid, scaled so the corners have
/// norm 1 (`y` grows upward). Features are samples / 255.
pub fn image_to_pointcloud<T: Scalar>(image: &Image) -> Result<PointCloud<T>> {
    if image.height != image.width {
        return Err(Error::invalid(format!("image must be square, got {}x{}", image.height, image.width)));
    }
    let side = image.width;
    let half = (side as f64 - 1.0) / 2.0;
    let scale = if side > 1 { 1.0 / (half * std::f64::consts::SQRT_2) } else { 1.0 };
    let mut pos = Vec::with_capacity(side * side * 2);
    for r in 0..side {
        for c in 0..side {
            pos.push(T::of((c as f64 - half) * scale));
            pos.push(T::of((half - r as f64) * scale));
        }
    }
    let feats = image.data.iter().map(|&v| T::of(v as f64 / 255.0)).collect();
    PointCloud::new(2, pos, image.channels, feats)
}

/// Bar pattern classes for the image task.
pub const BAR_AXIS: usize = 0;
pub const BAR_DIAGONAL: usize = 1;

/// A `side x side` grayscale image: noisy dark background with a bright
/// 2-pixel-wide bar, horizontal/vertical for [`BAR_AXIS`] and along either
/// diagonal direction for [`BAR_DIAGONAL`].
pub fn bar_image(class: usize, side: usize, rng: &mut impl Rng) -> Image {
    let mut data: Vec<u8> = (0..side * side).map(|_| rng.random_range(0..80)).collect();
    let offset = rng.random_range(-(side as i64) / 4..=(side as i64) / 4);
    let flip = rng.random::<bool>();
    for r in 0..side as i64 {
        for c in 0..side as i64 {
            let on = if class == BAR_AXIS {
                let t = if flip { c } else { r } - side as i64 / 2 - offset;
                t == 0 || t == -1
            } else {
                let t = if flip { r - c } else { r + c - (side as i64 - 1) } - offset;
                t == 0 || t == -1
            };
            if on {
                data[(r * side as i64 + c) as usize] = rng.random_range(180..=255);
            }
        }
    }
    Image { height: side, width: side, channels: 1, data }
}

/// Balanced bar images with class labels.
pub fn bar_images(n: usize, side: usize, seed: u64) -> Vec<(Image, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| (bar_image(i % 2, side, &mut rng), i % 2)).collect()
}

pub const BAR_SIDE: usize = 16;

/// Image task as point clouds: 512 train / 128 test by default.
pub fn image_cloud_split<T: Scalar>(n_train: usize, n_test: usize, seed: u64) -> Result<Split<T>> {
    let conv = |set: Vec<(Image, usize)>| -> Result<Vec<PointCloud<T>>> {
        set.iter()
            .map(|(img, label)| {
                let mut c = image_to_pointcloud(img)?;
                c.class_label = Some(*label);
                Ok(c)
            })
            .collect()
    };
    Ok((conv(bar_images(n_train, BAR_SIDE, seed))?, conv(bar_images(n_test, BAR_SIDE, seed ^ 0xA5A5_A5A5))?))
}

// ---------------------------------------------------------------- files

const PCB_MAGIC: &[u8; 4] = b"PCB1";
const LABEL_CLOUD: u8 = 1;
const LABEL_POINTS: u8 = 2;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Encode as `.pcb`: `PCB1`, `u32` N, d, C, f32 LE positions then
/// features, then an optional `u8` flag (bit 0: `u32` cloud label, bit 1:
/// N `u32` point labels) followed by those labels.
pub fn encode_pcb<T: Scalar>(cloud: &PointCloud<T>) -> Vec<u8> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(16 + 4 * n * (cloud.dim + cloud.channels));
    buf.extend_from_slice(PCB_MAGIC);
    for v in [n, cloud.dim, cloud.channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in cloud.positions.iter().chain(&cloud.features) {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    let flag =
        if cloud.class_label.is_some() { LABEL_CLOUD } else { 0 } | if cloud.point_labels.is_some() { LABEL_POINTS } else { 0 };
    if flag != 0 {
        buf.push(flag);
        if let Some(l) = cloud.class_label {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &l in cloud.point_labels.iter().flatten() {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_pcb<T: Scalar>(buf: &[u8], path: &Path) -> Result<PointCloud<T>> {
    let need = |expected: usize| -> Result<()> {
        if buf.len() < expected {
            Err(Error::Truncated { path: path.to_path_buf(), expected, actual: buf.len() })
        } else {
            Ok(())
        }
    };
    need(16)?;
    if &buf[..4] != PCB_MAGIC {
        return Err(format_err(path, "bad magic, expected PCB1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, dim, ch) = (u32_at(4), u32_at(8), u32_at(12));
    let body = 16 + 4 * n * (dim + ch);
    need(body)?;
    let floats: Vec<T> =
        buf[16..body].chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect();
    let (positions, features) = floats.split_at(n * dim);
    let mut cloud =
        PointCloud::new(dim, positions.to_vec(), ch, features.to_vec()).map_err(|e| format_err(path, e.to_string()))?;
    if buf.len() > body {
        let flag = buf[body];
        if flag & !(LABEL_CLOUD | LABEL_POINTS) != 0 || flag == 0 {
            return Err(format_err(path, format!("unknown label flag {flag}")));
        }
        let mut o = body + 1;
        if flag & LABEL_CLOUD != 0 {
            need(o + 4)?;
            cloud.class_label = Some(u32_at(o));
            o += 4;
        }
        if flag & LABEL_POINTS != 0 {
            need(o + 4 * n)?;
            cloud.point_labels = Some((0..n).map(|i| u32_at(o + 4 * i)).collect());
            o += 4 * n;
        }
        if o != buf.len() {
            return Err(format_err(path, format!("{} trailing bytes", buf.len() - o)));
        }
    }
    Ok(cloud)
}

/// `.xyz` text: one point per line, `x y z` then features. Blank lines and
/// lines starting with `#` are skipped. Labels are not stored.
pub fn encode_xyz<T: Scalar>(cloud: &PointCloud<T>) -> Result<String> {
    if cloud.dim != 3 {
        return Err(Error::invalid(format!(".xyz holds 3-d points, cloud is {}-d", cloud.dim)));
    }
    let mut s = String::new();
    for i in 0..cloud.len() {
        let row: Vec<String> = cloud.position(i).iter().chain(cloud.feature(i)).map(|v| format!("{}", v.f64())).collect();
        writeln!(s, "{}", row.join(" ")).expect("string write");
    }
    Ok(s)
}

pub fn decode_xyz<T: Scalar>(text: &str, path: &Path) -> Result<PointCloud<T>> {
    let mut cols = None;
    let mut positions = Vec::new();
    let mut features = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", ln + 1)))?;
        let want = *cols.get_or_insert(vals.len());
        if vals.len() != want {
            return Err(format_err(path, format!("line {}: {} columns, expected {want}", ln + 1, vals.len())));
        }
        if want < 3 {
            return Err(format_err(path, format!("line {}: need at least 3 columns", ln + 1)));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, format!("line {}: non-finite value", ln + 1)));
        }
        positions.extend(vals[..3].iter().map(|&v| T::of(v)));
        features.extend(vals[3..].iter().map(|&v| T::of(v)));
    }
    let cols = cols.ok_or_else(|| format_err(path, "no points"))?;
    PointCloud::new(3, positions, cols - 3, features).map_err(|e| format_err(path, e.to_string()))
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

pub fn save_cloud<T: Scalar>(cloud: &PointCloud<T>, path: &Path) -> Result<()> {
    let bytes = match extension(path) {
        Some("pcb") => encode_pcb(cloud),
        Some("xyz") => encode_xyz(cloud)?.into_bytes(),
        _ => return Err(format_err(path, "unsupported extension; use .xyz or .pcb")),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_cloud<T: Scalar>(path: &Path) -> Result<PointCloud<T>> {
    match extension(path) {
        Some("pcb") => decode_pcb(&std::fs::read(path).map_err(|e| Error::io(path, e))?, path),
        Some("xyz") => decode_xyz(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path),
        _ => Err(format_err(path, "unsupported extension; use .xyz or .pcb")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

/// JSON list of cloud files with optional class labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<crate::network::Task>,
    #[serde(default)]
    pub classes: usize,
    pub clouds: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load every listed cloud; a manifest label overrides the file's.
    pub fn load_clouds<T: Scalar>(&self, manifest_path: &Path) -> Result<Vec<PointCloud<T>>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.clouds
            .iter()
            .map(|e| {
                let p = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
                let mut c = load_cloud::<T>(&p)?;
                if e.label.is_some() {
                    c.class_label = e.label;
                }
                Ok(c)
            })
            .collect()
    }
}

/// Write `clouds` as numbered `.pcb` files under `dir/name/` plus a
/// manifest `dir/name.json`. Returns the manifest path.
pub fn write_dataset<T: Scalar>(
    dir: &Path,
    name: &str,
    clouds: &[PointCloud<T>],
    task: Option<crate::network::Task>,
    classes: usize,
) -> Result<PathBuf> {
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut manifest = Manifest { task, classes, clouds: Vec::with_capacity(clouds.len()) };
    for (i, c) in clouds.iter().enumerate() {
        let rel = PathBuf::from(name).join(format!("{i:05}.pcb"));
        save_cloud(c, &dir.join(&rel))?;
        manifest.clouds.push(ManifestEntry { path: rel, label: c.class_label });
    }
    let path = dir.join(format!("{name}.json"));
    manifest.save(&path)?;
    Ok(path)
}

//! Procedural manipulated/authentic samples, distortions and the on-disk
//! dataset layout.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Authentic,
    CopyMove,
    Splice,
    Removal,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Authentic, Kind::CopyMove, Kind::Splice, Kind::Removal];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Authentic => "authentic",
            Kind::CopyMove => "copy_move",
            Kind::Splice => "splice",
            Kind::Removal => "removal",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sample kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W in [0,1].
    pub image: Tensor,
    /// 1×H×W with values in {0,1}.
    pub mask: Tensor,
    pub kind: Kind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Outline {
    Rect,
    Ellipse,
}

/// An axis-aligned rectangle or the ellipse inscribed in it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    outline: Outline,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        if i < self.top || j < self.left || i >= self.top + self.height || j >= self.left + self.width {
            return false;
        }
        match self.outline {
            Outline::Rect => true,
            Outline::Ellipse => {
                let cy = self.top as f64 + (self.height as f64 - 1.0) / 2.0;
                let cx = self.left as f64 + (self.width as f64 - 1.0) / 2.0;
                let dy = (i as f64 - cy) / (self.height as f64 / 2.0);
                let dx = (j as f64 - cx) / (self.width as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn mask(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|p| self.contains(p / size, p % size)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Shape {
    pub region: Region,
    pub color: [f64; 3],
}

/// A base image and the shapes drawn into it.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Union of all shapes as a 1×H×W binary mask.
    pub fn foreground(&self) -> Tensor {
        let size = self.image.shape()[1];
        Tensor::from_fn(&[1, size, size], |p| {
            self.shapes.iter().any(|s| s.region.contains(p / size, p % size)) as u8 as f64
        })
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

const MIN_CONTRAST: f64 = 0.35;

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_outline<R: Rng + ?Sized>(rng: &mut R) -> Outline {
    if rng.random_bool(0.5) {
        Outline::Rect
    } else {
        Outline::Ellipse
    }
}

/// Smooth two-colour gradient, one to three flat shapes, then a
/// band-limited sinusoidal texture over everything.
pub fn gen_scene(seed: u64, size: usize) -> Scene {
    let mut rng = stream(seed, "scene", 0);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    let half = (size as f64 - 1.0) / 2.0;
    let norm = half * std::f64::consts::SQRT_2;
    for p in 0..n {
        let (i, j) = ((p / size) as f64 - half, (p % size) as f64 - half);
        let t = 0.5 + 0.5 * (i * dy + j * dx) / norm;
        for ch in 0..3 {
            data[ch * n + p] = c0[ch] + (c1[ch] - c0[ch]) * t;
        }
    }
    let count = rng.random_range(1..=3);
    let min_r = (size / 16).max(1);
    let max_r = ((size as f64 * 0.22) as usize).max(min_r);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let ry = rng.random_range(min_r..=max_r);
        let rx = rng.random_range(min_r..=max_r);
        let (height, width) = (2 * ry + 1, 2 * rx + 1);
        let region = Region {
            outline: random_outline(&mut rng),
            top: rng.random_range(0..=size - height),
            left: rng.random_range(0..=size - width),
            height,
            width,
        };
        let centre = (region.top + ry) * size + region.left + rx;
        let behind = [data[centre], data[n + centre], data[2 * n + centre]];
        let mut color = random_color(&mut rng);
        // keep every shape distinguishable from what it is drawn over
        for _ in 0..64 {
            if color_distance(color, behind) >= MIN_CONTRAST
                && shapes
                    .iter()
                    .all(|s: &Shape| color_distance(color, s.color) >= MIN_CONTRAST)
            {
                break;
            }
            color = random_color(&mut rng);
        }
        for p in 0..n {
            if region.contains(p / size, p % size) {
                for ch in 0..3 {
                    data[ch * n + p] = color[ch];
                }
            }
        }
        shapes.push(Shape { region, color });
    }
    for ch in 0..3 {
        for _ in 0..6 {
            let amp: f64 = rng.random_range(0.005..0.025);
            let fy: f64 = rng.random_range(-6.0..6.0);
            let fx: f64 = rng.random_range(-6.0..6.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for p in 0..n {
                let (i, j) = ((p / size) as f64, (p % size) as f64);
                let arg = std::f64::consts::TAU * (fy * i + fx * j) / size as f64 + phase;
                data[ch * n + p] += amp * arg.sin();
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Scene {
        image: Tensor::new(&[3, size, size], data).expect("scene shape"),
        shapes,
    }
}

pub fn gen_base_image(seed: u64, size: usize) -> Tensor {
    gen_scene(seed, size).image
}

fn mask_tensor(mask: &[bool], size: usize) -> Tensor {
    Tensor::from_fn(&[1, size, size], |p| mask[p] as u8 as f64)
}

fn area_ok(mask: &[bool]) -> bool {
    let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    (0.01..=0.40).contains(&frac)
}

fn random_region<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Outline, usize, usize) {
    let lo = (size / 8).max(1);
    let hi = ((size as f64 * 0.56) as usize).max(lo);
    (
        random_outline(rng),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    )
}

/// Fills `dst_region` of `dst` from the same-shaped window of `src_img`
/// anchored at `(src_top, src_left)`.
fn paste(dst: &mut Tensor, src_img: &Tensor, dst_region: &Region, src_top: usize, src_left: usize) {
    let size = dst.shape()[1];
    let n = size * size;
    let src = src_img.data().to_vec();
    let out = dst.data_mut();
    for i in 0..size {
        for j in 0..size {
            if dst_region.contains(i, j) {
                let si = i - dst_region.top + src_top;
                let sj = j - dst_region.left + src_left;
                for ch in 0..3 {
                    out[ch * n + i * size + j] = src[ch * n + si * size + sj];
                }
            }
        }
    }
}

/// Copies a region of `img` to another place in the same image.
pub fn apply_copy_move(img: &Tensor, seed: u64) -> (Tensor, Tensor) {
    let size = img.shape()[1];
    let mut rng = stream(seed, "copy_move", 0);
    loop {
        let (outline, height, width) = random_region(size, &mut rng);
        let src_top = rng.random_range(0..=size - height);
        let src_left = rng.random_range(0..=size - width);
        let dst = Region {
            outline,
            top: rng.random_range(0..=size - height),
            left: rng.random_range(0..=size - width),
            height,
            width,
        };
        let shift = (dst.top as isize - src_top as isize)
            .abs()
            .max((dst.left as isize - src_left as isize).abs()) as usize;
        if shift < height.max(width) / 2 {
            continue;
        }
        let mask = dst.mask(size);
        if !area_ok(&mask) {
            continue;
        }
        let mut out = img.clone();
        paste(&mut out, img, &dst, src_top, src_left);
        return (out, mask_tensor(&mask, size));
    }
}

/// Pastes a region of `donor` into `img`.
pub fn apply_splice(img: &Tensor, donor: &Tensor, seed: u64) -> (Tensor, Tensor) {
    let size = img.shape()[1];
    let mut rng = stream(seed, "splice", 0);
    loop {
        let (outline, height, width) = random_region(size, &mut rng);
        let src_top = rng.random_range(0..=size - height);
        let src_left = rng.random_range(0..=size - width);
        let dst = Region {
            outline,
            top: rng.random_range(0..=size - height),
            left: rng.random_range(0..=size - width),
            height,
            width,
        };
        let mask = dst.mask(size);
        if !area_ok(&mask) {
            continue;
        }
        let mut out = img.clone();
        paste(&mut out, donor, &dst, src_top, src_left);
        return (out, mask_tensor(&mask, size));
    }
}

fn dilate(mask: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for i in 0..size {
        for j in 0..size {
            let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(size - 1));
            let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(size - 1));
            out[i * size + j] = (i0..=i1).any(|a| (j0..=j1).any(|b| mask[a * size + b]));
        }
    }
    out
}

/// Removes one shape: fills it with the mean of a surrounding ring and
/// blurs the fill.
pub fn apply_removal(scene: &Scene, seed: u64) -> (Tensor, Tensor) {
    let img = &scene.image;
    let size = img.shape()[1];
    let n = size * size;
    let mut rng = stream(seed, "removal", 0);
    let mut order: Vec<usize> = (0..scene.shapes.len()).collect();
    order.shuffle(&mut rng);
    let mut mask = None;
    for &idx in &order {
        let m = dilate(&scene.shapes[idx].region.mask(size), size, 1);
        if area_ok(&m) {
            mask = Some(m);
            break;
        }
    }
    // shapes are sized to fit the area bounds; this is only a fallback
    let mask = mask.unwrap_or_else(|| {
        let r = scene.shapes[order[0]].region;
        let side = (size / 4).max(1);
        Region {
            outline: Outline::Rect,
            top: r.top.min(size - side),
            left: r.left.min(size - side),
            height: side,
            width: side,
        }
        .mask(size)
    });
    let wide = dilate(&mask, size, 2);
    let mut filled = img.clone();
    {
        let src = img.data();
        let ring: Vec<usize> = (0..n).filter(|&p| wide[p] && !mask[p]).collect();
        let out = filled.data_mut();
        for ch in 0..3 {
            let mean = if ring.is_empty() {
                src[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64
            } else {
                ring.iter().map(|&p| src[ch * n + p]).sum::<f64>() / ring.len() as f64
            };
            for p in 0..n {
                if mask[p] {
                    out[ch * n + p] = mean;
                }
            }
        }
    }
    let blurred = gaussian_blur(&filled, 5).expect("odd kernel");
    let mut out = img.clone();
    let (b, o) = (blurred.data(), out.data_mut());
    for ch in 0..3 {
        for p in 0..n {
            if mask[p] {
                o[ch * n + p] = b[ch * n + p];
            }
        }
    }
    (out, mask_tensor(&mask, size))
}

/// Builds the sample of the given kind from a seed.
pub fn generate_sample(seed: u64, kind: Kind, size: usize) -> Sample {
    let scene = gen_scene(seed, size);
    let (image, mask) = match kind {
        Kind::Authentic => (scene.image.clone(), Tensor::zeros(&[1, size, size])),
        Kind::CopyMove => apply_copy_move(&scene.image, seed),
        Kind::Splice => {
            let donor = gen_base_image(derive_seed(seed, "donor", 0), size);
            apply_splice(&scene.image, &donor, seed)
        }
        Kind::Removal => apply_removal(&scene, seed),
    };
    Sample {
        image,
        mask,
        kind,
        seed,
    }
}

/// A clean scene whose target is the union of its shapes.
pub fn proxy_sample(seed: u64, size: usize) -> Sample {
    let scene = gen_scene(seed, size);
    Sample {
        mask: scene.foreground(),
        image: scene.image,
        kind: Kind::Authentic,
        seed,
    }
}

/// Relative frequency of each kind.
#[derive(Clone, Debug, PartialEq)]
pub struct KindMix {
    pub weights: [f64; 4],
}

impl Default for KindMix {
    fn default() -> Self {
        KindMix { weights: [0.25; 4] }
    }
}

impl KindMix {
    pub fn manipulated_only() -> Self {
        KindMix {
            weights: [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(
                "kind weights must be >= 0 with a positive sum".into(),
            ));
        }
        Ok(())
    }

    /// Largest-remainder counts summing to `total`.
    pub fn counts(&self, total: usize) -> Vec<usize> {
        let sum: f64 = self.weights.iter().sum();
        let exact: Vec<f64> = self.weights.iter().map(|w| w / sum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..4).collect();
        rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let missing = total - counts.iter().sum::<usize>();
        for &k in rest.iter().take(missing) {
            counts[k] += 1;
        }
        counts
    }
}

/// The kind of each index of a split, shuffled deterministically.
pub fn assign_kinds(master: u64, split: &str, total: usize, mix: &KindMix) -> Vec<Kind> {
    let mut kinds: Vec<Kind> = mix
        .counts(total)
        .iter()
        .zip(Kind::ALL)
        .flat_map(|(&c, k)| std::iter::repeat_n(k, c))
        .collect();
    kinds.shuffle(&mut stream(master, &format!("kinds.{split}"), 0));
    kinds
}

/// Generates a split with a pool of worker threads feeding a bounded queue.
pub fn generate_split(master: u64, split: &str, total: usize, mix: &KindMix, size: usize) -> Vec<Sample> {
    let kinds = assign_kinds(master, split, total, mix);
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(total.max(1));
    let mut out: Vec<Option<Sample>> = vec![None; total];
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Sample)>(2 * workers);
        for w in 0..workers {
            let tx = tx.clone();
            let kinds = &kinds;
            scope.spawn(move || {
                for idx in (w..total).step_by(workers) {
                    let seed = derive_seed(master, split, idx as u64);
                    if tx.send((idx, generate_sample(seed, kinds[idx], size))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        for (idx, s) in rx {
            out[idx] = Some(s);
        }
    });
    out.into_iter().map(|s| s.expect("every index generated")).collect()
}

pub fn proxy_split(master: u64, split: &str, total: usize, size: usize) -> Vec<Sample> {
    (0..total)
        .map(|idx| proxy_sample(derive_seed(master, split, idx as u64), size))
        .collect()
}

/// Writes `{dir}/{split}/{index}_img.ppm`, `{index}_mask.pgm` and a
/// `manifest.txt` of `index kind seed` lines.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let root = dir.join(split);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut manifest = String::new();
    for (idx, s) in samples.iter().enumerate() {
        write_ppm(&root.join(format!("{idx}_img.ppm")), &s.image)?;
        write_pgm(&root.join(format!("{idx}_mask.pgm")), &s.mask)?;
        manifest.push_str(&format!("{idx} {} {}\n", s.kind, s.seed));
    }
    let path = root.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let root = dir.join(split);
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format("manifest", format!("line {}: expected 'index kind seed'", line_no + 1));
        let mut parts = line.split_whitespace();
        let idx: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let kind: Kind = parts.next().ok_or_else(bad)?.parse()?;
        let seed: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let image = read_ppm(&root.join(format!("{idx}_img.ppm")))?;
        let mask = read_pgm(&root.join(format!("{idx}_mask.pgm")))?;
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format("mask", format!("{idx}_mask.pgm is not binary")));
        }
        samples.push(Sample {
            image,
            mask,
            kind,
            seed,
        });
    }
    Ok(samples)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    /// Gaussian blur with an odd kernel size.
    Blur(usize),
    /// Additive Gaussian noise, σ in 0–255 units.
    Noise(f64),
    /// Resize down by the factor, then back to the original size.
    Resize(f64),
}

impl Distortion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distortion::Blur(k) if k % 2 == 1 => Ok(()),
            Distortion::Noise(s) if s >= 0.0 && s.is_finite() => Ok(()),
            Distortion::Resize(s) if s > 0.0 && s <= 1.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid distortion {other}"))),
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::Blur(k) => write!(f, "blur:{k}"),
            Distortion::Noise(s) => write!(f, "noise:{s}"),
            Distortion::Resize(s) => write!(f, "resize:{s}"),
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "bad distortion '{s}' (expected blur:K, noise:SIGMA or resize:S)"
            ))
        };
        let (kind, param) = s.split_once(':').ok_or_else(bad)?;
        let d = match kind {
            "blur" => Distortion::Blur(param.parse().map_err(|_| bad())?),
            "noise" => Distortion::Noise(param.parse().map_err(|_| bad())?),
            "resize" => Distortion::Resize(param.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Mild and severe level of each robustness distortion.
pub fn robustness_grid() -> [(Distortion, Distortion); 3] {
    [
        (Distortion::Blur(3), Distortion::Blur(15)),
        (Distortion::Noise(3.0), Distortion::Noise(15.0)),
        (Distortion::Resize(0.78), Distortion::Resize(0.25)),
    ]
}

/// Kernel σ used for a blur of size `k` when none is given.
pub fn default_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = default_sigma(k);
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with replicated borders on a C×H×W tensor.
pub fn gaussian_blur(img: &Tensor, k: usize) -> Result<Tensor> {
    Distortion::Blur(k).validate()?;
    if k == 1 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.dims3()?;
    let kern = gaussian_kernel(k);
    let r = (k / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kern.iter().enumerate() {
                    let jj = (j as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[ch * h * w + i * w + jj];
                }
                tmp[ch * h * w + i * w + j] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kern.iter().enumerate() {
                    let ii = (i as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[ch * h * w + ii * w + j];
                }
                out[ch * h * w + i * w + j] = acc;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Half-pixel-centred bilinear resampling of a C×H×W tensor.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = img.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[ch * out_h * out_w + oi * out_w + oj] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Applies a distortion; `seed` drives the noise.
pub fn distort(img: &Tensor, d: Distortion, seed: u64) -> Result<Tensor> {
    d.validate()?;
    match d {
        Distortion::Blur(k) => gaussian_blur(img, k),
        Distortion::Noise(sigma) => {
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = stream(seed, "noise", 0);
            let data = img
                .data()
                .iter()
                .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            Tensor::new(img.shape(), data)
        }
        Distortion::Resize(s) => {
            if s == 1.0 {
                return Ok(img.clone());
            }
            let (_, h, w) = img.dims3()?;
            let sh = ((h as f64 * s).round() as usize).max(1);
            let sw = ((w as f64 * s).round() as usize).max(1);
            let small = resize_bilinear(img, sh, sw)?;
            resize_bilinear(&small, h, w)
        }
    }
}

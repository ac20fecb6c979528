//! Deterministic synthetic binary-segmentation data: soft-edged ellipses
//! over a noisy gradient background, exact analytic masks, 16-bit PGM I/O,
//! and the multi-scale training transform.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{resize_bilinear, Tensor};

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad PGM in {path}: {msg}")]
    BadPgm { path: PathBuf, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Blurred,
    SmallObject,
    MultiObject,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] =
        [Difficulty::Easy, Difficulty::Blurred, Difficulty::SmallObject, Difficulty::MultiObject];

    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Blurred => "blurred",
            Difficulty::SmallObject => "small-object",
            Difficulty::MultiObject => "multi-object",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "blurred" => Ok(Difficulty::Blurred),
            "small-object" => Ok(Difficulty::SmallObject),
            "multi-object" => Ok(Difficulty::MultiObject),
            other => Err(format!("unknown difficulty '{other}' (easy|blurred|small-object|multi-object)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
    pub difficulty: Difficulty,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized elliptic radius: <= 1 inside the ellipse.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Deterministic pure function of (seed, difficulty, size).
pub fn generate_sample(seed: u64, difficulty: Difficulty, size: usize) -> Result<Sample, DataError> {
    if size % 32 != 0 || size == 0 {
        return Err(DataError::InvalidArgument(format!(
            "size {size} must be a positive multiple of 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ difficulty as u64);
    let s = size as f64;

    // per-difficulty regime: object count, axis range (fraction of size),
    // foreground intensity offset, edge softness (fraction of size)
    let (count, ax_lo, ax_hi, fg_offset, edge) = match difficulty {
        Difficulty::Easy => (1, 0.16, 0.28, 0.45, 0.015),
        Difficulty::Blurred => (1, 0.14, 0.26, 0.25, 0.12),
        // axes sized so the foreground fraction stays within [0.5%, 5%]
        Difficulty::SmallObject => (1, 0.045, 0.095, 0.40, 0.02),
        Difficulty::MultiObject => (3, 0.07, 0.13, 0.40, 0.02),
    };

    let mut ellipses = Vec::with_capacity(count);
    for _ in 0..count {
        let a = (ax_lo + rng.gen::<f64>() * (ax_hi - ax_lo)) * s;
        let b = (ax_lo + rng.gen::<f64>() * (ax_hi - ax_lo)) * s;
        let margin = a.max(b) + 1.5;
        let cx = margin + rng.gen::<f64>() * (s - 2.0 * margin);
        let cy = margin + rng.gen::<f64>() * (s - 2.0 * margin);
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        ellipses.push(Ellipse { cx, cy, a, b, theta });
    }

    // background: base level + linear gradient in a random direction
    let base = 0.18 + rng.gen::<f64>() * 0.08;
    let grad_dir = rng.gen::<f64>() * std::f64::consts::TAU;
    let grad_amp = 0.04 + rng.gen::<f64>() * 0.04;
    let noise_amp = 0.02;
    let noise_seed = rng.gen::<u64>();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let mut image = Tensor::zeros(&[1, 1, size, size]);
    let mut mask = Tensor::zeros(&[1, 1, size, size]);
    let soft = edge * s;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = ((fx / s - 0.5) * grad_dir.cos() + (fy / s - 0.5) * grad_dir.sin()) * 2.0;
            let mut v = base + grad_amp * t;
            let mut inside = false;
            for e in &ellipses {
                let r = e.radius(fx, fy);
                if r <= 1.0 {
                    inside = true;
                }
                // soft falloff across the boundary
                let fall = 1.0 - ((r - 1.0) / (soft / e.a.min(e.b))).max(0.0);
                if fall > 0.0 {
                    v += fg_offset * fall.min(1.0);
                }
            }
            v += noise_amp * (noise_rng.gen::<f64>() * 2.0 - 1.0);
            image.set4(0, 0, y, x, v.clamp(0.0, 1.0));
            if inside {
                mask.set4(0, 0, y, x, 1.0);
            }
        }
    }
    Ok(Sample {
        image,
        mask,
        id: format!("{}-{:08}", difficulty.as_str(), seed),
        difficulty,
    })
}

/// Rescale a sample and restore the original frame size: bilinear for the
/// image, nearest-neighbor for the mask, then center pad/crop back to the
/// (multiple-of-32) input size.
pub fn multi_scale(sample: &Sample, ratio: f64) -> Result<Sample, DataError> {
    let (_, _, h, w) = sample.image.dims4().map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    if (ratio - 1.0).abs() < 1e-12 {
        return Ok(sample.clone());
    }
    let nh = ((h as f64 * ratio).round() as usize).max(1);
    let nw = ((w as f64 * ratio).round() as usize).max(1);
    let scaled_img = resize_bilinear(&sample.image, nh, nw)
        .map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    let scaled_mask = resize_nearest(&sample.mask, nh, nw);
    Ok(Sample {
        image: center_fit(&scaled_img, h, w, 0.0),
        mask: center_fit(&scaled_mask, h, w, 0.0),
        id: sample.id.clone(),
        difficulty: sample.difficulty,
    })
}

fn resize_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = input.dims4().unwrap();
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..out_h {
                let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
                for ox in 0..out_w {
                    let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
                    out.set4(ni, ci, oy, ox, input.at4(ni, ci, sy, sx));
                }
            }
        }
    }
    out
}

/// Center crop or zero-pad to the target frame.
fn center_fit(input: &Tensor, target_h: usize, target_w: usize, fill: f64) -> Tensor {
    let (n, c, h, w) = input.dims4().unwrap();
    let mut out = Tensor::filled(&[n, c, target_h, target_w], fill);
    let copy_h = h.min(target_h);
    let copy_w = w.min(target_w);
    let src_y = (h.saturating_sub(target_h)) / 2;
    let src_x = (w.saturating_sub(target_w)) / 2;
    let dst_y = (target_h.saturating_sub(h)) / 2;
    let dst_x = (target_w.saturating_sub(w)) / 2;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..copy_h {
                for x in 0..copy_w {
                    out.set4(ni, ci, dst_y + y, dst_x + x, input.at4(ni, ci, src_y + y, src_x + x));
                }
            }
        }
    }
    out
}

/// Write a [1,1,H,W] tensor in [0,1] as binary 16-bit PGM (P5, big-endian).
pub fn save_pgm(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (_, _, h, w) = image
        .dims4()
        .map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    let mut buf = Vec::with_capacity(32 + 2 * h * w);
    buf.extend_from_slice(format!("P5\n{} {}\n65535\n", w, h).as_bytes());
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn load_pgm(path: &Path) -> Result<Tensor, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let bad = |msg: &str| DataError::BadPgm { path: path.to_path_buf(), msg: msg.into() };
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    if tokens[0] != "P5" {
        return Err(bad(&format!("expected binary P5, got {} (ASCII P2 is not supported)", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    if tokens[3] != "65535" {
        return Err(bad(&format!("expected maxval 65535, got {}", tokens[3])));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() - pos < 2 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let hi = bytes[pos + 2 * i] as u16;
        let lo = bytes[pos + 2 * i + 1] as u16;
        data.push(((hi << 8) | lo) as f64 / 65535.0);
    }
    Tensor::from_vec(&[1, 1, h, w], data).map_err(|e| bad(&e.to_string()))
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub size: usize,
    /// None = cycle through all difficulties.
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub difficulty: Difficulty,
}

/// Generate the dataset directory: `<root>/<split>/<id>.img.pgm` and
/// `<id>.mask.pgm`, plus `manifest.csv`.
pub fn generate_dataset(root: &Path, spec: &SplitSpec) -> Result<Vec<ManifestEntry>, DataError> {
    let mut entries = Vec::new();
    let mut next_seed = spec.seed.wrapping_mul(1_000_003);
    for (split, count) in [("train", spec.train), ("test", spec.test)] {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
        for i in 0..count {
            let difficulty = spec
                .difficulty
                .unwrap_or(Difficulty::ALL[i % Difficulty::ALL.len()]);
            let sample = generate_sample(next_seed, difficulty, spec.size)?;
            save_pgm(&dir.join(format!("{}.img.pgm", sample.id)), &sample.image)?;
            save_pgm(&dir.join(format!("{}.mask.pgm", sample.id)), &sample.mask)?;
            entries.push(ManifestEntry {
                id: sample.id.clone(),
                split: split.to_string(),
                seed: next_seed,
                difficulty,
            });
            next_seed = next_seed.wrapping_add(1);
        }
    }
    let manifest = root.join("manifest.csv");
    let mut out = String::from("id,split,seed,difficulty\n");
    for e in &entries {
        out.push_str(&format!("{},{},{},{}\n", e.id, e.split, e.seed, e.difficulty.as_str()));
    }
    fs::write(&manifest, out).map_err(|source| DataError::Io { path: manifest, source })?;
    Ok(entries)
}

/// Load one split back from disk, in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>, DataError> {
    let manifest = root.join("manifest.csv");
    let text = fs::read_to_string(&manifest)
        .map_err(|source| DataError::Io { path: manifest.clone(), source })?;
    let mut samples = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 || fields[1] != split {
            continue;
        }
        let id = fields[0];
        let difficulty: Difficulty = fields[3]
            .parse()
            .map_err(|e: String| DataError::InvalidArgument(e))?;
        let dir = root.join(split);
        let image = load_pgm(&dir.join(format!("{id}.img.pgm")))?;
        let mut mask = load_pgm(&dir.join(format!("{id}.mask.pgm")))?;
        // re-binarize against quantization
        mask.data_mut().iter_mut().for_each(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
        samples.push(Sample { image, mask, id: id.to_string(), difficulty });
    }
    Ok(samples)
}

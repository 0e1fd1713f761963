//! Label-free window/door proposals from a grayscale facade image.
//!
//! Edge, local-variance and optional patch-coherence cues are fused into a
//! saliency map. A two-component mixture over (intensity, saliency) keeps the
//! facade region, a second mixture on saliency inside it gives foreground
//! blobs, and externally produced candidate scores select the final boxes.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facade::{Category, DetectionBox};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Quarter turn: new pixel `(x, y)` is old `(y, width - 1 - x)`.
    pub fn rotated(&self) -> Self {
        let (w, h) = (self.height, self.width);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(self.width - 1 - y, x));
            }
        }
        Self { width: w, height: h, data }
    }
}

fn pgm_token(r: &mut impl BufRead) -> Result<String> {
    let bad = |m: String| Error::invalid(format!("pgm: {m}"));
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| bad(e.to_string()))? == 0 {
            return if tok.is_empty() {
                Err(bad("unexpected end of header".into()))
            } else {
                Ok(tok)
            };
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip).map_err(|e| bad(e.to_string()))?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            c => tok.push(c as char),
        }
    }
}

/// Reads a binary 8-bit PGM (`P5`).
pub fn read_pgm(mut r: impl BufRead) -> Result<GrayImage> {
    let magic = pgm_token(&mut r)?;
    if magic != "P5" {
        return Err(Error::invalid(format!("pgm: expected magic `P5`, got `{magic}`")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = pgm_token(&mut r)?;
        t.parse().map_err(|_| Error::invalid(format!("pgm: bad {what} `{t}`")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max == 0 || max > 255 {
        return Err(Error::invalid(format!("pgm: maxval {max} unsupported (8-bit only)")));
    }
    let mut data = vec![0u8; w * h];
    r.read_exact(&mut data)
        .map_err(|_| Error::invalid(format!("pgm: pixel data shorter than {w}x{h}")))?;
    GrayImage::new(w, h, data)
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pgm(std::io::BufReader::new(f))
}

pub fn write_pgm(mut w: impl Write, img: &GrayImage) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)
}

/// Per-pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    /// Min-max normalization. A constant map has nothing to stretch and
    /// keeps its value, clamped into `[0, 1]`.
    pub fn normalized(width: usize, height: usize, raw: Vec<f64>) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = if hi > lo {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            raw.iter().map(|v| v.clamp(0.0, 1.0)).collect()
        };
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Unnormalized Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(img: &GrayImage) -> Result<Vec<f64>> {
    if img.width < 3 || img.height < 3 {
        return Err(Error::invalid(format!(
            "sobel needs at least 3x3 pixels, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width as isize, img.height as isize);
    let px = |x: isize, y: isize| i32::from(img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize));
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let gx = px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2 * px(x - 1, y)
                - px(x - 1, y + 1);
            let gy = px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2 * px(x, y - 1)
                - px(x + 1, y - 1);
            out.push(f64::from(gx * gx + gy * gy).sqrt());
        }
    }
    Ok(out)
}

pub fn sobel_map(img: &GrayImage) -> Result<SaliencyMap> {
    Ok(SaliencyMap::normalized(img.width, img.height, sobel_magnitude(img)?))
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("variance window must be odd and >= 3, got {window}")));
    }
    Ok(())
}

/// Population variance of `n` values from their sum and sum of squares,
/// formed in integers so every evaluation order gives the same result.
fn variance_from_sums(n: u64, sum: u64, sum_sq: u64) -> f64 {
    let num = u128::from(n) * u128::from(sum_sq) - u128::from(sum) * u128::from(sum);
    num as f64 / (n * n) as f64
}

/// Unnormalized local variance over a `window` x `window` neighbourhood,
/// clipped at the image border, from integral images.
pub fn local_variance(img: &GrayImage, window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    let (w, h) = (img.width, img.height);
    let stride = w + 1;
    let mut s = vec![0u64; stride * (h + 1)];
    let mut sq = vec![0u64; stride * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = u64::from(img.get(x, y));
            let i = (y + 1) * stride + x + 1;
            s[i] = v + s[i - 1] + s[i - stride] - s[i - stride - 1];
            sq[i] = v * v + sq[i - 1] + sq[i - stride] - sq[i - stride - 1];
        }
    }
    let r = window / 2;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let rect = |t: &[u64]| t[y1 * stride + x1] + t[y0 * stride + x0] - t[y0 * stride + x1] - t[y1 * stride + x0];
            let n = ((y1 - y0) * (x1 - x0)) as u64;
            out.push(variance_from_sums(n, rect(&s), rect(&sq)));
        }
    }
    Ok(out)
}

/// Direct per-window evaluation of [`local_variance`].
pub fn local_variance_naive(img: &GrayImage, window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    let r = window / 2;
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let (mut n, mut sum, mut sum_sq) = (0u64, 0u64, 0u64);
            for yy in y.saturating_sub(r)..(y + r + 1).min(img.height) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(img.width) {
                    let v = u64::from(img.get(xx, yy));
                    n += 1;
                    sum += v;
                    sum_sq += v * v;
                }
            }
            out.push(variance_from_sums(n, sum, sum_sq));
        }
    }
    Ok(out)
}

pub fn variance_map(img: &GrayImage, window: usize) -> Result<SaliencyMap> {
    Ok(SaliencyMap::normalized(img.width, img.height, local_variance(img, window)?))
}

/// Patch embeddings on a `rows` x `cols` grid, each covering
/// `patch_size` x `patch_size` pixels.
///
/// On disk: four little-endian `u32` values `rows cols dim patch_size`, then
/// `rows * cols * dim` little-endian `f32` values, patches in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patch_size: usize,
    pub data: Vec<f32>,
}

impl PatchEmbeddings {
    pub fn vector(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("embeddings: {m}"));
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| bad("header shorter than 16 bytes"))?;
        let field = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        let (rows, cols, dim, patch_size) = (field(0), field(1), field(2), field(3));
        if rows == 0 || cols == 0 || dim == 0 || patch_size == 0 {
            return Err(bad("rows, cols, dim and patch_size must be positive"));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        if bytes.len() != rows * cols * dim * 4 {
            return Err(bad(&format!(
                "expected {} values for a {rows}x{cols}x{dim} grid, found {} bytes",
                rows * cols * dim,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            rows,
            cols,
            dim,
            patch_size,
            data,
        })
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in [self.rows, self.cols, self.dim, self.patch_size] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn cosine(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    dot / (na * nb)
}

/// Mean cosine similarity of each patch to its (up to eight) neighbours,
/// before normalization. A lone patch scores 1.
pub fn patch_coherence(emb: &PatchEmbeddings) -> Result<Vec<f64>> {
    let norms = (0..emb.rows * emb.cols)
        .map(|p| {
            let (r, c) = (p / emb.cols, p % emb.cols);
            let n = emb.vector(r, c).iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::invalid(format!("embedding of patch ({r}, {c}) has zero or non-finite norm")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Vec::with_capacity(norms.len());
    for r in 0..emb.rows {
        for c in 0..emb.cols {
            let (mut sum, mut k) = (0.0, 0);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= emb.rows as isize || cc >= emb.cols as isize {
                        continue;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    sum += cosine(
                        emb.vector(r, c),
                        emb.vector(rr, cc),
                        norms[r * emb.cols + c],
                        norms[rr * emb.cols + cc],
                    );
                    k += 1;
                }
            }
            out.push(if k == 0 { 1.0 } else { sum / k as f64 });
        }
    }
    Ok(out)
}

/// Patch coherence spread over a `width` x `height` pixel grid by nearest patch.
pub fn coherence_map(emb: &PatchEmbeddings, width: usize, height: usize) -> Result<SaliencyMap> {
    let per_patch = patch_coherence(emb)?;
    let mut raw = Vec::with_capacity(width * height);
    for y in 0..height {
        let r = (y / emb.patch_size).min(emb.rows - 1);
        for x in 0..width {
            let c = (x / emb.patch_size).min(emb.cols - 1);
            raw.push(per_patch[r * emb.cols + c]);
        }
    }
    Ok(SaliencyMap::normalized(width, height, raw))
}

/// Weighted mean of same-sized maps, re-normalized.
pub fn fuse(maps: &[&SaliencyMap], weights: &[f64]) -> Result<SaliencyMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("fuse needs at least one map"))?;
    if maps.len() != weights.len() {
        return Err(Error::invalid(format!("{} maps but {} weights", maps.len(), weights.len())));
    }
    if let Some(m) = maps.iter().find(|m| (m.width, m.height) != (first.width, first.height)) {
        return Err(Error::invalid(format!(
            "cannot fuse a {}x{} map with a {}x{} map",
            first.width, first.height, m.width, m.height
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("fusion weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("fusion weights sum to zero"));
    }
    let raw = (0..first.data.len())
        .map(|i| maps.iter().zip(weights).map(|(m, w)| w * m.data[i]).sum::<f64>() / total)
        .collect();
    Ok(SaliencyMap::normalized(first.width, first.height, raw))
}

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Log-likelihood of the data before each M-step, plus the final value.
    pub log_likelihood: Vec<f64>,
    pub warnings: Vec<String>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn log_joint(&self, x: &[f64], k: usize) -> f64 {
        let mut lp = self.weights[k].ln();
        for ((xi, m), v) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            lp -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (xi - m).powi(2) / v);
        }
        lp
    }

    /// Posterior component probabilities of `x` and `log p(x)`.
    pub fn responsibilities(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let lj: Vec<f64> = (0..self.components()).map(|k| self.log_joint(x, k)).collect();
        let max = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lj.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        (lj.iter().map(|l| (l - lse).exp()).collect(), lse)
    }

    /// Most probable component; ties go to the lower index.
    pub fn assign(&self, x: &[f64]) -> usize {
        let (r, _) = self.responsibilities(x);
        (0..r.len()).fold(0, |best, k| if r[k] > r[best] { k } else { best })
    }

    pub fn total_log_likelihood(&self, samples: &[Vec<f64>]) -> f64 {
        samples.iter().map(|x| self.responsibilities(x).1).sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// EM fit with k-means++ seeding. Stops after `max_iter` iterations or when
/// the relative log-likelihood change drops below `tol`.
pub fn gmm_fit(samples: &[Vec<f64>], n: usize, max_iter: usize, tol: f64, seed: u64) -> Result<GmmModel> {
    if n == 0 {
        return Err(Error::invalid("a mixture needs at least one component"));
    }
    if samples.len() < n {
        return Err(Error::invalid(format!("{} samples for {n} components", samples.len())));
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim || s.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("samples must be finite vectors of one positive length"));
    }
    let count = samples.len() as f64;

    let mut rng = substream(seed, "gmm");
    let mut means = vec![samples[rng.random_range(0..samples.len())].clone()];
    while means.len() < n {
        let d2: Vec<f64> = samples
            .iter()
            .map(|s| means.iter().map(|m| sq_dist(s, m)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..samples.len())
        };
        means.push(samples[pick].clone());
    }
    let mean_all: Vec<f64> = (0..dim).map(|d| samples.iter().map(|s| s[d]).sum::<f64>() / count).collect();
    let var_all: Vec<f64> = (0..dim)
        .map(|d| (samples.iter().map(|s| (s[d] - mean_all[d]).powi(2)).sum::<f64>() / count).max(VARIANCE_FLOOR))
        .collect();

    let mut model = GmmModel {
        weights: vec![1.0 / n as f64; n],
        means,
        variances: vec![var_all; n],
        log_likelihood: Vec::new(),
        warnings: Vec::new(),
    };
    if n >= 2 && samples.iter().all(|s| s == &samples[0]) {
        model
            .warnings
            .push("all samples are identical; components collapse onto the variance floor".into());
    }

    for _ in 0..max_iter {
        let mut resp = Vec::with_capacity(samples.len());
        let mut ll = 0.0;
        for s in samples {
            let (r, l) = model.responsibilities(s);
            resp.push(r);
            ll += l;
        }
        if let Some(&prev) = model.log_likelihood.last() {
            if (ll - prev).abs() <= tol * prev.abs().max(1e-300) {
                model.log_likelihood.push(ll);
                return Ok(model);
            }
        }
        model.log_likelihood.push(ll);
        for k in 0..n {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            model.weights[k] = nk / count;
            if nk <= 0.0 {
                continue;
            }
            for d in 0..dim {
                let mu = samples.iter().zip(&resp).map(|(s, r)| r[k] * s[d]).sum::<f64>() / nk;
                let var = samples.iter().zip(&resp).map(|(s, r)| r[k] * (s[d] - mu).powi(2)).sum::<f64>() / nk;
                model.means[k][d] = mu;
                model.variances[k][d] = var.max(VARIANCE_FLOOR);
            }
        }
    }
    let ll = model.total_log_likelihood(samples);
    model.log_likelihood.push(ll);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub variance_window: usize,
    /// Fusion weights for the edge, variance and coherence cues.
    pub weights: [f64; 3],
    pub min_box: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            variance_window: 15,
            weights: [1.0, 1.0, 1.0],
            min_box: 8,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Foreground blobs of an image before scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub saliency: SaliencyMap,
    pub facade_mask: Vec<bool>,
    pub foreground: Vec<bool>,
    pub boxes: Vec<DetectionBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    /// Position in the candidate list the scores refer to.
    pub index: usize,
    pub bbox: DetectionBox,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn boxes(&self) -> Vec<DetectionBox> {
        self.proposals.iter().map(|p| p.bbox.clone()).collect()
    }
}

/// Fused saliency of an image; without embeddings the coherence weight is dropped.
pub fn saliency(img: &GrayImage, emb: Option<&PatchEmbeddings>, cfg: &ProposalConfig) -> Result<SaliencyMap> {
    let edges = sobel_map(img)?;
    let var = variance_map(img, cfg.variance_window)?;
    match emb {
        Some(e) => {
            let coh = coherence_map(e, img.width, img.height)?;
            fuse(&[&edges, &var, &coh], &cfg.weights)
        }
        None => fuse(&[&edges, &var], &cfg.weights[..2]),
    }
}

/// Bounding boxes of 4-connected `true` regions in raster discovery order.
pub fn connected_boxes(mask: &[bool], width: usize, height: usize, min_size: usize) -> Vec<DetectionBox> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
        if bw >= min_size && bh >= min_size {
            out.push(DetectionBox::new(x0 as f64, y0 as f64, bw as f64, bh as f64, Category::Window));
        }
    }
    out
}

/// Saliency, the facade region and candidate boxes of one image.
pub fn candidates(img: &GrayImage, emb: Option<&PatchEmbeddings>, cfg: &ProposalConfig) -> Result<Candidates> {
    let sal = saliency(img, emb, cfg)?;
    let pairs: Vec<Vec<f64>> = img
        .data
        .iter()
        .zip(&sal.data)
        .map(|(&i, &s)| vec![f64::from(i) / 255.0, s])
        .collect();
    let global = gmm_fit(&pairs, 2, cfg.max_iter, cfg.tol, cfg.seed)?;
    let facade_k = if global.means[1][1] > global.means[0][1] { 1 } else { 0 };
    let facade_mask: Vec<bool> = pairs.iter().map(|p| global.assign(p) == facade_k).collect();

    let inside: Vec<Vec<f64>> = sal
        .data
        .iter()
        .zip(&facade_mask)
        .filter(|(_, m)| **m)
        .map(|(s, _)| vec![*s])
        .collect();
    let foreground = if inside.len() >= 2 {
        let local = gmm_fit(&inside, 2, cfg.max_iter, cfg.tol, cfg.seed)?;
        let fg = if local.means[1][0] > local.means[0][0] { 1 } else { 0 };
        sal.data
            .iter()
            .zip(&facade_mask)
            .map(|(s, m)| *m && local.assign(&[*s]) == fg)
            .collect()
    } else {
        facade_mask.clone()
    };
    let boxes = connected_boxes(&foreground, img.width, img.height, cfg.min_box);
    Ok(Candidates {
        saliency: sal,
        facade_mask,
        foreground,
        boxes,
    })
}

/// Candidate scores: a JSON object from candidate index to a score in `[0, 1]`.
pub fn read_scores(r: impl Read) -> Result<BTreeMap<usize, f64>> {
    let raw: BTreeMap<String, f64> = serde_json::from_reader(r)?;
    raw.into_iter()
        .map(|(k, v)| {
            let i = k
                .parse()
                .map_err(|_| Error::invalid(format!("scores: key `{k}` is not a candidate index")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("scores: candidate {i} has score {v} outside [0, 1]")));
            }
            Ok((i, v))
        })
        .collect()
}

/// Keeps the candidates in the higher-mean cluster of a two-component
/// mixture over their scores. With fewer than two distinct scores every
/// candidate is kept.
pub fn select(boxes: &[DetectionBox], scores: &BTreeMap<usize, f64>, cfg: &ProposalConfig) -> Result<ProposalSet> {
    let missing: Vec<String> = (0..boxes.len())
        .filter(|i| !scores.contains_key(i))
        .map(|i| i.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("scores missing for candidates {}", missing.join(", "))));
    }
    let all: Vec<Proposal> = boxes
        .iter()
        .enumerate()
        .map(|(index, b)| Proposal {
            index,
            bbox: b.clone(),
            score: scores[&index],
        })
        .collect();
    let first = all.first().map(|p| p.score);
    if all.iter().all(|p| Some(p.score) == first) {
        return Ok(ProposalSet { proposals: all });
    }
    let samples: Vec<Vec<f64>> = all.iter().map(|p| vec![p.score]).collect();
    let gmm = gmm_fit(&samples, 2, cfg.max_iter, cfg.tol, cfg.seed)?;
    let top = if gmm.means[1][0] > gmm.means[0][0] { 1 } else { 0 };
    Ok(ProposalSet {
        proposals: all.into_iter().filter(|p| gmm.assign(&[p.score]) == top).collect(),
    })
}

/// Full pipeline: candidates from the image, then score-based selection.
pub fn propose(
    img: &GrayImage,
    emb: Option<&PatchEmbeddings>,
    scores: &BTreeMap<usize, f64>,
    cfg: &ProposalConfig,
) -> Result<ProposalSet> {
    let c = candidates(img, emb, cfg)?;
    select(&c.boxes, scores, cfg)
}

/// A 240x200 dark wall with a 3x3 grid of bright 50x40 rectangles, and
/// the rectangles with their row as floor id (bottom row 0).
pub fn synthetic_rectangles() -> (GrayImage, Vec<DetectionBox>) {
    let (w, h) = (240, 200);
    let mut img = GrayImage::filled(w, h, 40).expect("positive size");
    let mut truth = Vec::new();
    for row in 0..3 {
        for col in 0..3 {
            let (x0, y0, bw, bh) = (20 + col * 75, 15 + row * 62, 50, 40);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    img.set(x, y, 220);
                }
            }
            let mut b = DetectionBox::new(x0 as f64, y0 as f64, bw as f64, bh as f64, Category::Window);
            b.floor_id = Some(2 - row as u32);
            truth.push(b);
        }
    }
    (img, truth)
}

//! Fully connected CRF with Gaussian edge potentials and mean-field
//! inference.
//!
//! The pairwise kernel is
//!
//! ```text
//! k(i, j) = a * exp(-|p_i - p_j|^2 / 2 theta_alpha^2 - |c_i - c_j|^2 / 2 theta_beta^2)
//!         + b * exp(-|p_i - p_j|^2 / 2 theta_gamma^2)
//! ```
//!
//! with Potts compatibility. Colors are in 8-bit units. Without an image the
//! color term is dropped and the appearance kernel is spatial only.
//!
//! Two backends compute the messages: `Exact` sums over all pixel pairs and
//! is limited to [`EXACT_PIXEL_LIMIT`] pixels; `Lattice` runs the appearance
//! kernel through a permutohedral lattice and the narrow smoothness kernel
//! through a truncated separable convolution.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataio::RgbImage;
use crate::error::{Error, Result};

/// Probability floor applied to unaries.
pub const PROB_FLOOR: f64 = 1e-8;

/// Largest pixel count the exact backend accepts.
pub const EXACT_PIXEL_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    pub w_appearance: f64,
    pub w_smoothness: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_appearance: 4.0,
            w_smoothness: 3.0,
            theta_alpha: 67.0,
            theta_beta: 3.0,
            theta_gamma: 1.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = self.w_appearance >= 0.0 && self.w_smoothness >= 0.0;
        let stds_ok = [self.theta_alpha, self.theta_beta, self.theta_gamma]
            .iter()
            .all(|s| s.is_finite() && *s > 0.0);
        if !weights_ok || !stds_ok {
            return Err(Error::InvalidConfig(format!("invalid CRF parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrfBackend {
    Exact,
    Lattice,
}

impl std::str::FromStr for CrfBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "lattice" => Ok(Self::Lattice),
            other => Err(Error::InvalidConfig(format!("unknown CRF backend {other:?}"))),
        }
    }
}

impl std::fmt::Display for CrfBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Lattice => "lattice",
        })
    }
}

/// Per-pixel label distributions, label-major (`probs[l * h * w + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    labels: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl UnaryField {
    /// Validates per-pixel normalization, then clamps to `[PROB_FLOOR, 1]`.
    pub fn new(labels: usize, height: usize, width: usize, mut probs: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if labels == 0 || n == 0 || probs.len() != labels * n {
            return Err(Error::DimensionMismatch(format!(
                "{labels} labels over {height}x{width} needs {} values, got {}",
                labels * n,
                probs.len()
            )));
        }
        for i in 0..n {
            let s: f64 = (0..labels).map(|l| probs[l * n + i]).sum();
            if !s.is_finite() || (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidConfig(format!(
                    "pixel {i} distribution sums to {s}"
                )));
            }
        }
        probs.iter_mut().for_each(|p| *p = p.clamp(PROB_FLOOR, 1.0));
        Ok(Self {
            labels,
            height,
            width,
            probs,
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, label: usize, pixel: usize) -> f64 {
        self.probs[label * self.height * self.width + pixel]
    }

    /// Most probable label per pixel, lowest label on ties.
    pub fn argmax(&self) -> Vec<usize> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let mut best = 0;
                for l in 1..self.labels {
                    if self.probs[l * n + i] > self.probs[best * n + i] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }
}

/// Turns `Z + 1` soft maps (ignore first) into a clamped, renormalized
/// unary field.
pub fn masks_to_unary(soft_masks: &[Vec<f64>], height: usize, width: usize) -> Result<UnaryField> {
    let n = height * width;
    if soft_masks.is_empty() || soft_masks.iter().any(|m| m.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "soft masks do not match {height}x{width}"
        )));
    }
    let labels = soft_masks.len();
    let mut probs = vec![0.0; labels * n];
    for i in 0..n {
        let mut sum = 0.0;
        for (l, m) in soft_masks.iter().enumerate() {
            let v = m[i].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            probs[l * n + i] = v;
            sum += v;
        }
        for l in 0..labels {
            probs[l * n + i] /= sum;
        }
    }
    UnaryField::new(labels, height, width, probs)
}

/// Runs `params.iterations` mean-field updates starting from `unary`.
pub fn mean_field_refine(
    unary: &UnaryField,
    image: Option<&RgbImage>,
    params: &CrfParams,
    backend: CrfBackend,
) -> Result<UnaryField> {
    params.validate()?;
    let (h, w, labels) = (unary.height, unary.width, unary.labels);
    let n = h * w;
    if let Some(img) = image {
        if img.height() != h || img.width() != w {
            return Err(Error::DimensionMismatch(format!(
                "unary is {h}x{w}, image is {}x{}",
                img.height(),
                img.width()
            )));
        }
    }
    if params.iterations == 0 {
        return Ok(unary.clone());
    }
    if backend == CrfBackend::Exact && n > EXACT_PIXEL_LIMIT {
        return Err(Error::BackendLimit {
            pixels: n,
            limit: EXACT_PIXEL_LIMIT,
        });
    }

    let log_unary: Vec<f64> = unary.probs.iter().map(|p| p.ln()).collect();
    let mut q = unary.probs.clone();
    normalize_columns(&mut q, labels, n);

    let appearance = appearance_features(h, w, image, params);
    let smoothness = spatial_features(h, w, params.theta_gamma);
    let messenger: Box<dyn Fn(&[f64]) -> Vec<f64> + Sync> = match backend {
        CrfBackend::Exact => {
            let (a, b) = (params.w_appearance, params.w_smoothness);
            Box::new(move |q: &[f64]| exact_messages(q, labels, &appearance, &smoothness, a, b))
        }
        CrfBackend::Lattice => {
            let app = (params.w_appearance > 0.0)
                .then(|| Permutohedral::new(&appearance.values, appearance.dim));
            let sep = SeparableGaussian::new(h, w, params.theta_gamma);
            let (a, b) = (params.w_appearance, params.w_smoothness);
            Box::new(move |q: &[f64]| {
                let mut out = vec![0.0; q.len()];
                if let Some(lat) = &app {
                    let m = lat.filter_excluding_self(q, labels);
                    out.iter_mut().zip(&m).for_each(|(o, v)| *o += a * v);
                }
                if b > 0.0 {
                    let m = sep.filter_excluding_self(q, labels);
                    out.iter_mut().zip(&m).for_each(|(o, v)| *o += b * v);
                }
                out
            })
        }
    };

    for _ in 0..params.iterations {
        let msg = messenger(&q);
        // Potts: energy for label l is sum_{l' != l} m_{l'}; dropping the
        // label-independent total leaves +m_l in the logit.
        for (qi, (lu, m)) in q.iter_mut().zip(log_unary.iter().zip(&msg)) {
            *qi = lu + m;
        }
        softmax_columns(&mut q, labels, n);
    }
    Ok(UnaryField {
        labels,
        height: h,
        width: w,
        probs: q,
    })
}

fn normalize_columns(q: &mut [f64], labels: usize, n: usize) {
    for i in 0..n {
        let s: f64 = (0..labels).map(|l| q[l * n + i]).sum();
        for l in 0..labels {
            q[l * n + i] /= s;
        }
    }
}

fn softmax_columns(q: &mut [f64], labels: usize, n: usize) {
    for i in 0..n {
        let mx = (0..labels).map(|l| q[l * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for l in 0..labels {
            let e = (q[l * n + i] - mx).exp();
            q[l * n + i] = e;
            s += e;
        }
        for l in 0..labels {
            q[l * n + i] /= s;
        }
    }
}

/// Scaled kernel features, point-major (`values[i * dim + k]`).
struct KernelFeatures {
    dim: usize,
    values: Vec<f64>,
}

fn appearance_features(
    h: usize,
    w: usize,
    image: Option<&RgbImage>,
    params: &CrfParams,
) -> KernelFeatures {
    let dim = if image.is_some() { 5 } else { 2 };
    let mut values = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            values.push(x as f64 / params.theta_alpha);
            values.push(y as f64 / params.theta_alpha);
            if let Some(img) = image {
                let px = img.pixel(y * w + x);
                for c in px {
                    values.push(f64::from(c) * 255.0 / params.theta_beta);
                }
            }
        }
    }
    KernelFeatures { dim, values }
}

fn spatial_features(h: usize, w: usize, theta: f64) -> KernelFeatures {
    let mut values = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            values.push(x as f64 / theta);
            values.push(y as f64 / theta);
        }
    }
    KernelFeatures { dim: 2, values }
}

fn exact_messages(
    q: &[f64],
    labels: usize,
    app: &KernelFeatures,
    smooth: &KernelFeatures,
    a: f64,
    b: f64,
) -> Vec<f64> {
    let n = q.len() / labels;
    let dist2 = |f: &KernelFeatures, i: usize, j: usize| -> f64 {
        let (fi, fj) = (&f.values[i * f.dim..][..f.dim], &f.values[j * f.dim..][..f.dim]);
        fi.iter().zip(fj).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let per_pixel: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; labels];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut k = 0.0;
                if a > 0.0 {
                    k += a * (-0.5 * dist2(app, i, j)).exp();
                }
                if b > 0.0 {
                    k += b * (-0.5 * dist2(smooth, i, j)).exp();
                }
                for (l, slot) in acc.iter_mut().enumerate() {
                    *slot += k * q[l * n + j];
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; q.len()];
    for (i, acc) in per_pixel.into_iter().enumerate() {
        for (l, v) in acc.into_iter().enumerate() {
            out[l * n + i] = v;
        }
    }
    out
}

/// Separable spatial Gaussian on the pixel grid, truncated at four standard
/// deviations.
struct SeparableGaussian {
    h: usize,
    w: usize,
    taps: Vec<f64>,
}

impl SeparableGaussian {
    fn new(h: usize, w: usize, theta: f64) -> Self {
        let radius = (4.0 * theta).ceil() as usize;
        let radius = radius.min(h.max(w));
        let taps = (0..=radius)
            .map(|d| (-0.5 * (d as f64 / theta).powi(2)).exp())
            .collect();
        Self { h, w, taps }
    }

    fn filter_excluding_self(&self, q: &[f64], labels: usize) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let n = h * w;
        let r = self.taps.len() - 1;
        let mut out = vec![0.0; q.len()];
        let mut tmp = vec![0.0; n];
        for l in 0..labels {
            let src = &q[l * n..(l + 1) * n];
            for y in 0..h {
                for x in 0..w {
                    let lo = x.saturating_sub(r);
                    let hi = (x + r).min(w - 1);
                    tmp[y * w + x] = (lo..=hi).map(|xx| self.taps[x.abs_diff(xx)] * src[y * w + xx]).sum();
                }
            }
            let dst = &mut out[l * n..(l + 1) * n];
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r).min(h - 1);
                for x in 0..w {
                    let v: f64 = (lo..=hi).map(|yy| self.taps[y.abs_diff(yy)] * tmp[yy * w + x]).sum();
                    dst[y * w + x] = v - src[y * w + x];
                }
            }
        }
        out
    }
}

const MAX_LATTICE_DIM: usize = 8;

/// Nearest-neighbour distance between lattice vertices, in kernel standard
/// deviations.
const LATTICE_SPACING: f64 = 1.0;

/// Splat radius, in kernel standard deviations.
const SPLAT_RADIUS: f64 = 3.0;

type LatticeKey = [i32; MAX_LATTICE_DIM];

/// Gaussian filtering on a permutohedral lattice.
///
/// Each point splats onto every lattice vertex within `SPLAT_RADIUS` with
/// weight `exp(-|f - v|^2)` and slices back with the same weights, so
/// `sum_v w_iv w_jv` is a lattice quadrature of the Gaussian convolution
/// identity `exp(-|x - y|^2 / 2) = (2/pi)^(d/2) * int exp(-|x - z|^2) exp(-|y - z|^2) dz`.
struct Permutohedral {
    n: usize,
    points: usize,
    starts: Vec<usize>,
    vertex: Vec<u32>,
    weight: Vec<f64>,
    self_weight: Vec<f64>,
    norm: f64,
}

impl Permutohedral {
    fn new(features: &[f64], d: usize) -> Self {
        assert!(d >= 1 && d < MAX_LATTICE_DIM);
        let n = features.len() / d;
        let d1 = d + 1;
        let lambda = ((d * d1) as f64).sqrt() / LATTICE_SPACING;
        let cell_volume = (d1 as f64).powf(d as f64 - 0.5) / lambda.powi(d as i32);
        let norm = (2.0 / std::f64::consts::PI).powf(d as f64 / 2.0) * cell_volume;

        let radius = SPLAT_RADIUS * lambda;
        let reach = max_vertex_offset(d) + radius;
        let template = cached_ball(d, reach);

        let mut table: HashMap<LatticeKey, u32> = HashMap::new();
        let mut starts = Vec::with_capacity(n + 1);
        let mut vertex = Vec::new();
        let mut weight = Vec::new();
        let mut self_weight = Vec::with_capacity(n);
        let mut elevated = [0.0f64; MAX_LATTICE_DIM];
        starts.push(0);
        for k in 0..n {
            elevate(&features[k * d..(k + 1) * d], lambda, &mut elevated[..d1]);
            let base = nearest_vertex(&elevated[..d1], d);
            let mut off = [0.0f64; MAX_LATTICE_DIM];
            for i in 0..d1 {
                off[i] = elevated[i] - base[i] as f64;
            }
            let off_norm = off[..d1].iter().map(|x| x * x).sum::<f64>().sqrt();
            let limit = radius + off_norm;
            let mut sw = 0.0;
            for (t, t_norm) in template.iter() {
                if *t_norm > limit {
                    break;
                }
                let dist2: f64 = (0..d1).map(|i| (off[i] - t[i] as f64).powi(2)).sum();
                if dist2 > radius * radius {
                    continue;
                }
                let w = (-dist2 / (lambda * lambda)).exp();
                let mut key = [0i32; MAX_LATTICE_DIM];
                for i in 0..d1 {
                    key[i] = base[i] + t[i];
                }
                let next = table.len() as u32;
                let idx = *table.entry(key).or_insert(next);
                vertex.push(idx);
                weight.push(w);
                sw += w * w;
            }
            starts.push(vertex.len());
            self_weight.push(norm * sw);
        }
        Self {
            n,
            points: table.len(),
            starts,
            vertex,
            weight,
            self_weight,
            norm,
        }
    }

    /// Splats `q` (label-major), slices it back and removes each point's own
    /// contribution.
    fn filter_excluding_self(&self, q: &[f64], labels: usize) -> Vec<f64> {
        let n = self.n;
        let mut values = vec![0.0f64; self.points * labels];
        for k in 0..n {
            for e in self.starts[k]..self.starts[k + 1] {
                let o = self.vertex[e] as usize * labels;
                let w = self.weight[e];
                for l in 0..labels {
                    values[o + l] += w * q[l * n + k];
                }
            }
        }
        let mut out = vec![0.0f64; q.len()];
        let mut acc = vec![0.0f64; labels];
        for k in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for e in self.starts[k]..self.starts[k + 1] {
                let o = self.vertex[e] as usize * labels;
                let w = self.weight[e];
                for (l, a) in acc.iter_mut().enumerate() {
                    *a += w * values[o + l];
                }
            }
            for (l, a) in acc.iter().enumerate() {
                out[l * n + k] = self.norm * a - self.self_weight[k] * q[l * n + k];
            }
        }
        out
    }
}

/// Maps a feature vector onto the hyperplane `sum = 0` in `d + 1`
/// dimensions, isometrically up to the factor `lambda`.
fn elevate(f: &[f64], lambda: f64, out: &mut [f64]) {
    let d = f.len();
    let mut sm = 0.0;
    for i in (1..=d).rev() {
        let cf = f[i - 1] * lambda / ((i * (i + 1)) as f64).sqrt();
        out[i] = sm - i as f64 * cf;
        sm += cf;
    }
    out[0] = sm;
}

/// Closest vertex of the enclosing lattice simplex.
fn nearest_vertex(elevated: &[f64], d: usize) -> LatticeKey {
    let d1 = d + 1;
    let df = d1 as f64;
    let mut rem0 = [0i32; MAX_LATTICE_DIM];
    let mut rank = [0i32; MAX_LATTICE_DIM];
    let mut sum = 0i32;
    for i in 0..d1 {
        let v = elevated[i] / df;
        let up = v.ceil() * df;
        let down = v.floor() * df;
        rem0[i] = if up - elevated[i] < elevated[i] - down { up } else { down } as i32;
        sum += rem0[i] / d1 as i32;
    }
    for i in 0..d {
        let di = elevated[i] - rem0[i] as f64;
        for j in i + 1..d1 {
            if di < elevated[j] - rem0[j] as f64 {
                rank[i] += 1;
            } else {
                rank[j] += 1;
            }
        }
    }
    let d1i = d1 as i32;
    if sum > 0 {
        for i in 0..d1 {
            if rank[i] >= d1i - sum {
                rem0[i] -= d1i;
                rank[i] += sum - d1i;
            } else {
                rank[i] += sum;
            }
        }
    } else if sum < 0 {
        for i in 0..d1 {
            if rank[i] < -sum {
                rem0[i] += d1i;
                rank[i] += d1i + sum;
            } else {
                rank[i] += sum;
            }
        }
    }
    // Vertex r of the simplex adds r to coordinates of rank <= d - r and
    // r - (d + 1) to the rest.
    let mut best = rem0;
    let mut best_dist = f64::INFINITY;
    for r in 0..d1i {
        let mut key = [0i32; MAX_LATTICE_DIM];
        let mut dist = 0.0;
        for i in 0..d1 {
            key[i] = rem0[i] + if rank[i] <= d as i32 - r { r } else { r - d1i };
            dist += (elevated[i] - key[i] as f64).powi(2);
        }
        if dist < best_dist {
            best_dist = dist;
            best = key;
        }
    }
    best
}

/// Longest edge of a lattice simplex, bounding the distance from any point
/// to its nearest vertex.
fn max_vertex_offset(d: usize) -> f64 {
    let d1 = d + 1;
    (0..=d1)
        .map(|r| ((r * (d1 - r) * d1) as f64).sqrt())
        .fold(0.0, f64::max)
}

fn cached_ball(d: usize, reach: f64) -> std::sync::Arc<Vec<(LatticeKey, f64)>> {
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<Vec<(LatticeKey, f64)>>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry((d, reach.to_bits()))
        .or_insert_with(|| Arc::new(lattice_ball(d, reach)))
        .clone()
}

/// Lattice vectors of norm at most `reach`, sorted by norm.
fn lattice_ball(d: usize, reach: f64) -> Vec<(LatticeKey, f64)> {
    let d1 = d + 1;
    // Voronoi-relevant vectors: sums over proper non-empty subsets of the
    // generators (d + 1) e_j - 1. Every ball around the origin is connected
    // under these steps.
    let mut steps = Vec::new();
    for mask in 1u32..(1 << d1) - 1 {
        let size = mask.count_ones() as i32;
        let mut v = [0i32; MAX_LATTICE_DIM];
        for (i, slot) in v.iter_mut().enumerate().take(d1) {
            *slot = -size + if mask & (1 << i) != 0 { d1 as i32 } else { 0 };
        }
        steps.push(v);
    }
    let norm = |v: &LatticeKey| v[..d1].iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let mut seen: HashMap<LatticeKey, ()> = HashMap::new();
    let origin = [0i32; MAX_LATTICE_DIM];
    seen.insert(origin, ());
    let mut frontier = vec![origin];
    let mut out = vec![(origin, 0.0)];
    while let Some(p) = frontier.pop() {
        for s in &steps {
            let mut q = p;
            for i in 0..d1 {
                q[i] += s[i];
            }
            let nq = norm(&q);
            if nq <= reach && seen.insert(q, ()).is_none() {
                frontier.push(q);
                out.push((q, nq));
            }
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

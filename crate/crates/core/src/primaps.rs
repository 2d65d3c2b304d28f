//! Principal mask proposals.
//!
//! One feature map is split into non-overlapping binary masks. Each round
//! takes the first principal direction of the not-yet-assigned features,
//! anchors it to its nearest feature, thresholds the cosine-similarity map
//! at `psi` times its maximum and zeroes the captured features before the
//! next round. Whatever is left when coverage reaches `coverage_stop` goes
//! to the ignore mask.

use crate::dataio::FeatureMap;
use crate::error::{Error, Result};
use crate::linalg::{empirical_covariance, l2_normalize, principal_components};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    /// Anchor the principal direction to its most similar feature.
    NearestNeighbor,
    /// Use the principal direction itself as the similarity anchor.
    RawComponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationMode {
    /// Recompute statistics on the masked features every round.
    IterativeMasking,
    /// Use the z-th principal component of the unmasked features in round z.
    FixedComponents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatisticsScope {
    /// Zeroed positions take part in the mean and covariance.
    AllPositions,
    /// Only unassigned positions enter the statistics.
    UnassignedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub psi: f64,
    pub coverage_stop: f64,
    pub max_masks: usize,
    pub anchor_mode: AnchorMode,
    pub iteration_mode: IterationMode,
    pub statistics: StatisticsScope,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            psi: 0.4,
            coverage_stop: 0.95,
            max_masks: 64,
            anchor_mode: AnchorMode::NearestNeighbor,
            iteration_mode: IterationMode::IterativeMasking,
            statistics: StatisticsScope::AllPositions,
        }
    }
}

/// Upper bound on `max_masks`, so proposal indices fit a byte next to the
/// 255 ignore value.
pub const MASK_LIMIT: usize = 254;

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi > 0.0 && self.psi < 1.0) {
            return Err(Error::InvalidConfig(format!("psi must be in (0, 1), got {}", self.psi)));
        }
        if !(self.coverage_stop > 0.0 && self.coverage_stop <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coverage_stop must be in (0, 1], got {}",
                self.coverage_stop
            )));
        }
        if self.max_masks == 0 || self.max_masks > MASK_LIMIT {
            return Err(Error::InvalidConfig(format!(
                "max_masks must be in 1..={MASK_LIMIT}, got {}",
                self.max_masks
            )));
        }
        Ok(())
    }
}

/// Ordered proposal masks plus the ignore mask, all `H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    height: usize,
    width: usize,
    masks: Vec<Vec<bool>>,
    ignore: Vec<bool>,
}

impl MaskStack {
    /// Builds a stack, checking the exact-partition and non-empty invariants.
    pub fn new(height: usize, width: usize, masks: Vec<Vec<bool>>, ignore: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if ignore.len() != n || masks.iter().any(|m| m.len() != n) {
            return Err(Error::DimensionMismatch("mask sizes differ from H*W".into()));
        }
        if masks.iter().any(|m| !m.iter().any(|&b| b)) {
            return Err(Error::InvalidConfig("proposal masks must be non-empty".into()));
        }
        for p in 0..n {
            let covered = masks.iter().filter(|m| m[p]).count() + usize::from(ignore[p]);
            if covered != 1 {
                return Err(Error::InvalidConfig(format!(
                    "position {p} is covered {covered} times"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            masks,
            ignore,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of proposals, excluding the ignore mask.
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn ignore(&self) -> &[bool] {
        &self.ignore
    }

    /// Fraction of positions assigned to some proposal.
    pub fn coverage(&self) -> f64 {
        let assigned = self.ignore.iter().filter(|&&b| !b).count();
        assigned as f64 / self.ignore.len() as f64
    }

    /// Proposal index per position, `None` for ignore.
    pub fn index_map(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.height * self.width];
        for (z, m) in self.masks.iter().enumerate() {
            for (slot, &b) in out.iter_mut().zip(m) {
                if b {
                    *slot = Some(z);
                }
            }
        }
        out
    }

    /// Proposal index per position as bytes, 255 for ignore.
    pub fn index_bytes(&self) -> Vec<u8> {
        self.index_map()
            .into_iter()
            .map(|z| z.map_or(crate::dataio::IGNORE, |z| z as u8))
            .collect()
    }
}

/// Position maximizing `v1 . f` over eligible positions (first row-major
/// index on ties) and the normalized feature found there.
pub fn anchor_feature(
    nf: &FeatureMap,
    v1: &[f64],
    eligible: &[bool],
) -> Result<((usize, usize), Vec<f64>)> {
    check_len(nf, eligible.len())?;
    if v1.len() != nf.channels() {
        return Err(Error::DimensionMismatch(format!(
            "direction has {} entries for {} channels",
            v1.len(),
            nf.channels()
        )));
    }
    let scores = project(nf, v1);
    let best = argmax_eligible(&scores, eligible).ok_or(Error::EmptySelection)?;
    Ok(((best / nf.width(), best % nf.width()), nf.vector(best)))
}

/// Cosine-similarity map `M[i, j] = anchor . f[:, i, j]` for normalized
/// features.
pub fn similarity_map(nf: &FeatureMap, anchor: &[f64]) -> Vec<f64> {
    project(nf, anchor)
}

fn project(nf: &FeatureMap, dir: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; nf.positions()];
    for (c, &a) in dir.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(nf.channel(c)) {
            *o += a * f64::from(x);
        }
    }
    out
}

fn argmax_eligible(values: &[f64], eligible: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (p, (&v, &ok)) in values.iter().zip(eligible).enumerate() {
        if ok && best.is_none_or(|b| v > values[b]) {
            best = Some(p);
        }
    }
    best
}

/// Eligible positions with `M > psi * max(M over eligible)`. The arg-max
/// position is always included, which also covers a non-positive maximum.
pub fn threshold_mask(m: &[f64], psi: f64, eligible: &[bool]) -> Vec<bool> {
    assert_eq!(m.len(), eligible.len(), "similarity map and eligibility differ in size");
    let mut out = vec![false; m.len()];
    let Some(best) = argmax_eligible(m, eligible) else {
        return out;
    };
    let cut = psi * m[best];
    for (p, o) in out.iter_mut().enumerate() {
        *o = eligible[p] && m[p] > cut;
    }
    out[best] = true;
    out
}

/// Zeroes the channel vectors at assigned positions.
pub fn mask_features(features: &FeatureMap, assigned: &[bool]) -> Result<FeatureMap> {
    check_len(features, assigned.len())?;
    let n = features.positions();
    let mut data = features.data().to_vec();
    for ch in 0..features.channels() {
        for (v, &a) in data[ch * n..(ch + 1) * n].iter_mut().zip(assigned) {
            if a {
                *v = 0.0;
            }
        }
    }
    Ok(FeatureMap::from_parts_unchecked(
        features.channels(),
        features.height(),
        features.width(),
        data,
        features.source_id().to_string(),
    ))
}

fn check_len(features: &FeatureMap, len: usize) -> Result<()> {
    if len != features.positions() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {len} entries for {} positions",
            features.positions()
        )));
    }
    Ok(())
}

/// First principal direction of the masked features.
fn round_direction(
    masked: &FeatureMap,
    eligible: &[bool],
    cfg: &ProposalConfig,
) -> Result<Vec<f64>> {
    let include = match cfg.statistics {
        StatisticsScope::AllPositions => None,
        StatisticsScope::UnassignedOnly => Some(eligible),
    };
    let cov = empirical_covariance(masked, include)?;
    let mut pd = principal_components(&cov, 1)?;
    Ok(pd.vectors.swap_remove(0))
}

/// Decomposes one feature map into a [`MaskStack`].
pub fn decompose(features: &FeatureMap, cfg: &ProposalConfig) -> Result<MaskStack> {
    cfg.validate()?;
    let n = features.positions();
    let mut assigned = vec![false; n];
    let mut assigned_count = 0usize;
    let mut masks: Vec<Vec<bool>> = Vec::new();

    let fixed = match cfg.iteration_mode {
        IterationMode::FixedComponents => {
            let cov = empirical_covariance(features, None)?;
            let k = cfg.max_masks.min(features.channels());
            Some(principal_components(&cov, k)?.vectors)
        }
        IterationMode::IterativeMasking => None,
    };
    let live = position_is_nonzero(features);
    let original_normalized = l2_normalize(features);
    let mut masked = features.clone();

    while (assigned_count as f64) < cfg.coverage_stop * n as f64 && masks.len() < cfg.max_masks {
        let eligible: Vec<bool> = assigned.iter().map(|&a| !a).collect();
        // Residual features all zero: leave the rest to ignore.
        if !eligible.iter().zip(&live).any(|(&e, &l)| e && l) {
            break;
        }
        let round_nf;
        let (direction, nf) = match &fixed {
            Some(components) => match components.get(masks.len()) {
                Some(v) => (v.clone(), &original_normalized),
                None => break,
            },
            None => {
                round_nf = l2_normalize(&masked);
                (round_direction(&masked, &eligible, cfg)?, &round_nf)
            }
        };
        let anchor = match cfg.anchor_mode {
            AnchorMode::NearestNeighbor => anchor_feature(nf, &direction, &eligible)?.1,
            AnchorMode::RawComponent => direction,
        };
        let sim = similarity_map(nf, &anchor);
        let mask = threshold_mask(&sim, cfg.psi, &eligible);
        for (a, &m) in assigned.iter_mut().zip(&mask) {
            if m {
                *a = true;
                assigned_count += 1;
            }
        }
        masks.push(mask);
        if fixed.is_none() {
            masked = mask_features(features, &assigned)?;
        }
    }
    let ignore = assigned.iter().map(|&a| !a).collect();
    Ok(MaskStack {
        height: features.height(),
        width: features.width(),
        masks,
        ignore,
    })
}

fn position_is_nonzero(features: &FeatureMap) -> Vec<bool> {
    let mut live = vec![false; features.positions()];
    for ch in 0..features.channels() {
        for (l, &v) in live.iter_mut().zip(features.channel(ch)) {
            *l |= v != 0.0;
        }
    }
    live
}

/// Bilinear resampling tables for one axis (align-corners = false).
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = s - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear upsampling of one `src_h x src_w` map to `h x w`.
pub fn upsample_map(src: &[f64], src_h: usize, src_w: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w);
    let rows = axis_weights(src_h, h);
    let cols = axis_weights(src_w, w);
    let mut out = Vec::with_capacity(h * w);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            let top = src[r0 * src_w + c0] * (1.0 - tx) + src[r0 * src_w + c1] * tx;
            let bottom = src[r1 * src_w + c0] * (1.0 - tx) + src[r1 * src_w + c1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Sparse form of the bilinear operator: for each output pixel the four
/// source positions and weights. Used to move gradients back to the grid.
pub fn bilinear_taps(src_h: usize, src_w: usize, h: usize, w: usize) -> Vec<[(usize, f64); 4]> {
    let rows = axis_weights(src_h, h);
    let cols = axis_weights(src_w, w);
    let mut out = Vec::with_capacity(h * w);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            out.push([
                (r0 * src_w + c0, (1.0 - ty) * (1.0 - tx)),
                (r0 * src_w + c1, (1.0 - ty) * tx),
                (r1 * src_w + c0, ty * (1.0 - tx)),
                (r1 * src_w + c1, ty * tx),
            ]);
        }
    }
    out
}

/// Soft masks at image resolution. Map 0 is the ignore mask, map `z + 1` is
/// proposal `z`.
pub fn upsample_bilinear(stack: &MaskStack, h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
    if h < stack.height || w < stack.width {
        return Err(Error::DimensionMismatch(format!(
            "cannot upsample {}x{} to {h}x{w}",
            stack.height, stack.width
        )));
    }
    let as_f64 = |m: &[bool]| m.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
    Ok(std::iter::once(&stack.ignore)
        .chain(stack.masks.iter())
        .map(|m| upsample_map(&as_f64(m), stack.height, stack.width, h, w))
        .collect())
}

//! Feature statistics: covariance, principal directions and normalization.

use crate::dataio::FeatureMap;
use crate::error::{Error, Result};

/// Empirical covariance of feature vectors, normalized by the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    dim: usize,
    data: Vec<f64>,
    mean: Vec<f64>,
    sample_count: usize,
}

impl Covariance {
    /// Wraps a square symmetric matrix (row-major) with a zero mean.
    pub fn from_matrix(dim: usize, data: Vec<f64>, sample_count: usize) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "covariance of dim {dim} needs {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                index: data.iter().position(|v| !v.is_finite()).unwrap(),
            });
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in i + 1..dim {
                if (data[i * dim + j] - data[j * dim + i]).abs() > 1e-6 * scale {
                    return Err(Error::DimensionMismatch(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            data,
            mean: vec![0.0; dim],
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }
}

/// Covariance and mean over the positions selected by `include_mask`
/// (all positions when `None`).
pub fn empirical_covariance(
    features: &FeatureMap,
    include_mask: Option<&[bool]>,
) -> Result<Covariance> {
    let n = features.positions();
    if let Some(mask) = include_mask {
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries for {n} positions",
                mask.len()
            )));
        }
    }
    let included: Vec<usize> = match include_mask {
        Some(mask) => (0..n).filter(|&p| mask[p]).collect(),
        None => (0..n).collect(),
    };
    if included.is_empty() {
        return Err(Error::EmptySelection);
    }
    let c = features.channels();
    let count = included.len() as f64;
    // Centered channel rows over the selected positions.
    let mut centered = vec![0.0f64; c * included.len()];
    let mut mean = vec![0.0f64; c];
    for ch in 0..c {
        let src = features.channel(ch);
        let row = &mut centered[ch * included.len()..(ch + 1) * included.len()];
        for (dst, &p) in row.iter_mut().zip(&included) {
            *dst = f64::from(src[p]);
        }
        mean[ch] = row.iter().sum::<f64>() / count;
        row.iter_mut().for_each(|v| *v -= mean[ch]);
    }
    let mut data = vec![0.0f64; c * c];
    let m = included.len();
    for a in 0..c {
        let ra = &centered[a * m..(a + 1) * m];
        for b in a..c {
            let rb = &centered[b * m..(b + 1) * m];
            let s = ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / count;
            data[a * c + b] = s;
            data[b * c + a] = s;
        }
    }
    Ok(Covariance {
        dim: c,
        data,
        mean,
        sample_count: included.len(),
    })
}

/// Streams covariances of several maps into the covariance of their pooled
/// positions, merging per-map moments pairwise.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    // Sum of squared deviations from `mean`, row-major.
    scatter: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            scatter: vec![0.0; dim * dim],
        }
    }

    pub fn add(&mut self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "accumulator has {} channels, map has {}",
                self.dim,
                features.channels()
            )));
        }
        let cov = empirical_covariance(features, None)?;
        self.merge(&cov);
        Ok(())
    }

    pub fn merge(&mut self, cov: &Covariance) {
        let (na, nb) = (self.count as f64, cov.sample_count as f64);
        let n = na + nb;
        if cov.sample_count == 0 {
            return;
        }
        let delta: Vec<f64> = cov.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nb / n;
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                self.scatter[i * d + j] += cov.data[i * d + j] * nb + delta[i] * delta[j] * w;
            }
        }
        for i in 0..d {
            self.mean[i] += delta[i] * nb / n;
        }
        self.count += cov.sample_count;
    }

    pub fn finish(&self) -> Result<Covariance> {
        if self.count == 0 {
            return Err(Error::EmptySelection);
        }
        let n = self.count as f64;
        Ok(Covariance {
            dim: self.dim,
            data: self.scatter.iter().map(|v| v / n).collect(),
            mean: self.mean.clone(),
            sample_count: self.count,
        })
    }
}

/// Leading eigenpairs of a covariance, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalDirections {
    pub vectors: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl PrincipalDirections {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

const EIGENVALUE_TOL: f64 = 1e-9;
// Internal residual target, kept well below the public 1e-5 contract so
// deflation error does not accumulate past it.
const RESIDUAL_TOL: f64 = 1e-8;

/// Top `k` eigenpairs of `cov`.
///
/// Power iteration with deflation handles `k <= C/4`; larger requests, and
/// any power iteration that stalls on a small spectral gap, go through a
/// full Householder tridiagonalization with implicit QL.
pub fn principal_components(cov: &Covariance, k: usize) -> Result<PrincipalDirections> {
    let c = cov.dim;
    if k == 0 || k > c {
        return Err(Error::InvalidConfig(format!(
            "requested {k} components from a {c}-dimensional covariance"
        )));
    }
    let mut out = if 4 * k <= c {
        match power_deflation(cov, k) {
            Some(pd) => pd,
            None => {
                log::debug!("power iteration stalled for k={k}, C={c}; using dense solver");
                dense_top_k(cov, k)?
            }
        }
    } else {
        dense_top_k(cov, k)?
    };
    for v in &mut out.vectors {
        orient(v);
    }
    for l in &mut out.eigenvalues {
        *l = l.max(0.0);
    }
    Ok(out)
}

fn dense_top_k(cov: &Covariance, k: usize) -> Result<PrincipalDirections> {
    let (values, vectors) = symmetric_eigen(cov.dim, &cov.data)?;
    Ok(PrincipalDirections {
        vectors: vectors.into_iter().take(k).collect(),
        eigenvalues: values.into_iter().take(k).collect(),
    })
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
pub fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn matvec(a: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        out[i] = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
}

fn power_deflation(cov: &Covariance, k: usize) -> Option<PrincipalDirections> {
    let n = cov.dim;
    let cap = 10 * n;
    let mut a = cov.data.clone();
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut scale = 1.0f64;
    let mut w = vec![0.0; n];
    for _ in 0..k {
        // Fixed, non-symmetric start so no eigenvector is missed by symmetry.
        let mut v: Vec<f64> = (0..n)
            .map(|i| 1.0 + ((i * 7919 + 13) % 31) as f64 / 31.0)
            .collect();
        project_out(&mut v, &vectors);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut lambda_prev = f64::INFINITY;
        let mut found = None;
        for _ in 0..cap {
            matvec(&a, n, &v, &mut w);
            project_out(&mut w, &vectors);
            let lambda = dot(&v, &w);
            let residual = w
                .iter()
                .zip(&v)
                .map(|(p, q)| (p - lambda * q).powi(2))
                .sum::<f64>()
                .sqrt();
            let wn = norm(&w);
            let settled = (lambda - lambda_prev).abs() <= EIGENVALUE_TOL * lambda.abs().max(1.0);
            if wn == 0.0 || (settled && residual <= RESIDUAL_TOL * scale) {
                found = Some(lambda);
                break;
            }
            lambda_prev = lambda;
            v.iter_mut().zip(&w).for_each(|(x, y)| *x = y / wn);
        }
        let lambda = found?;
        if vectors.is_empty() {
            scale = lambda.max(1.0);
        }
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        vectors.push(v);
        eigenvalues.push(lambda);
    }
    Some(PrincipalDirections {
        vectors,
        eigenvalues,
    })
}

/// Full eigendecomposition of a symmetric `n x n` row-major matrix.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn symmetric_eigen(n: usize, matrix: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    assert_eq!(matrix.len(), n * n);
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| matrix[i * n..(i + 1) * n].to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;
    // Columns of `v` are eigenvectors.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    Ok((values, vectors))
}

// Householder reduction to tridiagonal form (EISPACK tred2 lineage).
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

// Implicit QL on the tridiagonal form (EISPACK tql2 lineage).
fn tridiagonal_ql(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    let cap = 30 * n.max(1);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        let m = m.min(n - 1);
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > cap {
                    return Err(Error::NoConvergence { iterations: cap });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Scales each position's channel vector to unit L2 norm; all-zero vectors
/// stay zero.
pub fn l2_normalize(features: &FeatureMap) -> FeatureMap {
    let n = features.positions();
    let c = features.channels();
    let mut norms = vec![0.0f64; n];
    for ch in 0..c {
        for (acc, &v) in norms.iter_mut().zip(features.channel(ch)) {
            *acc += f64::from(v) * f64::from(v);
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());
    let mut data = Vec::with_capacity(c * n);
    for ch in 0..c {
        data.extend(features.channel(ch).iter().zip(&norms).map(|(&v, &nrm)| {
            if nrm > 0.0 {
                (f64::from(v) / nrm) as f32
            } else {
                0.0
            }
        }));
    }
    FeatureMap::from_parts_unchecked(
        c,
        features.height(),
        features.width(),
        data,
        features.source_id().to_string(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureMap::new(c, h, w, data, "r").unwrap()
    }

    fn brute_covariance(m: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
        let (c, n) = (m.channels(), m.positions());
        let mut mean = vec![0.0; c];
        for p in 0..n {
            for (a, mu) in mean.iter_mut().enumerate() {
                *mu += f64::from(m.get(a, p)) / n as f64;
            }
        }
        let mut cov = vec![0.0; c * c];
        for p in 0..n {
            for a in 0..c {
                for b in 0..c {
                    cov[a * c + b] += (f64::from(m.get(a, p)) - mean[a])
                        * (f64::from(m.get(b, p)) - mean[b])
                        / n as f64;
                }
            }
        }
        (cov, mean)
    }

    #[test]
    fn constant_map_has_zero_covariance() {
        let m = FeatureMap::new(2, 2, 2, vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0], "")
            .unwrap();
        let cov = empirical_covariance(&m, None).unwrap();
        assert!(cov.data().iter().all(|&v| v == 0.0));
        assert_eq!(cov.mean(), &[3.0, -1.0]);
        assert_eq!(cov.sample_count(), 4);
    }

    #[test]
    fn single_included_position() {
        let m = random_map(3, 2, 2, 1);
        let mask = [false, true, false, false];
        let cov = empirical_covariance(&m, Some(&mask)).unwrap();
        assert!(cov.data().iter().all(|&v| v == 0.0));
        assert_eq!(cov.sample_count(), 1);
        assert!(matches!(
            empirical_covariance(&m, Some(&[false; 4])),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let m = random_map(3, 2, 2, 7);
        let (oracle, mean) = brute_covariance(&m);
        let cov = empirical_covariance(&m, None).unwrap();
        for (a, b) in cov.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in cov.mean().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_case() {
        let cov = Covariance::from_matrix(2, vec![4.0, 0.0, 0.0, 1.0], 1).unwrap();
        let pd = principal_components(&cov, 1).unwrap();
        assert!((pd.eigenvalues[0] - 4.0).abs() < 1e-9);
        assert!((pd.vectors[0][0] - 1.0).abs() < 1e-9);
        assert!(pd.vectors[0][1].abs() < 1e-9);
    }

    #[test]
    fn isotropic_spectrum_accepts_any_vector() {
        let s2 = 2.5;
        let n = 8;
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = s2);
        let cov = Covariance::from_matrix(n, data, 1).unwrap();
        let pd = principal_components(&cov, 2).unwrap();
        for (v, &l) in pd.vectors.iter().zip(&pd.eigenvalues) {
            assert!((l - s2).abs() < 1e-9);
            let nv = norm(v);
            assert!((nv - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_matrix() {
        let cov = Covariance::from_matrix(3, vec![0.0; 9], 1).unwrap();
        let pd = principal_components(&cov, 1).unwrap();
        assert_eq!(pd.eigenvalues[0], 0.0);
        assert!((norm(&pd.vectors[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_k() {
        let cov = Covariance::from_matrix(2, vec![1.0, 0.0, 0.0, 1.0], 1).unwrap();
        assert!(principal_components(&cov, 0).is_err());
        assert!(principal_components(&cov, 3).is_err());
    }

    #[test]
    fn dense_and_power_paths_agree() {
        let m = random_map(16, 6, 6, 3);
        let cov = empirical_covariance(&m, None).unwrap();
        let power = principal_components(&cov, 2).unwrap();
        let mut dense = dense_top_k(&cov, 2).unwrap();
        dense.vectors.iter_mut().for_each(|v| orient(v));
        for i in 0..2 {
            assert!((power.eigenvalues[i] - dense.eigenvalues[i]).abs() < 1e-9);
            let d = dot(&power.vectors[i], &dense.vectors[i]);
            assert!((d.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pooled_accumulator_matches_concatenation() {
        let maps: Vec<FeatureMap> = (0..3).map(|s| random_map(3, 2, 3, 40 + s)).collect();
        let mut acc = CovarianceAccumulator::new(3);
        maps.iter().for_each(|m| acc.add(m).unwrap());
        let pooled = acc.finish().unwrap();
        // Concatenate positions along the width axis.
        let total = maps.iter().map(|m| m.positions()).sum::<usize>();
        let mut data = Vec::new();
        for ch in 0..3 {
            for m in &maps {
                data.extend_from_slice(m.channel(ch));
            }
        }
        let concat = FeatureMap::new(3, 1, total, data, "").unwrap();
        let direct = empirical_covariance(&concat, None).unwrap();
        for (a, b) in pooled.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(pooled.sample_count(), total);
    }

    #[test]
    fn normalize_examples() {
        let m = FeatureMap::new(2, 1, 2, vec![3.0, 0.0, 4.0, 0.0], "").unwrap();
        let n = l2_normalize(&m);
        assert_eq!(n.vector(0), vec![0.6000000238418579, 0.800000011920929]);
        assert_eq!(n.vector(1), vec![0.0, 0.0]);
    }

    #[test]
    fn normalized_norms_are_one() {
        let m = random_map(24, 5, 5, 9);
        let n = l2_normalize(&m);
        for p in 0..n.positions() {
            assert!((norm(&n.vector(p)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn recomputation_is_bitwise_identical() {
        let m = random_map(12, 4, 4, 5);
        let cov = empirical_covariance(&m, None).unwrap();
        let a = principal_components(&cov, 3).unwrap();
        let b = principal_components(&cov, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_is_position_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(4, 3, 3, 11);
        let mut perm: Vec<usize> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let mut data = Vec::new();
        for ch in 0..4 {
            data.extend(perm.iter().map(|&p| m.get(ch, p)));
        }
        let shuffled = FeatureMap::new(4, 3, 3, data, "").unwrap();
        let a = empirical_covariance(&m, None).unwrap();
        let b = empirical_covariance(&shuffled, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

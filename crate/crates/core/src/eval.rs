//! Unsupervised segmentation scoring: confusion counts, Hungarian
//! cluster-to-class matching, pixel accuracy and mIoU.

use std::fmt::Write as _;

use crate::dataio::{LabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::primaps::{upsample_bilinear, MaskStack};

/// Confusion counts with rows indexed by ground-truth class and columns by
/// predicted cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTally {
    k: usize,
    confusion: Vec<u64>,
    /// Pixels skipped because the ground truth is IGNORE.
    pub ignored: u64,
    /// Per ground-truth class: pixels with no prediction. They count as
    /// false negatives and never as true positives.
    pub missed: Vec<u64>,
}

impl EvalTally {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            confusion: vec![0; k * k],
            ignored: 0,
            missed: vec![0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.k + pred]
    }

    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    /// Pixels with a valid ground truth, including missed ones.
    pub fn total(&self) -> u64 {
        self.confusion.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// Adds one prediction. Predicted ids outside `0..K` (IGNORE included)
    /// count as missed.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if !gt.same_shape(pred) {
            return Err(Error::DimensionMismatch(format!(
                "ground truth is {}x{}, prediction is {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        let pred_ids: Vec<Option<usize>> = pred
            .ids()
            .iter()
            .map(|&p| (usize::from(p) < self.k).then_some(usize::from(p)))
            .collect();
        self.accumulate_ids(gt, &pred_ids)
    }

    fn accumulate_ids(&mut self, gt: &LabelMap, pred: &[Option<usize>]) -> Result<()> {
        for (&g, p) in gt.ids().iter().zip(pred) {
            if g == IGNORE {
                self.ignored += 1;
                continue;
            }
            let g = usize::from(g);
            if g >= self.k {
                return Err(Error::InvalidLabel(format!(
                    "ground-truth id {g} outside 0..{}",
                    self.k
                )));
            }
            match p {
                Some(p) => self.confusion[g * self.k + p] += 1,
                None => self.missed[g] += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalTally) -> Result<()> {
        if other.k != self.k {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge tallies over {} and {} classes",
                self.k, other.k
            )));
        }
        self.confusion.iter_mut().zip(&other.confusion).for_each(|(a, b)| *a += b);
        self.missed.iter_mut().zip(&other.missed).for_each(|(a, b)| *a += b);
        self.ignored += other.ignored;
        Ok(())
    }

    /// Confusion matrix as CSV with columns reordered so that column `c`
    /// holds the cluster matched to class `c`.
    pub fn confusion_csv(&self, m: &Matching) -> String {
        let k = self.k;
        let mut cluster_of = vec![0; k];
        for (cluster, &class) in m.perm.iter().enumerate() {
            cluster_of[class] = cluster;
        }
        let mut out = String::from("gt");
        for c in 0..k {
            let _ = write!(out, ",pred_{c}");
        }
        out.push_str(",missed\n");
        for g in 0..k {
            let _ = write!(out, "{g}");
            for &cluster in &cluster_of {
                let _ = write!(out, ",{}", self.get(g, cluster));
            }
            let _ = writeln!(out, ",{}", self.missed[g]);
        }
        out
    }
}

/// Cluster-to-class assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// `perm[cluster] = class`.
    pub perm: Vec<usize>,
    pub matched_tp: u64,
}

impl Matching {
    pub fn identity(k: usize) -> Self {
        Self {
            perm: (0..k).collect(),
            matched_tp: 0,
        }
    }

    pub fn apply(&self, pred: &LabelMap) -> Result<LabelMap> {
        let ids = pred
            .ids()
            .iter()
            .map(|&p| match self.perm.get(usize::from(p)) {
                Some(&c) => c as u8,
                None => p,
            })
            .collect();
        LabelMap::new(pred.height(), pred.width(), ids)
    }
}

/// Permutation maximizing the matched true positives, by the O(K^3)
/// potentials method.
pub fn hungarian_match(tally: &EvalTally) -> Matching {
    let k = tally.k;
    if k == 0 {
        return Matching {
            perm: Vec::new(),
            matched_tp: 0,
        };
    }
    // Rows are clusters, columns classes; minimize the negated counts.
    let cost = |cluster: usize, class: usize| -> i128 { -i128::from(tally.get(class, cluster)) };
    let inf = i128::MAX / 4;
    let mut u = vec![0i128; k + 1];
    let mut v = vec![0i128; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; k];
    for j in 1..=k {
        perm[p[j] - 1] = j - 1;
    }
    let matched_tp = perm.iter().enumerate().map(|(c, &g)| tally.get(g, c)).sum();
    Matching { perm, matched_tp }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub miou: f64,
    /// `None` for classes absent from the ground truth and never predicted.
    pub per_class_iou: Vec<Option<f64>>,
}

impl Metrics {
    pub fn to_kv(&self) -> String {
        let mut out = format!("acc={:.6}\nmiou={:.6}\n", self.acc, self.miou);
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(out, "iou_{c}={v:.6}");
                }
                None => {
                    let _ = writeln!(out, "iou_{c}=none");
                }
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "pixel accuracy  {:>7.2}%\nmean IoU        {:>7.2}%\n\nclass      IoU\n",
            100.0 * self.acc,
            100.0 * self.miou
        );
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => {
                    let _ = writeln!(out, "{c:>5}  {:>7.2}%", 100.0 * v);
                }
                None => {
                    let _ = writeln!(out, "{c:>5}        -");
                }
            }
        }
        out
    }
}

pub fn metrics(tally: &EvalTally, m: &Matching) -> Result<Metrics> {
    let total = tally.total();
    if total == 0 {
        return Err(Error::EmptyTally);
    }
    let k = tally.k;
    if m.perm.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "matching over {} clusters for {k} classes",
            m.perm.len()
        )));
    }
    // Matched confusion: rows gt class, columns class assigned to the cluster.
    let mut conf = vec![0u64; k * k];
    for g in 0..k {
        for (cluster, &class) in m.perm.iter().enumerate() {
            conf[g * k + class] += tally.get(g, cluster);
        }
    }
    let trace: u64 = (0..k).map(|c| conf[c * k + c]).sum();
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf[c * k + c];
            let row: u64 = (0..k).map(|j| conf[c * k + j]).sum::<u64>() + tally.missed[c];
            let col: u64 = (0..k).map(|i| conf[i * k + c]).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(Metrics {
        acc: trace as f64 / total as f64,
        miou,
        per_class_iou,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Score only pixels covered by a proposal.
    PseudoOnly,
    /// Score every pixel; uncovered ones are always wrong.
    All,
}

/// Region index per pixel of a `height x width` target: the stack's own
/// partition when sizes agree, otherwise the argmax of its bilinearly
/// upsampled indicator maps.
pub fn region_map(stack: &MaskStack, height: usize, width: usize) -> Result<Vec<Option<usize>>> {
    if stack.height() == height && stack.width() == width {
        return Ok(stack.index_map());
    }
    let maps = upsample_bilinear(stack, height, width)?;
    Ok((0..height * width)
        .map(|i| {
            let mut best = 0;
            for (z, m) in maps.iter().enumerate().skip(1) {
                if m[i] > maps[best][i] {
                    best = z;
                }
            }
            best.checked_sub(1)
        })
        .collect())
}

/// Majority class of `labels` (ids `0..k`, others skipped) within each of
/// `regions` regions; ties go to the lowest class. `None` for regions with
/// no countable pixel.
pub fn region_majority(
    regions: &[Option<usize>],
    labels: &[u8],
    num_regions: usize,
    k: usize,
) -> Vec<Option<usize>> {
    let mut hist = vec![0u64; num_regions * k];
    for (r, &l) in regions.iter().zip(labels) {
        if let Some(r) = r {
            if usize::from(l) < k {
                hist[r * k + usize::from(l)] += 1;
            }
        }
    }
    (0..num_regions)
        .map(|r| {
            let h = &hist[r * k..(r + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if h[c] > h[best] {
                    best = c;
                }
            }
            (h[best] > 0).then_some(best)
        })
        .collect()
}

/// Scores proposals with oracle class ids: each proposal takes the majority
/// ground-truth class under it.
pub fn oracle_pseudo_eval(stack: &MaskStack, gt: &LabelMap, k: usize, mode: OracleMode) -> Result<Metrics> {
    let tally = oracle_tally(stack, gt, k, mode)?;
    metrics(&tally, &Matching::identity(k))
}

pub fn oracle_tally(stack: &MaskStack, gt: &LabelMap, k: usize, mode: OracleMode) -> Result<EvalTally> {
    let regions = region_map(stack, gt.height(), gt.width())?;
    let majority = region_majority(&regions, gt.ids(), stack.len(), k);
    let mut tally = EvalTally::new(k);
    match mode {
        OracleMode::All => {
            let pred: Vec<Option<usize>> =
                regions.iter().map(|r| r.and_then(|r| majority[r])).collect();
            tally.accumulate_ids(gt, &pred)?;
        }
        OracleMode::PseudoOnly => {
            for (r, &g) in regions.iter().zip(gt.ids()) {
                if g == IGNORE {
                    tally.ignored += 1;
                    continue;
                }
                if let Some(class) = r.and_then(|r| majority[r]) {
                    let g = usize::from(g);
                    if g >= k {
                        return Err(Error::InvalidLabel(format!("ground-truth id {g} outside 0..{k}")));
                    }
                    tally.confusion[g * k + class] += 1;
                }
            }
        }
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tally_from(k: usize, rows: &[u64]) -> EvalTally {
        let mut t = EvalTally::new(k);
        t.confusion.copy_from_slice(rows);
        t
    }

    fn brute_force(t: &EvalTally) -> u64 {
        fn rec(t: &EvalTally, cluster: usize, used: &mut Vec<bool>) -> u64 {
            if cluster == t.k {
                return 0;
            }
            let mut best = 0;
            for class in 0..t.k {
                if !used[class] {
                    used[class] = true;
                    best = best.max(t.get(class, cluster) + rec(t, cluster + 1, used));
                    used[class] = false;
                }
            }
            best
        }
        rec(t, 0, &mut vec![false; t.k])
    }

    #[test]
    fn all_ignore_gt() {
        let gt = LabelMap::filled(3, 4, IGNORE).unwrap();
        let pred = LabelMap::filled(3, 4, 1).unwrap();
        let mut t = EvalTally::new(3);
        t.accumulate(&gt, &pred).unwrap();
        assert_eq!(t.ignored, 12);
        assert!(t.confusion().iter().all(|&c| c == 0));
        assert!(matches!(metrics(&t, &Matching::identity(3)), Err(Error::EmptyTally)));
    }

    #[test]
    fn perfect_prediction() {
        let ids = vec![0, 1, 2, 2, 1, 0];
        let gt = LabelMap::new(2, 3, ids.clone()).unwrap();
        let mut t = EvalTally::new(3);
        t.accumulate(&gt, &gt).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(t.get(g, p), if g == p { 2 } else { 0 });
            }
        }
        let m = hungarian_match(&t);
        let r = metrics(&t, &m).unwrap();
        assert_eq!((r.acc, r.miou), (1.0, 1.0));
    }

    #[test]
    fn accumulate_matches_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        let gt_ids: Vec<u8> = (0..200)
            .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..k as u8) })
            .collect();
        let pred_ids: Vec<u8> = (0..200).map(|_| rng.gen_range(0..k as u8)).collect();
        let gt = LabelMap::new(10, 20, gt_ids.clone()).unwrap();
        let pred = LabelMap::new(10, 20, pred_ids.clone()).unwrap();
        let mut t = EvalTally::new(k);
        t.accumulate(&gt, &pred).unwrap();
        for g in 0..k {
            for p in 0..k {
                let want = gt_ids
                    .iter()
                    .zip(&pred_ids)
                    .filter(|(&a, &b)| usize::from(a) == g && usize::from(b) == p)
                    .count() as u64;
                assert_eq!(t.get(g, p), want);
            }
        }
        assert_eq!(t.ignored, gt_ids.iter().filter(|&&g| g == IGNORE).count() as u64);
    }

    #[test]
    fn shape_mismatch() {
        let mut t = EvalTally::new(2);
        let a = LabelMap::filled(2, 2, 0).unwrap();
        let b = LabelMap::filled(2, 3, 0).unwrap();
        assert!(matches!(t.accumulate(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn identity_and_reversal() {
        let t = tally_from(3, &[5, 0, 0, 0, 5, 0, 0, 0, 5]);
        assert_eq!(hungarian_match(&t).perm, vec![0, 1, 2]);
        let t = tally_from(3, &[0, 0, 5, 0, 5, 0, 5, 0, 0]);
        assert_eq!(hungarian_match(&t).perm, vec![2, 1, 0]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 1..=7 {
            for _ in 0..20 {
                let rows: Vec<u64> = (0..k * k).map(|_| rng.gen_range(0..50)).collect();
                let t = tally_from(k, &rows);
                let m = hungarian_match(&t);
                let mut seen = m.perm.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..k).collect::<Vec<_>>());
                assert_eq!(m.matched_tp, brute_force(&t));
            }
        }
    }

    #[test]
    fn two_class_hand_example() {
        let t = tally_from(2, &[2, 2, 0, 4]);
        let r = metrics(&t, &Matching::identity(2)).unwrap();
        assert_eq!(r.acc, 0.75);
        let ious: Vec<f64> = r.per_class_iou.iter().map(|v| v.unwrap()).collect();
        assert_eq!(ious[0], 0.5);
        assert!((ious[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded() {
        let t = tally_from(3, &[3, 0, 0, 0, 3, 0, 0, 0, 0]);
        let r = metrics(&t, &Matching::identity(3)).unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn missed_pixels_count_against() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, IGNORE, 1, 1]).unwrap();
        let mut t = EvalTally::new(2);
        t.accumulate(&gt, &pred).unwrap();
        let r = metrics(&t, &Matching::identity(2)).unwrap();
        assert_eq!(r.acc, 0.75);
        assert_eq!(r.per_class_iou[0], Some(0.5));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<(LabelMap, LabelMap)> = (0..4)
            .map(|_| {
                let g = (0..30).map(|_| rng.gen_range(0..3u8)).collect();
                let p = (0..30).map(|_| rng.gen_range(0..3u8)).collect();
                (LabelMap::new(5, 6, g).unwrap(), LabelMap::new(5, 6, p).unwrap())
            })
            .collect();
        let mut joint = EvalTally::new(3);
        let mut parts = [EvalTally::new(3), EvalTally::new(3)];
        for (i, (g, p)) in maps.iter().enumerate() {
            joint.accumulate(g, p).unwrap();
            parts[i % 2].accumulate(g, p).unwrap();
        }
        let [mut a, b] = parts;
        a.merge(&b).unwrap();
        assert_eq!(a, joint);
    }

    fn stack_from(h: usize, w: usize, index: &[Option<usize>], z: usize) -> MaskStack {
        let masks = (0..z).map(|k| index.iter().map(|&r| r == Some(k)).collect()).collect();
        let ignore = index.iter().map(|r| r.is_none()).collect();
        MaskStack::new(h, w, masks, ignore).unwrap()
    }

    #[test]
    fn oracle_on_exact_regions() {
        let gt = LabelMap::new(2, 3, vec![0, 0, 1, 2, 2, 1]).unwrap();
        let idx = [Some(1), Some(1), Some(0), Some(2), Some(2), Some(0)];
        let stack = stack_from(2, 3, &idx, 3);
        let r = oracle_pseudo_eval(&stack, &gt, 3, OracleMode::PseudoOnly).unwrap();
        assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn oracle_all_ignore_region_is_wrong() {
        let gt = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let mut masks = vec![vec![false; 4]];
        masks[0][0] = true;
        let stack = MaskStack::new(1, 4, masks, vec![false, true, true, true]).unwrap();
        let all = oracle_pseudo_eval(&stack, &gt, 2, OracleMode::All).unwrap();
        assert_eq!(all.acc, 0.25);
        let pseudo = oracle_pseudo_eval(&stack, &gt, 2, OracleMode::PseudoOnly).unwrap();
        assert_eq!(pseudo.acc, 1.0);
    }

    #[test]
    fn oracle_three_region_layout() {
        // Regions: left column block, middle, right; gt mostly agrees.
        let gt = LabelMap::new(2, 6, vec![0, 0, 1, 1, 2, 2, 0, 1, 1, 1, 2, 0]).unwrap();
        let idx: Vec<Option<usize>> = (0..12).map(|i| Some((i % 6) / 2)).collect();
        let stack = stack_from(2, 6, &idx, 3);
        let r = oracle_pseudo_eval(&stack, &gt, 3, OracleMode::PseudoOnly).unwrap();
        // Region 0 -> class 0 (3 of 4), region 1 -> class 1 (4 of 4),
        // region 2 -> class 2 (3 of 4).
        assert_eq!(r.acc, 10.0 / 12.0);
    }

    #[test]
    fn majority_tie_goes_low() {
        let regions = vec![Some(0); 4];
        assert_eq!(region_majority(&regions, &[4, 1, 4, 1], 1, 5), vec![Some(1)]);
    }
}

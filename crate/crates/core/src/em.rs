//! Class prototypes and the moving-average stochastic EM loop.
//!
//! The teacher bank `theta_T` is initialized from principal components,
//! pretrained with batch-wise cosine K-means, and then tracks the student
//! bank `theta_S` by exponential moving average while the student is fitted
//! to PriMaPs pseudo labels with a confidence-weighted focal loss.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use rayon::prelude::*;

use crate::crf::{masks_to_unary, mean_field_refine, CrfBackend, CrfParams, UnaryField};
use crate::dataio::{iterate_manifest, DatasetManifest, FeatureMap, LabelMap, ManifestRecord, RgbImage, IGNORE};
use crate::error::{Error, Result};
use crate::eval::{region_majority, region_map, EvalTally};
use crate::linalg::{l2_normalize, principal_components, CovarianceAccumulator};
use crate::primaps::{bilinear_taps, decompose, upsample_bilinear, upsample_map, MaskStack, ProposalConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Student and teacher prototypes, `K x C` row-major, rows unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    k: usize,
    c: usize,
    student: Vec<f64>,
    teacher: Vec<f64>,
    step: u64,
}

impl PrototypeBank {
    /// Bank with both sets equal to `rows` (normalized).
    pub fn from_rows(k: usize, c: usize, rows: Vec<f64>) -> Result<Self> {
        Self::from_parts(k, c, rows.clone(), rows, 0)
    }

    pub fn from_parts(k: usize, c: usize, student: Vec<f64>, teacher: Vec<f64>, step: u64) -> Result<Self> {
        if k == 0 || c == 0 || student.len() != k * c || teacher.len() != k * c {
            return Err(Error::DimensionMismatch(format!(
                "prototype bank {k}x{c} needs {} values per set",
                k * c
            )));
        }
        if let Some(index) = student.iter().chain(&teacher).position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        let mut bank = Self {
            k,
            c,
            student,
            teacher,
            step,
        };
        normalize_rows(&mut bank.student, c);
        normalize_rows(&mut bank.teacher, c);
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn student(&self) -> &[f64] {
        &self.student
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }

    pub fn teacher_row(&self, k: usize) -> &[f64] {
        &self.teacher[k * self.c..(k + 1) * self.c]
    }

    pub fn student_row(&self, k: usize) -> &[f64] {
        &self.student[k * self.c..(k + 1) * self.c]
    }

    /// Copies the teacher into the student.
    pub fn sync_student(&mut self) {
        self.student.clone_from(&self.teacher);
    }

    fn check_channels(&self, nf: &FeatureMap) -> Result<()> {
        if nf.channels() != self.c {
            return Err(Error::DimensionMismatch(format!(
                "bank has {} channels, features have {}",
                self.c,
                nf.channels()
            )));
        }
        Ok(())
    }
}

fn normalize_rows(rows: &mut [f64], c: usize) {
    for row in rows.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whose confidence average weights the focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChiScope {
    Batch,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub lr: f64,
    pub ema_interval: u64,
    pub ema_decay: f64,
    pub focal_gamma: f64,
    pub kmeans_epochs: usize,
    pub em_epochs: usize,
    pub batch_size: usize,
    pub pca_budget: usize,
    pub seed: u64,
    pub chi_scope: ChiScope,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            ema_interval: 10,
            ema_decay: 0.98,
            focal_gamma: 2.0,
            kmeans_epochs: 2,
            em_epochs: 50,
            batch_size: 32,
            pca_budget: 2975,
            seed: 0,
            chi_scope: ChiScope::Batch,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.ema_interval == 0 {
            return Err(Error::InvalidConfig("ema_interval must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.pca_budget == 0 {
            return Err(Error::InvalidConfig("batch size and PCA budget must be positive".into()));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("focal gamma {}", self.focal_gamma)));
        }
        Ok(())
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Teacher bank from the first `k` principal components of the pooled
/// covariance of normalized features over the first `budget` images.
pub fn init_prototypes(manifest: &DatasetManifest, k: usize, budget: usize) -> Result<PrototypeBank> {
    if budget == 0 || manifest.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut acc: Option<CovarianceAccumulator> = None;
    for record in manifest.records.iter().take(budget) {
        let nf = l2_normalize(&record.load_features()?);
        acc.get_or_insert_with(|| CovarianceAccumulator::new(nf.channels())).add(&nf)?;
    }
    let cov = acc.ok_or(Error::EmptySelection)?.finish()?;
    let c = cov.dim();
    let pd = principal_components(&cov, k)?;
    PrototypeBank::from_rows(k, c, pd.vectors.concat())
}

/// Loss and gradient summed over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub positions: usize,
}

impl LossTerms {
    fn zeros(len: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; len],
            positions: 0,
        }
    }

    fn add(&mut self, other: &LossTerms) {
        self.loss += other.loss;
        self.positions += other.positions;
        self.grad.iter_mut().zip(&other.grad).for_each(|(a, b)| *a += b);
    }
}

/// `-sum_p max_k <theta_T[k], f_p>` and its subgradient w.r.t. the teacher.
pub fn kmeans_loss(bank: &PrototypeBank, nf: &FeatureMap) -> Result<LossTerms> {
    bank.check_channels(nf)?;
    let mut terms = LossTerms::zeros(bank.k * bank.c);
    for p in 0..nf.positions() {
        let f = nf.vector(p);
        let (best, sim) = best_prototype(&bank.teacher, bank.c, &f);
        terms.loss -= sim;
        for (g, v) in terms.grad[best * bank.c..(best + 1) * bank.c].iter_mut().zip(&f) {
            *g -= v;
        }
    }
    terms.positions = nf.positions();
    Ok(terms)
}

fn best_prototype(rows: &[f64], c: usize, f: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, row) in rows.chunks(c).enumerate() {
        let s = dot(row, f);
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

/// Softmax of `rows . f` into `out`.
fn softmax_logits(rows: &[f64], c: usize, f: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(rows.chunks(c)) {
        *o = dot(row, f);
    }
    let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - mx).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Feature vectors at the pseudo-label resolution, bilinearly interpolated
/// from the normalized grid, paired with their labels. IGNORE pixels are
/// skipped.
fn labelled_vectors<'a>(
    nf: &'a FeatureMap,
    pseudo: &'a LabelMap,
) -> impl Iterator<Item = (usize, Vec<f64>)> + 'a {
    let (sh, sw) = (nf.height(), nf.width());
    let same = (sh, sw) == (pseudo.height(), pseudo.width());
    let taps = if same {
        Vec::new()
    } else {
        bilinear_taps(sh, sw, pseudo.height(), pseudo.width())
    };
    let c = nf.channels();
    pseudo.ids().iter().enumerate().filter(|(_, &id)| id != IGNORE).map(move |(i, &id)| {
        let v = if same {
            nf.vector(i)
        } else {
            let mut v = vec![0.0; c];
            for &(src, w) in &taps[i] {
                if w != 0.0 {
                    for (ch, slot) in v.iter_mut().enumerate() {
                        *slot += w * f64::from(nf.get(ch, src));
                    }
                }
            }
            v
        };
        (usize::from(id), v)
    })
}

/// Sum of student softmax outputs over non-IGNORE pixels, and their count.
pub fn class_confidence(bank: &PrototypeBank, aug_nf: &FeatureMap, pseudo: &LabelMap) -> Result<(Vec<f64>, usize)> {
    bank.check_channels(aug_nf)?;
    pseudo.validate(bank.k)?;
    let mut sums = vec![0.0; bank.k];
    let mut y = vec![0.0; bank.k];
    let mut count = 0;
    for (_, f) in labelled_vectors(aug_nf, pseudo) {
        softmax_logits(&bank.student, bank.c, &f, &mut y);
        sums.iter_mut().zip(&y).for_each(|(s, v)| *s += v);
        count += 1;
    }
    Ok((sums, count))
}

/// Focal loss summed over non-IGNORE pixels with fixed confidences `chi`,
/// and its gradient w.r.t. the student.
pub fn focal_loss_with_chi(
    bank: &PrototypeBank,
    aug_nf: &FeatureMap,
    pseudo: &LabelMap,
    chi: &[f64],
    gamma: f64,
) -> Result<LossTerms> {
    bank.check_channels(aug_nf)?;
    pseudo.validate(bank.k)?;
    let (k, c) = (bank.k, bank.c);
    let mut terms = LossTerms::zeros(k * c);
    let mut y = vec![0.0; k];
    for (label, f) in labelled_vectors(aug_nf, pseudo) {
        softmax_logits(&bank.student, c, &f, &mut y);
        let weight = (1.0 - chi[label]).powf(gamma);
        terms.loss -= weight * y[label].ln();
        for (j, yj) in y.iter().enumerate() {
            let coeff = weight * (yj - if j == label { 1.0 } else { 0.0 });
            if coeff != 0.0 {
                for (g, v) in terms.grad[j * c..(j + 1) * c].iter_mut().zip(&f) {
                    *g += coeff * v;
                }
            }
        }
        terms.positions += 1;
    }
    Ok(terms)
}

/// Focal loss of one image with confidences from the same image; mean over
/// contributing pixels.
pub fn focal_loss(bank: &PrototypeBank, aug_nf: &FeatureMap, pseudo: &LabelMap, gamma: f64) -> Result<LossTerms> {
    let (sums, count) = class_confidence(bank, aug_nf, pseudo)?;
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    let chi: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut terms = focal_loss_with_chi(bank, aug_nf, pseudo, &chi, gamma)?;
    terms.loss /= count as f64;
    terms.grad.iter_mut().for_each(|g| *g /= count as f64);
    Ok(terms)
}

/// `theta_T <- decay * theta_T + (1 - decay) * theta_S`, rows renormalized.
pub fn ema_update(bank: &mut PrototypeBank, decay: f64) {
    for (t, s) in bank.teacher.iter_mut().zip(&bank.student) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    normalize_rows(&mut bank.teacher, bank.c);
}

/// Teacher softmax on the grid, class-major `K x H*W`.
pub fn teacher_probabilities(bank: &PrototypeBank, nf: &FeatureMap) -> Result<Vec<f64>> {
    bank.check_channels(nf)?;
    let n = nf.positions();
    let mut out = vec![0.0; bank.k * n];
    let mut y = vec![0.0; bank.k];
    for p in 0..n {
        softmax_logits(&bank.teacher, bank.c, &nf.vector(p), &mut y);
        for (k, v) in y.iter().enumerate() {
            out[k * n + p] = *v;
        }
    }
    Ok(out)
}

/// Teacher softmax bilinearly resized to `h x w`, class-major.
pub fn teacher_probabilities_at(bank: &PrototypeBank, nf: &FeatureMap, h: usize, w: usize) -> Result<Vec<f64>> {
    let probs = teacher_probabilities(bank, nf)?;
    let (sh, sw) = (nf.height(), nf.width());
    if (sh, sw) == (h, w) {
        return Ok(probs);
    }
    Ok(probs
        .chunks(sh * sw)
        .flat_map(|m| upsample_map(m, sh, sw, h, w))
        .collect())
}

fn argmax_classes(probs: &[f64], k: usize, n: usize) -> Vec<u8> {
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if probs[c * n + i] > probs[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Each proposal region takes the majority class of `prediction` within it
/// (ties to the lowest id); the ignore region becomes IGNORE.
pub fn build_pseudo_label(stack: &MaskStack, prediction: &LabelMap, k: usize) -> Result<LabelMap> {
    let (h, w) = (prediction.height(), prediction.width());
    let regions = region_map(stack, h, w)?;
    Ok(pseudo_from_regions(&regions, stack.len(), prediction, k))
}

fn pseudo_from_regions(regions: &[Option<usize>], num_regions: usize, prediction: &LabelMap, k: usize) -> LabelMap {
    let majority = region_majority(regions, prediction.ids(), num_regions, k);
    let ids = regions
        .iter()
        .map(|r| match r.and_then(|r| majority[r]) {
            Some(c) => c as u8,
            None => IGNORE,
        })
        .collect();
    LabelMap::new(prediction.height(), prediction.width(), ids).expect("shape preserved")
}

/// Proposals of one image after CRF refinement, at the refinement
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedRegions {
    pub height: usize,
    pub width: usize,
    pub num_regions: usize,
    pub regions: Vec<Option<usize>>,
    /// Fraction of grid positions covered before refinement.
    pub grid_coverage: f64,
}

impl RefinedRegions {
    pub fn coverage(&self) -> f64 {
        self.regions.iter().filter(|r| r.is_some()).count() as f64 / self.regions.len() as f64
    }

    pub fn index_bytes(&self) -> Vec<u8> {
        self.regions
            .iter()
            .map(|r| r.map_or(IGNORE, |r| r as u8))
            .collect()
    }
}

/// Turns a refined distribution over `{ignore, proposal 1..Z}` into compact
/// region ids (empty proposals dropped).
pub fn regions_from_unary(q: &UnaryField) -> (Vec<Option<usize>>, usize) {
    let labels = q.argmax();
    let mut present = vec![false; q.labels()];
    labels.iter().for_each(|&l| present[l] = true);
    let mut rank = vec![None; q.labels()];
    let mut next = 0;
    for l in 1..q.labels() {
        if present[l] {
            rank[l] = Some(next);
            next += 1;
        }
    }
    (labels.iter().map(|&l| rank[l]).collect(), next)
}

/// Decomposes, upsamples to `h x w`, and refines the proposals of one
/// image. Without an image the CRF uses the spatial-only appearance kernel.
pub fn refine_proposals(
    features: &FeatureMap,
    image: Option<&RgbImage>,
    size: (usize, usize),
    pcfg: &ProposalConfig,
    crf: &CrfParams,
    backend: CrfBackend,
) -> Result<(MaskStack, RefinedRegions)> {
    let stack = decompose(features, pcfg)?;
    let (h, w) = size;
    let soft = upsample_bilinear(&stack, h, w)?;
    let unary = masks_to_unary(&soft, h, w)?;
    let refined = mean_field_refine(&unary, image, crf, backend)?;
    let (regions, num_regions) = regions_from_unary(&refined);
    let out = RefinedRegions {
        height: h,
        width: w,
        num_regions,
        regions,
        grid_coverage: stack.coverage(),
    };
    Ok((stack, out))
}

/// Resolution of pseudo labels and predictions for a record: the image's,
/// else the label's, else the feature grid.
pub fn target_size(record: &ManifestRecord, features: &FeatureMap) -> Result<(usize, usize)> {
    if let Some(img) = record.load_image()? {
        return Ok((img.height(), img.width()));
    }
    if let Some(path) = &record.label_path {
        let (w, h) = image::image_dimensions(path)?;
        return Ok((h as usize, w as usize));
    }
    Ok((features.height(), features.width()))
}

/// Teacher prediction: softmax, bilinear upsampling, optional CRF, argmax.
/// The output is `size`, else the image size, else the feature grid. The
/// CRF runs only with an image and a positive iteration count.
pub fn predict(
    bank: &PrototypeBank,
    features: &FeatureMap,
    image: Option<&RgbImage>,
    size: Option<(usize, usize)>,
    crf: &CrfParams,
    backend: CrfBackend,
) -> Result<LabelMap> {
    let nf = l2_normalize(features);
    let (h, w) = match (size, image) {
        (Some(s), _) => s,
        (None, Some(img)) => (img.height(), img.width()),
        (None, None) => (features.height(), features.width()),
    };
    if let Some(img) = image {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "prediction size {h}x{w} differs from image {}x{}",
                img.height(),
                img.width()
            )));
        }
    }
    let probs = teacher_probabilities_at(bank, &nf, h, w)?;
    let ids = match image {
        Some(img) if crf.iterations > 0 => {
            let unary = UnaryField::new(bank.k, h, w, probs)?;
            let q = mean_field_refine(&unary, Some(img), crf, backend)?;
            q.argmax().into_iter().map(|l| l as u8).collect()
        }
        _ => argmax_classes(&probs, bank.k, h * w),
    };
    LabelMap::new(h, w, ids)
}

/// Predicts every labelled record and tallies it against its label.
pub fn evaluate(
    manifest: &DatasetManifest,
    bank: &PrototypeBank,
    crf: &CrfParams,
    backend: CrfBackend,
) -> Result<EvalTally> {
    let k = manifest.num_classes;
    let tallies: Vec<EvalTally> = manifest
        .records
        .par_iter()
        .filter(|r| r.label_path.is_some())
        .map(|r| {
            let gt = r.load_label(k)?.expect("filtered on label presence");
            let features = r.load_features()?;
            let image = r.load_image()?;
            let pred = predict(bank, &features, image.as_ref(), Some((gt.height(), gt.width())), crf, backend)?;
            let mut t = EvalTally::new(k);
            t.accumulate(&gt, &pred)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut total = EvalTally::new(k);
    for t in &tallies {
        total.merge(t)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: &'static str,
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub pseudo_coverage: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub header: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k}={v}");
        }
        for e in &self.epochs {
            let _ = write!(out, "phase={} epoch={} steps={} loss={:.9}", e.phase, e.epoch, e.steps, e.loss);
            if let Some(c) = e.pseudo_coverage {
                let _ = write!(out, " pseudo_coverage={c:.6}");
            }
            out.push('\n');
        }
        out
    }
}

pub struct FitOutcome {
    pub bank: PrototypeBank,
    pub log: TrainingLog,
}

struct Sample {
    clean: FeatureMap,
    aug: FeatureMap,
    regions: RefinedRegions,
}

/// Runs PCA initialization, K-means pretraining and the EM loop.
pub fn fit(
    manifest: &DatasetManifest,
    cfg: &EmConfig,
    pcfg: &ProposalConfig,
    crf: &CrfParams,
    backend: CrfBackend,
) -> Result<FitOutcome> {
    cfg.validate()?;
    pcfg.validate()?;
    crf.validate()?;
    let k = manifest.num_classes;
    let mut log = TrainingLog {
        header: vec![
            ("lr".into(), cfg.lr.to_string()),
            ("ema_decay".into(), cfg.ema_decay.to_string()),
            ("ema_interval".into(), cfg.ema_interval.to_string()),
            ("psi".into(), pcfg.psi.to_string()),
            ("batch".into(), cfg.batch_size.to_string()),
            ("kmeans_epochs".into(), cfg.kmeans_epochs.to_string()),
            ("em_epochs".into(), cfg.em_epochs.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ],
        epochs: Vec::new(),
    };
    let mut bank = init_prototypes(manifest, k, cfg.pca_budget)?;
    info!("initialized {k} prototypes over {} channels", bank.c);

    let mut adam = Adam::new(k * bank.c, cfg.lr);
    for epoch in 0..cfg.kmeans_epochs {
        let mut total = LossTerms::zeros(0);
        let mut steps = 0;
        for batch in iterate_manifest(manifest, cfg.batch_size, Some(epoch_seed(cfg.seed, 0, epoch)))? {
            let parts: Vec<LossTerms> = batch
                .par_iter()
                .map(|r| kmeans_loss(&bank, &l2_normalize(&r.load_features()?)))
                .collect::<Result<_>>()?;
            let mut sum = LossTerms::zeros(k * bank.c);
            parts.iter().for_each(|p| sum.add(p));
            let mean = sum.loss / sum.positions.max(1) as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss { phase: "kmeans", epoch });
            }
            let scale = 1.0 / sum.positions.max(1) as f64;
            let grad: Vec<f64> = sum.grad.iter().map(|g| g * scale).collect();
            adam.step(&mut bank.teacher, &grad);
            normalize_rows(&mut bank.teacher, bank.c);
            total.loss += sum.loss;
            total.positions += sum.positions;
            steps += 1;
        }
        let loss = total.loss / total.positions.max(1) as f64;
        info!("phase=kmeans epoch={epoch} loss={loss:.6}");
        log.epochs.push(EpochRecord {
            phase: "kmeans",
            epoch,
            steps,
            loss,
            pseudo_coverage: None,
        });
    }
    bank.sync_student();

    if cfg.em_epochs == 0 {
        return Ok(FitOutcome { bank, log });
    }

    // Proposals and their CRF refinement depend only on the data, so they are
    // computed once and reused by every E-step.
    let warned = std::sync::atomic::AtomicBool::new(false);
    let samples: Vec<Sample> = manifest
        .records
        .par_iter()
        .map(|r| {
            let clean = r.load_features()?;
            let aug = match r.load_aug_features()? {
                Some(a) => a,
                None => {
                    if !warned.swap(true, std::sync::atomic::Ordering::Relaxed) {
                        warn!("augmented features missing; using clean features for the M-step");
                    }
                    clean.clone()
                }
            };
            if aug.channels() != clean.channels() || aug.height() != clean.height() || aug.width() != clean.width() {
                return Err(Error::DimensionMismatch(format!("augmented features of {} differ in shape", r.stem())));
            }
            let image = r.load_image()?;
            let size = target_size(r, &clean)?;
            let (_, regions) = refine_proposals(&clean, image.as_ref(), size, pcfg, crf, backend)?;
            debug!("{}: {} regions, coverage {:.3}", r.stem(), regions.num_regions, regions.coverage());
            Ok(Sample {
                clean: l2_normalize(&clean),
                aug: l2_normalize(&aug),
                regions,
            })
        })
        .collect::<Result<_>>()?;
    let by_path: std::collections::HashMap<&Path, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.feature_path.as_path(), i))
        .collect();

    let mut adam = Adam::new(k * bank.c, cfg.lr);
    for epoch in 0..cfg.em_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        let mut covered = 0usize;
        let mut pixels = 0usize;
        let mut steps = 0;
        for batch in iterate_manifest(manifest, cfg.batch_size, Some(epoch_seed(cfg.seed, 1, epoch)))? {
            let teacher = bank.clone();
            let members: Vec<&Sample> = batch.iter().map(|r| &samples[by_path[r.feature_path.as_path()]]).collect();
            // E-step.
            let pseudo: Vec<LabelMap> = members
                .par_iter()
                .map(|s| {
                    let (h, w) = (s.regions.height, s.regions.width);
                    let probs = teacher_probabilities_at(&teacher, &s.clean, h, w)?;
                    let prediction = LabelMap::new(h, w, argmax_classes(&probs, k, h * w))?;
                    Ok(pseudo_from_regions(&s.regions.regions, s.regions.num_regions, &prediction, k))
                })
                .collect::<Result<_>>()?;
            for p in &pseudo {
                covered += p.ids().iter().filter(|&&id| id != IGNORE).count();
                pixels += p.ids().len();
            }
            // M-step.
            let confidences: Vec<(Vec<f64>, usize)> = members
                .par_iter()
                .zip(&pseudo)
                .map(|(s, p)| class_confidence(&bank, &s.aug, p))
                .collect::<Result<_>>()?;
            let batch_count: usize = confidences.iter().map(|c| c.1).sum();
            if batch_count == 0 {
                warn!("epoch {epoch}: batch without pseudo-labelled pixels skipped");
                continue;
            }
            let mut batch_chi = vec![0.0; k];
            for (sums, _) in &confidences {
                batch_chi.iter_mut().zip(sums).for_each(|(a, b)| *a += b);
            }
            batch_chi.iter_mut().for_each(|v| *v /= batch_count as f64);
            let parts: Vec<LossTerms> = members
                .par_iter()
                .zip(&pseudo)
                .zip(&confidences)
                .map(|((s, p), (sums, count))| {
                    let chi = match cfg.chi_scope {
                        ChiScope::Batch => batch_chi.clone(),
                        ChiScope::Image if *count > 0 => sums.iter().map(|v| v / *count as f64).collect(),
                        ChiScope::Image => vec![0.0; k],
                    };
                    focal_loss_with_chi(&bank, &s.aug, p, &chi, cfg.focal_gamma)
                })
                .collect::<Result<_>>()?;
            let mut sum = LossTerms::zeros(k * bank.c);
            parts.iter().for_each(|p| sum.add(p));
            let mean = sum.loss / sum.positions as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss { phase: "em", epoch });
            }
            let scale = 1.0 / sum.positions as f64;
            let grad: Vec<f64> = sum.grad.iter().map(|g| g * scale).collect();
            adam.step(&mut bank.student, &grad);
            normalize_rows(&mut bank.student, bank.c);
            bank.step += 1;
            if bank.step % cfg.ema_interval == 0 {
                ema_update(&mut bank, cfg.ema_decay);
            }
            epoch_loss += sum.loss;
            epoch_pixels += sum.positions;
            steps += 1;
        }
        let loss = epoch_loss / epoch_pixels.max(1) as f64;
        let coverage = covered as f64 / pixels.max(1) as f64;
        info!("phase=em epoch={epoch} loss={loss:.6} pseudo_coverage={coverage:.3}");
        log.epochs.push(EpochRecord {
            phase: "em",
            epoch,
            steps,
            loss,
            pseudo_coverage: Some(coverage),
        });
    }
    Ok(FitOutcome { bank, log })
}

fn epoch_seed(seed: u64, phase: u64, epoch: usize) -> u64 {
    seed ^ (phase << 48) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn write_checkpoint(bank: &PrototypeBank, config_echo: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * bank.k * bank.c + config_echo.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(bank.k as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.c as u32).to_le_bytes());
    buf.extend_from_slice(&bank.step.to_le_bytes());
    for v in bank.student.iter().chain(&bank.teacher) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_echo.as_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint; returns the bank and the stored config echo.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(PrototypeBank, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::IoFailure(e),
    })?;
    let bad = |msg: &str| Error::CheckpointMismatch(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a prototype checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let step = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = k
        .checked_mul(c)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad("bank size overflows"))?;
    let body = &bytes[24..];
    if body.len() < count + 4 {
        return Err(bad("truncated"));
    }
    let values: Vec<f64> = body[..count]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    let echo_len = u32::from_le_bytes(body[count..count + 4].try_into().unwrap()) as usize;
    let echo = body
        .get(count + 4..count + 4 + echo_len)
        .ok_or_else(|| bad("truncated config echo"))?;
    let echo = String::from_utf8(echo.to_vec()).map_err(|_| bad("config echo is not UTF-8"))?;
    let (student, teacher) = values.split_at(k * c);
    let bank = PrototypeBank::from_parts(k, c, student.to_vec(), teacher.to_vec(), step)?;
    Ok((bank, echo))
}

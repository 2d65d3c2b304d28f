//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use primaps::cli::run_from;
use primaps::crf::{mean_field_refine, CrfBackend, CrfParams, UnaryField};
use primaps::dataio::{read_feature_file, FeatureMap, LabelMap, RgbImage, IGNORE};
use primaps::em::{class_confidence, ema_update, focal_loss, kmeans_loss, PrototypeBank};
use primaps::eval::{hungarian_match, metrics, EvalTally, Matching};
use primaps::linalg::{l2_normalize, principal_components, Covariance};
use primaps::primaps::{decompose, AnchorMode, IterationMode, ProposalConfig, StatisticsScope};

type Verdict = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, name: &str, limit: Option<Duration>, check: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let verdict = match (verdict, limit) {
            (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; runtime {elapsed:.1?} exceeds {l:?}")),
            (v, _) => v,
        };
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if verdict.is_err() {
            self.failures += 1;
        }
        let mut err = std::io::stderr();
        let _ = writeln!(err, "{tag} {name}: {detail} [{:.2}s]", elapsed.as_secs_f64());
    }
}

fn require(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn pca_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_val, mut worst_res) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let c = rng.gen_range(1..=16);
        let m = rng.gen_range(1..=2 * c);
        let b: Vec<f64> = (0..c * m).map(|_| normal(&mut rng)).collect();
        let mut sigma = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                sigma[i * c + j] = (0..m).map(|t| b[i * m + t] * b[j * m + t]).sum::<f64>() / m as f64;
            }
        }
        let cov = Covariance::from_matrix(c, sigma.clone(), m).map_err(|e| e.to_string())?;
        let pd = principal_components(&cov, c).map_err(|e| e.to_string())?;
        let mut oracle: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(c, c, &sigma)).eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        let lambda1 = oracle[0].max(f64::MIN_POSITIVE);
        for (i, (v, &lam)) in pd.vectors.iter().zip(&pd.eigenvalues).enumerate() {
            worst_val = worst_val.max((lam - oracle[i]).abs());
            let res: f64 = (0..c)
                .map(|r| {
                    let sv: f64 = (0..c).map(|q| sigma[r * c + q] * v[q]).sum();
                    (sv - lam * v[r]).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            worst_res = worst_res.max(res / lambda1);
        }
    }
    require(
        worst_val <= 1e-6 && worst_res <= 1e-5,
        format!("200 matrices, max eigenvalue error {worst_val:.2e} (<= 1e-6), max residual/lambda1 {worst_res:.2e} (<= 1e-5)"),
    )
}

fn partition_invariant() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_masks_seen = 0;
    for case in 0..500 {
        let c = rng.gen_range(1..=32);
        let h = rng.gen_range(1..=24);
        let w = rng.gen_range(1..=24);
        let data: Vec<f32> = (0..c * h * w)
            .map(|_| if rng.gen_bool(0.05) { 0.0 } else { normal(&mut rng) as f32 })
            .collect();
        let fm = FeatureMap::new(c, h, w, data, "rand").map_err(|e| e.to_string())?;
        let cfg = ProposalConfig {
            psi: rng.gen_range(0.05..0.95),
            coverage_stop: rng.gen_range(0.5..=1.0),
            max_masks: rng.gen_range(1..=64),
            anchor_mode: if rng.gen_bool(0.5) { AnchorMode::NearestNeighbor } else { AnchorMode::RawComponent },
            iteration_mode: if rng.gen_bool(0.8) { IterationMode::IterativeMasking } else { IterationMode::FixedComponents },
            statistics: if rng.gen_bool(0.5) { StatisticsScope::AllPositions } else { StatisticsScope::UnassignedOnly },
        };
        let stack = decompose(&fm, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        if stack.len() > cfg.max_masks {
            return Err(format!("case {case}: {} masks > max {}", stack.len(), cfg.max_masks));
        }
        max_masks_seen = max_masks_seen.max(stack.len());
        for p in 0..h * w {
            let count = stack.masks().iter().filter(|m| m[p]).count() + usize::from(stack.ignore()[p]);
            if count != 1 {
                return Err(format!("case {case}: position {p} covered {count} times"));
            }
        }
    }
    Ok(format!("500 maps partitioned exactly, up to {max_masks_seen} masks"))
}

fn crf_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let params = CrfParams::default();
    let (h, w) = (16, 16);
    let n = h * w;
    let mut worst = 0.0f64;
    let mut min_agree = 1.0f64;
    for _ in 0..50 {
        let l = rng.gen_range(2..=8);
        let mut probs = vec![0.0; l * n];
        for i in 0..n {
            let raw: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..l {
                probs[k * n + i] = raw[k] / s;
            }
        }
        let unary = UnaryField::new(l, h, w, probs).map_err(|e| e.to_string())?;
        let img = RgbImage::new(h, w, (0..3 * n).map(|_| rng.gen_range(0.0f32..1.0)).collect()).map_err(|e| e.to_string())?;
        let exact = mean_field_refine(&unary, Some(&img), &params, CrfBackend::Exact).map_err(|e| e.to_string())?;
        let lattice = mean_field_refine(&unary, Some(&img), &params, CrfBackend::Lattice).map_err(|e| e.to_string())?;
        for (a, b) in exact.probs().iter().zip(lattice.probs()) {
            worst = worst.max((a - b).abs());
        }
        let agree = exact.argmax().iter().zip(lattice.argmax()).filter(|(a, b)| **a == *b).count();
        min_agree = min_agree.min(agree as f64 / n as f64);
    }
    require(
        worst <= 0.05 && min_agree >= 0.98,
        format!("50 problems, max-abs deviation {worst:.4} (<= 0.05), min argmax agreement {:.2}% (>= 98%)", 100.0 * min_agree),
    )
}

fn random_nf(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> FeatureMap {
    let data = (0..c * h * w).map(|_| normal(rng) as f32).collect();
    l2_normalize(&FeatureMap::new(c, h, w, data, "g").unwrap())
}

fn random_unit_rows(k: usize, c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut rows: Vec<f64> = (0..k * c).map(|_| normal(rng)).collect();
    for r in rows.chunks_mut(c) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    rows
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst of `max_i |fd_i - g_i| / max_i |fd_i|` is returned.
fn fd_relative(rows: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-4;
    let fd: Vec<f64> = (0..rows.len())
        .map(|i| {
            let mut up = rows.to_vec();
            up[i] += h;
            let mut down = rows.to_vec();
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    fd.iter().zip(grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_k, mut worst_f) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 100 {
        let k = rng.gen_range(2..=5);
        let c = rng.gen_range(2..=8);
        let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let nf = random_nf(c, h, w, &mut rng);
        let rows = random_unit_rows(k, c, &mut rng);
        // Skip instances with a near tie in the K-means argmax.
        let margin = (0..nf.positions())
            .map(|p| {
                let f = nf.vector(p);
                let mut s: Vec<f64> = rows.chunks(c).map(|r| dot(r, &f)).collect();
                s.sort_by(|a, b| b.total_cmp(a));
                s[0] - s[1]
            })
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-2 {
            continue;
        }
        let bank = PrototypeBank::from_rows(k, c, rows.clone()).map_err(|e| e.to_string())?;
        let km = kmeans_loss(&bank, &nf).map_err(|e| e.to_string())?;
        let kmeans_direct = |r: &[f64]| -> f64 {
            (0..nf.positions())
                .map(|p| {
                    let f = nf.vector(p);
                    -r.chunks(c).map(|row| dot(row, &f)).fold(f64::NEG_INFINITY, f64::max)
                })
                .sum()
        };
        if (km.loss - kmeans_direct(&rows)).abs() > 1e-9 {
            return Err(format!("kmeans loss {} vs direct {}", km.loss, kmeans_direct(&rows)));
        }
        worst_k = worst_k.max(fd_relative(&rows, &km.grad, kmeans_direct));

        let ids: Vec<u8> = (0..h * w)
            .map(|i| if i % 7 == 3 { IGNORE } else { rng.gen_range(0..k as u8) })
            .collect();
        let pseudo = LabelMap::new(h, w, ids).map_err(|e| e.to_string())?;
        let fl = focal_loss(&bank, &nf, &pseudo, 2.0).map_err(|e| e.to_string())?;
        let (sums, count) = class_confidence(&bank, &nf, &pseudo).map_err(|e| e.to_string())?;
        let chi: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let focal_direct = |r: &[f64]| -> f64 {
            let mut total = 0.0;
            for (p, &id) in pseudo.ids().iter().enumerate() {
                if id == IGNORE {
                    continue;
                }
                let f = nf.vector(p);
                let logits: Vec<f64> = r.chunks(c).map(|row| dot(row, &f)).collect();
                let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
                let label = usize::from(id);
                total -= (1.0 - chi[label]).powi(2) * (logits[label] - lse);
            }
            total / count as f64
        };
        if (fl.loss - focal_direct(&rows)).abs() > 1e-8 {
            return Err(format!("focal loss {} vs direct {}", fl.loss, focal_direct(&rows)));
        }
        worst_f = worst_f.max(fd_relative(&rows, &fl.grad, focal_direct));
        done += 1;
    }
    require(
        worst_k <= 1e-4 && worst_f <= 1e-4,
        format!("100 instances, worst relative error kmeans {worst_k:.2e}, focal {worst_f:.2e} (<= 1e-4)"),
    )
}

fn normalized(rows: &[f64], c: usize) -> Vec<f64> {
    let mut out = rows.to_vec();
    for r in out.chunks_mut(c) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn ema_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (k, c) = (rng.gen_range(1..=6), rng.gen_range(1..=12));
        let s = random_unit_rows(k, c, &mut rng);
        let t = random_unit_rows(k, c, &mut rng);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

        let mut bank = PrototypeBank::from_parts(k, c, s.clone(), t.clone(), 0).map_err(|e| e.to_string())?;
        let before = bank.teacher().to_vec();
        ema_update(&mut bank, 1.0);
        worst = worst.max(diff(bank.teacher(), &normalized(&before, c)));

        let mut bank = PrototypeBank::from_parts(k, c, s.clone(), t.clone(), 0).map_err(|e| e.to_string())?;
        ema_update(&mut bank, 0.0);
        worst = worst.max(diff(bank.teacher(), &normalized(bank.student(), c)));

        let mut bank = PrototypeBank::from_rows(k, c, s.clone()).map_err(|e| e.to_string())?;
        let before = bank.teacher().to_vec();
        ema_update(&mut bank, 0.98);
        worst = worst.max(diff(bank.teacher(), &normalized(&before, c)));
    }
    let mut bank = PrototypeBank::from_parts(1, 1, vec![-1.0], vec![1.0], 0).map_err(|e| e.to_string())?;
    ema_update(&mut bank, 0.98);
    // 0.98 * 1 + 0.02 * -1 renormalizes back to 1.
    let scalar = bank.teacher()[0];
    require(
        worst <= 1e-14 && scalar == 1.0,
        format!("decay 1, decay 0 and fixed point hold to {worst:.1e} after renormalization"),
    )
}

fn random_tally(k: usize, rng: &mut impl Rng) -> EvalTally {
    let n = rng.gen_range(1..=120);
    let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k as u8)).collect();
    let shift = rng.gen_range(0..k as u8);
    let pred: Vec<u8> = gt
        .iter()
        .map(|&g| if rng.gen_bool(0.6) { (g + shift) % k as u8 } else { rng.gen_range(0..k as u8) })
        .collect();
    let mut t = EvalTally::new(k);
    t.accumulate(&LabelMap::new(1, n, gt).unwrap(), &LabelMap::new(1, n, pred).unwrap()).unwrap();
    t
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn hungarian_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let perms: Vec<Vec<Vec<usize>>> = (0..=8).map(permutations).collect();
    for case in 0..200 {
        let k = rng.gen_range(1..=8);
        let t = random_tally(k, &mut rng);
        let m = hungarian_match(&t);
        let brute = perms[k]
            .iter()
            .map(|p| (0..k).map(|cl| t.get(p[cl], cl)).sum::<u64>())
            .max()
            .unwrap();
        let via_perm: u64 = (0..k).map(|cl| t.get(m.perm[cl], cl)).sum();
        if m.matched_tp != brute || via_perm != brute {
            return Err(format!("case {case} (K={k}): hungarian {} / {via_perm} vs brute force {brute}", m.matched_tp));
        }
    }
    Ok("200 tallies, matched_tp equals exhaustive search".into())
}

fn metrics_hand_case() -> Verdict {
    // Rows are ground truth, columns predictions: [[2, 2], [0, 4]].
    let gt = LabelMap::new(1, 8, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    let pred = LabelMap::new(1, 8, vec![0, 0, 1, 1, 1, 1, 1, 1]).unwrap();
    let mut t = EvalTally::new(2);
    t.accumulate(&gt, &pred).map_err(|e| e.to_string())?;
    let m = metrics(&t, &hungarian_match(&t)).map_err(|e| e.to_string())?;
    let id = metrics(&t, &Matching::identity(2)).map_err(|e| e.to_string())?;
    require(
        (m.acc - 0.75).abs() < 1e-12 && (m.miou - 0.5833).abs() <= 1e-4 && m == id,
        format!("acc {:.4}, mIoU {:.4}", m.acc, m.miou),
    )
}

fn kv(path: &Path, key: &str) -> Result<f64, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| format!("{key} missing in {}", path.display()))?
        .parse()
        .map_err(|e| format!("{key}: {e}"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["primaps"];
    full.extend_from_slice(args);
    run_from(full).map_err(|e| format!("primaps {}: {e}", args.join(" ")))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Batch size of the synthetic runs (see the decisions ledger).
const SYNTH_BATCH: &str = "8";

fn synthetic_recovery(root: &Path, data: &Path) -> Verdict {
    let manifest = data.join("manifest.txt");
    let em = root.join("em");
    let base = root.join("baseline");
    cli(&["fit", "--manifest", p(&manifest), "--out", p(&em), "--batch", SYNTH_BATCH])?;
    cli(&["predict", "--manifest", p(&manifest), "--out", p(&em)])?;
    cli(&["eval", "--manifest", p(&manifest), "--out", p(&em)])?;
    cli(&["fit", "--manifest", p(&manifest), "--out", p(&base), "--batch", SYNTH_BATCH, "--epochs", "0"])?;
    cli(&["eval", "--manifest", p(&manifest), "--out", p(&base)])?;
    let header = std::fs::read_to_string(em.join("train.log")).map_err(|e| e.to_string())?;
    for line in ["psi=0.4", "lr=0.005", "ema_decay=0.98", "ema_interval=10"] {
        if !header.lines().any(|l| l == line) {
            return Err(format!("log header lacks {line}"));
        }
    }
    let preds = std::fs::read_dir(em.join("pred")).map_err(|e| e.to_string())?.count();
    let miou = kv(&em.join("eval.kv"), "miou")?;
    let baseline = kv(&base.join("eval.kv"), "miou")?;
    require(
        miou >= 0.95 && miou - baseline >= 0.02 && preds == 128,
        format!("64 images, EM mIoU {miou:.4} (>= 0.95), K-means-only baseline {baseline:.4}, gain {:.4} (>= 0.02)", miou - baseline),
    )
}

fn oracle_sanity(root: &Path, data: &Path) -> Verdict {
    let out = root.join("oracle");
    cli(&["primaps", "--manifest", p(&data.join("manifest.txt")), "--out", p(&out), "--oracle"])?;
    let report = out.join("oracle.txt");
    let pseudo = kv(&report, "pseudo_miou")?;
    let all = kv(&report, "all_miou")?;
    require(
        pseudo >= all && pseudo >= 0.95,
        format!("Pseudo mIoU {pseudo:.4} (>= 0.95), All mIoU {all:.4}"),
    )
}

fn determinism(root: &Path, data: &Path) -> Verdict {
    let out = root.join("det");
    let manifest = data.join("manifest.txt");
    let mut runs = Vec::new();
    for _ in 0..2 {
        cli(&["fit", "--manifest", p(&manifest), "--out", p(&out), "--seed", "7", "--batch", SYNTH_BATCH, "--epochs", "5"])?;
        let log = std::fs::read(out.join("train.log")).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(out.join("checkpoint.pmck")).map_err(|e| e.to_string())?;
        runs.push((log, ckpt));
    }
    require(
        runs[0] == runs[1],
        format!("two seeded fits: logs {} bytes, checkpoints {} bytes, identical={}", runs[0].0.len(), runs[0].1.len(), runs[0] == runs[1]),
    )
}

fn golden_round_trip() -> Verdict {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden.pmft");
    let fm = read_feature_file(&path).map_err(|e| e.to_string())?;
    let mut expected: Vec<f32> = Vec::new();
    for c in 0..3 {
        for y in 0..2 {
            for x in 0..4 {
                expected.push((c + 1) as f32 * 0.5 - y as f32 * 0.25 + x as f32 * 0.125);
            }
        }
    }
    expected[5] = -0.0;
    expected[6] = f32::from_bits(1);
    let bits_equal = fm.data().iter().map(|v| v.to_bits()).eq(expected.iter().map(|v| v.to_bits()));
    require(
        (fm.channels(), fm.height(), fm.width()) == (3, 2, 4) && bits_equal && fm.source_id() == "golden/frame_000.png",
        format!("struct.pack fixture read as {}x{}x{}, bit-exact={bits_equal}", fm.channels(), fm.height(), fm.width()),
    )
}

fn main() {
    let mut report = Report { failures: 0 };
    let secs = Duration::from_secs;
    report.run("pca_oracle", Some(secs(10)), pca_oracle);
    report.run("partition_invariant", Some(secs(60)), partition_invariant);
    report.run("crf_oracle", Some(secs(60)), crf_oracle);
    report.run("gradient_checks", Some(secs(30)), gradient_checks);
    report.run("ema_algebra", None, ema_algebra);
    report.run("hungarian_oracle", None, hungarian_oracle);
    report.run("metrics_hand_case", None, metrics_hand_case);

    let tmp = tempfile::tempdir().expect("temp dir");
    let data = tmp.path().join("synth");
    let generated = cli(&["synth", "--out", p(&data)]);
    report.run("synthetic_recovery", Some(secs(300)), || {
        generated.clone()?;
        synthetic_recovery(tmp.path(), &data)
    });
    report.run("oracle_pseudo_sanity", None, || {
        generated.clone()?;
        oracle_sanity(tmp.path(), &data)
    });
    report.run("determinism", None, || {
        generated.clone()?;
        determinism(tmp.path(), &data)
    });
    report.run("golden_pmft_round_trip (secondary)", None, golden_round_trip);

    if report.failures > 0 {
        let _ = writeln!(std::io::stderr(), "{} acceptance criteria failed", report.failures);
        std::process::exit(1);
    }
    let _ = writeln!(std::io::stderr(), "all acceptance criteria passed");
}

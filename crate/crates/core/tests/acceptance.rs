//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use disparity::detectors::{
    calibrate, d3_score, decide, energy_score, gradnorm_gradient, gradnorm_score, knn_fit, knn_score, mls_score,
    msp_score, odin_score, vim_fit, CalibrationStats, D3Config, Decision, GradNormOrientation, OdinInput,
    RemovalTarget,
};
use disparity::error::Error;
use disparity::eval::{auroc, fpr_at_tpr};
use disparity::metrics::{eps_cos, eps_kl, eps_kl_alt, eps_l2, kl_div, softmax, ProbabilityVector, PROB_FLOOR};
use disparity::rectify::{react_clip, rectified_outputs, vra_clip, RectifyConfig};
use disparity::repr::{
    load_records, pair_datasets, save_records, ClassifierHead, Dims, PairedRecord, RecordFormat, RecordTable,
    RepresentationRecord,
};
use disparity::rng::{SampleStream, Split};
use disparity::sweep::{evaluate_d3, point_config, sweep, SweepGrid};
use disparity::toydiff::{
    build_benchmark, forward_marginal_sample, gmm_score, log_density, make_schedule, reverse_sample,
    train_toy_classifier, DiffusionSchedule, GmmSpec, Guidance, RbfFeatureMap, SamplerKind, ToyConfig, TrainConfig,
};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn rec(id: &str, f: &[f64], l: &[f64]) -> RepresentationRecord {
    RepresentationRecord::new(id, f.to_vec(), l.to_vec())
}

fn pv(v: &[f64]) -> ProbabilityVector {
    ProbabilityVector::new(v.to_vec()).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// 1. unit examples

fn unit_examples() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let text = dir.path().join("one.csv");
    std::fs::write(&text, "id,f0,f1,l0,l1\na,1.0,0.0,0.5,-0.5\n").unwrap();
    let t = load_records(&text, RecordFormat::TextTable).map_err(|e| e.to_string())?;
    ensure!(t.records() == [rec("a", &[1.0, 0.0], &[0.5, -0.5])], "text row parse");
    std::fs::write(&text, "id,f0,f1,l0,l1\n").unwrap();
    ensure!(
        load_records(&text, RecordFormat::TextTable).unwrap().is_empty(),
        "header-only parse"
    );
    for format in [RecordFormat::TextTable, RecordFormat::BinaryV1] {
        let p = dir.path().join(format!("rt.{}", format.extension()));
        let one = RecordTable::new(vec![rec("r", &[0.1, -2.5], &[3.0, 1e-300])]).unwrap();
        save_records(&one, &p, format).unwrap();
        ensure!(load_records(&p, format).unwrap() == one, "{format} round trip");
        let empty = RecordTable::with_dims(Dims::new(2, 2), vec![]).unwrap();
        save_records(&empty, &p, format).unwrap();
        ensure!(load_records(&p, format).unwrap().is_empty(), "{format} empty save");
    }
    let ab = |ids: &[&str]| ids.iter().map(|i| rec(i, &[1.0], &[0.0, 0.0])).collect::<Vec<_>>();
    ensure!(
        pair_datasets(ab(&["a", "b"]), ab(&["a", "b"])).unwrap().len() == 2,
        "pairing"
    );
    ensure!(
        matches!(pair_datasets(ab(&["a"]), ab(&["b"])), Err(Error::IdMismatch { .. })),
        "id mismatch"
    );

    ensure!(
        softmax(&[0.0; 4])
            .unwrap()
            .values()
            .iter()
            .all(|&p| close(p, 0.25, 1e-12)),
        "softmax uniform"
    );
    let s = softmax(&[2f64.ln(), 0.0]).unwrap();
    ensure!(
        close(s.values()[0], 2.0 / 3.0, 1e-12) && close(s.values()[1], 1.0 / 3.0, 1e-12),
        "softmax ln2"
    );
    let u2 = ProbabilityVector::uniform(2).unwrap();
    let u4 = ProbabilityVector::uniform(4).unwrap();
    ensure!(kl_div(&u4, &u4).unwrap().abs() < 1e-12, "kl identity");
    let sharp = pv(&[1.0 - PROB_FLOOR, PROB_FLOOR]);
    ensure!(close(kl_div(&sharp, &u2).unwrap(), 2f64.ln(), 1e-6), "kl ln2");

    ensure!(eps_l2(&[0.3, 0.4], &[0.3, 0.4]).unwrap().abs() < 1e-12, "l2 identity");
    ensure!(
        close(eps_l2(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2f64.sqrt(), 1e-12),
        "l2 orthogonal"
    );
    ensure!(
        eps_l2(&[0.3, -0.4, 2.0], &[1.11, -1.48, 7.4]).unwrap().abs() < 1e-12,
        "l2 scale invariance"
    );
    let g = pv(&[0.7, 0.2, 0.1]);
    ensure!(
        eps_kl(&g, &ProbabilityVector::uniform(3).unwrap()).unwrap().value.abs() < 1e-12,
        "kl ratio u"
    );
    ensure!(close(eps_kl(&g, &g).unwrap().value, 1.0, 1e-12), "kl ratio equal");
    ensure!(eps_kl_alt(&g, &g).unwrap().abs() < 1e-12, "kl alt equal");
    ensure!(close(eps_kl_alt(&u2, &sharp).unwrap(), 2f64.ln(), 1e-6), "kl alt ln2");
    ensure!(
        close(eps_cos(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, 1e-12),
        "cos equal"
    );
    ensure!(
        eps_cos(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12,
        "cos orthogonal"
    );

    ensure!(
        react_clip(&[0.05, 0.2, -1.0], 0.1).unwrap() == [0.05, 0.1, -1.0],
        "react example"
    );
    ensure!(
        react_clip(&[0.05, -0.2], 0.1).unwrap() == [0.05, -0.2],
        "react identity"
    );
    ensure!(
        vra_clip(&[0.05, 0.3, 0.9], 0.1, 0.5).unwrap() == [0.0, 0.3, 0.5],
        "vra example"
    );
    ensure!(vra_clip(&[0.2, 0.4], 0.1, 0.5).unwrap() == [0.2, 0.4], "vra identity");
    let head = ClassifierHead::new(vec![vec![1.0, -1.0], vec![0.5, 2.0]], vec![0.25, -0.75]).unwrap();
    let r = rec("x", &[0.3, 0.9], &[9.0, 9.0]);
    let out = rectified_outputs(&r, &head, &RectifyConfig::none()).unwrap();
    ensure!(
        out.features == r.features && out.logits == head.logits(&r.features).unwrap(),
        "rectify none"
    );
    for cfg in [RectifyConfig::default(), RectifyConfig::none()] {
        let z = rectified_outputs(&rec("z", &[0.0, 0.0], &[0.0, 0.0]), &head, &cfg).unwrap();
        ensure!(z.logits == [0.25, -0.75], "zero features give bias");
    }

    // ε_ℓ2 between unit vectors at angle θ is 2 sin(θ/2)
    let at = |d: f64| {
        let th = 2.0 * (d / 2.0).asin();
        PairedRecord::new(
            rec("p", &[1.0, 0.0], &[1.0, 0.0]),
            rec("p", &[th.cos(), th.sin()], &[0.8, 0.0]),
        )
        .unwrap()
    };
    let plain = D3Config {
        rectify: RectifyConfig::none(),
        ..D3Config::default()
    };
    let stats = calibrate(&[at(0.1), at(0.5)], &head, &plain).unwrap();
    ensure!(
        close(stats.l2_min, 0.1, 1e-12) && close(stats.l2_max, 0.5, 1e-12),
        "calibration extremes"
    );
    ensure!(calibrate(&[at(0.1)], &head, &plain).is_err(), "single-pair calibration");
    let base = at(0.3);
    let raw_kl = eps_kl(
        &base.input.probabilities().unwrap(),
        &base.generation.probabilities().unwrap(),
    )
    .unwrap()
    .value;
    let fixed = CalibrationStats {
        kl_min: 0.0,
        kl_max: 2.0 * raw_kl,
        l2_min: 0.0,
        l2_max: 4.0 * 0.3,
        count: 2,
    };
    let sc = d3_score(&base, &head, &plain, &fixed).unwrap().score;
    ensure!(close(sc, 3.0, 1e-12), "ensemble arithmetic gave {sc}");
    let moved_feat = PairedRecord::new(base.input.clone(), rec("p", &[0.2, 0.9], &[0.8, 0.0])).unwrap();
    let moved_prob = PairedRecord::new(base.input.clone(), rec("p", &base.generation.features, &[0.1, 0.0])).unwrap();
    let kl_only = D3Config { lambda: 1.0, ..plain };
    let l2_only = D3Config { lambda: 0.0, ..plain };
    let score = |p: &PairedRecord, c: &D3Config| d3_score(p, &head, c, &fixed).unwrap().score;
    ensure!(
        score(&base, &kl_only) == score(&moved_feat, &kl_only),
        "lambda 1 ignores features"
    );
    ensure!(
        score(&base, &l2_only) == score(&moved_prob, &l2_only),
        "lambda 0 ignores probabilities"
    );

    ensure!(
        close(msp_score(&rec("a", &[1.0], &[0.0; 4])).unwrap(), 0.25, 1e-12),
        "msp uniform"
    );
    ensure!(
        close(msp_score(&rec("a", &[1.0], &[1000.0, 0.0, 0.0])).unwrap(), 1.0, 1e-9),
        "msp saturated"
    );
    ensure!(
        close(energy_score(&rec("a", &[1.0], &[0.0; 4])).unwrap(), 4f64.ln(), 1e-12),
        "energy zeros"
    );
    let z = [0.3, -1.2, 2.2];
    let shifted: Vec<f64> = z.iter().map(|v| v + 5.5).collect();
    let shift = energy_score(&rec("a", &[1.0], &shifted)).unwrap() - energy_score(&rec("a", &[1.0], &z)).unwrap();
    ensure!(close(shift, 5.5, 1e-12), "energy shift");
    ensure!(
        mls_score(&rec("a", &[1.0], &[1.0, 2.0, 3.0])).unwrap() == 3.0,
        "mls max"
    );
    ensure!(
        mls_score(&rec("a", &[1.0], &[-0.5, -0.5])).unwrap() == -0.5,
        "mls equal"
    );
    let flat = ClassifierHead::new(vec![vec![0.0; 3]; 2], vec![0.0; 3]).unwrap();
    let biased = ClassifierHead::new(vec![vec![1.0, 2.0, 3.0]; 2], vec![0.5, -1.0, 2.0]).unwrap();
    for o in [
        GradNormOrientation::PredictionToUniform,
        GradNormOrientation::UniformToPrediction,
    ] {
        ensure!(
            gradnorm_score(&rec("a", &[0.7, -1.3], &[0.0; 3]), &flat, 1.0, o)
                .unwrap()
                .abs()
                < 1e-12,
            "gradnorm at u"
        );
        let grad = gradnorm_gradient(&rec("a", &[0.0, 0.0], &[0.0; 3]), &biased, 1.0, o).unwrap();
        ensure!(grad.iter().flatten().all(|&g| g == 0.0), "gradnorm zero features");
    }
    let bank_rows = [vec![1.0, 0.0], vec![0.0, 1.0]];
    let bank1 = knn_fit(bank_rows.iter().map(Vec::as_slice), 1).unwrap();
    ensure!(
        knn_score(&rec("q", &[0.0, 2.0], &[0.0, 0.0]), &bank1).unwrap().abs() < 1e-12,
        "knn self"
    );
    let bank2 = knn_fit(bank_rows.iter().map(Vec::as_slice), 2).unwrap();
    ensure!(
        close(
            knn_score(&rec("q", &[1.0, 0.0], &[0.0, 0.0]), &bank2).unwrap(),
            -(2f64.sqrt()),
            1e-12
        ),
        "knn k=2"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plane: Vec<Vec<f64>> = (0..50)
        .map(|_| vec![gaussian(&mut rng), gaussian(&mut rng), 0.0])
        .collect();
    let model = vim_fit(&plane, &vec![vec![0.0, 1.0]; plane.len()], 1).unwrap();
    let mean = model.offset().to_vec();
    ensure!(
        model.residual_norm(&[mean[0] + 0.4, mean[1] - 2.0, 0.0]).unwrap() < 1e-12,
        "vim inside"
    );
    ensure!(
        close(model.residual_norm(&[mean[0], mean[1], 1.7]).unwrap(), 1.7, 1e-12),
        "vim orthogonal"
    );
    let lg = rec("a", &[1.0], &[0.4, -1.0, 2.5]);
    ensure!(
        odin_score(OdinInput::Record(&lg), 1.0, 0.0).unwrap() == msp_score(&lg).unwrap(),
        "odin T=1"
    );
    ensure!(
        close(odin_score(OdinInput::Record(&lg), 1e12, 0.0).unwrap(), 1.0 / 3.0, 1e-9),
        "odin T large"
    );
    ensure!(
        decide(0.9, 0.5) == Decision::InD && decide(0.5, 0.5) == Decision::OoD,
        "decision rule"
    );

    ensure!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap() == 1.0, "auroc separated");
    ensure!(
        auroc(&[1.0, 2.0, 2.0], &[2.0, 2.0, 1.0]).unwrap() == 0.5,
        "auroc identical"
    );
    let ind: Vec<f64> = (1..=100).map(f64::from).collect();
    let f = fpr_at_tpr(&ind, &[-1.0, 0.0, 0.5], 0.95).unwrap();
    ensure!(
        f.fpr == 0.0 && ind.iter().filter(|&&s| s > f.threshold).count() >= 95,
        "fpr separated"
    );
    let f = fpr_at_tpr(&[5.0], &[1.0], 0.95).unwrap();
    ensure!(f.threshold < 5.0 && f.tpr == 1.0, "fpr single score");

    let s1 = DiffusionSchedule::from_betas(vec![0.5]).unwrap();
    ensure!(s1.alpha_bar(1).unwrap() == 0.5, "schedule T=1");
    let s2 = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    ensure!(
        close(s2.alpha_bar(1).unwrap(), 0.9, 1e-15) && close(s2.alpha_bar(2).unwrap(), 0.72, 1e-15),
        "schedule T=2"
    );
    let tiny = make_schedule(4, 1e-12, 1e-12).unwrap();
    let x = forward_marginal_sample(&[1.0, -2.0], 1, &tiny, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    ensure!(close(x[0], 1.0, 1e-5) && close(x[1], -2.0, 1e-5), "noiseless limit");
    let sched = make_schedule(10, 1e-4, 0.2).unwrap();
    let ab = sched.alpha_bar(7).unwrap();
    let n = 20_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for i in 0..n {
        let v = forward_marginal_sample(&[0.0], 7, &sched, &mut ChaCha8Rng::seed_from_u64(i)).unwrap()[0];
        sum += v;
        sq += v * v;
    }
    let (m, var) = (sum / n as f64, sq / n as f64 - (sum / n as f64).powi(2));
    ensure!(
        m.abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt() && close(var, 1.0 - ab, 0.05 * (1.0 - ab)),
        "x0=0 marginal"
    );
    let single = GmmSpec::single_gaussian(vec![1.0, -0.5], 0.4).unwrap();
    let pt = [0.3, 0.8];
    let sc = gmm_score(&pt, 3, &single, &sched, None).unwrap();
    let a3 = sched.alpha_bar(3).unwrap();
    for i in 0..2 {
        let want = -(pt[i] - a3.sqrt() * [1.0, -0.5][i]) / (a3 * 0.4 + 1.0 - a3);
        ensure!(close(sc[i], want, 1e-12), "single-gaussian score");
    }
    let sym = GmmSpec::ring(2, 3.0, 0.0, 0.0, 0.5).unwrap();
    ensure!(
        gmm_score(&[0.0, 0.0], 4, &sym, &sched, None)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12),
        "symmetric score"
    );
    let stream = SampleStream::new(3, Split::Scratch, 0);
    let ddim = SamplerKind::Ddim.build();
    ensure!(
        reverse_sample(&pt, &sym, &sched, ddim.as_ref(), Guidance::None, 0, &stream).unwrap() == pt,
        "t_start 0"
    );
    for kind in [SamplerKind::Ddim, SamplerKind::Ancestral] {
        let s = kind.build();
        let a = reverse_sample(&pt, &sym, &sched, s.as_ref(), Guidance::None, 10, &stream).unwrap();
        let b = reverse_sample(
            &pt,
            &sym,
            &sched,
            s.as_ref(),
            Guidance::Conditional { class: 1, scale: 0.0 },
            10,
            &stream,
        )
        .unwrap();
        ensure!(a == b, "zero guidance ({kind})");
    }

    let pts: Vec<Vec<f64>> = (0..30)
        .map(|i| vec![f64::from(i % 3) * 4.0, f64::from(i) * 0.01])
        .collect();
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let untrained = TrainConfig {
        steps: 0,
        centers: 5,
        ..TrainConfig::default()
    };
    let clf = train_toy_classifier(&pts, &labels, 3, &untrained).unwrap();
    let loss: f64 = pts
        .iter()
        .zip(&labels)
        .map(|(p, &y)| -clf.probabilities(p).unwrap()[y].ln())
        .sum::<f64>()
        / 30.0;
    ensure!(close(loss, 3f64.ln(), 1e-9), "untrained loss {loss}");
    let trained = TrainConfig {
        steps: 20,
        centers: 5,
        ..TrainConfig::default()
    };
    ensure!(
        train_toy_classifier(&pts, &labels, 3, &trained).unwrap()
            == train_toy_classifier(&pts, &labels, 3, &trained).unwrap(),
        "training determinism"
    );
    let fm = RbfFeatureMap::new(vec![vec![1.0, 2.0], vec![-3.0, 0.0]], 0.5).unwrap();
    ensure!(fm.features(&[1.0, 2.0])[0] == 1.0, "kernel peak");
    let far = clf.embed("far", &[1e3, 1e3]).unwrap();
    ensure!(far.features.iter().all(|&v| v < 1e-12), "kernel decay");
    ensure!(
        far.logits.iter().zip(&clf.head.bias).all(|(l, b)| close(*l, *b, 1e-12)),
        "far logits equal bias"
    );

    let small = ToyConfig {
        n_bank: 0,
        n_calibration: 0,
        n_ind_test: 0,
        n_ood_test: 0,
        n_train: 60,
        ..ToyConfig::default()
    };
    let b = build_benchmark(&small).map_err(|e| e.to_string())?;
    let manifests = b.write(dir.path(), RecordFormat::TextTable).unwrap();
    ensure!(
        manifests.len() == 4 && manifests.iter().all(|m| m.count == 0),
        "empty splits"
    );

    let tiny_cfg = ToyConfig {
        n_train: 120,
        n_bank: 40,
        n_calibration: 40,
        n_ind_test: 40,
        n_ood_test: 40,
        ..ToyConfig::default()
    };
    let b = build_benchmark(&tiny_cfg).unwrap();
    let grid1 = SweepGrid {
        lambda: vec![0.3],
        steps: vec![tiny_cfg.steps],
        ..SweepGrid::default()
    };
    let rows = sweep(&grid1, &tiny_cfg, &D3Config::default()).unwrap();
    let direct = evaluate_d3(
        &b,
        D3Config {
            lambda: 0.3,
            rectify: b.rectify,
            ..D3Config::default()
        },
    )
    .unwrap();
    ensure!(rows.len() == 1 && rows[0].report == direct, "single-point sweep");
    let grid01 = SweepGrid {
        lambda: vec![0.0, 1.0],
        ..grid1
    };
    let rows = sweep(&grid01, &tiny_cfg, &D3Config::default()).unwrap();
    for (row, lambda) in rows.iter().zip([0.0, 1.0]) {
        let direct = evaluate_d3(
            &b,
            D3Config {
                lambda,
                rectify: b.rectify,
                ..D3Config::default()
            },
        )
        .unwrap();
        ensure!(row.report == direct, "sweep endpoint {lambda}");
    }
    Ok("all listed examples hold".into())
}

// 2. oracle equivalence

fn knn_oracle(rows: &[Vec<f64>], q: &[f64], k: usize) -> f64 {
    let unit = |v: &[f64]| disparity::metrics::normalize(v).unwrap();
    let q = unit(q);
    let mut d: Vec<f64> = rows
        .iter()
        .map(|r| {
            unit(r)
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    -d[k - 1]
}

fn pairwise_auroc(ind: &[f64], ood: &[f64]) -> f64 {
    let mut credit = 0.0;
    for a in ind {
        for b in ood {
            credit += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (ind.len() * ood.len()) as f64
}

/// Cyclic Jacobi rotations; returns eigenvalues and column eigenvectors.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn vim_oracle_norm(features: &[Vec<f64>], residual_dim: usize, q: &[f64]) -> f64 {
    let n = features.len() as f64;
    let m = q.len();
    let mean: Vec<f64> = (0..m).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; m]; m];
    for f in features {
        for i in 0..m {
            for j in 0..m {
                cov[i][j] += (f[i] - mean[i]) * (f[j] - mean[j]) / n;
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let centered: Vec<f64> = q.iter().zip(&mean).map(|(a, b)| a - b).collect();
    order[..residual_dim]
        .iter()
        .map(|&c| (0..m).map(|r| vecs[r][c] * centered[r]).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt()
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances = 120;
    for inst in 0..instances {
        let m = rng.random_range(2..8);
        let rows: Vec<Vec<f64>> = (0..rng.random_range(1..60))
            .map(|_| (0..m).map(|_| gaussian(&mut rng)).collect())
            .collect();
        let k = rng.random_range(1..=rows.len());
        let bank = knn_fit(rows.iter().map(Vec::as_slice), k).unwrap();
        let q: Vec<f64> = (0..m).map(|_| gaussian(&mut rng)).collect();
        let got = knn_score(&rec("q", &q, &[0.0, 0.0]), &bank).unwrap();
        ensure!(got == knn_oracle(&rows, &q, k), "knn instance {inst}");

        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..rng.random_range(1..80))
                .map(|_| f64::from(rng.random_range(-15i32..15)) / 3.0)
                .collect()
        };
        let (ind, ood) = (draw(&mut rng), draw(&mut rng));
        ensure!(
            close(auroc(&ind, &ood).unwrap(), pairwise_auroc(&ind, &ood), 1e-12),
            "auroc instance {inst}"
        );

        let m = rng.random_range(3..9);
        let residual_dim = rng.random_range(1..m);
        let scales: Vec<f64> = (0..m).map(|j| 3.0 / (1.0 + j as f64)).collect();
        let rot = random_orthogonal(m, &mut rng);
        let feats: Vec<Vec<f64>> = (0..rng.random_range(3 * m..60))
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * gaussian(&mut rng)).collect();
                (0..m)
                    .map(|i| (0..m).map(|j| rot[i][j] * z[j]).sum::<f64>() + 0.5)
                    .collect()
            })
            .collect();
        let logits: Vec<Vec<f64>> = feats.iter().map(|f| vec![f[0], -f[0]]).collect();
        let model = vim_fit(&feats, &logits, residual_dim).unwrap();
        for _ in 0..3 {
            let q: Vec<f64> = (0..m).map(|_| 2.0 * gaussian(&mut rng)).collect();
            let (got, want) = (
                model.residual_norm(&q).unwrap(),
                vim_oracle_norm(&feats, residual_dim, &q),
            );
            ensure!(close(got, want, 1e-8), "vim instance {inst}: {got} vs {want}");
        }
    }
    Ok(format!("{instances} instances each for knn, auroc, vim"))
}

fn random_orthogonal(m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < m {
        let mut v: Vec<f64> = (0..m).map(|_| gaussian(rng)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.iter().map(|a| a / n).collect());
        }
    }
    (0..m).map(|i| (0..m).map(|j| cols[j][i]).collect()).collect()
}

// 3. gradient checks

fn kl_loss(h: &[f64], w: &[Vec<f64>], b: &[f64], temp: f64, o: GradNormOrientation) -> f64 {
    let c = b.len();
    let z: Vec<f64> = (0..c)
        .map(|j| (h.iter().zip(w).map(|(hi, row)| hi * row[j]).sum::<f64>() + b[j]) / temp)
        .collect();
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    let u = 1.0 / c as f64;
    e.iter()
        .map(|ei| {
            let p = ei / s;
            match o {
                GradNormOrientation::PredictionToUniform => p * (p / u).ln(),
                GradNormOrientation::UniformToPrediction => u * (u / p).ln(),
            }
        })
        .sum()
}

fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let m = rng.random_range(1..6);
        let c = rng.random_range(2..6);
        let w: Vec<Vec<f64>> = (0..m).map(|_| (0..c).map(|_| gaussian(&mut rng)).collect()).collect();
        let b: Vec<f64> = (0..c).map(|_| 0.5 * gaussian(&mut rng)).collect();
        let h: Vec<f64> = (0..m).map(|_| gaussian(&mut rng)).collect();
        let temp = rng.random_range(0.5..2.0);
        let o = if inst % 2 == 0 {
            GradNormOrientation::PredictionToUniform
        } else {
            GradNormOrientation::UniformToPrediction
        };
        let head = ClassifierHead::new(w.clone(), b.clone()).unwrap();
        let r = RepresentationRecord::new("g", h.clone(), head.logits(&h).unwrap());
        let grad = gradnorm_gradient(&r, &head, temp, o).unwrap();
        let step = 1e-5;
        let mut scale: f64 = 0.0;
        let mut err: f64 = 0.0;
        for i in 0..m {
            for j in 0..c {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i][j] += step;
                wm[i][j] -= step;
                let fd = (kl_loss(&h, &wp, &b, temp, o) - kl_loss(&h, &wm, &b, temp, o)) / (2.0 * step);
                err = err.max((fd - grad[i][j]).abs());
                scale = scale.max(grad[i][j].abs()).max(fd.abs());
            }
        }
        let rel = err / scale.max(1e-6);
        worst = worst.max(rel);
        ensure!(rel <= 1e-5, "gradnorm instance {inst}: relative error {rel:e}");
    }

    let spec = GmmSpec::ring(3, 4.0, 0.0, 0.7, 0.3).unwrap();
    let sched = ToyConfig::default().schedule().unwrap();
    let mut worst_score: f64 = 0.0;
    for inst in 0..100 {
        let t = rng.random_range(1..=sched.steps());
        let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        let class = if inst % 3 == 0 { Some(inst % 3) } else { None };
        let s = gmm_score(&x, t, &spec, &sched, class).unwrap();
        let step = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += step;
            xm[i] -= step;
            let fd = (log_density(&xp, t, &spec, &sched, class).unwrap()
                - log_density(&xm, t, &spec, &sched, class).unwrap())
                / (2.0 * step);
            let e = (fd - s[i]).abs() / s[i].abs().max(1.0);
            worst_score = worst_score.max(e);
            ensure!(e <= 1e-6, "gmm instance {inst}: error {e:e}");
        }
    }
    Ok(format!(
        "gradnorm worst rel {worst:.1e}, gmm score worst {worst_score:.1e}"
    ))
}

// 4. sampler statistics

fn sampler_statistics() -> Check {
    let mu = [1.5, -0.5];
    let var = 1.0;
    let spec = GmmSpec::single_gaussian(mu.to_vec(), var).unwrap();
    let sched = ToyConfig {
        steps: 24,
        ..ToyConfig::default()
    }
    .schedule()
    .unwrap();
    let ddim = SamplerKind::Ddim.build();
    let n = 10_000;
    let samples: Vec<Vec<f64>> = (0..n as u64)
        .map(|i| {
            let x0 = spec
                .sample(&mut SampleStream::new(11, Split::Scratch, i).step(u64::MAX))
                .0;
            reverse_sample(
                &x0,
                &spec,
                &sched,
                ddim.as_ref(),
                Guidance::None,
                24,
                &SampleStream::new(11, Split::Scratch, i),
            )
            .unwrap()
        })
        .collect();
    let nf = n as f64;
    let mean: Vec<f64> = (0..2).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / nf).collect();
    let mut cov = [[0.0; 2]; 2];
    for s in &samples {
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (nf - 1.0);
            }
        }
    }
    for j in 0..2 {
        let se = (cov[j][j] / nf).sqrt();
        ensure!(
            (mean[j] - mu[j]).abs() <= 3.0 * se,
            "mean[{j}] = {} vs {} (se {se:.4})",
            mean[j],
            mu[j]
        );
    }
    let mut diff = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let target = if i == j { var } else { 0.0 };
            diff += (cov[i][j] - target).powi(2);
        }
    }
    let rel = diff.sqrt() / (2.0 * var * var).sqrt();
    ensure!(rel <= 0.10, "covariance relative Frobenius error {rel:.4}");
    Ok(format!(
        "mean ({:.4}, {:.4}), covariance error {:.2}%",
        mean[0],
        mean[1],
        100.0 * rel
    ))
}

// 5 and 6. toy benchmark

const PIN_TOL: f64 = 0.005;
const SLACK: f64 = 0.02;

const PIN_ENSEMBLE: f64 = 0.9954;
const PIN_KL_ONLY: f64 = 0.9969;
const PIN_L2_ONLY: f64 = 0.9774;
const PIN_REMOVAL_INPUT: f64 = 0.9947;
const PIN_UNCONDITIONAL: f64 = 0.8385;
const PIN_T2: f64 = 0.8992;

fn pinned(name: &str, got: f64, pin: f64) -> std::result::Result<(), String> {
    if close(got, pin, PIN_TOL) {
        Ok(())
    } else {
        Err(format!("{name} AUROC {got:.4} drifted from pinned {pin:.4}"))
    }
}

struct ToyResults {
    ensemble: f64,
    kl_only: f64,
    l2_only: f64,
    removal_input: f64,
    unconditional: f64,
    t2: f64,
}

fn toy_results() -> Result<ToyResults, String> {
    let cfg = ToyConfig::default();
    let bench = build_benchmark(&cfg).map_err(|e| e.to_string())?;
    let d3 = |lambda: f64, removal_target: RemovalTarget, b: &disparity::toydiff::Benchmark| {
        evaluate_d3(
            b,
            D3Config {
                lambda,
                rectify: b.rectify,
                removal_target,
                ..D3Config::default()
            },
        )
        .map(|r| r.auroc)
        .map_err(|e| e.to_string())
    };
    let uncond = build_benchmark(&ToyConfig {
        conditional: false,
        ..cfg.clone()
    })
    .map_err(|e| e.to_string())?;
    let t2 = build_benchmark(&point_config(&cfg, 2, true)).map_err(|e| e.to_string())?;
    Ok(ToyResults {
        ensemble: d3(0.5, RemovalTarget::Generation, &bench)?,
        kl_only: d3(1.0, RemovalTarget::Generation, &bench)?,
        l2_only: d3(0.0, RemovalTarget::Generation, &bench)?,
        removal_input: d3(0.5, RemovalTarget::Input, &bench)?,
        unconditional: d3(0.5, RemovalTarget::Generation, &uncond)?,
        t2: d3(0.5, RemovalTarget::Generation, &t2)?,
    })
}

fn end_to_end(r: &ToyResults) -> Check {
    ensure!(r.ensemble > 0.9, "ensemble AUROC {:.4} <= 0.9", r.ensemble);
    let best = r.kl_only.max(r.l2_only);
    ensure!(
        r.ensemble >= best - SLACK,
        "ensemble {:.4} below best single {best:.4} - {SLACK}",
        r.ensemble
    );
    pinned("ensemble", r.ensemble, PIN_ENSEMBLE)?;
    pinned("kl-only", r.kl_only, PIN_KL_ONLY)?;
    pinned("l2-only", r.l2_only, PIN_L2_ONLY)?;
    Ok(format!(
        "AUROC ensemble {:.4}, kl {:.4}, l2 {:.4}",
        r.ensemble, r.kl_only, r.l2_only
    ))
}

fn ablation_directions(r: &ToyResults) -> Check {
    ensure!(
        r.ensemble >= r.removal_input - SLACK,
        "removal: generation {:.4} vs input {:.4}",
        r.ensemble,
        r.removal_input
    );
    ensure!(
        r.ensemble >= r.unconditional - SLACK,
        "guidance: conditional {:.4} vs unconditional {:.4}",
        r.ensemble,
        r.unconditional
    );
    ensure!(
        r.ensemble >= r.t2 - SLACK,
        "steps: T=24 {:.4} vs T=2 {:.4}",
        r.ensemble,
        r.t2
    );
    pinned("removal-on-input", r.removal_input, PIN_REMOVAL_INPUT)?;
    pinned("unconditional", r.unconditional, PIN_UNCONDITIONAL)?;
    pinned("T=2", r.t2, PIN_T2)?;
    Ok(format!(
        "removal gen {:.4} / input {:.4}; cond {:.4} / uncond {:.4}; T=24 {:.4} / T=2 {:.4}",
        r.ensemble, r.removal_input, r.ensemble, r.unconditional, r.ensemble, r.t2
    ))
}

// 7. rank equivalence

fn ranks(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0; v.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank;
    }
    r
}

fn rank_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 1000;
    let mut l2 = Vec::with_capacity(n);
    let mut cos = Vec::with_capacity(n);
    for _ in 0..n {
        let a: Vec<f64> = (0..8).map(|_| gaussian(&mut rng)).collect();
        let b: Vec<f64> = (0..8).map(|_| gaussian(&mut rng)).collect();
        l2.push(eps_l2(&a, &b).unwrap());
        cos.push(1.0 - eps_cos(&a, &b).unwrap());
    }
    let (ra, rb) = (ranks(&l2), ranks(&cos));
    let d2: f64 = ra.iter().zip(&rb).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let nf = n as f64;
    let spearman = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
    ensure!(ra == rb, "orderings differ (spearman {spearman})");
    Ok(format!("spearman {spearman} on {n} pairs"))
}

// 8. determinism

fn run_pipeline(dir: &Path) -> std::result::Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_disparity");
    let steps: [&[&str]; 3] = [
        &["gen-toy", "--seed", "0", "--out", "toy"],
        &[
            "score",
            "--benchmark",
            "toy",
            "--detectors",
            "d3,d3plus,msp,energy,knn,vim",
            "--out",
            "scores",
        ],
        &["eval", "--scores", "scores", "--out", "eval"],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir)
            .env_remove("DISPARITY_OUTPUT_ROOT")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Ok(())
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure!(ta.len() == tb.len(), "file sets differ");
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        ensure!(na == nb, "file sets differ at {na} / {nb}");
        ensure!(ba == bb, "{na} differs between runs");
    }
    Ok(format!("{} files byte-identical", ta.len()))
}

fn report(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = f();
    let took = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {took:.2?}, limit {limit:?}")),
        Err(e) => (false, e),
    };
    println!(
        "{} criterion {id} ({name}): {detail} [{took:.2?}]",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= report(1, "metric unit suite", secs(1), unit_examples);
    ok &= report(2, "oracle equivalence", secs(30), oracle_equivalence);
    ok &= report(3, "gradient checks", secs(30), gradient_checks);
    ok &= report(4, "sampler statistics", secs(120), sampler_statistics);
    let mut toy: Option<Result<ToyResults, String>> = None;
    ok &= report(5, "end-to-end toy benchmark", secs(300), || {
        let r = toy.insert(toy_results());
        r.as_ref().map_err(Clone::clone).and_then(end_to_end)
    });
    ok &= report(6, "ablation directions", secs(300), || match toy.take() {
        Some(r) => r.and_then(|r| ablation_directions(&r)),
        None => Err("toy benchmark unavailable".into()),
    });
    ok &= report(7, "rank equivalence", secs(30), rank_equivalence);
    ok &= report(8, "determinism", secs(120), determinism);
    if !ok {
        std::process::exit(1);
    }
}

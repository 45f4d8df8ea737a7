//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prunecert::bounds::{wsr_ucb, WsrState, WsrVariant, BISECTION_TOL};
use prunecert::calibrate::{step_grid, CalibrationConfig, Calibrator, CorrectionMode, GridSpec};
use prunecert::evaluate::{
    run_trials_with, summarize, summarize_baseline, sweep_rows, tradeoff_rows, BaselineMethod, TrialConfig,
};
use prunecert::ingest::{build_dataset, parse_qrels, parse_run, BetaChoice, Preparation};
use prunecert::metrics::{full_mrr, loss_curve, loss_vector, mean_in_order, Metric};
use prunecert::model::{Dataset, DatasetMeta, DocId, QueryRecord, Threshold};
use prunecert::synthetic::{generate, RerankerMode, SynthConfig};
use prunecert::Correction;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn emit(o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {:>2} [{status}] {}: {}", o.id, o.name, o.detail);
    let _ = out.flush();
}

fn trial_pool_config() -> SynthConfig {
    SynthConfig {
        n_queries: 6000,
        pool_size: 200,
        retriever_gap: 4.0,
        retriever_noise: 1.0,
        reranker: RerankerMode::Consistent,
        seed: 2024,
        ..SynthConfig::default()
    }
}

/// `1 - full reranked MRR@10` with transforms fitted on the data itself.
fn plateau_floor(raw: &Dataset) -> f64 {
    let prep = Preparation::fit(raw, BetaChoice::default(), 10).unwrap();
    1.0 - full_mrr(&prep.apply(raw).unwrap(), 10).unwrap()
}

/// Criteria 1, 2, 7 and 8 share one set of 100 splits.
fn trial_criteria() -> Vec<Outcome> {
    let started = Instant::now();
    let pool = generate(&trial_pool_config()).unwrap();
    let floor = plateau_floor(&pool);
    let alpha = floor + 0.02;
    let required = 1.0 - alpha;
    let config = TrialConfig {
        n_trials: 100,
        calib_size: 3000,
        test_size: 3000,
        delta: 0.1,
        mode: CorrectionMode::Risk,
        master_seed: 17,
        ..TrialConfig::default()
    };
    let tradeoff_alphas: Vec<f64> = (1..=10).map(|j| floor + 0.01 * j as f64).collect();
    let sweep_alphas: Vec<f64> = (0..=8).map(|j| floor + 0.05 - 0.01 * j as f64).collect();

    let per_split = run_trials_with(&pool, &config, |s| {
        let tradeoff = tradeoff_alphas.iter().map(|&a| s.run(a)).collect::<prunecert::Result<Vec<_>>>()?;
        let est = s.baseline(BaselineMethod::Est, required)?;
        let ert = s.baseline(BaselineMethod::Ert, required)?;
        let sweep = sweep_alphas
            .iter()
            .map(|&a| s.run_with(a, config.delta, CorrectionMode::Confidence))
            .collect::<prunecert::Result<Vec<_>>>()?;
        Ok((tradeoff, est, ert, sweep))
    })
    .unwrap();
    let elapsed = started.elapsed();

    let mut out = Vec::new();

    // Criterion 1.
    let certified: Vec<_> = per_split.iter().map(|p| p.0[1].clone()).collect();
    let summary = summarize(&certified, 200);
    assert!((summary.alpha - alpha).abs() < 1e-12);
    let c1_pass = summary.coverage >= 0.84 && elapsed <= Duration::from_secs(300);
    out.push(Outcome {
        id: 1,
        name: "certified coverage",
        pass: c1_pass,
        detail: format!(
            "floor {floor:.4}, alpha {alpha:.4}: coverage {:.2} (>= 0.84), mean MRR@10 {:.4}, mean size {:.2}/200; \
             all four trial criteria took {:.1}s (<= 300s)",
            summary.coverage,
            summary.mean_mrr,
            summary.mean_size,
            elapsed.as_secs_f64()
        ),
    });

    // Criterion 2.
    let est: Vec<_> = per_split.iter().map(|p| p.1.clone()).collect();
    let ert: Vec<_> = per_split.iter().map(|p| p.2.clone()).collect();
    let est = summarize_baseline(&est, 200);
    let ert = summarize_baseline(&ert, 200);
    let c2_pass = c1_pass
        && [est.coverage, ert.coverage]
            .iter()
            .all(|&c| c <= 0.75 && summary.coverage - c >= 0.10);
    out.push(Outcome {
        id: 2,
        name: "baseline separation",
        pass: c2_pass,
        detail: format!(
            "certified {:.2}, EST {:.2} (size {:.2}), ERT {:.2} (size {:.2}); each baseline <= 0.75 and >= 0.10 below certified",
            summary.coverage, est.coverage, est.mean_size, ert.coverage, ert.mean_size
        ),
    });

    // Criterion 7.
    let sweep: Vec<_> = per_split.iter().map(|p| p.3.clone()).collect();
    let rows = sweep_rows(&sweep, &sweep_alphas);
    let non_increasing = rows
        .windows(2)
        .all(|w| w[1].corrected_confidence <= w[0].corrected_confidence + 1e-12);
    let reaches_zero = rows
        .iter()
        .any(|r| r.alpha < floor && r.corrected_confidence == 0.0);
    let worst = rows
        .iter()
        .map(|r| (r.corrected_confidence - r.empirical_coverage).abs())
        .fold(0.0, f64::max);
    let mut table = String::new();
    for r in &rows {
        let _ = write!(
            table,
            " [a-floor {:+.2}: conf {:.3} cov {:.2}]",
            r.alpha - floor,
            r.corrected_confidence,
            r.empirical_coverage
        );
    }
    out.push(Outcome {
        id: 7,
        name: "confidence-correction sweep",
        pass: non_increasing && reaches_zero && worst <= 0.12,
        detail: format!(
            "non-increasing {non_increasing}, reaches 0 below floor {reaches_zero}, max |conf - cov| {worst:.3} (<= 0.12);{table}"
        ),
    });

    // Criterion 8.
    let tradeoff: Vec<_> = per_split.iter().map(|p| p.0.clone()).collect();
    let rows = tradeoff_rows(&tradeoff, &tradeoff_alphas, 200);
    let monotone = rows.windows(2).all(|w| w[1].mean_size <= w[0].mean_size);
    let achievable: Vec<usize> = (0..tradeoff_alphas.len())
        .filter(|&j| tradeoff.iter().all(|t| t[j].calibration.correction == Correction::None))
        .collect();
    let (c8_pass, c8_detail) = match achievable.first() {
        Some(&j) => {
            let row = &rows[j];
            let ok = monotone && row.mean_size <= 0.2 * 200.0 && row.mean_mrr >= 1.0 - row.alpha;
            (
                ok,
                format!(
                    "sizes non-increasing {monotone}; tightest achievable alpha {:.4}: mean size {:.2} (<= 40), \
                     MRR@10 {:.4} (>= {:.4}); sizes {:?}",
                    row.alpha,
                    row.mean_size,
                    row.mean_mrr,
                    1.0 - row.alpha,
                    rows.iter().map(|r| (r.mean_size * 100.0).round() / 100.0).collect::<Vec<_>>()
                ),
            )
        }
        None => (false, "no alpha in the sweep was achievable in every trial".into()),
    };
    out.push(Outcome {
        id: 8,
        name: "tradeoff monotonicity",
        pass: c8_pass,
        detail: c8_detail,
    });
    out
}

/// Smallest `R` on a 1e-4 grid at which the capital process, evaluated
/// directly in log space, exceeds `1/delta`.
fn grid_oracle(losses: &[f64], delta: f64) -> f64 {
    let st = WsrState::new(losses, delta, WsrVariant::Predictable).unwrap();
    let target = (1.0 / delta).ln();
    (0..=10_000)
        .map(|i| i as f64 * 1e-4)
        .find(|&r| st.log_capital(r).into_iter().fold(f64::NEG_INFINITY, f64::max) > target)
        .unwrap_or(1.0)
}

fn bernoulli(rng: &mut impl Rng, p: f64, m: usize) -> Vec<f64> {
    (0..m).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let covered = (0..1000)
        .filter(|_| wsr_ucb(&bernoulli(&mut rng, 0.3, 500), 0.1).unwrap() >= 0.3)
        .count();
    let rate = covered as f64 / 1000.0;

    let mut gaps = Vec::new();
    let mut oracle_err: f64 = 0.0;
    for rep in 0..100 {
        let losses = bernoulli(&mut rng, 0.3, 5000);
        let u = wsr_ucb(&losses, 0.1).unwrap();
        gaps.push(u - mean_in_order(&losses));
        if rep < 5 {
            let o = grid_oracle(&losses, 0.1);
            oracle_err = oracle_err.max(if u > o { u - o } else { (o - u - 1e-4).max(0.0) });
        }
    }
    let gap = mean_in_order(&gaps);
    let oracle_ok = oracle_err <= BISECTION_TOL;
    Outcome {
        id: 3,
        name: "WSR bound validity",
        pass: rate >= 0.88 && gap <= 0.03 && oracle_ok,
        detail: format!(
            "coverage {rate:.3} (>= 0.88) at m=500; mean ucb - mean {gap:.4} (<= 0.03) at m=5000; \
             grid-oracle disagreement {oracle_err:.1e} (<= {BISECTION_TOL:.0e})"
        ),
    }
}

fn criterion_4() -> Outcome {
    let cfg = SynthConfig {
        n_queries: 5000,
        pool_size: 200,
        retriever_gap: 4.0,
        seed: 44,
        ..SynthConfig::default()
    };
    let raw = generate(&cfg).unwrap();
    let prep = Preparation::fit(&raw, BetaChoice::default(), 10).unwrap();
    let calib = prep.apply(&raw).unwrap();
    let curve = Calibrator::new(&calib, &CalibrationConfig::default())
        .unwrap()
        .curve(0.1)
        .unwrap();
    let (worst, at) = curve
        .ucb
        .iter()
        .zip(&curve.empirical_risk)
        .zip(&curve.thresholds)
        .map(|((u, e), t)| (u - e, *t))
        .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });
    Outcome {
        id: 4,
        name: "bound tightness",
        pass: worst <= 0.05,
        detail: format!("max ucb - empirical risk {worst:.4} at tau {at:.4} over {} grid points (<= 0.05)", curve.len()),
    }
}

type Row = (String, f64, f64, bool);

fn naive_loss(rows: &[Row], tau: f64) -> f64 {
    let mut kept: Vec<&Row> = rows.iter().filter(|r| r.1 >= tau).collect();
    kept.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    match kept.iter().take(10).position(|r| r.3) {
        Some(p) => 1.0 - 1.0 / (p + 1) as f64,
        None => 1.0,
    }
}

fn rows_of(r: &QueryRecord) -> Vec<Row> {
    r.candidates()
        .iter()
        .map(|c| {
            (
                c.doc_id.to_string(),
                c.calibrated_score,
                c.fused_score.unwrap(),
                r.gold_ids().contains(&c.doc_id),
            )
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let modes = [
        RerankerMode::Consistent,
        RerankerMode::Noisy { gap: 2.0, noise: 1.0 },
        RerankerMode::Adversarial { gap: 2.0, noise: 1.0 },
        RerankerMode::Noisy { gap: 0.5, noise: 2.0 },
    ];
    let mut records = Vec::new();
    for (i, mode) in modes.iter().enumerate() {
        let cfg = SynthConfig {
            n_queries: 50,
            pool_size: [10, 25, 40, 50][i],
            gold_min: 1,
            gold_max: 3,
            retriever_gap: 1.5,
            reranker: *mode,
            seed: 500 + i as u64,
            ..SynthConfig::default()
        };
        let raw = generate(&cfg).unwrap();
        let prep = Preparation::fit(&raw, BetaChoice::default(), 10).unwrap();
        for r in prep.apply(&raw).unwrap().records() {
            let gold: BTreeSet<DocId> = r.gold_ids().clone();
            records.push(QueryRecord::new(format!("m{i}-{}", r.query_id()), r.candidates().to_vec(), gold).unwrap());
        }
    }
    let ds = Dataset::new(records, DatasetMeta::default()).unwrap();

    let mut checked = 0usize;
    let mut curve_mismatch = 0usize;
    for r in ds.records() {
        let rows = rows_of(r);
        let curve = loss_curve(r, Metric::default()).unwrap();
        let mut taus: Vec<f64> = curve.steps().iter().map(|s| s.0).collect();
        taus.extend(rows.iter().map(|x| x.1));
        for tau in taus {
            checked += 1;
            if curve.evaluate(tau) != naive_loss(&rows, tau) {
                curve_mismatch += 1;
            }
        }
    }

    let grid: Vec<f64> = (0..100).rev().map(|j| j as f64 / 99.0).collect();
    let cfg = CalibrationConfig {
        grid: GridSpec::Explicit(grid.clone()),
        ..CalibrationConfig::default()
    };
    let curve = Calibrator::new(&ds, &cfg).unwrap().curve(0.1).unwrap();
    let all_rows: Vec<Vec<Row>> = ds.records().iter().map(rows_of).collect();
    let mut grid_mismatch = 0usize;
    for (g, &tau) in grid.iter().enumerate() {
        let losses: Vec<f64> = all_rows.iter().map(|rows| naive_loss(rows, tau)).collect();
        if curve.empirical_risk[g] != mean_in_order(&losses) || curve.ucb[g] != wsr_ucb(&losses, 0.1).unwrap() {
            grid_mismatch += 1;
        }
    }
    Outcome {
        id: 5,
        name: "exactness oracle",
        pass: curve_mismatch == 0 && grid_mismatch == 0,
        detail: format!(
            "{} queries, {checked} breakpoint evaluations with {curve_mismatch} mismatches; \
             100-point risk curve with {grid_mismatch} mismatches ({} non-monotone queries)",
            ds.len(),
            curve.diagnostics.non_monotone_queries
        ),
    }
}

fn ucb_at(calib: &Dataset, tau: Threshold, delta: f64) -> f64 {
    wsr_ucb(loss_vector(calib, tau, Metric::default()).unwrap().as_slice(), delta).unwrap()
}

fn criterion_6() -> Outcome {
    let cfg = SynthConfig {
        n_queries: 3000,
        pool_size: 200,
        retriever_gap: 4.0,
        seed: 66,
        ..SynthConfig::default()
    };
    let raw = generate(&cfg).unwrap();
    let prep = Preparation::fit(&raw, BetaChoice::default(), 10).unwrap();
    let calib = prep.apply(&raw).unwrap();
    let floor = 1.0 - full_mrr(&calib, 10).unwrap();
    let delta = 0.1;
    let mut cal = Calibrator::new(&calib, &CalibrationConfig::default()).unwrap();
    let curve = cal.curve(delta).unwrap();
    let min_ucb = curve.ucb.iter().copied().fold(f64::INFINITY, f64::min);

    let alpha = floor / 2.0;
    let risk = cal.calibrate(alpha, delta, CorrectionMode::Risk).unwrap();
    let risk_ok = (risk.alpha_effective - min_ucb).abs() <= 1e-12 && risk.correction == Correction::Risk;

    let confidence_check = |cal: &mut Calibrator, alpha: f64| {
        let r = cal.calibrate(alpha, delta, CorrectionMode::Confidence).unwrap();
        let at = ucb_at(&calib, r.threshold_hat, r.delta_effective);
        let below = ucb_at(&calib, r.threshold_hat, r.delta_effective - 0.01);
        (r.delta_effective, at, below, at <= alpha && below > alpha)
    };
    let (d1, at1, below1, ok1) = confidence_check(&mut cal, alpha);
    // Also exercise a correction that lands strictly inside (delta, 1).
    let mid_alpha = floor + 0.5 * (min_ucb - floor);
    let (d2, at2, below2, ok2) = confidence_check(&mut cal, mid_alpha);
    let interior = d2 > delta && d2 < 1.0;
    Outcome {
        id: 6,
        name: "correction soundness",
        pass: risk_ok && ok1 && ok2 && interior,
        detail: format!(
            "floor {floor:.4}; alpha {alpha:.4}: alpha_c {:.6} vs min ucb {min_ucb:.6}; delta_c {d1:.2} with ucb {at1:.4} <= alpha, \
             ucb at delta_c - 0.01 {below1:.4} > alpha; alpha {mid_alpha:.4}: delta_c {d2:.2}, ucb {at2:.4} <= alpha, \
             ucb at delta_c - 0.01 {below2:.4} > alpha",
            risk.alpha_effective
        ),
    }
}

fn criterion_9() -> Outcome {
    let cfg = SynthConfig {
        n_queries: 5000,
        pool_size: 1000,
        retriever_gap: 5.0,
        seed: 99,
        ..SynthConfig::default()
    };
    let raw = generate(&cfg).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (full_time, exact_time, grid_len, breakpoints, result) = single.install(|| {
        let t = Instant::now();
        let prep = Preparation::fit(&raw, BetaChoice::default(), 10).unwrap();
        let calib = prep.apply(&raw).unwrap();
        let mut cal = Calibrator::new(&calib, &CalibrationConfig::default()).unwrap();
        let curve = cal.curve(0.1).unwrap();
        let result = cal.calibrate(0.6, 0.1, CorrectionMode::Risk).unwrap();
        let full_time = t.elapsed();

        let t = Instant::now();
        let exact_cfg = CalibrationConfig {
            grid: GridSpec::Exact,
            ..CalibrationConfig::default()
        };
        let exact = Calibrator::new(&calib, &exact_cfg).unwrap();
        let risk = exact.empirical_risk();
        let exact_time = t.elapsed();
        (full_time, exact_time, curve.len(), risk.len(), result)
    });
    assert_eq!(grid_len, step_grid(1e-4).unwrap().len());
    Outcome {
        id: 9,
        name: "performance",
        pass: full_time <= Duration::from_secs(60) && exact_time <= Duration::from_secs(5),
        detail: format!(
            "5000 queries x 1000 candidates, one worker: full calibration with WSR at all {grid_len} grid points {:.2}s (<= 60s), \
             exact sweep over {breakpoints} breakpoints {:.2}s (<= 5s); tau_hat {:.4}",
            full_time.as_secs_f64(),
            exact_time.as_secs_f64(),
            result.threshold_hat.value()
        ),
    }
}

fn run_text(ds: &Dataset, reranker: bool) -> String {
    let mut s = String::new();
    for r in ds.records() {
        let mut c: Vec<_> = r.candidates().iter().collect();
        let score = |x: &prunecert::Candidate| if reranker { x.reranker_score } else { x.retriever_score };
        c.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.doc_id.cmp(&b.doc_id)));
        for (i, x) in c.iter().enumerate() {
            let _ = writeln!(s, "{} Q0 {} {} {} {}", r.query_id(), x.doc_id, i + 1, score(x), if reranker { "rr" } else { "ret" });
        }
    }
    s
}

fn summary_row(retriever: &str, reranker: &str, qrels: &str, config: &TrialConfig, alpha: f64) -> String {
    let ds = build_dataset(
        &parse_run(retriever.as_bytes()).unwrap(),
        &parse_run(reranker.as_bytes()).unwrap(),
        &parse_qrels(qrels.as_bytes()).unwrap(),
        1000,
    )
    .unwrap();
    let out = prunecert::evaluate::run_trials(&ds, alpha, config).unwrap();
    let s = out.summary;
    format!(
        "MRR@10 {:.3} | confidence {:.3} | coverage {:.3} | size {:.1} | speedup {:.1}x",
        s.mean_mrr, s.mean_confidence, s.coverage, s.mean_size, s.speedup
    )
}

fn criterion_10() -> Outcome {
    // Fabricated run files exercise the same parser-to-summary path.
    let cfg = SynthConfig {
        n_queries: 400,
        pool_size: 50,
        reranker: RerankerMode::Noisy { gap: 4.0, noise: 1.0 },
        seed: 10,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let qrels: String = ds
        .records()
        .iter()
        .flat_map(|r| r.gold_ids().iter().map(move |g| format!("{} 0 {g} 1\n", r.query_id())))
        .collect();
    let small = TrialConfig {
        n_trials: 5,
        calib_size: 200,
        test_size: 200,
        ..TrialConfig::default()
    };
    let row = summary_row(&run_text(&ds, false), &run_text(&ds, true), &qrels, &small, 0.5);
    let mut detail = format!("fabricated runs -> {row}");

    if let Ok(dir) = std::env::var("PRUNECERT_MSMARCO_DIR") {
        let read = |name: &str| std::fs::read_to_string(std::path::Path::new(&dir).join(name));
        match (read("retriever.run"), read("reranker.run"), read("qrels.txt")) {
            (Ok(a), Ok(b), Ok(c)) => {
                let row = summary_row(&a, &b, &c, &TrialConfig::default(), 1.0 - 0.38);
                let _ = write!(detail, "; supplied runs (required MRR@10 0.380) -> {row} [reference: coverage 0.900, size 27]");
            }
            _ => detail.push_str("; PRUNECERT_MSMARCO_DIR lacks retriever.run/reranker.run/qrels.txt"),
        }
    } else {
        detail.push_str("; no real run files supplied (set PRUNECERT_MSMARCO_DIR), numbers not gated");
    }
    Outcome {
        id: 10,
        name: "real-data pathway",
        pass: row.contains("coverage") && row.contains("size"),
        detail,
    }
}

fn main() {
    // The test harness passes flags such as `--nocapture`; none apply here.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: u8| filters.is_empty() || filters.iter().any(|f| f == &id.to_string());

    let mut outcomes = Vec::new();
    let mut run = |id: u8, f: &dyn Fn() -> Outcome| {
        if selected(id) {
            let o = f();
            emit(&o);
            outcomes.push(o);
        }
    };
    run(3, &criterion_3);
    run(4, &criterion_4);
    run(5, &criterion_5);
    run(6, &criterion_6);
    run(9, &criterion_9);
    run(10, &criterion_10);
    if [1, 2, 7, 8].iter().any(|&id| selected(id)) {
        for o in trial_criteria() {
            emit(&o);
            outcomes.push(o);
        }
    }

    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

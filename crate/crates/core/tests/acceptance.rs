//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not asserted, so the line-up is always complete.
//! The lines go to stderr and show without `--nocapture`.
//! Set `AQMM_STRICT_ACCEPTANCE=1` to turn any FAIL into a test failure.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use aqmm::bootstrap::{blb_stderr_for, cluster_bootstrap, BlbConfig};
use aqmm::cli::{run_fit, RunConfig};
use aqmm::estimate::{fit, FitControls, Problem};
use aqmm::loss::{abc_coefficients, abc_decompose, check_loss, smoothed_loss, smoothed_loss_derivative, SmoothedLossParams};
use aqmm::model::{assemble, ClusteredData, DesignSet, ModelSpec, RandomTermSpec, Theta};
use aqmm::basis::{BasisKind, SmoothTermSpec};
use aqmm::sim::{generate, run_scenario, MetricsTable, SimScenario};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit_s: f64, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let secs = start.elapsed().as_secs_f64();
    if secs > limit_s {
        o.pass = false;
    }
    o.detail = format!("{}; {secs:.1} s (limit {limit_s} s)", o.detail);
    o
}

// ---------------------------------------------------------------- criterion 1

fn loss_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_id, mut worst_gap, mut worst_c1) = (0.0f64, 0.0f64, 0.0f64);
    let mut bound_ok = true;
    for _ in 0..100_000 {
        let tau = rng.random_range(0.001..0.999);
        let omega = 10f64.powf(rng.random_range(-6.0..2.0));
        let r = rng.random_range(-3.0..3.0) * omega.max(1.0);
        let p = SmoothedLossParams::new(tau, omega).unwrap();

        let k = smoothed_loss(r, p);
        let quad = abc_decompose(&[r], p).quadratic_form(&[r]);
        worst_id = worst_id.max((quad - 2.0 * k).abs() / (2.0 * k).abs().max(f64::MIN_POSITIVE));

        // the gap is largest at the band edges, where it equals omega/2 times tau² or (1-tau)²
        let bound = 0.5 * omega * tau.powi(2).max((1.0 - tau).powi(2));
        let rounding = 4.0 * f64::EPSILON * (1.0 + check_loss(r, tau).abs());
        if (k - check_loss(r, tau)).abs() > bound * (1.0 + 1e-12) + rounding {
            bound_ok = false;
        }
        let (lo, hi) = p.band();
        let at_edges = (smoothed_loss(lo, p) - check_loss(lo, tau))
            .abs()
            .max((smoothed_loss(hi, p) - check_loss(hi, tau)).abs());
        worst_gap = worst_gap.max((at_edges - bound).abs() / bound);

        // one-sided limits at each kink from the two adjacent quadratic pieces
        for (edge, outer) in [(lo, -1i8), (hi, 1i8)] {
            let (a0, b0, c0) = abc_coefficients(0, p);
            let (a1, b1, c1) = abc_coefficients(outer, p);
            let scale = 1.0 + (a0 * edge * edge).abs() + (b1 * edge).abs() + c1.abs();
            let value = ((a0 * edge * edge + b0 * edge + c0) - (a1 * edge * edge + b1 * edge + c1)).abs() / scale;
            let slope = ((2.0 * a0 * edge + b0) - (2.0 * a1 * edge + b1)).abs() / (1.0 + b1.abs());
            let eps = 1e-12 * omega;
            let d = (smoothed_loss_derivative(edge + eps, p) - smoothed_loss_derivative(edge - eps, p)).abs();
            worst_c1 = worst_c1.max(value).max(slope).max(d);
        }
    }
    Outcome {
        pass: worst_id < 1e-10 && bound_ok && worst_gap < 1e-10 && worst_c1 < 1e-10,
        detail: format!(
            "identity rel err {worst_id:.1e}, bound respected {bound_ok}, sup attained to {worst_gap:.1e}, kink jumps {worst_c1:.1e}"
        ),
    }
}

// ---------------------------------------------------------- shared instances

fn clustered(m: usize, n: usize, rng: &mut ChaCha8Rng) -> ClusteredData {
    let (mut y, mut id, mut x, mut t) = (vec![], vec![], vec![], vec![]);
    for i in 0..m {
        let u0: f64 = rng.sample(StandardNormal);
        for _ in 0..n {
            let xv: f64 = rng.sample(StandardNormal);
            let tv: f64 = rng.random_range(0.0..6.0);
            let e: f64 = rng.sample(StandardNormal);
            y.push(1.0 + 2.0 * xv + tv.sin() + u0 + 0.5 * e);
            id.push(format!("g{i}"));
            x.push(xv);
            t.push(tv);
        }
    }
    let cols = BTreeMap::from([("x".to_string(), x), ("t".to_string(), t)]);
    ClusteredData::new(y, id, cols).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng) -> DesignSet {
    loop {
        let m = rng.random_range(2..10);
        let n = rng.random_range(2..6);
        let mut s = ModelSpec::new("y", "id");
        s.linear = vec!["x".into()];
        if rng.random_bool(0.7) {
            s.smooth = vec![SmoothTermSpec::new("t", BasisKind::CubicRegression, rng.random_range(4..9))];
        }
        if rng.random_bool(0.5) {
            s.random.slopes = vec!["x".into()];
        }
        if let Ok(d) = assemble(&clustered(m, n, rng), &s) {
            if d.dims().w_len() <= 40 {
                return d;
            }
        }
    }
}

fn random_theta(d: &DesignSet, rng: &mut ChaCha8Rng) -> Theta {
    let dims = d.dims();
    let v: Vec<f64> = (0..dims.theta_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    Theta::from_vec(&v, &dims, 1.0)
}

fn residuals(d: &DesignSet, theta: &Theta, w: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(&d.y) - &d.f * DVector::from_column_slice(&theta.beta) - d.dense_g() * DVector::from_column_slice(w)
}

// ---------------------------------------------------------------- criterion 2

fn derivatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 100 {
        let d = random_instance(&mut rng);
        let params = SmoothedLossParams::new(rng.random_range(0.05..0.95), rng.random_range(0.1..2.0)).unwrap();
        let prob = Problem::new(&d, None, params).unwrap();
        let theta = random_theta(&d, &mut rng);
        let w: Vec<f64> = (0..d.dims().w_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (lo, hi) = params.band();
        let eps = 1e-5;
        // keep every residual at least ~100 steps away from the kinks
        let margin = 100.0 * eps * (1.0 + d.dense_g().abs().max());
        if residuals(&d, &theta, &w).iter().any(|r| (r - lo).abs() < margin || (r - hi).abs() < margin) {
            continue;
        }
        done += 1;
        let g = DVector::from_vec(prob.h_gradient(&theta, &w).unwrap());
        let hess = prob.h_hessian(&theta, &w).unwrap();
        let k = w.len();
        let mut fd_g = DVector::zeros(k);
        let mut fd_h = DMatrix::zeros(k, k);
        for j in 0..k {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += eps;
            wm[j] -= eps;
            fd_g[j] = (prob.h_value(&theta, &wp).unwrap() - prob.h_value(&theta, &wm).unwrap()) / (2.0 * eps);
            let gp = DVector::from_vec(prob.h_gradient(&theta, &wp).unwrap());
            let gm = DVector::from_vec(prob.h_gradient(&theta, &wm).unwrap());
            fd_h.set_column(j, &((gp - gm) / (2.0 * eps)));
        }
        worst_g = worst_g.max((&fd_g - &g).norm() / g.norm().max(1e-300));
        worst_h = worst_h.max((&fd_h - &hess).norm() / hess.norm());
    }
    Outcome {
        pass: worst_g < 1e-5 && worst_h < 1e-5,
        detail: format!("100 instances, worst relative error gradient {worst_g:.1e}, Hessian {worst_h:.1e}"),
    }
}

// ---------------------------------------------------------------- criterion 3

fn mode_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut all_in_band = true;
    for _ in 0..20 {
        let d = random_instance(&mut rng);
        let theta = random_theta(&d, &mut rng);
        let omega = 1e3;
        let prob = Problem::new(&d, None, SmoothedLossParams::new(rng.random_range(0.1..0.9), omega).unwrap()).unwrap();
        let sol = prob.solve_modes(&theta, &vec![0.0; d.dims().w_len()], 50, 1e-12).unwrap();
        // one ridge step: (G'G/omega + Psi^-1) w = G'(y - F beta)/omega
        let g = d.dense_g();
        let lhs = g.transpose() * &g / omega + prob.precision(&theta).unwrap().dense_inverse();
        let e = DVector::from_column_slice(&d.y) - &d.f * DVector::from_column_slice(&theta.beta);
        let w = lhs.lu().solve(&(g.transpose() * e / omega)).unwrap();
        worst = worst.max(sol.w.iter().zip(w.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let (lo, hi) = prob.params.band();
        all_in_band &= residuals(&d, &theta, &sol.w).iter().all(|r| *r > lo && *r < hi);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let d = random_instance(&mut rng);
    let dims = d.dims();
    let prob = Problem::new(&d, None, SmoothedLossParams::new(0.5, 0.1).unwrap()).unwrap();
    let mut norms = Vec::new();
    for scale in [0.0, -4.0, -8.0, -12.0, -16.0] {
        let theta = Theta {
            beta: vec![0.0; dims.p],
            xi: crate_xi(dims.q, scale),
            log_phi: vec![2.0 * scale; dims.s],
            sigma: 1.0,
        };
        let sol = prob.solve_modes(&theta, &vec![0.0; dims.w_len()], 100, 1e-12).unwrap();
        norms.push(sol.w.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let decreasing = norms.windows(2).all(|p| p[1] < p[0]);
    let last = *norms.last().unwrap();
    let shown: Vec<String> = norms.iter().map(|v| format!("{v:.1e}")).collect();
    Outcome {
        pass: worst < 1e-8 && all_in_band && decreasing && last < 1e-10,
        detail: format!("ridge max diff {worst:.1e} over 20 instances; |w| along growing penalties {}", shown.join(" > ")),
    }
}

/// Log-Cholesky vector with every diagonal log-entry at `v` and zero off-diagonals.
fn crate_xi(q: usize, v: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..q {
        for j in 0..=i {
            out.push(if i == j { v } else { 0.0 });
        }
    }
    out
}

// ---------------------------------------------------------------- criterion 4

/// Direct quadrature of the marginal likelihood for a random-intercept model
/// with two clusters of two observations (composite Simpson per cluster).
fn quadrature_loglik(y: &[[f64; 2]; 2], beta: f64, var: f64, params: SmoothedLossParams, sigma: f64) -> f64 {
    let tau = params.tau;
    let mut total = 4.0 * (tau * (1.0 - tau) / sigma).ln();
    let sd = (sigma * var).sqrt();
    for pair in y {
        let (lo, hi, k) = (-12.0 * sd - 10.0, 12.0 * sd + 10.0, 40_000);
        let step = (hi - lo) / k as f64;
        let f = |u: f64| {
            let loss: f64 = pair.iter().map(|yv| smoothed_loss(yv - beta - u, params)).sum();
            (-u * u / (2.0 * sigma * var) - loss / sigma).exp() / (2.0 * PI * sigma * var).sqrt()
        };
        let mut acc = f(lo) + f(hi);
        for j in 1..k {
            acc += if j % 2 == 1 { 4.0 } else { 2.0 } * f(lo + j as f64 * step);
        }
        total += (acc * step / 3.0).ln();
    }
    total
}

fn laplace_error(rng: &mut ChaCha8Rng, omega_range: std::ops::Range<f64>) -> f64 {
    let y = [[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]];
    let data = ClusteredData::new(
        vec![y[0][0], y[0][1], y[1][0], y[1][1]],
        vec!["a".into(), "a".into(), "b".into(), "b".into()],
        BTreeMap::new(),
    )
    .unwrap();
    let mut s = ModelSpec::new("y", "id");
    s.response_scale = Some(1.0);
    s.random = RandomTermSpec { intercept: true, slopes: vec![] };
    let d = assemble(&data, &s).unwrap();
    let params = SmoothedLossParams::new(rng.random_range(0.2..0.8), rng.random_range(omega_range)).unwrap();
    let prob = Problem::new(&d, None, params).unwrap();
    let beta = rng.random_range(-0.3..0.3);
    let xi = rng.random_range(-1.0..0.5);
    let theta = Theta { beta: vec![beta], xi: vec![xi], log_phi: vec![], sigma: 1.0 };
    let ev = prob.laplace_loglik(&theta, &[0.0; 2], &FitControls::default()).unwrap();
    (ev.loglik - quadrature_loglik(&y, beta, (2.0 * xi).exp(), params, ev.sigma_hat)).abs()
}

fn laplace_vs_quadrature() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut errs: Vec<f64> = (0..20).map(|_| laplace_error(&mut rng, 1.5..3.0)).collect();
    // the same check with narrow bands, reported for context only
    let narrow = (0..5).map(|_| laplace_error(&mut rng, 0.1..0.5)).fold(0.0, f64::max);
    errs.sort_by(f64::total_cmp);
    let within = errs.iter().filter(|e| **e < 0.05).count();
    Outcome {
        pass: within == errs.len(),
        detail: format!(
            "20 instances with omega in [1.5, 3]: {within}/20 within 0.05, median {:.4}, max {:.4} (omega in [0.1, 0.5]: max {narrow:.3})",
            errs[errs.len() / 2],
            errs[errs.len() - 1]
        ),
    }
}

// ---------------------------------------------------------------- criterion 5

fn quantile_recovery() -> Outcome {
    let mut s = ModelSpec::new("y", "id");
    s.random = RandomTermSpec { intercept: false, slopes: vec![] };
    let mut summary = Vec::new();
    let mut pass = true;
    for tau in [0.1, 0.5, 0.9] {
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
            let n = 500;
            let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let id: Vec<String> = (0..n).map(|i| format!("{}", i / 5)).collect();
            let d = assemble(&ClusteredData::new(y.clone(), id, BTreeMap::new()).unwrap(), &s).unwrap();
            let f = fit(&d, tau, &FitControls::default(), None).unwrap();
            let mut sorted = y;
            sorted.sort_by(f64::total_cmp);
            // inverse of the empirical distribution function
            let q = sorted[((tau * n as f64).ceil() as usize).max(1) - 1];
            if (f.beta[0] - q).abs() < 0.05 {
                hits += 1;
            }
        }
        pass &= hits >= 95;
        summary.push(format!("tau {tau}: {hits}/100"));
    }
    Outcome { pass, detail: summary.join(", ") }
}

// ------------------------------------------------------------- criteria 6, 9

fn batch_cv(table: &MetricsTable, tau: f64, batches: usize) -> f64 {
    let reps: Vec<_> = table.replicates.iter().filter(|r| r.tau == tau).collect();
    let size = reps.len() / batches;
    let means: Vec<f64> = reps.chunks(size).take(batches).map(|c| c.iter().map(|r| r.msep).sum::<f64>() / c.len() as f64).collect();
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    var.sqrt() / mu
}

fn table_b(tables: &[(usize, MetricsTable)]) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for (n, t) in tables {
        let row = |tau: f64| t.rows.iter().find(|r| r.tau == tau).unwrap();
        let (r1, r5, r95) = (row(0.1), row(0.5), row(0.95));
        let pnr_ok = (r1.pnr - 0.11).abs() <= 0.02 && (r5.pnr - 0.50).abs() <= 0.02 && r95.pnr >= 0.92 && r95.pnr <= 0.97;
        let bias_ok = r5.bias.abs() <= 0.1;
        let b4_ok = r5.relbias_b4.abs() < 0.03;
        let cv5 = batch_cv(t, 0.5, 5);
        let cv95 = batch_cv(t, 0.95, 5);
        let msep_ok = t.rows.iter().all(|r| r.msep.is_finite()) && cv5 < 0.25 && cv95 < 0.25 && r5.msep < r95.msep;
        pass &= pnr_ok && bias_ok && b4_ok && msep_ok;
        lines.push(format!(
            "(n={n}, M=50) PNR {:.3}/{:.3}/{:.3} [{}], bias(0.5) {:+.3} [{}], relbias b4 {:+.2}% [{}], msep {:.3}/{:.3}/{:.3} cv {:.2}/{:.2} [{}]",
            r1.pnr,
            r5.pnr,
            r95.pnr,
            ok(pnr_ok),
            r5.bias,
            ok(bias_ok),
            100.0 * r5.relbias_b4,
            ok(b4_ok),
            r1.msep,
            r5.msep,
            r95.msep,
            cv5,
            cv95,
            ok(msep_ok),
        ));
    }
    Outcome { pass, detail: lines.join("; ") }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "off"
    }
}

fn determinism(tables: &[(usize, MetricsTable)]) -> Outcome {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy.toml")).unwrap();
    let a = serde_json::to_string(&run_fit(&cfg, false).unwrap().0).unwrap();
    let b = serde_json::to_string(&run_fit(&cfg, false).unwrap().0).unwrap();
    let sc = SimScenario::default();
    let same_data = generate(&sc, 3).unwrap().data == generate(&sc, 3).unwrap().data;
    let (mut conv, mut total) = (0usize, 0usize);
    for (_, t) in tables {
        conv += t.replicates.iter().filter(|r| r.converged).count();
        total += t.replicates.len() + t.failures.len();
    }
    let rate = conv as f64 / total as f64;
    Outcome {
        pass: a == b && same_data && rate >= 0.95,
        detail: format!("bundles identical {}, replicate data identical {same_data}, convergence {conv}/{total} = {:.1}%", a == b, 100.0 * rate),
    }
}

// ---------------------------------------------------------------- criterion 7

fn heteroscedastic() -> Outcome {
    let sc = SimScenario { gamma: 1.0, n: 10, m: 100, taus: vec![0.9], ..Default::default() };
    let t = run_scenario(&sc, &FitControls::default()).unwrap();
    let b3: Vec<f64> = t.replicates.iter().map(|r| r.beta3).collect();
    let mean = b3.iter().sum::<f64>() / b3.len() as f64;
    let truth = sc.beta3_truth(0.9);
    let rel = (mean - truth) / truth;
    Outcome {
        pass: rel.abs() < 0.05,
        detail: format!("mean beta3(0.9) {mean:.4} vs {truth:.4} ({:+.2}%), {} fits", 100.0 * rel, b3.len()),
    }
}

// ---------------------------------------------------------------- criterion 8

fn blb_validity() -> Outcome {
    let controls = FitControls::default();
    let sc = SimScenario { n: 10, m: 40, taus: vec![0.5], ..Default::default() };
    let sim = generate(&sc, 0).unwrap();
    let d = assemble(&sim.data, &sc.model_spec()).unwrap();
    let full = fit(&d, 0.5, &controls, None).unwrap();
    let j = full.fixed_names.iter().position(|n| n == "x4").unwrap();
    let cfg = BlbConfig { subsets: 4, subset_size: Some(10), replicates: 50, seed: 8, warm_start: true };
    let blb = blb_stderr_for(&d, std::slice::from_ref(&full), &controls, &cfg).unwrap();
    let boot = cluster_bootstrap(&d, &[0.5], &controls, 200, 9, true).unwrap();
    let (se, sd) = (blb[0].se[j], boot[0].sd[j]);
    let ratio = se / sd;

    // noise-free data lying exactly in the model space
    let cols = sim.data.columns.clone();
    let y: Vec<f64> = (0..sim.data.len()).map(|r| 1.0 + 4.0 * cols["x3"][r] + 3.0 * cols["x4"][r]).collect();
    let exact = ClusteredData::new(y, sim.data.cluster.clone(), cols).unwrap();
    let mut spec = ModelSpec::new("y", "id");
    spec.linear = vec!["x3".into(), "x4".into()];
    let d0 = assemble(&exact, &spec).unwrap();
    let full0 = fit(&d0, 0.5, &controls, None).unwrap();
    let blb0 = blb_stderr_for(&d0, std::slice::from_ref(&full0), &controls, &cfg).unwrap();
    let se0 = blb0[0].se.iter().cloned().fold(0.0, f64::max);

    Outcome {
        pass: (ratio - 1.0).abs() <= 0.3 && se0 < 1e-6,
        detail: format!(
            "SE(beta4) BLB {se:.4} vs bootstrap {sd:.4} (ratio {ratio:.3}), convergence {:.0}%/{:.0}%; noise-free max SE {se0:.1e}",
            100.0 * blb[0].replicate_convergence_rate,
            100.0 * boot[0].replicate_convergence_rate
        ),
    }
}

// ---------------------------------------------------------------------- main

/// Written straight to the stderr handle so the lines survive output capture.
fn shout(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |k: usize, o: Outcome| {
        shout(&format!("criterion {k}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((k, o));
    };

    report(1, timed(10.0, loss_exactness));
    report(2, timed(30.0, derivatives));
    report(3, timed(10.0, mode_solver));
    report(4, timed(60.0, laplace_vs_quadrature));
    report(5, timed(300.0, quantile_recovery));

    let start = Instant::now();
    let tables: Vec<(usize, MetricsTable)> = [5, 10]
        .into_iter()
        .map(|n| (n, run_scenario(&SimScenario { n, m: 50, ..Default::default() }, &FitControls::default()).unwrap()))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let mut o6 = table_b(&tables);
    o6.detail = format!("{}; {secs:.0} s (limit 7200 s)", o6.detail);
    o6.pass &= secs <= 7200.0;
    report(6, o6);

    report(7, timed(3600.0, heteroscedastic));
    report(8, timed(1800.0, blb_validity));
    report(9, timed(600.0, || determinism(&tables)));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    shout(&format!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len()));
    if std::env::var_os("AQMM_STRICT_ACCEPTANCE").is_some() {
        assert!(failed.is_empty(), "failing criteria: {failed:?}");
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion. Runs with
//! `cargo test -p lsbp-cli --test acceptance` and exits nonzero if any
//! criterion fails. Set `LSBP_ACCEPTANCE=3,7` to run a subset.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lsbp::cavi::{run_cavi, sample_q, CaviSettings};
use lsbp::density::{integrated_abs_distance, summarize_density, DensityGrid};
use lsbp::diagnostics::{max_probit_gap, random_measure_check_with, WeightMoments};
use lsbp::ecm::{run_ecm, EcmSettings};
use lsbp::gibbs::{run_chain, ChainSettings};
use lsbp::model::{truncation_bound, Dataset, ModelConfig};
use lsbp::polya_gamma::sample_pg1;
use lsbp::rng::RngStream;
use lsbp::run::{prepare_dataset, DataSource, RunConfig};
use lsbp::synthetic::SyntheticSpec;
use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use support::*;

// tolerances
const SE_BAND: f64 = 3.0;
const KS_ALPHA: f64 = 0.001;
const GEWEKE_Z: f64 = 4.0;
const ASCENT_SLACK: f64 = 1e-8;
const EVIDENCE_TOL: f64 = 1e-6;
const PROBIT_TOL: f64 = 0.0100;
const IAD_ECM: f64 = 0.05;
const IAD_CAVI: f64 = 0.10;

// budgets in seconds
const PG_BUDGET: f64 = 60.0;
const GEWEKE_BUDGET: f64 = 300.0;
const MEASURE_BUDGET: f64 = 30.0;
const ENGINE_AGREEMENT_BUDGET: f64 = 900.0;
const OPTIM_BUDGET: f64 = 60.0;
const GIBBS_BUDGET: f64 = 1800.0;

/// Sweep cap for the timed optimizer runs; the preset's 1000 does not reach
/// a relative change of 1e-8 at n = 2312.
const TIMED_MAX_ITER: usize = 20_000;

struct Verdict {
    pass: bool,
    lines: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict { pass: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn c1_polya_gamma() -> Verdict {
    let mut v = Verdict::new();
    let t = Instant::now();
    let mut kept = Vec::new();
    for (k, c) in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0].into_iter().enumerate() {
        let mut rng = RngStream::new(1_000 + k as u64);
        let draws: Vec<f64> = (0..1_000_000).map(|_| sample_pg1(c, &mut rng)).collect();
        let (m, se) = mean_and_se(&draws);
        let target = pg_exact_mean(c);
        let z = (m - target) / se;
        v.check(z.abs() <= SE_BAND, format!("c = {c}: mean {m:.6} vs {target:.6} (z = {z:+.2})"));
        if [0.0, 1.0, 4.0].contains(&c) {
            kept.push((c, draws));
        }
    }
    // c = 4 is not in the mean grid
    let mut rng = RngStream::new(1_100);
    kept.push((4.0, (0..1_000_000).map(|_| sample_pg1(4.0, &mut rng)).collect()));
    for (k, (c, draws)) in kept.iter().enumerate() {
        let mut rng = RngStream::new(2_000 + k as u64);
        let oracle = pg_series_draws(*c, 100_000, &mut rng);
        let (d, p) = ks_two_sample(&draws[..100_000], &oracle);
        v.check(p > KS_ALPHA, format!("KS c = {c}: D = {d:.4}, p = {p:.3}"));
    }
    let secs = t.elapsed().as_secs_f64();
    v.check(secs < PG_BUDGET, format!("runtime {secs:.1} s < {PG_BUDGET} s"));
    v
}

fn c2_geweke() -> Verdict {
    let mut v = Verdict::new();
    let t = Instant::now();
    for r in geweke(200_000, 2_024) {
        v.check(
            r.z.abs() <= GEWEKE_Z,
            format!(
                "{:<6} marginal {:+.4} successive {:+.4} (z = {:+.2})",
                r.name, r.marginal.0, r.successive.0, r.z
            ),
        );
    }
    let secs = t.elapsed().as_secs_f64();
    v.check(secs < GEWEKE_BUDGET, format!("runtime {secs:.1} s < {GEWEKE_BUDGET} s"));
    v
}

/// Largest single-step decrease of a trace (0 if monotone).
fn worst_drop(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

fn c3_ecm_ascent() -> Verdict {
    let mut v = Verdict::new();
    let mut worst: f64 = 0.0;
    let mut iters = 0;
    for seed in 0..50u64 {
        let data = random_instance(200, 3, 10_000 + seed);
        let c = ModelConfig::standard(3, 2, 2, 1.0, 1.0).unwrap();
        let s = EcmSettings { n_restarts: 1, tol: 1e-12, max_iter: 500, seed, threads: Some(1) };
        let run = run_ecm(&data, &c, &s).unwrap();
        worst = worst.max(worst_drop(&run.best.log_posterior_trace));
        iters += run.best.log_posterior_trace.len() - 1;
    }
    v.check(
        worst <= ASCENT_SLACK,
        format!("50 instances, {iters} iterations, largest decrease {worst:.2e} (slack {ASCENT_SLACK:e})"),
    );
    v
}

fn c4_cavi() -> Verdict {
    let mut v = Verdict::new();
    let mut worst: f64 = 0.0;
    let mut iters = 0;
    for seed in 0..50u64 {
        let data = random_instance(200, 3, 20_000 + seed);
        let c = ModelConfig::standard(3, 2, 2, 1.0, 1.0).unwrap();
        let s = CaviSettings { n_restarts: 1, tol: 1e-12, max_iter: 500, seed, threads: Some(1) };
        let run = run_cavi(&data, &c, &s).unwrap();
        worst = worst.max(worst_drop(&run.best.elbo_trace));
        iters += run.best.elbo_trace.len() - 1;
    }
    v.check(
        worst <= ASCENT_SLACK,
        format!("50 instances, {iters} sweeps, largest decrease {worst:.2e} (slack {ASCENT_SLACK:e})"),
    );
    // y ~ N(β, σ²) with β ~ N(0, 1) and σ⁻² pinned at 1: evidence N(y; 0, 2)
    let y = 0.8;
    let data = Dataset::new(
        DVector::from_element(1, y),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let c = ModelConfig::standard(1, 1, 1, 1e8, 1e8).unwrap();
    let s = CaviSettings { n_restarts: 1, tol: 1e-15, max_iter: 200, seed: 0, threads: Some(1) };
    let elbo = *run_cavi(&data, &c, &s).unwrap().best.elbo_trace.last().unwrap();
    let evidence = -0.25 * y * y - 0.5 * (4.0 * std::f64::consts::PI).ln();
    v.check(
        (elbo - evidence).abs() < EVIDENCE_TOL,
        format!("known-variance evidence: ELBO {elbo:.9} vs {evidence:.9}"),
    );
    v
}

/// Logistic-normal moments for `ψ = 1`, `α ~ N(0, 1)` by Gauss–Hermite.
fn quadrature_moments() -> WeightMoments {
    WeightMoments {
        mu1: gh_normal_expectation(0.0, 1.0, logistic),
        mu2: gh_normal_expectation(0.0, 1.0, |t| logistic(t).powi(2)),
        se_mu1: 0.0,
        se_mu2: 0.0,
        mu1_x2: None,
        mu2_cross: None,
        se_mu1_x2: None,
        se_mu2_cross: None,
        n_draws: 0,
    }
}

fn measure_check(h: usize, seed: u64) -> lsbp::diagnostics::MeasureCheckReport {
    random_measure_check_with(
        &[1.0],
        &DVector::zeros(1),
        &DMatrix::identity(1, 1),
        h,
        0.3,
        10_000,
        quadrature_moments(),
        &RngStream::new(seed),
    )
    .unwrap()
}

fn c5_measure_moments() -> Verdict {
    let mut v = Verdict::new();
    let t = Instant::now();
    for h in [2, 5, 20] {
        let r = measure_check(h, 5_000 + h as u64);
        v.check(
            r.mean_pass,
            format!("H = {h:2}: mean {:.5} vs {} (z = {:+.2})", r.mean, r.p0_mass, (r.mean - r.p0_mass) / r.se_mean),
        );
        v.check(
            r.variance_pass,
            format!(
                "H = {h:2}: variance {:.5} vs formula {:.5} (z = {:+.2}); exact truncated {:.5} (z = {:+.2})",
                r.variance,
                r.variance_formula,
                (r.variance - r.variance_formula) / r.se_variance,
                r.variance_exact_truncated,
                (r.variance - r.variance_exact_truncated) / r.se_variance
            ),
        );
    }
    let secs = t.elapsed().as_secs_f64();
    v.check(secs < MEASURE_BUDGET, format!("runtime {secs:.1} s < {MEASURE_BUDGET} s"));
    v
}

fn c6_probit() -> Verdict {
    let mut v = Verdict::new();
    let g = max_probit_gap(-8.0, 8.0, 100_001).unwrap();
    v.check(
        g.max_gap <= PROBIT_TOL,
        format!("sup gap {:.6} at t = {:+.3} (tolerance {PROBIT_TOL})", g.max_gap, g.t_at_max),
    );
    v
}

fn c7_survivor() -> Verdict {
    let mut v = Verdict::new();
    for h in 2..=10 {
        let r = measure_check(h, 7_000 + h as u64);
        v.check(
            r.survivor_pass && r.weights_sum_pass,
            format!(
                "H = {h:2}: survivor {:.5} vs {:.5} (z = {:+.2}), max |Σπ − 1| = {:.1e}",
                r.survivor_mean,
                r.survivor_formula,
                (r.survivor_mean - r.survivor_formula) / r.se_survivor,
                r.max_weight_sum_error
            ),
        );
    }
    for (mu, h, expect) in [
        (vec![0.5], 5, 0.25),
        (vec![0.5, 0.75], 3, 1.25),
        (vec![0.25], 3, 2.25),
        (vec![0.5, 0.5, 0.5], 2, 6.0),
    ] {
        let got = truncation_bound(&mu, h).unwrap();
        v.check(got == expect, format!("truncation_bound({mu:?}, {h}) = {got} (expected {expect})"));
    }
    v
}

fn replica_setup(n: usize) -> (RunConfig, Dataset, ModelConfig) {
    let mut cfg = RunConfig::paper();
    cfg.data = DataSource::Synthetic(SyntheticSpec::replica(n, 1));
    let data = prepare_dataset(&cfg).unwrap();
    let model = cfg.model.resolve(data.p(), data.r()).unwrap();
    (cfg, data, model)
}

fn c8_engine_agreement() -> Verdict {
    let mut v = Verdict::new();
    let (cfg, data, model) = replica_setup(2_000);
    let map = data.transform.clone().unwrap();
    let raw = data.raw.as_ref().unwrap();
    let xs = [30.0, 60.0, 90.0, 120.0];
    let ys = lsbp::density::padded_grid(&raw.y, 400, 0.1).unwrap();

    let t = Instant::now();
    let chain = run_chain(&data, &model, &cfg.chain_settings(), None).unwrap();
    let gibbs_secs = t.elapsed().as_secs_f64();
    let gibbs = summarize_density(&chain.draws, &xs, &ys, &map).unwrap();

    let mut optim = cfg.ecm_settings();
    optim.max_iter = TIMED_MAX_ITER;
    let ecm = run_ecm(&data, &model, &optim).unwrap();
    let ecm_grid = summarize_density(&[ecm.best.params.clone()], &xs, &ys, &map).unwrap();

    let mut vb = cfg.cavi_settings();
    vb.max_iter = TIMED_MAX_ITER;
    let cavi = run_cavi(&data, &model, &vb).unwrap();
    let q = sample_q(&cavi.best, cfg.vb.n_q_samples, &RngStream::new(cfg.seed)).unwrap();
    let cavi_grid = summarize_density(&q, &xs, &ys, &map).unwrap();

    let report = |name: &str, grid: &DensityGrid, tol: f64, v: &mut Verdict| {
        let iad = integrated_abs_distance(&gibbs, grid).unwrap();
        for (x, d) in xs.iter().zip(&iad) {
            v.check(*d < tol, format!("{name} vs Gibbs at x = {x:5.1}: IAD {d:.4} < {tol}"));
        }
    };
    report("ECM ", &ecm_grid, IAD_ECM, &mut v);
    report("CAVI", &cavi_grid, IAD_CAVI, &mut v);
    let mass: Vec<String> = gibbs.slice_integrals().iter().map(|m| format!("{m:.4}")).collect();
    v.lines.push(format!("     Gibbs slice masses on the grid: {}", mass.join(", ")));
    v.check(
        gibbs_secs < ENGINE_AGREEMENT_BUDGET,
        format!("Gibbs leg {gibbs_secs:.1} s < {ENGINE_AGREEMENT_BUDGET} s"),
    );
    v
}

fn c9_scalability() -> Verdict {
    let mut v = Verdict::new();
    let (cfg, data, model) = replica_setup(2_312);

    let mut optim = cfg.ecm_settings();
    optim.max_iter = TIMED_MAX_ITER;
    let ecm = run_ecm(&data, &model, &optim).unwrap();
    let sweeps = ecm.best.log_posterior_trace.len() - 1;
    v.check(
        ecm.best.converged && ecm.elapsed_secs < OPTIM_BUDGET,
        format!(
            "ECM: {} restarts in {:.1} s, selected restart converged = {} after {sweeps} iterations",
            optim.n_restarts, ecm.elapsed_secs, ecm.best.converged
        ),
    );

    let mut vb = cfg.cavi_settings();
    vb.max_iter = TIMED_MAX_ITER;
    let cavi = run_cavi(&data, &model, &vb).unwrap();
    let sweeps = cavi.best.elbo_trace.len() - 1;
    v.check(
        cavi.best.converged && cavi.elapsed_secs < OPTIM_BUDGET,
        format!(
            "CAVI: {} restarts in {:.1} s, selected restart converged = {} after {sweeps} sweeps",
            vb.n_restarts, cavi.elapsed_secs, cavi.best.converged
        ),
    );

    let settings = ChainSettings { burn_in: 0, thin: 30, ..cfg.chain_settings() };
    let chain = run_chain(&data, &model, &settings, None).unwrap();
    v.check(
        chain.elapsed_secs < GIBBS_BUDGET,
        format!("Gibbs: {} sweeps in {:.1} s < {GIBBS_BUDGET} s", settings.iterations, chain.elapsed_secs),
    );
    v
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn without_timings(bytes: &[u8]) -> Value {
    let mut m: Value = serde_json::from_slice(bytes).unwrap();
    m.as_object_mut().unwrap().remove("timings");
    m
}

fn c10_determinism() -> Verdict {
    let mut v = Verdict::new();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    for engine in ["gibbs", "ecm", "cavi"] {
        let mut snaps = Vec::new();
        for _ in 0..2 {
            let _ = fs::remove_dir_all(&out);
            let st = Command::new(env!("CARGO_BIN_EXE_lsbp"))
                .args(["fit", "--engine", engine, "--preset", "quick", "--threads", "1", "--seed", "31"])
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
            snaps.push(snapshot(&out));
        }
        let names: Vec<&str> = snaps[0].iter().map(|(n, _)| n.as_str()).collect();
        let same_names = names == snaps[1].iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>();
        v.check(same_names, format!("{engine}: files {names:?}"));
        for ((name, a), (_, b)) in snaps[0].iter().zip(&snaps[1]) {
            if name == "manifest.json" {
                v.check(
                    without_timings(a) == without_timings(b),
                    format!("{engine}: {name} identical apart from wall-clock timings"),
                );
            } else {
                v.check(a == b, format!("{engine}: {name} byte-identical ({} bytes)", a.len()));
            }
        }
    }
    v
}

type Criterion = (usize, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "Polya-Gamma sampler moments and distribution", c1_polya_gamma),
    (2, "Gibbs joint-distribution (Geweke) test", c2_geweke),
    (3, "ECM ascent", c3_ecm_ascent),
    (4, "CAVI ascent and conjugate evidence", c4_cavi),
    (5, "random-measure mean and variance", c5_measure_moments),
    (6, "logit-probit correspondence", c6_probit),
    (7, "survivor mass and truncation bound", c7_survivor),
    (8, "engine agreement on the replica", c8_engine_agreement),
    (9, "scalability at n = 2312", c9_scalability),
    (10, "single-thread determinism", c10_determinism),
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("LSBP_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let verdict = run();
        for line in &verdict.lines {
            println!("    {line}");
        }
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        println!("CRITERION {id}: {status}  {name} ({:.1} s)", t.elapsed().as_secs_f64());
        if !verdict.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}

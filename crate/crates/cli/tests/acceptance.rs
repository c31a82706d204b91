//! Acceptance criteria 1-11. Runs without the libtest harness so every
//! criterion prints its verdict line; the process exits nonzero if any fail.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use subgroup_ate::analysis::{analyze, AnalysisSpec};
use subgroup_ate::data::{DesignSpec, Structure, UnitInput};
use subgroup_ate::design_math::{expected_inverse_arm_size, split_probability, AllocationLaw, Arm};
use subgroup_ate::estimators::diff_in_means_sample;
use subgroup_ate::linear_fit::{CovariateModel, Sample};
use subgroup_ate::simulation::SimulationReport;
use subgroup_ate::variance::{bell_mccaffrey_df, Variant};
use subgroup_ate::{AnalysisResult, Dataset};
use subgroup_ate_cli::config::{self, PanelB, SimulateConfig};
use subgroup_ate_cli::{panel_b_curve, run_specs};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// `|got - want| <= tol`, recorded as a failure message otherwise.
fn band(fails: &mut Vec<String>, label: &str, got: f64, want: f64, tol: f64) {
    if (got - want).abs() > tol || !got.is_finite() {
        fails.push(format!("{label} {got:.4} outside {want} +/- {tol}"));
    }
}

fn summarize(fails: Vec<String>, ok: String) -> Verdict {
    if fails.is_empty() {
        verdict(true, ok)
    } else {
        verdict(false, fails.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 1, 2: enumeration over every complete randomization

struct Population {
    y0: Vec<f64>,
    y1: Vec<f64>,
    subgroup: Vec<usize>,
    k: usize,
}

fn populations() -> Vec<Population> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut out = Vec::new();
    for n in [6usize, 8, 10] {
        for k in [1usize, 2] {
            for _ in 0..4 {
                // Uneven subgroup sizes for K = 2 so some assignments empty a cell.
                let subgroup: Vec<usize> = (0..n).map(|i| usize::from(k == 2 && i >= n / 3)).collect();
                let y0: Vec<f64> = (0..n).map(|i| subgroup[i] as f64 + rng.sample::<f64, _>(StandardNormal)).collect();
                let y1 = y0
                    .iter()
                    .map(|y| y + 0.3 + 1.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                out.push(Population { y0, y1, subgroup, k });
            }
        }
    }
    out
}

/// `tau_hat_k` under every equally likely assignment with both cells of
/// subgroup `k` nonempty.
fn randomization_distribution(pop: &Population, k: usize) -> Vec<f64> {
    let n = pop.y0.len();
    let mut out = Vec::new();
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != n / 2 {
            continue;
        }
        let t: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let y = (0..n).map(|i| if t[i] { pop.y1[i] } else { pop.y0[i] }).collect();
        let s = Sample::simple(y, t, pop.subgroup.clone(), Vec::new(), 0, 0.5, pop.k);
        if let Ok(e) = diff_in_means_sample(&s, k) {
            out.push(e.tau_hat);
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn members(pop: &Population, k: usize) -> Vec<usize> {
    (0..pop.y0.len()).filter(|&i| pop.subgroup[i] == k).collect()
}

fn criterion_1(pops: &[Population]) -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for pop in pops {
        for k in 0..pop.k {
            let draws = randomization_distribution(pop, k);
            let idx = members(pop, k);
            let tau = idx.iter().map(|&i| pop.y1[i] - pop.y0[i]).sum::<f64>() / idx.len() as f64;
            worst = worst.max((mean(&draws) - tau).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-12 && secs < 10.0 && pops.len() >= 20,
        format!("max |E tau_hat - tau| = {worst:.2e} over {} populations (tol 1e-12), {secs:.2}s (< 10s)", pops.len()),
    )
}

fn criterion_2(pops: &[Population]) -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for pop in pops {
        let n = pop.y0.len() as u64;
        for k in 0..pop.k {
            let draws = randomization_distribution(pop, k);
            let m = mean(&draws);
            let exact = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / draws.len() as f64;

            let idx = members(pop, k);
            let y1: Vec<f64> = idx.iter().map(|&i| pop.y1[i]).collect();
            let y0: Vec<f64> = idx.iter().map(|&i| pop.y0[i]).collect();
            let tau: Vec<f64> = idx.iter().map(|&i| pop.y1[i] - pop.y0[i]).collect();
            let law = AllocationLaw::new(n, n / 2, idx.len() as u64).unwrap();
            let formula = expected_inverse_arm_size(&law, Arm::Treatment).unwrap() * sample_var(&y1)
                + expected_inverse_arm_size(&law, Arm::Control).unwrap() * sample_var(&y0)
                - sample_var(&tau) / idx.len() as f64;
            worst = worst.max((exact - formula).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-10 && secs < 10.0,
        format!("max |Var - formula| = {worst:.2e} (tol 1e-10), {secs:.2}s (< 10s)"),
    )
}

// ---------------------------------------------------------------------------
// 3-6: the main simulation table

fn row(r: &SimulationReport, n: usize, pi1: f64, v: usize, variant: Variant) -> Result<&subgroup_ate::simulation::ReportRow, String> {
    r.row(n, pi1, v, variant)
        .ok_or_else(|| format!("no row for ({n}, {pi1}, {v}) {}", variant.name()))
}

fn criterion_3(r: &SimulationReport) -> Verdict {
    let run = || -> Result<Vec<String>, String> {
        let mut fails = Vec::new();
        let actual = row(r, 100, 0.5, 0, Variant::DbActualPhi1)?;
        let expected = row(r, 100, 0.5, 0, Variant::DbExpectedPhi1)?;
        let hw = row(r, 100, 0.5, 0, Variant::Hw)?;
        band(&mut fails, "bias", actual.bias, 0.0, 0.005);
        band(&mut fails, "coverage db_actual", actual.coverage, 0.958, 0.010);
        band(&mut fails, "coverage db_expected", expected.coverage, 0.957, 0.010);
        band(&mut fails, "coverage hw", hw.coverage, 0.958, 0.010);
        band(&mut fails, "true SE", actual.true_se, 0.376, 0.015);
        band(&mut fails, "mean SE db_actual", actual.mean_est_se, 0.385, 0.015);
        band(&mut fails, "mean SE db_expected", expected.mean_est_se, 0.383, 0.015);
        band(&mut fails, "mean SE hw", hw.mean_est_se, 0.385, 0.015);
        Ok(fails)
    };
    match run() {
        Ok(fails) => summarize(fails, "(100, .5, 0): bias, coverage, true SE and mean SE within bands".into()),
        Err(e) => verdict(false, e),
    }
}

fn criterion_4(r: &SimulationReport) -> Verdict {
    let run = || -> Result<Vec<String>, String> {
        let mut fails = Vec::new();
        let actual = row(r, 40, 0.5, 2, Variant::DbActualPhi1)?;
        let hw = row(r, 40, 0.5, 2, Variant::Hw)?;
        band(&mut fails, "coverage db_actual", actual.coverage, 0.950, 0.012);
        band(&mut fails, "true SE", actual.true_se, 0.501, 0.02);
        band(&mut fails, "mean SE db_actual", actual.mean_est_se, 0.482, 0.02);
        band(&mut fails, "coverage hw", hw.coverage, 0.953, 0.012);
        Ok(fails)
    };
    match run() {
        Ok(fails) => summarize(fails, "(40, .5, 2): coverage, true SE and mean SE within bands".into()),
        Err(e) => verdict(false, e),
    }
}

fn criterion_5(r: &SimulationReport) -> Verdict {
    match row(r, 100, 0.5, 0, Variant::DbActualPhi1) {
        Ok(a) => {
            let mut fails = Vec::new();
            band(&mut fails, "F type-I db_actual", a.type1_f, 0.042, 0.012);
            summarize(fails, format!("F type-I {:.4} within .042 +/- .012", a.type1_f))
        }
        Err(e) => verdict(false, e),
    }
}

fn criterion_6(r: &SimulationReport, specs: &[(usize, f64, usize)]) -> Verdict {
    let mut fails = Vec::new();
    for &(n, pi1, v) in specs {
        match (row(r, n, pi1, v, Variant::Fs), row(r, n, pi1, v, Variant::DbExpectedPhi1)) {
            (Ok(fs), Ok(ex)) => {
                if fs.mean_est_se < ex.mean_est_se {
                    fails.push(format!("({n}, {pi1}, {v}) fs {:.4} < expected {:.4}", fs.mean_est_se, ex.mean_est_se));
                }
            }
            (Err(e), _) | (_, Err(e)) => fails.push(e),
        }
    }
    match row(r, 100, 0.5, 0, Variant::Fs) {
        Ok(fs) => band(&mut fails, "(100, .5, 0) fs mean SE", fs.mean_est_se, 0.385, 0.015),
        Err(e) => fails.push(e),
    }
    summarize(fails, format!("fs >= expected-size mean SE on all {} specs; fs level within .385 +/- .015", specs.len()))
}

// ---------------------------------------------------------------------------
// 7-11

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let law = AllocationLaw::new(40, 20, 12).unwrap();
    let split = split_probability(&law);
    let curve = panel_b_curve(&PanelB {
        n_k: 50,
        p: 0.5,
        phi: 1.1,
        theta: 0.05,
        delta_share: 0.2,
        delta_step: 1.0,
    })
    .unwrap();
    let max = curve.iter().map(|pt| pt.ratio).fold(f64::NEG_INFINITY, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let four_dp = (split * 1e4).floor() / 1e4;
    let mut fails = Vec::new();
    if four_dp != 0.9999 {
        fails.push(format!("split probability {split:.6} does not read .9999"));
    }
    band(&mut fails, "panel B max ratio", max, 1.026, 0.001);
    if secs >= 1.0 {
        fails.push(format!("took {secs:.2}s"));
    }
    summarize(fails, format!("split probability {split:.6} (reads .9999), panel B max {max:.5}, {secs:.3}s (< 1s)"))
}

fn shuffled_half(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut t: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    for i in (1..n).rev() {
        t.swap(i, rng.random_range(0..=i));
    }
    t
}

fn spec(covariates: CovariateModel, variants: Vec<Variant>) -> AnalysisSpec {
    AnalysisSpec {
        covariates,
        primary: variants[0],
        variants,
        ..AnalysisSpec::default()
    }
}

fn criterion_8() -> Verdict {
    let mut fails = Vec::new();
    let mut ratios = Vec::new();

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let t = shuffled_half(&mut rng, n);
    let mut ds = Dataset::new(DesignSpec::simple(0.5), Vec::new());
    for (i, &tr) in t.iter().enumerate() {
        let e: f64 = rng.sample(StandardNormal);
        let y = if tr { 0.5 + 1.4 * e } else { e };
        ds.push(UnitInput::new(y, tr, if i % 4 == 0 { "a" } else { "b" }));
    }
    match analyze(&ds, &spec(CovariateModel::None, vec![Variant::DbExpectedPhi1, Variant::Hw])) {
        Ok(r) => {
            for e in &r.estimates {
                let ratio = e.se("hw").unwrap().se / e.se("db_expected_phi1").unwrap().se;
                ratios.push(format!("hw/db {ratio:.4}"));
                if !(0.995..=1.005).contains(&ratio) {
                    fails.push(format!("hw/db ratio {ratio:.5} in {}", e.subgroup));
                }
            }
        }
        Err(e) => fails.push(e.to_string()),
    }

    let m = 10_000;
    let t = shuffled_half(&mut rng, m);
    let mut ds = Dataset::new(DesignSpec::simple(0.5).with_structure(Structure::Clustered), Vec::new());
    let names: Vec<String> = (0..m).map(|j| format!("c{j}")).collect();
    for j in 0..m {
        let u: f64 = rng.sample(StandardNormal);
        for i in 0..4 {
            let e: f64 = rng.sample(StandardNormal);
            let y = 0.6 * u + e + if t[j] { 0.25 } else { 0.0 };
            ds.push(UnitInput::new(y, t[j], if i < 2 { "a" } else { "b" }).cluster(&names[j]));
        }
    }
    match analyze(&ds, &spec(CovariateModel::None, vec![Variant::DbActualPhi1, Variant::Crse])) {
        Ok(r) => {
            for e in &r.estimates {
                let ratio = e.se("crse").unwrap().se / e.se("db_actual_phi1").unwrap().se;
                ratios.push(format!("crse/db {ratio:.4}"));
                if !(0.99..=1.01).contains(&ratio) {
                    fails.push(format!("crse/db ratio {ratio:.5} in {}", e.subgroup));
                }
            }
        }
        Err(e) => fails.push(e.to_string()),
    }
    summarize(fails, ratios.join(", "))
}

fn criterion_9() -> Verdict {
    let mut fails = Vec::new();
    for m in 2..=50usize {
        let mf = m as f64;
        let want = 2.0 * (mf - 1.0);
        match bell_mccaffrey_df(mf, mf, 0.0, 0.5, 0.5, 0.5) {
            Ok(df) if df == want => {}
            other => fails.push(format!("m = {m}: closed form {other:?}")),
        }
        // The same value through a full analysis of m treated and m control units.
        let mut ds = Dataset::new(DesignSpec::simple(0.5), Vec::new());
        for i in 0..2 * m {
            let y = (i * 7 % 11) as f64 + if i % 3 == 0 { 0.5 } else { 0.0 };
            ds.push(UnitInput::new(y, i < m, "all"));
        }
        match analyze(&ds, &spec(CovariateModel::None, vec![Variant::BmDf])) {
            Ok(r) if r.estimates[0].se("bm_df").unwrap().df == want => {}
            Ok(r) => fails.push(format!("m = {m}: analysis df {}", r.estimates[0].se("bm_df").unwrap().df)),
            Err(e) => fails.push(format!("m = {m}: {e}")),
        }
    }
    summarize(fails, "df = 2(m - 1) exactly for m = 2..50".into())
}

fn same(a: &AnalysisResult, b: &AnalysisResult, what: &str, fails: &mut Vec<String>) {
    if a.estimates.len() != b.estimates.len() {
        fails.push(format!("{what}: subgroup count differs"));
        return;
    }
    for (x, y) in a.estimates.iter().zip(&b.estimates) {
        if x.tau_hat.to_bits() != y.tau_hat.to_bits() {
            fails.push(format!("{what}: tau_hat {} vs {}", x.tau_hat, y.tau_hat));
        }
        for (p, q) in x.se_menu.iter().zip(&y.se_menu) {
            if p.variance != q.variance || p.df != q.df {
                fails.push(format!("{what}: {} variance {} vs {}", p.variant, p.variance, q.variance));
            }
        }
    }
}

fn criterion_10() -> Verdict {
    let n = 60;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t = shuffled_half(&mut rng, n);
    let rows: Vec<(f64, bool, &str, Vec<f64>)> = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let e: f64 = rng.sample(StandardNormal);
            let y = 0.5 * x[0] - 0.2 * x[1] + e + if t[i] { 0.4 } else { 0.0 };
            (y, t[i], if i % 5 < 2 { "a" } else { "b" }, x)
        })
        .collect();
    let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
    let build = |structure: Structure| {
        let mut ds = Dataset::new(DesignSpec::simple(0.5).with_structure(structure), vec!["x1".into(), "x2".into()]);
        for (i, (y, tr, g, x)) in rows.iter().enumerate() {
            let u = UnitInput::new(*y, *tr, g).covariates(x.clone());
            ds.push(match structure {
                Structure::Blocked => u.block("only"),
                Structure::Clustered => u.cluster(&names[i]),
                _ => u,
            });
        }
        ds
    };
    let plain = build(Structure::Simple);
    let one_block = build(Structure::Blocked);
    let singletons = build(Structure::Clustered);
    let weighted = {
        let mut ds = Dataset::new(DesignSpec::simple(0.5), vec!["x1".into(), "x2".into()]);
        for (y, tr, g, x) in &rows {
            ds.push(UnitInput::new(*y, *tr, g).covariates(x.clone()).response(true, Some(1.0)));
        }
        ds
    };

    let db = vec![
        Variant::DbActualPhi1,
        Variant::DbExpectedPhi1,
        Variant::DbActualPhiadj,
        Variant::DbExpectedPhiadj,
        Variant::DbHeteroLb,
        Variant::BmDf,
    ];
    let mut fails = Vec::new();
    for cov in [CovariateModel::None, CovariateModel::Pooled] {
        let s = spec(cov, db.clone());
        let base = match analyze(&plain, &s) {
            Ok(r) => r,
            Err(e) => return verdict(false, e.to_string()),
        };
        for (what, ds) in [("one block", &one_block), ("singleton clusters", &singletons), ("unit weights", &weighted)] {
            match analyze(ds, &s) {
                Ok(r) => same(&base, &r, what, &mut fails),
                Err(e) => fails.push(format!("{what}: {e}")),
            }
        }
        // Singleton-cluster CRSE is HC1; only the df rule differs.
        let hw = analyze(&plain, &spec(cov, vec![Variant::DbActualPhi1, Variant::Hw]));
        let crse = analyze(&singletons, &spec(cov, vec![Variant::DbActualPhi1, Variant::Crse]));
        if let (Ok(hw), Ok(crse)) = (hw, crse) {
            for (u, c) in hw.estimates.iter().zip(&crse.estimates) {
                let (h, c) = (u.se("hw").unwrap(), c.se("crse").unwrap());
                if (h.variance - c.variance).abs() > 1e-14 * h.variance || c.df != (n - 1) as f64 {
                    fails.push(format!("crse {} vs hc1 {} (df {})", c.variance, h.variance, c.df));
                }
            }
        } else {
            fails.push("hw or crse analysis failed".into());
        }
    }
    summarize(fails, "one block, singleton clusters and unit weights reproduce the plain analysis exactly".into())
}

fn criterion_11(dir: &Path) -> Verdict {
    let cfg = dir.join("determinism.toml");
    std::fs::write(
        &cfg,
        "specs = [[40, 0.5, 2], [100, 0.25, 0]]\nn_draws = 2\nn_reps = 400\nseed = 7\nformat = \"csv\"\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.join(format!("threads{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_subgroup-ate"))
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads])
            .stderr(std::process::Stdio::null())
            .status()
            .unwrap();
        if !status.success() {
            return verdict(false, format!("simulate --threads {threads} exited with {status}"));
        }
        outputs.push(std::fs::read(out.join("simulation.csv")).unwrap());
    }
    verdict(
        outputs[0] == outputs[1],
        format!("--threads 1 and --threads 4 CSV reports byte-identical ({} bytes)", outputs[0].len()),
    )
}

fn main_table_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/main_table.toml")
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();

    let pops = populations();
    results.push((1, "exhaustive unbiasedness", criterion_1(&pops)));
    results.push((2, "exhaustive variance", criterion_2(&pops)));

    let mut cfg: SimulateConfig = config::load(&main_table_config()).expect("main table config");
    cfg.resolve().expect("main table config resolves");
    let start = Instant::now();
    match run_specs(&cfg, 0) {
        Ok(report) => {
            eprintln!("main table run: {:.1}s", start.elapsed().as_secs_f64());
            results.push((3, "simulation (100, .5, 0)", criterion_3(&report)));
            results.push((4, "simulation (40, .5, 2)", criterion_4(&report)));
            results.push((5, "F-test type-I", criterion_5(&report)));
            results.push((6, "finite-sample variance", criterion_6(&report, &cfg.specs)));
        }
        Err(f) => {
            for (c, name) in [(3, "simulation (100, .5, 0)"), (4, "simulation (40, .5, 2)"), (5, "F-test type-I"), (6, "finite-sample variance")] {
                results.push((c, name, verdict(false, format!("simulation failed: {}", f.error))));
            }
        }
    }

    results.push((7, "allocation analytics", criterion_7()));
    results.push((8, "asymptotic equivalence", criterion_8()));
    results.push((9, "Bell-McCaffrey df", criterion_9()));
    results.push((10, "collapse identities", criterion_10()));
    let dir = tempfile::TempDir::new().unwrap();
    results.push((11, "thread-count determinism", criterion_11(dir.path())));

    let mut failed = 0;
    for (c, name, v) in &results {
        println!("{} criterion {c:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, with the numbers behind
//! it. Always exits 0; the verdicts are the output.

use std::process::Command;
use std::time::Instant;

use chaindid::chain::LinkSet;
use chaindid::inference::{pretrend_test, substream};
use chaindid::simlab::{
    analytic_variances, monte_carlo, simulate_dgp, twfe_oracle, variance::cross_section_variance_direct, CovariateDist, DgpConfig, McEstimator,
    McReport, SimpleDesign,
};
use chaindid::{estimate_att, multiplier_bootstrap, EstimateOptions, Method, PanelDataset, PanelParts, Weighting};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

const DGP1_CHAINED_MEAN: [f64; 6] = [1.748, 1.500, 1.248, 1.000, 0.741, 0.499];
const DGP1_CHAINED_SD: [f64; 6] = [0.099, 0.164, 0.231, 0.300, 0.406, 0.586];
const DGP1_CS_SD: [f64; 6] = [0.199, 0.305, 0.355, 0.412, 0.521, 0.711];
const DGP2_CS_MEAN: [f64; 6] = [1.894, 1.774, 1.651, 1.522, 1.369, 1.209];

fn verdict(id: u8, pass: bool, what: &str) {
    println!("criterion {id:>2}: {} {what}", if pass { "PASS" } else { "FAIL" });
}

fn info(text: impl AsRef<str>) {
    println!("    {}", text.as_ref());
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn column(report: &McReport, est: McEstimator) -> Vec<&chaindid::simlab::McCell> {
    let mut cells: Vec<_> = report.cells.iter().filter(|c| c.estimator == est).collect();
    cells.sort_by_key(|c| c.event_time);
    cells
}

fn means(report: &McReport, est: McEstimator) -> Vec<f64> {
    column(report, est).iter().map(|c| c.mean).collect()
}

fn sds(report: &McReport, est: McEstimator) -> Vec<f64> {
    column(report, est).iter().map(|c| c.sd).collect()
}

/// Standardized distance of each mean from its target.
fn z_scores(report: &McReport, est: McEstimator, target: &[f64]) -> Vec<f64> {
    column(report, est).iter().zip(target).map(|(c, t)| (c.mean - t) / c.mc_se()).collect()
}

fn within(z: &[f64], bound: f64) -> bool {
    z.iter().all(|v| v.abs() <= bound)
}

fn rel_gap(got: &[f64], want: &[f64]) -> Vec<f64> {
    got.iter().zip(want).map(|(a, b)| a / b - 1.0).collect()
}

fn mc(cfg: &DgpConfig, estimators: &[McEstimator], seed: u64) -> McReport {
    monte_carlo(cfg, 1000, estimators, seed).expect("monte carlo runs")
}

fn criteria_one_and_two() {
    let start = Instant::now();
    let dgp1 = mc(&DgpConfig::preset(1).unwrap(), &[McEstimator::Chained, McEstimator::CrossSection], 101);
    let elapsed = start.elapsed().as_secs_f64();
    let z = z_scores(&dgp1, McEstimator::Chained, &DGP1_CHAINED_MEAN);
    let chained_sd = rel_gap(&sds(&dgp1, McEstimator::Chained), &DGP1_CHAINED_SD);
    let cs_sd = rel_gap(&sds(&dgp1, McEstimator::CrossSection), &DGP1_CS_SD);
    let ok = within(&z, 3.0) && chained_sd.iter().chain(&cs_sd).all(|g| g.abs() <= 0.15) && elapsed <= 600.0;
    verdict(1, ok, "rotating design without selection: chained means, chained and cross-section sds, runtime");
    info(format!("chained mean   {}  (z vs reference {})", fmt(&means(&dgp1, McEstimator::Chained)), fmt(&z)));
    info(format!("chained sd     {}  (relative gap {})", fmt(&sds(&dgp1, McEstimator::Chained)), fmt(&chained_sd)));
    info(format!("cross-sec sd   {}  (relative gap {})", fmt(&sds(&dgp1, McEstimator::CrossSection)), fmt(&cs_sd)));
    info(format!("1000 replications in {elapsed:.1}s on {} thread(s)", rayon::current_num_threads()));

    let cfg = DgpConfig::preset(2).unwrap();
    let dgp2 = mc(&cfg, &[McEstimator::Chained, McEstimator::CrossSection], 202);
    let cs = z_scores(&dgp2, McEstimator::CrossSection, &DGP2_CS_MEAN);
    let chained = z_scores(&dgp2, McEstimator::Chained, &dgp2.truth);
    verdict(2, within(&cs, 3.0) && within(&chained, 3.0), "selection on heterogeneity: cross-section bias pattern, chained unbiased");
    info(format!("truth          {}", fmt(&dgp2.truth)));
    info(format!("cross-sec mean {}  (z vs reference {})", fmt(&means(&dgp2, McEstimator::CrossSection)), fmt(&cs)));
    info(format!("chained mean   {}  (z vs truth {})", fmt(&means(&dgp2, McEstimator::Chained)), fmt(&chained)));
}

fn criterion_three() {
    let est = [McEstimator::GmmIdentity, McEstimator::GmmOptimal];
    let mut ok = true;
    let mut lines = Vec::new();
    for (dgp, seed) in [(3u8, 303), (4, 404)] {
        let report = mc(&DgpConfig::preset(dgp).unwrap(), &est, seed);
        let z = z_scores(&report, McEstimator::GmmOptimal, &report.truth);
        ok &= within(&z, 3.0);
        let (id, opt) = (sds(&report, McEstimator::GmmIdentity), sds(&report, McEstimator::GmmOptimal));
        lines.push(format!("design {dgp}: optimal mean {}  (z vs truth {})", fmt(&means(&report, McEstimator::GmmOptimal)), fmt(&z)));
        lines.push(format!("design {dgp}: optimal sd {}  identity sd {}", fmt(&opt), fmt(&id)));
        if dgp == 4 {
            // standard error of a sample sd under normality
            let se = opt[5] / (2.0 * (report.reps as f64 - 1.0)).sqrt();
            ok &= opt[5] <= id[5] + 3.0 * se;
            lines.push(format!("design 4 horizon 6: optimal {:.3} vs identity {:.3} + 3 x {:.4}", opt[5], id[5], se));
        }
    }
    verdict(3, ok, "stratified designs: optimal-weighted GMM unbiased, horizon-6 sd not above identity weighting");
    lines.iter().for_each(info);
}

/// Outcomes with unit levels, common shocks and cohort-specific effects.
fn random_panel(seed: u64, n: usize, periods: usize, cohorts: &[usize], two_consecutive: bool) -> PanelDataset {
    let mut rng = substream(seed, 0);
    let shocks: Vec<f64> = (0..periods).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut y, mut cohort) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let g = cohorts.get(i % (cohorts.len() + 1)).copied();
        let level = 3.0 * rng.random::<f64>();
        let start = rng.random_range(0..periods - 1);
        let row = (0..periods)
            .map(|t| {
                let label = t + 1;
                let effect = g.filter(|g| label >= *g).map_or(0.0, |g| 1.0 + 0.3 * (label - g) as f64);
                let e: f64 = StandardNormal.sample(&mut rng);
                let seen = !two_consecutive || t == start || t == start + 1;
                seen.then_some(level + shocks[t] + effect + 0.5 * e)
            })
            .collect();
        y.push(row);
        cohort.push(g);
    }
    PanelDataset::from_parts(PanelParts {
        units: (0..n).map(|i| i.to_string()).collect(),
        n_periods: periods,
        period_origin: 1,
        period_step: 1,
        y,
        cohort,
        covariates: vec![vec![]; n],
        ..PanelParts::default()
    })
    .unwrap()
}

fn with(method: Method) -> EstimateOptions {
    EstimateOptions { method, ..EstimateOptions::default() }
}

fn criterion_four() {
    let mut worst = 0.0f64;
    let mut cells = 0;
    for seed in 0..50 {
        let data = random_panel(seed, 100, 6, &[2, 3, 4, 5, 6], false);
        let chained = estimate_att(&data, &with(Method::Chained)).unwrap();
        let long = estimate_att(&data, &with(Method::Long)).unwrap();
        for c in &chained.cells {
            let a = c.result.as_ref().map_or(f64::NAN, |a| a.estimate);
            let b = long.get(c.g, c.t).map_or(f64::NAN, |b| b.estimate);
            worst = worst.max((a - b).abs()).max(if a.is_nan() || b.is_nan() { f64::INFINITY } else { 0.0 });
            cells += 1;
        }
    }
    verdict(4, worst <= 1e-10, "chained equals long on balanced panels");
    info(format!("50 panels, {cells} cells, max |chained - long| = {worst:.2e}"));
}

fn criterion_five() {
    let mut worst_chained = 0.0f64;
    let mut worst_long = 0.0f64;
    for seed in 0..50 {
        let periods = 3 + (seed % 4) as usize;
        let g = 2 + (seed as usize) % (periods - 1);
        for (two, method) in [(true, Method::Chained), (false, Method::Long)] {
            let data = random_panel(1000 + seed, 200, periods, &[g], two);
            let table = estimate_att(&data, &with(method)).unwrap();
            let regression = twfe_oracle(&data).unwrap();
            for c in &table.cells {
                let a = c.result.as_ref().map_or(f64::NAN, |a| a.estimate);
                let gap = (a - regression[&(c.g, c.t)]).abs();
                let gap = if gap.is_nan() { f64::INFINITY } else { gap };
                if two { worst_chained = worst_chained.max(gap) } else { worst_long = worst_long.max(gap) }
            }
        }
    }
    verdict(5, worst_chained <= 1e-8 && worst_long <= 1e-8, "event-study regression matches chained and long");
    info(format!("max gap: chained on two-period rotations {worst_chained:.2e}, long on balanced panels {worst_long:.2e}"));
}

fn criterion_six() {
    let gmm = |weighting, links| EstimateOptions { method: Method::ChainedGmm, weighting, links, ..EstimateOptions::default() };
    let (mut embed, mut square) = (0.0f64, 0.0f64);
    let mut all_square = true;
    for seed in 0..20 {
        let data = simulate_dgp(&DgpConfig::default(), 600 + seed).unwrap().sample;
        let chained = estimate_att(&data, &with(Method::Chained)).unwrap();
        let identity = estimate_att(&data, &gmm(Weighting::Identity, LinkSet::Minimal)).unwrap();
        let optimal = estimate_att(&data, &gmm(Weighting::Optimal, LinkSet::Minimal)).unwrap();
        let w = &identity.gmm.as_ref().unwrap().w;
        all_square &= w.nrows() == w.ncols();
        for c in &chained.cells {
            let a = c.result.as_ref().unwrap().estimate;
            embed = embed.max((a - identity.get(c.g, c.t).unwrap().estimate).abs());
            square = square.max((identity.get(c.g, c.t).unwrap().estimate - optimal.get(c.g, c.t).unwrap().estimate).abs());
        }
    }
    verdict(6, embed <= 1e-10 && square <= 1e-10 && all_square, "GMM on one-period links reproduces the chained sum");
    info(format!("20 samples: identity GMM vs chained {embed:.2e}, identity vs optimal on square systems {square:.2e}"));
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn criterion_seven() {
    let reps = 2000u64;
    let mut ok = true;
    let mut lines = Vec::new();
    for (k, rho) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        let design = SimpleDesign::new(5000, 3, 0.5, 0.2, rho, 1.0, 1.0);
        let t = design.t;
        let draws: Vec<[f64; 3]> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = substream(700 + k as u64, r);
                let rotating = design.simulate(&mut rng, false).unwrap();
                let balanced = design.simulate(&mut rng, true).unwrap();
                let at = |data: &PanelDataset, m| estimate_att(data, &with(m)).unwrap().get(2, t).unwrap().estimate;
                [at(&rotating, Method::Chained), at(&rotating, Method::CrossSection), at(&balanced, Method::Long)]
            })
            .collect();
        let scaled = |j: usize| design.n as f64 * variance(&draws.iter().map(|d| d[j]).collect::<Vec<_>>());
        let (cd, cs, ld) = (scaled(0), scaled(1), scaled(2));
        let formula = design.analytic();
        let direct = cross_section_variance_direct(rho, design.sigma_eta2, design.sigma_alpha2, design.sigma_eps1_2, design.p, design.q, t);
        let gaps = [cd / formula.var_cd - 1.0, cs / formula.var_cs - 1.0, ld / formula.var_ld - 1.0];
        ok &= gaps.iter().all(|g| g.abs() <= 0.10);
        lines.push(format!(
            "rho {rho}: n*var chained {cd:.2} vs {:.2} ({:+.1}%), cross-section {cs:.2} vs {:.2} ({:+.1}%), long {ld:.2} vs {:.2} ({:+.1}%)",
            formula.var_cd,
            100.0 * gaps[0],
            formula.var_cs,
            100.0 * gaps[1],
            formula.var_ld,
            100.0 * gaps[2]
        ));
        lines.push(format!("rho {rho}: cross-section against the direct derivation {direct:.2} ({:+.1}%)", 100.0 * (cs / direct - 1.0)));
    }
    let walk: Vec<_> = (2..8).map(|t| analytic_variances(1.0, 1.0, 1.0, 1.0, 0.5, 0.1, t)).collect();
    let equal = walk.iter().all(|v| (v.var_cd - v.var_ld).abs() <= 1e-12 * v.var_ld);
    ok &= equal;
    verdict(7, ok, "one-cohort design: Monte Carlo variances match the closed forms within 10%");
    lines.iter().for_each(info);
    info(format!("random walk: chained and long closed forms equal for t = 2..7: {equal}"));
}

fn criterion_eight() {
    let (cells, n, outer) = (6, 500, 500u64);
    let covered = (0..outer)
        .into_par_iter()
        .filter(|&r| {
            let mut rng = substream(800, r);
            let mut estimates = Vec::with_capacity(cells);
            let rows: Vec<Vec<f64>> = (0..cells)
                .map(|_| {
                    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let m = x.iter().sum::<f64>() / n as f64;
                    estimates.push(m);
                    x.iter().map(|v| v - m).collect()
                })
                .collect();
            let bands = multiplier_bootstrap(&rows, &estimates, 1000, 0.05, r).unwrap();
            (0..cells).all(|k| bands.lower[k] <= 0.0 && 0.0 <= bands.upper[k])
        })
        .count();
    let coverage = covered as f64 / outer as f64;

    let reps = 500u64;
    let rejected = (0..reps)
        .into_par_iter()
        .filter(|&r| {
            let sample = simulate_dgp(&DgpConfig::default(), 8000 + r).unwrap().sample;
            let table = estimate_att(&sample, &EstimateOptions::default()).unwrap();
            pretrend_test(&table.placebos, 1000, 0.05, r).unwrap().reject
        })
        .count();
    let size = rejected as f64 / reps as f64;
    let ok = (0.93..=0.97).contains(&coverage) && (size - 0.05).abs() <= 0.03;
    verdict(8, ok, "bootstrap bands: simultaneous coverage and pre-trend test size");
    info(format!("coverage of 6-cell 95% bands over {outer} replications: {coverage:.3}"));
    info(format!("pre-trend rejection rate at 5% over {reps} replications: {size:.3}"));
}

fn criterion_nine() {
    let cfg = DgpConfig {
        covariate: CovariateDist::Binary,
        x_sampling_slope: 0.5,
        x_effect_slope: 0.5,
        include_unsampled: true,
        ..DgpConfig::default()
    };
    let report = mc(&cfg, &[McEstimator::Chained, McEstimator::ChainedMarX], 909);
    let plain = z_scores(&report, McEstimator::Chained, &report.truth);
    let adjusted = z_scores(&report, McEstimator::ChainedMarX, &report.truth);
    let biased = plain.iter().any(|z| z.abs() >= 2.0);
    verdict(9, biased && within(&adjusted, 3.0), "sampling on a covariate: reweighted chained estimates recover the truth");
    info(format!("truth          {}", fmt(&report.truth)));
    info(format!("unadjusted     {}  (z vs truth {})", fmt(&means(&report, McEstimator::Chained)), fmt(&plain)));
    info(format!("reweighted     {}  (z vs truth {})", fmt(&means(&report, McEstimator::ChainedMarX)), fmt(&adjusted)));
}

fn criterion_ten() {
    let dir = std::env::temp_dir().join(format!("chaindid-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let bin = env!("CARGO_BIN_EXE_chaindid");
    let run = |threads: &str, args: &[&str]| {
        let out = Command::new(bin).env("CHAINDID_THREADS", threads).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let raw = dir.join("raw.csv");
    let raw_s = raw.to_str().unwrap();
    run("1", &["simulate", "--dgp", "1", "--seed", "5", "--out", raw_s]);
    // drop the provenance columns so the file reads as a plain panel
    let text = std::fs::read_to_string(&raw).unwrap();
    let panel: String = text
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            format!("{}\n", cols[..cols.len() - 2].join(","))
        })
        .collect();
    let csv = dir.join("panel.csv");
    std::fs::write(&csv, panel).unwrap();
    let csv_s = csv.to_str().unwrap();

    let mc_args = ["montecarlo", "--dgp", "2", "--reps", "200", "--seed", "10"];
    let est_args = ["estimate", csv_s, "--bootstrap", "1000", "--seed", "10"];
    let mut same = true;
    for args in [&mc_args[..], &est_args[..]] {
        let first = run("1", args);
        same &= [run("1", args), run("2", args), run("4", args)].iter().all(|o| *o == first);
    }
    std::fs::remove_dir_all(&dir).ok();
    verdict(10, same, "montecarlo and bootstrapped estimate output identical across runs and thread counts");
    info("compared repeated runs at 1 thread and runs at 2 and 4 threads, byte for byte");
}

fn main() {
    // `cargo test -- --list` and filters pass arguments; run only on a plain invocation
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    criteria_one_and_two();
    criterion_three();
    criterion_four();
    criterion_five();
    criterion_six();
    criterion_seven();
    criterion_eight();
    criterion_nine();
    criterion_ten();
    println!("acceptance run finished in {:.0}s", start.elapsed().as_secs_f64());
}

//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines are always printed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};
use xvfl::dataset::{
    apply_alignment, apply_missing, build_vertical, AlignmentPlan, SplitSpec, VerticalDataset,
    SENTINEL,
};
use xvfl::experiments::convergence::OptimizerKind;
use xvfl::experiments::{
    run_convergence_study, run_imbalance, run_missing_sweep, ConvergenceSpec, Method, SweepSpec,
};
use xvfl::losses::{
    decision_loss_2client, decision_loss_k, total_loss, ClientSet, LossConfig, LossOutput, TermKind,
};
use xvfl::models::{merge_partial, ArchConfig, ModelBundle};
use xvfl::numkit::{finite_diff_grad, max_relative_error, Matrix};
use xvfl::optim::{
    estimate_all, estimate_beta, estimator_error, run, theorem_defaults, Branch, NoisyQuadratic,
    OptimizerConfig, PageConfig, SgdConfig,
};
use xvfl::rng;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_block(n: usize, d: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, "acceptance/block");
    Matrix::from_vec(
        n,
        d,
        (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect(),
    )
    .unwrap()
}

/// `n` samples, the first `aligned` of them aligned, the rest owned round-robin.
fn mixed_batch(
    dims: &[usize],
    n: usize,
    aligned: usize,
    missing: f64,
    seed: u64,
) -> VerticalDataset {
    let k = dims.len();
    let blocks = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| random_block(n, d, seed * 31 + i as u64))
        .collect();
    let labels = (0..n).map(|s| s % 3).collect();
    let data = VerticalDataset::aligned_from_blocks(blocks, labels, 3).unwrap();
    let plan = AlignmentPlan {
        aligned: (0..n).map(|s| s < aligned).collect(),
        owner: (0..n)
            .map(|s| (s >= aligned).then(|| (s - aligned) % k))
            .collect(),
    };
    apply_missing(apply_alignment(data, &plan).unwrap(), missing, seed).unwrap()
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 3,
        bottom_hidden: vec![4],
        top_hidden: vec![4],
        xcom_hidden: None,
    }
}

fn gradient_exactness() -> Outcome {
    let cfg = LossConfig {
        lambda1: 0.5,
        lambda2: 0.3,
        xcom_self_input: true,
    };
    let mut worst: f64 = 0.0;
    for (dims, seed) in [(vec![3, 2], 1u64), (vec![2, 3, 2], 2)] {
        let data = mixed_batch(&dims, 8, 3, 0.5, seed);
        let bundle = ModelBundle::new(&tiny_arch(), &dims, 3, seed).unwrap();
        // jitter so zero biases do not sit on a ReLU kink
        let mut r = rng::stream(seed, "acceptance/jitter");
        let theta: Vec<f64> = bundle
            .flatten()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + 0.1 * z
            })
            .collect();
        let at = |t: &[f64]| bundle.with_params(t).unwrap();
        let analytic = total_loss(&at(&theta), &data, &cfg).unwrap().flat_grad();
        // h = 1e-6 loses ~1e-10 to cancellation, too much for entries near 1e-6
        let numeric = finite_diff_grad(
            |t: &[f64]| total_loss(&at(t), &data, &cfg).unwrap().value(),
            &theta,
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    outcome(
        worst <= 1e-4,
        format!("max relative error {worst:.2e} (k=2, k=3)"),
    )
}

fn formulation_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let d0 = 1 + (i % 4) as usize;
        let d1 = 1 + (i % 3) as usize;
        let missing = [0.0, 0.3, 0.5, 0.9, 1.0][(i % 5) as usize];
        let data = mixed_batch(
            &[d0, d1],
            6 + (i % 5) as usize,
            1 + (i % 3) as usize,
            missing,
            100 + i,
        );
        let bundle = ModelBundle::new(&tiny_arch(), &[d0, d1], 3, 1000 + i).unwrap();
        let a = decision_loss_2client(&bundle, &data).unwrap().value();
        let b = decision_loss_k(&bundle, &data).unwrap().value();
        worst = worst.max((a - b).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max |difference| {worst:.2e} over 100 instances"),
    )
}

/// A sample pattern: aligned, or non-aligned with the given full clients.
enum Pattern {
    Aligned,
    Full(&'static [usize]),
}

fn pattern_batch(k: usize, patterns: &[Pattern]) -> VerticalDataset {
    let n = patterns.len();
    let d = 2;
    let blocks = (0..k).map(|i| random_block(n, d, 500 + i as u64)).collect();
    let labels = (0..n).map(|s| s % 2).collect();
    let mut data = VerticalDataset::aligned_from_blocks(blocks, labels, 2).unwrap();
    for (s, p) in patterns.iter().enumerate() {
        if let Pattern::Full(full) = p {
            data.aligned[s] = false;
            data.owner[s] = Some(full[0]);
            for i in (0..k).filter(|i| !full.contains(i)) {
                data.masks[i][s * d] = true;
                data.blocks[i].set(s, 0, SENTINEL);
            }
        }
    }
    data
}

fn dec(real: &[usize], recon: &[usize]) -> TermKind {
    TermKind::Decision {
        real: ClientSet::from_clients(real.iter().copied()),
        recon: ClientSet::from_clients(recon.iter().copied()),
    }
}

fn table_matches(out: &LossOutput, expected: &[Vec<TermKind>]) -> Result<(), String> {
    let mut want: BTreeMap<TermKind, usize> = BTreeMap::new();
    for kinds in expected {
        for k in kinds {
            *want.entry(*k).or_default() += 1;
        }
    }
    let got: BTreeMap<TermKind, usize> = out.terms.iter().map(|t| (t.kind, t.rows)).collect();
    if got == want {
        Ok(())
    } else {
        Err(format!("expected {want:?}, got {got:?}"))
    }
}

fn activation_table() -> Outcome {
    let two = pattern_batch(
        2,
        &[
            Pattern::Aligned,
            Pattern::Full(&[0]),
            Pattern::Full(&[1]),
            Pattern::Full(&[0]),
        ],
    );
    let two_expected = vec![
        vec![
            dec(&[0], &[]),
            dec(&[1], &[]),
            dec(&[0, 1], &[]),
            dec(&[0], &[1]),
            dec(&[1], &[0]),
        ],
        vec![dec(&[0], &[]), dec(&[0], &[1])],
        vec![dec(&[1], &[]), dec(&[1], &[0])],
        vec![dec(&[0], &[]), dec(&[0], &[1])],
    ];
    let four = pattern_batch(
        4,
        &[
            Pattern::Aligned,
            Pattern::Full(&[2]),
            Pattern::Full(&[0, 1]),
            Pattern::Full(&[0, 1, 2, 3]),
        ],
    );
    let aligned4: Vec<TermKind> = (0..4)
        .map(|i| dec(&[i], &[]))
        .chain([dec(&[0, 1, 2, 3], &[])])
        .chain((0..4).map(|i| {
            let rest: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            TermKind::Decision {
                real: ClientSet::from_clients(rest),
                recon: ClientSet::single(i),
            }
        }))
        .collect();
    let four_expected = vec![
        aligned4,
        vec![dec(&[2], &[]), dec(&[2], &[0, 1, 3])],
        vec![
            dec(&[0], &[]),
            dec(&[1], &[]),
            dec(&[0, 1], &[]),
            dec(&[0, 1], &[2, 3]),
        ],
        vec![
            dec(&[0], &[]),
            dec(&[1], &[]),
            dec(&[2], &[]),
            dec(&[3], &[]),
            dec(&[0, 1, 2, 3], &[]),
        ],
    ];
    let bundle2 = ModelBundle::new(&tiny_arch(), &[2, 2], 2, 1).unwrap();
    let bundle4 = ModelBundle::new(&tiny_arch(), &[2; 4], 2, 1).unwrap();
    let checks = [
        (
            "k=2 two-client rules",
            table_matches(
                &decision_loss_2client(&bundle2, &two).unwrap(),
                &two_expected,
            ),
        ),
        (
            "k=2 general rules",
            table_matches(&decision_loss_k(&bundle2, &two).unwrap(), &two_expected),
        ),
        (
            "k=4",
            table_matches(&decision_loss_k(&bundle4, &four).unwrap(), &four_expected),
        ),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "aligned, case-1, case-2, and k=4 tables exact".to_string()
        } else {
            failed.join("; ")
        },
    )
}

fn page_identities() -> Outcome {
    let q = NoisyQuadratic::log_spaced(8, -0.5, 1.0, 0.05);
    let theta0 = vec![1.0; 8];
    let mut sgd_path = Vec::new();
    let mut page_path = Vec::new();
    let sgd = OptimizerConfig::Sgd(SgdConfig {
        eta: 0.2,
        batch: 16,
    });
    let page = OptimizerConfig::Page(PageConfig {
        eta: 0.2,
        p: 1.0,
        b: 16,
        b_prime: 4,
    });
    run(&q, &sgd, &theta0, 500, 7, |_, t, g| {
        sgd_path.push((t.to_vec(), g.to_vec()));
        Ok(())
    })
    .unwrap();
    run(&q, &page, &theta0, 500, 7, |_, t, g| {
        page_path.push((t.to_vec(), g.to_vec()));
        Ok(())
    })
    .unwrap();
    let bitwise = sgd_path == page_path && sgd_path.len() == 500;

    let (eps, sigma) = (0.05, 0.8);
    let d = theorem_defaults(eps, 1.0, sigma, 1.0, 100).unwrap().page;
    let b_rule = (2.0 * sigma * sigma / (eps * eps)).ceil() as usize;
    let auto_ok = d.b == b_rule && d.p == d.b_prime as f64 / (d.b + d.b_prime) as f64;

    let cfg = PageConfig::auto(0.1, 60, 8);
    let traj = run(
        &q,
        &OptimizerConfig::Page(cfg),
        &theta0,
        10_000,
        3,
        |_, _, _| Ok(()),
    )
    .unwrap();
    let per_step =
        traj.records.iter().map(|r| r.grad_evals).sum::<usize>() as f64 / traj.records.len() as f64;
    let rel = (per_step - cfg.expected_evals()).abs() / cfg.expected_evals();
    let refreshes = traj
        .records
        .iter()
        .filter(|r| r.branch == Branch::Refresh)
        .count();
    outcome(
        bitwise && auto_ok && rel <= 0.05,
        format!(
            "p=1 bitwise {bitwise}; b={} (rule {b_rule}), p=b'/(b+b') {auto_ok}; evals/step {per_step:.3} vs {:.3} (rel {rel:.3}, {refreshes} refreshes)",
            d.b,
            cfg.expected_evals()
        ),
    )
}

fn variance_reduction() -> Outcome {
    let q = NoisyQuadratic::log_spaced(10, -0.5, 1.0, 0.05);
    let theta0 = vec![1.0; 10];
    let beta = estimate_beta(&q, &theta0, 32, 0.1, 0).unwrap();
    let est = estimate_all(&q, &theta0, 1.0 / beta, 0).unwrap();
    let page = theorem_defaults(
        1e-3f64.sqrt(),
        est.beta_hat,
        est.sigma_hat(),
        est.delta0_hat,
        1000,
    )
    .unwrap()
    .page;
    let sgd = SgdConfig {
        eta: page.eta,
        batch: page.b_prime,
    };
    let (mut e_page, mut e_sgd) = (0.0, 0.0);
    for seed in 0..20 {
        e_page +=
            estimator_error(&q, &OptimizerConfig::Page(page), &theta0, 1000, seed).unwrap() / 20.0;
        e_sgd +=
            estimator_error(&q, &OptimizerConfig::Sgd(sgd), &theta0, 1000, seed).unwrap() / 20.0;
    }
    let ratio = e_page / e_sgd;
    outcome(
        ratio <= 0.7,
        format!(
            "PAGE {e_page:.3e} vs SGD(b'={}) {e_sgd:.3e}, ratio {ratio:.3} (b={}, p={:.4})",
            page.b_prime, page.b, page.p
        ),
    )
}

fn convergence_slopes() -> Outcome {
    let r = run_convergence_study(&ConvergenceSpec::default(), 0, "acceptance").unwrap();
    let sgd = r.slope(OptimizerKind::Sgd).unwrap_or(f64::NAN);
    let page = r.slope(OptimizerKind::Page).unwrap_or(f64::NAN);
    let ratio = r.eval_ratio.unwrap_or(f64::INFINITY);
    outcome(
        (-0.7..=-0.3).contains(&sgd) && page <= -0.8 && ratio <= 0.5,
        format!(
            "SGD slope {sgd:.3}, PAGE slope {page:.3}, PAGE/SGD evaluations to 1e-3 {ratio:.3}"
        ),
    )
}

fn directional_superiority() -> Outcome {
    let mut spec = SweepSpec::default();
    spec.missing.rates = vec![0.9];
    let out = run_missing_sweep(&spec, None).unwrap();
    let mean = |m: Method, metric: &str| {
        let v: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.method == m && r.metric == metric && r.client.is_none())
            .map(|r| r.value)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let x_ind = mean(Method::Xvfl, "independent");
    let s_ind = mean(Method::Standalone, "independent");
    let x_gap = mean(Method::Xvfl, "gap");
    let s_gap = mean(Method::Standalone, "gap");
    let v_gap = mean(Method::VanillaVfl, "gap");
    let a = x_ind - s_ind >= 0.05;
    let b = x_gap <= 0.5 * s_gap && x_gap <= 0.5 * v_gap;
    outcome(
        a && b && !out.diverged,
        format!(
            "independent X-VFL {x_ind:.3} vs standalone {s_ind:.3} (+{:.1} pts); gap X-VFL {x_gap:.3}, standalone {s_gap:.3}, vanilla {v_gap:.3}",
            100.0 * (x_ind - s_ind)
        ),
    )
}

fn imbalance_gap() -> Outcome {
    let spec = SweepSpec {
        methods: vec![Method::Xvfl, Method::Standalone],
        ..SweepSpec::default()
    };
    let out = run_imbalance(&spec, None).unwrap();
    let mean_abs = |m: Method| {
        let v: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.method == m && r.metric == "ab_gap")
            .map(|r| r.value.abs())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let x = mean_abs(Method::Xvfl);
    let s = mean_abs(Method::Standalone);
    outcome(
        x <= 0.5 * s && !out.diverged,
        format!(
            "mean |A-B| X-VFL {x:.4} vs standalone {s:.4} (ratio {:.3})",
            x / s
        ),
    )
}

fn merge_and_masking() -> Outcome {
    let original = random_block(5, 4, 1);
    let recon = random_block(5, 4, 2);
    let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let none = merge_partial(&original, &recon, &[false; 20]).unwrap();
    let all = merge_partial(&original, &recon, &[true; 20]).unwrap();
    let mask: Vec<bool> = (0..20).map(|j| j % 3 == 0).collect();
    let mixed = merge_partial(&original, &recon, &mask).unwrap();
    let overwrite = mixed
        .data()
        .iter()
        .zip(&mask)
        .enumerate()
        .all(|(j, (v, &m))| {
            v.to_bits()
                == if m {
                    recon.data()[j]
                } else {
                    original.data()[j]
                }
                .to_bits()
        });
    let merge_ok = bits(&none) == bits(&original) && bits(&all) == bits(&recon) && overwrite;

    let x = random_block(60, 11, 3);
    let labels: Vec<usize> = (0..60).map(|s| s % 3).collect();
    let mut violations = 0;
    for &rate in &xvfl::experiments::DEFAULT_MISSING_RATES {
        let split = SplitSpec {
            overlap_ratio: 0.3,
            missing_rate: rate,
            imbalance: None,
            seed: 9,
        };
        let data = build_vertical(&x, labels.clone(), 3, &[0.5, 0.5], &split).unwrap();
        for s in 0..data.n() {
            for i in 0..data.k() {
                let d = data.blocks[i].cols();
                let want = match data.owner[s] {
                    Some(o) if o != i => (rate * d as f64).round_ties_even() as usize,
                    _ => 0,
                };
                if data.masked_count(i, s) != want {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        merge_ok && violations == 0,
        format!(
            "merge laws bitwise {merge_ok}; mask cardinality violations {violations} over 7 rates"
        ),
    )
}

fn cli(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xvfl"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let sweep = [
        "run",
        "missing-sweep",
        "--seed",
        "11",
        "--set",
        "steps=150",
        "--set",
        "replicates=2",
        "--set",
        "data.n=400",
        "--set",
        "missing.rates=[0.0,0.9]",
    ];
    let conv = [
        "run",
        "convergence",
        "--seed",
        "3",
        "--set",
        "convergence.t_grid=[64,128,256]",
        "--set",
        "convergence.replicates=3",
        "--set",
        "convergence.reach_max=4096",
    ];
    let mut mismatched = Vec::new();
    for (name, args, files) in [
        (
            "missing-sweep",
            &sweep[..],
            ["missing.csv", "missing_summary.json", "manifest.json"],
        ),
        (
            "convergence",
            &conv[..],
            [
                "convergence.csv",
                "convergence_summary.json",
                "manifest.json",
            ],
        ),
    ] {
        let a = dir.path().join(format!("{name}_a"));
        let b = dir.path().join(format!("{name}_b"));
        let ra = cli(args, &a);
        let mut with_threads = args.to_vec();
        with_threads.extend(["--threads", "2"]);
        let rb = cli(&with_threads, &b);
        if !ra.status.success() || !rb.status.success() {
            mismatched.push(format!(
                "{name} exited {:?}/{:?}",
                ra.status.code(),
                rb.status.code()
            ));
            continue;
        }
        for f in files {
            let same = std::fs::read(a.join(f))
                .ok()
                .zip(std::fs::read(b.join(f)).ok())
                .is_some_and(|(x, y)| x == y);
            if !same {
                mismatched.push(format!("{name}/{f}"));
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "missing-sweep and convergence outputs byte-identical across reruns".to_string()
        } else {
            format!("differs: {}", mismatched.join(", "))
        },
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        (
            "gradient exactness",
            Duration::from_secs(10),
            gradient_exactness,
        ),
        (
            "formulation equivalence",
            Duration::from_secs(5),
            formulation_equivalence,
        ),
        (
            "activation-rule table",
            Duration::from_secs(5),
            activation_table,
        ),
        ("PAGE identities", Duration::from_secs(30), page_identities),
        (
            "variance reduction",
            Duration::from_secs(60),
            variance_reduction,
        ),
        (
            "convergence slopes",
            Duration::from_secs(600),
            convergence_slopes,
        ),
        (
            "directional superiority",
            Duration::from_secs(900),
            directional_superiority,
        ),
        ("imbalance gap", Duration::from_secs(600), imbalance_gap),
        (
            "merge/masking invariants",
            Duration::from_secs(5),
            merge_and_masking,
        ),
        ("determinism", Duration::from_secs(120), determinism),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let o = result.unwrap_or_else(|_| outcome(false, "panicked"));
        let in_time = elapsed <= *budget;
        let pass = o.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {} [{:.1}s of {}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

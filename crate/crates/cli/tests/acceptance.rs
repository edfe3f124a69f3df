//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Criterion 7 trains the reference model twice (with and without conditioning)
//! and dominates the runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;

use speccond::attention::{assemble_jacobian, fd_jacobian, AttentionParams, Projection};
use speccond::bounds::evaluate_bound;
use speccond::conditioning::{diag_shift_correction, shift_precondition_holds, svd_cap_correction, Conditioning};
use speccond::harness::{flops_estimate, flops_overhead, train, RunSpec, TrainRun};
use speccond::io::{metrics_csv, parse_config, read_metrics_csv};
use speccond::linalg::{commutation_matrix, kron, singular_values, spectral_record, vec, Matrix, RecordTag};
use speccond::rng::{derived, gaussian_matrix};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// N ∈ 2..=6, D ∈ 1..=6, d ∈ 1..=4, every entry standard normal scaled by 1/√D.
fn instance(seed: u64, stream: u64) -> (Matrix, AttentionParams) {
    let mut rng = derived(seed, stream);
    let (n, dm, dh) = (
        rng.random_range(2..=6),
        rng.random_range(1..=6),
        rng.random_range(1..=4),
    );
    let std = 1.0 / (dm as f64).sqrt();
    let x = gaussian_matrix(&mut rng, n, dm, std).unwrap();
    let mut w = || gaussian_matrix(&mut rng, dm, dh, std).unwrap();
    let p = AttentionParams::new(w(), w(), w()).unwrap();
    (x, p)
}

fn random_weight(seed: u64, stream: u64) -> Matrix {
    let mut rng = derived(seed, stream);
    let (r, c) = (rng.random_range(1..=32), rng.random_range(1..=32));
    gaussian_matrix(&mut rng, r, c, 1.0 / (r as f64).sqrt()).unwrap()
}

fn kappa_of(s: &[f64]) -> f64 {
    let min = s[s.len() - 1];
    if min > 0.0 {
        s[0] / min
    } else {
        f64::INFINITY
    }
}

fn jacobian_correctness() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..100 {
        let (x, p) = instance(seed, 10);
        let blocks = assemble_jacobian(&x, &p).unwrap();
        for (k, (which, analytic)) in [
            (Projection::Query, &blocks.a_q),
            (Projection::Key, &blocks.a_k),
            (Projection::Value, &blocks.a_v),
        ]
        .into_iter()
        .enumerate()
        {
            let fd = fd_jacobian(&x, &p, which, 1e-5).unwrap();
            let r = analytic.rel_frobenius_diff(&fd, 1e-12).unwrap_or(f64::INFINITY);
            worst[k] = worst[k].max(r);
        }
    }
    let passed = worst[0] <= 1e-6 && worst[1] <= 1e-6 && worst[2] <= 1e-9;
    outcome(
        passed,
        format!(
            "100 instances, worst rel. error Q {:.2e} K {:.2e} V {:.2e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn svd_cap_guarantee() -> Outcome {
    let (mut worst_kappa, mut worst_shift) = (0.0f64, 0.0f64);
    for seed in 0..1000 {
        let w = random_weight(seed, 20);
        let wc = w.add(&svd_cap_correction(&w).unwrap()).unwrap();
        let s = singular_values(&w).unwrap();
        let sc = singular_values(&wc).unwrap();
        worst_kappa = worst_kappa.max(kappa_of(&sc));
        for (a, b) in s.iter().zip(&sc) {
            worst_shift = worst_shift.max((a + s[0] - b).abs());
        }
    }
    outcome(
        worst_kappa <= 2.0 + 1e-9 && worst_shift <= 1e-9,
        format!("1000 matrices, max κ(W+C) {worst_kappa:.12}, max spectrum error {worst_shift:.2e}"),
    )
}

fn diag_shift_reduction() -> Outcome {
    let (mut held, mut violations, mut arithmetic_errors) = (0, 0, 0);
    let mut seed = 0u64;
    while held < 1000 && seed < 100_000 {
        let w = random_weight(seed, 21);
        seed += 1;
        let pre = shift_precondition_holds(&w, 10.0).unwrap();
        let s = singular_values(&w).unwrap();
        let (smax, smin) = (s[0], s[s.len() - 1]);
        let rhs_ok = pre.rhs.to_bits() == spectral_record(&w, RecordTag::default()).unwrap().kappa.to_bits()
            && pre.sigma_max.to_bits() == smax.to_bits();
        let lhs_ok = 10.0_f64.partial_cmp(&smin) != Some(std::cmp::Ordering::Greater)
            || pre.lhs.to_bits() == ((smax + 10.0) / (10.0 - smin)).to_bits();
        let holds_ok = pre.holds == (10.0 > smin && pre.lhs <= pre.rhs);
        if !(rhs_ok && lhs_ok && holds_ok) {
            arithmetic_errors += 1;
        }
        if !pre.holds {
            continue;
        }
        held += 1;
        let shifted = w.add(&diag_shift_correction(w.shape(), 10.0).unwrap()).unwrap();
        if kappa_of(&singular_values(&shifted).unwrap()) >= kappa_of(&s) {
            violations += 1;
        }
    }
    outcome(
        held == 1000 && violations == 0 && arithmetic_errors == 0,
        format!("{held} precondition-holding draws out of {seed}, {violations} violations, {arithmetic_errors} arithmetic mismatches"),
    )
}

fn bound_validity() -> Outcome {
    let (mut full, mut violations, mut worst) = (0, 0, 0.0f64);
    let mut seed = 0u64;
    while full < 200 && seed < 10_000 {
        let (x, p) = instance(seed, 30);
        seed += 1;
        let r = evaluate_bound(&x, &p, RecordTag::default()).unwrap();
        if !r.full_rank || !r.bound_value.is_finite() {
            continue;
        }
        full += 1;
        let s = singular_values(&assemble_jacobian(&x, &p).unwrap().stacked).unwrap();
        let kappa_j = kappa_of(&s);
        let ratio = r.kappa_j_effective.max(kappa_j) / r.bound_value;
        worst = worst.max(ratio);
        if ratio > 1.0 {
            violations += 1;
        }
    }
    outcome(
        full == 200 && violations == 0,
        format!("{full} full-rank instances, worst κ(J)/bound {worst:.3}, {violations} violations"),
    )
}

fn vectorization_calculus() -> Outcome {
    let mut rng = derived(2024, 50);
    let (mut worst_vec, mut transpose_failures, mut involution_failures) = (0.0f64, 0, 0);
    for _ in 0..500 {
        let [m, n, p, q] = [(); 4].map(|_| rng.random_range(1..=5usize));
        let a = gaussian_matrix(&mut rng, m, n, 1.0).unwrap();
        let c = gaussian_matrix(&mut rng, n, p, 1.0).unwrap();
        let b = gaussian_matrix(&mut rng, p, q, 1.0).unwrap();
        let lhs = vec(&a.matmul(&c).unwrap().matmul(&b).unwrap());
        let rhs = kron(&b.transpose(), &a).unwrap().matmul(&vec(&c)).unwrap();
        worst_vec = worst_vec.max(lhs.max_abs_diff(&rhs).unwrap() / (1.0 + lhs.max_abs()));

        let t = commutation_matrix(m, n).unwrap();
        let dense = t.to_dense().matmul(&vec(&a)).unwrap();
        if dense.max_abs_diff(&vec(&a.transpose())).unwrap() > 1e-12
            || t.apply(&vec(&a)).unwrap() != vec(&a.transpose())
        {
            transpose_failures += 1;
        }
        let back = commutation_matrix(n, m).unwrap().to_dense();
        if back.matmul(&t.to_dense()).unwrap() != Matrix::identity(m * n).unwrap() {
            involution_failures += 1;
        }
    }
    outcome(
        worst_vec <= 1e-12 && transpose_failures == 0 && involution_failures == 0,
        format!(
            "500 shapes, vec/kron residual {worst_vec:.2e}, {transpose_failures} transpose and {involution_failures} involution failures"
        ),
    )
}

fn flops_accounting() -> Outcome {
    let mut bad = 0;
    let mut cases = 0;
    for n in [1u64, 2, 7, 16, 197] {
        for dm in [1u64, 3, 32, 768] {
            for dh in [1u64, 2, 16, 64] {
                cases += 1;
                let plain = flops_estimate(n, dm, dh, false).projection_flops;
                let cond = flops_estimate(n, dm, dh, true).projection_flops;
                let ratio = flops_overhead(n, dm, dh);
                if plain != 6 * n * dm * dh || cond != 6 * n * dm * dh + 3 * n * dh || ratio != 1.0 / (2.0 * dm as f64)
                {
                    bad += 1;
                }
            }
        }
    }
    let table =
        flops_estimate(2, 3, 1, false).projection_flops == 36 && flops_estimate(2, 3, 1, true).projection_flops == 42;
    outcome(bad == 0 && table, format!("{cases} grid points, {bad} mismatches"))
}

struct ReferenceRuns {
    conditioned: TrainRun,
    plain: TrainRun,
}

fn reference_runs() -> ReferenceRuns {
    let text = fs::read_to_string(workspace_root().join("configs/reference.toml")).unwrap();
    let spec = parse_config(&text).unwrap();
    assert_eq!(
        spec,
        RunSpec::reference(),
        "configs/reference.toml drifted from the built-in reference"
    );
    let mut plain_spec = spec.clone();
    plain_spec.config.conditioning = Conditioning::Off;
    ReferenceRuns {
        conditioned: train(TrainRun::new(spec)).unwrap(),
        plain: train(TrainRun::new(plain_spec)).unwrap(),
    }
}

fn trajectory_shape(runs: &ReferenceRuns) -> Outcome {
    let mut dominated = true;
    for row in &runs.conditioned.metrics {
        let Some(p) = &row.spectral else {
            dominated = false;
            continue;
        };
        dominated &= (0..3).all(|r| p.corrected[r].kappa < p.weights[r].kappa);
    }
    let last = |r: &TrainRun| {
        r.final_row()
            .and_then(|m| m.spectral.clone())
            .map_or(f64::NAN, |p| p.kappa_j_effective)
    };
    let (kj_cond, kj_plain) = (last(&runs.conditioned), last(&runs.plain));
    let acc = |r: &TrainRun| r.final_row().map_or(f64::NAN, |m| m.eval_acc);
    let (acc_cond, acc_plain) = (acc(&runs.conditioned), acc(&runs.plain));

    let reference = fs::read_to_string(workspace_root().join("reference/metrics.csv")).unwrap();
    let (header, rows) = read_metrics_csv(&reference).unwrap();
    let col = header.iter().position(|h| h == "eval_acc").unwrap();
    let checked_in = rows.last().unwrap()[col];
    let byte_identical = metrics_csv(&runs.conditioned.metrics).unwrap() == reference;

    let passed = dominated
        && kj_cond <= kj_plain
        && acc_cond > 0.9
        && acc_plain > 0.9
        && (acc_cond - checked_in).abs() <= 0.02
        && !runs.conditioned.diverged()
        && !runs.plain.diverged();
    outcome(
        passed,
        format!(
            "κ(W+C)<κ(W) at all {} probes: {dominated}; final κ_eff(J) {kj_cond:.3e} vs {kj_plain:.3e}; \
             eval acc {acc_cond:.4} / {acc_plain:.4} (checked-in {checked_in:.4}); reference metrics byte-identical: {byte_identical}",
            runs.conditioned.metrics.len()
        ),
    )
}

fn protocol_fidelity(runs: &ReferenceRuns) -> Outcome {
    let mut svd_spec = RunSpec::reference();
    svd_spec.config.conditioning = Conditioning::SvdCap;
    svd_spec.steps = 100;
    svd_spec.probe_every = 50;
    let svd_run = train(TrainRun::new(svd_spec)).unwrap();
    let mut checked = 0;
    let mut ok = true;
    for run in [&runs.conditioned, &runs.plain, &svd_run] {
        let Some(o) = &run.outcome else {
            ok = false;
            continue;
        };
        checked += 1;
        ok &= o.corrections_frozen()
            && o.optimizer_tensors == o.parameter_tensors
            && o.optimizer_entries == o.trainable_parameters;
    }
    let o = runs.conditioned.outcome.as_ref();
    outcome(
        ok,
        format!(
            "{checked} runs; {} correction words frozen; optimizer tracks {} entries for {} trainable parameters",
            o.map_or(0, |o| o.corrections_initial.len()),
            o.map_or(0, |o| o.optimizer_entries),
            o.map_or(0, |o| o.trainable_parameters)
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("short.toml");
    fs::write(&config, "steps = 60\nprobe_every = 20\nn_train = 512\nn_eval = 128\n").unwrap();
    let mut files = Vec::new();
    for name in ["first", "second"] {
        let run_dir = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_speccond"))
            .args([
                "train",
                "--config",
                config.to_str().unwrap(),
                "--run-dir",
                run_dir.to_str().unwrap(),
            ])
            .env("SPECCOND_OUT", dir.path())
            .output()
            .unwrap()
            .status;
        if !status.success() {
            return outcome(false, format!("`speccond train` exited with {status}"));
        }
        files.push(["metrics.csv", "metrics.json"].map(|f| fs::read(run_dir.join(f)).unwrap()));
    }
    let same = files[0] == files[1];
    outcome(
        same,
        format!("two `speccond train` runs, metrics.csv and metrics.json identical: {same}"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 jacobian correctness", jacobian_correctness()),
        ("2 svd-cap guarantee", svd_cap_guarantee()),
        ("3 diagonal-shift reduction", diag_shift_reduction()),
        ("4 bound validity", bound_validity()),
        ("5 vectorization calculus", vectorization_calculus()),
        ("6 flops accounting", flops_accounting()),
    ];
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let runs = reference_runs();
    let late = [
        ("7 trajectory shape", trajectory_shape(&runs)),
        ("8 protocol fidelity", protocol_fidelity(&runs)),
        ("9 determinism", determinism()),
    ];
    for (name, o) in &late {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    results.extend(late);
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!(
        "acceptance: {} of {} criteria passed in {:.0?}",
        results.len() - failed,
        results.len(),
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Builds the default `verify` report twice and prints one line per acceptance criterion.

use std::path::Path;
use std::process::Command;

use kfp_cli::report::strip_timing;
use serde_json::Value;

fn verify(out: &Path, threads: &str) -> (i32, Value) {
    let status = Command::new(env!("CARGO_BIN_EXE_kfp"))
        .args(["verify", "--threads", threads, "--out"])
        .arg(out)
        .status()
        .expect("kfp runs");
    let text = std::fs::read_to_string(out.join("report.json")).expect("report written");
    (status.code().unwrap_or(-1), serde_json::from_str(&text).expect("report parses"))
}

fn suite<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["suites"]
        .as_array()
        .and_then(|s| s.iter().find(|s| s["name"] == name))
        .unwrap_or(&Value::Null)
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn line(n: usize, ok: bool, text: String) -> bool {
    println!("[{}] {n:>2}. {text}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let (code_a, a) = verify(&dir.path().join("a"), "1");
    let (code_b, b) = verify(&dir.path().join("b"), "2");
    let passed = |name: &str| suite(&a, name)["status"] == "pass";
    let mut all = true;

    let ok = suite(&a, "oracle_kernel");
    let d = &ok["details"];
    all &= line(1, passed("oracle_kernel") && num(&ok["runtime_ms"]) <= 60_000.0, format!(
        "oracle equivalence: L1 {:.4} (<= 0.05) at n=128, {:.4} at n=256, ratio {:.2} (>= 1.8), {} ms",
        num(&d["coarse"]["l1_relative"]), num(&d["fine"]["l1_relative"]), num(&d["refinement_ratio"]), ok["runtime_ms"]
    ));

    let d = &suite(&a, "oracle_selfcheck")["details"];
    let norm = d["normalization_error"].as_array().map(|v| v.iter().map(num).fold(0.0, f64::max)).unwrap_or(f64::NAN);
    all &= line(2, passed("oracle_selfcheck"), format!(
        "oracle self-check: normalization {norm:.1e} (<= 1e-8), CK {:.1e} (<= 1e-6), residual order {:.2}",
        num(&d["chapman_kolmogorov_error"]), num(&d["pde_residual"]["observed_order"])
    ));

    let simple = [
        (3, "conservation", "conservation: max mass drift / constant deviation", "1e-9"),
        (4, "adjoint", "adjoint identity: max relative gap over 50 pairs", "1e-8"),
        (5, "chapman_kolmogorov", "Chapman-Kolmogorov: max relative gap over 20 configs", "1e-10"),
    ];
    for (n, name, what, tol) in simple {
        all &= line(n, passed(name), format!("{what} {:.2e} (<= {tol})", num(&suite(&a, name)["measured"])));
    }

    let e = suite(&a, "energy");
    let increases: u64 = e["details"]["runs"]
        .as_array()
        .map(|r| r.iter().filter(|r| r["symmetric"] == Value::Bool(true)).filter_map(|r| r["norm_increases"].as_u64()).sum())
        .unwrap_or(u64::MAX);
    all &= line(6, passed("energy"), format!(
        "energy: max residual {:.2e} (<= 1e-6), norm increases for S=0 symmetric A: {increases}",
        num(&e["measured"])
    ));

    for (n, name, what) in [(7, "davies", "Davies decay"), (8, "twist", "twist growth")] {
        let s = suite(&a, name);
        let reports = s["details"]["reports"].as_array().cloned().unwrap_or_default();
        let bad = reports.iter().filter(|r| r["pass"] != Value::Bool(true)).count();
        all &= line(n, passed(name), format!(
            "{what}: {} configs, {bad} violations, worst margin {:.2e}",
            reports.len(), num(&s["margin"])
        ));
    }

    let d = &suite(&a, "envelope")["details"];
    all &= line(9, passed("envelope"), format!(
        "Gaussian envelope: A=I max K/env {:.3}; rough column dominated at {:.4} of nodes (>= 0.99), max excess {:.1e} (budget {:.1e})",
        num(&d["closed_form"]["max_kernel_over_envelope"]), num(&d["rough"]["dominated_fraction"]),
        num(&d["rough"]["max_excess"]), num(&d["rough"]["mollification_budget"])
    ));

    let d = &suite(&a, "geometry")["details"];
    all &= line(10, passed("geometry"), format!(
        "geometry: quasi-symmetry max {:.4} (<= sqrt 3), membership mismatches {}, Moser constant gap {:.1e}",
        num(&d["quasi_symmetry"]["max_ratio"]), d["cylinder_scaling"]["mismatches"],
        num(&d["moser_constants"]["relative_gap_to_1_over_256"])
    ));

    let same = strip_timing(a.clone()) == strip_timing(b.clone());
    all &= line(11, same && code_a == code_b, format!(
        "determinism: reports with 1 and 2 threads identical modulo timing: {same} (exit codes {code_a}, {code_b})"
    ));

    println!("overall_pass = {}, exit code {code_a}", a["overall_pass"]);
    if !all || code_a != 0 {
        std::process::exit(1);
    }
}

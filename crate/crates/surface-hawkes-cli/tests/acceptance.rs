//! Acceptance gate for the command-line front end: every command must be
//! byte-identical across two runs with the same config and seed, including
//! with a multi-threaded worker pool. Prints one PASS/FAIL line (run with
//! `--nocapture` to see it).

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_surface-hawkes")
}

fn run_to(command: &str, cfg: &Path, out: &Path, threads: &str) {
    let res = Command::new(bin())
        .args([
            command,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ])
        .output()
        .expect("spawn cli");
    assert!(
        res.status.success(),
        "{command} failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names
}

/// Compare two output directories byte-for-byte; the resolved config is
/// compared with its `dir =` line dropped, since it records the output
/// directory it was written into.
fn dirs_identical(a: &Path, b: &Path) -> bool {
    let fa = sorted_files(a);
    let fb = sorted_files(b);
    let names = |fs: &[PathBuf]| -> Vec<String> {
        fs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect()
    };
    if names(&fa) != names(&fb) {
        return false;
    }
    for (pa, pb) in fa.iter().zip(&fb) {
        let mut ca = std::fs::read(pa).unwrap();
        let mut cb = std::fs::read(pb).unwrap();
        if pa.file_name().unwrap() == "resolved_config.toml" {
            let strip = |c: &[u8]| -> Vec<u8> {
                String::from_utf8_lossy(c)
                    .lines()
                    .filter(|l| !l.starts_with("dir ="))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes()
            };
            ca = strip(&ca);
            cb = strip(&cb);
        }
        if ca != cb {
            return false;
        }
    }
    true
}

const CONFIG: &str = r#"
time_unit = "day"

[grid]
labels = ["10dp", "25dp", "atm", "25dc", "10dc"]
maturities = [1.0]
maturity_unit = "week"
tick = 0.001
sigma0 = [0.1]

[kernel]
family = "no_arb"

[kernel.params]
mode = "five_point"
profile = { kind = "exponential", alpha = 1.0, beta = 10.0 }
atm_scale = 0.2
beta_b = 1.2
eta = 0.1
beta_wing = 0.99
beta_phi = 1.0
beta_mu = 1.0
mu0 = 5.0
delta_atm = 0.5
beta_rr_25 = 2.0

[simulation]
horizon = 1.0
steps = 50
n_seeds = 100
seed0 = 3

[backtest]
lambda_scale = [40.0, 55.0, 70.0, 55.0, 40.0]
alpha_fill = -0.7
beta_fill = 10.0
vega = [1.0]
strategy = "inventory_linear"
strategy_params = [0.01, 0.0005]
output_steps = 50

[scaling]
horizon = 1.0
steps = 512
factors = [
    { vector = [1.0], c = 1.0, theta = 0.04, lambda_volvol = 0.3, alpha = 0.6 },
]

[output]
dir = "unused"
"#;

#[test]
fn acceptance_10_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("experiment.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let commands = ["simulate", "noarb", "scaling", "backtest", "impact"];
    let mut pass = true;
    let mut detail = String::new();
    for command in commands {
        let out_a = tmp.path().join(format!("{command}_a"));
        let out_b = tmp.path().join(format!("{command}_b"));
        let out_c = tmp.path().join(format!("{command}_c"));
        run_to(command, &cfg, &out_a, "2");
        run_to(command, &cfg, &out_b, "2");
        run_to(command, &cfg, &out_c, "1");
        let ok = dirs_identical(&out_a, &out_b) && dirs_identical(&out_a, &out_c);
        pass &= ok;
        detail.push_str(&format!("{command}: {}; ", if ok { "identical" } else { "DIFFERS" }));
    }
    println!(
        "ACCEPTANCE 10 (cli determinism): {} — {}",
        if pass { "PASS" } else { "FAIL" },
        detail.trim_end_matches("; ")
    );
    assert!(pass, "criterion 10 (cli determinism) failed: {detail}");
}

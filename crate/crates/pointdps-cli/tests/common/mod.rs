//! Shared helpers for binary-level tests: a pipeline touching every
//! subcommand and a recursive output comparison that treats wall-clock
//! fields as the only permitted difference.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

fn run(cwd: &Path, args: &[&str], threads: Option<&str>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pointdps"));
    cmd.current_dir(cwd).args(args);
    match threads {
        Some(n) => cmd.env("POINTDPS_THREADS", n),
        None => cmd.env_remove("POINTDPS_THREADS"),
    };
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "pointdps {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small fixed-coordinate structure in the standard fixed-column layout.
fn write_toy_pdb(path: &Path) {
    let mut rng = pointdps::rng::RandomSource::new(42);
    let mut text = String::new();
    for i in 0..12 {
        let (x, y, z) = (
            4.0 * rng.normal(),
            4.0 * rng.normal(),
            4.0 * rng.normal(),
        );
        text.push_str(&format!(
            "ATOM  {:5}  CA  ALA A{:4}    {x:8.3}{y:8.3}{z:8.3}  1.00  0.00           C\n",
            i + 1,
            i + 1
        ));
    }
    text.push_str("END\n");
    let mut f = std::fs::File::create(path).expect("writable fixture");
    f.write_all(text.as_bytes()).expect("fixture written");
}

/// Every seeded subcommand once, all writing under `cwd`.
pub fn pipeline(cwd: &Path, threads: Option<&str>) {
    run(
        cwd,
        &[
            "train", "--dataset", "synth:blobs", "--count", "12", "--points", "24",
            "--epochs", "2", "--batch", "6", "--hidden", "12", "--layers", "2",
            "--embed", "8", "--seed", "1", "--out", "model.json",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "sample", "--model", "model.json", "--points", "24", "--samples", "2",
            "--steps", "6", "--seed", "3", "--out-dir", "samples",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "simulate", "--cloud", "samples/sample_000.xyz", "--projections", "2",
            "--points", "16", "--coarse", "5", "--subunit", "6", "--seed", "5",
            "--out", "obs.json",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "reconstruct", "--model", "model.json", "--obs", "obs.json", "--points",
            "24", "--samples", "2", "--steps", "6", "--seed", "7", "--out-dir", "recon",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "ml", "--obs", "obs.json", "--points", "24", "--samples", "2", "--steps",
            "25", "--seed", "9", "--out-dir", "ml_out",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "evaluate", "--model-clouds", "recon/sample_000.xyz", "recon/sample_001.xyz",
            "--target-cloud", "samples/sample_000.xyz", "--seed", "2", "--out",
            "report.json",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "fit-gmm", "--input", "samples/sample_000.xyz", "--components", "4",
            "--seed", "2", "--out", "means.xyz",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "genmetrics", "--samples", "recon/sample_000.xyz", "recon/sample_001.xyz",
            "--refs", "samples/sample_000.xyz", "samples/sample_001.xyz", "--out",
            "gm.json",
        ],
        threads,
    );
    run(
        cwd,
        &[
            "ablate", "--model", "model.json", "--obs", "obs.json", "--points", "24",
            "--target", "samples/sample_000.xyz", "--steps", "4", "--samples", "2",
            "--seed", "11", "--out", "ablate.json",
        ],
        threads,
    );
    write_toy_pdb(&cwd.join("toy.pdb"));
    run(
        cwd,
        &["parse-pdb", "--input", "toy.pdb", "--out", "toy.xyz"],
        threads,
    );
}

fn walk(root: &Path) -> BTreeSet<PathBuf> {
    let mut files = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    files
}

fn is_manifest(path: &Path) -> bool {
    path.file_name()
        .map(|n| n.to_string_lossy().ends_with("manifest.json"))
        .unwrap_or(false)
}

fn normalized_manifest(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).expect("readable manifest");
    let mut v: serde_json::Value = serde_json::from_str(&text).expect("valid json");
    v["elapsed_ms"] = serde_json::Value::from(0);
    v
}

pub fn assert_trees_match(a: &Path, b: &Path) {
    let fa = walk(a);
    let fb = walk(b);
    assert_eq!(fa, fb, "different file sets");
    for rel in &fa {
        let pa = a.join(rel);
        let pb = b.join(rel);
        if is_manifest(rel) {
            assert_eq!(
                normalized_manifest(&pa),
                normalized_manifest(&pb),
                "manifest {} differs",
                rel.display()
            );
        } else {
            let ba = std::fs::read(&pa).expect("readable");
            let bb = std::fs::read(&pb).expect("readable");
            assert_eq!(ba, bb, "{} differs between runs", rel.display());
        }
    }
}

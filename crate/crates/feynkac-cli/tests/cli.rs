use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_feynkac"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(cfg).arg("--output-dir").arg(out).args(extra).output().expect("spawn feynkac")
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn metadata(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap()
}

#[test]
fn list_claims_names_the_catalog() {
    let out = bin().arg("list-claims").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 10);
    for id in ["pa10_lower", "ka2_equivalence", "kato_sk", "volterra_oracle", "khasminski"] {
        assert!(text.lines().any(|l| l.split_whitespace().next() == Some(id)), "{id} missing");
    }
}

#[test]
fn stable_config_is_reproducible_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = config("stable15_delta0.toml");
    for dir in [&a, &b] {
        let out = run(&cfg, dir, &[]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    assert_eq!(fa, fb);
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    for expected in ["summary.csv", "ledger.csv", "solution_slices.csv", "kato.csv"] {
        assert!(names.contains(&expected), "{expected} not written: {names:?}");
    }

    let meta = metadata(&a);
    let hash = meta["config_hash"].as_str().unwrap().to_string();
    assert_eq!(meta["exit_code"], 0);
    assert!(meta["finished_unix"].as_f64().unwrap() >= meta["started_unix"].as_f64().unwrap());
    for (name, bytes) in &fa {
        let text = String::from_utf8(bytes.clone()).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("config_hash,"), "{name} header");
        for line in lines {
            assert!(line.starts_with(&format!("{hash},")), "{name}: {line}");
        }
    }
    assert!(a.join("base_kernel.fkg").exists() && a.join("p_a.fkg").exists());
}

#[test]
fn brownian_config_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&config("brownian_constant_potential.toml"), tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 8);
    assert!(summary.lines().skip(1).all(|l| l.contains(",PASS,")));
}

#[test]
fn seed_override_changes_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("stable15_delta0.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    let small = tmp.path().join("small.toml");
    fs::write(&small, text.replace("claims = [", "claims = [\"h2_volume\"] # [")).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&small, &a, &[]).status.code(), Some(0));
    assert_eq!(run(&small, &b, &["--seed-override", "99"]).status.code(), Some(0));
    let (ma, mb) = (metadata(&a), metadata(&b));
    assert_eq!(mb["seed"], 99);
    assert_ne!(ma["config_hash"], mb["config_hash"]);
}

fn assert_schema_error(toml: &str) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, toml).unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&cfg, &out_dir, &[]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.exists() || fs::read_dir(&out_dir).unwrap().next().is_none());
}

#[test]
fn missing_alpha_is_a_schema_error() {
    let text = fs::read_to_string(config("stable15_delta0.toml")).unwrap();
    assert_schema_error(&text.replace("alpha = 1.5\n", ""));
}

#[test]
fn unknown_claim_is_a_schema_error() {
    let text = fs::read_to_string(config("stable15_delta0.toml")).unwrap();
    assert_schema_error(&text.replace("\"kato_sk\",", "\"no_such_claim\","));
}

#[test]
fn unmet_claim_requirement_is_a_schema_error() {
    let text = fs::read_to_string(config("stable15_delta0.toml")).unwrap();
    // The exponential tilt identity needs a purely uniform potential.
    assert_schema_error(&text.replace("\"kato_sk\",", "\"exp_tilt\","));
}

#[test]
fn missing_config_file_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&tmp.path().join("absent.toml"), &tmp.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

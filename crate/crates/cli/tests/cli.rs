use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11
[dataset]
n = 300
[train]
pretrain_budget = { steps = 30 }
probe_epochs = 10
[concepts]
n = 40
[tcav]
ig_steps = 6
cav = { steps = 200 }
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_landprobe"));
    c.env_remove("LANDPROBE_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn full_run(root: &Path, config: &Path) {
    let (c, o) = (config.to_str().unwrap(), root.to_str().unwrap());
    for cmd in ["gen-data", "gen-concepts"] {
        ok(&[cmd, "--config", c, "--out", o]);
    }
    ok(&["train", "--config", c, "--out", o, "--baseline"]);
    ok(&["explain", "--config", c, "--out", o]);
    ok(&["project", "--config", c, "--out", o]);
    ok(&["report", "--config", c, "--out", o]);
}

#[test]
fn pipeline_is_byte_identical_and_well_formed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_run(&a, &config);
    full_run(&b, &config);
    let fa = files(&a);
    assert_eq!(fa, files(&b));

    // rerunning into the same directory overwrites with the same bytes
    ok(&[
        "explain",
        "--config",
        config.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(fa, files(&a));

    for (path, bytes) in &fa {
        let first = bytes.split(|&c| c == b'\n').next().unwrap();
        let first = String::from_utf8_lossy(first);
        let ok = first.starts_with("{\"schema\":\"landprobe.")
            || first.starts_with("# schema=landprobe.")
            || first.starts_with("LANDPROBE-GRIDS version=1");
        assert!(ok, "{} starts with {first}", path.display());
    }

    let text = |p: &str| String::from_utf8(fa[Path::new(p)].clone()).unwrap();
    let tcav = text("explain/rnc-pretrained/tcav.json");
    assert_eq!(tcav.matches("\"concept\":").count(), 42);
    let manifest = text("data/manifest.json");
    let n_test = manifest.matches("\"split\": \"test\"").count();
    assert!(n_test > 0);
    assert_eq!(text("explain/rnc-pretrained/alignment.csv").lines().count(), n_test + 2);
    assert_eq!(text("project/rnc-pretrained.csv").lines().count(), n_test + 2);
    assert!(fa.contains_key(Path::new("train/rnc-pretrained.checkpoint.json")));
    assert!(fa.contains_key(Path::new("train/supervised-baseline.checkpoint.json")));
    let metrics = text("train/metrics.json");
    assert_eq!(metrics.matches("\"variant\":").count(), 2);
    assert!(metrics.contains("\"val\"") && metrics.contains("\"test\""));
    assert!(fa.contains_key(Path::new("report.json")));
}

#[test]
fn explain_flags_restrict_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, SMALL).unwrap();
    let (c, o) = (config.to_str().unwrap(), tmp.path().to_str().unwrap());
    ok(&["gen-data", "--config", c, "--out", o]);
    ok(&["gen-concepts", "--config", c, "--out", o]);
    ok(&["train", "--config", c, "--out", o]);
    ok(&[
        "explain", "--config", c, "--out", o, "--method", "plain", "--layers", "0,2",
    ]);
    let tcav = std::fs::read_to_string(tmp.path().join("explain/rnc-pretrained/tcav.json")).unwrap();
    assert_eq!(tcav.matches("\"concept\":").count(), 14);
    assert!(!tcav.contains("integrated-gradients"));
    assert_eq!(code(&run(&["explain", "--config", c, "--out", o, "--layers", "5"])), 1);
    assert_eq!(
        code(&run(&["explain", "--config", c, "--out", o, "--method", "fancy"])),
        1
    );
    assert_eq!(
        code(&run(&[
            "explain",
            "--config",
            c,
            "--out",
            o,
            "--variant",
            "supervised-baseline"
        ])),
        2
    );
}

#[test]
fn gen_data_counts_and_minimum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d1");
    ok(&["gen-data", "--n", "2000", "--seed", "7", "--out", out.to_str().unwrap()]);
    let manifest = std::fs::read_to_string(out.join("data/manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"id\":").count(), 2000);

    let o = run(&["gen-data", "--n", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stratification"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["gen-data", "--n", "many"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[dataset]\nsize = 3\n").unwrap();
    assert_eq!(
        code(&run(&["gen-data", "--config", bad.to_str().unwrap(), "--out", o])),
        1
    );
    assert_eq!(
        code(&run(&["gen-data", "--config", "/nonexistent/run.toml", "--out", o])),
        1
    );

    // missing inputs are runtime failures
    assert_eq!(code(&run(&["train", "--out", o])), 2);
    assert_eq!(code(&run(&["explain", "--out", o])), 2);
    assert_eq!(code(&run(&["report", "--out", o])), 2);
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("env-root");
    let o = bin()
        .args(["gen-concepts", "--n", "12"])
        .env("LANDPROBE_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(root.join("concepts/water/manifest.json").exists());
}

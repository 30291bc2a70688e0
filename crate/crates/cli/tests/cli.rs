//! End-to-end runs of the `mracl` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
version = 1

[scene]
grid = 8
max_side = 3
seed = 3

[sizes]
train = 24
test_static = 6
test_motion = 6

[train]
epochs = 2
batch_size = 8
loss_kind = "seg_only"

[train.model]
embed_dim = 8
text_dim = 8
"#;

fn mracl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mracl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_splits_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let data = tmp.path().join("data");
    let o = mracl(&["gen-data", "--config", &cfg, "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = std::fs::read_dir(&data).unwrap().count();
    assert_eq!(files, 4);

    let o = mracl(&["validate-data", "--data", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train 24"));

    let o = mracl(&["gen-data", "--config", &cfg, "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(4));
    let o = mracl(&["gen-data", "--config", &cfg, "--out", p(&data), "--force"]);
    assert!(o.status.success());
}

#[test]
fn invalid_configs_exit_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let small_grid = write_config(tmp.path(), "g.toml", &SMALL.replace("grid = 8", "grid = 4"));
    let o = mracl(&["gen-data", "--config", &small_grid, "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grid"), "{}", stderr(&o));

    let unknown = write_config(tmp.path(), "u.toml", &format!("{SMALL}\nbogus = 1\n"));
    let o = mracl(&["gen-data", "--config", &unknown, "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = mracl(&["validate-data", "--data", p(&tmp.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_diagnose_reads_its_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let runs = [tmp.path().join("r1"), tmp.path().join("r2")];
    let mut tables = Vec::new();
    for r in &runs {
        let o = mracl(&["train", "--config", &cfg, "--out", p(r)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        assert!(text.contains("test_static") && text.contains("test_motion"), "{text}");
        tables.push(std::fs::read(r.join("final_metrics.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);

    let data = tmp.path().join("data");
    assert!(mracl(&["gen-data", "--config", &cfg, "--out", p(&data)]).status.success());
    let diag = tmp.path().join("diag");
    let ckpt = runs[0].join("checkpoint_best.json");
    let o = mracl(&["diagnose", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["anisotropy.csv", "anisotropy.svg", "gradient_profile.csv", "gradient_profile.svg", "metrics.csv"] {
        assert!(diag.join(f).is_file(), "{f}");
    }

    let o = mracl(&[
        "diagnose",
        "--checkpoint",
        p(&tmp.path().join("nope.json")),
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("diag2")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_runs_the_factor_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{}\n[sweep]\nfactor_grid = true\nnu = [0.3]\n", SMALL.replace("seg_only", "seg_plus_mracl"));
    let cfg = write_config(tmp.path(), "a.toml", &body);
    let out = tmp.path().join("ablate");
    let o = mracl(&["ablate", "--config", &cfg, "--out", p(&out), "--jobs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("ok")));
    assert!(rows[8].starts_with("nu=0.3,"));

    let empty = write_config(tmp.path(), "e.toml", SMALL);
    let o = mracl(&["ablate", "--config", &empty, "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dsdr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsdr"))
        .args(args)
        .env_remove("DSDR_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
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

fn config(dir: &Path, out: &Path, extra_train: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"spec_version = 1
{extra}
[dataset]
domains = 3
per_domain = 20
classes = 10
seed = 7

[network]
preset = "compact"

[train]
batch_size = 2
steps = 4
log_interval = 2
{extra_train}

[eval]
seeds = [0]

[output]
dir = "{}"
"#,
        out.display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn count_png(dir: &Path) -> usize {
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += count_png(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}

fn digest_of(o: &Output) -> String {
    let s = stdout(o);
    let i = s.find("manifest digest ").expect("digest printed");
    s[i + 16..].trim().trim_end_matches(')').to_string()
}

#[test]
fn synth_data_writes_every_image_with_stable_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |out: &Path| {
        dsdr(&["synth-data", "--domains", "4", "--per-domain", "500", "--seed", "7", "--out", p(out)])
    };
    let first = args(&a);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(count_png(&a), 2000);
    let domain_dirs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(domain_dirs, 4);
    let second = args(&b);
    assert_eq!(digest_of(&first), digest_of(&second));
}

#[test]
fn synth_data_refuses_single_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dsdr(&["synth-data", "--domains", "1", "--per-domain", "20", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let run = |force: bool| {
        let mut a = vec!["synth-data", "--domains", "2", "--per-domain", "10", "--out", p(&out)];
        if force {
            a.push("--force");
        }
        dsdr(&a)
    };
    assert_eq!(code(&run(false)), 0);
    let refused = run(false);
    assert_eq!(code(&refused), 2);
    assert!(stderr(&refused).contains("--force"));
    let forced = run(true);
    assert_eq!(code(&forced), 0);
    assert_eq!(count_png(&out), 20);
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = config(tmp.path(), &out, "", "");
    let o = dsdr(&["train", "--config", p(&cfg), "--held-out", "clean"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(out.join("checkpoint.bin").exists());
    assert!(out.join("config.json").exists());

    let again = dsdr(&["train", "--config", p(&cfg), "--held-out", "clean"]);
    assert_eq!(code(&again), 2);
    let forced = dsdr(&["train", "--config", p(&cfg), "--held-out", "clean", "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);

    let ckpt = out.join("checkpoint.bin");
    let eval = || dsdr(&["eval", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--held-out", "clean"]);
    let (e1, e2) = (eval(), eval());
    assert_eq!(code(&e1), 0, "{}", stderr(&e1));
    assert!(stdout(&e1).starts_with("accuracy: "));
    assert_eq!(stdout(&e1), stdout(&e2));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(results.starts_with("held_out,seed,accuracy\n"));

    let other = tmp.path().join("k5");
    fs::create_dir(&other).unwrap();
    let k5 = config(&other, &other.join("x"), "", "");
    let text = fs::read_to_string(&k5).unwrap().replace("classes = 10", "classes = 5")
        .replace("preset = \"compact\"", "preset = \"compact\"\nnum_classes = 5");
    fs::write(&k5, text).unwrap();
    let mismatch = dsdr(&["eval", "--checkpoint", p(&ckpt), "--config", p(&k5), "--held-out", "clean"]);
    assert_eq!(code(&mismatch), 2, "{}", stderr(&mismatch));
}

#[test]
fn train_rejects_unknown_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &tmp.path().join("run"), "batch_sise = 3", "");
    let o = dsdr(&["train", "--config", p(&cfg), "--held-out", "clean"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));
}

#[test]
fn train_lists_domains_for_unknown_held_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &tmp.path().join("run"), "", "");
    let o = dsdr(&["train", "--config", p(&cfg), "--held-out", "nowhere"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("clean") && err.contains("color"), "{err}");
}

#[test]
fn ablate_custom_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let cfg = config(tmp.path(), &out, "", "");
    let rows = tmp.path().join("rows.txt");
    fs::write(&rows, "# two rows\n0 0 0 0 0 1 0\n1 1 1 1 1 1 1\n").unwrap();
    let o = dsdr(&["ablate", "--config", p(&cfg), "--rows", p(&rows)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("ablation.txt").exists());

    fs::write(&rows, "1 1 1 1 1 1 1\n1 1 1 maybe 1 1 1\n").unwrap();
    let bad = dsdr(&["ablate", "--config", p(&cfg), "--rows", p(&rows), "--force"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));

    fs::write(&rows, "1 1 1 1 1 0 1\n").unwrap();
    let no_ce = dsdr(&["ablate", "--config", p(&cfg), "--rows", p(&rows), "--force"]);
    assert_eq!(code(&no_ce), 2);
}

#[test]
fn report_tables_and_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("loo");
    let cfg = config(tmp.path(), &out, "steps = 100\nlog_interval = 1", "");
    let text = fs::read_to_string(&cfg).unwrap().replace("steps = 4\nlog_interval = 2\n", "");
    fs::write(&cfg, text).unwrap();
    let o = dsdr(&["loo", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let r = dsdr(&["report", "--dir", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 + 1);
    assert!(summary.lines().last().unwrap().starts_with("Avg"));
    let report = stdout(&r);
    assert_eq!(report.matches("(100 points)").count(), 3, "{report}");
    let mut svgs = 0;
    for e in fs::read_dir(out.join("runs")).unwrap() {
        let dir = e.unwrap().path();
        let svg = fs::read_to_string(dir.join("loss_curves.svg")).unwrap();
        for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            assert_eq!(pts.split_whitespace().count(), 100);
        }
        svgs += 1;
    }
    assert_eq!(svgs, 3);
}

#[test]
fn report_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = dsdr(&["report", "--dir", p(tmp.path())]);
    assert_eq!(code(&empty), 2);
    fs::write(tmp.path().join("results.csv"), "held_out,seed\nclean,0\n").unwrap();
    let missing = dsdr(&["report", "--dir", p(tmp.path())]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("accuracy"), "{}", stderr(&missing));
}

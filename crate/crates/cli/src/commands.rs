use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dsdr_core::data::{export_directory_dataset, leave_one_out_split, load_directory_dataset, synthesize_domains, Dataset, DomainShiftSpec};
use dsdr_core::evaluation::{
    average_row, evaluate_accuracy, render_ablation_table, render_results_table, run_ablation_grid, run_erm_baseline,
    run_leave_one_out, validate_masks, write_ablation_csv, write_aggregate_csv, write_results_csv, ExperimentResult,
};
use dsdr_core::losses::LossMask;
use dsdr_core::trainer::{load_checkpoint, parse_metrics_csv, Trainer, TrainState};
use serde_json::json;

use crate::config::{ExperimentConfig, SPEC_VERSION};
use crate::plot::{loss_curves_svg, CURVE_COLUMNS};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Create `dir`, refusing to touch a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Usage(format!(
                    "refusing to overwrite non-empty {}; pass --force to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_config_record(dir: &Path, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<(), CliError> {
    let record = json!({
        "spec_version": SPEC_VERSION,
        "config_digest": cfg.digest(),
        "run": extra,
        "config": cfg,
    });
    write_file(&dir.join("config.json"), &serde_json::to_string_pretty(&record).expect("record serializes"))
}

fn domain_index(data: &Dataset, name: &str) -> Result<usize, CliError> {
    data.meta.domain_index(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown held-out domain '{name}'; valid names: {}",
            data.meta.domain_names.join(", ")
        ))
    })
}

pub fn synth_data(domains: usize, per_domain: usize, seed: u64, classes: usize, out: &Path, force: bool) -> Result<(), CliError> {
    let data = synthesize_domains(&DomainShiftSpec::standard(domains, seed), classes, per_domain)?;
    prepare_out(out, force)?;
    let manifest = export_directory_dataset(&data, out, Some(seed))?;
    println!(
        "wrote {} images in {} domains to {} (manifest digest {})",
        data.len(),
        domains,
        out.display(),
        manifest.digest()
    );
    Ok(())
}

pub fn train(config: &Path, held_out: &str, force: bool, resume: bool) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let idx = domain_index(&data, held_out)?;
    let out = cfg.output.dir.clone();
    let ckpt = out.join("checkpoint.bin");
    let mut trainer = if resume {
        if !ckpt.exists() {
            return Err(CliError::Usage(format!("--resume: no checkpoint at {}", ckpt.display())));
        }
        let t = Trainer::<f32>::resume(&ckpt, &data, idx)?;
        if t.state.config != cfg.train || t.state.model.networks.config() != &cfg.network {
            return Err(CliError::Usage("--resume: checkpoint was written with a different config".into()));
        }
        t
    } else {
        prepare_out(&out, force)?;
        Trainer::<f32>::new(cfg.train.clone(), cfg.network.clone(), &data, idx)?
    };
    trainer = trainer.with_output(&out)?;
    write_config_record(&out, &cfg, json!({ "command": "train", "held_out": held_out }))?;
    trainer.run()?;
    trainer.checkpoint()?;
    let last = trainer.state.last_report.map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps holding out {held_out}; final total loss {last:.4}; outputs in {}",
        trainer.state.step,
        out.display()
    );
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data_dir: Option<&Path>,
    config: Option<&Path>,
    held_out: &str,
    results: Option<&Path>,
) -> Result<(), CliError> {
    let state: TrainState<f32> = load_checkpoint(checkpoint)?;
    let net = state.model.networks.config().clone();
    let data = match (data_dir, config) {
        (Some(dir), _) => load_directory_dataset(dir, net.image_shape)?,
        (None, Some(cfg)) => ExperimentConfig::load(cfg)?.load_dataset()?,
        (None, None) => return Err(CliError::Usage("pass --data or --config".into())),
    };
    if data.meta.num_classes != net.num_classes {
        return Err(CliError::Usage(format!(
            "checkpoint classifier has {} classes, dataset has {}",
            net.num_classes, data.meta.num_classes
        )));
    }
    let idx = domain_index(&data, held_out)?;
    let (_, test) = leave_one_out_split(&data, idx)?;
    let acc = evaluate_accuracy(&state.model, &test)?;
    println!("accuracy: {acc:.4}");
    let path = match results {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("results.csv"),
    };
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str("held_out,seed,accuracy\n");
    }
    writeln!(line, "{held_out},{},{acc:.4}", state.config.seed).unwrap();
    f.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))
}

fn with_avg(rows: &[ExperimentResult]) -> Result<Vec<ExperimentResult>, CliError> {
    let mut all = rows.to_vec();
    all.push(average_row(rows)?);
    Ok(all)
}

pub fn loo(config: &Path, erm: bool, force: bool) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let out = cfg.output.dir.clone();
    let mut exp = cfg.experiment();
    exp.validate(&data)?;
    prepare_out(&out, force)?;
    write_config_record(&out, &cfg, json!({ "command": "loo", "erm": erm }))?;
    exp.output = Some(out.join("runs"));
    exp.verbose = true;
    let rows = run_leave_one_out::<f32>(&exp, &data)?;
    write_results_csv(&out.join("results.csv"), &rows)?;
    let rows = with_avg(&rows)?;
    write_aggregate_csv(&out.join("aggregate.csv"), &rows)?;
    let mut table = render_results_table("DSDR", &rows);
    if erm {
        exp.output = Some(out.join("erm_runs"));
        let mut erm_rows = Vec::new();
        for d in exp.domains(&data)? {
            erm_rows.push(run_erm_baseline::<f32>(&exp, &data, &data.meta.domain_names[d])?);
        }
        write_results_csv(&out.join("erm_results.csv"), &erm_rows)?;
        let erm_rows = with_avg(&erm_rows)?;
        write_aggregate_csv(&out.join("erm_aggregate.csv"), &erm_rows)?;
        table.push('\n');
        table.push_str(&render_results_table("ERM", &erm_rows));
    }
    write_file(&out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn parse_flag(tok: &str) -> Option<bool> {
    match tok.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "x" | "✓" => Some(true),
        "0" | "false" | "no" | "n" | "-" => Some(false),
        _ => None,
    }
}

/// Rows file: one mask per line as 7 flags in `recon intra inter cycle adv
/// ce kl` order, separated by commas or whitespace. Blank lines and `#`
/// comments are skipped; a header line naming the columns is allowed.
pub fn parse_rows(text: &str) -> Result<Vec<LossMask>, CliError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).collect();
        if toks.iter().zip(LossMask::COLUMNS).all(|(t, c)| t.eq_ignore_ascii_case(c)) && toks.len() == 7 {
            continue;
        }
        if toks.len() != 7 {
            return Err(CliError::Usage(format!(
                "rows file line {}: expected 7 flags ({}), found {}",
                i + 1,
                LossMask::COLUMNS.join(" "),
                toks.len()
            )));
        }
        let mut flags = [false; 7];
        for (f, t) in flags.iter_mut().zip(&toks) {
            *f = parse_flag(t)
                .ok_or_else(|| CliError::Usage(format!("rows file line {}: '{t}' is not a flag (use 1/0)", i + 1)))?;
        }
        rows.push(LossMask::from_flags(flags));
    }
    if rows.is_empty() {
        return Err(CliError::Usage("rows file has no rows".into()));
    }
    Ok(rows)
}

pub fn ablate(config: &Path, rows: &str, force: bool) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let masks = if rows == "default" {
        LossMask::reference_grid()
    } else {
        let p = Path::new(rows);
        parse_rows(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?
    };
    validate_masks(&masks)?;
    let data = cfg.load_dataset()?;
    let out = cfg.output.dir.clone();
    let mut exp = cfg.experiment();
    exp.validate(&data)?;
    prepare_out(&out, force)?;
    write_config_record(&out, &cfg, json!({ "command": "ablate", "rows": masks.len() }))?;
    exp.output = Some(out.join("runs"));
    exp.verbose = true;
    let result = run_ablation_grid::<f32>(&exp, &data, &masks)?;
    write_ablation_csv(&out.join("ablation.csv"), &result)?;
    let table = render_ablation_table(&result);
    write_file(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| io_err(dir, err)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

/// Group `held_out,seed,accuracy` rows by domain, in first-seen order.
fn read_results(path: &Path) -> Result<Vec<ExperimentResult>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column '{name}'", path.display())))
    };
    let (ch, cs, ca) = (col("held_out")?, col("seed")?, col("accuracy")?);
    let mut groups: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || CliError::Usage(format!("{} line {}: malformed row", path.display(), i + 2));
        let name = f.get(ch).ok_or_else(bad)?.to_string();
        let seed: u64 = f.get(cs).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let acc: f64 = f.get(ca).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        match groups.iter_mut().find(|g| g.0 == name) {
            Some(g) => {
                g.1.push(seed);
                g.2.push(acc);
            }
            None => groups.push((name, vec![seed], vec![acc])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(n, s, a)| ExperimentResult::new(n, s, a, String::new()))
        .collect())
}

fn vertical_table(title: &str, rows: &[ExperimentResult]) -> String {
    let w = rows.iter().map(|r| r.held_out.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{title}\n{:<w$} | {:>8} | {:>8}\n{}\n", "held_out", "mean", "std", "-".repeat(w + 22));
    for r in rows {
        writeln!(s, "{:<w$} | {:>8.4} | {:>8.4}", r.held_out, r.mean, r.std).unwrap();
    }
    s
}

pub fn report(dir: &Path) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut summary = String::new();
    let mut found = false;
    for (file, title) in [("results.csv", "DSDR"), ("erm_results.csv", "ERM")] {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let rows = read_results(&path)?;
        if rows.is_empty() {
            continue;
        }
        found = true;
        let rows = with_avg(&rows)?;
        let stem = file.trim_end_matches("results.csv");
        write_aggregate_csv(&dir.join(format!("{stem}summary.csv")), &rows)?;
        summary.push_str(&vertical_table(title, &rows));
        summary.push('\n');
    }
    let mut metrics = Vec::new();
    find_files(dir, "metrics.csv", &mut metrics)?;
    for m in &metrics {
        let (header, rows) = parse_metrics_csv(m)?;
        let idx = |c: &str| header.iter().position(|h| h == c).expect("parse checks columns");
        let xs: Vec<f64> = rows.iter().map(|r| r[idx("step")]).collect();
        let series: Vec<(&str, Vec<f64>, Vec<f64>)> = CURVE_COLUMNS
            .iter()
            .map(|c| (*c, xs.clone(), rows.iter().map(|r| r[idx(c)]).collect()))
            .collect();
        let parent = m.parent().unwrap_or(dir);
        let svg = loss_curves_svg(&parent.display().to_string(), &series);
        write_file(&parent.join("loss_curves.svg"), &svg)?;
        writeln!(summary, "loss curves: {} ({} points)", parent.join("loss_curves.svg").display(), xs.len()).unwrap();
        found = true;
    }
    if !found {
        return Err(CliError::Usage(format!(
            "{} holds no results.csv or metrics.csv to report on",
            dir.display()
        )));
    }
    write_file(&dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

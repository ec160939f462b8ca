//! Re-checks stored artifacts without recomputing any experiment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde_json::Value;
use tavlab::analysis::{fit_order_above, GAP_NOISE_FLOOR, SECOND_ORDER_BAND, THIRD_ORDER_BAND};
use tavlab::TaskDataset;

use crate::artifacts::{sha256_hex, Manifest, MANIFEST};
use crate::commands::{epoch_one_tolerance, CHECKS_HEADER, GAP_HEADER, LEMMA_HEADER, NORMS_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: String, r: Result<String>) -> Self {
        match r {
            Ok(detail) => Self {
                name,
                passed: true,
                detail,
            },
            Err(e) => Self {
                name,
                passed: false,
                detail: format!("{e:#}"),
            },
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.passed)
}

/// Validates every subcommand directory under `root` that has a manifest.
pub fn validate_dir(root: &Path) -> Vec<CheckResult> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(root) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).is_file())
            .collect(),
        Err(e) => {
            return vec![CheckResult::from(
                "artifacts".into(),
                Err(anyhow!("cannot read {}: {e}", root.display())),
            )]
        }
    };
    if dirs.is_empty() {
        return vec![CheckResult::from(
            "artifacts".into(),
            Err(anyhow!("no artifacts in {}", root.display())),
        )];
    }
    dirs.sort();
    dirs.iter().flat_map(|d| validate_subdir(d)).collect()
}

/// Integrity checks for each file listed in the manifest, then the
/// invariants of that subcommand.
pub fn validate_subdir(dir: &Path) -> Vec<CheckResult> {
    let sub = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = match fs::read(&manifest_path)
        .map_err(anyhow::Error::from)
        .and_then(|b| serde_json::from_slice(&b).map_err(anyhow::Error::from))
    {
        Ok(m) => m,
        Err(e) => {
            return vec![CheckResult::from(
                format!("{sub}/{MANIFEST}"),
                Err(e.context(format!("corrupt manifest {}", manifest_path.display()))),
            )]
        }
    };
    let mut out = Vec::new();
    out.push(CheckResult::from(format!("{sub}/config_hash"), {
        let h = manifest.config.hash();
        if h == manifest.config_hash {
            Ok("matches embedded config".into())
        } else {
            Err(anyhow!(
                "manifest hash {} but embedded config hashes to {h}",
                manifest.config_hash
            ))
        }
    }));
    for f in &manifest.files {
        let path = dir.join(&f.name);
        out.push(CheckResult::from(
            format!("{sub}/{} integrity", f.name),
            fs::read(&path)
                .with_context(|| format!("reading {}", path.display()))
                .and_then(|b| {
                    ensure!(
                        sha256_hex(&b) == f.sha256,
                        "{} does not match its manifest digest",
                        path.display()
                    );
                    Ok(format!("{} bytes", b.len()))
                }),
        ));
    }
    let checks: Vec<(&str, fn(&Path, &Manifest) -> Result<String>)> = match manifest.command.as_str() {
        "gen-tasks" => vec![("norm bound", check_tasks)],
        "finetune" => vec![("finite losses", check_finetune)],
        "merge" => vec![("epoch-1 equality", check_merge)],
        "gap-scan" => vec![
            ("gap slope", check_gap_slope),
            ("corrected slope", check_corrected_slope),
            ("lemma slopes", check_lemma),
        ],
        "bounds" => vec![("bound ratios", check_bounds)],
        "dominance" => vec![("sum to one", check_norms), ("cosine symmetry", check_cosine)],
        "horizon" => vec![("alpha sweep", check_horizon)],
        "pca" => vec![("explained variance", check_pca)],
        _ => vec![("known command", check_unknown)],
    };
    for (name, f) in checks {
        out.push(CheckResult::from(format!("{sub}/{name}"), f(dir, &manifest)));
    }
    out
}

fn check_unknown(_: &Path, m: &Manifest) -> Result<String> {
    bail!("unknown command {}", m.command)
}

fn read_json(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("corrupt JSON in {}", path.display()))
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: PathBuf, expected: &[&str]) -> Result<Self> {
        let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if !expected.is_empty() {
            ensure!(
                header.iter().map(String::as_str).eq(expected.iter().copied()),
                "{}: unexpected columns {header:?}",
                path.display()
            );
        }
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .with_context(|| format!("corrupt CSV in {}", path.display()))?;
        Ok(Self { path, header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: missing column {name}", self.path.display()))
    }

    fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        let s = &self.rows[row][col];
        s.parse()
            .with_context(|| format!("{} row {}: `{s}` is not a number", self.path.display(), row + 1))
    }
}

fn as_f64(v: &Value, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| anyhow!("{what} is not a number"))
}

fn check_tasks(dir: &Path, m: &Manifest) -> Result<String> {
    let mut n = 0;
    for f in m.files.iter().filter(|f| f.name.starts_with("task_")) {
        let path = dir.join(&f.name);
        let bytes = fs::read(&path)?;
        let t: TaskDataset =
            serde_json::from_slice(&bytes).with_context(|| format!("corrupt task file {}", path.display()))?;
        t.validate()
            .with_context(|| format!("{} fails validation", path.display()))?;
        ensure!(
            t.max_input_norm() <= t.m_x_bound * (1.0 + 1e-12),
            "{}: input norm {} exceeds {}",
            path.display(),
            t.max_input_norm(),
            t.m_x_bound
        );
        let counts = t.class_counts();
        ensure!(
            counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1,
            "{}: unbalanced labels {counts:?}",
            path.display()
        );
        n += 1;
    }
    ensure!(n > 0, "no task files");
    Ok(format!("{n} tasks within their norm bound, labels balanced"))
}

fn check_finetune(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("epochs.csv"), &crate::commands::EPOCHS_HEADER)?;
    let (l, g) = (t.col("loss")?, t.col("grad_norm")?);
    for i in 0..t.rows.len() {
        ensure!(
            t.f64_at(i, l)?.is_finite() && t.f64_at(i, g)? >= 0.0,
            "row {} not finite",
            i + 1
        );
    }
    Ok(format!("{} epoch rows", t.rows.len()))
}

fn check_merge(dir: &Path, _: &Manifest) -> Result<String> {
    let v = read_json(&dir.join("merge.json"))?;
    let e = &v["epoch_one"];
    let gap = as_f64(&e["gap_norm"], "epoch_one.gap_norm")?;
    let tol = epoch_one_tolerance(as_f64(&e["base_norm"], "epoch_one.base_norm")?);
    ensure!(gap <= tol, "epoch-1 gap {gap:e} exceeds {tol:e}");
    for key in ["ta_accuracy", "mt_accuracy"] {
        let arr = v[key].as_array().ok_or_else(|| anyhow!("{key} missing"))?;
        for a in arr {
            let a = as_f64(a, key)?;
            ensure!((0.0..=1.0).contains(&a), "{key} value {a} outside [0, 1]");
        }
    }
    Ok(format!("gap {gap:e} ≤ {tol:e}"))
}

/// `(eta, value)` columns of a CSV grouped by a key column, in file order.
fn grouped(t: &Table, key: &[&str], value: &str) -> Result<BTreeMap<Vec<String>, (Vec<f64>, Vec<f64>)>> {
    let keys = key.iter().map(|k| t.col(k)).collect::<Result<Vec<_>>>()?;
    let (e, v) = (t.col("eta")?, t.col(value)?);
    let mut out: BTreeMap<Vec<String>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for i in 0..t.rows.len() {
        let k = keys.iter().map(|&c| t.rows[i][c].clone()).collect();
        let entry = out.entry(k).or_default();
        entry.0.push(t.f64_at(i, e)?);
        entry.1.push(t.f64_at(i, v)?);
    }
    Ok(out)
}

fn check_slopes(t: &Table, key: &[&str], value: &str, band: (f64, f64), min_r2: Option<f64>) -> Result<String> {
    let groups = grouped(t, key, value)?;
    ensure!(!groups.is_empty(), "{}: no rows", t.path.display());
    let mut slopes = Vec::new();
    for (k, (etas, norms)) in &groups {
        let fit = fit_order_above(etas, norms, GAP_NOISE_FLOOR)
            .with_context(|| format!("{} {k:?}: cannot fit {value}", t.path.display()))?;
        ensure!(
            fit.within(band),
            "{} {k:?}: {value} slope {:.4} outside [{}, {}]",
            t.path.display(),
            fit.slope,
            band.0,
            band.1
        );
        if let Some(r2) = min_r2 {
            ensure!(fit.r2 >= r2, "{} {k:?}: r² {:.6} < {r2}", t.path.display(), fit.r2);
        }
        slopes.push(format!("{:.4}", fit.slope));
    }
    Ok(format!("{value} slopes {}", slopes.join(", ")))
}

fn check_gap_slope(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("gap.csv"), &GAP_HEADER)?;
    check_slopes(&t, &["alpha"], "gap_norm", SECOND_ORDER_BAND, Some(0.999))
}

fn check_corrected_slope(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("gap.csv"), &GAP_HEADER)?;
    check_slopes(&t, &["alpha"], "selected_residual", THIRD_ORDER_BAND, None)
}

fn check_lemma(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("lemma.csv"), &LEMMA_HEADER)?;
    let a = check_slopes(&t, &["task", "m"], "first_order_residual", SECOND_ORDER_BAND, None)?;
    let b = check_slopes(&t, &["task", "m"], "selected_residual", THIRD_ORDER_BAND, None)?;
    Ok(format!("{a}; {b}"))
}

fn check_bounds(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("checks.csv"), &CHECKS_HEADER)?;
    let (name, meas, bound, ratio, holds) = (
        t.col("name")?,
        t.col("measured")?,
        t.col("bound")?,
        t.col("ratio")?,
        t.col("holds")?,
    );
    for i in 0..t.rows.len() {
        let (m, b, r) = (t.f64_at(i, meas)?, t.f64_at(i, bound)?, t.f64_at(i, ratio)?);
        let expect = if b > 0.0 {
            m / b
        } else if m == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        ensure!(
            r == expect || (r - expect).abs() <= 1e-12 * expect.abs(),
            "{}: stored ratio {r} but measured/bound = {expect}",
            t.rows[i][name]
        );
        ensure!(t.rows[i][holds] == "true", "{}: ratio {r} exceeds 1", t.rows[i][name]);
        ensure!(r <= 1.0 + 1e-9, "{}: ratio {r} exceeds 1", t.rows[i][name]);
    }
    Ok(format!("{} ratios ≤ 1", t.rows.len()))
}

fn check_norms(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("norms.csv"), &NORMS_HEADER)?;
    let (task, v) = (t.col("task_id")?, t.col("normalized_norm")?);
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for i in 0..t.rows.len() {
        *sums.entry(t.rows[i][task].clone()).or_default() += t.f64_at(i, v)?;
    }
    for (k, s) in &sums {
        ensure!((s - 1.0).abs() <= 1e-12, "task {k}: normalized norms sum to {s}");
    }
    Ok(format!("{} tasks sum to one", sums.len()))
}

fn check_cosine(dir: &Path, _: &Manifest) -> Result<String> {
    let t = Table::read(dir.join("cosine.csv"), &crate::commands::COSINE_HEADER)?;
    let (task, i, j, c) = (t.col("task_id")?, t.col("i")?, t.col("j")?, t.col("cosine")?);
    let mut entries: BTreeMap<(String, String, String), f64> = BTreeMap::new();
    for r in 0..t.rows.len() {
        let row = &t.rows[r];
        entries.insert((row[task].clone(), row[i].clone(), row[j].clone()), t.f64_at(r, c)?);
    }
    for ((task, i, j), v) in &entries {
        if i == j {
            ensure!(*v == 1.0, "task {task}: diagonal ({i},{i}) is {v}");
        }
        let mirror = entries
            .get(&(task.clone(), j.clone(), i.clone()))
            .ok_or_else(|| anyhow!("task {task}: missing ({j},{i})"))?;
        ensure!(mirror == v, "task {task}: ({i},{j}) = {v} but ({j},{i}) = {mirror}");
        ensure!(v.abs() <= 1.0, "task {task}: |cos| > 1");
    }
    Ok(format!("{} entries symmetric, unit diagonal", entries.len()))
}

fn check_horizon(dir: &Path, _: &Manifest) -> Result<String> {
    let v = read_json(&dir.join("horizon.json"))?;
    let t = v["task_count"].as_u64().ok_or_else(|| anyhow!("task_count missing"))? as f64;
    let mut detail = Vec::new();
    for arm in ["one_epoch", "converged"] {
        let sweep = v[arm]["sweep"]
            .as_array()
            .ok_or_else(|| anyhow!("{arm}.sweep missing"))?;
        ensure!(
            sweep
                .iter()
                .any(|r| r["alpha"].as_f64().is_some_and(|a| (a - 1.0 / t).abs() < 1e-15)),
            "{arm}: α = 1/T missing from the sweep"
        );
        let mut best = f64::NEG_INFINITY;
        for r in sweep {
            let accs = r["per_task"]
                .as_array()
                .ok_or_else(|| anyhow!("{arm}: per_task missing"))?;
            let mut sum = 0.0;
            for a in accs {
                let a = as_f64(a, "accuracy")?;
                ensure!((0.0..=1.0).contains(&a), "{arm}: accuracy {a} outside [0, 1]");
                sum += a;
            }
            let mean = as_f64(&r["mean"], "mean")?;
            ensure!(
                (mean - sum / accs.len() as f64).abs() <= 1e-12,
                "{arm}: mean {mean} inconsistent"
            );
            best = best.max(mean);
        }
        let reported = as_f64(&v[arm]["best"]["mean"], "best.mean")?;
        ensure!(
            reported == best,
            "{arm}: best mean {reported} but sweep maximum is {best}"
        );
        detail.push(format!("{arm} best {best:.3}"));
    }
    Ok(detail.join(", "))
}

fn check_pca(dir: &Path, _: &Manifest) -> Result<String> {
    let v = read_json(&dir.join("pca.json"))?;
    let p = &v["projection"];
    let ratios = p["explained_variance_ratio"]
        .as_array()
        .ok_or_else(|| anyhow!("ratios missing"))?;
    let mut total = 0.0;
    for r in ratios {
        let r = as_f64(r, "explained_variance_ratio")?;
        ensure!((0.0..=1.0 + 1e-12).contains(&r), "ratio {r} outside [0, 1]");
        total += r;
    }
    ensure!(total <= 1.0 + 1e-12, "ratios sum to {total}");
    let points = p["points"].as_array().ok_or_else(|| anyhow!("points missing"))?.len();
    let rounds = v["rounds"].as_u64().ok_or_else(|| anyhow!("rounds missing"))? as usize;
    ensure!(points == rounds + 1, "{points} points for {rounds} rounds");
    Ok(format!("ratios sum to {total:.4}"))
}

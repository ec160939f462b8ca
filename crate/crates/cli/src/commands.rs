//! Subcommand implementations. Each computes its results first and then
//! writes them through a single [`ArtifactWriter`].

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};
use tavlab::analysis::{
    gap_sweep, gradient_dominance_study, lemma_scan, merge_horizon_experiment, pca_project, theorem3_bounds,
    BoundReport, DominanceRecord, GapSweep, HorizonReport, LemmaReport, PcaProjection,
};
use tavlab::merge::{merge_ta, task_vector, CurvatureTermConfig};
use tavlab::network::ModelCheckpoint;
use tavlab::tensor::norm2;
use tavlab::trainer::{accuracy, finetune_all, iterative_ta, train_multitask, TrainConfig};
use tavlab::{MlpModel, TaskDataset};

use crate::artifacts::{num, ArtifactWriter};
use crate::config::ExperimentConfig;

pub const COMMANDS: [&str; 8] = [
    "gen-tasks",
    "finetune",
    "merge",
    "gap-scan",
    "bounds",
    "dominance",
    "horizon",
    "pca",
];

pub const TASK_SUMMARY_HEADER: [&str; 7] = [
    "task_id",
    "seed",
    "samples",
    "max_input_norm",
    "m_x_bound",
    "degenerate",
    "class_counts",
];
pub const EPOCHS_HEADER: [&str; 4] = ["task_id", "epoch", "loss", "grad_norm"];
pub const MERGE_HEADER: [&str; 3] = ["task_id", "ta_accuracy", "mt_accuracy"];
pub const GAP_HEADER: [&str; 6] = [
    "alpha",
    "eta",
    "gap_norm",
    "first_order_residual",
    "selected_residual",
    "c_norm",
];
pub const FITS_HEADER: [&str; 6] = ["alpha", "quantity", "slope", "intercept", "r2", "used_points"];
pub const LEMMA_HEADER: [&str; 5] = ["task", "m", "eta", "first_order_residual", "selected_residual"];
pub const CHECKS_HEADER: [&str; 6] = ["kind", "name", "measured", "bound", "ratio", "holds"];
pub const NORMS_HEADER: [&str; 3] = ["task_id", "epoch", "normalized_norm"];
pub const COSINE_HEADER: [&str; 4] = ["task_id", "i", "j", "cosine"];
pub const POINTS_HEADER: [&str; 3] = ["round", "pc1", "pc2"];

/// Tolerance of the one-epoch merge/multitask equality.
pub fn epoch_one_tolerance(base_norm: f64) -> f64 {
    1e-12 * (1.0 + base_norm)
}

/// Config, base model and task family shared by every subcommand.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub base: MlpModel,
    pub tasks: Vec<TaskDataset>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        let base = cfg.base_model().context("building the base model")?;
        let tasks = cfg.family().context("generating the task family")?;
        Ok(Self {
            out: out.unwrap_or_else(|| cfg.output_dir.clone()),
            cfg,
            base,
            tasks,
        })
    }

    fn writer(&self, command: &str) -> Result<ArtifactWriter> {
        ArtifactWriter::new(&self.out, command, &self.cfg)
    }

    fn gap_tasks(&self) -> &[TaskDataset] {
        &self.tasks[..self.cfg.analysis.gap_tasks]
    }
}

pub fn run(ctx: &Context, command: &str) -> Result<PathBuf> {
    let result = match command {
        "gen-tasks" => gen_tasks(ctx),
        "finetune" => finetune(ctx),
        "merge" => merge(ctx),
        "gap-scan" => gap_scan(ctx),
        "bounds" => bounds(ctx),
        "dominance" => dominance(ctx),
        "horizon" => horizon(ctx),
        "pca" => pca(ctx),
        other => anyhow::bail!("unknown command {other}"),
    };
    result.with_context(|| format!("{command} failed"))
}

fn gen_tasks(ctx: &Context) -> Result<PathBuf> {
    let mut w = ctx.writer("gen-tasks")?;
    let mut rows = Vec::new();
    for t in &ctx.tasks {
        w.json(&format!("task_{}", t.task_id), t)?;
        let counts: Vec<String> = t.class_counts().iter().map(|c| c.to_string()).collect();
        rows.push(vec![
            t.task_id.to_string(),
            t.seed.to_string(),
            t.len().to_string(),
            num(t.max_input_norm()),
            num(t.m_x_bound),
            t.degenerate.to_string(),
            counts.join(";"),
        ]);
    }
    w.csv("summary", &TASK_SUMMARY_HEADER, &rows)?;
    w.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub task_id: usize,
    pub eta: f64,
    pub epochs: usize,
    pub task_vector_norm: f64,
    pub final_accuracy: f64,
    pub model: ModelCheckpoint,
}

fn finetune(ctx: &Context) -> Result<PathBuf> {
    let cfg = TrainConfig::new(ctx.cfg.train.eta, ctx.cfg.train.epochs);
    let trajectories = finetune_all(&ctx.base, &ctx.tasks, &cfg)?;
    let mut w = ctx.writer("finetune")?;
    w.json("base", &ctx.base.to_checkpoint())?;
    let mut rows = Vec::new();
    for (traj, task) in trajectories.iter().zip(&ctx.tasks) {
        let model = MlpModel::unflatten(ctx.base.arch(), traj.last())?;
        w.json(
            &format!("task_{}", task.task_id),
            &FinetuneRecord {
                task_id: task.task_id,
                eta: cfg.eta,
                epochs: traj.epochs(),
                task_vector_norm: norm2(&task_vector(traj)?.delta)?,
                final_accuracy: accuracy(&model, task)?,
                model: model.to_checkpoint(),
            },
        )?;
        for r in &traj.records {
            rows.push(vec![
                task.task_id.to_string(),
                r.epoch.to_string(),
                num(r.loss),
                num(r.grad_norm),
            ]);
        }
    }
    w.csv("epochs", &EPOCHS_HEADER, &rows)?;
    w.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EpochOneCheck {
    pub gap_norm: f64,
    pub base_norm: f64,
    pub tolerance: f64,
    pub holds: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MergeRecord {
    pub alpha: f64,
    pub eta: f64,
    pub epochs: usize,
    pub epoch_one: EpochOneCheck,
    /// `‖θ_TA^(k) − θ_MT^(k)‖` at `k = epochs`.
    pub gap_norm: f64,
    pub ta_accuracy: Vec<f64>,
    pub mt_accuracy: Vec<f64>,
    pub ta_model: ModelCheckpoint,
    pub mt_model: ModelCheckpoint,
}

fn merge_at(ctx: &Context, epochs: usize) -> Result<(MlpModel, MlpModel)> {
    let t = &ctx.cfg.train;
    let cfg = TrainConfig::new(t.eta, epochs).with_alpha(t.alpha);
    let vectors = finetune_all(&ctx.base, &ctx.tasks, &cfg)?
        .iter()
        .map(task_vector)
        .collect::<tavlab::Result<Vec<_>>>()?;
    let ta = merge_ta(&ctx.base, &vectors, t.alpha)?;
    let mt = train_multitask(&ctx.base, &ctx.tasks, &cfg)?;
    Ok((ta, MlpModel::unflatten(ctx.base.arch(), mt.last())?))
}

fn merge(ctx: &Context) -> Result<PathBuf> {
    let t = &ctx.cfg.train;
    let (ta1, mt1) = merge_at(ctx, 1)?;
    let base_norm = norm2(&ctx.base.flatten())?;
    let gap1 = norm2(&ta1.flatten().sub(&mt1.flatten())?)?;
    let tolerance = epoch_one_tolerance(base_norm);
    let (ta, mt) = merge_at(ctx, t.epochs)?;
    let ta_accuracy = ctx
        .tasks
        .iter()
        .map(|d| accuracy(&ta, d))
        .collect::<tavlab::Result<Vec<_>>>()?;
    let mt_accuracy = ctx
        .tasks
        .iter()
        .map(|d| accuracy(&mt, d))
        .collect::<tavlab::Result<Vec<_>>>()?;
    let record = MergeRecord {
        alpha: t.alpha,
        eta: t.eta,
        epochs: t.epochs,
        epoch_one: EpochOneCheck {
            gap_norm: gap1,
            base_norm,
            tolerance,
            holds: gap1 <= tolerance,
        },
        gap_norm: norm2(&ta.flatten().sub(&mt.flatten())?)?,
        ta_accuracy,
        mt_accuracy,
        ta_model: ta.to_checkpoint(),
        mt_model: mt.to_checkpoint(),
    };
    let rows: Vec<Vec<String>> = ctx
        .tasks
        .iter()
        .enumerate()
        .map(|(i, d)| {
            vec![
                d.task_id.to_string(),
                num(record.ta_accuracy[i]),
                num(record.mt_accuracy[i]),
            ]
        })
        .collect();
    let mut w = ctx.writer("merge")?;
    w.json("merge", &record)?;
    w.csv("accuracy", &MERGE_HEADER, &rows)?;
    w.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GapScanRecord {
    pub k: usize,
    pub task_count: usize,
    pub sweep: GapSweep,
    pub selected_label: Option<String>,
    pub lemma: Vec<LemmaReport>,
}

fn selected_index(selected: Option<CurvatureTermConfig>, candidates: &[CurvatureTermConfig]) -> Option<usize> {
    selected.and_then(|s| candidates.iter().position(|c| *c == s))
}

fn gap_scan(ctx: &Context) -> Result<PathBuf> {
    let a = &ctx.cfg.analysis;
    let tasks = ctx.gap_tasks();
    let sweep = gap_sweep(&ctx.base, tasks, a.gap_epochs, &a.alpha_sweep, &a.eta_grid)?;
    let mut lemma = Vec::new();
    for &alpha in &a.alpha_sweep {
        for &m in &a.lemma_epochs {
            for t in 0..tasks.len() {
                lemma.push(lemma_scan(&ctx.base, tasks, t, m, alpha, &a.eta_grid)?);
            }
        }
    }

    let candidates = CurvatureTermConfig::candidates();
    let sel = selected_index(sweep.selected, &candidates);
    let mut gap_rows = Vec::new();
    let mut fit_rows = Vec::new();
    for r in &sweep.reports {
        for p in &r.points {
            gap_rows.push(vec![
                num(r.alpha),
                num(p.eta),
                num(p.gap_norm),
                num(p.first_order_residual),
                sel.map_or(String::new(), |i| num(p.corrected_residuals[i])),
                num(p.c_norm),
            ]);
        }
        let mut fit_row = |quantity: &str, fit: Option<&tavlab::analysis::OrderFit>| {
            if let Some(f) = fit {
                fit_rows.push(vec![
                    num(r.alpha),
                    quantity.to_string(),
                    num(f.slope),
                    num(f.intercept),
                    num(f.r2),
                    f.used_points.to_string(),
                ]);
            }
        };
        fit_row("gap", r.raw_fit.as_ref());
        fit_row("first_order_residual", r.first_order_fit.as_ref());
        for c in &r.candidates {
            fit_row(&format!("corrected:{}", c.label), c.fit.as_ref());
        }
    }
    let mut lemma_rows = Vec::new();
    for l in &lemma {
        let sel = l
            .selected
            .as_ref()
            .and_then(|s| l.candidates.iter().position(|c| c.config == s.config));
        for p in &l.points {
            lemma_rows.push(vec![
                l.task.to_string(),
                l.m.to_string(),
                num(p.eta),
                num(p.first_order_residual),
                sel.map_or(String::new(), |i| num(p.corrected_residuals[i])),
            ]);
        }
    }
    let record = GapScanRecord {
        k: a.gap_epochs,
        task_count: tasks.len(),
        selected_label: sweep.selected.map(|c| c.label()),
        sweep,
        lemma,
    };
    let mut w = ctx.writer("gap-scan")?;
    w.json("gap_scan", &record)?;
    w.csv("gap", &GAP_HEADER, &gap_rows)?;
    w.csv("fits", &FITS_HEADER, &fit_rows)?;
    w.csv("lemma", &LEMMA_HEADER, &lemma_rows)?;
    w.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BoundsRecord {
    pub eta: f64,
    pub epochs: usize,
    pub report: BoundReport,
}

fn bounds(ctx: &Context) -> Result<PathBuf> {
    let a = &ctx.cfg.analysis;
    let tasks = ctx.gap_tasks();
    let cfg = TrainConfig::new(a.bounds_eta, a.gap_epochs).with_alpha(a.bounds_alpha);
    let mt = train_multitask(&ctx.base, tasks, &cfg)?;
    let report = theorem3_bounds(
        ctx.base.arch(),
        &mt.checkpoints,
        tasks,
        a.bounds_alpha,
        a.gap_epochs - 2,
    )?;
    let mut rows = Vec::new();
    for (kind, list) in [("check", &report.checks), ("premise", &report.premises)] {
        for c in list {
            rows.push(vec![
                kind.to_string(),
                c.name.clone(),
                num(c.measured),
                num(c.bound),
                num(c.ratio),
                c.holds.to_string(),
            ]);
        }
    }
    let mut w = ctx.writer("bounds")?;
    w.json(
        "bounds",
        &BoundsRecord {
            eta: a.bounds_eta,
            epochs: a.gap_epochs,
            report,
        },
    )?;
    w.csv("checks", &CHECKS_HEADER, &rows)?;
    w.finish()
}

/// Cosine threshold reported (not enforced) for the epoch-1 row.
pub const HIGH_COSINE: f64 = 0.8;

#[derive(Debug, Serialize, Deserialize)]
pub struct DominanceSummary {
    pub eta: f64,
    pub epochs: usize,
    pub first_epoch_dominant_tasks: usize,
    pub min_first_row_cosine: f64,
    pub tasks_with_high_cosine: usize,
    pub high_cosine_threshold: f64,
    pub records: Vec<DominanceRecord>,
}

pub fn min_first_row_cosine(rec: &DominanceRecord) -> f64 {
    let n = rec.cosine.matrix.rows();
    (1..n).map(|j| rec.cosine.matrix[(0, j)]).fold(f64::INFINITY, f64::min)
}

pub fn dominance_summary(ctx: &Context) -> Result<DominanceSummary> {
    let epochs = ctx.cfg.analysis.dominance_epochs;
    let records = gradient_dominance_study(&ctx.base, &ctx.tasks, ctx.cfg.train.eta, epochs)?;
    Ok(DominanceSummary {
        eta: ctx.cfg.train.eta,
        epochs,
        first_epoch_dominant_tasks: records.iter().filter(|r| r.first_epoch_dominant).count(),
        min_first_row_cosine: records.iter().map(min_first_row_cosine).fold(f64::INFINITY, f64::min),
        tasks_with_high_cosine: records.iter().filter(|r| min_first_row_cosine(r) > HIGH_COSINE).count(),
        high_cosine_threshold: HIGH_COSINE,
        records,
    })
}

fn dominance(ctx: &Context) -> Result<PathBuf> {
    let summary = dominance_summary(ctx)?;
    let mut norms = Vec::new();
    let mut cos = Vec::new();
    for r in &summary.records {
        for (e, v) in r.normalized_norms.iter().enumerate() {
            norms.push(vec![r.task_id.to_string(), (e + 1).to_string(), num(*v)]);
        }
        let m = &r.cosine.matrix;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                cos.push(vec![
                    r.task_id.to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    num(m[(i, j)]),
                ]);
            }
        }
    }
    let mut w = ctx.writer("dominance")?;
    w.json("dominance", &summary)?;
    w.csv("norms", &NORMS_HEADER, &norms)?;
    w.csv("cosine", &COSINE_HEADER, &cos)?;
    w.finish()
}

pub fn horizon_report(ctx: &Context) -> Result<HorizonReport> {
    Ok(merge_horizon_experiment(&ctx.base, &ctx.tasks, &ctx.cfg.horizon())?)
}

fn horizon(ctx: &Context) -> Result<PathBuf> {
    let report = horizon_report(ctx)?;
    let mut header: Vec<String> = vec!["arm".into(), "alpha".into(), "mean".into()];
    header.extend(ctx.tasks.iter().map(|t| format!("task_{}", t.task_id)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for arm in [&report.one_epoch, &report.converged] {
        for r in &arm.sweep {
            let mut row = vec![arm.name.clone(), num(r.alpha), num(r.mean)];
            row.extend(r.per_task.iter().map(|v| num(*v)));
            rows.push(row);
        }
    }
    let mut w = ctx.writer("horizon")?;
    w.json("horizon", &report)?;
    w.csv("sweep", &header, &rows)?;
    w.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PcaRecord {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub eta: f64,
    pub alpha: f64,
    pub projection: PcaProjection,
}

fn pca(ctx: &Context) -> Result<PathBuf> {
    let a = &ctx.cfg.analysis;
    let t = &ctx.cfg.train;
    let traj = iterative_ta(
        &ctx.base,
        &ctx.tasks,
        a.pca_rounds,
        a.pca_epochs_per_round,
        t.eta,
        t.alpha,
    )?;
    let projection = pca_project(&traj.checkpoints)?;
    let rows: Vec<Vec<String>> = projection
        .points
        .iter()
        .enumerate()
        .map(|(r, p)| vec![r.to_string(), num(p[0]), num(p[1])])
        .collect();
    let mut w = ctx.writer("pca")?;
    w.json(
        "pca",
        &PcaRecord {
            rounds: a.pca_rounds,
            epochs_per_round: a.pca_epochs_per_round,
            eta: t.eta,
            alpha: t.alpha,
            projection,
        },
    )?;
    w.csv("points", &POINTS_HEADER, &rows)?;
    w.finish()
}

/// Runs the named commands in order; returns the directories written.
pub fn run_many(ctx: &Context, commands: &[&str]) -> Result<Vec<PathBuf>> {
    commands.iter().map(|c| run(ctx, c)).collect()
}

pub fn output_root(ctx: &Context) -> &Path {
    &ctx.out
}

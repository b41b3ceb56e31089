//! Config-driven experiment runs: per-seed directory layout, checkpoints,
//! metrics files and cross-run reports.
//!
//! Layout under an output directory:
//!
//! ```text
//! seed_<s>/teacher/{checkpoint.json, metrics.csv, final.json}
//! seed_<s>/<stage>/{checkpoint.json, metrics.csv, final.json, snapshots/epoch_<E>_{teacher|student}.csv}
//! ablation_<grid>.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{self, Dataset, SyntheticSpec, Task};
use crate::error::{Error, Result};
use crate::models::{self, Architecture, Checkpoint};
use crate::otsolver::SinkhornConfig;
use crate::trainer::{self, AblationGrid, AblationTable, MetricsLog, SeededTeacher, Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated per run seed with `seed = spec.seed + run seed`.
    Synthetic(SyntheticSpec),
    /// One dataset file shared by all run seeds.
    Path(PathBuf),
}

/// Optimization settings of one stage; missing keys take the trainer defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub k_anchors: usize,
    pub sinkhorn: SinkhornConfig,
    pub temperature: f64,
    pub snapshot_every: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            lambda: d.lambda,
            k_anchors: d.k_anchors,
            sinkhorn: d.sinkhorn,
            temperature: d.temperature,
            snapshot_every: d.snapshot_every,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Anchors,
    Epsilon,
    Batch,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Anchors => "anchors",
            GridKind::Epsilon => "epsilon",
            GridKind::Batch => "batch",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "anchors" => Some(GridKind::Anchors),
            "epsilon" => Some(GridKind::Epsilon),
            "batch" => Some(GridKind::Batch),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub batch_sizes: Vec<usize>,
    pub k_anchors: Vec<usize>,
    pub epsilons: Vec<f64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            batch_sizes: vec![16, 32, 64],
            k_anchors: vec![4, 8, 16],
            epsilons: vec![0.01, 0.1, 1.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub teacher: StageSettings,
    #[serde(default)]
    pub student: StageSettings,
    #[serde(default)]
    pub ablation: AblationSettings,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn sew_default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec::sew_classification(0)),
            architecture: Architecture::default(),
            teacher: StageSettings::default(),
            student: StageSettings::default(),
            ablation: AblationSettings::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.architecture.validate()?;
        self.train_config(Stage::Teacher, self.seeds[0]).validate()?;
        self.train_config(Stage::StudentPkdot, self.seeds[0]).validate()
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(spec) => datagen::generate(&SyntheticSpec {
                seed: spec.seed.wrapping_add(seed),
                ..spec.clone()
            }),
            DataSource::Path(p) => datagen::load(p),
        }
    }

    pub fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let s = if stage == Stage::Teacher {
            &self.teacher
        } else {
            &self.student
        };
        TrainConfig {
            stage,
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            momentum: s.momentum,
            lambda: s.lambda,
            k_anchors: s.k_anchors,
            sinkhorn: s.sinkhorn,
            temperature: s.temperature,
            seed,
            snapshot_every: s.snapshot_every,
            arch: self.architecture.clone(),
            record_anchors: false,
        }
    }

    pub fn grid(&self, kind: GridKind) -> Result<AblationGrid> {
        let s = &self.student;
        let grid = match kind {
            GridKind::Anchors => AblationGrid {
                batch_sizes: vec![s.batch_size],
                k_anchors: self.ablation.k_anchors.clone(),
                epsilons: vec![s.sinkhorn.epsilon],
            },
            GridKind::Epsilon => AblationGrid {
                batch_sizes: vec![s.batch_size],
                k_anchors: vec![s.k_anchors],
                epsilons: self.ablation.epsilons.clone(),
            },
            GridKind::Batch => AblationGrid {
                batch_sizes: self.ablation.batch_sizes.clone(),
                k_anchors: vec![s.k_anchors],
                epsilons: vec![s.sinkhorn.epsilon],
            },
        };
        if grid.points().is_empty() {
            return Err(Error::Config(format!("ablation grid '{}' is empty", kind.name())));
        }
        Ok(grid)
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn stage_dir(out: &Path, seed: u64, stage: Stage) -> PathBuf {
    seed_dir(out, seed).join(stage.name())
}

/// Final metrics of one stage run, stored as `final.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: String,
    pub seed: u64,
    pub task: Task,
    pub best_epoch: usize,
    pub metric_names: Vec<String>,
    pub val_metrics: Vec<f64>,
}

pub fn metric_names(task: Task) -> Vec<String> {
    match task {
        Task::Classification { .. } => vec!["accuracy".into()],
        Task::Regression { targets } => (1..=targets).map(|j| format!("ccc_{j}")).collect(),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::contract(e.to_string()))?;
    write(path, &(text + "\n"))
}

fn write_log(dir: &Path, log: &MetricsLog) -> Result<()> {
    write(&dir.join("metrics.csv"), &log.to_csv())?;
    let snaps = dir.join("snapshots");
    if snaps.exists() {
        fs::remove_dir_all(&snaps).map_err(|e| Error::io(&snaps, e))?;
    }
    for s in &log.snapshots {
        write(
            &snaps.join(format!("epoch_{}_teacher.csv", s.epoch)),
            &s.teacher.to_csv(),
        )?;
        write(
            &snaps.join(format!("epoch_{}_student.csv", s.epoch)),
            &s.student.to_csv(),
        )?;
    }
    Ok(())
}

fn load_teacher(out: &Path, seed: u64) -> Result<SeededTeacher> {
    let path = stage_dir(out, seed, Stage::Teacher).join("checkpoint.json");
    match models::load_checkpoint(&path)? {
        Checkpoint::Teacher { teacher, tnet } => Ok(SeededTeacher { seed, teacher, tnet }),
        Checkpoint::Student { .. } => Err(Error::Config(format!("{} holds a student checkpoint", path.display()))),
    }
}

/// Runs one stage for one seed and writes its directory.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage, seed: u64, out: &Path) -> Result<RunSummary> {
    let ds = cfg.dataset(seed)?;
    let tc = cfg.train_config(stage, seed);
    let dir = stage_dir(out, seed, stage);
    let (log, best_epoch, val_metrics, checkpoint) = if stage == Stage::Teacher {
        let run = trainer::train_teacher(&ds, &tc)?;
        let ck = Checkpoint::Teacher {
            teacher: run.teacher,
            tnet: run.tnet,
        };
        (run.log, run.best_epoch, run.val_metrics, ck)
    } else {
        let t = load_teacher(out, seed)?;
        let run = trainer::train_student(&ds, &t.teacher, &t.tnet, &tc)?;
        (
            run.log,
            run.best_epoch,
            run.val_metrics,
            Checkpoint::Student { student: run.student },
        )
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    models::save_checkpoint(&checkpoint, &dir.join("checkpoint.json"))?;
    write_log(&dir, &log)?;
    let summary = RunSummary {
        stage: stage.name().into(),
        seed,
        task: ds.task(),
        best_epoch,
        metric_names: metric_names(ds.task()),
        val_metrics,
    };
    write_json(&dir.join("final.json"), &summary)?;
    Ok(summary)
}

/// Ablation over one grid factor; teachers come from each seed's teacher run.
pub fn run_ablation(cfg: &ExperimentConfig, kind: GridKind, out: &Path) -> Result<(AblationTable, PathBuf)> {
    let grid = cfg.grid(kind)?;
    let teachers = cfg
        .seeds
        .iter()
        .map(|&s| load_teacher(out, s))
        .collect::<Result<Vec<_>>>()?;
    let base = cfg.train_config(Stage::StudentPkdot, cfg.seeds[0]);
    // one dataset per seed: run each seed's slice of the grid on its own data
    let mut rows = Vec::new();
    let mut task = None;
    for t in teachers {
        let ds = cfg.dataset(t.seed)?;
        task = Some(ds.task());
        let table = trainer::ablate(&ds, &base, std::slice::from_ref(&t), &grid)?;
        rows.extend(table.rows);
    }
    rows.sort_by_key(|r| r.grid_index);
    let table = AblationTable {
        task: task.expect("non-empty seed list"),
        rows,
    };
    let path = out.join(format!("ablation_{}.csv", kind.name()));
    write(&path, &table.to_csv())?;
    Ok((table, path))
}

/// Mean and sample standard deviation of one stage's metrics across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: String,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    pub metric_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,n_runs");
        for m in &self.metric_names {
            out.push_str(&format!(",{m}_mean,{m}_std"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.stage, r.n_runs));
            for (m, s) in r.mean.iter().zip(&r.std) {
                out.push_str(&format!(",{m},{s}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Every `final.json` below `dir`, at most three levels deep, in path order.
fn find_summaries(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let f = dir.join("final.json");
    if f.is_file() {
        found.push(f);
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_summaries(&e, depth - 1, found)?;
    }
    Ok(())
}

pub fn summaries(dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut paths = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(Error::Config(format!("run directory {} does not exist", d.display())));
        }
        find_summaries(d, 3, &mut paths)?;
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

pub fn report(runs: &[RunSummary]) -> Result<Report> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Config("no completed runs found".into()))?;
    if let Some(r) = runs.iter().find(|r| r.task != first.task) {
        return Err(Error::Config(format!(
            "cannot compare runs of different tasks: {} ({} seed {}) vs {} ({} seed {})",
            first.task.name(),
            first.stage,
            first.seed,
            r.task.name(),
            r.stage,
            r.seed
        )));
    }
    let mut stages: Vec<&str> = Vec::new();
    for r in runs {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let width = first.val_metrics.len();
    let rows = stages
        .into_iter()
        .map(|stage| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.stage == stage).collect();
            let n = group.len() as f64;
            let mean: Vec<f64> = (0..width)
                .map(|j| group.iter().map(|r| r.val_metrics[j]).sum::<f64>() / n)
                .collect();
            let std = (0..width)
                .map(|j| {
                    if group.len() < 2 {
                        return 0.0;
                    }
                    let ss: f64 = group.iter().map(|r| (r.val_metrics[j] - mean[j]).powi(2)).sum();
                    (ss / (n - 1.0)).sqrt()
                })
                .collect();
            ReportRow {
                stage: stage.to_string(),
                n_runs: group.len(),
                seeds: group.iter().map(|r| r.seed).collect(),
                mean,
                std,
            }
        })
        .collect();
    Ok(Report {
        task: first.task,
        metric_names: first.metric_names.clone(),
        rows,
    })
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    write(path, &report.to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(stage: &str, seed: u64, acc: f64) -> RunSummary {
        RunSummary {
            stage: stage.into(),
            seed,
            task: Task::Classification { num_classes: 5 },
            best_epoch: 1,
            metric_names: vec!["accuracy".into()],
            val_metrics: vec![acc],
        }
    }

    #[test]
    fn config_rejects_unknown_and_missing_keys() {
        let err = ExperimentConfig::from_json(r#"{"seeds":[0]}"#).unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"data":{"synthetic":{"task":{"classification":{"num_classes":2}},"n_samples":50,"latent_dim":2,
            "d_prevalent":3,"d_privileged":3,"noise_prevalent":1.0,"noise_privileged":0.1,"seed":0}},
            "seeds":[0],"bogus":1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::sew_default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn grids_pick_one_factor() {
        let cfg = ExperimentConfig::sew_default();
        assert_eq!(cfg.grid(GridKind::Epsilon).unwrap().points().len(), 4);
        assert_eq!(cfg.grid(GridKind::Anchors).unwrap().points().len(), 3);
        let mut cfg = cfg;
        cfg.ablation.k_anchors.clear();
        assert!(matches!(cfg.grid(GridKind::Anchors), Err(Error::Config(_))));
    }

    #[test]
    fn report_mean_and_std() {
        let runs = vec![
            summary("student-pkdot", 0, 0.8),
            summary("student-pkdot", 1, 0.9),
            summary("prevalent-only", 0, 0.7),
        ];
        let r = report(&runs).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!((r.rows[0].mean[0] - 0.85).abs() < 1e-15);
        assert!((r.rows[0].std[0] - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(r.rows[1].std[0], 0.0);
        assert!(r.to_csv().starts_with("stage,n_runs,accuracy_mean,accuracy_std\n"));

        let mut mixed = runs;
        mixed[2].task = Task::Regression { targets: 2 };
        assert!(matches!(report(&mixed), Err(Error::Config(_))));
        assert!(matches!(report(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn stage_runs_write_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::sew_default();
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.n_samples = 120;
        }
        cfg.teacher.epochs = 2;
        cfg.student.epochs = 2;
        cfg.seeds = vec![3];
        let missing = run_stage(&cfg, Stage::StudentPkdot, 3, dir.path()).unwrap_err();
        assert!(matches!(missing, Error::MissingCheckpoint(_)));
        run_stage(&cfg, Stage::Teacher, 3, dir.path()).unwrap();
        let s = run_stage(&cfg, Stage::StudentPkdot, 3, dir.path()).unwrap();
        let sd = stage_dir(dir.path(), 3, Stage::StudentPkdot);
        assert!(sd.join("snapshots/epoch_1_teacher.csv").is_file());
        assert!(sd.join("snapshots/epoch_2_student.csv").is_file());
        let found = summaries(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(found.len(), 2);
        assert!(found.contains(&s));
    }
}

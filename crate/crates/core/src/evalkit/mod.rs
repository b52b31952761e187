//! Detection metrics and the comparison experiments built on them.

mod metrics;

pub use metrics::{
    ap_from_flags, average_precision, match_detections, mean_ap, proposal_recall, rare_classes,
    MapReport, MatchResult,
};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentMode;
use crate::config::RunConfig;
use crate::detector::{infer_with_budget, propose, Detection, Detector, LossFlavor, ScoringMode};
use crate::error::{Error, Result};
use crate::synthdata::{derive_seed, generate_dataset, SceneDataset, SceneFeatures};
use crate::trainer::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// {center, recall} assignment x {fused, non-fused} scoring.
    ProbAblation,
    /// Proposal budgets for fused center-style and non-fused recall-style.
    ProposalSweep,
    /// First-stage-only, non-fused two-stage and fused two-stage detectors.
    StageStyle,
    /// Softmax cross-entropy against federated BCE, fused center-style.
    FedLoss,
}

impl ExperimentKind {
    pub fn conditions(self) -> Vec<Condition> {
        use Condition as C;
        match self {
            ExperimentKind::ProbAblation => vec![C::CENTER_FUSED, C::CENTER_NONFUSED, C::RECALL_FUSED, C::RECALL_NONFUSED],
            ExperimentKind::ProposalSweep => vec![C::CENTER_FUSED, C::RECALL_NONFUSED],
            ExperimentKind::StageStyle => vec![C::ONE_STAGE, C::RECALL_NONFUSED, C::CENTER_FUSED],
            ExperimentKind::FedLoss => vec![C::CENTER_FUSED, C::CENTER_FUSED_FEDERATED],
        }
    }
}

/// One trained model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Condition {
    pub name: &'static str,
    pub assignment: AssignmentMode,
    pub scoring: ScoringMode,
    pub flavor: LossFlavor,
    pub one_stage: bool,
}

impl Condition {
    const fn two_stage(name: &'static str, assignment: AssignmentMode, scoring: ScoringMode) -> Self {
        Self { name, assignment, scoring, flavor: LossFlavor::Softmax, one_stage: false }
    }

    pub const CENTER_FUSED: Condition = Condition::two_stage("center_fused", AssignmentMode::Center, ScoringMode::Probabilistic);
    pub const CENTER_NONFUSED: Condition = Condition::two_stage("center_nonfused", AssignmentMode::Center, ScoringMode::NonprobBaseline);
    pub const RECALL_FUSED: Condition = Condition::two_stage("recall_fused", AssignmentMode::Recall, ScoringMode::Probabilistic);
    pub const RECALL_NONFUSED: Condition = Condition::two_stage("recall_nonfused", AssignmentMode::Recall, ScoringMode::NonprobBaseline);
    pub const ONE_STAGE: Condition = Condition {
        name: "one_stage",
        assignment: AssignmentMode::Center,
        scoring: ScoringMode::NonprobBaseline,
        flavor: LossFlavor::Softmax,
        one_stage: true,
    };
    pub const CENTER_FUSED_FEDERATED: Condition = Condition {
        name: "center_fused_federated",
        assignment: AssignmentMode::Center,
        scoring: ScoringMode::Probabilistic,
        flavor: LossFlavor::Federated,
        one_stage: false,
    };
}

/// Metrics of one model on one test split at one proposal budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub condition: String,
    pub seed: u64,
    #[serde(rename = "K")]
    pub budget: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
    #[serde(rename = "rare_mAP")]
    pub rare_map: f64,
    pub train_seconds: f64,
}

/// Median over seeds of one (condition, budget) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    #[serde(rename = "K")]
    pub budget: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
    #[serde(rename = "rare_mAP")]
    pub rare_map: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub tool_version: String,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunResult>,
    pub run_config: serde_json::Value,
}

impl ExperimentReport {
    pub fn row(&self, condition: &str, budget: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition && r.budget == budget)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(file)?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json_path, e))
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Train and test splits for one run seed.
pub fn split_datasets(config: &RunConfig, seed: u64) -> Result<(SceneDataset, SceneDataset)> {
    let base = config.experiment.data_seed;
    let train_set = generate_dataset(&config.data, derive_seed(base, seed))?;
    let mut test_cfg = config.data.clone();
    test_cfg.num_scenes = config.experiment.test_scenes;
    let test_set = generate_dataset(&test_cfg, derive_seed(base ^ 0x7E57_7E57, seed))?;
    Ok((train_set, test_set))
}

/// mAP report and AR of a model on a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(rename = "K")]
    pub budget: usize,
    pub report: MapReport,
    #[serde(rename = "AR")]
    pub ar: f64,
}

pub fn evaluate(
    model: &Detector,
    dataset: &SceneDataset,
    features: &[SceneFeatures],
    config: &RunConfig,
    budget: usize,
) -> Evaluation {
    let detections: Vec<Vec<Detection>> =
        features.par_iter().map(|f| infer_with_budget(model, f, budget)).collect();
    let proposals: Vec<Vec<_>> = features
        .par_iter()
        .map(|f| propose(model, f, budget).into_iter().map(|p| p.bbox).collect())
        .collect();
    Evaluation {
        budget,
        report: mean_ap(&detections, dataset, &config.eval.iou_thresholds),
        ar: proposal_recall(&proposals, &dataset.scenes, config.eval.ar_iou, budget),
    }
}

/// Report written by `eval`: metrics of one checkpoint on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub tool_version: String,
    #[serde(rename = "K")]
    pub budget: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
    /// mAP over the least frequent third of the evaluated dataset's classes.
    #[serde(rename = "rare_mAP")]
    pub rare_map: f64,
    pub thresholds: Vec<f64>,
    /// `per_class_ap[c][t]`; `null` for classes without ground truth.
    pub per_class_ap: Vec<Option<Vec<f64>>>,
    pub run_config: serde_json::Value,
}

impl EvalReport {
    pub fn new(eval: Evaluation, dataset: &SceneDataset, run_config: serde_json::Value) -> Self {
        let rare = rare_classes(&dataset.frequencies());
        Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            budget: eval.budget,
            map: eval.report.map,
            ar: eval.ar,
            rare_map: eval.report.map_over(&rare),
            thresholds: eval.report.thresholds,
            per_class_ap: eval.report.per_class,
            run_config,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn train_condition(config: &RunConfig, condition: Condition, seed: u64, dataset: &SceneDataset) -> Result<(Detector, f64)> {
    let mut trainer = config.trainer.clone();
    trainer.assignment = condition.assignment;
    trainer.scoring = condition.scoring;
    trainer.flavor = condition.flavor;
    trainer.seed = seed;
    let mut detector = config.detector.clone();
    detector.one_stage = condition.one_stage;
    let start = Instant::now();
    let out = train(dataset, &config.pyramid, &detector, &config.fedloss, &trainer)?;
    Ok((out.model, start.elapsed().as_secs_f64()))
}

struct Split {
    train: SceneDataset,
    test: SceneDataset,
    test_features: Vec<SceneFeatures>,
}

/// Runs experiments for one configuration, training each (condition, seed)
/// pair at most once across calls.
pub struct ExperimentRunner {
    config: RunConfig,
    splits: Mutex<HashMap<u64, std::sync::Arc<Split>>>,
    models: Mutex<HashMap<(&'static str, u64), (Detector, f64)>>,
}

impl ExperimentRunner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, splits: Mutex::new(HashMap::new()), models: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn split(&self, seed: u64) -> Result<std::sync::Arc<Split>> {
        if let Some(s) = self.splits.lock().expect("split cache").get(&seed) {
            return Ok(s.clone());
        }
        let (train, test) = split_datasets(&self.config, seed)?;
        let test_features = test.features(&self.config.pyramid);
        let split = std::sync::Arc::new(Split { train, test, test_features });
        self.splits.lock().expect("split cache").insert(seed, split.clone());
        Ok(split)
    }

    /// The trained model of `condition` for `seed` and its training time.
    pub fn model(&self, condition: Condition, seed: u64) -> Result<(Detector, f64)> {
        if let Some(m) = self.models.lock().expect("model cache").get(&(condition.name, seed)) {
            return Ok(m.clone());
        }
        let split = self.split(seed)?;
        let trained = train_condition(&self.config, condition, seed, &split.train)?;
        self.models.lock().expect("model cache").insert((condition.name, seed), trained.clone());
        Ok(trained)
    }

    pub fn evaluate(&self, condition: Condition, seed: u64, budget: usize) -> Result<(Evaluation, RunResult)> {
        let (model, secs) = self.model(condition, seed)?;
        let split = self.split(seed)?;
        let eval = evaluate(&model, &split.test, &split.test_features, &self.config, budget);
        let rare = rare_classes(&split.train.frequencies());
        let result = RunResult {
            condition: condition.name.to_string(),
            seed,
            budget,
            map: eval.report.map,
            ar: eval.ar,
            rare_map: eval.report.map_over(&rare),
            train_seconds: secs,
        };
        Ok((eval, result))
    }

    pub fn run(&self, kind: ExperimentKind) -> Result<ExperimentReport> {
        let budgets = match kind {
            ExperimentKind::ProposalSweep => self.config.eval.proposal_budgets.clone(),
            _ => vec![self.config.detector.max_proposals],
        };
        let mut runs = Vec::new();
        let mut rows = Vec::new();
        for condition in kind.conditions() {
            for &budget in &budgets {
                let mut batch = Vec::new();
                for &seed in &self.config.experiment.seeds {
                    batch.push(self.evaluate(condition, seed, budget)?.1);
                }
                let col = |f: fn(&RunResult) -> f64| median(&batch.iter().map(f).collect::<Vec<_>>());
                rows.push(ReportRow {
                    condition: condition.name.to_string(),
                    budget,
                    map: col(|r| r.map),
                    ar: col(|r| r.ar),
                    rare_map: col(|r| r.rare_map),
                    train_seconds: col(|r| r.train_seconds),
                });
                runs.extend(batch);
            }
        }
        Ok(ExperimentReport {
            kind,
            tool_version: crate::TOOL_VERSION.to_string(),
            rows,
            runs,
            run_config: self.config.to_value(),
        })
    }
}

pub fn run_experiment(kind: ExperimentKind, config: &RunConfig) -> Result<ExperimentReport> {
    ExperimentRunner::new(config.clone())?.run(kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::GenConfig;
    use crate::trainer::TrainConfig;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn tiny_sweep_is_monotone_in_budget() {
        let config = RunConfig {
            data: GenConfig { num_scenes: 12, scene_width: 48.0, scene_height: 48.0, num_classes: 3, objects_per_scene: (1, 3), object_size: (8.0, 30.0), ..GenConfig::default() },
            trainer: TrainConfig { iterations: 40, batch_size: 4, ..TrainConfig::default() },
            experiment: crate::config::ExperimentConfig { seeds: vec![0], test_scenes: 6, ..Default::default() },
            ..RunConfig::default()
        };
        let report = run_experiment(ExperimentKind::ProposalSweep, &config).unwrap();
        assert_eq!(report.rows.len(), 12);
        for cond in ["center_fused", "recall_nonfused"] {
            let ar: Vec<f64> = config.eval.proposal_budgets.iter().map(|&k| report.row(cond, k).unwrap().ar).collect();
            assert!(ar.windows(2).all(|w| w[0] >= w[1]), "{ar:?}");
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("condition,K,mAP,AR,rare_mAP,train_seconds\n"));
    }
}

//! Mini-batch SGD with momentum over the closed-form detector gradients.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentMode, PyramidConfig};
use crate::detector::{
    total_loss, Detector, DetectorConfig, LossBreakdown, LossConfig, LossFlavor, ModelShape,
    ScorerParams, ScoringMode, TrainingScene,
};
use crate::error::{Error, Result};
use crate::fedloss::{sample_subset, ClassFrequencyTable, FedLossConfig};
use crate::config::RunConfig;
use crate::synthdata::{derive_seed, generate_dataset, SceneDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fractions of the run after which the learning rate drops.
    pub lr_drops: Vec<f64>,
    pub lr_drop_factor: f64,
    pub first_stage_weight: f64,
    pub assignment: AssignmentMode,
    pub scoring: ScoringMode,
    pub flavor: LossFlavor,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 0.02,
            momentum: 0.9,
            lr_drops: vec![2.0 / 3.0, 8.0 / 9.0],
            lr_drop_factor: 0.1,
            first_stage_weight: 0.5,
            assignment: AssignmentMode::Center,
            scoring: ScoringMode::Probabilistic,
            flavor: LossFlavor::Softmax,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.lr_drops.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_drops must be ascending fractions in (0, 1)");
        }
        if !(self.first_stage_weight >= 0.0) {
            return bad("first_stage_weight must be nonnegative");
        }
        Ok(())
    }

    /// Learning rate used at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self
            .lr_drops
            .iter()
            .filter(|f| iteration >= (*f * self.iterations as f64).floor() as usize)
            .count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }
}

/// One row of the loss trace; losses are batch means before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub stage1_focal: f64,
    pub stage1_giou: f64,
    pub stage2_cls: f64,
    pub stage2_bg_weighted: f64,
    pub stage2_giou: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Detector,
    pub trace: Vec<TraceRow>,
}

pub fn model_shape(dataset: &SceneDataset, pyramid: &PyramidConfig, detector: &DetectorConfig) -> ModelShape {
    ModelShape {
        num_levels: pyramid.levels.len(),
        feature_len: dataset.config.feature_len(),
        num_classes: dataset.num_classes(),
        num_stages: if detector.one_stage { 0 } else { detector.cascade_thresholds.len() },
        one_stage: detector.one_stage,
    }
}

/// Features and labels for every scene of `dataset`.
pub fn training_scenes(
    dataset: &SceneDataset,
    pyramid: &PyramidConfig,
    mode: AssignmentMode,
) -> Result<Vec<TrainingScene>> {
    dataset
        .scenes
        .iter()
        .zip(dataset.features(pyramid))
        .map(|(s, f)| TrainingScene::new(s, f, pyramid, mode))
        .collect()
}

pub fn train(
    dataset: &SceneDataset,
    pyramid: &PyramidConfig,
    detector: &DetectorConfig,
    fedloss: &FedLossConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    detector.validate()?;
    pyramid.validate()?;
    if dataset.scenes.is_empty() {
        return Err(Error::Config("training dataset has no scenes".into()));
    }
    let scenes = training_scenes(dataset, pyramid, config.assignment)?;
    let table = match config.flavor {
        LossFlavor::Federated => Some(ClassFrequencyTable::new(dataset.frequencies())?),
        LossFlavor::Softmax => None,
    };
    let loss_config = LossConfig {
        detector: detector.clone(),
        first_stage_weight: config.first_stage_weight,
        scoring: config.scoring,
        flavor: config.flavor,
    };

    let mut params = ScorerParams::initial(model_shape(dataset, pyramid, detector));
    let mut velocity = params.zeros_like();
    let mut trace = Vec::with_capacity(config.iterations);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for iteration in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch)));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let subset_seed = derive_seed(config.seed ^ 0x5AB5_E700, iteration as u64);
        let results: Vec<Result<(LossBreakdown, ScorerParams)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &s)| {
                let subset = table.as_ref().map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(subset_seed, slot as u64));
                    sample_subset(&scenes[s].positive_classes(), t, fedloss.subset_size, &mut rng)
                });
                total_loss(&params, &scenes[s], pyramid, &loss_config, subset)
            })
            .collect();
        let mut loss = LossBreakdown::default();
        let mut grad = params.zeros_like();
        for r in results {
            let (l, g) = r?;
            loss.add(&l);
            grad.add_scaled(&g, 1.0);
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = loss.scaled(inv);
        if let Some(term) = loss.non_finite_term() {
            return Err(Error::NonFiniteLoss { iteration, term });
        }
        let lr = config.lr_at(iteration);
        velocity.scale(config.momentum);
        velocity.add_scaled(&grad, inv);
        params.add_scaled(&velocity, -lr);
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, term: "parameters" });
        }
        trace.push(TraceRow {
            iteration,
            lr,
            total: loss.total,
            stage1_focal: loss.stage1_focal,
            stage1_giou: loss.stage1_giou,
            stage2_cls: loss.stage2_cls,
            stage2_bg_weighted: loss.stage2_bg_weighted,
            stage2_giou: loss.stage2_giou,
        });
    }
    Ok(TrainOutput {
        model: Detector {
            params,
            pyramid: pyramid.clone(),
            config: detector.clone(),
            scoring: config.scoring,
            flavor: config.flavor,
        },
        trace,
    })
}

/// Maximum relative error of one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps entries whose true
/// gradient vanishes from failing on finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares `analytic` against central differences of `loss` around `params`.
/// `loss` returns terms whose sum is the loss; each term is differenced on
/// its own before summing.
pub fn grad_check_with<F>(
    params: &ScorerParams,
    analytic: &ScorerParams,
    loss: F,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&ScorerParams) -> Vec<f64> + Sync,
{
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.blocks().into_iter().map(|(_, l)| l.w.clone()).collect();
    let blocks: Vec<BlockCheck> = names
        .into_iter()
        .enumerate()
        .map(|(b, name)| {
            let len = grads[b].len();
            let max_rel_error = (0..len)
                .into_par_iter()
                .map(|k| {
                    let mut probe = params.clone();
                    probe.blocks_mut()[b].w[k] += step;
                    let up = loss(&probe);
                    probe.blocks_mut()[b].w[k] -= 2.0 * step;
                    let down = loss(&probe);
                    let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
                    relative_error(grads[b][k], diff / (2.0 * step))
                })
                .reduce(|| 0.0, f64::max);
            BlockCheck { name, max_rel_error, pass: max_rel_error < tolerance }
        })
        .collect();
    let pass = blocks.iter().all(|b| b.pass);
    GradCheckReport { blocks, tolerance, pass }
}

/// Gradient check of the full detector loss on one scene, with proposals,
/// objectness weights and the class subset frozen at `params`.
pub fn grad_check(
    scene: &TrainingScene,
    params: &ScorerParams,
    pyramid: &PyramidConfig,
    loss_config: &LossConfig,
    subset: Option<Vec<usize>>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    use crate::detector::{loss_with_inputs, prepare_inputs};
    let inputs = prepare_inputs(params, scene, pyramid, loss_config, subset);
    let (_, analytic) = loss_with_inputs(params, scene, loss_config, &inputs)?;
    let eval = |p: &ScorerParams| {
        loss_with_inputs(p, scene, loss_config, &inputs)
            .map(|(l, _)| l.parts(loss_config.first_stage_weight).to_vec())
            .unwrap_or_else(|_| vec![f64::NAN])
    };
    Ok(grad_check_with(params, &analytic, eval, step, tolerance))
}

/// Gradient check driven by a run configuration: the first non-empty scene
/// of the configured dataset, parameters at their initial values plus
/// uniform noise of half-width 0.05 seeded by `trainer.seed`.
pub fn grad_check_config(config: &RunConfig, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    use rand::Rng;
    config.validate()?;
    let dataset = generate_dataset(&config.data, config.experiment.data_seed)?;
    let index = dataset.scenes.iter().position(|s| !s.objects.is_empty()).unwrap_or(0);
    let mut single = dataset.clone();
    single.scenes = vec![dataset.scenes.get(index).cloned().ok_or_else(|| Error::Config("data.num_scenes must be positive".into()))?];
    let scene = training_scenes(&single, &config.pyramid, config.trainer.assignment)?.remove(0);
    let detector = config.detector.clone();
    let mut params = ScorerParams::initial(model_shape(&dataset, &config.pyramid, &detector));
    let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
    for block in params.blocks_mut() {
        block.w.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let loss_config = LossConfig {
        detector,
        first_stage_weight: config.trainer.first_stage_weight,
        scoring: config.trainer.scoring,
        flavor: config.trainer.flavor,
    };
    let subset = match config.trainer.flavor {
        LossFlavor::Federated => {
            let table = ClassFrequencyTable::new(dataset.frequencies())?;
            Some(sample_subset(&scene.positive_classes(), &table, config.fedloss.subset_size, &mut rng))
        }
        LossFlavor::Softmax => None,
    };
    grad_check(&scene, &params, &config.pyramid, &loss_config, subset, step, tolerance)
}

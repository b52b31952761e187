//! Seeded procedural detection scenes and their handcrafted cell features.
//!
//! A scene is a set of non-overlapping boxes, each carrying a class. Every
//! class owns a fixed appearance signature; each object renders that
//! signature plus per-object noise. Cell features are local statistics of
//! the rendered signatures, which stand in for backbone features.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::assignment::{LevelGrid, PyramidConfig};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};

pub const DATASET_VERSION: u32 = 1;

/// Number of non-signature feature channels.
pub const SPATIAL_FEATURES: usize = 8;

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub scene_width: f64,
    pub scene_height: f64,
    pub num_classes: usize,
    /// Class `c` is drawn with weight `(c + 1)^-skew_exponent`.
    pub skew_exponent: f64,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Range of the larger box side, sampled log-uniformly.
    pub object_size: (f64, f64),
    /// Largest allowed side ratio.
    pub max_aspect: f64,
    /// Minimum empty margin between two objects.
    pub min_gap: f64,
    /// Probability that an absent class is still listed as annotated.
    pub federated_fraction: f64,
    /// Per-dimension standard deviation of per-object signature noise.
    pub appearance_noise: f64,
    pub signature_dims: usize,
    /// Ray window of the spatial features, in cells.
    pub window_cells: f64,
    /// Seed of the class signatures; shared by train and test splits.
    pub appearance_seed: u64,
    /// Placement attempts per object before giving up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            scene_width: 96.0,
            scene_height: 96.0,
            num_classes: 8,
            skew_exponent: 0.0,
            objects_per_scene: (2, 5),
            object_size: (6.0, 48.0),
            max_aspect: 2.0,
            min_gap: 2.0,
            federated_fraction: 1.0,
            appearance_noise: 0.1,
            signature_dims: 8,
            window_cells: 5.0,
            appearance_seed: 0,
            max_attempts: 500,
        }
    }
}

impl GenConfig {
    pub fn feature_len(&self) -> usize {
        self.signature_dims + SPATIAL_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.signature_dims == 0 {
            return bad("signature_dims must be at least 1");
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return bad("objects_per_scene must be an ordered range");
        }
        let (lo, hi) = self.object_size;
        if !(lo > 0.0 && lo <= hi) {
            return bad("object_size must be a positive ordered range");
        }
        if lo > self.scene_width.min(self.scene_height) {
            return bad("scene is smaller than the smallest object");
        }
        if !(self.max_aspect >= 1.0) {
            return bad("max_aspect must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.federated_fraction) {
            return bad("federated_fraction must lie in [0, 1]");
        }
        if !(self.appearance_noise >= 0.0) || !(self.window_cells > 0.0) || self.min_gap < 0.0 {
            return bad("appearance_noise, window_cells and min_gap must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    /// `[height, width]` in scene units.
    pub size: [f64; 2],
    pub objects: Vec<SceneObject>,
    /// Classes for which this scene's annotation is exhaustive, ascending.
    pub annotated_classes: Vec<usize>,
}

impl Scene {
    pub fn height(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn is_annotated(&self, class: usize) -> bool {
        self.annotated_classes.binary_search(&class).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDataset {
    pub version: u32,
    pub seed: u64,
    pub config: GenConfig,
    pub classes: Vec<ClassInfo>,
    pub scenes: Vec<Scene>,
    /// Full run configuration of the command that wrote the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
}

fn class_weights(config: &GenConfig) -> Vec<f64> {
    (0..config.num_classes)
        .map(|c| ((c + 1) as f64).powf(-config.skew_exponent))
        .collect()
}

fn expanded(b: &BBox, margin: f64) -> BBox {
    BBox::new(b.x1 - margin, b.y1 - margin, b.x2 + margin, b.y2 + margin)
}

fn generate_scene(config: &GenConfig, seed: u64, index: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let classes = WeightedIndex::new(class_weights(config))
        .map_err(|e| Error::Config(format!("class weights: {e}")))?;
    let (lo, hi) = config.objects_per_scene;
    let requested = rng.random_range(lo..=hi);
    let (w, h) = (config.scene_width, config.scene_height);
    let (ln_lo, ln_hi) = (config.object_size.0.ln(), config.object_size.1.ln());
    let ln_ar = config.max_aspect.ln();

    let mut objects: Vec<SceneObject> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let class = classes.sample(&mut rng);
        let mut placed = None;
        for _ in 0..config.max_attempts {
            let extent = if ln_hi > ln_lo { rng.random_range(ln_lo..ln_hi) } else { ln_lo }.exp();
            let aspect = if ln_ar > 0.0 { rng.random_range(-ln_ar..ln_ar) } else { 0.0 }.exp();
            let (bw, bh) = if aspect >= 1.0 {
                (extent, extent / aspect)
            } else {
                (extent * aspect, extent)
            };
            if bw > w || bh > h {
                continue;
            }
            let x1 = rng.random_range(0.0..=(w - bw));
            let y1 = rng.random_range(0.0..=(h - bh));
            let candidate = BBox::new(x1, y1, x1 + bw, y1 + bh);
            let grown = expanded(&candidate, config.min_gap);
            if objects.iter().all(|o| o.bbox.intersection_area(&grown) == 0.0) {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(bbox) => objects.push(SceneObject { bbox, class }),
            None => {
                return Err(Error::Sizing {
                    scene: index,
                    placed: objects.len(),
                    requested,
                    attempts: config.max_attempts,
                })
            }
        }
    }

    let mut annotated: Vec<usize> = objects.iter().map(|o| o.class).collect();
    for c in 0..config.num_classes {
        if config.federated_fraction >= 1.0 || rng.random::<f64>() < config.federated_fraction {
            annotated.push(c);
        }
    }
    annotated.sort_unstable();
    annotated.dedup();

    Ok(Scene { size: [h, w], objects, annotated_classes: annotated })
}

/// Generates a dataset as a pure function of `(config, seed)`.
pub fn generate_dataset(config: &GenConfig, seed: u64) -> Result<SceneDataset> {
    config.validate()?;
    let scenes = (0..config.num_scenes)
        .into_par_iter()
        .map(|i| generate_scene(config, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; config.num_classes];
    for o in scenes.iter().flat_map(|s| s.objects.iter()) {
        counts[o.class] += 1;
    }
    let classes = counts
        .iter()
        .enumerate()
        .map(|(id, &frequency)| ClassInfo { id, name: format!("class_{id:02}"), frequency })
        .collect();
    Ok(SceneDataset {
        version: DATASET_VERSION,
        seed,
        config: config.clone(),
        classes,
        scenes,
        run_config: None,
        tool_version: None,
    })
}

impl SceneDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn frequencies(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.frequency).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: SceneDataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks the structural invariants of a loaded dataset.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::Format { what: "dataset", detail });
        if self.version != DATASET_VERSION {
            return fail(format!("unsupported version {}", self.version));
        }
        self.config.validate()?;
        let n = self.classes.len();
        if n != self.config.num_classes {
            return fail("class catalog size differs from config".into());
        }
        let mut counts = vec![0usize; n];
        for (i, s) in self.scenes.iter().enumerate() {
            for o in &s.objects {
                let b = o.bbox;
                if b.validate().is_err()
                    || b.is_degenerate()
                    || b.x1 < 0.0
                    || b.y1 < 0.0
                    || b.x2 > s.width()
                    || b.y2 > s.height()
                {
                    return fail(format!("scene {i}: object box {b:?} out of bounds or empty"));
                }
                if o.class >= n {
                    return fail(format!("scene {i}: class {} out of range", o.class));
                }
                if !s.is_annotated(o.class) {
                    return fail(format!("scene {i}: class {} present but not annotated", o.class));
                }
                counts[o.class] += 1;
            }
            if s.annotated_classes.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("scene {i}: annotated_classes must be strictly ascending"));
            }
        }
        for (c, info) in self.classes.iter().enumerate() {
            if info.id != c || info.frequency != counts[c] {
                return fail(format!("class {c}: catalog entry does not match object counts"));
            }
        }
        Ok(())
    }

    pub fn appearance(&self) -> Appearance {
        Appearance::new(&self.config)
    }

    /// Per-object rendered signatures for scene `index`.
    pub fn object_signatures(&self, index: usize) -> Vec<Vec<f64>> {
        self.appearance().render(&self.scenes[index], self.seed, index, self.config.appearance_noise)
    }

    /// Features of every scene on every pyramid level.
    pub fn features(&self, pyramid: &PyramidConfig) -> Vec<SceneFeatures> {
        let appearance = self.appearance();
        (0..self.scenes.len())
            .into_par_iter()
            .map(|i| {
                let sigs = appearance.render(&self.scenes[i], self.seed, i, self.config.appearance_noise);
                SceneFeatures::compute(&self.scenes[i], &sigs, pyramid, &self.config)
            })
            .collect()
    }
}

/// Class appearance signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub signatures: Vec<Vec<f64>>,
}

impl Appearance {
    /// Unit-norm class signatures spread apart by farthest-point selection
    /// from a pool of random directions.
    pub fn new(config: &GenConfig) -> Self {
        let dims = config.signature_dims;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.appearance_seed, 0xA99E_A2A1));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let pool: Vec<Vec<f64>> = (0..(64 * config.num_classes).max(64))
            .map(|_| {
                let v: Vec<f64> = (0..dims).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut chosen = vec![0usize];
        let mut nearest: Vec<f64> = pool.iter().map(|p| dist(p, &pool[0])).collect();
        while chosen.len() < config.num_classes {
            let next = crate::geometry::descending_order(&nearest)[0];
            chosen.push(next);
            for (k, p) in pool.iter().enumerate() {
                nearest[k] = nearest[k].min(dist(p, &pool[next]));
            }
        }
        Self { signatures: chosen.into_iter().map(|k| pool[k].clone()).collect() }
    }

    /// Class signature plus per-object Gaussian noise, seeded per object.
    pub fn render(&self, scene: &Scene, seed: u64, scene_index: usize, noise: f64) -> Vec<Vec<f64>> {
        let scene_seed = derive_seed(seed, scene_index as u64);
        scene
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let base = &self.signatures[o.class];
                if noise == 0.0 {
                    return base.clone();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed ^ 0x0B1E_C700, k as u64));
                let normal = Normal::new(0.0, noise).expect("finite noise");
                base.iter().map(|v| v + normal.sample(&mut rng)).collect()
            })
            .collect()
    }
}

/// Cell features of one scene on one level, row-major, `feature_len` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub grid: LevelGrid,
    pub feature_len: usize,
    pub data: Vec<f64>,
}

impl LevelFeatures {
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.feature_len..(index + 1) * self.feature_len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub width: f64,
    pub height: f64,
    pub feature_len: usize,
    pub levels: Vec<LevelFeatures>,
}

impl SceneFeatures {
    pub fn compute(
        scene: &Scene,
        signatures: &[Vec<f64>],
        pyramid: &PyramidConfig,
        config: &GenConfig,
    ) -> Self {
        let feature_len = config.feature_len();
        let levels = pyramid
            .grids(scene.width(), scene.height())
            .into_iter()
            .map(|grid| {
                let mut data = Vec::with_capacity(grid.len() * feature_len);
                for idx in 0..grid.len() {
                    data.extend(cell_features_at(
                        scene,
                        signatures,
                        grid.center_of(idx),
                        grid.stride,
                        config,
                    ));
                }
                LevelFeatures { grid, feature_len, data }
            })
            .collect();
        Self { width: scene.width(), height: scene.height(), feature_len, levels }
    }
}

fn coverage(scene: &Scene, region: &BBox) -> f64 {
    let area = region.area();
    if area <= 0.0 {
        return 0.0;
    }
    scene.objects.iter().map(|o| o.bbox.intersection_area(region)).sum::<f64>() / area
}

/// Feature vector of the cell centered at `anchor` with side `stride`.
///
/// Layout: signature mix over the cell footprint (`signature_dims`), object
/// occupancy of the footprint, ray-band coverage to the left/top/right/bottom
/// over `window_cells` cells, horizontal and vertical balance
/// `min/max` of the opposite band coverages, and the fraction of saturated
/// bands.
pub fn cell_features_at(
    scene: &Scene,
    signatures: &[Vec<f64>],
    anchor: Point,
    stride: f64,
    config: &GenConfig,
) -> Vec<f64> {
    let half = 0.5 * stride;
    let footprint = BBox::new(anchor.x - half, anchor.y - half, anchor.x + half, anchor.y + half);
    let cell_area = stride * stride;
    let mut out = vec![0.0; config.feature_len()];
    let mut occupancy = 0.0;
    for (o, sig) in scene.objects.iter().zip(signatures) {
        let w = o.bbox.intersection_area(&footprint) / cell_area;
        if w > 0.0 {
            occupancy += w;
            for (slot, v) in out.iter_mut().zip(sig) {
                *slot += w * v;
            }
        }
    }
    let d = config.signature_dims;
    out[d] = occupancy;

    let reach = config.window_cells * stride;
    let bands = [
        BBox::new(anchor.x - reach, anchor.y - half, anchor.x, anchor.y + half),
        BBox::new(anchor.x - half, anchor.y - reach, anchor.x + half, anchor.y),
        BBox::new(anchor.x, anchor.y - half, anchor.x + reach, anchor.y + half),
        BBox::new(anchor.x - half, anchor.y, anchor.x + half, anchor.y + reach),
    ];
    let cov: Vec<f64> = bands.iter().map(|b| coverage(scene, b)).collect();
    out[d + 1..d + 5].copy_from_slice(&cov);
    let balance = |a: f64, b: f64| if a.max(b) > 0.0 { a.min(b) / a.max(b) } else { 0.0 };
    out[d + 5] = balance(cov[0], cov[2]);
    out[d + 6] = balance(cov[1], cov[3]);
    out[d + 7] = cov.iter().filter(|&&c| c >= 1.0 - 1e-9).count() as f64 / 4.0;
    out
}

/// Features of cell `index` on `level`, recomputed from scratch.
pub fn cell_features(
    dataset: &SceneDataset,
    scene_index: usize,
    pyramid: &PyramidConfig,
    level: usize,
    index: usize,
) -> Vec<f64> {
    let scene = &dataset.scenes[scene_index];
    let grid = LevelGrid::new(pyramid.levels[level].stride, scene.width(), scene.height());
    let sigs = dataset.object_signatures(scene_index);
    cell_features_at(scene, &sigs, grid.center_of(index), grid.stride, &dataset.config)
}

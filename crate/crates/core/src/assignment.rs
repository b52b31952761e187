//! Ground-truth to pyramid-cell label assignment.
//!
//! Two strategies are provided. Center-style assignment puts each object on
//! the one level whose size range holds its extent and marks the center cell
//! plus any 3x3 neighbor whose regression target still fits the object well;
//! everything else is a negative. Recall-style assignment marks every cell
//! whose canonical square overlaps an object by IoU >= 0.3 on any level,
//! favoring coverage over calibrated likelihoods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    decode_ltrb, encode_ltrb_clamped, giou_loss_boxes, iou, BBox, LtrbOffsets, Point,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    /// Scene units per cell.
    pub stride: f64,
    /// `(min, max]` object extent handled by this level; `None` is unbounded.
    pub size_range: (f64, Option<f64>),
}

impl LevelSpec {
    pub fn accepts(&self, extent: f64) -> bool {
        extent > self.size_range.0 && self.size_range.1.is_none_or(|max| extent <= max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub levels: Vec<LevelSpec>,
    /// Side of the recall-style canonical cell box, in cells.
    pub base_scale: f64,
    /// Neighbor cells join the positives when their gIoU loss is below this.
    pub neighbor_giou_threshold: f64,
    /// IoU a canonical cell box needs to be a recall-style positive.
    pub recall_iou_threshold: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: vec![
                LevelSpec { stride: 2.0, size_range: (0.0, Some(16.0)) },
                LevelSpec { stride: 4.0, size_range: (16.0, Some(32.0)) },
                LevelSpec { stride: 8.0, size_range: (32.0, None) },
            ],
            base_scale: 4.0,
            neighbor_giou_threshold: 0.2,
            recall_iou_threshold: 0.3,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        let mut lower = 0.0;
        for (i, level) in self.levels.iter().enumerate() {
            if !(level.stride > 0.0) {
                return Err(Error::Config(format!("level {i}: stride must be positive")));
            }
            if i > 0 && level.stride <= self.levels[i - 1].stride {
                return Err(Error::Config("level strides must be strictly increasing".into()));
            }
            if level.size_range.0 != lower {
                return Err(Error::Config(format!(
                    "level {i}: size ranges must partition (0, inf) without gaps or overlap"
                )));
            }
            let last = i + 1 == self.levels.len();
            match level.size_range.1 {
                Some(max) if !last && max > lower => lower = max,
                None if last => {}
                _ => {
                    return Err(Error::Config(format!(
                        "level {i}: size ranges must partition (0, inf) without gaps or overlap"
                    )))
                }
            }
        }
        if !(self.base_scale > 0.0) {
            return Err(Error::Config("base_scale must be positive".into()));
        }
        Ok(())
    }

    /// Index of the level whose size range holds `extent`.
    pub fn level_for_extent(&self, extent: f64) -> Option<usize> {
        self.levels.iter().position(|l| l.accepts(extent))
    }

    pub fn grids(&self, width: f64, height: f64) -> Vec<LevelGrid> {
        self.levels.iter().map(|l| LevelGrid::new(l.stride, width, height)).collect()
    }
}

/// Cell lattice of one pyramid level over a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    pub stride: f64,
    pub rows: usize,
    pub cols: usize,
}

impl LevelGrid {
    pub fn new(stride: f64, width: f64, height: f64) -> Self {
        Self {
            stride,
            rows: (height / stride).ceil().max(1.0) as usize,
            cols: (width / stride).ceil().max(1.0) as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, row: usize, col: usize) -> Point {
        Point::new((col as f64 + 0.5) * self.stride, (row as f64 + 0.5) * self.stride)
    }

    pub fn center_of(&self, index: usize) -> Point {
        self.center(index / self.cols, index % self.cols)
    }

    /// Cell containing `p`, clamped to the grid.
    pub fn cell_at(&self, p: Point) -> (usize, usize) {
        let r = (p.y / self.stride).floor().clamp(0.0, (self.rows - 1) as f64) as usize;
        let c = (p.x / self.stride).floor().clamp(0.0, (self.cols - 1) as f64) as usize;
        (r, c)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellState {
    Negative,
    Ignore,
    Positive { object: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLabel {
    pub state: CellState,
    /// Present exactly when the cell is positive.
    pub target: Option<LtrbOffsets>,
}

impl CellLabel {
    pub const NEGATIVE: CellLabel = CellLabel { state: CellState::Negative, target: None };
    pub const IGNORE: CellLabel = CellLabel { state: CellState::Ignore, target: None };

    pub fn positive(object: usize, target: LtrbOffsets) -> Self {
        Self { state: CellState::Positive { object }, target: Some(target) }
    }

    pub fn is_positive(&self) -> bool {
        matches!(self.state, CellState::Positive { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelLabels {
    pub grid: LevelGrid,
    pub cells: Vec<CellLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelLabels>,
}

impl Assignment {
    fn all_negative(grids: &[LevelGrid]) -> Self {
        Self {
            levels: grids
                .iter()
                .map(|g| LevelLabels { grid: *g, cells: vec![CellLabel::NEGATIVE; g.len()] })
                .collect(),
        }
    }

    pub fn num_positive(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| l.cells.iter())
            .filter(|c| c.is_positive())
            .count()
    }

    /// Number of positive cells per level that belong to `object`.
    pub fn positives_of(&self, object: usize) -> Vec<usize> {
        self.levels
            .iter()
            .map(|l| {
                l.cells
                    .iter()
                    .filter(|c| c.state == CellState::Positive { object })
                    .count()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Center cell plus qualifying 3x3 neighbors on the size-matched level.
    Center,
    /// Loose IoU >= 0.3 overlap with the canonical cell box on any level.
    Recall,
}

pub fn assign(
    mode: AssignmentMode,
    objects: &[BBox],
    pyramid: &PyramidConfig,
    width: f64,
    height: f64,
) -> Result<Assignment> {
    match mode {
        AssignmentMode::Center => assign_center_style(objects, pyramid, width, height),
        AssignmentMode::Recall => assign_recall_style(objects, pyramid, width, height),
    }
}

/// Center-style assignment.
///
/// When two objects share a center cell the smaller one keeps it and every
/// cell the larger one would have claimed becomes `Ignore`. A neighbor claimed
/// by two objects goes to the one with the lower gIoU loss.
pub fn assign_center_style(
    objects: &[BBox],
    pyramid: &PyramidConfig,
    width: f64,
    height: f64,
) -> Result<Assignment> {
    let grids = pyramid.grids(width, height);
    let mut out = Assignment::all_negative(&grids);

    let mut levels = Vec::with_capacity(objects.len());
    for b in objects {
        let extent = b.max_extent();
        levels.push(pyramid.level_for_extent(extent).ok_or(Error::UnassignableObject { extent })?);
    }

    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[a]
            .area()
            .partial_cmp(&objects[b].area())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    // (level, cell) -> owning object, for collision bookkeeping
    let mut center_owner: Vec<Vec<Option<usize>>> =
        grids.iter().map(|g| vec![None; g.len()]).collect();
    let mut neighbor_loss: Vec<Vec<f64>> =
        grids.iter().map(|g| vec![f64::INFINITY; g.len()]).collect();
    let mut displaced = vec![false; objects.len()];

    for &obj in &order {
        let level = levels[obj];
        let grid = grids[level];
        let (r, c) = grid.cell_at(objects[obj].center());
        let idx = grid.index(r, c);
        if center_owner[level][idx].is_some() {
            displaced[obj] = true;
            continue;
        }
        center_owner[level][idx] = Some(obj);
        let target = encode_ltrb_clamped(grid.center(r, c), &objects[obj]);
        out.levels[level].cells[idx] = CellLabel::positive(obj, target);
    }

    for &obj in &order {
        let level = levels[obj];
        let grid = grids[level];
        let (r, c) = grid.cell_at(objects[obj].center());
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= grid.rows as i64 || nc >= grid.cols as i64 {
                    continue;
                }
                let idx = grid.index(nr as usize, nc as usize);
                if center_owner[level][idx].is_some() {
                    continue;
                }
                let anchor = grid.center(nr as usize, nc as usize);
                let target = encode_ltrb_clamped(anchor, &objects[obj]);
                let (loss, _) = giou_loss_boxes(&decode_ltrb(anchor, &target), &objects[obj]);
                if loss >= pyramid.neighbor_giou_threshold {
                    continue;
                }
                if displaced[obj] {
                    out.levels[level].cells[idx] = CellLabel::IGNORE;
                    continue;
                }
                if loss < neighbor_loss[level][idx] {
                    neighbor_loss[level][idx] = loss;
                    out.levels[level].cells[idx] = CellLabel::positive(obj, target);
                }
            }
        }
    }

    Ok(out)
}

/// Recall-style assignment: a cell is positive when its canonical square of
/// side `stride * base_scale` reaches the IoU threshold with any object.
pub fn assign_recall_style(
    objects: &[BBox],
    pyramid: &PyramidConfig,
    width: f64,
    height: f64,
) -> Result<Assignment> {
    let grids = pyramid.grids(width, height);
    let mut out = Assignment::all_negative(&grids);
    for (level, grid) in grids.iter().enumerate() {
        let half = 0.5 * grid.stride * pyramid.base_scale;
        for idx in 0..grid.len() {
            let a = grid.center_of(idx);
            let cell_box = BBox::new(a.x - half, a.y - half, a.x + half, a.y + half);
            let best = objects
                .iter()
                .enumerate()
                .map(|(k, b)| (k, iou(&cell_box, b)))
                .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                    Some((_, best)) if best >= v => acc,
                    _ => Some((k, v)),
                });
            if let Some((k, v)) = best {
                if v >= pyramid.recall_iou_threshold {
                    out.levels[level].cells[idx] =
                        CellLabel::positive(k, encode_ltrb_clamped(a, &objects[k]));
                }
            }
        }
    }
    Ok(out)
}

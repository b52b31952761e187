use serde::{Deserialize, Serialize};

/// Dense affine map `y = W [x; 1]`, row-major, bias in the last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
}

impl Linear {
    /// Zero map from `inputs` features to `outputs` values.
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { rows: outputs, cols: inputs + 1, w: vec![0.0; outputs * (inputs + 1)] }
    }

    pub fn inputs(&self) -> usize {
        self.cols - 1
    }

    pub fn bias_mut(&mut self, row: usize) -> &mut f64 {
        let c = self.cols;
        &mut self.w[row * c + c - 1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len() + 1, self.cols);
        self.w
            .chunks_exact(self.cols)
            .map(|row| row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()])
            .collect()
    }

    pub fn forward_row(&self, row: usize, x: &[f64]) -> f64 {
        let r = &self.w[row * self.cols..(row + 1) * self.cols];
        r[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + r[x.len()]
    }

    /// Adds `dy ⊗ [x; 1]` to this (gradient) matrix.
    pub fn accumulate(&mut self, dy: &[f64], x: &[f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                self.accumulate_row(r, g, x);
            }
        }
    }

    pub fn accumulate_row(&mut self, row: usize, g: f64, x: &[f64]) {
        let r = &mut self.w[row * self.cols..(row + 1) * self.cols];
        for (slot, v) in r.iter_mut().zip(x) {
            *slot += g * v;
        }
        r[x.len()] += g;
    }

    pub fn zeros_like(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, w: vec![0.0; self.w.len()] }
    }
}

/// One second-stage classifier of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHead {
    /// `|C| + 1` class logits, background last.
    pub cls: Linear,
    /// Four box-refinement deltas in ltrb order.
    pub bbox: Linear,
}

/// Shape of a [`ScorerParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_levels: usize,
    pub feature_len: usize,
    pub num_classes: usize,
    pub num_stages: usize,
    /// Adds a per-cell class head to stage one and drops the second stage.
    pub one_stage: bool,
}

impl ModelShape {
    /// Length of a pooled region feature: cell features plus three shape terms.
    pub fn pooled_len(&self) -> usize {
        self.feature_len + 3
    }
}

/// All learnable weights of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub shape: ModelShape,
    /// Per level: objectness logit then four ltrb pre-activations.
    pub first_stage: Vec<Linear>,
    /// Per level class logits; only for the first-stage-only detector.
    pub class_head: Vec<Linear>,
    pub stages: Vec<StageHead>,
}

/// Bias giving an initial foreground probability of 0.01 under a sigmoid.
pub fn prior_bias() -> f64 {
    -(99.0f64).ln()
}

impl ScorerParams {
    pub fn zeros(mut shape: ModelShape) -> Self {
        if shape.one_stage {
            shape.num_stages = 0;
        }
        let f = shape.feature_len;
        let p = shape.pooled_len();
        let c = shape.num_classes;
        let first_stage = (0..shape.num_levels).map(|_| Linear::zeros(5, f)).collect();
        let (class_head, stages) = if shape.one_stage {
            ((0..shape.num_levels).map(|_| Linear::zeros(c, f)).collect(), Vec::new())
        } else {
            (
                Vec::new(),
                (0..shape.num_stages)
                    .map(|_| StageHead { cls: Linear::zeros(c + 1, p), bbox: Linear::zeros(4, p) })
                    .collect(),
            )
        };
        Self { shape, first_stage, class_head, stages }
    }

    /// Zero weights except objectness (and one-stage class) biases set to the
    /// 0.01 prior.
    pub fn initial(shape: ModelShape) -> Self {
        let mut p = Self::zeros(shape);
        for head in &mut p.first_stage {
            *head.bias_mut(0) = prior_bias();
        }
        for head in &mut p.class_head {
            for r in 0..head.rows {
                *head.bias_mut(r) = prior_bias();
            }
        }
        for stage in &mut p.stages {
            for r in 0..stage.cls.rows - 1 {
                *stage.cls.bias_mut(r) = prior_bias();
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for (i, l) in self.first_stage.iter().enumerate() {
            out.push((format!("stage1.level{i}"), l));
        }
        for (i, l) in self.class_head.iter().enumerate() {
            out.push((format!("stage1_cls.level{i}"), l));
        }
        for (t, s) in self.stages.iter().enumerate() {
            out.push((format!("stage2.{t}.cls"), &s.cls));
            out.push((format!("stage2.{t}.box"), &s.bbox));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        out.extend(self.first_stage.iter_mut());
        out.extend(self.class_head.iter_mut());
        for s in &mut self.stages {
            out.push(&mut s.cls);
            out.push(&mut s.bbox);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, l)| l.w.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, l)| l.w.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ScorerParams, scale: f64) {
        let src: Vec<&Linear> = other.blocks().into_iter().map(|(_, l)| l).collect();
        for (dst, s) in self.blocks_mut().into_iter().zip(src) {
            for (a, b) in dst.w.iter_mut().zip(&s.w) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.w.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_and_accumulate() {
        let mut l = Linear::zeros(2, 3);
        l.w = vec![1.0, 2.0, 3.0, 0.5, -1.0, 0.0, 1.0, 2.0];
        assert_eq!(l.forward(&[1.0, 1.0, 1.0]), vec![6.5, 2.0]);
        assert_eq!(l.forward_row(1, &[1.0, 0.0, 2.0]), 3.0);
        let mut g = l.zeros_like();
        g.accumulate(&[1.0, 2.0], &[3.0, 4.0, 5.0]);
        assert_eq!(g.w, vec![3.0, 4.0, 5.0, 1.0, 6.0, 8.0, 10.0, 2.0]);
    }

    #[test]
    fn shape_and_init() {
        let shape = ModelShape { num_levels: 3, feature_len: 16, num_classes: 8, num_stages: 3, one_stage: false };
        let p = ScorerParams::initial(shape);
        assert_eq!(p.blocks().len(), 3 + 6);
        assert_eq!(p.stages[0].cls.rows, 9);
        assert_eq!(p.stages[0].cls.cols, 20);
        let p_obj = crate::probcore::sigmoid(p.first_stage[1].forward_row(0, &[0.0; 16]));
        assert!((p_obj - 0.01).abs() < 1e-12);
        let one = ScorerParams::initial(ModelShape { one_stage: true, ..shape });
        assert!(one.stages.is_empty());
        assert_eq!(one.class_head.len(), 3);
    }
}

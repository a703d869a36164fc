//! Multi-level training objective: class-weighted BCE on every level plus an
//! L2 penalty on decoded coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{CoordinatePrediction, Heatmaps};
use crate::labels::{LandmarkSet, LevelLabels, NUM_LANDMARKS};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub pos_weight: f64,
    pub lambda_l2: f64,
    /// One weight per level (aux `1..=K`, then main). Empty means all ones.
    pub level_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            pos_weight: 9000.0,
            lambda_l2: 1.0,
            level_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn violations(&self, levels: u32) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            v.push(format!("loss.pos_weight must be > 0, got {}", self.pos_weight));
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            v.push(format!("loss.lambda_l2 must be >= 0, got {}", self.lambda_l2));
        }
        if !self.level_weights.is_empty() && self.level_weights.len() != levels as usize + 1 {
            v.push(format!(
                "loss.level_weights needs {} entries (K aux levels + main), got {}",
                levels + 1,
                self.level_weights.len()
            ));
        }
        if self.level_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            v.push("loss.level_weights must be non-negative".into());
        }
        v
    }

    fn level_weight(&self, i: usize) -> f64 {
        self.level_weights.get(i).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce_per_level: Vec<f64>,
    pub l2: f64,
    pub total: f64,
}

fn check_shapes(heat: &[f64], labels: &LevelLabels) -> Result<()> {
    if heat.len() != labels.values.len() {
        return Err(Error::Shape(format!(
            "heatmap has {} entries, labels for {} have {}",
            heat.len(),
            labels.level,
            labels.values.len()
        )));
    }
    if heat.is_empty() {
        return Err(Error::Shape("empty heatmap".into()));
    }
    Ok(())
}

/// Mean over nodes and channels of `-[w y ln p + (1 - y) ln(1 - p)]`.
pub fn weighted_bce(heat: &[f64], labels: &LevelLabels, pos_weight: f64) -> Result<f64> {
    check_shapes(heat, labels)?;
    let sum: f64 = heat
        .iter()
        .zip(&labels.values)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                -pos_weight * p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / heat.len() as f64)
}

/// Derivative of [`weighted_bce`] with respect to each probability. The clamp
/// is passed straight through so saturated outputs still receive a signal.
pub fn weighted_bce_grad(heat: &[f64], labels: &LevelLabels, pos_weight: f64) -> Result<Vec<f64>> {
    check_shapes(heat, labels)?;
    let n = heat.len() as f64;
    Ok(heat
        .iter()
        .zip(&labels.values)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                -pos_weight / p / n
            } else {
                1.0 / (1.0 - p) / n
            }
        })
        .collect())
}

/// Mean squared Euclidean distance over the four landmarks, in pixels².
pub fn coord_l2(pred: &CoordinatePrediction, gt: &LandmarkSet) -> f64 {
    let target = gt.xy();
    pred.points
        .iter()
        .zip(&target)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum::<f64>()
        / NUM_LANDMARKS as f64
}

pub fn coord_l2_grad(pred: &CoordinatePrediction, gt: &LandmarkSet) -> [[f64; 2]; NUM_LANDMARKS] {
    let target = gt.xy();
    let k = 2.0 / NUM_LANDMARKS as f64;
    let mut g = [[0.0; 2]; NUM_LANDMARKS];
    for ((gi, a), b) in g.iter_mut().zip(&pred.points).zip(&target) {
        *gi = [k * (a[0] - b[0]), k * (a[1] - b[1])];
    }
    g
}

/// Gradients of the total loss with respect to its inputs.
#[derive(Clone, Debug)]
pub struct LossGrads {
    /// Per level, same layout as the heatmaps.
    pub heat: Vec<Vec<f64>>,
    pub coords: [[f64; 2]; NUM_LANDMARKS],
}

fn pair_levels<'a>(heatmaps: &'a Heatmaps, labels: &'a [LevelLabels]) -> Result<()> {
    if heatmaps.levels.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} heatmap levels but {} label sets",
            heatmaps.levels.len(),
            labels.len()
        )));
    }
    for ((level, _), lab) in heatmaps.levels.iter().zip(labels) {
        if *level != lab.level {
            return Err(Error::Domain(format!("missing labels for {level} (found {})", lab.level)));
        }
    }
    Ok(())
}

pub fn total_loss(
    heatmaps: &Heatmaps,
    labels: &[LevelLabels],
    pred: &CoordinatePrediction,
    gt: &LandmarkSet,
    cfg: &LossConfig,
) -> Result<LossReport> {
    pair_levels(heatmaps, labels)?;
    let bce_per_level = heatmaps
        .levels
        .iter()
        .zip(labels)
        .map(|((_, h), lab)| weighted_bce(h, lab, cfg.pos_weight))
        .collect::<Result<Vec<_>>>()?;
    let l2 = coord_l2(pred, gt);
    let total = bce_per_level
        .iter()
        .enumerate()
        .map(|(i, b)| cfg.level_weight(i) * b)
        .sum::<f64>()
        + cfg.lambda_l2 * l2;
    Ok(LossReport {
        bce_per_level,
        l2,
        total,
    })
}

/// [`total_loss`] together with its gradient. The coordinate part is with
/// respect to the decoded points; chaining through the decoder is the
/// caller's job.
pub fn total_loss_with_grad(
    heatmaps: &Heatmaps,
    labels: &[LevelLabels],
    pred: &CoordinatePrediction,
    gt: &LandmarkSet,
    cfg: &LossConfig,
) -> Result<(LossReport, LossGrads)> {
    let report = total_loss(heatmaps, labels, pred, gt, cfg)?;
    let heat = heatmaps
        .levels
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, ((_, h), lab))| {
            let w = cfg.level_weight(i);
            let mut g = weighted_bce_grad(h, lab, cfg.pos_weight)?;
            g.iter_mut().for_each(|v| *v *= w);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut coords = coord_l2_grad(pred, gt);
    for g in coords.iter_mut().flatten() {
        *g *= cfg.lambda_l2;
    }
    Ok((report, LossGrads { heat, coords }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Level;

    fn labels(vals: Vec<u8>) -> LevelLabels {
        LevelLabels {
            level: Level::Main,
            values: vals,
        }
    }

    #[test]
    fn single_element_cases() {
        let ln2 = std::f64::consts::LN_2;
        let pos = weighted_bce(&[0.5], &labels(vec![1]), 9000.0).unwrap();
        assert!((pos - 9000.0 * ln2).abs() < 1e-9);
        assert!((pos - 6238.32).abs() < 0.01);
        let neg = weighted_bce(&[0.5], &labels(vec![0]), 9000.0).unwrap();
        assert!((neg - ln2).abs() < 1e-12);
        let perfect = weighted_bce(&[0.0], &labels(vec![0]), 9000.0).unwrap();
        assert!(perfect < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(weighted_bce(&[0.5, 0.5], &labels(vec![1]), 1.0).is_err());
    }

    #[test]
    fn monotone_for_positive() {
        let l = labels(vec![1]);
        let mut last = 0.0;
        for p in [0.9, 0.7, 0.5, 0.3, 0.1] {
            let v = weighted_bce(&[p], &l, 9000.0).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn coord_l2_examples() {
        let gt = LandmarkSet::new([[10.0, 10.0], [20.0, 10.0], [30.0, 10.0], [40.0, 10.0]], 1.0, 64, 64).unwrap();
        let exact = CoordinatePrediction { points: gt.xy() };
        assert_eq!(coord_l2(&exact, &gt), 0.0);
        let mut off = exact;
        off.points[2][0] += 3.0;
        off.points[2][1] += 4.0;
        assert_eq!(coord_l2(&off, &gt), 6.25);
        let mut shift = exact;
        for p in &mut shift.points {
            p[0] += 1.0;
        }
        assert_eq!(coord_l2(&shift, &gt), 1.0);
    }
}

//! Source-view scoring from covisible points and the source choice rules
//! used during training and inference.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-Gaussian weight of the triangulation angle (degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleWeight {
    pub theta0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for AngleWeight {
    fn default() -> Self {
        Self { theta0: 5.0, sigma1: 1.0, sigma2: 10.0 }
    }
}

impl AngleWeight {
    pub fn weight(&self, theta: f64) -> f64 {
        let s = if theta <= self.theta0 { self.sigma1 } else { self.sigma2 };
        (-(theta - self.theta0).powi(2) / (2.0 * s * s)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub source: usize,
    pub score: f64,
}

/// Angle in degrees between the rays from `a` and `b` to `p`.
pub fn triangulation_angle(a: &Vector3<f64>, b: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let (u, v) = (a - p, b - p);
    let c = u.dot(&v) / (u.norm() * v.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Sum of angle weights over points seen by both cameras.
pub fn global_view_score(
    ref_center: &Vector3<f64>,
    src_center: &Vector3<f64>,
    covisible: &[Vector3<f64>],
    weight: &AngleWeight,
) -> f64 {
    covisible.iter().map(|p| weight.weight(triangulation_angle(ref_center, src_center, p))).sum()
}

/// Which sources feed a training or inference sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// The two highest-scoring sources.
    BestTwo,
    /// The two highest- plus the two lowest-scoring sources.
    AntiNoise,
    /// The `n` highest-scoring sources.
    TopN(usize),
}

/// Indices into `scores`, ranked by descending score with ties broken by
/// the lower index.
pub fn rank_by_score(scores: &[ViewScore]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score).then(a.cmp(&b)));
    idx
}

/// Chosen entries of `scores` (positions, not view ids), best first.
pub fn select_training_views(scores: &[ViewScore], mode: SelectionMode) -> Result<Vec<usize>> {
    let need = match mode {
        SelectionMode::BestTwo => 2,
        SelectionMode::AntiNoise => 4,
        SelectionMode::TopN(n) => n,
    };
    if scores.len() < need {
        return Err(Error::InvalidArgument(format!(
            "{mode:?} needs {need} scored sources, got {}",
            scores.len()
        )));
    }
    let ranked = rank_by_score(scores);
    Ok(match mode {
        SelectionMode::BestTwo | SelectionMode::TopN(_) => ranked[..need].to_vec(),
        SelectionMode::AntiNoise => {
            let n = ranked.len();
            vec![ranked[0], ranked[1], ranked[n - 2], ranked[n - 1]]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64]) -> Vec<ViewScore> {
        v.iter().enumerate().map(|(i, &s)| ViewScore { source: i, score: s }).collect()
    }

    #[test]
    fn selection_rules() {
        let mut an = select_training_views(&scores(&[9.0, 7.0, 5.0, 1.0, 0.0]), SelectionMode::AntiNoise).unwrap();
        an.sort();
        assert_eq!(an, vec![0, 1, 3, 4]);
        assert_eq!(select_training_views(&scores(&[3.0, 3.0, 1.0]), SelectionMode::BestTwo).unwrap(), vec![0, 1]);
        assert!(select_training_views(&scores(&[3.0, 2.0, 1.0]), SelectionMode::AntiNoise).is_err());
    }

    #[test]
    fn peak_weight_is_one() {
        assert_eq!(AngleWeight::default().weight(5.0), 1.0);
    }
}

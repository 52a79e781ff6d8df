//! Multiclass linear scorer with margin-based abstention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EdgeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelWeights {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
}

impl LabelWeights {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim], bias: 0.0 }
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

/// Label → weights. A `BTreeMap` keeps iteration (and tie-breaking) in
/// lexicographic label order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinearClassifier {
    pub labels: BTreeMap<String, LabelWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classification {
    Labeled { label: String, confidence: f64 },
    Unlabeled,
}

impl Classification {
    pub fn label(&self) -> Option<&str> {
        match self {
            Classification::Labeled { label, .. } => Some(label),
            Classification::Unlabeled => None,
        }
    }

    pub fn confidence(&self) -> Option<f64> {
        match self {
            Classification::Labeled { confidence, .. } => Some(*confidence),
            Classification::Unlabeled => None,
        }
    }
}

impl LinearClassifier {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shared feature dimension, or `None` for an empty classifier.
    pub fn dim(&self) -> Result<Option<usize>, EdgeError> {
        let mut dims = self.labels.values().map(|w| w.weights.len());
        let Some(first) = dims.next() else { return Ok(None) };
        if dims.any(|d| d != first) {
            return Err(EdgeError::Validation("classifier weight vectors differ in dimension".into()));
        }
        if self.labels.values().any(|w| w.weights.iter().any(|v| !v.is_finite()) || !w.bias.is_finite()) {
            return Err(EdgeError::Validation("classifier weights must be finite".into()));
        }
        Ok(Some(first))
    }

    /// Highest-scoring label (ties → lexicographically smallest) and its
    /// margin over the runner-up. A single-label model is measured against
    /// an implicit zero score.
    pub fn top(&self, features: &[f64]) -> Result<Option<(String, f64)>, EdgeError> {
        if let Some(dim) = self.dim()? {
            if dim != features.len() {
                return Err(EdgeError::SchemaMismatch(format!(
                    "classifier expects {dim} features, got {}",
                    features.len()
                )));
            }
        }
        let mut best: Option<(&String, f64)> = None;
        let mut second = f64::NEG_INFINITY;
        for (label, w) in &self.labels {
            let s = w.score(features);
            match best {
                Some((_, b)) if s <= b => second = second.max(s),
                Some((_, b)) => {
                    second = b;
                    best = Some((label, s));
                }
                None => best = Some((label, s)),
            }
        }
        Ok(best.map(|(label, s)| {
            let runner_up = if self.labels.len() == 1 { 0.0 } else { second };
            (label.clone(), s - runner_up)
        }))
    }

    pub fn predict(&self, features: &[f64]) -> Result<Option<String>, EdgeError> {
        Ok(self.top(features)?.map(|(l, _)| l))
    }
}

pub fn classify(features: &[f64], classifier: &LinearClassifier, confidence_margin: f64) -> Result<Classification, EdgeError> {
    Ok(match classifier.top(features)? {
        Some((label, confidence)) if confidence >= confidence_margin => Classification::Labeled { label, confidence },
        _ => Classification::Unlabeled,
    })
}

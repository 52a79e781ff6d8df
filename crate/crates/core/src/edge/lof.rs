//! Local Outlier Factor scoring of a query point against a reference set.
//!
//! Definitions, with `R` the reference set and `d` the Euclidean distance:
//!
//! * `k-distance(o)` for `o ∈ R` is the k-th smallest `d(o, r)` over the
//!   other members of `R` (duplicates at other positions count as distance 0).
//!   For the query `p` it is the k-th smallest `d(p, r)` over all of `R`.
//! * `N(o)` is every member within `k-distance(o)`, so ties at the boundary
//!   are all included and the result does not depend on window order.
//! * `reach(a, o) = max(k-distance(o), d(a, o), reach_floor)`.
//! * `lrd(a) = 1 / mean_{o ∈ N(a)} reach(a, o)`.
//! * `LOF(p) = mean_{o ∈ N(p)} lrd(o) / lrd(p)`.
//!
//! With fewer than `k + 1` reference points the window points cannot all
//! have `k` neighbors, and the score is the neutral value `1.0`.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::EdgeError;

pub const NEUTRAL_SCORE: f64 = 1.0;
pub const DEFAULT_REACH_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LofParams {
    pub k: usize,
    pub window_size: usize,
    pub reach_floor: f64,
}

impl Default for LofParams {
    fn default() -> Self {
        Self { k: 10, window_size: 256, reach_floor: DEFAULT_REACH_FLOOR }
    }
}

impl LofParams {
    pub fn validate(&self) -> Result<(), EdgeError> {
        if self.k == 0 {
            return Err(EdgeError::Validation("lof.k must be >= 1".into()));
        }
        if self.window_size == 0 {
            return Err(EdgeError::Validation("lof.window_size must be >= 1".into()));
        }
        if !(self.reach_floor > 0.0) || !self.reach_floor.is_finite() {
            return Err(EdgeError::Validation("lof.reach_floor must be a finite value > 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean computed as `min + mean(x - min)`; exact when all values are equal.
pub(crate) fn stable_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut min = f64::INFINITY;
    for v in values.clone() {
        n += 1;
        min = min.min(v);
    }
    let excess: f64 = values.map(|v| v - min).sum();
    min + excess / n as f64
}

/// k-th smallest value (1-based `k`) of `values`; reorders the slice.
fn kth_smallest(values: &mut [f64], k: usize) -> f64 {
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

fn check_input(point: &[f64], window: &[Vec<f64>]) -> Result<(), EdgeError> {
    let dim = point.len();
    if point.iter().any(|v| !v.is_finite()) {
        return Err(EdgeError::InvalidInput("query point has a non-finite feature".into()));
    }
    for (i, w) in window.iter().enumerate() {
        if w.len() != dim {
            return Err(EdgeError::SchemaMismatch(format!(
                "window point {i} has dimension {}, expected {dim}",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(EdgeError::InvalidInput(format!("window point {i} has a non-finite feature")));
        }
    }
    Ok(())
}

fn finish(score: f64) -> Result<f64, EdgeError> {
    if score.is_finite() && score >= 0.0 {
        Ok(score)
    } else {
        Err(EdgeError::InvalidInput(format!("LOF evaluation overflowed ({score})")))
    }
}

/// LOF of `point` against `window`. Cost is `O((1 + k + k²)·n·dim)`; no
/// pairwise matrix is materialized, so large cloud reference sets are fine.
pub fn lof_score(point: &[f64], window: &[Vec<f64>], params: &LofParams) -> Result<f64, EdgeError> {
    check_input(point, window)?;
    let k = params.k.max(1);
    let n = window.len();
    if n < k + 1 {
        return Ok(NEUTRAL_SCORE);
    }
    let floor = params.reach_floor;

    let row_of = |o: usize| -> Vec<f64> {
        window
            .iter()
            .enumerate()
            .map(|(j, w)| if j == o { f64::INFINITY } else { euclidean(&window[o], w) })
            .collect()
    };
    let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut kdist: HashMap<usize, f64> = HashMap::new();
    let mut scratch = Vec::with_capacity(n);
    let mut kdist_of = |o: usize, rows: &mut HashMap<usize, Vec<f64>>| -> f64 {
        *kdist.entry(o).or_insert_with(|| {
            let row = rows.entry(o).or_insert_with(|| row_of(o));
            scratch.clear();
            scratch.extend_from_slice(row);
            kth_smallest(&mut scratch, k)
        })
    };

    let dp: Vec<f64> = window.iter().map(|w| euclidean(point, w)).collect();
    let mut tmp = dp.clone();
    let kd_p = kth_smallest(&mut tmp, k);
    let neighbors_p: Vec<usize> = (0..n).filter(|&j| dp[j] <= kd_p).collect();

    let mut reach_p = Vec::with_capacity(neighbors_p.len());
    for &o in &neighbors_p {
        reach_p.push(kdist_of(o, &mut rows).max(dp[o]).max(floor));
    }
    let mean_reach_p = stable_mean(reach_p.iter().copied());

    let mut ratios = Vec::with_capacity(neighbors_p.len());
    for &o in &neighbors_p {
        let kd_o = kdist_of(o, &mut rows);
        let row_o = rows[&o].clone();
        let mut reach_o = Vec::new();
        for (j, &d) in row_o.iter().enumerate() {
            if j != o && d <= kd_o {
                reach_o.push(kdist_of(j, &mut rows).max(d).max(floor));
            }
        }
        let mean_reach_o = stable_mean(reach_o.iter().copied());
        ratios.push(mean_reach_p / mean_reach_o);
    }
    finish(stable_mean(ratios.iter().copied()))
}

/// Fixed-capacity ring buffer of reference points with cached pairwise
/// distances and k-distances, for per-frame scoring at the edge.
///
/// Each push costs `O(n·dim)` plus one `O(n)` selection per point whose
/// k-distance can change; scoring costs `O(n·dim + k·n)`.
#[derive(Debug, Clone)]
pub struct LofWindow {
    params: LofParams,
    dim: Option<usize>,
    points: Vec<Vec<f64>>,
    /// Slot indices, oldest first.
    order: VecDeque<usize>,
    /// Row-major `capacity × capacity`, valid for live slots.
    dist: Vec<f64>,
    kdist: Vec<f64>,
    dirty: Vec<bool>,
    scratch: Vec<f64>,
}

impl LofWindow {
    pub fn new(params: LofParams) -> Self {
        let cap = params.window_size;
        Self {
            params,
            dim: None,
            points: Vec::with_capacity(cap),
            order: VecDeque::with_capacity(cap),
            dist: vec![0.0; cap * cap],
            kdist: vec![f64::NAN; cap],
            dirty: vec![true; cap],
            scratch: Vec::with_capacity(cap),
        }
    }

    pub fn params(&self) -> &LofParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Live points, oldest first.
    pub fn points(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.order.iter().map(|&s| &self.points[s])
    }

    fn cap(&self) -> usize {
        self.params.window_size
    }

    fn d(&self, a: usize, b: usize) -> f64 {
        self.dist[a * self.cap() + b]
    }

    /// Replaces the whole content (used after a scaling or parameter change).
    pub fn rebuild(&mut self, params: LofParams, points: impl IntoIterator<Item = Vec<f64>>) -> Result<(), EdgeError> {
        params.validate()?;
        let pts: Vec<Vec<f64>> = points.into_iter().collect();
        *self = Self::new(params);
        let skip = pts.len().saturating_sub(params.window_size);
        for p in pts.into_iter().skip(skip) {
            self.push(p)?;
        }
        Ok(())
    }

    pub fn push(&mut self, point: Vec<f64>) -> Result<(), EdgeError> {
        if let Some(dim) = self.dim {
            if point.len() != dim {
                return Err(EdgeError::SchemaMismatch(format!(
                    "point has dimension {}, window holds dimension {dim}",
                    point.len()
                )));
            }
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(EdgeError::InvalidInput("non-finite feature".into()));
        }
        self.dim = Some(point.len());
        let cap = self.cap();
        let k = self.params.k;

        let evicting = self.order.len() == cap;
        let slot = if evicting {
            let s = self.order.pop_front().expect("full window has an oldest slot");
            self.points[s] = point;
            s
        } else {
            self.points.push(point);
            self.points.len() - 1
        };

        for &j in &self.order {
            let new_d = euclidean(&self.points[slot], &self.points[j]);
            let old_d = if evicting { self.dist[j * cap + slot] } else { f64::INFINITY };
            self.dist[slot * cap + j] = new_d;
            self.dist[j * cap + slot] = new_d;
            if !self.dirty[j] && (old_d <= self.kdist[j] || new_d < self.kdist[j]) {
                self.dirty[j] = true;
            }
        }
        self.dist[slot * cap + slot] = 0.0;
        self.dirty[slot] = true;
        self.order.push_back(slot);

        if self.order.len() >= k + 1 {
            let live: Vec<usize> = self.order.iter().copied().collect();
            for &o in &live {
                if self.dirty[o] {
                    self.scratch.clear();
                    for &j in &live {
                        if j != o {
                            self.scratch.push(self.dist[o * cap + j]);
                        }
                    }
                    let kd = kth_smallest(&mut self.scratch, k);
                    self.kdist[o] = kd;
                    self.dirty[o] = false;
                }
            }
        } else {
            for &o in &self.order {
                self.dirty[o] = true;
            }
        }
        Ok(())
    }

    /// Scores `point` against the current content without inserting it.
    pub fn score(&self, point: &[f64]) -> Result<f64, EdgeError> {
        if point.iter().any(|v| !v.is_finite()) {
            return Err(EdgeError::InvalidInput("query point has a non-finite feature".into()));
        }
        if let Some(dim) = self.dim {
            if point.len() != dim {
                return Err(EdgeError::SchemaMismatch(format!(
                    "point has dimension {}, window holds dimension {dim}",
                    point.len()
                )));
            }
        }
        let k = self.params.k;
        if self.order.len() < k + 1 {
            return Ok(NEUTRAL_SCORE);
        }
        let floor = self.params.reach_floor;
        let live: Vec<usize> = self.order.iter().copied().collect();
        let dp: Vec<f64> = live.iter().map(|&s| euclidean(point, &self.points[s])).collect();
        let mut tmp = dp.clone();
        let kd_p = kth_smallest(&mut tmp, k);

        let neighbors_p: Vec<usize> = (0..live.len()).filter(|&i| dp[i] <= kd_p).collect();
        let mean_reach_p = stable_mean(neighbors_p.iter().map(|&i| self.kdist[live[i]].max(dp[i]).max(floor)));

        let mut ratios = Vec::with_capacity(neighbors_p.len());
        for &i in &neighbors_p {
            let o = live[i];
            let kd_o = self.kdist[o];
            let reach_o = live
                .iter()
                .filter(|&&j| j != o && self.d(o, j) <= kd_o)
                .map(|&j| self.kdist[j].max(self.d(o, j)).max(floor));
            ratios.push(mean_reach_p / stable_mean(reach_o));
        }
        finish(stable_mean(ratios.iter().copied()))
    }
}

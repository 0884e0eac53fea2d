//! Black-box weight search on the support set.
//!
//! The loss is opaque (anything that maps a weight vector to a finite
//! scalar), so the optimizer is derivative-free: a (1+1) evolution strategy
//! with Gaussian proposals, box projection onto the clip interval, and step
//! halving after 10 consecutive rejections. Starting point is the zero
//! vector, which composes to the unmodified backbone. The returned weights
//! are the best seen under `loss + lambda * mean_i |w_i|`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Per-adapter scalar merge weights with their clip box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: BTreeMap<String, f32>,
    pub clip_lo: f32,
    pub clip_hi: f32,
}

impl WeightVector {
    pub fn new(weights: BTreeMap<String, f32>, clip_lo: f32, clip_hi: f32) -> Result<Self> {
        let v = WeightVector {
            weights,
            clip_lo,
            clip_hi,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_lo > self.clip_hi {
            return Err(Error::Invariant(format!(
                "clip interval [{}, {}] is empty",
                self.clip_lo, self.clip_hi
            )));
        }
        for (id, &w) in &self.weights {
            if !w.is_finite() || w < self.clip_lo || w > self.clip_hi {
                return Err(Error::Invariant(format!(
                    "weight {w} for {id} outside [{}, {}]",
                    self.clip_lo, self.clip_hi
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, adapter_id: &str) -> Option<f32> {
        self.weights.get(adapter_id).copied()
    }

    /// Serialize as a bare {adapter_id: weight} JSON object.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.weights).expect("static schema");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a bare {adapter_id: weight} JSON object; the clip box is not
    /// stored in the file and must be supplied.
    pub fn load(path: impl AsRef<Path>, clip_lo: f32, clip_hi: f32) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let weights: BTreeMap<String, f32> =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        WeightVector::new(weights, clip_lo, clip_hi)
    }
}

/// Anything that can score a weight vector on the support set. Weights
/// arrive in the adapter-id order the search was given. Must be
/// deterministic for a fixed input.
pub trait LossEvaluator {
    fn evaluate(&mut self, weights: &[f32]) -> Result<f64>;
}

impl<F> LossEvaluator for F
where
    F: FnMut(&[f32]) -> f64,
{
    fn evaluate(&mut self, weights: &[f32]) -> Result<f64> {
        Ok(self(weights))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            steps: 40,
            seed: 42,
            lambda: 0.05,
            clip_lo: -1.5,
            clip_hi: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub weights: WeightVector,
    /// Best penalized objective seen.
    pub objective: f64,
    /// Raw loss at the returned weights, without the penalty.
    pub loss: f64,
    pub evaluations: usize,
}

/// Run the search for the given adapter ids and return the best weights.
pub fn search_weights(
    evaluator: &mut dyn LossEvaluator,
    adapter_ids: &[String],
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    if adapter_ids.is_empty() {
        return Err(Error::Invariant("weight search needs at least one adapter".into()));
    }
    if cfg.steps == 0 {
        return Err(Error::Invariant("weight search needs at least one step".into()));
    }
    // partial_cmp also rejects NaN bounds, which `<` would let through.
    if cfg.clip_lo.partial_cmp(&cfg.clip_hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::Invariant(format!(
            "clip interval [{}, {}] is empty",
            cfg.clip_lo, cfg.clip_hi
        )));
    }
    let n = adapter_ids.len();
    let mut rng = seeded_rng(cfg.seed);
    let mut evaluations = 0usize;

    let mut eval_at = |x: &[f64], evals: &mut usize| -> Result<(f64, f64)> {
        let w32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let loss = evaluator.evaluate(&w32)?;
        *evals += 1;
        if !loss.is_finite() {
            return Err(Error::Invariant(format!(
                "evaluator returned non-finite loss {loss} at weights {w32:?}"
            )));
        }
        let penalty = cfg.lambda * x.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        Ok((loss + penalty, loss))
    };

    let mut x = vec![0.0f64; n];
    let (mut fx, mut loss_x) = eval_at(&x, &mut evaluations)?;
    let mut sigma = 0.3 * (cfg.clip_hi - cfg.clip_lo);
    let mut rejections = 0usize;

    for _ in 0..cfg.steps {
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let z: f64 = rng.sample(StandardNormal);
                (xi + sigma * z).clamp(cfg.clip_lo, cfg.clip_hi)
            })
            .collect();
        let (fy, loss_y) = eval_at(&y, &mut evaluations)?;
        if fy <= fx {
            x = y;
            fx = fy;
            loss_x = loss_y;
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= 10 {
                sigma /= 2.0;
                rejections = 0;
            }
        }
    }

    let weights: BTreeMap<String, f32> = adapter_ids
        .iter()
        .cloned()
        .zip(x.iter().map(|&v| v as f32))
        .collect();
    Ok(SearchOutcome {
        weights: WeightVector::new(weights, cfg.clip_lo as f32, cfg.clip_hi as f32)?,
        objective: fx,
        loss: loss_x,
        evaluations,
    })
}

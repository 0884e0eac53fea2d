//! Synthetic pools and tasks with controlled subspace overlap.
//!
//! The generated model is small enough to evaluate in closed form: the
//! backbone is an affine map whose linear part is zero (a bias), a task is
//! a target matrix plus sampled input/output pairs, and an adapter's
//! effective update is a rank-r matrix built as B * A with a shared
//! orthonormal A. Because A has orthonormal rows, inner products between
//! the B factors transfer exactly to Frobenius inner products between the
//! effective updates, which is how the generator realizes exact pairwise
//! angles between adapter block vectors.
//!
//! Nothing here claims to predict behavior on a real model; the point is
//! that merge and aggregation behavior is checkable against hand values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::merge::{lasrc_merge, linear_merge, LasrcConfig};
use crate::retrieval::{AdapterEntry, PoolManifest, ViewIndex};
use crate::rng::seeded_rng;
use crate::search::{LossEvaluator, WeightVector};
use crate::tensor::{AdapterBundle, BlockMap, TensorBlob};

/// Dense row-major matrix, f32 storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn mul_vec(&self, x: &[f32]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| self.data[r * self.cols + c] as f64 * x[c] as f64)
                    .sum()
            })
            .collect()
    }
}

/// One labeled toy example. Targets are kept in f64 so a composition that
/// matches the target matrix bit-for-bit reports exactly zero loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExample {
    pub x: Vec<f32>,
    pub y: Vec<f64>,
}

/// A target task: the matrix the composed update should reach, the bias of
/// the frozen backbone, sampled support/query pairs, and per-view
/// embeddings for retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub task_id: String,
    pub d_in: usize,
    pub d_out: usize,
    /// Target for the summed effective update.
    pub target: Matrix,
    /// Backbone output offset; its linear part is zero by construction, so
    /// a composition equal to `target` fits the data exactly.
    pub bias: Vec<f64>,
    pub support: Vec<ToyExample>,
    pub queries: Vec<ToyExample>,
    /// view id -> one embedding per support example.
    pub support_embeddings: BTreeMap<String, Vec<Vec<f32>>>,
    /// view id -> one embedding per query.
    pub query_embeddings: BTreeMap<String, Vec<Vec<f32>>>,
}

impl ToyTask {
    /// Reference answer for query j: the coordinate of the largest target
    /// output, as a label string.
    pub fn reference_answer(&self, query_idx: usize) -> String {
        argmax_label(&self.queries[query_idx].y)
    }

    pub fn query_id(&self, query_idx: usize) -> String {
        format!("q{query_idx}")
    }

    /// The same task restricted to support examples [offset, offset+k),
    /// embeddings sliced to match. Queries are untouched.
    pub fn support_window(&self, k: usize, offset: usize) -> Result<ToyTask> {
        if self.support.len() < offset + k || k == 0 {
            return Err(Error::Invariant(format!(
                "task {}: support window k={k} offset={offset} does not fit in {} examples",
                self.task_id,
                self.support.len()
            )));
        }
        let mut out = self.clone();
        out.support = self.support[offset..offset + k].to_vec();
        for vecs in out.support_embeddings.values_mut() {
            *vecs = vecs[offset..offset + k].to_vec();
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("static schema");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Label for an output vector: the index of its largest coordinate, with
/// ties going to the lowest index.
pub fn argmax_label(y: &[f64]) -> String {
    let mut best = 0usize;
    for (i, &v) in y.iter().enumerate() {
        if v > y[best] {
            best = i;
        }
    }
    format!("c{best}")
}

/// How adapter directions relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    Orthogonal,
    Duplicated,
    /// Pairwise angle in degrees between any two adapter directions.
    Mixed(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPoolSpec {
    pub n_adapters: usize,
    pub rank: usize,
    pub overlap_mode: OverlapMode,
    pub noise_level: f32,
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub n_blocks: usize,
    pub n_tasks: usize,
    /// Labeled examples per task (support selection windows into these).
    pub n_examples: usize,
    pub n_queries: usize,
}

impl Default for ToyPoolSpec {
    fn default() -> Self {
        ToyPoolSpec {
            n_adapters: 4,
            rank: 2,
            overlap_mode: OverlapMode::Mixed(60.0),
            noise_level: 0.0,
            seed: 42,
            d_in: 6,
            d_out: 4,
            n_blocks: 2,
            n_tasks: 2,
            n_examples: 20,
            n_queries: 8,
        }
    }
}

impl ToyPoolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_adapters == 0 || self.n_tasks == 0 || self.n_blocks == 0 {
            return Err(Error::Invariant("pool spec needs at least one adapter, task, and block".into()));
        }
        if self.rank == 0 || self.rank > self.d_in.min(self.d_out) {
            return Err(Error::Invariant(format!(
                "rank {} outside [1, min({}, {})]",
                self.rank, self.d_in, self.d_out
            )));
        }
        let capacity = self.d_out * self.rank;
        let needed = match self.overlap_mode {
            OverlapMode::Duplicated => 1,
            OverlapMode::Orthogonal => self.n_adapters,
            OverlapMode::Mixed(angle) => {
                if !(0.0..=90.0).contains(&angle) {
                    return Err(Error::Invariant(format!(
                        "pairwise angle {angle} outside [0, 90] degrees is infeasible for arbitrary pool sizes"
                    )));
                }
                self.n_adapters + 1
            }
        };
        if needed > capacity {
            return Err(Error::Invariant(format!(
                "{} directions do not fit in a {}-dimensional factor space; raise rank or output dim",
                needed, capacity
            )));
        }
        Ok(())
    }
}

/// A generated pool with everything the pipeline consumes.
#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub manifest: PoolManifest,
    pub bundles: Vec<AdapterBundle>,
    pub tasks: Vec<ToyTask>,
    pub blocks: BlockMap,
}

fn sample_gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthonormal rows via Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut impl Rng, n: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    if n > d {
        return Err(Error::Invariant(format!(
            "cannot build {n} orthonormal rows in dimension {d}"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        attempts += 1;
        if attempts > 20 * n {
            return Err(Error::Invariant("orthonormal basis generation failed to converge".into()));
        }
        let mut v = sample_gaussian(rng, d);
        for q in &rows {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    Ok(rows)
}

/// Directions in factor space with the requested pairwise geometry.
fn factor_directions(
    rng: &mut impl Rng,
    spec: &ToyPoolSpec,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = spec.n_adapters;
    match spec.overlap_mode {
        OverlapMode::Duplicated => {
            let q = orthonormal_rows(rng, 1, dim)?;
            Ok(vec![q[0].clone(); n])
        }
        OverlapMode::Orthogonal => orthonormal_rows(rng, n, dim),
        OverlapMode::Mixed(angle_deg) => {
            // For pairwise cosine c, combine a shared axis with per-adapter
            // orthogonal parts: sqrt(c) * q0 + sqrt(1-c) * qi has inner
            // product exactly c for any distinct pair.
            let c = (angle_deg as f64).to_radians().cos().max(0.0);
            let q = orthonormal_rows(rng, n + 1, dim)?;
            let shared = c.sqrt();
            let own = (1.0 - c).sqrt();
            Ok((0..n)
                .map(|i| {
                    q[0].iter()
                        .zip(&q[i + 1])
                        .map(|(&s, &o)| shared * s + own * o)
                        .collect()
                })
                .collect())
        }
    }
}

/// Generate a pool, its manifest (one view per block, embeddings equal to
/// normalized block vectors), and target tasks. Deterministic per spec.
pub fn gen_toy_pool(spec: &ToyPoolSpec) -> Result<ToyScenario> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let d_in = spec.d_in;
    let d_out = spec.d_out;
    let r = spec.rank;
    let factor_dim = d_out * r;

    // Shared right factor per block, orthonormal rows so factor-space
    // geometry transfers to the effective updates.
    let mut block_factors: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.n_blocks);
    let mut block_dirs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.n_blocks);
    for _ in 0..spec.n_blocks {
        block_factors.push(orthonormal_rows(&mut rng, r, d_in)?);
        let mut dirs = factor_directions(&mut rng, spec, factor_dim)?;
        if spec.noise_level > 0.0 {
            let scale = spec.noise_level as f64 / (factor_dim as f64).sqrt();
            for d in dirs.iter_mut() {
                for v in d.iter_mut() {
                    *v += scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        block_dirs.push(dirs);
    }

    // Effective updates: B (d_out x r) reshaped from the direction vector,
    // times the shared A (r x d_in).
    let mut bundles = Vec::with_capacity(spec.n_adapters);
    for i in 0..spec.n_adapters {
        let mut bundle = AdapterBundle::new(format!("a{i:02}"));
        for (b, (factors, dirs)) in block_factors.iter().zip(&block_dirs).enumerate() {
            let beta = &dirs[i];
            let mut data = vec![0.0f32; d_out * d_in];
            for row in 0..d_out {
                for col in 0..d_in {
                    let mut acc = 0.0f64;
                    for l in 0..r {
                        acc += beta[row * r + l] * factors[l][col];
                    }
                    data[row * d_in + col] = acc as f32;
                }
            }
            bundle.insert(TensorBlob::new(
                format!("block{b}.w"),
                vec![d_out, d_in],
                data,
            )?);
        }
        bundles.push(bundle);
    }

    let blocks = BlockMap::by_leading_segment(bundles[0].tensor_names());

    // One retrieval view per block; an adapter's embedding is its
    // normalized block vector in that view.
    let mut views: BTreeMap<String, ViewIndex> = BTreeMap::new();
    for block_id in blocks.block_ids() {
        let mut vectors = BTreeMap::new();
        for bundle in &bundles {
            let v = blocks.block_vector(bundle, &block_id)?;
            let norm: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let normalized: Vec<f32> = if norm > 0.0 {
                v.iter().map(|&x| (x as f64 / norm) as f32).collect()
            } else {
                v
            };
            vectors.insert(bundle.adapter_id.clone(), normalized);
        }
        views.insert(block_id.clone(), ViewIndex::from_vectors(vectors)?);
    }
    let manifest = PoolManifest {
        adapters: bundles
            .iter()
            .map(|b| AdapterEntry {
                adapter_id: b.adapter_id.clone(),
                source_task: format!("src-{}", b.adapter_id),
                bundle_path: format!("bundles/{}.bin", b.adapter_id),
            })
            .collect(),
        views,
    };
    manifest.validate()?;

    // Tasks: targets are combinations of a few adapters' total maps, so
    // good weights exist; embeddings point at the combined direction per
    // view with a small per-example jitter.
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    let n_used = spec.n_adapters.min(3);
    for t in 0..spec.n_tasks {
        let mut coeffs = vec![0.0f64; spec.n_adapters];
        for k in 0..n_used {
            let idx = (t + k) % spec.n_adapters;
            coeffs[idx] = rng.random_range(0.4..1.0);
        }

        let mut target = Matrix::zeros(d_out, d_in);
        let mut target_acc = vec![0.0f64; d_out * d_in];
        for (i, bundle) in bundles.iter().enumerate() {
            if coeffs[i] == 0.0 {
                continue;
            }
            for tensor in bundle.tensors.values() {
                for (acc, &v) in target_acc.iter_mut().zip(&tensor.data) {
                    *acc += coeffs[i] * v as f64;
                }
            }
        }
        for (slot, &v) in target.data.iter_mut().zip(&target_acc) {
            *slot = v as f32;
        }

        let bias: Vec<f64> = sample_gaussian(&mut rng, d_out)
            .into_iter()
            .map(|v| 0.1 * v)
            .collect();

        let make_examples = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, target: &Matrix, bias: &[f64]| {
            (0..n)
                .map(|_| {
                    let x: Vec<f32> = sample_gaussian(rng, d_in)
                        .into_iter()
                        .map(|v| v as f32)
                        .collect();
                    let mut y = target.mul_vec(&x);
                    for (yk, &bk) in y.iter_mut().zip(bias) {
                        *yk += bk;
                    }
                    ToyExample { x, y }
                })
                .collect::<Vec<_>>()
        };
        let support = make_examples(&mut rng, spec.n_examples, &target, &bias);
        let queries = make_examples(&mut rng, spec.n_queries, &target, &bias);

        // Per-view task embeddings: direction of the target's block
        // component, jittered per example.
        let mut support_embeddings = BTreeMap::new();
        let mut query_embeddings = BTreeMap::new();
        for block_id in blocks.block_ids() {
            let mut dir = vec![0.0f64; d_out * d_in];
            for (i, bundle) in bundles.iter().enumerate() {
                if coeffs[i] == 0.0 {
                    continue;
                }
                let v = blocks.block_vector(bundle, &block_id)?;
                for (acc, &x) in dir.iter_mut().zip(&v) {
                    *acc += coeffs[i] * x as f64;
                }
            }
            let embed = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
                (0..n)
                    .map(|_| {
                        let mut e: Vec<f64> = dir
                            .iter()
                            .map(|&v| v + 0.05 * rng.sample::<f64, _>(StandardNormal))
                            .collect();
                        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for v in e.iter_mut() {
                                *v /= norm;
                            }
                        }
                        e.into_iter().map(|v| v as f32).collect::<Vec<f32>>()
                    })
                    .collect::<Vec<_>>()
            };
            support_embeddings.insert(block_id.clone(), embed(&mut rng, spec.n_examples));
            query_embeddings.insert(block_id.clone(), embed(&mut rng, spec.n_queries));
        }

        tasks.push(ToyTask {
            task_id: format!("task{t:02}"),
            d_in,
            d_out,
            target,
            bias,
            support,
            queries,
            support_embeddings,
            query_embeddings,
        });
    }

    Ok(ToyScenario {
        manifest,
        bundles,
        tasks,
        blocks,
    })
}

/// Sum every tensor of a composed bundle into one d_out x d_in map.
pub fn total_map(bundle: &AdapterBundle, d_out: usize, d_in: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; d_out * d_in];
    for tensor in bundle.tensors.values() {
        if tensor.shape != [d_out, d_in] {
            return Err(Error::Invariant(format!(
                "tensor {} has shape {:?}, task expects [{d_out}, {d_in}]",
                tensor.name, tensor.shape
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&tensor.data) {
            *a += v as f64;
        }
    }
    Ok(acc)
}

/// Mean squared error of (backbone + composed update) on the support set.
pub fn toy_support_loss(task: &ToyTask, composed: &AdapterBundle) -> Result<f64> {
    let map = total_map(composed, task.d_out, task.d_in)?;
    if task.support.is_empty() {
        return Err(Error::Invariant(format!("task {} has no support examples", task.task_id)));
    }
    let mut acc = 0.0f64;
    for ex in &task.support {
        for k in 0..task.d_out {
            // Products first, bias last: the same association order used
            // when the targets were generated, so an exact-fit composition
            // cancels to exactly zero.
            let mut pred = 0.0f64;
            for j in 0..task.d_in {
                pred += map[k * task.d_in + j] * ex.x[j] as f64;
            }
            pred += task.bias[k];
            let err = ex.y[k] - pred;
            acc += err * err;
        }
    }
    Ok(acc / task.support.len() as f64)
}

/// Predicted label per query under the composed update: the coordinate of
/// the largest model output.
pub fn toy_predictions(task: &ToyTask, composed: &AdapterBundle) -> Result<Vec<(String, String)>> {
    let map = total_map(composed, task.d_out, task.d_in)?;
    let mut out = Vec::with_capacity(task.queries.len());
    for (j, ex) in task.queries.iter().enumerate() {
        let mut pred = task.bias.clone();
        for k in 0..task.d_out {
            for c in 0..task.d_in {
                pred[k] += map[k * task.d_in + c] * ex.x[c] as f64;
            }
        }
        out.push((task.query_id(j), argmax_label(&pred)));
    }
    Ok(out)
}

/// Support loss of the linear merge at given weights: the black-box
/// objective the weight search minimizes on toy pools.
pub struct ToyComposedLoss<'a> {
    pub task: &'a ToyTask,
    pub bundles: &'a [AdapterBundle],
    pub adapter_ids: &'a [String],
}

impl LossEvaluator for ToyComposedLoss<'_> {
    fn evaluate(&mut self, weights: &[f32]) -> Result<f64> {
        if weights.len() != self.adapter_ids.len() {
            return Err(Error::Invariant(format!(
                "{} weights for {} adapters",
                weights.len(),
                self.adapter_ids.len()
            )));
        }
        let map: BTreeMap<String, f32> = self
            .adapter_ids
            .iter()
            .cloned()
            .zip(weights.iter().copied())
            .collect();
        let wv = WeightVector {
            weights: map,
            clip_lo: f32::NEG_INFINITY,
            clip_hi: f32::INFINITY,
        };
        let merged = linear_merge(self.bundles, &wv)?;
        toy_support_loss(self.task, &merged)
    }
}

/// Which pool geometry an interference scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// Mutually orthogonal adapters: the composers must agree.
    Orthogonal,
    /// A bit-identical duplicate pair: the duplicate is pruned and the
    /// composers still agree.
    Duplicated,
    /// Two adapters share a dominant direction with conflicting residuals
    /// and the target needs both residuals.
    Conflict,
}

/// Outcome of running the plain weighted sum and the residual composer on
/// the same constructed pool under identical weights.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub kind: ScenarioKind,
    pub task: ToyTask,
    pub bundles: Vec<AdapterBundle>,
    pub blocks: BlockMap,
    pub weights: WeightVector,
    pub linear_loss: f64,
    pub lasrc_loss: f64,
}

/// Build one pool of the requested kind, compose it both ways with unit
/// weights, and report both support losses.
pub fn interference_scenario(seed: u64, kind: ScenarioKind) -> Result<ScenarioReport> {
    let d_in = 6usize;
    let d_out = 4usize;
    let r = 2usize;
    let factor_dim = d_out * r;
    let mut rng = seeded_rng(seed);
    let factors = orthonormal_rows(&mut rng, r, d_in)?;
    let axes = orthonormal_rows(&mut rng, 3, factor_dim)?;
    let (u, q, v) = (&axes[0], &axes[1], &axes[2]);

    let combine = |parts: &[(f64, &Vec<f64>)]| -> Vec<f64> {
        let mut out = vec![0.0f64; factor_dim];
        for (c, vec) in parts {
            for (o, &x) in out.iter_mut().zip(vec.iter()) {
                *o += c * x;
            }
        }
        out
    };

    // Factor-space directions per scenario, plus the factor-space target.
    let (dirs, target_dir): (Vec<Vec<f64>>, Vec<f64>) = match kind {
        ScenarioKind::Orthogonal => (
            vec![u.clone(), q.clone(), v.clone()],
            combine(&[(1.0, u), (1.0, v)]),
        ),
        ScenarioKind::Duplicated => (
            vec![u.clone(), u.clone()],
            combine(&[(2.0, u)]),
        ),
        ScenarioKind::Conflict => (
            // Two adapters share u with opposite small q components; the
            // third holds the v direction the target also needs.
            vec![
                combine(&[(1.0, u), (0.2, q)]),
                combine(&[(1.0, u), (-0.2, q)]),
                v.clone(),
            ],
            combine(&[(1.0, u), (1.0, v)]),
        ),
    };

    let to_update = |beta: &[f64]| -> Vec<f32> {
        let mut data = vec![0.0f32; d_out * d_in];
        for row in 0..d_out {
            for col in 0..d_in {
                let mut acc = 0.0f64;
                for l in 0..r {
                    acc += beta[row * r + l] * factors[l][col];
                }
                data[row * d_in + col] = acc as f32;
            }
        }
        data
    };

    let mut bundles = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let mut b = AdapterBundle::new(format!("a{i}"));
        b.insert(TensorBlob::new("block0.w", vec![d_out, d_in], to_update(dir))?);
        bundles.push(b);
    }
    let blocks = BlockMap::by_leading_segment(bundles[0].tensor_names());

    let target = Matrix {
        rows: d_out,
        cols: d_in,
        data: to_update(&target_dir),
    };
    // Support inputs are the standard basis, so the support loss is exactly
    // the squared Frobenius distance to the target divided by d_in.
    let support: Vec<ToyExample> = (0..d_in)
        .map(|j| {
            let mut x = vec![0.0f32; d_in];
            x[j] = 1.0;
            let y = target.mul_vec(&x);
            ToyExample { x, y }
        })
        .collect();
    let task = ToyTask {
        task_id: format!("scenario-{kind:?}").to_lowercase(),
        d_in,
        d_out,
        target,
        bias: vec![0.0; d_out],
        support,
        queries: vec![],
        support_embeddings: BTreeMap::new(),
        query_embeddings: BTreeMap::new(),
    };

    let weights = WeightVector::new(
        bundles
            .iter()
            .map(|b| (b.adapter_id.clone(), 1.0f32))
            .collect(),
        -1.5,
        1.5,
    )?;

    let linear = linear_merge(&bundles, &weights)?;
    let (residual, _comps) = lasrc_merge(&bundles, &weights, &blocks, &LasrcConfig::default())?;
    let linear_loss = toy_support_loss(&task, &linear)?;
    let lasrc_loss = toy_support_loss(&task, &residual)?;

    Ok(ScenarioReport {
        kind,
        task,
        bundles,
        blocks,
        weights,
        linear_loss,
        lasrc_loss,
    })
}

/// Views with nested correctness sets: each view is correct on a subset of
/// the previous view's correct queries. Under nesting, no weighting of the
/// views can beat the best single view, so oracle view selection dominates
/// any aggregation on these tasks by construction.
pub fn nested_view_scenario(seed: u64) -> crate::agg::TaskViews {
    use crate::agg::{TaskViews, ViewRecord};
    let mut rng = seeded_rng(seed);
    let n_queries = rng.random_range(4..10usize);
    let n_views = 3usize;
    let references: BTreeMap<String, String> = (0..n_queries)
        .map(|q| (format!("q{q}"), format!("r{q}")))
        .collect();

    // Nested correct sets: we draw the best view's set, then shrink.
    let mut correct: Vec<Vec<bool>> = Vec::new();
    let first: Vec<bool> = (0..n_queries).map(|_| rng.random::<bool>()).collect();
    correct.push(first);
    for v in 1..n_views {
        let prev = correct[v - 1].clone();
        let shrunk = prev
            .iter()
            .map(|&c| c && rng.random::<bool>())
            .collect();
        correct.push(shrunk);
    }

    let views = (0..n_views)
        .map(|v| {
            let predictions = (0..n_queries)
                .map(|q| {
                    let answer = if correct[v][q] {
                        format!("r{q}")
                    } else {
                        format!("w{v}")
                    };
                    (format!("q{q}"), answer)
                })
                .collect();
            ViewRecord {
                view_id: format!("view{v}"),
                support_loss: rng.random_range(0.05..2.0f32),
                predictions,
            }
        })
        .collect();

    TaskViews {
        task_id: format!("nested-{seed}"),
        views,
        references,
    }
}

/// Write a scenario to disk in the standard formats: manifest.json with
/// inline views, bundle containers, and one task JSON per task.
pub fn save_scenario(scenario: &ToyScenario, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("bundles")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("tasks")).map_err(|e| Error::io(dir, e))?;
    for (entry, bundle) in scenario.manifest.adapters.iter().zip(&scenario.bundles) {
        container::save_bundle(bundle, dir.join(&entry.bundle_path))?;
    }
    crate::retrieval::save_manifest(&scenario.manifest, dir.join("manifest.json"))?;
    for task in &scenario.tasks {
        task.save(dir.join("tasks").join(format!("{}.json", task.task_id)))?;
    }
    Ok(())
}

/// Load the tasks of a saved scenario, sorted by task id.
pub fn load_tasks(dir: impl AsRef<Path>) -> Result<Vec<ToyTask>> {
    let dir = dir.as_ref().join("tasks");
    let mut paths: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.into_iter().map(ToyTask::load).collect()
}

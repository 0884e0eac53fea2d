//! Merge operators over adapter bundles: plain weighted sum, residual
//! composition with interference control, sign-elected trimming, and
//! drop-rescale variants.
//!
//! The residual composer works per block. Weighted block vectors are
//! orthogonalized in descending weighted-norm order by modified
//! Gram-Schmidt; residuals that shrink below the prune threshold are
//! dropped; the surviving residual sum is rescaled to the norm of the plain
//! weighted sum (the linear anchor) and the output interpolates between the
//! two. A per-block coefficient grows with the energy the
//! orthogonalization removed, so near-orthogonal pools fall back to the
//! anchor and overlapping pools lean on the residuals.
//!
//! Every operator fixes its internal summation order (f64 accumulation in
//! canonical order), so results do not depend on the order bundles are
//! passed in.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdp::{sdp_bundle, SdpConfig};
use crate::search::WeightVector;
use crate::tensor::{dot64_f64, norm64_f64, AdapterBundle, BlockMap, TensorBlob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeOperator {
    Linear,
    Lasrc,
    Ties,
    DareAdd,
    DareTies,
}

impl std::str::FromStr for MergeOperator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MergeOperator::Linear),
            "lasrc" => Ok(MergeOperator::Lasrc),
            "ties" => Ok(MergeOperator::Ties),
            "dare-add" => Ok(MergeOperator::DareAdd),
            "dare-ties" => Ok(MergeOperator::DareTies),
            other => Err(Error::Usage(format!(
                "unknown merge method {other}; expected linear, lasrc, ties, dare-add, or dare-ties"
            ))),
        }
    }
}

impl std::fmt::Display for MergeOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MergeOperator::Linear => "linear",
            MergeOperator::Lasrc => "lasrc",
            MergeOperator::Ties => "ties",
            MergeOperator::DareAdd => "dare-add",
            MergeOperator::DareTies => "dare-ties",
        };
        f.write_str(s)
    }
}

/// Controls for the residual composer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LasrcConfig {
    pub gamma_base: f32,
    pub gamma_floor: f32,
    pub norm_guard: f32,
    pub prune_threshold: f32,
    /// Multiplies the overlap statistic before the schedule; 1.0 is a
    /// no-op. Experimental beyond the default.
    pub consensus_scale: f32,
    /// Adds `alignment_scale * mean pairwise cosine * anchor` to the
    /// output; 0.0 is a no-op. Experimental beyond the default.
    pub alignment_scale: f32,
    pub overlap_adaptive: bool,
}

impl Default for LasrcConfig {
    fn default() -> Self {
        LasrcConfig {
            gamma_base: 0.5,
            gamma_floor: 0.05,
            norm_guard: 0.3,
            prune_threshold: 0.0,
            consensus_scale: 1.0,
            alignment_scale: 0.0,
            overlap_adaptive: true,
        }
    }
}

impl LasrcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.gamma_floor
            && self.gamma_floor <= self.gamma_base
            && self.gamma_base <= 1.0)
        {
            return Err(Error::Invariant(format!(
                "need 0 <= gamma_floor ({}) <= gamma_base ({}) <= 1",
                self.gamma_floor, self.gamma_base
            )));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::Invariant(format!(
                "prune threshold {} outside [0, 1)",
                self.prune_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.norm_guard) {
            return Err(Error::Invariant(format!(
                "norm guard {} outside [0, 1]",
                self.norm_guard
            )));
        }
        Ok(())
    }
}

/// Operator selection plus the knobs each operator reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub operator: MergeOperator,
    pub lasrc: LasrcConfig,
    pub ties_trim_fraction: f32,
    pub dare_drop_rate: f32,
    pub dare_seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            operator: MergeOperator::Linear,
            lasrc: LasrcConfig::default(),
            ties_trim_fraction: 0.2,
            dare_drop_rate: 0.5,
            dare_seed: 42,
        }
    }
}

/// Per-block record of what the residual composer did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockComposition {
    pub block_id: String,
    /// Plain weighted sum of the block vectors.
    pub linear_anchor: Vec<f32>,
    /// Sum of retained residuals, before rescaling.
    pub residual_sum: Vec<f32>,
    /// Residual sum rescaled to the anchor norm; present whenever both
    /// norms were positive.
    pub rescaled_residual: Option<Vec<f32>>,
    pub gamma_b: f32,
    pub retained_ids: Vec<String>,
    pub pruned_ids: Vec<String>,
    /// Orthonormal residual directions, aligned with retained_ids.
    pub retained_bases: Vec<Vec<f32>>,
    /// Whether the output actually interpolated (norm guard and degenerate
    /// norms fall back to the anchor).
    pub interpolated: bool,
    pub warning: Option<String>,
}

impl BlockComposition {
    pub fn anchor_norm(&self) -> f64 {
        self.linear_anchor
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn residual_norm(&self) -> f64 {
        self.residual_sum
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Compact JSONL row for audit logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDiagnostic {
    pub block_id: String,
    pub anchor_norm: f64,
    pub residual_norm: f64,
    pub gamma: f32,
    pub retained_ids: Vec<String>,
    pub pruned_ids: Vec<String>,
    pub interpolated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl From<&BlockComposition> for BlockDiagnostic {
    fn from(c: &BlockComposition) -> Self {
        BlockDiagnostic {
            block_id: c.block_id.clone(),
            anchor_norm: c.anchor_norm(),
            residual_norm: c.residual_norm(),
            gamma: c.gamma_b,
            retained_ids: c.retained_ids.clone(),
            pruned_ids: c.pruned_ids.clone(),
            interpolated: c.interpolated,
            warning: c.warning.clone(),
        }
    }
}

/// Write composition diagnostics as JSONL.
pub fn write_diagnostics(compositions: &[BlockComposition], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for c in compositions {
        let row = BlockDiagnostic::from(c);
        serde_json::to_writer(&mut out, &row).expect("static schema");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn checked_members<'a>(
    bundles: &'a [AdapterBundle],
    weights: &WeightVector,
) -> Result<Vec<(&'a AdapterBundle, f64)>> {
    if bundles.is_empty() {
        return Err(Error::Invariant("merge needs at least one bundle".into()));
    }
    let first = &bundles[0];
    let mut members = Vec::with_capacity(bundles.len());
    for b in bundles {
        b.validate()?;
        first.check_same_schema(b)?;
        let w = weights.get(&b.adapter_id).ok_or_else(|| {
            Error::Invariant(format!("no weight for adapter {}", b.adapter_id))
        })?;
        members.push((b, w as f64));
    }
    Ok(members)
}

/// Canonical adapter order: descending |w| * whole-bundle norm, ties by id.
fn canonical_order(members: &mut [(&AdapterBundle, f64)]) {
    let keyed: Vec<(f64, String)> = members
        .iter()
        .map(|(b, w)| (w.abs() * b.frobenius_norm(), b.adapter_id.clone()))
        .collect();
    let mut idx: Vec<usize> = (0..members.len()).collect();
    idx.sort_by(|&i, &j| {
        keyed[j]
            .0
            .total_cmp(&keyed[i].0)
            .then_with(|| keyed[i].1.cmp(&keyed[j].1))
    });
    let reordered: Vec<(&AdapterBundle, f64)> = idx.iter().map(|&i| members[i]).collect();
    members.copy_from_slice(&reordered);
}

/// Weighted sum of bundles, tensor by tensor.
pub fn linear_merge(bundles: &[AdapterBundle], weights: &WeightVector) -> Result<AdapterBundle> {
    let mut members = checked_members(bundles, weights)?;
    canonical_order(&mut members);
    let reference = &bundles[0];
    let mut out = AdapterBundle::new("merged");
    for (name, ref_tensor) in &reference.tensors {
        let mut acc = vec![0.0f64; ref_tensor.numel()];
        for (b, w) in &members {
            let t = &b.tensors[name];
            for (a, &v) in acc.iter_mut().zip(&t.data) {
                *a += w * v as f64;
            }
        }
        out.insert(TensorBlob {
            name: name.clone(),
            shape: ref_tensor.shape.clone(),
            data: acc.into_iter().map(|v| v as f32).collect(),
        });
    }
    Ok(out)
}

/// Overlap-adaptive interpolation coefficient from block energies:
/// `weighted_energy` is the summed squared norm of the weighted block
/// vectors, `residual_energy` the summed squared norm of retained
/// residuals. The overlap statistic is the fraction of weighted energy the
/// orthogonalization removed.
pub fn gamma_schedule(weighted_energy: f64, residual_energy: f64, cfg: &LasrcConfig) -> f32 {
    if !cfg.overlap_adaptive {
        return cfg.gamma_base;
    }
    let overlap = if weighted_energy > 0.0 {
        (1.0 - residual_energy / weighted_energy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let overlap = (overlap * cfg.consensus_scale as f64).clamp(0.0, 1.0);
    (cfg.gamma_base as f64 * overlap).max(cfg.gamma_floor as f64) as f32
}

/// Residual composition. Returns the merged bundle plus one
/// [`BlockComposition`] per block, in block-id order.
pub fn lasrc_merge(
    bundles: &[AdapterBundle],
    weights: &WeightVector,
    blocks: &BlockMap,
    cfg: &LasrcConfig,
) -> Result<(AdapterBundle, Vec<BlockComposition>)> {
    cfg.validate()?;
    let members = checked_members(bundles, weights)?;
    let reference = &bundles[0];
    blocks.validate_partition(&reference.tensor_names())?;

    let mut out = AdapterBundle::new("merged");
    let mut compositions = Vec::new();
    for block_id in blocks.block_ids() {
        let composition = compose_block(&members, blocks, &block_id, reference, cfg)?;
        let flat = block_output(&composition, cfg);
        for tensor in blocks.split_back(reference, &block_id, &flat)? {
            out.insert(tensor);
        }
        compositions.push(composition);
    }
    Ok((out, compositions))
}

fn compose_block(
    members: &[(&AdapterBundle, f64)],
    blocks: &BlockMap,
    block_id: &str,
    reference: &AdapterBundle,
    cfg: &LasrcConfig,
) -> Result<BlockComposition> {
    let dim: usize = blocks.block_vector(reference, block_id)?.len();

    // Weighted block vectors for nonzero-weight adapters.
    let mut entries: Vec<(String, Vec<f64>, f64)> = Vec::new();
    for (b, w) in members {
        if *w == 0.0 {
            continue;
        }
        let d = blocks.block_vector(b, block_id)?;
        let z: Vec<f64> = d.iter().map(|&v| *w * v as f64).collect();
        let zn = norm64_f64(&z);
        entries.push((b.adapter_id.clone(), z, zn));
    }

    if entries.is_empty() {
        return Ok(BlockComposition {
            block_id: block_id.to_string(),
            linear_anchor: vec![0.0; dim],
            residual_sum: vec![0.0; dim],
            rescaled_residual: None,
            gamma_b: 0.0,
            retained_ids: vec![],
            pruned_ids: vec![],
            retained_bases: vec![],
            interpolated: false,
            warning: Some(format!(
                "block {block_id}: no adapter has nonzero weight; emitting zeros"
            )),
        });
    }

    // Descending weighted norm, ties by id. The weight is already inside z,
    // so the key |w|*||d|| equals ||z||.
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));

    let mut anchor = vec![0.0f64; dim];
    for (_, z, _) in &entries {
        for (a, &v) in anchor.iter_mut().zip(z) {
            *a += v;
        }
    }

    // Modified Gram-Schmidt with unnormalized retained residuals: the
    // projection coefficient dot(r, q)/dot(q, q) is exactly 1 for a
    // bit-identical duplicate, so duplicates leave an exactly zero residual.
    let mut retained: Vec<(String, Vec<f64>, f64)> = Vec::new();
    let mut pruned_ids: Vec<String> = Vec::new();
    for (id, z, zn) in &entries {
        let mut r = z.clone();
        for (_, q, _) in &retained {
            let qq = dot64_f64(q, q);
            if qq > 0.0 {
                let coef = dot64_f64(&r, q) / qq;
                for (ri, &qi) in r.iter_mut().zip(q) {
                    *ri -= coef * qi;
                }
            }
        }
        let rn = norm64_f64(&r);
        let keep = *zn > 0.0 && rn > 0.0 && rn / zn > cfg.prune_threshold as f64;
        if keep {
            retained.push((id.clone(), r, rn));
        } else {
            pruned_ids.push(id.clone());
        }
    }

    let mut residual_sum = vec![0.0f64; dim];
    for (_, r, _) in &retained {
        for (a, &v) in residual_sum.iter_mut().zip(r) {
            *a += v;
        }
    }

    let weighted_energy: f64 = entries.iter().map(|(_, _, zn)| zn * zn).sum();
    let residual_energy: f64 = retained.iter().map(|(_, _, rn)| rn * rn).sum();
    let gamma_b = gamma_schedule(weighted_energy, residual_energy, cfg);

    let anchor_norm = norm64_f64(&anchor);
    let residual_norm = norm64_f64(&residual_sum);
    let rescaled_residual = if anchor_norm > 0.0 && residual_norm > 0.0 {
        let ratio = anchor_norm / residual_norm;
        Some(
            residual_sum
                .iter()
                .map(|&v| (v * ratio) as f32)
                .collect::<Vec<f32>>(),
        )
    } else {
        None
    };
    let interpolated =
        rescaled_residual.is_some() && residual_norm >= cfg.norm_guard as f64 * anchor_norm;

    let retained_ids: Vec<String> = retained.iter().map(|(id, _, _)| id.clone()).collect();
    let retained_bases: Vec<Vec<f32>> = retained
        .iter()
        .map(|(_, r, rn)| r.iter().map(|&v| (v / rn) as f32).collect())
        .collect();

    Ok(BlockComposition {
        block_id: block_id.to_string(),
        linear_anchor: anchor.iter().map(|&v| v as f32).collect(),
        residual_sum: residual_sum.iter().map(|&v| v as f32).collect(),
        rescaled_residual,
        gamma_b,
        retained_ids,
        pruned_ids,
        retained_bases,
        interpolated,
        warning: None,
    })
}

/// Materialize the block output from a composition record. The
/// interpolation is computed as anchor + gamma * (rescaled - anchor), which
/// is exact when the rescaled residual coincides with the anchor.
fn block_output(c: &BlockComposition, cfg: &LasrcConfig) -> Vec<f32> {
    let anchor: Vec<f64> = c.linear_anchor.iter().map(|&v| v as f64).collect();
    let mut out = anchor.clone();
    if c.interpolated {
        let rescaled = c
            .rescaled_residual
            .as_ref()
            .expect("interpolated implies a rescaled residual");
        let g = c.gamma_b as f64;
        for (o, (&a, &r)) in out.iter_mut().zip(anchor.iter().zip(rescaled)) {
            *o = a + g * (r as f64 - a);
        }
    }
    if cfg.alignment_scale != 0.0 {
        // Experimental alignment term; exact no-op at the default 0.0.
        let mpc = c.mean_pairwise_cosine();
        let s = cfg.alignment_scale as f64 * mpc;
        for (o, &a) in out.iter_mut().zip(&anchor) {
            *o += s * a;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

impl BlockComposition {
    /// Mean pairwise cosine over the weighted block vectors is not stored;
    /// approximate it from retained bases plus anchor when requested by the
    /// experimental alignment term.
    fn mean_pairwise_cosine(&self) -> f64 {
        let n = self.retained_bases.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &self.retained_bases[i];
                let b = &self.retained_bases[j];
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
                total += dot;
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Trim, elect signs, and average the survivors.
pub fn ties_merge(
    bundles: &[AdapterBundle],
    weights: &WeightVector,
    trim_fraction: f32,
) -> Result<AdapterBundle> {
    if !(trim_fraction > 0.0 && trim_fraction <= 1.0) {
        return Err(Error::Invariant(format!(
            "trim fraction {trim_fraction} outside (0, 1]"
        )));
    }
    let mut members = checked_members(bundles, weights)?;
    // Fixed id order makes election sums and means order-independent.
    members.sort_by(|a, b| a.0.adapter_id.cmp(&b.0.adapter_id));
    let reference = &bundles[0];
    let names = reference.tensor_names();
    let total: usize = names.iter().map(|n| reference.tensors[n].numel()).sum();
    let keep = ((trim_fraction as f64) * total as f64).ceil() as usize;

    // Per adapter: weighted entries flattened in tensor-name order, trimmed
    // to the top `keep` by magnitude (ties keep the earlier flat index).
    let mut trimmed: Vec<Vec<f64>> = Vec::with_capacity(members.len());
    for (b, w) in &members {
        let mut flat = Vec::with_capacity(total);
        for name in &names {
            for &v in &b.tensors[name].data {
                flat.push(w * v as f64);
            }
        }
        let mut idx: Vec<usize> = (0..total).collect();
        idx.sort_by(|&i, &j| flat[j].abs().total_cmp(&flat[i].abs()).then(i.cmp(&j)));
        let mut kept = vec![0.0f64; total];
        for &i in idx.iter().take(keep) {
            kept[i] = flat[i];
        }
        trimmed.push(kept);
    }

    // Coordinate-wise sign election and disjoint mean.
    let mut merged = vec![0.0f64; total];
    for i in 0..total {
        let mut pos = 0.0f64;
        let mut neg = 0.0f64;
        for t in &trimmed {
            if t[i] > 0.0 {
                pos += t[i];
            } else if t[i] < 0.0 {
                neg += -t[i];
            }
        }
        let sign = if pos >= neg { 1.0 } else { -1.0 };
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for t in &trimmed {
            if t[i] != 0.0 && (t[i] > 0.0) == (sign > 0.0) {
                sum += t[i];
                count += 1;
            }
        }
        merged[i] = if count > 0 { sum / count as f64 } else { 0.0 };
    }

    let mut out = AdapterBundle::new("merged");
    let mut cursor = 0usize;
    for name in &names {
        let ref_tensor = &reference.tensors[name];
        let n = ref_tensor.numel();
        out.insert(TensorBlob {
            name: name.clone(),
            shape: ref_tensor.shape.clone(),
            data: merged[cursor..cursor + n].iter().map(|&v| v as f32).collect(),
        });
        cursor += n;
    }
    Ok(out)
}

/// Drop-rescale each bundle with a seeded mask, then merge linearly or with
/// the trim operator.
pub fn dare_merge(
    bundles: &[AdapterBundle],
    weights: &WeightVector,
    drop_rate: f32,
    seed: u64,
    with_ties: bool,
    ties_trim_fraction: f32,
) -> Result<AdapterBundle> {
    let cfg = SdpConfig {
        drop_rate,
        seed,
        survivor_rescale: true,
        norm_preserve: false,
    };
    cfg.validate()?;
    let mut dropped = Vec::with_capacity(bundles.len());
    for b in bundles {
        let (pruned, _masks) = sdp_bundle(b, &cfg)?;
        dropped.push(pruned);
    }
    if with_ties {
        ties_merge(&dropped, weights, ties_trim_fraction)
    } else {
        linear_merge(&dropped, weights)
    }
}

/// Dispatch on the configured operator. Block compositions are returned
/// only by the residual composer.
pub fn merge_with_config(
    bundles: &[AdapterBundle],
    weights: &WeightVector,
    blocks: &BlockMap,
    cfg: &MergeConfig,
) -> Result<(AdapterBundle, Option<Vec<BlockComposition>>)> {
    match cfg.operator {
        MergeOperator::Linear => Ok((linear_merge(bundles, weights)?, None)),
        MergeOperator::Lasrc => {
            let (bundle, comps) = lasrc_merge(bundles, weights, blocks, &cfg.lasrc)?;
            Ok((bundle, Some(comps)))
        }
        MergeOperator::Ties => Ok((ties_merge(bundles, weights, cfg.ties_trim_fraction)?, None)),
        MergeOperator::DareAdd => Ok((
            dare_merge(
                bundles,
                weights,
                cfg.dare_drop_rate,
                cfg.dare_seed,
                false,
                cfg.ties_trim_fraction,
            )?,
            None,
        )),
        MergeOperator::DareTies => Ok((
            dare_merge(
                bundles,
                weights,
                cfg.dare_drop_rate,
                cfg.dare_seed,
                true,
                cfg.ties_trim_fraction,
            )?,
            None,
        )),
    }
}

//! Adapter tensor bundles and block vectors.
//!
//! The unit of composition everywhere in this crate is the dense effective
//! update per adapted module, not the low-rank factor pair. [`effective_update`]
//! materializes `scale * B * A` once; after that point only [`TensorBlob`]s
//! travel through retrieval, merging, and sparsification.
//!
//! A [`BlockMap`] partitions tensor names into blocks. Concatenating a
//! bundle's tensors for one block (in the map's canonical order) gives the
//! flat block vector the merge operators work on; [`BlockMap::split_back`]
//! inverts that exactly.
//!
//! Accumulation is in f64 throughout, storage is f32. Summation order is
//! fixed by the canonical orders defined here, so results are reproducible
//! bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named dense f32 tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorBlob {
    /// Checked constructor: shape product must match data length and every
    /// value must be finite.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Invariant(format!(
                "tensor {name}: shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "tensor {name}: non-finite value at flat index {idx}"
            )));
        }
        Ok(TensorBlob { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorBlob {
            name: name.into(),
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Low-rank factor pair: `A` is r x d_in, `B` is d_out x r.
#[derive(Debug, Clone)]
pub struct LowRankPair {
    pub a: TensorBlob,
    pub b: TensorBlob,
    pub scale: f32,
}

/// Materialize `scale * B * A` as a dense tensor named after `B`.
pub fn effective_update(pair: &LowRankPair) -> Result<TensorBlob> {
    let [r_a, d_in] = dims2(&pair.a)?;
    let [d_out, r_b] = dims2(&pair.b)?;
    if r_a != r_b {
        return Err(Error::Invariant(format!(
            "rank mismatch: A is {r_a}x{d_in}, B is {d_out}x{r_b}"
        )));
    }
    if r_a == 0 {
        return Err(Error::Invariant("rank must be at least 1".into()));
    }
    let scale = pair.scale as f64;
    let mut out = vec![0.0f32; d_out * d_in];
    for o in 0..d_out {
        for j in 0..d_in {
            let mut acc = 0.0f64;
            for r in 0..r_a {
                acc += pair.b.data[o * r_b + r] as f64 * pair.a.data[r * d_in + j] as f64;
            }
            out[o * d_in + j] = (scale * acc) as f32;
        }
    }
    TensorBlob::new(pair.b.name.clone(), vec![d_out, d_in], out)
}

fn dims2(t: &TensorBlob) -> Result<[usize; 2]> {
    match t.shape[..] {
        [r, c] => Ok([r, c]),
        _ => Err(Error::Invariant(format!(
            "tensor {}: expected 2 dimensions, got shape {:?}",
            t.name, t.shape
        ))),
    }
}

/// Named f32 tensors of one adapter's effective updates plus the scaling
/// metadata they were materialized with. Map order is the canonical
/// lexicographic tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBundle {
    pub adapter_id: String,
    pub tensors: BTreeMap<String, TensorBlob>,
    /// Per-tensor scale the effective update was built with. Bookkeeping
    /// only: `tensors` already include it.
    pub scaling: BTreeMap<String, f32>,
}

impl AdapterBundle {
    pub fn new(adapter_id: impl Into<String>) -> Self {
        AdapterBundle {
            adapter_id: adapter_id.into(),
            tensors: BTreeMap::new(),
            scaling: BTreeMap::new(),
        }
    }

    /// Insert a tensor under its own name with scale metadata 1.0.
    pub fn insert(&mut self, tensor: TensorBlob) {
        self.scaling.insert(tensor.name.clone(), 1.0);
        self.tensors.insert(tensor.name.clone(), tensor);
    }

    pub fn insert_scaled(&mut self, tensor: TensorBlob, scale: f32) {
        self.scaling.insert(tensor.name.clone(), scale);
        self.tensors.insert(tensor.name.clone(), tensor);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Whole-bundle Frobenius norm over all tensors.
    pub fn frobenius_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Check internal consistency: key matches tensor name, shapes match
    /// data, values finite.
    pub fn validate(&self) -> Result<()> {
        for (key, t) in &self.tensors {
            if key != &t.name {
                return Err(Error::Invariant(format!(
                    "bundle {}: key {key} does not match tensor name {}",
                    self.adapter_id, t.name
                )));
            }
            if t.numel() != t.data.len() {
                return Err(Error::Invariant(format!(
                    "bundle {}: tensor {key} shape/data length mismatch",
                    self.adapter_id
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "bundle {}: tensor {key} has non-finite values",
                    self.adapter_id
                )));
            }
        }
        Ok(())
    }

    /// Verify this bundle shares the other's name set and shapes. Pools
    /// require this of every member.
    pub fn check_same_schema(&self, other: &AdapterBundle) -> Result<()> {
        let mine: Vec<_> = self.tensors.keys().collect();
        let theirs: Vec<_> = other.tensors.keys().collect();
        if mine != theirs {
            return Err(Error::Invariant(format!(
                "bundles {} and {} have different tensor name sets",
                self.adapter_id, other.adapter_id
            )));
        }
        for (name, t) in &self.tensors {
            let o = &other.tensors[name];
            if t.shape != o.shape {
                return Err(Error::Invariant(format!(
                    "tensor {name}: shape {:?} in {} vs {:?} in {}",
                    t.shape, self.adapter_id, o.shape, other.adapter_id
                )));
            }
        }
        Ok(())
    }
}

/// Partition of tensor names into blocks. Iteration order over blocks is
/// sorted by block id; within a block the stored name order is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMap {
    pub blocks: BTreeMap<String, Vec<String>>,
}

impl BlockMap {
    /// All names in one block, lexicographic order.
    pub fn single_block(names: impl IntoIterator<Item = String>) -> Self {
        let mut sorted: Vec<String> = names.into_iter().collect();
        sorted.sort();
        let mut blocks = BTreeMap::new();
        blocks.insert("all".to_string(), sorted);
        BlockMap { blocks }
    }

    /// Group names by their leading dot-separated segment, so
    /// "block3.attn.q" lands in block "block3". Names without a dot form
    /// their own block. Within-block order is lexicographic.
    pub fn by_leading_segment(names: impl IntoIterator<Item = String>) -> Self {
        let mut blocks: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for name in names {
            let block = name.split('.').next().unwrap_or(&name).to_string();
            blocks.entry(block).or_default().push(name);
        }
        for members in blocks.values_mut() {
            members.sort();
        }
        BlockMap { blocks }
    }

    pub fn block_ids(&self) -> Vec<String> {
        self.blocks.keys().cloned().collect()
    }

    /// Every tensor name must appear in exactly one block.
    pub fn validate_partition(&self, tensor_names: &[String]) -> Result<()> {
        let mut seen: BTreeSet<&String> = BTreeSet::new();
        for members in self.blocks.values() {
            for name in members {
                if !seen.insert(name) {
                    return Err(Error::Invariant(format!(
                        "block map assigns tensor {name} to more than one block"
                    )));
                }
            }
        }
        for name in tensor_names {
            if !seen.contains(name) {
                return Err(Error::Invariant(format!(
                    "tensor {name} is missing from the block map"
                )));
            }
        }
        if seen.len() != tensor_names.len() {
            let have: BTreeSet<&String> = tensor_names.iter().collect();
            let extra: Vec<_> = seen.difference(&have).collect();
            return Err(Error::Invariant(format!(
                "block map names tensors absent from the bundle: {extra:?}"
            )));
        }
        Ok(())
    }

    /// Concatenate the bundle's tensors for one block into a flat vector.
    pub fn block_vector(&self, bundle: &AdapterBundle, block_id: &str) -> Result<Vec<f32>> {
        let members = self.members(block_id)?;
        let mut out = Vec::new();
        for name in members {
            let t = bundle.tensors.get(name).ok_or_else(|| {
                Error::Invariant(format!(
                    "bundle {} lacks tensor {name} required by block {block_id}",
                    bundle.adapter_id
                ))
            })?;
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    /// Inverse of [`block_vector`]: cut a flat vector back into tensors
    /// shaped like `reference`'s.
    pub fn split_back(
        &self,
        reference: &AdapterBundle,
        block_id: &str,
        flat: &[f32],
    ) -> Result<Vec<TensorBlob>> {
        let members = self.members(block_id)?;
        let expected: usize = members
            .iter()
            .map(|name| reference.tensors.get(name).map(|t| t.numel()).unwrap_or(0))
            .sum();
        if expected != flat.len() {
            return Err(Error::Invariant(format!(
                "block {block_id}: vector length {} does not match tensor total {expected}",
                flat.len()
            )));
        }
        let mut out = Vec::with_capacity(members.len());
        let mut cursor = 0usize;
        for name in members {
            let reference_tensor = reference.tensors.get(name).ok_or_else(|| {
                Error::Invariant(format!("reference bundle lacks tensor {name}"))
            })?;
            let n = reference_tensor.numel();
            let blob = TensorBlob {
                name: name.clone(),
                shape: reference_tensor.shape.clone(),
                data: flat[cursor..cursor + n].to_vec(),
            };
            cursor += n;
            out.push(blob);
        }
        Ok(out)
    }

    fn members(&self, block_id: &str) -> Result<&Vec<String>> {
        self.blocks
            .get(block_id)
            .ok_or_else(|| Error::Invariant(format!("unknown block id {block_id}")))
    }
}

/// Dot product with f64 accumulation.
pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Euclidean norm with f64 accumulation.
pub(crate) fn norm64(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot64_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm64_f64(a: &[f64]) -> f64 {
    a.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(name: &str, shape: Vec<usize>, data: Vec<f32>) -> TensorBlob {
        TensorBlob::new(name, shape, data).unwrap()
    }

    #[test]
    fn effective_update_zero_b_gives_zero() {
        let pair = LowRankPair {
            a: blob("t", vec![1, 2], vec![3.0, -4.0]),
            b: blob("t", vec![2, 1], vec![0.0, 0.0]),
            scale: 1.0,
        };
        let out = effective_update(&pair).unwrap();
        assert_eq!(out.data, vec![0.0; 4]);
        assert_eq!(out.shape, vec![2, 2]);
    }

    #[test]
    fn effective_update_hand_case() {
        // s=2, B=[[1],[0]], A=[[0,1]] -> [[0,2],[0,0]]
        let pair = LowRankPair {
            a: blob("t", vec![1, 2], vec![0.0, 1.0]),
            b: blob("t", vec![2, 1], vec![1.0, 0.0]),
            scale: 2.0,
        };
        let out = effective_update(&pair).unwrap();
        assert_eq!(out.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn effective_update_identity_case() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let pair = LowRankPair {
            a: blob("t", vec![2, 2], eye.clone()),
            b: blob("t", vec![2, 2], eye.clone()),
            scale: 1.0,
        };
        let out = effective_update(&pair).unwrap();
        assert_eq!(out.data, eye);
    }

    #[test]
    fn effective_update_rejects_rank_mismatch() {
        let pair = LowRankPair {
            a: blob("t", vec![2, 3], vec![0.0; 6]),
            b: blob("t", vec![2, 1], vec![0.0; 2]),
            scale: 1.0,
        };
        assert!(effective_update(&pair).is_err());
    }

    #[test]
    fn effective_update_linear_in_b() {
        let a = blob("t", vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let b1 = blob("t", vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]);
        let b2 = blob("t", vec![2, 2], vec![2.0, 4.0, -2.0, 1.0]);
        let one = effective_update(&LowRankPair { a: a.clone(), b: b1, scale: 1.0 }).unwrap();
        let two = effective_update(&LowRankPair { a, b: b2, scale: 1.0 }).unwrap();
        for (x, y) in one.data.iter().zip(&two.data) {
            let rel = (2.0 * x - y).abs() / y.abs().max(1e-12);
            assert!(rel < 1e-6, "2*{x} vs {y}");
        }
    }

    #[test]
    fn tensor_new_rejects_bad_shape_and_nonfinite() {
        assert!(TensorBlob::new("t", vec![2, 2], vec![1.0; 3]).is_err());
        assert!(TensorBlob::new("t", vec![2], vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn block_vector_flattens_row_major() {
        let mut bundle = AdapterBundle::new("a1");
        bundle.insert(blob("m", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let map = BlockMap::single_block(bundle.tensor_names());
        let v = map.block_vector(&bundle, "all").unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn block_vector_concatenates_in_map_order() {
        let mut bundle = AdapterBundle::new("a1");
        bundle.insert(blob("x", vec![1], vec![1.0]));
        bundle.insert(blob("y", vec![2], vec![2.0, 3.0]));
        let map = BlockMap::single_block(bundle.tensor_names());
        assert_eq!(map.block_vector(&bundle, "all").unwrap(), vec![1.0, 2.0, 3.0]);

        // Reversed member order changes the concatenation, matching an
        // explicit index walk of the stored order.
        let mut blocks = BTreeMap::new();
        blocks.insert("all".to_string(), vec!["y".to_string(), "x".to_string()]);
        let reversed = BlockMap { blocks };
        assert_eq!(
            reversed.block_vector(&bundle, "all").unwrap(),
            vec![2.0, 3.0, 1.0]
        );
    }

    #[test]
    fn split_back_inverts_block_vector() {
        let mut bundle = AdapterBundle::new("a1");
        bundle.insert(blob("block0.q", vec![2, 1], vec![1.5, -2.5]));
        bundle.insert(blob("block0.v", vec![3], vec![0.25, 0.5, 0.75]));
        bundle.insert(blob("block1.q", vec![1], vec![9.0]));
        let map = BlockMap::by_leading_segment(bundle.tensor_names());
        assert_eq!(map.block_ids(), vec!["block0", "block1"]);
        for block_id in map.block_ids() {
            let flat = map.block_vector(&bundle, &block_id).unwrap();
            let tensors = map.split_back(&bundle, &block_id, &flat).unwrap();
            for t in tensors {
                assert_eq!(t, bundle.tensors[&t.name]);
            }
        }
    }

    #[test]
    fn partition_validation_catches_gaps_and_overlaps() {
        let names = vec!["a".to_string(), "b".to_string()];
        let map = BlockMap::single_block(names.clone());
        assert!(map.validate_partition(&names).is_ok());

        let mut blocks = BTreeMap::new();
        blocks.insert("one".to_string(), vec!["a".to_string()]);
        let missing = BlockMap { blocks: blocks.clone() };
        assert!(missing.validate_partition(&names).is_err());

        blocks.insert("two".to_string(), vec!["a".to_string(), "b".to_string()]);
        let overlapping = BlockMap { blocks };
        assert!(overlapping.validate_partition(&names).is_err());
    }

    #[test]
    fn schema_check_spots_shape_drift() {
        let mut a = AdapterBundle::new("a");
        a.insert(blob("m", vec![2], vec![1.0, 2.0]));
        let mut b = AdapterBundle::new("b");
        b.insert(blob("m", vec![2], vec![3.0, 4.0]));
        assert!(a.check_same_schema(&b).is_ok());
        let mut c = AdapterBundle::new("c");
        c.insert(blob("m", vec![1, 2], vec![3.0, 4.0]));
        assert!(a.check_same_schema(&c).is_err());
    }
}

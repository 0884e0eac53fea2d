//! Pool manifests, deterministic support selection, and cosine retrieval.
//!
//! Embeddings are precomputed inputs: the manifest carries one index per
//! view, either inline as JSON arrays or as a binary sidecar in the bundle
//! container format (tensor name = adapter id, one 1-D tensor per adapter).
//! The toolkit never computes embeddings itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::{dot64, norm64};

/// One pool member: identity plus where its bundle lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub adapter_id: String,
    pub source_task: String,
    pub bundle_path: String,
}

/// Embedding index for one view: adapter id to vector, all the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewIndex {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f32>>,
}

impl ViewIndex {
    pub fn from_vectors(vectors: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let dim = vectors.values().next().map(|v| v.len()).unwrap_or(0);
        let index = ViewIndex { dim, vectors };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, v) in &self.vectors {
            if v.len() != self.dim {
                return Err(Error::Invariant(format!(
                    "embedding for {id} has dimension {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invariant(format!(
                    "embedding for {id} has non-finite entries"
                )));
            }
        }
        Ok(())
    }
}

/// Registry of a pool's adapters and its per-view embedding indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolManifest {
    pub adapters: Vec<AdapterEntry>,
    pub views: BTreeMap<String, ViewIndex>,
}

impl PoolManifest {
    pub fn adapter_ids(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.adapter_id.clone()).collect()
    }

    pub fn view_index(&self, view_id: &str) -> Result<&ViewIndex> {
        self.views
            .get(view_id)
            .ok_or_else(|| Error::Invariant(format!("unknown view {view_id}")))
    }

    /// Unique ids, and each view index covering exactly the pool.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.adapters {
            if !seen.insert(&a.adapter_id) {
                return Err(Error::Invariant(format!(
                    "duplicate adapter id {}",
                    a.adapter_id
                )));
            }
        }
        for (view_id, index) in &self.views {
            index.validate()?;
            let indexed: BTreeSet<&String> = index.vectors.keys().collect();
            if indexed != seen {
                return Err(Error::Invariant(format!(
                    "view {view_id} indexes {} adapters, pool has {}",
                    indexed.len(),
                    seen.len()
                )));
            }
        }
        Ok(())
    }
}

/// Disk form of a view index: inline vectors or a container sidecar of 1-D
/// tensors keyed by adapter id.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    Inline(BTreeMap<String, Vec<f32>>),
    Sidecar(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    adapters: Vec<AdapterEntry>,
    views: BTreeMap<String, ViewSource>,
}

/// Load a manifest, resolving sidecar paths relative to the manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<PoolManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut views = BTreeMap::new();
    for (view_id, source) in file.views {
        let index = match source {
            ViewSource::Inline(vectors) => ViewIndex::from_vectors(vectors)?,
            ViewSource::Sidecar(rel) => {
                let sidecar = base.join(&rel);
                let bundle = container::load_bundle(&sidecar)?;
                let mut vectors = BTreeMap::new();
                for (name, tensor) in bundle.tensors {
                    if tensor.shape.len() != 1 {
                        return Err(Error::Format(format!(
                            "{}: embedding tensor {name} must be 1-D, got {:?}",
                            sidecar.display(),
                            tensor.shape
                        )));
                    }
                    vectors.insert(name, tensor.data);
                }
                ViewIndex::from_vectors(vectors)?
            }
        };
        views.insert(view_id, index);
    }
    let manifest = PoolManifest {
        adapters: file.adapters,
        views,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Save a manifest with all views inline.
pub fn save_manifest(manifest: &PoolManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = ManifestFile {
        adapters: manifest.adapters.clone(),
        views: manifest
            .views
            .iter()
            .map(|(id, index)| (id.clone(), ViewSource::Inline(index.vectors.clone())))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("static schema");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One labeled example of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportExample {
    pub example_id: String,
    pub input_text: String,
    pub reference_text: String,
}

/// The K support examples retrieval and weight search may see.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub task_id: String,
    pub examples: Vec<SupportExample>,
    pub k: usize,
}

/// A held-out query. The reference is consumed only by evaluation and the
/// oracle diagnostic, never by retrieval or weight search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub task_id: String,
    pub query_id: String,
    pub input_text: String,
    pub reference_text: String,
}

/// Deterministic head selection: examples at indices [offset, offset+k).
pub fn build_support(
    task_id: &str,
    task_examples: &[SupportExample],
    k: usize,
    offset: usize,
) -> Result<SupportSet> {
    if task_examples.len() < offset + k {
        return Err(Error::Invariant(format!(
            "task {task_id}: need {} examples for offset {offset} and k {k}, have {}",
            offset + k,
            task_examples.len()
        )));
    }
    let examples = task_examples[offset..offset + k].to_vec();
    let mut ids = BTreeSet::new();
    for e in &examples {
        if !ids.insert(&e.example_id) {
            return Err(Error::Invariant(format!(
                "task {task_id}: duplicate example id {}",
                e.example_id
            )));
        }
    }
    Ok(SupportSet {
        task_id: task_id.to_string(),
        examples,
        k,
    })
}

/// An adapter with its similarity to some query vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAdapter {
    pub adapter_id: String,
    pub similarity: f64,
}

/// Rank the k most cosine-similar adapters. Ties break lexicographically by
/// id; zero-norm vectors (on either side) score negative infinity.
pub fn cosine_topk(query: &[f32], index: &ViewIndex, k: usize) -> Result<Vec<RankedAdapter>> {
    if query.len() != index.dim {
        return Err(Error::Invariant(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.dim
        )));
    }
    if k > index.vectors.len() {
        return Err(Error::Invariant(format!(
            "k {} exceeds pool size {}",
            k,
            index.vectors.len()
        )));
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invariant("query vector has non-finite entries".into()));
    }
    let qn = norm64(query);
    let mut ranked: Vec<RankedAdapter> = index
        .vectors
        .iter()
        .map(|(id, v)| {
            let vn = norm64(v);
            let similarity = if qn == 0.0 || vn == 0.0 {
                f64::NEG_INFINITY
            } else {
                dot64(query, v) / (qn * vn)
            };
            RankedAdapter {
                adapter_id: id.clone(),
                similarity,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.adapter_id.cmp(&b.adapter_id))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Arithmetic mean of the support example embeddings.
pub fn support_centroid(support_vecs: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = support_vecs
        .first()
        .ok_or_else(|| Error::Invariant("cannot take the centroid of zero vectors".into()))?;
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for v in support_vecs {
        if v.len() != dim {
            return Err(Error::Invariant(format!(
                "support embeddings disagree on dimension: {} vs {dim}",
                v.len()
            )));
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
    }
    let n = support_vecs.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Candidate set for one view: top global_k around the support centroid,
/// top local_k around the query (centroid reused when the query embedding
/// is absent), deduplicated with the global list first. Budgets larger than
/// the pool are clamped.
pub fn retrieve_view(
    index: &ViewIndex,
    support_vecs: &[Vec<f32>],
    query_vec: Option<&[f32]>,
    global_k: usize,
    local_k: usize,
) -> Result<Vec<String>> {
    let pool = index.vectors.len();
    let centroid = support_centroid(support_vecs)?;
    let global = cosine_topk(&centroid, index, global_k.min(pool))?;
    let local = match query_vec {
        Some(q) => cosine_topk(q, index, local_k.min(pool))?,
        None => cosine_topk(&centroid, index, local_k.min(pool))?,
    };
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for r in global.into_iter().chain(local) {
        if seen.insert(r.adapter_id.clone()) {
            out.push(r.adapter_id);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(i: usize) -> SupportExample {
        SupportExample {
            example_id: format!("e{i}"),
            input_text: format!("input {i}"),
            reference_text: format!("ref {i}"),
        }
    }

    fn index(pairs: &[(&str, Vec<f32>)]) -> ViewIndex {
        ViewIndex::from_vectors(
            pairs
                .iter()
                .map(|(id, v)| (id.to_string(), v.clone()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn support_takes_offset_window() {
        let examples: Vec<_> = (0..20).map(example).collect();
        let s = build_support("t", &examples, 5, 10).unwrap();
        let ids: Vec<_> = s.examples.iter().map(|e| e.example_id.as_str()).collect();
        assert_eq!(ids, vec!["e10", "e11", "e12", "e13", "e14"]);
        assert_eq!(s.k, 5);
    }

    #[test]
    fn support_degenerate_and_identity_windows() {
        let examples: Vec<_> = (0..4).map(example).collect();
        assert!(build_support("t", &examples, 0, 2).unwrap().examples.is_empty());
        let all = build_support("t", &examples, 4, 0).unwrap();
        assert_eq!(all.examples, examples);
        assert!(build_support("t", &examples, 3, 2).is_err());
    }

    #[test]
    fn support_is_pure() {
        let examples: Vec<_> = (0..20).map(example).collect();
        let a = build_support("t", &examples, 5, 10).unwrap();
        let b = build_support("t", &examples, 5, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_similarity_ranks_first() {
        let idx = index(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![0.7, 0.7]),
        ]);
        let ranked = cosine_topk(&[0.0, 2.0], &idx, 3).unwrap();
        assert_eq!(ranked[0].adapter_id, "b");
        assert!((ranked[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_query_falls_back_to_lexicographic() {
        let idx = index(&[("b", vec![1.0, 0.0]), ("a", vec![-1.0, 0.0])]);
        let ranked = cosine_topk(&[0.0, 1.0], &idx, 2).unwrap();
        let ids: Vec<_> = ranked.iter().map(|r| r.adapter_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(ranked.iter().all(|r| r.similarity.abs() < 1e-12));
    }

    #[test]
    fn zero_norm_scores_negative_infinity() {
        let idx = index(&[("a", vec![0.0, 0.0]), ("b", vec![1.0, 0.0])]);
        let ranked = cosine_topk(&[1.0, 0.0], &idx, 2).unwrap();
        assert_eq!(ranked[0].adapter_id, "b");
        assert_eq!(ranked[1].similarity, f64::NEG_INFINITY);
    }

    #[test]
    fn topk_matches_exhaustive_sort() {
        // Five fixed vectors, k=3, against a brute-force full sort.
        let idx = index(&[
            ("a", vec![0.9, 0.1, 0.3]),
            ("b", vec![-0.2, 0.8, 0.1]),
            ("c", vec![0.5, 0.5, 0.5]),
            ("d", vec![0.1, -0.9, 0.4]),
            ("e", vec![0.3, 0.2, 0.95]),
        ]);
        let q = vec![0.6f32, 0.2, 0.7];
        let qn = norm64(&q);
        let mut brute: Vec<(String, f64)> = idx
            .vectors
            .iter()
            .map(|(id, v)| (id.clone(), dot64(&q, v) / (qn * norm64(v))))
            .collect();
        brute.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        let ranked = cosine_topk(&q, &idx, 3).unwrap();
        for (r, (id, sim)) in ranked.iter().zip(&brute) {
            assert_eq!(&r.adapter_id, id);
            assert!((r.similarity - sim).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_is_scale_invariant_in_the_query() {
        let idx = index(&[
            ("a", vec![0.9, 0.1]),
            ("b", vec![-0.2, 0.8]),
            ("c", vec![0.5, 0.5]),
        ]);
        let q = vec![0.3f32, 0.4];
        let scaled: Vec<f32> = q.iter().map(|x| x * 7.5).collect();
        let one = cosine_topk(&q, &idx, 3).unwrap();
        let two = cosine_topk(&scaled, &idx, 3).unwrap();
        let ids = |r: &[RankedAdapter]| {
            r.iter().map(|x| x.adapter_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&one), ids(&two));
    }

    #[test]
    fn retrieve_dedups_and_clamps() {
        let idx = index(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![0.7, 0.7]),
        ]);
        let support = vec![vec![1.0, 0.0], vec![0.8, 0.2]];
        // Budgets beyond the pool size return the whole pool once.
        let all = retrieve_view(&idx, &support, None, 20, 20).unwrap();
        assert_eq!(all.len(), 3);
        let unique: BTreeSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 3);
        // Singleton budget.
        let one = retrieve_view(&idx, &support, None, 1, 0).unwrap();
        assert_eq!(one, vec!["a".to_string()]);
    }

    #[test]
    fn retrieve_respects_query_embedding() {
        let idx = index(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let support = vec![vec![1.0, 0.0]];
        let got = retrieve_view(&idx, &support, Some(&[0.0, 1.0]), 1, 1).unwrap();
        assert_eq!(got, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn manifest_round_trip_with_inline_views() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        let manifest = PoolManifest {
            adapters: vec![
                AdapterEntry {
                    adapter_id: "a1".into(),
                    source_task: "t1".into(),
                    bundle_path: "a1.bin".into(),
                },
                AdapterEntry {
                    adapter_id: "a2".into(),
                    source_task: "t2".into(),
                    bundle_path: "a2.bin".into(),
                },
            ],
            views: [(
                "0".to_string(),
                index(&[("a1", vec![1.0, 0.0]), ("a2", vec![0.0, 1.0])]),
            )]
            .into_iter()
            .collect(),
        };
        save_manifest(&manifest, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(manifest, back);
    }

    #[test]
    fn manifest_sidecar_views_load() {
        use crate::tensor::{AdapterBundle, TensorBlob};
        let dir = tempfile::tempdir().unwrap();
        let mut sidecar = AdapterBundle::new("view0");
        sidecar.insert(TensorBlob::new("a1", vec![2], vec![1.0, 0.0]).unwrap());
        sidecar.insert(TensorBlob::new("a2", vec![2], vec![0.0, 1.0]).unwrap());
        container::save_bundle(&sidecar, dir.path().join("view0.bin")).unwrap();
        let manifest_json = serde_json::json!({
            "adapters": [
                {"adapter_id": "a1", "source_task": "t1", "bundle_path": "a1.bin"},
                {"adapter_id": "a2", "source_task": "t2", "bundle_path": "a2.bin"},
            ],
            "views": {"0": {"sidecar": "view0.bin"}},
        });
        let path = dir.path().join("pool.json");
        std::fs::write(&path, serde_json::to_string(&manifest_json).unwrap()).unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.views["0"].vectors["a1"], vec![1.0, 0.0]);
    }

    #[test]
    fn manifest_validation_rejects_duplicates_and_partial_views() {
        let dup = PoolManifest {
            adapters: vec![
                AdapterEntry {
                    adapter_id: "a1".into(),
                    source_task: "t".into(),
                    bundle_path: "p".into(),
                },
                AdapterEntry {
                    adapter_id: "a1".into(),
                    source_task: "t".into(),
                    bundle_path: "p".into(),
                },
            ],
            views: BTreeMap::new(),
        };
        assert!(dup.validate().is_err());

        let partial = PoolManifest {
            adapters: vec![
                AdapterEntry {
                    adapter_id: "a1".into(),
                    source_task: "t".into(),
                    bundle_path: "p".into(),
                },
                AdapterEntry {
                    adapter_id: "a2".into(),
                    source_task: "t".into(),
                    bundle_path: "p".into(),
                },
            ],
            views: [("0".to_string(), index(&[("a1", vec![1.0])]))]
                .into_iter()
                .collect(),
        };
        assert!(partial.validate().is_err());
    }
}

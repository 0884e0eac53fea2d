//! Seeded sparsification of adapter deltas: Bernoulli masks over tensors,
//! survivor rescaling, optional Frobenius norm restoration.
//!
//! Masks come from the keyed stream in [`crate::rng`] under the key
//! (seed, adapter id, tensor name), one draw per element in storage order,
//! keeping an element when the draw is below 1 - drop_rate. That makes a
//! mask a pure function of its key: two runs, or two implementations of the
//! documented stream, produce identical bits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_stream;
use crate::tensor::{AdapterBundle, TensorBlob};

/// Seeds used for multi-seed sparsification runs when none are given.
pub const DEFAULT_SEEDS: [u64; 4] = [42, 52, 133, 3407];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpConfig {
    pub drop_rate: f32,
    pub seed: u64,
    pub survivor_rescale: bool,
    pub norm_preserve: bool,
}

impl Default for SdpConfig {
    fn default() -> Self {
        SdpConfig {
            drop_rate: 0.5,
            seed: 42,
            survivor_rescale: true,
            norm_preserve: true,
        }
    }
}

impl SdpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Invariant(format!(
                "drop rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        Ok(())
    }
}

/// Bernoulli keep mask for one tensor; entries are 0 or 1 in storage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpMask {
    pub tensor_name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<u8>,
}

impl SdpMask {
    pub fn kept(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

/// Sample the keep mask for one tensor of one adapter.
pub fn sample_mask(adapter_id: &str, tensor_name: &str, shape: &[usize], cfg: &SdpConfig) -> SdpMask {
    let keep_prob = 1.0 - cfg.drop_rate as f64;
    let mut stream = keyed_stream(cfg.seed, &[adapter_id, tensor_name]);
    let numel: usize = shape.iter().product();
    let bits = (0..numel)
        .map(|_| u8::from(stream.next_f64() < keep_prob))
        .collect();
    SdpMask {
        tensor_name: tensor_name.to_string(),
        shape: shape.to_vec(),
        bits,
    }
}

/// Mask a tensor, rescale survivors by 1/(1-p) when configured, and restore
/// the original Frobenius norm when configured and both norms are nonzero.
pub fn apply_sdp(tensor: &TensorBlob, mask: &SdpMask, cfg: &SdpConfig) -> Result<TensorBlob> {
    cfg.validate()?;
    if tensor.shape != mask.shape {
        return Err(Error::Invariant(format!(
            "tensor {} shape {:?} does not match mask shape {:?}",
            tensor.name, tensor.shape, mask.shape
        )));
    }
    let inv_keep = if cfg.survivor_rescale {
        1.0 / (1.0 - cfg.drop_rate as f64)
    } else {
        1.0
    };
    let mut masked: Vec<f64> = tensor
        .data
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &m)| if m == 1 { v as f64 * inv_keep } else { 0.0 })
        .collect();
    if cfg.norm_preserve {
        let before = tensor
            .data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let after = masked.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if before > 0.0 && after > 0.0 {
            let ratio = before / after;
            for v in &mut masked {
                *v *= ratio;
            }
        }
    }
    Ok(TensorBlob {
        name: tensor.name.clone(),
        shape: tensor.shape.clone(),
        data: masked.into_iter().map(|v| v as f32).collect(),
    })
}

/// Sparsify every tensor of a bundle; masks are keyed per tensor.
pub fn sdp_bundle(bundle: &AdapterBundle, cfg: &SdpConfig) -> Result<(AdapterBundle, Vec<SdpMask>)> {
    cfg.validate()?;
    let mut out = AdapterBundle::new(bundle.adapter_id.clone());
    out.scaling = bundle.scaling.clone();
    let mut masks = Vec::with_capacity(bundle.tensors.len());
    for (name, tensor) in &bundle.tensors {
        let mask = sample_mask(&bundle.adapter_id, name, &tensor.shape, cfg);
        let pruned = apply_sdp(tensor, &mask, cfg)?;
        out.tensors.insert(name.clone(), pruned);
        masks.push(mask);
    }
    Ok((out, masks))
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedMask {
    shape: Vec<usize>,
    bit_count: usize,
    /// Base64 of the bits packed 8 per byte, least significant bit first.
    packed: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    adapter_id: String,
    seed: u64,
    drop_rate: f32,
    masks: BTreeMap<String, PackedMask>,
}

/// Write masks as a bit-packed JSON sidecar for audit.
pub fn save_masks(
    adapter_id: &str,
    cfg: &SdpConfig,
    masks: &[SdpMask],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut packed_masks = BTreeMap::new();
    for mask in masks {
        let mut buf = vec![0u8; mask.bits.len().div_ceil(8)];
        for (i, &bit) in mask.bits.iter().enumerate() {
            if bit == 1 {
                buf[i / 8] |= 1 << (i % 8);
            }
        }
        packed_masks.insert(
            mask.tensor_name.clone(),
            PackedMask {
                shape: mask.shape.clone(),
                bit_count: mask.bits.len(),
                packed: BASE64.encode(&buf),
            },
        );
    }
    let sidecar = MaskSidecar {
        adapter_id: adapter_id.to_string(),
        seed: cfg.seed,
        drop_rate: cfg.drop_rate,
        masks: packed_masks,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("static schema");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a mask sidecar back into per-tensor masks.
pub fn load_masks(path: impl AsRef<Path>) -> Result<(String, u64, f32, Vec<SdpMask>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar: MaskSidecar =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let mut masks = Vec::new();
    for (name, packed) in sidecar.masks {
        let buf = BASE64
            .decode(packed.packed.as_bytes())
            .map_err(|e| Error::Format(format!("{}: mask {name}: {e}", path.display())))?;
        if buf.len() != packed.bit_count.div_ceil(8) {
            return Err(Error::Format(format!(
                "{}: mask {name}: {} packed bytes for {} bits",
                path.display(),
                buf.len(),
                packed.bit_count
            )));
        }
        let bits: Vec<u8> = (0..packed.bit_count)
            .map(|i| (buf[i / 8] >> (i % 8)) & 1)
            .collect();
        masks.push(SdpMask {
            tensor_name: name,
            shape: packed.shape,
            bits,
        });
    }
    Ok((sidecar.adapter_id, sidecar.seed, sidecar.drop_rate, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(data: Vec<f32>) -> TensorBlob {
        let n = data.len();
        TensorBlob::new("t", vec![n], data).unwrap()
    }

    fn cfg(p: f32, seed: u64, rescale: bool, preserve: bool) -> SdpConfig {
        SdpConfig {
            drop_rate: p,
            seed,
            survivor_rescale: rescale,
            norm_preserve: preserve,
        }
    }

    #[test]
    fn zero_drop_rate_keeps_everything() {
        let mask = sample_mask("a", "t", &[100], &cfg(0.0, 7, true, true));
        assert_eq!(mask.kept(), 100);
    }

    #[test]
    fn same_key_same_mask() {
        let a = sample_mask("a", "t", &[64], &cfg(0.5, 42, true, true));
        let b = sample_mask("a", "t", &[64], &cfg(0.5, 42, true, true));
        assert_eq!(a, b);
        let c = sample_mask("a", "u", &[64], &cfg(0.5, 42, true, true));
        assert_ne!(a, c);
    }

    #[test]
    fn keep_fraction_concentrates() {
        let mask = sample_mask("a", "t", &[10_000], &cfg(0.5, 3407, true, true));
        let frac = mask.kept() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "keep fraction {frac}");
    }

    #[test]
    fn all_ones_mask_with_both_flags_is_identity() {
        let t = tensor(vec![3.0, -4.0, 0.25, 7.5]);
        let mask = SdpMask {
            tensor_name: "t".into(),
            shape: vec![4],
            bits: vec![1, 1, 1, 1],
        };
        let out = apply_sdp(&t, &mask, &cfg(0.5, 0, true, true)).unwrap();
        for (a, b) in t.data.iter().zip(&out.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hand_case_three_four() {
        let t = tensor(vec![3.0, 4.0]);
        let mask = SdpMask {
            tensor_name: "t".into(),
            shape: vec![2],
            bits: vec![1, 0],
        };
        let out = apply_sdp(&t, &mask, &cfg(0.5, 0, true, true)).unwrap();
        assert!((out.data[0] - 5.0).abs() < 1e-5);
        assert_eq!(out.data[1], 0.0);
    }

    #[test]
    fn all_zero_mask_gives_zeros() {
        let t = tensor(vec![3.0, 4.0]);
        let mask = SdpMask {
            tensor_name: "t".into(),
            shape: vec![2],
            bits: vec![0, 0],
        };
        let out = apply_sdp(&t, &mask, &cfg(0.5, 0, true, true)).unwrap();
        assert_eq!(out.data, vec![0.0, 0.0]);
    }

    #[test]
    fn norm_is_preserved_on_nonzero_masks() {
        let t = tensor(vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0, 7.0, -8.0]);
        for seed in 0..50u64 {
            let c = cfg(0.5, seed, true, true);
            let mask = sample_mask("a", "t", &[8], &c);
            if mask.kept() == 0 {
                continue;
            }
            let out = apply_sdp(&t, &mask, &c).unwrap();
            let rel = (out.frobenius_norm() - t.frobenius_norm()).abs() / t.frobenius_norm();
            assert!(rel < 1e-5, "seed {seed} rel {rel}");
        }
    }

    #[test]
    fn masked_out_coordinates_are_exactly_zero() {
        let t = tensor(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = cfg(0.5, 52, true, true);
        let mask = sample_mask("a", "t", &[6], &c);
        let out = apply_sdp(&t, &mask, &c).unwrap();
        for (v, &m) in out.data.iter().zip(&mask.bits) {
            if m == 0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn survivor_rescale_is_unbiased() {
        // Mean over many seeds approaches the input when only rescaling.
        let t = tensor(vec![2.0, -3.0, 0.5, 4.0]);
        let n_seeds = 2000u64;
        let mut sums = [0.0f64; 4];
        for seed in 0..n_seeds {
            let c = cfg(0.5, seed, true, false);
            let mask = sample_mask("a", "t", &[4], &c);
            let out = apply_sdp(&t, &mask, &c).unwrap();
            for (s, &v) in sums.iter_mut().zip(&out.data) {
                *s += v as f64;
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let mean = s / n_seeds as f64;
            let x = t.data[i] as f64;
            // Per-entry variance of 2x*Bernoulli(0.5) is x^2.
            let se = x.abs() / (n_seeds as f64).sqrt();
            assert!((mean - x).abs() <= 3.0 * se, "entry {i}: mean {mean} vs {x}");
        }
    }

    #[test]
    fn bundle_masking_covers_all_tensors() {
        let mut b = AdapterBundle::new("a1");
        b.insert(TensorBlob::new("x", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        b.insert(TensorBlob::new("y", vec![2], vec![5.0, 6.0]).unwrap());
        let (pruned, masks) = sdp_bundle(&b, &cfg(0.5, 42, true, true)).unwrap();
        assert_eq!(pruned.tensor_names(), b.tensor_names());
        assert_eq!(masks.len(), 2);
        // Keyed per tensor: mask equals a direct sample under the same key.
        for m in &masks {
            let direct = sample_mask("a1", &m.tensor_name, &m.shape, &cfg(0.5, 42, true, true));
            assert_eq!(*m, direct);
        }
    }

    #[test]
    fn mask_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.json");
        let c = cfg(0.5, 133, true, true);
        let masks = vec![
            sample_mask("a1", "x", &[13], &c),
            sample_mask("a1", "y", &[3, 5], &c),
        ];
        save_masks("a1", &c, &masks, &path).unwrap();
        let (id, seed, p, back) = load_masks(&path).unwrap();
        assert_eq!(id, "a1");
        assert_eq!(seed, 133);
        assert_eq!(p, 0.5);
        assert_eq!(back, masks);
    }

    #[test]
    fn invalid_drop_rate_is_rejected() {
        let t = tensor(vec![1.0]);
        let mask = SdpMask {
            tensor_name: "t".into(),
            shape: vec![1],
            bits: vec![1],
        };
        assert!(apply_sdp(&t, &mask, &cfg(1.0, 0, true, true)).is_err());
    }
}

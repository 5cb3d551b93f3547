use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SefnetConfig;
use crate::error::{Error, Result};
use crate::tensor::DiffArray;

/// Every learnable array of the model, keyed by a stable name.
///
/// Names: `lstm.{l}.w_ih`, `lstm.{l}.w_hh`, `lstm.{l}.bias`,
/// `conv.{b}.kernel`, `conv.{b}.bn_gamma`, `conv.{b}.bn_beta`,
/// `attn.w_q`, `attn.w_k`, `attn.w_v`, `fusion.w_inter`, `fusion.w_intra`,
/// `dense.w`, `dense.b`, `ar.w`, `ar.b`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SefnetParams {
    arrays: BTreeMap<String, DiffArray>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> DiffArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    DiffArray::new(shape, values).unwrap()
}

impl SefnetParams {
    /// Initial parameters: uniform(±1/√fan_in) weights and kernels, LSTM
    /// forget-gate bias 1, BN scale 1 shift 0, fusion gates 1, AR and other
    /// biases 0.
    pub fn init(config: &SefnetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::default();
        let (n, d, a, k) = (config.regions, config.lstm_hidden, config.attn_dim, config.filters);
        let variant = config.variant;

        if variant.uses_intra() {
            for layer in 0..config.lstm_layers {
                let input = if layer == 0 { 1 } else { d };
                p.insert(format!("lstm.{layer}.w_ih"), uniform(&mut rng, &[input, 4 * d], input));
                p.insert(format!("lstm.{layer}.w_hh"), uniform(&mut rng, &[d, 4 * d], d));
                let mut bias = vec![0.0; 4 * d];
                bias[d..2 * d].fill(1.0);
                p.insert(format!("lstm.{layer}.bias"), DiffArray::vector(bias));
            }
            if variant.uses_fusion() {
                p.insert("fusion.w_intra".into(), DiffArray::filled(&[n, d], 1.0));
            }
        }
        if variant.uses_inter() {
            for (b, block) in config.conv_blocks().iter().enumerate() {
                p.insert(
                    format!("conv.{b}.kernel"),
                    uniform(&mut rng, &[k, block.kernel], block.kernel),
                );
                p.insert(format!("conv.{b}.bn_gamma"), DiffArray::filled(&[k], 1.0));
                p.insert(format!("conv.{b}.bn_beta"), DiffArray::zeros(&[k]));
            }
            let f = config.feature_width();
            for name in ["attn.w_q", "attn.w_k", "attn.w_v"] {
                p.insert(name.into(), uniform(&mut rng, &[f, a], f));
            }
            if variant.uses_fusion() {
                p.insert("fusion.w_inter".into(), DiffArray::filled(&[n, a], 1.0));
            }
        }
        let width = config.fused_width();
        p.insert("dense.w".into(), uniform(&mut rng, &[width, 1], width));
        p.insert("dense.b".into(), DiffArray::zeros(&[1]));
        let q = config.effective_ar_window();
        if q > 0 {
            p.insert("ar.w".into(), DiffArray::zeros(&[q]));
            p.insert("ar.b".into(), DiffArray::zeros(&[1]));
        }
        p
    }

    pub fn insert(&mut self, name: String, array: DiffArray) {
        self.arrays.insert(name, array);
    }

    pub fn get(&self, name: &str) -> Result<&DiffArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DiffArray> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffArray)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(DiffArray::numel).sum()
    }

    /// Checks every array expected by `config` is present with its shape.
    pub fn check_against(&self, config: &SefnetConfig) -> Result<()> {
        let expected = Self::init(config, 0);
        for (name, arr) in expected.iter() {
            let have = self.get(name)?;
            if have.shape() != arr.shape() {
                return Err(Error::dim("parameter", arr.shape(), have.shape()));
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.contains(n)) {
            return Err(Error::config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Whether weight decay applies. Fusion gates, BN scale/shift and biases are
/// exempt.
pub fn decays(name: &str) -> bool {
    !(name.starts_with("fusion.") || name.contains("bn_") || name.ends_with(".bias") || name.ends_with(".b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn shapes_follow_config() {
        let c = SefnetConfig::small(5, 20, 3);
        let p = SefnetParams::init(&c, 1);
        assert_eq!(p.get("attn.w_q").unwrap().shape(), [104, 16]);
        assert_eq!(p.get("fusion.w_inter").unwrap().shape(), [5, 16]);
        assert_eq!(p.get("fusion.w_intra").unwrap().shape(), [5, 16]);
        assert_eq!(p.get("dense.w").unwrap().shape(), [32, 1]);
        assert_eq!(p.get("conv.4.kernel").unwrap().shape(), [8, 20]);
        assert_eq!(p.get("ar.w").unwrap().shape(), [20]);
        assert!(p.get("ar.w").unwrap().values().iter().all(|&v| v == 0.0));
        let bias = p.get("lstm.0.bias").unwrap().values();
        assert_eq!(&bias[16..32], &[1.0; 16]);
        assert_eq!(bias[0], 0.0);
        p.check_against(&c).unwrap();
    }

    #[test]
    fn ablations_drop_arrays() {
        let base = SefnetConfig::small(4, 20, 3);
        let p = SefnetParams::init(&base.clone().with_variant(Variant::NoInter), 0);
        assert!(!p.names().any(|n| n.starts_with("conv.") || n.starts_with("attn.")));
        assert!(!p.contains("fusion.w_inter"));
        let p = SefnetParams::init(&base.clone().with_variant(Variant::NoIntra), 0);
        assert!(!p.names().any(|n| n.starts_with("lstm.")));
        let p = SefnetParams::init(&base.clone().with_variant(Variant::NoAr), 0);
        assert!(!p.contains("ar.w"));
        let p = SefnetParams::init(&base.clone().with_variant(Variant::NoFusion), 0);
        assert!(!p.names().any(|n| n.starts_with("fusion.")));
        let p = SefnetParams::init(&base.with_variant(Variant::NoRaconv), 0);
        assert!(p.contains("conv.0.kernel") && !p.contains("conv.1.kernel"));
        assert_eq!(p.get("attn.w_v").unwrap().shape(), [24, 16]);
    }

    #[test]
    fn init_is_seeded() {
        let c = SefnetConfig::small(3, 12, 1);
        assert_eq!(SefnetParams::init(&c, 9), SefnetParams::init(&c, 9));
        assert_ne!(SefnetParams::init(&c, 9), SefnetParams::init(&c, 10));
    }

    #[test]
    fn decay_exemptions() {
        assert!(decays("lstm.0.w_ih"));
        assert!(decays("conv.2.kernel"));
        assert!(decays("dense.w"));
        assert!(decays("ar.w"));
        assert!(!decays("lstm.0.bias"));
        assert!(!decays("conv.2.bn_gamma"));
        assert!(!decays("fusion.w_inter"));
        assert!(!decays("dense.b"));
        assert!(!decays("ar.b"));
    }
}

//! Named weight tensors and their initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numerics::{real, Scalar, Tensor};

/// All model weights, keyed by name. The `BTreeMap` keeps iteration order
/// deterministic for checkpointing and optimizer state.
#[derive(Debug, Clone)]
pub struct Parameters<T: Scalar> {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Weight matrices drawn from normal(0, 0.02); biases zero; norm gains
    /// one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid stddev");
        let mut matrix = |shape: &[usize]| -> Tensor<T> {
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| real::<T>(normal.sample(&mut rng)))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        let d = config.embed_dim;
        let mut tensors = BTreeMap::new();
        tensors.insert("token_embedding".into(), matrix(&[config.vocab_size, d]));
        tensors.insert("type_embedding".into(), matrix(&[config.type_count, d]));
        tensors.insert("role_embedding".into(), matrix(&[config.role_count, d]));
        for layer in 0..config.layers {
            let p = |name: &str| format!("layer{layer}.{name}");
            for proj in ["wq", "wk", "wv", "wo"] {
                tensors.insert(p(&format!("attn.{proj}")), matrix(&[d, d]));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                tensors.insert(p(&format!("attn.{bias}")), Tensor::zeros(&[d]));
            }
            tensors.insert(p("ffn.w1"), matrix(&[d, config.ffn_dim]));
            tensors.insert(p("ffn.b1"), Tensor::zeros(&[config.ffn_dim]));
            tensors.insert(p("ffn.w2"), matrix(&[config.ffn_dim, d]));
            tensors.insert(p("ffn.b2"), Tensor::zeros(&[d]));
            for norm in ["ln1", "ln2"] {
                tensors.insert(p(&format!("{norm}.gain")), Tensor::filled(&[d], T::one()));
                tensors.insert(p(&format!("{norm}.bias")), Tensor::zeros(&[d]));
            }
        }
        tensors.insert("final_norm.gain".into(), Tensor::filled(&[d], T::one()));
        tensors.insert("final_norm.bias".into(), Tensor::zeros(&[d]));
        tensors.insert("output_projection".into(), matrix(&[d, config.vocab_size]));

        Ok(Parameters {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(
        config: ModelConfig,
        tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let reference = Parameters::<T>::init(&config, 0)?;
        for (name, tensor) in reference.tensors.iter() {
            match tensors.get(name) {
                Some(t) if t.shape() == tensor.shape() => {}
                Some(t) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "tensor '{name}' has shape {:?}, config implies {:?}",
                        t.shape(),
                        tensor.shape()
                    )))
                }
                None => return Err(ModelError::UnknownTensor(name.clone())),
            }
        }
        if tensors.len() != reference.tensors.len() {
            let extra = tensors
                .keys()
                .find(|k| !reference.tensors.contains_key(*k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::UnknownTensor(extra));
        }
        Ok(Parameters { config, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar entries across all tensors.
    pub fn entry_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

//! Learned parameters, optimizer momentum, and the checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::net::{LayerSpec, NetworkConfig};
use crate::rng::Rng;
use crate::tensor::{read_u16, read_u32, read_u64, Scalar, Tensor, TensorBase};

/// Weight/bias pair for one parametric layer; empty for the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub weight: Option<TensorBase<T>>,
    pub bias: Option<TensorBase<T>>,
}

impl<T: Scalar> ParamSet<T> {
    fn empty() -> Self {
        Self {
            weight: None,
            bias: None,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.as_ref().map(|t| t.zeros_like()),
            bias: self.bias.as_ref().map(|t| t.zeros_like()),
        }
    }

    fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            weight: self.weight.as_ref().map(|t| t.cast()),
            bias: self.bias.as_ref().map(|t| t.cast()),
        }
    }
}

/// Parameters plus per-parameter momentum and the iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkStateBase<T> {
    pub layers: Vec<ParamSet<T>>,
    pub heads: Vec<ParamSet<T>>,
    pub layer_momentum: Vec<ParamSet<T>>,
    pub head_momentum: Vec<ParamSet<T>>,
    pub iteration: u64,
}

pub type NetworkState = NetworkStateBase<f32>;

/// Weight init: zero-mean Gaussian, std 0.01, biases zero.
const INIT_STD: f32 = 0.01;

impl<T: Scalar> NetworkStateBase<T> {
    /// Fresh state for a config. Draw order is fixed (layers then heads,
    /// weights then biases) so a seed fully determines the init.
    pub fn init(config: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes()?;
        let mut in_shape = crate::net::LayerShape::Spatial {
            c: config.input.0,
            h: config.input.1,
            w: config.input.2,
        };
        let mut layers = Vec::with_capacity(config.layers.len());
        for (spec, out_shape) in config.layers.iter().zip(&shapes) {
            let params = match spec {
                LayerSpec::Conv {
                    filters, kernel, ..
                } => {
                    let in_c = match in_shape {
                        crate::net::LayerShape::Spatial { c, .. } => c,
                        crate::net::LayerShape::Flat { .. } => unreachable!("validated"),
                    };
                    ParamSet {
                        weight: Some(gaussian_tensor(
                            rng,
                            &[*filters, in_c, *kernel, *kernel],
                        )?),
                        bias: Some(TensorBase::zeros(&[*filters])?),
                    }
                }
                LayerSpec::FullyConnected { units } => ParamSet {
                    weight: Some(gaussian_tensor(rng, &[*units, in_shape.len()])?),
                    bias: Some(TensorBase::zeros(&[*units])?),
                },
                _ => ParamSet::empty(),
            };
            layers.push(params);
            in_shape = *out_shape;
        }
        let feature_len = config.feature_len()?;
        let heads = config
            .heads
            .iter()
            .map(|h| {
                Ok(ParamSet {
                    weight: Some(gaussian_tensor(rng, &[h.classes, feature_len])?),
                    bias: Some(TensorBase::zeros(&[h.classes])?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layer_momentum = layers.iter().map(ParamSet::zeros_like).collect();
        let head_momentum = heads.iter().map(ParamSet::zeros_like).collect();
        Ok(Self {
            layers,
            heads,
            layer_momentum,
            head_momentum,
            iteration: 0,
        })
    }

    pub fn cast<U: Scalar>(&self) -> NetworkStateBase<U> {
        NetworkStateBase {
            layers: self.layers.iter().map(ParamSet::cast).collect(),
            heads: self.heads.iter().map(ParamSet::cast).collect(),
            layer_momentum: self.layer_momentum.iter().map(ParamSet::cast).collect(),
            head_momentum: self.head_momentum.iter().map(ParamSet::cast).collect(),
            iteration: self.iteration,
        }
    }
}

fn gaussian_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Result<TensorBase<T>> {
    let t = TensorBase::<T>::zeros(shape)?;
    let data = rng
        .normal_vec(t.len(), 0.0, INIT_STD)
        .into_iter()
        .map(T::from_f32)
        .collect();
    Ok(TensorBase::from_vec_unchecked(t.shape().to_vec(), data))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
const CHECKPOINT_VERSION: u16 = 1;

fn write_entry<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    tensor.write_to(w)
}

impl NetworkState {
    /// Checkpoint layout: "CKP1" | u16 version | u64 iteration |
    /// u32 entry count | entries of (u16 name length, name, tensor
    /// container). Entry order is fixed, so identical states produce
    /// identical bytes.
    pub fn encode(&self) -> Vec<u8> {
        fn collect<'a>(
            prefix: &str,
            params: &'a [ParamSet<f32>],
            entries: &mut Vec<(String, &'a Tensor)>,
        ) {
            for (i, p) in params.iter().enumerate() {
                if let Some(w) = &p.weight {
                    entries.push((format!("{prefix}{i}.weight"), w));
                }
                if let Some(b) = &p.bias {
                    entries.push((format!("{prefix}{i}.bias"), b));
                }
            }
        }
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        collect("layer", &self.layers, &mut entries);
        collect("head", &self.heads, &mut entries);
        // momentum twins use the layerN.m / headN.m name space
        for (i, p) in self.layer_momentum.iter().enumerate() {
            if let Some(w) = &p.weight {
                entries.push((format!("layer{i}.m.weight"), w));
            }
            if let Some(b) = &p.bias {
                entries.push((format!("layer{i}.m.bias"), b));
            }
        }
        for (i, p) in self.head_momentum.iter().enumerate() {
            if let Some(w) = &p.weight {
                entries.push((format!("head{i}.m.weight"), w));
            }
            if let Some(b) = &p.bias {
                entries.push((format!("head{i}.m.bias"), b));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, tensor) in entries {
            write_entry(&mut out, &name, tensor).expect("vec write");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::atomic_write(path, &self.encode())
    }

    pub fn decode(bytes: &[u8], config: &NetworkConfig) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        if read_u16(&mut r)? != CHECKPOINT_VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let iteration = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::Format("truncated checkpoint entry".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("checkpoint entry name is not utf-8".into()))?;
            let tensor = Tensor::read_from(&mut r)?;
            entries.insert(name, tensor);
        }

        // rebuild against the config, validating shapes via a template
        let mut template = NetworkState::init(config, &mut Rng::new(0))?;
        template.iteration = iteration;
        let mut take = |name: String, slot: &mut Option<Tensor>| -> Result<()> {
            if let Some(expected) = slot.as_ref() {
                let tensor = entries
                    .remove(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint missing entry {name}")))?;
                if tensor.shape() != expected.shape() {
                    return Err(Error::Format(format!(
                        "checkpoint entry {name} has shape {:?}, config wants {:?}",
                        tensor.shape(),
                        expected.shape()
                    )));
                }
                *slot = Some(tensor);
            }
            Ok(())
        };
        for i in 0..template.layers.len() {
            let mut w = template.layers[i].weight.take();
            take(format!("layer{i}.weight"), &mut w)?;
            template.layers[i].weight = w;
            let mut b = template.layers[i].bias.take();
            take(format!("layer{i}.bias"), &mut b)?;
            template.layers[i].bias = b;
            let mut mw = template.layer_momentum[i].weight.take();
            take(format!("layer{i}.m.weight"), &mut mw)?;
            template.layer_momentum[i].weight = mw;
            let mut mb = template.layer_momentum[i].bias.take();
            take(format!("layer{i}.m.bias"), &mut mb)?;
            template.layer_momentum[i].bias = mb;
        }
        for i in 0..template.heads.len() {
            let mut w = template.heads[i].weight.take();
            take(format!("head{i}.weight"), &mut w)?;
            template.heads[i].weight = w;
            let mut b = template.heads[i].bias.take();
            take(format!("head{i}.bias"), &mut b)?;
            template.heads[i].bias = b;
            let mut mw = template.head_momentum[i].weight.take();
            take(format!("head{i}.m.weight"), &mut mw)?;
            template.head_momentum[i].weight = mw;
            let mut mb = template.head_momentum[i].bias.take();
            take(format!("head{i}.m.bias"), &mut mb)?;
            template.head_momentum[i].bias = mb;
        }
        if !entries.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries the config does not expect",
                entries.len()
            )));
        }
        Ok(template)
    }

    pub fn load(path: &Path, config: &NetworkConfig) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes, config)
    }
}

//! Minimal trainable ConvNet engine.
//!
//! A network is a declarative layer stack (the trunk) plus one or more
//! softmax classifier heads on the trunk's final features. All kernels are
//! generic over the scalar type: training runs in f32, gradient checks run
//! the same code in f64.

mod check;
mod forward;
mod layers;
mod state;
mod train;
mod viz;

pub use check::{
    fd_input_gradients, fd_param_gradients, max_relative_error, param_slots, slot_gradient,
    ParamSlot,
};
pub use forward::{backward, forward, ForwardPass, Gradients};
pub use state::{NetworkState, NetworkStateBase, ParamSet};
pub use train::{
    sgd_step, train, train_from, BatchSource, ScheduleMode, TrainOutcome, TrainSchedule, MOMENTUM,
};
pub use viz::visualize_first_layer;

/// Numerically stable log(sum(exp(row))); shared with the loss routing.
pub fn log_sum_exp_slice<T: crate::tensor::Scalar>(row: &[T]) -> T {
    layers::log_sum_exp(row)
}

use crate::config::{parse_sections, Section};
use crate::error::{Error, Result};

/// One trunk layer. Parameters mirror the config file keys.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Lrn {
        depth: usize,
        k: f32,
        alpha: f32,
        beta: f32,
    },
    FullyConnected {
        units: usize,
    },
    Dropout {
        keep: f32,
    },
    Softmax,
}

/// A softmax classification head tied to one dataset tag.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub id: String,
    pub classes: usize,
    pub dataset: String,
}

/// Declarative network: input shape, ordered trunk, heads.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// (channels, height, width) of one sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub heads: Vec<HeadSpec>,
}

/// Shape flowing between trunk layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { len: usize },
}

impl LayerShape {
    pub fn len(&self) -> usize {
        match *self {
            LayerShape::Spatial { c, h, w } => c * h * w,
            LayerShape::Flat { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            LayerShape::Spatial { c, h, w } => vec![c, h, w],
            LayerShape::Flat { len } => vec![len],
        }
    }
}

fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl LayerSpec {
    /// Output shape of this layer for the given input shape.
    pub fn output_shape(&self, input: LayerShape) -> Result<LayerShape> {
        match (self, input) {
            (
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                },
                LayerShape::Spatial { h, w, .. },
            ) => Ok(LayerShape::Spatial {
                c: *filters,
                h: conv_extent(h, *kernel, *stride, *pad)?,
                w: conv_extent(w, *kernel, *stride, *pad)?,
            }),
            (LayerSpec::MaxPool { window, stride }, LayerShape::Spatial { c, h, w }) => {
                Ok(LayerShape::Spatial {
                    c,
                    h: conv_extent(h, *window, *stride, 0)?,
                    w: conv_extent(w, *window, *stride, 0)?,
                })
            }
            (LayerSpec::Lrn { .. }, s @ LayerShape::Spatial { .. }) => Ok(s),
            (LayerSpec::FullyConnected { units }, s) => {
                let _ = s.len();
                Ok(LayerShape::Flat { len: *units })
            }
            (LayerSpec::Relu, s) | (LayerSpec::Dropout { .. }, s) | (LayerSpec::Softmax, s) => {
                Ok(s)
            }
            (spec, LayerShape::Flat { .. }) => Err(Error::Shape(format!(
                "{spec:?} needs a spatial input but follows a fully-connected layer"
            ))),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Argument(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                ..
            } => {
                positive(*filters, "conv filters")?;
                positive(*kernel, "conv kernel")?;
                positive(*stride, "conv stride")
            }
            LayerSpec::MaxPool { window, stride } => {
                positive(*window, "pool window")?;
                positive(*stride, "pool stride")
            }
            LayerSpec::Lrn { depth, k, alpha, beta } => {
                positive(*depth, "lrn depth")?;
                if !(k.is_finite() && alpha.is_finite() && beta.is_finite() && *beta > 0.0) {
                    return Err(Error::Argument("lrn constants must be finite, beta > 0".into()));
                }
                Ok(())
            }
            LayerSpec::FullyConnected { units } => positive(*units, "fc units"),
            LayerSpec::Dropout { keep } => {
                if !(*keep > 0.0 && *keep <= 1.0) {
                    return Err(Error::Argument(format!(
                        "dropout keep ratio must be in (0, 1], got {keep}"
                    )));
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(()),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Argument("input shape extents must be positive".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        if self.heads.is_empty() {
            return Err(Error::Argument("network needs at least one head".into()));
        }
        for head in &self.heads {
            if head.classes < 2 {
                return Err(Error::Argument(format!(
                    "head {} needs at least 2 classes",
                    head.id
                )));
            }
        }
        let mut tags: Vec<&str> = self.heads.iter().map(|h| h.dataset.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        if tags.len() != self.heads.len() {
            return Err(Error::Argument("head dataset tags must be unique".into()));
        }
        self.layer_shapes()?;
        Ok(())
    }

    /// Shape after each trunk layer; errors if consecutive layers do not
    /// compose.
    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        let (c, h, w) = self.input;
        let mut shape = LayerShape::Spatial { c, h, w };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Flattened length of the trunk output the heads consume.
    pub fn feature_len(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(shapes
            .last()
            .map(|s| s.len())
            .unwrap_or(self.input.0 * self.input.1 * self.input.2))
    }

    pub fn head_index(&self, dataset: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.dataset == dataset)
    }

    /// Parse the key=value section format. Layer sections appear in trunk
    /// order; `[head.<id>]` sections may appear anywhere after `[input]`.
    pub fn parse(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut input = None;
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        for section in &sections {
            match section.name.as_str() {
                "" => {
                    if !section.entries.is_empty() {
                        return Err(Error::Format(
                            "network config keys must live inside a section".into(),
                        ));
                    }
                }
                "input" => {
                    input = Some((
                        section.require::<usize>("channels")?,
                        section.require::<usize>("height")?,
                        section.require::<usize>("width")?,
                    ));
                }
                "conv" => layers.push(LayerSpec::Conv {
                    filters: section.require("filters")?,
                    kernel: section.require("kernel")?,
                    stride: section.parse("stride")?.unwrap_or(1),
                    pad: section.parse("pad")?.unwrap_or(0),
                }),
                "relu" => layers.push(LayerSpec::Relu),
                "maxpool" => layers.push(LayerSpec::MaxPool {
                    window: section.require("window")?,
                    stride: section.parse("stride")?.unwrap_or(1),
                }),
                "lrn" => layers.push(LayerSpec::Lrn {
                    depth: section.parse("depth")?.unwrap_or(5),
                    k: section.parse("k")?.unwrap_or(2.0),
                    alpha: section.parse("alpha")?.unwrap_or(1e-4),
                    beta: section.parse("beta")?.unwrap_or(0.75),
                }),
                "fc" | "fullyconnected" => layers.push(LayerSpec::FullyConnected {
                    units: section.require("units")?,
                }),
                "dropout" => layers.push(LayerSpec::Dropout {
                    keep: section.require("keep")?,
                }),
                "softmax" => layers.push(LayerSpec::Softmax),
                other => {
                    if let Some(id) = other.strip_prefix("head.") {
                        heads.push(parse_head(id, section)?);
                    } else {
                        return Err(Error::Format(format!("unknown section [{other}]")));
                    }
                }
            }
        }
        let input = input.ok_or_else(|| Error::Format("missing [input] section".into()))?;
        let config = NetworkConfig {
            input,
            layers,
            heads,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_head(id: &str, section: &Section) -> Result<HeadSpec> {
    Ok(HeadSpec {
        id: id.to_string(),
        classes: section.require("classes")?,
        dataset: section.require::<String>("dataset")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(channels: usize, classes: usize) -> NetworkConfig {
        NetworkConfig {
            input: (channels, 8, 8),
            layers: vec![
                LayerSpec::Conv {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::FullyConnected { units: 6 },
                LayerSpec::Relu,
            ],
            heads: vec![HeadSpec {
                id: "main".into(),
                classes,
                dataset: "main".into(),
            }],
        }
    }

    #[test]
    fn shapes_compose() {
        let config = tiny_config(2, 3);
        let shapes = config.layer_shapes().unwrap();
        assert_eq!(shapes[0], LayerShape::Spatial { c: 4, h: 8, w: 8 });
        assert_eq!(shapes[2], LayerShape::Spatial { c: 4, h: 4, w: 4 });
        assert_eq!(shapes[4], LayerShape::Flat { len: 6 });
        assert_eq!(config.feature_len().unwrap(), 6);
    }

    #[test]
    fn conv_after_fc_rejected() {
        let mut config = tiny_config(2, 3);
        config.layers.push(LayerSpec::Conv {
            filters: 2,
            kernel: 1,
            stride: 1,
            pad: 0,
        });
        assert!(matches!(config.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_too_large_rejected() {
        let config = NetworkConfig {
            input: (1, 4, 4),
            layers: vec![LayerSpec::Conv {
                filters: 1,
                kernel: 7,
                stride: 1,
                pad: 0,
            }],
            heads: vec![HeadSpec {
                id: "m".into(),
                classes: 2,
                dataset: "m".into(),
            }],
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn bad_dropout_ratio_rejected() {
        let mut config = tiny_config(1, 2);
        config.layers.push(LayerSpec::Dropout { keep: 0.0 });
        assert!(matches!(config.validate(), Err(Error::Argument(_))));
        config.layers.pop();
        config.layers.push(LayerSpec::Dropout { keep: 1.5 });
        assert!(config.validate().is_err());
    }

    #[test]
    fn duplicate_dataset_tags_rejected() {
        let mut config = tiny_config(1, 2);
        config.heads.push(HeadSpec {
            id: "extra".into(),
            classes: 2,
            dataset: "main".into(),
        });
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_file_roundtrip() {
        let text = "\
# tiny demo net
[input]
channels = 2
height = 8
width = 8

[conv]
filters = 4
kernel = 3
stride = 1
pad = 1

[relu]

[maxpool]
window = 2
stride = 2

[fc]
units = 6

[relu]

[head.main]
classes = 3
dataset = main
";
        let parsed = NetworkConfig::parse(text).unwrap();
        assert_eq!(parsed, tiny_config(2, 3));
    }

    #[test]
    fn lrn_defaults_apply() {
        let text = "[input]\nchannels = 4\nheight = 8\nwidth = 8\n[lrn]\n[head.m]\nclasses = 2\ndataset = m\n";
        let config = NetworkConfig::parse(text).unwrap();
        assert_eq!(
            config.layers[0],
            LayerSpec::Lrn {
                depth: 5,
                k: 2.0,
                alpha: 1e-4,
                beta: 0.75
            }
        );
    }
}

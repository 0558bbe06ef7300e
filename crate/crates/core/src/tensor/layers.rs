use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{CoalaError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CoalaError::Invalid(format!("{what} in {self:?}")));
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return bad("zero channels");
                }
                if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return bad("kernel and stride must be positive");
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return bad("zero features");
                }
            }
            LayerSpec::BatchNorm { features } => {
                if *features == 0 {
                    return bad("zero features");
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad("dropout rate outside [0, 1)");
                }
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
        stride: (usize, usize),
        padding: (usize, usize),
        transposed: bool,
    },
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Relu,
    Sigmoid,
    Dropout(f64),
}

/// Kaiming-uniform (ReLU gain) weights, zero biases.
fn kaiming<T: Scalar>(shape: &[usize], fan_in: f64, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..bound)))
}

/// A chain of layers whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Sequential {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

impl Sequential {
    /// Registers the parameters of every layer under `"{prefix}.{index}.{name}"`.
    pub fn build<T: Scalar>(
        prefix: &str,
        group: ParamGroup,
        specs: Vec<LayerSpec>,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let name = |p: &str| format!("{prefix}.{i}.{p}");
            let layer = match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
                    let w = kaiming(&[out_channels, in_channels, kernel.0, kernel.1], fan_in, rng);
                    Layer::Conv {
                        weight: store.add(name("weight"), group, ParamKind::Weight, w)?,
                        bias: store.add(
                            name("bias"),
                            group,
                            ParamKind::Weight,
                            Tensor::zeros(&[out_channels]),
                        )?,
                        stride,
                        padding,
                        transposed: false,
                    }
                }
                LayerSpec::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    // each output pixel sees in_channels * (kernel / stride) taps
                    let fan_in =
                        (in_channels * kernel.0 * kernel.1) as f64 / (stride.0 * stride.1) as f64;
                    let w = kaiming(&[in_channels, out_channels, kernel.0, kernel.1], fan_in, rng);
                    Layer::Conv {
                        weight: store.add(name("weight"), group, ParamKind::Weight, w)?,
                        bias: store.add(
                            name("bias"),
                            group,
                            ParamKind::Weight,
                            Tensor::zeros(&[out_channels]),
                        )?,
                        stride,
                        padding,
                        transposed: true,
                    }
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let w = kaiming(&[out_features, in_features], in_features as f64, rng);
                    Layer::Linear {
                        weight: store.add(name("weight"), group, ParamKind::Weight, w)?,
                        bias: store.add(
                            name("bias"),
                            group,
                            ParamKind::Weight,
                            Tensor::zeros(&[out_features]),
                        )?,
                    }
                }
                LayerSpec::BatchNorm { features } => Layer::BatchNorm {
                    gamma: store.add(
                        name("gamma"),
                        group,
                        ParamKind::Weight,
                        Tensor::full(&[features], T::one()),
                    )?,
                    beta: store.add(
                        name("beta"),
                        group,
                        ParamKind::Weight,
                        Tensor::zeros(&[features]),
                    )?,
                    running_mean: store.add(
                        name("running_mean"),
                        group,
                        ParamKind::RunningStat,
                        Tensor::zeros(&[features]),
                    )?,
                    running_var: store.add(
                        name("running_var"),
                        group,
                        ParamKind::RunningStat,
                        Tensor::full(&[features], T::one()),
                    )?,
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::Dropout { rate } => Layer::Dropout(rate),
            };
            layers.push(layer);
        }
        Ok(Sequential { specs, layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Runs every layer. In a training graph, batch norms use batch statistics
    /// and update their running averages in `store`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        mut x: Var,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                    transposed,
                } => {
                    let w = g.param(store, weight);
                    let b = g.param(store, bias);
                    if transposed {
                        g.conv_transpose2d(x, w, Some(b), stride, padding)?
                    } else {
                        g.conv2d(x, w, Some(b), stride, padding)?
                    }
                }
                Layer::Linear { weight, bias } => {
                    let w = g.param(store, weight);
                    let b = g.param(store, bias);
                    g.linear(x, w, Some(b))?
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let gv = g.param(store, gamma);
                    let bv = g.param(store, beta);
                    if g.is_training() {
                        let (y, stats) = g.batch_norm(x, gv, bv, None, BN_EPS)?;
                        if let Some(stats) = stats {
                            let m = T::c(BN_MOMENTUM);
                            let keep = T::one() - m;
                            let unbias = T::c(stats.count as f64 / (stats.count as f64 - 1.0).max(1.0));
                            for (r, &b) in store
                                .get_mut(running_mean)
                                .value
                                .data_mut()
                                .iter_mut()
                                .zip(&stats.mean)
                            {
                                *r = keep * *r + m * b;
                            }
                            for (r, &b) in store
                                .get_mut(running_var)
                                .value
                                .data_mut()
                                .iter_mut()
                                .zip(&stats.var)
                            {
                                *r = keep * *r + m * b * unbias;
                            }
                        }
                        y
                    } else {
                        let rm = store.value(running_mean).data().to_vec();
                        let rv = store.value(running_var).data().to_vec();
                        g.batch_norm(x, gv, bv, Some((&rm, &rv)), BN_EPS)?.0
                    }
                }
                Layer::Relu => g.relu(x)?,
                Layer::Sigmoid => g.sigmoid(x)?,
                Layer::Dropout(rate) => g.dropout(x, rate)?,
            };
        }
        Ok(x)
    }
}

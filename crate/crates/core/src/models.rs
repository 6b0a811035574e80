//! Target classifiers: the three MNIST convnets and a small residual network
//! standing in for ResNet32 at desk scale.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::warp::Image;

/// Architecture building block. Convolutions use zero padding and the
/// cross-correlation convention; dropout is inverted (survivors scaled by
/// 1/(1-p)) and active only in train mode.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        filters: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Dropout {
        p: f64,
    },
    /// Valid-mode average pooling (used for residual-stage downsampling).
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        name: String,
        units: usize,
    },
    /// out = relu(body(x) + shortcut(x)); an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

/// Forward-pass mode; dropout masks are drawn only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture plus trained weights.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Named weight tensors in construction order (each conv/dense layer
    /// contributes `<name>.w` and `<name>.b`).
    pub weights: Vec<(String, Tensor)>,
    /// Input geometry as (height, width, channels).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub pixel_range: (f64, f64),
}

/// Anything attacks can differentiate through: maps an input batch var
/// `[N,C,H,W]` to eval-mode logits `[N,num_classes]` on the caller's tape.
pub trait DifferentiableModel: Sync {
    fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn input_geometry(&self) -> (usize, usize, usize);
    fn num_classes(&self) -> usize;
    fn pixel_range(&self) -> (f64, f64);

    fn logits_image(&self, x: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(batch_tensor(&[x])?);
        let out = self.forward_eval(&mut tape, xv)?;
        Ok(tape.data(out).to_vec())
    }

    /// Argmax of eval-mode logits; ties break to the lowest index.
    fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.logits_image(x)?))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stack images into an `[N,C,H,W]` tensor.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.height != h || img.width != w || img.channels != c {
            return Err(Error::ShapeMismatch {
                op: "batch_tensor",
                left: vec![h, w, c],
                right: vec![img.height, img.width, img.channels],
            });
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Build one of the known architectures with seeded Kaiming-initialized
/// weights: `A`, `B`, `C` (the 28x28 MNIST models) or `resnet_small`
/// (32x32x3, three residual stages, under 0.5M parameters).
pub fn build_model(name: &str, seed: u64) -> Result<Classifier> {
    let conv = |name: &str, filters, k, stride, padding| LayerSpec::Conv {
        name: name.into(),
        filters,
        kh: k,
        kw: k,
        stride,
        padding,
    };
    let dense = |name: &str, units| LayerSpec::Dense {
        name: name.into(),
        units,
    };

    let (layers, input): (Vec<LayerSpec>, (usize, usize, usize)) = match name {
        "A" => (
            vec![
                conv("conv1", 64, 5, 1, 0),
                LayerSpec::Relu,
                conv("conv2", 64, 5, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.25 },
                LayerSpec::Flatten,
                dense("fc1", 128),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.5 },
                dense("fc2", 10),
            ],
            (28, 28, 1),
        ),
        "B" => (
            vec![
                conv("conv1", 64, 8, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.2 },
                conv("conv2", 128, 6, 1, 0),
                LayerSpec::Relu,
                conv("conv3", 128, 5, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Flatten,
                dense("fc1", 10),
            ],
            (28, 28, 1),
        ),
        "C" => (
            vec![
                conv("conv1", 128, 3, 1, 0),
                LayerSpec::Relu,
                conv("conv2", 64, 3, 1, 0),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.25 },
                LayerSpec::Flatten,
                dense("fc1", 128),
                LayerSpec::Relu,
                LayerSpec::Dropout { p: 0.5 },
                dense("fc2", 10),
            ],
            (28, 28, 1),
        ),
        "resnet_small" => {
            let block = |n: &str, ch: usize, project: bool| LayerSpec::Residual {
                body: vec![
                    conv(&format!("{n}.c1"), ch, 3, 1, 1),
                    LayerSpec::Relu,
                    conv(&format!("{n}.c2"), ch, 3, 1, 1),
                ],
                shortcut: if project {
                    vec![conv(&format!("{n}.sc"), ch, 1, 1, 0)]
                } else {
                    vec![]
                },
            };
            (
                vec![
                    conv("stem", 16, 3, 1, 1),
                    LayerSpec::Relu,
                    block("res1a", 16, false),
                    block("res1b", 16, false),
                    LayerSpec::AvgPool { k: 2, stride: 2 },
                    block("res2a", 32, true),
                    block("res2b", 32, false),
                    LayerSpec::AvgPool { k: 2, stride: 2 },
                    block("res3a", 64, true),
                    block("res3b", 64, false),
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Flatten,
                    dense("fc", 10),
                ],
                (32, 32, 3),
            )
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (expected A, B, C, or resnet_small)"
            )))
        }
    };

    let mut rng = crate::rng(seed);
    let mut weights = Vec::new();
    let (h, w, c) = input;
    let out_shape = init_weights(&layers, ShapeState::Spatial { c, h, w }, &mut weights, &mut rng)?;
    let num_classes = match out_shape {
        ShapeState::Flat { d } => d,
        ShapeState::Spatial { .. } => {
            return Err(Error::InvalidArgument(format!(
                "model '{name}' does not end in a dense head"
            )))
        }
    };

    Ok(Classifier {
        name: name.to_string(),
        layers,
        weights,
        input,
        num_classes,
        pixel_range: (0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy)]
enum ShapeState {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "layer geometry not integral: input {size}, window {k}, stride {stride}, pad {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Walk the layer chain, validating every shape transition and appending
/// freshly initialized weights. Errors here mean the architecture itself is
/// inconsistent; nothing is deferred to the first forward pass.
fn init_weights(
    layers: &[LayerSpec],
    mut shape: ShapeState,
    weights: &mut Vec<(String, Tensor)>,
    rng: &mut ChaCha8Rng,
) -> Result<ShapeState> {
    for layer in layers {
        shape = match (layer, shape) {
            (
                LayerSpec::Conv {
                    name,
                    filters,
                    kh,
                    kw,
                    stride,
                    padding,
                },
                ShapeState::Spatial { c, h, w },
            ) => {
                let fan_in = c * kh * kw;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let wdata: Vec<f64> = (0..filters * fan_in).map(|_| normal.sample(rng)).collect();
                weights.push((
                    format!("{name}.w"),
                    Tensor::new(vec![*filters, c, *kh, *kw], wdata)?,
                ));
                weights.push((format!("{name}.b"), Tensor::zeros(vec![*filters])));
                ShapeState::Spatial {
                    c: *filters,
                    h: out_dim(h, *kh, *stride, *padding)?,
                    w: out_dim(w, *kw, *stride, *padding)?,
                }
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::Dropout { p }, s) => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::InvalidArgument(format!("dropout p={p} out of range")));
                }
                s
            }
            (LayerSpec::AvgPool { k, stride }, ShapeState::Spatial { c, h, w }) => ShapeState::Spatial {
                c,
                h: out_dim(h, *k, *stride, 0)?,
                w: out_dim(w, *k, *stride, 0)?,
            },
            (LayerSpec::GlobalAvgPool, ShapeState::Spatial { c, .. }) => {
                ShapeState::Spatial { c, h: 1, w: 1 }
            }
            (LayerSpec::Flatten, ShapeState::Spatial { c, h, w }) => ShapeState::Flat { d: c * h * w },
            (LayerSpec::Dense { name, units }, ShapeState::Flat { d }) => {
                let std = (2.0 / d as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let wdata: Vec<f64> = (0..d * units).map(|_| normal.sample(rng)).collect();
                weights.push((format!("{name}.w"), Tensor::new(vec![d, *units], wdata)?));
                weights.push((format!("{name}.b"), Tensor::zeros(vec![*units])));
                ShapeState::Flat { d: *units }
            }
            (LayerSpec::Residual { body, shortcut }, s @ ShapeState::Spatial { .. }) => {
                let body_out = init_weights(body, s, weights, rng)?;
                let short_out = init_weights(shortcut, s, weights, rng)?;
                match (body_out, short_out) {
                    (
                        ShapeState::Spatial { c: bc, h: bh, w: bw },
                        ShapeState::Spatial { c: sc, h: sh, w: sw },
                    ) if bc == sc && bh == sh && bw == sw => body_out,
                    _ => {
                        return Err(Error::InvalidArgument(
                            "residual body and shortcut output shapes differ".into(),
                        ))
                    }
                }
            }
            (layer, s) => {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer:?} cannot follow shape {s:?}"
                )))
            }
        };
    }
    Ok(shape)
}

impl Classifier {
    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Push every weight onto a tape in stored order.
    pub fn tape_weights(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|(_, t)| {
                let mut leaf = t.clone();
                leaf.requires_grad = requires_grad;
                leaf.grad = None;
                tape.leaf(leaf)
            })
            .collect()
    }

    /// Forward pass over a `[N,C,H,W]` batch var using previously pushed
    /// weight vars. `rng` is needed only in train mode (dropout masks).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        weight_vars: &[Var],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut next = 0;
        let out = forward_layers(&self.layers, tape, x, weight_vars, &mut next, mode, &mut rng)?;
        debug_assert_eq!(next, weight_vars.len(), "weight vars fully consumed");
        Ok(out)
    }

    /// Eval-mode logits for a batch of images, one row per image.
    pub fn logits(&self, images: &[&Image], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch_tensor(images)?);
        let wvars = self.tape_weights(&mut tape, false);
        let mut rng = crate::rng(0);
        let rng_opt = match mode {
            Mode::Train => Some(&mut rng),
            Mode::Eval => None,
        };
        let out = self.forward(&mut tape, x, &wvars, mode, rng_opt)?;
        let cols = self.num_classes;
        Ok(tape.data(out).chunks(cols).map(|r| r.to_vec()).collect())
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_layers(
    layers: &[LayerSpec],
    tape: &mut Tape,
    mut x: Var,
    weight_vars: &[Var],
    next: &mut usize,
    mode: Mode,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let w = weight_vars[*next];
                let b = weight_vars[*next + 1];
                *next += 2;
                let y = tape.conv2d(x, w, *stride, *padding)?;
                tape.bias_add_chan(y, b)?
            }
            LayerSpec::Relu => tape.relu(x),
            LayerSpec::Dropout { p } => match (mode, rng.as_deref_mut()) {
                (Mode::Train, Some(r)) => tape.dropout(x, *p, r)?,
                (Mode::Train, None) => {
                    return Err(Error::InvalidArgument(
                        "train-mode forward needs an RNG for dropout".into(),
                    ))
                }
                (Mode::Eval, _) => x,
            },
            LayerSpec::AvgPool { k, stride } => tape.avgpool2d(x, *k, *stride, false)?,
            LayerSpec::GlobalAvgPool => {
                let s = tape.shape(x).to_vec();
                tape.avgpool2d(x, s[2], s[2], false)?
            }
            LayerSpec::Flatten => {
                let s = tape.shape(x).to_vec();
                tape.reshape(x, vec![s[0], s[1..].iter().product()])?
            }
            LayerSpec::Dense { .. } => {
                let w = weight_vars[*next];
                let b = weight_vars[*next + 1];
                *next += 2;
                let y = tape.matmul(x, w)?;
                tape.bias_add_row(y, b)?
            }
            LayerSpec::Residual { body, shortcut } => {
                let branch = forward_layers(body, tape, x, weight_vars, next, mode, rng)?;
                let skip = if shortcut.is_empty() {
                    x
                } else {
                    forward_layers(shortcut, tape, x, weight_vars, next, mode, rng)?
                };
                let sum = tape.add(branch, skip)?;
                tape.relu(sum)
            }
        };
    }
    Ok(x)
}

impl DifferentiableModel for Classifier {
    fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wvars = self.tape_weights(tape, false);
        self.forward(tape, x, &wvars, Mode::Eval, None)
    }

    fn input_geometry(&self) -> (usize, usize, usize) {
        self.input
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn pixel_range(&self) -> (f64, f64) {
        self.pixel_range
    }
}

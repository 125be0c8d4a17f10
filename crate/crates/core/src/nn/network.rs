use rand::Rng;

use crate::codec::{compress, decompress, CodecParams};
use crate::error::{dim, Error, Result};
use crate::errprop::inject_uniform_error;
use crate::rng::seeded;
use crate::tensor::Tensor;

use super::layers::*;
use super::store::{ActivationStore, Slot, RAW_ELEMENT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn is_cheap(&self) -> bool {
        matches!(self, LayerSpec::Relu | LayerSpec::MaxPool { .. })
    }

    /// Per-sample output dims for per-sample input dims.
    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(dim(format!("conv expects {in_channels} channels, got {input:?}")));
                }
                if stride == 0 || input[1] + 2 * pad < kernel_h || input[2] + 2 * pad < kernel_w {
                    return Err(dim(format!("conv kernel does not fit input {input:?}")));
                }
                Ok(vec![
                    out_channels,
                    (input[1] + 2 * pad - kernel_h) / stride + 1,
                    (input[2] + 2 * pad - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { window, stride } => {
                if input.len() != 3 {
                    return Err(dim("maxpool expects [C, H, W] samples"));
                }
                Ok(vec![
                    input[0],
                    pool_output_extent(input[1], window, stride)?,
                    pool_output_extent(input[2], window, stride)?,
                ])
            }
            LayerSpec::FullyConnected { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(dim(format!("fc expects {inputs} features, got {n}")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::SoftmaxXent => Ok(input.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// How a conv layer keeps its input for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvStorage {
    Raw,
    Compress(CodecParams),
    /// Store a copy perturbed by uniform error instead of compressing.
    Inject { eb: f64, preserve_zeros: bool, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoragePolicy {
    /// Indexed by layer; entries for non-conv layers are ignored.
    pub conv: Vec<ConvStorage>,
    /// Cheap layers following a conv are recomputed instead of stored.
    pub recompute_cheap: bool,
}

impl StoragePolicy {
    pub fn baseline(layers: usize) -> Self {
        StoragePolicy {
            conv: vec![ConvStorage::Raw; layers],
            recompute_cheap: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Unperturbed conv inputs, kept only when requested.
    pub clean_conv_inputs: Vec<Option<Tensor>>,
    /// Raw bytes over stored bytes for each compressed conv input.
    pub ratios: Vec<Option<f64>>,
}

/// Activation and incoming loss gradient seen by a conv layer's backward.
#[derive(Debug, Clone)]
pub struct ConvCapture {
    pub activation: Tensor,
    pub loss_grad: Tensor,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: Vec<Option<LayerParams>>,
    pub captures: Vec<Option<ConvCapture>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    input_dims: Vec<usize>,
}

impl Network {
    /// Validates the shape chain and draws He-uniform weights; biases start
    /// at zero. The last layer must be the softmax loss.
    pub fn new(layers: Vec<LayerSpec>, input_dims: Vec<usize>, seed: u64) -> Result<Self> {
        if layers.last() != Some(&LayerSpec::SoftmaxXent) {
            return Err(dim("network must end with a softmax-xent layer"));
        }
        if layers[..layers.len() - 1].contains(&LayerSpec::SoftmaxXent) {
            return Err(dim("softmax-xent may only appear last"));
        }
        let mut rng = seeded(seed);
        let mut shape = input_dims.clone();
        let mut params = Vec::with_capacity(layers.len());
        for spec in &layers {
            let next = spec.output_dims(&shape)?;
            let p = match *spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => Some(he_uniform(
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                    in_channels * kernel_h * kernel_w,
                    &mut rng,
                )?),
                LayerSpec::FullyConnected { inputs, outputs } => {
                    Some(he_uniform(vec![outputs, inputs], inputs, &mut rng)?)
                }
                _ => None,
            };
            params.push(p);
            shape = next;
        }
        Ok(Network {
            layers,
            params,
            input_dims,
        })
    }

    /// conv3x3/relu/maxpool twice, conv3x3/relu twice, fc, softmax.
    pub fn desk_cnn(channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Self> {
        let (c1, c2) = (8, 16);
        let pool = LayerSpec::MaxPool { window: 2, stride: 2 };
        let features = c2 * (height / 4) * (width / 4);
        Network::new(
            vec![
                LayerSpec::conv3x3(channels, c1),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv3x3(c1, c2),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv3x3(c2, c2),
                LayerSpec::Relu,
                LayerSpec::conv3x3(c2, c2),
                LayerSpec::Relu,
                LayerSpec::FullyConnected {
                    inputs: features,
                    outputs: classes,
                },
                LayerSpec::SoftmaxXent,
            ],
            vec![channels, height, width],
            seed,
        )
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], LayerSpec::Conv2d { .. }))
            .collect()
    }

    pub fn classes(&self) -> usize {
        let mut shape = self.input_dims.clone();
        for spec in &self.layers {
            shape = spec.output_dims(&shape).expect("validated at construction");
        }
        shape.iter().product()
    }

    /// Parameter tensors in layer order, weight before bias.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    /// Index of a layer's weight tensor within [`Network::param_tensors`].
    pub fn weight_index(&self, layer: usize) -> Option<usize> {
        self.params.get(layer)?.as_ref()?;
        Some(2 * self.params[..layer].iter().flatten().count())
    }

    /// Total parameter element count.
    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.dims()[1..] != self.input_dims[..] {
            return Err(dim(format!(
                "network expects [N, {:?}] input, got {:?}",
                self.input_dims,
                x.dims()
            )));
        }
        Ok(())
    }

    fn apply(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        match self.layers[i] {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let p = self.params[i].as_ref().expect("conv has params");
                conv2d_forward(x, &p.weight, &p.bias, stride, pad)
            }
            LayerSpec::FullyConnected { .. } => {
                let p = self.params[i].as_ref().expect("fc has params");
                fc_forward(x, &p.weight, &p.bias)
            }
            LayerSpec::SoftmaxXent => Ok(x.clone()),
            spec => recompute_cheap(&spec, x),
        }
    }

    /// Logits without storing anything.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for i in 0..self.layers.len() - 1 {
            cur = self.apply(i, &cur)?;
        }
        Ok(cur)
    }

    /// Nearest conv at or before `i` reachable through cheap layers only.
    fn segment_start(&self, i: usize) -> Option<usize> {
        let mut j = i;
        loop {
            match self.layers[j] {
                LayerSpec::Conv2d { .. } => return Some(j),
                spec if spec.is_cheap() && j > 0 => j -= 1,
                _ => return None,
            }
        }
    }

    pub fn forward_train(&self, x: &Tensor, policy: &StoragePolicy, store: &mut ActivationStore, keep_clean: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut clean = vec![None; n];
        let mut ratios = vec![None; n];
        let mut cur = x.clone();
        for i in 0..n - 1 {
            let slot = match self.layers[i] {
                LayerSpec::Conv2d { .. } => {
                    if keep_clean {
                        clean[i] = Some(cur.clone());
                    }
                    match policy.conv.get(i).copied().unwrap_or(ConvStorage::Raw) {
                        ConvStorage::Raw => Slot::Raw(cur.clone()),
                        ConvStorage::Inject { eb, .. } if eb == 0.0 => Slot::Raw(cur.clone()),
                        ConvStorage::Inject {
                            eb,
                            preserve_zeros,
                            seed,
                        } => Slot::Raw(inject_uniform_error(&cur, eb, preserve_zeros, seed)?),
                        ConvStorage::Compress(params) => {
                            let (c, _) = compress(&cur, params)?;
                            let raw = cur.len() * RAW_ELEMENT_BYTES;
                            if c.encoded_len() < raw {
                                ratios[i] = Some(raw as f64 / c.encoded_len() as f64);
                                Slot::Compressed(Box::new(c))
                            } else {
                                ratios[i] = Some(1.0);
                                Slot::Raw(cur.clone())
                            }
                        }
                    }
                }
                spec if spec.is_cheap() && policy.recompute_cheap && self.segment_start(i).is_some() => {
                    Slot::Recompute
                }
                _ => Slot::Raw(cur.clone()),
            };
            store.put(i, slot)?;
            cur = self.apply(i, &cur)?;
        }
        Ok(ForwardOutput {
            logits: cur,
            clean_conv_inputs: clean,
            ratios,
        })
    }

    fn materialize(slot: Slot) -> Result<Option<Tensor>> {
        Ok(match slot {
            Slot::Raw(t) => Some(t),
            Slot::Compressed(c) => Some(decompress(&c)?),
            Slot::Recompute => None,
        })
    }

    /// Rebuilds the inputs of layers `j..=i`, where `j` is the segment's
    /// conv, from the conv's stored input.
    fn recompute_segment(&self, i: usize, store: &mut ActivationStore, inputs: &mut [Option<Tensor>]) -> Result<()> {
        let j = self
            .segment_start(i)
            .ok_or_else(|| Error::Lifecycle(format!("layer {i} has no stored predecessor")))?;
        let base = Self::materialize(store.take(j)?)?
            .ok_or_else(|| Error::Lifecycle(format!("conv layer {j} has no stored input")))?;
        let mut cur = Some(self.apply(j, &base)?);
        inputs[j] = Some(base);
        for k in j + 1..=i {
            let input = cur.take().expect("segment output");
            if k < i {
                if !matches!(store.take(k)?, Slot::Recompute) {
                    return Err(Error::Lifecycle(format!("layer {k} inside a recompute segment holds data")));
                }
                cur = Some(self.apply(k, &input)?);
            }
            inputs[k] = Some(input);
        }
        Ok(())
    }

    /// Consumes every slot written by [`Network::forward_train`].
    pub fn backward(&self, store: &mut ActivationStore, logits_grad: Tensor, capture: bool) -> Result<BackwardOutput> {
        let n = self.layers.len();
        let mut inputs: Vec<Option<Tensor>> = vec![None; n];
        let mut grads = vec![None; n];
        let mut captures = vec![None; n];
        let mut g = logits_grad;
        for i in (0..n - 1).rev() {
            let x = match inputs[i].take() {
                Some(t) => t,
                None => match Self::materialize(store.take(i)?)? {
                    Some(t) => t,
                    None => {
                        self.recompute_segment(i, store, &mut inputs)?;
                        inputs[i].take().expect("segment filled")
                    }
                },
            };
            g = match self.layers[i] {
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    let weight = conv2d_weight_grad(&x, &g, p.weight.dims(), stride, pad)?;
                    let oc = p.weight.dims()[0];
                    let plane = g.len() / (g.dims()[0] * oc);
                    let mut bias = vec![0.0; oc];
                    for (k, chunk) in g.data().chunks(plane).enumerate() {
                        bias[k % oc] += chunk.iter().sum::<f64>();
                    }
                    grads[i] = Some(LayerParams {
                        weight,
                        bias: Tensor::new(vec![oc], bias)?,
                    });
                    let gx = if i > 0 {
                        Some(conv2d_input_grad(x.dims(), &g, &p.weight, stride, pad)?)
                    } else {
                        None
                    };
                    if capture {
                        captures[i] = Some(ConvCapture {
                            activation: x,
                            loss_grad: g,
                        });
                    }
                    match gx {
                        Some(t) => t,
                        None => break,
                    }
                }
                LayerSpec::FullyConnected { .. } => {
                    let p = self.params[i].as_ref().expect("fc has params");
                    let fg = fc_backward(&x, &g, &p.weight)?;
                    grads[i] = Some(LayerParams {
                        weight: fg.weight,
                        bias: fg.bias,
                    });
                    fg.input
                }
                LayerSpec::Relu => relu_backward(&x, &g)?,
                LayerSpec::MaxPool { window, stride } => {
                    let (_, argmax) = maxpool_forward(&x, window, stride)?;
                    maxpool_backward(&g, &argmax, x.dims())?
                }
                LayerSpec::SoftmaxXent => unreachable!("loss layer is handled by the caller"),
            };
        }
        Ok(BackwardOutput { grads, captures })
    }

    /// Loss and gradients for one batch with everything stored raw.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Option<LayerParams>>)> {
        let mut store = ActivationStore::new(self.layers.len());
        let out = self.forward_train(x, &StoragePolicy::baseline(self.layers.len()), &mut store, false)?;
        let (loss, g) = softmax_xent(&out.logits, labels)?;
        let back = self.backward(&mut store, g, false)?;
        Ok((loss, back.grads))
    }
}

/// Forward of a relu or maxpool layer.
pub fn recompute_cheap(spec: &LayerSpec, input: &Tensor) -> Result<Tensor> {
    match *spec {
        LayerSpec::Relu => Ok(relu_forward(input)),
        LayerSpec::MaxPool { window, stride } => Ok(maxpool_forward(input, window, stride)?.0),
        other => Err(Error::Parameter(format!("{other:?} is not a recomputable layer"))),
    }
}

fn he_uniform(dims: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Result<LayerParams> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    let bias = Tensor::zeros(vec![dims[0]])?;
    Ok(LayerParams {
        weight: Tensor::new(dims, data)?,
        bias,
    })
}

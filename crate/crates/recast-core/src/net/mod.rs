//! Typed blocks and networks: construction, forward evaluation with
//! activation taps, checkpointing, and the next-block rebuild used when a
//! recast shrinks an activation.

mod checkpoint;
mod presets;
mod spec_file;

pub use presets::preset_spec;
pub use spec_file::{format_arch, parse_arch};

use thiserror::Error;

use crate::tensor::{
    xavier_uniform, Mode, ParamId, ParamSet, RngPool, Tape, Tensor, TensorError, ValRef,
};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("channel chain broken at block {index}: expects {expected} input channels, got {found}")]
    ChainMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid block spec: {0}")]
    BadSpec(String),
    #[error("tap index {tap} out of range for {blocks} blocks")]
    TapOutOfRange { tap: usize, blocks: usize },
    #[error("input shape {found:?} does not match network input {expected:?}")]
    InputShape {
        expected: [usize; 3],
        found: Vec<usize>,
    },
    #[error("unknown architecture preset `{0}`")]
    UnknownPreset(String),
    #[error("arch file line {line}: {msg}")]
    ArchParse { line: usize, msg: String },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint header: {0}")]
    HeaderParse(String),
    #[error("checkpoint tensor `{name}` shape mismatch: file says {found:?}, network needs {expected:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Convolution,
    Basic,
    Bottleneck,
    Dense,
    Transition,
    Classifier,
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Convolution => "conv",
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::Dense => "dense",
            BlockKind::Transition => "transition",
            BlockKind::Classifier => "classifier",
        }
    }
}

/// Typed description of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Dense blocks only.
    pub growth_rate: usize,
    pub num_layers: usize,
    pub bottleneck_width: usize,
    pub has_projection_shortcut: bool,
    /// Convolution blocks only: 2x2/2 max pool after the activation
    /// (VGG-style downsampling).
    pub max_pool_after: bool,
    /// Classifier only: width of the optional hidden linear layer.
    pub hidden_dim: usize,
}

impl BlockSpec {
    fn base(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            stride,
            growth_rate: 0,
            num_layers: 0,
            bottleneck_width: 0,
            has_projection_shortcut: false,
            max_pool_after: false,
            hidden_dim: 0,
        }
    }

    pub fn convolution(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::base(BlockKind::Convolution, in_channels, out_channels, stride)
    }

    pub fn basic(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let mut s = Self::base(BlockKind::Basic, in_channels, out_channels, stride);
        s.has_projection_shortcut = in_channels != out_channels || stride != 1;
        s
    }

    pub fn bottleneck(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let mut s = Self::base(BlockKind::Bottleneck, in_channels, out_channels, stride);
        s.has_projection_shortcut = in_channels != out_channels || stride != 1;
        s
    }

    pub fn dense(in_channels: usize, growth_rate: usize, num_layers: usize) -> Self {
        let mut s = Self::base(
            BlockKind::Dense,
            in_channels,
            in_channels + growth_rate * num_layers,
            1,
        );
        s.growth_rate = growth_rate;
        s.num_layers = num_layers;
        s.bottleneck_width = 4;
        s
    }

    pub fn transition(in_channels: usize, out_channels: usize) -> Self {
        Self::base(BlockKind::Transition, in_channels, out_channels, 2)
    }

    pub fn classifier(in_channels: usize, num_classes: usize, hidden_dim: usize) -> Self {
        let mut s = Self::base(BlockKind::Classifier, in_channels, num_classes, 1);
        s.hidden_dim = hidden_dim;
        s
    }

    pub fn with_pool(mut self) -> Self {
        self.max_pool_after = true;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(NetError::BadSpec(format!(
                "{} block must have at least one channel in and out",
                self.kind.name()
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(NetError::BadSpec(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        match self.kind {
            BlockKind::Dense => {
                if self.out_channels != self.in_channels + self.growth_rate * self.num_layers {
                    return Err(NetError::BadSpec(format!(
                        "dense block out_channels {} != in {} + growth {} * layers {}",
                        self.out_channels, self.in_channels, self.growth_rate, self.num_layers
                    )));
                }
                if self.growth_rate == 0 || self.num_layers == 0 {
                    return Err(NetError::BadSpec(
                        "dense block needs growth_rate and num_layers >= 1".into(),
                    ));
                }
            }
            BlockKind::Basic | BlockKind::Bottleneck => {
                if (self.in_channels != self.out_channels || self.stride != 1)
                    && !self.has_projection_shortcut
                {
                    return Err(NetError::BadSpec(format!(
                        "{} block {}->{} stride {} requires a projection shortcut",
                        self.kind.name(),
                        self.in_channels,
                        self.out_channels,
                        self.stride
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Spatial downsampling factor of this block.
    pub fn spatial_divisor(&self) -> usize {
        let mut d = self.stride;
        if self.kind == BlockKind::Transition {
            d = 2; // stride-1 conv then 2x2/2 average pool
        }
        if self.max_pool_after {
            d *= 2;
        }
        d
    }

    /// Convolution layer geometry this spec realizes, in execution order.
    /// Kept next to `Block::build` so the two never drift (asserted in
    /// tests).
    pub fn conv_geometry(&self) -> Vec<ConvGeom> {
        let g = |in_c, out_c, k, stride, padding, at_block_input| ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            padding,
            at_block_input,
        };
        match self.kind {
            BlockKind::Convolution => {
                vec![g(self.in_channels, self.out_channels, 3, self.stride, 1, true)]
            }
            BlockKind::Basic => {
                let mut v = vec![
                    g(self.in_channels, self.out_channels, 3, self.stride, 1, true),
                    g(self.out_channels, self.out_channels, 3, 1, 1, false),
                ];
                if self.has_projection_shortcut {
                    v.push(g(self.in_channels, self.out_channels, 1, self.stride, 0, true));
                }
                v
            }
            BlockKind::Bottleneck => {
                let mid = (self.out_channels / 4).max(1);
                let mut v = vec![
                    g(self.in_channels, mid, 1, 1, 0, true),
                    g(mid, mid, 3, self.stride, 1, true),
                    g(mid, self.out_channels, 1, 1, 0, false),
                ];
                if self.has_projection_shortcut {
                    v.push(g(self.in_channels, self.out_channels, 1, self.stride, 0, true));
                }
                v
            }
            BlockKind::Dense => {
                let inner = self.bottleneck_width * self.growth_rate;
                (0..self.num_layers)
                    .flat_map(|li| {
                        let cur = self.in_channels + li * self.growth_rate;
                        vec![
                            g(cur, inner, 1, 1, 0, true),
                            g(inner, self.growth_rate, 3, 1, 1, true),
                        ]
                    })
                    .collect()
            }
            BlockKind::Transition => {
                vec![g(self.in_channels, self.out_channels, 1, 1, 0, true)]
            }
            BlockKind::Classifier => vec![],
        }
    }

    /// Channel counts of the batch-norm layers this spec realizes.
    pub fn bn_param_channels(&self) -> Vec<usize> {
        match self.kind {
            BlockKind::Convolution => vec![self.out_channels],
            BlockKind::Basic => {
                let mut v = vec![self.out_channels, self.out_channels];
                if self.has_projection_shortcut {
                    v.push(self.out_channels);
                }
                v
            }
            BlockKind::Bottleneck => {
                let mid = (self.out_channels / 4).max(1);
                let mut v = vec![mid, mid, self.out_channels];
                if self.has_projection_shortcut {
                    v.push(self.out_channels);
                }
                v
            }
            BlockKind::Dense => {
                let inner = self.bottleneck_width * self.growth_rate;
                (0..self.num_layers)
                    .flat_map(|li| vec![self.in_channels + li * self.growth_rate, inner])
                    .collect()
            }
            BlockKind::Transition => vec![self.in_channels],
            BlockKind::Classifier => vec![],
        }
    }
}

/// Geometry of one convolution layer inside a block.
///
/// `at_block_input` marks convolutions whose input is the block's input
/// activation (shortcut projections, the pre-stride layers); the rest run
/// on the post-stride spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub at_block_input: bool,
}

/// Rebuild the block after a recast target so dimensions match when the
/// target changed its output width: same spec, reduced input-channel
/// extent. Basic/bottleneck rebuilds force a projection shortcut when the
/// new input no longer matches the output; dense rebuilds shift their
/// concatenated output accordingly.
pub fn rebuild_next_block(source_next: &BlockSpec, new_in_channels: usize) -> BlockSpec {
    assert!(new_in_channels >= 1);
    let mut spec = source_next.clone();
    spec.in_channels = new_in_channels;
    match spec.kind {
        BlockKind::Dense => {
            spec.out_channels = new_in_channels + spec.growth_rate * spec.num_layers;
        }
        BlockKind::Basic | BlockKind::Bottleneck => {
            if new_in_channels != spec.out_channels || spec.stride != 1 {
                spec.has_projection_shortcut = true;
            }
        }
        _ => {}
    }
    spec
}

// ---- realized layers -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn build(
        params: &mut ParamSet,
        rng: &RngPool,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, NetError> {
        let w = xavier_uniform(&[out_c, in_c, k, k], &mut rng.derive(name))?;
        Ok(Self {
            weight: params.push(name, w),
            in_c,
            out_c,
            k,
            stride,
            padding,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &ParamSet,
        x: ValRef,
    ) -> Result<ValRef, TensorError> {
        let w = tape.param(params, self.weight);
        tape.conv2d(x, w, None, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BnLayer {
    fn build(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: params.push(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: params.push(format!("{name}.rmean"), Tensor::zeros(&[channels])),
            running_var: params.push(format!("{name}.rvar"), Tensor::full(&[channels], 1.0)),
            channels,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &mut ParamSet,
        x: ValRef,
        mode: Mode,
    ) -> Result<ValRef, TensorError> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        let (rm, rv) = params.pair_mut(self.running_mean, self.running_var);
        tape.batchnorm2d(x, g, b, rm, rv, mode, BN_MOMENTUM, BN_EPS)
    }

    fn reset_running(&self, params: &mut ParamSet) {
        *params.value_mut(self.running_mean) = Tensor::zeros(&[self.channels]);
        *params.value_mut(self.running_var) = Tensor::full(&[self.channels], 1.0);
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    fn build(
        params: &mut ParamSet,
        rng: &RngPool,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, NetError> {
        let w = xavier_uniform(&[out_dim, in_dim], &mut rng.derive(name))?;
        Ok(Self {
            weight: params.push(format!("{name}.w"), w),
            bias: params.push(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &ParamSet,
        x: ValRef,
    ) -> Result<ValRef, TensorError> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
}

#[derive(Debug, Clone)]
enum BlockBody {
    Convolution {
        conv: ConvLayer,
        bn: BnLayer,
    },
    Basic {
        conv1: ConvLayer,
        bn1: BnLayer,
        conv2: ConvLayer,
        bn2: BnLayer,
        proj: Option<(ConvLayer, BnLayer)>,
    },
    Bottleneck {
        conv1: ConvLayer,
        bn1: BnLayer,
        conv2: ConvLayer,
        bn2: BnLayer,
        conv3: ConvLayer,
        bn3: BnLayer,
        proj: Option<(ConvLayer, BnLayer)>,
    },
    Dense {
        layers: Vec<DenseLayer>,
    },
    Transition {
        bn: BnLayer,
        conv: ConvLayer,
    },
    Classifier {
        hidden: Option<LinearLayer>,
        linear: LinearLayer,
    },
}

/// One realized block: spec plus parameterized layers.
#[derive(Debug, Clone)]
pub struct Block {
    pub spec: BlockSpec,
    body: BlockBody,
}

impl Block {
    /// Instantiate a block with fresh Xavier-initialized parameters pushed
    /// into `params` under the `label` prefix.
    pub fn build(
        spec: &BlockSpec,
        label: &str,
        params: &mut ParamSet,
        rng: &RngPool,
    ) -> Result<Self, NetError> {
        spec.validate()?;
        let body = match spec.kind {
            BlockKind::Convolution => BlockBody::Convolution {
                conv: ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv.w"),
                    spec.in_channels,
                    spec.out_channels,
                    3,
                    spec.stride,
                    1,
                )?,
                bn: BnLayer::build(params, &format!("{label}.bn"), spec.out_channels),
            },
            BlockKind::Basic => {
                let conv1 = ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv1.w"),
                    spec.in_channels,
                    spec.out_channels,
                    3,
                    spec.stride,
                    1,
                )?;
                let bn1 = BnLayer::build(params, &format!("{label}.bn1"), spec.out_channels);
                let conv2 = ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv2.w"),
                    spec.out_channels,
                    spec.out_channels,
                    3,
                    1,
                    1,
                )?;
                let bn2 = BnLayer::build(params, &format!("{label}.bn2"), spec.out_channels);
                let proj = if spec.has_projection_shortcut {
                    Some((
                        ConvLayer::build(
                            params,
                            rng,
                            &format!("{label}.proj.w"),
                            spec.in_channels,
                            spec.out_channels,
                            1,
                            spec.stride,
                            0,
                        )?,
                        BnLayer::build(params, &format!("{label}.projbn"), spec.out_channels),
                    ))
                } else {
                    None
                };
                BlockBody::Basic {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    proj,
                }
            }
            BlockKind::Bottleneck => {
                let mid = (spec.out_channels / 4).max(1);
                let conv1 = ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv1.w"),
                    spec.in_channels,
                    mid,
                    1,
                    1,
                    0,
                )?;
                let bn1 = BnLayer::build(params, &format!("{label}.bn1"), mid);
                let conv2 = ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv2.w"),
                    mid,
                    mid,
                    3,
                    spec.stride,
                    1,
                )?;
                let bn2 = BnLayer::build(params, &format!("{label}.bn2"), mid);
                let conv3 = ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv3.w"),
                    mid,
                    spec.out_channels,
                    1,
                    1,
                    0,
                )?;
                let bn3 = BnLayer::build(params, &format!("{label}.bn3"), spec.out_channels);
                let proj = if spec.has_projection_shortcut {
                    Some((
                        ConvLayer::build(
                            params,
                            rng,
                            &format!("{label}.proj.w"),
                            spec.in_channels,
                            spec.out_channels,
                            1,
                            spec.stride,
                            0,
                        )?,
                        BnLayer::build(params, &format!("{label}.projbn"), spec.out_channels),
                    ))
                } else {
                    None
                };
                BlockBody::Bottleneck {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    conv3,
                    bn3,
                    proj,
                }
            }
            BlockKind::Dense => {
                let mut layers = Vec::with_capacity(spec.num_layers);
                let inner = spec.bottleneck_width * spec.growth_rate;
                for li in 0..spec.num_layers {
                    let cur = spec.in_channels + li * spec.growth_rate;
                    layers.push(DenseLayer {
                        bn1: BnLayer::build(params, &format!("{label}.l{li}.bn1"), cur),
                        conv1: ConvLayer::build(
                            params,
                            rng,
                            &format!("{label}.l{li}.conv1.w"),
                            cur,
                            inner,
                            1,
                            1,
                            0,
                        )?,
                        bn2: BnLayer::build(params, &format!("{label}.l{li}.bn2"), inner),
                        conv2: ConvLayer::build(
                            params,
                            rng,
                            &format!("{label}.l{li}.conv2.w"),
                            inner,
                            spec.growth_rate,
                            3,
                            1,
                            1,
                        )?,
                    });
                }
                BlockBody::Dense { layers }
            }
            BlockKind::Transition => BlockBody::Transition {
                bn: BnLayer::build(params, &format!("{label}.bn"), spec.in_channels),
                conv: ConvLayer::build(
                    params,
                    rng,
                    &format!("{label}.conv.w"),
                    spec.in_channels,
                    spec.out_channels,
                    1,
                    1,
                    0,
                )?,
            },
            BlockKind::Classifier => {
                let hidden = if spec.hidden_dim > 0 {
                    Some(LinearLayer::build(
                        params,
                        rng,
                        &format!("{label}.hidden"),
                        spec.in_channels,
                        spec.hidden_dim,
                    )?)
                } else {
                    None
                };
                let in_dim = if spec.hidden_dim > 0 {
                    spec.hidden_dim
                } else {
                    spec.in_channels
                };
                BlockBody::Classifier {
                    hidden,
                    linear: LinearLayer::build(
                        params,
                        rng,
                        &format!("{label}.fc"),
                        in_dim,
                        spec.out_channels,
                    )?,
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            body,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        params: &mut ParamSet,
        x: ValRef,
        mode: Mode,
    ) -> Result<ValRef, TensorError> {
        match &self.body {
            BlockBody::Convolution { conv, bn } => {
                let y = conv.forward(tape, params, x)?;
                let y = bn.forward(tape, params, y, mode)?;
                let y = tape.relu(y);
                if self.spec.max_pool_after {
                    tape.maxpool(y, 2, 2)
                } else {
                    Ok(y)
                }
            }
            BlockBody::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                proj,
            } => {
                let y = conv1.forward(tape, params, x)?;
                let y = bn1.forward(tape, params, y, mode)?;
                let y = tape.relu(y);
                let y = conv2.forward(tape, params, y)?;
                let y = bn2.forward(tape, params, y, mode)?;
                let shortcut = match proj {
                    Some((pc, pb)) => {
                        let s = pc.forward(tape, params, x)?;
                        pb.forward(tape, params, s, mode)?
                    }
                    None => x,
                };
                let y = tape.add(y, shortcut)?;
                Ok(tape.relu(y))
            }
            BlockBody::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                proj,
            } => {
                let y = conv1.forward(tape, params, x)?;
                let y = bn1.forward(tape, params, y, mode)?;
                let y = tape.relu(y);
                let y = conv2.forward(tape, params, y)?;
                let y = bn2.forward(tape, params, y, mode)?;
                let y = tape.relu(y);
                let y = conv3.forward(tape, params, y)?;
                let y = bn3.forward(tape, params, y, mode)?;
                let shortcut = match proj {
                    Some((pc, pb)) => {
                        let s = pc.forward(tape, params, x)?;
                        pb.forward(tape, params, s, mode)?
                    }
                    None => x,
                };
                let y = tape.add(y, shortcut)?;
                Ok(tape.relu(y))
            }
            BlockBody::Dense { layers } => {
                let mut running = x;
                for l in layers {
                    let y = l.bn1.forward(tape, params, running, mode)?;
                    let y = tape.relu(y);
                    let y = l.conv1.forward(tape, params, y)?;
                    let y = l.bn2.forward(tape, params, y, mode)?;
                    let y = tape.relu(y);
                    let y = l.conv2.forward(tape, params, y)?;
                    running = tape.concat_channels(&[running, y])?;
                }
                Ok(running)
            }
            BlockBody::Transition { bn, conv } => {
                let y = bn.forward(tape, params, x, mode)?;
                let y = tape.relu(y);
                let y = conv.forward(tape, params, y)?;
                tape.avgpool(y, 2, 2)
            }
            BlockBody::Classifier { hidden, linear } => {
                let mut y = tape.global_avgpool(x)?;
                if let Some(h) = hidden {
                    y = h.forward(tape, params, y)?;
                    y = tape.relu(y);
                }
                linear.forward(tape, params, y)
            }
        }
    }

    /// (canonical role name, id) pairs in a stable order; includes batch
    /// norm running statistics.
    pub fn tensors(&self, params: &ParamSet) -> Vec<(String, ParamId)> {
        let mut out = Vec::new();
        let push_conv = |out: &mut Vec<(String, ParamId)>, c: &ConvLayer| {
            out.push((params.param(c.weight).name.clone(), c.weight));
        };
        let push_bn = |out: &mut Vec<(String, ParamId)>, b: &BnLayer| {
            for id in [b.gamma, b.beta, b.running_mean, b.running_var] {
                out.push((params.param(id).name.clone(), id));
            }
        };
        let push_linear = |out: &mut Vec<(String, ParamId)>, l: &LinearLayer| {
            out.push((params.param(l.weight).name.clone(), l.weight));
            out.push((params.param(l.bias).name.clone(), l.bias));
        };
        match &self.body {
            BlockBody::Convolution { conv, bn } => {
                push_conv(&mut out, conv);
                push_bn(&mut out, bn);
            }
            BlockBody::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                proj,
            } => {
                push_conv(&mut out, conv1);
                push_bn(&mut out, bn1);
                push_conv(&mut out, conv2);
                push_bn(&mut out, bn2);
                if let Some((pc, pb)) = proj {
                    push_conv(&mut out, pc);
                    push_bn(&mut out, pb);
                }
            }
            BlockBody::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                proj,
            } => {
                push_conv(&mut out, conv1);
                push_bn(&mut out, bn1);
                push_conv(&mut out, conv2);
                push_bn(&mut out, bn2);
                push_conv(&mut out, conv3);
                push_bn(&mut out, bn3);
                if let Some((pc, pb)) = proj {
                    push_conv(&mut out, pc);
                    push_bn(&mut out, pb);
                }
            }
            BlockBody::Dense { layers } => {
                for l in layers {
                    push_bn(&mut out, &l.bn1);
                    push_conv(&mut out, &l.conv1);
                    push_bn(&mut out, &l.bn2);
                    push_conv(&mut out, &l.conv2);
                }
            }
            BlockBody::Transition { bn, conv } => {
                push_bn(&mut out, bn);
                push_conv(&mut out, conv);
            }
            BlockBody::Classifier { hidden, linear } => {
                if let Some(h) = hidden {
                    push_linear(&mut out, h);
                }
                push_linear(&mut out, linear);
            }
        }
        out
    }

    /// Trainable parameter ids (weights plus batch norm affine, without
    /// running statistics).
    pub fn trainable(&self, params: &ParamSet) -> Vec<ParamId> {
        self.tensors(params)
            .into_iter()
            .filter(|(name, _)| !name.ends_with(".rmean") && !name.ends_with(".rvar"))
            .map(|(_, id)| id)
            .collect()
    }

    /// Reset every batch-norm running statistic in the block.
    pub fn reset_bn_stats(&self, params: &mut ParamSet) {
        let mut bns: Vec<BnLayer> = Vec::new();
        match &self.body {
            BlockBody::Convolution { bn, .. } => bns.push(bn.clone()),
            BlockBody::Basic { bn1, bn2, proj, .. } => {
                bns.push(bn1.clone());
                bns.push(bn2.clone());
                if let Some((_, pb)) = proj {
                    bns.push(pb.clone());
                }
            }
            BlockBody::Bottleneck {
                bn1,
                bn2,
                bn3,
                proj,
                ..
            } => {
                bns.push(bn1.clone());
                bns.push(bn2.clone());
                bns.push(bn3.clone());
                if let Some((_, pb)) = proj {
                    bns.push(pb.clone());
                }
            }
            BlockBody::Dense { layers } => {
                for l in layers {
                    bns.push(l.bn1.clone());
                    bns.push(l.bn2.clone());
                }
            }
            BlockBody::Transition { bn, .. } => bns.push(bn.clone()),
            BlockBody::Classifier { .. } => {}
        }
        for bn in bns {
            bn.reset_running(params);
        }
    }

    /// Enumerate the convolution layers with their geometry, for cost
    /// accounting: (in_c, out_c, k, stride, padding).
    pub fn conv_descs(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let d = |c: &ConvLayer| (c.in_c, c.out_c, c.k, c.stride, c.padding);
        match &self.body {
            BlockBody::Convolution { conv, .. } => vec![d(conv)],
            BlockBody::Basic {
                conv1, conv2, proj, ..
            } => {
                let mut v = vec![d(conv1), d(conv2)];
                if let Some((pc, _)) = proj {
                    v.push(d(pc));
                }
                v
            }
            BlockBody::Bottleneck {
                conv1,
                conv2,
                conv3,
                proj,
                ..
            } => {
                let mut v = vec![d(conv1), d(conv2), d(conv3)];
                if let Some((pc, _)) = proj {
                    v.push(d(pc));
                }
                v
            }
            BlockBody::Dense { layers } => layers
                .iter()
                .flat_map(|l| vec![d(&l.conv1), d(&l.conv2)])
                .collect(),
            BlockBody::Transition { conv, .. } => vec![d(conv)],
            BlockBody::Classifier { .. } => vec![],
        }
    }

    /// Linear layers as (in_dim, out_dim).
    pub fn linear_descs(&self) -> Vec<(usize, usize)> {
        match &self.body {
            BlockBody::Classifier { hidden, linear } => {
                let mut v = Vec::new();
                if let Some(h) = hidden {
                    v.push((h.in_dim, h.out_dim));
                }
                v.push((linear.in_dim, linear.out_dim));
                v
            }
            _ => vec![],
        }
    }

    /// Batch-norm channel counts (each contributes gamma+beta parameters).
    pub fn bn_channels(&self) -> Vec<usize> {
        match &self.body {
            BlockBody::Convolution { bn, .. } => vec![bn.channels],
            BlockBody::Basic { bn1, bn2, proj, .. } => {
                let mut v = vec![bn1.channels, bn2.channels];
                if let Some((_, pb)) = proj {
                    v.push(pb.channels);
                }
                v
            }
            BlockBody::Bottleneck {
                bn1,
                bn2,
                bn3,
                proj,
                ..
            } => {
                let mut v = vec![bn1.channels, bn2.channels, bn3.channels];
                if let Some((_, pb)) = proj {
                    v.push(pb.channels);
                }
                v
            }
            BlockBody::Dense { layers } => layers
                .iter()
                .flat_map(|l| vec![l.bn1.channels, l.bn2.channels])
                .collect(),
            BlockBody::Transition { bn, .. } => vec![bn.channels],
            BlockBody::Classifier { .. } => vec![],
        }
    }
}

// ---- network ---------------------------------------------------------------

/// Architecture description: stem, block chain, classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// (C, H, W) of a single input image.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub classifier_hidden: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.blocks.is_empty() {
            return Err(NetError::BadSpec("network needs at least one block".into()));
        }
        let mut expected = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != expected {
                return Err(NetError::ChainMismatch {
                    index: i,
                    expected,
                    found: b.in_channels,
                });
            }
            expected = b.out_channels;
        }
        Ok(())
    }

    pub fn classifier_spec(&self) -> BlockSpec {
        BlockSpec::classifier(
            self.blocks.last().map(|b| b.out_channels).unwrap_or(1),
            self.num_classes,
            self.classifier_hidden,
        )
    }
}

/// Ordered sequence of blocks plus stem and classifier; the unit of
/// recasting.
#[derive(Debug, Clone)]
pub struct Network {
    pub params: ParamSet,
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    pub blocks: Vec<Block>,
    pub classifier: Block,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Monotone counter so replacement blocks get unique parameter names.
    rebuild_counter: u32,
}

impl Network {
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let rng = RngPool::new(seed);
        let mut params = ParamSet::new();
        let stem_conv = ConvLayer::build(
            &mut params,
            &rng,
            "stem.conv.w",
            spec.input_shape[0],
            spec.stem_channels,
            3,
            1,
            1,
        )?;
        let stem_bn = BnLayer::build(&mut params, "stem.bn", spec.stem_channels);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, bs) in spec.blocks.iter().enumerate() {
            blocks.push(Block::build(bs, &format!("block{i}"), &mut params, &rng)?);
        }
        let classifier = Block::build(&spec.classifier_spec(), "classifier", &mut params, &rng)?;
        Ok(Self {
            params,
            stem_conv,
            stem_bn,
            blocks,
            classifier,
            input_shape: spec.input_shape,
            num_classes: spec.num_classes,
            stem_channels: spec.stem_channels,
            rebuild_counter: 0,
        })
    }

    /// Build a named preset or an explicit spec.
    pub fn preset(name: &str, num_classes: usize, seed: u64) -> Result<Self, NetError> {
        Self::build(&preset_spec(name, num_classes)?, seed)
    }

    pub fn spec(&self) -> NetSpec {
        NetSpec {
            input_shape: self.input_shape,
            stem_channels: self.stem_channels,
            blocks: self.blocks.iter().map(|b| b.spec.clone()).collect(),
            num_classes: self.num_classes,
            classifier_hidden: self.classifier.spec.hidden_dim,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_input(&self, input: &Tensor<f32>) -> Result<(), NetError> {
        let s = input.shape();
        if s.len() != 4 || s[1] != self.input_shape[0] || s[2] != self.input_shape[1] || s[3] != self.input_shape[2]
        {
            return Err(NetError::InputShape {
                expected: self.input_shape,
                found: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Full forward pass. Taps select block indices whose output
    /// activations (the tensors flowing between blocks) are returned
    /// alongside the logits.
    pub fn forward(
        &mut self,
        tape: &mut Tape<f32>,
        input: Tensor<f32>,
        mode: Mode,
        taps: &[usize],
    ) -> Result<(ValRef, Vec<ValRef>), NetError> {
        self.check_input(&input)?;
        for &t in taps {
            if t >= self.blocks.len() {
                return Err(NetError::TapOutOfRange {
                    tap: t,
                    blocks: self.blocks.len(),
                });
            }
        }
        let x = tape.leaf(input);
        let mut cur = self.stem_forward(tape, x, mode)?;
        let mut tapped = vec![None; taps.len()];
        let Network { params, blocks, .. } = self;
        for (i, b) in blocks.iter().enumerate() {
            cur = b.forward(tape, params, cur, mode)?;
            for (ti, &t) in taps.iter().enumerate() {
                if t == i {
                    tapped[ti] = Some(cur);
                }
            }
        }
        let logits = self.classifier.forward(tape, &mut self.params, cur, mode)?;
        Ok((logits, tapped.into_iter().map(|t| t.unwrap()).collect()))
    }

    fn stem_forward(
        &mut self,
        tape: &mut Tape<f32>,
        x: ValRef,
        mode: Mode,
    ) -> Result<ValRef, NetError> {
        let y = self.stem_conv.forward(tape, &self.params, x)?;
        let y = self.stem_bn.forward(tape, &mut self.params, y, mode)?;
        Ok(tape.relu(y))
    }

    /// Stem plus blocks `0..=last_block`; returns that block's output.
    pub fn forward_upto(
        &mut self,
        tape: &mut Tape<f32>,
        input: Tensor<f32>,
        last_block: usize,
        mode: Mode,
    ) -> Result<ValRef, NetError> {
        self.check_input(&input)?;
        let x = tape.leaf(input);
        let mut cur = self.stem_forward(tape, x, mode)?;
        let Network { params, blocks, .. } = self;
        for b in blocks.iter().take(last_block + 1) {
            cur = b.forward(tape, params, cur, mode)?;
        }
        Ok(cur)
    }

    /// Classifier head on an arbitrary activation.
    pub fn forward_classifier(
        &mut self,
        tape: &mut Tape<f32>,
        x: ValRef,
        mode: Mode,
    ) -> Result<ValRef, NetError> {
        Ok(self.classifier.forward(tape, &mut self.params, x, mode)?)
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&mut self, input: Tensor<f32>) -> Result<Tensor<f32>, NetError> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, input, Mode::Eval, &[])?;
        Ok(tape.value(logits).clone())
    }

    /// All tensors (stem, blocks, classifier) in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, ParamId)> {
        let mut out = vec![(
            self.params.param(self.stem_conv.weight).name.clone(),
            self.stem_conv.weight,
        )];
        for id in [
            self.stem_bn.gamma,
            self.stem_bn.beta,
            self.stem_bn.running_mean,
            self.stem_bn.running_var,
        ] {
            out.push((self.params.param(id).name.clone(), id));
        }
        for b in &self.blocks {
            out.extend(b.tensors(&self.params));
        }
        out.extend(self.classifier.tensors(&self.params));
        out
    }

    /// Trainable ids for the whole network.
    pub fn trainable_all(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem_conv.weight, self.stem_bn.gamma, self.stem_bn.beta];
        for b in &self.blocks {
            ids.extend(b.trainable(&self.params));
        }
        ids.extend(self.classifier.trainable(&self.params));
        ids
    }

    /// Trainable ids of one block.
    pub fn trainable_block(&self, index: usize) -> Vec<ParamId> {
        self.blocks[index].trainable(&self.params)
    }

    pub fn trainable_classifier(&self) -> Vec<ParamId> {
        self.classifier.trainable(&self.params)
    }

    /// Replace block `index` with a freshly initialized block of the given
    /// spec. The old block's parameters stay in the arena but are no
    /// longer referenced.
    pub fn replace_block(
        &mut self,
        index: usize,
        spec: &BlockSpec,
        rng: &RngPool,
    ) -> Result<(), NetError> {
        self.rebuild_counter += 1;
        let label = format!("block{index}.r{}", self.rebuild_counter);
        let block = Block::build(spec, &label, &mut self.params, rng)?;
        self.blocks[index] = block;
        Ok(())
    }

    /// Replace the classifier with a freshly initialized one reading
    /// `in_channels` features.
    pub fn replace_classifier(
        &mut self,
        in_channels: usize,
        rng: &RngPool,
    ) -> Result<(), NetError> {
        self.rebuild_counter += 1;
        let label = format!("classifier.r{}", self.rebuild_counter);
        let spec = BlockSpec::classifier(
            in_channels,
            self.num_classes,
            self.classifier.spec.hidden_dim,
        );
        self.classifier = Block::build(&spec, &label, &mut self.params, rng)?;
        Ok(())
    }

    /// Copy all tensor values of a structurally identical source block
    /// into block `index` of self.
    pub fn copy_block_params_from(&mut self, index: usize, src: &Network, src_index: usize) {
        let dst_ids = self.blocks[index].tensors(&self.params);
        let src_ids = src.blocks[src_index].tensors(&src.params);
        assert_eq!(dst_ids.len(), src_ids.len(), "block structure mismatch");
        for ((_, d), (_, s)) in dst_ids.iter().zip(&src_ids) {
            let sv = src.params.value(*s).clone();
            assert_eq!(self.params.value(*d).shape(), sv.shape());
            *self.params.value_mut(*d) = sv;
        }
    }

    /// Copy classifier tensors from a structurally identical network.
    pub fn copy_classifier_params_from(&mut self, src: &Network) {
        let dst_ids = self.classifier.tensors(&self.params);
        let src_ids = src.classifier.tensors(&src.params);
        assert_eq!(dst_ids.len(), src_ids.len());
        for ((_, d), (_, s)) in dst_ids.iter().zip(&src_ids) {
            *self.params.value_mut(*d) = src.params.value(*s).clone();
        }
    }

    /// Serialized little-endian bytes of every tensor in canonical order
    /// (used for bit-exactness assertions).
    pub fn tensor_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, id) in self.named_tensors() {
            for v in self.params.value(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), NetError> {
        checkpoint::save(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NetError> {
        checkpoint::load(path.as_ref())
    }
}

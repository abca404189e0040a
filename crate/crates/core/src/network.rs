//! Layer-list networks, forward execution, and the linearization transform.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running-statistic momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// Examples per chunk when a convenience method runs a large input.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 1×1 convolution on a residual skip path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    AvgPool {
        window: usize,
    },
    Flatten,
    ResidualStart,
    ResidualEnd {
        projection: Option<Projection>,
    },
}

impl LayerKind {
    /// Whether the layer computes a non-affine function of its input.
    pub fn is_nonlinear(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::BatchNorm { .. } | LayerKind::MaxPool { .. }
        )
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerKind::BatchNorm { channels } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerKind::ResidualEnd { projection: Some(p) } => vec![
                ("proj.weight", vec![p.out_channels, p.in_channels, 1, 1]),
                ("proj.bias", vec![p.out_channels]),
            ],
            _ => Vec::new(),
        }
    }

    fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::BatchNorm { channels } => {
                vec![("running_mean", vec![channels]), ("running_var", vec![channels])]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Bookkeeping carried into checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Image { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

/// The recorded forward pass of one batch.
#[derive(Debug)]
pub struct Trace {
    pub logits: Var,
    /// Input of the final dense layer.
    pub features: Var,
    /// One variable per network parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
    batch_stats: Vec<(usize, BatchStats)>,
}

impl Trace {
    pub fn has_batch_stats(&self) -> bool {
        !self.batch_stats.is_empty()
    }
}

/// An ordered stack of layers mapping `C×H×W` images to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dims: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Parameter>,
    buffers: Vec<Parameter>,
    mode: Mode,
    pub meta: TrainingMeta,
}

impl Network {
    /// Builds a network and draws its parameters from `seed`.
    ///
    /// Weights and biases follow `U(−1/√fan_in, 1/√fan_in)`; batch norm starts
    /// at the identity.
    pub fn new(input_dims: [usize; 3], num_classes: usize, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate(input_dims, num_classes, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for layer in &layers {
            for (suffix, shape) in layer.kind.param_shapes() {
                params.push(Parameter {
                    name: format!("{}.{suffix}", layer.name),
                    tensor: init_tensor(&layer.kind, suffix, shape, &mut rng),
                });
            }
            for (suffix, shape) in layer.kind.buffer_shapes() {
                let fill = if suffix == "running_var" { 1.0 } else { 0.0 };
                buffers.push(Parameter {
                    name: format!("{}.{suffix}", layer.name),
                    tensor: Tensor::full(shape, fill),
                });
            }
        }
        Ok(Self {
            input_dims,
            num_classes,
            layers,
            params,
            buffers,
            mode: Mode::Train,
            meta: TrainingMeta::default(),
        })
    }

    /// Assembles a network from existing parameter values (checkpoint load).
    pub fn from_parts(
        input_dims: [usize; 3],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        mut named: Vec<Parameter>,
        mode: Mode,
        meta: TrainingMeta,
    ) -> Result<Self> {
        validate(input_dims, num_classes, &layers)?;
        let mut take = |name: String, shape: Vec<usize>| -> Result<Parameter> {
            let pos = named
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
            let p = named.swap_remove(pos);
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", p.tensor.shape(), &shape));
            }
            Ok(p)
        };
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for layer in &layers {
            for (suffix, shape) in layer.kind.param_shapes() {
                params.push(take(format!("{}.{suffix}", layer.name), shape)?);
            }
            for (suffix, shape) in layer.kind.buffer_shapes() {
                buffers.push(take(format!("{}.{suffix}", layer.name), shape)?);
            }
        }
        if let Some(extra) = named.first() {
            return Err(Error::contract(format!("unexpected parameter `{}`", extra.name)));
        }
        Ok(Self {
            input_dims,
            num_classes,
            layers,
            params,
            buffers,
            mode,
            meta,
        })
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    /// Flattened input size.
    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Parameter] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Name of the first non-linear layer, if any.
    pub fn first_nonlinear(&self) -> Option<&str> {
        self.layers
            .iter()
            .find(|l| l.kind.is_nonlinear())
            .map(|l| l.name.as_str())
    }

    pub fn is_linear(&self) -> bool {
        self.first_nonlinear().is_none()
    }

    /// Dimension of the feature tap (input of the final dense layer).
    pub fn feature_dim(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense { inputs, .. }) => *inputs,
            _ => unreachable!("validated networks end in a dense layer"),
        }
    }

    /// Records a forward pass of `x` on `tape`.
    ///
    /// `semantics` selects batch statistics ([`Mode::Train`]) or running
    /// statistics ([`Mode::Eval`]) for batch norm, independently of the
    /// network's own mode. No network state changes here; see
    /// [`Network::apply_batch_stats`].
    pub fn trace(&self, tape: &mut Tape, x: Var, semantics: Mode, params_grad: bool) -> Result<Trace> {
        let xs = tape.value(x)?.shape().to_vec();
        if xs.len() != 4 || xs[1..] != self.input_dims {
            let mut want = vec![xs.first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.input_dims);
            return Err(Error::shape("network input", &xs, &want));
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), params_grad))
            .collect();
        let mut next_param = params.iter().copied();
        let mut next_buffer = 0usize;
        let mut batch_stats = Vec::new();
        let mut skips: Vec<Var> = Vec::new();
        let mut h = x;
        let mut features = x;
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut p = || next_param.next().expect("parameter count checked at build");
            h = match &layer.kind {
                LayerKind::Dense { .. } => {
                    if idx == last {
                        features = h;
                    }
                    let (w, b) = (p(), p());
                    tape.linear(h, w, b)?
                }
                &LayerKind::Conv { stride, padding, .. } => {
                    let (w, b) = (p(), p());
                    tape.conv2d(h, w, Some(b), stride, padding)?
                }
                LayerKind::BatchNorm { .. } => {
                    let (g, b) = (p(), p());
                    let (mean_idx, var_idx) = (next_buffer, next_buffer + 1);
                    next_buffer += 2;
                    let stats = match semantics {
                        Mode::Train => NormStats::Batch,
                        Mode::Eval => NormStats::Running {
                            mean: self.buffers[mean_idx].tensor.data(),
                            var: self.buffers[var_idx].tensor.data(),
                        },
                    };
                    let (y, measured) = tape.batch_norm(h, g, b, stats)?;
                    if let Some(m) = measured {
                        batch_stats.push((mean_idx, m));
                    }
                    y
                }
                LayerKind::Relu => tape.relu(h)?,
                &LayerKind::MaxPool { window } => tape.max_pool2d(h, window)?,
                &LayerKind::AvgPool { window } => tape.avg_pool2d(h, window)?,
                LayerKind::Flatten => tape.flatten(h)?,
                LayerKind::ResidualStart => {
                    skips.push(h);
                    h
                }
                LayerKind::ResidualEnd { projection } => {
                    let skip = skips.pop().expect("residual nesting checked at build");
                    let skip = match projection {
                        Some(proj) => {
                            let (w, b) = (p(), p());
                            tape.conv2d(skip, w, Some(b), proj.stride, 0)?
                        }
                        None => skip,
                    };
                    tape.add(h, skip)?
                }
            };
        }
        Ok(Trace {
            logits: h,
            features,
            params,
            batch_stats,
        })
    }

    /// Folds batch statistics measured in a train-mode trace into the
    /// running estimates.
    pub fn apply_batch_stats(&mut self, trace: &Trace) {
        for (mean_idx, stats) in &trace.batch_stats {
            let m = BN_MOMENTUM;
            for (r, v) in self.buffers[*mean_idx].tensor.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.buffers[mean_idx + 1]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&stats.var_unbiased)
            {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Forward pass honouring the network's mode; train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let trace = self.trace(&mut tape, x, self.mode, false)?;
        self.apply_batch_stats(&trace);
        Ok(tape.value(trace.logits)?.clone())
    }

    /// Eval-semantics logits; a pure function of parameters and input.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.eval_tap(batch, |t| t.logits)
    }

    /// Eval-semantics features (input of the final dense layer).
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        self.eval_tap(batch, |t| t.features)
    }

    /// Eval-semantics arg-max class per example (ties go to the lower index).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.infer(batch)?;
        Ok(argmax_rows(&logits))
    }

    fn eval_tap(&self, batch: &Tensor, pick: impl Fn(&Trace) -> Var) -> Result<Tensor> {
        let n = batch.shape().first().copied().unwrap_or(0);
        let inner = batch.numel() / n.max(1);
        let mut rows = Vec::new();
        let mut width = 0;
        let mut tape = Tape::new();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = batch.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, batch.data()[start * inner..end * inner].to_vec())?;
            tape.reset();
            let x = tape.leaf(chunk, false);
            let trace = self.trace(&mut tape, x, Mode::Eval, false)?;
            let out = tape.value(pick(&trace))?;
            width = out.numel() / (end - start);
            rows.extend_from_slice(out.data());
        }
        if n == 0 {
            return Err(Error::Empty("network input batch"));
        }
        Tensor::new(vec![n, width], rows)
    }

    /// The linear sub-network: ReLU and batch norm removed, max pooling
    /// replaced by average pooling over the same window. Parameters are deep
    /// copies; the result is in eval mode.
    pub fn linearize(&self) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Relu | LayerKind::BatchNorm { .. } => {}
                &LayerKind::MaxPool { window } => {
                    layers.push(LayerSpec::new(layer.name.clone(), LayerKind::AvgPool { window }));
                }
                LayerKind::Dense { .. }
                | LayerKind::Conv { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::Flatten
                | LayerKind::ResidualStart
                | LayerKind::ResidualEnd { .. } => layers.push(layer.clone()),
            }
        }
        let kept: Vec<Parameter> = self
            .params
            .iter()
            .filter(|p| {
                layers
                    .iter()
                    .any(|l| p.name.strip_prefix(&l.name).is_some_and(|s| s.starts_with('.')))
            })
            .cloned()
            .collect();
        let mut net = Network::from_parts(
            self.input_dims,
            self.num_classes,
            layers,
            kept,
            Mode::Eval,
            self.meta.clone(),
        )
        .map_err(|e| Error::Linearize(e.to_string()))?;
        net.mode = Mode::Eval;
        Ok(net)
    }

    /// Replaces the final dense layer with a freshly drawn one of
    /// `num_classes` outputs.
    pub fn replace_head(&self, num_classes: usize, seed: u64) -> Result<Network> {
        let mut layers = self.layers.clone();
        let head = layers.last_mut().expect("validated networks are non-empty");
        let LayerKind::Dense { inputs, .. } = head.kind else {
            unreachable!("validated networks end in a dense layer");
        };
        head.kind = LayerKind::Dense {
            inputs,
            outputs: num_classes,
        };
        let head = head.clone();
        validate(self.input_dims, num_classes, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Parameter> = self
            .params
            .iter()
            .filter(|p| !p.name.starts_with(&format!("{}.", head.name)))
            .cloned()
            .collect();
        for (suffix, shape) in head.kind.param_shapes() {
            params.push(Parameter {
                name: format!("{}.{suffix}", head.name),
                tensor: init_tensor(&head.kind, suffix, shape, &mut rng),
            });
        }
        let mut net = Network::from_parts(
            self.input_dims,
            num_classes,
            layers,
            params.into_iter().chain(self.buffers.iter().cloned()).collect(),
            self.mode,
            self.meta.clone(),
        )?;
        net.mode = self.mode;
        Ok(net)
    }

    /// Text descriptor of the architecture, mode and training metadata.
    pub fn descriptor(&self) -> String {
        let mut s = String::from("hprobe-arch 1\n");
        let [c, h, w] = self.input_dims;
        let _ = writeln!(s, "input {c} {h} {w}");
        let _ = writeln!(s, "classes {}", self.num_classes);
        let mode = match self.mode {
            Mode::Train => "train",
            Mode::Eval => "eval",
        };
        let _ = writeln!(s, "mode {mode}");
        let _ = writeln!(s, "meta epoch {}", self.meta.epoch);
        let _ = writeln!(s, "meta seed {}", self.meta.seed);
        let _ = writeln!(s, "meta config_hash {}", self.meta.config_hash);
        for layer in &self.layers {
            let _ = write!(s, "layer {} ", layer.name);
            let _ = match &layer.kind {
                LayerKind::Dense { inputs, outputs } => writeln!(s, "dense {inputs} {outputs}"),
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => writeln!(s, "conv {in_channels} {out_channels} {kernel} {stride} {padding}"),
                LayerKind::BatchNorm { channels } => writeln!(s, "batchnorm {channels}"),
                LayerKind::Relu => writeln!(s, "relu"),
                LayerKind::MaxPool { window } => writeln!(s, "maxpool {window}"),
                LayerKind::AvgPool { window } => writeln!(s, "avgpool {window}"),
                LayerKind::Flatten => writeln!(s, "flatten"),
                LayerKind::ResidualStart => writeln!(s, "residual_start"),
                LayerKind::ResidualEnd { projection: None } => writeln!(s, "residual_end"),
                LayerKind::ResidualEnd { projection: Some(p) } => {
                    writeln!(s, "residual_end {} {} {}", p.in_channels, p.out_channels, p.stride)
                }
            };
        }
        s
    }
}

/// Parsed architecture descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub input_dims: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub mode: Mode,
    pub meta: TrainingMeta,
}

pub fn parse_descriptor(text: &str) -> Result<Descriptor> {
    let bad = |line: &str| Error::contract(format!("bad descriptor line `{line}`"));
    let mut lines = text.lines();
    if lines.next() != Some("hprobe-arch 1") {
        return Err(Error::contract("unknown architecture descriptor version"));
    }
    let mut input = None;
    let mut classes = None;
    let mut mode = Mode::Eval;
    let mut meta = TrainingMeta::default();
    let mut layers = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> { tok.get(i).and_then(|t| t.parse().ok()).ok_or_else(|| bad(line)) };
        match tok[0] {
            "input" => input = Some([num(1)?, num(2)?, num(3)?]),
            "classes" => classes = Some(num(1)?),
            "mode" => {
                mode = match tok.get(1) {
                    Some(&"train") => Mode::Train,
                    Some(&"eval") => Mode::Eval,
                    _ => return Err(bad(line)),
                }
            }
            "meta" => match (tok.get(1), tok.get(2)) {
                (Some(&"epoch"), _) => meta.epoch = num(2)?,
                (Some(&"seed"), Some(v)) => meta.seed = v.parse().map_err(|_| bad(line))?,
                (Some(&"seed"), None) => return Err(bad(line)),
                (Some(&"config_hash"), v) => meta.config_hash = v.unwrap_or(&"").to_string(),
                _ => return Err(bad(line)),
            },
            "layer" => {
                let name = tok.get(1).ok_or_else(|| bad(line))?.to_string();
                let kind = match tok.get(2).copied() {
                    Some("dense") => LayerKind::Dense {
                        inputs: num(3)?,
                        outputs: num(4)?,
                    },
                    Some("conv") => LayerKind::Conv {
                        in_channels: num(3)?,
                        out_channels: num(4)?,
                        kernel: num(5)?,
                        stride: num(6)?,
                        padding: num(7)?,
                    },
                    Some("batchnorm") => LayerKind::BatchNorm { channels: num(3)? },
                    Some("relu") => LayerKind::Relu,
                    Some("maxpool") => LayerKind::MaxPool { window: num(3)? },
                    Some("avgpool") => LayerKind::AvgPool { window: num(3)? },
                    Some("flatten") => LayerKind::Flatten,
                    Some("residual_start") => LayerKind::ResidualStart,
                    Some("residual_end") if tok.len() == 3 => LayerKind::ResidualEnd { projection: None },
                    Some("residual_end") => LayerKind::ResidualEnd {
                        projection: Some(Projection {
                            in_channels: num(3)?,
                            out_channels: num(4)?,
                            stride: num(5)?,
                        }),
                    },
                    _ => return Err(bad(line)),
                };
                layers.push(LayerSpec { name, kind });
            }
            _ => return Err(bad(line)),
        }
    }
    Ok(Descriptor {
        input_dims: input.ok_or_else(|| Error::contract("descriptor lacks `input`"))?,
        num_classes: classes.ok_or_else(|| Error::contract("descriptor lacks `classes`"))?,
        layers,
        mode,
        meta,
    })
}

/// Checks that consecutive layer shapes compose and the network ends in a
/// `num_classes`-way dense layer.
fn validate(input_dims: [usize; 3], num_classes: usize, layers: &[LayerSpec]) -> Result<()> {
    let [c, h, w] = input_dims;
    if c == 0 || h == 0 || w == 0 || num_classes == 0 {
        return Err(Error::contract("input dims and class count must be positive"));
    }
    let mut names = std::collections::HashSet::new();
    for l in layers {
        if l.name.is_empty() || l.name.contains(char::is_whitespace) || !names.insert(l.name.as_str()) {
            return Err(Error::contract(format!(
                "layer name `{}` is empty, has whitespace or repeats",
                l.name
            )));
        }
    }
    let mismatch = |l: &LayerSpec, got: &ActShape| {
        Error::contract(format!(
            "layer `{}` does not accept input of shape {:?}",
            l.name,
            got.dims()
        ))
    };
    let mut shape = ActShape::Image { c, h, w };
    let mut skips = Vec::new();
    for layer in layers {
        shape = match (&layer.kind, shape) {
            (&LayerKind::Dense { inputs, outputs }, ActShape::Flat(n)) if n == inputs && outputs > 0 => {
                ActShape::Flat(outputs)
            }
            (
                &LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                ActShape::Image { c, h, w },
            ) if c == in_channels
                && stride >= 1
                && kernel >= 1
                && out_channels >= 1
                && h + 2 * padding >= kernel
                && w + 2 * padding >= kernel =>
            {
                ActShape::Image {
                    c: out_channels,
                    h: (h + 2 * padding - kernel) / stride + 1,
                    w: (w + 2 * padding - kernel) / stride + 1,
                }
            }
            (&LayerKind::BatchNorm { channels }, s @ ActShape::Image { c, .. }) if c == channels => s,
            (&LayerKind::BatchNorm { channels }, s @ ActShape::Flat(n)) if n == channels => s,
            (LayerKind::Relu, s) => s,
            (&LayerKind::MaxPool { window } | &LayerKind::AvgPool { window }, ActShape::Image { c, h, w })
                if window >= 1 && h % window == 0 && w % window == 0 =>
            {
                ActShape::Image {
                    c,
                    h: h / window,
                    w: w / window,
                }
            }
            (LayerKind::Flatten, s) => ActShape::Flat(s.dims().iter().product()),
            (LayerKind::ResidualStart, s) => {
                skips.push(s);
                s
            }
            (LayerKind::ResidualEnd { projection }, s) => {
                let skip = skips.pop().ok_or_else(|| {
                    Error::contract(format!(
                        "`{}` closes a residual block that was never opened",
                        layer.name
                    ))
                })?;
                let skip = match (projection, skip) {
                    (None, sk) => sk,
                    (Some(p), ActShape::Image { c, h, w }) if c == p.in_channels && p.stride >= 1 => ActShape::Image {
                        c: p.out_channels,
                        h: (h - 1) / p.stride + 1,
                        w: (w - 1) / p.stride + 1,
                    },
                    _ => return Err(mismatch(layer, &skip)),
                };
                if skip != s {
                    return Err(Error::contract(format!(
                        "residual `{}` adds branch {:?} to skip {:?}",
                        layer.name,
                        s.dims(),
                        skip.dims()
                    )));
                }
                s
            }
            (_, s) => return Err(mismatch(layer, &s)),
        };
    }
    if !skips.is_empty() {
        return Err(Error::contract("unclosed residual block"));
    }
    match layers.last() {
        Some(LayerSpec {
            kind: LayerKind::Dense { outputs, .. },
            ..
        }) if *outputs == num_classes => Ok(()),
        _ => Err(Error::contract(format!(
            "network must end in a dense layer with {num_classes} outputs"
        ))),
    }
}

fn init_tensor(kind: &LayerKind, suffix: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    match (kind, suffix) {
        (LayerKind::BatchNorm { .. }, "gamma") => Tensor::ones(shape),
        (LayerKind::BatchNorm { .. }, _) => Tensor::zeros(shape),
        _ => {
            let fan_in = match *kind {
                LayerKind::Dense { inputs, .. } => inputs,
                LayerKind::Conv {
                    in_channels, kernel, ..
                } => in_channels * kernel * kernel,
                LayerKind::ResidualEnd { projection: Some(p) } => p.in_channels,
                _ => 1,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
        }
    }
}

/// Arg-max per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// The desk-scale model zoo.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Three dense layers and no non-linearity: a linear model.
    Mlp3,
    /// Two Conv-ReLU-MaxPool stages and a dense head.
    Cnn4,
    /// Conv stem, two residual blocks with batch norm, dense head.
    ResCnn6,
}

impl ModelKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "mlp3" => Some(ModelKind::Mlp3),
            "cnn4" => Some(ModelKind::Cnn4),
            "rescnn6" => Some(ModelKind::ResCnn6),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Mlp3 => "mlp3",
            ModelKind::Cnn4 => "cnn4",
            ModelKind::ResCnn6 => "rescnn6",
        }
    }

    pub fn layers(&self, input_dims: [usize; 3], num_classes: usize) -> Vec<LayerSpec> {
        let [c, h, w] = input_dims;
        let conv = |i: usize, o: usize| LayerKind::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        use LayerKind::*;
        let specs: Vec<(&str, LayerKind)> = match self {
            ModelKind::Mlp3 => vec![
                ("flatten", Flatten),
                (
                    "fc0",
                    Dense {
                        inputs: c * h * w,
                        outputs: 64,
                    },
                ),
                (
                    "fc1",
                    Dense {
                        inputs: 64,
                        outputs: 32,
                    },
                ),
                (
                    "fc2",
                    Dense {
                        inputs: 32,
                        outputs: num_classes,
                    },
                ),
            ],
            ModelKind::Cnn4 => vec![
                ("conv0", conv(c, 16)),
                ("relu0", Relu),
                ("pool0", MaxPool { window: 2 }),
                ("conv1", conv(16, 32)),
                ("relu1", Relu),
                ("pool1", MaxPool { window: 2 }),
                ("flatten", Flatten),
                (
                    "fc",
                    Dense {
                        inputs: 32 * (h / 4) * (w / 4),
                        outputs: num_classes,
                    },
                ),
            ],
            ModelKind::ResCnn6 => vec![
                ("conv0", conv(c, 16)),
                ("bn0", BatchNorm { channels: 16 }),
                ("relu0", Relu),
                ("res0", ResidualStart),
                ("conv1", conv(16, 16)),
                ("bn1", BatchNorm { channels: 16 }),
                ("relu1", Relu),
                ("conv2", conv(16, 16)),
                ("bn2", BatchNorm { channels: 16 }),
                ("res0_end", ResidualEnd { projection: None }),
                ("relu2", Relu),
                ("pool0", MaxPool { window: 2 }),
                ("res1", ResidualStart),
                ("conv3", conv(16, 32)),
                ("bn3", BatchNorm { channels: 32 }),
                ("relu3", Relu),
                ("conv4", conv(32, 32)),
                ("bn4", BatchNorm { channels: 32 }),
                (
                    "res1_end",
                    ResidualEnd {
                        projection: Some(Projection {
                            in_channels: 16,
                            out_channels: 32,
                            stride: 1,
                        }),
                    },
                ),
                ("relu4", Relu),
                ("pool1", MaxPool { window: 2 }),
                ("flatten", Flatten),
                (
                    "fc",
                    Dense {
                        inputs: 32 * (h / 4) * (w / 4),
                        outputs: num_classes,
                    },
                ),
            ],
        };
        specs.into_iter().map(|(n, k)| LayerSpec::new(n, k)).collect()
    }

    pub fn build(&self, input_dims: [usize; 3], num_classes: usize, seed: u64) -> Result<Network> {
        Network::new(input_dims, num_classes, self.layers(input_dims, num_classes), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(n: usize, dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, dims[0], dims[1], dims[2]], |_| rng.random::<f64>())
    }

    #[test]
    fn single_dense_is_matmul_plus_bias() {
        let layers = vec![
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Dense { inputs: 3, outputs: 2 }),
        ];
        let net = Network::new([3, 1, 1], 2, layers, 1).unwrap();
        let x = Tensor::new([1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let y = net.infer(&x).unwrap();
        let w = net.param("fc.weight").unwrap().data();
        let b = net.param("fc.bias").unwrap().data();
        for o in 0..2 {
            let want = w[o * 3] - 2.0 * w[o * 3 + 1] + 0.5 * w[o * 3 + 2] + b[o];
            assert!((y.data()[o] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut net = ModelKind::ResCnn6.build([3, 8, 8], 4, 3).unwrap();
        net.set_mode(Mode::Eval);
        let x = random_input(3, [3, 8, 8], 9);
        let before = net.clone();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, before);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = ModelKind::ResCnn6.build([3, 8, 8], 4, 3).unwrap();
        let x = random_input(4, [3, 8, 8], 9);
        let before = net.buffers().to_vec();
        net.forward(&x).unwrap();
        assert_ne!(net.buffers(), before.as_slice());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = ModelKind::Cnn4.build([3, 8, 8], 4, 3).unwrap();
        let x = random_input(2, [3, 4, 4], 1);
        assert!(matches!(net.infer(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn linearize_rewrites_cnn_layers() {
        let layers = vec![
            LayerSpec::new(
                "conv",
                LayerKind::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ),
            LayerSpec::new("relu", LayerKind::Relu),
            LayerSpec::new("pool", LayerKind::MaxPool { window: 2 }),
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Dense { inputs: 8, outputs: 3 }),
        ];
        let net = Network::new([1, 4, 4], 3, layers, 5).unwrap();
        let lin = net.linearize().unwrap();
        let kinds: Vec<_> = lin.layers().iter().map(|l| l.kind.clone()).collect();
        assert_eq!(kinds.len(), 4);
        assert!(matches!(kinds[0], LayerKind::Conv { .. }));
        assert_eq!(kinds[1], LayerKind::AvgPool { window: 2 });
        assert_eq!(kinds[2], LayerKind::Flatten);
        assert!(matches!(kinds[3], LayerKind::Dense { .. }));
        assert_eq!(lin.mode(), Mode::Eval);
        assert!(lin.is_linear());
        assert_eq!(lin.params(), net.params());
    }

    #[test]
    fn linearize_is_idempotent_and_fixed_on_linear_nets() {
        for kind in [ModelKind::Mlp3, ModelKind::Cnn4, ModelKind::ResCnn6] {
            let net = kind.build([3, 8, 8], 5, 11).unwrap();
            let once = net.linearize().unwrap();
            let twice = once.linearize().unwrap();
            assert_eq!(once, twice);
        }
        let mut mlp = ModelKind::Mlp3.build([3, 8, 8], 5, 11).unwrap();
        mlp.set_mode(Mode::Eval);
        assert_eq!(mlp.linearize().unwrap(), mlp);
    }

    #[test]
    fn linearize_deep_copies_parameters() {
        let net = ModelKind::Cnn4.build([3, 8, 8], 4, 2).unwrap();
        let mut lin = net.linearize().unwrap();
        assert_eq!(lin.param("fc.weight"), net.param("fc.weight"));
        lin.param_mut("fc.weight").unwrap().data_mut()[0] += 1.0;
        assert_ne!(lin.param("fc.weight"), net.param("fc.weight"));
    }

    #[test]
    fn linear_residual_block_adds_skip() {
        let layers = vec![
            LayerSpec::new("res", LayerKind::ResidualStart),
            LayerSpec::new(
                "conv",
                LayerKind::Conv {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ),
            LayerSpec::new("res_end", LayerKind::ResidualEnd { projection: None }),
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Dense { inputs: 32, outputs: 2 }),
        ];
        let net = Network::new([2, 4, 4], 2, layers, 3).unwrap();
        let x = random_input(2, [2, 4, 4], 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let trace = net.trace(&mut tape, xv, Mode::Eval, false).unwrap();
        let feats = tape.value(trace.features).unwrap().clone();

        let mut tape2 = Tape::new();
        let xv2 = tape2.leaf(x.clone(), false);
        let w = tape2.leaf(net.param("conv.weight").unwrap().clone(), false);
        let b = tape2.leaf(net.param("conv.bias").unwrap().clone(), false);
        let branch = tape2.conv2d(xv2, w, Some(b), 1, 1).unwrap();
        let branch = tape2.value(branch).unwrap();
        let want: Vec<f64> = branch.data().iter().zip(x.data()).map(|(a, b)| a + b).collect();
        assert_eq!(feats.data(), want.as_slice());
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let layers = vec![
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Dense { inputs: 5, outputs: 2 }),
        ];
        assert!(Network::new([1, 2, 2], 2, layers, 0).is_err());
        let layers = vec![
            LayerSpec::new("pool", LayerKind::MaxPool { window: 3 }),
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::new("fc", LayerKind::Dense { inputs: 4, outputs: 2 }),
        ];
        assert!(Network::new([1, 4, 4], 2, layers, 0).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        for kind in [ModelKind::Mlp3, ModelKind::Cnn4, ModelKind::ResCnn6] {
            let mut net = kind.build([3, 8, 8], 6, 1).unwrap();
            net.meta = TrainingMeta {
                epoch: 3,
                seed: 42,
                config_hash: "abc".into(),
            };
            let d = parse_descriptor(&net.descriptor()).unwrap();
            assert_eq!(d.layers, net.layers());
            assert_eq!(d.input_dims, [3, 8, 8]);
            assert_eq!(d.num_classes, 6);
            assert_eq!(d.meta, net.meta);
            assert_eq!(d.mode, Mode::Train);
        }
    }

    #[test]
    fn replace_head_keeps_body() {
        let net = ModelKind::Cnn4.build([3, 8, 8], 8, 1).unwrap();
        let fresh = net.replace_head(2, 9).unwrap();
        assert_eq!(fresh.num_classes(), 2);
        assert_eq!(fresh.param("conv0.weight"), net.param("conv0.weight"));
        assert_eq!(fresh.param("fc.weight").unwrap().shape(), &[2, 128]);
    }
}

//! Splittable sequential CNN classifiers: spec validation, seeded builds,
//! edge/cloud decomposition, training, and evaluation.

mod checkpoint;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};

use crate::tensor::{kernels, AdamState, Elem, Shape3, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },
    #[error("invalid split point {0}")]
    InvalidSplitPoint(usize),
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("training loss diverged (non-finite)")]
    DivergedLoss,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer vocabulary. `Conv`/`Relu`/`MaxPool`/`Flatten`/`Affine` form the
/// classifier presets; `Res` is a channel-preserving residual block
/// (conv-relu-conv plus identity, then relu); `ConvTranspose` and `Interp`
/// appear only inside adaptation modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    Affine {
        out_features: usize,
    },
    Res,
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Interp {
        h: usize,
        w: usize,
    },
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Chw(Shape3),
    Flat(usize),
}

impl Feature {
    pub fn numel(self) -> usize {
        match self {
            Feature::Chw((c, h, w)) => c * h * w,
            Feature::Flat(d) => d,
        }
    }
}

fn layer_out_shape(kind: &LayerKind, input: Feature, idx: usize) -> Result<Feature, ModelError> {
    let invalid = |reason: String| ModelError::InvalidSpec { layer: idx, reason };
    match (kind, input) {
        (
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            },
            Feature::Chw((_, h, w)),
        ) => {
            let (oh, ow) = kernels::conv2d_out_dims(h, w, *kernel, *kernel, *stride, *padding)
                .map_err(|e| invalid(e.to_string()))?;
            Ok(Feature::Chw((*out_channels, oh, ow)))
        }
        (LayerKind::Relu, any) => Ok(any),
        (LayerKind::MaxPool, Feature::Chw((c, h, w))) => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(invalid(format!("maxpool needs even dims, got {h}x{w}")));
            }
            Ok(Feature::Chw((c, h / 2, w / 2)))
        }
        (LayerKind::Flatten, Feature::Chw((c, h, w))) => Ok(Feature::Flat(c * h * w)),
        (LayerKind::Affine { out_features }, Feature::Flat(_)) => Ok(Feature::Flat(*out_features)),
        (LayerKind::Res, Feature::Chw(s)) => Ok(Feature::Chw(s)),
        (
            LayerKind::ConvTranspose {
                out_channels,
                kernel,
                stride,
            },
            Feature::Chw((_, h, w)),
        ) => Ok(Feature::Chw((
            *out_channels,
            (h - 1) * stride + kernel,
            (w - 1) * stride + kernel,
        ))),
        (LayerKind::Interp { h, w }, Feature::Chw((c, _, _))) => Ok(Feature::Chw((c, *h, *w))),
        (kind, input) => Err(invalid(format!("{kind:?} cannot take input {input:?}"))),
    }
}

/// Architecture description: input shape, class count, ordered layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: Shape3,
    pub classes: usize,
    pub layers: Vec<LayerKind>,
}

impl ModelSpec {
    /// Chain-checks layer shapes; flatten must appear exactly once and the
    /// final feature must be a flat vector of `classes` entries.
    pub fn validate(&self) -> Result<Vec<Feature>, ModelError> {
        if self.classes == 0 {
            return Err(ModelError::InvalidSpec {
                layer: 0,
                reason: "class count must be positive".into(),
            });
        }
        let mut shapes = vec![Feature::Chw(self.input)];
        let mut flattens = 0usize;
        for (i, kind) in self.layers.iter().enumerate() {
            if matches!(kind, LayerKind::Flatten) {
                flattens += 1;
            }
            let next = layer_out_shape(kind, shapes[i], i)?;
            shapes.push(next);
        }
        if flattens != 1 {
            return Err(ModelError::InvalidSpec {
                layer: self.layers.len(),
                reason: format!("flatten must appear exactly once, found {flattens}"),
            });
        }
        match shapes.last() {
            Some(Feature::Flat(d)) if *d == self.classes => Ok(shapes),
            other => Err(ModelError::InvalidSpec {
                layer: self.layers.len(),
                reason: format!("head produces {other:?}, expected {} logits", self.classes),
            }),
        }
    }

    /// Split positions strictly inside the layer list where the flowing
    /// feature is a (C,H,W) tensor.
    pub fn valid_split_indices(&self) -> Result<Vec<usize>, ModelError> {
        let shapes = self.validate()?;
        Ok((1..self.layers.len())
            .filter(|&k| matches!(shapes[k], Feature::Chw(_)))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub params: Vec<Tensor<T>>,
}

/// Parameter names within a layer, aligned with `Layer::params`.
pub fn param_names(kind: &LayerKind) -> &'static [&'static str] {
    match kind {
        LayerKind::Conv { .. } | LayerKind::Affine { .. } => &["w", "b"],
        LayerKind::Res => &["w1", "b1", "w2", "b2"],
        LayerKind::ConvTranspose { .. } => &["w"],
        _ => &[],
    }
}

/// A built layer chain with parameters. Split halves and surrogate chains
/// are also `Model`s; only preset classifiers carry a full `ModelSpec`.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub input: Shape3,
    pub layers: Vec<Layer<T>>,
}

fn he_uniform<T: Elem>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// splitmix64-style stream derivation so each parameter tensor gets an
/// independent seed from (seed, counter).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn init_layer<T: Elem>(
    kind: &LayerKind,
    input: Feature,
    seed: u64,
    param_counter: &mut u64,
) -> Vec<Tensor<T>> {
    let mut next = || {
        let s = derive_seed(seed, *param_counter);
        *param_counter += 1;
        ChaCha8Rng::seed_from_u64(s)
    };
    match (kind, input) {
        (LayerKind::Conv { out_channels, kernel, .. }, Feature::Chw((c, _, _))) => {
            let fan_in = c * kernel * kernel;
            let w = he_uniform(vec![*out_channels, c, *kernel, *kernel], fan_in, &mut next());
            let _ = next();
            vec![w, Tensor::zeros(vec![*out_channels])]
        }
        (LayerKind::Affine { out_features }, Feature::Flat(d)) => {
            let w = he_uniform(vec![*out_features, d], d, &mut next());
            let _ = next();
            vec![w, Tensor::zeros(vec![*out_features])]
        }
        (LayerKind::Res, Feature::Chw((c, _, _))) => {
            let fan_in = c * 9;
            let w1 = he_uniform(vec![c, c, 3, 3], fan_in, &mut next());
            let _ = next();
            let w2 = he_uniform(vec![c, c, 3, 3], fan_in, &mut next());
            let _ = next();
            vec![w1, Tensor::zeros(vec![c]), w2, Tensor::zeros(vec![c])]
        }
        (LayerKind::ConvTranspose { out_channels, kernel, .. }, Feature::Chw((c, _, _))) => {
            let fan_in = c * kernel * kernel;
            vec![he_uniform(
                vec![c, *out_channels, *kernel, *kernel],
                fan_in,
                &mut next(),
            )]
        }
        _ => vec![],
    }
}

/// Deterministic He-uniform build from a validated spec.
pub fn build_model<T: Elem>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    let shapes = spec.validate()?;
    Ok(build_chain(spec.input, &spec.layers, &shapes, seed))
}

/// Builds a layer chain without full-spec validation (shape list must match).
pub(crate) fn build_chain<T: Elem>(
    input: Shape3,
    kinds: &[LayerKind],
    shapes: &[Feature],
    seed: u64,
) -> Model<T> {
    let mut counter = 0u64;
    let layers = kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| Layer {
            kind: kind.clone(),
            params: init_layer(kind, shapes[i], seed, &mut counter),
        })
        .collect();
    Model { input, layers }
}

impl<T: Elem> Model<T> {
    /// Shape chain including input, one entry per layer boundary.
    pub fn shape_chain(&self) -> Result<Vec<Feature>, ModelError> {
        let mut shapes = vec![Feature::Chw(self.input)];
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(layer_out_shape(&layer.kind, shapes[i], i)?);
        }
        Ok(shapes)
    }

    pub fn out_feature(&self) -> Result<Feature, ModelError> {
        Ok(*self.shape_chain()?.last().expect("chain is non-empty"))
    }

    /// Plain inference pass with no tape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Records the chain on a tape; returns the output and one Var per
    /// parameter tensor in layer order.
    pub fn tape_forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        train_params: bool,
    ) -> Result<(Var, Vec<Var>), TensorError> {
        let mut param_vars = Vec::new();
        let mut cur = x;
        for layer in &self.layers {
            let vars: Vec<Var> = layer
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), train_params))
                .collect();
            param_vars.extend(vars.iter().copied());
            cur = tape_layer(tape, layer, &vars, cur)?;
        }
        Ok((cur, param_vars))
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().cloned())
            .collect()
    }

    pub fn set_param_tensors(&mut self, params: &[Tensor<T>]) {
        let mut it = params.iter();
        for layer in &mut self.layers {
            for p in &mut layer.params {
                *p = it.next().expect("parameter count matches").clone();
            }
        }
        assert!(it.next().is_none(), "parameter count matches");
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }
}

pub fn forward_layer<T: Elem>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    match &layer.kind {
        LayerKind::Conv {
            stride, padding, ..
        } => kernels::conv2d(x, &layer.params[0], Some(&layer.params[1]), *stride, *padding),
        LayerKind::Relu => Ok(kernels::relu(x)),
        LayerKind::MaxPool => Ok(kernels::maxpool2(x)?.0),
        LayerKind::Flatten => {
            let (n, c, h, w) = x.dims4()?;
            x.reshaped(vec![n, c * h * w])
        }
        LayerKind::Affine { .. } => kernels::affine(x, &layer.params[0], &layer.params[1]),
        LayerKind::Res => {
            let y = kernels::conv2d(x, &layer.params[0], Some(&layer.params[1]), 1, 1)?;
            let y = kernels::relu(&y);
            let y = kernels::conv2d(&y, &layer.params[2], Some(&layer.params[3]), 1, 1)?;
            let mut out = y;
            for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
                *o += *v;
            }
            Ok(kernels::relu(&out))
        }
        LayerKind::ConvTranspose { stride, .. } => {
            kernels::conv_transpose2d(x, &layer.params[0], *stride)
        }
        LayerKind::Interp { h, w } => kernels::interpolate_bilinear(x, *h, *w),
    }
}

fn tape_layer<T: Elem>(
    tape: &mut Tape<T>,
    layer: &Layer<T>,
    params: &[Var],
    x: Var,
) -> Result<Var, TensorError> {
    match &layer.kind {
        LayerKind::Conv {
            stride, padding, ..
        } => tape.conv2d(x, params[0], Some(params[1]), *stride, *padding),
        LayerKind::Relu => Ok(tape.relu(x)),
        LayerKind::MaxPool => tape.maxpool2(x),
        LayerKind::Flatten => tape.flatten(x),
        LayerKind::Affine { .. } => tape.affine(x, params[0], params[1]),
        LayerKind::Res => {
            let y = tape.conv2d(x, params[0], Some(params[1]), 1, 1)?;
            let y = tape.relu(y);
            let y = tape.conv2d(y, params[2], Some(params[3]), 1, 1)?;
            let y = tape.add(y, x)?;
            Ok(tape.relu(y))
        }
        LayerKind::ConvTranspose { stride, .. } => tape.conv_transpose2d(x, params[0], *stride),
        LayerKind::Interp { h, w } => tape.interpolate_bilinear(x, *h, *w),
    }
}

/// Edge/cloud decomposition of a model at a split index: the edge runs
/// layers [0, k) and the cloud the rest. Composing the halves reproduces
/// the unsplit model bit-exactly.
#[derive(Debug, Clone)]
pub struct SplitModel<T> {
    pub edge: Model<T>,
    pub cloud: Model<T>,
    pub split_index: usize,
    pub feat_shape: Shape3,
}

pub fn split_at<T: Elem>(model: &Model<T>, split_index: usize) -> Result<SplitModel<T>, ModelError> {
    if split_index == 0 || split_index >= model.layers.len() {
        return Err(ModelError::InvalidSplitPoint(split_index));
    }
    let shapes = model.shape_chain()?;
    let Feature::Chw(feat_shape) = shapes[split_index] else {
        return Err(ModelError::InvalidSplitPoint(split_index));
    };
    Ok(SplitModel {
        edge: Model {
            input: model.input,
            layers: model.layers[..split_index].to_vec(),
        },
        cloud: Model {
            input: feat_shape,
            layers: model.layers[split_index..].to_vec(),
        },
        split_index,
        feat_shape,
    })
}

/// Flattens a batch-1 (C,H,W) feature map into a row-major vector of
/// length C*H*W (channel-major NCHW scan).
pub fn flatten_features<T: Elem>(feat: &Tensor<T>) -> Result<Vec<T>, TensorError> {
    let (n, _, _, _) = feat.dims4()?;
    if n != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "per-sample transmission expects batch 1, got {n}"
        )));
    }
    Ok(feat.data().to_vec())
}

/// Inverse of `flatten_features` given the true shape.
pub fn reshape_features<T: Elem>(row: &[T], shape: Shape3) -> Result<Tensor<T>, TensorError> {
    let (c, h, w) = shape;
    Tensor::new(vec![1, c, h, w], row.to_vec())
}

/// Labeled image set; all images share one shape and live in [0,1].
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Elem> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset<T> {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Stacks samples (each [1,C,H,W]) into one [B,C,H,W] batch.
    pub fn stack(&self, idx: &[usize]) -> Tensor<T> {
        let shape = self.images[idx[0]].shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let mut out = Tensor::zeros(vec![idx.len(), c, h, w]);
        let stride = c * h * w;
        for (row, &i) in idx.iter().enumerate() {
            out.data_mut()[row * stride..(row + 1) * stride]
                .copy_from_slice(self.images[i].data());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 2e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Supervised training with Adam; deterministic for a fixed seed.
/// Returns per-epoch train accuracy measured on the pre-update forward.
pub fn train_classifier<T: Elem>(
    model: &mut Model<T>,
    ds: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ModelError> {
    if ds.is_empty() {
        return Err(ModelError::DatasetEmpty);
    }
    let mut params = model.param_tensors();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5eed + epoch as u64));
        let order = shuffled_indices(ds.len(), &mut rng);
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            model.set_param_tensors(&params);
            let batch = ds.stack(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(batch, false);
            let (logits, param_vars) = model.tape_forward(&mut tape, x, true)?;
            correct += count_correct(tape.value(logits), &labels);
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            if !tape.value(loss).item().is_finite() {
                return Err(ModelError::DivergedLoss);
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = param_vars
                .iter()
                .map(|&v| tape.grad(v).map(|g| g.to_vec()))
                .collect();
            adam.update(&mut params, &grads)?;
        }
        history.push(correct as f64 / ds.len() as f64);
        let _ = epoch;
    }
    model.set_param_tensors(&params);
    Ok(history)
}

fn count_correct<T: Elem>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let (n, k) = logits.dims2().expect("logits are [N,K]");
    let mut correct = 0;
    for (row, &y) in labels.iter().enumerate() {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if r[j] > r[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct
}

/// Argmax accuracy; prediction ties break to the lowest class index.
pub fn evaluate_accuracy<T: Elem>(model: &Model<T>, ds: &Dataset<T>) -> Result<f64, ModelError> {
    if ds.is_empty() {
        return Err(ModelError::DatasetEmpty);
    }
    let mut correct = 0usize;
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(256) {
        let logits = model.forward(&ds.stack(chunk))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Predicted class of a single [1,C,H,W] image.
pub fn predict_class<T: Elem>(model: &Model<T>, img: &Tensor<T>) -> Result<usize, TensorError> {
    let logits = model.forward(img)?;
    let d = logits.data();
    let mut best = 0usize;
    for j in 1..d.len() {
        if d[j] > d[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Named presets. The VGG-style stacks and the residual variants come in
/// 16x16 and 32x32 input sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    TinyVgg16,
    TinyRes16,
    TinyVgg32,
    TinyRes32,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Preset> {
        match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "tinyvgg" | "tinyvgg16" => Some(Preset::TinyVgg16),
            "tinyres" | "tinyres16" => Some(Preset::TinyRes16),
            "tinyvgg32" => Some(Preset::TinyVgg32),
            "tinyres32" => Some(Preset::TinyRes32),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::TinyVgg16 => "tinyvgg16",
            Preset::TinyRes16 => "tinyres16",
            Preset::TinyVgg32 => "tinyvgg32",
            Preset::TinyRes32 => "tinyres32",
        }
    }

    pub fn spec(self) -> ModelSpec {
        let conv = |out: usize| LayerKind::Conv {
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let (input, layers) = match self {
            Preset::TinyVgg16 => (
                (3, 16, 16),
                vec![
                    conv(16),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (16,8,8)
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,4,4)
                    conv(32),
                    LayerKind::Relu, // (32,4,4)
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,2,2)
                    LayerKind::Flatten,
                    LayerKind::Affine { out_features: 10 },
                ],
            ),
            Preset::TinyRes16 => (
                (3, 16, 16),
                vec![
                    conv(16),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (16,8,8)
                    LayerKind::Res,
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,4,4)
                    LayerKind::Res,
                    LayerKind::Flatten,
                    LayerKind::Affine { out_features: 10 },
                ],
            ),
            Preset::TinyVgg32 => (
                (3, 32, 32),
                vec![
                    conv(16),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (16,16,16)
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,8,8)
                    conv(32),
                    LayerKind::Relu,
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,4,4)
                    LayerKind::Flatten,
                    LayerKind::Affine { out_features: 10 },
                ],
            ),
            Preset::TinyRes32 => (
                (3, 32, 32),
                vec![
                    conv(16),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (16,16,16)
                    LayerKind::Res,
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,8,8)
                    LayerKind::Res,
                    conv(32),
                    LayerKind::Relu,
                    LayerKind::MaxPool, // (32,4,4)
                    LayerKind::Flatten,
                    LayerKind::Affine { out_features: 10 },
                ],
            ),
        };
        ModelSpec {
            input,
            classes: 10,
            layers,
        }
    }
}

/// Edge-only probe chain used by the shape-reconstruction studies:
/// conv(3->C) + relu, then stride-2 conv halvings down to `w_out`.
pub fn probe_edge_spec(c_out: usize, w_out: usize, input: Shape3) -> Vec<LayerKind> {
    let mut layers = vec![
        LayerKind::Conv {
            out_channels: c_out,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerKind::Relu,
    ];
    let mut cur = input.2;
    while cur > w_out {
        layers.push(LayerKind::Conv {
            out_channels: c_out,
            kernel: 2,
            stride: 2,
            padding: 0,
        });
        layers.push(LayerKind::Relu);
        cur /= 2;
    }
    layers
}

/// Builds the probe edge as a standalone model (no classifier head).
pub fn build_probe_edge<T: Elem>(
    c_out: usize,
    w_out: usize,
    input: Shape3,
    seed: u64,
) -> Result<Model<T>, ModelError> {
    let kinds = probe_edge_spec(c_out, w_out, input);
    let mut shapes = vec![Feature::Chw(input)];
    for (i, kind) in kinds.iter().enumerate() {
        shapes.push(layer_out_shape(kind, shapes[i], i)?);
    }
    Ok(build_chain(input, &kinds, &shapes, seed))
}

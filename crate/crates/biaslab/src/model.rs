//! The small convolutional classifier, its training loop, classification
//! metrics, and checkpoint files.
//!
//! Architecture: conv(1→8, 3×3) + relu + maxpool2×2 + conv(8→16, 3×3) +
//! relu + maxpool2×2 + flatten + dense(→32) + relu + dense(→classes).
//! Optimizer is plain SGD with a per-epoch multiplicative learning-rate
//! decay; no momentum, so runs are bit-reproducible from the seed.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, NodeId, Tape};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::rng::{self, tags};
use crate::tensor::Tensor;

pub const CONV1_W: &str = "conv1.w";
pub const CONV1_B: &str = "conv1.b";
pub const CONV2_W: &str = "conv2.w";
pub const CONV2_B: &str = "conv2.b";
pub const FC1_W: &str = "fc1.w";
pub const FC1_B: &str = "fc1.b";
pub const FC2_W: &str = "fc2.w";
pub const FC2_B: &str = "fc2.b";

const C1: usize = 8;
const C2: usize = 16;
const HIDDEN: usize = 32;
const MAX_PARAMS: usize = 100_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning rate is multiplied by this once per epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            learning_rate: 0.06,
            batch_size: 32,
            seed: 0,
            lr_decay: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-sample augmentation hook for training: receives the native-resolution
/// image and a derived seed, returns the image to train on.
pub type AugmentFn<'a> = &'a (dyn Fn(&Image, u64) -> Result<Image> + Sync);

/// Anything the explainers can differentiate: a model that records its
/// logits for a `[1, h, w, 1]` input leaf on a tape.
pub trait Classifier: Sync {
    /// Expected input raster size as (width, height).
    fn input_dims(&self) -> (usize, usize);

    fn classes(&self) -> usize;

    /// Record the forward pass for an input leaf already on the tape and
    /// return the `[1, classes]` logits node.
    fn record_logits(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId>;

    /// Logits for one image at exactly `input_dims`.
    fn logits_image(&self, image: &Image) -> Result<Vec<f64>> {
        let (w, h) = self.input_dims();
        if image.width() != w || image.height() != h {
            return Err(Error::data(format!(
                "image {}x{} does not match model input {}x{}",
                image.width(),
                image.height(),
                w,
                h
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(
            vec![1, h, w, 1],
            image.pixels().to_vec(),
        )?);
        let logits = self.record_logits(&mut tape, x)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Predicted class and softmax probabilities; ties break toward the
    /// lower class index.
    fn predict_image(&self, image: &Image) -> Result<(usize, Vec<f64>)> {
        let logits = self.logits_image(image)?;
        let probs = softmax_slice(&logits);
        Ok((argmax(&probs), probs))
    }
}

/// A plain linear readout `logits = x·W + b`, used as a reference model in
/// explanation-metric checks (linear models have constant gradients and
/// exactly faithful gradient explanations).
#[derive(Debug, Clone)]
pub struct LinearModel {
    width: usize,
    height: usize,
    weights: Tensor,
    bias: Tensor,
}

impl LinearModel {
    pub fn new(width: usize, height: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || weights.shape()[0] != width * height {
            return Err(Error::Config(format!(
                "weights {:?} do not match {}x{} inputs",
                weights.shape(),
                width,
                height
            )));
        }
        if bias.shape() != [1, weights.shape()[1]] {
            return Err(Error::Config("bias must be [1, classes]".into()));
        }
        Ok(LinearModel {
            width,
            height,
            weights,
            bias,
        })
    }

    /// Single-output model from one weight raster.
    pub fn single_output(width: usize, height: usize, w: &[f64]) -> Result<Self> {
        Self::new(
            width,
            height,
            Tensor::matrix(width * height, 1, w.to_vec())?,
            Tensor::zeros(&[1, 1]),
        )
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

impl Classifier for LinearModel {
    fn input_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn classes(&self) -> usize {
        self.weights.shape()[1]
    }

    fn record_logits(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let flat = tape.flatten(input)?;
        let w = tape.leaf(self.weights.clone());
        let b = tape.leaf(self.bias.clone());
        tape.dense(flat, w, Some(b))
    }
}

/// Node ids of the stages of one forward pass, for attribution and style
/// features.
pub struct ModelGraph {
    pub input: NodeId,
    pub conv1: NodeId,
    pub conv2: NodeId,
    pub hidden: NodeId,
    pub logits: NodeId,
}

/// Tape-free forward pass with every intermediate kept, for LRP.
pub struct ForwardTrace {
    pub input: Tensor,
    pub conv1_pre: Tensor,
    pub conv1_post: Tensor,
    pub pool1: Tensor,
    pub pool1_idx: Vec<u32>,
    pub conv2_pre: Tensor,
    pub conv2_post: Tensor,
    pub pool2: Tensor,
    pub pool2_idx: Vec<u32>,
    pub flat: Tensor,
    pub fc1_pre: Tensor,
    pub fc1_post: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct TinyCnn {
    input_side: usize,
    classes: usize,
    params: Vec<(String, Tensor)>,
}

impl TinyCnn {
    /// Initialize with uniform ±√(6/(fan_in+fan_out)) weights and zero
    /// biases, seeded.
    pub fn new(input_side: usize, classes: usize, seed: u64) -> Result<Self> {
        if input_side < 8 {
            return Err(Error::Config(format!(
                "input side {input_side} too small for two 2x2 poolings"
            )));
        }
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let pooled = input_side / 2 / 2;
        let flat = pooled * pooled * C2;
        let mut rng = rng::rng_from_seed(seed);
        let mut glorot = |shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Tensor::new(shape, data).expect("init shape")
        };
        let params = vec![
            (CONV1_W.into(), glorot(vec![3, 3, 1, C1], 9, 9 * C1)),
            (CONV1_B.into(), Tensor::zeros(&[1, C1])),
            (CONV2_W.into(), glorot(vec![3, 3, C1, C2], 9 * C1, 9 * C2)),
            (CONV2_B.into(), Tensor::zeros(&[1, C2])),
            (FC1_W.into(), glorot(vec![flat, HIDDEN], flat, HIDDEN)),
            (FC1_B.into(), Tensor::zeros(&[1, HIDDEN])),
            (FC2_W.into(), glorot(vec![HIDDEN, classes], HIDDEN, classes)),
            (FC2_B.into(), Tensor::zeros(&[1, classes])),
        ];
        let model = TinyCnn {
            input_side,
            classes,
            params,
        };
        if model.param_count() >= MAX_PARAMS {
            return Err(Error::Config(format!(
                "parameter count {} exceeds the {MAX_PARAMS} budget; reduce the input side",
                model.param_count()
            )));
        }
        Ok(model)
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    /// Downscale a native-resolution image to the model input side.
    pub fn prepare(&self, image: &Image) -> Result<Image> {
        if image.width() == self.input_side && image.height() == self.input_side {
            Ok(image.clone())
        } else if image.width() >= self.input_side && image.height() >= self.input_side {
            image.box_downscale(self.input_side)
        } else {
            Err(Error::data(format!(
                "image {}x{} smaller than model input {}",
                image.width(),
                image.height(),
                self.input_side
            )))
        }
    }

    /// Stack prepared images into an NHWC batch tensor.
    pub fn batch_tensor(&self, images: &[Image]) -> Result<Tensor> {
        let s = self.input_side;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.width() != s || img.height() != s {
                return Err(Error::data(format!(
                    "batch image {}x{} does not match model input {s}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend_from_slice(img.pixels());
        }
        Tensor::new(vec![images.len(), s, s, 1], data)
    }

    /// Record parameter leaves on a tape, in declaration order.
    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<(String, NodeId)> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// Record the forward pass for a batch leaf already on the tape.
    pub fn graph(
        &self,
        tape: &mut Tape,
        input: NodeId,
        leaves: &[(String, NodeId)],
    ) -> Result<ModelGraph> {
        let id = |name: &str| -> NodeId {
            leaves
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing leaf {name}"))
                .1
        };
        let z1 = tape.conv2d(input, id(CONV1_W), Some(id(CONV1_B)))?;
        let a1 = tape.relu(z1)?;
        let p1 = tape.maxpool2x2(a1)?;
        let z2 = tape.conv2d(p1, id(CONV2_W), Some(id(CONV2_B)))?;
        let a2 = tape.relu(z2)?;
        let p2 = tape.maxpool2x2(a2)?;
        let flat = tape.flatten(p2)?;
        let z3 = tape.dense(flat, id(FC1_W), Some(id(FC1_B)))?;
        let a3 = tape.relu(z3)?;
        let logits = tape.dense(a3, id(FC2_W), Some(id(FC2_B)))?;
        Ok(ModelGraph {
            input,
            conv1: a1,
            conv2: a2,
            hidden: a3,
            logits,
        })
    }

    // ── tape-free forward paths ────────────────────────────────────

    /// Logits for a batch of prepared images, `[n, classes]`.
    pub fn logits_batch(&self, images: &[Image]) -> Result<Tensor> {
        let x = self.batch_tensor(images)?;
        Ok(self.logits_tensor(&x))
    }

    fn logits_tensor(&self, x: &Tensor) -> Tensor {
        let t = self.trace_tensor(x);
        t.logits
    }

    fn trace_tensor(&self, x: &Tensor) -> ForwardTrace {
        let conv = |inp: &Tensor, w: &Tensor, b: &Tensor| -> Tensor {
            let s = inp.shape();
            let geom = crate::autodiff::ConvGeom {
                n: s[0],
                h: s[1],
                w: s[2],
                c: s[3],
                kh: w.shape()[0],
                kw: w.shape()[1],
            };
            let cols = kernels::im2col(inp, &geom);
            let co = w.shape()[3];
            let wmat = w.reshaped(vec![w.numel() / co, co]).expect("kernel reshape");
            let mut out = kernels::matmul(&cols, &wmat);
            let bd = b.data();
            for row in out.data_mut().chunks_mut(co) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
            out.reshaped(vec![s[0], s[1], s[2], co]).expect("conv reshape")
        };
        let relu = |t: &Tensor| -> Tensor {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v.max(0.0)).collect(),
            )
            .expect("relu shape")
        };
        let dense = |inp: &Tensor, w: &Tensor, b: &Tensor| -> Tensor {
            let mut out = kernels::matmul(inp, w);
            let k = w.shape()[1];
            let bd = b.data();
            for row in out.data_mut().chunks_mut(k) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
            out
        };

        let conv1_pre = conv(x, self.param(CONV1_W), self.param(CONV1_B));
        let conv1_post = relu(&conv1_pre);
        let (pool1, pool1_idx) = kernels::maxpool2x2(&conv1_post);
        let conv2_pre = conv(&pool1, self.param(CONV2_W), self.param(CONV2_B));
        let conv2_post = relu(&conv2_pre);
        let (pool2, pool2_idx) = kernels::maxpool2x2(&conv2_post);
        let n = pool2.shape()[0];
        let flat = pool2
            .reshaped(vec![n, pool2.numel() / n])
            .expect("flatten shape");
        let fc1_pre = dense(&flat, self.param(FC1_W), self.param(FC1_B));
        let fc1_post = relu(&fc1_pre);
        let logits = dense(&fc1_post, self.param(FC2_W), self.param(FC2_B));
        ForwardTrace {
            input: x.clone(),
            conv1_pre,
            conv1_post,
            pool1,
            pool1_idx,
            conv2_pre,
            conv2_post,
            pool2,
            pool2_idx,
            flat,
            fc1_pre,
            fc1_post,
            logits,
        }
    }

    /// Every intermediate of a single prepared image's forward pass.
    pub fn forward_trace(&self, image: &Image) -> Result<ForwardTrace> {
        let x = self.batch_tensor(std::slice::from_ref(image))?;
        Ok(self.trace_tensor(&x))
    }

    /// Logits for one image at any resolution (downscaled as needed).
    pub fn forward_image(&self, image: &Image) -> Result<Vec<f64>> {
        let prepared = self.prepare(image)?;
        Ok(self.logits_batch(std::slice::from_ref(&prepared))?.into_data())
    }

    /// Predicted class and softmax probabilities; argmax ties break toward
    /// the lower class index.
    pub fn predict(&self, image: &Image) -> Result<(usize, Vec<f64>)> {
        let logits = self.forward_image(image)?;
        let probs = softmax_slice(&logits);
        Ok((argmax(&probs), probs))
    }

    // ── training ───────────────────────────────────────────────────

    /// SGD training over the given samples. Deterministic given the seed:
    /// same seed and data produce bit-identical parameters. The augment hook
    /// fires independently per sample per epoch.
    pub fn train(
        &mut self,
        data: &[&Sample],
        cfg: &TrainConfig,
        augment: Option<AugmentFn>,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::data("train: empty dataset"));
        }
        let n = data.len();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
            let order = shuffled_indices(n, rng::subseed(cfg.seed, tags::TRAIN_SHUFFLE, epoch as u64));
            let mut epoch_loss = 0.0;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let images = prepare_batch(self, data, chunk, cfg.seed, epoch, augment)?;
                let batch = self.batch_tensor(&images)?;
                let labels = one_hot(
                    &chunk.iter().map(|&i| data[i].label).collect::<Vec<_>>(),
                    self.classes,
                );
                let loss = self.sgd_step(&batch, &labels, lr).map_err(|e| match e {
                    Error::Numeric { what, .. } => Error::numeric(
                        what,
                        format!("epoch {epoch}, batch {batch_idx}"),
                    ),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::numeric(
                        "divergent loss",
                        format!("epoch {epoch}, batch {batch_idx}"),
                    ));
                }
                epoch_loss += loss * chunk.len() as f64;
            }
            history.push(epoch_loss / n as f64);
        }
        Ok(history)
    }

    fn sgd_step(&mut self, batch: &Tensor, labels: &Tensor, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = self.param_leaves(&mut tape);
        let x = tape.leaf(batch.clone());
        let graph = self.graph(&mut tape, x, &leaves)?;
        let y = tape.leaf(labels.clone());
        let loss = cross_entropy_node(&mut tape, graph.logits, y)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::numeric("divergent loss", String::new()));
        }
        let wrt: Vec<NodeId> = leaves.iter().map(|(_, id)| *id).collect();
        let grads = tape.backward(loss, &wrt)?;
        self.apply_grads(&leaves, &grads, &tape, lr);
        Ok(loss_value)
    }

    pub(crate) fn apply_grads(
        &mut self,
        leaves: &[(String, NodeId)],
        grads: &HashMap<NodeId, NodeId>,
        tape: &Tape,
        lr: f64,
    ) {
        for ((name, leaf), (pname, tensor)) in leaves.iter().zip(self.params.iter_mut()) {
            debug_assert_eq!(name, pname);
            let g = tape.value(grads[leaf]).data();
            for (p, gv) in tensor.data_mut().iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
    }

    // ── checkpoints ────────────────────────────────────────────────

    const MAGIC: &'static [u8; 4] = b"DBL1";

    /// Flat binary checkpoint: magic "DBL1", record count, then
    /// name-length/name/shape/data records, little-endian 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TinyCnn> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let diag = |pos: usize, what: &str| {
            Error::data(format!("{}: byte {}: {}", path.display(), pos, what))
        };
        if bytes.len() < 8 || &bytes[0..4] != Self::MAGIC {
            return Err(diag(0, "bad magic, expected DBL1"));
        }
        pos += 4;
        let count = read_u32(&bytes, &mut pos).ok_or_else(|| diag(pos, "truncated count"))? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len =
                read_u32(&bytes, &mut pos).ok_or_else(|| diag(pos, "truncated name length"))? as usize;
            if pos + name_len > bytes.len() {
                return Err(diag(pos, "truncated name"));
            }
            let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
                .map_err(|_| diag(pos, "name is not UTF-8"))?;
            pos += name_len;
            let ndim =
                read_u32(&bytes, &mut pos).ok_or_else(|| diag(pos, "truncated shape"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(
                    read_u32(&bytes, &mut pos).ok_or_else(|| diag(pos, "truncated shape"))? as usize,
                );
            }
            let numel: usize = shape.iter().product();
            if pos + numel * 8 > bytes.len() {
                return Err(diag(pos, "truncated tensor data"));
            }
            let data: Vec<f64> = bytes[pos..pos + numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += numel * 8;
            params.push((name, Tensor::new(shape, data).map_err(|e| diag(pos, &e.to_string()))?));
        }
        Self::from_named_params(params).map_err(|e| diag(pos, &e.to_string()))
    }

    /// Rebuild a model from named parameter tensors (the checkpoint layout).
    pub fn from_named_params(params: Vec<(String, Tensor)>) -> Result<TinyCnn> {
        let find = |name: &str| -> Result<&Tensor> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::data(format!("checkpoint missing parameter {name}")))
        };
        let classes = find(FC2_W)?.shape()[1];
        let flat = find(FC1_W)?.shape()[0];
        let pooled2 = flat / C2;
        let pooled = (pooled2 as f64).sqrt().round() as usize;
        if pooled * pooled * C2 != flat {
            return Err(Error::data(format!(
                "fc1 input {flat} is not a square spatial map"
            )));
        }
        Ok(TinyCnn {
            input_side: pooled * 4,
            classes,
            params,
        })
    }
}

impl Classifier for TinyCnn {
    fn input_dims(&self) -> (usize, usize) {
        (self.input_side, self.input_side)
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn record_logits(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let leaves = self.param_leaves(tape);
        Ok(self.graph(tape, input, &leaves)?.logits)
    }

    fn logits_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width() != self.input_side || image.height() != self.input_side {
            return Err(Error::data(format!(
                "image {}x{} does not match model input {}",
                image.width(),
                image.height(),
                self.input_side
            )));
        }
        Ok(self.logits_batch(std::slice::from_ref(image))?.into_data())
    }
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    if *pos + 4 > bytes.len() {
        return None;
    }
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Some(v)
}

fn prepare_batch(
    model: &TinyCnn,
    data: &[&Sample],
    chunk: &[usize],
    seed: u64,
    epoch: usize,
    augment: Option<AugmentFn>,
) -> Result<Vec<Image>> {
    let n = data.len();
    let prepared: Vec<Result<Image>> = exec::map_slice(chunk, |&i| {
        let sample = data[i];
        let img = match augment {
            Some(f) => f(
                &sample.image,
                rng::subseed(seed, tags::TRAIN_AUGMENT, (epoch * n + i) as u64),
            )?,
            None => sample.image.clone(),
        };
        model.prepare(&img)
    });
    prepared.into_iter().collect()
}

/// Differentiable cross-entropy of logits against one-hot labels:
/// softmax → log → −(1/n)·Σ y·log p.
pub fn cross_entropy_node(tape: &mut Tape, logits: NodeId, one_hot: NodeId) -> Result<NodeId> {
    let n = tape.value(logits).shape()[0] as f64;
    let probs = tape.softmax(logits)?;
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, one_hot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n)
}

/// Cross-entropy on explicit probability rows (Eq-style definition):
/// −(1/n)·Σᵢ Σ_c y·log p, with zero probabilities at a true class clamped
/// to 1e-12. Returns the loss and how many clamps fired.
pub fn cross_entropy(probabilities: &Tensor, labels: &Tensor) -> Result<(f64, usize)> {
    if probabilities.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: probabilities.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let (n, m) = (probabilities.shape()[0], probabilities.shape()[1]);
    if n == 0 {
        return Err(Error::data("cross_entropy: empty batch"));
    }
    for i in 0..n {
        let rowsum: f64 = probabilities.row(i).iter().sum();
        if (rowsum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "cross_entropy: probability row {i} sums to {rowsum}, not 1"
            )));
        }
    }
    let mut clamped = 0usize;
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..m {
            let y = labels.data()[i * m + c];
            if y == 0.0 {
                continue;
            }
            let mut p = probabilities.data()[i * m + c];
            if p < 1e-12 {
                p = 1e-12;
                clamped += 1;
            }
            total += y * p.ln();
        }
    }
    Ok((-total / n as f64, clamped))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// First index of the maximum (ties toward the lower class index).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_from_seed(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

// ── evaluation ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> EvalReport {
        let m = confusion.len();
        let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        let correct: usize = (0..m).map(|c| confusion[c][c]).sum();
        let per_class = (0..m)
            .map(|c| {
                let tp = confusion[c][c];
                let fp: usize = (0..m).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
                let fn_: usize = (0..m).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
                let precision = ratio(tp, tp + fp);
                let recall = ratio(tp, tp + fn_);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                }
            })
            .collect();
        EvalReport {
            classes: m,
            confusion,
            per_class,
            accuracy: ratio(correct, total),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Argmax-decision metrics over a sample slice. Sharded across threads;
/// confusion counts merge associatively, so ordering does not matter.
pub fn evaluate(model: &TinyCnn, data: &[&Sample]) -> Result<EvalReport> {
    let m = model.classes();
    if let Some(bad) = data.iter().find(|s| s.label >= m) {
        return Err(Error::data(format!(
            "label {} out of range for {m}-class model",
            bad.label
        )));
    }
    let pairs: Vec<Result<(usize, usize)>> = exec::map_slice(data, |s| {
        let (pred, _) = model.predict(&s.image)?;
        Ok((s.label, pred))
    });
    let mut confusion = vec![vec![0usize; m]; m];
    for p in pairs {
        let (t, pred) = p?;
        confusion[t][pred] += 1;
    }
    Ok(EvalReport::from_confusion(confusion))
}

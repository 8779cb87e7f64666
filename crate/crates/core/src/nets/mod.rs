//! Base classifier and examiner networks.
//!
//! Both share one encoder design: two stride-2 convolutions with ReLU, an
//! efficient channel attention (ECA) block after the last convolution, global
//! average pooling and a linear projection to the feature space. The base
//! network adds a linear classifier head; the examiner concatenates the
//! encodings of an anchor and two candidates and scores which candidate is
//! closer through a small MLP.
//!
//! Parameters live in plain [`Tensor`]s. A training step binds them onto a
//! [`Tape`] (`bind`), runs the forward pass on the returned `*Vars`, and feeds
//! the gradients back through an optimizer.

mod checkpoint;
mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{cosine_lr, Sgd};

/// Convolution kernel side, fixed for both conv stages.
pub const CONV_KERNEL: usize = 3;

/// Layer sizes shared by the base and examiner networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_channels: usize,
    /// Channel count at the attention tap, identical for both networks.
    pub conv2_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub eca_kernel: usize,
    pub examiner_hidden: usize,
}

impl NetConfig {
    /// The default 16x16 single-channel backbone.
    pub fn desk(num_classes: usize) -> Self {
        NetConfig {
            in_channels: 1,
            height: 16,
            width: 16,
            conv1_channels: 16,
            conv2_channels: 32,
            feature_dim: 64,
            num_classes,
            eca_kernel: 3,
            examiner_hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config(reason));
        if self.eca_kernel % 2 == 0 || self.eca_kernel == 0 || self.eca_kernel > self.conv2_channels {
            return bad(format!(
                "eca kernel {} must be odd and within 1..={}",
                self.eca_kernel, self.conv2_channels
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if [
            self.in_channels,
            self.height,
            self.width,
            self.conv1_channels,
            self.feature_dim,
            self.examiner_hidden,
        ]
        .contains(&0)
        {
            return bad("layer sizes must be positive".into());
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Uniform fan-in (He-style) initialisation.
fn he_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)))
}

/// Efficient channel attention: `A = sigmoid(conv1d(gap(x), w))`, output `x * A`.
///
/// Returns the rescaled map and the attention vector `[m, c]`.
pub fn eca_attention<'t, T: Real>(feature_map: &Var<'t, T>, weight: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = feature_map.shape();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "eca_attention",
            format!("needs [m,c,h,w], got {shape:?}"),
        ));
    }
    let k = weight.shape().first().copied().unwrap_or(0);
    if k % 2 == 0 || k > shape[1] || weight.shape().len() != 1 {
        return Err(Error::invalid(
            "eca_attention",
            format!(
                "kernel of shape {:?} must be odd with length within 1..={}",
                weight.shape(),
                shape[1]
            ),
        ));
    }
    let pooled = feature_map.global_avg_pool()?;
    let attention = pooled.conv1d_same(weight)?.sigmoid();
    let gate = attention.reshape(&[shape[0], shape[1], 1, 1])?;
    Ok((feature_map.mul(&gate)?, attention))
}

/// Convolutional feature extractor with an ECA tap.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub eca_w: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

const ENCODER_NAMES: [&str; 7] = [
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "encoder.eca.weight",
    "encoder.proj.weight",
    "encoder.proj.bias",
];

impl<T: Real> Encoder<T> {
    pub fn init<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Self {
        let k = CONV_KERNEL;
        let (c0, c1, c2) = (cfg.in_channels, cfg.conv1_channels, cfg.conv2_channels);
        Encoder {
            conv1_w: he_uniform(rng, &[c1, c0, k, k], c0 * k * k),
            conv1_b: Tensor::zeros([c1]),
            conv2_w: he_uniform(rng, &[c2, c1, k, k], c1 * k * k),
            conv2_b: Tensor::zeros([c2]),
            eca_w: he_uniform(rng, &[cfg.eca_kernel], cfg.eca_kernel),
            proj_w: he_uniform(rng, &[c2, cfg.feature_dim], c2),
            proj_b: Tensor::zeros([cfg.feature_dim]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 7] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.eca_w,
            &self.proj_w,
            &self.proj_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 7] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.eca_w,
            &mut self.proj_w,
            &mut self.proj_b,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> EncoderVars<'t, T> {
        let [a, b, c, d, e, f, g] = self.tensors().map(|t| tape.leaf(t.clone(), trainable));
        EncoderVars {
            conv1_w: a,
            conv1_b: b,
            conv2_w: c,
            conv2_b: d,
            eca_w: e,
            proj_w: f,
            proj_b: g,
        }
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        let [a, b, c, d, e, f, g] = self.tensors().map(|t| t.cast());
        Encoder {
            conv1_w: a,
            conv1_b: b,
            conv2_w: c,
            conv2_b: d,
            eca_w: e,
            proj_w: f,
            proj_b: g,
        }
    }
}

/// Encoder parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars<'t, T> {
    pub conv1_w: Var<'t, T>,
    pub conv1_b: Var<'t, T>,
    pub conv2_w: Var<'t, T>,
    pub conv2_b: Var<'t, T>,
    pub eca_w: Var<'t, T>,
    pub proj_w: Var<'t, T>,
    pub proj_b: Var<'t, T>,
}

/// Features and channel attention of one encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t, T> {
    pub features: Var<'t, T>,
    pub attention: Var<'t, T>,
}

impl<'t, T: Real> EncoderVars<'t, T> {
    fn all(&self) -> [Var<'t, T>; 7] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.eca_w,
            self.proj_w,
            self.proj_b,
        ]
    }

    pub fn forward(&self, images: &Var<'t, T>) -> Result<Encoded<'t, T>> {
        let c1 = self.conv1_b.shape()[0];
        let c2 = self.conv2_b.shape()[0];
        let h = images
            .conv2d(&self.conv1_w, 2, 1)?
            .add(&self.conv1_b.reshape(&[c1, 1, 1])?)?
            .relu();
        let h = h
            .conv2d(&self.conv2_w, 2, 1)?
            .add(&self.conv2_b.reshape(&[c2, 1, 1])?)?
            .relu();
        let (scaled, attention) = eca_attention(&h, &self.eca_w)?;
        let features = scaled.global_avg_pool()?.matmul(&self.proj_w)?.add(&self.proj_b)?;
        Ok(Encoded { features, attention })
    }
}

/// Base network output on one batch.
#[derive(Clone, Copy, Debug)]
pub struct BaseOutput<'t, T> {
    pub features: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub attention: Var<'t, T>,
}

/// Image classifier: encoder plus linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNetwork<T> {
    pub config: NetConfig,
    pub encoder: Encoder<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    /// When set, `bind` exposes the head as constants.
    pub frozen_head: bool,
}

pub const HEAD_NAMES: [&str; 2] = ["head.weight", "head.bias"];

impl<T: Real> BaseNetwork<T> {
    pub fn new<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(&config, rng);
        let head_w = he_uniform(rng, &[config.feature_dim, config.num_classes], config.feature_dim);
        let head_b = Tensor::zeros([config.num_classes]);
        Ok(BaseNetwork {
            config,
            encoder,
            head_w,
            head_b,
            frozen_head: false,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v: Vec<_> = ENCODER_NAMES.into_iter().zip(self.encoder.tensors()).collect();
        v.push((HEAD_NAMES[0], &self.head_w));
        v.push((HEAD_NAMES[1], &self.head_b));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v: Vec<_> = ENCODER_NAMES.into_iter().zip(self.encoder.tensors_mut()).collect();
        v.push((HEAD_NAMES[0], &mut self.head_w));
        v.push((HEAD_NAMES[1], &mut self.head_b));
        v
    }

    /// Copy of the classifier head, for freeze checks.
    pub fn head_snapshot(&self) -> (Tensor<T>, Tensor<T>) {
        (self.head_w.clone(), self.head_b.clone())
    }

    /// Binds for training; the head is trainable unless `frozen_head` is set.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BaseVars<'t, T> {
        let head = !self.frozen_head;
        BaseVars {
            encoder: self.encoder.bind(tape, true),
            head_w: tape.leaf(self.head_w.clone(), head),
            head_b: tape.leaf(self.head_b.clone(), head),
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BaseVars<'t, T> {
        BaseVars {
            encoder: self.encoder.bind(tape, false),
            head_w: tape.constant(self.head_w.clone()),
            head_b: tape.constant(self.head_b.clone()),
        }
    }

    /// Gradient-free forward pass returning `(features, logits, attention)`.
    pub fn infer(&self, images: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let vars = self.bind_frozen(&tape);
        let out = vars.forward(&tape.constant(images))?;
        let take = |v: Var<'_, T>| v.value().as_ref().clone();
        Ok((take(out.features), take(out.logits), take(out.attention)))
    }

    /// Applies one optimizer step from the gradients held by `vars`.
    pub fn apply_grads(&mut self, vars: &BaseVars<'_, T>, opt: &mut Sgd<T>) {
        let grads: Vec<_> = vars.all().iter().map(|v| v.grad()).collect();
        let params = self.named_params_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(params, &grads);
    }

    pub fn cast<U: Real>(&self) -> BaseNetwork<U> {
        BaseNetwork {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            frozen_head: self.frozen_head,
        }
    }
}

/// Base network parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BaseVars<'t, T> {
    pub encoder: EncoderVars<'t, T>,
    pub head_w: Var<'t, T>,
    pub head_b: Var<'t, T>,
}

impl<'t, T: Real> BaseVars<'t, T> {
    /// Same order as [`BaseNetwork::named_params`].
    pub fn all(&self) -> Vec<Var<'t, T>> {
        let mut v = self.encoder.all().to_vec();
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }

    pub fn forward(&self, images: &Var<'t, T>) -> Result<BaseOutput<'t, T>> {
        let enc = self.encoder.forward(images)?;
        let logits = enc.features.matmul(&self.head_w)?.add(&self.head_b)?;
        Ok(BaseOutput {
            features: enc.features,
            logits,
            attention: enc.attention,
        })
    }
}

/// Triplet ordering network: shared encoder, `3d -> hidden -> 2` head.
///
/// Logit 0 means "the first candidate is closer to the anchor", logit 1
/// "the second candidate is closer".
#[derive(Clone, Debug, PartialEq)]
pub struct ExaminerNetwork<T> {
    pub config: NetConfig,
    pub encoder: Encoder<T>,
    pub hidden_w: Tensor<T>,
    pub hidden_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

pub const EXAMINER_HEAD_NAMES: [&str; 4] = [
    "head.hidden.weight",
    "head.hidden.bias",
    "head.out.weight",
    "head.out.bias",
];

impl<T: Real> ExaminerNetwork<T> {
    pub fn new<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(&config, rng);
        let (d, h) = (config.feature_dim, config.examiner_hidden);
        Ok(ExaminerNetwork {
            hidden_w: he_uniform(rng, &[3 * d, h], 3 * d),
            hidden_b: Tensor::zeros([h]),
            out_w: he_uniform(rng, &[h, 2], h),
            out_b: Tensor::zeros([2]),
            config,
            encoder,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v: Vec<_> = ENCODER_NAMES.into_iter().zip(self.encoder.tensors()).collect();
        v.extend(
            EXAMINER_HEAD_NAMES
                .into_iter()
                .zip([&self.hidden_w, &self.hidden_b, &self.out_w, &self.out_b]),
        );
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v: Vec<_> = ENCODER_NAMES.into_iter().zip(self.encoder.tensors_mut()).collect();
        v.extend(EXAMINER_HEAD_NAMES.into_iter().zip([
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]));
        v
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ExaminerVars<'t, T> {
        ExaminerVars {
            encoder: self.encoder.bind(tape, trainable),
            hidden_w: tape.leaf(self.hidden_w.clone(), trainable),
            hidden_b: tape.leaf(self.hidden_b.clone(), trainable),
            out_w: tape.leaf(self.out_w.clone(), trainable),
            out_b: tape.leaf(self.out_b.clone(), trainable),
        }
    }

    pub fn apply_grads(&mut self, vars: &ExaminerVars<'_, T>, opt: &mut Sgd<T>) {
        let grads: Vec<_> = vars.all().iter().map(|v| v.grad()).collect();
        let params = self.named_params_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(params, &grads);
    }

    pub fn cast<U: Real>(&self) -> ExaminerNetwork<U> {
        ExaminerNetwork {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            hidden_w: self.hidden_w.cast(),
            hidden_b: self.hidden_b.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }
}

/// Examiner output on a batch of triplets.
#[derive(Clone, Debug)]
pub struct ExaminerOutput<'t, T> {
    pub logits: Var<'t, T>,
    /// Channel attention of the anchor, first and second candidate encodings.
    pub attentions: Vec<Var<'t, T>>,
}

/// Pairwise examiner scores over one mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct PairwiseCloseness<'t, T> {
    /// `[m, m]`; entry `(a, b)` is the probability that image `b` is closer
    /// to anchor `a` than the augmented anchor.
    pub matrix: Var<'t, T>,
    /// Examiner channel attention of the un-augmented batch, `[m, c]`.
    pub attention: Var<'t, T>,
}

/// Examiner parameters bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct ExaminerVars<'t, T> {
    pub encoder: EncoderVars<'t, T>,
    pub hidden_w: Var<'t, T>,
    pub hidden_b: Var<'t, T>,
    pub out_w: Var<'t, T>,
    pub out_b: Var<'t, T>,
}

impl<'t, T: Real> ExaminerVars<'t, T> {
    /// Same order as [`ExaminerNetwork::named_params`].
    pub fn all(&self) -> Vec<Var<'t, T>> {
        let mut v = self.encoder.all().to_vec();
        v.extend([self.hidden_w, self.hidden_b, self.out_w, self.out_b]);
        v
    }

    fn head(&self, joint: &Var<'t, T>) -> Result<Var<'t, T>> {
        joint
            .matmul(&self.hidden_w)?
            .add(&self.hidden_b)?
            .relu()
            .matmul(&self.out_w)?
            .add(&self.out_b)
    }

    /// Scores triplets `[anchor, first, second]`, each `[t, c, h, w]`.
    pub fn forward(&self, images: &[Var<'t, T>]) -> Result<ExaminerOutput<'t, T>> {
        if images.len() != 3 {
            return Err(Error::invalid(
                "examiner_forward",
                format!("a triplet has 3 images, got {}", images.len()),
            ));
        }
        let shape = images[0].shape();
        if let Some(bad) = images.iter().find(|v| v.shape() != shape) {
            return Err(Error::shape("examiner_forward", &shape, &bad.shape()));
        }
        let encoded = images
            .iter()
            .map(|img| self.encoder.forward(img))
            .collect::<Result<Vec<_>>>()?;
        let feats: Vec<_> = encoded.iter().map(|e| e.features).collect();
        let logits = self.head(&Var::concat(&feats, 1)?)?;
        Ok(ExaminerOutput {
            logits,
            attentions: encoded.iter().map(|e| e.attention).collect(),
        })
    }

    /// Scores every `(anchor a, candidate b, augmented anchor)` triplet of a batch.
    ///
    /// The first head layer is linear in the concatenated encodings, so it is
    /// evaluated per image block and summed per pair instead of materialising
    /// `m^2` concatenations. [`ExaminerVars::forward`] gives the same numbers.
    pub fn pairwise_closeness(&self, batch: &Var<'t, T>, augmented: &Var<'t, T>) -> Result<PairwiseCloseness<'t, T>> {
        let m = batch.shape()[0];
        if augmented.shape() != batch.shape() {
            return Err(Error::shape("pairwise_closeness", &batch.shape(), &augmented.shape()));
        }
        let enc = self.encoder.forward(batch)?;
        let aug = self.encoder.forward(augmented)?;
        let d = enc.features.shape()[1];
        let block = |i: usize| -> Result<Var<'t, T>> {
            let rows: Vec<usize> = (i * d..(i + 1) * d).collect();
            self.hidden_w.index_select(0, &rows)
        };
        let anchor_part = enc
            .features
            .matmul(&block(0)?)?
            .add(&aug.features.matmul(&block(2)?)?)?;
        let cand_part = enc.features.matmul(&block(1)?)?;
        let anchors: Vec<usize> = (0..m * m).map(|r| r / m).collect();
        let cands: Vec<usize> = (0..m * m).map(|r| r % m).collect();
        let hidden = anchor_part
            .index_select(0, &anchors)?
            .add(&cand_part.index_select(0, &cands)?)?
            .add(&self.hidden_b)?
            .relu();
        let logits = hidden.matmul(&self.out_w)?.add(&self.out_b)?;
        let matrix = logits.softmax(1)?.index_select(1, &[0])?.reshape(&[m, m])?;
        Ok(PairwiseCloseness {
            matrix,
            attention: enc.attention,
        })
    }
}

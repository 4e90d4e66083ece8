use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::{EncoderSpec, HeadSpec, LossWeights, Task};
use crate::error::{PimError, Result};
use crate::nn::{
    bce_with_logits, ce_loss, dropout_backward, dropout_forward, global_max_pool_1d,
    global_max_pool_1d_backward, relu, relu_backward, softmax, AdamState, Archive, Conv1d, Dense,
    LayerNorm, LayerNormCache, Parameter, Tensor,
};
use crate::pseudo_labels::{LimbPair, PseudoLabelSet};
use crate::rng::{self, tag};
use crate::timeseries::{SensorPosition, Window};

pub const CHECKPOINT_KIND: &str = "pim-model";

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub convs: Vec<Conv1d>,
}

/// Activations kept by [`Encoder::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    inputs: Vec<Tensor>,
    pre_act: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
    pooled_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        spec: &EncoderSpec,
        n_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = n_channels;
        let mut convs = Vec::with_capacity(spec.conv_channels.len());
        for (&out_ch, &k) in spec.conv_channels.iter().zip(&spec.kernel_sizes) {
            convs.push(Conv1d::new(in_ch, out_ch, k, spec.stride, rng));
            in_ch = out_ch;
        }
        Ok(Encoder {
            spec: spec.clone(),
            convs,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].weight.shape()[1]
    }

    /// `x: [batch, channels, len]` to `[batch, embedding_dim]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor, EncoderTrace)> {
        let mut trace = EncoderTrace {
            inputs: Vec::with_capacity(self.convs.len()),
            pre_act: Vec::with_capacity(self.convs.len()),
            masks: Vec::with_capacity(self.convs.len()),
            pooled_shape: Vec::new(),
            argmax: Vec::new(),
        };
        let mut h = x.clone();
        for conv in &self.convs {
            let z = conv.forward(&h)?;
            let (out, mask) = dropout_forward(&relu(&z), self.spec.dropout, train, rng);
            trace.inputs.push(std::mem::replace(&mut h, out));
            trace.pre_act.push(z);
            trace.masks.push(mask);
        }
        let (pooled, argmax) = global_max_pool_1d(&h)?;
        trace.pooled_shape = h.shape().to_vec();
        trace.argmax = argmax;
        Ok((pooled, trace))
    }

    /// Parameter gradients in [`Encoder::params`] order.
    pub fn backward(&self, trace: &EncoderTrace, d_emb: &Tensor) -> Result<Vec<Tensor>> {
        let mut dh = global_max_pool_1d_backward(&trace.argmax, &trace.pooled_shape, d_emb)?;
        let mut grads = vec![Vec::new(); self.convs.len()];
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let da = dropout_backward(trace.masks[i].as_ref(), &dh)?;
            let dz = relu_backward(&trace.pre_act[i], &da)?;
            let (dx, [dw, db]) = conv.backward(&trace.inputs[i], &dz)?;
            grads[i] = vec![dw, db];
            dh = dx;
        }
        Ok(grads.into_iter().flatten().collect())
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &c.weight));
            out.push((format!("encoder.conv{i}.bias"), &c.bias));
        }
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }

    /// SHA-256 over the weight values, hex encoded.
    pub fn weights_hash(&self) -> String {
        hash_params(self.params())
    }
}

/// An MLP head: hidden dense layers with ReLU (layer norm after the first),
/// then a linear output layer producing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub hidden: Vec<Dense>,
    pub norm: Option<LayerNorm>,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    inputs: Vec<Tensor>,
    pre_act: Vec<Tensor>,
    norm: Option<LayerNormCache>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(spec: &HeadSpec, embedding_dim: usize, rng: &mut R) -> Self {
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = embedding_dim;
        for &w in &spec.hidden {
            hidden.push(Dense::new(fan_in, w, rng));
            fan_in = w;
        }
        let norm = (spec.hidden.len() >= 2).then(|| LayerNorm::new(spec.hidden[0]));
        Head {
            spec: spec.clone(),
            hidden,
            norm,
            out: Dense::new(fan_in, spec.output_dim, rng),
        }
    }

    pub fn forward(&self, emb: &Tensor) -> Result<(Tensor, HeadTrace)> {
        let mut trace = HeadTrace {
            inputs: Vec::with_capacity(self.hidden.len() + 1),
            pre_act: Vec::with_capacity(self.hidden.len()),
            norm: None,
        };
        let mut h = emb.clone();
        for (i, layer) in self.hidden.iter().enumerate() {
            let mut z = layer.forward(&h)?;
            if let (0, Some(norm)) = (i, &self.norm) {
                let (y, cache) = norm.forward(&z)?;
                z = y;
                trace.norm = Some(cache);
            }
            let a = relu(&z);
            trace.inputs.push(std::mem::replace(&mut h, a));
            trace.pre_act.push(z);
        }
        let logits = self.out.forward(&h)?;
        trace.inputs.push(h);
        Ok((logits, trace))
    }

    /// Returns the embedding gradient and parameter gradients in
    /// [`Head::params`] order.
    pub fn backward(&self, trace: &HeadTrace, d_logits: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let n_hidden = self.hidden.len();
        let (mut dh, [dw_out, db_out]) = self.out.backward(&trace.inputs[n_hidden], d_logits)?;
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); n_hidden];
        for i in (0..n_hidden).rev() {
            let mut dz = relu_backward(&trace.pre_act[i], &dh)?;
            let mut norm_grads = Vec::new();
            if let (0, Some(norm), Some(cache)) = (i, &self.norm, &trace.norm) {
                let (dx, [dg, db]) = norm.backward(cache, &dz)?;
                dz = dx;
                norm_grads = vec![dg, db];
            }
            let (dx, [dw, db]) = self.hidden[i].backward(&trace.inputs[i], &dz)?;
            per_layer[i] = [vec![dw, db], norm_grads].concat();
            dh = dx;
        }
        let mut grads: Vec<Tensor> = per_layer.into_iter().flatten().collect();
        grads.push(dw_out);
        grads.push(db_out);
        Ok((dh, grads))
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (i, d) in self.hidden.iter().enumerate() {
            out.push((format!("{prefix}.hidden{i}.weight"), &d.weight));
            out.push((format!("{prefix}.hidden{i}.bias"), &d.bias));
            if let (0, Some(n)) = (i, &self.norm) {
                out.push((format!("{prefix}.norm.gamma"), &n.gamma));
                out.push((format!("{prefix}.norm.beta"), &n.beta));
            }
        }
        out.push((format!("{prefix}.out.weight"), &self.out.weight));
        out.push((format!("{prefix}.out.bias"), &self.out.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        let mut norm = self.norm.as_mut();
        for (i, d) in self.hidden.iter_mut().enumerate() {
            out.extend(d.params_mut());
            if i == 0 {
                if let Some(n) = norm.take() {
                    out.extend(n.params_mut());
                }
            }
        }
        out.extend(self.out.params_mut());
        out
    }
}

/// Loss of one chunk or batch, split by family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub angle: f64,
    pub motion: f64,
    pub symmetry: f64,
}

impl LossTerms {
    pub fn scaled(self, s: f64) -> Self {
        LossTerms {
            total: self.total * s,
            angle: self.angle * s,
            motion: self.motion * s,
            symmetry: self.symmetry * s,
        }
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.angle += o.angle;
        self.motion += o.motion;
        self.symmetry += o.symmetry;
    }
}

/// What a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Pseudo-label heads with weighted family losses.
    Pretrain(LossWeights),
    /// Activity labels through the classifier head.
    Classify,
}

/// Encoder plus heads. A pre-training model carries the pretext heads, a
/// downstream model carries a single classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct PimModel {
    pub n_channels: usize,
    pub window_len: usize,
    pub encoder: Encoder,
    pub heads: Vec<Head>,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    n_channels: usize,
    window_len: usize,
    encoder: EncoderSpec,
    heads: Vec<HeadSpec>,
    adam: AdamState,
    #[serde(default)]
    extra: serde_json::Value,
}

impl PimModel {
    /// Fresh model with seeded initialization. Encoder and each head draw from
    /// their own streams, so the encoder init does not depend on the heads.
    pub fn new(
        encoder: &EncoderSpec,
        heads: &[HeadSpec],
        n_channels: usize,
        window_len: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_channels == 0 {
            return Err(PimError::EmptyInput("model with zero input channels"));
        }
        if encoder.conv_lengths(window_len).is_none() {
            return Err(PimError::SeriesTooShort {
                n_samples: window_len,
                window_len: encoder.min_window_len(),
            });
        }
        let enc = Encoder::new(
            encoder,
            n_channels,
            &mut rng::stream(seed, &[tag::ENCODER_INIT]),
        )?;
        let dim = encoder.embedding_dim();
        let heads = heads
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let t = if h.task == Task::Classifier {
                    rng::stream(seed, &[tag::CLASSIFIER_INIT])
                } else {
                    rng::stream(seed, &[tag::HEAD_INIT, j as u64])
                };
                Head::new(h, dim, &mut { t })
            })
            .collect();
        Ok(PimModel {
            n_channels,
            window_len,
            encoder: enc,
            heads,
            adam: AdamState::new(lr)?,
        })
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        self.heads.iter().map(|h| h.spec.clone()).collect()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.heads
            .iter()
            .find(|h| h.spec.task == Task::Classifier)
            .map(|h| h.spec.output_dim)
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = self.encoder.named_params();
        for (j, h) in self.heads.iter().enumerate() {
            out.extend(h.named_params(&format!("heads.{j}")));
        }
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn weights_hash(&self) -> String {
        hash_params(self.params())
    }

    /// Stacks windows into `[batch, channels, len]`.
    pub fn batch_input(&self, windows: &[&Window]) -> Result<Tensor> {
        if windows.is_empty() {
            return Err(PimError::EmptyInput("batch"));
        }
        let mut data = Vec::with_capacity(windows.len() * self.n_channels * self.window_len);
        for w in windows {
            if w.n_channels() != self.n_channels || w.len() != self.window_len {
                return Err(PimError::ShapeMismatch(format!(
                    "window is {}x{}, model expects {}x{}",
                    w.n_channels(),
                    w.len(),
                    self.n_channels,
                    self.window_len
                )));
            }
            data.extend_from_slice(w.data.as_slice());
        }
        Tensor::new(vec![windows.len(), self.n_channels, self.window_len], data)
    }

    /// Embeddings `[batch, r]`.
    pub fn embed<R: Rng + ?Sized>(&self, x: &Tensor, train: bool, rng: &mut R) -> Result<Tensor> {
        Ok(self.encoder.forward(x, train, rng)?.0)
    }

    /// Mean loss over `windows` and, when `with_grad`, gradients in
    /// [`PimModel::params`] order. Loss and gradients are multiplied by `scale`.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        windows: &[&Window],
        objective: &Objective,
        train: bool,
        rng: &mut R,
        scale: f64,
        with_grad: bool,
    ) -> Result<(LossTerms, Option<Vec<Tensor>>)> {
        let x = self.batch_input(windows)?;
        let (emb, enc_trace) = self.encoder.forward(&x, train, rng)?;

        let coeffs = self.head_coefficients(objective);
        let mut terms = LossTerms::default();
        let mut d_emb = Tensor::zeros(emb.shape());
        let mut head_grads = Vec::with_capacity(self.heads.len());
        for (head, &coef) in self.heads.iter().zip(&coeffs) {
            let (logits, trace) = head.forward(&emb)?;
            let (loss, dlogits) = head_loss(head, &logits, windows)?;
            match head.spec.task {
                Task::Angle => terms.angle += loss * coef.family_share,
                Task::Speed => terms.motion += loss * coef.family_share,
                Task::Symmetry => terms.symmetry += loss * coef.family_share,
                Task::Classifier => {}
            }
            terms.total += loss * coef.weight;
            if with_grad {
                let k = coef.weight * scale;
                let (de, g) = head.backward(&trace, &dlogits.map(|v| v * k))?;
                d_emb.add_assign(&de)?;
                head_grads.push(g);
            }
        }
        let terms = terms.scaled(scale);
        if !with_grad {
            return Ok((terms, None));
        }
        let mut grads = self.encoder.backward(&enc_trace, &d_emb)?;
        grads.extend(head_grads.into_iter().flatten());
        Ok((terms, Some(grads)))
    }

    /// Classifier probabilities `[batch, n_classes]`, dropout off.
    pub fn predict_proba(&self, windows: &[&Window]) -> Result<Tensor> {
        let head = self
            .heads
            .iter()
            .find(|h| h.spec.task == Task::Classifier)
            .ok_or_else(|| PimError::InvalidParameter("model has no classifier head".into()))?;
        let x = self.batch_input(windows)?;
        let emb = self.embed(&x, false, &mut rng::stream(0, &[]))?;
        Ok(softmax(&head.forward(&emb)?.0))
    }

    /// Per-head multiplier on the head's mean loss in the total, and its share
    /// within its family.
    fn head_coefficients(&self, objective: &Objective) -> Vec<HeadCoef> {
        let count = |t: Task| {
            self.heads
                .iter()
                .filter(|h| h.spec.task == t)
                .count()
                .max(1) as f64
        };
        let (na, ns, nsym) = (
            count(Task::Angle),
            count(Task::Speed),
            count(Task::Symmetry),
        );
        self.heads
            .iter()
            .map(|h| {
                let (family_share, family_weight) = match (h.spec.task, objective) {
                    (Task::Angle, Objective::Pretrain(w)) => (1.0 / na, w.beta),
                    (Task::Speed, Objective::Pretrain(w)) => (1.0 / ns, w.gamma),
                    (Task::Symmetry, Objective::Pretrain(w)) => (1.0 / nsym, w.alpha),
                    (Task::Classifier, Objective::Classify) => (1.0, 1.0),
                    _ => (0.0, 0.0),
                };
                HeadCoef {
                    family_share,
                    weight: family_share * family_weight,
                }
            })
            .collect()
    }

    pub fn to_archive(&self, extra: serde_json::Value) -> Result<Archive> {
        let meta = ModelMeta {
            n_channels: self.n_channels,
            window_len: self.window_len,
            encoder: self.encoder.spec.clone(),
            heads: self.head_specs(),
            adam: self.adam,
            extra,
        };
        let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
        for (name, p) in self.named_params() {
            a.push(
                name,
                p.shape().to_vec(),
                vec![
                    p.value.data().to_vec(),
                    p.adam_m.data().to_vec(),
                    p.adam_v.data().to_vec(),
                ],
            );
        }
        Ok(a)
    }

    /// Rebuilds a model from an archive; returns it with the archive's
    /// free-form `extra` metadata.
    pub fn from_archive(a: &Archive) -> Result<(Self, serde_json::Value)> {
        if a.kind != CHECKPOINT_KIND {
            return Err(PimError::Format(format!(
                "expected a `{CHECKPOINT_KIND}` archive, found `{}`",
                a.kind
            )));
        }
        let meta: ModelMeta = serde_json::from_value(a.meta.clone())?;
        let mut model = PimModel::new(
            &meta.encoder,
            &meta.heads,
            meta.n_channels,
            meta.window_len,
            meta.adam.lr,
            0,
        )?;
        model.adam = meta.adam;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.params_mut()) {
            let e = a.entry(name)?;
            if e.shape != p.shape() || e.blocks.len() != 3 {
                return Err(PimError::ShapeMismatch(format!(
                    "tensor `{name}`: archive {:?} x{} blocks, model {:?}",
                    e.shape,
                    e.blocks.len(),
                    p.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(&e.blocks[0]);
            p.adam_m.data_mut().copy_from_slice(&e.blocks[1]);
            p.adam_v.data_mut().copy_from_slice(&e.blocks[2]);
        }
        Ok((model, meta.extra))
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadCoef {
    family_share: f64,
    weight: f64,
}

fn hash_params(params: Vec<&Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn pseudo_of<'a>(w: &'a Window, i: usize) -> Result<&'a PseudoLabelSet> {
    w.pseudo.as_ref().ok_or(PimError::NoPseudoLabels(i))
}

fn missing_key(head: &HeadSpec) -> PimError {
    PimError::MissingSensor(format!(
        "pseudo-labels lack `{}` for the {:?} head",
        head.key, head.task
    ))
}

fn check_bin(bin: usize, bins: usize) -> Result<usize> {
    if bin >= bins {
        return Err(PimError::IndexOutOfRange {
            index: bin,
            len: bins,
        });
    }
    Ok(bin)
}

/// Mean loss of one head and the gradient with respect to its logits.
fn head_loss(head: &Head, logits: &Tensor, windows: &[&Window]) -> Result<(f64, Tensor)> {
    let spec = &head.spec;
    match spec.task {
        Task::Angle => {
            let pos = SensorPosition::from(spec.key.as_str());
            let blocks = spec.output_dim / 3;
            let mut target = Tensor::zeros(&[windows.len(), spec.output_dim]);
            for (i, w) in windows.iter().enumerate() {
                let bins = pseudo_of(w, i)?
                    .angle_bins
                    .get(&pos)
                    .ok_or_else(|| missing_key(spec))?;
                for (axis, &b) in bins.iter().enumerate() {
                    target.data_mut()
                        [i * spec.output_dim + axis * blocks + check_bin(b, blocks)?] = 1.0;
                }
            }
            bce_with_logits(logits, &target)
        }
        Task::Speed => {
            let pos = SensorPosition::from(spec.key.as_str());
            let t = windows
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let b = *pseudo_of(w, i)?
                        .speed_bins
                        .get(&pos)
                        .ok_or_else(|| missing_key(spec))?;
                    check_bin(b, spec.output_dim)
                })
                .collect::<Result<Vec<_>>>()?;
            ce_loss(logits, &t)
        }
        Task::Symmetry => {
            let pair = LimbPair::parse(&spec.key).ok_or_else(|| missing_key(spec))?;
            let t = windows
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let b = *pseudo_of(w, i)?
                        .symmetry_bins
                        .get(&pair)
                        .ok_or_else(|| missing_key(spec))?;
                    check_bin(b, spec.output_dim)
                })
                .collect::<Result<Vec<_>>>()?;
            ce_loss(logits, &t)
        }
        Task::Classifier => {
            let t = windows
                .iter()
                .map(|w| {
                    let l = w
                        .label
                        .ok_or(PimError::EmptyInput("unlabeled window in fine-tuning"))?;
                    check_bin(l, spec.output_dim)
                })
                .collect::<Result<Vec<_>>>()?;
            ce_loss(logits, &t)
        }
    }
}

//! Auxiliary attention-sharpening classifier.
//!
//! A bias-free linear layer over the global average pool of C(I). Because there is no
//! bias and pooling is a mean, the class activation map `Σ_k w_k^c C^(k)(i,j)` averages
//! exactly to the class logit; that map is the embedding fed to the attention model.

use rand::Rng;

use crate::engine::{he_normal, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone)]
pub struct AasClassifier {
    /// `[D, classes]`; column `c` is `w^c`.
    pub weight: ParamId,
    pub channels: usize,
    pub classes: usize,
}

impl AasClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, classes: usize, rng: &mut R) -> Self {
        let w = he_normal(&[channels, classes], channels, rng);
        AasClassifier {
            weight: store.add("aas.weight", w),
            channels,
            classes,
        }
    }

    fn check_conv(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "aas",
                format!("expected [N,{},H,W] maps, got {shape:?}", self.channels),
            ));
        }
        Ok(())
    }

    /// Logits from pooled features `[N, D]`.
    pub fn logits_from_pooled<'t>(&self, tape: &'t Tape, store: &ParamStore, pooled: Var<'t>) -> Result<Var<'t>> {
        pooled.linear(tape.param(store, self.weight), None)
    }

    /// Logits `[N, classes]` from conv maps `[N, D, H, W]`.
    pub fn classify<'t>(&self, tape: &'t Tape, store: &ParamStore, conv: Var<'t>) -> Result<Var<'t>> {
        self.check_conv(&conv.shape())?;
        self.logits_from_pooled(tape, store, conv.global_avg_pool()?)
    }

    /// Class activation maps `[N, H·W]` for one class per sample.
    pub fn cam<'t>(&self, tape: &'t Tape, store: &ParamStore, conv: Var<'t>, classes: &[usize]) -> Result<Var<'t>> {
        let s = conv.shape();
        self.check_conv(&s)?;
        if classes.len() != s[0] {
            return Err(Error::shape(
                "cam_embedding",
                format!("{} classes for batch of {}", classes.len(), s[0]),
            ));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.classes) {
            return Err(Error::invalid(format!("class {c} out of range 0..{}", self.classes)));
        }
        let (n, d, p) = (s[0], s[1], s[2] * s[3]);
        let w_rows = tape.param(store, self.weight).transpose()?.gather(classes)?;
        let cam = w_rows
            .reshape(&[n, 1, d])?
            .bmm(conv.reshape(&[n, d, p])?)?;
        cam.reshape(&[n, p])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn loss<'t>(&self, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        if let Some(&c) = labels.iter().find(|&&c| c >= self.classes) {
            return Err(Error::invalid(format!("label {c} out of range 0..{}", self.classes)));
        }
        let w = vec![1.0 / labels.len() as f64; labels.len()];
        logits.log_softmax(1)?.nll_loss(labels, &w)
    }
}

/// Logits and probabilities for a single `[D, H', W']` map.
pub fn classify(aas: &AasClassifier, store: &ParamStore, conv: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let x = tape.input(single(conv)?);
    let logits = aas.classify(&tape, store, x)?;
    let probs = logits.softmax(1)?;
    Ok((logits.value().data().to_vec(), probs.value().data().to_vec()))
}

/// Flattened `H'·W'` class activation map of a single `[D, H', W']` map.
pub fn cam_embedding(aas: &AasClassifier, store: &ParamStore, conv: &Tensor, class: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.input(single(conv)?);
    let cam = aas.cam(&tape, store, x, &[class])?;
    Ok(cam.value().index0(0))
}

/// `−ln softmax(logits)[label]`.
pub fn aas_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range 0..{}", logits.len())));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn single(conv: &Tensor) -> Result<Tensor> {
    if conv.rank() != 3 {
        return Err(Error::shape("aas", format!("expected [D,H,W], got {:?}", conv.shape())));
    }
    let mut s = vec![1];
    s.extend_from_slice(conv.shape());
    conv.reshape(&s)
}

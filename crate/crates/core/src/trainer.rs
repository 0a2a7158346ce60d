//! Joint objective, composite image-model update and the baseline regimes.
//!
//! Parameters are partitioned by name: `image.` is θ_D, `aas.` is θ_M and `lang.` is
//! θ_L. Each step runs one forward pass and two backward passes, one per loss, so the
//! two gradient sets never mix except inside [`composite_update`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Gradients, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::image_model::{hwc_to_nchw, Mode};
use crate::language::make_task_batch;
use crate::model::{CamSource, Mdnet};
use crate::synth::reports::{Report, VARIANTS};
use crate::synth::Case;

pub const IMAGE_PREFIX: &str = "image.";
pub const AAS_PREFIX: &str = "aas.";
pub const LANG_PREFIX: &str = "lang.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRegime {
    /// Composite update of the image model from both losses.
    Joint,
    /// Image model and classifier on L_M, then the language model on frozen features.
    Pretrain,
    /// As `Pretrain`, but the second phase also moves the image model by L_L.
    Finetune,
}

impl std::str::FromStr for TrainRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainRegime::Joint),
            "pretrain" => Ok(TrainRegime::Pretrain),
            "finetune" => Ok(TrainRegime::Finetune),
            _ => Err(Error::invalid(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSchedule {
    /// `σ(κ·(s/T − ½))`.
    Logistic { kappa: f64 },
    Constant(f64),
}

/// Which of the five report variants supervises a case at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantChoice {
    Random,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// λ.
    pub lr: f64,
    /// η.
    pub eta: f64,
    pub beta: BetaSchedule,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of total steps after which λ is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    /// Ablation: replace `(1−β)` by 1 on the L_M gradient.
    pub drop_one_minus_beta: bool,
    pub variant: VariantChoice,
    /// Rescales each loss's gradient set to at most this global L2 norm before the
    /// update; `None` leaves gradients as computed.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            eta: 5.0,
            beta: BetaSchedule::Logistic { kappa: 12.0 },
            batch: 10,
            epochs: 60,
            seed: 0,
            lr_decay_at: 0.8,
            lr_decay: 0.1,
            drop_one_minus_beta: false,
            variant: VariantChoice::Random,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be at least 1"));
        }
        if let VariantChoice::Fixed(v) = self.variant {
            if v >= VARIANTS {
                return Err(Error::invalid(format!("report variant {v} out of range 0..{VARIANTS}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip norm must be > 0, got {c}")));
            }
        }
        if let BetaSchedule::Constant(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::invalid(format!("beta must lie in [0, 1], got {b}")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }

    /// λ at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if (step as f64) >= self.lr_decay_at * total as f64 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// `σ(κ·(s/T − ½))`.
pub fn beta_at(step: usize, total: usize, kappa: f64) -> f64 {
    let x = kappa * (step as f64 / total.max(1) as f64 - 0.5);
    1.0 / (1.0 + (-x).exp())
}

pub fn beta_for(schedule: BetaSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        BetaSchedule::Logistic { kappa } => beta_at(step, total, kappa),
        BetaSchedule::Constant(b) => b,
    }
}

/// `θ ← θ − λ·((1−β)·g_M + β·η·g_L)` for every id. A gradient missing from one set
/// counts as zero; present gradients of different shapes are rejected.
pub fn composite_update(
    store: &mut ParamStore,
    ids: &[ParamId],
    grad_m: &Gradients,
    grad_l: &Gradients,
    lr: f64,
    beta: f64,
    eta: f64,
) -> Result<()> {
    composite_update_weighted(store, ids, grad_m, grad_l, lr, 1.0 - beta, beta * eta)
}

/// `θ ← θ − λ·(w_M·g_M + w_L·g_L)`.
pub fn composite_update_weighted(
    store: &mut ParamStore,
    ids: &[ParamId],
    grad_m: &Gradients,
    grad_l: &Gradients,
    lr: f64,
    w_m: f64,
    w_l: f64,
) -> Result<()> {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        for g in [grad_m.param(id), grad_l.param(id)].into_iter().flatten() {
            if g.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "composite_update",
                    format!("gradient {:?} vs parameter {shape:?}", g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
            }
        }
    }
    for &id in ids {
        let gm = grad_m.param(id);
        let gl = grad_l.param(id);
        let v = store.value_mut(id).data_mut();
        for (i, x) in v.iter_mut().enumerate() {
            let a = gm.map_or(0.0, |g| g.data()[i]);
            let b = gl.map_or(0.0, |g| g.data()[i]);
            *x -= lr * (w_m * a + w_l * b);
        }
    }
    Ok(())
}

/// Plain descent on `ids` using one gradient set.
pub fn sgd_from(store: &mut ParamStore, ids: &[ParamId], grads: &Gradients, lr: f64) -> Result<()> {
    for &id in ids {
        if let Some(g) = grads.param(id) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
            }
        }
    }
    for &id in ids {
        if let Some(g) = grads.param(id) {
            for (x, &d) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }
    Ok(())
}

/// Mean absolute gradient over every element of `ids`; missing gradients count as zero.
pub fn mean_abs_grad(store: &ParamStore, ids: &[ParamId], grads: &Gradients) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for &id in ids {
        n += store.value(id).numel();
        if let Some(g) = grads.param(id) {
            sum += g.data().iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_m: f64,
    pub loss_l: f64,
    pub beta: f64,
    pub gm_mag: f64,
    pub gl_mag: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,L_M,L_L,beta,gm_mag,gl_mag\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.step, r.loss_m, r.loss_l, r.beta, r.gm_mag, r.gl_mag
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Factor bringing the global L2 norm of `grads` down to `max_norm`, or 1.
fn clip_scale(grads: &Gradients, max_norm: f64) -> f64 {
    let norm = grads.params().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// How one step moves each parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
struct StepPlan {
    image_mode: Mode,
    /// Weights on (g_M, g_L) for θ_D; `None` leaves θ_D untouched.
    image_weights: Option<(f64, f64)>,
    train_aas: bool,
    train_lang: bool,
    need_lang: bool,
}

struct Ids {
    image: Vec<ParamId>,
    aas: Vec<ParamId>,
    lang: Vec<ParamId>,
}

impl Ids {
    fn of(store: &ParamStore) -> Self {
        Ids {
            image: store.ids_with_prefix(IMAGE_PREFIX),
            aas: store.ids_with_prefix(AAS_PREFIX),
            lang: store.ids_with_prefix(LANG_PREFIX),
        }
    }
}

/// Case indices in per-epoch shuffled order, chunked into batches.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn run_step(
    model: &mut Mdnet,
    ids: &Ids,
    cases: &[&Case],
    variants: &[usize],
    plan: StepPlan,
    lr: f64,
    clip: Option<f64>,
    step: usize,
) -> Result<(f64, f64, f64, f64)> {
    let images: Vec<_> = cases.iter().map(|c| c.image.clone()).collect();
    let labels: Vec<usize> = cases.iter().map(|c| c.label.index()).collect();
    let reports: Vec<&Report> = cases.iter().zip(variants).map(|(c, &v)| &c.reports[v]).collect();
    let b = cases.len() as f64;

    let tape = Tape::new();
    let x = tape.input(hwc_to_nchw(&images)?);
    let fwd = model.forward(&tape, x, plan.image_mode, CamSource::Labels(&labels))?;
    let loss_m = model.aas.loss(fwd.logits, &labels)?;
    let lm = loss_m.value().item();
    let (loss_l, ll) = if plan.need_lang {
        let seqs = make_task_batch(&reports, &model.vocab)?;
        let w = vec![1.0 / b; seqs.len()];
        let l = model.lang.batch_loss(&tape, &model.store, &fwd.features, &seqs, &w, model.vocab.end())?;
        let v = l.value().item();
        (Some(l), v)
    } else {
        (None, 0.0)
    };
    if !lm.is_finite() || !ll.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step} (L_M={lm}, L_L={ll})")));
    }
    let need_m = plan.train_aas || plan.image_weights.is_some_and(|(wm, _)| wm != 0.0);
    let gm = if need_m { Some(tape.backward(loss_m)?) } else { None };
    let gl = match loss_l {
        Some(l) => Some(tape.backward(l)?),
        None => None,
    };
    let zero = Gradients::default();
    let gm = gm.as_ref().unwrap_or(&zero);
    let gl = gl.as_ref().unwrap_or(&zero);

    let gm_mag = mean_abs_grad(&model.store, &ids.image, gm);
    let gl_mag = mean_abs_grad(&model.store, &ids.image, gl);
    let (sm, sl) = match clip {
        Some(c) => (clip_scale(gm, c), clip_scale(gl, c)),
        None => (1.0, 1.0),
    };
    let wrap = |e: Error| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
        e => e,
    };
    if plan.train_aas {
        sgd_from(&mut model.store, &ids.aas, gm, lr * sm).map_err(wrap)?;
    }
    if plan.train_lang {
        sgd_from(&mut model.store, &ids.lang, gl, lr * sl).map_err(wrap)?;
    }
    if let Some((wm, wl)) = plan.image_weights {
        composite_update_weighted(&mut model.store, &ids.image, gm, gl, lr, wm * sm, wl * sl).map_err(wrap)?;
    }
    if plan.image_mode == Mode::Train && plan.image_weights.is_some() {
        fwd.bn_updates.apply(&mut model.store);
    }
    Ok((lm, ll, gm_mag, gl_mag))
}

/// One training phase over `cases`, `cfg.epochs` epochs.
fn run_phase(
    model: &mut Mdnet,
    cases: &[Case],
    cfg: &TrainConfig,
    plan_at: &dyn Fn(f64) -> StepPlan,
    beta_of: &dyn Fn(usize, usize) -> f64,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    let ids = Ids::of(&model.store);
    let per_epoch = cfg.steps_per_epoch(cases.len());
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(cases.len(), cfg.batch, rng) {
            let chosen: Vec<&Case> = batch.iter().map(|&i| &cases[i]).collect();
            let variants: Vec<usize> = match cfg.variant {
                VariantChoice::Fixed(v) => vec![v; chosen.len()],
                VariantChoice::Random => chosen.iter().map(|_| rng.gen_range(0..VARIANTS)).collect(),
            };
            let beta = beta_of(step, total);
            let plan = plan_at(beta);
            let lr = cfg.lr_at(step, total);
            let (lm, ll, gm_mag, gl_mag) = run_step(model, &ids, &chosen, &variants, plan, lr, cfg.clip_norm, log.steps.len())?;
            let rec = StepLog { step: log.steps.len(), loss_m: lm, loss_l: ll, beta, gm_mag, gl_mag };
            progress(&rec);
            log.steps.push(rec);
            step += 1;
        }
    }
    Ok(())
}

/// Trains `model` in place under `regime`. Baselines run each phase for `cfg.epochs`.
pub fn train(
    model: &mut Mdnet,
    cases: &[Case],
    cfg: &TrainConfig,
    regime: TrainRegime,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<TrainLog> {
    train_observed(model, cases, cfg, regime, progress, &mut |_, _| {})
}

/// As [`train`], calling `phase_done(phase, model)` after each phase (one for the joint
/// regime, two for the baselines).
pub fn train_observed(
    model: &mut Mdnet,
    cases: &[Case],
    cfg: &TrainConfig,
    regime: TrainRegime,
    progress: &mut dyn FnMut(&StepLog),
    phase_done: &mut dyn FnMut(usize, &Mdnet),
) -> Result<TrainLog> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut log = TrainLog::default();
    match regime {
        TrainRegime::Joint => {
            let drop = cfg.drop_one_minus_beta;
            let eta = cfg.eta;
            let plan = move |beta: f64| StepPlan {
                image_mode: Mode::Train,
                image_weights: Some((if drop { 1.0 } else { 1.0 - beta }, beta * eta)),
                train_aas: true,
                train_lang: true,
                need_lang: true,
            };
            let sched = cfg.beta;
            run_phase(model, cases, cfg, &plan, &|s, t| beta_for(sched, s, t), &mut rng, &mut log, progress)?;
            phase_done(0, model);
        }
        TrainRegime::Pretrain | TrainRegime::Finetune => {
            let phase1 = |_: f64| StepPlan {
                image_mode: Mode::Train,
                image_weights: Some((1.0, 0.0)),
                train_aas: true,
                train_lang: false,
                need_lang: false,
            };
            run_phase(model, cases, cfg, &phase1, &|_, _| 0.0, &mut rng, &mut log, progress)?;
            phase_done(0, model);
            let finetune = regime == TrainRegime::Finetune;
            let phase2 = move |_: f64| StepPlan {
                image_mode: if finetune { Mode::Train } else { Mode::Eval },
                image_weights: if finetune { Some((0.0, 1.0)) } else { None },
                train_aas: false,
                train_lang: true,
                need_lang: true,
            };
            run_phase(model, cases, cfg, &phase2, &|_, _| 1.0, &mut rng, &mut log, progress)?;
            phase_done(1, model);
        }
    }
    Ok(log)
}

/// Joint training; see [`train`].
pub fn train_mdnet(model: &mut Mdnet, cases: &[Case], cfg: &TrainConfig) -> Result<TrainLog> {
    train(model, cases, cfg, TrainRegime::Joint, &mut |_| {})
}

/// Baseline training; `regime` must not be `Joint`.
pub fn train_baseline(model: &mut Mdnet, cases: &[Case], cfg: &TrainConfig, regime: TrainRegime) -> Result<TrainLog> {
    if regime == TrainRegime::Joint {
        return Err(Error::invalid("train_baseline needs a baseline regime"));
    }
    train(model, cases, cfg, regime, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> Gradients {
        let tape = Tape::new();
        let p = tape.param(store, id);
        let loss = p.scale(g).sum();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        assert_eq!(beta_at(50, 100, 12.0), 0.5);
        assert!((beta_at(0, 100, 12.0) - 0.002_472_623_156_634_775).abs() < 1e-15);
        assert!((beta_at(100, 100, 12.0) - 0.997_527_376_843_365_2).abs() < 1e-15);
        for s in 0..100 {
            assert!(beta_at(s + 1, 100, 12.0) > beta_at(s, 100, 12.0));
        }
    }

    #[test]
    fn scalar_composite_example() {
        let mut store = ParamStore::new();
        let id = store.add("image.w", Tensor::scalar(1.0));
        let gm = grads_for(&store, id, 0.2);
        let gl = grads_for(&store, id, 0.02);
        composite_update(&mut store, &[id], &gm, &gl, 0.1, 0.5, 5.0).unwrap();
        assert!((store.value(id).item() - 0.985).abs() < 1e-15);
    }

    #[test]
    fn lr_decays_late() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(79, 100), 0.01);
        assert!((c.lr_at(80, 100) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs_rejected() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { variant: VariantChoice::Fixed(5), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta: BetaSchedule::Constant(1.5), ..ok }.validate().is_err());
    }
}

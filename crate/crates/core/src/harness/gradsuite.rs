//! Finite-difference suite over every primitive and the model's composite pieces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{concat, concat_channels, grad_check_params, BnMode, ParamId, ParamStore, Tape, Var, DEFAULT_EPS};
use crate::error::Result;
use crate::image_model::{ensemble_connect_forward, hwc_to_nchw, identity_block_forward, BnUpdates, BottleneckBlock, Mode};
use crate::language::{make_task_batch, LangConfig, LangModel, LstmState, Vocab};
use crate::model::{Mdnet, ModelConfig};
use crate::synth::{generate, Report, SynthConfig};
use crate::tensor::Tensor;

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < SUITE_TOLERANCE
    }
}

type Body = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Random leaves of `shapes`, contracted against a fixed random projection of the output.
fn check_leaves(seed: u64, shapes: &[&[usize]], away_from_zero: bool, body: &Body) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut t = Tensor::randn(s, 1.0, &mut rng);
            if away_from_zero {
                t = t.map(|v| v + 0.2 * v.signum());
            }
            store.add(format!("x{k}"), t)
        })
        .collect();
    let out_shape = {
        let tape = Tape::new();
        let leaves: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        body(&tape, &leaves)?.shape()
    };
    let proj = Tensor::randn(&out_shape, 1.0, &mut rng);
    grad_check_params(
        &mut store,
        &ids,
        |tape, store| {
            let leaves: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            Ok(body(tape, &leaves)?.mul(tape.input(proj.clone()))?.sum())
        },
        DEFAULT_EPS,
        usize::MAX,
    )
}

struct Primitive {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    away_from_zero: bool,
    body: &'static Body,
}

fn primitives() -> Vec<Primitive> {
    fn p(name: &'static str, shapes: &'static [&'static [usize]], body: &'static Body) -> Primitive {
        Primitive { name, shapes, away_from_zero: false, body }
    }
    vec![
        p("conv2d s1 p1", &[&[2, 3, 4, 4], &[2, 3, 3, 3]], &|_, v| v[0].conv2d(v[1], 1, 1)),
        p("conv2d s2 p1", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], &|_, v| v[0].conv2d(v[1], 2, 1)),
        p("conv2d 1x1", &[&[1, 3, 3, 3], &[2, 3, 1, 1]], &|_, v| v[0].conv2d(v[1], 1, 0)),
        p("linear+bias", &[&[3, 4], &[4, 5], &[5]], &|_, v| v[0].linear(v[1], Some(v[2]))),
        p("linear", &[&[3, 4], &[4, 2]], &|_, v| v[0].linear(v[1], None)),
        p("matmul", &[&[3, 4], &[4, 2]], &|_, v| v[0].matmul(v[1])),
        p("bmm", &[&[2, 3, 4], &[2, 4, 2]], &|_, v| v[0].bmm(v[1])),
        p("batch_norm train", &[&[3, 2, 2, 2], &[2], &[2]], &|_, v| {
            Ok(v[0].batch_norm(v[1], v[2], BnMode::Train)?.0)
        }),
        p("batch_norm eval", &[&[3, 2, 2, 2], &[2], &[2]], &|_, v| {
            Ok(v[0].batch_norm(v[1], v[2], BnMode::Eval { mean: &[0.3, -0.2], var: &[1.5, 0.7] })?.0)
        }),
        Primitive { name: "relu", shapes: &[&[3, 5]], away_from_zero: true, body: &|_, v| Ok(v[0].relu()) },
        p("tanh", &[&[3, 5]], &|_, v| Ok(v[0].tanh())),
        p("sigmoid", &[&[3, 5]], &|_, v| Ok(v[0].sigmoid())),
        p("softmax axis 1", &[&[3, 5]], &|_, v| v[0].softmax(1)),
        p("softmax axis 0", &[&[3, 5]], &|_, v| v[0].softmax(0)),
        p("log_softmax", &[&[3, 5]], &|_, v| v[0].log_softmax(1)),
        p("concat_channels", &[&[2, 2, 3, 3], &[2, 1, 3, 3]], &|_, v| concat_channels(&[v[0], v[1]])),
        p("concat axis 1", &[&[2, 3], &[2, 2], &[2, 1]], &|_, v| concat(&[v[0], v[1], v[2]], 1)),
        p("add", &[&[2, 3], &[2, 3]], &|_, v| v[0].add(v[1])),
        p("mul", &[&[2, 3], &[2, 3]], &|_, v| v[0].mul(v[1])),
        p("scale", &[&[2, 3]], &|_, v| Ok(v[0].scale(-1.7))),
        p("sum", &[&[2, 3]], &|_, v| Ok(v[0].sum())),
        p("mean", &[&[2, 3]], &|_, v| Ok(v[0].mean())),
        p("slice", &[&[2, 6]], &|_, v| v[0].slice(1, 2, 3)),
        p("reshape", &[&[2, 6]], &|_, v| v[0].reshape(&[3, 4])),
        p("transpose", &[&[2, 5]], &|_, v| v[0].transpose()),
        p("global_avg_pool", &[&[2, 3, 4, 4]], &|_, v| v[0].global_avg_pool()),
        p("avg_pool2", &[&[2, 2, 4, 4]], &|_, v| v[0].avg_pool2()),
        p("embed_lookup", &[&[5, 3]], &|_, v| v[0].gather(&[4, 0, 4, 2])),
        p("nll_loss", &[&[4, 5]], &|_, v| v[0].nll_loss(&[1, 0, 4, 4], &[1.0, 0.5, 0.0, 2.0])),
        p("nll_loss∘log_softmax∘linear", &[&[4, 3], &[3, 4]], &|_, v| {
            v[0].linear(v[1], None)?.log_softmax(1)?.nll_loss(&[0, 3, 1, 2], &[0.25; 4])
        }),
    ]
}

/// Moves every trainable value off its structured initialization (unit gammas, zero betas).
fn jitter(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for id in store.trainable_ids() {
        for v in store.value_mut(id).data_mut() {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
    }
}

fn check_block(seed: u64, stride: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (c_in, c_out) = if stride == 1 { (8, 8) } else { (4, 8) };
    let block = BottleneckBlock::new(&mut store, "blk", c_in, c_out, stride, &mut rng);
    jitter(&mut store, 0.1, &mut rng);
    let x = store.add("x", Tensor::randn(&[2, c_in, 4, 4], 1.0, &mut rng));
    let ids = store.trainable_ids();
    let proj = Tensor::randn(&[2, if stride == 1 { c_out } else { c_out + c_in }, 4 / stride, 4 / stride], 1.0, &mut rng);
    grad_check_params(
        &mut store,
        &ids,
        |tape, store| {
            let mut upd = BnUpdates::default();
            let xv = tape.param(store, x);
            let y = if stride == 1 {
                identity_block_forward(&block, tape, store, xv, Mode::Train, &mut upd)?
            } else {
                ensemble_connect_forward(&block, tape, store, xv, Mode::Train, &mut upd)?
            };
            Ok(y.mul(tape.input(proj.clone()))?.sum())
        },
        DEFAULT_EPS,
        usize::MAX,
    )
}

fn small_lang(seed: u64) -> (ParamStore, LangModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = LangConfig { embed: 3, hidden: 4, channels: 5, positions: 6, vocab: 9 };
    let lang = LangModel::new(&mut store, cfg, &mut rng);
    jitter(&mut store, 0.3, &mut rng);
    (store, lang, rng)
}

fn check_attention(seed: u64) -> Result<f64> {
    let (mut store, lang, mut rng) = small_lang(seed);
    let h = store.add("h", Tensor::randn(&[2, 4], 1.0, &mut rng));
    let c = store.add("conv", Tensor::randn(&[2, 5, 6], 1.0, &mut rng));
    let cam = store.add("cam", Tensor::randn(&[2, 6], 1.0, &mut rng));
    let (pa, pz) = (Tensor::randn(&[2, 6], 1.0, &mut rng), Tensor::randn(&[2, 5], 1.0, &mut rng));
    let ids = vec![lang.w_h, lang.w_att, h, c, cam];
    grad_check_params(
        &mut store,
        &ids,
        |tape, store| {
            let pv = lang.bind(tape, store);
            let (a, z) = lang.attention_step(&pv, tape.param(store, h), tape.param(store, c), tape.param(store, cam))?;
            a.mul(tape.input(pa.clone()))?.sum().add(z.mul(tape.input(pz.clone()))?.sum())
        },
        DEFAULT_EPS,
        usize::MAX,
    )
}

fn check_lstm(seed: u64) -> Result<f64> {
    let (mut store, lang, mut rng) = small_lang(seed);
    let h = store.add("h", Tensor::randn(&[2, 4], 1.0, &mut rng));
    let c = store.add("c", Tensor::randn(&[2, 4], 1.0, &mut rng));
    let x = store.add("x", Tensor::randn(&[2, 3], 1.0, &mut rng));
    let z = store.add("z", Tensor::randn(&[2, 5], 1.0, &mut rng));
    let (ph, pc) = (Tensor::randn(&[2, 4], 1.0, &mut rng), Tensor::randn(&[2, 4], 1.0, &mut rng));
    let ids = vec![lang.lstm_w, lang.lstm_b, lang.decoder, h, c, x, z];
    grad_check_params(
        &mut store,
        &ids,
        |tape, store| {
            let pv = lang.bind(tape, store);
            let state = LstmState { h: tape.param(store, h), c: tape.param(store, c) };
            let (next, logp) = lang.lstm_step(&pv, state, tape.param(store, x), tape.param(store, z))?;
            let l = logp.nll_loss(&[3, 8], &[1.0, 1.0])?;
            l.add(next.h.mul(tape.input(ph.clone()))?.sum())?
                .add(next.c.mul(tape.input(pc.clone()))?.sum())
        },
        DEFAULT_EPS,
        usize::MAX,
    )
}

/// Train-mode `L_M + L_L` of the 8×8 toy model over two cases and all tasks.
fn check_full_model(seed: u64, classes: usize, with_language: bool) -> Result<f64> {
    let config = ModelConfig { classes, ..ModelConfig::toy() };
    let mut model = Mdnet::new(config, Vocab::templates(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    jitter(&mut model.store, 0.05, &mut rng);
    let images: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng)).collect();
    let x = hwc_to_nchw(&images)?;
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..classes)).collect();
    let ds = generate(&SynthConfig::new(seed, 2, 0));
    let reports: Vec<&Report> = ds.train.iter().map(|c| &c.reports[0]).collect();
    let seqs = make_task_batch(&reports, &model.vocab)?;
    let weights = vec![0.5; seqs.len()];
    let ids = model.store.trainable_ids();
    let end = model.vocab.end();
    let Mdnet { store, image, aas, lang, .. } = &mut model;
    let (image, aas, lang) = (&*image, &*aas, &*lang);
    grad_check_params(
        store,
        &ids,
        |tape, store| {
            let out = image.forward(tape, store, tape.input(x.clone()), Mode::Train)?;
            let logits = aas.logits_from_pooled(tape, store, out.pooled)?;
            let lm = aas.loss(logits, &labels)?;
            if !with_language {
                return Ok(lm);
            }
            let cam = aas.cam(tape, store, out.conv, &labels)?;
            let feats = crate::language::SeqFeatures { conv: out.conv, pooled: out.pooled, cam };
            lm.add(lang.batch_loss(tape, store, &feats, &seqs, &weights, end)?)
        },
        DEFAULT_EPS,
        12,
    )
}

/// Runs the whole suite for each seed; the callback sees each result as it lands.
pub fn run_suite(seeds: &[u64], report: &mut dyn FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult, out: &mut Vec<CheckResult>| {
        report(&r);
        out.push(r);
    };
    for &seed in seeds {
        for p in primitives() {
            let rel_err = check_leaves(seed, p.shapes, p.away_from_zero, p.body)?;
            push(CheckResult { name: p.name, seed, rel_err }, &mut out);
        }
        let composites: [(&'static str, &dyn Fn(u64) -> Result<f64>); 6] = [
            ("bottleneck block", &|s| check_block(s, 1)),
            ("ensemble boundary", &|s| check_block(s, 2)),
            ("attention step", &check_attention),
            ("lstm step", &check_lstm),
            ("image model + classifier (3 classes)", &|s| check_full_model(s, 3, false)),
            ("full mdnet loss", &|s| check_full_model(s, 4, true)),
        ];
        for (name, f) in composites {
            push(CheckResult { name, seed, rel_err: f(seed)? }, &mut out);
        }
    }
    Ok(out)
}

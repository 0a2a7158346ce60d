use mdnet::engine::{grad_check, ParamStore, Tape};
use mdnet::harness::eval::{score_report, FeatureBank};
use mdnet::image_model::{hwc_to_nchw, Mode};
use mdnet::language::{make_task_batch, make_task_batch_for, LangConfig, LangModel, SeqFeatures, TaskSequence, Vocab};
use mdnet::model::{CamSource, Mdnet, ModelConfig};
use mdnet::synth::{generate, Report, SynthConfig};
use mdnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const D: usize = 5;
const P: usize = 6;

fn model(seed: u64, vocab: usize) -> (ParamStore, LangModel) {
    let mut store = ParamStore::new();
    let cfg = LangConfig { embed: 4, hidden: 7, channels: D, positions: P, vocab };
    let lang = LangModel::new(&mut store, cfg, &mut rng(seed));
    (store, lang)
}

struct Feats {
    conv: Tensor,
    pooled: Tensor,
    cam: Tensor,
}

impl Feats {
    fn random(n: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Feats {
            conv: Tensor::randn(&[n, D, 2, 3], 1.0, &mut r),
            pooled: Tensor::randn(&[n, D], 1.0, &mut r),
            cam: Tensor::randn(&[n, P], 1.0, &mut r),
        }
    }

    fn on<'t>(&self, tape: &'t Tape) -> SeqFeatures<'t> {
        SeqFeatures { conv: tape.input(self.conv.clone()), pooled: tape.input(self.pooled.clone()), cam: tape.input(self.cam.clone()) }
    }
}

fn flat(conv: &Tensor) -> Tensor {
    conv.reshape(&[conv.shape()[0], D, P]).unwrap()
}

#[test]
fn attention_is_a_convex_combination() {
    for seed in 0..50 {
        let (store, lang) = model(seed, 9);
        let f = Feats::random(3, seed + 1000);
        let tape = Tape::new();
        let pv = lang.bind(&tape, &store);
        let h = tape.input(Tensor::randn(&[3, 7], 2.0, &mut rng(seed + 2000)));
        let c = flat(&f.conv);
        let (a, z) = lang.attention_step(&pv, h, tape.input(c.clone()), tape.input(f.cam.clone())).unwrap();
        let (a, z) = (a.value(), z.value());
        for n in 0..3 {
            let row = &a.data()[n * P..(n + 1) * P];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for k in 0..D {
                let ch = &c.data()[(n * D + k) * P..(n * D + k + 1) * P];
                let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = z.at(&[n, k]);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn zero_attention_matrix_gives_uniform_weights() {
    let (mut store, lang) = model(1, 9);
    store.value_mut(lang.w_att).fill(0.0);
    let f = Feats::random(2, 5);
    let tape = Tape::new();
    let pv = lang.bind(&tape, &store);
    let h = tape.input(Tensor::randn(&[2, 7], 1.0, &mut rng(6)));
    let c = flat(&f.conv);
    let (a, z) = lang.attention_step(&pv, h, tape.input(c.clone()), tape.input(f.cam.clone())).unwrap();
    assert!(a.value().data().iter().all(|&v| v == 1.0 / P as f64));
    for n in 0..2 {
        for k in 0..D {
            let mean = c.data()[(n * D + k) * P..(n * D + k + 1) * P].iter().sum::<f64>() / P as f64;
            assert!((z.value().at(&[n, k]) - mean).abs() < 1e-15);
        }
    }
    let bad = tape.input(Tensor::zeros(&[2, P + 1]));
    assert!(lang.attention_step(&pv, h, tape.input(c), bad).is_err());
}

#[test]
fn lstm_step_distribution_and_zero_weights() {
    let (mut store, lang) = model(2, 9);
    let tape = Tape::new();
    let pv = lang.bind(&tape, &store);
    let state = lang.zero_state(&tape, 2);
    let x = tape.input(Tensor::randn(&[2, 4], 1.0, &mut rng(3)));
    let z = tape.input(Tensor::randn(&[2, D], 1.0, &mut rng(4)));
    let (_, logp) = lang.lstm_step(&pv, state, x, z).unwrap();
    for row in logp.value().data().chunks(9) {
        assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    for id in [lang.lstm_w, lang.lstm_b, lang.decoder] {
        store.value_mut(id).fill(0.0);
    }
    let tape = Tape::new();
    let pv = lang.bind(&tape, &store);
    let state = lang.zero_state(&tape, 2);
    let (next, logp) = lang
        .lstm_step(&pv, state, tape.input(Tensor::randn(&[2, 4], 1.0, &mut rng(5))), tape.input(Tensor::randn(&[2, D], 1.0, &mut rng(6))))
        .unwrap();
    assert!(next.h.value().data().iter().all(|&v| v == 0.0));
    assert!(logp.value().data().iter().all(|&v| (v + 9f64.ln()).abs() < 1e-15));
}

#[test]
fn lstm_step_gradient_check() {
    let (store, lang) = model(7, 9);
    let z = Tensor::randn(&[2, D], 1.0, &mut rng(8));
    let x0 = Tensor::randn(&[2, 4], 1.0, &mut rng(9));
    let err = grad_check(
        |t, x| {
            let pv = lang.bind(t, &store);
            let (s, logp) = lang.lstm_step(&pv, lang.zero_state(t, 2), x, t.input(z.clone()))?;
            logp.nll_loss(&[1, 5], &[1.0, 1.0])?.add(s.c.sum())
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn uniform_decoder_one_token_sentence_costs_two_log_v() {
    let (mut store, lang) = model(3, 9);
    store.value_mut(lang.decoder).fill(0.0);
    let f = Feats::random(1, 4);
    let tape = Tape::new();
    let seq = TaskSequence { case: 0, task: 2, tokens: vec![8] };
    let nll = lang.sequence_nlls(&tape, &store, &f.on(&tape), &[seq.clone()], 0).unwrap();
    assert!((nll[0] - 2.0 * 9f64.ln()).abs() < 1e-12);
    let l = lang.batch_loss(&tape, &store, &f.on(&tape), &[seq], &[1.0], 0).unwrap();
    assert!((l.value().item() - nll[0]).abs() < 1e-12);
    let bad = TaskSequence { case: 0, task: 0, tokens: vec![9] };
    assert!(lang.sequence_nlls(&tape, &store, &f.on(&tape), &[bad], 0).is_err());
}

#[test]
fn sequence_loss_gradient_wrt_pooled_feature() {
    let (store, lang) = model(11, 9);
    let f = Feats::random(2, 12);
    let seqs = vec![
        TaskSequence { case: 0, task: 0, tokens: vec![7, 8, 7] },
        TaskSequence { case: 1, task: 1, tokens: vec![6] },
        TaskSequence { case: 0, task: 2, tokens: vec![8, 8] },
    ];
    for which in 0..3 {
        let base = [&f.pooled, &f.conv, &f.cam][which].clone();
        let err = grad_check(
            |t, x| {
                let mut sf = f.on(t);
                match which {
                    0 => sf.pooled = x,
                    1 => sf.conv = x,
                    _ => sf.cam = x,
                }
                lang.batch_loss(t, &store, &sf, &seqs, &[0.5, 1.0, 0.25], 0)
            },
            &base,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input {which}: {err}");
    }
}

fn small_reports(n: usize, seed: u64) -> Vec<Report> {
    generate(&SynthConfig::new(seed, n, 1)).train.into_iter().map(|c| c.reports[0].clone()).collect()
}

#[test]
fn task_batch_duplicates_each_case_per_task() {
    let vocab = Vocab::templates();
    let reports = small_reports(2, 0);
    let refs: Vec<&Report> = reports.iter().collect();
    let seqs = make_task_batch(&refs, &vocab).unwrap();
    assert_eq!(seqs.len(), 12);
    for (i, s) in seqs.iter().enumerate() {
        assert_eq!((s.case, s.task), (i / 6, i % 6));
        assert_eq!(vocab.token(s.task + 1).unwrap(), format!("<start_{}>", s.task + 1));
        assert_eq!(vocab.decode(&s.tokens), reports[s.case].sentences[s.task]);
    }
    let mut broken = reports[0].clone();
    broken.sentences[3] = String::new();
    assert!(make_task_batch(&[&broken], &vocab).is_err());
}

/// Shared toy-model features for two cases of real reports.
fn toy_images(seed: u64) -> Vec<Tensor> {
    (0..2).map(|k| Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng(seed * 7 + k))).collect()
}

fn toy_setup(seed: u64) -> (Mdnet, Tensor, Vec<Report>) {
    let m = Mdnet::new(ModelConfig::toy(), Vocab::templates(), seed).unwrap();
    (m, hwc_to_nchw(&toy_images(seed)).unwrap(), small_reports(2, seed))
}

#[test]
fn merged_gradient_equals_sum_of_per_task_passes() {
    for seed in 0..3 {
        let (m, x, reports) = toy_setup(seed);
        let refs: Vec<&Report> = reports.iter().collect();
        let end = m.vocab.end();
        let grad_f = |tasks: &[usize]| {
            let tape = Tape::new();
            let fwd = m.forward(&tape, tape.input(x.clone()), Mode::Eval, CamSource::Labels(&[0, 1])).unwrap();
            let pooled = tape.input((*fwd.features.pooled.value()).clone());
            let feats = SeqFeatures { pooled, ..fwd.features };
            let seqs = make_task_batch_for(&refs, &m.vocab, tasks).unwrap();
            let w = vec![0.5; seqs.len()];
            let l = m.lang.batch_loss(&tape, &m.store, &feats, &seqs, &w, end).unwrap();
            tape.backward(l).unwrap().wrt(pooled).unwrap().clone()
        };
        let merged = grad_f(&[0, 1, 2, 3, 4, 5]);
        let mut sum = Tensor::zeros(merged.shape());
        for e in 0..6 {
            sum.axpy(1.0, &grad_f(&[e]));
        }
        assert!(merged.max_abs_diff(&sum) < 1e-10, "seed {seed}: {}", merged.max_abs_diff(&sum));
    }
}

#[test]
fn single_task_batch_is_plain_captioning() {
    let (m, x, reports) = toy_setup(4);
    let refs: Vec<&Report> = reports.iter().collect();
    let tape = Tape::new();
    let fwd = m.forward(&tape, tape.input(x), Mode::Eval, CamSource::Labels(&[2, 3])).unwrap();
    let seqs = make_task_batch_for(&refs, &m.vocab, &[5]).unwrap();
    let nll = m.lang.sequence_nlls(&tape, &m.store, &fwd.features, &seqs, m.vocab.end()).unwrap();
    let l = m.lang.batch_loss(&tape, &m.store, &fwd.features, &seqs, &[1.0, 1.0], m.vocab.end()).unwrap();
    assert!((l.value().item() - nll.iter().sum::<f64>()).abs() < 1e-10);
}

#[test]
fn loss_is_invariant_to_batch_composition() {
    let (m, x, reports) = toy_setup(5);
    let refs: Vec<&Report> = reports.iter().collect();
    let end = m.vocab.end();
    let tape = Tape::new();
    let fwd = m.forward(&tape, tape.input(x), Mode::Eval, CamSource::Labels(&[1, 2])).unwrap();
    let all = make_task_batch(&refs, &m.vocab).unwrap();
    let batch = m.lang.sequence_nlls(&tape, &m.store, &fwd.features, &all, end).unwrap();
    for (s, &nb) in all.iter().zip(&batch) {
        let alone = m.lang.sequence_nlls(&tape, &m.store, &fwd.features, std::slice::from_ref(s), end).unwrap()[0];
        assert!((alone - nb).abs() < 1e-10);
    }
}

#[test]
fn language_gradients_reach_every_image_parameter() {
    for seed in 0..5 {
        let (m, x, reports) = toy_setup(seed);
        let refs: Vec<&Report> = reports.iter().collect();
        let tape = Tape::new();
        let fwd = m.forward(&tape, tape.input(x), Mode::Train, CamSource::Labels(&[0, 3])).unwrap();
        let seqs = make_task_batch(&refs, &m.vocab).unwrap();
        let w = vec![0.5; seqs.len()];
        let l = m.lang.batch_loss(&tape, &m.store, &fwd.features, &seqs, &w, m.vocab.end()).unwrap();
        let g = tape.backward(l).unwrap();
        for id in m.store.ids_with_prefix("image.") {
            let gi = g.param(id).unwrap_or_else(|| panic!("no gradient for {}", m.store.get(id).name));
            assert!(gi.max_abs() > 0.0, "zero gradient for {}", m.store.get(id).name);
        }
    }
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let (m, x, _) = toy_setup(6);
    let tape = Tape::new();
    let fwd = m.forward(&tape, tape.input(x), Mode::Eval, CamSource::Argmax).unwrap();
    let a = m.lang.generate(&tape, &m.store, &fwd.features, 2, 7, m.vocab.end()).unwrap();
    let b = m.lang.generate(&tape, &m.store, &fwd.features, 2, 7, m.vocab.end()).unwrap();
    assert_eq!(a, b);
    for g in &a {
        assert!(!g.tokens.is_empty() && g.tokens.len() <= 7);
        assert_eq!(g.tokens.len(), g.attention.len());
    }
    assert!(m.lang.generate(&tape, &m.store, &fwd.features, 2, 0, m.vocab.end()).is_err());
}

#[test]
fn report_score_is_negated_nll_sum() {
    let (m, x, reports) = toy_setup(7);
    let tape = Tape::new();
    let fwd = m.forward(&tape, tape.input(x), Mode::Eval, CamSource::Argmax).unwrap();
    let hwc = toy_images(7);
    let bank = FeatureBank::compute(&m, &hwc.iter().collect::<Vec<_>>()).unwrap();
    let q = make_task_batch_for(&[&reports[0]], &m.vocab, &[0, 1, 2, 3, 4]).unwrap();
    let nll = m.lang.sequence_nlls(&tape, &m.store, &fwd.features, &q, m.vocab.end()).unwrap();
    let s = score_report(&m, &bank, 0, &q).unwrap();
    assert!((s + nll.iter().sum::<f64>()).abs() < 1e-9);

    let mut doubled = q.clone();
    doubled.push(q[2].clone());
    let s2 = score_report(&m, &bank, 0, &doubled).unwrap();
    assert!((s2 - s + nll[2]).abs() < 1e-9);

    let with_conclusion = make_task_batch_for(&[&reports[0]], &m.vocab, &[0, 5]).unwrap();
    assert!(score_report(&m, &bank, 0, &with_conclusion).is_err());
}

proptest! {
    #[test]
    fn attention_weights_stay_on_simplex(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let (store, lang) = model(seed % 17, 9);
        let mut r = rng(seed);
        let tape = Tape::new();
        let pv = lang.bind(&tape, &store);
        let h = tape.input(Tensor::randn(&[1, 7], scale, &mut r));
        let c = tape.input(Tensor::randn(&[1, D, P], scale, &mut r));
        let cam = tape.input(Tensor::randn(&[1, P], scale, &mut r));
        let (a, _) = lang.attention_step(&pv, h, c, cam).unwrap();
        let a = a.value();
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
    }
}

//! One pass/fail line per acceptance criterion, written straight to stderr so it shows
//! even when the test harness captures output. Criteria run one at a time so their
//! wall-clock budgets are measured on an otherwise idle process.

mod common;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use mdnet::aas::{cam_embedding, classify, AasClassifier};
use mdnet::checkpoint;
use mdnet::engine::{ParamStore, Tape};
use mdnet::harness::eval::{generate_all, FeatureBank};
use mdnet::harness::gradsuite::{run_suite, SUITE_SEEDS, SUITE_TOLERANCE};
use mdnet::harness::{evaluate, EvalOptions, EvalReport};
use mdnet::image_model::{decoupled_classifier_reference, hwc_to_nchw, split_weights, EcNet, EcNetConfig, Mode};
use mdnet::language::{make_task_batch_for, LangConfig, LangModel, SeqFeatures, Vocab};
use mdnet::model::{CamSource, Mdnet, ModelConfig};
use mdnet::synth::{generate, write_dataset, Report, SynthConfig};
use mdnet::trainer::*;
use mdnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn line(msg: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{msg}");
}

fn verdict(n: usize, ok: bool, detail: &str) {
    line(&format!("criterion {n:>2}: {} | {detail}", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let results = run_suite(&SUITE_SEEDS, &mut |_| {}).unwrap();
    let elapsed = t.elapsed();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    for r in &failed {
        line(&format!("    {} seed {} rel_err {:.3e}", r.name, r.seed, r.rel_err));
    }
    let worst = results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let ok = failed.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        1,
        ok,
        &format!(
            "{} checks over {} seeds, worst rel err {worst:.2e} (< {SUITE_TOLERANCE:e}), {:.1}s (< 120s)",
            results.len(),
            SUITE_SEEDS.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_decoupling() {
    let _g = serial();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut store = ParamStore::new();
        let net = EcNet::new(&mut store, EcNetConfig::toy(), &mut rng(trial)).unwrap();
        let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng(trial + 500));
        let (conv, _) = net.forward_image(&store, &img, Mode::Eval).unwrap();
        let ranges: Vec<_> = net.config.channel_partition().into_iter().map(|(_, r)| r).collect();
        let aas = AasClassifier::new(&mut store, conv.shape()[0], 4, &mut rng(trial + 1000));
        let (logits, _) = classify(&aas, &store, &conv).unwrap();
        let plane = conv.shape()[1] * conv.shape()[2];
        let slices: Vec<Tensor> = ranges
            .iter()
            .map(|r| {
                Tensor::new(vec![r.len(), conv.shape()[1], conv.shape()[2]], conv.data()[r.start * plane..r.end * plane].to_vec())
                    .unwrap()
            })
            .collect();
        let w = split_weights(store.value(aas.weight), &ranges).unwrap();
        let dec = decoupled_classifier_reference(&slices, &w).unwrap();
        for (a, b) in logits.iter().zip(&dec) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(2, worst < 1e-10, &format!("100 trials, max |classifier - decoupled sum| {worst:.2e} (< 1e-10)"));
}

#[test]
fn criterion_03_cam_logit_identity() {
    let _g = serial();
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut store = ParamStore::new();
        let net = EcNet::new(&mut store, EcNetConfig::toy(), &mut rng(trial + 7)).unwrap();
        let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng(trial + 900));
        let (conv, _) = net.forward_image(&store, &img, Mode::Eval).unwrap();
        let aas = AasClassifier::new(&mut store, conv.shape()[0], 4, &mut rng(trial + 2000));
        let (logits, _) = classify(&aas, &store, &conv).unwrap();
        for (c, &logit) in logits.iter().enumerate() {
            let cam = cam_embedding(&aas, &store, &conv, c).unwrap();
            worst = worst.max((cam.sum() / cam.numel() as f64 - logit).abs());
        }
    }
    verdict(3, worst < 1e-8, &format!("100 trials x 4 classes, max |mean CAM - logit| {worst:.2e} (< 1e-8)"));
}

#[test]
fn criterion_04_attention_invariants() {
    let _g = serial();
    let (d, p, hidden) = (6, 12, 8);
    let mut simplex = 0.0f64;
    let mut hull = 0.0f64;
    let mut uniform_exact = true;
    for trial in 0..100u64 {
        let mut store = ParamStore::new();
        let cfg = LangConfig { embed: 5, hidden, channels: d, positions: p, vocab: 11 };
        let lang = LangModel::new(&mut store, cfg, &mut rng(trial));
        let mut r = rng(trial + 300);
        let scale = 0.5 + (trial % 10) as f64;
        let conv = Tensor::randn(&[3, d, p], scale, &mut r);
        let cam = Tensor::randn(&[3, p], scale, &mut r);
        let h0 = Tensor::randn(&[3, hidden], scale, &mut r);
        for zero in [false, true] {
            if zero {
                store.value_mut(lang.w_att).fill(0.0);
            }
            let tape = Tape::new();
            let pv = lang.bind(&tape, &store);
            let (a, z) = lang
                .attention_step(&pv, tape.input(h0.clone()), tape.input(conv.clone()), tape.input(cam.clone()))
                .unwrap();
            let (a, z) = (a.value(), z.value());
            for n in 0..3 {
                let row = &a.data()[n * p..(n + 1) * p];
                if zero {
                    uniform_exact &= row.iter().all(|&v| v == 1.0 / p as f64);
                }
                let neg = row.iter().cloned().fold(0.0, f64::min);
                simplex = simplex.max((row.iter().sum::<f64>() - 1.0).abs()).max(-neg);
                for k in 0..d {
                    let ch = &conv.data()[(n * d + k) * p..(n * d + k + 1) * p];
                    let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = z.at(&[n, k]);
                    hull = hull.max(lo - v).max(v - hi);
                }
            }
        }
    }
    let ok = simplex <= 1e-12 && hull <= 1e-12 && uniform_exact;
    verdict(
        4,
        ok,
        &format!(
            "simplex violation {simplex:.1e} (<= 1e-12), hull violation {:.1e}, W_att=0 uniform exactly: {uniform_exact}",
            hull.max(0.0)
        ),
    );
}

fn one_param(vals: &[f64], gm: &[f64], gl: &[f64]) -> (ParamStore, mdnet::engine::Gradients, mdnet::engine::Gradients, mdnet::engine::ParamId) {
    let mut store = ParamStore::new();
    let n = vals.len();
    let id = store.add("image.w", Tensor::new(vec![n], vals.to_vec()).unwrap());
    let grads = |g: &[f64]| {
        let tape = Tape::new();
        let v = tape.param(&store, id);
        tape.backward(v.mul(tape.input(Tensor::new(vec![n], g.to_vec()).unwrap())).unwrap().sum()).unwrap()
    };
    let (a, b) = (grads(gm), grads(gl));
    (store, a, b, id)
}

#[test]
fn criterion_05_composite_endpoints() {
    let _g = serial();
    let mut bit_exact = true;
    for trial in 0..100u64 {
        let mut r = rng(trial);
        let v = Tensor::randn(&[9], 1.0, &mut r);
        let gm = Tensor::randn(&[9], 1.0, &mut r);
        let gl = Tensor::randn(&[9], 1.0, &mut r);
        let (store, a, b, id) = one_param(v.data(), gm.data(), gl.data());
        for (beta, eta, single) in [(0.0, 5.0, &a), (1.0, 1.0, &b)] {
            let mut comp = store.clone();
            composite_update(&mut comp, &[id], &a, &b, 0.05, beta, eta).unwrap();
            let mut plain = store.clone();
            sgd_from(&mut plain, &[id], single, 0.05).unwrap();
            bit_exact &= comp.value(id).data().iter().zip(plain.value(id).data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    let (mut store, a, b, id) = one_param(&[1.0], &[0.2], &[0.02]);
    composite_update(&mut store, &[id], &a, &b, 0.1, 0.5, 5.0).unwrap();
    let got = store.value(id).item();
    let ok = bit_exact && (got - 0.985).abs() < 1e-15;
    verdict(5, ok, &format!("endpoints bit-exact over 100 trials: {bit_exact}; scalar example {got} (expect 0.985)"));
}

#[test]
fn criterion_06_duplication_merging() {
    let _g = serial();
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let m = Mdnet::new(ModelConfig::toy(), Vocab::templates(), seed).unwrap();
        let x = hwc_to_nchw(&(0..3).map(|k| Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng(seed * 11 + k))).collect::<Vec<_>>())
            .unwrap();
        let reports: Vec<Report> = generate(&SynthConfig::new(seed, 3, 1)).train.into_iter().map(|c| c.reports[1].clone()).collect();
        let refs: Vec<&Report> = reports.iter().collect();
        let grads = |tasks: &[usize]| {
            let tape = Tape::new();
            let fwd = m.forward(&tape, tape.input(x.clone()), Mode::Eval, CamSource::Labels(&[0, 2, 3])).unwrap();
            let f = &fwd.features;
            let feats = SeqFeatures {
                conv: tape.input((*f.conv.value()).clone()),
                pooled: tape.input((*f.pooled.value()).clone()),
                cam: tape.input((*f.cam.value()).clone()),
            };
            let seqs = make_task_batch_for(&refs, &m.vocab, tasks).unwrap();
            let w = vec![1.0 / 3.0; seqs.len()];
            let l = m.lang.batch_loss(&tape, &m.store, &feats, &seqs, &w, m.vocab.end()).unwrap();
            let g = tape.backward(l).unwrap();
            [feats.conv, feats.pooled, feats.cam].map(|v| g.wrt(v).unwrap().clone())
        };
        let merged = grads(&[0, 1, 2, 3, 4, 5]);
        let mut sum = merged.clone().map(|t| Tensor::zeros(t.shape()));
        for e in 0..6 {
            for (s, g) in sum.iter_mut().zip(grads(&[e])) {
                s.axpy(1.0, &g);
            }
        }
        for (a, b) in merged.iter().zip(&sum) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    verdict(6, worst < 1e-10, &format!("5 seeds, K=6, max |merged - sum of per-task| over F(I) {worst:.2e} (< 1e-10)"));
}

/// Cases, config and model for the memorization run.
fn memorization_setup() -> (Vec<mdnet::synth::Case>, TrainConfig, Mdnet) {
    let cases = common::toy_cases(10, 21);
    let cfg = TrainConfig {
        lr: 0.3,
        batch: 10,
        epochs: 2000,
        seed: 1,
        variant: VariantChoice::Fixed(0),
        clip_norm: Some(2.0),
        ..Default::default()
    };
    let config = ModelConfig { embed: 16, hidden: 48, ..ModelConfig::toy() };
    let m = Mdnet::new(config, Vocab::templates(), 2).unwrap();
    (cases, cfg, m)
}

#[test]
fn criterion_07_memorization() {
    let _g = serial();
    let t = Instant::now();
    let (cases, cfg, mut m) = memorization_setup();
    let log = train_mdnet(&mut m, &cases, &cfg).unwrap();
    let last = log.steps.last().unwrap();
    let images: Vec<&Tensor> = cases.iter().map(|c| &c.image).collect();
    let bank = FeatureBank::compute(&m, &images).unwrap();
    let gen = generate_all(&m, &bank, 30).unwrap();
    let mut verbatim = 0;
    for (c, g) in cases.iter().zip(&gen) {
        for (e, ge) in g.iter().enumerate() {
            let end = ge.tokens.iter().position(|&t| t == m.vocab.end()).unwrap_or(ge.tokens.len());
            verbatim += (m.vocab.decode(&ge.tokens[..end]) == c.reports[0].sentences[e]) as usize;
        }
    }
    let elapsed = t.elapsed();
    let ok = log.steps.len() <= 2000 && last.loss_m < 0.05 && last.loss_l < 0.05 && verbatim == 60 && elapsed < Duration::from_secs(300);
    verdict(
        7,
        ok,
        &format!(
            "{} steps, final L_M {:.4} L_L {:.4} (< 0.05), {verbatim}/60 sentences verbatim, {:.1}s (< 300s)",
            log.steps.len(),
            last.loss_m,
            last.loss_l,
            elapsed.as_secs_f64()
        ),
    );
}

struct RunResult {
    regime: TrainRegime,
    report: EvalReport,
    seconds: f64,
}

/// The 600/200 runs: three seeds, each under all three regimes.
fn end_to_end() -> &'static [RunResult] {
    static RUNS: OnceLock<Vec<RunResult>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut out = Vec::new();
        for seed in 0..3u64 {
            let ds = generate(&SynthConfig::new(seed, 600, 200));
            for regime in [TrainRegime::Joint, TrainRegime::Pretrain, TrainRegime::Finetune] {
                let t = Instant::now();
                let mut m = Mdnet::new(ModelConfig::default(), Vocab::templates(), seed).unwrap();
                let cfg = TrainConfig { seed, ..Default::default() };
                train(&mut m, &ds.train, &cfg, regime, &mut |_| {}).unwrap();
                let report = evaluate(&m, &ds.test, EvalOptions::default()).unwrap();
                let seconds = t.elapsed().as_secs_f64();
                line(&format!(
                    "    seed {seed} {regime:?}: BLEU-1 {:.3} DCA {:.3} Cr@1 {:.3} (prior {:.3}) attn {:.3} vs uniform {:.3}, {seconds:.0}s",
                    report.bleu[0], report.dca, report.cr[0], report.retrieval_prior, report.attn_mass, report.attn_uniform
                ));
                out.push(RunResult { regime, report, seconds });
            }
        }
        out
    })
}

fn mean_of(runs: &[RunResult], regime: TrainRegime, f: impl Fn(&EvalReport) -> f64) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.regime == regime).map(|r| f(&r.report)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_08_end_to_end() {
    let _g = serial();
    let runs = end_to_end();
    let dca = |g| mean_of(runs, g, |r| r.dca);
    let (joint, pre, fine) = (dca(TrainRegime::Joint), dca(TrainRegime::Pretrain), dca(TrainRegime::Finetune));
    let lift = mean_of(runs, TrainRegime::Joint, |r| r.cr[0] - r.retrieval_prior);
    let bleu1 = mean_of(runs, TrainRegime::Joint, |r| r.bleu[0]);
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let ok = joint >= 0.85 && joint >= pre && joint >= fine && lift >= 0.20 && bleu1 >= 0.80 && slowest < 1800.0;
    verdict(
        8,
        ok,
        &format!(
            "3 seeds: DCA joint {joint:.3} (>= 0.85) pretrain {pre:.3} finetune {fine:.3}; \
             joint Cr@1 - prior {lift:.3} (>= 0.20); joint BLEU-1 {bleu1:.3} (>= 0.80); slowest run {slowest:.0}s (< 1800s)"
        ),
    );
}

#[test]
fn criterion_09_attention_localization() {
    let _g = serial();
    let runs = end_to_end();
    let mass = mean_of(runs, TrainRegime::Joint, |r| r.attn_mass);
    let uniform = mean_of(runs, TrainRegime::Joint, |r| r.attn_uniform);
    verdict(
        9,
        mass > 1.5 * uniform,
        &format!("joint mean attention mass in lesion {mass:.3} vs 1.5 x area fraction {:.3}", 1.5 * uniform),
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let dir = tmp.path().join(tag);
        let ds = generate(&SynthConfig::new(5, 40, 10));
        write_dataset(&ds, &dir.join("data")).unwrap();
        let mut m = Mdnet::new(ModelConfig::default(), Vocab::templates(), 5).unwrap();
        let cfg = TrainConfig { epochs: 1, seed: 5, ..Default::default() };
        let log = train(&mut m, &ds.train, &cfg, TrainRegime::Joint, &mut |_| {}).unwrap();
        log.write_csv(&dir.join("train_log.csv")).unwrap();
        m.save(&dir.join("model.mdn")).unwrap();
        let bytes = checkpoint::encode(m.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)));
        (tree(&dir), bytes)
    };
    let (a, ca) = run("a");
    let (b, cb) = run("b");
    let ok = a == b && ca == cb;
    verdict(10, ok, &format!("two runs, {} files compared (dataset, train log, checkpoint): identical {ok}", a.len()));
}

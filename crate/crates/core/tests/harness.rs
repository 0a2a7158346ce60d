mod common;

use std::fs;
use std::path::Path;

use mdnet::harness::*;
use mdnet::language::Vocab;
use mdnet::model::{Mdnet, ModelConfig};
use mdnet::synth::pnm::Pnm;
use mdnet::synth::Label;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn bleu_examples() {
    let refs = vec![words("the cat sat down")];
    assert!((bleu_n(&words("the cat sat"), &refs, 1) - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
    for n in 1..=4 {
        assert_eq!(bleu_n(&words("the cat sat down"), &refs, n), 1.0);
    }
    assert_eq!(bleu_n(&words("dogs run"), &refs, 1), 0.0);
    assert_eq!(bleu_n(&Vec::<String>::new(), &refs, 1), 0.0);
}

#[test]
fn corpus_bleu_pools_counts() {
    let mut s = BleuStats::default();
    s.add(&words("a b"), &[words("a b")]);
    s.add(&words("c d"), &[words("c x")]);
    assert_eq!(s.matched[0], 3);
    assert_eq!(s.total[0], 4);
    assert!((s.score(1) - 0.75).abs() < 1e-12);
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn bleu_ignores_reference_order(cand in sentence(), refs in prop::collection::vec(sentence(), 1..5), seed in 0u64..100) {
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for n in 1..=4 {
            prop_assert_eq!(bleu_n(&cand, &refs, n), bleu_n(&cand, &shuffled, n));
        }
    }

    #[test]
    fn bleu_with_full_precision_does_not_grow_with_order(r in sentence(), start in 0usize..8, len in 1usize..9, extra in prop::collection::vec(sentence(), 0..3)) {
        let start = start.min(r.len() - 1);
        let cand: Vec<String> = r[start..(start + len).min(r.len())].to_vec();
        let mut refs = vec![r];
        refs.extend(extra);
        let scores: Vec<f64> = (1..=4).map(|n| bleu_n(&cand, &refs, n)).collect();
        for w in scores.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", scores);
        }
        prop_assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn retrieval_recall_depends_only_on_ranking(seed in 0u64..1000, k in 1usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<Label> = (0..20).map(|_| Label::ALL[r.gen_range(0..4)]).collect();
        let queries: Vec<Label> = (0..6).map(|_| Label::ALL[r.gen_range(0..4)]).collect();
        let scores: Vec<Vec<f64>> = (0..6).map(|_| (0..20).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let rank = |f: &dyn Fn(f64) -> f64| {
            let rk: Vec<Vec<usize>> = scores.iter().map(|s| rank_desc(&s.iter().map(|&v| f(v)).collect::<Vec<_>>())).collect();
            cr_at_k(&rk, &queries, &labels, k).unwrap()
        };
        let base = rank(&|v| v);
        prop_assert_eq!(base, rank(&|v| (2.0 * v).exp() + 1.0));
        prop_assert_eq!(base, rank(&|v| v * v * v - 4.0));
    }

    #[test]
    fn attention_mass_is_a_fraction(seed in 0u64..1000, n in 1usize..30) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        let mut a: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let s: f64 = a.iter().sum();
        a.iter_mut().for_each(|v| *v /= s);
        let m = attention_mass_in_mask(&[a], &mask).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
        let uniform = vec![1.0 / n as f64; n];
        let frac = mask.iter().filter(|&&b| b).count() as f64 / n as f64;
        prop_assert!((attention_mass_in_mask(&[uniform], &mask).unwrap() - frac).abs() < 1e-12);
    }
}

#[test]
fn random_scoring_recall_matches_prior() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<Label> = (0..200).map(|i| Label::ALL[i % 4]).collect();
    let queries: Vec<Label> = (0..200).map(|_| Label::ALL[r.gen_range(0..4)]).collect();
    let rankings: Vec<Vec<usize>> = (0..200)
        .map(|_| {
            let s: Vec<f64> = (0..200).map(|_| r.gen()).collect();
            rank_desc(&s)
        })
        .collect();
    let cr1 = cr_at_k(&rankings, &queries, &labels, 1).unwrap();
    assert!((cr1 - 0.25).abs() <= 0.08, "{cr1}");
    assert!((cr_at_k(&rankings, &queries, &labels, 200).unwrap() - 0.25).abs() < 1e-12);
    assert!(cr_at_k(&rankings, &queries, &[], 1).is_err());
}

#[test]
fn dca_of_an_oracle_and_a_constant() {
    let truth: Vec<Label> = (0..400).map(|i| Label::ALL[i % 4]).collect();
    let oracle: Vec<Option<Label>> = truth.iter().map(|&l| Some(l)).collect();
    assert_eq!(dca_score(&oracle, &truth).unwrap(), 1.0);
    assert_eq!(dca_score(&vec![Some(Label::Normal); 400], &truth).unwrap(), 0.25);
    assert_eq!(dca_score(&vec![None; 400], &truth).unwrap(), 0.0);
    assert_eq!(extract_conclusion(&words("consistent with high-grade carcinoma .")), Some(Label::HighGrade));
    assert_eq!(extract_conclusion(&words("normal or high-grade")), None);
}

#[test]
fn one_hot_attention_inside_mask_counts_fully() {
    let mask = [false, true, true, false];
    assert_eq!(attention_mass_in_mask(&[vec![0.0, 1.0, 0.0, 0.0]], &mask).unwrap(), 1.0);
    assert!(attention_mass_in_mask(&[vec![0.5, 0.6, 0.0, 0.0]], &mask).is_err());
}

#[test]
fn exported_maps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    let map = [0.1, 0.4, 0.25, 0.7, 0.7, 0.1];
    export_pgm(&map, 2, 3, &path, 3).unwrap();
    let back = Pnm::read(&path).unwrap();
    assert_eq!((back.width, back.height, back.channels), (9, 6, 1));
    for y in 0..6 {
        for x in 0..9 {
            let want = ((map[(y / 3) * 3 + x / 3] - 0.1) / 0.6 * 255.0).round() as u8;
            assert_eq!(back.data[y * 9 + x], want);
        }
    }
    assert!(export_pgm(&map, 2, 3, &path, 0).is_err());
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["mdnet"];
    argv.extend_from_slice(args);
    cli_main(argv)
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
fn cli_synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(cli(&["synth", "--seed", "7", "--out", d.to_str().unwrap(), "--train-n", "20", "--test-n", "8"]), 0);
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn cli_rejects_bad_usage() {
    assert_eq!(cli(&["synth", "--bogus"]), 1);
    assert_eq!(cli(&["nosuch"]), 1);
    assert_eq!(cli(&["synth", "--out", "/tmp/x", "--train-n", "0"]), 1);
    assert_eq!(cli(&["eval", "--ckpt", "/nonexistent/model.mdn", "--data", "/nonexistent"]), 1);
}

#[test]
fn cli_eval_of_untrained_model_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    assert_eq!(cli(&["synth", "--seed", "3", "--out", data.to_str().unwrap(), "--train-n", "1", "--test-n", "200"]), 0);
    fs::create_dir_all(&ckpt).unwrap();
    let model = Mdnet::new(ModelConfig::default(), Vocab::templates(), 0).unwrap();
    model.save(&ckpt.join("model.mdn")).unwrap();

    let log = tmp.path().join("log.jsonl");
    assert_eq!(
        cli(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--log", log.to_str().unwrap(), "--queries", "10"]),
        0
    );
    let ds = mdnet::synth::read_dataset(&data).unwrap();
    let lines = fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 200);
    let mut correct = 0;
    for (line, case) in lines.lines().zip(&ds.test) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["id", "dca_pred", "bleu1", "bleu2", "bleu3", "bleu4", "attn_ratio"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["id"], case.id.as_str());
        correct += (v["dca_pred"] == case.label.name()) as usize;
    }
    let dca = correct as f64 / 200.0;
    assert!(dca <= 0.40, "untrained DCA {dca}");
}

#[test]
fn metric_csv_has_mean_and_std() {
    let cases = common::toy_cases(8, 2);
    let model = Mdnet::new(ModelConfig::toy(), Vocab::templates(), 1).unwrap();
    let r = evaluate(&model, &cases, EvalOptions { max_len: 6, queries: 8 }).unwrap();
    let csv = MetricReport::from_runs(&[r.clone(), r]).to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,mean,std"));
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 3);
        let (mean, std): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!((0.0..=1.0).contains(&mean), "{l}");
        assert_eq!(std, 0.0);
    }
}

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use mdnet::harness::metrics::extract_conclusion_text;
use mdnet::synth::render::nuclei_count;
use mdnet::synth::reports::{template_words, TEMPLATES};
use mdnet::synth::spec::{GRADABLE_AREA, INSUFFICIENT_AREA};
use mdnet::synth::*;
use mdnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sizes of the 4-connected dark-pixel components of an image.
fn dark_components(img: &Tensor) -> Vec<usize> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let d = img.data();
    let dark: Vec<bool> = (0..h * w).map(|i| d[i * 3 + 1] < 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for s in 0..h * w {
        if !dark[s] || seen[s] {
            continue;
        }
        let mut stack = vec![s];
        seen[s] = true;
        let mut n = 0;
        while let Some(p) = stack.pop() {
            n += 1;
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (u, v) = (x + dx, y + dy);
                if u < 0 || v < 0 || u >= w as i64 || v >= h as i64 {
                    continue;
                }
                let q = v as usize * w + u as usize;
                if dark[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        out.push(n);
    }
    out
}

fn dark_pixels_in_mask(r: &Rendered) -> usize {
    r.mask.iter().enumerate().filter(|&(i, &m)| m && r.image.data()[i * 3 + 1] < 0.5).count()
}

#[test]
fn crowding_and_pleomorphism_are_recoverable_from_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut crowd_ok, mut pleo_ok) = (0, 0);
    let n = 500;
    for _ in 0..n {
        let s = sample_case_spec(&mut rng);
        let r = render(&s);
        let comps = dark_components(&r.image);
        let af = r.mask_fraction();
        let crowd = (0..3u8).min_by_key(|&c| (nuclei_count(c, af) as i64 - comps.len() as i64).abs()).unwrap();
        let largest = comps.iter().copied().max().unwrap_or(0);
        let pleo = if largest >= 21 {
            2
        } else if largest >= 9 {
            1
        } else {
            0
        };
        crowd_ok += (crowd == s.crowding) as usize;
        pleo_ok += (pleo == s.pleomorphism) as usize;
    }
    assert!(crowd_ok as f64 >= 0.95 * n as f64, "crowding {crowd_ok}/{n}");
    assert!(pleo_ok as f64 >= 0.95 * n as f64, "pleomorphism {pleo_ok}/{n}");
}

#[test]
fn labels_are_roughly_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 4];
    for _ in 0..1000 {
        counts[conclusion_rule(&sample_case_spec(&mut rng)).index()] += 1;
    }
    for c in counts {
        assert!((150..=350).contains(&c), "{counts:?}");
    }
}

#[test]
fn specs_are_valid_and_deterministic() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..200).map(|_| sample_case_spec(&mut rng)).collect::<Vec<_>>()
    };
    let specs = draw(2);
    assert_eq!(specs, draw(2));
    for s in &specs {
        s.validate().unwrap();
        let af = s.area_fraction();
        if conclusion_rule(s) == Label::Insufficient {
            assert!(af < INSUFFICIENT_AREA);
        } else {
            assert!((GRADABLE_AREA.0..=GRADABLE_AREA.1).contains(&af), "{af}");
        }
    }
}

#[test]
fn conclusion_rule_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = loop {
        let s = sample_case_spec(&mut rng);
        if s.area_fraction() > 0.25 {
            break s;
        }
    };
    let with = |p, c, o, m, n| CaseSpec { pleomorphism: p, crowding: c, polarity_loss: o, mitosis: m, nucleoli: n, ..base.clone() };
    assert_eq!(conclusion_rule(&with(0, 0, 0, 0, 0)), Label::Normal);
    assert_eq!(conclusion_rule(&with(2, 2, 0, 1, 0)), Label::HighGrade);
    assert_eq!(conclusion_rule(&with(1, 0, 1, 0, 1)), Label::LowGrade);
    let mut small = with(2, 2, 1, 1, 1);
    let k = (0.05 / small.area_fraction()).sqrt();
    small.lesion.a *= k;
    small.lesion.b *= k;
    assert!((small.area_fraction() - 0.05).abs() < 1e-12);
    assert_eq!(conclusion_rule(&small), Label::Insufficient);
}

#[test]
fn mask_matches_ellipse_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let s = sample_case_spec(&mut rng);
        let r = render(&s);
        let px = 1.0 / (s.size * s.size) as f64;
        assert!((r.mask_fraction() - s.area_fraction()).abs() <= 2.0 * px + 0.01, "{} vs {}", r.mask_fraction(), s.area_fraction());
    }
}

#[test]
fn crowding_adds_dark_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 50 {
        let s = sample_case_spec(&mut rng);
        if conclusion_rule(&s) == Label::Insufficient {
            continue;
        }
        let lo = render(&CaseSpec { crowding: 0, ..s.clone() });
        let hi = render(&CaseSpec { crowding: 2, ..s.clone() });
        assert!(dark_pixels_in_mask(&hi) > dark_pixels_in_mask(&lo));
        checked += 1;
    }
}

#[test]
fn rendering_is_deterministic_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = sample_case_spec(&mut rng);
    let (a, b) = (render(&s), render(&s));
    assert_eq!(a.image, b.image);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.image.shape(), &[IMAGE_SIZE, IMAGE_SIZE, 3]);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn reports_agree_with_the_case() {
    let ds = generate(&SynthConfig::new(11, 150, 50));
    for c in ds.cases() {
        assert_eq!(c.reports.len(), VARIANTS);
        assert_eq!(c.label, conclusion_rule(c.spec.as_ref().unwrap()));
        for r in &c.reports {
            for t in 0..NUM_TASKS - 1 {
                assert_eq!(parse_level(t, &r.sentences[t]), Some(c.levels[t] as usize), "{}", r.sentences[t]);
            }
            assert_eq!(extract_conclusion_text(&r.sentences[NUM_TASKS - 1]), Some(c.label));
            assert_eq!(parse_conclusion(&r.sentences[NUM_TASKS - 1]), Some(c.label));
        }
    }
}

#[test]
fn every_conclusion_template_names_its_label() {
    for (level, options) in TEMPLATES[NUM_TASKS - 1].iter().enumerate() {
        for s in options.iter() {
            assert_eq!(extract_conclusion_text(s), Label::from_index(level), "{s}");
        }
    }
}

#[test]
fn vocabulary_is_small() {
    let n = template_words().len();
    assert!(n <= 120, "{n} words");
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
fn written_dataset_is_reproducible_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ds = generate(&SynthConfig::new(7, 12, 4));
    write_dataset(&ds, &a).unwrap();
    write_dataset(&generate(&SynthConfig::new(7, 12, 4)), &b).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 1 + 16 * (2 + VARIANTS));

    let back = read_dataset(&a).unwrap();
    assert_eq!(back.train.len(), 12);
    assert_eq!(back.test.len(), 4);
    for (x, y) in ds.cases().zip(back.cases()) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.label, y.label);
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.reports, y.reports);
        assert!(x.image.max_abs_diff(&y.image) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn default_split_sizes_and_disjoint_streams() {
    let ds = generate(&SynthConfig::new(0, 600, 200));
    assert_eq!(ds.cases().count(), 800);
    assert_eq!(ds.cases().map(|c| c.reports.len()).sum::<usize>(), 4000);
    audit_disjoint(&ds).unwrap();
    let ids: HashSet<_> = ds.cases().map(|c| c.id.clone()).collect();
    assert_eq!(ids.len(), 800);
    for c in ds.cases().filter(|c| c.label != Label::Insufficient) {
        let af = c.spec.as_ref().unwrap().area_fraction();
        assert!((GRADABLE_AREA.0..=GRADABLE_AREA.1).contains(&af));
    }
}

#[test]
fn reused_seed_is_caught_by_the_audit() {
    let mut ds = generate(&SynthConfig::new(1, 3, 2));
    let leaked = ds.train[0].spec.clone().unwrap();
    ds.test[1] = make_case("leak".into(), Split::Test, leaked);
    assert!(audit_disjoint(&ds).is_err());
}

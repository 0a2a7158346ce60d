//! Conclusion extraction, DCA, retrieval recall and attention localization.

use crate::error::{Error, Result};
use crate::synth::Label;

const CONCLUSION_KEYWORDS: [(Label, &[&str]); 4] = [
    (Label::Normal, &["normal"]),
    (Label::LowGrade, &["low-grade", "punlmp"]),
    (Label::HighGrade, &["high-grade"]),
    (Label::Insufficient, &["insufficient"]),
];

/// The single class whose keywords appear in `tokens`; `None` (Unknown) when no class
/// or more than one class is named.
pub fn extract_conclusion<T: AsRef<str>>(tokens: &[T]) -> Option<Label> {
    let mut found = None;
    for (label, kws) in CONCLUSION_KEYWORDS {
        if tokens.iter().any(|t| kws.contains(&t.as_ref())) {
            if found.is_some() {
                return None;
            }
            found = Some(label);
        }
    }
    found
}

pub fn extract_conclusion_text(text: &str) -> Option<Label> {
    let toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    extract_conclusion(&toks)
}

/// Fraction of predictions equal to the truth; Unknown counts as wrong.
pub fn dca_score(predicted: &[Option<Label>], truth: &[Label]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} cases",
            predicted.len(),
            truth.len()
        )));
    }
    let ok = predicted.iter().zip(truth).filter(|(p, t)| **p == Some(**t)).count();
    Ok(ok as f64 / truth.len() as f64)
}

/// Indices of `scores` sorted by descending score; ties keep index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean over queries of the fraction of the top `k` images whose label matches.
pub fn cr_at_k(rankings: &[Vec<usize>], query_labels: &[Label], image_labels: &[Label], k: usize) -> Result<f64> {
    if image_labels.is_empty() {
        return Err(Error::invalid("empty image set"));
    }
    if k == 0 || k > image_labels.len() {
        return Err(Error::invalid(format!("k={k} outside 1..={}", image_labels.len())));
    }
    if rankings.len() != query_labels.len() || rankings.is_empty() {
        return Err(Error::invalid(format!("{} rankings for {} queries", rankings.len(), query_labels.len())));
    }
    let mut total = 0.0;
    for (r, &q) in rankings.iter().zip(query_labels) {
        if r.len() < k {
            return Err(Error::invalid("ranking shorter than k"));
        }
        let hits = r[..k].iter().filter(|&&i| image_labels[i] == q).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Majority-vote downsampling of an `h×w` mask onto a `gh×gw` grid; ties count as inside.
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, gh: usize, gw: usize) -> Result<Vec<bool>> {
    if mask.len() != h * w || gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::shape(
            "downsample_mask",
            format!("{} entries as {h}×{w} onto {gh}×{gw}", mask.len()),
        ));
    }
    let (fy, fx) = (h / gh, w / gw);
    let mut out = vec![false; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut n = 0;
            for y in gy * fy..(gy + 1) * fy {
                for x in gx * fx..(gx + 1) * fx {
                    n += mask[y * w + x] as usize;
                }
            }
            out[gy * gw + gx] = 2 * n >= fy * fx;
        }
    }
    Ok(out)
}

/// Mean over maps of the attention mass on `grid_mask`.
pub fn attention_mass_in_mask(maps: &[Vec<f64>], grid_mask: &[bool]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::invalid("no attention maps"));
    }
    let mut total = 0.0;
    for a in maps {
        if a.len() != grid_mask.len() {
            return Err(Error::shape(
                "attention_mass_in_mask",
                format!("map of {} vs mask of {}", a.len(), grid_mask.len()),
            ));
        }
        let s: f64 = a.iter().sum();
        if a.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("attention map is not a probability vector (sum {s})")));
        }
        total += a.iter().zip(grid_mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>();
    }
    Ok(total / maps.len() as f64)
}

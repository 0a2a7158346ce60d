//! Unsmoothed BLEU with clipped n-gram counts and the closest-reference brevity penalty.

use std::collections::HashMap;

fn ngrams<T: AsRef<str>>(toks: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped<T: AsRef<str>>(cand: &[T], refs: &[Vec<T>], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; ties go to the shorter one.
fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Accumulated statistics over a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matched: [usize; 4],
    pub total: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add<T: AsRef<str>>(&mut self, cand: &[T], refs: &[Vec<T>]) {
        for n in 1..=4 {
            let (m, t) = clipped(cand, refs, n);
            self.matched[n - 1] += m;
            self.total[n - 1] += t;
        }
        self.cand_len += cand.len();
        self.ref_len += closest_ref_len(cand.len(), refs);
    }

    /// BLEU-`n`, `1 ≤ n ≤ 4`.
    pub fn score(&self, n: usize) -> f64 {
        assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for m in 0..n {
            if self.matched[m] == 0 || self.total[m] == 0 {
                return 0.0;
            }
            log_p += (self.matched[m] as f64 / self.total[m] as f64).ln();
        }
        let bp = (1.0 - self.ref_len as f64 / self.cand_len as f64).min(0.0).exp();
        bp * (log_p / n as f64).exp()
    }
}

/// Sentence-level BLEU-`n` of one candidate against its references.
pub fn bleu_n<T: AsRef<str>>(cand: &[T], refs: &[Vec<T>], n: usize) -> f64 {
    let mut s = BleuStats::default();
    s.add(cand, refs);
    s.score(n)
}

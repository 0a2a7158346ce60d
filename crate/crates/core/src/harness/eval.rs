//! Frozen-model evaluation: generation, BLEU, DCA, retrieval and attention mass.

use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::image_model::{hwc_to_nchw, Mode};
use crate::language::{make_task_batch_for, Generated, SeqFeatures, TaskSequence};
use crate::model::{CamSource, Mdnet};
use crate::synth::reports::NUM_TASKS;
use crate::synth::{Case, Label, Report};
use crate::tensor::Tensor;

use super::bleu::BleuStats;
use super::metrics::{attention_mass_in_mask, cr_at_k, dca_score, downsample_mask, extract_conclusion, rank_desc};

pub const DEFAULT_MAX_LEN: usize = 30;
const IMAGE_CHUNK: usize = 50;
const SEQ_CHUNK: usize = 500;

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row gather keeps shape consistent")
}

/// Eval-mode image features of a set of images, with the argmax-class CAM.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// `[N, D, H', W']`.
    pub conv: Tensor,
    /// `[N, D]`.
    pub pooled: Tensor,
    /// `[N, H'·W']`.
    pub cam: Tensor,
    /// `[N, classes]`.
    pub logits: Tensor,
}

impl FeatureBank {
    pub fn compute(model: &Mdnet, images: &[&Tensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("no images"));
        }
        let (mut conv, mut pooled, mut cam, mut logits) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for chunk in images.chunks(IMAGE_CHUNK) {
            let tape = Tape::new();
            let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
            let x = tape.input(hwc_to_nchw(&owned)?);
            let f = model.forward(&tape, x, Mode::Eval, CamSource::Argmax)?;
            for i in 0..chunk.len() {
                conv.push(f.features.conv.value().index0(i));
                pooled.push(f.features.pooled.value().index0(i));
                cam.push(f.features.cam.value().index0(i));
                logits.push(f.logits.value().index0(i));
            }
        }
        Ok(FeatureBank {
            conv: Tensor::stack(&conv)?,
            pooled: Tensor::stack(&pooled)?,
            cam: Tensor::stack(&cam)?,
            logits: Tensor::stack(&logits)?,
        })
    }

    pub fn len(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tape leaves for `rows` of the bank.
    pub fn select<'t>(&self, tape: &'t Tape, rows: &[usize]) -> SeqFeatures<'t> {
        SeqFeatures {
            conv: tape.input(gather_rows(&self.conv, rows)),
            pooled: tape.input(gather_rows(&self.pooled, rows)),
            cam: tape.input(gather_rows(&self.cam, rows)),
        }
    }

    pub fn predicted_class(&self, i: usize) -> usize {
        crate::aas::argmax(self.logits.index0(i).data())
    }
}

/// Greedy decodes of every task for every image: `out[i][e]`.
pub fn generate_all(model: &Mdnet, bank: &FeatureBank, max_len: usize) -> Result<Vec<Vec<Generated>>> {
    let n = bank.len();
    let mut out: Vec<Vec<Generated>> = (0..n).map(|_| Vec::with_capacity(NUM_TASKS)).collect();
    let rows: Vec<usize> = (0..n).collect();
    for e in 0..model.vocab.tasks() {
        for chunk in rows.chunks(SEQ_CHUNK / 2) {
            let tape = Tape::new();
            let f = bank.select(&tape, chunk);
            let g = model.lang.generate(&tape, &model.store, &f, e, max_len, model.vocab.end())?;
            for (&i, gi) in chunk.iter().zip(g) {
                out[i].push(gi);
            }
        }
    }
    Ok(out)
}

/// Negative log-likelihood of each `(image row, sequence)` pair.
pub fn score_pairs(model: &Mdnet, bank: &FeatureBank, pairs: &[(usize, &TaskSequence)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SEQ_CHUNK) {
        let tape = Tape::new();
        let rows: Vec<usize> = chunk.iter().map(|(i, _)| *i).collect();
        let f = bank.select(&tape, &rows);
        let seqs: Vec<TaskSequence> = chunk
            .iter()
            .enumerate()
            .map(|(k, (_, s))| TaskSequence { case: k, task: s.task, tokens: s.tokens.clone() })
            .collect();
        out.extend(model.lang.sequence_nlls(&tape, &model.store, &f, &seqs, model.vocab.end())?);
    }
    Ok(out)
}

/// Description-only query sequences of a report; the conclusion task is left out.
pub fn query_sequences(model: &Mdnet, report: &Report) -> Result<Vec<TaskSequence>> {
    let tasks: Vec<usize> = (0..model.vocab.tasks() - 1).collect();
    make_task_batch_for(&[report], &model.vocab, &tasks)
}

/// `Σ_e −nll(image, e, sentence_e)` over description tasks only.
pub fn score_report(model: &Mdnet, bank: &FeatureBank, image: usize, query: &[TaskSequence]) -> Result<f64> {
    let last = model.vocab.tasks() - 1;
    if query.iter().any(|s| s.task >= last) {
        return Err(Error::invalid("retrieval queries must not contain the conclusion task"));
    }
    let pairs: Vec<(usize, &TaskSequence)> = query.iter().map(|s| (image, s)).collect();
    Ok(-score_pairs(model, bank, &pairs)?.iter().sum::<f64>())
}

/// Score matrix `[query][image]`.
pub fn retrieval_scores(model: &Mdnet, bank: &FeatureBank, queries: &[Vec<TaskSequence>]) -> Result<Vec<Vec<f64>>> {
    let last = model.vocab.tasks() - 1;
    if queries.iter().flatten().any(|s| s.task >= last) {
        return Err(Error::invalid("retrieval queries must not contain the conclusion task"));
    }
    let n = bank.len();
    let mut pairs = Vec::new();
    for q in queries {
        for i in 0..n {
            for s in q {
                pairs.push((i, s));
            }
        }
    }
    let nll = score_pairs(model, bank, &pairs)?;
    let mut out = vec![vec![0.0; n]; queries.len()];
    let mut k = 0;
    for (qi, q) in queries.iter().enumerate() {
        for i in 0..n {
            for _ in q {
                out[qi][i] -= nll[k];
                k += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseLog {
    pub id: String,
    pub dca_pred: Option<Label>,
    pub bleu: [f64; 4],
    /// `None` for insufficient cases.
    pub attn_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub dca: f64,
    /// Cr@1, Cr@5, Cr@10.
    pub cr: [f64; 3],
    /// Mean attention mass inside the lesion over non-insufficient cases.
    pub attn_mass: f64,
    /// Mean coarse-grid mask fraction over the same cases (the uniform-attention value).
    pub attn_uniform: f64,
    /// Label prior of the retrieval image set for each query label, averaged.
    pub retrieval_prior: f64,
    pub cases: Vec<CaseLog>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub max_len: usize,
    /// Number of test cases used as retrieval queries; 0 skips retrieval.
    pub queries: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { max_len: DEFAULT_MAX_LEN, queries: 200 }
    }
}

fn words(model: &Mdnet, g: &Generated) -> Vec<String> {
    g.tokens
        .iter()
        .take_while(|&&t| t != model.vocab.end())
        .filter_map(|&t| model.vocab.token(t).map(String::from))
        .collect()
}

fn report_words(r: &Report) -> Vec<String> {
    r.sentences.iter().flat_map(|s| crate::synth::reports::tokenize(s)).collect()
}

pub fn evaluate(model: &Mdnet, cases: &[Case], opts: EvalOptions) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::invalid("no evaluation cases"));
    }
    let images: Vec<&Tensor> = cases.iter().map(|c| &c.image).collect();
    let bank = FeatureBank::compute(model, &images)?;
    let generated = generate_all(model, &bank, opts.max_len)?;
    let (gh, gw) = model.config.image.out_hw();
    let (h, w) = (model.config.image.input_h, model.config.image.input_w);
    let last = model.vocab.tasks() - 1;

    let mut corpus = BleuStats::default();
    let mut logs = Vec::with_capacity(cases.len());
    let mut preds = Vec::with_capacity(cases.len());
    let (mut mass, mut uni, mut n_mass) = (0.0, 0.0, 0usize);
    for (c, g) in cases.iter().zip(&generated) {
        let cand: Vec<String> = g.iter().flat_map(|gi| words(model, gi)).collect();
        let refs: Vec<Vec<String>> = c.reports.iter().map(report_words).collect();
        corpus.add(&cand, &refs);
        let mut own = BleuStats::default();
        own.add(&cand, &refs);
        let pred = extract_conclusion(&words(model, &g[last]));
        preds.push(pred);
        let attn_ratio = if c.label == Label::Insufficient {
            None
        } else {
            let grid = downsample_mask(&c.mask, h, w, gh, gw)?;
            let maps: Vec<Vec<f64>> = g.iter().flat_map(|gi| gi.attention.iter().cloned()).collect();
            let m = attention_mass_in_mask(&maps, &grid)?;
            mass += m;
            uni += grid.iter().filter(|&&b| b).count() as f64 / grid.len() as f64;
            n_mass += 1;
            Some(m)
        };
        logs.push(CaseLog {
            id: c.id.clone(),
            dca_pred: pred,
            bleu: [own.score(1), own.score(2), own.score(3), own.score(4)],
            attn_ratio,
        });
    }
    let truth: Vec<Label> = cases.iter().map(|c| c.label).collect();
    let dca = dca_score(&preds, &truth)?;

    let (mut cr, mut prior) = ([0.0; 3], 0.0);
    let nq = opts.queries.min(cases.len());
    if nq > 0 {
        let queries = cases[..nq]
            .iter()
            .map(|c| query_sequences(model, &c.reports[0]))
            .collect::<Result<Vec<_>>>()?;
        let scores = retrieval_scores(model, &bank, &queries)?;
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s| rank_desc(s)).collect();
        let qlabels: Vec<Label> = truth[..nq].to_vec();
        for (slot, k) in cr.iter_mut().zip([1, 5, 10]) {
            *slot = cr_at_k(&rankings, &qlabels, &truth, k.min(truth.len()))?;
        }
        prior = qlabels
            .iter()
            .map(|q| truth.iter().filter(|t| *t == q).count() as f64 / truth.len() as f64)
            .sum::<f64>()
            / nq as f64;
    }
    let denom = n_mass.max(1) as f64;
    Ok(EvalReport {
        bleu: [corpus.score(1), corpus.score(2), corpus.score(3), corpus.score(4)],
        dca,
        cr,
        attn_mass: mass / denom,
        attn_uniform: uni / denom,
        retrieval_prior: prior,
        cases: logs,
    })
}

/// Mean and population standard deviation of each metric across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, f64, f64)>,
}

impl MetricReport {
    pub fn from_runs(runs: &[EvalReport]) -> Self {
        let stat = |f: &dyn Fn(&EvalReport) -> f64| {
            let v: Vec<f64> = runs.iter().map(f).collect();
            let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt();
            (m, s)
        };
        let mut rows = Vec::new();
        let mut push = |name: &str, f: &dyn Fn(&EvalReport) -> f64| {
            let (m, s) = stat(f);
            rows.push((name.to_string(), m, s));
        };
        for n in 0..4 {
            push(&format!("bleu{}", n + 1), &|r| r.bleu[n]);
        }
        push("dca", &|r| r.dca);
        push("cr@1", &|r| r.cr[0]);
        push("cr@5", &|r| r.cr[1]);
        push("cr@10", &|r| r.cr[2]);
        push("attn_ratio", &|r| r.attn_mass);
        MetricReport { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std\n");
        for (n, m, d) in &self.rows {
            s.push_str(&format!("{n},{m:.6},{d:.6}\n"));
        }
        s
    }
}

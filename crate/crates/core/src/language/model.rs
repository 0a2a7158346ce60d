//! Attention LSTM over task sentences.

use rand::Rng;

use super::vocab::Vocab;
use crate::engine::{concat, embed_uniform, he_normal, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::synth::reports::Report;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LangConfig {
    /// Word embedding width `d_e`.
    pub embed: usize,
    /// LSTM hidden width `d_h`.
    pub hidden: usize,
    /// Channels `D` of the conv maps.
    pub channels: usize,
    /// Spatial positions `H'·W'`.
    pub positions: usize,
    pub vocab: usize,
}

impl LangConfig {
    pub fn new(channels: usize, positions: usize, vocab: usize) -> Self {
        LangConfig { embed: 64, hidden: 128, channels, positions, vocab }
    }
}

/// Image-side inputs for a batch of `N` sequences.
#[derive(Clone, Copy)]
pub struct SeqFeatures<'t> {
    /// `[N, D, H', W']`.
    pub conv: Var<'t>,
    /// `[N, D]`.
    pub pooled: Var<'t>,
    /// `[N, H'·W']`.
    pub cam: Var<'t>,
}

impl<'t> SeqFeatures<'t> {
    pub fn len(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row selection along the batch axis; gradients of repeated rows add up.
    pub fn gather(&self, rows: &[usize]) -> Result<SeqFeatures<'t>> {
        Ok(SeqFeatures {
            conv: self.conv.gather(rows)?,
            pooled: self.pooled.gather(rows)?,
            cam: self.cam.gather(rows)?,
        })
    }
}

#[derive(Clone, Copy)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

/// One teacher-forced training sequence: task `task` of image row `case`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    pub case: usize,
    pub task: usize,
    /// Sentence tokens, end token excluded.
    pub tokens: Vec<usize>,
}

/// Duplicates every case once per task, case-major: sequence `b·K + e` is task `e` of
/// case `b` and starts with `START_e`.
pub fn make_task_batch(reports: &[&Report], vocab: &Vocab) -> Result<Vec<TaskSequence>> {
    make_task_batch_for(reports, vocab, &(0..vocab.tasks()).collect::<Vec<_>>())
}

/// As [`make_task_batch`] restricted to `tasks`.
pub fn make_task_batch_for(reports: &[&Report], vocab: &Vocab, tasks: &[usize]) -> Result<Vec<TaskSequence>> {
    let mut out = Vec::with_capacity(reports.len() * tasks.len());
    for (b, r) in reports.iter().enumerate() {
        for &e in tasks {
            let s = r
                .sentences
                .get(e)
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| Error::invalid(format!("case {b} is missing task {}", e + 1)))?;
            out.push(TaskSequence { case: b, task: e, tokens: vocab.encode(s)? });
        }
    }
    Ok(out)
}

/// Parameter leaves of one tape, bound once and shared by every unrolled step.
#[derive(Clone, Copy)]
pub struct LangVars<'t> {
    pub embed: Var<'t>,
    pub w_f: Var<'t>,
    pub lstm_w: Var<'t>,
    pub lstm_b: Var<'t>,
    pub w_h: Var<'t>,
    pub w_att: Var<'t>,
    pub decoder: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct LangModel {
    pub config: LangConfig,
    pub embed: ParamId,
    pub w_f: ParamId,
    pub lstm_w: ParamId,
    pub lstm_b: ParamId,
    pub w_h: ParamId,
    pub w_att: ParamId,
    pub decoder: ParamId,
}

/// Decoded tokens and the attention map used at each emitting step.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Emitted tokens, ending with the end token unless `max_len` was reached.
    pub tokens: Vec<usize>,
    /// `attention[j]` produced token `j`; each has `H'·W'` entries.
    pub attention: Vec<Vec<f64>>,
}

impl LangModel {
    pub fn new<R: Rng>(store: &mut ParamStore, config: LangConfig, rng: &mut R) -> Self {
        let LangConfig { embed: de, hidden: dh, channels: d, positions: p, vocab: v } = config;
        let lstm_in = de + d + dh;
        let mut bias = Tensor::zeros(&[4 * dh]);
        // Forget-gate bias starts at one.
        bias.data_mut()[dh..2 * dh].fill(1.0);
        LangModel {
            config,
            embed: store.add("lang.embed", embed_uniform(&[v, de], rng)),
            w_f: store.add("lang.w_f", he_normal(&[d, de], d, rng)),
            lstm_w: store.add("lang.lstm.weight", he_normal(&[lstm_in, 4 * dh], lstm_in, rng)),
            lstm_b: store.add("lang.lstm.bias", bias),
            w_h: store.add("lang.att.w_h", he_normal(&[dh, p], dh, rng)),
            w_att: store.add("lang.att.w_att", he_normal(&[p, p], p, rng)),
            decoder: store.add("lang.decoder", he_normal(&[dh, v], dh, rng)),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> LangVars<'t> {
        LangVars {
            embed: tape.param(store, self.embed),
            w_f: tape.param(store, self.w_f),
            lstm_w: tape.param(store, self.lstm_w),
            lstm_b: tape.param(store, self.lstm_b),
            w_h: tape.param(store, self.w_h),
            w_att: tape.param(store, self.w_att),
            decoder: tape.param(store, self.decoder),
        }
    }

    pub fn check_features(&self, f: &SeqFeatures<'_>) -> Result<()> {
        let (n, d, p) = (f.len(), self.config.channels, self.config.positions);
        let cs = f.conv.shape();
        if cs.len() != 4 || cs[0] != n || cs[1] != d || cs[2] * cs[3] != p {
            return Err(Error::shape("lang", format!("conv maps {cs:?}, expected [{n},{d},H',W'] with H'·W'={p}")));
        }
        if f.pooled.shape() != [n, d] || f.cam.shape() != [n, p] {
            return Err(Error::shape(
                "lang",
                format!("pooled {:?} / cam {:?} for N={n}, D={d}, P={p}", f.pooled.shape(), f.cam.shape()),
            ));
        }
        Ok(())
    }

    pub fn zero_state<'t>(&self, tape: &'t Tape, n: usize) -> LstmState<'t> {
        let dh = self.config.hidden;
        LstmState { h: tape.input(Tensor::zeros(&[n, dh])), c: tape.input(Tensor::zeros(&[n, dh])) }
    }

    /// `a = softmax(tanh(h·W_h + cam)·W_att)`, `z[k] = Σ_p a[p]·C[k,p]`. Returns `(a [N,P], z [N,D])`.
    pub fn attention_step<'t>(
        &self,
        pv: &LangVars<'t>,
        h_prev: Var<'t>,
        conv_flat: Var<'t>,
        cam: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (d, p, dh) = (self.config.channels, self.config.positions, self.config.hidden);
        let n = h_prev.shape()[0];
        if h_prev.shape() != [n, dh] || conv_flat.shape() != [n, d, p] || cam.shape() != [n, p] {
            return Err(Error::shape(
                "attention_step",
                format!(
                    "h {:?}, C {:?}, cam {:?} for d_h={dh}, D={d}, P={p}",
                    h_prev.shape(),
                    conv_flat.shape(),
                    cam.shape()
                ),
            ));
        }
        let u = h_prev.linear(pv.w_h, None)?.add(cam)?.tanh();
        let a = u.linear(pv.w_att, None)?.softmax(1)?;
        let z = conv_flat.bmm(a.reshape(&[n, p, 1])?)?.reshape(&[n, d])?;
        Ok((a, z))
    }

    /// Four-gate LSTM over `[x, z, h]`, gate order input, forget, cell, output.
    /// Returns the new state and `[N, V]` word log-probabilities.
    pub fn lstm_step<'t>(
        &self,
        pv: &LangVars<'t>,
        state: LstmState<'t>,
        x: Var<'t>,
        z: Var<'t>,
    ) -> Result<(LstmState<'t>, Var<'t>)> {
        let dh = self.config.hidden;
        let gates = concat(&[x, z, state.h], 1)?
            .linear(pv.lstm_w, Some(pv.lstm_b))?;
        let i = gates.slice(1, 0, dh)?.sigmoid();
        let f = gates.slice(1, dh, dh)?.sigmoid();
        let g = gates.slice(1, 2 * dh, dh)?.tanh();
        let o = gates.slice(1, 3 * dh, dh)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        let logp = h.linear(pv.decoder, None)?.log_softmax(1)?;
        Ok((LstmState { h, c }, logp))
    }

    fn embed_tokens<'t>(&self, pv: &LangVars<'t>, ids: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        pv.embed.gather(ids)
    }

    fn flat_conv<'t>(&self, f: &SeqFeatures<'t>) -> Result<Var<'t>> {
        f.conv.reshape(&[f.len(), self.config.channels, self.config.positions])
    }

    /// Runs the teacher-forced unroll and returns per-step log-probs and targets.
    ///
    /// Step 0 feeds `W_F·F(I)` with no target; step 1 feeds `E[START_e]`; step `t+1`
    /// feeds sentence token `t`. Targets are the sentence tokens then the end token.
    /// Sequences shorter than the longest are padded; their padded steps get mask 0.
    fn unroll<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &SeqFeatures<'t>,
        seqs: &[TaskSequence],
        end: usize,
    ) -> Result<Vec<(Var<'t>, Vec<usize>, Vec<bool>)>> {
        self.check_features(feats)?;
        let rows: Vec<usize> = seqs.iter().map(|s| s.case).collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= feats.len()) {
            return Err(Error::invalid(format!("sequence refers to case {bad} of {}", feats.len())));
        }
        let f = feats.gather(&rows)?;
        let n = seqs.len();
        let conv = self.flat_conv(&f)?;
        let pv = self.bind(tape, store);
        let mut state = self.zero_state(tape, n);

        let x0 = f.pooled.linear(pv.w_f, None)?;
        let (_, z) = self.attention_step(&pv, state.h, conv, f.cam)?;
        state = self.lstm_step(&pv, state, x0, z)?.0;

        let longest = seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        let mut inputs: Vec<usize> = seqs.iter().map(|s| s.task + 1).collect();
        let mut steps = Vec::with_capacity(longest + 1);
        for t in 0..=longest {
            let mut targets = Vec::with_capacity(n);
            let mut live = Vec::with_capacity(n);
            for s in seqs {
                let (tok, on) = match t.cmp(&s.tokens.len()) {
                    std::cmp::Ordering::Less => (s.tokens[t], true),
                    std::cmp::Ordering::Equal => (end, true),
                    std::cmp::Ordering::Greater => (end, false),
                };
                targets.push(tok);
                live.push(on);
            }
            let x = self.embed_tokens(&pv, &inputs)?;
            let (_, z) = self.attention_step(&pv, state.h, conv, f.cam)?;
            let (next, logp) = self.lstm_step(&pv, state, x, z)?;
            state = next;
            inputs = targets.clone();
            steps.push((logp, targets, live));
        }
        Ok(steps)
    }

    /// `Σ_s w_s · Σ_t −log p(target_t)` over the batch.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &SeqFeatures<'t>,
        seqs: &[TaskSequence],
        weights: &[f64],
        end: usize,
    ) -> Result<Var<'t>> {
        if weights.len() != seqs.len() {
            return Err(Error::shape("batch_loss", format!("{} weights for {} sequences", weights.len(), seqs.len())));
        }
        if seqs.is_empty() {
            return Err(Error::invalid("empty sequence batch"));
        }
        let mut total: Option<Var<'t>> = None;
        for (logp, targets, live) in self.unroll(tape, store, feats, seqs, end)? {
            let w: Vec<f64> = live.iter().zip(weights).map(|(&on, &w)| if on { w } else { 0.0 }).collect();
            let l = logp.nll_loss(&targets, &w)?;
            total = Some(match total {
                None => l,
                Some(acc) => acc.add(l)?,
            });
        }
        Ok(total.expect("at least one step"))
    }

    /// Negative log-likelihood of each sequence, without building gradients.
    pub fn sequence_nlls<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &SeqFeatures<'t>,
        seqs: &[TaskSequence],
        end: usize,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; seqs.len()];
        for (logp, targets, live) in self.unroll(tape, store, feats, seqs, end)? {
            let lp = logp.value();
            let v = lp.shape()[1];
            for (s, (&t, &on)) in targets.iter().zip(&live).enumerate() {
                if on {
                    out[s] -= lp.data()[s * v + t];
                }
            }
        }
        Ok(out)
    }

    /// Greedy decoding of task `task` for every row of `feats`.
    pub fn generate<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &SeqFeatures<'t>,
        task: usize,
        max_len: usize,
        end: usize,
    ) -> Result<Vec<Generated>> {
        self.check_features(feats)?;
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let n = feats.len();
        let p = self.config.positions;
        let conv = self.flat_conv(feats)?;
        let pv = self.bind(tape, store);
        let mut state = self.zero_state(tape, n);
        let x0 = feats.pooled.linear(pv.w_f, None)?;
        let (_, z) = self.attention_step(&pv, state.h, conv, feats.cam)?;
        state = self.lstm_step(&pv, state, x0, z)?.0;

        let mut out = vec![Generated { tokens: Vec::new(), attention: Vec::new() }; n];
        let mut inputs = vec![task + 1; n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            let x = self.embed_tokens(&pv, &inputs)?;
            let (a, z) = self.attention_step(&pv, state.h, conv, feats.cam)?;
            let (next, logp) = self.lstm_step(&pv, state, x, z)?;
            state = next;
            let (lp, av) = (logp.value(), a.value());
            let v = lp.shape()[1];
            for s in 0..n {
                if done[s] {
                    continue;
                }
                let tok = crate::aas::argmax(&lp.data()[s * v..(s + 1) * v]);
                out[s].tokens.push(tok);
                out[s].attention.push(av.data()[s * p..(s + 1) * p].to_vec());
                inputs[s] = tok;
                done[s] = tok == end;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

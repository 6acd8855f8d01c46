//! Linear-chain CRF: path scores, partition function, marginals, Viterbi
//! decoding, token-level NLL and the HMM joint probability for contrast.

use crate::error::{Error, Result};
use crate::numerics::{logsumexp_slice, FusedOp, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Transition weights over `C` classes. The start and stop states are
/// kept as separate vectors; [`CrfWeights::full_matrix`] gives the square
/// `(C+2)` form.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfWeights {
    /// `trans[i][j]`: score of moving from class i to class j.
    pub trans: Tensor,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfWeights {
    pub fn zeros(c: usize) -> Self {
        CrfWeights {
            trans: Tensor::zeros(&[c, c]),
            start: vec![0.0; c],
            end: vec![0.0; c],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.start.len()
    }

    fn t(&self, i: usize, j: usize) -> f64 {
        self.trans.data()[i * self.start.len() + j]
    }

    /// `(C+2) × (C+2)` matrix with START at index C and STOP at C+1.
    /// Moves into START or out of STOP are −∞.
    pub fn full_matrix(&self) -> Tensor {
        let c = self.n_classes();
        let m = c + 2;
        let (start, stop) = (c, c + 1);
        let mut out = vec![f64::NEG_INFINITY; m * m];
        for i in 0..c {
            for j in 0..c {
                out[i * m + j] = self.t(i, j);
            }
            out[start * m + i] = self.start[i];
            out[i * m + stop] = self.end[i];
        }
        out[start * m + stop] = f64::NEG_INFINITY;
        Tensor::matrix(m, m, out).expect("square")
    }

    /// Apply a transition mask: disallowed moves become −∞.
    pub fn masked(&self, allowed: &Allowed) -> Self {
        let c = self.n_classes();
        let mut w = self.clone();
        for i in 0..c {
            for j in 0..c {
                if !allowed.trans[i * c + j] {
                    w.trans.data_mut()[i * c + j] = f64::NEG_INFINITY;
                }
            }
            if !allowed.start[i] {
                w.start[i] = f64::NEG_INFINITY;
            }
        }
        w
    }

    fn check(&self, emissions: &Tensor) -> Result<()> {
        let c = self.n_classes();
        if !emissions.is_matrix() || emissions.cols() != c || self.trans.shape() != [c, c] || self.end.len() != c {
            return Err(Error::dim("crf", emissions.shape(), self.trans.shape()));
        }
        if emissions.rows() == 0 {
            return Err(Error::EmptyInput("crf over an empty sequence".into()));
        }
        Ok(())
    }
}

/// Which moves are permitted; everything is allowed unless strict BIO
/// decoding is requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Allowed {
    pub trans: Vec<bool>,
    pub start: Vec<bool>,
}

impl Allowed {
    /// `I-X` may only follow `B-X` or `I-X`, and may not start a sentence.
    pub fn strict_bio(tags: &[String]) -> Self {
        let c = tags.len();
        let inside_type = |t: &str| t.strip_prefix("I-").map(str::to_string);
        let entity_type = |t: &str| {
            t.strip_prefix("B-")
                .or_else(|| t.strip_prefix("I-"))
                .map(str::to_string)
        };
        let mut trans = vec![true; c * c];
        for (i, from) in tags.iter().enumerate() {
            for (j, to) in tags.iter().enumerate() {
                if let Some(ty) = inside_type(to) {
                    trans[i * c + j] = entity_type(from).as_deref() == Some(ty.as_str());
                }
            }
        }
        let start = tags.iter().map(|t| inside_type(t).is_none()).collect();
        Allowed { trans, start }
    }
}

/// `start[y0] + e[0,y0] + Σ (T[y_{t−1},y_t] + e[t,y_t]) + end[y_n]`.
pub fn sequence_score(emissions: &Tensor, tags: &[usize], w: &CrfWeights) -> Result<f64> {
    w.check(emissions)?;
    let c = w.n_classes();
    if tags.len() != emissions.rows() || tags.iter().any(|&y| y >= c) {
        return Err(Error::Contract(format!(
            "tag sequence {tags:?} does not fit {} positions of {c} classes",
            emissions.rows()
        )));
    }
    let mut acc = w.start[tags[0]] + emissions.at(0, tags[0]);
    for t in 1..tags.len() {
        acc = acc + w.t(tags[t - 1], tags[t]) + emissions.at(t, tags[t]);
    }
    Ok(acc + w.end[tags[tags.len() - 1]])
}

/// Forward log-messages `alpha[t][j]`.
fn forward_messages(emissions: &Tensor, w: &CrfWeights) -> Vec<Vec<f64>> {
    let (n, c) = (emissions.rows(), w.n_classes());
    let mut alpha = vec![vec![0.0; c]; n];
    for j in 0..c {
        alpha[0][j] = w.start[j] + emissions.at(0, j);
    }
    let mut buf = vec![0.0; c];
    for t in 1..n {
        for j in 0..c {
            for i in 0..c {
                buf[i] = alpha[t - 1][i] + w.t(i, j);
            }
            alpha[t][j] = logsumexp_slice(&buf) + emissions.at(t, j);
        }
    }
    alpha
}

/// Backward log-messages `beta[t][i]`, including the end scores.
fn backward_messages(emissions: &Tensor, w: &CrfWeights) -> Vec<Vec<f64>> {
    let (n, c) = (emissions.rows(), w.n_classes());
    let mut beta = vec![vec![0.0; c]; n];
    beta[n - 1].copy_from_slice(&w.end);
    let mut buf = vec![0.0; c];
    for t in (0..n - 1).rev() {
        for i in 0..c {
            for j in 0..c {
                buf[j] = w.t(i, j) + emissions.at(t + 1, j) + beta[t + 1][j];
            }
            beta[t][i] = logsumexp_slice(&buf);
        }
    }
    beta
}

pub fn log_partition(emissions: &Tensor, w: &CrfWeights) -> Result<f64> {
    w.check(emissions)?;
    let alpha = forward_messages(emissions, w);
    let last: Vec<f64> = alpha[alpha.len() - 1]
        .iter()
        .zip(&w.end)
        .map(|(a, e)| a + e)
        .collect();
    Ok(logsumexp_slice(&last))
}

/// Posterior marginals under the CRF.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub log_z: f64,
    /// `n × C` node marginals.
    pub node: Tensor,
    /// `C × C` expected transition counts summed over positions.
    pub edge: Tensor,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

pub fn marginals(emissions: &Tensor, w: &CrfWeights) -> Result<Marginals> {
    w.check(emissions)?;
    let (n, c) = (emissions.rows(), w.n_classes());
    let alpha = forward_messages(emissions, w);
    let beta = backward_messages(emissions, w);
    let log_z = logsumexp_slice(&(0..c).map(|j| alpha[n - 1][j] + w.end[j]).collect::<Vec<_>>());
    if !log_z.is_finite() {
        return Err(Error::DegenerateRow { op: "crf_partition", row: 0 });
    }
    let mut node = vec![0.0; n * c];
    for t in 0..n {
        for j in 0..c {
            node[t * c + j] = (alpha[t][j] + beta[t][j] - log_z).exp();
        }
    }
    let mut edge = vec![0.0; c * c];
    for t in 1..n {
        for i in 0..c {
            for j in 0..c {
                let s = alpha[t - 1][i] + w.t(i, j) + emissions.at(t, j) + beta[t][j] - log_z;
                edge[i * c + j] += s.exp();
            }
        }
    }
    Ok(Marginals {
        log_z,
        start: node[..c].to_vec(),
        end: node[(n - 1) * c..].to_vec(),
        node: Tensor::matrix(n, c, node)?,
        edge: Tensor::matrix(c, c, edge)?,
    })
}

/// Best path and its score. At every backtrack step ties go to the lower
/// class index.
pub fn viterbi(emissions: &Tensor, w: &CrfWeights) -> Result<(Vec<usize>, f64)> {
    w.check(emissions)?;
    let (n, c) = (emissions.rows(), w.n_classes());
    let mut delta: Vec<f64> = (0..c).map(|j| w.start[j] + emissions.at(0, j)).collect();
    let mut back = vec![vec![0usize; c]; n];
    for t in 1..n {
        let mut next = vec![0.0; c];
        for j in 0..c {
            let mut best = 0;
            let mut best_v = delta[0] + w.t(0, j);
            for i in 1..c {
                let v = delta[i] + w.t(i, j);
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            back[t][j] = best;
            next[j] = best_v + emissions.at(t, j);
        }
        delta = next;
    }
    let mut last = 0;
    let mut score = delta[0] + w.end[0];
    for j in 1..c {
        let v = delta[j] + w.end[j];
        if v > score {
            score = v;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok((path, score))
}

/// Exhaustive reference implementations over all `C^n` paths.
pub mod oracle {
    use super::*;

    /// Every path in lexicographic order of its reversed sequence.
    fn paths(n: usize, c: usize) -> impl Iterator<Item = Vec<usize>> {
        let total = c.pow(n as u32);
        (0..total).map(move |mut k| {
            // last position is the most significant digit
            let mut p = vec![0; n];
            for slot in p.iter_mut() {
                *slot = k % c;
                k /= c;
            }
            p
        })
    }

    pub fn log_partition(emissions: &Tensor, w: &CrfWeights) -> Result<f64> {
        let (n, c) = (emissions.rows(), w.n_classes());
        let scores: Vec<f64> = paths(n, c)
            .map(|p| sequence_score(emissions, &p, w))
            .collect::<Result<_>>()?;
        Ok(logsumexp_slice(&scores))
    }

    /// Highest-scoring path; among equal scores the one whose reversed
    /// sequence is lexicographically smallest, which is what backtracking
    /// with lower-index tie-breaks produces.
    pub fn best_path(emissions: &Tensor, w: &CrfWeights) -> Result<(Vec<usize>, f64)> {
        let (n, c) = (emissions.rows(), w.n_classes());
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in paths(n, c) {
            let s = sequence_score(emissions, &p, w)?;
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((p, s));
            }
        }
        best.ok_or_else(|| Error::EmptyInput("no paths".into()))
    }

    /// Σ over paths of exp(score − log Z).
    pub fn total_probability(emissions: &Tensor, w: &CrfWeights) -> Result<f64> {
        let (n, c) = (emissions.rows(), w.n_classes());
        let z = super::log_partition(emissions, w)?;
        paths(n, c).try_fold(0.0, |acc, p| Ok(acc + (sequence_score(emissions, &p, w)? - z).exp()))
    }
}

fn weights_from(inputs: &[&Tensor]) -> CrfWeights {
    CrfWeights {
        trans: inputs[1].clone(),
        start: inputs[2].data().to_vec(),
        end: inputs[3].data().to_vec(),
    }
}

struct LogPartitionOp {
    allowed: Option<Allowed>,
}

impl FusedOp for LogPartitionOp {
    fn name(&self) -> &'static str {
        "crf_log_partition"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut w = weights_from(inputs);
        if let Some(a) = &self.allowed {
            w = w.masked(a);
        }
        let m = marginals(inputs[0], &w).expect("forward already succeeded");
        let g = grad[0];
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x * g).collect();
        vec![
            Some(scale(m.node.into_data())),
            Some(scale(m.edge.into_data())),
            Some(scale(m.start)),
            Some(scale(m.end)),
        ]
    }
}

struct SequenceScoreOp {
    tags: Vec<usize>,
}

impl FusedOp for SequenceScoreOp {
    fn name(&self) -> &'static str {
        "crf_sequence_score"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = inputs[2].numel();
        let g = grad[0];
        let tags = &self.tags;
        let mut de = vec![0.0; inputs[0].numel()];
        let mut dt = vec![0.0; c * c];
        let (mut ds, mut dend) = (vec![0.0; c], vec![0.0; c]);
        for (t, &y) in tags.iter().enumerate() {
            de[t * c + y] += g;
            if t > 0 {
                dt[tags[t - 1] * c + y] += g;
            }
        }
        ds[tags[0]] += g;
        dend[tags[tags.len() - 1]] += g;
        vec![Some(de), Some(dt), Some(ds), Some(dend)]
    }
}

/// Linear-chain CRF layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Crf {
    pub prefix: String,
    pub n_classes: usize,
    pub allowed: Option<Allowed>,
}

impl Crf {
    pub fn new(prefix: impl Into<String>, n_classes: usize) -> Self {
        Crf {
            prefix: prefix.into(),
            n_classes,
            allowed: None,
        }
    }

    pub fn with_strict_bio(mut self, tags: &[String]) -> Self {
        self.allowed = Some(Allowed::strict_bio(tags));
        self
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.n_classes;
        store.insert(self.name("trans"), Tensor::zeros(&[c, c]));
        store.insert(self.name("start"), Tensor::zeros(&[c]));
        store.insert(self.name("end"), Tensor::zeros(&[c]));
    }

    /// Effective weights (with the transition mask applied).
    pub fn weights(&self, store: &ParamStore) -> Result<CrfWeights> {
        let get = |leaf: &str| {
            store
                .get(&self.name(leaf))
                .cloned()
                .ok_or_else(|| Error::Contract(format!("missing CRF parameter {leaf}")))
        };
        let w = CrfWeights {
            trans: get("trans")?,
            start: get("start")?.into_data(),
            end: get("end")?.into_data(),
        };
        Ok(match &self.allowed {
            Some(a) => w.masked(a),
            None => w,
        })
    }

    fn vars(&self, p: &Bound) -> [Var; 3] {
        [p.var(&self.name("trans")), p.var(&self.name("start")), p.var(&self.name("end"))]
    }

    fn tape_weights(&self, tape: &Tape, p: &Bound) -> CrfWeights {
        let [t, s, e] = self.vars(p);
        let w = CrfWeights {
            trans: tape.value(t).clone(),
            start: tape.value(s).data().to_vec(),
            end: tape.value(e).data().to_vec(),
        };
        match &self.allowed {
            Some(a) => w.masked(a),
            None => w,
        }
    }

    pub fn log_partition(&self, tape: &mut Tape, p: &Bound, emissions: Var) -> Result<Var> {
        let w = self.tape_weights(tape, p);
        let z = log_partition(tape.value(emissions), &w)?;
        let [t, s, e] = self.vars(p);
        let op = LogPartitionOp {
            allowed: self.allowed.clone(),
        };
        tape.fused(&[emissions, t, s, e], Tensor::scalar(z), Box::new(op))
    }

    pub fn sequence_score(&self, tape: &mut Tape, p: &Bound, emissions: Var, tags: &[usize]) -> Result<Var> {
        let w = self.tape_weights(tape, p);
        let s = sequence_score(tape.value(emissions), tags, &w)?;
        if !s.is_finite() {
            return Err(Error::Contract(format!("gold path {tags:?} is forbidden by the transition mask")));
        }
        let [t, st, e] = self.vars(p);
        let op = SequenceScoreOp { tags: tags.to_vec() };
        tape.fused(&[emissions, t, st, e], Tensor::scalar(s), Box::new(op))
    }

    /// `log Z − score(gold)` for one sentence.
    pub fn nll(&self, tape: &mut Tape, p: &Bound, emissions: Var, tags: &[usize]) -> Result<Var> {
        let z = self.log_partition(tape, p, emissions)?;
        let s = self.sequence_score(tape, p, emissions, tags)?;
        tape.sub(z, s)
    }

    /// Mean NLL over sentences.
    pub fn batch_nll(&self, tape: &mut Tape, p: &Bound, items: &[(Var, &[usize])]) -> Result<Var> {
        let losses = items
            .iter()
            .map(|(e, tags)| self.nll(tape, p, *e, tags))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_all(&losses)?;
        tape.scale(total, 1.0 / items.len() as f64)
    }

    pub fn decode(&self, store: &ParamStore, emissions: &Tensor) -> Result<(Vec<usize>, f64)> {
        viterbi(emissions, &self.weights(store)?)
    }
}

/// `−Σ_i Σ_c y_ic · ln ŷ_ic` with probabilities clamped at 1e-12; the
/// second value counts how many gold entries needed the clamp.
pub fn token_nll(probs: &Tensor, onehot: &Tensor) -> Result<(f64, usize)> {
    if probs.shape() != onehot.shape() {
        return Err(Error::dim("token_nll", probs.shape(), onehot.shape()));
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    for (p, y) in probs.data().iter().zip(onehot.data()) {
        if *y != 0.0 {
            if *p < 1e-12 {
                clamped += 1;
            }
            loss -= y * p.max(1e-12).ln();
        }
    }
    if clamped > 0 {
        log::warn!("token_nll clamped {clamped} zero-probability gold entries");
    }
    Ok((loss, clamped))
}

/// Token-level cross-entropy of per-class scores (softmax inside), summed
/// over positions. Used by the head without a CRF.
pub fn token_nll_from_scores(tape: &mut Tape, scores: Var, tags: &[usize]) -> Result<Var> {
    let (n, c) = (tape.value(scores).rows(), tape.value(scores).cols());
    if tags.len() != n || tags.iter().any(|&y| y >= c) {
        return Err(Error::Contract(format!("{} tags for {n}×{c} scores", tags.len())));
    }
    let mut onehot = vec![0.0; n * c];
    for (t, &y) in tags.iter().enumerate() {
        onehot[t * c + y] = 1.0;
    }
    let lse = tape.logsumexp(scores, 1)?;
    let total = tape.sum(lse)?;
    let oh = tape.constant(Tensor::matrix(n, c, onehot)?)?;
    let gold = tape.mul(scores, oh)?;
    let gold = tape.sum(gold)?;
    tape.sub(total, gold)
}

/// `ln P(y₁) + Σ ln P(y_t|y_{t−1}) + Σ ln P(x_t|y_t)`; zero factors give −∞.
pub fn hmm_joint_log_prob(
    init: &[f64],
    trans: &Tensor,
    emit: &Tensor,
    observations: &[usize],
    states: &[usize],
) -> Result<f64> {
    let s = init.len();
    if trans.shape() != [s, s] || emit.rows() != s {
        return Err(Error::dim("hmm_joint_log_prob", trans.shape(), emit.shape()));
    }
    if observations.len() != states.len() || states.is_empty() {
        return Err(Error::Contract("observations and states must be non-empty and aligned".into()));
    }
    if states.iter().any(|&y| y >= s) || observations.iter().any(|&x| x >= emit.cols()) {
        return Err(Error::Contract("state or observation index out of range".into()));
    }
    let mut lp = init[states[0]].ln();
    for t in 1..states.len() {
        lp += trans.at(states[t - 1], states[t]).ln();
    }
    for (x, y) in observations.iter().zip(states) {
        lp += emit.at(*y, *x).ln();
    }
    Ok(lp)
}

//! Moving averages: simple, weighted, cumulative, and the exponential scan
//! that feeds the attention block.

use crate::error::{Error, Result};
use crate::numerics::special::{logit, sigmoid};
use crate::numerics::{FusedOp, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Mean of each full window of `window` samples; output has
/// `len − window + 1` entries.
pub fn sma(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > x.len() {
        return Err(Error::Window { window, len: x.len() });
    }
    let n = window as f64;
    let mut sum: f64 = x[..window].iter().sum();
    let mut out = Vec::with_capacity(x.len() - window + 1);
    out.push(sum / n);
    for t in window..x.len() {
        sum += x[t] - x[t - window];
        out.push(sum / n);
    }
    Ok(out)
}

/// Weighted moving average where `weights[i]` multiplies `x[t − i]`, so
/// `weights[0]` applies to the newest sample.
pub fn wma(x: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let window = weights.len();
    if window == 0 || window > x.len() {
        return Err(Error::Window { window, len: x.len() });
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Normalization);
    }
    Ok((window - 1..x.len())
        .map(|t| weights.iter().enumerate().map(|(i, w)| w * x[t - i]).sum::<f64>() / total)
        .collect())
}

/// Prefix means.
pub fn cma(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("cumulative moving average".into()));
    }
    let mut sum = 0.0;
    Ok(x.iter()
        .enumerate()
        .map(|(t, v)| {
            sum += v;
            sum / (t + 1) as f64
        })
        .collect())
}

fn check_decay(alpha: &[f64]) -> Result<()> {
    match alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        Some(a) => Err(Error::Parameterization(*a)),
        None => Ok(()),
    }
}

/// Raw recurrence `h_t = α⊙x_t + (1−α)⊙h_{t−1}` over the rows of `x`.
/// With `reset_every = Some(k)` the state restarts from `h0` at every row
/// index divisible by `k`.
fn scan(x: &Tensor, alpha: &[f64], h0: &[f64], reset_every: Option<usize>) -> Vec<f64> {
    let (t_len, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; t_len * n];
    let mut prev = h0.to_vec();
    for t in 0..t_len {
        if reset_every.is_some_and(|k| t % k == 0) {
            prev.copy_from_slice(h0);
        }
        for j in 0..n {
            let h = alpha[j] * x.at(t, j) + (1.0 - alpha[j]) * prev[j];
            out[t * n + j] = h;
            prev[j] = h;
        }
    }
    out
}

/// Exponential moving average of the rows of `x` (shape `T × n`) with
/// per-column decay `alpha` and initial state `h0`.
pub fn ema_scan(x: &Tensor, alpha: &[f64], h0: &[f64]) -> Result<Tensor> {
    let n = x.cols();
    if alpha.len() != n || h0.len() != n {
        return Err(Error::dim("ema_scan", x.shape(), &[alpha.len(), h0.len()]));
    }
    check_decay(alpha)?;
    Tensor::matrix(x.rows(), n, scan(x, alpha, h0, None))
}

struct EmaScanOp {
    reset_every: Option<usize>,
}

impl FusedOp for EmaScanOp {
    fn name(&self) -> &'static str {
        "ema_scan"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, alpha, h0) = (inputs[0], inputs[1].data(), inputs[2].data());
        let (t_len, n) = (x.rows(), x.cols());
        let mut dx = vec![0.0; t_len * n];
        let mut dalpha = vec![0.0; n];
        let mut dh0 = vec![0.0; n];
        let mut carry = vec![0.0; n];
        for t in (0..t_len).rev() {
            let restart = t == 0 || self.reset_every.is_some_and(|k| t % k == 0);
            for j in 0..n {
                let gh = grad[t * n + j] + carry[j];
                let prev = if restart { h0[j] } else { output.at(t - 1, j) };
                dx[t * n + j] = alpha[j] * gh;
                dalpha[j] += gh * (x.at(t, j) - prev);
                let through = (1.0 - alpha[j]) * gh;
                if restart {
                    dh0[j] += through;
                    carry[j] = 0.0;
                } else {
                    carry[j] = through;
                }
            }
        }
        vec![Some(dx), Some(dalpha), Some(dh0)]
    }
}

/// Differentiable [`ema_scan`] on a tape; `alpha` and `h0` are length-n
/// vectors.
pub fn ema_scan_op(tape: &mut Tape, x: Var, alpha: Var, h0: Var, reset_every: Option<usize>) -> Result<Var> {
    let (xv, av, hv) = (tape.value(x), tape.value(alpha), tape.value(h0));
    let n = xv.cols();
    if !xv.is_matrix() || av.numel() != n || hv.numel() != n {
        return Err(Error::dim("ema_scan", xv.shape(), av.shape()));
    }
    check_decay(av.data())?;
    let reset_every = reset_every.filter(|&k| k > 0);
    let out = Tensor::matrix(xv.rows(), n, scan(xv, av.data(), hv.data(), reset_every))?;
    tape.fused(&[x, alpha, h0], out, Box::new(EmaScanOp { reset_every }))
}

/// Multi-head EMA: project to `n_head` groups of `d / n_head` channels,
/// run the scan with one learned decay per head, and project back.
///
/// Decays are stored unconstrained and passed through a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadEma {
    pub prefix: String,
    pub d: usize,
    pub n_head: usize,
}

impl MultiHeadEma {
    pub fn new(prefix: impl Into<String>, d: usize, n_head: usize) -> Result<Self> {
        if n_head == 0 || !d.is_multiple_of(n_head) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {n_head} EMA heads"
            )));
        }
        Ok(MultiHeadEma {
            prefix: prefix.into(),
            d,
            n_head,
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Effective per-head decays at initialisation, geometric in [0.05, 0.95].
    pub fn initial_decays(n_head: usize) -> Vec<f64> {
        let (lo, hi): (f64, f64) = (0.05, 0.95);
        if n_head == 1 {
            return vec![(lo * hi).sqrt()];
        }
        (0..n_head)
            .map(|h| lo * (hi / lo).powf(h as f64 / (n_head - 1) as f64))
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.name("w_in"), Tensor::identity(self.d));
        store.insert(self.name("w_out"), Tensor::identity(self.d));
        let raw = Self::initial_decays(self.n_head).into_iter().map(logit).collect();
        store.insert(self.name("alpha_raw"), Tensor::vector(raw));
        store.insert(self.name("h0"), Tensor::zeros(&[self.n_head]));
    }

    /// Effective decays for the current parameters.
    pub fn decays(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(&self.name("alpha_raw"))
            .map(|t| t.data().iter().map(|&r| sigmoid(r)).collect())
            .unwrap_or_default()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, reset_every: Option<usize>) -> Result<Var> {
        if tape.value(x).cols() != self.d {
            return Err(Error::dim("multihead_ema", tape.shape(x), &[self.d]));
        }
        let per_head = self.d / self.n_head;
        let u = tape.matmul(x, p.var(&self.name("w_in")))?;
        let alpha = tape.sigmoid(p.var(&self.name("alpha_raw")))?;
        let alpha = tape.repeat_each(alpha, per_head)?;
        let h0 = tape.repeat_each(p.var(&self.name("h0")), per_head)?;
        let h = ema_scan_op(tape, u, alpha, h0, reset_every)?;
        tape.matmul(h, p.var(&self.name("w_out")))
    }
}

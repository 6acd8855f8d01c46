//! EMA-gated single-head attention block, a plain dot-product baseline
//! block, and the two-stage local/global encoder built from them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::moving_average::MultiHeadEma;
use crate::numerics::special::{normal_cdf, normal_pdf, softplus_inv};
use crate::numerics::{FusedOp, Tape, Tensor, Unary, Var};
use crate::params::{Bound, ParamStore};
use crate::reduced_bias::{GateState, ResidualMode, ResidualSite};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnFn {
    Softmax,
    Laplace,
    ReducedLaplace,
}

impl FromStr for AttnFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttnFn::Softmax),
            "laplace" => Ok(AttnFn::Laplace),
            "reduced_laplace" => Ok(AttnFn::ReducedLaplace),
            other => Err(Error::Config(format!(
                "unknown attention function {other:?} (expected softmax, laplace or reduced_laplace)"
            ))),
        }
    }
}

impl fmt::Display for AttnFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnFn::Softmax => "softmax",
            AttnFn::Laplace => "laplace",
            AttnFn::ReducedLaplace => "reduced_laplace",
        })
    }
}

/// `Derivative` is `σ(x) + x·σ(x)(1−σ(x))`; `Standard` is `x·σ(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiluVariant {
    Derivative,
    Standard,
}

impl SiluVariant {
    fn unary(self) -> Unary {
        match self {
            SiluVariant::Derivative => Unary::SiluDeriv,
            SiluVariant::Standard => Unary::SiluStandard,
        }
    }
}

impl FromStr for SiluVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derivative" => Ok(SiluVariant::Derivative),
            "standard" => Ok(SiluVariant::Standard),
            other => Err(Error::Config(format!(
                "unknown silu variant {other:?} (expected derivative or standard)"
            ))),
        }
    }
}

impl fmt::Display for SiluVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiluVariant::Derivative => "derivative",
            SiluVariant::Standard => "standard",
        })
    }
}

/// Which attention block the encoder stages use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// The EMA-gated block.
    Hema,
    /// Scaled dot-product attention with full Q/K/V/O projections.
    Naive,
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hema" => Ok(AttentionKind::Hema),
            "naive" => Ok(AttentionKind::Naive),
            other => Err(Error::Config(format!(
                "unknown attention kind {other:?} (expected hema or naive)"
            ))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Hema => "hema",
            AttentionKind::Naive => "naive",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhemaConfig {
    pub d_model: usize,
    pub z_dim: usize,
    pub v_dim: usize,
    pub n_ema_head: usize,
    /// Local-stage chunk width; 0 makes both stages global.
    pub chunk_size: usize,
    pub attn_fn: AttnFn,
    pub silu: SiluVariant,
    /// Score scale; `None` means √z_dim.
    pub daleth: Option<f64>,
    pub rel_bias_window: usize,
    pub batch_norm_fidelity: bool,
    pub residual: ResidualMode,
    pub static_alpha: f64,
    pub static_beta: f64,
    pub attention: AttentionKind,
}

impl Default for RhemaConfig {
    fn default() -> Self {
        RhemaConfig {
            d_model: 64,
            z_dim: 64,
            v_dim: 128,
            n_ema_head: 64,
            chunk_size: 8,
            attn_fn: AttnFn::ReducedLaplace,
            silu: SiluVariant::Derivative,
            daleth: None,
            rel_bias_window: 16,
            batch_norm_fidelity: false,
            residual: ResidualMode::Dynamic,
            static_alpha: 1.0,
            static_beta: 1.0,
            attention: AttentionKind::Hema,
        }
    }
}

impl RhemaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim != self.d_model {
            return Err(Error::Config(format!(
                "z_dim ({}) must equal d_model ({}): the shared representation adds the block input",
                self.z_dim, self.d_model
            )));
        }
        if self.d_model == 0 || self.v_dim == 0 {
            return Err(Error::Config("d_model and v_dim must be positive".into()));
        }
        if self.n_ema_head == 0 || !self.d_model.is_multiple_of(self.n_ema_head) {
            return Err(Error::Config(format!(
                "d_model ({}) is not divisible by n_ema_head ({})",
                self.d_model, self.n_ema_head
            )));
        }
        if let Some(s) = self.daleth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("daleth must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.daleth.unwrap_or((self.z_dim as f64).sqrt())
    }
}

pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

/// `x·W + b` for parameters `{prefix}.{w}` and `{prefix}.{b}`.
pub(crate) fn linear(tape: &mut Tape, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let h = tape.matmul(x, p.var(w))?;
    tape.add_row(h, p.var(b))
}

/// Attention mask, row-major `n × n`. Real queries see real keys in the
/// same chunk; padding queries see only themselves so every row stays
/// normalisable.
pub fn attention_mask(valid: &[bool], chunk: Option<usize>) -> Vec<bool> {
    let n = valid.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = if valid[i] {
                valid[j] && chunk.is_none_or(|c| i / c == j / c)
            } else {
                i == j
            };
        }
    }
    mask
}

struct RelBiasOp {
    n: usize,
    window: usize,
}

impl RelBiasOp {
    fn index(&self, i: usize, j: usize) -> usize {
        let w = self.window as i64;
        ((j as i64 - i as i64).clamp(-w, w) + w) as usize
    }
}

impl FusedOp for RelBiasOp {
    fn name(&self) -> &'static str {
        "relative_bias"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut d = vec![0.0; inputs[0].numel()];
        for i in 0..self.n {
            for j in 0..self.n {
                d[self.index(i, j)] += grad[i * self.n + j];
            }
        }
        vec![Some(d)]
    }
}

/// `B[i, j] = b[clip(j − i, ±window) + window]`.
pub fn relative_bias(tape: &mut Tape, b: Var, n: usize, window: usize) -> Result<Var> {
    let op = RelBiasOp { n, window };
    let bv = tape.value(b);
    if bv.numel() != 2 * window + 1 {
        return Err(Error::dim("relative_bias", bv.shape(), &[2 * window + 1]));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = bv.data()[op.index(i, j)];
        }
    }
    let value = Tensor::matrix(n, n, out)?;
    tape.fused(&[b], value, Box::new(op))
}

/// Elementwise `(1 + erf((x − μ)/(σ√2)))/2`.
pub fn laplace(x: f64, mu: f64, sigma: f64) -> f64 {
    normal_cdf((x - mu) / sigma)
}

/// Row-wise Laplace weights over unmasked entries. With `normalize`, each
/// row becomes `A_j / Σ A` where `A_j = laplace(s_j) + s_j − min(0, min_k s_k)`,
/// the shift keeping every term non-negative.
pub fn laplace_rows(
    scores: &Tensor,
    mask: Option<&[bool]>,
    mu: f64,
    sigma: f64,
    normalize: bool,
) -> Result<Tensor> {
    let (m, n) = (scores.rows(), scores.cols());
    if !(sigma > 0.0) {
        return Err(Error::Parameterization(sigma));
    }
    let keep = |i: usize, j: usize| mask.is_none_or(|mk| mk[i * n + j]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = scores.row(i);
        let idx: Vec<usize> = (0..n).filter(|&j| keep(i, j)).collect();
        if idx.is_empty() {
            return Err(Error::DegenerateRow { op: "laplace_attention", row: i });
        }
        if normalize {
            let shift = idx.iter().map(|&j| row[j]).fold(0.0, f64::min);
            let mut total = 0.0;
            for &j in &idx {
                let a = laplace(row[j], mu, sigma) + row[j] - shift;
                out[i * n + j] = a;
                total += a;
            }
            if !(total > 0.0) {
                return Err(Error::DegenerateRow { op: "reduced_laplace_attention", row: i });
            }
            for &j in &idx {
                out[i * n + j] /= total;
            }
        } else {
            for &j in &idx {
                out[i * n + j] = laplace(row[j], mu, sigma);
            }
        }
    }
    Tensor::matrix(m, n, out)
}

struct LaplaceOp {
    mask: Option<Vec<bool>>,
    normalize: bool,
}

impl FusedOp for LaplaceOp {
    fn name(&self) -> &'static str {
        if self.normalize {
            "reduced_laplace_attention"
        } else {
            "laplace_attention"
        }
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0];
        let (mu, sigma) = (inputs[1].item(), inputs[2].item());
        let (m, n) = (s.rows(), s.cols());
        let keep = |i: usize, j: usize| self.mask.as_ref().is_none_or(|mk| mk[i * n + j]);
        let mut ds = vec![0.0; m * n];
        let (mut dmu, mut dsigma) = (0.0, 0.0);
        for i in 0..m {
            let row = s.row(i);
            let idx: Vec<usize> = (0..n).filter(|&j| keep(i, j)).collect();
            // upstream gradient with respect to the un-normalised laplace term
            let mut up = vec![0.0; n];
            if self.normalize {
                let mut argmin = None;
                let mut lo = 0.0;
                for &j in &idx {
                    if row[j] < lo {
                        lo = row[j];
                        argmin = Some(j);
                    }
                }
                let total: f64 = idx
                    .iter()
                    .map(|&j| laplace(row[j], mu, sigma) + row[j] - lo)
                    .sum();
                let dot: f64 = idx.iter().map(|&j| grad[i * n + j] * output.at(i, j)).sum();
                let mut sum_u = 0.0;
                for &j in &idx {
                    let u = (grad[i * n + j] - dot) / total;
                    up[j] = u;
                    ds[i * n + j] += u;
                    sum_u += u;
                }
                if let Some(a) = argmin {
                    ds[i * n + a] -= sum_u;
                }
            } else {
                for &j in &idx {
                    up[j] = grad[i * n + j];
                }
            }
            for &j in &idx {
                let z = (row[j] - mu) / sigma;
                let pdf = normal_pdf(z) / sigma;
                ds[i * n + j] += up[j] * pdf;
                dmu -= up[j] * pdf;
                dsigma -= up[j] * pdf * z;
            }
        }
        vec![Some(ds), Some(vec![dmu]), Some(vec![dsigma])]
    }
}

/// Differentiable Laplace attention; `mu` and `sigma` are 1-element nodes.
pub fn laplace_attention(
    tape: &mut Tape,
    scores: Var,
    mask: Option<&[bool]>,
    mu: Var,
    sigma: Var,
    normalize: bool,
) -> Result<Var> {
    let sv = tape.value(scores);
    if let Some(mk) = mask {
        if mk.len() != sv.numel() {
            return Err(Error::dim("laplace_attention", sv.shape(), &[mk.len()]));
        }
    }
    let value = laplace_rows(sv, mask, tape.value(mu).item(), tape.value(sigma).item(), normalize)?;
    let op = LaplaceOp {
        mask: mask.map(<[bool]>::to_vec),
        normalize,
    };
    tape.fused(&[scores, mu, sigma], value, Box::new(op))
}

/// Intermediate nodes of one attention block, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct TraceVars {
    pub z: Option<Var>,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub scores: Var,
    pub weights: Var,
    pub gamma: Option<Var>,
    pub phi: Option<Var>,
}

/// Materialised [`TraceVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub z: Option<Tensor>,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub scores: Tensor,
    pub weights: Tensor,
    pub gamma: Option<Tensor>,
    pub phi: Option<Tensor>,
}

impl AttentionTrace {
    pub fn capture(tape: &Tape, t: &TraceVars) -> Self {
        let get = |v: Var| tape.value(v).clone();
        AttentionTrace {
            z: t.z.map(get),
            q: get(t.q),
            k: get(t.k),
            v: get(t.v),
            scores: get(t.scores),
            weights: get(t.weights),
            gamma: t.gamma.map(get),
            phi: t.phi.map(get),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub sites: [ResidualSite; 2],
    pub trace: TraceVars,
}

/// Pieces shared by both block kinds: input normalisation, the feed-forward
/// sublayer and the two gated residuals.
#[derive(Clone, Debug, PartialEq)]
struct Shell {
    prefix: String,
    d: usize,
    silu: SiluVariant,
    batch_norm: bool,
    gates: [GateState; 2],
}

impl Shell {
    fn new(prefix: &str, cfg: &RhemaConfig) -> Self {
        let gate = |leaf: &str| {
            GateState::new(format!("{prefix}.{leaf}"), cfg.residual, cfg.d_model)
                .with_static(cfg.static_alpha, cfg.static_beta)
        };
        Shell {
            prefix: prefix.to_string(),
            d: cfg.d_model,
            silu: cfg.silu,
            batch_norm: cfg.batch_norm_fidelity,
            gates: [gate("rb_attn"), gate("rb_ffn")],
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.d;
        for k in ["norm1", "norm2"] {
            store.insert(self.name(&format!("{k}.gain")), Tensor::full(&[d], 1.0));
            store.insert(self.name(&format!("{k}.bias")), Tensor::zeros(&[d]));
        }
        store.insert(self.name("ffn.w1"), glorot(d, 2 * d, rng));
        store.insert(self.name("ffn.b1"), Tensor::zeros(&[2 * d]));
        store.insert(self.name("ffn.w2"), glorot(2 * d, d, rng));
        store.insert(self.name("ffn.b2"), Tensor::zeros(&[d]));
        for g in &self.gates {
            g.init(store);
        }
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, x: Var, valid: &[bool], which: &str) -> Result<Var> {
        let n = if self.batch_norm {
            tape.normalize_cols(x, valid, 1e-5)?
        } else {
            tape.normalize_rows(x, 1e-5)?
        };
        let n = tape.mul_row(n, p.var(&self.name(&format!("{which}.gain"))))?;
        tape.add_row(n, p.var(&self.name(&format!("{which}.bias"))))
    }

    fn ffn(&self, tape: &mut Tape, p: &Bound, x: Var, valid: &[bool]) -> Result<Var> {
        let n = self.norm(tape, p, x, valid, "norm2")?;
        let h = linear(tape, p, n, &self.name("ffn.w1"), &self.name("ffn.b1"))?;
        let h = tape.unary(h, self.silu.unary())?;
        linear(tape, p, h, &self.name("ffn.w2"), &self.name("ffn.b2"))
    }
}

/// Named parameter leaves for the gated output combination.
pub struct GateInputs {
    pub gamma: Var,
    pub phi: Var,
}

/// `Ŷ = silu(Z·W_h + (γ⊙O)·U_h + b_h)`, `Y = Φ⊙Ŷ + (1−Φ)⊙X`.
#[allow(clippy::too_many_arguments)]
pub fn gated_output(
    tape: &mut Tape,
    x: Var,
    z: Var,
    o: Var,
    gates: &GateInputs,
    w_h: Var,
    u_h: Var,
    b_h: Var,
    silu: SiluVariant,
) -> Result<Var> {
    let go = tape.mul(gates.gamma, o)?;
    let a = tape.matmul(z, w_h)?;
    let b = tape.matmul(go, u_h)?;
    let pre = tape.add(a, b)?;
    let pre = tape.add_row(pre, b_h)?;
    let y_hat = tape.unary(pre, silu.unary())?;
    let open = tape.mul(gates.phi, y_hat)?;
    let closed = tape.one_minus(gates.phi)?;
    let keep = tape.mul(closed, x)?;
    tape.add(open, keep)
}

/// The EMA-gated attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct RhemaBlock {
    pub cfg: RhemaConfig,
    shell: Shell,
    ema: MultiHeadEma,
}

impl RhemaBlock {
    pub fn new(prefix: &str, cfg: &RhemaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RhemaBlock {
            cfg: cfg.clone(),
            shell: Shell::new(prefix, cfg),
            ema: MultiHeadEma::new(format!("{prefix}.ema"), cfg.d_model, cfg.n_ema_head)?,
        })
    }

    fn name(&self, leaf: &str) -> String {
        self.shell.name(leaf)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let RhemaConfig { d_model: d, z_dim: z, v_dim: v, .. } = self.cfg;
        self.shell.init(store, rng);
        self.ema.init(store);
        store.insert(self.name("w_z"), glorot(d, z, rng));
        store.insert(self.name("b_z"), Tensor::zeros(&[z]));
        let kappa = |rng: &mut R| Tensor::vector((0..z).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect());
        store.insert(self.name("kappa_q"), kappa(rng));
        store.insert(self.name("mu_q"), Tensor::zeros(&[z]));
        store.insert(self.name("kappa_k"), kappa(rng));
        store.insert(self.name("mu_k"), Tensor::zeros(&[z]));
        store.insert(self.name("w_v"), glorot(d, v, rng));
        store.insert(self.name("b_v"), Tensor::zeros(&[v]));
        store.insert(self.name("b_rel"), Tensor::zeros(&[2 * self.cfg.rel_bias_window + 1]));
        store.insert(self.name("w_h"), glorot(z, d, rng));
        store.insert(self.name("u_h"), glorot(v, d, rng));
        store.insert(self.name("b_h"), Tensor::zeros(&[d]));
        store.insert(self.name("w_gamma"), glorot(z, v, rng));
        store.insert(self.name("b_gamma"), Tensor::zeros(&[v]));
        store.insert(self.name("w_phi"), glorot(z, d, rng));
        store.insert(self.name("b_phi"), Tensor::zeros(&[d]));
        if self.cfg.attn_fn != AttnFn::Softmax {
            store.insert(self.name("lap_mu"), Tensor::vector(vec![0.0]));
            store.insert(self.name("lap_sigma_raw"), Tensor::vector(vec![softplus_inv(1.0)]));
        }
    }

    /// `Z = silu(EMA(X)·W_z + b_z) + X`.
    pub fn shared_rep(&self, tape: &mut Tape, p: &Bound, x: Var, reset: Option<usize>) -> Result<Var> {
        let e = self.ema.forward(tape, p, x, reset)?;
        let h = linear(tape, p, e, &self.name("w_z"), &self.name("b_z"))?;
        let h = tape.unary(h, self.cfg.silu.unary())?;
        tape.add(h, x)
    }

    /// Per-dimension affine maps of Z.
    pub fn qk_transform(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let q = tape.mul_row(z, p.var(&self.name("kappa_q")))?;
        let q = tape.add_row(q, p.var(&self.name("mu_q")))?;
        let k = tape.mul_row(z, p.var(&self.name("kappa_k")))?;
        let k = tape.add_row(k, p.var(&self.name("mu_k")))?;
        Ok((q, k))
    }

    pub fn value_transform(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = linear(tape, p, x, &self.name("w_v"), &self.name("b_v"))?;
        tape.unary(h, self.cfg.silu.unary())
    }

    /// Scores `Q·Kᵀ/ℸ + B_rel` and weights under the configured function.
    pub fn attention_weights(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q: Var,
        k: Var,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let n = tape.value(q).rows();
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / self.cfg.scale())?;
        let b = relative_bias(tape, p.var(&self.name("b_rel")), n, self.cfg.rel_bias_window)?;
        let s = tape.add(s, b)?;
        let w = match self.cfg.attn_fn {
            AttnFn::Softmax => tape.softmax_lastdim(s, Some(mask))?,
            f => {
                let mu = p.var(&self.name("lap_mu"));
                let sigma = tape.softplus(p.var(&self.name("lap_sigma_raw")))?;
                laplace_attention(tape, s, Some(mask), mu, sigma, f == AttnFn::ReducedLaplace)?
            }
        };
        Ok((s, w))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        valid: &[bool],
        chunk: Option<usize>,
    ) -> Result<BlockOutput> {
        let n = tape.value(x).rows();
        if valid.len() != n {
            return Err(Error::dim("rhema_block", tape.shape(x), &[valid.len()]));
        }
        let mask = attention_mask(valid, chunk);
        let mut trace = None;
        let site1 = self.shell.gates[0].apply(tape, p, x, |t, x| {
            let xn = self.shell.norm(t, p, x, valid, "norm1")?;
            let z = self.shared_rep(t, p, xn, chunk)?;
            let (q, k) = self.qk_transform(t, p, z)?;
            let v = self.value_transform(t, p, xn)?;
            let (s, w) = self.attention_weights(t, p, q, k, &mask)?;
            let o = t.matmul(w, v)?;
            let gamma = linear(t, p, z, &self.name("w_gamma"), &self.name("b_gamma"))?;
            let gamma = t.sigmoid(gamma)?;
            let phi = linear(t, p, z, &self.name("w_phi"), &self.name("b_phi"))?;
            let phi = t.sigmoid(phi)?;
            trace = Some(TraceVars {
                z: Some(z),
                q,
                k,
                v,
                scores: s,
                weights: w,
                gamma: Some(gamma),
                phi: Some(phi),
            });
            gated_output(
                t,
                xn,
                z,
                o,
                &GateInputs { gamma, phi },
                p.var(&self.name("w_h")),
                p.var(&self.name("u_h")),
                p.var(&self.name("b_h")),
                self.cfg.silu,
            )
        })?;
        let site2 = self.shell.gates[1].apply(tape, p, site1.out, |t, h| self.shell.ffn(t, p, h, valid))?;
        Ok(BlockOutput {
            out: site2.out,
            sites: [site1, site2],
            trace: trace.expect("attention branch ran"),
        })
    }
}

/// Scaled dot-product attention block with the same normalisation,
/// feed-forward sublayer and residual sites as [`RhemaBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveBlock {
    pub d: usize,
    shell: Shell,
}

impl NaiveBlock {
    pub fn new(prefix: &str, cfg: &RhemaConfig) -> Result<Self> {
        if cfg.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        Ok(NaiveBlock {
            d: cfg.d_model,
            shell: Shell::new(prefix, cfg),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.shell.init(store, rng);
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(self.shell.name(w), glorot(self.d, self.d, rng));
            store.insert(self.shell.name(&w.replace("w_", "b_")), Tensor::zeros(&[self.d]));
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        valid: &[bool],
        chunk: Option<usize>,
    ) -> Result<BlockOutput> {
        let mask = attention_mask(valid, chunk);
        let name = |s: &str| self.shell.name(s);
        let mut trace = None;
        let site1 = self.shell.gates[0].apply(tape, p, x, |t, x| {
            let xn = self.shell.norm(t, p, x, valid, "norm1")?;
            let q = linear(t, p, xn, &name("w_q"), &name("b_q"))?;
            let k = linear(t, p, xn, &name("w_k"), &name("b_k"))?;
            let v = linear(t, p, xn, &name("w_v"), &name("b_v"))?;
            let kt = t.transpose(k)?;
            let s = t.matmul(q, kt)?;
            let s = t.scale(s, 1.0 / (self.d as f64).sqrt())?;
            let w = t.softmax_lastdim(s, Some(&mask))?;
            let o = t.matmul(w, v)?;
            trace = Some(TraceVars {
                z: None,
                q,
                k,
                v,
                scores: s,
                weights: w,
                gamma: None,
                phi: None,
            });
            linear(t, p, o, &name("w_o"), &name("b_o"))
        })?;
        let site2 = self.shell.gates[1].apply(tape, p, site1.out, |t, h| self.shell.ffn(t, p, h, valid))?;
        Ok(BlockOutput {
            out: site2.out,
            sites: [site1, site2],
            trace: trace.expect("attention branch ran"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Rhema(RhemaBlock),
    Naive(NaiveBlock),
}

impl Block {
    fn shell(&self) -> &Shell {
        match self {
            Block::Rhema(b) => &b.shell,
            Block::Naive(b) => &b.shell,
        }
    }

    fn shell_mut(&mut self) -> &mut Shell {
        match self {
            Block::Rhema(b) => &mut b.shell,
            Block::Naive(b) => &mut b.shell,
        }
    }

    pub fn gates(&self) -> &[GateState; 2] {
        &self.shell().gates
    }

    pub fn gates_mut(&mut self) -> &mut [GateState; 2] {
        &mut self.shell_mut().gates
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            Block::Rhema(b) => b.init(store, rng),
            Block::Naive(b) => b.init(store, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        valid: &[bool],
        chunk: Option<usize>,
    ) -> Result<BlockOutput> {
        match self {
            Block::Rhema(b) => b.forward(tape, p, x, valid, chunk),
            Block::Naive(b) => b.forward(tape, p, x, valid, chunk),
        }
    }
}

/// Local stage (chunked attention, EMA restarted per chunk) followed by a
/// global stage.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalEncoder {
    pub cfg: RhemaConfig,
    pub stages: [Block; 2],
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub out: Var,
    pub stages: [BlockOutput; 2],
}

impl HierarchicalEncoder {
    pub fn new(prefix: &str, cfg: &RhemaConfig) -> Result<Self> {
        let make = |name: String| -> Result<Block> {
            Ok(match cfg.attention {
                AttentionKind::Hema => Block::Rhema(RhemaBlock::new(&name, cfg)?),
                AttentionKind::Naive => Block::Naive(NaiveBlock::new(&name, cfg)?),
            })
        };
        Ok(HierarchicalEncoder {
            cfg: cfg.clone(),
            stages: [make(format!("{prefix}.local"))?, make(format!("{prefix}.global"))?],
        })
    }

    pub fn local_chunk(&self) -> Option<usize> {
        (self.cfg.chunk_size > 0).then_some(self.cfg.chunk_size)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for s in &self.stages {
            s.init(store, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, valid: &[bool]) -> Result<EncoderOutput> {
        let local = self.stages[0].forward(tape, p, x, valid, self.local_chunk())?;
        let global = self.stages[1].forward(tape, p, local.out, valid, None)?;
        Ok(EncoderOutput {
            out: global.out,
            stages: [local, global],
        })
    }

    pub fn gates(&self) -> impl Iterator<Item = &GateState> {
        self.stages.iter().flat_map(|s| s.gates().iter())
    }

    /// Fold gradients recorded at every residual site of `outputs` (one per
    /// sentence on the same tape) into the gate caches.
    pub fn update_gate_caches(&mut self, tape: &Tape, outputs: &[EncoderOutput], momentum: f64) -> Result<()> {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (gi, gate) in stage.gates_mut().iter_mut().enumerate() {
                if gate.mode != ResidualMode::Dynamic {
                    continue;
                }
                let sites: Vec<ResidualSite> = outputs.iter().map(|o| o.stages[si].sites[gi]).collect();
                gate.update_from_tape(tape, &sites, momentum)?;
            }
        }
        Ok(())
    }
}

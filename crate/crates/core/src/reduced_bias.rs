//! Gated residual connection `y = a⊙F(x) + b⊙x` whose branch weights can
//! be fixed or driven by gradient statistics cached from the previous step.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    /// `F(x) + x`.
    Classic,
    /// `α·F(x) + β·x` with configured constants.
    Static,
    /// `σ(g_F·W_α + b_α)⊙F(x) + σ(g_x·W_β + b_β)⊙x`.
    Dynamic,
}

impl FromStr for ResidualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" | "off" => Ok(ResidualMode::Classic),
            "static" => Ok(ResidualMode::Static),
            "dynamic" => Ok(ResidualMode::Dynamic),
            other => Err(Error::Config(format!(
                "unknown residual mode {other:?} (expected classic, static or dynamic)"
            ))),
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::Classic => "classic",
            ResidualMode::Static => "static",
            ResidualMode::Dynamic => "dynamic",
        })
    }
}

/// One gated residual site: its mode, static weights and the cached
/// per-feature gradient means of the branch output and the skip input.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub prefix: String,
    pub mode: ResidualMode,
    pub static_alpha: f64,
    pub static_beta: f64,
    pub g_f: Vec<f64>,
    pub g_x: Vec<f64>,
}

/// The vars recorded by [`GateState::apply`]; their gradients feed the cache.
#[derive(Clone, Copy, Debug)]
pub struct ResidualSite {
    pub out: Var,
    pub branch: Var,
    pub skip: Var,
}

impl GateState {
    pub fn new(prefix: impl Into<String>, mode: ResidualMode, d: usize) -> Self {
        GateState {
            prefix: prefix.into(),
            mode,
            static_alpha: 1.0,
            static_beta: 1.0,
            g_f: vec![0.0; d],
            g_x: vec![0.0; d],
        }
    }

    pub fn with_static(mut self, alpha: f64, beta: f64) -> Self {
        self.static_alpha = alpha;
        self.static_beta = beta;
        self
    }

    pub fn dim(&self) -> usize {
        self.g_f.len()
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Registers the gate maps; only the dynamic mode has any.
    pub fn init(&self, store: &mut ParamStore) {
        if self.mode == ResidualMode::Dynamic {
            let d = self.dim();
            store.insert(self.name("w_alpha"), Tensor::zeros(&[d, d]));
            store.insert(self.name("b_alpha"), Tensor::zeros(&[d]));
            store.insert(self.name("w_beta"), Tensor::zeros(&[d, d]));
            store.insert(self.name("b_beta"), Tensor::zeros(&[d]));
        }
    }

    fn gate(&self, tape: &mut Tape, p: &Bound, cache: &[f64], w: &str, b: &str) -> Result<Var> {
        let g = tape.constant(Tensor::matrix(1, cache.len(), cache.to_vec())?)?;
        let lin = tape.matmul(g, p.var(&self.name(w)))?;
        let lin = tape.add_row(lin, p.var(&self.name(b)))?;
        tape.sigmoid(lin)
    }

    /// Effective (branch, skip) gate vectors under the current caches.
    pub fn gates(&self, store: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        match self.mode {
            ResidualMode::Classic => Ok((vec![1.0; d], vec![1.0; d])),
            ResidualMode::Static => Ok((vec![self.static_alpha; d], vec![self.static_beta; d])),
            ResidualMode::Dynamic => {
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape)?;
                let a = self.gate(&mut tape, &p, &self.g_f, "w_alpha", "b_alpha")?;
                let b = self.gate(&mut tape, &p, &self.g_x, "w_beta", "b_beta")?;
                Ok((tape.value(a).data().to_vec(), tape.value(b).data().to_vec()))
            }
        }
    }

    /// Combine an already computed branch output with its input.
    pub fn combine(&self, tape: &mut Tape, p: &Bound, x: Var, branch: Var) -> Result<ResidualSite> {
        if tape.shape(x) != tape.shape(branch) {
            return Err(Error::Contract(format!(
                "residual branch output {:?} does not match input {:?}",
                tape.shape(branch),
                tape.shape(x)
            )));
        }
        if tape.value(x).cols() != self.dim() {
            return Err(Error::dim("residual", tape.shape(x), &[self.dim()]));
        }
        let out = match self.mode {
            ResidualMode::Classic => tape.add(branch, x)?,
            ResidualMode::Static => {
                let a = tape.scale(branch, self.static_alpha)?;
                let b = tape.scale(x, self.static_beta)?;
                tape.add(a, b)?
            }
            ResidualMode::Dynamic => {
                let ga = self.gate(tape, p, &self.g_f, "w_alpha", "b_alpha")?;
                let gb = self.gate(tape, p, &self.g_x, "w_beta", "b_beta")?;
                let a = tape.mul_row(branch, ga)?;
                let b = tape.mul_row(x, gb)?;
                tape.add(a, b)?
            }
        };
        Ok(ResidualSite { out, branch, skip: x })
    }

    pub fn apply<F>(&self, tape: &mut Tape, p: &Bound, x: Var, branch: F) -> Result<ResidualSite>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var>,
    {
        let f = branch(tape, x)?;
        self.combine(tape, p, x, f)
    }

    /// `g ← m·g + (1−m)·grad` for both caches.
    pub fn update_gate_cache(&mut self, grad_f: &[f64], grad_x: &[f64], momentum: f64) -> Result<()> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Contract(format!("gate cache momentum {momentum} outside [0, 1)")));
        }
        if grad_f.len() != self.dim() || grad_x.len() != self.dim() {
            return Err(Error::dim("update_gate_cache", &[grad_f.len(), grad_x.len()], &[self.dim()]));
        }
        if grad_f.iter().chain(grad_x).any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient reached gate cache {}", self.prefix)));
        }
        for (c, g) in self.g_f.iter_mut().zip(grad_f) {
            *c = momentum * *c + (1.0 - momentum) * g;
        }
        for (c, g) in self.g_x.iter_mut().zip(grad_x) {
            *c = momentum * *c + (1.0 - momentum) * g;
        }
        Ok(())
    }

    /// Fold the gradients of every recorded site (after `backward`) into the
    /// caches, averaging over all positions of all sites.
    pub fn update_from_tape(&mut self, tape: &Tape, sites: &[ResidualSite], momentum: f64) -> Result<()> {
        let gf = mean_over_positions(tape, sites.iter().map(|s| s.branch), self.dim());
        let gx = mean_over_positions(tape, sites.iter().map(|s| s.skip), self.dim());
        self.update_gate_cache(&gf, &gx, momentum)
    }
}

fn mean_over_positions(tape: &Tape, vars: impl Iterator<Item = Var>, d: usize) -> Vec<f64> {
    let mut sum = vec![0.0; d];
    let mut rows = 0usize;
    for v in vars {
        let g = tape.grad_tensor(v);
        for r in 0..g.rows() {
            for (s, x) in sum.iter_mut().zip(g.row(r)) {
                *s += x;
            }
        }
        rows += g.rows();
    }
    if rows > 0 {
        for s in &mut sum {
            *s /= rows as f64;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_many, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(state: &GateState, store: &ParamStore, x: &Tensor, f: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let fv = tape.constant(f.clone()).unwrap();
        let site = state.combine(&mut tape, &p, xv, fv).unwrap();
        tape.value(site.out).clone()
    }

    fn sample(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::uniform(&[5, 4], 2.0, &mut rng), Tensor::uniform(&[5, 4], 2.0, &mut rng))
    }

    #[test]
    fn classic_with_zero_branch_is_identity() {
        let (x, _) = sample(1);
        let st = GateState::new("r", ResidualMode::Classic, 4);
        let y = run(&st, &ParamStore::new(), &x, &Tensor::zeros(&[5, 4]));
        assert_eq!(y, x);
    }

    #[test]
    fn classic_is_plain_sum_and_static_ones_match_bitwise() {
        let (x, f) = sample(2);
        let classic = GateState::new("r", ResidualMode::Classic, 4);
        let y = run(&classic, &ParamStore::new(), &x, &f);
        for i in 0..x.numel() {
            assert_eq!(y.data()[i], f.data()[i] + x.data()[i]);
        }
        let stat = GateState::new("r", ResidualMode::Static, 4).with_static(1.0, 1.0);
        assert_eq!(run(&stat, &ParamStore::new(), &x, &f), y);
    }

    #[test]
    fn static_skip_only_is_identity() {
        let (x, f) = sample(3);
        let st = GateState::new("r", ResidualMode::Static, 4).with_static(0.0, 1.0);
        assert_eq!(run(&st, &ParamStore::new(), &x, &f), x);
    }

    #[test]
    fn dynamic_starts_at_half_and_half() {
        let (x, f) = sample(4);
        let st = GateState::new("r", ResidualMode::Dynamic, 4);
        let mut store = ParamStore::new();
        st.init(&mut store);
        let y = run(&st, &store, &x, &f);
        for i in 0..x.numel() {
            assert!((y.data()[i] - 0.5 * (f.data()[i] + x.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_dynamic_gates_reproduce_classic() {
        let (x, f) = sample(5);
        let st = GateState::new("r", ResidualMode::Dynamic, 4);
        let mut store = ParamStore::new();
        st.init(&mut store);
        store.set("r.b_alpha", Tensor::full(&[4], 50.0)).unwrap();
        store.set("r.b_beta", Tensor::full(&[4], 50.0)).unwrap();
        let classic = GateState::new("r", ResidualMode::Classic, 4);
        assert_eq!(run(&st, &store, &x, &f), run(&classic, &store, &x, &f));
    }

    #[test]
    fn mismatched_branch_is_a_contract_error() {
        let st = GateState::new("r", ResidualMode::Classic, 4);
        let mut tape = Tape::new();
        let p = ParamStore::new().bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let f = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        assert!(matches!(st.combine(&mut tape, &p, x, f), Err(Error::Contract(_))));
    }

    #[test]
    fn cache_update_rules() {
        let mut st = GateState::new("r", ResidualMode::Dynamic, 2);
        st.update_gate_cache(&[1.0, -2.0], &[3.0, 0.5], 0.0).unwrap();
        assert_eq!(st.g_f, [1.0, -2.0]);
        assert_eq!(st.g_x, [3.0, 0.5]);
        st.update_gate_cache(&[0.0, 0.0], &[0.0, 0.0], 0.9).unwrap();
        assert!((st.g_f[0] - 0.9).abs() < 1e-15 && (st.g_x[0] - 2.7).abs() < 1e-15);
        assert!(matches!(
            st.update_gate_cache(&[f64::NAN, 0.0], &[0.0, 0.0], 0.5),
            Err(Error::Divergence(_))
        ));
        assert!(st.update_gate_cache(&[0.0; 2], &[0.0; 2], 1.0).is_err());
    }

    #[test]
    fn constant_gradient_is_the_cache_fixed_point() {
        let mut st = GateState::new("r", ResidualMode::Dynamic, 1);
        let g = 0.8;
        for k in 1..=200 {
            st.update_gate_cache(&[g], &[g], 0.9).unwrap();
            let oracle = g * (1.0 - 0.9f64.powi(k));
            assert!((st.g_f[0] - oracle).abs() < 1e-12);
        }
        assert!((st.g_f[0] - g).abs() < 1e-8);
    }

    #[test]
    fn cache_reads_branch_and_skip_gradients() {
        let (x, _) = sample(6);
        let mut st = GateState::new("r", ResidualMode::Classic, 4);
        let mut tape = Tape::new();
        let p = ParamStore::new().bind(&mut tape).unwrap();
        let xv = tape.param(x).unwrap();
        let site = st
            .apply(&mut tape, &p, xv, |t, v| t.scale(v, 3.0))
            .unwrap();
        let loss = tape.sum(site.out).unwrap();
        tape.backward(loss).unwrap();
        st.update_from_tape(&tape, &[site], 0.0).unwrap();
        // ∂L/∂F = 1; ∂L/∂x collects the skip and the branch paths.
        assert_eq!(st.g_f, [1.0; 4]);
        assert_eq!(st.g_x, [4.0; 4]);
    }

    #[test]
    fn dynamic_gradient_with_frozen_caches() {
        let (x, _) = sample(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::uniform(&[4, 4], 0.5, &mut rng);
        let wa = Tensor::uniform(&[4, 4], 0.5, &mut rng);
        let wb = Tensor::uniform(&[4, 4], 0.5, &mut rng);
        let mut st = GateState::new("r", ResidualMode::Dynamic, 4);
        st.g_f = vec![0.3, -0.2, 0.5, 1.0];
        st.g_x = vec![-0.4, 0.1, 0.0, 0.7];
        let readout = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let r = finite_diff_check_many(
            |t, v| {
                let bound = Bound::from_pairs([
                    ("r.w_alpha", v[2]),
                    ("r.b_alpha", v[3]),
                    ("r.w_beta", v[4]),
                    ("r.b_beta", v[5]),
                ]);
                let site = st.apply(t, &bound, v[0], |t, x| {
                    let h = t.matmul(x, v[1])?;
                    t.tanh(h)
                })?;
                let rv = t.constant(readout.clone())?;
                let prod = t.mul(site.out, rv)?;
                t.sum(prod)
            },
            &[
                x,
                w,
                wa,
                Tensor::vector(vec![0.1, -0.3, 0.2, 0.0]),
                wb,
                Tensor::vector(vec![0.0, 0.4, -0.1, 0.3]),
            ],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    proptest! {
        #[test]
        fn dynamic_gates_stay_in_unit_interval(
            gf in proptest::collection::vec(-20.0f64..20.0, 3),
            gx in proptest::collection::vec(-20.0f64..20.0, 3),
            w in proptest::collection::vec(-3.0f64..3.0, 9),
        ) {
            let mut st = GateState::new("r", ResidualMode::Dynamic, 3);
            let mut store = ParamStore::new();
            st.init(&mut store);
            store.set("r.w_alpha", Tensor::matrix(3, 3, w.clone()).unwrap()).unwrap();
            store.set("r.w_beta", Tensor::matrix(3, 3, w).unwrap()).unwrap();
            st.g_f = gf;
            st.g_x = gx;
            let (a, b) = st.gates(&store).unwrap();
            for v in a.iter().chain(&b) {
                prop_assert!(*v >= 0.0 && *v <= 1.0);
            }
        }
    }
}

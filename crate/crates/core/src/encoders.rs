//! Token embeddings and the bidirectional LSTM context encoder.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rhema::glorot;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const INIT_BOUND: f64 = 0.1;

/// `vocab_size × d` lookup table; the padding row never learns.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub name: String,
    pub vocab_size: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab_size: usize, d: usize) -> Self {
        Embedding {
            name: name.into(),
            vocab_size,
            d,
        }
    }

    /// Uniform(−0.1, 0.1) rows, zero padding row.
    pub fn random_table<R: Rng>(&self, rng: &mut R) -> Tensor {
        let mut t = Tensor::uniform(&[self.vocab_size, self.d], INIT_BOUND, rng);
        t.data_mut()[PAD_ID * self.d..(PAD_ID + 1) * self.d].fill(0.0);
        t
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(self.name.clone(), self.random_table(rng));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(p.var(&self.name), ids, Some(PAD_ID))
    }
}

/// Vectors read from an embedding text file, aligned to a vocabulary.
#[derive(Clone, Debug)]
pub struct LoadedEmbeddings {
    pub table: Tensor,
    pub hits: usize,
    /// Fraction of non-reserved vocabulary entries found in the file.
    pub coverage: f64,
}

/// Parse the text format: a `count dim` header, then `token v1 … v_dim`
/// per line.
pub fn parse_embedding_text<R: BufRead>(reader: R) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        source_name: None,
        line,
        msg,
    };
    let (count, dim) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::EmptyInput("embedding file has no header".into()));
        };
        let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let nums: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
        match nums.as_deref() {
            Some([c, d]) if *d > 0 => break (*c, *d),
            _ => return Err(parse_err(i + 1, format!("expected header \"count dim\", got {line:?}"))),
        }
    };
    let mut vectors = HashMap::with_capacity(count);
    for (i, line) in lines {
        let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(i + 1, format!("bad number {f:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(parse_err(
                i + 1,
                format!("token {token:?} has {} values, header says {dim}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(i + 1, format!("non-finite value for token {token:?}")));
        }
        vectors.insert(token, values);
    }
    Ok((dim, vectors))
}

/// Align file vectors to `tokens` (indexed by id; the first `reserved`
/// ids are special). Missing tokens get seeded uniform rows.
pub fn align_embeddings(
    dim: usize,
    vectors: &HashMap<String, Vec<f64>>,
    tokens: &[String],
    reserved: usize,
    d_model: usize,
    seed: u64,
) -> Result<LoadedEmbeddings> {
    if dim != d_model {
        return Err(Error::Config(format!(
            "embedding file dimension {dim} does not match d_model {d_model}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Embedding::new("", tokens.len(), d_model).random_table(&mut rng);
    let mut data = table.into_data();
    let mut hits = 0;
    for (id, tok) in tokens.iter().enumerate().skip(reserved) {
        if let Some(v) = vectors.get(tok) {
            data[id * d_model..(id + 1) * d_model].copy_from_slice(v);
            hits += 1;
        }
    }
    let total = tokens.len().saturating_sub(reserved);
    Ok(LoadedEmbeddings {
        table: Tensor::matrix(tokens.len(), d_model, data)?,
        hits,
        coverage: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
    })
}

pub fn load_embedding_file(
    path: &Path,
    tokens: &[String],
    reserved: usize,
    d_model: usize,
    seed: u64,
) -> Result<LoadedEmbeddings> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (dim, vectors) = parse_embedding_text(std::io::BufReader::new(file))
        .map_err(|e| e.with_source_name(&path.display().to_string()))?;
    align_embeddings(dim, &vectors, tokens, reserved, d_model, seed)
}

/// Bidirectional LSTM, gates ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub prefix: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(prefix: impl Into<String>, d_in: usize, hidden: usize) -> Self {
        BiLstm {
            prefix: prefix.into(),
            d_in,
            hidden,
        }
    }

    fn name(&self, dir: &str, leaf: &str) -> String {
        format!("{}.{dir}.{leaf}", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        for dir in ["fwd", "bwd"] {
            store.insert(self.name(dir, "w_ih"), glorot(self.d_in, 4 * h, rng));
            store.insert(self.name(dir, "w_hh"), glorot(h, 4 * h, rng));
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].fill(1.0);
            store.insert(self.name(dir, "b"), Tensor::vector(b));
        }
    }

    fn direction(&self, tape: &mut Tape, p: &Bound, x: Var, len: usize, dir: &str) -> Result<Vec<Var>> {
        let h = self.hidden;
        let proj = tape.matmul(x, p.var(&self.name(dir, "w_ih")))?;
        let proj = tape.add_row(proj, p.var(&self.name(dir, "b")))?;
        let w_hh = p.var(&self.name(dir, "w_hh"));
        let mut hs = tape.constant(Tensor::zeros(&[1, h]))?;
        let mut cs = tape.constant(Tensor::zeros(&[1, h]))?;
        let order: Vec<usize> = if dir == "fwd" { (0..len).collect() } else { (0..len).rev().collect() };
        let mut out = vec![hs; len];
        for t in order {
            let xt = tape.row(proj, t)?;
            let rec = tape.matmul(hs, w_hh)?;
            let pre = tape.add(xt, rec)?;
            let i = tape.slice_cols(pre, 0, h)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice_cols(pre, h, 2 * h)?;
            let f = tape.sigmoid(f)?;
            let g = tape.slice_cols(pre, 2 * h, 3 * h)?;
            let g = tape.tanh(g)?;
            let o = tape.slice_cols(pre, 3 * h, 4 * h)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, cs)?;
            let write = tape.mul(i, g)?;
            cs = tape.add(keep, write)?;
            let squashed = tape.tanh(cs)?;
            hs = tape.mul(o, squashed)?;
            out[t] = hs;
        }
        Ok(out)
    }

    /// `seq × 2h` output; rows at or beyond `len` are zero.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, len: usize) -> Result<Var> {
        let n = tape.value(x).rows();
        if len > n || len == 0 {
            return Err(Error::Contract(format!("bilstm length {len} for a {n}-row input")));
        }
        let fwd = self.direction(tape, p, x, len, "fwd")?;
        let bwd = self.direction(tape, p, x, len, "bwd")?;
        let mut rows_f = fwd;
        let mut rows_b = bwd;
        if len < n {
            let zero = tape.constant(Tensor::zeros(&[1, self.hidden]))?;
            rows_f.resize(n, zero);
            rows_b.resize(n, zero);
        }
        let f = tape.stack_rows(&rows_f)?;
        let b = tape.stack_rows(&rows_b)?;
        tape.concat_cols(f, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_many, GradCheckOptions};

    fn tokens(n: usize) -> Vec<String> {
        let mut t = vec!["<pad>".to_string(), "<unk>".to_string()];
        t.extend((0..n).map(|i| format!("t{i}")));
        t
    }

    #[test]
    fn lookup_rows_and_frozen_padding() {
        let emb = Embedding::new("emb", 5, 3);
        let mut store = ParamStore::new();
        emb.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let table = store.get("emb").unwrap().clone();
        assert!(table.row(PAD_ID).iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let e = emb.forward(&mut tape, &p, &[3, 0, 3, 2]).unwrap();
        let ev = tape.value(e).clone();
        assert_eq!(ev.row(0), ev.row(2));
        assert_eq!(ev.row(0), table.row(3));
        assert_eq!(ev.row(1), table.row(PAD_ID));
        // one-hot composition
        let onehot = Tensor::matrix(1, 5, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let oh = tape.constant(onehot).unwrap();
        let prod = tape.matmul(oh, p.var("emb")).unwrap();
        assert_eq!(tape.value(prod).data(), ev.row(3));
        let s = tape.sum(e).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad_tensor(p.var("emb"));
        assert!(g.row(PAD_ID).iter().all(|&v| v == 0.0));
        assert!(g.row(3).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn embedding_file_round_trip_and_coverage() {
        let text = "2 4\nt0 0.1 0.2 0.3 0.4\nt3 -1 -2 -3 -4\n";
        let (dim, vecs) = parse_embedding_text(text.as_bytes()).unwrap();
        let toks = tokens(4);
        let a = align_embeddings(dim, &vecs, &toks, 2, 4, 7).unwrap();
        assert_eq!(a.hits, 2);
        assert_eq!(a.coverage, 0.5);
        assert_eq!(a.table.row(2), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(a.table.row(5), &[-1.0, -2.0, -3.0, -4.0]);
        let b = align_embeddings(dim, &vecs, &toks, 2, 4, 7).unwrap();
        assert_eq!(a.table, b.table);
        assert!(a.table.row(3).iter().all(|v| v.abs() < 0.1));
        assert!(matches!(align_embeddings(dim, &vecs, &toks, 2, 8, 7), Err(Error::Config(_))));
    }

    #[test]
    fn coverage_seven_of_ten() {
        let toks = tokens(10);
        let body: String = (0..7).map(|i| format!("t{i} 1 2\n")).collect();
        let (dim, vecs) = parse_embedding_text(format!("7 2\n{body}").as_bytes()).unwrap();
        let a = align_embeddings(dim, &vecs, &toks, 2, 2, 0).unwrap();
        assert!((a.coverage - 0.7).abs() < 1e-15);
    }

    #[test]
    fn malformed_embedding_lines() {
        let err = parse_embedding_text("2 3\nt0 1 2 3\nt1 1 x 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_embedding_text("2 3\nt0 1 2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_embedding_text("nonsense\n".as_bytes()).is_err());
    }

    fn lstm_setup(d: usize, h: usize, seed: u64) -> (BiLstm, ParamStore) {
        let lstm = BiLstm::new("lstm", d, h);
        let mut store = ParamStore::new();
        lstm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (lstm, store)
    }

    fn run_lstm(lstm: &BiLstm, store: &ParamStore, x: &Tensor, len: usize) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = lstm.forward(&mut tape, &p, xv, len).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let (lstm, mut store) = lstm_setup(3, 4, 1);
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::uniform(&[5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = run_lstm(&lstm, &store, &x, 5);
        assert_eq!(y.shape(), &[5, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversal_swaps_directions() {
        let (lstm, mut store) = lstm_setup(3, 4, 3);
        for leaf in ["w_ih", "w_hh", "b"] {
            let fwd = store.get(&format!("lstm.fwd.{leaf}")).unwrap().clone();
            store.set(&format!("lstm.bwd.{leaf}"), fwd).unwrap();
        }
        let x = Tensor::uniform(&[6, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let rev = Tensor::from_rows(&(0..6).rev().map(|r| x.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = run_lstm(&lstm, &store, &x, 6);
        let b = run_lstm(&lstm, &store, &rev, 6);
        for t in 0..6 {
            let (ra, rb) = (a.row(t), b.row(5 - t));
            assert_eq!(&ra[..4], &rb[4..]);
            assert_eq!(&ra[4..], &rb[..4]);
        }
    }

    #[test]
    fn padding_rows_are_zero_and_inert() {
        let (lstm, store) = lstm_setup(3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let mut y = x.clone();
        y.data_mut()[4 * 3..].copy_from_slice(&Tensor::uniform(&[2, 3], 9.0, &mut rng).into_data());
        let a = run_lstm(&lstm, &store, &x, 4);
        let b = run_lstm(&lstm, &store, &y, 4);
        assert_eq!(a, b);
        assert!(a.row(4).iter().chain(a.row(5)).all(|&v| v == 0.0));
        // padding input rows get no gradient
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let xv = tape.param(x).unwrap();
        let out = lstm.forward(&mut tape, &p, xv, 4).unwrap();
        let s = tape.sum(out).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad_tensor(xv);
        assert!(g.row(4).iter().chain(g.row(5)).all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_gradient() {
        let (lstm, store) = lstm_setup(6, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[4, 6], 1.0, &mut rng);
        let readout = Tensor::uniform(&[4, 10], 1.0, &mut rng);
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let r = finite_diff_check_many(
            |t, v| {
                let p = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
                let y = lstm.forward(t, &p, v[0], 4)?;
                let rv = t.constant(readout.clone())?;
                let prod = t.mul(y, rv)?;
                t.sum(prod)
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}

//! Region-graph reasoning, word embedding lookup and the GRU cell.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// `T × d` region features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    features: Tensor,
}

impl RegionSet {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return invalid(format!(
                "region set must be a T x d matrix, got {:?}",
                features.shape()
            ));
        }
        if !features.is_finite() {
            return invalid("region features must be finite");
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn regions(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Token ids of one caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return invalid("token sequence must be nonempty");
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Uniform `±scale` initialisation.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// `(F W1)(F W2)^T`: pairwise region affinity under two embedding maps.
pub fn region_affinity(g: &mut Graph, features: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = g.matmul(features, w1)?;
    let b = g.matmul(features, w2)?;
    let bt = g.transpose(b);
    g.matmul(a, bt)
}

/// One residual graph-convolution layer over the fully connected region
/// graph: `F + relu(softmax_rows(R) · F · W)`.
pub fn gcn_reason(g: &mut Graph, features: Var, relation: Var, w: Var) -> Result<Var> {
    let (t, _) = g.value(features).dims();
    let (rr, rc) = g.value(relation).dims();
    if rr != t || rc != t {
        return Err(Error::Shape {
            op: "gcn_reason",
            lhs: g.shape(features).to_vec(),
            rhs: g.shape(relation).to_vec(),
        });
    }
    let adj = g.softmax(relation, 1)?;
    let prop = g.matmul(adj, features)?;
    let mixed = g.matmul(prop, w)?;
    let act = g.relu(mixed);
    g.add(features, act)
}

/// Row lookup into a `vocab × e` table.
pub fn embed_words(g: &mut Graph, tokens: &TokenSeq, table: Var) -> Result<Var> {
    let vocab = g.value(table).rows();
    if let Some(&bad) = tokens.ids().iter().find(|&&i| i >= vocab) {
        return invalid(format!("token id {bad} outside vocabulary of {vocab}"));
    }
    g.select_rows(table, tokens.ids())
}

/// Reads a whitespace-separated embedding table: each line is a token id
/// followed by `dim` values. Every id in `0..vocab` must appear exactly once.
pub fn load_embedding_table(path: &Path, vocab: usize, dim: usize) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    parse_embedding_table(&text, vocab, dim)
}

pub fn parse_embedding_table(text: &str, vocab: usize, dim: usize) -> Result<Tensor> {
    let mut data = vec![0.0; vocab * dim];
    let mut seen = vec![false; vocab];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Format(format!("line {}: bad token id", lineno + 1)))?;
        if id >= vocab {
            return Err(Error::Format(format!(
                "line {}: token id {id} outside vocabulary of {vocab}",
                lineno + 1
            )));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Format(format!("line {}: duplicate token id {id}", lineno + 1)));
        }
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {dim} values, got {}",
                lineno + 1,
                values.len()
            )));
        }
        data[id * dim..(id + 1) * dim].copy_from_slice(&values);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("token id {missing} missing from table")));
    }
    Tensor::matrix(vocab, dim, data)
}

/// Parameter ids of one GRU cell with input size `input` and hidden size
/// `hidden`. Gate order in each triple: update, reset, candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GruParams {
    pub input: usize,
    pub hidden: usize,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

/// A GRU cell's weights as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

impl GruParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let gates = ["z", "r", "h"];
        let w = gates.map(|k| {
            store.add(
                format!("{prefix}.w_{k}"),
                uniform_init(input, hidden, scale, rng),
            )
        });
        let u = gates.map(|k| {
            store.add(
                format!("{prefix}.u_{k}"),
                uniform_init(hidden, hidden, scale, rng),
            )
        });
        let b = gates.map(|k| store.add(format!("{prefix}.b_{k}"), Tensor::zeros(&[1, hidden])));
        Self {
            input,
            hidden,
            w,
            u,
            b,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.w.iter().chain(&self.u).chain(&self.b).copied()
    }

    pub fn update_bias(&self) -> ParamId {
        self.b[0]
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> GruVars {
        GruVars {
            w: self.w.map(|id| g.param(store, id)),
            u: self.u.map(|id| g.param(store, id)),
            b: self.b.map(|id| g.param(store, id)),
        }
    }
}

impl GruVars {
    /// Builds vars from a flat list ordered `w_z w_r w_h u_z u_r u_h b_z b_r b_h`.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w: [v[0], v[1], v[2]],
            u: [v[3], v[4], v[5]],
            b: [v[6], v[7], v[8]],
        }
    }

    pub fn hidden(&self, g: &Graph) -> usize {
        g.value(self.u[0]).cols()
    }
}

/// `h' = (1 - z) ⊙ h + z ⊙ ĥ` with sigmoid update/reset gates and a tanh
/// candidate computed from `r ⊙ h`. `x` is `1 × p`, `h` is `1 × q`.
pub fn gru_step(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let gate = |g: &mut Graph, k: usize, hh: Var| -> Result<Var> {
        let xi = g.matmul(x, p.w[k])?;
        let hi = g.matmul(hh, p.u[k])?;
        let s = g.add(xi, hi)?;
        g.add(s, p.b[k])
    };
    let z_pre = gate(g, 0, h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, 1, h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let c_pre = gate(g, 2, rh)?;
    let cand = g.tanh(c_pre);
    let delta = g.sub(cand, h)?;
    let step = g.mul(z, delta)?;
    g.add(h, step)
}

/// Runs the cell over the rows of `seq` from a zero state; returns every
/// hidden state.
pub fn gru_scan(g: &mut Graph, seq: Var, p: &GruVars) -> Result<Vec<Var>> {
    let rows = g.value(seq).rows();
    let mut h = g.constant(Tensor::zeros(&[1, p.hidden(g)]));
    let mut out = Vec::with_capacity(rows);
    for t in 0..rows {
        let x = g.row(seq, t)?;
        h = gru_step(g, x, h, p)?;
        out.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
        uniform_init(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let (m, k) = a.dims();
        let n = b.cols();
        (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn affinity_identity_on_orthonormal_rows() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::eye(4));
        let id = g.constant(Tensor::eye(4));
        let r = region_affinity(&mut g, f, id, id).unwrap();
        assert_eq!(g.value(r), &Tensor::eye(4));
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let r = region_affinity(&mut g, z, id, id).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affinity_matches_dense_oracle() {
        let (f, w1, w2) = (rand_t(4, 8, 1), rand_t(8, 5, 2), rand_t(8, 5, 3));
        let a = naive_matmul(&f, &w1);
        let b = naive_matmul(&f, &w2);
        let mut g = Graph::new();
        let (fv, w1v, w2v) = (g.constant(f), g.constant(w1), g.constant(w2));
        let r = region_affinity(&mut g, fv, w1v, w2v).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want: f64 = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                assert!((g.value(r).at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_residual_identity_and_single_node() {
        let f = rand_t(5, 6, 4);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let w = g.constant(rand_t(6, 6, 5));
        let r = region_affinity(&mut g, fv, w, w).unwrap();
        let zero = g.constant(Tensor::zeros(&[6, 6]));
        let out = gcn_reason(&mut g, fv, r, zero).unwrap();
        assert_eq!(g.value(out), &f);

        let one = rand_t(1, 6, 6);
        let wg = rand_t(6, 6, 7);
        let direct = naive_matmul(&one, &wg);
        let fv = g.constant(one.clone());
        let wv = g.constant(wg);
        let r = g.constant(Tensor::scalar(3.7));
        let out = gcn_reason(&mut g, fv, r, wv).unwrap();
        for j in 0..6 {
            let want = one.at(0, j) + direct[0][j].max(0.0);
            assert!((g.value(out).at(0, j) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let (f, we1, we2, wg) = (rand_t(5, 6, 8), rand_t(6, 4, 9), rand_t(6, 4, 10), rand_t(6, 6, 11));
        let a = naive_matmul(&f, &we1);
        let b = naive_matmul(&f, &we2);
        let rel: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let adj: Vec<Vec<f64>> = rel
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|x| x / s).collect()
            })
            .collect();
        let adj_t = Tensor::from_rows(&adj).unwrap();
        let prop = Tensor::from_rows(&naive_matmul(&adj_t, &f)).unwrap();
        let mixed = naive_matmul(&prop, &wg);

        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let (e1, e2, w) = (g.constant(we1), g.constant(we2), g.constant(wg));
        let r = region_affinity(&mut g, fv, e1, e2).unwrap();
        let out = gcn_reason(&mut g, fv, r, w).unwrap();
        assert_eq!(g.shape(out), &[5, 6]);
        for i in 0..5 {
            for j in 0..6 {
                let want = f.at(i, j) + mixed[i][j].max(0.0);
                assert!((g.value(out).at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_affinity_is_symmetric_psd() {
        let f = rand_t(5, 7, 12);
        let w = rand_t(7, 3, 13);
        let mut g = Graph::new();
        let (fv, wv) = (g.constant(f), g.constant(w));
        let r = region_affinity(&mut g, fv, wv, wv).unwrap();
        let m = g.value(r).clone();
        for i in 0..5 {
            for j in 0..5 {
                assert!((m.at(i, j) - m.at(j, i)).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: f64 = (0..5)
                .map(|i| (0..5).map(|j| v[i] * m.at(i, j) * v[j]).sum::<f64>())
                .sum();
            assert!(q >= -1e-12);
        }
    }

    #[test]
    fn embedding_lookup() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::eye(5));
        let toks = TokenSeq::new(vec![3, 1, 3]).unwrap();
        let e = embed_words(&mut g, &toks, table).unwrap();
        let v = g.value(e).clone();
        assert_eq!(v.row_slice(0), &[0., 0., 0., 1., 0.]);
        assert_eq!(v.row_slice(0), v.row_slice(2));
        let s = g.sum(e);
        g.backward(s).unwrap();
        let grad = g.grad(table).unwrap();
        let row_sums: Vec<f64> = (0..5).map(|r| grad[r * 5..r * 5 + 5].iter().sum()).collect();
        assert_eq!(row_sums, vec![0., 5., 0., 10., 0.]);

        let mut g = Graph::new();
        let table = g.leaf(Tensor::eye(5));
        assert!(embed_words(&mut g, &TokenSeq::new(vec![5]).unwrap(), table).is_err());
        assert!(TokenSeq::new(vec![]).is_err());
    }

    #[test]
    fn embedding_gradcheck() {
        let toks = TokenSeq::new(vec![2, 0, 2]).unwrap();
        let err = grad_check(
            |g, v| {
                let e = embed_words(g, &toks, v[0])?;
                let t = g.tanh(e);
                Ok(g.sum(t))
            },
            &[rand_t(4, 3, 15)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn embedding_table_file() {
        let t = parse_embedding_table("1 0.5 -1\n0 2 3\n", 2, 2).unwrap();
        assert_eq!(t.data(), &[2.0, 3.0, 0.5, -1.0]);
        assert!(parse_embedding_table("0 1 2\n", 2, 2).is_err());
        assert!(parse_embedding_table("0 1\n1 2\n", 2, 2).is_err());
        assert!(parse_embedding_table("0 1 2\n0 1 2\n", 2, 2).is_err());
    }

    fn zero_gru(g: &mut Graph, p: usize, q: usize) -> GruVars {
        let mut v = Vec::new();
        for _ in 0..3 {
            v.push(g.leaf(Tensor::zeros(&[p, q])));
        }
        for _ in 0..3 {
            v.push(g.leaf(Tensor::zeros(&[q, q])));
        }
        for _ in 0..3 {
            v.push(g.leaf(Tensor::zeros(&[1, q])));
        }
        GruVars::from_slice(&v)
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut g = Graph::new();
        let p = zero_gru(&mut g, 3, 4);
        let x = g.constant(Tensor::row(vec![1.0, -2.0, 0.5]));
        let h = g.constant(Tensor::row(vec![0.4, -0.8, 0.2, 0.0]));
        let h2 = gru_step(&mut g, x, h, &p).unwrap();
        assert_eq!(g.value(h2).data(), &[0.2, -0.4, 0.1, 0.0]);
    }

    #[test]
    fn gru_copy_gate() {
        let mut g = Graph::new();
        let mut p = zero_gru(&mut g, 2, 3);
        p.w[2] = g.constant(rand_t(2, 3, 16));
        p.b[0] = g.constant(Tensor::filled(&[1, 3], -800.0));
        let x = g.constant(Tensor::row(vec![1.0, 1.0]));
        let h = g.constant(Tensor::row(vec![0.3, -0.1, 0.9]));
        let h2 = gru_step(&mut g, x, h, &p).unwrap();
        assert_eq!(g.value(h2).data(), g.value(h).data());
        let bad = g.constant(Tensor::row(vec![1.0; 5]));
        assert!(gru_step(&mut g, bad, h, &p).is_err());
    }

    #[test]
    fn gru_gradcheck() {
        let mut inputs = vec![rand_t(1, 3, 20), rand_t(1, 4, 21)];
        for k in 0..3 {
            inputs.push(rand_t(3, 4, 30 + k));
        }
        for k in 0..3 {
            inputs.push(rand_t(4, 4, 40 + k));
        }
        for k in 0..3 {
            inputs.push(rand_t(1, 4, 50 + k));
        }
        let err = grad_check(
            |g, v| {
                let p = GruVars::from_slice(&v[2..]);
                let h1 = gru_step(g, v[0], v[1], &p)?;
                let h2 = gru_step(g, v[0], h1, &p)?;
                let sq = g.square(h2);
                Ok(g.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gru_output_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let params = GruParams::new(&mut store, "gru", 4, 6, &mut rng);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, &store);
        let seq = g.constant(uniform_init(20, 4, 3.0, &mut rng));
        for h in gru_scan(&mut g, seq, &vars).unwrap() {
            assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}

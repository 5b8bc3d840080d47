//! Recurrent cells and attention built from graph primitives.
//!
//! Gate layout, so checkpoints stay portable:
//!
//! * GRU: `w_ih[3h×in]`, `w_hh[3h×h]`, `b_ih[3h]`, `b_hh[3h]`, row blocks
//!   ordered (reset, update, candidate).
//!   `r = σ(W_ir x + b_ir + W_hr h + b_hr)`,
//!   `z = σ(W_iz x + b_iz + W_hz h + b_hz)`,
//!   `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`,
//!   `h' = (1 − z) ⊙ h + z ⊙ n`. A strongly negative update bias carries `h`.
//! * LSTM: `w_ih[4h×in]`, `w_hh[4h×h]`, `b[4h]`, blocks (input, forget, cell, output).

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w_ih: store.add_glorot(
                format!("{prefix}/w_ih"),
                &[3 * hidden, input],
                input,
                hidden,
                rng,
            ),
            w_hh: store.add_glorot(
                format!("{prefix}/w_hh"),
                &[3 * hidden, hidden],
                hidden,
                hidden,
                rng,
            ),
            b_ih: store.add_zeros(format!("{prefix}/b_ih"), &[3 * hidden]),
            b_hh: store.add_zeros(format!("{prefix}/b_hh"), &[3 * hidden]),
            hidden,
        }
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<GruVars> {
        Ok(GruVars {
            w_ih: g.param(store, self.w_ih)?,
            w_hh: g.param(store, self.w_hh)?,
            b_ih: g.param(store, self.b_ih)?,
            b_hh: g.param(store, self.b_hh)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let b = store.add_zeros(format!("{prefix}/b"), &[4 * hidden]);
        // forget gate starts open
        for v in &mut store.tensor_mut(b).data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        Self {
            w_ih: store.add_glorot(
                format!("{prefix}/w_ih"),
                &[4 * hidden, input],
                input,
                hidden,
                rng,
            ),
            w_hh: store.add_glorot(
                format!("{prefix}/w_hh"),
                &[4 * hidden, hidden],
                hidden,
                hidden,
                rng,
            ),
            b,
            hidden,
        }
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<LstmVars> {
        Ok(LstmVars {
            w_ih: g.param(store, self.w_ih)?,
            w_hh: g.param(store, self.w_hh)?,
            b: g.param(store, self.b)?,
        })
    }
}

fn hidden_of<T: Scalar>(g: &Graph<T>, w_hh: Var, gates: usize) -> Result<usize> {
    let s = g.shape(w_hh);
    if s.len() != 2 || s[0] != gates * s[1] {
        return shape_err("recurrent", format!("w_hh {:?} is not [{}h×h]", s, gates));
    }
    Ok(s[1])
}

/// One GRU step from precomputed input projection `gi = W_ih x + b_ih`.
fn gru_from_projection<T: Scalar>(
    g: &mut Graph<T>,
    gi: Var,
    h: Var,
    p: &GruVars,
    hd: usize,
) -> Result<Var> {
    let gh = g.linear(h, p.w_hh, Some(p.b_hh))?;
    let ir = g.slice(gi, 0, 0, hd)?;
    let iz = g.slice(gi, 0, hd, hd)?;
    let in_ = g.slice(gi, 0, 2 * hd, hd)?;
    let hr = g.slice(gh, 0, 0, hd)?;
    let hz = g.slice(gh, 0, hd, hd)?;
    let hn = g.slice(gh, 0, 2 * hd, hd)?;
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r)?;
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z)?;
    let rn = g.mul(r, hn)?;
    let n = g.add(in_, rn)?;
    let n = g.tanh(n)?;
    let d = g.sub(n, h)?;
    let zd = g.mul(z, d)?;
    g.add(h, zd)
}

pub fn gru_cell<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let hd = hidden_of(g, p.w_hh, 3)?;
    if g.shape(h) != [hd] {
        return shape_err("gru_cell", format!("hidden {:?} vs {}", g.shape(h), hd));
    }
    let gi = g.linear(x, p.w_ih, Some(p.b_ih))?;
    gru_from_projection(g, gi, h, p, hd)
}

/// One LSTM step from precomputed input projection. Returns `(h', c')`.
fn lstm_from_projection<T: Scalar>(
    g: &mut Graph<T>,
    gi: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
    hd: usize,
) -> Result<(Var, Var)> {
    let gh = g.linear(h, p.w_hh, None)?;
    let pre = g.add(gi, gh)?;
    let i = g.slice(pre, 0, 0, hd)?;
    let f = g.slice(pre, 0, hd, hd)?;
    let cc = g.slice(pre, 0, 2 * hd, hd)?;
    let o = g.slice(pre, 0, 3 * hd, hd)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let cc = g.tanh(cc)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let ic = g.mul(i, cc)?;
    let c2 = g.add(fc, ic)?;
    let tc = g.tanh(c2)?;
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

pub fn lstm_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hd = hidden_of(g, p.w_hh, 4)?;
    if g.shape(h) != [hd] || g.shape(c) != [hd] {
        return shape_err("lstm_cell", "state size");
    }
    let gi = g.linear(x, p.w_ih, Some(p.b))?;
    lstm_from_projection(g, gi, h, c, p, hd)
}

fn run_lstm<T: Scalar>(
    g: &mut Graph<T>,
    proj: Var,
    p: &LstmVars,
    hd: usize,
    len: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let mut h = g.constant(crate::Tensor::zeros(vec![hd]))?;
    let mut c = h;
    let mut outs = vec![h; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let row = g.slice(proj, 0, t, 1)?;
        let row = g.reshape(row, &[4 * hd])?;
        let (h2, c2) = lstm_from_projection(g, row, h, c, p, hd)?;
        h = h2;
        c = c2;
        outs[t] = h;
    }
    Ok(outs)
}

/// Bidirectional LSTM over `x[L×d]`; row `t` of the result is
/// `[h_fwd(t), h_bwd(t)]`, shape `[L×2h]`.
pub fn bilstm<T: Scalar>(g: &mut Graph<T>, x: Var, fwd: &LstmVars, bwd: &LstmVars) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return shape_err("bilstm", format!("needs non-empty L×d, got {:?}", s));
    }
    let len = s[0];
    let hd = hidden_of(g, fwd.w_hh, 4)?;
    if hidden_of(g, bwd.w_hh, 4)? != hd {
        return shape_err("bilstm", "directions disagree on hidden size");
    }
    let pf = g.linear(x, fwd.w_ih, Some(fwd.b))?;
    let pb = g.linear(x, bwd.w_ih, Some(bwd.b))?;
    let hf = run_lstm(g, pf, fwd, hd, len, false)?;
    let hb = run_lstm(g, pb, bwd, hd, len, true)?;
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        let r = g.concat(&[hf[t], hb[t]], 0)?;
        rows.push(g.reshape(r, &[1, 2 * hd])?);
    }
    g.concat(&rows, 0)
}

/// `softmax(K q / √d)ᵀ V` for `q[d]`, `k[L×d]`, `v[L×d_v]`.
pub fn scaled_dot_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if sq.len() != 1
        || sk.len() != 2
        || sv.len() != 2
        || sk[1] != sq[0]
        || sk[0] != sv[0]
        || sk[0] == 0
    {
        return shape_err("attention", format!("q {:?}, K {:?}, V {:?}", sq, sk, sv));
    }
    let logits = g.linear(q, k, None)?;
    let logits = g.scale(logits, T::of(1.0 / (sq[0] as f64).sqrt()))?;
    let w = g.softmax(logits, 0)?;
    let w = g.reshape(w, &[1, sk[0]])?;
    let out = g.matmul(w, v)?;
    g.reshape(out, &[sv[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(g: &mut Graph<f64>, input: usize, hd: usize) -> GruVars {
        GruVars {
            w_ih: g.constant(Tensor::zeros(vec![3 * hd, input])).unwrap(),
            w_hh: g.constant(Tensor::zeros(vec![3 * hd, hd])).unwrap(),
            b_ih: g.constant(Tensor::zeros(vec![3 * hd])).unwrap(),
            b_hh: g.constant(Tensor::zeros(vec![3 * hd])).unwrap(),
        }
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut g = Graph::new();
        let p = zero_gru(&mut g, 3, 4);
        let x = g.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        let h = g.constant(Tensor::zeros(vec![4])).unwrap();
        let h2 = gru_cell(&mut g, x, h, &p).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0; 4]);
    }

    #[test]
    fn closed_update_gate_carries_state() {
        let mut g = Graph::new();
        let hd = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let gp = GruParams::register(&mut store, "gru", 2, hd, &mut rng);
        for v in &mut store.tensor_mut(gp.b_ih).data_mut()[hd..2 * hd] {
            *v = -50.0;
        }
        let p = gp.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::from_vec(vec![0.3, -0.7])).unwrap();
        let h = g.constant(Tensor::from_vec(vec![0.5, -0.25, 0.9])).unwrap();
        let h2 = gru_cell(&mut g, x, h, &p).unwrap();
        for (a, b) in g.value(h2).data().iter().zip(g.value(h).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_vec(vec![3.0, -1.0])).unwrap();
        let k = g
            .constant(Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap())
            .unwrap();
        let v = g
            .constant(Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap())
            .unwrap();
        let o = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        let k = g
            .constant(Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap())
            .unwrap();
        let v = g
            .constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 6.0]).unwrap())
            .unwrap();
        let o = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!((g.value(o).item() - 3.0).abs() < 1e-12);
    }
}

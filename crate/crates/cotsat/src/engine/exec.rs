use ndarray::{Array1, Array2};

use super::weights::ModelWeights;
use super::EngineError;
use crate::decode::NextTokenLogits;

/// Logits this far below the maximum contribute nothing representable.
const UNDERFLOW: f64 = -745.0;

/// Nonzero entries of each used output column of a matrix.
#[derive(Debug, Clone, Default)]
struct SparseCols {
    cols: Vec<(usize, Vec<(usize, f64)>)>,
}

impl SparseCols {
    fn from_columns(m: &Array2<f64>, cols: impl Iterator<Item = usize>) -> Self {
        let cols = cols
            .map(|c| {
                let entries = m
                    .column(c)
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(r, &w)| (r, w))
                    .collect();
                (c, entries)
            })
            .collect();
        Self { cols }
    }

    fn nonzero_columns(m: &Array2<f64>) -> Vec<usize> {
        (0..m.ncols())
            .filter(|&c| m.column(c).iter().any(|&w| w != 0.0))
            .collect()
    }

    /// `out[k] = x · M[.., cols[k]]`.
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.cols
                .iter()
                .map(|(_, e)| e.iter().map(|&(r, w)| x[r] * w).sum::<f64>()),
        );
    }
}

#[derive(Debug, Clone)]
struct PreparedHead {
    q: SparseCols,
    k: SparseCols,
    v: SparseCols,
    /// Residual writes per used value dimension: `(lane, weight)`.
    out: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
struct PreparedUnit {
    lin: Vec<(usize, f64)>,
    lin_bias: f64,
    gate: Vec<(usize, f64)>,
    gate_bias: f64,
    out: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct PreparedLayer {
    heads: Vec<PreparedHead>,
    units: Vec<PreparedUnit>,
    bias: Vec<(usize, f64)>,
}

/// A model prepared for fast evaluation: only nonzero weights are kept.
///
/// Computing with the zero entries removed gives the same sums as the
/// dense products, in a different order.
#[derive(Debug, Clone)]
pub struct Executor {
    weights: ModelWeights,
    layers: Vec<PreparedLayer>,
    inv_sqrt_d: f64,
}

fn sparse_rows(v: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    v.filter(|&(_, w)| w != 0.0).collect()
}

impl Executor {
    pub fn new(weights: ModelWeights) -> Self {
        let d_head = weights.dims.d_head;
        let d_mlp = weights.dims.d_mlp;
        let layers = weights
            .layers
            .iter()
            .map(|layer| {
                let heads = layer
                    .heads
                    .iter()
                    .enumerate()
                    .filter_map(|(h, head)| {
                        let qc = SparseCols::nonzero_columns(&head.w_q);
                        let kc = SparseCols::nonzero_columns(&head.w_k);
                        let qk: Vec<usize> = qc.into_iter().filter(|c| kc.contains(c)).collect();
                        let vc: Vec<usize> = SparseCols::nonzero_columns(&head.w_v)
                            .into_iter()
                            .filter(|&c| layer.w_o.row(h * d_head + c).iter().any(|&w| w != 0.0))
                            .collect();
                        if vc.is_empty() {
                            return None;
                        }
                        let out = vc
                            .iter()
                            .map(|&c| sparse_rows(layer.w_o.row(h * d_head + c).iter().copied().enumerate()))
                            .collect();
                        Some(PreparedHead {
                            q: SparseCols::from_columns(&head.w_q, qk.iter().copied()),
                            k: SparseCols::from_columns(&head.w_k, qk.iter().copied()),
                            v: SparseCols::from_columns(&head.w_v, vc.into_iter()),
                            out,
                        })
                    })
                    .collect();
                let m = &layer.mlp;
                let units = (0..d_mlp)
                    .filter_map(|u| {
                        let out = sparse_rows(m.w_2.row(u).iter().copied().enumerate());
                        if out.is_empty() {
                            return None;
                        }
                        Some(PreparedUnit {
                            lin: sparse_rows(m.w_1.column(u).iter().copied().enumerate()),
                            lin_bias: m.b_1[u],
                            gate: sparse_rows(m.w_1.column(d_mlp + u).iter().copied().enumerate()),
                            gate_bias: m.b_1[d_mlp + u],
                            out,
                        })
                    })
                    .collect();
                PreparedLayer {
                    heads,
                    units,
                    bias: sparse_rows(m.b_2.iter().copied().enumerate()),
                }
            })
            .collect();
        Self {
            inv_sqrt_d: if d_head == 0 { 1.0 } else { 1.0 / (d_head as f64).sqrt() },
            weights,
            layers,
        }
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn session(&self) -> DecodeSession<'_> {
        DecodeSession {
            exec: self,
            tokens: Vec::new(),
            keys: self.layers.iter().map(|l| vec![Vec::new(); l.heads.len()]).collect(),
            values: self.layers.iter().map(|l| vec![Vec::new(); l.heads.len()]).collect(),
            logits: Vec::new(),
        }
    }

    /// Logits at the last position of `tokens`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f64>, EngineError> {
        let mut s = self.session();
        for &t in tokens {
            s.push(t)?;
        }
        Ok(s.logits)
    }
}

/// Incremental decoding state: cached keys and values of every head.
#[derive(Debug, Clone)]
pub struct DecodeSession<'e> {
    exec: &'e Executor,
    tokens: Vec<usize>,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    logits: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DecodeSession<'_> {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logits at the last position (empty before the first token).
    pub fn last_logits(&self) -> &[f64] {
        &self.logits
    }

    /// Runs one position through the network. On error the session is
    /// unchanged.
    pub fn push(&mut self, token: usize) -> Result<(), EngineError> {
        let w = &self.exec.weights;
        let pos = self.tokens.len();
        if pos >= w.dims.context_len {
            return Err(EngineError::ContextOverflow {
                context_len: w.dims.context_len,
            });
        }
        if token >= w.dims.vocab_size {
            return Err(EngineError::UnknownToken(token));
        }
        if pos == 0 {
            if let Some(bos) = w.vocab.id("[BOS]") {
                if token != bos {
                    return Err(EngineError::MissingBos);
                }
            }
        }
        let mut x: Vec<f64> = w.token_embedding.row(token).to_vec();
        if let Some(l) = w.position_lane {
            x[l] += pos as f64;
        }
        let mut new_kv = Vec::with_capacity(self.exec.layers.len());
        let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (li, layer) in self.exec.layers.iter().enumerate() {
            let mut delta = vec![0.0; x.len()];
            let mut layer_kv = Vec::with_capacity(layer.heads.len());
            for (hi, head) in layer.heads.iter().enumerate() {
                head.q.apply(&x, &mut q);
                head.k.apply(&x, &mut k);
                head.v.apply(&x, &mut v);
                let (keys, values) = (&self.keys[li][hi], &self.values[li][hi]);
                let (kw, vw) = (k.len(), v.len());
                let mut logits = Vec::with_capacity(pos + 1);
                for j in 0..pos {
                    logits.push(dot(&q, &keys[j * kw..(j + 1) * kw]) * self.exec.inv_sqrt_d);
                }
                logits.push(dot(&q, &k) * self.exec.inv_sqrt_d);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(EngineError::NonFinite { layer: li + 1, pos });
                }
                let mut acc = vec![0.0; vw];
                let mut z = 0.0;
                for (j, &l) in logits.iter().enumerate() {
                    let d = l - max;
                    if d < UNDERFLOW {
                        continue;
                    }
                    let e = d.exp();
                    z += e;
                    let row = if j < pos { &values[j * vw..(j + 1) * vw] } else { &v[..] };
                    for (a, &val) in acc.iter_mut().zip(row) {
                        *a += e * val;
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    let o = a / z;
                    if o != 0.0 {
                        for &(lane, wt) in &head.out[c] {
                            delta[lane] += o * wt;
                        }
                    }
                }
                layer_kv.push((k.clone(), v.clone()));
            }
            for (xi, d) in x.iter_mut().zip(&delta) {
                *xi += d;
            }
            let mut delta = vec![0.0; x.len()];
            for u in &layer.units {
                let gate = u.gate_bias + u.gate.iter().map(|&(r, wt)| x[r] * wt).sum::<f64>();
                if gate <= 0.0 {
                    continue;
                }
                let lin = u.lin_bias + u.lin.iter().map(|&(r, wt)| x[r] * wt).sum::<f64>();
                let act = lin * gate;
                for &(lane, wt) in &u.out {
                    delta[lane] += act * wt;
                }
            }
            for &(lane, b) in &layer.bias {
                delta[lane] += b;
            }
            for (xi, d) in x.iter_mut().zip(&delta) {
                *xi += d;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::NonFinite { layer: li + 1, pos });
            }
            new_kv.push(layer_kv);
        }
        let logits = output_logits(&w.w_out, &w.b_out, &x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(EngineError::NonFinite {
                layer: w.dims.n_layers + 1,
                pos,
            });
        }
        for (li, layer_kv) in new_kv.into_iter().enumerate() {
            for (hi, (k, v)) in layer_kv.into_iter().enumerate() {
                self.keys[li][hi].extend_from_slice(&k);
                self.values[li][hi].extend_from_slice(&v);
            }
        }
        self.tokens.push(token);
        self.logits = logits;
        Ok(())
    }
}

fn output_logits(w_out: &Array2<f64>, b_out: &Array1<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = b_out.to_vec();
    for (r, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            for (o, &wt) in out.iter_mut().zip(w_out.row(r)) {
                *o += xv * wt;
            }
        }
    }
    out
}

impl NextTokenLogits for DecodeSession<'_> {
    type Error = EngineError;

    fn push_token(&mut self, token: usize) -> Result<(), EngineError> {
        self.push(token)
    }

    fn logits(&self) -> Vec<f64> {
        self.logits.clone()
    }
}

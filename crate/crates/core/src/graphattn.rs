//! Attention-derived edge weights of the complete agent graph.
//!
//! Edge tensors are `[N, M, M]` with entry `[n, u, v]` the weight of the
//! edge from node `v` to node `u`. Column `v` (node `v`'s outgoing edges)
//! sums to one over alive receivers; entries touching a dead agent are zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{DiffError, ParamStore, Scalar, Tape, Tensor, Var};
use crate::Error;

pub(crate) const ENCODER: &str = "attn.encoder";
pub(crate) const QUERY: &str = "attn.query";
pub(crate) const KEY: &str = "attn.key";

/// Encoder `B: [D, D']`, query `W_Q: [D', D']`, key `W_K: [D', D']`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub encoder: Var,
    pub query: Var,
    pub key: Var,
}

impl AttentionVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, frozen: bool) -> Result<Self, DiffError> {
        let mut get = |name: &str| {
            let p = store.get(name)?;
            if frozen {
                tape.frozen(p)
            } else {
                tape.param(p)
            }
        };
        Ok(AttentionVars { encoder: get(ENCODER)?, query: get(QUERY)?, key: get(KEY)? })
    }
}

fn check_alive(alive: &[bool], n_agents: usize) -> Result<usize, Error> {
    if n_agents == 0 || !alive.len().is_multiple_of(n_agents) {
        return Err(Error::DimMismatch { field: "alive", expected: n_agents, found: alive.len() });
    }
    if alive.chunks(n_agents).any(|team| !team.iter().any(|&a| a)) {
        return Err(Error::AllDead("weight edges"));
    }
    Ok(alive.len() / n_agents)
}

/// Pairwise mask `[N, M, M]`: both endpoints alive.
fn pair_mask(alive: &[bool], n_agents: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(alive.len() * n_agents);
    for team in alive.chunks(n_agents) {
        for &u in team {
            for &v in team {
                mask.push(u && v);
            }
        }
    }
    mask
}

/// Scaled query-key attention from agents' hidden states.
///
/// `hidden: [N, M, D]`, `alive: N·M` flags. For alive `u, v`:
/// `w[u][v] = softmax_u((W_Q φ(c_u))·(W_K φ(c_v)) / √D')` with
/// `φ(c) = elu(B c)`; the softmax runs over alive `u` and includes `u = v`.
pub fn edge_weights<T: Scalar>(tape: &mut Tape<T>, vars: &AttentionVars, hidden: Var, alive: &[bool]) -> Result<Var, Error> {
    let shape = tape.shape(hidden).to_vec();
    if shape.len() != 3 {
        return Err(Error::DimMismatch { field: "hidden rank", expected: 3, found: shape.len() });
    }
    let m = shape[1];
    let n = check_alive(alive, m)?;
    if n != shape[0] {
        return Err(Error::DimMismatch { field: "alive samples", expected: shape[0], found: n });
    }
    let attn_dim = tape.shape(vars.query)[0];
    let enc = tape.matmul(hidden, vars.encoder)?;
    let enc = tape.elu(enc)?;
    let queries = tape.matmul(enc, vars.query)?;
    let keys = tape.matmul(enc, vars.key)?;
    let keys_t = tape.transpose(keys)?;
    let logits = tape.matmul(queries, keys_t)?;
    let scale = T::one() / T::from_usize(attn_dim).unwrap_or_else(T::one).sqrt();
    let logits = tape.affine(logits, scale, T::zero())?;
    Ok(tape.masked_softmax(logits, 1, &pair_mask(alive, m))?)
}

/// Equal weights `1 / #alive` on every alive pair, as a constant `[N, M, M]`.
pub fn uniform_edge_weights<T: Scalar>(alive: &[bool], n_agents: usize) -> Result<Tensor<T>, Error> {
    let n = check_alive(alive, n_agents)?;
    let mut data = vec![T::zero(); n * n_agents * n_agents];
    for (s, team) in alive.chunks(n_agents).enumerate() {
        let count = team.iter().filter(|&&a| a).count();
        let w = T::one() / T::from_usize(count).unwrap_or_else(T::one);
        for u in 0..n_agents {
            for v in 0..n_agents {
                if team[u] && team[v] {
                    data[(s * n_agents + u) * n_agents + v] = w;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, n_agents, n_agents], data)?)
}

/// One sample's `M × M` edge matrix, `w[u][v]` = weight of edge `v → u`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub n_agents: usize,
    pub w: Vec<f64>,
}

impl EdgeWeights {
    /// Extracts sample `index` from an `[N, M, M]` tensor.
    pub fn from_batch<T: Scalar>(edges: &Tensor<T>, index: usize) -> Self {
        let m = edges.shape()[1];
        let block = &edges.data()[index * m * m..(index + 1) * m * m];
        EdgeWeights { n_agents: m, w: block.iter().map(|v| v.to_f64_lossless()).collect() }
    }

    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.w[to * self.n_agents + from]
    }

    /// Sum of node `from`'s outgoing weights.
    pub fn outgoing_sum(&self, from: usize) -> f64 {
        (0..self.n_agents).map(|u| self.get(u, from)).sum()
    }
}

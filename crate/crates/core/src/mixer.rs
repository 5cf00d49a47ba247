//! Monotonic mixing GNN with state-conditioned hypernetworks.
//!
//! Node features start as the agents' chosen Q-values (`F_0 = 1`). Each
//! layer aggregates `agg_v = Σ_u w[u][v] h_u` over the edge weights and
//! transforms it with a per-sample network whose weights are generated from
//! the global state. Q_tot is `w_+ · mean_{alive v} h_v^L`, and the reward
//! fractions are `α = softmax_{alive v}(w_local · h_v^L)`.
//!
//! Every weight on the path from an agent Q to Q_tot passes through `|·|`,
//! the nonlinearities are monotone and the edge weights are non-negative, so
//! `∂Q_tot / ∂Q_v ≥ 0` for every agent `v`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{linear, DiffError, ParamStore, Scalar, Tape, Tensor, Var};
use crate::Error;

/// Graph layer family of the mixer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum MixerVariant {
    /// `h' = |W2|ᵀ relu(|W1|ᵀ agg + b1) + b2`.
    #[default]
    Gin,
    /// `h' = elu(|W|ᵀ agg + b)`.
    Gcn,
    /// Uniform edges and a fixed linear mixer: Q_tot is the sum of alive agent Qs.
    Vdn,
}

/// Shape of the mixing network.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerArch {
    pub variant: MixerVariant,
    /// Output width of each graph layer; `F_0 = 1` is implicit.
    pub widths: Vec<usize>,
    /// Hidden width of the GIN layer MLP.
    pub gin_hidden: usize,
    /// Hidden width of every hypernetwork.
    pub hyper_hidden: usize,
    pub state_dim: usize,
    /// Generate `w_local`. Without it α is uniform over alive agents, which
    /// is exact whenever the edges are uniform: every alive node then has
    /// the same embedding.
    pub local_fractions: bool,
}

/// One generated parameter block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Block feeds Q_tot as a weight and is made non-negative.
    pub non_negative: bool,
}

impl BlockSpec {
    fn new(name: String, rows: usize, cols: usize, non_negative: bool) -> Self {
        BlockSpec { name, rows, cols, non_negative }
    }

    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

impl MixerArch {
    pub fn output_width(&self) -> usize {
        match self.variant {
            MixerVariant::Vdn => 1,
            _ => self.widths.last().copied().unwrap_or(1),
        }
    }

    /// Generated blocks in a fixed order: per-layer blocks, then `w_plus`
    /// and `w_local` if enabled. The VDN mixer has none.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        if self.variant == MixerVariant::Vdn {
            return out;
        }
        let mut f_in = 1;
        for (l, &f_out) in self.widths.iter().enumerate() {
            match self.variant {
                MixerVariant::Gin => {
                    let h = self.gin_hidden;
                    out.push(BlockSpec::new(format!("l{l}.w1"), f_in, h, true));
                    out.push(BlockSpec::new(format!("l{l}.b1"), 1, h, false));
                    out.push(BlockSpec::new(format!("l{l}.w2"), h, f_out, true));
                    out.push(BlockSpec::new(format!("l{l}.b2"), 1, f_out, false));
                }
                MixerVariant::Gcn => {
                    out.push(BlockSpec::new(format!("l{l}.w"), f_in, f_out, true));
                    out.push(BlockSpec::new(format!("l{l}.b"), 1, f_out, false));
                }
                MixerVariant::Vdn => {}
            }
            f_in = f_out;
        }
        out.push(BlockSpec::new(String::from("w_plus"), 1, f_in, true));
        if self.local_fractions {
            out.push(BlockSpec::new(String::from("w_local"), 1, f_in, false));
        }
        out
    }

    /// Parameter names and shapes of the hypernetwork for `block`:
    /// `state → hyper_hidden → ReLU → block`.
    pub fn hypernet_params(&self, block: &BlockSpec) -> [(String, Vec<usize>); 4] {
        let p = |suffix: &str| format!("hyper.{}.{suffix}", block.name);
        [
            (p("0.weight"), vec![self.state_dim, self.hyper_hidden]),
            (p("0.bias"), vec![self.hyper_hidden]),
            (p("1.weight"), vec![self.hyper_hidden, block.size()]),
            (p("1.bias"), vec![block.size()]),
        ]
    }
}

/// Tape handles of one hypernetwork.
#[derive(Clone, Copy, Debug)]
struct HyperNet {
    w0: Var,
    b0: Var,
    w1: Var,
    b1: Var,
}

/// Tape handles of all hypernetworks, in [`MixerArch::blocks`] order.
#[derive(Clone, Debug)]
pub struct HyperVars {
    nets: Vec<(BlockSpec, HyperNet)>,
}

impl HyperVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, arch: &MixerArch, frozen: bool) -> Result<Self, DiffError> {
        let mut nets = Vec::new();
        for block in arch.blocks() {
            let names = arch.hypernet_params(&block);
            let mut get = |i: usize| {
                let p = store.get(&names[i].0)?;
                if frozen {
                    tape.frozen(p)
                } else {
                    tape.param(p)
                }
            };
            let net = HyperNet { w0: get(0)?, b0: get(1)?, w1: get(2)?, b1: get(3)? };
            nets.push((block, net));
        }
        Ok(HyperVars { nets })
    }
}

/// Concrete per-sample parameters of one graph layer.
#[derive(Clone, Copy, Debug)]
pub enum LayerBlocks {
    /// `w1: [N, F_in, H]`, `b1: [N, 1, H]`, `w2: [N, H, F_out]`, `b2: [N, 1, F_out]`.
    Gin { w1: Var, b1: Var, w2: Var, b2: Var },
    /// `w: [N, F_in, F_out]`, `b: [N, 1, F_out]`.
    Gcn { w: Var, b: Var },
}

/// Mixer parameters generated for a batch of `N` states.
#[derive(Clone, Debug)]
pub struct MixerBlocks {
    pub samples: usize,
    pub layers: Vec<LayerBlocks>,
    /// `[N, F_L, 1]`, non-negative; `None` for the VDN mixer.
    pub w_plus: Option<Var>,
    /// `[N, F_L, 1]`; `None` for the VDN mixer.
    pub w_local: Option<Var>,
}

/// Runs every hypernetwork on `state: [N, state_dim]`.
pub fn eval_hypernets<T: Scalar>(tape: &mut Tape<T>, arch: &MixerArch, hyper: &HyperVars, state: Var) -> Result<MixerBlocks, Error> {
    let shape = tape.shape(state).to_vec();
    if shape.len() != 2 || shape[1] != arch.state_dim {
        return Err(Error::DimMismatch { field: "state_dim", expected: arch.state_dim, found: *shape.last().unwrap_or(&0) });
    }
    let n = shape[0];
    let mut generated = Vec::with_capacity(hyper.nets.len());
    for (block, net) in &hyper.nets {
        let hidden = linear(tape, state, net.w0, net.b0)?;
        let hidden = tape.relu(hidden)?;
        let raw = linear(tape, hidden, net.w1, net.b1)?;
        let raw = if block.non_negative { tape.abs(raw)? } else { raw };
        generated.push(tape.reshape(raw, &[n, block.rows, block.cols])?);
    }
    if arch.variant == MixerVariant::Vdn {
        return Ok(MixerBlocks { samples: n, layers: Vec::new(), w_plus: None, w_local: None });
    }
    let per_layer = if arch.variant == MixerVariant::Gin { 4 } else { 2 };
    let mut layers = Vec::with_capacity(arch.widths.len());
    let (layer_blocks, tail) = generated.split_at(arch.widths.len() * per_layer);
    for chunk in layer_blocks.chunks(per_layer) {
        layers.push(match arch.variant {
            MixerVariant::Gin => LayerBlocks::Gin { w1: chunk[0], b1: chunk[1], w2: chunk[2], b2: chunk[3] },
            _ => LayerBlocks::Gcn { w: chunk[0], b: chunk[1] },
        });
    }
    let f = arch.output_width();
    let w_plus = tape.reshape(tail[0], &[n, f, 1])?;
    let w_local = match tail.get(1) {
        Some(&w) => Some(tape.reshape(w, &[n, f, 1])?),
        None => None,
    };
    Ok(MixerBlocks { samples: n, layers, w_plus: Some(w_plus), w_local })
}

/// Result of mixing a batch of `N` samples of `M` agents.
#[derive(Clone, Copy, Debug)]
pub struct MixerOutput {
    /// `[N]`
    pub q_tot: Var,
    /// `[N, M]`, zero at dead agents.
    pub alpha: Var,
    /// `[N, M, F_L]`
    pub node_embeddings: Var,
}

fn alive_count(team: &[bool]) -> usize {
    team.iter().filter(|&&a| a).count()
}

/// Mixes `agent_q: [N, M]` over `edges: [N, M, M]`.
///
/// Dead agents receive and send no messages (their edge entries are zero)
/// and are excluded from the readout and from the α softmax.
pub fn mix<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &MixerArch,
    blocks: &MixerBlocks,
    agent_q: Var,
    edges: Var,
    alive: &[bool],
) -> Result<MixerOutput, Error> {
    let shape = tape.shape(agent_q).to_vec();
    if shape.len() != 2 {
        return Err(Error::DimMismatch { field: "agent_q rank", expected: 2, found: shape.len() });
    }
    let (n, m) = (shape[0], shape[1]);
    if alive.len() != n * m {
        return Err(Error::DimMismatch { field: "alive", expected: n * m, found: alive.len() });
    }
    if tape.shape(edges) != [n, m, m] {
        return Err(Error::DimMismatch { field: "edges", expected: n * m * m, found: tape.value(edges).len() });
    }
    if blocks.samples != n {
        return Err(Error::DimMismatch { field: "mixer samples", expected: n, found: blocks.samples });
    }
    let teams: Vec<&[bool]> = alive.chunks(m).collect();
    if teams.iter().any(|t| alive_count(t) == 0) {
        return Err(Error::AllDead("mix"));
    }

    let to = tape.transpose(edges)?;
    let mut h = tape.reshape(agent_q, &[n, m, 1])?;
    if arch.variant == MixerVariant::Vdn {
        // Uniform edges scaled by the alive count: each h_v is the team sum.
        let scale: Vec<f64> = teams.iter().map(|t| alive_count(t) as f64).collect();
        let scale = tape.constant(Tensor::from_f64(&[n, 1, 1], &scale)?)?;
        let agg = tape.matmul(to, h)?;
        h = tape.mul(agg, scale)?;
    }
    for layer in &blocks.layers {
        let agg = tape.matmul(to, h)?;
        h = match *layer {
            LayerBlocks::Gin { w1, b1, w2, b2 } => {
                let x = tape.matmul(agg, w1)?;
                let x = tape.add(x, b1)?;
                let x = tape.relu(x)?;
                let x = tape.matmul(x, w2)?;
                tape.add(x, b2)?
            }
            LayerBlocks::Gcn { w, b } => {
                let x = tape.matmul(agg, w)?;
                let x = tape.add(x, b)?;
                tape.elu(x)?
            }
        };
    }

    let mut pool = Vec::with_capacity(n * m);
    for team in &teams {
        let inv = 1.0 / alive_count(team) as f64;
        pool.extend(team.iter().map(|&a| if a { inv } else { 0.0 }));
    }
    let pool = tape.constant(Tensor::from_f64(&[n, 1, m], &pool)?)?;
    let pooled = tape.matmul(pool, h)?;
    let q_tot = match blocks.w_plus {
        Some(w_plus) => tape.matmul(pooled, w_plus)?,
        None => pooled,
    };
    let q_tot = tape.reshape(q_tot, &[n])?;

    let logits = match blocks.w_local {
        Some(w_local) => {
            let l = tape.matmul(h, w_local)?;
            tape.reshape(l, &[n, m])?
        }
        None => tape.constant(Tensor::zeros(&[n, m]))?,
    };
    let alpha = tape.masked_softmax(logits, 1, alive)?;
    Ok(MixerOutput { q_tot, alpha, node_embeddings: h })
}

/// Q_tot of one sample at each agent's availability-masked argmax.
///
/// `agent_q` and `avail` are `M × n_actions` row-major, `edges: [1, M, M]`
/// and `blocks` generated for a single state. Dead agents take the no-op.
/// For a monotone mixer this equals the maximum over all joint actions.
#[allow(clippy::too_many_arguments)]
pub fn joint_greedy_value<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &MixerArch,
    blocks: &MixerBlocks,
    agent_q: &[f64],
    n_actions: usize,
    edges: Var,
    alive: &[bool],
    avail: &[bool],
) -> Result<(f64, Vec<usize>), Error> {
    let m = alive.len();
    if agent_q.len() != m * n_actions || avail.len() != m * n_actions {
        return Err(Error::DimMismatch { field: "agent_q", expected: m * n_actions, found: agent_q.len() });
    }
    let mut actions = Vec::with_capacity(m);
    for (v, &is_alive) in alive.iter().enumerate() {
        let row = v * n_actions..(v + 1) * n_actions;
        let a = if is_alive {
            crate::agent::masked_argmax(&agent_q[row.clone()], &avail[row]).ok_or(Error::NoAvailableAction { agent: v })?
        } else {
            crate::envs::NOOP
        };
        actions.push(a);
    }
    let chosen: Vec<f64> = actions.iter().enumerate().map(|(v, &a)| agent_q[v * n_actions + a]).collect();
    let q = tape.constant(Tensor::from_f64(&[1, m], &chosen)?)?;
    let out = mix(tape, arch, blocks, q, edges, alive)?;
    Ok((tape.value(out.q_tot).data()[0].to_f64_lossless(), actions))
}

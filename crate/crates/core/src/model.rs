//! The full GraphMIX parameter set: agent network, attention and mixer
//! hypernetworks, with initialization and tape binding.
//!
//! No parameter shape depends on the team size; the agent id one-hot is
//! sized to `max_agents`, so one parameter store serves any team of up to
//! that many agents over the same observation, action and state spaces.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::agent::{self, AgentInputLayout, AgentVars};
use crate::diff::{ParamStore, ParamTensor, Scalar, Tape, Tensor, Var};
use crate::graphattn::{self, AttentionVars};
use crate::mixer::{self, HyperVars, MixerArch, MixerOutput, MixerVariant};
use crate::rng::Rng;
use crate::Error;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    /// GRU hidden size `D`.
    pub agent_hidden: usize,
    /// Attention embedding size `D'`.
    pub attn_dim: usize,
    /// Attention edge weights; uniform edges when off.
    pub attention: bool,
    pub mixer: MixerVariant,
    /// Number of graph layers `L`.
    pub gnn_layers: usize,
    pub gnn_width: usize,
    pub gin_hidden: usize,
    pub hyper_hidden: usize,
    /// Largest team the agent id one-hot can encode.
    pub max_agents: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            agent_hidden: 64,
            attn_dim: 16,
            attention: true,
            mixer: MixerVariant::Gin,
            gnn_layers: 1,
            gnn_width: 32,
            gin_hidden: 16,
            hyper_hidden: 64,
            max_agents: 6,
        }
    }
}

/// Environment-side dimensions the parameters depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub state_dim: usize,
}

/// Name, shape and initialization fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn spec(name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec { name: name.into(), shape, fan_in }
}

/// Tape handles of every network.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub agent: AgentVars,
    pub attention: Option<AttentionVars>,
    pub hyper: HyperVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphMix {
    config: ModelConfig,
    dims: ModelDims,
    arch: MixerArch,
}

impl GraphMix {
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<Self, Error> {
        let positive = [
            ("agent_hidden", config.agent_hidden),
            ("attn_dim", config.attn_dim),
            ("gnn_layers", config.gnn_layers),
            ("gnn_width", config.gnn_width),
            ("gin_hidden", config.gin_hidden),
            ("hyper_hidden", config.hyper_hidden),
            ("max_agents", config.max_agents),
            ("obs_dim", dims.obs_dim),
            ("n_actions", dims.n_actions),
            ("state_dim", dims.state_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("`{name}` must be positive")));
        }
        let arch = MixerArch {
            variant: config.mixer,
            widths: vec![config.gnn_width; config.gnn_layers],
            gin_hidden: config.gin_hidden,
            hyper_hidden: config.hyper_hidden,
            state_dim: dims.state_dim,
            local_fractions: config.attention,
        };
        Ok(GraphMix { config, dims, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn arch(&self) -> &MixerArch {
        &self.arch
    }

    pub fn input_layout(&self) -> AgentInputLayout {
        AgentInputLayout { obs_dim: self.dims.obs_dim, n_actions: self.dims.n_actions, max_agents: self.config.max_agents }
    }

    /// Attention edges are used; otherwise edges are uniform over alive agents.
    pub fn uses_attention(&self) -> bool {
        self.config.attention && self.config.mixer != MixerVariant::Vdn
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.config.agent_hidden;
        let a = self.dims.n_actions;
        let w = self.input_layout().width();
        let mut out = vec![
            spec(agent::FC_IN_W, vec![w, d], w),
            spec(agent::FC_IN_B, vec![d], w),
            spec(agent::GRU_W_IH, vec![d, 3 * d], d),
            spec(agent::GRU_W_HH, vec![d, 3 * d], d),
            spec(agent::GRU_B_IH, vec![3 * d], d),
            spec(agent::GRU_B_HH, vec![3 * d], d),
            spec(agent::FC_OUT_W, vec![d, a], d),
            spec(agent::FC_OUT_B, vec![a], d),
        ];
        if self.uses_attention() {
            let dp = self.config.attn_dim;
            out.push(spec(graphattn::ENCODER, vec![d, dp], d));
            out.push(spec(graphattn::QUERY, vec![dp, dp], dp));
            out.push(spec(graphattn::KEY, vec![dp, dp], dp));
        }
        for block in self.arch.blocks() {
            let [w0, b0, w1, b1] = self.arch.hypernet_params(&block);
            let (s, h) = (self.arch.state_dim, self.arch.hyper_hidden);
            out.push(spec(w0.0, w0.1, s));
            out.push(spec(b0.0, b0.1, s));
            out.push(spec(w1.0, w1.1, h));
            out.push(spec(b1.0, b1.1, h));
        }
        out
    }

    /// Uniform `±1/√fan_in` initialization of every tensor.
    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for p in self.param_specs() {
            let bound = 1.0 / num_traits::Float::sqrt(p.fan_in as f64);
            let n: usize = p.shape.iter().product();
            let values = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
            let tensor = ParamTensor::new(p.name, p.shape, values).expect("spec shapes are positive");
            store.insert(tensor).expect("spec names are unique");
        }
        store
    }

    pub fn zero_params<T: Scalar>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for p in self.param_specs() {
            store.insert(ParamTensor::zeros(p.name, &p.shape).expect("spec shapes are positive")).expect("spec names are unique");
        }
        store
    }

    /// Checks that `store` has exactly this model's tensors and shapes.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), Error> {
        Ok(self.zero_params::<T>().check_layout(store)?)
    }

    /// Binds all parameters; `frozen` binds them as constants (target networks).
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frozen: bool) -> Result<ModelVars, Error> {
        let agent = AgentVars::bind(tape, store, frozen)?;
        let attention = if self.uses_attention() { Some(AttentionVars::bind(tape, store, frozen)?) } else { None };
        let hyper = HyperVars::bind(tape, store, &self.arch, frozen)?;
        Ok(ModelVars { agent, attention, hyper })
    }

    /// Edge weights `[N, M, M]` from hidden states `[N, M, D]`.
    pub fn edges<T: Scalar>(&self, tape: &mut Tape<T>, vars: &ModelVars, hidden: Var, alive: &[bool]) -> Result<Var, Error> {
        match &vars.attention {
            Some(attn) => graphattn::edge_weights(tape, attn, hidden, alive),
            None => {
                let m = tape.shape(hidden)[1];
                let uniform = graphattn::uniform_edge_weights(alive, m)?;
                Ok(tape.constant(uniform)?)
            }
        }
    }

    /// Mixes `agent_q: [N, M]` with explicit `edges: [N, M, M]` and
    /// `state: [N, state_dim]`.
    pub fn mix_with_edges<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        agent_q: Var,
        edges: Var,
        state: Var,
        alive: &[bool],
    ) -> Result<MixerOutput, Error> {
        let blocks = mixer::eval_hypernets(tape, &self.arch, &vars.hyper, state)?;
        mixer::mix(tape, &self.arch, &blocks, agent_q, edges, alive)
    }

    /// Full mixing step from agent hidden states.
    pub fn mix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        agent_q: Var,
        hidden: Var,
        state: Var,
        alive: &[bool],
    ) -> Result<MixerOutput, Error> {
        let edges = self.edges(tape, vars, hidden, alive)?;
        self.mix_with_edges(tape, vars, agent_q, edges, state, alive)
    }

    /// Single-sample Q_tot in 64-bit precision; `agent_q` has `M` entries.
    pub fn q_tot(
        &self,
        params: &ParamStore<f64>,
        agent_q: &[f64],
        edges: &Tensor<f64>,
        state: &[f64],
        alive: &[bool],
    ) -> Result<MixedValues, Error> {
        let mut tape = Tape::verifying();
        let vars = self.bind(&mut tape, params, true)?;
        let q = tape.constant(Tensor::from_f64(&[1, agent_q.len()], agent_q)?)?;
        let e = tape.constant(edges.clone())?;
        let s = tape.constant(Tensor::from_f64(&[1, state.len()], state)?)?;
        let out = self.mix_with_edges(&mut tape, &vars, q, e, s, alive)?;
        Ok(MixedValues {
            q_tot: tape.value(out.q_tot).data()[0],
            alpha: tape.value(out.alpha).to_f64_vec(),
            node_embeddings: tape.value(out.node_embeddings).to_f64_vec(),
        })
    }

    /// Q_tot at the per-agent greedy actions, with those actions. `agent_q`
    /// and `avail` are `M × n_actions` row-major; dead agents take the no-op.
    pub fn joint_greedy_value(
        &self,
        params: &ParamStore<f64>,
        agent_q: &[f64],
        edges: &Tensor<f64>,
        state: &[f64],
        alive: &[bool],
        avail: &[bool],
    ) -> Result<(f64, Vec<usize>), Error> {
        let mut tape = Tape::verifying();
        let vars = self.bind(&mut tape, params, true)?;
        let s = tape.constant(Tensor::from_f64(&[1, state.len()], state)?)?;
        let blocks = mixer::eval_hypernets(&mut tape, &self.arch, &vars.hyper, s)?;
        let e = tape.constant(edges.clone())?;
        mixer::joint_greedy_value(&mut tape, &self.arch, &blocks, agent_q, self.dims.n_actions, e, alive, avail)
    }
}

/// Plain values of one mixed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedValues {
    pub q_tot: f64,
    pub alpha: Vec<f64>,
    pub node_embeddings: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn dims() -> ModelDims {
        ModelDims { obs_dim: 5, n_actions: 4, state_dim: 6 }
    }

    #[test]
    fn no_parameter_depends_on_team_size() {
        let model = GraphMix::new(ModelConfig::default(), dims()).unwrap();
        let specs = model.param_specs();
        let fc_in = specs.iter().find(|p| p.name == agent::FC_IN_W).unwrap();
        assert_eq!(fc_in.shape, vec![5 + 4 + 6, 64]);
        let w2 = specs.iter().find(|p| p.name == "hyper.l0.w2.1.weight").unwrap();
        assert_eq!(w2.shape, vec![64, 16 * 32]);
        assert!(specs.iter().any(|p| p.name == graphattn::QUERY));
    }

    #[test]
    fn vdn_and_uniform_variants_drop_unused_tensors() {
        let cfg = ModelConfig { mixer: MixerVariant::Vdn, ..ModelConfig::default() };
        let vdn = GraphMix::new(cfg, dims()).unwrap();
        assert!(vdn.param_specs().iter().all(|p| p.name.starts_with("agent.")));
        let cfg = ModelConfig { attention: false, ..ModelConfig::default() };
        let plain = GraphMix::new(cfg, dims()).unwrap();
        assert!(!plain.param_specs().iter().any(|p| p.name.starts_with("attn.") || p.name.starts_with("hyper.w_local")));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let model = GraphMix::new(ModelConfig::default(), dims()).unwrap();
        let a: ParamStore<f32> = model.init_params(&mut stream(3, Stream::Init));
        let b: ParamStore<f32> = model.init_params(&mut stream(3, Stream::Init));
        assert_eq!(a, b);
        let w = a.get(agent::GRU_W_HH).unwrap();
        assert!(w.values().iter().all(|v| v.abs() <= 1.0 / 8.0));
        model.check_params(&a).unwrap();
        let other = GraphMix::new(ModelConfig::default(), ModelDims { obs_dim: 6, ..dims() }).unwrap();
        assert!(other.check_params(&a).is_err());
    }

    #[test]
    fn zero_hypernets_give_zero_q_tot() {
        let model = GraphMix::new(ModelConfig::default(), dims()).unwrap();
        let params = model.zero_params::<f64>();
        let edges = graphattn::uniform_edge_weights::<f64>(&[true; 3], 3).unwrap();
        let out = model.q_tot(&params, &[1.0, -2.0, 3.0], &edges, &[0.5; 6], &[true; 3]).unwrap();
        assert_eq!(out.q_tot, 0.0);
        for a in out.alpha {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

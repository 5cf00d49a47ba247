use graphmix_core::agent::{agent_forward, masked_argmax};
use graphmix_core::diff::{ParamStore, Scalar, Tape, Tensor};
use graphmix_core::envs::{
    brute_force_optimal_return, CoopGrid, CoopGridConfig, Env, Environment, StepResult, TwoStep, TwoStepConfig, NOOP,
};
use graphmix_core::model::{GraphMix, MixedValues, ModelConfig, ModelDims};
use graphmix_core::rng::{stream, Rng, Stream};
use graphmix_core::trainer::{
    compute_losses, evaluate, evaluate_policy, finetune, rollout_episode, unroll, AgentPolicy, Episode, LossConfig, NoObserver, Policy,
    TrainConfig, Trainer,
};
use graphmix_core::Error;

fn small() -> ModelConfig {
    ModelConfig { agent_hidden: 8, attn_dim: 4, gnn_width: 6, gin_hidden: 4, hyper_hidden: 8, ..ModelConfig::default() }
}

fn model_for(env: &Env, cfg: ModelConfig) -> GraphMix {
    let s = env.spec();
    GraphMix::new(cfg, ModelDims { obs_dim: s.obs_dim, n_actions: s.n_actions, state_dim: s.state_dim }).unwrap()
}

fn grid(n_agents: usize) -> Env {
    Env::CoopGrid(CoopGrid::new(CoopGridConfig { n_agents, ..CoopGridConfig::default() }).unwrap())
}

fn two_step() -> Env {
    Env::TwoStep(TwoStep::new(TwoStepConfig::default()).unwrap())
}

/// Uniformly random episodes.
fn random_episodes(env: &mut Env, model: &GraphMix, n: usize, seed: u64) -> Vec<Episode> {
    let params: ParamStore<f64> = model.zero_params();
    let mut policy = AgentPolicy::new(model, &params, 1.0);
    let mut rng = stream(seed, Stream::Explore);
    (0..n).map(|i| rollout_episode(env, &mut policy, seed * 1000 + i as u64, &mut rng).unwrap()).collect()
}

/// Per-step Q-values `M × A` and hidden states `M × D` of one network.
struct Trace {
    q: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

fn trace(model: &GraphMix, params: &ParamStore<f64>, ep: &Episode) -> Trace {
    let mut tape = Tape::<f64>::new();
    let vars = model.bind(&mut tape, params, true).unwrap();
    let layout = model.input_layout();
    let (m, d) = (ep.n_agents, model.config().agent_hidden);
    let mut h = tape.constant(Tensor::zeros(&[m, d])).unwrap();
    let mut out = Trace { q: Vec::new(), h: Vec::new() };
    for t in 0..=ep.len {
        let last = if t > 0 { Some(ep.actions_at(t - 1)) } else { None };
        let rows = layout.rows(ep.obs_at(t), last, m).unwrap();
        let x = tape.constant(Tensor::from_f64(&[m, layout.width()], &rows).unwrap()).unwrap();
        let (q, next) = agent_forward(&mut tape, &vars.agent, x, h).unwrap();
        h = next;
        out.q.push(tape.value(q).to_f64_vec());
        out.h.push(tape.value(h).to_f64_vec());
    }
    out
}

fn computable(alive: &[bool]) -> Vec<bool> {
    let any = alive.iter().any(|&a| a);
    alive.iter().map(|&a| a || !any).collect()
}

fn mixed(model: &GraphMix, params: &ParamStore<f64>, q: &[f64], hidden: &[f64], state: &[f64], alive: &[bool]) -> MixedValues {
    let m = alive.len();
    let mut tape = Tape::<f64>::new();
    let vars = model.bind(&mut tape, params, true).unwrap();
    let h = tape.constant(Tensor::from_f64(&[1, m, hidden.len() / m], hidden).unwrap()).unwrap();
    let e = model.edges(&mut tape, &vars, h, alive).unwrap();
    let e = tape.value(e).clone();
    model.q_tot(params, q, &e, state, alive).unwrap()
}

/// Loss sums of one episode, one transition at a time.
struct Reference {
    global: f64,
    local: Vec<f64>,
    /// Next-step agent actions where the main and target argmax disagree.
    disagreements: usize,
}

fn reference(model: &GraphMix, main: &ParamStore<f64>, target: &ParamStore<f64>, ep: &Episode, gamma: f64) -> Reference {
    let (mt, tt) = (trace(model, main, ep), trace(model, target, ep));
    let (m, a) = (ep.n_agents, ep.n_actions);
    let mut out = Reference { global: 0.0, local: vec![0.0; m], disagreements: 0 };
    for t in 0..ep.len {
        let chosen: Vec<f64> = (0..m).map(|v| mt.q[t][v * a + ep.actions_at(t)[v]]).collect();
        let now = mixed(model, main, &chosen, &mt.h[t], ep.state_at(t), &computable(ep.alive_at(t)));
        let avail = ep.avail_at(t + 1);
        let mut next_q = Vec::with_capacity(m);
        let mut next_max = Vec::with_capacity(m);
        for v in 0..m {
            let row = v * a..(v + 1) * a;
            let greedy = masked_argmax(&mt.q[t + 1][row.clone()], &avail[row.clone()]).unwrap_or(NOOP);
            let best = masked_argmax(&tt.q[t + 1][row.clone()], &avail[row]).unwrap_or(NOOP);
            out.disagreements += (greedy != best) as usize;
            next_q.push(tt.q[t + 1][v * a + greedy]);
            next_max.push(tt.q[t + 1][v * a + best]);
        }
        let next = mixed(model, target, &next_q, &tt.h[t + 1], ep.state_at(t + 1), &computable(ep.alive_at(t + 1)));
        let cont = if ep.terminal[t] { 0.0 } else { gamma };
        let r = ep.rewards[t];
        out.global += (now.q_tot - (r + cont * next.q_tot)).powi(2);
        for v in 0..m {
            if ep.alive_at(t)[v] {
                let boot = if ep.alive_at(t + 1)[v] { cont * next_max[v] } else { 0.0 };
                out.local[v] += (now.alpha[v] * r + boot - chosen[v]).powi(2);
            }
        }
    }
    out
}

fn losses(model: &GraphMix, main: &ParamStore<f64>, target: &ParamStore<f64>, batch: &[&Episode], gamma: f64) -> (f64, Vec<f64>, usize) {
    let mut tape = Tape::<f64>::new();
    let cfg = LossConfig { gamma, lambda_local: 1.0 };
    let l = compute_losses(&mut tape, model, main, target, batch, &cfg).unwrap();
    (l.global_sum, l.local_sums, l.valid_steps)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn loss_matches_stepwise_reference_with_double_q_targets() {
    let mut env = grid(3);
    let model = model_for(&env, small());
    let main: ParamStore<f64> = model.init_params(&mut stream(1, Stream::Init));
    let target: ParamStore<f64> = model.init_params(&mut stream(2, Stream::Init));
    let gamma = env.spec().gamma;
    let mut disagreements = 0;
    for ep in random_episodes(&mut env, &model, 4, 3) {
        let r = reference(&model, &main, &target, &ep, gamma);
        let (g, l, n) = losses(&model, &main, &target, &[&ep], gamma);
        assert_eq!(n, ep.len);
        assert!(close(g, r.global, 1e-9), "global {g} vs {}", r.global);
        for (a, b) in l.iter().zip(&r.local) {
            assert!(close(*a, *b, 1e-9), "local {a} vs {b}");
        }
        disagreements += r.disagreements;
    }
    // The targets must really depend on which network picks the action.
    assert!(disagreements > 0);
}

#[test]
fn target_evaluates_main_network_argmax() {
    // With the main and target networks swapped in the argmax, the reference
    // disagrees with the loss; with them as specified it agrees.
    let mut env = grid(3);
    let model = model_for(&env, small());
    let main: ParamStore<f64> = model.init_params(&mut stream(4, Stream::Init));
    let target: ParamStore<f64> = model.init_params(&mut stream(5, Stream::Init));
    let gamma = env.spec().gamma;
    let ep = random_episodes(&mut env, &model, 1, 6).remove(0);
    let (g, _, _) = losses(&model, &main, &target, &[&ep], gamma);
    let right = reference(&model, &main, &target, &ep, gamma);
    assert!(right.disagreements > 0);
    assert!(close(g, right.global, 1e-9));
    // Using target parameters for both roles yields a different target.
    let (same, _, _) = losses(&model, &target, &target, &[&ep], gamma);
    let wrong = reference(&model, &target, &target, &ep, gamma);
    assert!(close(same, wrong.global, 1e-9));
    assert_eq!(wrong.disagreements, 0);
}

#[test]
fn padded_batch_equals_sum_of_episodes() {
    let env = grid(3);
    let model = model_for(&env, small());
    let main: ParamStore<f64> = model.init_params(&mut stream(7, Stream::Init));
    let target: ParamStore<f64> = model.init_params(&mut stream(8, Stream::Init));
    let gamma = env.spec().gamma;
    let mut eps = Vec::new();
    for (i, limit) in [30, 11, 19, 30, 7, 23].into_iter().enumerate() {
        let cfg = CoopGridConfig { episode_limit: limit, ..CoopGridConfig::default() };
        let mut short = Env::CoopGrid(CoopGrid::new(cfg).unwrap());
        eps.extend(random_episodes(&mut short, &model, 1, 9 + i as u64));
    }
    let lens: Vec<usize> = eps.iter().map(|e| e.len).collect();
    assert!(lens.iter().any(|&l| l != lens[0]), "need unequal lengths: {lens:?}");
    let batch: Vec<&Episode> = eps.iter().collect();
    let (g, l, n) = losses(&model, &main, &target, &batch, gamma);
    let (mut g_sum, mut l_sum, mut n_sum) = (0.0, vec![0.0; 3], 0);
    for ep in &eps {
        let (g1, l1, n1) = losses(&model, &main, &target, &[ep], gamma);
        g_sum += g1;
        n_sum += n1;
        for (acc, x) in l_sum.iter_mut().zip(l1) {
            *acc += x;
        }
    }
    assert_eq!(n, n_sum);
    assert!(close(g, g_sum, 1e-6), "{g} vs {g_sum}");
    for (a, b) in l.iter().zip(&l_sum) {
        assert!(close(*a, *b, 1e-6), "{a} vs {b}");
    }
}

/// A random episode in which some agent dies before the end.
fn episode_with_death(env: &mut Env, model: &GraphMix) -> (Episode, usize, usize) {
    for seed in 0..200 {
        for ep in random_episodes(env, model, 10, 100 + seed) {
            for v in 0..ep.n_agents {
                if let Some(t) = (0..ep.len).find(|&t| !ep.alive_at(t)[v]) {
                    if ep.alive_at(t).iter().any(|&a| a) {
                        return (ep, v, t);
                    }
                }
            }
        }
    }
    panic!("no episode with a death");
}

#[test]
fn dead_steps_do_not_contribute() {
    let mut env = grid(3);
    let model = model_for(&env, small());
    let main: ParamStore<f64> = model.init_params(&mut stream(10, Stream::Init));
    let target: ParamStore<f64> = model.init_params(&mut stream(11, Stream::Init));
    let gamma = env.spec().gamma;
    let (ep, v, died) = episode_with_death(&mut env, &model);
    let base = losses(&model, &main, &target, &[&ep], gamma);
    // Scramble everything the dead agent sees after dying.
    let mut changed = ep.clone();
    for t in died..=ep.len {
        let start = (t * ep.n_agents + v) * ep.obs_dim;
        for x in &mut changed.obs[start..start + ep.obs_dim] {
            *x = 7.5 - *x * 3.0;
        }
    }
    let after = losses(&model, &main, &target, &[&changed], gamma);
    assert_eq!(base.0.to_bits(), after.0.to_bits());
    assert_eq!(base.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), after.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    let r = reference(&model, &main, &target, &ep, gamma);
    assert!(close(base.1[v], r.local[v], 1e-9));
}

fn bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.iter().flat_map(|p| p.values().iter().map(|v| v.to_bits())).collect()
}

fn trainer(env: Env, cfg: TrainConfig, seed: u64) -> Trainer {
    let model = model_for(&env, small());
    Trainer::new(model, cfg, env, seed).unwrap()
}

#[test]
fn target_sync_copies_parameters_exactly() {
    let cfg = TrainConfig { batch_size: 2, buffer_size: 10, target_period: 3, ..TrainConfig::default() };
    let mut t = trainer(grid(3), cfg, 12);
    assert_eq!(bits(t.params()), bits(t.target()));
    t.train_episode().unwrap();
    t.train_episode().unwrap();
    assert_ne!(bits(t.params()), bits(t.target()));
    t.train_episode().unwrap();
    assert_eq!(bits(t.params()), bits(t.target()));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = TrainConfig { lr: 0.0, batch_size: 2, buffer_size: 10, ..TrainConfig::default() };
    let mut t = trainer(grid(3), cfg, 13);
    let before = bits(t.params());
    for _ in 0..5 {
        let row = t.train_episode().unwrap();
        assert!(row.episode < 2 || row.losses.is_some());
    }
    assert_eq!(t.counters().updates, 4);
    assert_eq!(bits(t.params()), before);
}

#[test]
fn single_episode_buffer_is_overfit() {
    let cfg = TrainConfig { lr: 5e-3, batch_size: 1, buffer_size: 1, ..TrainConfig::default() };
    let mut t = trainer(grid(3), cfg, 14);
    t.collect_episode(true).unwrap();
    let first = t.train_step().unwrap().loss;
    let mut last = first;
    for _ in 1..50 {
        last = t.train_step().unwrap().loss;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

/// Greedy policy that records the Q-values it acted on.
struct Recording<'a> {
    inner: AgentPolicy<'a, f32>,
    seen: Vec<Vec<f64>>,
}

impl Policy for Recording<'_> {
    fn reset(&mut self, n_agents: usize) -> Result<(), Error> {
        self.inner.reset(n_agents)
    }

    fn act(&mut self, step: &StepResult, rng: &mut Rng) -> Result<Vec<usize>, Error> {
        let a = self.inner.act(step, rng)?;
        self.seen.push(self.inner.last_q_values().to_vec());
        Ok(a)
    }
}

#[test]
fn rollout_matches_batched_unroll_bit_for_bit() {
    let mut env = grid(3);
    let model = model_for(&env, small());
    let params: ParamStore<f32> = model.init_params(&mut stream(15, Stream::Init));
    let mut policy = Recording { inner: AgentPolicy::new(&model, &params, 0.3), seen: Vec::new() };
    let ep = rollout_episode(&mut env, &mut policy, 16, &mut stream(16, Stream::Explore)).unwrap();
    assert_eq!(policy.seen.len(), ep.len);

    let layout = model.input_layout();
    let m = ep.n_agents;
    let inputs: Vec<Vec<f64>> =
        (0..ep.len).map(|t| layout.rows(ep.obs_at(t), if t > 0 { Some(ep.actions_at(t - 1)) } else { None }, m).unwrap()).collect();
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, &params, true).unwrap();
    let (qs, _) = unroll(&mut tape, &vars.agent, &inputs, &vec![m; ep.len], model.config().agent_hidden).unwrap();
    for (t, q) in qs.iter().enumerate() {
        let batched: Vec<u64> = tape.value(*q).data().iter().map(|v| v.to_f64_lossless().to_bits()).collect();
        let online: Vec<u64> = policy.seen[t].iter().map(|v| v.to_bits()).collect();
        assert_eq!(batched, online, "step {t}");
    }
}

#[test]
fn evaluation_is_deterministic_given_seed() {
    let cfg = TrainConfig { eval_episodes: 8, ..TrainConfig::default() };
    let mut t = trainer(grid(3), cfg, 17);
    let a = t.evaluate().unwrap();
    let b = t.evaluate().unwrap();
    assert_eq!(a, b);
    let mut env = grid(3);
    let c = evaluate(&mut env, t.model(), t.params(), 8, 17).unwrap();
    assert_eq!(a, c);
    assert_eq!(t.counters().env_steps, 0);
}

#[test]
fn untrained_success_is_near_random_baseline() {
    let mut env = grid(3);
    let model = model_for(&env, small());
    let zero: ParamStore<f64> = model.zero_params();
    let n = 400;
    let greedy = evaluate(&mut env, &model, &zero, n, 18).unwrap().success_rate;
    let mut random = AgentPolicy::new(&model, &zero, 1.0);
    let baseline = evaluate_policy(&mut env, &mut random, n, 18).unwrap().success_rate;
    // Allow four binomial standard errors of the baseline estimate plus 0.05.
    let tol = 4.0 * (baseline * (1.0 - baseline) / n as f64).sqrt() + 0.05;
    assert!((greedy - baseline).abs() <= tol, "greedy {greedy} vs random {baseline}");
    assert!(baseline < 0.2, "task should be hard for random play: {baseline}");
}

/// Plays a fixed joint action per step.
struct Scripted(Vec<[usize; 2]>, usize);

impl Policy for Scripted {
    fn reset(&mut self, _: usize) -> Result<(), Error> {
        self.1 = 0;
        Ok(())
    }

    fn act(&mut self, _: &StepResult, _: &mut Rng) -> Result<Vec<usize>, Error> {
        self.1 += 1;
        Ok(self.0[self.1 - 1].to_vec())
    }
}

#[test]
fn scripted_optimum_reaches_oracle_on_two_step() {
    let cfg = TwoStepConfig::default();
    let mut best = (f64::NEG_INFINITY, [0, 0], [0, 0]);
    for (a0, row) in cfg.selection.iter().enumerate() {
        for (a1, &r0) in row.iter().enumerate() {
            let phase = if a0 == 0 { &cfg.phase_a } else { &cfg.phase_b };
            for (b0, prow) in phase.iter().enumerate() {
                for (b1, &r1) in prow.iter().enumerate() {
                    let v = r0 + cfg.gamma * r1;
                    if v > best.0 {
                        best = (v, [a0, a1], [b0, b1]);
                    }
                }
            }
        }
    }
    let game = TwoStep::new(cfg).unwrap();
    let oracle = brute_force_optimal_return(&game).unwrap();
    assert!(close(oracle.value, best.0, 1e-12));
    let mut env = Env::TwoStep(game);
    let stats = evaluate_policy(&mut env, &mut Scripted(vec![best.1, best.2], 0), 5, 19).unwrap();
    assert!(close(stats.mean_return, oracle.value, 1e-12));
}

#[test]
fn random_two_step_episodes_last_two_steps() {
    let mut env = two_step();
    let model = model_for(&env, small());
    for ep in random_episodes(&mut env, &model, 20, 20) {
        assert_eq!(ep.len, 2);
        assert_eq!(ep.terminal, [false, true]);
    }
}

#[test]
fn zero_step_finetune_is_direct_transfer() {
    let cfg = TrainConfig { batch_size: 2, buffer_size: 10, eval_episodes: 6, ..TrainConfig::default() };
    let mut t = trainer(grid(3), cfg.clone(), 21);
    for _ in 0..3 {
        t.train_episode().unwrap();
    }
    let env5 = grid(5);
    let model = t.model().clone();
    let (tuned, report) =
        finetune(model.clone(), t.params().clone(), env5, TrainConfig { total_steps: 0, ..cfg }, 21, &mut NoObserver).unwrap();
    assert_eq!(report.before, report.after);
    assert_eq!(bits(tuned.params()), bits(t.params()));
    let direct = evaluate(&mut grid(5), &model, t.params(), 6, 21).unwrap();
    assert_eq!(direct, report.before);
}

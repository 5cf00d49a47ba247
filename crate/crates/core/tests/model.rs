use graphmix_core::diff::{ParamStore, Tape, Tensor};
use graphmix_core::mixer::{self, LayerBlocks, MixerVariant};
use graphmix_core::model::{GraphMix, ModelConfig, ModelDims};
use graphmix_core::rng::{stream, Stream};
use proptest::prelude::*;

const DIMS: ModelDims = ModelDims { obs_dim: 5, n_actions: 3, state_dim: 4 };

fn model(variant: MixerVariant, layers: usize) -> GraphMix {
    let cfg = ModelConfig {
        agent_hidden: 6,
        attn_dim: 4,
        mixer: variant,
        gnn_layers: layers,
        gnn_width: 5,
        gin_hidden: 4,
        hyper_hidden: 7,
        ..ModelConfig::default()
    };
    GraphMix::new(cfg, DIMS).unwrap()
}

/// Edge weights `[1, M, M]` from hidden states `[M, D]`.
fn edges(model: &GraphMix, params: &ParamStore<f64>, hidden: &[f64], alive: &[bool]) -> Tensor<f64> {
    let m = alive.len();
    let mut tape = Tape::<f64>::new();
    let vars = model.bind(&mut tape, params, true).unwrap();
    let h = tape.constant(Tensor::from_f64(&[1, m, hidden.len() / m], hidden).unwrap()).unwrap();
    let e = model.edges(&mut tape, &vars, h, alive).unwrap();
    tape.value(e).clone()
}

fn permute<T: Copy>(values: &[T], perm: &[usize], width: usize) -> Vec<T> {
    perm.iter().flat_map(|&p| values[p * width..(p + 1) * width].iter().copied()).collect()
}

#[derive(Debug)]
struct Draw {
    m: usize,
    seed: u64,
    q: Vec<f64>,
    hidden: Vec<f64>,
    state: Vec<f64>,
    alive: Vec<bool>,
    perm: Vec<usize>,
}

fn draw() -> impl Strategy<Value = Draw> {
    (1usize..6, any::<u64>()).prop_flat_map(|(m, seed)| {
        (
            prop::collection::vec(-3.0f64..3.0, m),
            prop::collection::vec(-1.0f64..1.0, m * 6),
            prop::collection::vec(-1.0f64..1.0, 4),
            prop::collection::vec(any::<bool>(), m),
            Just((0..m).collect::<Vec<usize>>()).prop_shuffle(),
        )
            .prop_map(move |(q, hidden, state, mut alive, perm)| {
                alive[0] = true;
                Draw { m, seed, q, hidden, state, alive, perm }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabelling_agents_permutes_outputs(d in draw(), variant in prop::sample::select(vec![MixerVariant::Gin, MixerVariant::Gcn])) {
        let model = model(variant, 2);
        let params: ParamStore<f64> = model.init_params(&mut stream(d.seed, Stream::Init));
        let e = edges(&model, &params, &d.hidden, &d.alive);
        let base = model.q_tot(&params, &d.q, &e, &d.state, &d.alive).unwrap();

        let (q, alive) = (permute(&d.q, &d.perm, 1), permute(&d.alive, &d.perm, 1));
        let pe = edges(&model, &params, &permute(&d.hidden, &d.perm, 6), &alive);
        for (i, &pi) in d.perm.iter().enumerate() {
            for (j, &pj) in d.perm.iter().enumerate() {
                let (a, b) = (pe.data()[i * d.m + j], e.data()[pi * d.m + pj]);
                prop_assert!((a - b).abs() <= 1e-12, "edge ({i},{j})");
            }
        }
        let moved = model.q_tot(&params, &q, &pe, &d.state, &alive).unwrap();
        prop_assert!((moved.q_tot - base.q_tot).abs() <= 1e-9 * (1.0 + base.q_tot.abs()));
        let expect = permute(&base.alpha, &d.perm, 1);
        for (a, b) in moved.alpha.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let width = base.node_embeddings.len() / d.m;
        let expect = permute(&base.node_embeddings, &d.perm, width);
        for (a, b) in moved.node_embeddings.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn greedy_joint_action_survives_positive_affine_maps(
        d in draw(),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
        avail in prop::collection::vec(any::<bool>(), 15),
    ) {
        let model = model(MixerVariant::Gin, 1);
        let params: ParamStore<f64> = model.init_params(&mut stream(d.seed, Stream::Init));
        let e = edges(&model, &params, &d.hidden, &d.alive);
        let n = DIMS.n_actions;
        let q: Vec<f64> = (0..d.m * n).map(|i| d.hidden[i % d.hidden.len()] * 3.0).collect();
        let mut avail = avail[..d.m * n].to_vec();
        for v in 0..d.m {
            avail[v * n] = true;
        }
        let (_, actions) = model.joint_greedy_value(&params, &q, &e, &d.state, &d.alive, &avail).unwrap();
        let mapped: Vec<f64> = q.iter().map(|x| scale * x + shift).collect();
        let (_, again) = model.joint_greedy_value(&params, &mapped, &e, &d.state, &d.alive, &avail).unwrap();
        prop_assert_eq!(actions, again);
    }

    #[test]
    fn generated_mixing_weights_are_non_negative(
        seed in any::<u64>(),
        state in prop::collection::vec(-5.0f64..5.0, 12),
        variant in prop::sample::select(vec![MixerVariant::Gin, MixerVariant::Gcn]),
    ) {
        let model = model(variant, 2);
        let params: ParamStore<f64> = model.init_params(&mut stream(seed, Stream::Init));
        let mut tape = Tape::<f64>::new();
        let vars = model.bind(&mut tape, &params, true).unwrap();
        let s = tape.constant(Tensor::from_f64(&[3, 4], &state).unwrap()).unwrap();
        let blocks = mixer::eval_hypernets(&mut tape, model.arch(), &vars.hyper, s).unwrap();
        let mut weights = vec![blocks.w_plus.unwrap()];
        for layer in &blocks.layers {
            match *layer {
                LayerBlocks::Gin { w1, w2, .. } => weights.extend([w1, w2]),
                LayerBlocks::Gcn { w, .. } => weights.push(w),
            }
        }
        prop_assert_eq!(weights.len(), if variant == MixerVariant::Gin { 5 } else { 3 });
        for w in weights {
            prop_assert!(tape.value(w).data().iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn zero_parameters_give_zero_values() {
    for variant in [MixerVariant::Gin, MixerVariant::Gcn] {
        let model = model(variant, 2);
        let params: ParamStore<f64> = model.zero_params();
        let alive = [true, false, true, true];
        let hidden: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let e = edges(&model, &params, &hidden, &alive);
        let out = model.q_tot(&params, &[1.0, -2.0, 0.5, 4.0], &e, &[0.3, -0.1, 0.9, 2.0], &alive).unwrap();
        assert_eq!(out.q_tot, 0.0, "{variant:?}");

        let mut tape = Tape::<f64>::new();
        let vars = model.bind(&mut tape, &params, true).unwrap();
        let x = tape.constant(Tensor::full(&[4, model.input_layout().width()], 0.7)).unwrap();
        let h = tape.constant(Tensor::full(&[4, 6], 0.2)).unwrap();
        let (q, _) = graphmix_core::agent::agent_forward(&mut tape, &vars.agent, x, h).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }
}

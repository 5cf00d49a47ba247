//! Every differentiable op checked against double-double central
//! differences on random shapes and values.

use graphmix_core::diff::{
    gru_cell, linear, reference_diff_check, DiffError, GruWeights, Objective, ParamStore, ParamTensor, Scalar, Tape, Tensor, Var,
};
use proptest::prelude::*;

#[derive(Clone, Copy, Debug)]
enum Op {
    MatMul,
    MatMulSharedLeft,
    MatMulBatched,
    Add,
    AddRow,
    SubCol,
    MulScalar,
    SqDiffRow,
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Abs,
    Exp,
    Affine,
    Sum0,
    Sum1,
    Mean1,
    SumAll,
    Concat0,
    Concat1,
    Narrow,
    IndexSelect,
    GatherLast,
    MaskedSoftmax,
    Reshape,
    Transpose,
    Linear,
    Gru,
}

const OPS: [Op; 29] = [
    Op::MatMul,
    Op::MatMulSharedLeft,
    Op::MatMulBatched,
    Op::Add,
    Op::AddRow,
    Op::SubCol,
    Op::MulScalar,
    Op::SqDiffRow,
    Op::Relu,
    Op::Elu,
    Op::Tanh,
    Op::Sigmoid,
    Op::Abs,
    Op::Exp,
    Op::Affine,
    Op::Sum0,
    Op::Sum1,
    Op::Mean1,
    Op::SumAll,
    Op::Concat0,
    Op::Concat1,
    Op::Narrow,
    Op::IndexSelect,
    Op::GatherLast,
    Op::MaskedSoftmax,
    Op::Reshape,
    Op::Transpose,
    Op::Linear,
    Op::Gru,
];

#[derive(Debug)]
struct Case {
    op: Op,
    m: usize,
    n: usize,
    k: usize,
    picks: Vec<usize>,
    mask: Vec<bool>,
}

impl Case {
    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (m, n, k) = (self.m, self.n, self.k);
        match self.op {
            Op::MatMul => vec![("a", vec![m, k]), ("b", vec![k, n])],
            Op::MatMulSharedLeft => vec![("a", vec![m, k]), ("b", vec![2, k, n])],
            Op::MatMulBatched => vec![("a", vec![2, m, k]), ("b", vec![2, k, n])],
            Op::Add => vec![("a", vec![m, n]), ("b", vec![m, n])],
            Op::AddRow | Op::SqDiffRow => vec![("a", vec![m, n]), ("b", vec![n])],
            Op::SubCol => vec![("a", vec![m, n]), ("b", vec![m, 1])],
            Op::MulScalar => vec![("a", vec![m, n]), ("b", vec![1])],
            Op::Concat0 => vec![("a", vec![m, n]), ("b", vec![k, n])],
            Op::Concat1 => vec![("a", vec![m, n]), ("b", vec![m, k])],
            Op::Narrow => vec![("a", vec![m, n + 2])],
            Op::Linear => vec![("x", vec![m, k]), ("w", vec![k, n]), ("b", vec![n])],
            Op::Gru => vec![
                ("x", vec![m, k]),
                ("h", vec![m, n]),
                ("w_ih", vec![k, 3 * n]),
                ("w_hh", vec![n, 3 * n]),
                ("b_ih", vec![3 * n]),
                ("b_hh", vec![3 * n]),
            ],
            _ => vec![("a", vec![m, n])],
        }
    }

    fn store(&self, pool: &[f64]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut next = 0;
        for (name, shape) in self.shapes() {
            let len: usize = shape.iter().product();
            let values = (0..len).map(|i| pool[(next + i) % pool.len()]).collect();
            next += len;
            store.insert(ParamTensor::new(name, shape, values).unwrap()).unwrap();
        }
        store
    }
}

impl Objective for Case {
    type Error = DiffError;

    fn build<T: Scalar>(&mut self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var, DiffError> {
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect::<Result<_, _>>()?;
        let (a, b) = (vars[0], vars.get(1).copied().unwrap_or(vars[0]));
        let out = match self.op {
            Op::MatMul | Op::MatMulSharedLeft | Op::MatMulBatched => tape.matmul(a, b)?,
            Op::Add | Op::AddRow => tape.add(a, b)?,
            Op::SubCol => tape.sub(a, b)?,
            Op::MulScalar => tape.mul(a, b)?,
            Op::SqDiffRow => tape.sq_diff(a, b)?,
            Op::Relu => tape.relu(a)?,
            Op::Elu => tape.elu(a)?,
            Op::Tanh => tape.tanh(a)?,
            Op::Sigmoid => tape.sigmoid(a)?,
            Op::Abs => tape.abs(a)?,
            Op::Exp => tape.exp(a)?,
            Op::Affine => tape.affine(a, T::from_f64_lossy(1.75), T::from_f64_lossy(-0.25))?,
            Op::Sum0 => tape.sum(a, 0)?,
            Op::Sum1 => tape.sum(a, 1)?,
            Op::Mean1 => tape.mean(a, 1)?,
            Op::SumAll => tape.sum_all(a)?,
            Op::Concat0 => tape.concat(&[a, b], 0)?,
            Op::Concat1 => tape.concat(&[a, b], 1)?,
            Op::Narrow => tape.narrow(a, 1, 1, self.n)?,
            Op::IndexSelect => tape.index_select(a, &self.picks)?,
            Op::GatherLast => {
                let idx: Vec<usize> = (0..self.m).map(|i| self.picks[i % self.picks.len()] % self.n).collect();
                tape.gather_last(a, &idx)?
            }
            Op::MaskedSoftmax => tape.masked_softmax(a, 1, &self.mask)?,
            Op::Reshape => tape.reshape(a, &[self.m * self.n])?,
            Op::Transpose => tape.transpose(a)?,
            Op::Linear => linear(tape, vars[0], vars[1], vars[2])?,
            Op::Gru => {
                let w = GruWeights { w_ih: vars[2], w_hh: vars[3], b_ih: vars[4], b_hh: vars[5] };
                gru_cell(tape, vars[0], vars[1], &w)?
            }
        };
        // A fixed non-uniform weighting so each output entry matters differently.
        let shape = tape.shape(out).to_vec();
        let len: usize = shape.iter().product();
        let w: Vec<f64> = (0..len).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let w = tape.constant(Tensor::new(shape, w.into_iter().map(T::from_f64_lossy).collect())?)?;
        let y = tape.mul(out, w)?;
        tape.sum_all(y)
    }
}

fn case() -> impl Strategy<Value = (Case, Vec<f64>)> {
    (
        0..OPS.len(),
        1usize..4,
        1usize..4,
        1usize..4,
        prop::collection::vec(0usize..3, 1..5),
        prop::collection::vec(any::<bool>(), 36),
        prop::collection::vec(-2.0f64..2.0, 64),
    )
        .prop_map(|(op, m, n, k, picks, mask, pool)| {
            let picks = picks.into_iter().map(|p| p % m).collect();
            let mask = mask[..m * n].to_vec();
            (Case { op: OPS[op], m, n, k, picks, mask }, pool)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn op_gradients_match_reference_differences((mut case, pool) in case()) {
        let params = case.store(&pool);
        let report = reference_diff_check(&mut case, &params, 1e-6).unwrap();
        prop_assert!(report.max_rel_error <= 1e-8, "{:?}: {:?}", case, report);
        prop_assert_eq!(report.checked + report.at_kinks, params.num_values());
    }

    #[test]
    fn masked_softmax_is_a_distribution_over_the_mask(
        rows in 1usize..5,
        cols in 1usize..6,
        values in prop::collection::vec(-30.0f64..30.0, 30),
        mask in prop::collection::vec(any::<bool>(), 30),
    ) {
        let n = rows * cols;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], values[..n].to_vec()).unwrap()).unwrap();
        let mask = &mask[..n];
        let y = tape.masked_softmax(x, 1, mask).unwrap();
        let out = tape.value(y).data();
        for r in 0..rows {
            let lane = r * cols..(r + 1) * cols;
            let total: f64 = out[lane.clone()].iter().sum();
            let any = mask[lane.clone()].iter().any(|&m| m);
            let expected = if any { 1.0 } else { 0.0 };
            prop_assert!((total - expected).abs() <= 1e-12);
            for i in lane {
                if !mask[i] {
                    prop_assert_eq!(out[i], 0.0);
                } else {
                    prop_assert!(out[i] >= 0.0);
                }
            }
        }
    }
}

#[test]
fn every_op_kind_is_covered() {
    // One case per op on fixed shapes, so a broken op fails deterministically.
    let pool: Vec<f64> = (0..64).map(|i| ((i * 37 % 29) as f64 - 14.0) / 7.0 + 0.013).collect();
    for op in OPS {
        let mut case = Case { op, m: 2, n: 3, k: 2, picks: vec![1, 0, 1], mask: vec![true, false, true, false, false, false] };
        let params = case.store(&pool);
        let report = reference_diff_check(&mut case, &params, 1e-6).unwrap();
        assert!(report.max_rel_error <= 1e-8, "{op:?}: {report:?}");
        assert!(report.checked > 0, "{op:?}");
    }
}

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vesselseg::tensor::gradcheck::{grad_check, GradCheckOptions, ScalarGraph};
use vesselseg::tensor::kernels::{self, BatchNormState, RunningStats};
use vesselseg::{Error, Mode, Result, Scalar, Tape, Tensor, Var};

fn t(dims: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(dims, data.to_vec()).unwrap()
}

fn bias(v: &[f32]) -> Tensor<f32> {
    t(&[v.len()], v)
}

#[test]
fn conv2d_ones_kernel_counts_neighbours() {
    let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
    let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
    let y = kernels::conv2d(&x, &w, &bias(&[0.0])).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    assert_eq!(y.data(), conv2d_naive(&x, &w, &[0.0]).as_slice());
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 3, 5, 7]);
    let mut w = Tensor::<f32>::zeros(&[3, 3, 3, 3]).unwrap();
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let y = kernels::conv2d(&x, &w, &bias(&[0.0; 3])).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv2d_zero_input_gives_bias() {
    let mut r = rng(2);
    let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
    let w = random_tensor(&mut r, &[3, 2, 3, 3]);
    let y = kernels::conv2d(&x, &w, &bias(&[0.5, -1.0, 2.0])).unwrap();
    for (k, b) in [0.5, -1.0, 2.0].into_iter().enumerate() {
        assert!(y.data()[k * 16..(k + 1) * 16].iter().all(|&v| v == b));
    }
}

#[test]
fn conv2d_shape_mismatch_names_both_shapes() {
    let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
    let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
    let err = kernels::conv2d(&x, &w, &bias(&[0.0])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
}

#[test]
fn relu_examples() {
    let y = kernels::relu(&t(&[3], &[-1.0, 0.0, 2.5]));
    assert_eq!(y.data(), &[0.0, 0.0, 2.5]);
    assert!(kernels::relu(&t(&[2], &[-3.0, -0.1])).data().iter().all(|&v| v == 0.0));
    assert_eq!(kernels::relu(&t(&[2], &[3.0, 0.1])).data(), &[3.0, 0.1]);
}

#[test]
fn batchnorm_examples() {
    // constant input normalizes to zero
    let x = Tensor::<f32>::full(&[2, 1, 2, 2], 3.0).unwrap();
    let mut st = BatchNormState::<f32>::new(1);
    let y = kernels::batchnorm2d(&x, &mut st, Mode::Train).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    // {0, 2} -> {-1, +1} as eps -> 0
    let x = t(&[1, 1, 1, 2], &[0.0, 2.0]);
    let mut st = BatchNormState::<f32>::new(1);
    st.stats.eps = 1e-12;
    let y = kernels::batchnorm2d(&x, &mut st, Mode::Train).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);
    // running stats: 0.9 * 0 + 0.1 * 1, 0.9 * 1 + 0.1 * 1
    assert!((st.stats.mean[0] - 0.1).abs() < 1e-7);
    assert!((st.stats.var[0] - 1.0).abs() < 1e-7);

    // gamma = 0 -> beta everywhere
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[2, 2, 3, 3]);
    let mut st = BatchNormState::<f32>::new(2);
    st.gamma = vec![0.0, 0.0];
    st.beta = vec![0.25, -4.0];
    let y = kernels::batchnorm2d(&x, &mut st, Mode::Train).unwrap();
    for (i, &v) in y.data().iter().enumerate() {
        let channel = (i / 9) % 2;
        assert_eq!(v, [0.25, -4.0][channel]);
    }
}

#[test]
fn batchnorm_single_sample_is_degenerate() {
    let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]).unwrap();
    let mut st = BatchNormState::<f32>::new(2);
    assert!(matches!(
        kernels::batchnorm2d(&x, &mut st, Mode::Train),
        Err(Error::DegenerateBatch(1))
    ));
    // eval mode has no such restriction
    assert!(kernels::batchnorm2d(&x, &mut st, Mode::Eval).is_ok());
}

#[test]
fn batchnorm_eval_leaves_running_stats_alone() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[2, 3, 4, 4]);
    let mut st = BatchNormState::<f32>::new(3);
    st.stats.mean = vec![0.1, 0.2, 0.3];
    let before = st.clone();
    kernels::batchnorm2d(&x, &mut st, Mode::Eval).unwrap();
    assert_eq!(st, before);
}

#[test]
fn batchnorm_train_output_is_standardized() {
    let mut r = rng(5);
    let x = Tensor::from_fn(&[4, 3, 4, 4], |_| r.random_range(-3.0f32..5.0)).unwrap();
    let mut st = BatchNormState::<f32>::new(3);
    st.beta = vec![0.5, -1.0, 2.0];
    let y = kernels::batchnorm2d(&x, &mut st, Mode::Train).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y.data()[(n * 3 + c) * 16..][..16].to_vec())
            .map(|v| v as f64)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((m - st.beta[c] as f64).abs() < 1e-4, "mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "var {v}");
    }
}

#[test]
fn maxpool_examples() {
    let (y, _) = kernels::maxpool2x2(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[4.0]);

    let ramp = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32).unwrap();
    let (y, _) = kernels::maxpool2x2(&ramp).unwrap();
    assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);

    assert!(matches!(
        kernels::maxpool2x2(&Tensor::<f32>::zeros(&[1, 1, 3, 4]).unwrap()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn maxpool_tie_routes_gradient_to_first_element() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 7.0).unwrap());
    let p = tape.maxpool2x2(x).unwrap();
    assert_eq!(tape.value(p).data(), &[7.0]);
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn conv_transpose_examples() {
    let ones = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0).unwrap();
    let y = kernels::conv_transpose2d(&t(&[1, 1, 1, 1], &[3.5]), &ones, &bias(&[0.0])).unwrap();
    assert_eq!(y.dims(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[3.5; 4]);

    let mut r = rng(6);
    let w = random_tensor(&mut r, &[2, 3, 2, 2]);
    let y = kernels::conv_transpose2d(&Tensor::zeros(&[1, 2, 3, 3]).unwrap(), &w, &bias(&[1.0, 2.0, 3.0])).unwrap();
    assert_eq!(y.dims(), &[1, 3, 6, 6]);
    assert!(y.data()[36..72].iter().all(|&v| v == 2.0));

    let x = random_tensor(&mut r, &[1, 2, 3, 3]);
    let y = kernels::conv_transpose2d(&x, &Tensor::zeros(&[2, 1, 2, 2]).unwrap(), &bias(&[0.0])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    assert!(kernels::conv_transpose2d(&x, &Tensor::zeros(&[3, 1, 2, 2]).unwrap(), &bias(&[0.0])).is_err());
}

#[test]
fn concat_examples() {
    let mut r = rng(7);
    let a = random_tensor(&mut r, &[1, 2, 4, 4]);
    let b = random_tensor(&mut r, &[1, 3, 4, 4]);
    let y = kernels::concat_channels(&a, &b).unwrap();
    assert_eq!(y.dims(), &[1, 5, 4, 4]);
    assert_eq!(&y.data()[2 * 16..3 * 16], &b.data()[..16]);
    assert_eq!(&y.data()[..32], a.data());
    assert!(kernels::concat_channels(&a, &random_tensor(&mut r, &[1, 3, 4, 2])).is_err());
    assert!(Tensor::<f32>::zeros(&[1, 0, 4, 4]).is_err());
}

#[test]
fn conv1x1_examples() {
    let mut r = rng(8);
    let x = random_tensor(&mut r, &[1, 1, 3, 3]);
    let y = kernels::conv1x1(&x, &t(&[1, 1, 1, 1], &[1.0]), &bias(&[0.0])).unwrap();
    assert_eq!(y.data(), x.data());

    let x2 = random_tensor(&mut r, &[1, 2, 2, 2]);
    let y = kernels::conv1x1(&x2, &t(&[1, 2, 1, 1], &[1.0, 1.0]), &bias(&[0.0])).unwrap();
    for p in 0..4 {
        assert_eq!(y.data()[p], x2.data()[p] + x2.data()[4 + p]);
    }

    let y = kernels::conv1x1(&x2, &t(&[1, 2, 1, 1], &[0.0, 0.0]), &bias(&[0.75])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.75));
}

#[test]
fn sigmoid_saturates_without_nan() {
    let y = kernels::sigmoid(&t(&[3], &[0.0, 100.0, -100.0]));
    assert_eq!(y.data()[0], 0.5);
    assert!((y.data()[1] - 1.0).abs() < 1e-7);
    assert!(y.data()[2].abs() < 1e-7 && y.data()[2] >= 0.0);
    let y64 = kernels::sigmoid(&Tensor::<f64>::new(&[2], vec![1000.0, -1000.0]).unwrap());
    assert!(y64.all_finite());
}

#[test]
fn dropout_identity_cases_and_bad_p() {
    let mut r = rng(9);
    let x = random_tensor(&mut r, &[2, 3, 2, 2]);
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(kernels::dropout2d(&x, 0.0, mode, &mut r).unwrap(), x);
    }
    assert_eq!(kernels::dropout2d(&x, 0.9, Mode::Eval, &mut r).unwrap(), x);
    assert!(matches!(kernels::dropout2d(&x, 1.0, Mode::Train, &mut r), Err(Error::Parameter(_))));
    assert!(kernels::dropout2d(&x, -0.1, Mode::Train, &mut r).is_err());
}

#[test]
fn dropout_is_unbiased_monte_carlo() {
    let mut r = rng(10);
    let x = t(&[1, 1, 1, 1], &[1.5]);
    let trials = 10_000;
    let mean = (0..trials)
        .map(|_| kernels::dropout2d(&x, 0.5, Mode::Train, &mut r).unwrap().data()[0] as f64)
        .sum::<f64>()
        / trials as f64;
    // per-trial std is 1.5 at p = 0.5
    let sigma = 1.5 / (trials as f64).sqrt();
    assert!((mean - 1.5).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn dropout_drops_whole_channels() {
    let mut r = rng(11);
    let x = Tensor::<f32>::full(&[4, 8, 3, 3], 1.0).unwrap();
    let y = kernels::dropout2d(&x, 0.5, Mode::Train, &mut r).unwrap();
    for ch in y.data().chunks(9) {
        assert!(ch.iter().all(|&v| v == ch[0]));
        assert!(ch[0] == 0.0 || ch[0] == 2.0);
    }
}

// ---------------------------------------------------------------------------
// oracle equivalence over random shapes

fn random_dims(r: &mut impl Rng, even: bool) -> [usize; 4] {
    let mut hw = [r.random_range(1..=16), r.random_range(1..=16)];
    if even {
        hw = hw.map(|v: usize| v.div_ceil(2) * 2);
    }
    [r.random_range(1..=2), r.random_range(1..=4), hw[0], hw[1]]
}

#[test]
fn kernels_match_naive_oracles() {
    let mut r = rng(12);
    for _ in 0..100 {
        let [n, c, h, w] = random_dims(&mut r, false);
        let k = r.random_range(1..=4);
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let w3 = random_tensor(&mut r, &[k, c, 3, 3]);
        let wt = random_tensor(&mut r, &[c, k, 2, 2]);
        let w1 = random_tensor(&mut r, &[k, c, 1, 1]);
        let b = random_tensor(&mut r, &[k]);
        assert_eq!(
            kernels::conv2d(&x, &w3, &b).unwrap().data(),
            conv2d_naive(&x, &w3, b.data()).as_slice()
        );
        assert_eq!(
            kernels::conv_transpose2d(&x, &wt, &b).unwrap().data(),
            conv_transpose2d_naive(&x, &wt, b.data()).as_slice()
        );
        assert_eq!(
            kernels::conv1x1(&x, &w1, &b).unwrap().data(),
            conv1x1_naive(&x, &w1, b.data()).as_slice()
        );
        let [n, c, h, w] = random_dims(&mut r, true);
        // coarse values make ties common
        let xp = Tensor::from_fn(&[n, c, h, w], |_| r.random_range(0..4) as f32).unwrap();
        let (y, arg) = kernels::maxpool2x2(&xp).unwrap();
        let (ny, narg) = maxpool_naive(&xp);
        assert_eq!(y.data(), ny.as_slice());
        assert_eq!(arg, narg);
    }
}

#[test]
fn pooling_and_upsampling_shapes_compose() {
    let mut r = rng(13);
    let x = random_tensor(&mut r, &[2, 3, 8, 6]);
    let (p, _) = kernels::maxpool2x2(&x).unwrap();
    assert_eq!(p.dims(), &[2, 3, 4, 3]);
    let u = kernels::conv_transpose2d(&p, &random_tensor(&mut r, &[3, 3, 2, 2]), &random_tensor(&mut r, &[3])).unwrap();
    assert_eq!(u.dims(), x.dims());
    let c = kernels::conv2d(&u, &random_tensor(&mut r, &[5, 3, 3, 3]), &random_tensor(&mut r, &[5])).unwrap();
    assert_eq!(c.dims(), &[2, 5, 8, 6]);
}

#[test]
fn kernels_are_deterministic_across_thread_counts() {
    let mut r = rng(14);
    let x = random_tensor(&mut r, &[2, 4, 16, 16]);
    let w = random_tensor(&mut r, &[4, 4, 3, 3]);
    let b = random_tensor(&mut r, &[4]);
    let gy = random_tensor(&mut r, &[2, 4, 16, 16]);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let y = kernels::conv2d(&x, &w, &b).unwrap();
            let (gx, gw, gb) = kernels::conv2d_backward(&x, &w, &gy).unwrap();
            (y, gx, gw, gb)
        })
    };
    let a = run(1);
    let b2 = run(4);
    assert!(a.0.data().iter().zip(b2.0.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.data().iter().zip(b2.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.2.data().iter().zip(b2.2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(a.3, b2.3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pointwise_ranges(vals in proptest::collection::vec(-50.0f32..50.0, 1..64)) {
        let x = Tensor::new(&[vals.len()], vals).unwrap();
        prop_assert!(kernels::relu(&x).data().iter().all(|&v| v >= 0.0));
        // f32 saturates to exactly 0 or 1 far out; interior values stay open
        prop_assert!(kernels::sigmoid(&x).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let x64 = Tensor::new(&[x.numel()], x.data().iter().map(|&v| v as f64 * 0.5).collect()).unwrap();
        prop_assert!(kernels::sigmoid(&x64).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv_preserves_spatial_extent(n in 1usize..3, c in 1usize..4, h in 1usize..12, w in 1usize..12, k in 1usize..4) {
        let mut r = rng((n * 1000 + c * 100 + h * 10 + w) as u64);
        let x = random_tensor(&mut r, &[n, c, h, w]);
        let y = kernels::conv2d(&x, &random_tensor(&mut r, &[k, c, 3, 3]), &random_tensor(&mut r, &[k])).unwrap();
        prop_assert_eq!(y.dims(), &[n, k, h, w]);
    }
}

// ---------------------------------------------------------------------------
// gradient checks against central differences

struct ConvReluSum;
impl ScalarGraph for ConvReluSum {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = tape.conv2d(v[0], v[1], v[2])?;
        let y = tape.relu(y);
        Ok(tape.sum(y))
    }
}

struct BatchNormGraph {
    weights: Tensor<f64>,
}
impl ScalarGraph for BatchNormGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let mut stats = RunningStats::<T>::new(tape.value(v[1]).numel());
        let y = tape.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Train)?;
        tape.weighted_sum(y, &self.weights.cast())
    }
}

struct LinearGraph;
impl ScalarGraph for LinearGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = tape.conv1x1(v[0], v[1], v[2])?;
        Ok(tape.sum(y))
    }
}

#[test]
fn gradcheck_conv_relu_sum() {
    let mut r = rng(20);
    let probes = vec![
        random_tensor64(&mut r, &[1, 3, 8, 8]),
        random_tensor64(&mut r, &[2, 3, 3, 3]),
        random_tensor64(&mut r, &[2]),
    ];
    let rep = grad_check::<f32, _>(&ConvReluSum, &probes, &GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn gradcheck_batchnorm_train() {
    let mut r = rng(21);
    let graph = BatchNormGraph {
        weights: random_tensor64(&mut r, &[2, 3, 4, 4]),
    };
    let probes = vec![
        random_tensor64(&mut r, &[2, 3, 4, 4]),
        Tensor::from_fn(&[3], |_| r.random_range(0.5..1.5)).unwrap(),
        random_tensor64(&mut r, &[3]),
    ];
    let rep = grad_check::<f32, _>(&graph, &probes, &GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn gradcheck_linear_graph_hits_float_floor() {
    let mut r = rng(22);
    let probes = vec![
        random_tensor64(&mut r, &[1, 3, 4, 4]),
        random_tensor64(&mut r, &[2, 3, 1, 1]),
        random_tensor64(&mut r, &[2]),
    ];
    let rep = grad_check::<f32, _>(&LinearGraph, &probes, &GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_error < 1e-5, "{rep:?}");
}

#[test]
fn backward_example_gradients() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

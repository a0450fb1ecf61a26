mod common;

use approx::assert_abs_diff_eq;
use common::{rand_tensor, rng};
use finsep_numcore::kernels::{self, conv1d_len, conv_transpose1d_len};
use finsep_numcore::layers::BiLstm;
use finsep_numcore::{
    init_rng, Compute, ConvOpts, Eager, Error, Graph, NormKind, ParamStore, Tensor,
};

fn sig(v: &[f64]) -> Tensor {
    Tensor::from_signal(v)
}

fn kernel(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap()
}

#[test]
fn conv1d_unit_kernel_is_identity() {
    let x = sig(&[0.3, -1.0, 2.5, 4.0]);
    let y = kernels::conv1d(&x, &kernel(&[1.0]), None, ConvOpts::default()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv1d_hand_examples() {
    let y = kernels::conv1d(
        &sig(&[1.0, 2.0, 3.0]),
        &kernel(&[1.0, 1.0]),
        None,
        ConvOpts::default(),
    )
    .unwrap();
    assert_eq!(y.data(), &[3.0, 5.0]);
    let dil = ConvOpts {
        dilation: 2,
        ..ConvOpts::default()
    };
    let y = kernels::conv1d(&sig(&[1.0, 2.0, 3.0, 4.0]), &kernel(&[1.0, 1.0]), None, dil).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0]);
}

#[test]
fn conv1d_padding_stride_and_length_formula() {
    let o = ConvOpts {
        stride: 2,
        padding: 1,
        ..ConvOpts::default()
    };
    let y = kernels::conv1d(
        &sig(&[1.0, 2.0, 3.0, 4.0, 5.0]),
        &kernel(&[1.0, 10.0, 100.0]),
        None,
        o,
    )
    .unwrap();
    // padded input 0 1 2 3 4 5 0, windows at 0, 2, 4
    assert_eq!(y.data(), &[210.0, 432.0, 54.0]);
    assert_eq!(conv1d_len(5, 3, o), Some(3));
    assert_eq!(conv1d_len(2, 8, ConvOpts::stride(4)), None);
}

#[test]
fn conv1d_padding_wider_than_input() {
    let o = ConvOpts {
        dilation: 4,
        padding: 4,
        ..ConvOpts::default()
    };
    let y = kernels::conv1d(&sig(&[2.0]), &kernel(&[1.0, 10.0, 100.0]), None, o).unwrap();
    assert_eq!(y.data(), &[20.0]);
    let o = ConvOpts {
        dilation: 3,
        padding: 3,
        ..ConvOpts::default()
    };
    let y = kernels::conv1d(&sig(&[1.0, 2.0]), &kernel(&[1.0, 10.0, 100.0]), None, o).unwrap();
    assert_eq!(y.data(), &[10.0, 20.0]);
}

#[test]
fn depthwise_conv_keeps_channels_separate() {
    let x = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
    let w = Tensor::new(vec![2, 1, 1], vec![2.0, -1.0]).unwrap();
    let o = ConvOpts {
        groups: 2,
        ..ConvOpts::default()
    };
    let y = kernels::conv1d(&x, &w, None, o).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 6.0, -10.0, -20.0, -30.0]);
}

#[test]
fn conv1d_rejects_bad_groups() {
    let x = rand_tensor(&mut rng(1), &[1, 3, 8]);
    let w = rand_tensor(&mut rng(2), &[4, 1, 3]);
    let o = ConvOpts {
        groups: 2,
        ..ConvOpts::default()
    };
    assert!(matches!(
        kernels::conv1d(&x, &w, None, o),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn conv_transpose_examples() {
    let x = sig(&[0.5, -2.0, 3.0]);
    let y = kernels::conv_transpose1d(&x, &kernel(&[1.0]), None, 1, 0).unwrap();
    assert_eq!(y, x);
    let y = kernels::conv_transpose1d(&sig(&[1.0, 0.0]), &kernel(&[1.0, 2.0]), None, 2, 0).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0, 0.0, 0.0]);
    assert_eq!(conv_transpose1d_len(5, 8, 4, 0), Some(24));
    let y = kernels::conv_transpose1d(
        &rand_tensor(&mut rng(3), &[1, 2, 5]),
        &rand_tensor(&mut rng(4), &[2, 3, 8]),
        None,
        4,
        0,
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, 3, 24]);
}

#[test]
fn activations() {
    let mut e = Eager;
    let x = sig(&[-1.0, 2.0]);
    assert_eq!(e.relu(&x).data(), &[0.0, 2.0]);
    let p = e
        .prelu(&sig(&[-4.0, 3.0]), &Tensor::full(&[1], 0.25))
        .unwrap();
    assert_eq!(p.data(), &[-1.0, 3.0]);
    let s = e.sigmoid(&sig(&[-800.0, 0.0, 800.0]));
    assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.data()[1], 0.5);
    let gated = Tensor::new(vec![1, 2, 2], vec![3.0, -4.0, 0.0, 0.0]).unwrap();
    assert_eq!(e.glu(&gated).unwrap().data(), &[1.5, -2.0]);
    let odd = Tensor::zeros(&[1, 3, 2]);
    assert!(e.glu(&odd).is_err());
}

#[test]
fn global_layer_norm_examples() {
    let mut e = Eager;
    let ones = Tensor::full(&[2], 1.0);
    let zeros = Tensor::zeros(&[2]);
    let constant = Tensor::full(&[1, 2, 3], 4.2);
    let y = e
        .layer_norm(&constant, &ones, &zeros, NormKind::Global)
        .unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));

    let x = rand_tensor(&mut rng(5), &[1, 2, 50]);
    let y = e.layer_norm(&x, &ones, &zeros, NormKind::Global).unwrap();
    let mean = y.data().iter().sum::<f64>() / 100.0;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
    assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
    // normalizing an already normalized signal is (nearly) the identity
    let again = e.layer_norm(&y, &ones, &zeros, NormKind::Global).unwrap();
    for (a, b) in again.data().iter().zip(y.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }
    let affine = e
        .layer_norm(
            &y,
            &Tensor::full(&[2], 2.0),
            &Tensor::full(&[2], 1.0),
            NormKind::Global,
        )
        .unwrap();
    for (a, b) in affine.data().iter().zip(y.data()) {
        assert_abs_diff_eq!(*a, 2.0 * b + 1.0, epsilon = 1e-6);
    }
}

#[test]
fn bilstm_zero_weights_give_zero_output_and_shape_rule() {
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut store, &mut init_rng(0), "lstm", 3, 4, 2);
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = rand_tensor(&mut rng(6), &[1, 3, 7]);
    let y = lstm.forward(&mut Eager, &store, &x).unwrap();
    assert_eq!(y.shape(), &[1, 8, 7]);
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn bilstm_direction_symmetry_on_palindrome() {
    // Same weights in both directions + palindromic input: the forward hidden
    // sequence equals the time-reversed backward hidden sequence.
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut store, &mut init_rng(11), "lstm", 2, 3, 1);
    let (f, b) = &lstm.layers[0];
    for (src, dst) in [
        (f.w_ih, b.w_ih),
        (f.w_hh, b.w_hh),
        (f.b_ih, b.b_ih),
        (f.b_hh, b.b_hh),
    ] {
        let t = store.get(src).clone();
        *store.get_mut(dst) = t;
    }
    let x = Tensor::new(vec![1, 2, 3], vec![0.3, -0.7, 0.3, 1.1, 0.2, 1.1]).unwrap();
    let y = lstm.forward(&mut Eager, &store, &x).unwrap();
    for j in 0..3 {
        for t in 0..3 {
            assert_abs_diff_eq!(y.row(0, j)[t], y.row(0, 3 + j)[2 - t], epsilon = 1e-12);
        }
    }
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_signal(&[3.0]));
    let r = g.relu(&x);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);

    // unused parameter gets a zero gradient
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::from_signal(&[2.0]));
    store.add("unused", Tensor::from_signal(&[5.0]));
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let s = g.sum(u);
    let grads = g.backward(s).unwrap();
    let pg = g.param_grads(&grads, &store);
    assert_eq!(pg[0].data(), &[1.0]);
    assert_eq!(pg[1].data(), &[0.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_signal(&[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let c = g.input(Tensor::from_signal(&[1.0]));
    let s = g.sum(c);
    assert!(matches!(g.backward(s), Err(Error::Detached)));
}

#[test]
fn eager_and_graph_agree_bitwise() {
    let mut store = ParamStore::new();
    let lstm = BiLstm::new(&mut store, &mut init_rng(3), "lstm", 4, 5, 2);
    let x = rand_tensor(&mut rng(9), &[2, 4, 6]);
    let a = lstm.forward(&mut Eager, &store, &x).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let b = lstm.forward(&mut g, &store, &xv).unwrap();
    assert_eq!(&a, g.value(b));
}

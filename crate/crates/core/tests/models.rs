use finsep::demucs::{Demucs, DemucsConfig};
use finsep::model::zero_biases;
use finsep::tasnet::{TasNet, TasNetConfig};
use finsep::Model;
use finsep_numcore::gradcheck::{relative_error, FD_STEP};
use finsep_numcore::{Compute, Eager, Graph, NormKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tiny_tasnet(norm: NormKind, seed: u64) -> Model {
    let config = TasNetConfig {
        frame_len: 6,
        basis: 8,
        bottleneck: 4,
        hidden: 6,
        blocks: 2,
        repeats: 2,
        norm,
        ..TasNetConfig::default()
    };
    TasNet::new(config, seed).unwrap().into()
}

fn tiny_demucs(seed: u64) -> Model {
    let config = DemucsConfig {
        depth: 2,
        channels: 3,
        lstm_layers: 1,
        ..DemucsConfig::default()
    };
    Demucs::new(config, seed).unwrap().into()
}

fn projected_loss(model: &Model, g: &mut Graph, x: &Tensor, proj: &Tensor) -> finsep_numcore::Var {
    let xv = g.input(x.clone());
    let y = model.separate_batch(g, &xv).unwrap();
    let p = g.input(proj.clone());
    let m = g.mul(&y, &p).unwrap();
    g.sum(m)
}

/// Compares tape gradients against central differences on a sample of every parameter tensor.
fn model_grad_errors(mut model: Model, len: usize, seed: u64) -> Vec<(String, f64)> {
    let x = Tensor::new(vec![2, 1, len], noise(2 * len, seed)).unwrap();
    let proj = Tensor::new(vec![2, 2, len], noise(4 * len, seed + 1)).unwrap();
    let mut g = Graph::new();
    let loss = projected_loss(&model, &mut g, &x, &proj);
    let grads = g.backward(loss).unwrap();
    let analytic = g.param_grads(&grads, model.params());
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut out = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let n = model.params().tensors()[pi].len();
        let picks: Vec<usize> = if n <= 6 {
            (0..n).collect()
        } else {
            (0..6).map(|_| rng.random_range(0..n)).collect()
        };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for &j in &picks {
            let orig = model.params().tensors()[pi].data()[j];
            let mut eval = |v: f64| {
                model.params_mut().tensors_mut()[pi].data_mut()[j] = v;
                let mut g = Graph::new();
                let l = projected_loss(&model, &mut g, &x, &proj);
                g.value(l).item()
            };
            let d = (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP);
            model.params_mut().tensors_mut()[pi].data_mut()[j] = orig;
            num.push(d);
            ana.push(analytic[pi].data()[j]);
        }
        let t = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
        out.push((name.clone(), relative_error(&t(ana), &t(num))));
    }
    out
}

#[test]
fn tasnet_parameter_gradients_match_finite_differences() {
    for (norm, seed) in [(NormKind::Global, 1), (NormKind::Channel, 2)] {
        for (name, err) in model_grad_errors(tiny_tasnet(norm, seed), 45, seed) {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn demucs_parameter_gradients_match_finite_differences() {
    for seed in [3, 4] {
        for (name, err) in model_grad_errors(tiny_demucs(seed), 90, seed) {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn default_models_preserve_length() {
    for arch in ["tasnet", "demucs"] {
        let model = Model::with_defaults(arch, 7).unwrap();
        for len in [44160usize, 50000, 77280] {
            let (f, b) = model.separate_frame(&noise(len, len as u64)).unwrap();
            assert_eq!((f.len(), b.len()), (len, len), "{arch} {len}");
        }
    }
}

#[test]
fn silence_maps_to_silence() {
    let tasnet = Model::with_defaults("tasnet", 3).unwrap();
    let mut demucs = Model::with_defaults("demucs", 3).unwrap();
    zero_biases(demucs.params_mut());
    for model in [tasnet, demucs] {
        let (f, b) = model.separate_frame(&vec![0.0; 4000]).unwrap();
        assert!(f.iter().chain(&b).all(|v| *v == 0.0), "{}", model.arch());
    }
}

#[test]
fn eager_and_tape_forward_agree() {
    let x = Tensor::new(vec![1, 1, 300], noise(300, 9)).unwrap();
    for model in [tiny_tasnet(NormKind::Global, 5), tiny_demucs(5)] {
        let eager = model.separate_batch(&mut Eager, &x).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = model.separate_batch(&mut g, &xv).unwrap();
        assert_eq!(g.value(y), &eager);
    }
}

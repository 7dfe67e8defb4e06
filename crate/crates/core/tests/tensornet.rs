mod common;

use atlas_match::tensornet::{
    default_embed_net, default_regression_net, load_checkpoint, save_checkpoint, AdamState,
    Checkpoint, Layer, Network, NetworkSpec, Tensor,
};
use atlas_match::Error;
use common::*;
use proptest::prelude::*;

#[test]
fn layer_gradients_match_finite_differences_over_20_seeds() {
    let mut total = GradCheck::default();
    for seed in 0..20 {
        let r = network_gradcheck(seed);
        assert!(r.max_rel <= GRAD_TOL, "seed {seed}: {r:?}");
        assert!(r.checked > 10 * r.skipped, "seed {seed}: too many kinks {r:?}");
        total.merge(&r);
    }
    assert!(total.checked > 5_000, "{total:?}");
}

#[test]
fn gradcheck_specs_cover_every_layer_type() {
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..20 {
        for l in gradcheck_spec(seed).layers {
            seen.insert(l.name());
        }
    }
    assert_eq!(seen.len(), 6, "{seen:?}");
}

#[test]
fn parameter_counts_match_shape_walk() {
    for size in [64, 128] {
        for dim in [16, 64, 128] {
            let spec = default_embed_net(size, dim).unwrap();
            let n = ref_param_count(&spec);
            assert_eq!(spec.param_count().unwrap(), n);
            let net = Network::init(spec, 0).unwrap();
            assert_eq!(net.params().iter().map(Tensor::len).sum::<usize>(), n);
        }
    }
    // hand tally for L=64: convs 80+1168+4640+18496, dense 8320+8256
    assert_eq!(ref_param_count(&default_embed_net(128, 64).unwrap()), 40_960);
    let reg = default_regression_net(128).unwrap();
    assert_eq!(reg.param_count().unwrap(), ref_param_count(&reg));
}

#[test]
fn embed_net_output_shape() {
    let net = Network::init(default_embed_net(128, 64).unwrap(), 1).unwrap();
    let out = net.infer(&Tensor::zeros(vec![3, 1, 128, 128])).unwrap();
    assert_eq!(out.shape(), &[3, 64]);
}

/// Textbook scalar Adam in f64.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        x - lr * mh / (vh.sqrt() + eps)
    }
}

#[test]
fn adam_tracks_scalar_reference() {
    let lr = 1e-3;
    let grads = [0.5f32, -2.0, 1e-3, 7.0];
    let mut params = vec![Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 1.0]).unwrap()];
    let mut adam = AdamState::new(&params, lr);
    let mut refs: Vec<(ScalarAdam, f64)> = params[0]
        .data()
        .iter()
        .map(|&p| (ScalarAdam { m: 0.0, v: 0.0, t: 0 }, p as f64))
        .collect();
    let g = vec![Tensor::new(vec![4], grads.to_vec()).unwrap()];
    for step in 1..=500 {
        let before = params[0].data().to_vec();
        adam.step(&mut params, &g).unwrap();
        for (k, (r, x)) in refs.iter_mut().enumerate() {
            *x = r.step(*x, grads[k] as f64, lr);
            let got = params[0].data()[k] as f64;
            assert!((got - *x).abs() <= 1e-5 * (1.0 + x.abs()), "step {step} k {k}: {got} vs {x}");
            // constant gradients: each update is about lr * sign(g)
            let delta = before[k] as f64 - got;
            if step > 100 {
                assert!((delta - lr * (grads[k] as f64).signum()).abs() < 1e-4, "{delta}");
            }
        }
    }
    assert_eq!(adam.step_count(), 500);
}

#[test]
fn adam_is_deterministic() {
    let p = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
    let g = vec![Tensor::new(vec![3], vec![0.3, -0.1, 0.0]).unwrap()];
    let run = || {
        let mut params = p.clone();
        let mut adam = AdamState::new(&params, 1e-4);
        for _ in 0..10 {
            adam.step(&mut params, &g).unwrap();
        }
        params
    };
    assert_eq!(run(), run());
}

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        input_channels: 1,
        input_size: 8,
        layers: vec![
            Layer::Conv2d { out_channels: 2, kernel: 3, stride: 1 },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense { out_dim: 3 },
        ],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_roundtrip_is_bitwise(seed in any::<u64>(), step in any::<u64>(), scale in -1e30f32..1e30) {
        let mut net = Network::init(tiny_spec(), seed).unwrap();
        for t in net.params_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v *= scale / (1.0 + i as f32);
            }
        }
        let ckpt = Checkpoint::from_network(&net, step, seed);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(&back.spec, &ckpt.spec);
        for (a, b) in back.params.iter().zip(&ckpt.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt(cut in 1usize..200) {
        let net = Network::init(tiny_spec(), 3).unwrap();
        let bytes = Checkpoint::from_network(&net, 1, 3).to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        let err = Checkpoint::from_bytes(&bytes[..keep]).unwrap_err();
        prop_assert!(matches!(err, Error::CorruptPayload(_)), "{err:?}");
    }
}

#[test]
fn checkpoint_file_roundtrip_and_architecture_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.amck");
    let net = Network::init(tiny_spec(), 11).unwrap();
    save_checkpoint(&Checkpoint::from_network(&net, 42, 11), &path).unwrap();
    let back = load_checkpoint(&path, Some(&tiny_spec())).unwrap();
    assert_eq!(back.params, net.params());
    let mut other = tiny_spec();
    other.layers.push(Layer::Relu);
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::ArchitectureMismatch)));
}

#[test]
fn version_mismatch_is_reported() {
    let net = Network::init(tiny_spec(), 0).unwrap();
    let mut bytes = Checkpoint::from_network(&net, 0, 0).to_bytes();
    bytes[4] = 99;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch { .. })));
}

//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code under test except to obtain inputs.

#![allow(dead_code)]

use atlas_match::metric::{
    batch_triplet_loss, contrastive_loss, mine_triplets, triplet_loss, MarginConfig, MiningMode,
    PairBatch, Triplet,
};
use atlas_match::tensornet::{Layer, Network, NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// f64 forward pass written directly from the layer definitions. `pattern`
/// records every ReLU sign and max-pool choice so callers can tell when a
/// perturbation crossed a kink.
pub struct RefPass {
    pub out: Vec<f64>,
    pub pattern: Vec<u32>,
}

enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

pub fn ref_forward(spec: &NetworkSpec, params: &[Vec<f64>], input: &[f64], batch: usize) -> RefPass {
    let s = spec.input_size;
    let mut shape = Shape::Map(spec.input_channels, s, s);
    let mut x = input.to_vec();
    let mut pattern = Vec::new();
    let mut next_param = 0;
    for layer in &spec.layers {
        match (*layer, shape) {
            (Layer::Conv2d { out_channels: oc, kernel: k, stride: st }, Shape::Map(c, h, w)) => {
                let (wt, bias) = (&params[next_param], &params[next_param + 1]);
                next_param += 2;
                let pad = (k / 2) as isize;
                let oh = (h + 2 * (k / 2) - k) / st + 1;
                let ow = (w + 2 * (k / 2) - k) / st + 1;
                let mut y = vec![0.0; batch * oc * oh * ow];
                for b in 0..batch {
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[o];
                                for ci in 0..c {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iy = (oy * st + ky) as isize - pad;
                                            let ix = (ox * st + kx) as isize - pad;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            acc += wt[((o * c + ci) * k + ky) * k + kx]
                                                * x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                                y[((b * oc + o) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                x = y;
                shape = Shape::Map(oc, oh, ow);
            }
            (Layer::MaxPool2, Shape::Map(c, h, w)) => {
                let (oh, ow) = (h / 2, w / 2);
                let mut y = Vec::with_capacity(batch * c * oh * ow);
                for plane in 0..batch * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let window = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                .map(|(dy, dx)| x[(plane * h + 2 * oy + dy) * w + 2 * ox + dx]);
                            let mut best = 0;
                            for i in 1..4 {
                                if window[i] > window[best] {
                                    best = i;
                                }
                            }
                            pattern.push(best as u32);
                            y.push(window[best]);
                        }
                    }
                }
                x = y;
                shape = Shape::Map(c, oh, ow);
            }
            (Layer::Relu, sh) => {
                for v in &mut x {
                    pattern.push((*v > 0.0) as u32);
                    *v = v.max(0.0);
                }
                shape = sh;
            }
            (Layer::Flatten, Shape::Map(c, h, w)) => shape = Shape::Flat(c * h * w),
            (Layer::GlobalAvgPool, Shape::Map(c, h, w)) => {
                x = x.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
                shape = Shape::Flat(c);
            }
            (Layer::Dense { out_dim }, sh) => {
                let n_in = match sh {
                    Shape::Flat(n) => n,
                    Shape::Map(c, h, w) => c * h * w,
                };
                let (wt, bias) = (&params[next_param], &params[next_param + 1]);
                next_param += 2;
                let mut y = vec![0.0; batch * out_dim];
                for b in 0..batch {
                    for o in 0..out_dim {
                        y[b * out_dim + o] = bias[o]
                            + (0..n_in).map(|i| wt[o * n_in + i] * x[b * n_in + i]).sum::<f64>();
                    }
                }
                x = y;
                shape = Shape::Flat(out_dim);
            }
            (l, _) => panic!("reference forward cannot apply {l:?} here"),
        }
    }
    RefPass { out: x, pattern }
}

/// Walks the layer list and counts parameters from first principles.
pub fn ref_param_count(spec: &NetworkSpec) -> usize {
    let (mut c, mut h, mut w) = (spec.input_channels, spec.input_size, spec.input_size);
    let mut flat: Option<usize> = None;
    let mut count = 0;
    for layer in &spec.layers {
        match *layer {
            Layer::Conv2d { out_channels, kernel, stride } => {
                count += out_channels * c * kernel * kernel + out_channels;
                c = out_channels;
                h = (h - 1) / stride + 1;
                w = (w - 1) / stride + 1;
            }
            Layer::MaxPool2 => {
                h /= 2;
                w /= 2;
            }
            Layer::Relu => {}
            Layer::Flatten => flat = Some(c * h * w),
            Layer::GlobalAvgPool => flat = Some(c),
            Layer::Dense { out_dim } => {
                let n_in = flat.unwrap_or(c * h * w);
                count += out_dim * n_in + out_dim;
                flat = Some(out_dim);
            }
        }
    }
    count
}

/// Small random architecture for seed `seed`; alternates between a
/// flatten-headed and a pooling-headed layout so every layer type appears.
pub fn gradcheck_spec(seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = rng.random_range(2..=4);
    let c2 = rng.random_range(2..=4);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let layers = if seed % 2 == 0 {
        vec![
            Layer::Conv2d { out_channels: c1, kernel: k, stride },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv2d { out_channels: c2, kernel: 3, stride: 1 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense { out_dim: 6 },
            Layer::Relu,
            Layer::Dense { out_dim: 3 },
        ]
    } else {
        vec![
            Layer::Conv2d { out_channels: c1, kernel: 3, stride: 1 },
            Layer::Relu,
            Layer::Conv2d { out_channels: c2, kernel: k, stride },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::GlobalAvgPool,
            Layer::Dense { out_dim: 4 },
        ]
    };
    NetworkSpec {
        input_channels: rng.random_range(1..=2),
        input_size: 8,
        layers,
    }
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

impl GradCheck {
    fn record(&mut self, rel: f64) {
        self.max_rel = self.max_rel.max(rel);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Compares the engine's f32 parameter and input gradients for
/// `L = sum(r * out)` against central differences of the f64 reference.
pub fn network_gradcheck(seed: u64) -> GradCheck {
    let spec = gradcheck_spec(seed);
    let batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let mut net = Network::init(spec.clone(), seed).unwrap();
    // nonzero biases so units sit at varied offsets from their kinks
    for t in net.params_mut().iter_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let s = spec.input_size;
    let n_in = batch * spec.input_channels * s * s;
    let input: Vec<f32> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![batch, spec.input_channels, s, s], input.clone()).unwrap();
    let out = net.forward(&x).unwrap();
    let r: Vec<f32> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = net.backward(&Tensor::new(out.shape().to_vec(), r.clone()).unwrap()).unwrap();

    let p64: Vec<Vec<f64>> = net.params().iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let x64: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let r64: Vec<f64> = r.iter().map(|&v| v as f64).collect();
    let loss = |p: &[Vec<f64>], x: &[f64]| {
        let pass = ref_forward(&spec, p, x, batch);
        let l: f64 = pass.out.iter().zip(&r64).map(|(o, r)| o * r).sum();
        (l, pass.pattern)
    };
    let base_pattern = loss(&p64, &x64).1;

    let mut report = GradCheck::default();
    for (t, g) in grads.params.iter().enumerate() {
        for k in 0..p64[t].len() {
            let mut hi = p64.clone();
            let mut lo = p64.clone();
            hi[t][k] += FD_STEP;
            lo[t][k] -= FD_STEP;
            let (lh, ph) = loss(&hi, &x64);
            let (ll, pl) = loss(&lo, &x64);
            if ph != base_pattern || pl != base_pattern {
                report.skipped += 1;
                continue;
            }
            report.record(rel_err(g.data()[k] as f64, (lh - ll) / (2.0 * FD_STEP)));
        }
    }
    for k in 0..x64.len() {
        let (mut hi, mut lo) = (x64.clone(), x64.clone());
        hi[k] += FD_STEP;
        lo[k] -= FD_STEP;
        let (lh, ph) = loss(&p64, &hi);
        let (ll, pl) = loss(&p64, &lo);
        if ph != base_pattern || pl != base_pattern {
            report.skipped += 1;
            continue;
        }
        report.record(rel_err(grads.input.data()[k] as f64, (lh - ll) / (2.0 * FD_STEP)));
    }
    report
}

/// Central difference of `f` in coordinate `k` of an f32 vector, using the
/// step actually representable in f32.
fn fd_f32(v: &[f32], k: usize, f: &dyn Fn(&[f32]) -> f64) -> f64 {
    let (mut hi, mut lo) = (v.to_vec(), v.to_vec());
    hi[k] = (v[k] as f64 + FD_STEP) as f32;
    lo[k] = (v[k] as f64 - FD_STEP) as f32;
    (f(&hi) - f(&lo)) / (hi[k] as f64 - lo[k] as f64)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Contrastive loss gradients on a batch mixing positive pairs, negative
/// pairs inside the margin (active hinge) and outside it (inactive).
pub fn contrastive_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dim) = (6, 8);
    let margin = MarginConfig::new(1.0).unwrap();
    let mut fixed = Vec::new();
    let mut moving = Vec::new();
    let mut positive = Vec::new();
    for i in 0..n {
        let base: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (pos, len) = match i % 3 {
            0 => (true, rng.random_range(0.3..1.5)),
            1 => (false, rng.random_range(0.2..0.8)),
            _ => (false, rng.random_range(1.2..2.0)),
        };
        let u = random_unit(&mut rng, dim);
        fixed.extend(base.iter().map(|&v| v as f32));
        moving.extend(base.iter().zip(&u).map(|(b, u)| (b + len * u) as f32));
        positive.push(pos);
    }
    let batch = |f: &[f32], m: &[f32]| {
        PairBatch::new(
            Tensor::new(vec![n, dim], f.to_vec()).unwrap(),
            Tensor::new(vec![n, dim], m.to_vec()).unwrap(),
            positive.clone(),
        )
        .unwrap()
    };
    let out = contrastive_loss(&batch(&fixed, &moving), &margin);
    let mut report = GradCheck::default();
    for k in 0..fixed.len() {
        let num = fd_f32(&fixed, k, &|f| contrastive_loss(&batch(f, &moving), &margin).loss);
        report.record(rel_err(out.grad_fixed.data()[k] as f64, num));
        let num = fd_f32(&moving, k, &|m| contrastive_loss(&batch(&fixed, m), &margin).loss);
        report.record(rel_err(out.grad_moving.data()[k] as f64, num));
    }
    report
}

/// Single-triplet gradients in the active (`active = true`) or inactive
/// hinge regime, plus batch-loss gradients over a mined set.
pub fn triplet_gradcheck(seed: u64, active: bool) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let margin = MarginConfig::new(0.5).unwrap();
    let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d_ap = rng.random_range(0.3..1.0);
    // hinge value d_ap - d_an + m is at least 0.1 away from zero
    let d_an = if active {
        d_ap + margin.margin - rng.random_range(0.1..0.4)
    } else {
        d_ap + margin.margin + rng.random_range(0.1..0.5)
    };
    let (up, un) = (random_unit(&mut rng, dim), random_unit(&mut rng, dim));
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let anchor = to32(a.clone());
    let pos = to32(a.iter().zip(&up).map(|(x, u)| x + d_ap * u).collect());
    let neg = to32(a.iter().zip(&un).map(|(x, u)| x + d_an * u).collect());
    let out = triplet_loss(&anchor, &pos, &neg, &margin).unwrap();
    assert_eq!(out.loss > 0.0, active);
    let mut report = GradCheck::default();
    let lossf = |a: &[f32], p: &[f32], n: &[f32]| triplet_loss(a, p, n, &margin).unwrap().loss;
    for k in 0..dim {
        report.record(rel_err(out.grad_anchor[k], fd_f32(&anchor, k, &|v| lossf(v, &pos, &neg))));
        report.record(rel_err(out.grad_positive[k], fd_f32(&pos, k, &|v| lossf(&anchor, v, &neg))));
        report.record(rel_err(out.grad_negative[k], fd_f32(&neg, k, &|v| lossf(&anchor, &pos, v))));
    }

    // batch loss over an all-mode mined set, set held fixed while probing
    let (b, labels) = (6, [0usize, 0, 1, 1, 2, 2]);
    let emb: Vec<f32> = (0..b * dim).map(|_| rng.random_range(-0.4..0.4)).collect();
    let t = |e: &[f32]| Tensor::new(vec![b, dim], e.to_vec()).unwrap();
    if let Ok(set) = mine_triplets(&t(&emb), &labels, MiningMode::All, &margin) {
        let hinge_ok = set.triplets.iter().all(|tr| {
            let d = |i: usize, j: usize| {
                (0..dim)
                    .map(|k| ((emb[i * dim + k] - emb[j * dim + k]) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            d(tr.anchor, tr.positive) - d(tr.anchor, tr.negative) + margin.margin > 0.01
        });
        if hinge_ok {
            let (_, grad) = batch_triplet_loss(&t(&emb), &set, &margin).unwrap();
            for k in 0..emb.len() {
                let num = fd_f32(&emb, k, &|e| batch_triplet_loss(&t(e), &set, &margin).unwrap().0);
                report.record(rel_err(grad.data()[k] as f64, num));
            }
        }
    }
    report
}

/// Brute-force triplet filter straight from the definitions: hard when the
/// negative is strictly closer than the positive, semi-hard when it is not but
/// the hinge is still positive.
pub fn brute_force_mine(emb: &[f32], dim: usize, labels: &[usize], mode: MiningMode, m: f64) -> Vec<Triplet> {
    let b = labels.len();
    let d = |i: usize, j: usize| -> f64 {
        emb[i * dim..(i + 1) * dim]
            .iter()
            .zip(&emb[j * dim..(j + 1) * dim])
            .map(|(x, y)| {
                let t = *x as f64 - *y as f64;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut out = Vec::new();
    for a in 0..b {
        for p in 0..b {
            for n in 0..b {
                if a == p || labels[a] != labels[p] || labels[n] == labels[a] {
                    continue;
                }
                let (dap, dan) = (d(a, p), d(a, n));
                let hard = dan < dap;
                let semi = dap <= dan && dan < dap + m;
                let keep = match mode {
                    MiningMode::Hard => hard,
                    MiningMode::SemiHard => semi,
                    MiningMode::All => hard || semi,
                };
                if keep {
                    out.push(Triplet { anchor: a, positive: p, negative: n });
                }
            }
        }
    }
    out
}

/// Random batch for the mining oracle: few classes, some duplicated rows to
/// create exact distance ties.
pub fn random_mining_batch(rng: &mut ChaCha8Rng) -> (Vec<f32>, usize, Vec<usize>) {
    let b = rng.random_range(2..=32);
    let dim = rng.random_range(1..=6);
    let classes = rng.random_range(1..=5);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let mut emb: Vec<f32> = (0..b * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    for i in 1..b {
        if rng.random_bool(0.1) {
            let j = rng.random_range(0..i);
            let row: Vec<f32> = emb[j * dim..(j + 1) * dim].to_vec();
            emb[i * dim..(i + 1) * dim].copy_from_slice(&row);
        }
    }
    (emb, dim, labels)
}

/// 0-based rank of `gt` counted directly: plates scoring strictly lower, or
/// equal with a lower index, come first.
pub fn naive_rank(scores: &[f64], gt: usize) -> usize {
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s < scores[gt] || (s == scores[gt] && i < gt))
        .count()
}

/// MAE and TOP-{1,3,5,10} by direct counting.
pub fn naive_metrics(ranks: &[usize]) -> (f64, [f64; 4]) {
    let n = ranks.len() as f64;
    let mut sum = 0usize;
    for r in ranks {
        sum += r;
    }
    let mut tops = [0.0; 4];
    for (slot, k) in [1usize, 3, 5, 10].iter().enumerate() {
        let mut hits = 0usize;
        for r in ranks {
            if *r < *k {
                hits += 1;
            }
        }
        tops[slot] = hits as f64 / n;
    }
    (sum as f64 / n, tops)
}

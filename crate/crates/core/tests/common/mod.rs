#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pim::dsp::{filtfilt, gravity_lowpass};
use pim::model::{EncoderSpec, HeadSpec, LossWeights, Objective, PimModel};
use pim::nn::{self, Tensor};
use pim::pseudo_labels::{LimbPair, PseudoLabelSet, Triaxial};
use pim::timeseries::{ChannelMatrix, SensorPosition, Window};

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), randn(rng, n)).unwrap()
}

/// |a - n| / max(|a|, |n|, 1e-4)
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Largest relative error between `analytic` and the central difference of
/// `f` around `x`.
pub fn check_grad(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let up = f(&probe);
        probe[i] = x[i] - H;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn weighted(y: &Tensor, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn with(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

/// Values at least 0.05 away from 0 so ReLU kinks stay out of reach.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub type OpCheck = fn(u64, usize) -> f64;

fn conv1d(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let (b, ci, co) = (
        r.random_range(1..4),
        r.random_range(1..5),
        r.random_range(1..5),
    );
    let k = r.random_range(1..6);
    let stride = r.random_range(1..3);
    let len = k + r.random_range(0..9);
    let x = tensor(&mut r, &[b, ci, len]);
    let w = tensor(&mut r, &[co, ci, k]);
    let bias = tensor(&mut r, &[co]);
    let y = nn::conv1d_forward(&x, &w, &bias, stride).unwrap();
    let rw = randn(&mut r, y.len());
    let dy = Tensor::new(y.shape().to_vec(), rw.clone()).unwrap();
    let g = nn::conv1d_backward(&x, &w, stride, &dy).unwrap();
    let ex = check_grad(x.data(), g.dx.data(), |v| {
        weighted(
            &nn::conv1d_forward(&with(&x, v), &w, &bias, stride).unwrap(),
            &rw,
        )
    });
    let ew = check_grad(w.data(), g.dw.data(), |v| {
        weighted(
            &nn::conv1d_forward(&x, &with(&w, v), &bias, stride).unwrap(),
            &rw,
        )
    });
    let eb = check_grad(bias.data(), g.db.data(), |v| {
        weighted(
            &nn::conv1d_forward(&x, &w, &with(&bias, v), stride).unwrap(),
            &rw,
        )
    });
    ex.max(ew).max(eb)
}

fn dense(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let (b, i, o) = (
        r.random_range(1..5),
        r.random_range(1..9),
        r.random_range(1..9),
    );
    let x = tensor(&mut r, &[b, i]);
    let w = tensor(&mut r, &[o, i]);
    let bias = tensor(&mut r, &[o]);
    let y = nn::dense_forward(&x, &w, &bias).unwrap();
    let rw = randn(&mut r, y.len());
    let g = nn::dense_backward(&x, &w, &with(&y, &rw)).unwrap();
    let ex = check_grad(x.data(), g.dx.data(), |v| {
        weighted(&nn::dense_forward(&with(&x, v), &w, &bias).unwrap(), &rw)
    });
    let ew = check_grad(w.data(), g.dw.data(), |v| {
        weighted(&nn::dense_forward(&x, &with(&w, v), &bias).unwrap(), &rw)
    });
    let eb = check_grad(bias.data(), g.db.data(), |v| {
        weighted(&nn::dense_forward(&x, &w, &with(&bias, v)).unwrap(), &rw)
    });
    ex.max(ew).max(eb)
}

fn relu(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let dims = [r.random_range(1..4), r.random_range(1..9)];
    let x = Tensor::new(dims.to_vec(), away_from_zero(&mut r, dims[0] * dims[1])).unwrap();
    let rw = randn(&mut r, x.len());
    let dx = nn::relu_backward(&x, &with(&x, &rw)).unwrap();
    check_grad(x.data(), dx.data(), |v| {
        weighted(&nn::relu(&with(&x, v)), &rw)
    })
}

fn sigmoid(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let shape = [r.random_range(1..4), r.random_range(1..9)];
    let x = tensor(&mut r, &shape).map(|v| 4.0 * v);
    let rw = randn(&mut r, x.len());
    let y = nn::sigmoid(&x);
    let dx = nn::sigmoid_backward(&y, &with(&x, &rw)).unwrap();
    check_grad(x.data(), dx.data(), |v| {
        weighted(&nn::sigmoid(&with(&x, v)), &rw)
    })
}

fn softmax(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let shape = [r.random_range(1..4), r.random_range(2..9)];
    let x = tensor(&mut r, &shape).map(|v| 3.0 * v);
    let rw = randn(&mut r, x.len());
    let y = nn::softmax(&x);
    let dx = nn::softmax_backward(&y, &with(&x, &rw)).unwrap();
    check_grad(x.data(), dx.data(), |v| {
        weighted(&nn::softmax(&with(&x, v)), &rw)
    })
}

fn layer_norm(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let (b, f) = (r.random_range(1..4), r.random_range(2..9));
    let x = tensor(&mut r, &[b, f]);
    let gamma = tensor(&mut r, &[f]);
    let beta = tensor(&mut r, &[f]);
    let eps = 1e-5;
    let (y, cache) = nn::layer_norm_forward(&x, &gamma, &beta, eps).unwrap();
    let rw = randn(&mut r, y.len());
    let (dx, dg, db) = nn::layer_norm_backward(&cache, &gamma, &with(&y, &rw)).unwrap();
    let f_of = |x: &Tensor, g: &Tensor, bb: &Tensor| {
        weighted(&nn::layer_norm_forward(x, g, bb, eps).unwrap().0, &rw)
    };
    let ex = check_grad(x.data(), dx.data(), |v| f_of(&with(&x, v), &gamma, &beta));
    let eg = check_grad(gamma.data(), dg.data(), |v| {
        f_of(&x, &with(&gamma, v), &beta)
    });
    let eb = check_grad(beta.data(), db.data(), |v| {
        f_of(&x, &gamma, &with(&beta, v))
    });
    ex.max(eg).max(eb)
}

fn dropout(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let shape = [
        r.random_range(1..4),
        r.random_range(1..5),
        r.random_range(1..9),
    ];
    let x = tensor(&mut r, &shape);
    let rate = r.random_range(0.1..0.6);
    let mask_seed: u64 = r.random();
    let forward = |x: &Tensor| nn::dropout_forward(x, rate, true, &mut rng(mask_seed));
    let (y, mask) = forward(&x);
    let rw = randn(&mut r, y.len());
    let dx = nn::dropout_backward(mask.as_ref(), &with(&y, &rw)).unwrap();
    check_grad(x.data(), dx.data(), |v| {
        weighted(&forward(&with(&x, v)).0, &rw)
    })
}

fn global_max_pool(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let (b, c, len) = (
        r.random_range(1..4),
        r.random_range(1..5),
        r.random_range(1..10),
    );
    // Distinct values spaced well beyond 2h so the argmax never flips.
    let mut data = Vec::with_capacity(b * c * len);
    for _ in 0..b * c {
        let mut ranks: Vec<usize> = (0..len).collect();
        ranks.shuffle(&mut r);
        data.extend(
            ranks
                .iter()
                .map(|&k| k as f64 * 0.1 + r.random_range(0.0..0.01)),
        );
    }
    let x = Tensor::new(vec![b, c, len], data).unwrap();
    let (y, idx) = nn::global_max_pool_1d(&x).unwrap();
    let rw = randn(&mut r, y.len());
    let dx = nn::global_max_pool_1d_backward(&idx, x.shape(), &with(&y, &rw)).unwrap();
    check_grad(x.data(), dx.data(), |v| {
        weighted(&nn::global_max_pool_1d(&with(&x, v)).unwrap().0, &rw)
    })
}

fn bce(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let shape = [r.random_range(1..4), r.random_range(1..12)];
    let z = tensor(&mut r, &shape).map(|v| 3.0 * v);
    let t: Vec<f64> = (0..z.len())
        .map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    let t = with(&z, &t);
    let (_, g) = nn::bce_with_logits(&z, &t).unwrap();
    check_grad(z.data(), g.data(), |v| {
        nn::bce_with_logits(&with(&z, v), &t).unwrap().0
    })
}

fn ce(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let (b, c) = (r.random_range(1..5), r.random_range(2..12));
    let z = tensor(&mut r, &[b, c]).map(|v| 3.0 * v);
    let t: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
    let (_, g) = nn::ce_loss(&z, &t).unwrap();
    check_grad(z.data(), g.data(), |v| {
        nn::ce_loss(&with(&z, v), &t).unwrap().0
    })
}

/// Small model with every head kind, checked end to end through
/// `loss_and_grads` with dropout off.
/// Whole-model check against a Richardson-extrapolated central difference.
/// Differences of a loss of size `L` carry roughly `eps * L / h` of
/// cancellation noise, so the floor scales with `L`.
pub fn model(seed: u64, shape: usize) -> f64 {
    let mut r = rng(seed * 1000 + shape as u64);
    let two_sensors = r.random_bool(0.5);
    let classify = shape % 3 == 2;
    let encoder = EncoderSpec {
        conv_channels: vec![r.random_range(2..5), r.random_range(2..5)],
        kernel_sizes: vec![r.random_range(1..4), r.random_range(1..4)],
        stride: 1,
        dropout: 0.0,
    };
    let len = encoder.min_window_len() + r.random_range(0..6);
    let positions: Vec<SensorPosition> = if two_sensors {
        vec!["left_wrist".into(), "right_wrist".into()]
    } else {
        vec!["left_wrist".into()]
    };
    let n_classes = r.random_range(2..5);
    let small = |mut h: HeadSpec, r: &mut ChaCha8Rng| {
        h.hidden = vec![r.random_range(2..6), r.random_range(2..6)];
        h
    };
    let heads: Vec<HeadSpec> = if classify {
        vec![HeadSpec::classifier(n_classes)]
    } else {
        let mut hs: Vec<HeadSpec> = positions
            .iter()
            .map(|p| small(HeadSpec::angle(p), &mut r))
            .collect();
        hs.extend(positions.iter().map(|p| small(HeadSpec::speed(p), &mut r)));
        if two_sensors {
            hs.push(small(HeadSpec::symmetry(LimbPair::Arms), &mut r));
        }
        hs
    };
    let nc = 3 * positions.len();
    let mut m = PimModel::new(&encoder, &heads, nc, len, 1e-3, seed).unwrap();
    // zero-initialised biases put pre-activations exactly on ReLU kinks
    for p in m.params_mut() {
        let n = p.value.data().len();
        let v = randn(&mut r, n);
        p.value
            .data_mut()
            .iter_mut()
            .zip(v)
            .for_each(|(d, g)| *d += 0.5 * g);
    }
    let windows: Vec<Window> = (0..r.random_range(1..4))
        .map(|_| random_window(&mut r, nc, len, &positions, two_sensors, n_classes))
        .collect();
    let refs: Vec<&Window> = windows.iter().collect();
    let objective = if classify {
        Objective::Classify
    } else {
        Objective::Pretrain(LossWeights {
            alpha: r.random_range(0.1..2.0),
            beta: r.random_range(0.1..2.0),
            gamma: r.random_range(0.1..2.0),
        })
    };
    let (loss, grads) = m
        .loss_and_grads(&refs, &objective, false, &mut rng(0), 1.0, true)
        .unwrap();
    let grads = grads.unwrap();
    let floor = 1e-4 * loss.total.abs().max(1.0);
    let n_params = m.params().len();
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate().take(n_params) {
        let x: Vec<f64> = m.params()[pi].value.data().to_vec();
        let mut probe = x.clone();
        let mut e: f64 = 0.0;
        for i in 0..x.len() {
            let mut at = |v: f64| {
                probe[i] = v;
                m.params_mut()[pi].value.data_mut().copy_from_slice(&probe);
                m.loss_and_grads(&refs, &objective, false, &mut rng(0), 1.0, false)
                    .unwrap()
                    .0
                    .total
            };
            let coarse = (at(x[i] + H) - at(x[i] - H)) / (2.0 * H);
            let fine = (at(x[i] + H / 2.0) - at(x[i] - H / 2.0)) / H;
            let n = (4.0 * fine - coarse) / 3.0;
            probe[i] = x[i];
            let a = g.data()[i];
            e = e.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
        m.params_mut()[pi].value.data_mut().copy_from_slice(&x);
        worst = worst.max(e);
    }
    worst
}

pub fn random_pseudo(
    r: &mut impl Rng,
    positions: &[SensorPosition],
    with_pair: bool,
) -> PseudoLabelSet {
    let mut p = PseudoLabelSet::default();
    for pos in positions {
        p.speed_bins.insert(pos.clone(), r.random_range(0..11));
        p.angle_bins.insert(
            pos.clone(),
            [
                r.random_range(0..11),
                r.random_range(0..11),
                r.random_range(0..11),
            ],
        );
    }
    if with_pair {
        p.symmetry_bins
            .insert(LimbPair::Arms, r.random_range(0..11));
    }
    p
}

pub fn random_window(
    r: &mut impl Rng,
    nc: usize,
    len: usize,
    positions: &[SensorPosition],
    with_pair: bool,
    n_classes: usize,
) -> Window {
    let data = ChannelMatrix::from_flat(nc, len, randn(r, nc * len)).unwrap();
    let mut w = Window::new(data, "s0").with_label(r.random_range(0..n_classes));
    w.pseudo = Some(random_pseudo(r, positions, with_pair));
    w
}

pub const OPS: [(&str, OpCheck); 10] = [
    ("conv1d", conv1d),
    ("dense", dense),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("dropout", dropout),
    ("global_max_pool", global_max_pool),
    ("bce_with_logits", bce),
    ("ce_loss", ce),
];

/// Worst relative error of each op over 10 seeds x 10 random shapes.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    OPS.iter()
        .map(|&(name, f)| {
            let worst = (0..10u64)
                .flat_map(|seed| (0..10).map(move |shape| (seed, shape)))
                .map(|(seed, shape)| f(seed, shape))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Plain recursive DTW with a memo table, absolute-difference cost.
pub fn dtw_oracle(a: &[f64], b: &[f64]) -> f64 {
    fn go(
        a: &[f64],
        b: &[f64],
        i: usize,
        j: usize,
        memo: &mut BTreeMap<(usize, usize), f64>,
    ) -> f64 {
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let cost = (a[i] - b[j]).abs();
        let v = if i == 0 && j == 0 {
            cost
        } else if i == 0 {
            cost + go(a, b, 0, j - 1, memo)
        } else if j == 0 {
            cost + go(a, b, i - 1, 0, memo)
        } else {
            let up = go(a, b, i - 1, j, memo);
            let left = go(a, b, i, j - 1, memo);
            let diag = go(a, b, i - 1, j - 1, memo);
            cost + up.min(left).min(diag)
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, a.len() - 1, b.len() - 1, &mut BTreeMap::new())
}

/// Speed of motion written out step by step: subtract the lowpassed gravity,
/// integrate to velocity with v[0] = 0, advance position with the previous
/// velocity, smooth the position, sum squared increments across axes.
pub fn speed_oracle(accel: &Triaxial, fs: f64) -> f64 {
    let f = gravity_lowpass(fs).unwrap();
    let dt = 1.0 / fs;
    let mut total = 0.0;
    for axis in accel {
        let n = axis.len();
        let g = filtfilt(&f, axis).unwrap();
        let mut v = vec![0.0; n];
        for k in 1..n {
            v[k] = v[k - 1] + (axis[k] - g[k]) * dt;
        }
        let mut t = vec![0.0; n];
        for k in 1..n {
            t[k] = t[k - 1] + v[k - 1] * dt;
        }
        let ts = filtfilt(&f, &t).unwrap();
        for k in 1..n {
            total += (ts[k] - ts[k - 1]) * (ts[k] - ts[k - 1]);
        }
    }
    total.sqrt()
}

/// Symmetry written out: lowpassed magnitudes, brute-force correlation peak,
/// shift, trim to the overlap, recursive DTW.
pub fn symmetry_oracle(a1: &Triaxial, a2: &Triaxial, fs: f64) -> f64 {
    let f = gravity_lowpass(fs).unwrap();
    let mag = |a: &Triaxial| {
        let s: Vec<Vec<f64>> = a.iter().map(|x| filtfilt(&f, x).unwrap()).collect();
        (0..s[0].len())
            .map(|k| (s[0][k].powi(2) + s[1][k].powi(2) + s[2][k].powi(2)).sqrt())
            .collect::<Vec<f64>>()
    };
    let (x1, x2) = (mag(a1), mag(a2));
    let n = x1.len() as isize;
    let mut best = (f64::NEG_INFINITY, 0isize);
    for lag in -(n - 1)..n {
        let mut s = 0.0;
        for k in 0..n {
            let i = k + lag;
            if (0..n).contains(&i) {
                s += x1[i as usize] * x2[k as usize];
            }
        }
        if s > best.0 {
            best = (s, lag);
        }
    }
    let lag = best.1;
    // x1[k + lag] pairs with x2[k].
    let (a, b): (Vec<f64>, Vec<f64>) = (0..n)
        .filter(|k| (0..n).contains(&(k + lag)))
        .map(|k| (x1[(k + lag) as usize], x2[k as usize]))
        .unzip();
    dtw_oracle(&a, &b)
}

/// Gravity of magnitude 9.81 whose roll `atan2(gy, gz)` and pitch
/// `atan2(gx, gz)` equal the given angles. Requires cos(roll) and cos(pitch)
/// to share a sign.
pub fn gravity_for(roll: f64, pitch: f64) -> [f64; 3] {
    let g = [
        pitch.sin() * roll.cos().abs(),
        roll.sin() * pitch.cos().abs(),
        roll.cos() * pitch.cos().abs(),
    ];
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    g.map(|v| 9.81 * v / n)
}

/// Roll and pitch pair with matching cosine signs and both cosines at
/// least 0.3 in magnitude, keeping each atan2 well conditioned.
pub fn random_roll_pitch(r: &mut impl Rng) -> (f64, f64) {
    use std::f64::consts::PI;
    loop {
        let a = r.random_range(-PI + 1e-6..PI);
        let b = r.random_range(-PI + 1e-6..PI);
        if a.cos() * b.cos() > 0.0 && a.cos().abs() >= 0.3 && b.cos().abs() >= 0.3 {
            return (a, b);
        }
    }
}

/// Random raw-unit accelerometer triple: gravity plus a few sinusoids and noise.
pub fn random_accel(r: &mut impl Rng, n: usize, fs: f64) -> Triaxial {
    let g = gravity_for(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let freqs = [r.random_range(0.3..1.8), r.random_range(2.5..6.0)];
    let amps = [r.random_range(0.0..3.0), r.random_range(0.0..2.0)];
    let phase: f64 = r.random_range(0.0..6.28);
    std::array::from_fn(|axis| {
        (0..n)
            .map(|k| {
                let t = k as f64 / fs;
                let wave: f64 = freqs
                    .iter()
                    .zip(&amps)
                    .map(|(f, a)| {
                        a * (2.0 * std::f64::consts::PI * f * t + phase + axis as f64).sin()
                    })
                    .sum();
                g[axis] + wave + 0.2 * r.random_range(-1.0..1.0)
            })
            .collect()
    })
}

/// Synthetic experiment shrunk for fast tests: 8 s per recording.
pub fn small_config() -> pim::eval::ExperimentConfig {
    let mut cfg = pim::eval::ExperimentConfig::synthetic();
    if let pim::eval::DataConfig::Synthetic(spec) = &mut cfg.data {
        spec.duration_s = 8.0;
    }
    cfg
}

pub fn small_data() -> pim::eval::PreparedData {
    let cfg = small_config();
    let series = pim::eval::load_series(&cfg).unwrap();
    let (layout, rate, windows) = pim::eval::window_all(&series, &cfg.windowing).unwrap();
    pim::eval::prepare(&cfg, &layout, rate, windows).unwrap()
}

/// Encoder small enough for quick training loops on 50-sample windows.
pub fn small_encoder() -> EncoderSpec {
    EncoderSpec {
        conv_channels: vec![8, 12, 16],
        kernel_sizes: vec![9, 6, 4],
        stride: 1,
        dropout: 0.1,
    }
}

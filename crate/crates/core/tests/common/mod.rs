//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance suite.

#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use lmt::attack::{cw_l2_attack_batch, AttackConfig};
use lmt::certify::{certify_logits, verify_certificates, CertificateCheck};
use lmt::lipschitz::certified_lipschitz;
use lmt::model::{Dense, MlpModel};
use lmt::training::{inflated_loss_gradients, Strategy, TrainConfig};
use lmt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, dims: &[usize]) -> MlpModel {
    let layers = dims
        .windows(2)
        .map(|w| {
            let weight = gaussian_matrix(rng, w[1], w[0], (2.0 / w[0] as f64).sqrt());
            let bias = (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            Dense::new(weight, Tensor::vector(bias).unwrap()).unwrap()
        })
        .collect();
    MlpModel::with_seed(layers, rng.random()).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut a = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Largest singular value via the eigenvalues of the Gram matrix `WᵀW`.
pub fn sigma_max_dense(w: &Tensor) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let d = w.data();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = (0..m).map(|k| d[k * n + i] * d[k * n + j]).sum();
        }
    }
    jacobi_eigenvalues(&gram, n)
        .into_iter()
        .fold(0.0, f64::max)
        .sqrt()
}

/// Plain-loop forward pass, independent of the crate's GEMM path.
pub fn reference_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = model.layers().len();
    for (k, layer) in model.layers().iter().enumerate() {
        let w = &layer.weight;
        let mut out: Vec<f64> = (0..w.rows())
            .map(|i| {
                w.row(i).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + layer.bias.data()[i]
            })
            .collect();
        if k + 1 < n {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h
}

fn ce(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    lse - row[t]
}

/// Batch loss recomputed from scratch with a fixed inflation mask and
/// `β = √2·ε·∏ ‖W_k v_k‖₂`.
pub fn reference_step_loss(
    model: &MlpModel,
    x: &Tensor,
    labels: &[usize],
    mask: &[Vec<bool>],
    epsilon: f64,
) -> f64 {
    let beta = std::f64::consts::SQRT_2
        * epsilon
        * model
            .layers()
            .iter()
            .zip(model.power_vectors())
            .map(|(l, v)| {
                (0..l.weight.rows())
                    .map(|i| l.weight.row(i).iter().zip(v).map(|(a, b)| a * b).sum::<f64>().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .product::<f64>();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut z = reference_forward(model, x.row(i));
            for (zj, &m) in z.iter_mut().zip(&mask[i]) {
                if m {
                    *zj += beta;
                }
            }
            ce(&z, t)
        })
        .sum();
    total / labels.len() as f64
}

fn inflation_mask(model: &MlpModel, x: &Tensor, labels: &[usize], strategy: Strategy) -> Vec<Vec<bool>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let z = reference_forward(model, x.row(i));
            let rival = lmt::certify::strongest_rival(&z, t);
            (0..z.len())
                .map(|j| match strategy {
                    Strategy::Baseline => false,
                    Strategy::Lmt => j != t,
                    Strategy::LcLmt => j == rival,
                })
                .collect()
        })
        .collect()
}

/// Worst relative error `|a − n| / max(|a|, |n|, 1e-2)` between autodiff and
/// central differences (step 1e-6) over every weight and bias of a 2-16-3
/// net, for each strategy with β differentiated.
pub fn worst_training_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut model = random_model(&mut r, &[2, 16, 3]);
    lmt::lipschitz::training_lipschitz(&mut model).unwrap();
    let x = Tensor::matrix(
        8,
        2,
        (0..16).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for strategy in Strategy::ALL {
        let config = TrainConfig::new(strategy, 0.3);
        let eps = config.training_epsilon();
        let mask = inflation_mask(&model, &x, &labels, strategy);
        let beta = std::f64::consts::SQRT_2
            * eps
            * model
                .layers()
                .iter()
                .zip(model.power_vectors())
                .map(|(l, v)| {
                    let wv = l.weight.matmul(&Tensor::matrix(v.len(), 1, v.clone()).unwrap()).unwrap();
                    wv.l2_norm()
                })
                .product::<f64>();
        let step = inflated_loss_gradients(&model, &x, &labels, &config, beta).unwrap();
        for k in 0..model.layers().len() {
            for (is_weight, var) in [(true, step.params.weights[k]), (false, step.params.biases[k])] {
                let analytic = step.grads.get(var).unwrap().to_vec();
                for (p, &a) in analytic.iter().enumerate() {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    let bump = |m: &mut MlpModel, d: f64| {
                        let l = &mut m.layers_mut()[k];
                        let t = if is_weight { &mut l.weight } else { &mut l.bias };
                        let mut data = t.data().to_vec();
                        data[p] += d;
                        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
                    };
                    bump(&mut plus, h);
                    bump(&mut minus, -h);
                    let numeric = (reference_step_loss(&plus, &x, &labels, &mask, eps)
                        - reference_step_loss(&minus, &x, &labels, &mask, eps))
                        / (2.0 * h);
                    let diff = (a - numeric).abs();
                    worst = worst.max(diff / a.abs().max(numeric.abs()).max(1e-2));
                }
            }
        }
    }
    worst
}

/// Worst relative error of the input gradient of the mean cross-entropy of a
/// 2-16-3 net against central differences.
pub fn worst_input_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = random_model(&mut r, &[2, 16, 3]);
    let xdata: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
    let mut tape = lmt::Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.param(Tensor::matrix(5, 2, xdata.clone()).unwrap());
    let logits = model.forward_on(&mut tape, &params, xv).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv).unwrap().to_vec();
    let f = |d: &[f64]| {
        labels
            .iter()
            .enumerate()
            .map(|(i, &t)| ce(&reference_forward(&model, &d[2 * i..2 * i + 2]), t))
            .sum::<f64>()
            / labels.len() as f64
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (p, &a) in analytic.iter().enumerate() {
        let mut plus = xdata.clone();
        let mut minus = xdata.clone();
        plus[p] += h;
        minus[p] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let diff = (a - numeric).abs();
        worst = worst.max(diff / a.abs().max(numeric.abs()).max(1e-2));
    }
    worst
}

/// Worst `|σ_power − σ_dense|` over `count` random matrices with up to
/// `max_dim` rows and columns.
pub fn worst_power_iteration_error(count: usize, max_dim: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (m, n) = (r.random_range(1..=max_dim), r.random_range(1..=max_dim));
        let scale = r.random_range(0.1..3.0);
        let w = gaussian_matrix(&mut r, m, n, scale);
        let model =
            MlpModel::with_seed(vec![Dense::new(w.clone(), Tensor::zeros(vec![m])).unwrap()], r.random())
                .unwrap();
        let est = certified_lipschitz(&model).unwrap().global_bound;
        worst = worst.max((est - sigma_max_dense(&w)).abs());
    }
    worst
}

/// One 2-class linear instance: weights, bias, a point, its label and the
/// analytic distance to the decision boundary.
pub struct LinearInstance {
    pub model: MlpModel,
    pub x: Vec<f64>,
    pub label: usize,
    pub distance: f64,
}

/// Random instances whose closest boundary point lies well inside the box.
pub fn linear_instances(count: usize, dim: usize, seed: u64) -> Vec<LinearInstance> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let w = gaussian_matrix(&mut r, 2, dim, 1.0);
            let dw: Vec<f64> = w.row(0).iter().zip(w.row(1)).map(|(a, b)| a - b).collect();
            let dn = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x: Vec<f64> = (0..dim).map(|_| r.random_range(0.4..0.6)).collect();
            let distance = r.random_range(0.1..0.3);
            let label = r.random_range(0..2);
            // choose the bias gap so that x sits `distance` from the boundary
            // on the side of `label`
            let side = if label == 0 { 1.0 } else { -1.0 };
            let g: f64 = dw.iter().zip(&x).map(|(a, b)| a * b).sum();
            let db = side * distance * dn - g;
            let bias = Tensor::vector(vec![db, 0.0]).unwrap();
            let model = MlpModel::from_layers(vec![Dense::new(w, bias).unwrap()]).unwrap();
            LinearInstance {
                model,
                x,
                label,
                distance,
            }
        })
        .collect()
}

/// Worst `|‖δ‖ − d| / d` of CW against the analytic distance, or `INFINITY`
/// if some attack failed.
pub fn worst_cw_linear_error(count: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in linear_instances(count, 8, seed) {
        let xs = Tensor::matrix(1, inst.x.len(), inst.x.clone()).unwrap();
        let r = cw_l2_attack_batch(&inst.model, &xs, &[inst.label], &AttackConfig::default())
            .unwrap()
            .remove(0);
        if !r.success {
            return f64::INFINITY;
        }
        worst = worst.max((r.perturbation_norm - inst.distance).abs() / inst.distance);
    }
    worst
}

/// Counts pairs with `‖f(x) − f(x′)‖₂ > L·‖x − x′‖₂`. Half the pairs are
/// independent uniform points in `[0,1]^d`, half are `x + δ` along a random
/// direction with `‖δ‖₂` log-uniform in `[1e-3, 10]`.
pub fn lipschitz_violations(model: &MlpModel, pairs: usize, seed: u64) -> usize {
    let lipschitz = certified_lipschitz(model).unwrap().global_bound;
    let d = model.input_dim();
    let mut r = rng(seed);
    let mut a = Vec::with_capacity(pairs * d);
    let mut b = Vec::with_capacity(pairs * d);
    for i in 0..pairs {
        let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = if i % 2 == 0 {
            (0..d).map(|_| r.random::<f64>()).collect()
        } else {
            let dir: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let len = 10f64.powf(r.random_range(-3.0..1.0));
            x.iter().zip(&dir).map(|(xi, di)| xi + len * di / n).collect()
        };
        a.extend(x);
        b.extend(y);
    }
    let fa = model.forward(&Tensor::matrix(pairs, d, a.clone()).unwrap()).unwrap();
    let fb = model.forward(&Tensor::matrix(pairs, d, b.clone()).unwrap()).unwrap();
    (0..pairs)
        .filter(|&i| {
            let dx = a[i * d..(i + 1) * d]
                .iter()
                .zip(&b[i * d..(i + 1) * d])
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            let dy = fa
                .row(i)
                .iter()
                .zip(fb.row(i))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            // rounding allowance only
            dy > lipschitz * dx * (1.0 + 1e-9) + 1e-12
        })
        .count()
}

/// Certifies every row of `xs` and attacks the certified ones inside their
/// radius. Returns `(checked, violations)`.
pub fn certificate_violations(
    model: &MlpModel,
    xs: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> (usize, usize) {
    let lipschitz = certified_lipschitz(model).unwrap().global_bound;
    let logits = model.forward(xs).unwrap();
    let cert = certify_logits(&logits, labels, lipschitz, 0.0).unwrap();
    let checks = verify_certificates(model, xs, &cert.reports, config, None).unwrap();
    let checked = checks
        .iter()
        .filter(|c| !matches!(c, CertificateCheck::Skipped(_)))
        .count();
    let violations = checks
        .iter()
        .filter(|c| matches!(c, CertificateCheck::Violation { .. }))
        .count();
    (checked, violations)
}

fn idx_header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out
}

/// Writes a small MNIST-shaped dataset: class `k` lights up a horizontal band
/// of rows `2k..2k+3`, plus deterministic noise.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, gzip: bool) {
    std::fs::create_dir_all(dir).unwrap();
    let mut r = rng(7);
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut images = idx_header(0x803, &[n as u32, 28, 28]);
        let mut labels = idx_header(0x801, &[n as u32]);
        for i in 0..n {
            let k = (i % 10) as u8;
            labels.push(k);
            for row in 0..28 {
                for _ in 0..28 {
                    let lit = row >= 2 * k as usize + 4 && row < 2 * k as usize + 7;
                    let base: u8 = if lit { 200 } else { 0 };
                    images.push(base.saturating_add(r.random_range(0..40)));
                }
            }
        }
        for (name, bytes) in [
            (format!("{prefix}-images-idx3-ubyte"), images),
            (format!("{prefix}-labels-idx1-ubyte"), labels),
        ] {
            if gzip {
                let f = std::fs::File::create(dir.join(format!("{name}.gz"))).unwrap();
                let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
                enc.write_all(&bytes).unwrap();
                enc.finish().unwrap();
            } else {
                std::fs::write(dir.join(name), bytes).unwrap();
            }
        }
    }
}

/// Checks inflation postconditions, the rank-displacement bounds and the
/// per-row loss ordering on `count` random logit vectors. Returns the number
/// of vectors that break any of them.
pub fn inflation_semantics_violations(count: usize, seed: u64) -> usize {
    use lmt::training::{inflate_lclmt, inflate_lmt};
    let mut r = rng(seed);
    let rank = |z: &[f64], t: usize| z.iter().enumerate().filter(|&(i, &v)| i != t && v >= z[t]).count();
    let mut bad = 0;
    for n in 0..count {
        let c = r.random_range(2..=10);
        // every other vector is drawn from a coarse grid to force ties
        let z: Vec<f64> = (0..c)
            .map(|_| {
                if n % 2 == 0 {
                    r.random_range(-20.0..20.0)
                } else {
                    f64::from(r.random_range(-2i32..=2))
                }
            })
            .collect();
        let t = r.random_range(0..c);
        let beta = if n % 7 == 0 { 0.0 } else { r.random_range(0.0..15.0) };
        let row = Tensor::matrix(1, c, z.clone()).unwrap();
        let lmt = inflate_lmt(&row, &[t], beta).unwrap().into_data();
        let lc = inflate_lclmt(&row, &[t], beta).unwrap().into_data();
        let best = (0..c).filter(|&i| i != t).map(|i| z[i]).fold(f64::NEG_INFINITY, f64::max);
        let v = (0..c).find(|&i| i != t && z[i] == best).unwrap();
        let lmt_ok = (0..c).all(|i| lmt[i] == if i == t { z[i] } else { z[i] + beta });
        let lc_ok = (0..c).all(|i| lc[i] == if i == v { z[i] + beta } else { z[i] });
        let rank_ok = rank(&lc, t) <= rank(&z, t) + 1 && rank(&lmt, t) < rank(&z, t) + c;
        let (l0, l1, l2) = (ce(&z, t), ce(&lc, t), ce(&lmt, t));
        let tol = 1e-12 * l2.abs().max(1.0);
        let order_ok = l2 >= l1 - tol && l1 >= l0 - tol;
        if !(lmt_ok && lc_ok && rank_ok && order_ok) {
            bad += 1;
        }
    }
    bad
}

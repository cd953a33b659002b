use proptest::prelude::*;
use sciml_core::autodiff::Tape;
use sciml_core::convnet::{conv2d_raw, steady_counts_uniform, transpose_conv1d, ConvGeom, Crop};
use sciml_core::generative::{gradient_penalty, GanSettings, WganModel};
use sciml_core::nn::{mlp_forward, softmax, Activation, MlpConfig, MlpParams, MlpVars, forward_on_tape};
use sciml_core::operatornet::{dft2, spectral_conv, DeepOnet, GridFunction2D, SensorSet, SpectralKernel, half_mode_count};
use sciml_core::optim::{minibatch_train, Optimizer, OptimizerKind, Schedule};
use sciml_core::pdesolve::{dense_solve, thomas_solve, TridiagonalSystem};
use sciml_core::{Rng, Tensor};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = rng.normal_tensor(&[m, k]);
        let b = rng.normal_tensor(&[k, l]);
        let c = rng.normal_tensor(&[l, n]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.max_abs().max(1.0);
        prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-12);
    }

    #[test]
    fn outer_entries(u in prop::collection::vec(-10.0f64..10.0, 1..6), v in prop::collection::vec(-10.0f64..10.0, 1..6)) {
        let o = Tensor::outer(&Tensor::vector(u.clone()), &Tensor::vector(v.clone())).unwrap();
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                prop_assert_eq!(o.at(&[i, j]), ui * vj);
            }
        }
    }

    #[test]
    fn rng_streams_repeat(seed in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn smooth_mlp_gradients_match_finite_differences(seed in any::<u64>(), depth in 1usize..4, sine in any::<bool>()) {
        let act = if sine { Activation::Sine } else { Activation::Tanh };
        let mut widths = vec![2];
        widths.extend(std::iter::repeat_n(4, depth));
        widths.push(1);
        let cfg = MlpConfig::new(widths, act);
        let mut rng = Rng::new(seed);
        let p = MlpParams::init(&cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[3, 2]);
        let tape = Tape::record(|t| {
            let vars = MlpVars::params(t, &p);
            let xv = t.constant(x.clone());
            let out = forward_on_tape(t, &cfg, &vars, xv)?.out;
            let sq = t.square(out)?;
            t.mean(sq)
        }).unwrap();
        prop_assert!(tape.grad_check(1e-6).unwrap().max_rel_error < 1e-5);
    }

    #[test]
    fn linear_network_collapses_to_affine_map(seed in any::<u64>(), depth in 1usize..5) {
        let mut widths = vec![3];
        widths.extend(std::iter::repeat_n(5, depth));
        widths.push(2);
        let cfg = MlpConfig::new(widths, Activation::Linear);
        let mut rng = Rng::new(seed);
        let p = MlpParams::init(&cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[4, 3]);
        let b = mlp_forward(&cfg, &p, &Tensor::zeros(&[1, 3])).unwrap();
        let cols: Vec<Tensor> = (0..3)
            .map(|k| {
                let mut e = Tensor::zeros(&[1, 3]);
                e.set(&[0, k], 1.0);
                mlp_forward(&cfg, &p, &e).unwrap().sub(&b).unwrap()
            })
            .collect();
        let y = mlp_forward(&cfg, &p, &x).unwrap();
        for i in 0..4 {
            for o in 0..2 {
                let affine = b.at(&[0, o]) + (0..3).map(|k| x.at(&[i, k]) * cols[k].at(&[0, o])).sum::<f64>();
                prop_assert!((affine - y.at(&[i, o])).abs() < 1e-12 * y.max_abs().max(1.0) * 10.0);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(xi in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let a = softmax(&xi);
        let shifted: Vec<f64> = xi.iter().map(|v| v + c).collect();
        let b = softmax(&shifted);
        let arg = |p: &[f64]| p.iter().enumerate().fold(0, |m, (i, v)| if *v > p[m] { i } else { m });
        prop_assert_eq!(arg(&a), arg(&b));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gd_on_quadratic_converges_iff_below_two(a in 0.1f64..10.0, ratio in 0.05f64..3.9) {
        prop_assume!((ratio - 2.0).abs() > 0.02);
        let eta = ratio / a;
        let mut theta = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::gd(eta);
        let mut last = f64::INFINITY;
        let mut monotone = true;
        for _ in 0..1000 {
            let g = vec![theta[0].scale(a)];
            let loss = 0.5 * a * theta[0].item().powi(2);
            monotone &= loss <= last;
            last = loss;
            opt.step(&mut theta, &g).unwrap();
        }
        let t = theta[0].item().abs();
        if ratio < 2.0 {
            prop_assert!(monotone);
            if (1.0 - ratio).abs() < 0.98 {
                prop_assert!(t < 1e-6);
            }
        } else {
            prop_assert!(!(t < 1.0));
        }
    }

    #[test]
    fn adam_rate_falls_with_gradient_magnitude(g1 in 0.01f64..10.0, factor in 1.0f64..10.0) {
        let rate = |g: f64| {
            let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-2, Schedule::Constant);
            let mut p = vec![Tensor::scalar(0.0)];
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            opt.effective_lr()[0].item()
        };
        prop_assert!(rate(g1 * factor) <= rate(g1));
    }

    #[test]
    fn single_batch_training_is_plain_gd(seed in any::<u64>(), eta in 0.01f64..0.5) {
        let mut rng = Rng::new(seed);
        let target = rng.normal_tensor(&[3]);
        let grad = |p: &[Tensor]| p[0].sub(&target).unwrap();
        let mut a = vec![Tensor::zeros(&[3])];
        let mut opt = Optimizer::gd(eta);
        minibatch_train(&mut a, 5, &mut opt, 20, 1, seed, |p, _| {
            let d = grad(p);
            Ok((0.5 * d.norm2().powi(2), vec![d]))
        }, None).unwrap();
        let mut b = Tensor::zeros(&[3]);
        for _ in 0..20 {
            b = b.sub(&grad(&[b.clone()]).scale(eta)).unwrap();
        }
        prop_assert_eq!(a[0].data(), b.data());
    }

    #[test]
    fn thomas_matches_dense_solve(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = Rng::new(seed);
        let sub: Vec<f64> = (1..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let sup: Vec<f64> = (1..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let diag: Vec<f64> = (0..n).map(|_| 2.5 + rng.uniform()).collect();
        let rhs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = diag[i];
            if i + 1 < n {
                dense[i][i + 1] = sup[i];
                dense[i + 1][i] = sub[i];
            }
        }
        let t = thomas_solve(&TridiagonalSystem { sub, diag, sup, rhs: rhs.clone() }).unwrap();
        let d = dense_solve(dense, rhs).unwrap();
        for (a, b) in t.iter().zip(&d) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn convolution_is_linear_and_keeps_extent(seed in any::<u64>(), k in 0usize..3, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let ks = 2 * k + 1;
        let mut rng = Rng::new(seed);
        let u = rng.normal_tensor(&[1, 6, 5, 2]);
        let v = rng.normal_tensor(&[1, 6, 5, 2]);
        let w = rng.normal_tensor(&[ks, ks, 2, 3]);
        let g = ConvGeom::square(1, k);
        let lhs = conv2d_raw(&u.scale(a).add(&v.scale(b)).unwrap(), &w, g).unwrap();
        prop_assert_eq!(lhs.shape(), &[1, 6, 5, 3]);
        let rhs = conv2d_raw(&u, &w, g).unwrap().scale(a).add(&conv2d_raw(&v, &w, g).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12 * 100.0);
    }

    #[test]
    fn transpose_convolution_is_the_adjoint(seed in any::<u64>(), n in 2usize..7, kernel in 1usize..4, stride in 1usize..3) {
        let mut rng = Rng::new(seed);
        let kv: Vec<f64> = (0..kernel).map(|_| rng.normal()).collect();
        let full = (n - 1) * stride + kernel;
        let crop = Crop { leading: 0, trailing: 0 };
        // Column j of the transpose map is the scattered kernel; row j of the strided
        // convolution over the full output gathers the same taps.
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = transpose_conv1d(&e, &kv, stride, crop).unwrap();
            prop_assert_eq!(col.len(), full);
            for (i, c) in col.iter().enumerate() {
                let tap = i.checked_sub(j * stride).filter(|&t| t < kernel).map_or(0.0, |t| kv[t]);
                prop_assert_eq!(*c, tap);
            }
        }
    }

    #[test]
    fn checkerboard_rule(kernel in 1usize..5, stride in 1usize..4) {
        prop_assert_eq!(steady_counts_uniform(kernel, stride).unwrap(), kernel % stride == 0);
    }

    #[test]
    fn parseval(seed in any::<u64>(), p1 in 1u32..5, p2 in 1u32..5, l1 in 0.5f64..3.0, l2 in 0.5f64..3.0) {
        let (n1, n2) = (1usize << p1, 1usize << p2);
        let mut rng = Rng::new(seed);
        let u = GridFunction2D::new(n1, n2, l1, l2, (0..n1 * n2).map(|_| rng.normal()).collect()).unwrap();
        let spec: f64 = dft2(&u).iter().map(|c| c.norm_sqr()).sum();
        prop_assert!(rel(u.l2_norm().powi(2), l1 * l2 * spec) < 1e-10);
    }

    #[test]
    fn spectral_conv_is_linear_and_shift_equivariant(seed in any::<u64>(), shift in 0usize..8, a in -2.0f64..2.0) {
        let n = 8;
        let mut rng = Rng::new(seed);
        let field = |rng: &mut Rng| GridFunction2D::new(n, n, 1.0, 1.0, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
        let (u, v) = (field(&mut rng), field(&mut rng));
        let w = rng.normal_tensor(&[half_mode_count(2, 2), 1, 1, 2]);
        let mut w = w;
        w.set(&[0, 0, 0, 1], 0.0);
        let kern = SpectralKernel::new(2, 2, w).unwrap();
        let conv = |g: &GridFunction2D| spectral_conv(std::slice::from_ref(g), &kern).unwrap().remove(0);
        let combo = GridFunction2D::new(n, n, 1.0, 1.0, u.values.iter().zip(&v.values).map(|(x, y)| a * x + y).collect()).unwrap();
        let (cu, cv, cc) = (conv(&u), conv(&v), conv(&combo));
        for i in 0..n * n {
            prop_assert!((cc.values[i] - (a * cu.values[i] + cv.values[i])).abs() < 1e-10);
        }
        let roll = |g: &GridFunction2D| {
            let vals = (0..n * n).map(|i| g.at((i / n + n - shift) % n, i % n)).collect();
            GridFunction2D::new(n, n, 1.0, 1.0, vals).unwrap()
        };
        let lhs = conv(&roll(&u));
        let rhs = roll(&cu);
        for i in 0..n * n {
            prop_assert!((lhs.values[i] - rhs.values[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn deeponet_ignores_consistent_sensor_permutation(seed in any::<u64>(), x in -1.0f64..1.0) {
        let m = 6;
        let mut rng = Rng::new(seed);
        let sensors = SensorSet::uniform(m, 0.0, 1.0).unwrap();
        let net = DeepOnet::new(
            sensors.clone(),
            MlpConfig::new(vec![m, 8, 4], Activation::Tanh),
            MlpConfig::new(vec![1, 8, 4], Activation::Tanh),
            &mut rng,
        ).unwrap();
        let a: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let mut branch = net.branch.clone();
        let w = &net.branch.layers[0].w;
        let rows = w.shape()[0];
        let mut pw = Tensor::zeros(w.shape());
        for r in 0..rows {
            for (c, &p) in perm.iter().enumerate() {
                pw.set(&[r, c], w.at(&[r, p]));
            }
        }
        branch.layers[0].w = pw;
        let points = perm.iter().map(|&p| sensors.points[p]).collect();
        let permuted = DeepOnet::from_parts(SensorSet::new(points).unwrap(), net.branch_cfg.clone(), net.trunk_cfg.clone(), branch, net.trunk.clone()).unwrap();
        let pa: Vec<f64> = perm.iter().map(|&p| a[p]).collect();
        let y0 = net.forward(&a, &[x]).unwrap();
        let y1 = permuted.forward(&pa, &[x]).unwrap();
        prop_assert!((y0 - y1).abs() < 1e-12);
    }

    #[test]
    fn penalty_of_scaled_linear_critic(seed in any::<u64>(), s in 0.1f64..4.0, angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = Rng::new(seed);
        let mut m = WganModel::new(
            MlpConfig::new(vec![2, 2], Activation::Tanh),
            MlpConfig::new(vec![2, 1], Activation::Tanh),
            GanSettings::default(),
            &mut rng,
        ).unwrap();
        // d_s(x) = w . (s x) with |w| = 1 has gradient norm s everywhere.
        m.critic.layers[0].w = Tensor::new(vec![1, 2], vec![s * angle.cos(), s * angle.sin()]).unwrap();
        let real = rng.normal_tensor(&[8, 2]);
        let fake = rng.normal_tensor(&[8, 2]);
        let p = gradient_penalty(&m, &real, &fake, &mut rng).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert!((p - (s - 1.0).powi(2)).abs() < 1e-12);
    }
}

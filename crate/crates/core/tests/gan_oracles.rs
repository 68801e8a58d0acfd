//! Finite-difference checks of the network scores and losses, and spectral
//! normalization against an exact singular value oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanform::autodiff::{PowerState, Tape, Tensor, Var};
use urbanform::gan::{
    geo_loss, l1_loss, lsgan_d_loss, lsgan_g_loss, spectral_normalize, total_g_objective_var, Discriminator,
    Generator, GeneratorConfig, LossWeights, StageState,
};
use urbanform::Result;

const TRIALS: u64 = 20;

fn cfg() -> GeneratorConfig {
    GeneratorConfig {
        input_channels: 3,
        base_channels: 4,
        max_resolution: 16,
        noise_enabled: false,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative error of tape gradients of a scalar `f` against central differences.
fn max_rel_error(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let value = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x)).collect();
        let out = f(&mut t, &vars).unwrap();
        t.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars).unwrap();
    assert_eq!(tape.value(out).len(), 1);
    tape.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (ti, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[ti]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].values_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].values_mut()[i] -= h;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

/// Relative error of directional derivatives along random unit directions.
fn max_directional_error(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let value = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x)).collect();
        let out = f(&mut t, &vars).unwrap();
        t.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let dirs: Vec<Vec<f64>> = inputs.iter().map(|x| (0..x.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let norm = dirs.iter().flatten().map(|d| d * d).sum::<f64>().sqrt();
        let shifted = |k: f64| {
            let xs: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| {
                    let mut x = x.clone();
                    x.values_mut().iter_mut().zip(d).for_each(|(v, d)| *v += k * h * d / norm);
                    x
                })
                .collect();
            value(&xs)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let analytic: f64 = grads.iter().flatten().zip(dirs.iter().flatten()).map(|(g, d)| g * d / norm).sum();
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn weighted_sum(t: &mut Tape<f64>, out: Var) -> Result<Var> {
    let n = t.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64 * 0.5).collect();
    t.weighted_mean(out, &w)
}

#[test]
fn loss_gradients_on_random_tensors() {
    let w = LossWeights::default();
    let final_stage = StageState::grown(2, true, true);
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let scores = [random(&mut rng, &[4, 1], -2.0, 2.0), random(&mut rng, &[4, 1], -2.0, 2.0)];
        let maps = [random(&mut rng, &[2, 1, 4, 4], 0.05, 0.95), random(&mut rng, &[2, 1, 4, 4], 0.05, 0.95)];
        let water: Vec<f64> = (0..32).map(|_| rng.random_bool(0.4) as u8 as f64).collect();

        let e = max_rel_error(&scores, &|t, v| lsgan_d_loss(t, v[0], v[1]));
        assert!(e < 1e-4, "lsgan d trial {trial}: {e:e}");
        let e = max_rel_error(&scores[..1], &|t, v| lsgan_g_loss(t, v[0]));
        assert!(e < 1e-4, "lsgan g trial {trial}: {e:e}");
        let e = max_rel_error(&maps, &|t, v| l1_loss(t, v[0], v[1]));
        assert!(e < 1e-4, "l1 trial {trial}: {e:e}");
        let e = max_rel_error(&maps[..1], &|t, v| geo_loss(t, v[0], &water));
        assert!(e < 1e-4, "geo trial {trial}: {e:e}");
        let all = [maps[0].clone(), maps[1].clone(), scores[0].clone()];
        let e = max_rel_error(&all, &|t, v| {
            let adv = lsgan_g_loss(t, v[2])?;
            let l1 = l1_loss(t, v[0], v[1])?;
            let geo = geo_loss(t, v[0], &water)?;
            total_g_objective_var(t, Some(adv), l1, Some(geo), &w, &final_stage)
        });
        assert!(e < 1e-4, "objective trial {trial}: {e:e}");
    }
}

#[test]
fn discriminator_score_gradients() {
    for sn in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Discriminator::<f64>::new(&cfg(), sn, &mut rng).unwrap();
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let stage = match trial % 3 {
                0 => StageState::grown(1, false, false),
                1 => StageState::fading(2, 0.35),
                _ => StageState::grown(2, true, true),
            };
            let r = stage.resolution();
            let inputs = [random(&mut rng, &[2, 1, r, r], 0.0, 1.0), random(&mut rng, &[2, 3, r, r], -1.0, 1.0)];
            let e = max_rel_error(&inputs, &|t, v| {
                let vars = d.store.bind_frozen(t);
                let s = d.forward(t, &vars, v[0], v[1], &stage)?;
                weighted_sum(t, s)
            });
            assert!(e < 1e-4, "sn={sn} trial {trial}: {e:e}");
        }
    }
}

#[test]
fn generator_output_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = Generator::<f64>::new(cfg(), &mut rng).unwrap();
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let stage = if trial % 2 == 0 { StageState::fading(2, 0.6) } else { StageState::grown(2, true, true) };
        let inputs = [random(&mut rng, &[2, 3, 16, 16], -1.0, 1.0)];
        let e = max_directional_error(
            &inputs,
            &|t, v| {
                let vars = g.store.bind_frozen(t);
                let (out, _) = g.forward(t, &vars, v[0], &stage, true)?;
                weighted_sum(t, out)
            },
            &mut rng,
        );
        assert!(e < 1e-4, "trial {trial}: {e:e}");
    }
}

/// Largest singular value from cyclic Jacobi on `MᵀM`.
fn sigma_max_oracle(m: &[f64], rows: usize, cols: usize) -> f64 {
    let mut a = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            a[i * cols + j] = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..cols)
            .flat_map(|i| (0..cols).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * cols + j].powi(2))
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..cols {
            for q in p + 1..cols {
                let apq = a[p * cols + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * cols + q] - a[p * cols + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..cols {
                    let akp = a[k * cols + p];
                    let akq = a[k * cols + q];
                    a[k * cols + p] = c * akp - s * akq;
                    a[k * cols + q] = s * akp + c * akq;
                }
                for k in 0..cols {
                    let apk = a[p * cols + k];
                    let aqk = a[q * cols + k];
                    a[p * cols + k] = c * apk - s * aqk;
                    a[q * cols + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..cols).map(|i| a[i * cols + i]).fold(0.0, f64::max).sqrt()
}

#[test]
fn jacobi_oracle_on_known_matrices() {
    let diag = [3.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0];
    assert!((sigma_max_oracle(&diag, 3, 3) - 5.0).abs() < 1e-12);
    // rank one: u vᵀ with |u| = 5, |v| = 2
    let u = [3.0, 4.0];
    let v = [0.0, 2.0, 0.0];
    let m: Vec<f64> = (0..6).map(|i| u[i / 3] * v[i % 3]).collect();
    assert!((sigma_max_oracle(&m, 2, 3) - 10.0).abs() < 1e-10);
}

#[test]
fn power_iteration_matches_svd_oracle() {
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let m: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let exact = sigma_max_oracle(&m, 16, 16);
        let u0: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ps = PowerState::new(u0, 16);
        for _ in 0..20 {
            ps.step(&m);
        }
        let est = ps.sigma(&m);
        assert!((est - exact).abs() < 1e-3, "trial {trial}: {est} vs {exact}");

        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::new(vec![16, 1, 4, 4], m.clone()).unwrap());
        let normalized = spectral_normalize(&mut tape, w, &mut ps).unwrap();
        let sigma = sigma_max_oracle(tape.value(normalized), 16, 16);
        assert!(sigma <= 1.0 + 1e-3, "trial {trial}: normalized sigma {sigma}");
    }
}

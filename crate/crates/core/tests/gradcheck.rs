//! Central finite-difference checks of every differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanform::autodiff::{Tape, Tensor, Var};
use urbanform::Result;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            // keep clear of the ReLU kink at zero
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_mean(out, &w)
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let root = project(&mut tape, out, 99).unwrap();
    tape.scalar(root)
}

/// Max relative error between tape gradients and central differences.
fn max_rel_error(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let root = project(&mut tape, out, 99).unwrap();
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].values_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].values_mut()[i] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let a = analytic[ti][i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn check(name: &str, shapes: &[&[usize]], trials: u64, build: &Build) {
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let err = max_rel_error(&inputs, build);
        assert!(err < 1e-4, "{name} trial {trial}: relative error {err:e}");
    }
}

#[test]
fn conv2d_gradients() {
    check("conv s1 p1", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], 4, &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check("conv s2 p1", &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]], 4, &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
    check("conv 1x1", &[&[2, 3, 4, 4], &[2, 3, 1, 1]], 4, &|t, v| {
        t.conv2d(v[0], v[1], None, 1, 0)
    });
    check("conv 4x4 s2", &[&[1, 2, 8, 8], &[2, 2, 4, 4], &[2]], 2, &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    });
}

#[test]
fn resampling_gradients() {
    check("upsample", &[&[2, 2, 3, 3]], 4, &|t, v| t.upsample2x(v[0]));
    check("downsample", &[&[2, 2, 4, 6]], 4, &|t, v| t.downsample2x_avg(v[0]));
    check("mean_spatial", &[&[2, 3, 3, 2]], 4, &|t, v| t.mean_spatial(v[0]));
}

#[test]
fn activation_gradients() {
    check("relu", &[&[2, 2, 3, 3]], 4, &|t, v| Ok(t.relu(v[0])));
    check("leaky", &[&[2, 2, 3, 3]], 4, &|t, v| Ok(t.leaky_relu(v[0], 0.2)));
    check("sigmoid", &[&[2, 2, 3, 3]], 4, &|t, v| Ok(t.sigmoid(v[0])));
}

#[test]
fn batch_norm_gradients() {
    check("bn train", &[&[3, 2, 3, 3], &[2], &[2]], 6, &|t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)
    });
    let mean = [0.1, -0.2];
    let var = [0.5, 1.5];
    check("bn eval", &[&[2, 2, 3, 3], &[2], &[2]], 4, &move |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0)
    });
}

#[test]
fn structural_gradients() {
    check("concat", &[&[2, 2, 3, 3], &[2, 1, 3, 3]], 4, &|t, v| t.concat_channels(v[0], v[1]));
    check("add", &[&[2, 5], &[2, 5]], 4, &|t, v| t.add(v[0], v[1]));
    check("mix", &[&[2, 5], &[2, 5]], 4, &|t, v| t.mix(v[0], v[1], 0.3));
    check("scale", &[&[7]], 2, &|t, v| Ok(t.scale(v[0], -1.7)));
}

#[test]
fn spectral_divide_gradients() {
    let u = [0.6, -0.8, 0.0];
    let vv = [0.5, 0.5, 0.5, 0.5];
    // shift W along u·vᵀ so that σ = uᵀWv stays well above zero
    let shift: Vec<f64> = (0..12).map(|i| 4.0 * u[i / 4] * vv[i % 4]).collect();
    check("sn", &[&[3, 1, 2, 2]], 6, &move |t, v| {
        let c = t.constant(vec![3, 1, 2, 2], shift.clone())?;
        let w = t.add(v[0], c)?;
        t.spectral_divide(w, &u, &vv, 1e-12)
    });
}

#[test]
fn loss_gradients() {
    check("l1", &[&[2, 1, 3, 3], &[2, 1, 3, 3]], 4, &|t, v| t.l1_mean(v[0], v[1]));
    check("weighted", &[&[2, 1, 3, 3]], 4, &|t, v| {
        let w: Vec<f64> = (0..18).map(|i| (i % 2) as f64).collect();
        t.weighted_mean(v[0], &w)
    });
    check("half sq", &[&[4]], 4, &|t, v| t.half_squared_error(v[0], 1.0));
}

#[test]
fn composed_network_gradients() {
    // conv → bn → leaky → upsample → concat skip → conv → sigmoid
    check(
        "composed",
        &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3], &[3], &[3], &[1, 5, 3, 3]],
        3,
        &|t, v| {
            let h = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let (h, _) = t.batch_norm(h, v[3], v[4], None, 1e-5)?;
            let h = t.leaky_relu(h, 0.2);
            let h = t.upsample2x(h)?;
            let skip = t.downsample2x_avg(v[0])?;
            let skip = t.upsample2x(skip)?;
            let h = t.concat_channels(h, skip)?;
            let h = t.conv2d(h, v[5], None, 1, 1)?;
            Ok(t.sigmoid(h))
        },
    );
}

#[test]
fn sum_of_losses_backward_is_sum_of_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[2, 1, 2, 2]);
    let y = random_tensor(&mut rng, &[2, 1, 2, 2]);

    let mut tape = Tape::new();
    let xv = tape.param(&x);
    let yv = tape.leaf(&y);
    let a = tape.l1_mean(xv, yv).unwrap();
    let b = tape.half_squared_error(xv, 0.3).unwrap();
    let s = tape.add(a, b).unwrap();
    tape.backward(s).unwrap();
    let joint = tape.grad(xv).unwrap().to_vec();

    let mut tape = Tape::new();
    let xv = tape.param(&x);
    let yv = tape.leaf(&y);
    let a = tape.l1_mean(xv, yv).unwrap();
    let b = tape.half_squared_error(xv, 0.3).unwrap();
    tape.backward(a).unwrap();
    tape.backward(b).unwrap();
    let separate = tape.grad(xv).unwrap();
    for (j, s) in joint.iter().zip(separate) {
        assert!((j - s).abs() < 1e-14);
    }
}

#[test]
fn single_precision_gradients_within_1e_2() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f32> = (0..2 * 2 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f32> = (0..2 * 2 * 3 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f32> = (0..2 * 2 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |xv: &[f32]| -> (f32, Vec<f32>) {
        let mut tape = Tape::<f32>::new();
        let xt = Tensor::new(vec![2, 2, 4, 4], xv.to_vec()).unwrap();
        let kt = Tensor::new(vec![2, 2, 3, 3], k.clone()).unwrap();
        let a = tape.param(&xt);
        let b = tape.param(&kt);
        let o = tape.conv2d(a, b, None, 1, 1).unwrap();
        let o = tape.sigmoid(o);
        let r = tape.weighted_mean(o, &w).unwrap();
        tape.backward(r).unwrap();
        (tape.scalar(r), tape.grad(a).unwrap().to_vec())
    };
    let (_, g) = f(&x);
    let h = 1e-2f32;
    for i in 0..x.len() {
        let mut p = x.clone();
        p[i] += h;
        let mut m = x.clone();
        m[i] -= h;
        let num = (f(&p).0 - f(&m).0) / (2.0 * h);
        let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-3);
        assert!(rel < 1e-2, "f32 element {i}: {rel}");
    }
}

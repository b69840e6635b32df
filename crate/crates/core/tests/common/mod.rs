#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller keeps the helper free of extra distributions
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn binary(rng: &mut ChaCha8Rng, dims: &[usize], p: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Worst per-tensor relative error found by a gradient check.
#[derive(Debug)]
pub struct GradCheck {
    pub worst: f64,
    pub worst_name: String,
    pub checked: usize,
    /// Coordinates whose one-sided slopes disagree, i.e. the step crossed a
    /// ReLU or max-pool kink and central differences are not meaningful.
    pub kinked: usize,
}

/// Compares autograd gradients of the scalar `f()` with central differences
/// on up to `per_tensor` sampled coordinates of every variable. The error of
/// a tensor is `|a - n| / max(|a|, |n|)` over its sampled coordinates.
/// Coordinates where the forward and backward one-sided slopes differ by more
/// than the tolerance straddle a kink and are counted in `kinked` instead.
pub fn grad_check(
    vars: &[(String, Var)],
    f: &dyn Fn() -> candle_core::Result<Tensor>,
    per_tensor: usize,
    seed: u64,
) -> GradCheck {
    grad_check_eps(vars, f, per_tensor, seed, EPS)
}

pub fn grad_check_eps(
    vars: &[(String, Var)],
    f: &dyn Fn() -> candle_core::Result<Tensor>,
    per_tensor: usize,
    seed: u64,
    eps: f64,
) -> GradCheck {
    let mut rng = rng(seed);
    let grads = f().unwrap().backward().unwrap();
    let mut out = GradCheck {
        worst: 0.0,
        worst_name: String::new(),
        checked: 0,
        kinked: 0,
    };
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = values(var.as_tensor());
        let dims = var.dims().to_vec();
        let picks = sample(&mut rng, base.len(), per_tensor.min(base.len())).into_vec();
        let eval = |v: &[f64]| -> f64 {
            var.set(&Tensor::from_vec(v.to_vec(), dims.as_slice(), &Device::Cpu).unwrap())
                .unwrap();
            values(&f().unwrap())[0]
        };
        let centre = eval(&base);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let mut v = base.clone();
            v[i] = base[i] + eps;
            let plus = eval(&v);
            v[i] = base[i] - eps;
            let minus = eval(&v);
            let (up, down) = ((plus - centre) / eps, (centre - minus) / eps);
            if (up - down).abs() > REL_TOL * up.abs().max(down.abs()).max(1e-6) {
                out.kinked += 1;
                continue;
            }
            out.checked += 1;
            let numeric = (plus - minus) / (2.0 * eps);
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        eval(&base);
        let scale = na.sqrt().max(nn.sqrt());
        let err = if scale < 1e-9 { diff.sqrt() } else { diff.sqrt() / scale };
        if err > out.worst {
            out.worst = err;
            out.worst_name = name.clone();
        }
    }
    out
}

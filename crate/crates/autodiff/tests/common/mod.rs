//! Central finite-difference oracle. Uses forward evaluation only, so it is
//! independent of the backward rules it checks.

use hcl_autodiff::{ParamSet, Tape, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Normwise relative error between analytic and numeric gradients, per
/// trainable tensor. At most `max_entries` coordinates of each tensor are probed.
pub fn gradient_errors<F>(params: &ParamSet<f64>, max_entries: usize, forward: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Tape<f64>, &mut ParamSet<f64>) -> Var,
{
    let mut work = params.clone();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, &mut work);
    let grads = tape.backward(loss).expect("scalar loss");
    let eval = |p: &ParamSet<f64>| {
        let mut p = p.clone();
        let mut tape = Tape::new();
        let l = forward(&mut tape, &mut p);
        tape.value(l).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = Vec::new();
    for id in params.ids() {
        if !params.requires_grad(id) {
            continue;
        }
        let n = params.get(id).numel();
        let picks: Vec<usize> =
            if n <= max_entries { (0..n).collect() } else { sample(&mut rng, n, max_entries).into_vec() };
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => picks.iter().map(|&i| g[i]).collect(),
            None => vec![0.0; picks.len()],
        };
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[i] -= STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
        }
        out.push((params.name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn assert_gradients_match(errors: &[(String, f64)]) {
    assert!(!errors.is_empty(), "no trainable tensors were checked");
    for (name, err) in errors {
        assert!(*err < TOLERANCE, "gradient of {name} off by relative {err:e}");
    }
}

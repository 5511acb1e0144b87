//! Shared helpers for unit tests: finite-difference gradient checking and
//! seeded random buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// (step `h`) on every coordinate of every input. `f` must treat its inputs
/// as the only differentiable leaves. Returns the max relative error seen.
pub fn fd_check<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F, h: f64, tol: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::<f64>::new();
    let vars: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| tape.var(d.clone(), s).expect("var"))
        .collect();
    let loss = f(&vars).expect("forward");
    loss.backward().expect("backward");
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();

    let eval = |bufs: &[Vec<f64>]| -> f64 {
        let consts: Vec<Tensor<f64>> = bufs
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| Tensor::from_vec(d.clone(), s).expect("const"))
            .collect();
        f(&consts).expect("forward").item().expect("scalar loss")
    };

    let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    for i in 0..bufs.len() {
        for j in 0..bufs[i].len() {
            let orig = bufs[i][j];
            bufs[i][j] = orig + h;
            let up = eval(&bufs);
            bufs[i][j] = orig - h;
            let down = eval(&bufs);
            bufs[i][j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = grads[i][j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
            assert!(
                rel <= tol,
                "gradient mismatch at input {i} coord {j}: ad={ad} fd={fd} rel={rel}"
            );
        }
    }
    max_rel
}

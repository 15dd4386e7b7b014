//! Finite-difference verification of tape gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, TensorId};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences
/// (eps = 1e-2) for a scalar loss built by `build` from seeded random leaves.
///
/// Leaf values are drawn with magnitude in [0.2, 1.0] so relu/abs kinks are
/// never straddled. Returns max over leaves of
/// `max|g_ad - g_fd| / (max|g_fd| + 1e-8)`.
pub fn check_gradients<F>(leaf_dims: &[&[usize]], seed: u64, build: F) -> Result<f32>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaf_data: Vec<Vec<f32>> = leaf_dims
        .iter()
        .map(|dims| {
            let n: usize = dims.iter().product();
            (0..n)
                .map(|_| {
                    let mag = rng.gen_range(0.2f32..1.0);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        })
        .collect();
    check_gradients_from(&leaf_data, leaf_dims, build)
}

/// Same check with caller-supplied leaf values (used when the graph needs
/// realistically initialized parameters rather than uniform random leaves).
pub fn check_gradients_from<F>(leaf_data: &[Vec<f32>], leaf_dims: &[&[usize]], build: F) -> Result<f32>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{

    let eval = |data: &[Vec<f32>]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = leaf_dims
            .iter()
            .zip(data)
            .map(|(dims, d)| tape.leaf(dims, d.clone(), true))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::invalid("check_gradients", "builder must produce a scalar loss"));
        }
        Ok((tape, ids, loss))
    };

    let (mut tape, ids, loss) = eval(leaf_data)?;
    let grads = tape.backward(loss)?;

    // large enough that f32 forward rounding stays well below the
    // difference quotient; truncation error for smooth ops is ~eps^2
    let eps = 1e-2f64;
    let mut worst = 0.0f32;
    for (li, id) in ids.iter().enumerate() {
        let n = leaf_data[li].len();
        let g_ad = grads.get(*id, n);
        let mut g_fd = vec![0.0f32; n];
        for e in 0..n {
            let mut plus = leaf_data.to_vec();
            plus[li][e] += eps as f32;
            let (t, _, l) = eval(&plus)?;
            let fp = t.data(l)[0] as f64;
            let mut minus = leaf_data.to_vec();
            minus[li][e] -= eps as f32;
            let (t, _, l) = eval(&minus)?;
            let fm = t.data(l)[0] as f64;
            g_fd[e] = ((fp - fm) / (2.0 * eps)) as f32;
        }
        let inf = |v: &[f32]| v.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        let diff: Vec<f32> = g_ad.iter().zip(&g_fd).map(|(a, b)| a - b).collect();
        let err = inf(&diff) / (inf(&g_fd) + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

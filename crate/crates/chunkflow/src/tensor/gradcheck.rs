//! Finite-difference verification of tape gradients.
//!
//! Two modes: exhaustive per-coordinate checks for small parameter counts,
//! and directional checks (one random unit direction collapses the whole
//! parameter vector into a single derivative) for assembled networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;

/// Relative error between an analytic and a finite-difference derivative,
/// guarded for tiny magnitudes.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central-difference derivative of `loss_fn` with respect to every
/// coordinate of every parameter, compared against `analytic` gradients.
/// Returns the maximum relative error observed.
pub fn check_exhaustive<F>(
    store: &mut ParamStore,
    analytic: &[Tensor],
    step: f64,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for i in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data[i];
            store.get_mut(id).value.data[i] = orig + step;
            let up = loss_fn(store)?;
            store.get_mut(id).value.data[i] = orig - step;
            let down = loss_fn(store)?;
            store.get_mut(id).value.data[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let re = rel_error(analytic[id.index()].data[i], fd);
            if re > worst {
                worst = re;
            }
        }
    }
    Ok(worst)
}

/// Directional derivative check: draws a random unit direction `u` over all
/// parameters and compares `u . grad` against the central difference of the
/// loss along `u`. One pair of forward passes verifies every parameter in
/// aggregate.
pub fn check_directional<F, R>(
    store: &mut ParamStore,
    analytic: &[Tensor],
    step: f64,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    R: Rng,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut direction: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    let mut norm_sq = 0.0;
    for id in &ids {
        let d: Vec<f64> = (0..store.get(*id).value.numel())
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        norm_sq += d.iter().map(|v| v * v).sum::<f64>();
        direction.push(d);
    }
    let norm = norm_sq.sqrt().max(1e-300);
    for d in direction.iter_mut() {
        for v in d.iter_mut() {
            *v /= norm;
        }
    }

    let mut dot = 0.0;
    for (id, d) in ids.iter().zip(direction.iter()) {
        for (g, u) in analytic[id.index()].data.iter().zip(d.iter()) {
            dot += g * u;
        }
    }

    let shift = |store: &mut ParamStore, sign: f64| {
        for (id, d) in ids.iter().zip(direction.iter()) {
            let p = &mut store.get_mut(*id).value.data;
            for (pv, u) in p.iter_mut().zip(d.iter()) {
                *pv += sign * step * u;
            }
        }
    };

    shift(store, 1.0);
    let up = loss_fn(store)?;
    shift(store, -2.0);
    let down = loss_fn(store)?;
    shift(store, 1.0);

    let fd = (up - down) / (2.0 * step);
    Ok(rel_error(dot, fd))
}

/// Spot-check `n_coords` randomly chosen coordinates with central
/// differences; returns the worst relative error.
pub fn check_random_coords<F, R>(
    store: &mut ParamStore,
    analytic: &[Tensor],
    step: f64,
    n_coords: usize,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    R: Rng,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let id = ids[rng.gen_range(0..ids.len())];
        let numel = store.get(id).value.numel();
        let i = rng.gen_range(0..numel);
        let orig = store.get(id).value.data[i];
        store.get_mut(id).value.data[i] = orig + step;
        let up = loss_fn(store)?;
        store.get_mut(id).value.data[i] = orig - step;
        let down = loss_fn(store)?;
        store.get_mut(id).value.data[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let re = rel_error(analytic[id.index()].data[i], fd);
        if re > worst {
            worst = re;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// loss = sum_squares(gelu(x W + b)) exercised through every checker.
    fn toy_loss(store: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let w = tape.param(store, store.find("w").unwrap());
        let b = tape.param(store, store.find("b").unwrap());
        let x = tape.constant(&Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap());
        let xw = tape.matmul(x, w, 2, 3, 2)?;
        let xwb = tape.add_bias(xw, b, 2, 2)?;
        let act = tape.gelu(xwb);
        let loss = tape.sum_squares(act);
        Ok(tape.data(loss)[0])
    }

    fn toy_grads(store: &ParamStore) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let w = tape.param(store, store.find("w").unwrap());
        let b = tape.param(store, store.find("b").unwrap());
        let x = tape
            .constant(&Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap());
        let xw = tape.matmul(x, w, 2, 3, 2).unwrap();
        let xwb = tape.add_bias(xw, b, 2, 2).unwrap();
        let act = tape.gelu(xwb);
        let loss = tape.sum_squares(act);
        tape.backward(loss).unwrap().by_param(&tape, store)
    }

    #[test]
    fn exhaustive_and_directional_agree_with_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.register_normal("w", &[3, 2], 0.5, &mut rng);
        store.register_normal("b", &[2], 0.5, &mut rng);
        let grads = toy_grads(&store);
        let worst = check_exhaustive(&mut store, &grads, 1e-5, toy_loss).unwrap();
        assert!(worst < 1e-4, "exhaustive rel err {worst}");
        let worst = check_directional(&mut store, &grads, 1e-5, &mut rng, toy_loss).unwrap();
        assert!(worst < 1e-4, "directional rel err {worst}");
        let worst =
            check_random_coords(&mut store, &grads, 1e-5, 8, &mut rng, toy_loss).unwrap();
        assert!(worst < 1e-4, "random-coord rel err {worst}");
    }
}

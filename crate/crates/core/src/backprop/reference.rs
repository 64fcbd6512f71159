//! Extended-precision reference loss for the finite-difference oracle.
//!
//! A separate transcription of the three cells' forward equations on
//! [`Dd`] scalars, written against the raw parameter tensors rather than
//! the `cells` kernels it is used to check.

use super::double_double::Dd;
use crate::cells::{Gate, ModelParams, RecurrentState};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

fn dd(x: f64) -> Dd {
    Dd::from_f64(x)
}

fn affine(u: &Matrix, w: &Matrix, b: &Vector, h: &[Dd], x: usize) -> Vec<Dd> {
    (0..b.len())
        .map(|k| {
            let mut acc = dd(b[k]) + dd(u.get(k, x));
            for (j, &hj) in h.iter().enumerate() {
                acc = acc + dd(w.get(k, j)) * hj;
            }
            acc
        })
        .collect()
}

fn gate(g: &Gate, h: &[Dd], x: usize) -> Vec<Dd> {
    affine(&g.input, &g.recurrent, &g.bias, h, x)
}

/// `−ln softmax(c + V·h)[y]` via log-sum-exp.
fn head_nll(v: &Matrix, c: &Vector, h: &[Dd], y: usize) -> Dd {
    let o: Vec<Dd> = (0..c.len())
        .map(|k| {
            let mut acc = dd(c[k]);
            for (j, &hj) in h.iter().enumerate() {
                acc = acc + dd(v.get(k, j)) * hj;
            }
            acc
        })
        .collect();
    let m = o.iter().copied().fold(o[0], Dd::max);
    let mut z = Dd::ZERO;
    for &ok in &o {
        z = z + (ok - m).exp();
    }
    m + z.ln() - o[y]
}

/// Summed negative log-likelihood of `targets` given `inputs`, starting
/// from `state`.
pub(crate) fn reference_loss(
    params: &ModelParams<f64>,
    state: &RecurrentState<f64>,
    inputs: &[usize],
    targets: &[usize],
) -> Result<Dd> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::shape(
            "reference_loss",
            format!("{} inputs", inputs.len()),
            format!("{} targets", targets.len()),
        ));
    }
    let vocab = params.vocab_size();
    if let Some(&bad) = inputs.iter().chain(targets).find(|&&i| i >= vocab) {
        return Err(Error::IndexOutOfRange { index: bad, size: vocab });
    }
    let mut h: Vec<Dd> = state.h.iter().map(|&x| dd(x)).collect();
    let mut c: Vec<Dd> = match &state.c {
        Some(c) => c.iter().map(|&x| dd(x)).collect(),
        None => vec![Dd::ZERO; h.len()],
    };
    let mut total = Dd::ZERO;
    for (&x, &y) in inputs.iter().zip(targets) {
        let (v, out_bias) = match params {
            ModelParams::Rnn(p) => {
                h = affine(&p.u, &p.w, &p.b, &h, x).into_iter().map(Dd::tanh).collect();
                (&p.v, &p.c)
            }
            ModelParams::Lstm(p) => {
                let f = gate(&p.forget, &h, x);
                let i = gate(&p.input, &h, x);
                let o = gate(&p.output, &h, x);
                let g = gate(&p.candidate, &h, x);
                for k in 0..h.len() {
                    c[k] = f[k].sigmoid() * c[k] + i[k].sigmoid() * g[k].tanh();
                    h[k] = o[k].sigmoid() * c[k].tanh();
                }
                (&p.v, &p.c)
            }
            ModelParams::Gru(p) => {
                let r: Vec<Dd> = gate(&p.reset, &h, x).into_iter().map(Dd::sigmoid).collect();
                let u: Vec<Dd> = gate(&p.update, &h, x).into_iter().map(Dd::sigmoid).collect();
                let reset_h: Vec<Dd> = r.iter().zip(&h).map(|(&a, &b)| a * b).collect();
                let cand = gate(&p.candidate, &reset_h, x);
                for k in 0..h.len() {
                    h[k] = u[k] * h[k] + (Dd::ONE - u[k]) * cand[k].tanh();
                }
                (&p.v, &p.c)
            }
        };
        total = total + head_nll(v, out_bias, &h, y);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::cross_entropy_loss;
    use crate::cells::tests::random_params;
    use crate::cells::{forward_sequence, CellKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_the_f64_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in CellKind::ALL {
            for _ in 0..20 {
                let (h, v, tau) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(1..7));
                let p = random_params(kind, h, v, &mut rng);
                let state = RecurrentState::for_params(&p);
                let inputs: Vec<usize> = (0..tau).map(|_| rng.random_range(0..v)).collect();
                let targets: Vec<usize> = (0..tau).map(|_| rng.random_range(0..v)).collect();
                let fast = cross_entropy_loss(&forward_sequence(&p, &state, &inputs).unwrap(), &targets)
                    .unwrap()
                    .total;
                let slow = reference_loss(&p, &state, &inputs, &targets).unwrap().to_f64();
                assert!((fast - slow).abs() <= 1e-13 * fast.abs().max(1.0), "{kind}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn uniform_model_costs_ln_v_per_step() {
        let p = ModelParams::<f64>::zeros(CellKind::Gru, 3, 7);
        let l = reference_loss(&p, &RecurrentState::for_params(&p), &[0, 1, 2], &[3, 4, 5]).unwrap();
        let expected = Dd::from_f64(7.0).ln() * Dd::from_f64(3.0);
        assert!((l - expected).to_f64().abs() < 1e-30);
    }
}

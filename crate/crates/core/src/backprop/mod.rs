//! Backpropagation through time for the three cell types, the
//! cross-entropy loss, global-norm clipping, and the central-difference
//! oracle every analytic gradient is checked against.
//!
//! The backward passes make a single right-to-left sweep over the cached
//! [`StepTrace`]s, so time and memory are linear in the window length.
//! Gradients are *summed* over timesteps; averaging is the caller's choice.

mod double_double;
mod reference;

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    forward_sequence, CellCache, CellKind, Gate, GruParams, LstmParams, ModelParams, RecurrentState, RnnParams,
    StepTrace,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Real, Vector};

pub use double_double::Dd;

/// Smallest probability fed to `ln` by the loss.
pub const PROB_FLOOR: f64 = 1e-300;

/// Default `max_norm` for [`clip_gradients`].
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_step: Vec<f64>,
    pub token_count: usize,
    /// Set when some target probability underflowed and was clamped to
    /// [`PROB_FLOOR`].
    pub clamped: bool,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        self.total / self.token_count as f64
    }
}

/// Gradient of the loss with respect to every parameter tensor; shaped
/// exactly like the [`ModelParams`] it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T = f64>(ModelParams<T>);

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        GradientSet(ModelParams::zeros(params.kind(), params.hidden_size(), params.vocab_size()))
    }

    pub fn from_params(params: ModelParams<T>) -> Self {
        GradientSet(params)
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.0
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        self.0.tensors_mut()
    }

    /// Global L2 norm over all entries, accumulated in 64-bit.
    pub fn global_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.0.tensors_mut() {
            for x in t {
                *x = *x * factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet<T>) -> Result<()> {
        ensure_congruent(&self.0, &other.0)?;
        for ((_, a), (_, b)) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.0
            .tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }
}

impl<T> Deref for GradientSet<T> {
    type Target = ModelParams<T>;

    fn deref(&self) -> &ModelParams<T> {
        &self.0
    }
}

pub(crate) fn ensure_congruent<T: Real>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<()> {
    if a.kind() != b.kind() {
        return Err(Error::shape("gradient set", a.kind(), b.kind()));
    }
    for ((name, x), (_, y)) in a.tensors().iter().zip(b.tensors()) {
        if x.len() != y.len() {
            return Err(Error::shape(
                "gradient set",
                format!("{name} with {} entries", x.len()),
                format!("{} entries", y.len()),
            ));
        }
    }
    Ok(())
}

/// Summed negative log-likelihood of `targets` under the cached predictions.
pub fn cross_entropy_loss<T: Real>(traces: &[StepTrace<T>], targets: &[usize]) -> Result<LossValue> {
    if traces.len() != targets.len() {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{} traces", traces.len()),
            format!("{} targets", targets.len()),
        ));
    }
    if traces.is_empty() {
        return Err(Error::Empty("cross_entropy_loss"));
    }
    let mut per_step = Vec::with_capacity(traces.len());
    let mut clamped = false;
    for (trace, &y) in traces.iter().zip(targets) {
        let (nll, c) = step_nll(&trace.yhat, y)?;
        clamped |= c;
        per_step.push(nll);
    }
    Ok(LossValue {
        total: per_step.iter().sum(),
        token_count: per_step.len(),
        per_step,
        clamped,
    })
}

pub(crate) fn step_nll<T: Real>(yhat: &Vector<T>, target: usize) -> Result<(f64, bool)> {
    if target >= yhat.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            size: yhat.len(),
        });
    }
    let p = yhat[target].as_f64();
    if p < PROB_FLOOR {
        Ok((-PROB_FLOOR.ln(), true))
    } else {
        Ok((-p.ln(), false))
    }
}

/// `∂L/∂o = ŷ − onehot(target)` for one step.
pub fn output_gradient<T: Real>(trace: &StepTrace<T>, target: usize) -> Result<Vector<T>> {
    let mut g = trace.yhat.clone();
    output_gradient_into(g.as_mut_slice(), &trace.yhat, target)?;
    Ok(g)
}

fn output_gradient_into<T: Real>(out: &mut [T], yhat: &Vector<T>, target: usize) -> Result<()> {
    if target >= yhat.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            size: yhat.len(),
        });
    }
    out.copy_from_slice(yhat.as_slice());
    out[target] = out[target] - T::one();
    Ok(())
}

/// Result of one BPTT pass.
#[derive(Clone, Debug)]
pub struct Bptt<T = f64> {
    pub loss: LossValue,
    pub grads: GradientSet<T>,
    /// State after the last step, for carrying into the next window.
    pub final_state: RecurrentState<T>,
}

fn check_sequence(inputs: &[usize], targets: &[usize]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::shape(
            "bptt",
            format!("{} inputs", inputs.len()),
            format!("{} targets", targets.len()),
        ));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("bptt"));
    }
    Ok(())
}

/// Shared output head: accumulates `∇c`, `∇V`, and writes `Vᵀ·∇o` into `dh`.
fn head_backward<T: Real>(
    v: &Matrix<T>,
    trace: &StepTrace<T>,
    target: usize,
    d_o: &mut [T],
    dh: &mut [T],
    gv: &mut Matrix<T>,
    gc: &mut Vector<T>,
) -> Result<()> {
    output_gradient_into(d_o, &trace.yhat, target)?;
    linalg::axpy(gc.as_mut_slice(), T::one(), d_o);
    linalg::outer_acc(gv, d_o, trace.h.as_slice());
    dh.fill(T::zero());
    linalg::matvec_t_acc(dh, v, d_o);
    Ok(())
}

/// Accumulates the parameter gradients of one gate from its
/// pre-activation gradient `dz`, and adds `Wᵀ·dz` into `dh_prev`.
fn gate_backward<T: Real>(gate: &Gate<T>, grad: &mut Gate<T>, dz: &[T], h_in: &[T], x: usize, dh_prev: &mut [T]) {
    linalg::axpy(grad.bias.as_mut_slice(), T::one(), dz);
    linalg::outer_acc(&mut grad.recurrent, dz, h_in);
    linalg::column_acc(&mut grad.input, x, dz);
    linalg::matvec_t_acc(dh_prev, &gate.recurrent, dz);
}

fn finish<T: Real>(traces: Vec<StepTrace<T>>, targets: &[usize], grads: GradientSet<T>) -> Result<Bptt<T>> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient tensor {name}")));
    }
    let loss = cross_entropy_loss(&traces, targets)?;
    let final_state = traces.last().expect("non-empty sequence").state();
    Ok(Bptt {
        loss,
        grads,
        final_state,
    })
}

/// Vanilla-RNN BPTT.
///
/// Walking from the last step back:
/// `∇h(τ) = Vᵀ∇o(τ)`, `∇h(t) = Wᵀ diag(1 − h(t+1)²) ∇h(t+1) + Vᵀ∇o(t)`, with
/// `∇c = Σ ∇o(t)`, `∇b = Σ diag(1 − h(t)²) ∇h(t)`, `∇V = Σ ∇o(t) h(t)ᵀ`,
/// `∇W = Σ diag(1 − h(t)²) ∇h(t) h(t−1)ᵀ`, `∇U = Σ diag(1 − h(t)²) ∇h(t) x(t)ᵀ`.
pub fn bptt_rnn<T: Real>(p: &RnnParams<T>, inputs: &[usize], targets: &[usize], h0: &Vector<T>) -> Result<Bptt<T>> {
    check_sequence(inputs, targets)?;
    let params = ModelParams::Rnn(p.clone());
    let traces = forward_sequence(&params, &RecurrentState { h: h0.clone(), c: None }, inputs)?;
    let hidden = p.w.rows();
    let vocab = p.v.rows();

    let mut grads = GradientSet::zeros_like(&params);
    let ModelParams::Rnn(g) = &mut grads.0 else {
        unreachable!()
    };
    let mut d_o = vec![T::zero(); vocab];
    let mut dh = vec![T::zero(); hidden];
    // diag(1 − h(t+1)²) ∇h(t+1), i.e. the gradient at a(t+1)
    let mut da_next = vec![T::zero(); hidden];
    let mut da = vec![T::zero(); hidden];

    for t in (0..traces.len()).rev() {
        let trace = &traces[t];
        head_backward(&p.v, trace, targets[t], &mut d_o, &mut dh, &mut g.v, &mut g.c)?;
        if t + 1 < traces.len() {
            linalg::matvec_t_acc(&mut dh, &p.w, &da_next);
        }
        for k in 0..hidden {
            let h = trace.h[k];
            da[k] = (T::one() - h * h) * dh[k];
        }
        let h_prev = if t == 0 { h0.as_slice() } else { traces[t - 1].h.as_slice() };
        linalg::axpy(g.b.as_mut_slice(), T::one(), &da);
        linalg::outer_acc(&mut g.w, &da, h_prev);
        linalg::column_acc(&mut g.u, trace.x_index, &da);
        std::mem::swap(&mut da, &mut da_next);
    }
    finish(traces, targets, grads)
}

/// LSTM BPTT. The cell-state gradient is threaded backwards next to the
/// hidden-state gradient.
pub fn bptt_lstm<T: Real>(
    p: &LstmParams<T>,
    inputs: &[usize],
    targets: &[usize],
    h0: &Vector<T>,
    c0: &Vector<T>,
) -> Result<Bptt<T>> {
    check_sequence(inputs, targets)?;
    let params = ModelParams::Lstm(p.clone());
    let state = RecurrentState {
        h: h0.clone(),
        c: Some(c0.clone()),
    };
    let traces = forward_sequence(&params, &state, inputs)?;
    let hidden = p.v.cols();
    let vocab = p.v.rows();

    let mut grads = GradientSet::zeros_like(&params);
    let ModelParams::Lstm(g) = &mut grads.0 else {
        unreachable!()
    };
    let mut d_o = vec![T::zero(); vocab];
    let mut dh = vec![T::zero(); hidden];
    // contributions flowing into step t from step t+1
    let mut dh_next = vec![T::zero(); hidden];
    let mut dc_next = vec![T::zero(); hidden];
    let mut dz_f = vec![T::zero(); hidden];
    let mut dz_i = vec![T::zero(); hidden];
    let mut dz_o = vec![T::zero(); hidden];
    let mut dz_g = vec![T::zero(); hidden];

    for t in (0..traces.len()).rev() {
        let trace = &traces[t];
        head_backward(&p.v, trace, targets[t], &mut d_o, &mut dh, &mut g.v, &mut g.c)?;
        linalg::axpy(&mut dh, T::one(), &dh_next);

        let CellCache::Lstm {
            forget,
            input,
            output,
            candidate,
            cell,
        } = &trace.cache
        else {
            unreachable!()
        };
        let (h_prev, c_prev) = if t == 0 {
            (h0.as_slice(), c0.as_slice())
        } else {
            let prev = &traces[t - 1];
            (prev.h.as_slice(), prev.cell_state().expect("lstm trace").as_slice())
        };

        for k in 0..hidden {
            let tc = cell[k].tanh();
            let (f, i, o, gc) = (forget[k], input[k], output[k], candidate[k]);
            let dc = dc_next[k] + dh[k] * o * (T::one() - tc * tc);
            dz_o[k] = dh[k] * tc * o * (T::one() - o);
            dz_f[k] = dc * c_prev[k] * f * (T::one() - f);
            dz_i[k] = dc * gc * i * (T::one() - i);
            dz_g[k] = dc * i * (T::one() - gc * gc);
            dc_next[k] = dc * f;
        }

        dh_next.fill(T::zero());
        let x = trace.x_index;
        gate_backward(&p.forget, &mut g.forget, &dz_f, h_prev, x, &mut dh_next);
        gate_backward(&p.input, &mut g.input, &dz_i, h_prev, x, &mut dh_next);
        gate_backward(&p.output, &mut g.output, &dz_o, h_prev, x, &mut dh_next);
        gate_backward(&p.candidate, &mut g.candidate, &dz_g, h_prev, x, &mut dh_next);
    }
    finish(traces, targets, grads)
}

/// GRU BPTT for `h = u∘h_prev + (1 − u)∘ĥ`,
/// `ĥ = tanh(U_g x + W_g (r∘h_prev) + b_g)`.
pub fn bptt_gru<T: Real>(p: &GruParams<T>, inputs: &[usize], targets: &[usize], h0: &Vector<T>) -> Result<Bptt<T>> {
    check_sequence(inputs, targets)?;
    let params = ModelParams::Gru(p.clone());
    let traces = forward_sequence(&params, &RecurrentState { h: h0.clone(), c: None }, inputs)?;
    let hidden = p.v.cols();
    let vocab = p.v.rows();

    let mut grads = GradientSet::zeros_like(&params);
    let ModelParams::Gru(g) = &mut grads.0 else {
        unreachable!()
    };
    let mut d_o = vec![T::zero(); vocab];
    let mut dh = vec![T::zero(); hidden];
    let mut dh_next = vec![T::zero(); hidden];
    let mut dz_r = vec![T::zero(); hidden];
    let mut dz_u = vec![T::zero(); hidden];
    let mut dz_g = vec![T::zero(); hidden];
    let mut gated = vec![T::zero(); hidden];
    let mut d_gated = vec![T::zero(); hidden];
    let mut scratch = vec![T::zero(); hidden];

    for t in (0..traces.len()).rev() {
        let trace = &traces[t];
        head_backward(&p.v, trace, targets[t], &mut d_o, &mut dh, &mut g.v, &mut g.c)?;
        linalg::axpy(&mut dh, T::one(), &dh_next);

        let CellCache::Gru {
            reset,
            update,
            candidate,
        } = &trace.cache
        else {
            unreachable!()
        };
        let h_prev = if t == 0 { h0.as_slice() } else { traces[t - 1].h.as_slice() };

        for k in 0..hidden {
            let (u, c) = (update[k], candidate[k]);
            dz_u[k] = dh[k] * (h_prev[k] - c) * u * (T::one() - u);
            dz_g[k] = dh[k] * (T::one() - u) * (T::one() - c * c);
            gated[k] = reset[k] * h_prev[k];
        }

        // candidate: its recurrent input is r∘h_prev
        let x = trace.x_index;
        linalg::axpy(g.candidate.bias.as_mut_slice(), T::one(), &dz_g);
        linalg::outer_acc(&mut g.candidate.recurrent, &dz_g, &gated);
        linalg::column_acc(&mut g.candidate.input, x, &dz_g);
        d_gated.fill(T::zero());
        linalg::matvec_t_acc(&mut d_gated, &p.candidate.recurrent, &dz_g);

        for k in 0..hidden {
            let r = reset[k];
            dz_r[k] = d_gated[k] * h_prev[k] * r * (T::one() - r);
            dh_next[k] = dh[k] * update[k] + d_gated[k] * r;
        }
        scratch.fill(T::zero());
        gate_backward(&p.update, &mut g.update, &dz_u, h_prev, x, &mut scratch);
        gate_backward(&p.reset, &mut g.reset, &dz_r, h_prev, x, &mut scratch);
        linalg::axpy(&mut dh_next, T::one(), &scratch);
    }
    finish(traces, targets, grads)
}

/// Dispatches to the BPTT routine for `params`' cell kind.
pub fn bptt<T: Real>(
    params: &ModelParams<T>,
    inputs: &[usize],
    targets: &[usize],
    state: &RecurrentState<T>,
) -> Result<Bptt<T>> {
    match params {
        ModelParams::Rnn(p) => bptt_rnn(p, inputs, targets, &state.h),
        ModelParams::Gru(p) => bptt_gru(p, inputs, targets, &state.h),
        ModelParams::Lstm(p) => {
            let c0 = state
                .c
                .as_ref()
                .ok_or_else(|| Error::Config("LSTM BPTT needs an initial cell state".into()))?;
            bptt_lstm(p, inputs, targets, &state.h, c0)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Clipped<T = f64> {
    pub grads: GradientSet<T>,
    pub applied: bool,
    /// Global norm before clipping.
    pub norm: f64,
}

/// Global-norm clipping: if `‖g‖ > max_norm`, every entry is scaled by
/// `max_norm / ‖g‖`; otherwise `g` is returned untouched.
pub fn clip_gradients<T: Real>(grads: GradientSet<T>, max_norm: f64) -> Result<Clipped<T>> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient tensor {name}")));
    }
    let norm = grads.global_norm();
    if norm <= max_norm {
        return Ok(Clipped {
            grads,
            applied: false,
            norm,
        });
    }
    let mut grads = grads;
    grads.scale(T::from_f64_lossy(max_norm / norm));
    Ok(Clipped {
        grads,
        applied: true,
        norm,
    })
}

/// Scalar a finite-difference loss may return. `f64` is the usual choice;
/// [`Dd`] keeps the difference `L(θ+ε) − L(θ−ε)` free of `f64` rounding.
pub trait OracleScalar: Copy {
    fn central_difference(plus: Self, minus: Self, eps: f64) -> f64;
    fn same_bits(a: Self, b: Self) -> bool;
    fn approx(self) -> f64;
}

impl OracleScalar for f64 {
    fn central_difference(plus: f64, minus: f64, eps: f64) -> f64 {
        (plus - minus) / (2.0 * eps)
    }

    fn same_bits(a: f64, b: f64) -> bool {
        a.to_bits() == b.to_bits()
    }

    fn approx(self) -> f64 {
        self
    }
}

impl OracleScalar for Dd {
    fn central_difference(plus: Dd, minus: Dd, eps: f64) -> f64 {
        (plus - minus).to_f64() / (2.0 * eps)
    }

    fn same_bits(a: Dd, b: Dd) -> bool {
        a.hi.to_bits() == b.hi.to_bits() && a.lo.to_bits() == b.lo.to_bits()
    }

    fn approx(self) -> f64 {
        self.to_f64()
    }
}

/// Central-difference gradient `(L(θ+ε) − L(θ−ε)) / 2ε` for every scalar
/// parameter of 64-bit `params`.
pub fn finite_difference_gradient<F, L>(loss_fn: F, params: &ModelParams<f64>, eps: f64) -> Result<GradientSet<f64>>
where
    F: Fn(&ModelParams<f64>) -> L,
    L: OracleScalar,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if !L::same_bits(first, second) {
        return Err(Error::NonDeterministicLoss {
            first: first.approx(),
            second: second.approx(),
        });
    }

    let mut probe = params.clone();
    let mut grads = GradientSet::zeros_like(params);
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    for (k, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let original = probe.tensors()[k].1[j];
            probe.tensors_mut()[k].1[j] = original + eps;
            let plus = loss_fn(&probe);
            probe.tensors_mut()[k].1[j] = original - eps;
            let minus = loss_fn(&probe);
            probe.tensors_mut()[k].1[j] = original;
            grads.tensors_mut()[k].1[j] = L::central_difference(plus, minus, eps);
        }
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest [`relative_error`] over all entries, with the tensor it occurs in.
pub fn max_relative_error(analytic: &GradientSet<f64>, numeric: &GradientSet<f64>) -> Result<(f64, &'static str)> {
    ensure_congruent(analytic, numeric)?;
    let mut worst = (0.0, "");
    for ((name, a), (_, b)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (&x, &y) in a.iter().zip(b) {
            let e = relative_error(x, y);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), name);
            }
        }
    }
    Ok(worst)
}

/// Default step for [`check_gradients`].
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Outcome of [`check_gradients`] on one random instance.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub kind: CellKind,
    /// Against central differences of the double-double reference loss.
    pub max_relative_error: f64,
    pub worst_tensor: &'static str,
    /// Against central differences of the ordinary `f64` forward pass, which
    /// carry roughly `1e-16·L/ε` of rounding noise.
    pub f64_oracle_error: f64,
}

/// Draws a random instance (parameters and initial state from U(−0.5, 0.5),
/// random input/target tokens) and compares the analytic BPTT gradient with
/// central differences.
pub fn check_gradients(kind: CellKind, hidden: usize, vocab: usize, steps: usize, seed: u64) -> Result<GradientCheck> {
    if hidden == 0 || vocab == 0 || steps == 0 {
        return Err(Error::Config("gradient check needs hidden, vocab and steps ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::zeros(kind, hidden, vocab);
    for (_, t) in params.tensors_mut() {
        for x in t {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    let random_vec = |rng: &mut ChaCha8Rng| {
        Vector::new((0..hidden).map(|_| rng.random_range(-0.5..0.5)).collect()).expect("finite")
    };
    let h = random_vec(&mut rng);
    let c = (kind == CellKind::Lstm).then(|| random_vec(&mut rng));
    let state = RecurrentState { h, c };
    let inputs: Vec<usize> = (0..steps).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..steps).map(|_| rng.random_range(0..vocab)).collect();

    let analytic = bptt(&params, &inputs, &targets, &state)?.grads;
    reference::reference_loss(&params, &state, &inputs, &targets)?;
    let extended = |p: &ModelParams<f64>| {
        reference::reference_loss(p, &state, &inputs, &targets).unwrap_or(Dd::from_f64(f64::NAN))
    };
    let numeric = finite_difference_gradient(extended, &params, GRADCHECK_EPS)?;
    let (max_relative_error, worst_tensor) = max_relative_error(&analytic, &numeric)?;

    let plain = |p: &ModelParams<f64>| {
        forward_sequence(p, &state, &inputs)
            .and_then(|tr| cross_entropy_loss(&tr, &targets))
            .map(|l| l.total)
            .unwrap_or(f64::NAN)
    };
    let plain_numeric = finite_difference_gradient(plain, &params, GRADCHECK_EPS)?;
    let (f64_oracle_error, _) = self::max_relative_error(&analytic, &plain_numeric)?;
    Ok(GradientCheck {
        kind,
        max_relative_error,
        worst_tensor,
        f64_oracle_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::tests::random_params;
    use crate::cells::rnn_forward_step;

    fn uniform_trace(vocab: usize) -> StepTrace {
        let p = ModelParams::<f64>::zeros(CellKind::Rnn, 2, vocab);
        p.step(&RecurrentState::for_params(&p), 0).unwrap()
    }

    fn trace_with_yhat(yhat: &[f64]) -> StepTrace {
        let mut t = uniform_trace(yhat.len());
        t.yhat = Vector::new(yhat.to_vec()).unwrap();
        t
    }

    #[test]
    fn loss_examples() {
        let l = cross_entropy_loss(&[uniform_trace(4)], &[3]).unwrap();
        assert!((l.total - 1.3862943611198906).abs() < 1e-15);

        let l = cross_entropy_loss(&[trace_with_yhat(&[1.0, 0.0])], &[0]).unwrap();
        assert_eq!(l.total, 0.0);

        let traces = [trace_with_yhat(&[0.2, 0.8]), trace_with_yhat(&[0.6, 0.4])];
        let l = cross_entropy_loss(&traces, &[1, 0]).unwrap();
        let hand = -(0.8f64.ln()) - 0.6f64.ln();
        assert!((l.total - hand).abs() < 1e-15);
        assert!((l.total - l.per_step.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(l.token_count, 2);
        assert!(!l.clamped);
    }

    #[test]
    fn loss_clamps_zero_probability() {
        let l = cross_entropy_loss(&[trace_with_yhat(&[1.0, 0.0])], &[1]).unwrap();
        assert!(l.clamped);
        assert!((l.total - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_length_mismatch() {
        assert!(cross_entropy_loss(&[uniform_trace(3)], &[0, 1]).is_err());
        assert!(cross_entropy_loss(&[uniform_trace(3)], &[3]).is_err());
    }

    #[test]
    fn output_gradient_examples() {
        let g = output_gradient(&uniform_trace(2), 0).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);
        let g = output_gradient(&trace_with_yhat(&[0.0, 1.0, 0.0]), 1).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(output_gradient(&uniform_trace(2), 2).is_err());
    }

    #[test]
    fn output_gradient_matches_finite_differences_of_logits() {
        let logits = [0.3, -1.2, 0.8, 0.1];
        let target = 2;
        let nll = |o: &[f64]| {
            let p = linalg::softmax(&Vector::new(o.to_vec()).unwrap()).unwrap();
            -p[target].ln()
        };
        let mut t = uniform_trace(4);
        t.yhat = linalg::softmax(&Vector::new(logits.to_vec()).unwrap()).unwrap();
        let g = output_gradient(&t, target).unwrap();
        for i in 0..4 {
            let mut plus = logits;
            let mut minus = logits;
            plus[i] += 1e-6;
            minus[i] -= 1e-6;
            let fd = (nll(&plus) - nll(&minus)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6);
        }
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn single_step_rnn_head_gradients_are_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ModelParams::Rnn(p) = random_params(CellKind::Rnn, 2, 2, &mut rng) else {
            unreachable!()
        };
        let h0 = Vector::zeros(2);
        let out = bptt_rnn(&p, &[1], &[0], &h0).unwrap();
        let t = rnn_forward_step(&p, &h0, 1).unwrap();
        let d_o = [t.yhat[0] - 1.0, t.yhat[1]];
        let ModelParams::Rnn(g) = &*out.grads else { unreachable!() };
        for i in 0..2 {
            assert!((g.c[i] - d_o[i]).abs() <= 1e-12);
            for j in 0..2 {
                assert!((g.v.get(i, j) - d_o[i] * t.h[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cases = [(CellKind::Rnn, 5, 7, 6), (CellKind::Lstm, 4, 6, 5), (CellKind::Gru, 4, 6, 5)];
        for (kind, h, v, tau) in cases {
            let check = check_gradients(kind, h, v, tau, 99).unwrap();
            assert!(
                check.max_relative_error <= 1e-5,
                "{kind}: {} in {}",
                check.max_relative_error,
                check.worst_tensor
            );
        }
    }

    #[test]
    fn lstm_blocked_candidate_path_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ModelParams::Lstm(mut p) = random_params(CellKind::Lstm, 3, 4, &mut rng) else {
            unreachable!()
        };
        // σ(±1000) is exactly 1 / 0 in f64
        p.forget.bias = Vector::filled(3, 1000.0);
        p.input.bias = Vector::filled(3, -1000.0);
        let out = bptt_lstm(&p, &[0, 1, 2], &[1, 2, 3], &Vector::zeros(3), &Vector::filled(3, 0.3)).unwrap();
        let ModelParams::Lstm(g) = &*out.grads else { unreachable!() };
        for t in [g.candidate.input.as_slice(), g.candidate.recurrent.as_slice(), g.candidate.bias.as_slice()] {
            assert!(t.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gru_frozen_state_blocks_candidate_and_reset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ModelParams::Gru(mut p) = random_params(CellKind::Gru, 3, 4, &mut rng) else {
            unreachable!()
        };
        p.update.bias = Vector::filled(3, 40.0);
        let out = bptt_gru(&p, &[0, 1, 2, 3], &[1, 2, 3, 0], &Vector::filled(3, 0.2)).unwrap();
        let ModelParams::Gru(g) = &*out.grads else { unreachable!() };
        for gate in [&g.candidate, &g.reset] {
            for t in [gate.input.as_slice(), gate.recurrent.as_slice(), gate.bias.as_slice()] {
                assert!(t.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn gated_cells_share_the_rnn_head_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let p = random_params(kind, 3, 4, &mut rng);
            let s = RecurrentState::for_params(&p);
            let out = bptt(&p, &[2], &[1], &s).unwrap();
            let t = p.step(&s, 2).unwrap();
            let d_o = output_gradient(&t, 1).unwrap();
            let tensors = out.grads.tensors();
            let (_, gv) = tensors[tensors.len() - 2];
            let (_, gc) = tensors[tensors.len() - 1];
            for i in 0..4 {
                assert!((gc[i] - d_o[i]).abs() <= 1e-15);
                for j in 0..3 {
                    assert!((gv[i * 3 + j] - d_o[i] * t.h[j]).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn bptt_rejects_mismatched_lengths() {
        let p = ModelParams::<f64>::zeros(CellKind::Gru, 2, 3);
        let s = RecurrentState::for_params(&p);
        assert!(bptt(&p, &[0, 1], &[1], &s).is_err());
        assert!(bptt(&p, &[], &[], &s).is_err());
    }

    #[test]
    fn zero_params_give_log_v_per_step() {
        for kind in CellKind::ALL {
            let p = ModelParams::<f64>::zeros(kind, 3, 5);
            let out = bptt(&p, &[0, 1, 2], &[1, 2, 3], &RecurrentState::for_params(&p)).unwrap();
            for l in &out.loss.per_step {
                assert!((l - 5f64.ln()).abs() < 1e-12);
            }
        }
    }

    fn ones(kind: CellKind) -> GradientSet {
        let mut g = GradientSet::zeros_like(&ModelParams::zeros(kind, 2, 3));
        for (_, t) in g.tensors_mut() {
            t.fill(1.0);
        }
        g
    }

    #[test]
    fn clipping_examples() {
        let g = ones(CellKind::Gru);
        let n = g.scalar_count() as f64;
        let out = clip_gradients(g.clone(), n.sqrt() / 2.0).unwrap();
        assert!(out.applied);
        assert!(out.grads.tensors().iter().all(|(_, t)| t.iter().all(|&x| (x - 0.5).abs() < 1e-15)));

        let out = clip_gradients(g.clone(), n.sqrt() + 1.0).unwrap();
        assert!(!out.applied);
        assert_eq!(out.grads, g);

        let zero = GradientSet::zeros_like(&ModelParams::<f64>::zeros(CellKind::Rnn, 2, 2));
        let out = clip_gradients(zero.clone(), 1.0).unwrap();
        assert_eq!((out.norm, out.applied), (0.0, false));
        assert_eq!(out.grads, zero);

        assert!(clip_gradients(g.clone(), 0.0).is_err());
    }

    #[test]
    fn clipping_names_non_finite_tensor() {
        let mut g = ones(CellKind::Lstm);
        g.tensors_mut()[4].1[0] = f64::NAN;
        let msg = clip_gradients(g, 1.0).unwrap_err().to_string();
        assert!(msg.contains("W_i"), "{msg}");
    }

    #[test]
    fn clipping_preserves_direction_and_bounds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let p = random_params(CellKind::Lstm, 3, 4, &mut rng);
            let mut g = GradientSet::from_params(p);
            g.scale(rng.random_range(0.1..50.0));
            let max_norm = rng.random_range(0.1..10.0);
            let out = clip_gradients(g.clone(), max_norm).unwrap();
            assert!(out.grads.global_norm() <= max_norm + 1e-12);
            if out.applied {
                let s = max_norm / out.norm;
                for ((_, a), (_, b)) in out.grads.tensors().iter().zip(g.tensors()) {
                    for (x, y) in a.iter().zip(b) {
                        assert!((x - y * s).abs() <= 1e-12 * y.abs().max(1.0));
                    }
                }
            } else {
                assert_eq!(out.grads, g);
            }
        }
    }

    #[test]
    fn finite_differences_of_known_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_params(CellKind::Rnn, 2, 3, &mut rng);
        let sum_sq = |p: &ModelParams| p.tensors().iter().flat_map(|(_, t)| t.iter()).map(|x| x * x).sum::<f64>();
        let g = finite_difference_gradient(sum_sq, &p, 1e-5).unwrap();
        for ((_, gt), (_, pt)) in g.tensors().iter().zip(p.tensors()) {
            for (a, b) in gt.iter().zip(pt) {
                assert!((a - 2.0 * b).abs() < 1e-9);
            }
        }

        // perturbations of 0 are exact, so only the function's own linearity matters
        let zero = ModelParams::<f64>::zeros(CellKind::Gru, 2, 3);
        let weighted = |p: &ModelParams| {
            p.tensors()
                .iter()
                .flat_map(|(_, t)| t.iter())
                .enumerate()
                .map(|(k, x)| (k % 3 + 1) as f64 * x)
                .sum::<f64>()
        };
        for eps in [1e-7, 1e-5, 1e-3] {
            let g = finite_difference_gradient(weighted, &zero, eps).unwrap();
            let flat: Vec<f64> = g.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
            for (k, x) in flat.iter().enumerate() {
                assert!((x - (k % 3 + 1) as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn finite_differences_reject_bad_eps_and_nondeterminism() {
        let p = ModelParams::<f64>::zeros(CellKind::Rnn, 1, 1);
        assert!(finite_difference_gradient(|_| 0.0, &p, 1e-2).is_err());
        let calls = std::cell::Cell::new(0.0);
        let flaky = |_: &ModelParams| {
            calls.set(calls.get() + 1.0);
            calls.get()
        };
        assert!(matches!(
            finite_difference_gradient(flaky, &p, 1e-5),
            Err(Error::NonDeterministicLoss { .. })
        ));
    }
}

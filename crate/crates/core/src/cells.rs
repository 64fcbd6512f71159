//! Forward passes for the vanilla RNN, LSTM and GRU cells.
//!
//! All three cells share the same affine + softmax output head
//! (`o = c + V·h`, `ŷ = softmax(o)`). Inputs are token indices; the one-hot
//! product `U·x` is realized as selecting column `x` of `U`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Real, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Rnn, CellKind::Lstm, CellKind::Gru];

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }

    /// Number of gate groups (input weights, recurrent weights, bias) the
    /// cell owns in addition to the output head. The candidate network of
    /// LSTM/GRU counts as a group.
    pub fn gate_groups(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            _ => Err(Error::UnknownCellKind(s.to_string())),
        }
    }
}

/// Exact number of trainable scalars, output head included.
pub fn param_count(kind: CellKind, hidden: usize, vocab: usize) -> usize {
    let group = hidden * vocab + hidden * hidden + hidden;
    let head = vocab * hidden + vocab;
    kind.gate_groups() * group + head
}

/// One affine pre-activation group: `U·x + W·h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T = f64> {
    /// hidden × vocab
    pub input: Matrix<T>,
    /// hidden × hidden
    pub recurrent: Matrix<T>,
    pub bias: Vector<T>,
}

impl<T: Real> Gate<T> {
    pub fn zeros(hidden: usize, vocab: usize) -> Self {
        Self {
            input: Matrix::zeros(hidden, vocab),
            recurrent: Matrix::zeros(hidden, hidden),
            bias: Vector::zeros(hidden),
        }
    }

    fn random<R: Rng + ?Sized>(hidden: usize, vocab: usize, rng: &mut R) -> Self {
        Self {
            input: uniform_matrix(hidden, vocab, vocab, rng),
            recurrent: uniform_matrix(hidden, hidden, hidden, rng),
            bias: Vector::zeros(hidden),
        }
    }

    fn check(&self, name: &'static str, hidden: usize, vocab: usize) -> Result<()> {
        expect_shape(name, &self.input, (hidden, vocab))?;
        expect_shape(name, &self.recurrent, (hidden, hidden))?;
        expect_len(name, &self.bias, hidden)
    }

    /// `out = b + W·h + U[:, x]`
    #[inline]
    pub(crate) fn preactivation(&self, out: &mut [T], h: &[T], x: usize) {
        out.copy_from_slice(self.bias.as_slice());
        linalg::matvec_acc(out, &self.recurrent, h);
        linalg::add_column(out, &self.input, x);
    }

    fn cast<U: Real>(&self) -> Gate<U> {
        Gate {
            input: self.input.cast(),
            recurrent: self.recurrent.cast(),
            bias: self.bias.cast(),
        }
    }
}

fn uniform_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("initializer produces a well-formed matrix")
}

fn expect_shape<T: Real>(name: &'static str, m: &Matrix<T>, shape: (usize, usize)) -> Result<()> {
    if m.shape() == shape {
        Ok(())
    } else {
        Err(Error::shape(
            name,
            format!("{}x{}", m.rows(), m.cols()),
            format!("expected {}x{}", shape.0, shape.1),
        ))
    }
}

fn expect_len<T: Real>(name: &'static str, v: &Vector<T>, len: usize) -> Result<()> {
    if v.len() == len {
        Ok(())
    } else {
        Err(Error::shape(name, format!("length {}", v.len()), format!("expected {len}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams<T = f64> {
    /// hidden × vocab
    pub u: Matrix<T>,
    /// hidden × hidden
    pub w: Matrix<T>,
    /// vocab × hidden
    pub v: Matrix<T>,
    pub b: Vector<T>,
    pub c: Vector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T = f64> {
    pub forget: Gate<T>,
    pub input: Gate<T>,
    pub output: Gate<T>,
    pub candidate: Gate<T>,
    pub v: Matrix<T>,
    pub c: Vector<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T = f64> {
    pub reset: Gate<T>,
    pub update: Gate<T>,
    pub candidate: Gate<T>,
    pub v: Matrix<T>,
    pub c: Vector<T>,
}

/// Parameters of one model, tagged by cell kind.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams<T = f64> {
    Rnn(RnnParams<T>),
    Lstm(LstmParams<T>),
    Gru(GruParams<T>),
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(kind: CellKind, hidden: usize, vocab: usize) -> Self {
        let v = Matrix::zeros(vocab, hidden);
        let c = Vector::zeros(vocab);
        match kind {
            CellKind::Rnn => ModelParams::Rnn(RnnParams {
                u: Matrix::zeros(hidden, vocab),
                w: Matrix::zeros(hidden, hidden),
                v,
                b: Vector::zeros(hidden),
                c,
            }),
            CellKind::Lstm => ModelParams::Lstm(LstmParams {
                forget: Gate::zeros(hidden, vocab),
                input: Gate::zeros(hidden, vocab),
                output: Gate::zeros(hidden, vocab),
                candidate: Gate::zeros(hidden, vocab),
                v,
                c,
            }),
            CellKind::Gru => ModelParams::Gru(GruParams {
                reset: Gate::zeros(hidden, vocab),
                update: Gate::zeros(hidden, vocab),
                candidate: Gate::zeros(hidden, vocab),
                v,
                c,
            }),
        }
    }

    /// Weights drawn from U(−1/√fan_in, 1/√fan_in) per tensor, biases zero.
    /// Tensors are drawn in the order of [`ModelParams::tensors`].
    pub fn init<R: Rng + ?Sized>(kind: CellKind, hidden: usize, vocab: usize, rng: &mut R) -> Self {
        match kind {
            CellKind::Rnn => {
                let u = uniform_matrix(hidden, vocab, vocab, rng);
                let w = uniform_matrix(hidden, hidden, hidden, rng);
                let v = uniform_matrix(vocab, hidden, hidden, rng);
                ModelParams::Rnn(RnnParams {
                    u,
                    w,
                    v,
                    b: Vector::zeros(hidden),
                    c: Vector::zeros(vocab),
                })
            }
            CellKind::Lstm => {
                let forget = Gate::random(hidden, vocab, rng);
                let input = Gate::random(hidden, vocab, rng);
                let output = Gate::random(hidden, vocab, rng);
                let candidate = Gate::random(hidden, vocab, rng);
                ModelParams::Lstm(LstmParams {
                    forget,
                    input,
                    output,
                    candidate,
                    v: uniform_matrix(vocab, hidden, hidden, rng),
                    c: Vector::zeros(vocab),
                })
            }
            CellKind::Gru => {
                let reset = Gate::random(hidden, vocab, rng);
                let update = Gate::random(hidden, vocab, rng);
                let candidate = Gate::random(hidden, vocab, rng);
                ModelParams::Gru(GruParams {
                    reset,
                    update,
                    candidate,
                    v: uniform_matrix(vocab, hidden, hidden, rng),
                    c: Vector::zeros(vocab),
                })
            }
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            ModelParams::Rnn(_) => CellKind::Rnn,
            ModelParams::Lstm(_) => CellKind::Lstm,
            ModelParams::Gru(_) => CellKind::Gru,
        }
    }

    fn head(&self) -> (&Matrix<T>, &Vector<T>) {
        match self {
            ModelParams::Rnn(p) => (&p.v, &p.c),
            ModelParams::Lstm(p) => (&p.v, &p.c),
            ModelParams::Gru(p) => (&p.v, &p.c),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.head().0.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.head().0.rows()
    }

    /// Named flat views of every tensor, in the fixed serialization order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        fn gate<'a, T: Real>(out: &mut Vec<(&'static str, &'a [T])>, g: &'a Gate<T>, names: [&'static str; 3]) {
            out.push((names[0], g.input.as_slice()));
            out.push((names[1], g.recurrent.as_slice()));
            out.push((names[2], g.bias.as_slice()));
        }
        let mut out = Vec::with_capacity(14);
        match self {
            ModelParams::Rnn(p) => {
                out.push(("U", p.u.as_slice()));
                out.push(("W", p.w.as_slice()));
                out.push(("b", p.b.as_slice()));
                out.push(("V", p.v.as_slice()));
                out.push(("c", p.c.as_slice()));
            }
            ModelParams::Lstm(p) => {
                gate(&mut out, &p.forget, ["U_f", "W_f", "b_f"]);
                gate(&mut out, &p.input, ["U_i", "W_i", "b_i"]);
                gate(&mut out, &p.output, ["U_o", "W_o", "b_o"]);
                gate(&mut out, &p.candidate, ["U_g", "W_g", "b_g"]);
                out.push(("V", p.v.as_slice()));
                out.push(("c", p.c.as_slice()));
            }
            ModelParams::Gru(p) => {
                gate(&mut out, &p.reset, ["U_r", "W_r", "b_r"]);
                gate(&mut out, &p.update, ["U_u", "W_u", "b_u"]);
                gate(&mut out, &p.candidate, ["U_g", "W_g", "b_g"]);
                out.push(("V", p.v.as_slice()));
                out.push(("c", p.c.as_slice()));
            }
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        fn gate<'a, T: Real>(out: &mut Vec<(&'static str, &'a mut [T])>, g: &'a mut Gate<T>, names: [&'static str; 3]) {
            out.push((names[0], g.input.as_mut_slice()));
            out.push((names[1], g.recurrent.as_mut_slice()));
            out.push((names[2], g.bias.as_mut_slice()));
        }
        let mut out = Vec::with_capacity(14);
        match self {
            ModelParams::Rnn(p) => {
                out.push(("U", p.u.as_mut_slice()));
                out.push(("W", p.w.as_mut_slice()));
                out.push(("b", p.b.as_mut_slice()));
                out.push(("V", p.v.as_mut_slice()));
                out.push(("c", p.c.as_mut_slice()));
            }
            ModelParams::Lstm(p) => {
                gate(&mut out, &mut p.forget, ["U_f", "W_f", "b_f"]);
                gate(&mut out, &mut p.input, ["U_i", "W_i", "b_i"]);
                gate(&mut out, &mut p.output, ["U_o", "W_o", "b_o"]);
                gate(&mut out, &mut p.candidate, ["U_g", "W_g", "b_g"]);
                out.push(("V", p.v.as_mut_slice()));
                out.push(("c", p.c.as_mut_slice()));
            }
            ModelParams::Gru(p) => {
                gate(&mut out, &mut p.reset, ["U_r", "W_r", "b_r"]);
                gate(&mut out, &mut p.update, ["U_u", "W_u", "b_u"]);
                gate(&mut out, &mut p.candidate, ["U_g", "W_g", "b_g"]);
                out.push(("V", p.v.as_mut_slice()));
                out.push(("c", p.c.as_mut_slice()));
            }
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks the shape relations between all tensors.
    pub fn validate(&self) -> Result<()> {
        let (hidden, vocab) = (self.hidden_size(), self.vocab_size());
        expect_len("c", self.head().1, vocab)?;
        match self {
            ModelParams::Rnn(p) => {
                expect_shape("U", &p.u, (hidden, vocab))?;
                expect_shape("W", &p.w, (hidden, hidden))?;
                expect_len("b", &p.b, hidden)
            }
            ModelParams::Lstm(p) => {
                p.forget.check("forget gate", hidden, vocab)?;
                p.input.check("input gate", hidden, vocab)?;
                p.output.check("output gate", hidden, vocab)?;
                p.candidate.check("candidate", hidden, vocab)
            }
            ModelParams::Gru(p) => {
                p.reset.check("reset gate", hidden, vocab)?;
                p.update.check("update gate", hidden, vocab)?;
                p.candidate.check("candidate", hidden, vocab)
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        match self {
            ModelParams::Rnn(p) => ModelParams::Rnn(RnnParams {
                u: p.u.cast(),
                w: p.w.cast(),
                v: p.v.cast(),
                b: p.b.cast(),
                c: p.c.cast(),
            }),
            ModelParams::Lstm(p) => ModelParams::Lstm(LstmParams {
                forget: p.forget.cast(),
                input: p.input.cast(),
                output: p.output.cast(),
                candidate: p.candidate.cast(),
                v: p.v.cast(),
                c: p.c.cast(),
            }),
            ModelParams::Gru(p) => ModelParams::Gru(GruParams {
                reset: p.reset.cast(),
                update: p.update.cast(),
                candidate: p.candidate.cast(),
                v: p.v.cast(),
                c: p.c.cast(),
            }),
        }
    }

    /// One forward step from `state` on input token `x`.
    pub fn step(&self, state: &RecurrentState<T>, x: usize) -> Result<StepTrace<T>> {
        match self {
            ModelParams::Rnn(p) => rnn_forward_step(p, &state.h, x),
            ModelParams::Lstm(p) => {
                let c_prev = state
                    .c
                    .as_ref()
                    .ok_or_else(|| Error::Config("LSTM step needs a cell state".into()))?;
                lstm_forward_step(p, &state.h, c_prev, x)
            }
            ModelParams::Gru(p) => gru_forward_step(p, &state.h, x),
        }
    }
}

/// Hidden state carried between steps (and windows). `c` is the LSTM cell
/// state and is `None` for the other cells.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T = f64> {
    pub h: Vector<T>,
    pub c: Option<Vector<T>>,
}

impl<T: Real> RecurrentState<T> {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        Self {
            h: Vector::zeros(hidden),
            c: (kind == CellKind::Lstm).then(|| Vector::zeros(hidden)),
        }
    }

    pub fn for_params(params: &ModelParams<T>) -> Self {
        Self::zeros(params.kind(), params.hidden_size())
    }
}

/// Cell-specific activations cached for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum CellCache<T = f64> {
    Rnn {
        /// pre-activation `a = b + W·h_prev + U·x`
        a: Vector<T>,
    },
    Lstm {
        forget: Vector<T>,
        input: Vector<T>,
        output: Vector<T>,
        candidate: Vector<T>,
        cell: Vector<T>,
    },
    Gru {
        reset: Vector<T>,
        update: Vector<T>,
        candidate: Vector<T>,
    },
}

/// Everything one forward step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<T = f64> {
    pub x_index: usize,
    pub h: Vector<T>,
    /// output logits
    pub o: Vector<T>,
    pub yhat: Vector<T>,
    pub cache: CellCache<T>,
}

impl<T: Real> StepTrace<T> {
    pub fn cell_state(&self) -> Option<&Vector<T>> {
        match &self.cache {
            CellCache::Lstm { cell, .. } => Some(cell),
            _ => None,
        }
    }

    /// The state the next step consumes.
    pub fn state(&self) -> RecurrentState<T> {
        RecurrentState {
            h: self.h.clone(),
            c: self.cell_state().cloned(),
        }
    }
}

fn check_step_inputs<T: Real>(hidden: usize, vocab: usize, h_prev: &Vector<T>, x: usize) -> Result<()> {
    if h_prev.len() != hidden {
        return Err(Error::shape(
            "forward step",
            format!("h_prev of length {}", h_prev.len()),
            format!("hidden size {hidden}"),
        ));
    }
    if x >= vocab {
        return Err(Error::IndexOutOfRange { index: x, size: vocab });
    }
    Ok(())
}

fn output_head<T: Real>(v: &Matrix<T>, c: &Vector<T>, h: &[T]) -> Result<(Vector<T>, Vector<T>)> {
    let mut o = c.as_slice().to_vec();
    linalg::matvec_acc(&mut o, v, h);
    if !o.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("output logits".into()));
    }
    let mut yhat = vec![T::zero(); o.len()];
    linalg::softmax_into(&mut yhat, &o);
    Ok((Vector::from_vec_unchecked(o), Vector::from_vec_unchecked(yhat)))
}

fn sigmoid_in_place<T: Real>(z: &mut [T]) {
    for x in z {
        *x = linalg::sigmoid(*x);
    }
}

fn tanh_in_place<T: Real>(z: &mut [T]) {
    for x in z {
        *x = x.tanh();
    }
}

/// `a = b + W·h_prev + U·x`, `h = tanh(a)`, `o = c + V·h`, `ŷ = softmax(o)`.
pub fn rnn_forward_step<T: Real>(p: &RnnParams<T>, h_prev: &Vector<T>, x: usize) -> Result<StepTrace<T>> {
    let hidden = p.w.rows();
    check_step_inputs(hidden, p.u.cols(), h_prev, x)?;
    let mut a = p.b.as_slice().to_vec();
    linalg::matvec_acc(&mut a, &p.w, h_prev.as_slice());
    linalg::add_column(&mut a, &p.u, x);
    let mut h = a.clone();
    tanh_in_place(&mut h);
    let (o, yhat) = output_head(&p.v, &p.c, &h)?;
    Ok(StepTrace {
        x_index: x,
        h: Vector::from_vec_unchecked(h),
        o,
        yhat,
        cache: CellCache::Rnn {
            a: Vector::from_vec_unchecked(a),
        },
    })
}

/// Standard LSTM: sigmoid forget/input/output gates, tanh candidate,
/// `c = f∘c_prev + i∘g`, `h = o∘tanh(c)`.
pub fn lstm_forward_step<T: Real>(
    p: &LstmParams<T>,
    h_prev: &Vector<T>,
    c_prev: &Vector<T>,
    x: usize,
) -> Result<StepTrace<T>> {
    let hidden = p.v.cols();
    check_step_inputs(hidden, p.forget.input.cols(), h_prev, x)?;
    if c_prev.len() != hidden {
        return Err(Error::shape(
            "lstm_forward_step",
            format!("c_prev of length {}", c_prev.len()),
            format!("hidden size {hidden}"),
        ));
    }
    let hp = h_prev.as_slice();
    let mut f = vec![T::zero(); hidden];
    let mut i = vec![T::zero(); hidden];
    let mut og = vec![T::zero(); hidden];
    let mut g = vec![T::zero(); hidden];
    p.forget.preactivation(&mut f, hp, x);
    p.input.preactivation(&mut i, hp, x);
    p.output.preactivation(&mut og, hp, x);
    p.candidate.preactivation(&mut g, hp, x);
    sigmoid_in_place(&mut f);
    sigmoid_in_place(&mut i);
    sigmoid_in_place(&mut og);
    tanh_in_place(&mut g);

    let cp = c_prev.as_slice();
    let cell: Vec<T> = (0..hidden).map(|k| f[k] * cp[k] + i[k] * g[k]).collect();
    let h: Vec<T> = (0..hidden).map(|k| og[k] * cell[k].tanh()).collect();
    if !cell.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("lstm cell state".into()));
    }
    let (o, yhat) = output_head(&p.v, &p.c, &h)?;
    Ok(StepTrace {
        x_index: x,
        h: Vector::from_vec_unchecked(h),
        o,
        yhat,
        cache: CellCache::Lstm {
            forget: Vector::from_vec_unchecked(f),
            input: Vector::from_vec_unchecked(i),
            output: Vector::from_vec_unchecked(og),
            candidate: Vector::from_vec_unchecked(g),
            cell: Vector::from_vec_unchecked(cell),
        },
    })
}

/// GRU step. Gates `r, u = σ(U·x + W·h_prev + b)`, candidate
/// `ĥ = tanh(U_g·x + W_g·(r∘h_prev) + b_g)`, and the new state
/// `h = u∘h_prev + (1 − u)∘ĥ`, so `u` is the fraction of the old state kept.
pub fn gru_forward_step<T: Real>(p: &GruParams<T>, h_prev: &Vector<T>, x: usize) -> Result<StepTrace<T>> {
    let hidden = p.v.cols();
    check_step_inputs(hidden, p.reset.input.cols(), h_prev, x)?;
    let hp = h_prev.as_slice();
    let mut r = vec![T::zero(); hidden];
    let mut u = vec![T::zero(); hidden];
    p.reset.preactivation(&mut r, hp, x);
    p.update.preactivation(&mut u, hp, x);
    sigmoid_in_place(&mut r);
    sigmoid_in_place(&mut u);

    let gated: Vec<T> = r.iter().zip(hp).map(|(&a, &b)| a * b).collect();
    let mut cand = vec![T::zero(); hidden];
    p.candidate.preactivation(&mut cand, &gated, x);
    tanh_in_place(&mut cand);

    let h: Vec<T> = (0..hidden)
        .map(|k| u[k] * hp[k] + (T::one() - u[k]) * cand[k])
        .collect();
    let (o, yhat) = output_head(&p.v, &p.c, &h)?;
    Ok(StepTrace {
        x_index: x,
        h: Vector::from_vec_unchecked(h),
        o,
        yhat,
        cache: CellCache::Gru {
            reset: Vector::from_vec_unchecked(r),
            update: Vector::from_vec_unchecked(u),
            candidate: Vector::from_vec_unchecked(cand),
        },
    })
}

/// Runs the cell over `inputs`, threading the state from `initial`.
pub fn forward_sequence<T: Real>(
    params: &ModelParams<T>,
    initial: &RecurrentState<T>,
    inputs: &[usize],
) -> Result<Vec<StepTrace<T>>> {
    if inputs.is_empty() {
        return Err(Error::Empty("forward_sequence"));
    }
    let mut traces: Vec<StepTrace<T>> = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let trace = match traces.last() {
            None => params.step(initial, x)?,
            Some(prev) => step_from_trace(params, prev, x)?,
        };
        traces.push(trace);
    }
    Ok(traces)
}

fn step_from_trace<T: Real>(params: &ModelParams<T>, prev: &StepTrace<T>, x: usize) -> Result<StepTrace<T>> {
    match (params, &prev.cache) {
        (ModelParams::Rnn(p), _) => rnn_forward_step(p, &prev.h, x),
        (ModelParams::Gru(p), _) => gru_forward_step(p, &prev.h, x),
        (ModelParams::Lstm(p), CellCache::Lstm { cell, .. }) => lstm_forward_step(p, &prev.h, cell, x),
        (ModelParams::Lstm(_), _) => Err(Error::Config("LSTM step needs a cell state".into())),
    }
}

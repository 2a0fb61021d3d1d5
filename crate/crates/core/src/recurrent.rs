//! LSTM cells: the standard cell (used by the backward direction), and the
//! forward-direction variant whose gate preactivations additionally consume
//! the latent sample z_t and the predicted backward state.

use crate::error::{Error, Result};
use crate::nn::{orthogonal_init, uniform_init};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// One gate: input weights [d_in x d_h], recurrent weights [d_h x d_h],
/// bias [d_h].
#[derive(Debug, Clone)]
pub struct Gate {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl Gate {
    fn init(d_in: usize, d_h: usize, bias: f64, rng: &mut Rng) -> Self {
        Gate {
            w: uniform_init(d_in, d_h, rng),
            u: orthogonal_init(d_h, rng),
            b: Tensor::filled(&[d_h], bias),
        }
    }

    fn zeros(d_in: usize, d_h: usize) -> Self {
        Gate {
            w: Tensor::zeros(&[d_in, d_h]),
            u: Tensor::zeros(&[d_h, d_h]),
            b: Tensor::zeros(&[d_h]),
        }
    }

    /// x.W + h.U + b
    fn preact(&self, tape: &mut Tape, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let xw = tape.matmul(x, &self.w)?;
        let hu = tape.matmul(h, &self.u)?;
        let sum = tape.add(&xw, &hu)?;
        let bias = tape.expand_rows(&self.b, sum.shape()[0])?;
        tape.add(&sum, &bias)
    }

    fn bind(&self, tape: &mut Tape) -> Self {
        Gate {
            w: tape.leaf(&self.w),
            u: tape.leaf(&self.u),
            b: tape.leaf(&self.b),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.u"), &self.u));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.u"), &mut self.u));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

/// Parameters of a standard four-gate LSTM cell.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub cell: Gate,
}

impl LstmParams {
    /// Input weights uniform, recurrent weights orthogonal, biases zero
    /// except the forget gate at +1 so memory persists early in training.
    pub fn init(d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        LstmParams {
            input: Gate::init(d_in, d_h, 0.0, rng),
            forget: Gate::init(d_in, d_h, 1.0, rng),
            output: Gate::init(d_in, d_h, 0.0, rng),
            cell: Gate::init(d_in, d_h, 0.0, rng),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmParams {
            input: Gate::zeros(d_in, d_h),
            forget: Gate::zeros(d_in, d_h),
            output: Gate::zeros(d_in, d_h),
            cell: Gate::zeros(d_in, d_h),
        }
    }

    pub fn d_in(&self) -> usize {
        self.input.w.shape()[0]
    }

    pub fn d_h(&self) -> usize {
        self.input.w.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> Self {
        LstmParams {
            input: self.input.bind(tape),
            forget: self.forget.bind(tape),
            output: self.output.bind(tape),
            cell: self.cell.bind(tape),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.input.visit(&format!("{prefix}.input"), out);
        self.forget.visit(&format!("{prefix}.forget"), out);
        self.output.visit(&format!("{prefix}.output"), out);
        self.cell.visit(&format!("{prefix}.cell"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.input.visit_mut(&format!("{prefix}.input"), out);
        self.forget.visit_mut(&format!("{prefix}.forget"), out);
        self.output.visit_mut(&format!("{prefix}.output"), out);
        self.cell.visit_mut(&format!("{prefix}.cell"), out);
    }
}

/// Per-gate extra matrices for the forward cell: `v` [d_z x d_h] carries the
/// latent sample, `r` [d_b x d_h] carries the predicted backward state.
#[derive(Debug, Clone)]
pub struct VarGate {
    pub v: Tensor,
    pub r: Tensor,
}

impl VarGate {
    fn init(d_z: usize, d_b: usize, d_h: usize, rng: &mut Rng) -> Self {
        VarGate {
            v: uniform_init(d_z, d_h, rng),
            r: uniform_init(d_b, d_h, rng),
        }
    }

    fn zeros(d_z: usize, d_b: usize, d_h: usize) -> Self {
        VarGate {
            v: Tensor::zeros(&[d_z, d_h]),
            r: Tensor::zeros(&[d_b, d_h]),
        }
    }

    fn bind(&self, tape: &mut Tape) -> Self {
        VarGate {
            v: tape.leaf(&self.v),
            r: tape.leaf(&self.r),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.v"), &self.v));
        out.push((format!("{prefix}.r"), &self.r));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.v"), &mut self.v));
        out.push((format!("{prefix}.r"), &mut self.r));
    }
}

/// Forward-cell parameters: a standard cell plus the extra per-gate
/// matrices.
#[derive(Debug, Clone)]
pub struct VarForwardLstmParams {
    pub base: LstmParams,
    pub input: VarGate,
    pub forget: VarGate,
    pub output: VarGate,
    pub cell: VarGate,
}

impl VarForwardLstmParams {
    pub fn init(d_in: usize, d_h: usize, d_z: usize, d_b: usize, rng: &mut Rng) -> Self {
        VarForwardLstmParams {
            base: LstmParams::init(d_in, d_h, rng),
            input: VarGate::init(d_z, d_b, d_h, rng),
            forget: VarGate::init(d_z, d_b, d_h, rng),
            output: VarGate::init(d_z, d_b, d_h, rng),
            cell: VarGate::init(d_z, d_b, d_h, rng),
        }
    }

    pub fn zero_extras(d_in: usize, d_h: usize, d_z: usize, d_b: usize, rng: &mut Rng) -> Self {
        VarForwardLstmParams {
            base: LstmParams::init(d_in, d_h, rng),
            input: VarGate::zeros(d_z, d_b, d_h),
            forget: VarGate::zeros(d_z, d_b, d_h),
            output: VarGate::zeros(d_z, d_b, d_h),
            cell: VarGate::zeros(d_z, d_b, d_h),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize, d_z: usize, d_b: usize) -> Self {
        VarForwardLstmParams {
            base: LstmParams::zeros(d_in, d_h),
            input: VarGate::zeros(d_z, d_b, d_h),
            forget: VarGate::zeros(d_z, d_b, d_h),
            output: VarGate::zeros(d_z, d_b, d_h),
            cell: VarGate::zeros(d_z, d_b, d_h),
        }
    }

    pub fn d_z(&self) -> usize {
        self.input.v.shape()[0]
    }

    pub fn d_b(&self) -> usize {
        self.input.r.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> Self {
        VarForwardLstmParams {
            base: self.base.bind(tape),
            input: self.input.bind(tape),
            forget: self.forget.bind(tape),
            output: self.output.bind(tape),
            cell: self.cell.bind(tape),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.base.visit(prefix, out);
        self.input.visit(&format!("{prefix}.input"), out);
        self.forget.visit(&format!("{prefix}.forget"), out);
        self.output.visit(&format!("{prefix}.output"), out);
        self.cell.visit(&format!("{prefix}.cell"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.base.visit_mut(prefix, out);
        self.input.visit_mut(&format!("{prefix}.input"), out);
        self.forget.visit_mut(&format!("{prefix}.forget"), out);
        self.output.visit_mut(&format!("{prefix}.output"), out);
        self.cell.visit_mut(&format!("{prefix}.cell"), out);
    }
}

/// Hidden and memory state, both [batch x d_h].
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(batch: usize, d_h: usize) -> Self {
        CellState {
            h: Tensor::zeros(&[batch, d_h]),
            c: Tensor::zeros(&[batch, d_h]),
        }
    }
}

/// One step of the standard recurrence: gates i,f,o sigmoid, candidate tanh,
/// c' = f (.) c + i (.) g, h' = o (.) tanh(c').
pub fn lstm_step(
    tape: &mut Tape,
    params: &LstmParams,
    x_t: &Tensor,
    prev: &CellState,
) -> Result<CellState> {
    let i = params.input.preact(tape, x_t, &prev.h)?;
    let f = params.forget.preact(tape, x_t, &prev.h)?;
    let o = params.output.preact(tape, x_t, &prev.h)?;
    let g = params.cell.preact(tape, x_t, &prev.h)?;
    finish_step(tape, i, f, o, g, prev)
}

/// The forward-direction step: identical to [`lstm_step`] except every gate
/// preactivation gains z_t.V and b_tilde_t.R.
pub fn var_forward_step(
    tape: &mut Tape,
    params: &VarForwardLstmParams,
    x_t: &Tensor,
    prev: &CellState,
    z_t: &Tensor,
    b_tilde_t: &Tensor,
) -> Result<CellState> {
    let pre = |gate: &Gate, extra: &VarGate, tape: &mut Tape| -> Result<Tensor> {
        let base = gate.preact(tape, x_t, &prev.h)?;
        let zv = tape.matmul(z_t, &extra.v)?;
        let br = tape.matmul(b_tilde_t, &extra.r)?;
        let with_z = tape.add(&base, &zv)?;
        tape.add(&with_z, &br)
    };
    let i = pre(&params.base.input, &params.input, tape)?;
    let f = pre(&params.base.forget, &params.forget, tape)?;
    let o = pre(&params.base.output, &params.output, tape)?;
    let g = pre(&params.base.cell, &params.cell, tape)?;
    finish_step(tape, i, f, o, g, prev)
}

fn finish_step(
    tape: &mut Tape,
    pre_i: Tensor,
    pre_f: Tensor,
    pre_o: Tensor,
    pre_g: Tensor,
    prev: &CellState,
) -> Result<CellState> {
    let i = tape.sigmoid(&pre_i)?;
    let f = tape.sigmoid(&pre_f)?;
    let o = tape.sigmoid(&pre_o)?;
    let g = tape.tanh(&pre_g)?;
    let kept = tape.mul(&f, &prev.c)?;
    let fresh = tape.mul(&i, &g)?;
    let c = tape.add(&kept, &fresh)?;
    let ct = tape.tanh(&c)?;
    let h = tape.mul(&o, &ct)?;
    Ok(CellState { h, c })
}

/// Zero out rows of a [m x d] tensor where `mask` (length m, entries 0/1)
/// is 0. The mask is a constant, so masked rows also block gradient.
pub fn mask_rows(tape: &mut Tape, t: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if mask.rank() != 1 || t.rank() != 2 || mask.numel() != t.shape()[0] {
        return Err(Error::shape(
            "mask_rows",
            format!("mask {:?} vs tensor {:?}", mask.shape(), t.shape()),
        ));
    }
    let d = t.shape()[1];
    let full: Vec<f64> = mask
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(d))
        .collect();
    let full = Tensor::from_vec(full, t.shape())?;
    tape.mul(t, &full)
}

/// Run the backward-direction LSTM over per-step inputs, iterating from the
/// last step to the first with zero initial state. `masks[j]` has one 0/1
/// entry per sequence marking whether step j is inside that sequence;
/// states at padded positions are exactly zero and padding content never
/// reaches a valid state. Returns one state per step, aligned with `inputs`
/// (so the state at j summarizes inputs j..L).
pub fn run_backward_lstm(
    tape: &mut Tape,
    params: &LstmParams,
    inputs: &[Tensor],
    masks: &[Tensor],
) -> Result<Vec<CellState>> {
    if inputs.is_empty() {
        return Err(Error::Mismatch("backward pass over empty sequence".into()));
    }
    if inputs.len() != masks.len() {
        return Err(Error::Mismatch(format!(
            "{} inputs vs {} masks",
            inputs.len(),
            masks.len()
        )));
    }
    let batch = inputs[0].shape()[0];
    let mut state = CellState::zeros(batch, params.d_h());
    let mut out: Vec<Option<CellState>> = vec![None; inputs.len()];
    for j in (0..inputs.len()).rev() {
        let next = lstm_step(tape, params, &inputs[j], &state)?;
        state = CellState {
            h: mask_rows(tape, &next.h, &masks[j])?,
            c: mask_rows(tape, &next.c, &masks[j])?,
        };
        out[j] = Some(state.clone());
    }
    Ok(out.into_iter().map(|s| s.expect("all steps filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_rel_err;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn scalar_params(vals: [f64; 12]) -> LstmParams {
        let g = |w: f64, u: f64, b: f64| Gate {
            w: Tensor::matrix(&[[w]]),
            u: Tensor::matrix(&[[u]]),
            b: Tensor::vector(&[b]),
        };
        LstmParams {
            input: g(vals[0], vals[1], vals[2]),
            forget: g(vals[3], vals[4], vals[5]),
            output: g(vals[6], vals[7], vals[8]),
            cell: g(vals[9], vals[10], vals[11]),
        }
    }

    #[test]
    fn zero_cell_outputs_zero() {
        let params = LstmParams::zeros(3, 2);
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[5.0, -2.0, 1.0]]);
        let next = lstm_step(&mut tape, &params, &x, &CellState::zeros(1, 2)).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_matches_hand_evaluation() {
        let vals = [0.1, 0.2, 0.05, 0.3, -0.1, 1.0, -0.2, 0.4, 0.0, 0.7, 0.6, -0.3];
        let params = scalar_params(vals);
        let mut tape = Tape::new();
        let x = 1.0;
        let next = lstm_step(
            &mut tape,
            &params,
            &Tensor::matrix(&[[x]]),
            &CellState::zeros(1, 1),
        )
        .unwrap();

        let i = sig(vals[0] * x + vals[2]);
        let f = sig(vals[3] * x + vals[5]);
        let o = sig(vals[6] * x + vals[8]);
        let g = (vals[9] * x + vals[11]).tanh();
        let c = f * 0.0 + i * g;
        let h = o * c.tanh();
        assert!((next.c.data()[0] - c).abs() < 1e-15);
        assert!((next.h.data()[0] - h).abs() < 1e-15);
    }

    #[test]
    fn hidden_state_bounded_by_one() {
        let mut rng = Rng::seeded(61);
        let params = LstmParams::init(4, 3, &mut rng);
        let mut tape = Tape::new();
        let mut state = CellState::zeros(2, 3);
        for step in 0..40 {
            let x = Tensor::from_vec(
                (0..8).map(|_| rng.uniform_in(-5.0, 5.0)).collect(),
                &[2, 4],
            )
            .unwrap();
            state = lstm_step(&mut tape, &params, &x, &state).unwrap();
            assert!(state.h.data().iter().all(|v| v.abs() < 1.0));
            // memory grows at most one unit per step
            let c_max = state.c.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(c_max <= (step + 1) as f64 + 1e-12);
        }
    }

    #[test]
    fn zero_extras_reduce_to_standard_cell() {
        let mut rng = Rng::seeded(62);
        let params = VarForwardLstmParams::zero_extras(3, 4, 2, 3, &mut rng);
        let mut tape = Tape::new();
        for _ in 0..100 {
            let x = Tensor::from_vec(
                (0..6).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
                &[2, 3],
            )
            .unwrap();
            let prev = CellState {
                h: Tensor::from_vec((0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), &[2, 4])
                    .unwrap(),
                c: Tensor::from_vec((0..8).map(|_| rng.uniform_in(-2.0, 2.0)).collect(), &[2, 4])
                    .unwrap(),
            };
            let z = Tensor::from_vec((0..4).map(|_| rng.normal()).collect(), &[2, 2]).unwrap();
            let bt = Tensor::from_vec((0..6).map(|_| rng.normal()).collect(), &[2, 3]).unwrap();
            let a = var_forward_step(&mut tape, &params, &x, &prev, &z, &bt).unwrap();
            let b = lstm_step(&mut tape, &params.base, &x, &prev).unwrap();
            assert_eq!(a.h.data(), b.h.data());
            assert_eq!(a.c.data(), b.c.data());
        }
    }

    #[test]
    fn zero_latents_ignore_extra_matrices() {
        let mut rng = Rng::seeded(63);
        let params = VarForwardLstmParams::init(3, 4, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let x = Tensor::from_vec((0..6).map(|_| rng.uniform_in(-2.0, 2.0)).collect(), &[2, 3])
            .unwrap();
        let prev = CellState::zeros(2, 4);
        let z = Tensor::zeros(&[2, 2]);
        let bt = Tensor::zeros(&[2, 3]);
        let a = var_forward_step(&mut tape, &params, &x, &prev, &z, &bt).unwrap();
        let b = lstm_step(&mut tape, &params.base, &x, &prev).unwrap();
        assert_eq!(a.h.data(), b.h.data());
    }

    #[test]
    fn scalar_var_cell_matches_hand_evaluation() {
        let base = scalar_params([0.1, 0.2, 0.0, 0.3, -0.1, 0.5, -0.2, 0.4, 0.1, 0.7, 0.6, 0.0]);
        let vg = |v: f64, r: f64| VarGate {
            v: Tensor::matrix(&[[v]]),
            r: Tensor::matrix(&[[r]]),
        };
        let params = VarForwardLstmParams {
            base,
            input: vg(0.11, -0.07),
            forget: vg(-0.05, 0.13),
            output: vg(0.09, 0.02),
            cell: vg(0.21, -0.17),
        };
        let (x, z, bt, h0, c0) = (0.8, -0.6, 1.1, 0.25, -0.4);
        let mut tape = Tape::new();
        let next = var_forward_step(
            &mut tape,
            &params,
            &Tensor::matrix(&[[x]]),
            &CellState {
                h: Tensor::matrix(&[[h0]]),
                c: Tensor::matrix(&[[c0]]),
            },
            &Tensor::matrix(&[[z]]),
            &Tensor::matrix(&[[bt]]),
        )
        .unwrap();

        let pre = |w: f64, u: f64, b: f64, v: f64, r: f64| w * x + u * h0 + b + v * z + r * bt;
        let i = sig(pre(0.1, 0.2, 0.0, 0.11, -0.07));
        let f = sig(pre(0.3, -0.1, 0.5, -0.05, 0.13));
        let o = sig(pre(-0.2, 0.4, 0.1, 0.09, 0.02));
        let g = pre(0.7, 0.6, 0.0, 0.21, -0.17).tanh();
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        assert!((next.c.data()[0] - c).abs() < 1e-15);
        assert!((next.h.data()[0] - h).abs() < 1e-15);
    }

    #[test]
    fn single_step_backward_equals_cell_step() {
        let mut rng = Rng::seeded(64);
        let params = LstmParams::init(2, 3, &mut rng);
        let mut tape = Tape::new();
        let x = Tensor::matrix(&[[0.5, -1.0]]);
        let states =
            run_backward_lstm(&mut tape, &params, &[x.clone()], &[Tensor::vector(&[1.0])])
                .unwrap();
        let direct = lstm_step(&mut tape, &params, &x, &CellState::zeros(1, 3)).unwrap();
        assert_eq!(states[0].h.data(), direct.h.data());
    }

    #[test]
    fn backward_pass_equals_forward_pass_on_reversed_input() {
        let mut rng = Rng::seeded(65);
        let params = LstmParams::init(2, 3, &mut rng);
        let inputs: Vec<Tensor> = (0..5)
            .map(|_| {
                Tensor::from_vec((0..4).map(|_| rng.uniform_in(-2.0, 2.0)).collect(), &[2, 2])
                    .unwrap()
            })
            .collect();
        let masks: Vec<Tensor> = (0..5).map(|_| Tensor::vector(&[1.0, 1.0])).collect();
        let mut tape = Tape::new();
        let bwd = run_backward_lstm(&mut tape, &params, &inputs, &masks).unwrap();

        let mut state = CellState::zeros(2, 3);
        let mut fwd_rev = Vec::new();
        for x in inputs.iter().rev() {
            state = lstm_step(&mut tape, &params, x, &state).unwrap();
            fwd_rev.push(state.clone());
        }
        for (j, s) in fwd_rev.iter().rev().enumerate() {
            assert_eq!(bwd[j].h.data(), s.h.data());
            assert_eq!(bwd[j].c.data(), s.c.data());
        }
    }

    #[test]
    fn padding_content_never_leaks() {
        let mut rng = Rng::seeded(66);
        let params = LstmParams::init(2, 3, &mut rng);
        // sequence 0 has length 2 of 4; sequence 1 is full length
        let masks: Vec<Tensor> = (0..4)
            .map(|j| Tensor::vector(&[if j < 2 { 1.0 } else { 0.0 }, 1.0]))
            .collect();
        let clean: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::from_vec((0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect(), &[2, 2])
                    .unwrap()
            })
            .collect();
        // same batch with garbage in sequence 0's padded steps
        let garbage: Vec<Tensor> = clean
            .iter()
            .enumerate()
            .map(|(j, x)| {
                if j < 2 {
                    x.clone()
                } else {
                    let mut d = x.data().to_vec();
                    d[0] = 1e6;
                    d[1] = -1e6;
                    Tensor::from_vec(d, &[2, 2]).unwrap()
                }
            })
            .collect();
        let mut tape = Tape::new();
        let a = run_backward_lstm(&mut tape, &params, &clean, &masks).unwrap();
        let b = run_backward_lstm(&mut tape, &params, &garbage, &masks).unwrap();
        for j in 0..4 {
            assert_eq!(a[j].h.data(), b[j].h.data(), "step {}", j);
        }
        // padded states are exactly zero
        for j in 2..4 {
            assert!(a[j].h.data()[0..3].iter().all(|&v| v == 0.0));
            assert!(a[j].c.data()[0..3].iter().all(|&v| v == 0.0));
        }
        // the other sequence is unaffected by the first one's padding
        assert!(a[3].h.data()[3..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn five_step_gradients_match_fd() {
        let mut rng = Rng::seeded(67);
        let d_in = 2;
        let d_h = 3;
        let params = LstmParams::init(d_in, d_h, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d_in).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();

        let mut names = Vec::new();
        params.visit("cell", &mut names);
        let n_params = names.len();

        let eval = |p: &LstmParams, track: bool| -> (f64, Option<Vec<Vec<f64>>>) {
            let mut tape = Tape::new();
            let bound = if track { p.bind(&mut tape) } else { p.clone() };
            let mut state = CellState::zeros(1, d_h);
            let mut total = Tensor::scalar(0.0);
            for x in &inputs {
                let xt = Tensor::from_vec(x.clone(), &[1, d_in]).unwrap();
                state = lstm_step(&mut tape, &bound, &xt, &state).unwrap();
                let s = tape.sum_all(&state.h).unwrap();
                total = tape.add(&total, &s).unwrap();
            }
            let val = total.item();
            if track {
                let grads = tape.backward(&total).unwrap();
                let mut tens = Vec::new();
                bound.visit("cell", &mut tens);
                (val, Some(tens.iter().map(|(_, t)| grads.wrt_or_zeros(t)).collect()))
            } else {
                (val, None)
            }
        };

        let (_, analytic) = eval(&params, true);
        let analytic = analytic.unwrap();
        let eps = 1e-5;
        for pi in 0..n_params {
            let numel = {
                let mut tens = Vec::new();
                params.visit("cell", &mut tens);
                tens[pi].1.numel()
            };
            for i in 0..numel {
                let perturb = |delta: f64| -> LstmParams {
                    let mut p = params.clone();
                    let mut tens = Vec::new();
                    p.visit_mut("cell", &mut tens);
                    tens[pi].1.data_mut()[i] += delta;
                    p
                };
                let num = (eval(&perturb(eps), false).0 - eval(&perturb(-eps), false).0)
                    / (2.0 * eps);
                let err = grad_rel_err(analytic[pi][i], num);
                assert!(
                    err < 1e-4,
                    "param {} [{}]: analytic {} vs fd {}",
                    pi,
                    i,
                    analytic[pi][i],
                    num
                );
            }
        }
    }
}

//! Small value scorer for the clipped-objective baseline.
//!
//! Maps (query embedding, normalized position) to a scalar through one
//! tanh layer, trained with squared error against the terminal reward.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Context, GradientMap, Tape, Trace, Values};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    input: usize,
    hidden: usize,
    theta: Vec<f64>,
}

impl ValueNet {
    /// Zero-initialized scorer: initial value estimates are exactly zero.
    pub fn new(query_dim: usize, hidden: usize) -> Self {
        let input = query_dim + 1;
        ValueNet {
            input,
            hidden,
            theta: vec![0.0; (input + 2) * hidden + 1],
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn forward<C: Context>(&self, ctx: &mut C, features: &[f64]) -> C::V {
        debug_assert_eq!(features.len(), self.input);
        let (inp, h) = (self.input, self.hidden);
        let mut acts = Vec::with_capacity(h);
        for unit in 0..h {
            let mut terms = Vec::with_capacity(inp);
            for (i, &x) in features.iter().enumerate() {
                let w = ctx.param(unit * inp + i);
                let xc = ctx.constant(x);
                terms.push(ctx.mul(w, xc));
            }
            let dot = ctx.sum(&terms);
            let b = ctx.param(h * inp + unit);
            let pre = ctx.add(dot, b);
            acts.push(ctx.tanh(pre));
        }
        let mut out_terms = Vec::with_capacity(h);
        for (unit, &a) in acts.iter().enumerate() {
            let w = ctx.param(h * inp + h + unit);
            out_terms.push(ctx.mul(w, a));
        }
        let dot = ctx.sum(&out_terms);
        let b = ctx.param(h * inp + 2 * h);
        ctx.add(dot, b)
    }

    fn features(&self, query_emb: &[f64], position: usize, max_len: usize) -> Vec<f64> {
        let mut f = query_emb.to_vec();
        f.push(position as f64 / max_len.max(1) as f64);
        f
    }

    pub fn predict(&self, query_emb: &[f64], position: usize, max_len: usize) -> f64 {
        let mut ctx = Values::new(&self.theta);
        let f = self.features(query_emb, position, max_len);
        self.forward(&mut ctx, &f)
    }

    /// Mean squared error against the targets; returns (loss, gradient).
    pub fn loss_and_grad(
        &self,
        batch: &[(Vec<f64>, usize, usize, f64)], // (query_emb, position, max_len, target)
    ) -> (f64, GradientMap) {
        let mut tape = Tape::new();
        let nodes = tape.bind_params(&self.theta);
        let mut residual_sq = Vec::with_capacity(batch.len());
        for (emb, pos, max_len, target) in batch {
            let f = self.features(emb, *pos, *max_len);
            let mut ctx = Trace::new(&mut tape, &nodes);
            let pred = self.forward(&mut ctx, &f);
            let t = tape.constant(*target);
            let diff = tape.sub(pred, t);
            residual_sq.push(tape.mul(diff, diff));
        }
        let total = tape.sum(&residual_sq);
        let mse = tape.scale(total, 1.0 / batch.len().max(1) as f64);
        let loss = tape.value(mse);
        let grad = tape
            .backward(mse)
            .expect("value net graph is finite by construction");
        (loss, grad)
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
}

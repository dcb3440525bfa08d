use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frozen weight plus a trainable rank-`r` update `up · down`.
///
/// `up` starts at zero so the adapted layer initially reproduces the
/// frozen one.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLinear {
    pub frozen_weight: Tensor,
    /// `[r, in]`
    pub down: Tensor,
    /// `[out, r]`
    pub up: Tensor,
}

impl LowRankLinear {
    pub fn new<R: Rng + ?Sized>(frozen_weight: Tensor, rank: usize, rng: &mut R) -> Result<Self> {
        let (out, inp) = frozen_weight.dims2()?;
        if rank == 0 || rank >= out.min(inp) {
            return Err(Error::config(
                "lora_rank",
                format!("rank {rank} must be in [1, {}) for a {out}x{inp} weight", out.min(inp)),
            ));
        }
        let down = Tensor::randn(&[rank, inp], 1.0 / (inp as f64).sqrt(), rng);
        let up = Tensor::zeros(&[out, rank]);
        Ok(LowRankLinear {
            frozen_weight,
            down,
            up,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    /// `x·Wᵀ + (x·downᵀ)·upᵀ`; returns the output and the two adapter leaves.
    pub fn apply(&self, tape: &mut Tape, x: Var, train: bool) -> Result<(Var, Var, Var)> {
        let w = tape.constant(self.frozen_weight.clone());
        let down = tape.leaf(self.down.clone(), train);
        let up = tape.leaf(self.up.clone(), train);
        let base = tape.matmul_t(x, w)?;
        let h = tape.matmul_t(x, down)?;
        let delta = tape.matmul_t(h, up)?;
        Ok((tape.add(base, delta)?, down, up))
    }
}

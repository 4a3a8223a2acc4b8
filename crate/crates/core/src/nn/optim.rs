use crate::error::{check_len, Error, Result};

/// Heavy-ball SGD: `v <- momentum * v + g`, `p <- p - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    check_len("gradient", params.len(), grads.len())?;
    check_len("velocity", params.len(), velocity.len())?;
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Input(format!(
            "sgd needs lr > 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Half-cosine decay from `lr0` at round 0 to 0 at `total_rounds`.
/// Rounds past the end are clamped.
pub fn cosine_lr(round: usize, total_rounds: usize, lr0: f64) -> f64 {
    if total_rounds == 0 {
        return lr0;
    }
    let progress = round.min(total_rounds) as f64 / total_rounds as f64;
    lr0 * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

use crate::error::{Error, Result};

/// `base · D^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, base: f64, warmup: u64, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning-rate schedule starts at step 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::invalid("warmup and d_model must be positive"));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok(base * (d_model as f64).powf(-0.5) * decay.min(ramp))
}

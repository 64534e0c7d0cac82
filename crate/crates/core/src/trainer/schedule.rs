use crate::error::{Error, Result};

/// Linear warmup to `peak` over `w = ceil(warmup_ratio * total)` steps, then
/// linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} beyond schedule length {total}")));
    }
    let w = warmup_steps(total, warmup_ratio);
    let lr = if w > 0 && step <= w {
        peak * step as f64 / w as f64
    } else {
        peak * (total - step) as f64 / (total - w) as f64
    };
    Ok(lr)
}

pub fn warmup_steps(total: usize, warmup_ratio: f64) -> usize {
    // the slack keeps decimal products such as 0.06 * 100 from rounding up
    ((warmup_ratio * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total.saturating_sub(1))
}

use crate::error::{Error, Result};

/// Interleaved `[sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), ...]` with
/// `ω_i = 10000^(-i / (width/2))`.
pub fn sinusoidal_embed(t: usize, width: usize) -> Result<Vec<f32>> {
    if !width.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "embedding width must be even, got {width}"
        )));
    }
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        let phase = t as f64 * freq;
        out.push(phase.sin() as f32);
        out.push(phase.cos() as f32);
    }
    Ok(out)
}

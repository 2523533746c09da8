use crate::error::{Error, Result};

use super::float::FloatModel;

/// Valid range of dequantized image pixels (`[0, 127]` at exponent 0).
pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 127.0 / 128.0;

/// l-infinity PGD: `steps` signed-gradient ascent steps of size
/// `2.5 * eps / steps` on the cross-entropy, each projected onto the
/// `eps`-ball around `x` and the pixel range.
pub fn pgd_attack(model: &FloatModel, x: &[f64], label: usize, eps: f64, steps: usize) -> Result<Vec<f64>> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::validation(format!("budget {eps} invalid")));
    }
    let mut adv = x.to_vec();
    if eps == 0.0 || steps == 0 {
        return Ok(adv);
    }
    let alpha = 2.5 * eps / steps as f64;
    for _ in 0..steps {
        let g = model.grad(&adv, label)?;
        for ((a, &x0), gi) in adv.iter_mut().zip(x).zip(&g.input) {
            let sign = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + alpha * sign).clamp(x0 - eps, x0 + eps).clamp(PIXEL_MIN, PIXEL_MAX);
        }
    }
    Ok(adv)
}

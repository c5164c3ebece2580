use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over all components.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    gradient_check_sampled(f, x, eps, usize::MAX, 0)
}

/// Like [`gradient_check`] but probes at most `max_coords` components chosen
/// with the given seed.
pub fn gradient_check_sampled<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(TensorError::NonScalarLoss(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.take(xv);

    let coords: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, x.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

use super::{Bound, Params, Tape, Var};
use crate::error::Result;

/// `|a − n| / max(1, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Compares tape gradients of `f` against central differences with step `h`
/// over every scalar of every trainable parameter. Returns the max relative error.
pub fn grad_check<F>(f: F, params: &mut Params<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    grad_check_sets(|tape, bound| f(tape, &bound[0]), &mut [params], h)
}

/// [`grad_check`] over several parameter sets bound to the same tape, in order.
pub fn grad_check_sets<F>(f: F, sets: &mut [&mut Params<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Bound]) -> Result<Var>,
{
    let eval = |sets: &[&mut Params<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let bound: Vec<Bound> = sets.iter().map(|p| p.bind(&mut tape)).collect();
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss)[0])
    };

    let mut tape = Tape::new();
    let bound: Vec<Bound> = sets.iter().map(|p| p.bind(&mut tape)).collect();
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sets.len());
    for (set, b) in sets.iter_mut().zip(&bound) {
        set.zero_grad();
        set.accumulate(&grads, b);
        analytic.push(set.iter().map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_default()).collect());
    }

    let mut worst = 0.0f64;
    for si in 0..sets.len() {
        let names: Vec<String> = sets[si].iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate() {
            let id = sets[si].id_of(name).expect("name from store");
            if !sets[si].get(id).requires_grad() {
                continue;
            }
            for k in 0..sets[si].get(id).len() {
                let orig = sets[si].get(id).data()[k];
                sets[si].get_mut(id).data_mut()[k] = orig + h;
                let up = eval(sets)?;
                sets[si].get_mut(id).data_mut()[k] = orig - h;
                let down = eval(sets)?;
                sets[si].get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(relative_error(analytic[si][pi][k], numeric));
            }
        }
    }
    Ok(worst)
}

use rand::Rng;

use super::{Bound, ParamId, Params, Real, Tape, Tensor, Var};
use crate::error::Result;

pub(crate) fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Glorot-uniform weight, zero bias.
    pub fn init<T: Real>(
        params: &mut Params<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(rng, &[input, output], bound));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros([output])));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        match self.bias {
            Some(b) => tape.add_bias(y, bound[b]),
            None => Ok(y),
        }
    }
}

/// Standard LSTM cell. Gate columns are ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<T: Real>(params: &mut Params<T>, name: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let w_input = params.add(format!("{name}.w_input"), uniform(rng, &[input_dim, 4 * hidden], bound));
        let w_hidden = params.add(format!("{name}.w_hidden"), uniform(rng, &[hidden, 4 * hidden], bound));
        let mut b = Tensor::zeros([4 * hidden]);
        // forget gate starts open
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        let bias = params.add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden,
        }
    }

    /// One step on a batch: `x: [B×in]`, `h, c: [B×D]`. Returns `(h', c')`.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.hidden;
        let xi = tape.matmul(x, bound[self.w_input])?;
        let hh = tape.matmul(h, bound[self.w_hidden])?;
        let pre = tape.add(xi, hh)?;
        let pre = tape.add_bias(pre, bound[self.bias])?;
        let i = tape.slice_cols(pre, 0, d)?;
        let f = tape.slice_cols(pre, d, d)?;
        let g = tape.slice_cols(pre, 2 * d, d)?;
        let o = tape.slice_cols(pre, 3 * d, d)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::sigmoid;

    fn zero_cell(params: &mut Params<f64>, din: usize, d: usize) -> LstmCell {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::init(params, "cell", din, d, &mut rng);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        cell
    }

    fn run(params: &Params<f64>, cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.constant([1, x.len()], x.to_vec()).unwrap();
        let h = tape.constant([1, h.len()], h.to_vec()).unwrap();
        let c = tape.constant([1, c.len()], c.to_vec()).unwrap();
        let (h2, c2) = cell.step(&mut tape, &b, x, h, c).unwrap();
        (tape.value(h2).to_vec(), tape.value(c2).to_vec())
    }

    #[test]
    fn zero_params_zero_cell() {
        let mut p = Params::new();
        let cell = zero_cell(&mut p, 3, 2);
        let (h, c) = run(&p, &cell, &[1.0, -2.0, 0.5], &[0.3, 0.1], &[0.0, 0.0]);
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_params_halve_cell() {
        let mut p = Params::new();
        let cell = zero_cell(&mut p, 3, 2);
        let c0 = [1.2, -0.8];
        let (h, c) = run(&p, &cell, &[1.0, -2.0, 0.5], &[0.3, 0.1], &c0);
        for k in 0..2 {
            assert!((c[k] - 0.5 * c0[k]).abs() < 1e-12);
            assert!((h[k] - 0.5 * (0.5 * c0[k]).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_reference_loop() {
        let mut p = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (din, d) = (4, 3);
        let cell = LstmCell::init(&mut p, "cell", din, d, &mut rng);
        let x = [0.3, -0.7, 1.1, 0.05];
        let h = [0.2, -0.1, 0.4];
        let c = [-0.5, 0.9, 0.1];
        let (h2, c2) = run(&p, &cell, &x, &h, &c);

        let wx = p.get(cell.w_input).data();
        let wh = p.get(cell.w_hidden).data();
        let bias = p.get(cell.bias).data();
        for k in 0..d {
            let pre = |gate: usize| {
                let col = gate * d + k;
                let mut s = bias[col];
                for i in 0..din {
                    s += x[i] * wx[i * 4 * d + col];
                }
                for j in 0..d {
                    s += h[j] * wh[j * 4 * d + col];
                }
                s
            };
            let (ig, fg, gg, og) = (sigmoid(pre(0)), sigmoid(pre(1)), pre(2).tanh(), sigmoid(pre(3)));
            let cn = fg * c[k] + ig * gg;
            let hn = og * cn.tanh();
            assert!((c2[k] - cn).abs() < 1e-6);
            assert!((h2[k] - hn).abs() < 1e-6);
        }
    }
}

//! Feed-forward and recurrent building blocks expressed on the tape.

use rand::Rng;

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{IolError, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.add_uniform(format!("{name}.weight"), vec![out_dim, in_dim], bound, rng);
        let bias = params.add_uniform(format!("{name}.bias"), vec![out_dim], bound, rng);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let wx = tape.matvec(w, x);
        tape.add(wx, b)
    }
}

/// Affine layers with tanh between them and a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if tape.dim(x) != self.in_dim() {
            return Err(IolError::shape("mlp input", self.in_dim(), tape.dim(x)));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Runs an MLP on a plain vector (forward only).
pub fn mlp_forward(params: &ParamSet, mlp: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let x = tape.input(input.to_vec());
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).to_vec())
}

/// Gated recurrent cell with input, forget, cell-candidate and output gates.
///
/// The fused weight is `4H x (I + H)` over `[x, h]`; gate rows are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let weight = params.add_uniform(
            format!("{name}.weight"),
            vec![4 * hidden_dim, input_dim + hidden_dim],
            bound,
            rng,
        );
        let bias = params.add_uniform(format!("{name}.bias"), vec![4 * hidden_dim], bound, rng);
        LstmCell { weight, bias, input_dim, hidden_dim }
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>) -> LstmState {
        LstmState {
            h: tape.input(vec![0.0; self.hidden_dim]),
            c: tape.input(vec![0.0; self.hidden_dim]),
        }
    }

    pub fn step(&self, tape: &mut Tape<'_>, state: LstmState, x: Var) -> Result<LstmState> {
        if tape.dim(x) != self.input_dim {
            return Err(IolError::shape("recurrent input", self.input_dim, tape.dim(x)));
        }
        if tape.dim(state.h) != self.hidden_dim || tape.dim(state.c) != self.hidden_dim {
            return Err(IolError::shape("recurrent state", self.hidden_dim, tape.dim(state.h)));
        }
        let hd = self.hidden_dim;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xh = tape.concat(&[x, state.h]);
        let pre = tape.matvec(w, xh);
        let pre = tape.add(pre, b);
        let i_raw = tape.slice(pre, 0, hd);
        let f_raw = tape.slice(pre, hd, hd);
        let g_raw = tape.slice(pre, 2 * hd, hd);
        let o_raw = tape.slice(pre, 3 * hd, hd);
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let fc = tape.mul(f, state.c);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        Ok(LstmState { h, c })
    }
}

/// One recurrent update on plain vectors: `(h, c), x -> (h', c')`.
pub fn recurrent_step(params: &ParamSet, cell: &LstmCell, h: &[f64], c: &[f64], input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new(params);
    let state = LstmState {
        h: tape.input(h.to_vec()),
        c: tape.input(c.to_vec()),
    };
    let x = tape.input(input.to_vec());
    let next = cell.step(&mut tape, state, x)?;
    Ok((tape.value(next.h).to_vec(), tape.value(next.c).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(p: &mut ParamSet) {
        p.iter_mut().for_each(|t| t.values.iter_mut().for_each(|v| *v = 0.0));
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "m", &[3, 4, 2], &mut rng);
        zeroed(&mut p);
        assert_eq!(mlp_forward(&p, &mlp, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "m", &[3, 3], &mut rng);
        let l = &mlp.layers[0];
        p.get_mut(l.weight).values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        p.get_mut(l.bias).values = vec![0.0; 3];
        let x = [0.25, -7.0, 3.5];
        assert_eq!(mlp_forward(&p, &mlp, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn mlp_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "m", &[3, 2], &mut rng);
        assert!(matches!(mlp_forward(&p, &mlp, &[1.0]), Err(IolError::Shape { .. })));
    }

    #[test]
    fn mlp_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "m", &[4, 5, 3], &mut rng);
        let x = [0.3, -1.2, 2.0, 0.7];
        let got = mlp_forward(&p, &mlp, &x).unwrap();

        let (w0, b0) = (p.values(mlp.layers[0].weight), p.values(mlp.layers[0].bias));
        let (w1, b1) = (p.values(mlp.layers[1].weight), p.values(mlp.layers[1].bias));
        let mut hidden = [0.0f64; 5];
        for r in 0..5 {
            let mut acc = b0[r];
            for c in 0..4 {
                acc += w0[r * 4 + c] * x[c];
            }
            hidden[r] = acc.tanh();
        }
        for r in 0..3 {
            let mut acc = b1[r];
            for c in 0..5 {
                acc += w1[r * 5 + c] * hidden[c];
            }
            assert!((acc - got[r]).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_cell_gives_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "c", 3, 4, &mut rng);
        zeroed(&mut p);
        let (h, _) = recurrent_step(&p, &cell, &[0.0; 4], &[0.0; 4], &[9.0, -9.0, 1.0]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn recurrent_step_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "c", 2, 3, &mut rng);
        let run = || {
            let (h1, c1) = recurrent_step(&p, &cell, &[0.0; 3], &[0.0; 3], &[1.0, 2.0]).unwrap();
            recurrent_step(&p, &cell, &h1, &c1, &[1.0, 2.0]).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        let cell = LstmCell::new(&mut p, "c", 3, 4, &mut rng);
        let probe = [0.7, -0.4, 1.1, 0.2];
        let f = |ps: &ParamSet| {
            let mut tape = Tape::new(ps);
            let st = LstmState {
                h: tape.input(vec![0.1, -0.2, 0.3, 0.0]),
                c: tape.input(vec![0.5, 0.0, -0.5, 0.2]),
            };
            let x = tape.input(vec![0.9, -1.3, 0.4]);
            let s1 = cell.step(&mut tape, st, x).unwrap();
            let s2 = cell.step(&mut tape, s1, x).unwrap();
            let w = tape.input(probe.to_vec());
            let out = tape.dot(s2.h, w);
            (tape.scalar(out), tape.backward(out))
        };
        let report = grad_check(f, &p, 1e-5);
        assert!(report.max_rel_err <= 1e-3, "{report:?}");
    }
}

//! GRU over sinusoidally embedded positions followed by a linear projection.
//!
//! Gate layout along the `3H` axis is `[reset | update | candidate]`, with
//! `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))` and `h' = (1 − z) ⊙ n + z ⊙ h`.

use rand::Rng as _;

use super::sinusoidal::{encode_values, SinusoidalConfig};
use super::PositionSequence;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Linear, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    pub prefix: String,
    pub dim: usize,
    pub input: SinusoidalConfig,
}

impl RecurrentEncoder {
    /// Input and hidden widths both equal `input.dim`.
    pub fn new(prefix: impl Into<String>, input: SinusoidalConfig) -> Result<Self> {
        input.validate()?;
        Ok(Self { prefix: prefix.into(), dim: input.dim, input })
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn w_input_name(&self) -> String {
        self.key("gru.w_input")
    }
    pub fn b_input_name(&self) -> String {
        self.key("gru.b_input")
    }
    pub fn w_hidden_name(&self) -> String {
        self.key("gru.w_hidden")
    }
    pub fn b_hidden_name(&self) -> String {
        self.key("gru.b_hidden")
    }

    pub fn projection(&self) -> Linear {
        Linear::new(self.key("proj"), self.dim, self.dim)
    }

    /// GRU weights and biases uniform in `±1/√H`; projection as any linear layer.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let h = self.dim;
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches count")
        };
        store.insert_param(self.w_input_name(), uniform(&[h, 3 * h]));
        store.insert_param(self.b_input_name(), uniform(&[3 * h]));
        store.insert_param(self.w_hidden_name(), uniform(&[h, 3 * h]));
        store.insert_param(self.b_hidden_name(), uniform(&[3 * h]));
        self.projection().init(store, rng);
    }

    /// Runs `batch` sequences of `steps` positions each (row-major
    /// `positions[b·steps + t]`) and returns `[(batch·steps)×D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        positions: &[f64],
        batch: usize,
        steps: usize,
    ) -> Result<Var> {
        if batch == 0 || steps == 0 || positions.len() != batch * steps {
            return Err(Error::Shape(format!(
                "recurrent encoder: {} positions for {batch} sequences of {steps} steps",
                positions.len()
            )));
        }
        let h = self.dim;
        let z_in = g.constant(encode_values(positions, &self.input)?);
        let w_in = g.param(store, &self.w_input_name())?;
        let b_in = g.param(store, &self.b_input_name())?;
        let w_h = g.param(store, &self.w_hidden_name())?;
        let b_h = g.param(store, &self.b_hidden_name())?;
        if g.value(w_h).shape() != [h, 3 * h] {
            return Err(Error::Shape(format!(
                "recurrent hidden weight has shape {:?}, expected [{h}, {}]",
                g.value(w_h).shape(),
                3 * h
            )));
        }
        let gx = g.linear(z_in, w_in, b_in)?;
        let mut state = g.constant(Tensor::zeros(&[batch, h]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows: Vec<usize> = (0..batch).map(|b| b * steps + t).collect();
            let x = g.gather_rows(gx, &rows)?;
            let hh = g.linear(state, w_h, b_h)?;
            let (xr, xz, xn) = (g.slice_cols(x, 0, h)?, g.slice_cols(x, h, h)?, g.slice_cols(x, 2 * h, h)?);
            let (hr, hz, hn) = (g.slice_cols(hh, 0, h)?, g.slice_cols(hh, h, h)?, g.slice_cols(hh, 2 * h, h)?);
            let r = g.add(xr, hr)?;
            let r = g.activation(r, Activation::Sigmoid);
            let z = g.add(xz, hz)?;
            let z = g.activation(z, Activation::Sigmoid);
            let gated = g.mul(r, hn)?;
            let n = g.add(xn, gated)?;
            let n = g.activation(n, Activation::Tanh);
            let diff = g.sub(state, n)?;
            let keep = g.mul(z, diff)?;
            state = g.add(n, keep)?;
            outputs.push(state);
        }
        let hidden = g.stack_steps(&outputs)?;
        self.projection().forward(g, store, hidden)
    }

    pub fn encode(&self, store: &ParamStore, positions: &PositionSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, positions.values(), 1, positions.len())?;
        Ok(g.value(out).clone())
    }
}

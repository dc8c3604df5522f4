//! Fully-connected layers and small MLPs (relu hidden layers, linear output).

use rand::Rng;

use crate::tensor::{ops, Tensor, TensorError};

/// One dense layer. Weights and bias drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            w: Tensor::param(w, &[fan_in, fan_out]).expect("nonzero layer dims"),
            b: bias.then(|| {
                let b: Vec<f32> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::param(b, &[fan_out]).expect("nonzero layer dims")
            }),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = ops::matmul(x, &self.w)?;
        match &self.b {
            Some(b) => ops::add(&y, b),
            None => Ok(y),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn zero_init(&self) {
        self.w.set_data(&vec![0.0; self.w.numel()]).expect("same size");
        if let Some(b) = &self.b {
            b.set_data(&vec![0.0; b.numel()]).expect("same size");
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

/// Stack of dense layers: relu after every layer except the last.
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` = [input, hidden..., output]; needs at least one layer.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&ops::relu(&h)?)?;
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    /// Zero the final layer so the initial output (and through a sigmoid,
    /// the initial prediction) is exactly 0 (resp. 0.5).
    pub fn zero_final_layer(&self) {
        self.layers.last().expect("nonempty").zero_init();
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.layer{i}"), out);
        }
    }
}

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{leaky_relu, matmul_nt_raw, Graph, Tensor, Var};
use crate::rng;

/// Hidden-layer nonlinearity. The final layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub const DEFAULT_SLOPE: f64 = 0.2;

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => leaky_relu(x, s),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out x in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// An [`Mlp`] whose parameters live in a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
}

impl Mlp {
    /// Kaiming-uniform weights (bound `sqrt(6 / ((1 + a^2) fan_in))` for a
    /// leaky ReLU of slope `a`), zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::init_with(dims, activation, &mut r)
    }

    pub fn init_with(dims: &[usize], activation: Activation, r: &mut impl rand::Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least input and output extents, got {dims:?}"
            )));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "extent {i} of {dims:?} must be positive"
            )));
        }
        let slope = match activation {
            Activation::LeakyRelu(s) => s,
            Activation::Identity => 1.0,
        };
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(r)).collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, data).expect("weight shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weight.ndim() != 2 || l.bias.shape() != [l.out_dim()] {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {k}: weight {:?}, bias {:?}", l.weight.shape(), l.bias.shape()),
                ));
            }
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    "mlp",
                    format!(
                        "layer {k} outputs {} but layer {} expects {}",
                        w[0].out_dim(),
                        k + 1,
                        w[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Forward pass outside any graph. `x` is `[batch x in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.cols() != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input {:?}, network expects width {}", x.shape(), self.in_dim()),
            ));
        }
        let batch = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let (out, inp) = (l.out_dim(), l.in_dim());
            let mut y = matmul_nt_raw(&h, l.weight.data(), batch, inp, out);
            for row in y.chunks_exact_mut(out) {
                for (v, b) in row.iter_mut().zip(l.bias.data()) {
                    *v += b;
                    if k != last {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            h = y;
        }
        Tensor::matrix(batch, self.out_dim(), h)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, true)
    }

    /// Binds the parameters as graph leaves; `trainable = false` makes them
    /// constants.
    pub fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp {
            layers,
            activation: self.activation,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul_nt(h, w)?;
            h = g.add(z, b)?;
            if k != last {
                if let Activation::LeakyRelu(s) = self.activation {
                    h = g.leaky_relu(h, s);
                }
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_layer_shapes() {
        let m = Mlp::init(&[4, 32, 32, 32, 32, 32, 4], Activation::LeakyRelu(0.2), 0).unwrap();
        assert_eq!(m.layers.len(), 6);
        assert_eq!(m.layers[0].weight.shape(), &[32, 4]);
        assert_eq!(m.layers[5].weight.shape(), &[4, 32]);
    }

    #[test]
    fn zero_bias_and_determinism() {
        let a = Mlp::init(&[2, 2], Activation::LeakyRelu(0.2), 9).unwrap();
        assert_eq!(a.layers[0].bias.data(), &[0.0, 0.0]);
        let b = Mlp::init(&[2, 2], Activation::LeakyRelu(0.2), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(Mlp::init(&[3], Activation::Identity, 0).is_err());
        assert!(Mlp::init(&[3, 0, 2], Activation::Identity, 0).is_err());
    }

    #[test]
    fn init_respects_bound() {
        let m = Mlp::init(&[8, 16], Activation::LeakyRelu(0.2), 3).unwrap();
        let bound = (6.0f64 / (1.04 * 8.0)).sqrt();
        assert!(m.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn identity_and_constant_maps() {
        let id = Mlp::from_layers(
            vec![Layer {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(&[3]),
            }],
            Activation::LeakyRelu(0.2),
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(id.forward(&x).unwrap(), x);

        let c = Mlp::from_layers(
            vec![Layer {
                weight: Tensor::zeros(&[2, 3]),
                bias: Tensor::vector(vec![4.0, -1.0]),
            }],
            Activation::Identity,
        )
        .unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0, -1.0, 4.0, -1.0]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let m = Mlp::init(&[3, 2], Activation::Identity, 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn unchained_layers_rejected() {
        let l = |o, i| Layer {
            weight: Tensor::zeros(&[o, i]),
            bias: Tensor::zeros(&[o]),
        };
        assert!(Mlp::from_layers(vec![l(3, 2), l(2, 4)], Activation::Identity).is_err());
    }
}

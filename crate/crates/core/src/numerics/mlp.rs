//! Feed-forward multilayer perceptron with explicit forward cache and
//! reverse-mode gradients.
//!
//! Each layer computes `a = act(x Wᵀ + b)` for a batch `x` of shape
//! `(n, in)`; weights are stored `(out, in)` row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::{dot, DenseMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Softplus => sigmoid(z),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dim("Layer::new bias", weight.rows(), bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: DenseMatrix::from_vec(output, input, data).expect("shape by construction"),
            bias: vec![0.0; output],
            activation,
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
            activation: self.activation,
        }
    }
}

/// Parameters of a feed-forward network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Per-layer inputs, pre-activations and outputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
    outputs: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &DenseMatrix {
        self.outputs.last().expect("non-empty network")
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim(
                    "MlpParams::new",
                    w[0].output_dim(),
                    w[1].input_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network; `sizes` has one more entry than `activations`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(Error::dim(
                "MlpParams::init",
                activations.len() + 1,
                sizes.len(),
            ));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Layer::glorot(w[0], w[1], act, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Network computing `other ∘ self`.
    pub fn then(&self, other: &MlpParams) -> Result<MlpParams> {
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Self::new(layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameter values, layer by layer, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(
                "MlpParams::load_flat",
                self.param_count(),
                flat.len(),
            ));
        }
        for (p, &v) in self.values_mut().zip(flat) {
            *p = v;
        }
        Ok(())
    }

    /// SHA-256 over the raw parameter bytes; used to verify freezing.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.values() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_input(&self, input: &DenseMatrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim(
                "mlp forward input",
                self.input_dim(),
                input.cols(),
            ));
        }
        Ok(())
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let (_, a) = affine_act(layer, &x);
            x = a;
        }
        Ok(x)
    }

    /// Outputs of every layer (the last entry is the network output).
    pub fn activations(&self, input: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.check_input(input)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (_, a) = affine_act(layer, &x);
            out.push(a.clone());
            x = a;
        }
        Ok(out)
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        self.check_input(input)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let (z, a) = affine_act(layer, &x);
            cache.inputs.push(x);
            cache.pre.push(z);
            cache.outputs.push(a.clone());
            x = a;
        }
        Ok((x, cache))
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &DenseMatrix,
    ) -> Result<(MlpParams, DenseMatrix)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::Internal(
                "stale forward cache: layer count differs".into(),
            ));
        }
        let last = cache.output();
        if last.rows() != output_grad.rows() || last.cols() != output_grad.cols() {
            return Err(Error::Internal(format!(
                "stale forward cache: output {}x{} vs gradient {}x{}",
                last.rows(),
                last.cols(),
                output_grad.rows(),
                output_grad.cols()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[li];
            let a = &cache.outputs[li];
            let x = &cache.inputs[li];
            let mut dz = upstream;
            for ((g, &zv), &av) in dz
                .as_mut_slice()
                .iter_mut()
                .zip(z.as_slice())
                .zip(a.as_slice())
            {
                *g *= layer.activation.derivative(zv, av);
            }
            let (outd, ind) = (layer.output_dim(), layer.input_dim());
            let mut dw = DenseMatrix::zeros(outd, ind);
            let mut db = vec![0.0; outd];
            for n in 0..dz.rows() {
                let dzr = dz.row(n);
                let xr = x.row(n);
                for (o, &g) in dzr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for (w, &xv) in dw.row_mut(o).iter_mut().zip(xr) {
                        *w += g * xv;
                    }
                }
            }
            upstream = dz.matmul(&layer.weight)?;
            grads.push(Layer {
                weight: dw,
                bias: db,
                activation: layer.activation,
            });
        }
        grads.reverse();
        Ok((MlpParams { layers: grads }, upstream))
    }
}

fn affine_act(layer: &Layer, x: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let outd = layer.output_dim();
    let mut z = DenseMatrix::zeros(x.rows(), outd);
    for n in 0..x.rows() {
        let xr = x.row(n);
        let zr = z.row_mut(n);
        for (o, zo) in zr.iter_mut().enumerate() {
            *zo = dot(layer.weight.row(o), xr) + layer.bias[o];
        }
    }
    let a = z.map(|v| layer.activation.apply(v));
    (z, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: &[&[f64]], bias: &[f64], act: Activation) -> MlpParams {
        let w = DenseMatrix::from_rows(weight).unwrap();
        MlpParams::new(vec![Layer::new(w, bias.to_vec(), act).unwrap()]).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = MlpParams::new(vec![Layer::new(
            DenseMatrix::identity(3),
            vec![0.0; 3],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let v = DenseMatrix::from_rows(&[[0.3, -1.0, 2.5]]).unwrap();
        assert_eq!(net.predict(&v).unwrap(), v);
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = MlpParams::init(
            &[4, 5, 2],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        net.values_mut().for_each(|v| *v = 0.0);
        let x = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert!(net
            .predict(&x)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_tanh_layer() {
        let net = single(&[&[1.0]], &[0.0], Activation::Tanh);
        let out = net
            .predict(&DenseMatrix::from_rows(&[[0.5]]).unwrap())
            .unwrap();
        assert_eq!(out[(0, 0)], 0.5f64.tanh());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = single(&[&[1.0, 2.0]], &[0.0], Activation::Tanh);
        assert!(matches!(
            net.forward(&DenseMatrix::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MlpParams::init(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Sigmoid],
            &mut rng,
        )
        .unwrap();
        let x = DenseMatrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&cache, &DenseMatrix::zeros(2, 2)).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_input() {
        let net = single(&[&[0.7, -0.2, 0.1]], &[0.3], Activation::Identity);
        let x = DenseMatrix::from_rows(&[[2.0, -3.0, 0.5]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let (g, _) = net
            .backward(&cache, &DenseMatrix::from_rows(&[[1.0]]).unwrap())
            .unwrap();
        assert_eq!(g.layers()[0].weight.as_slice(), x.as_slice());
        assert_eq!(g.layers()[0].bias, vec![1.0]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let net = single(&[&[1.0]], &[0.0], Activation::Tanh);
        let (_, cache) = net.forward(&DenseMatrix::zeros(2, 1)).unwrap();
        assert!(matches!(
            net.backward(&cache, &DenseMatrix::zeros(3, 1)),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_for_every_activation() {
        use Activation::*;
        for (seed, act) in [Tanh, Relu, Identity, Sigmoid, Softplus]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed as u64);
            let net = MlpParams::init(&[3, 5, 2], &[act, Tanh], &mut rng).unwrap();
            let x =
                DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap();
            let target: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |flat: &[f64]| {
                let mut n = net.clone();
                n.load_flat(flat).unwrap();
                let (out, cache) = n.forward(&x).unwrap();
                let diff: Vec<f64> = out
                    .as_slice()
                    .iter()
                    .zip(&target)
                    .map(|(o, t)| o - t)
                    .collect();
                let l = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
                let g = DenseMatrix::from_vec(4, 2, diff).unwrap();
                let (grads, _) = n.backward(&cache, &g).unwrap();
                (l, grads.to_flat())
            };
            let err = grad_check(loss, &net.to_flat(), 1e-5);
            assert!(err < 1e-4, "{act:?}: relative error {err}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpParams::init(
            &[3, 4, 2],
            &[Activation::Tanh, Activation::Softplus],
            &mut rng,
        )
        .unwrap();
        let x0 = vec![0.2, -0.4, 0.9];
        let f = |x: &[f64]| {
            let xm = DenseMatrix::from_vec(1, 3, x.to_vec()).unwrap();
            let (out, cache) = net.forward(&xm).unwrap();
            let l = out.as_slice().iter().sum::<f64>();
            let (_, dx) = net
                .backward(
                    &cache,
                    &DenseMatrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
                )
                .unwrap();
            (l, dx.into_vec())
        };
        assert!(grad_check(f, &x0, 1e-5) < 1e-6);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(
            &[6, 8, 3],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let x = DenseMatrix::from_vec(5, 6, (0..30).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = net.predict(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }
}

//! Dense feed-forward layer read as a key-value memory: `y = σ(x·K)·V`.
//!
//! Column `j` of `K` is the key of neuron `j` and row `j` of `V` its value, so
//! the output is the activation-weighted sum of value rows.

use crate::error::{Error, Result};
use crate::numerics::{ActivationKind, Matrix, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct FfnLayer<T> {
    keys: Matrix<T>,
    values: Matrix<T>,
    activation: ActivationKind,
    key_bias: Option<Vec<T>>,
    value_bias: Option<Vec<T>>,
}

impl<T: Scalar> FfnLayer<T> {
    /// `keys` is h×d, `values` is d×h.
    pub fn new(keys: Matrix<T>, values: Matrix<T>, activation: ActivationKind) -> Result<Self> {
        let (h, d) = keys.shape();
        if h == 0 || d == 0 {
            return Err(Error::shape("feed-forward layer needs h >= 1 and d >= 1"));
        }
        if values.shape() != (d, h) {
            return Err(Error::shape(format!(
                "keys are {h}x{d} so values must be {d}x{h}, got {:?}",
                values.shape()
            )));
        }
        Ok(Self {
            keys,
            values,
            activation,
            key_bias: None,
            value_bias: None,
        })
    }

    /// Attaches the optional bias pair: `key_bias` (length d) is added to the
    /// pre-activations, `value_bias` (length h) to the output.
    pub fn with_biases(
        mut self,
        key_bias: Option<Vec<T>>,
        value_bias: Option<Vec<T>>,
    ) -> Result<Self> {
        if let Some(b) = &key_bias {
            if b.len() != self.d() {
                return Err(Error::shape(format!(
                    "key bias length {} != d = {}",
                    b.len(),
                    self.d()
                )));
            }
        }
        if let Some(b) = &value_bias {
            if b.len() != self.h() {
                return Err(Error::shape(format!(
                    "value bias length {} != h = {}",
                    b.len(),
                    self.h()
                )));
            }
        }
        if key_bias
            .iter()
            .chain(&value_bias)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("non-finite bias entry".into()));
        }
        self.key_bias = key_bias;
        self.value_bias = value_bias;
        Ok(self)
    }

    pub fn random(
        h: usize,
        d: usize,
        activation: ActivationKind,
        rng: &mut crate::numerics::Rng,
    ) -> Self {
        let keys = Matrix::random_normal(h, d, 1.0 / (h as f64).sqrt(), rng);
        let values = Matrix::random_normal(d, h, 1.0 / (d as f64).sqrt(), rng);
        Self::new(keys, values, activation).expect("shapes are consistent")
    }

    /// Embedding size.
    pub fn h(&self) -> usize {
        self.keys.rows()
    }

    /// Number of neurons.
    pub fn d(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Matrix<T> {
        &self.keys
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn keys_mut(&mut self) -> &mut Matrix<T> {
        &mut self.keys
    }

    pub fn values_mut(&mut self) -> &mut Matrix<T> {
        &mut self.values
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn key_bias(&self) -> Option<&[T]> {
        self.key_bias.as_deref()
    }

    pub fn value_bias(&self) -> Option<&[T]> {
        self.value_bias.as_deref()
    }

    pub fn key_bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.key_bias.as_mut()
    }

    pub fn value_bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.value_bias.as_mut()
    }

    /// Simultaneous mutable access to keys, values and biases.
    pub fn parts_mut(
        &mut self,
    ) -> (
        &mut Matrix<T>,
        &mut Matrix<T>,
        Option<&mut Vec<T>>,
        Option<&mut Vec<T>>,
    ) {
        (
            &mut self.keys,
            &mut self.values,
            self.key_bias.as_mut(),
            self.value_bias.as_mut(),
        )
    }

    /// `x·K (+ b_k)`, the scores before σ.
    pub fn pre_activations(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.h() {
            return Err(Error::shape(format!(
                "input length {} != h = {}",
                x.len(),
                self.h()
            )));
        }
        let mut pre = self.keys.vecmat(x)?;
        if let Some(b) = &self.key_bias {
            for (p, &bv) in pre.iter_mut().zip(b) {
                *p = *p + bv;
            }
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let pre = self.pre_activations(x)?;
        let hidden: Vec<T> = pre.iter().map(|&a| self.activation.apply(a)).collect();
        let mut y = self.values.vecmat(&hidden)?;
        if let Some(b) = &self.value_bias {
            for (o, &bv) in y.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        Ok(y)
    }

    /// Key column and value row of neuron `j`.
    pub fn neuron(&self, j: usize) -> Result<(Vec<T>, &[T])> {
        if j >= self.d() {
            return Err(Error::argument(format!(
                "neuron index {j} out of range for d = {}",
                self.d()
            )));
        }
        Ok((self.keys.col(j).collect(), self.values.row(j)))
    }

    /// Key columns as f64 points, one per neuron.
    pub fn key_points(&self) -> Vec<Vec<f64>> {
        (0..self.d())
            .map(|j| self.keys.col(j).map(|v| v.as_f64()).collect())
            .collect()
    }

    pub fn bitwise_eq(&self, other: &FfnLayer<T>) -> bool {
        fn opt_eq<T: Scalar>(a: &Option<Vec<T>>, b: &Option<Vec<T>>) -> bool {
            match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.len() == b.len()
                        && a.iter()
                            .zip(b)
                            .all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
                }
                _ => false,
            }
        }
        self.activation == other.activation
            && self.keys.bitwise_eq(&other.keys)
            && self.values.bitwise_eq(&other.values)
            && opt_eq(&self.key_bias, &other.key_bias)
            && opt_eq(&self.value_bias, &other.value_bias)
    }

    pub fn cast<U: Scalar>(&self) -> FfnLayer<U> {
        let cv = |v: &Vec<T>| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        FfnLayer {
            keys: self.keys.cast(),
            values: self.values.cast(),
            activation: self.activation,
            key_bias: self.key_bias.as_ref().map(cv),
            value_bias: self.value_bias.as_ref().map(cv),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// h = 2, d = 4 layer used across the hand-worked examples.
    pub(crate) fn example_layer<T: Scalar>() -> FfnLayer<T> {
        let f = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        // Key columns [1,0], [0,1], [-1,1], [2,2].
        let keys = Matrix::new(2, 4, f(&[1.0, 0.0, -1.0, 2.0, 0.0, 1.0, 1.0, 2.0])).unwrap();
        // Value rows [1,0], [0,1], [1,1], [2,0].
        let values = Matrix::new(4, 2, f(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0])).unwrap();
        FfnLayer::new(keys, values, ActivationKind::Relu).unwrap()
    }

    #[test]
    fn forward_hand_example() {
        let layer = example_layer::<f64>();
        assert_eq!(
            layer.pre_activations(&[1.0, 1.0]).unwrap(),
            vec![1.0, 1.0, 0.0, 4.0]
        );
        assert_eq!(layer.forward(&[1.0, 1.0]).unwrap(), vec![9.0, 1.0]);
        assert_eq!(layer.forward(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(layer.pre_activations(&[0.0, 0.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn basis_probe_reads_key_row() {
        let layer = example_layer::<f64>();
        assert_eq!(
            layer.pre_activations(&[1.0, 0.0]).unwrap(),
            layer.keys().row(0).to_vec()
        );
    }

    #[test]
    fn single_neuron_layer() {
        let keys = Matrix::new(2, 1, vec![0.5, -2.0]).unwrap();
        let values = Matrix::new(1, 2, vec![3.0, 1.0]).unwrap();
        let layer = FfnLayer::new(keys, values, ActivationKind::Relu).unwrap();
        let x = [4.0, 0.5];
        let a: f64 = 0.5 * 4.0 - 2.0 * 0.5;
        assert_eq!(layer.forward(&x).unwrap(), vec![a * 3.0, a * 1.0]);
    }

    #[test]
    fn neuron_view() {
        let layer = example_layer::<f64>();
        let (k, v) = layer.neuron(3).unwrap();
        assert_eq!(k, vec![2.0, 2.0]);
        assert_eq!(v, &[2.0, 0.0]);
        let (k, v) = layer.neuron(0).unwrap();
        assert_eq!((k, v.to_vec()), (vec![1.0, 0.0], vec![1.0, 0.0]));
        assert!(matches!(layer.neuron(4), Err(Error::Argument(_))));
    }

    #[test]
    fn shape_errors() {
        let layer = example_layer::<f32>();
        assert!(matches!(layer.forward(&[1.0]), Err(Error::Shape(_))));
        let bad = FfnLayer::new(
            Matrix::<f32>::zeros(2, 4),
            Matrix::zeros(2, 4),
            ActivationKind::Relu,
        );
        assert!(bad.is_err());
        assert!(layer.clone().with_biases(Some(vec![0.0; 3]), None).is_err());
    }

    #[test]
    fn biases_enter_pre_activations_and_output() {
        let layer = example_layer::<f64>()
            .with_biases(Some(vec![0.0, -2.0, 1.0, 0.0]), Some(vec![0.5, -0.5]))
            .unwrap();
        let x = [1.0, 1.0];
        assert_eq!(
            layer.pre_activations(&x).unwrap(),
            vec![1.0, -1.0, 1.0, 4.0]
        );
        // 1·[1,0] + 1·[1,1] + 4·[2,0] + [0.5,-0.5]
        assert_eq!(layer.forward(&x).unwrap(), vec![10.5, 0.5]);
    }

    /// Per-neuron sum Σ_j σ(a_j)·V_j accumulated in f64.
    fn per_neuron_oracle(layer: &FfnLayer<f32>, x: &[f32]) -> Vec<f64> {
        let mut y = vec![0.0f64; layer.h()];
        for j in 0..layer.d() {
            let (key, value) = layer.neuron(j).unwrap();
            let a: f64 = key
                .iter()
                .zip(x)
                .map(|(&k, &xv)| k as f64 * xv as f64)
                .sum();
            let s = layer.activation().apply(a);
            for (o, &v) in y.iter_mut().zip(value) {
                *o += s * v as f64;
            }
        }
        y
    }

    #[test]
    fn neuron_decomposition_on_random_layers() {
        let mut rng = Rng::new(11);
        for trial in 0..100 {
            let h = 2 + rng.below(10);
            let d = 1 + rng.below(40);
            let act = if trial % 2 == 0 {
                ActivationKind::Relu
            } else {
                ActivationKind::GeluTanh
            };
            let layer = FfnLayer::<f32>::random(h, d, act, &mut rng);
            let x: Vec<f32> = (0..h).map(|_| rng.normal() as f32).collect();
            let y = layer.forward(&x).unwrap();
            let oracle = per_neuron_oracle(&layer, &x);
            let scale = oracle.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in y.iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() <= 1e-6 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pre_activations_are_linear_and_forward_is_pure() {
        let mut rng = Rng::new(5);
        let layer = FfnLayer::<f32>::random(8, 32, ActivationKind::GeluTanh, &mut rng);
        let x: Vec<f32> = (0..8).map(|_| rng.normal() as f32).collect();
        let alpha = 2.5f32;
        let ax: Vec<f32> = x.iter().map(|v| v * alpha).collect();
        let p = layer.pre_activations(&x).unwrap();
        let pa = layer.pre_activations(&ax).unwrap();
        for (a, b) in pa.iter().zip(&p) {
            assert!((a - alpha * b).abs() <= 1e-6 * (alpha * b).abs().max(1.0));
        }
        let y1 = layer.forward(&x).unwrap();
        let y2 = layer.forward(&x).unwrap();
        assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

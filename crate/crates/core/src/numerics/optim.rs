use super::{Real, Tensor};

/// An optimisable tensor with its accumulated gradient and momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            velocity: zeros,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub fn zero_grad<T: Real>(params: &mut [Parameter<T>]) {
    for p in params {
        p.grad.fill(T::zero());
    }
}

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`, then clears the gradients.
pub fn sgd_step<T: Real>(params: &mut [Parameter<T>], lr: T, momentum: T) {
    for p in params {
        let Parameter { value, grad, velocity } = p;
        for ((x, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut())
            .zip(velocity.data_mut())
        {
            *v = momentum * *v + *g;
            *x -= lr * *v;
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(value: f64, grad: f64) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::full(&[2], value));
        p.grad.fill(grad);
        p
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut ps = vec![param_with_grad(1.0, 0.5)];
        sgd_step(&mut ps, 0.1, 0.0);
        assert!(ps[0].value.data().iter().all(|&v| (v - 0.95).abs() < 1e-15));
        assert!(ps[0].grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut ps = vec![param_with_grad(3.0, 0.0)];
        sgd_step(&mut ps, 0.1, 0.9);
        assert_eq!(ps[0].value, Tensor::full(&[2], 3.0));
    }

    #[test]
    fn momentum_unrolls_over_two_steps() {
        // v1 = g, v2 = 0.9 g + g = 1.9 g; displacement = lr g + lr 1.9 g
        let (lr, g) = (1e-3, 2.0);
        let mut ps = vec![param_with_grad(0.0, g)];
        sgd_step(&mut ps, lr, 0.9);
        ps[0].grad.fill(g);
        sgd_step(&mut ps, lr, 0.9);
        let expected = -(lr * g + lr * 1.9 * g);
        assert!(ps[0].value.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }
}

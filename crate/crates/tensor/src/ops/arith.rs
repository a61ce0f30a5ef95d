use crate::broadcast::{broadcast_binary, sum_to_shape};
use crate::element::Element;
use crate::tensor::Tensor;
use crate::var::Var;

impl<T: Element> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| sum_to_shape(g, &sa)),
                    needs[1].then(|| sum_to_shape(g, &sb)),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| sum_to_shape(g, &sa)),
                    needs[1].then(|| sum_to_shape(&g.map(|v| -v), &sb)),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let out = broadcast_binary(&a, &b, |x, y| x * y);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| sum_to_shape(&broadcast_binary(g, &b, |x, y| x * y), a.shape())),
                    needs[1].then(|| sum_to_shape(&broadcast_binary(g, &a, |x, y| x * y), b.shape())),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let out = broadcast_binary(&a, &b, |x, y| x / y);
        let quotient = out.clone();
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| sum_to_shape(&broadcast_binary(g, &b, |x, y| x / y), a.shape())),
                    needs[1].then(|| {
                        // d(a/b)/db = -(a/b)/b
                        let gq = g.zip_map(&quotient, |x, q| -x * q);
                        sum_to_shape(&broadcast_binary(&gq, &b, |x, y| x / y), b.shape())
                    }),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|v| v + c), vec![self.clone()], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, c: T) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v * c),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    /// Multiplies by a fixed (non-differentiable) tensor, e.g. a dropout mask.
    pub fn mul_const(&self, mask: &Tensor<T>) -> Var<T> {
        let m = mask.clone();
        let shape = self.shape().to_vec();
        Var::from_op(
            broadcast_binary(self.value(), mask, |a, b| a * b),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(sum_to_shape(&broadcast_binary(g, &m, |x, y| x * y), &shape))]),
        )
    }
}

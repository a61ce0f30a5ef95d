use crate::element::Element;
use crate::tensor::Tensor;
use crate::var::Var;

impl<T: Element> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let orig = self.shape().to_vec();
        Var::from_op(self.value().reshape(shape), vec![self.clone()], Box::new(move |g, _| vec![Some(g.reshape(&orig))]))
    }

    /// Collapses all axes from `axis` onward into one.
    pub fn flatten_from(&self, axis: usize) -> Var<T> {
        let s = self.shape();
        let mut shape = s[..axis].to_vec();
        shape.push(s[axis..].iter().product());
        self.reshape(&shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Var<T> {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Var::from_op(self.value().permute(perm), vec![self.clone()], Box::new(move |g, _| vec![Some(g.permute(&inverse))]))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let full = self.shape().to_vec();
        Var::from_op(
            self.value().narrow(axis, start, len),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut parts = Vec::new();
                let mut before = full.clone();
                before[axis] = start;
                let mut after = full.clone();
                after[axis] = full[axis] - start - len;
                let (zb, za) = (Tensor::zeros(&before), Tensor::zeros(&after));
                if start > 0 {
                    parts.push(&zb);
                }
                parts.push(g);
                if after[axis] > 0 {
                    parts.push(&za);
                }
                vec![Some(Tensor::concat(&parts, axis))]
            }),
        )
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            Tensor::concat(&values, axis),
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let piece = need.then(|| g.narrow(axis, start, len));
                        start += len;
                        piece
                    })
                    .collect()
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_narrow_gradients_route_back() {
        let a = Var::leaf(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]));
        let b = Var::leaf(Tensor::<f64>::from_vec(vec![3.0, 4.0, 5.0], &[1, 3]));
        let c = Var::concat(&[a.clone(), b.clone()], 1);
        let w = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]);
        c.narrow(1, 1, 3).mul_const(&w).sum().backward();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 1.0]);
        assert_eq!(b.grad().unwrap().data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn permute_gradient_inverts() {
        let x = Var::leaf(Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[1, 2, 3]));
        let w = Tensor::from_vec((0..6).map(f64::from).collect(), &[3, 1, 2]);
        x.permute(&[2, 0, 1]).mul_const(&w).sum().backward();
        assert_eq!(x.grad().unwrap(), w.permute(&[1, 2, 0]));
    }
}

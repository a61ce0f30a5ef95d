use crate::broadcast::{broadcast_binary, sum_to_shape};
use crate::element::Element;
use crate::tensor::Tensor;
use crate::var::Var;

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect()
}

fn expand<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    broadcast_binary(&Tensor::zeros(shape), g, |_, b| b)
}

impl<T: Element> Var<T> {
    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::of(self.value().numel() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sums over `axes`, keeping them as size-1 dims when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Var<T> {
        let in_shape = self.shape().to_vec();
        let kd = keepdim_shape(&in_shape, axes);
        let reduced = sum_to_shape(self.value(), &kd);
        let out_shape: Vec<usize> = if keepdim {
            kd.clone()
        } else {
            in_shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect()
        };
        Var::from_op(
            reduced.reshape(&out_shape),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(expand(&g.reshape(&kd), &in_shape))]),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Var<T> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keepdim).mul_scalar(T::one() / T::of(count as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<T> {
        let x = self.value();
        let n = *x.shape().last().expect("softmax needs rank >= 1");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Tensor::from_vec(out, x.shape());
        let yc = y.clone();
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(yc.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::from_vec(dx, yc.shape()))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_axes_backward_broadcasts() {
        let x = Var::leaf(Tensor::<f64>::from_vec((0..6).map(|v| v as f64).collect(), &[2, 3]));
        let s = x.sum_axes(&[1], false);
        assert_eq!(s.value().data(), &[3.0, 12.0]);
        s.mul(&Var::constant(Tensor::from_vec(vec![1.0, 2.0], &[2]))).sum().backward();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient_matches() {
        let data = vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.5];
        let x = Var::leaf(Tensor::<f64>::from_vec(data.clone(), &[2, 3]));
        let w = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0], &[2, 3]);
        let y = x.softmax();
        for r in y.value().data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        y.mul_const(&w).sum().backward();
        let g = x.grad().unwrap();
        for i in 0..6 {
            let h = 1e-6;
            let mut up = data.clone();
            up[i] += h;
            let mut dn = data.clone();
            dn[i] -= h;
            let f = |d: Vec<f64>| Var::constant(Tensor::from_vec(d, &[2, 3])).softmax().mul_const(&w).sum().item();
            let num = (f(up) - f(dn)) / (2.0 * h);
            assert!((num - g.data()[i]).abs() < 1e-7);
        }
    }
}

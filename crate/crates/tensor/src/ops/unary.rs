use crate::element::Element;
use crate::tensor::Tensor;
use crate::var::Var;

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Var<T> {
    /// Pointwise op whose derivative is a function of input and output.
    fn pointwise(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let x = self.value().clone();
        let y = x.map(f);
        let yc = y.clone();
        Var::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gd = g.data();
                let data = x.data().iter().zip(yc.data()).zip(gd).map(|((&xi, &yi), &gi)| gi * df(xi, yi)).collect();
                vec![Some(Tensor::from_vec(data, x.shape()))]
            }),
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.pointwise(|v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.pointwise(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<T> {
        self.pointwise(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Var<T> {
        self.pointwise(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.pointwise(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Var<T> {
        self.pointwise(|v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&self) -> Var<T> {
        self.pointwise(|v| v * v, |x, _| T::of(2.0) * x)
    }

    /// SiLU / swish: `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<T> {
        self.pointwise(
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<T> {
        let c = T::of(GELU_C);
        let k = T::of(SQRT_2_OVER_PI);
        let half = T::of(0.5);
        self.pointwise(
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let u = k * (x + c * x * x * x);
                let t = u.tanh();
                let du = k * (T::one() + T::of(3.0) * c * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_derivative(f: impl Fn(&Var<f64>) -> Var<f64>, x: f64) -> f64 {
        let h = 1e-6;
        let up = f(&Var::constant(Tensor::scalar(x + h))).item();
        let dn = f(&Var::constant(Tensor::scalar(x - h))).item();
        (up - dn) / (2.0 * h)
    }

    #[test]
    fn activations_match_finite_differences() {
        let cases: Vec<(&str, fn(&Var<f64>) -> Var<f64>)> = vec![
            ("sigmoid", |v| v.sigmoid()),
            ("tanh", |v| v.tanh()),
            ("silu", |v| v.silu()),
            ("gelu", |v| v.gelu()),
            ("exp", |v| v.exp()),
        ];
        for (name, f) in cases {
            for &x in &[-2.3, -0.4, 0.7, 1.9] {
                let leaf = Var::leaf(Tensor::scalar(x));
                f(&leaf).backward();
                let analytic = leaf.grad().unwrap().item();
                let numeric = numeric_derivative(f, x);
                assert!((analytic - numeric).abs() < 1e-7, "{name} at {x}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let v = Var::constant(Tensor::<f32>::from_vec(vec![-1000.0, 1000.0], &[2])).sigmoid();
        assert_eq!(v.value().data(), &[0.0, 1.0]);
    }
}

use crate::element::Element;
use crate::tensor::Tensor;
use crate::var::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    pub fn output_size(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding;
            if padded < self.kernel {
                return None;
            }
            out[a] = (padded - self.kernel) / self.stride + 1;
        }
        Some(out)
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 5, "pooling expects (B, C, D0, D1, D2), got {shape:?}");
    [shape[2], shape[3], shape[4]]
}

/// Visits each output cell with the in-bounds input offsets of its window.
fn windows(input: [usize; 3], output: [usize; 3], geo: PoolGeometry, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    let axis = |o: usize, n: usize| {
        let start = (o * geo.stride) as isize - geo.padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + geo.kernel as isize).max(0) as usize).min(n);
        lo..hi
    };
    let mut o_idx = 0;
    for o0 in 0..output[0] {
        let r0 = axis(o0, input[0]);
        for o1 in 0..output[1] {
            let r1 = axis(o1, input[1]);
            for o2 in 0..output[2] {
                let r2 = axis(o2, input[2]);
                let (r0c, r1c) = (r0.clone(), r1.clone());
                let mut it = r0c.flat_map(move |i0| {
                    let r2 = r2.clone();
                    r1c.clone().flat_map(move |i1| r2.clone().map(move |i2| (i0 * input[1] + i1) * input[2] + i2))
                });
                f(o_idx, &mut it);
                o_idx += 1;
            }
        }
    }
}

impl<T: Element> Var<T> {
    pub fn max_pool3d(&self, geo: PoolGeometry) -> Var<T> {
        let x = self.value();
        let input = spatial(x.shape());
        let output = geo.output_size(input).expect("max_pool3d input too small");
        let (bc, in_len, out_len) = (x.shape()[0] * x.shape()[1], input.iter().product::<usize>(), output.iter().product::<usize>());
        let mut out = vec![T::zero(); bc * out_len];
        let mut argmax = vec![0usize; bc * out_len];
        for c in 0..bc {
            let xs = &x.data()[c * in_len..(c + 1) * in_len];
            windows(input, output, geo, |o, it| {
                let mut best: Option<(T, usize)> = None;
                for i in it {
                    if best.is_none_or(|(b, _)| xs[i] > b) {
                        best = Some((xs[i], i));
                    }
                }
                let (best, best_i) = best.expect("pooling window is never empty when padding < kernel");
                out[c * out_len + o] = best;
                argmax[c * out_len + o] = c * in_len + best_i;
            });
        }
        let mut shape = x.shape().to_vec();
        shape[2..].copy_from_slice(&output);
        let in_shape = x.shape().to_vec();
        Var::from_op(
            Tensor::from_vec(out, &shape),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                vec![Some(Tensor::from_vec(dx, &in_shape))]
            }),
        )
    }

    /// Average pooling; padded cells count toward the divisor.
    pub fn avg_pool3d(&self, geo: PoolGeometry) -> Var<T> {
        let x = self.value();
        let input = spatial(x.shape());
        let output = geo.output_size(input).expect("avg_pool3d input too small");
        let (bc, in_len, out_len) = (x.shape()[0] * x.shape()[1], input.iter().product::<usize>(), output.iter().product::<usize>());
        let inv = T::one() / T::of((geo.kernel * geo.kernel * geo.kernel) as f64);
        let mut out = vec![T::zero(); bc * out_len];
        for c in 0..bc {
            let xs = &x.data()[c * in_len..(c + 1) * in_len];
            windows(input, output, geo, |o, it| {
                let mut acc = T::zero();
                for i in it {
                    acc += xs[i];
                }
                out[c * out_len + o] = acc * inv;
            });
        }
        let mut shape = x.shape().to_vec();
        shape[2..].copy_from_slice(&output);
        let in_shape = x.shape().to_vec();
        Var::from_op(
            Tensor::from_vec(out, &shape),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for c in 0..bc {
                    let gs = &g.data()[c * out_len..(c + 1) * out_len];
                    let d = &mut dx[c * in_len..(c + 1) * in_len];
                    windows(input, output, geo, |o, it| {
                        for i in it {
                            d[i] += gs[o] * inv;
                        }
                    });
                }
                vec![Some(Tensor::from_vec(dx, &in_shape))]
            }),
        )
    }

    /// Mean over the spatial axes of `(B, C, ...)`, giving `(B, C)`.
    pub fn global_avg_pool(&self) -> Var<T> {
        let s = self.shape();
        assert!(s.len() >= 3, "global_avg_pool expects (B, C, spatial...)");
        self.reshape(&[s[0], s[1], s[2..].iter().product()]).mean_axes(&[2], false)
    }
}

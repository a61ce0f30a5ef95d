use crate::element::{gemm, Element, MatRef};
use crate::tensor::Tensor;
use crate::var::Var;

/// Splits `(..., r, c)` into (batch, r, c).
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "matmul operand needs rank >= 2, got {shape:?}");
    let nd = shape.len();
    (shape[..nd - 2].iter().product(), shape[nd - 2], shape[nd - 1])
}

fn mat<T>(t: &Tensor<T>, i: usize, r: usize, c: usize, trans: bool) -> MatRef<'_, T>
where
    T: Element,
{
    let batch = t.numel() / (r * c).max(1);
    let i = if batch == 1 { 0 } else { i };
    let m = MatRef::new(&t.data()[i * r * c..(i + 1) * r * c], r, c);
    if trans {
        m.t()
    } else {
        m
    }
}

/// `op(a) @ op(b)` for every batch entry; `b` may be a shared 2-D matrix.
fn batched<T: Element>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool, out_shape_prefix: &[usize]) -> Tensor<T> {
    let (ba, ra, ca) = mat_dims(a.shape());
    let (bb, rb, cb) = mat_dims(b.shape());
    let batch = ba.max(bb);
    assert!(ba == batch || ba == 1, "matmul batch mismatch");
    assert!(bb == batch || bb == 1, "matmul batch mismatch");
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(T::one(), mat(a, i, ra, ca, ta), mat(b, i, rb, cb, tb), T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
    let mut shape = out_shape_prefix.to_vec();
    shape.push(m);
    shape.push(n);
    Tensor::from_vec(out, &shape)
}

/// Sums a batched `(batch, r, c)` result down to a single matrix.
fn sum_batches<T: Element>(t: Tensor<T>, r: usize, c: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); r * c];
    for chunk in t.data().chunks(r * c) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::from_vec(acc, &[r, c])
}

impl<T: Element> Var<T> {
    /// Batched matrix product; `other` is either batched like `self` or 2-D.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        self.matmul_impl(other, false)
    }

    /// `self @ other^T` over the last two axes.
    pub fn matmul_t(&self, other: &Var<T>) -> Var<T> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<T>, tb: bool) -> Var<T> {
        let (a, b) = (self.value().clone(), other.value().clone());
        let prefix: Vec<usize> = {
            let s = if a.ndim() >= b.ndim() { a.shape() } else { b.shape() };
            s[..s.len() - 2].to_vec()
        };
        let out = batched(&a, false, &b, tb, &prefix);
        let b_shared = b.ndim() == 2 && a.ndim() > 2;
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let a_prefix = &a.shape()[..a.ndim() - 2];
                let da = needs[0].then(|| batched(g, false, &b, !tb, a_prefix));
                let db = needs[1].then(|| {
                    let full = if tb { batched(g, true, &a, false, &prefix) } else { batched(&a, true, g, false, &prefix) };
                    if b_shared {
                        let (_, r, c) = mat_dims(b.shape());
                        sum_batches(full, r, c)
                    } else {
                        full.reshape(b.shape())
                    }
                });
                vec![da.map(|t| t.reshape(a.shape())), db]
            }),
        )
    }

    /// Affine map over the last axis: `x @ weight^T + bias`, weight `(out, in)`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let x = self.value().clone();
        let w = weight.value().clone();
        let in_f = *x.shape().last().expect("linear input needs rank >= 1");
        assert_eq!(w.ndim(), 2, "linear weight must be 2-D");
        assert_eq!(w.shape()[1], in_f, "linear: input features {} vs weight {:?}", in_f, w.shape());
        let out_f = w.shape()[0];
        let rows = x.numel() / in_f.max(1);
        let mut y = vec![T::zero(); rows * out_f];
        gemm(T::one(), MatRef::new(x.data(), rows, in_f), MatRef::new(w.data(), out_f, in_f).t(), T::zero(), &mut y);
        if let Some(b) = bias {
            let bd = b.value().data();
            assert_eq!(bd.len(), out_f, "linear bias size");
            for row in y.chunks_mut(out_f) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_f;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::from_vec(y, &out_shape),
            parents,
            Box::new(move |g, needs| {
                let gm = MatRef::new(g.data(), rows, out_f);
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * in_f];
                    gemm(T::one(), gm, MatRef::new(w.data(), out_f, in_f), T::zero(), &mut d);
                    Tensor::from_vec(d, x.shape())
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); out_f * in_f];
                    gemm(T::one(), gm.t(), MatRef::new(x.data(), rows, in_f), T::zero(), &mut d);
                    Tensor::from_vec(d, &[out_f, in_f])
                });
                let mut res = vec![dx, dw];
                if needs.len() == 3 {
                    let mut db = vec![T::zero(); out_f];
                    for row in g.data().chunks(out_f) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push(Some(Tensor::from_vec(db, &[out_f])));
                }
                res
            }),
        )
    }
}

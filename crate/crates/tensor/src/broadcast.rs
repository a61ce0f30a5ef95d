//! Broadcasting kernels following NumPy alignment rules.

use crate::element::Element;
use crate::tensor::{numel, strides, Tensor};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`; broadcast dims get stride 0.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = strides(shape);
    (0..nd)
        .map(|i| {
            if i + shape.len() < nd {
                0
            } else {
                let j = i + shape.len() - nd;
                if shape[j] == 1 && out_shape[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Merges adjacent dims that are jointly contiguous for every operand.
fn coalesce(shape: &[usize], ops: &mut [Vec<usize>]) -> Vec<usize> {
    let mut dims: Vec<usize> = Vec::new();
    let mut op_strides: Vec<Vec<usize>> = vec![Vec::new(); ops.len()];
    for i in 0..shape.len() {
        if shape[i] == 1 {
            continue;
        }
        let mergeable = !dims.is_empty()
            && ops.iter().zip(op_strides.iter()).all(|(s, acc)| *acc.last().unwrap() == s[i] * shape[i]);
        if mergeable {
            let last = dims.len() - 1;
            dims[last] *= shape[i];
            for (k, s) in ops.iter().enumerate() {
                let l = op_strides[k].len() - 1;
                op_strides[k][l] = s[i];
            }
        } else {
            dims.push(shape[i]);
            for (k, s) in ops.iter().enumerate() {
                op_strides[k].push(s[i]);
            }
        }
    }
    if dims.is_empty() {
        dims.push(1);
        for acc in op_strides.iter_mut() {
            acc.push(0);
        }
    }
    for (k, acc) in op_strides.into_iter().enumerate() {
        ops[k] = acc;
    }
    dims
}

/// Visits the output in row-major order in contiguous inner runs, calling
/// `f(out_offset, operand_offsets, run_len, operand_inner_strides)`.
fn for_each_run(shape: &[usize], mut ops: Vec<Vec<usize>>, mut f: impl FnMut(usize, &[usize], usize, &[usize])) {
    if numel(shape) == 0 {
        return;
    }
    let dims = coalesce(shape, &mut ops);
    let nd = dims.len();
    let inner = dims[nd - 1];
    let inner_strides: Vec<usize> = ops.iter().map(|s| s[nd - 1]).collect();
    let mut idx = vec![0usize; nd - 1];
    let mut offs = vec![0usize; ops.len()];
    let mut out_off = 0;
    loop {
        f(out_off, &offs, inner, &inner_strides);
        out_off += inner;
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for (k, s) in ops.iter().enumerate() {
                offs[k] += s[d];
            }
            if idx[d] < dims[d] {
                break;
            }
            for (k, s) in ops.iter().enumerate() {
                offs[k] -= s[d] * dims[d];
            }
            idx[d] = 0;
        }
    }
}

/// Applies `f` elementwise with broadcasting.
pub fn broadcast_binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let sa = aligned_strides(a.shape(), &out_shape);
    let sb = aligned_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&out_shape, vec![sa, sb], |o, offs, n, inner| {
        let dst = &mut out[o..o + n];
        let (oa, ob) = (offs[0], offs[1]);
        match (inner[0], inner[1]) {
            (1, 0) => {
                let bv = bd[ob];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[oa + j], bv);
                }
            }
            (0, 1) => {
                let av = ad[oa];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(av, bd[ob + j]);
                }
            }
            (ia, ib) => {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = f(ad[oa + j * ia], bd[ob + j * ib]);
                }
            }
        }
    });
    Tensor::from_vec(out, &out_shape)
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn sum_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let st = aligned_strides(shape, g.shape());
    let contiguous = strides(g.shape());
    let mut out = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_run(g.shape(), vec![contiguous, st], |o, offs, n, inner| {
        let src = &gd[o..o + n];
        let (ot, it) = (offs[1], inner[1]);
        if it == 0 {
            let mut acc = T::zero();
            for &v in src {
                acc += v;
            }
            out[ot] += acc;
        } else {
            for (j, &v) in src.iter().enumerate() {
                out[ot + j * it] += v;
            }
        }
    });
    Tensor::from_vec(out, shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_broadcast_over_channels() {
        let x = Tensor::<f64>::zeros(&[2, 3, 2, 2, 2]);
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3, 1, 1, 1]);
        let y = broadcast_binary(&x, &b, |a, b| a + b);
        assert_eq!(y.shape(), &[2, 3, 2, 2, 2]);
        for n in 0..2 {
            for c in 0..3 {
                for s in 0..8 {
                    assert_eq!(y.data()[(n * 3 + c) * 8 + s], (c + 1) as f64);
                }
            }
        }
        let g = sum_to_shape(&Tensor::<f64>::ones(&[2, 3, 2, 2, 2]), &[1, 3, 1, 1, 1]);
        assert_eq!(g.data(), &[16.0, 16.0, 16.0]);
    }

    #[test]
    fn rank_extension_and_middle_broadcast() {
        let a = Tensor::<f64>::from_vec((0..6).map(|v| v as f64).collect(), &[2, 1, 3]);
        let b = Tensor::<f64>::from_vec(vec![10.0, 20.0], &[2, 1]);
        let y = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert_eq!(y.data()[0..6], [10.0, 11.0, 12.0, 20.0, 21.0, 22.0]);
        assert_eq!(y.data()[6..12], [13.0, 14.0, 15.0, 23.0, 24.0, 25.0]);
        assert_eq!(sum_to_shape(&y, &[2, 1]).data(), &[75.0, 135.0]);
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_none());
        assert_eq!(broadcast_shape(&[], &[4]).unwrap(), vec![4]);
    }
}

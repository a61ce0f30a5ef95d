//! 3D convolution over `(batch, channels, d0, d1, d2)` tensors.
//!
//! Dense and grouped convolutions lower to im2col + GEMM over chunks of the
//! batch; depthwise convolutions use a direct kernel.

use crate::element::{gemm, Element, MatRef};
use crate::tensor::Tensor;
use crate::var::Var;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Conv3dGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: [kernel; 3], stride: [stride; 3], padding: [padding; 3], groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output spatial size, or `None` if any axis would be empty.
    pub fn output_size(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Range of output indices `o` with `0 <= o*s + k - p < n`.
#[inline]
fn valid_range(n: usize, out: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s >= p - k
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    // o*s + k - p <= n - 1  =>  o <= (n - 1 + p - k) / s
    let hi = if n + p > k { ((n - 1 + p - k) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

struct Dims {
    input: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
    fn out_len(&self) -> usize {
        self.output.iter().product()
    }
}

/// Writes rows for `channels` of one sample into `col` at column offset `col_off`
/// (row stride `ld`).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(x: &[T], channels: usize, dims: &Dims, geo: &Conv3dGeometry, col: &mut [T], ld: usize, col_off: usize) {
    let [i0n, i1n, i2n] = dims.input;
    let [o0n, o1n, o2n] = dims.output;
    let [k0n, k1n, k2n] = geo.kernel;
    let [s0, s1, s2] = geo.stride;
    let [p0, p1, p2] = geo.padding;
    let in_len = dims.in_len();
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * in_len..(c + 1) * in_len];
        for k0 in 0..k0n {
            for k1 in 0..k1n {
                for k2 in 0..k2n {
                    let dst = &mut col[row * ld + col_off..row * ld + col_off + dims.out_len()];
                    dst.fill(T::zero());
                    let (a0, b0) = valid_range(i0n, o0n, s0, k0, p0);
                    let (a1, b1) = valid_range(i1n, o1n, s1, k1, p1);
                    let (a2, b2) = valid_range(i2n, o2n, s2, k2, p2);
                    for o0 in a0..b0 {
                        let i0 = o0 * s0 + k0 - p0;
                        for o1 in a1..b1 {
                            let i1 = o1 * s1 + k1 - p1;
                            let src = &xc[(i0 * i1n + i1) * i2n..(i0 * i1n + i1 + 1) * i2n];
                            let d = &mut dst[(o0 * o1n + o1) * o2n..(o0 * o1n + o1 + 1) * o2n];
                            if s2 == 1 {
                                let start = a2 + k2 - p2;
                                d[a2..b2].copy_from_slice(&src[start..start + (b2 - a2)]);
                            } else {
                                for o2 in a2..b2 {
                                    d[o2] = src[o2 * s2 + k2 - p2];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(col: &[T], channels: usize, dims: &Dims, geo: &Conv3dGeometry, dx: &mut [T], ld: usize, col_off: usize) {
    let [i0n, i1n, i2n] = dims.input;
    let [o0n, o1n, o2n] = dims.output;
    let [k0n, k1n, k2n] = geo.kernel;
    let [s0, s1, s2] = geo.stride;
    let [p0, p1, p2] = geo.padding;
    let in_len = dims.in_len();
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut dx[c * in_len..(c + 1) * in_len];
        for k0 in 0..k0n {
            for k1 in 0..k1n {
                for k2 in 0..k2n {
                    let src = &col[row * ld + col_off..row * ld + col_off + dims.out_len()];
                    let (a0, b0) = valid_range(i0n, o0n, s0, k0, p0);
                    let (a1, b1) = valid_range(i1n, o1n, s1, k1, p1);
                    let (a2, b2) = valid_range(i2n, o2n, s2, k2, p2);
                    for o0 in a0..b0 {
                        let i0 = o0 * s0 + k0 - p0;
                        for o1 in a1..b1 {
                            let i1 = o1 * s1 + k1 - p1;
                            let d = &mut xc[(i0 * i1n + i1) * i2n..(i0 * i1n + i1 + 1) * i2n];
                            let s = &src[(o0 * o1n + o1) * o2n..(o0 * o1n + o1 + 1) * o2n];
                            for o2 in a2..b2 {
                                d[o2 * s2 + k2 - p2] += s[o2];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

struct ConvPlan {
    batch: usize,
    c_in: usize,
    c_out: usize,
    dims: Dims,
    geo: Conv3dGeometry,
}

impl ConvPlan {
    fn cin_g(&self) -> usize {
        self.c_in / self.geo.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.geo.groups
    }
    fn rows(&self) -> usize {
        self.cin_g() * self.geo.kernel_volume()
    }
    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.dims.out_len()).max(1)).clamp(1, self.batch)
    }
    fn is_depthwise(&self) -> bool {
        self.geo.groups > 1 && self.geo.groups == self.c_in && self.c_in == self.c_out
    }
}

fn gemm_forward<T: Element>(x: &[T], w: &[T], plan: &ConvPlan, out: &mut [T]) {
    let (l, in_len) = (plan.dims.out_len(), plan.dims.in_len());
    let (cin_g, cout_g, rows) = (plan.cin_g(), plan.cout_g(), plan.rows());
    let chunk = plan.chunk();
    let mut col = vec![T::zero(); rows * chunk * l];
    let mut tmp = vec![T::zero(); cout_g * chunk * l];
    for g in 0..plan.geo.groups {
        let wg = MatRef::new(&w[g * cout_g * rows..(g + 1) * cout_g * rows], cout_g, rows);
        let mut b0 = 0;
        while b0 < plan.batch {
            let nb = chunk.min(plan.batch - b0);
            let ld = nb * l;
            for j in 0..nb {
                let xs = &x[((b0 + j) * plan.c_in + g * cin_g) * in_len..];
                im2col(xs, cin_g, &plan.dims, &plan.geo, &mut col, ld, j * l);
            }
            gemm(T::one(), wg, MatRef::new(&col[..rows * ld], rows, ld), T::zero(), &mut tmp[..cout_g * ld]);
            for co in 0..cout_g {
                for j in 0..nb {
                    let dst = ((b0 + j) * plan.c_out + g * cout_g + co) * l;
                    out[dst..dst + l].copy_from_slice(&tmp[co * ld + j * l..co * ld + (j + 1) * l]);
                }
            }
            b0 += nb;
        }
    }
}

fn gemm_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    plan: &ConvPlan,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (l, in_len) = (plan.dims.out_len(), plan.dims.in_len());
    let (cin_g, cout_g, rows) = (plan.cin_g(), plan.cout_g(), plan.rows());
    let chunk = plan.chunk();
    let mut col = vec![T::zero(); rows * chunk * l];
    let mut gtmp = vec![T::zero(); cout_g * chunk * l];
    for g in 0..plan.geo.groups {
        let wg = MatRef::new(&w[g * cout_g * rows..(g + 1) * cout_g * rows], cout_g, rows);
        let mut b0 = 0;
        while b0 < plan.batch {
            let nb = chunk.min(plan.batch - b0);
            let ld = nb * l;
            for co in 0..cout_g {
                for j in 0..nb {
                    let src = ((b0 + j) * plan.c_out + g * cout_g + co) * l;
                    gtmp[co * ld + j * l..co * ld + (j + 1) * l].copy_from_slice(&gy[src..src + l]);
                }
            }
            let gm = MatRef::new(&gtmp[..cout_g * ld], cout_g, ld);
            if let Some(dw) = dw.as_deref_mut() {
                for j in 0..nb {
                    let xs = &x[((b0 + j) * plan.c_in + g * cin_g) * in_len..];
                    im2col(xs, cin_g, &plan.dims, &plan.geo, &mut col, ld, j * l);
                }
                let dwg = &mut dw[g * cout_g * rows..(g + 1) * cout_g * rows];
                gemm(T::one(), gm, MatRef::new(&col[..rows * ld], rows, ld).t(), T::one(), dwg);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(T::one(), wg.t(), gm, T::zero(), &mut col[..rows * ld]);
                for j in 0..nb {
                    let xs = &mut dx[((b0 + j) * plan.c_in + g * cin_g) * in_len..];
                    col2im(&col, cin_g, &plan.dims, &plan.geo, xs, ld, j * l);
                }
            }
            b0 += nb;
        }
    }
}

/// Calls `f(o_offset, i_offset, len, k_index)` for every contiguous run of the
/// depthwise stencil within one channel.
fn depthwise_runs(dims: &Dims, geo: &Conv3dGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [i0n, i1n, i2n] = dims.input;
    let [o0n, o1n, o2n] = dims.output;
    let [k0n, k1n, k2n] = geo.kernel;
    let [s0, s1, s2] = geo.stride;
    let [p0, p1, p2] = geo.padding;
    debug_assert_eq!(s2, 1);
    let mut kidx = 0;
    for k0 in 0..k0n {
        let (a0, b0) = valid_range(i0n, o0n, s0, k0, p0);
        for k1 in 0..k1n {
            let (a1, b1) = valid_range(i1n, o1n, s1, k1, p1);
            for k2 in 0..k2n {
                let (a2, b2) = valid_range(i2n, o2n, s2, k2, p2);
                if a2 < b2 {
                    for o0 in a0..b0 {
                        let i0 = o0 * s0 + k0 - p0;
                        for o1 in a1..b1 {
                            let i1 = o1 * s1 + k1 - p1;
                            let o = (o0 * o1n + o1) * o2n + a2;
                            let i = (i0 * i1n + i1) * i2n + a2 + k2 - p2;
                            f(o, i, b2 - a2, kidx);
                        }
                    }
                }
                kidx += 1;
            }
        }
    }
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], plan: &ConvPlan, out: &mut [T]) {
    let (l, in_len, kv) = (plan.dims.out_len(), plan.dims.in_len(), plan.geo.kernel_volume());
    for bc in 0..plan.batch * plan.c_in {
        let c = bc % plan.c_in;
        let (xs, wc) = (&x[bc * in_len..(bc + 1) * in_len], &w[c * kv..(c + 1) * kv]);
        let os = &mut out[bc * l..(bc + 1) * l];
        depthwise_runs(&plan.dims, &plan.geo, |o, i, n, k| {
            let wk = wc[k];
            for (d, &s) in os[o..o + n].iter_mut().zip(&xs[i..i + n]) {
                *d += wk * s;
            }
        });
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    plan: &ConvPlan,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (l, in_len, kv) = (plan.dims.out_len(), plan.dims.in_len(), plan.geo.kernel_volume());
    for bc in 0..plan.batch * plan.c_in {
        let c = bc % plan.c_in;
        let gs = &gy[bc * l..(bc + 1) * l];
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[bc * in_len..(bc + 1) * in_len];
            let dwc = &mut dw[c * kv..(c + 1) * kv];
            depthwise_runs(&plan.dims, &plan.geo, |o, i, n, k| {
                let mut acc = T::zero();
                for (&g, &s) in gs[o..o + n].iter().zip(&xs[i..i + n]) {
                    acc += g * s;
                }
                dwc[k] += acc;
            });
        }
        if let Some(dx) = dx.as_deref_mut() {
            let wc = &w[c * kv..(c + 1) * kv];
            let dxs = &mut dx[bc * in_len..(bc + 1) * in_len];
            depthwise_runs(&plan.dims, &plan.geo, |o, i, n, k| {
                let wk = wc[k];
                for (d, &g) in dxs[i..i + n].iter_mut().zip(&gs[o..o + n]) {
                    *d += wk * g;
                }
            });
        }
    }
}

impl<T: Element> Var<T> {
    /// 3D convolution; weight `(c_out, c_in / groups, k0, k1, k2)`, bias `(c_out)`.
    pub fn conv3d(&self, weight: &Var<T>, bias: Option<&Var<T>>, geo: Conv3dGeometry) -> Var<T> {
        let (x, w) = (self.value().clone(), weight.value().clone());
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 5, "conv3d input must be (B, C, D0, D1, D2), got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D");
        assert_eq!(ws[2..], geo.kernel, "conv3d weight kernel differs from geometry");
        let (batch, c_in, c_out) = (xs[0], xs[1], ws[0]);
        assert!(geo.groups >= 1 && c_in % geo.groups == 0 && c_out % geo.groups == 0, "bad conv groups");
        assert_eq!(ws[1], c_in / geo.groups, "conv3d weight in-channels mismatch");
        let input = [xs[2], xs[3], xs[4]];
        let output = geo
            .output_size(input)
            .unwrap_or_else(|| panic!("conv3d input {input:?} too small for kernel {:?}", geo.kernel));
        let plan = ConvPlan { batch, c_in, c_out, dims: Dims { input, output }, geo };
        let l = plan.dims.out_len();
        let mut out = vec![T::zero(); batch * c_out * l];
        let depthwise = plan.is_depthwise() && geo.stride[2] == 1;
        if depthwise {
            depthwise_forward(x.data(), w.data(), &plan, &mut out);
        } else {
            gemm_forward(x.data(), w.data(), &plan, &mut out);
        }
        if let Some(b) = bias {
            let bd = b.value().data();
            for (i, chunk) in out.chunks_mut(l).enumerate() {
                let bv = bd[i % c_out];
                for v in chunk {
                    *v += bv;
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::from_vec(out, &[batch, c_out, output[0], output[1], output[2]]),
            parents,
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
                let mut dw = needs[1].then(|| vec![T::zero(); w.numel()]);
                if depthwise {
                    depthwise_backward(x.data(), w.data(), g.data(), &plan, dx.as_deref_mut(), dw.as_deref_mut());
                } else {
                    gemm_backward(x.data(), w.data(), g.data(), &plan, dx.as_deref_mut(), dw.as_deref_mut());
                }
                let mut res = vec![dx.map(|d| Tensor::from_vec(d, x.shape())), dw.map(|d| Tensor::from_vec(d, w.shape()))];
                if needs.len() == 3 {
                    let mut db = vec![T::zero(); c_out];
                    for (i, chunk) in g.data().chunks(l).enumerate() {
                        db[i % c_out] += chunk.iter().copied().sum();
                    }
                    res.push(Some(Tensor::from_vec(db, &[c_out])));
                }
                res
            }),
        )
    }
}

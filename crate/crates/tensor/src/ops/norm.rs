use crate::element::Element;
use crate::tensor::Tensor;
use crate::var::Var;

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

impl<T: Element> Var<T> {
    /// Batch normalization over all axes but 1. With `running = Some((mean, var))`
    /// the given statistics are used (inference); otherwise batch statistics are
    /// computed and returned.
    pub fn batch_norm(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> (Var<T>, Option<BatchNormStats<T>>) {
        let x = self.value().clone();
        let s = x.shape().to_vec();
        assert!(s.len() >= 2, "batch_norm expects (B, C, ...)");
        let (b, c) = (s[0], s[1]);
        let l: usize = s[2..].iter().product();
        let m = b * l;
        let eps = T::of(eps);
        let (mean, var_b, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for n in 0..b {
                        acc += x.data()[(n * c + ch) * l..(n * c + ch + 1) * l].iter().copied().sum();
                    }
                    mean[ch] = acc / T::of(m as f64);
                    let mut sq = T::zero();
                    for n in 0..b {
                        for &v in &x.data()[(n * c + ch) * l..(n * c + ch + 1) * l] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / T::of(m as f64);
                }
                let unbiased = var.iter().map(|&v| if m > 1 { v * T::of(m as f64 / (m - 1) as f64) } else { v }).collect();
                (mean.clone(), var, Some(BatchNormStats { mean, var: unbiased }))
            }
        };
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.value().data().to_vec(), beta.value().data().to_vec());
        assert_eq!(gd.len(), c, "batch_norm gamma size");
        let mut xhat = vec![T::zero(); x.numel()];
        let mut y = vec![T::zero(); x.numel()];
        for n in 0..b {
            for ch in 0..c {
                let r = (n * c + ch) * l..(n * c + ch + 1) * l;
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x.data()[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = *h * gd[ch] + bd[ch];
                }
            }
        }
        let training = running.is_none();
        let out = Var::from_op(
            Tensor::from_vec(y, &s),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gdat = g.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for n in 0..b {
                    for ch in 0..c {
                        let r = (n * c + ch) * l..(n * c + ch + 1) * l;
                        for (&gv, &h) in gdat[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * h;
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); gdat.len()];
                    let mf = T::of(m as f64);
                    for n in 0..b {
                        for ch in 0..c {
                            let r = (n * c + ch) * l..(n * c + ch + 1) * l;
                            let k = gd[ch] * inv_std[ch];
                            for ((d, &gv), &h) in dx[r.clone()].iter_mut().zip(&gdat[r.clone()]).zip(&xhat[r]) {
                                *d = if training { k * (gv - (sum_g[ch] + h * sum_gx[ch]) / mf) } else { k * gv };
                            }
                        }
                    }
                    Tensor::from_vec(dx, &s)
                });
                vec![dx, needs[1].then(|| Tensor::from_vec(sum_gx, &[c])), needs[2].then(|| Tensor::from_vec(sum_g, &[c]))]
            }),
        );
        (out, stats)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
        let x = self.value().clone();
        let d = *x.shape().last().expect("layer_norm needs rank >= 1");
        let (gd, bd) = (gamma.value().data().to_vec(), beta.value().data().to_vec());
        assert_eq!(gd.len(), d, "layer_norm gamma size");
        let eps = T::of(eps);
        let rows = x.numel() / d.max(1);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.numel()];
        let df = T::of(d as f64);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let shape = x.shape().to_vec();
        Var::from_op(
            Tensor::from_vec(y, &shape),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, needs| {
                let gdat = g.data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); gdat.len()];
                for r in 0..rows {
                    let gr = &gdat[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = T::zero();
                    let mut mean_ghx = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let gh = gr[j] * gd[j];
                        mean_gh += gh;
                        mean_ghx += gh * hr[j];
                    }
                    mean_gh /= df;
                    mean_ghx /= df;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (gr[j] * gd[j] - mean_gh - hr[j] * mean_ghx);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(dx, &shape)),
                    needs[1].then(|| Tensor::from_vec(dgamma, &[d])),
                    needs[2].then(|| Tensor::from_vec(dbeta, &[d])),
                ]
            }),
        )
    }
}

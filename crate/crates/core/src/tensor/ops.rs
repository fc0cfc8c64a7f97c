use super::{dot_f64, Tensor};
use crate::error::{Error, Result};

/// Matrix product of `a[r×k]` and `b[k×c]`, summing over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k, c) = match (a.shape(), b.shape()) {
        ([r, k], [k2, c]) if k == k2 => (*r, *k, *c),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    let mut out = vec![0.0f32; r * c];
    matmul_into(a.data(), b.data(), r, k, c, &mut out);
    Tensor::checked("matmul", vec![r, c], out)
}

pub(crate) fn matmul_into(a: &[f32], b: &[f32], r: usize, k: usize, c: usize, out: &mut [f32]) {
    for i in 0..r {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let mut acc = 0.0f64;
            for (t, &av) in row.iter().enumerate() {
                acc += f64::from(av) * f64::from(b[t * c + j]);
            }
            out[i * c + j] = acc as f32;
        }
    }
}

/// Output spatial size of a valid (unpadded) convolution.
pub fn conv2d_output_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}×{kw} does not fit input {h}×{w}"),
        ));
    }
    Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
}

/// Valid 2-D cross-correlation of `x[C×H×W]` with `kernels[F×C×kh×kw]`.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(x.shape(), kernels.shape(), stride)?;
    let mut out = vec![0.0f32; geom.output_len()];
    geom.forward(x.data(), kernels.data(), &mut out);
    Tensor::checked("conv2d", vec![geom.filters, geom.out_h, geom.out_w], out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize) -> Result<Self> {
        let (channels, h, w, filters, kc, kh, kw) = match (x, k) {
            ([c, h, w], [f, kc, kh, kw]) => (*c, *h, *w, *f, *kc, *kh, *kw),
            _ => return Err(Error::shape("conv2d", x, k)),
        };
        if kc != channels {
            return Err(Error::shape("conv2d", x, k));
        }
        let (out_h, out_w) = conv2d_output_hw(h, w, kh, kw, stride)?;
        Ok(Self {
            channels,
            h,
            w,
            filters,
            kh,
            kw,
            stride,
            out_h,
            out_w,
        })
    }

    pub fn output_len(&self) -> usize {
        self.filters * self.out_h * self.out_w
    }

    pub fn forward(&self, x: &[f32], k: &[f32], out: &mut [f32]) {
        let ksize = self.channels * self.kh * self.kw;
        for f in 0..self.filters {
            let kf = &k[f * ksize..(f + 1) * ksize];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut acc = 0.0f64;
                    for c in 0..self.channels {
                        for i in 0..self.kh {
                            let xrow = (c * self.h + oy * self.stride + i) * self.w + ox * self.stride;
                            let krow = (c * self.kh + i) * self.kw;
                            for j in 0..self.kw {
                                acc += f64::from(x[xrow + j]) * f64::from(kf[krow + j]);
                            }
                        }
                    }
                    out[(f * self.out_h + oy) * self.out_w + ox] = acc as f32;
                }
            }
        }
    }

    /// Accumulates `dk += ∂/∂k` given the upstream gradient `dy`.
    pub fn backward_kernel(&self, x: &[f32], dy: &[f32], dk: &mut [f32]) {
        let ksize = self.channels * self.kh * self.kw;
        for f in 0..self.filters {
            for c in 0..self.channels {
                for i in 0..self.kh {
                    for j in 0..self.kw {
                        let mut acc = 0.0f64;
                        for oy in 0..self.out_h {
                            let xrow = (c * self.h + oy * self.stride + i) * self.w + j;
                            let drow = (f * self.out_h + oy) * self.out_w;
                            for ox in 0..self.out_w {
                                acc += f64::from(dy[drow + ox]) * f64::from(x[xrow + ox * self.stride]);
                            }
                        }
                        dk[f * ksize + (c * self.kh + i) * self.kw + j] += acc as f32;
                    }
                }
            }
        }
    }

    /// Accumulates `dx += ∂/∂x` given the upstream gradient `dy`.
    pub fn backward_input(&self, k: &[f32], dy: &[f32], dx: &mut [f32]) {
        let ksize = self.channels * self.kh * self.kw;
        for f in 0..self.filters {
            let kf = &k[f * ksize..(f + 1) * ksize];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let g = dy[(f * self.out_h + oy) * self.out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..self.channels {
                        for i in 0..self.kh {
                            let xrow = (c * self.h + oy * self.stride + i) * self.w + ox * self.stride;
                            let krow = (c * self.kh + i) * self.kw;
                            for j in 0..self.kw {
                                dx[xrow + j] += g * kf[krow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Softmax over the final axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
    let mut out = vec![0.0f32; x.len()];
    for (src, dst) in x.data().chunks(last).zip(out.chunks_mut(last)) {
        softmax_row(src, dst);
    }
    Tensor::checked("softmax", x.shape().to_vec(), out)
}

pub(crate) fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = src.iter().map(|&v| (f64::from(v) - f64::from(max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (d, e) in dst.iter_mut().zip(exps) {
        *d = (e / total) as f32;
    }
}

pub(crate) fn log_softmax_at(src: &[f32], index: usize) -> f64 {
    let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f64 = src.iter().map(|&v| (f64::from(v) - f64::from(max)).exp()).sum();
    f64::from(src[index]) - f64::from(max) - total.ln()
}

/// Unit-L2-norm copy of `x`. Fails on a zero vector.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = dot_f64(x.data(), x.data()).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let data = x.data().iter().map(|&v| (f64::from(v) / norm) as f32).collect();
    Tensor::checked("l2_normalize", x.shape().to_vec(), data)
}

/// `-log softmax(logits)[label]` for a 1-D logit vector.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f32> {
    if logits.rank() != 1 {
        return Err(Error::invalid(
            "cross_entropy",
            format!("expected 1-D logits, got {:?}", logits.shape()),
        ));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let loss = -log_softmax_at(logits.data(), label) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    // -log(1) can round to a tiny negative value.
    Ok(loss.max(0.0))
}

/// In-place `p ← p − α·g` for every parameter.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], alpha: f32) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(
            "sgd_step",
            format!("learning rate must be nonnegative, got {alpha}"),
        ));
    }
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
    }
    let updated: Vec<Vec<f32>> = params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            p.data()
                .iter()
                .zip(g.data())
                .map(|(&pv, &gv)| pv - alpha * gv)
                .collect()
        })
        .collect();
    if updated.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sgd_step"));
    }
    for (p, data) in params.iter_mut().zip(updated) {
        p.data = data;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&m, &ones).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(
            matmul(&t(&[1, 1], &[3.0]), &t(&[1, 1], &[-2.5])).unwrap().data(),
            &[-7.5]
        );
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 2])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        assert_eq!(conv2d(&x, &k, 1).unwrap().data(), &[2.0; 4]);

        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn delta_kernel_crops() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = Tensor::zeros(&[1, 1, 2, 2]);
        k.data_mut()[3] = 1.0; // tap (1,1)
        assert_eq!(conv2d(&x, &k, 1).unwrap().data(), &[5., 6., 8., 9.]);
    }

    #[test]
    fn conv_stride_and_errors() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let k = Tensor::full(&[2, 1, 3, 3], 1.0);
        assert_eq!(conv2d(&x, &k, 2).unwrap().shape(), &[2, 2, 2]);
        assert!(conv2d(&Tensor::zeros(&[1, 2, 2]), &k, 1).is_err());
        assert!(conv2d(&x, &k, 0).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1.0, 0.5])).unwrap();
        assert!((s.data()[0] - 0.62246).abs() < 1e-5);
        assert!((s.data()[1] - 0.37754).abs() < 1e-5);
    }

    #[test]
    fn normalize_and_zero_norm() {
        let e = l2_normalize(&t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(e.data(), &[0.6, 0.8]);
        assert!(matches!(l2_normalize(&Tensor::zeros(&[3])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&t(&[3], &[200.0, 0.0, 0.0]), 0).unwrap(), 0.0);
        let ce = cross_entropy(&t(&[2], &[0.0, 0.0]), 1).unwrap();
        assert!((ce - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&t(&[2], &[0.0, 0.0]), 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![t(&[1], &[1.0])];
        sgd_step(&mut p, &[t(&[1], &[2.0])], 0.5).unwrap();
        assert_eq!(p[0].data(), &[0.0]);

        let mut p = vec![t(&[2], &[1.0, -1.0])];
        sgd_step(&mut p, &[Tensor::zeros(&[2])], 0.3).unwrap();
        assert_eq!(p[0].data(), &[1.0, -1.0]);

        let g = t(&[1], &[0.25]);
        let mut p = vec![t(&[1], &[1.0])];
        sgd_step(&mut p, std::slice::from_ref(&g), 0.5).unwrap();
        sgd_step(&mut p, std::slice::from_ref(&g), 0.5).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 2.0 * 0.5 * 0.25]);

        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2])], 0.1).is_err());
    }
}

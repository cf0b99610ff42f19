//! Forward and backward kernels on single `C x H x W` activations.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    fn ph(&self) -> usize {
        self.h + 2 * self.pad
    }
    fn pw(&self) -> usize {
        self.w + 2 * self.pad
    }
}

fn pad_input<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    if g.pad == 0 {
        return input.to_vec();
    }
    let (ph, pw) = (g.ph(), g.pw());
    let mut out = vec![T::zero(); g.in_c * ph * pw];
    for c in 0..g.in_c {
        for y in 0..g.h {
            let src = &input[(c * g.h + y) * g.w..][..g.w];
            out[(c * ph + y + g.pad) * pw + g.pad..][..g.w].copy_from_slice(src);
        }
    }
    out
}

/// Weight layout `[out_c, in_c, k, k]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let padded = pad_input(input, g);
    let (oh, ow, ph, pw, k, s) = (g.out_h(), g.out_w(), g.ph(), g.pw(), g.k, g.stride);
    let mut out = vec![T::zero(); g.out_c * oh * ow];
    for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(bias[oc]);
        for ic in 0..g.in_c {
            let src = &padded[ic * ph * pw..][..ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((oc * g.in_c + ic) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let row = &src[(oy * s + ky) * pw + kx..];
                        let dst = &mut plane[oy * ow..][..ow];
                        if s == 1 {
                            for (d, &x) in dst.iter_mut().zip(&row[..ow]) {
                                *d += wv * x;
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += wv * row[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_params: bool,
) -> ConvGrads<T> {
    let padded = if want_params {
        pad_input(input, g)
    } else {
        Vec::new()
    };
    let (oh, ow, ph, pw, k, s) = (g.out_h(), g.out_w(), g.ph(), g.pw(), g.k, g.stride);
    let mut grad_padded = vec![T::zero(); g.in_c * ph * pw];
    let mut grad_w = want_params.then(|| vec![T::zero(); weight.len()]);
    for oc in 0..g.out_c {
        let go = &grad_out[oc * oh * ow..][..oh * ow];
        for ic in 0..g.in_c {
            let gin = &mut grad_padded[ic * ph * pw..][..ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * g.in_c + ic) * k + ky) * k + kx;
                    let wv = weight[widx];
                    for oy in 0..oh {
                        let grow = &go[oy * ow..][..ow];
                        let dst = &mut gin[(oy * s + ky) * pw + kx..];
                        if s == 1 {
                            for (d, &gv) in dst[..ow].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                dst[ox * s] += wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_mut() {
                        let src = &padded[ic * ph * pw..][..ph * pw];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let grow = &go[oy * ow..][..ow];
                            let row = &src[(oy * s + ky) * pw + kx..];
                            if s == 1 {
                                for (&gv, &x) in grow.iter().zip(&row[..ow]) {
                                    acc += gv * x;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc += gv * row[ox * s];
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    let grad_in = if g.pad == 0 {
        grad_padded
    } else {
        let mut cropped = Vec::with_capacity(g.in_c * g.h * g.w);
        for c in 0..g.in_c {
            for y in 0..g.h {
                cropped.extend_from_slice(&grad_padded[(c * ph + y + g.pad) * pw + g.pad..][..g.w]);
            }
        }
        cropped
    };
    let grad_b = want_params.then(|| {
        grad_out
            .chunks_exact(oh * ow)
            .map(|p| p.iter().copied().sum::<T>())
            .collect()
    });
    ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    }
}

/// Index into `input` of the (first) maximum of each 2x2 window.
pub(crate) fn maxpool_argmax<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

pub(crate) fn maxpool_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    maxpool_argmax(input, c, h, w)
        .into_iter()
        .map(|i| input[i])
        .collect()
}

pub(crate) fn maxpool_backward<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut grad = vec![T::zero(); input.len()];
    for (i, &g) in maxpool_argmax(input, c, h, w).into_iter().zip(grad_out) {
        grad[i] += g;
    }
    grad
}

pub(crate) fn gap_forward<T: Scalar>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let z = T::of(hw as f64);
    input
        .chunks_exact(hw)
        .take(c)
        .map(|p| p.iter().copied().sum::<T>() / z)
        .collect()
}

pub(crate) fn gap_backward<T: Scalar>(grad_out: &[T], hw: usize) -> Vec<T> {
    let z = T::of(hw as f64);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / z, hw))
        .collect()
}

/// Weight layout `[out, in]`.
pub(crate) fn dense_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n_in = input.len();
    weight
        .chunks_exact(n_in)
        .zip(bias)
        .map(|(row, &b)| row.iter().zip(input).fold(b, |acc, (&w, &x)| acc + w * x))
        .collect()
}

pub(crate) fn dense_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_params: bool,
) -> ConvGrads<T> {
    let n_in = input.len();
    let mut grad_in = vec![T::zero(); n_in];
    for (row, &g) in weight.chunks_exact(n_in).zip(grad_out) {
        for (d, &w) in grad_in.iter_mut().zip(row) {
            *d += w * g;
        }
    }
    let grad_w = want_params.then(|| {
        grad_out
            .iter()
            .flat_map(|&g| input.iter().map(move |&x| g * x))
            .collect()
    });
    ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: want_params.then(|| grad_out.to_vec()),
    }
}

pub(crate) fn relu_backward<T: Scalar>(input: &[T], grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// Shifted-exponent softmax.
pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

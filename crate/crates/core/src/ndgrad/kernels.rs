//! Loop kernels for (transposed) 2-D convolution and dense layers over
//! NHWC tensors with `[kh, kw, cin, cout]` filters.

use serde::{Deserialize, Serialize};

use super::Real;

/// Spatial padding convention.
///
/// `Same` pads so that the output has `ceil(in / stride)` rows; when the
/// total padding is odd the extra row/column goes to the bottom/right. The
/// masked-convolution causality arguments rely on this placement: for odd
/// kernels at stride 1 the padding is symmetric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved geometry of a convolution between an input of `h x w` and an
/// output of `ho x wo`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn same_pad(input: usize, output: usize, k: usize, stride: usize) -> usize {
    let total = ((output - 1) * stride + k).saturating_sub(input);
    total / 2
}

/// Output extent of a forward convolution.
pub fn conv_out_len(input: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= k).then(|| (input - k) / stride + 1),
    }
}

/// Output extent of a transposed convolution (inverse of [`conv_out_len`]).
pub fn conv_transpose_out_len(input: usize, k: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => input * stride,
        Padding::Valid => (input - 1) * stride + k,
    }
}

/// Kernel taps whose filter slice is not entirely masked out.
pub(crate) fn active_taps<T: Real>(kh: usize, kw: usize, tap_len: usize, mask: Option<&[T]>) -> Vec<(usize, usize)> {
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        for kx in 0..kw {
            let live = match mask {
                None => true,
                Some(m) => {
                    let o = (ky * kw + kx) * tap_len;
                    m[o..o + tap_len].iter().any(|&v| v != T::zero())
                }
            };
            if live {
                taps.push((ky, kx));
            }
        }
    }
    taps
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight independent accumulators so the reduction can be
/// vectorised without reassociating floating-point sums.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Maps output coordinate + tap to the input coordinate of a forward
/// convolution, or `None` when it falls in the padding.
#[inline]
fn src_coord(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let p = o * stride + k;
    if p < pad {
        return None;
    }
    let i = p - pad;
    (i < limit).then_some(i)
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    taps: &[(usize, usize)],
    out: &mut [T],
) {
    let (cin, cout) = (g.cin, g.cout);
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let ob = ((b * g.ho + oy) * g.wo + ox) * cout;
                let acc = &mut out[ob..ob + cout];
                match bias {
                    Some(bv) => acc.copy_from_slice(bv),
                    None => acc.fill(T::zero()),
                }
                for &(ky, kx) in taps {
                    let Some(iy) = src_coord(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                    let Some(ix) = src_coord(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let xb = ((b * g.h + iy) * g.w + ix) * cin;
                    let xs = &input[xb..xb + cin];
                    let wb = (ky * g.kw + kx) * cin * cout;
                    let ws = &weight[wb..wb + cin * cout];
                    for (ci, &xv) in xs.iter().enumerate() {
                        axpy(acc, xv, &ws[ci * cout..(ci + 1) * cout]);
                    }
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of [`conv_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    taps: &[(usize, usize)],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let ob = ((b * g.ho + oy) * g.wo + ox) * cout;
                let go = &grad_out[ob..ob + cout];
                for &(ky, kx) in taps {
                    let Some(iy) = src_coord(oy, ky, g.stride, g.pad_top, g.h) else { continue };
                    let Some(ix) = src_coord(ox, kx, g.stride, g.pad_left, g.w) else { continue };
                    let xb = ((b * g.h + iy) * g.w + ix) * cin;
                    let wb = (ky * g.kw + kx) * cin * cout;
                    if let Some(gi) = grad_in.as_deref_mut() {
                        let ws = &weight[wb..wb + cin * cout];
                        for (ci, slot) in gi[xb..xb + cin].iter_mut().enumerate() {
                            *slot += dot(go, &ws[ci * cout..(ci + 1) * cout]);
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        let xs = &input[xb..xb + cin];
                        let gws = &mut gw[wb..wb + cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            axpy(&mut gws[ci * cout..(ci + 1) * cout], xv, go);
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution: `g` describes the *forward* convolution that maps
/// the transposed output (`h x w`, `cout` channels) back to the transposed
/// input (`ho x wo`, `cin` channels). Weights are `[kh, kw, cin, cout]` with
/// `cin` the transposed-conv input channels.
pub(crate) fn conv_transpose_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (cin, cout) = (g.cin, g.cout);
    match bias {
        Some(bv) => {
            for px in out.chunks_exact_mut(cout) {
                px.copy_from_slice(bv);
            }
        }
        None => out.fill(T::zero()),
    }
    for b in 0..g.batch {
        for iy in 0..g.ho {
            for ix in 0..g.wo {
                let xb = ((b * g.ho + iy) * g.wo + ix) * cin;
                let xs = &input[xb..xb + cin];
                for ky in 0..g.kh {
                    let Some(oy) = src_coord(iy, ky, g.stride, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ox) = src_coord(ix, kx, g.stride, g.pad_left, g.w) else { continue };
                        let ob = ((b * g.h + oy) * g.w + ox) * cout;
                        let wb = (ky * g.kw + kx) * cin * cout;
                        let ws = &weight[wb..wb + cin * cout];
                        let acc = &mut out[ob..ob + cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            axpy(acc, xv, &ws[ci * cout..(ci + 1) * cout]);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    for b in 0..g.batch {
        for iy in 0..g.ho {
            for ix in 0..g.wo {
                let xb = ((b * g.ho + iy) * g.wo + ix) * cin;
                for ky in 0..g.kh {
                    let Some(oy) = src_coord(iy, ky, g.stride, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ox) = src_coord(ix, kx, g.stride, g.pad_left, g.w) else { continue };
                        let ob = ((b * g.h + oy) * g.w + ox) * cout;
                        let go = &grad_out[ob..ob + cout];
                        let wb = (ky * g.kw + kx) * cin * cout;
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let ws = &weight[wb..wb + cin * cout];
                            for (ci, slot) in gi[xb..xb + cin].iter_mut().enumerate() {
                                *slot += dot(go, &ws[ci * cout..(ci + 1) * cout]);
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            let xs = &input[xb..xb + cin];
                            let gws = &mut gw[wb..wb + cin * cout];
                            for (ci, &xv) in xs.iter().enumerate() {
                                axpy(&mut gws[ci * cout..(ci + 1) * cout], xv, go);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[r, :] = bias + input[r, :] @ weight` for `rows x din` input.
pub(crate) fn dense_forward<T: Real>(
    rows: usize,
    din: usize,
    dout: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    for r in 0..rows {
        let acc = &mut out[r * dout..(r + 1) * dout];
        match bias {
            Some(bv) => acc.copy_from_slice(bv),
            None => acc.fill(T::zero()),
        }
        for (i, &xv) in input[r * din..(r + 1) * din].iter().enumerate() {
            axpy(acc, xv, &weight[i * dout..(i + 1) * dout]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Real>(
    rows: usize,
    din: usize,
    dout: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
) {
    for r in 0..rows {
        let go = &grad_out[r * dout..(r + 1) * dout];
        if let Some(gi) = grad_in.as_deref_mut() {
            for (i, slot) in gi[r * din..(r + 1) * din].iter_mut().enumerate() {
                *slot += dot(go, &weight[i * dout..(i + 1) * dout]);
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            for (i, &xv) in input[r * din..(r + 1) * din].iter().enumerate() {
                axpy(&mut gw[i * dout..(i + 1) * dout], xv, go);
            }
        }
    }
}

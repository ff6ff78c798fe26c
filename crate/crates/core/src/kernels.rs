//! Dense convolution / pooling / resampling kernels.
//!
//! Layout conventions: activations are (N, C, spatial...) row-major,
//! weights are (Cout, Cin, K...). All kernels parallelize over disjoint
//! output slabs (see [`crate::par`]); `*_seq` twins are the sequential
//! fallback and the baseline for the bench suite. Zero padding throughout;
//! loop bounds are precomputed so inner loops run bounds-check free on
//! contiguous rows.

use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Output extent of a convolution along one axis.
#[inline]
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "input {input} too small for kernel {k} pad {pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Range of output indices `o` with `0 <= o*stride + k_off - pad < input`.
#[inline]
fn out_range(input: usize, out: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let top = input as isize - 1 + pad as isize - k_off as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out);
    (lo, hi.max(lo))
}

/// Dot product with eight fixed-order partial accumulators. Breaking the
/// single-accumulator dependency chain lets the loop vectorize; the
/// summation order is fixed, so results stay run-to-run identical.
#[inline]
fn dot8<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (pa, pb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + pa[l] * pb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

fn conv3d_fwd_with<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    seq: bool,
) -> Tensor<T> {
    let (n, cin, d, h, wd) = dims5(x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 5, "conv3d weight must be 5D");
    assert_eq!(ws[1], cin, "conv3d cin mismatch");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[3], k);
    assert_eq!(ws[4], k);
    let (od, oh, ow) = (
        conv_out_extent(d, k, stride, pad),
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(wd, k, stride, pad),
    );
    let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
    let chunk = od * oh * ow;
    let xs = x.data();
    let wdat = w.data();
    let body = |slab: usize, o: &mut [T]| {
        let (ni, co) = (slab / cout, slab % cout);
        if let Some(bias) = b {
            let bv = bias.data()[co];
            for v in o.iter_mut() {
                *v = bv;
            }
        }
        let xn = &xs[ni * cin * d * h * wd..(ni + 1) * cin * d * h * wd];
        for ci in 0..cin {
            let xc = &xn[ci * d * h * wd..(ci + 1) * d * h * wd];
            let wc = &wdat[(co * cin + ci) * k * k * k..(co * cin + ci + 1) * k * k * k];
            for kd in 0..k {
                let (dlo, dhi) = out_range(d, od, kd, stride, pad);
                for kh in 0..k {
                    let (hlo, hhi) = out_range(h, oh, kh, stride, pad);
                    for kw in 0..k {
                        let (wlo, whi) = out_range(wd, ow, kw, stride, pad);
                        if wlo >= whi {
                            continue;
                        }
                        let wv = wc[(kd * k + kh) * k + kw];
                        for oz in dlo..dhi {
                            let iz = oz * stride + kd - pad;
                            for oy in hlo..hhi {
                                let iy = oy * stride + kh - pad;
                                let orow = &mut o[(oz * oh + oy) * ow..][wlo..whi];
                                let xrow = &xc[(iz * h + iy) * wd..][..wd];
                                if stride == 1 {
                                    let xoff = wlo + kw - pad;
                                    for (ov, &xv) in
                                        orow.iter_mut().zip(&xrow[xoff..xoff + (whi - wlo)])
                                    {
                                        *ov = *ov + wv * xv;
                                    }
                                } else {
                                    for (i, ov) in orow.iter_mut().enumerate() {
                                        let ix = (wlo + i) * stride + kw - pad;
                                        *ov = *ov + wv * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if seq {
        par::for_each_chunk_mut_seq(out.data_mut(), chunk, body);
    } else {
        par::for_each_chunk_mut(out.data_mut(), chunk, body);
    }
    out
}

pub fn conv3d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    conv3d_fwd_with(x, w, b, stride, pad, false)
}

pub fn conv3d_fwd_seq<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    conv3d_fwd_with(x, w, b, stride, pad, true)
}

/// Gradient w.r.t. the conv3d input.
pub fn conv3d_bwd_input<T: Scalar>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (_n, cin, d, h, wd) = dims5(in_shape);
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let gs = grad_out.shape();
    let (od, oh, ow) = (gs[2], gs[3], gs[4]);
    let mut dx = Tensor::zeros(in_shape);
    let chunk = d * h * wd;
    let g = grad_out.data();
    let wdat = w.data();
    par::for_each_chunk_mut(dx.data_mut(), chunk, |slab, dxc| {
        let (ni, ci) = (slab / cin, slab % cin);
        for co in 0..cout {
            let gc = &g[(ni * cout + co) * od * oh * ow..][..od * oh * ow];
            let wc = &wdat[(co * cin + ci) * k * k * k..][..k * k * k];
            for kd in 0..k {
                let (dlo, dhi) = out_range(d, od, kd, stride, pad);
                for kh in 0..k {
                    let (hlo, hhi) = out_range(h, oh, kh, stride, pad);
                    for kw in 0..k {
                        let (wlo, whi) = out_range(wd, ow, kw, stride, pad);
                        if wlo >= whi {
                            continue;
                        }
                        let wv = wc[(kd * k + kh) * k + kw];
                        for oz in dlo..dhi {
                            let iz = oz * stride + kd - pad;
                            for oy in hlo..hhi {
                                let iy = oy * stride + kh - pad;
                                let grow = &gc[(oz * oh + oy) * ow..][wlo..whi];
                                let dxrow = &mut dxc[(iz * h + iy) * wd..][..wd];
                                if stride == 1 {
                                    let xoff = wlo + kw - pad;
                                    for (&gv, dv) in
                                        grow.iter().zip(&mut dxrow[xoff..xoff + (whi - wlo)])
                                    {
                                        *dv = *dv + wv * gv;
                                    }
                                } else {
                                    for (i, &gv) in grow.iter().enumerate() {
                                        let ix = (wlo + i) * stride + kw - pad;
                                        dxrow[ix] = dxrow[ix] + wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradients w.r.t. conv3d weights and bias.
pub fn conv3d_bwd_params<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let (n, cin, d, h, wd) = dims5(x.shape());
    let (cout, k) = (w_shape[0], w_shape[2]);
    let gs = grad_out.shape();
    let (od, oh, ow) = (gs[2], gs[3], gs[4]);
    let mut dw = Tensor::zeros(w_shape);
    let chunk = cin * k * k * k;
    let g = grad_out.data();
    let xs = x.data();
    par::for_each_chunk_mut(dw.data_mut(), chunk, |co, dwc| {
        for ni in 0..n {
            let gc = &g[(ni * cout + co) * od * oh * ow..][..od * oh * ow];
            for ci in 0..cin {
                let xc = &xs[(ni * cin + ci) * d * h * wd..][..d * h * wd];
                for kd in 0..k {
                    let (dlo, dhi) = out_range(d, od, kd, stride, pad);
                    for kh in 0..k {
                        let (hlo, hhi) = out_range(h, oh, kh, stride, pad);
                        for kw in 0..k {
                            let (wlo, whi) = out_range(wd, ow, kw, stride, pad);
                            if wlo >= whi {
                                continue;
                            }
                            let mut acc = T::ZERO;
                            for oz in dlo..dhi {
                                let iz = oz * stride + kd - pad;
                                for oy in hlo..hhi {
                                    let iy = oy * stride + kh - pad;
                                    let grow = &gc[(oz * oh + oy) * ow..][wlo..whi];
                                    let xrow = &xc[(iz * h + iy) * wd..][..wd];
                                    if stride == 1 {
                                        let xoff = wlo + kw - pad;
                                        acc = acc + dot8(grow, &xrow[xoff..xoff + (whi - wlo)]);
                                    } else {
                                        for (i, &gv) in grow.iter().enumerate() {
                                            let ix = (wlo + i) * stride + kw - pad;
                                            acc = acc + gv * xrow[ix];
                                        }
                                    }
                                }
                            }
                            let widx = (ci * k + kd) * k * k + kh * k + kw;
                            dwc[widx] = dwc[widx] + acc;
                        }
                    }
                }
            }
        }
    });
    let db = with_bias.then(|| {
        let mut db = Tensor::zeros(&[cout]);
        for ni in 0..n {
            for co in 0..cout {
                let gc = &g[(ni * cout + co) * od * oh * ow..][..od * oh * ow];
                let mut acc = T::ZERO;
                for &gv in gc {
                    acc = acc + gv;
                }
                db.data_mut()[co] = db.data_mut()[co] + acc;
            }
        }
        db
    });
    (dw, db)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv2d_fwd_with<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    seq: bool,
) -> Tensor<T> {
    let (n, cin, h, wd) = dims4(x.shape());
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv2d weight must be 4D");
    assert_eq!(ws[1], cin, "conv2d cin mismatch");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[3], k);
    let (oh, ow) = (
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(wd, k, stride, pad),
    );
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let chunk = oh * ow;
    let xs = x.data();
    let wdat = w.data();
    let body = |slab: usize, o: &mut [T]| {
        let (ni, co) = (slab / cout, slab % cout);
        if let Some(bias) = b {
            let bv = bias.data()[co];
            for v in o.iter_mut() {
                *v = bv;
            }
        }
        for ci in 0..cin {
            let xc = &xs[(ni * cin + ci) * h * wd..][..h * wd];
            let wc = &wdat[(co * cin + ci) * k * k..][..k * k];
            for kh in 0..k {
                let (hlo, hhi) = out_range(h, oh, kh, stride, pad);
                for kw in 0..k {
                    let (wlo, whi) = out_range(wd, ow, kw, stride, pad);
                    if wlo >= whi {
                        continue;
                    }
                    let wv = wc[kh * k + kw];
                    for oy in hlo..hhi {
                        let iy = oy * stride + kh - pad;
                        let orow = &mut o[oy * ow..][wlo..whi];
                        let xrow = &xc[iy * wd..][..wd];
                        if stride == 1 {
                            let xoff = wlo + kw - pad;
                            for (ov, &xv) in orow.iter_mut().zip(&xrow[xoff..xoff + (whi - wlo)]) {
                                *ov = *ov + wv * xv;
                            }
                        } else {
                            for (i, ov) in orow.iter_mut().enumerate() {
                                *ov = *ov + wv * xrow[(wlo + i) * stride + kw - pad];
                            }
                        }
                    }
                }
            }
        }
    };
    if seq {
        par::for_each_chunk_mut_seq(out.data_mut(), chunk, body);
    } else {
        par::for_each_chunk_mut(out.data_mut(), chunk, body);
    }
    out
}

pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    conv2d_fwd_with(x, w, b, stride, pad, false)
}

pub fn conv2d_fwd_seq<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    conv2d_fwd_with(x, w, b, stride, pad, true)
}

pub fn conv2d_bwd_input<T: Scalar>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (_n, cin, h, wd) = dims4(in_shape);
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let gs = grad_out.shape();
    let (oh, ow) = (gs[2], gs[3]);
    let mut dx = Tensor::zeros(in_shape);
    let g = grad_out.data();
    let wdat = w.data();
    par::for_each_chunk_mut(dx.data_mut(), h * wd, |slab, dxc| {
        let (ni, ci) = (slab / cin, slab % cin);
        for co in 0..cout {
            let gc = &g[(ni * cout + co) * oh * ow..][..oh * ow];
            let wc = &wdat[(co * cin + ci) * k * k..][..k * k];
            for kh in 0..k {
                let (hlo, hhi) = out_range(h, oh, kh, stride, pad);
                for kw in 0..k {
                    let (wlo, whi) = out_range(wd, ow, kw, stride, pad);
                    if wlo >= whi {
                        continue;
                    }
                    let wv = wc[kh * k + kw];
                    for oy in hlo..hhi {
                        let iy = oy * stride + kh - pad;
                        let grow = &gc[oy * ow..][wlo..whi];
                        let dxrow = &mut dxc[iy * wd..][..wd];
                        if stride == 1 {
                            let xoff = wlo + kw - pad;
                            for (&gv, dv) in grow.iter().zip(&mut dxrow[xoff..xoff + (whi - wlo)]) {
                                *dv = *dv + wv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = (wlo + i) * stride + kw - pad;
                                dxrow[ix] = dxrow[ix] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_bwd_params<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let (n, cin, h, wd) = dims4(x.shape());
    let (cout, k) = (w_shape[0], w_shape[2]);
    let gs = grad_out.shape();
    let (oh, ow) = (gs[2], gs[3]);
    let mut dw = Tensor::zeros(w_shape);
    let g = grad_out.data();
    let xs = x.data();
    par::for_each_chunk_mut(dw.data_mut(), cin * k * k, |co, dwc| {
        for ni in 0..n {
            let gc = &g[(ni * cout + co) * oh * ow..][..oh * ow];
            for ci in 0..cin {
                let xc = &xs[(ni * cin + ci) * h * wd..][..h * wd];
                for kh in 0..k {
                    let (hlo, hhi) = out_range(h, oh, kh, stride, pad);
                    for kw in 0..k {
                        let (wlo, whi) = out_range(wd, ow, kw, stride, pad);
                        if wlo >= whi {
                            continue;
                        }
                        let mut acc = T::ZERO;
                        for oy in hlo..hhi {
                            let iy = oy * stride + kh - pad;
                            let grow = &gc[oy * ow..][wlo..whi];
                            let xrow = &xc[iy * wd..][..wd];
                            if stride == 1 {
                                let xoff = wlo + kw - pad;
                                acc = acc + dot8(grow, &xrow[xoff..xoff + (whi - wlo)]);
                            } else {
                                for (i, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * xrow[(wlo + i) * stride + kw - pad];
                                }
                            }
                        }
                        dwc[(ci * k + kh) * k + kw] = dwc[(ci * k + kh) * k + kw] + acc;
                    }
                }
            }
        }
    });
    let db = with_bias.then(|| {
        let mut db = Tensor::zeros(&[cout]);
        for ni in 0..n {
            for co in 0..cout {
                let gc = &g[(ni * cout + co) * oh * ow..][..oh * ow];
                let mut acc = T::ZERO;
                for &gv in gc {
                    acc = acc + gv;
                }
                db.data_mut()[co] = db.data_mut()[co] + acc;
            }
        }
        db
    });
    (dw, db)
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

/// Mean pooling over the trailing `spatial` axes by integer factor.
/// Axes shorter than the factor collapse to one (whole-extent window).
fn avg_pool_with<T: Scalar>(x: &Tensor<T>, spatial: usize, factor: usize, seq: bool) -> Tensor<T> {
    assert!(factor >= 1);
    let shape = x.shape();
    let lead: usize = shape[..shape.len() - spatial].iter().product();
    let sp = &shape[shape.len() - spatial..];
    for &e in sp {
        assert!(
            e % factor == 0 || e < factor,
            "pool extent {e} not divisible by {factor}"
        );
    }
    let win: Vec<usize> = sp.iter().map(|&e| e.min(factor)).collect();
    let osp: Vec<usize> = sp.iter().zip(&win).map(|(&e, &w)| (e / w).max(1)).collect();
    let mut out_shape: Vec<usize> = shape[..shape.len() - spatial].to_vec();
    out_shape.extend_from_slice(&osp);
    let mut out = Tensor::zeros(&out_shape);
    let in_chunk: usize = sp.iter().product();
    let out_chunk: usize = osp.iter().product();
    let inv = T::from_f64(1.0 / win.iter().product::<usize>() as f64);
    let xs = x.data();
    // strides for up to 3 spatial dims, padded from the left with size-1 dims
    let mut sp3 = [1usize; 3];
    let mut w3 = [1usize; 3];
    let mut o3 = [1usize; 3];
    for i in 0..spatial {
        sp3[3 - spatial + i] = sp[i];
        w3[3 - spatial + i] = win[i];
        o3[3 - spatial + i] = osp[i];
    }
    let body = |slab: usize, o: &mut [T]| {
        let xc = &xs[slab * in_chunk..][..in_chunk];
        for oz in 0..o3[0] {
            for oy in 0..o3[1] {
                for ox in 0..o3[2] {
                    let mut acc = T::ZERO;
                    for dz in 0..w3[0] {
                        for dy in 0..w3[1] {
                            let row = ((oz * w3[0] + dz) * sp3[1] + oy * w3[1] + dy) * sp3[2]
                                + ox * w3[2];
                            for dx in 0..w3[2] {
                                acc = acc + xc[row + dx];
                            }
                        }
                    }
                    o[(oz * o3[1] + oy) * o3[2] + ox] = acc * inv;
                }
            }
        }
    };
    let _ = lead;
    if seq {
        par::for_each_chunk_mut_seq(out.data_mut(), out_chunk, body);
    } else {
        par::for_each_chunk_mut(out.data_mut(), out_chunk, body);
    }
    out
}

pub fn avg_pool<T: Scalar>(x: &Tensor<T>, spatial: usize, factor: usize) -> Tensor<T> {
    avg_pool_with(x, spatial, factor, false)
}

pub fn avg_pool_seq<T: Scalar>(x: &Tensor<T>, spatial: usize, factor: usize) -> Tensor<T> {
    avg_pool_with(x, spatial, factor, true)
}

/// Backward of [`avg_pool`]: spread each output gradient uniformly over its window.
pub fn avg_pool_bwd<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    spatial: usize,
) -> Tensor<T> {
    let sp = &in_shape[in_shape.len() - spatial..];
    let osp = &grad_out.shape()[in_shape.len() - spatial..];
    let win: Vec<usize> = sp.iter().zip(osp).map(|(&e, &o)| e / o).collect();
    let mut sp3 = [1usize; 3];
    let mut w3 = [1usize; 3];
    let mut o3 = [1usize; 3];
    for i in 0..spatial {
        sp3[3 - spatial + i] = sp[i];
        w3[3 - spatial + i] = win[i];
        o3[3 - spatial + i] = osp[i];
    }
    let inv = T::from_f64(1.0 / win.iter().product::<usize>() as f64);
    let in_chunk: usize = sp.iter().product();
    let out_chunk: usize = osp.iter().product();
    let mut dx = Tensor::zeros(in_shape);
    let g = grad_out.data();
    par::for_each_chunk_mut(dx.data_mut(), in_chunk, |slab, dxc| {
        let gc = &g[slab * out_chunk..][..out_chunk];
        for oz in 0..o3[0] {
            for oy in 0..o3[1] {
                for ox in 0..o3[2] {
                    let gv = gc[(oz * o3[1] + oy) * o3[2] + ox] * inv;
                    for dz in 0..w3[0] {
                        for dy in 0..w3[1] {
                            let row = ((oz * w3[0] + dz) * sp3[1] + oy * w3[1] + dy) * sp3[2]
                                + ox * w3[2];
                            for dx_i in 0..w3[2] {
                                dxc[row + dx_i] = dxc[row + dx_i] + gv;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Nearest-neighbour 2x upsampling of a 5D (N, C, D, H, W) tensor.
pub fn upsample2x_3d<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, d, h, w) = dims5(x.shape());
    let mut out = Tensor::zeros(&[n, c, 2 * d, 2 * h, 2 * w]);
    let xs = x.data();
    par::for_each_chunk_mut(out.data_mut(), 8 * d * h * w, |slab, o| {
        let xc = &xs[slab * d * h * w..][..d * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for iz in 0..d {
            for iy in 0..h {
                let xrow = &xc[(iz * h + iy) * w..][..w];
                for dz in 0..2 {
                    for dy in 0..2 {
                        let orow = &mut o[((2 * iz + dz) * oh + 2 * iy + dy) * ow..][..ow];
                        for (i, &v) in xrow.iter().enumerate() {
                            orow[2 * i] = v;
                            orow[2 * i + 1] = v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Backward of [`upsample2x_3d`]: sum the 2x2x2 block of output gradients.
pub fn upsample2x_3d_bwd<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (_, _, d, h, w) = dims5(in_shape);
    let g = grad_out.data();
    let mut dx = Tensor::zeros(in_shape);
    par::for_each_chunk_mut(dx.data_mut(), d * h * w, |slab, dxc| {
        let gc = &g[slab * 8 * d * h * w..][..8 * d * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for iz in 0..d {
            for iy in 0..h {
                let drow = &mut dxc[(iz * h + iy) * w..][..w];
                for dz in 0..2 {
                    for dy in 0..2 {
                        let grow = &gc[((2 * iz + dz) * oh + 2 * iy + dy) * ow..][..ow];
                        for (i, dv) in drow.iter_mut().enumerate() {
                            *dv = *dv + grow[2 * i] + grow[2 * i + 1];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Insert a new spatial axis at `pos` (0..=spatial dims of `x` minus channel
/// dims) replicated `copies` times: (N, C, s...) -> 5D with the new axis.
/// Used to broadcast 2D maps into volumes (e.g. an X-ray along its
/// projection axis).
pub fn replicate_spatial<T: Scalar>(x: &Tensor<T>, pos: usize, copies: usize) -> Tensor<T> {
    let (n, c, a, b) = dims4(x.shape());
    assert!(pos <= 2);
    let mut sp = vec![a, b];
    sp.insert(pos, copies);
    let out_shape = [n, c, sp[0], sp[1], sp[2]];
    let mut out = Tensor::zeros(&out_shape);
    let xs = x.data();
    let (s0, s1, s2) = (sp[0], sp[1], sp[2]);
    par::for_each_chunk_mut(out.data_mut(), s0 * s1 * s2, |slab, o| {
        let xc = &xs[slab * a * b..][..a * b];
        for i0 in 0..s0 {
            for i1 in 0..s1 {
                for i2 in 0..s2 {
                    let (ia, ib) = match pos {
                        0 => (i1, i2),
                        1 => (i0, i2),
                        _ => (i0, i1),
                    };
                    o[(i0 * s1 + i1) * s2 + i2] = xc[ia * b + ib];
                }
            }
        }
    });
    out
}

/// Backward of [`replicate_spatial`]: sum over the replicated axis.
pub fn replicate_spatial_bwd<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    pos: usize,
) -> Tensor<T> {
    let (_, _, a, b) = dims4(in_shape);
    let gs = grad_out.shape();
    let (s0, s1, s2) = (gs[2], gs[3], gs[4]);
    let g = grad_out.data();
    let mut dx = Tensor::zeros(in_shape);
    par::for_each_chunk_mut(dx.data_mut(), a * b, |slab, dxc| {
        let gc = &g[slab * s0 * s1 * s2..][..s0 * s1 * s2];
        for i0 in 0..s0 {
            for i1 in 0..s1 {
                for i2 in 0..s2 {
                    let (ia, ib) = match pos {
                        0 => (i1, i2),
                        1 => (i0, i2),
                        _ => (i0, i1),
                    };
                    dxc[ia * b + ib] = dxc[ia * b + ib] + gc[(i0 * s1 + i1) * s2 + i2];
                }
            }
        }
    });
    dx
}

/// Permute the three spatial axes of a 5D tensor: output axis `a` takes
/// input axis `perm[a]`.
pub fn permute_spatial<T: Scalar>(x: &Tensor<T>, perm: [usize; 3]) -> Tensor<T> {
    let (n, c, _, _, _) = dims5(x.shape());
    let isp = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let osp = [isp[perm[0]], isp[perm[1]], isp[perm[2]]];
    let mut out = Tensor::zeros(&[n, c, osp[0], osp[1], osp[2]]);
    let xs = x.data();
    let in_chunk = isp[0] * isp[1] * isp[2];
    par::for_each_chunk_mut(out.data_mut(), osp[0] * osp[1] * osp[2], |slab, o| {
        let xc = &xs[slab * in_chunk..][..in_chunk];
        let mut idx = [0usize; 3];
        for (oflat, ov) in o.iter_mut().enumerate() {
            let o2 = oflat % osp[2];
            let o1 = (oflat / osp[2]) % osp[1];
            let o0 = oflat / (osp[2] * osp[1]);
            idx[perm[0]] = o0;
            idx[perm[1]] = o1;
            idx[perm[2]] = o2;
            *ov = xc[(idx[0] * isp[1] + idx[1]) * isp[2] + idx[2]];
        }
    });
    out
}

/// Crop the spatial block `offsets..offsets+extent` from a 5D tensor.
pub fn crop_spatial<T: Scalar>(
    x: &Tensor<T>,
    offsets: [usize; 3],
    extent: [usize; 3],
) -> Tensor<T> {
    let (n, c, d, h, w) = dims5(x.shape());
    for a in 0..3 {
        assert!(offsets[a] + extent[a] <= [d, h, w][a], "crop out of bounds");
    }
    let mut out = Tensor::zeros(&[n, c, extent[0], extent[1], extent[2]]);
    let xs = x.data();
    par::for_each_chunk_mut(
        out.data_mut(),
        extent[0] * extent[1] * extent[2],
        |slab, o| {
            let xc = &xs[slab * d * h * w..][..d * h * w];
            for oz in 0..extent[0] {
                for oy in 0..extent[1] {
                    let src = ((oz + offsets[0]) * h + oy + offsets[1]) * w + offsets[2];
                    let dst = (oz * extent[1] + oy) * extent[2];
                    o[dst..dst + extent[2]].copy_from_slice(&xc[src..src + extent[2]]);
                }
            }
        },
    );
    out
}

/// Backward of [`crop_spatial`]: scatter gradients into a zero tensor.
pub fn crop_spatial_bwd<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    offsets: [usize; 3],
) -> Tensor<T> {
    let (_, _, d, h, w) = dims5(in_shape);
    let gs = grad_out.shape();
    let extent = [gs[2], gs[3], gs[4]];
    let g = grad_out.data();
    let mut dx = Tensor::zeros(in_shape);
    par::for_each_chunk_mut(dx.data_mut(), d * h * w, |slab, dxc| {
        let gc =
            &g[slab * extent[0] * extent[1] * extent[2]..][..extent[0] * extent[1] * extent[2]];
        for oz in 0..extent[0] {
            for oy in 0..extent[1] {
                let dst = ((oz + offsets[0]) * h + oy + offsets[1]) * w + offsets[2];
                let src = (oz * extent[1] + oy) * extent[2];
                dxc[dst..dst + extent[2]].copy_from_slice(&gc[src..src + extent[2]]);
            }
        }
    });
    dx
}

/// Mean over one spatial axis of a 5D tensor, producing 4D (N, C, a, b).
pub fn mean_spatial_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (n, c, d, h, w) = dims5(x.shape());
    let sp = [d, h, w];
    let keep: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| sp[a]).collect();
    let mut out = Tensor::zeros(&[n, c, keep[0], keep[1]]);
    let inv = T::from_f64(1.0 / sp[axis] as f64);
    let xs = x.data();
    par::for_each_chunk_mut(out.data_mut(), keep[0] * keep[1], |slab, o| {
        let xc = &xs[slab * d * h * w..][..d * h * w];
        for ia in 0..keep[0] {
            for ib in 0..keep[1] {
                let mut acc = T::ZERO;
                for im in 0..sp[axis] {
                    let (iz, iy, ix) = match axis {
                        0 => (im, ia, ib),
                        1 => (ia, im, ib),
                        _ => (ia, ib, im),
                    };
                    acc = acc + xc[(iz * h + iy) * w + ix];
                }
                o[ia * keep[1] + ib] = acc * inv;
            }
        }
    });
    out
}

/// Backward of [`mean_spatial_axis`].
pub fn mean_spatial_axis_bwd<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    axis: usize,
) -> Tensor<T> {
    let (_, _, d, h, w) = dims5(in_shape);
    let sp = [d, h, w];
    let keep: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| sp[a]).collect();
    let inv = T::from_f64(1.0 / sp[axis] as f64);
    let g = grad_out.data();
    let mut dx = Tensor::zeros(in_shape);
    par::for_each_chunk_mut(dx.data_mut(), d * h * w, |slab, dxc| {
        let gc = &g[slab * keep[0] * keep[1]..][..keep[0] * keep[1]];
        for ia in 0..keep[0] {
            for ib in 0..keep[1] {
                let gv = gc[ia * keep[1] + ib] * inv;
                for im in 0..sp[axis] {
                    let (iz, iy, ix) = match axis {
                        0 => (im, ia, ib),
                        1 => (ia, im, ib),
                        _ => (ia, ib, im),
                    };
                    let idx = (iz * h + iy) * w + ix;
                    dxc[idx] = dxc[idx] + gv;
                }
            }
        }
    });
    dx
}

#[inline]
fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4D, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[inline]
fn dims5(shape: &[usize]) -> (usize, usize, usize, usize, usize) {
    assert_eq!(shape.len(), 5, "expected 5D, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3], shape[4])
}

//! Raw convolution and pooling loops shared by the forward and backward
//! passes. Work is split over rayon so that every output element is produced
//! by exactly one task with a fixed reduction order; results are therefore
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{Real, Shape4};

pub struct ConvDims {
    pub x: Shape4,
    pub k: Shape4, // (c_out, c_in, k_h, k_w)
    pub out: Shape4,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

pub fn conv2d_out_shape(
    x: Shape4,
    k: Shape4,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Option<Shape4> {
    let oh = (x.h + 2 * padding.0).checked_sub(k.h)? / stride.0 + 1;
    let ow = (x.w + 2 * padding.1).checked_sub(k.w)? / stride.1 + 1;
    if oh == 0 || ow == 0 {
        return None;
    }
    Some(Shape4::new(x.n, k.n, oh, ow))
}

/// Cross-correlation (no kernel flip) with symmetric zero padding.
pub fn conv2d_forward<R: Real>(d: &ConvDims, x: &[R], k: &[R], b: Option<&[R]>) -> Vec<R> {
    let (xs, ks, os) = (d.x, d.k, d.out);
    let (sh, sw) = d.stride;
    let (ph, pw) = d.padding;
    let mut out = vec![R::zero(); os.count()];
    out.par_chunks_mut(os.h * os.w).enumerate().for_each(|(plane, o)| {
        let n = plane / os.c;
        let co = plane % os.c;
        let bias = b.map_or(R::zero(), |b| b[co]);
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut acc = bias;
                for ci in 0..xs.c {
                    for ky in 0..ks.h {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..ks.w {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            acc += x[xs.idx(n, ci, iy as usize, ix as usize)]
                                * k[ks.idx(co, ci, ky, kx)];
                        }
                    }
                }
                o[oy * os.w + ox] = acc;
            }
        }
    });
    out
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_x<R: Real>(d: &ConvDims, k: &[R], dy: &[R]) -> Vec<R> {
    let (xs, ks, os) = (d.x, d.k, d.out);
    let (sh, sw) = d.stride;
    let (ph, pw) = d.padding;
    let mut dx = vec![R::zero(); xs.count()];
    dx.par_chunks_mut(xs.c * xs.h * xs.w).enumerate().for_each(|(n, dxn)| {
        for co in 0..os.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = dy[os.idx(n, co, oy, ox)];
                    for ci in 0..xs.c {
                        for ky in 0..ks.h {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..ks.w {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                dxn[(ci * xs.h + iy as usize) * xs.w + ix as usize] +=
                                    k[ks.idx(co, ci, ky, kx)] * g;
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the convolution kernel.
pub fn conv2d_backward_k<R: Real>(d: &ConvDims, x: &[R], dy: &[R]) -> Vec<R> {
    let (xs, ks, os) = (d.x, d.k, d.out);
    let (sh, sw) = d.stride;
    let (ph, pw) = d.padding;
    let mut dk = vec![R::zero(); ks.count()];
    dk.par_chunks_mut(ks.c * ks.h * ks.w).enumerate().for_each(|(co, dkc)| {
        for n in 0..xs.n {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = dy[os.idx(n, co, oy, ox)];
                    for ci in 0..xs.c {
                        for ky in 0..ks.h {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..ks.w {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                dkc[(ci * ks.h + ky) * ks.w + kx] +=
                                    x[xs.idx(n, ci, iy as usize, ix as usize)] * g;
                            }
                        }
                    }
                }
            }
        }
    });
    dk
}

/// Gradient w.r.t. the per-output-channel bias.
pub fn conv2d_backward_b<R: Real>(d: &ConvDims, dy: &[R]) -> Vec<R> {
    let os = d.out;
    (0..os.c)
        .into_par_iter()
        .map(|co| {
            let mut acc = R::zero();
            for n in 0..os.n {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        acc += dy[os.idx(n, co, oy, ox)];
                    }
                }
            }
            acc
        })
        .collect()
}

pub struct DepthwiseDims {
    pub x: Shape4,
    pub k: Shape4, // (c, 1, k_h, k_w)
    pub out: Shape4,
    pub stride: (usize, usize),
}

pub fn depthwise_out_shape(x: Shape4, k: Shape4, stride: (usize, usize)) -> Option<Shape4> {
    let oh = x.h.checked_sub(k.h)? / stride.0 + 1;
    let ow = x.w.checked_sub(k.w)? / stride.1 + 1;
    if oh == 0 || ow == 0 {
        return None;
    }
    Some(Shape4::new(x.n, x.c, oh, ow))
}

/// Per-channel cross-correlation; channels never mix.
pub fn depthwise_forward<R: Real>(d: &DepthwiseDims, x: &[R], k: &[R]) -> Vec<R> {
    let (xs, ks, os) = (d.x, d.k, d.out);
    let (sh, sw) = d.stride;
    let mut out = vec![R::zero(); os.count()];
    out.par_chunks_mut(os.h * os.w).enumerate().for_each(|(plane, o)| {
        let n = plane / os.c;
        let c = plane % os.c;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut acc = R::zero();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        acc += x[xs.idx(n, c, oy * sh + ky, ox * sw + kx)]
                            * k[ks.idx(c, 0, ky, kx)];
                    }
                }
                o[oy * os.w + ox] = acc;
            }
        }
    });
    out
}

pub fn depthwise_backward_x<R: Real>(d: &DepthwiseDims, k: &[R], dy: &[R]) -> Vec<R> {
    let (xs, ks, os) = (d.x, d.k, d.out);
    let (sh, sw) = d.stride;
    let mut dx = vec![R::zero(); xs.count()];
    dx.par_chunks_mut(xs.h * xs.w).enumerate().for_each(|(plane, dxp)| {
        let n = plane / xs.c;
        let c = plane % xs.c;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let g = dy[os.idx(n, c, oy, ox)];
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        dxp[(oy * sh + ky) * xs.w + ox * sw + kx] += k[ks.idx(c, 0, ky, kx)] * g;
                    }
                }
            }
        }
    });
    dx
}

pub fn depthwise_backward_k<R: Real>(d: &DepthwiseDims, x: &[R], dy: &[R]) -> Vec<R> {
    let (xs, ks, os) = (d.x, d.k, d.out);
    let (sh, sw) = d.stride;
    let mut dk = vec![R::zero(); ks.count()];
    dk.par_chunks_mut(ks.h * ks.w).enumerate().for_each(|(c, dkc)| {
        for n in 0..xs.n {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = dy[os.idx(n, c, oy, ox)];
                    for ky in 0..ks.h {
                        for kx in 0..ks.w {
                            dkc[ky * ks.w + kx] +=
                                x[xs.idx(n, c, oy * sh + ky, ox * sw + kx)] * g;
                        }
                    }
                }
            }
        }
    });
    dk
}

pub struct PoolDims {
    pub x: Shape4,
    pub out: Shape4,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

pub fn pool_out_shape(x: Shape4, window: (usize, usize), stride: (usize, usize)) -> Option<Shape4> {
    if window.0 > x.h || window.1 > x.w {
        return None;
    }
    let oh = (x.h - window.0) / stride.0 + 1;
    let ow = (x.w - window.1) / stride.1 + 1;
    Some(Shape4::new(x.n, x.c, oh, ow))
}

pub fn avg_pool_forward<R: Real>(d: &PoolDims, x: &[R]) -> Vec<R> {
    let (xs, os) = (d.x, d.out);
    let (wh, ww) = d.window;
    let (sh, sw) = d.stride;
    let inv = R::from_f64(1.0 / (wh * ww) as f64);
    let mut out = vec![R::zero(); os.count()];
    out.par_chunks_mut(os.h * os.w).enumerate().for_each(|(plane, o)| {
        let n = plane / os.c;
        let c = plane % os.c;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut acc = R::zero();
                for ky in 0..wh {
                    for kx in 0..ww {
                        acc += x[xs.idx(n, c, oy * sh + ky, ox * sw + kx)];
                    }
                }
                o[oy * os.w + ox] = acc * inv;
            }
        }
    });
    out
}

/// Scatters 1/(window area) of each output gradient back over its window.
pub fn avg_pool_backward<R: Real>(d: &PoolDims, dy: &[R]) -> Vec<R> {
    let (xs, os) = (d.x, d.out);
    let (wh, ww) = d.window;
    let (sh, sw) = d.stride;
    let inv = R::from_f64(1.0 / (wh * ww) as f64);
    let mut dx = vec![R::zero(); xs.count()];
    dx.par_chunks_mut(xs.h * xs.w).enumerate().for_each(|(plane, dxp)| {
        let n = plane / xs.c;
        let c = plane % xs.c;
        for oy in 0..os.h {
            for ox in 0..os.w {
                let g = dy[os.idx(n, c, oy, ox)] * inv;
                for ky in 0..wh {
                    for kx in 0..ww {
                        dxp[(oy * sh + ky) * xs.w + ox * sw + kx] += g;
                    }
                }
            }
        }
    });
    dx
}

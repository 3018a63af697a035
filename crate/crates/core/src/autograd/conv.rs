//! Dense 2-d convolution kernels shared by the tape's forward and backward
//! passes. Plain nested loops over `[N, C, H, W]` buffers, arranged so the
//! innermost loop runs along contiguous rows.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dim4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dim4 {
    pub fn from_shape(shape: &[usize]) -> Option<Dim4> {
        match shape {
            [n, c, h, w] => Some(Dim4 {
                n: *n,
                c: *c,
                h: *h,
                w: *w,
            }),
            _ => None,
        }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Offset of row (n, c, y).
    pub fn row(&self, n: usize, c: usize, y: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w
    }
}

/// Output extent of a conv/pool along one axis: `(in + 2*pad - k) / stride + 1`,
/// floored. `None` when non-positive.
pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` for which `ox*stride + kx - pad` lands inside
/// `[0, in_w)`. Returns `(lo, hi)` exclusive on `hi`, clipped to `[0, out_w)`.
fn ox_range(in_w: usize, out_w: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let max_ix = in_w as isize - 1 - kx as isize + pad as isize;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = (max_ix as usize / stride + 1).min(out_w);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    id: Dim4,
    weight: &[f64],
    filters: usize,
    kh: usize,
    kw: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
    out: &mut [f64],
    od: Dim4,
) {
    for n in 0..id.n {
        for f in 0..filters {
            let base = od.row(n, f, 0);
            out[base..base + od.h * od.w].fill(bias[f]);
            for c in 0..id.c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight[((f * id.c + c) * kh + ky) * kw + kx];
                        let (lo, hi) = ox_range(id.w, od.w, stride, pad, kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..od.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= id.h as isize {
                                continue;
                            }
                            let in_row = &input[id.row(n, c, iy as usize)..][..id.w];
                            let out_row = &mut out[od.row(n, f, oy)..][..od.w];
                            let ix0 = lo * stride + kx - pad;
                            if stride == 1 {
                                for (o, i) in out_row[lo..hi]
                                    .iter_mut()
                                    .zip(&in_row[ix0..ix0 + (hi - lo)])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                let mut ix = ix0;
                                for o in &mut out_row[lo..hi] {
                                    *o += wv * in_row[ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    id: Dim4,
    weight: &[f64],
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    d_out: &[f64],
    od: Dim4,
    mut d_input: Option<&mut [f64]>,
    mut d_weight: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    if let Some(db) = d_bias {
        for n in 0..od.n {
            for f in 0..filters {
                let base = od.row(n, f, 0);
                db[f] += d_out[base..base + od.h * od.w].iter().sum::<f64>();
            }
        }
    }

    for n in 0..id.n {
        for f in 0..filters {
            for c in 0..id.c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((f * id.c + c) * kh + ky) * kw + kx;
                        let wv = weight[widx];
                        let (lo, hi) = ox_range(id.w, od.w, stride, pad, kx);
                        if lo >= hi {
                            continue;
                        }
                        let mut dw_acc = 0.0;
                        for oy in 0..od.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= id.h as isize {
                                continue;
                            }
                            let in_base = id.row(n, c, iy as usize);
                            let d_row = &d_out[od.row(n, f, oy)..][..od.w];
                            let ix0 = lo * stride + kx - pad;
                            if d_weight.is_some() {
                                let in_row = &input[in_base..][..id.w];
                                if stride == 1 {
                                    for (d, i) in
                                        d_row[lo..hi].iter().zip(&in_row[ix0..ix0 + (hi - lo)])
                                    {
                                        dw_acc += d * i;
                                    }
                                } else {
                                    let mut ix = ix0;
                                    for d in &d_row[lo..hi] {
                                        dw_acc += d * in_row[ix];
                                        ix += stride;
                                    }
                                }
                            }
                            if let Some(di) = d_input.as_deref_mut() {
                                let di_row = &mut di[in_base..][..id.w];
                                if stride == 1 {
                                    for (d, i) in
                                        d_row[lo..hi].iter().zip(&mut di_row[ix0..ix0 + (hi - lo)])
                                    {
                                        *i += wv * d;
                                    }
                                } else {
                                    let mut ix = ix0;
                                    for d in &d_row[lo..hi] {
                                        di_row[ix] += wv * d;
                                        ix += stride;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = d_weight.as_deref_mut() {
                            dw[widx] += dw_acc;
                        }
                    }
                }
            }
        }
    }
}

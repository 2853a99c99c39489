//! Convolution and pooling kernels shared by the forward and backward rules
//! of the graph. Convolutions unfold each image into columns so the inner
//! loops run over contiguous output rows.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-d convolution over NCHW input and OIKK weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent along one spatial axis.
    pub fn out_len(&self, len: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return dim_err("stride and dilation must be >= 1");
        }
        let eff = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if eff > padded {
            return dim_err(format!(
                "effective kernel {eff} exceeds padded input extent {padded}"
            ));
        }
        Ok((padded - eff) / self.stride + 1)
    }
}

/// Range of output positions `o` such that `o * stride + offset` lies in `[0, len_in)`.
#[inline]
pub(crate) fn valid_range(offset: isize, stride: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = len_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(len_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub(crate) struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub cg: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_shape(input: &[usize], weight: &[usize], geom: &ConvGeom) -> Result<ConvShape> {
    let (n, c, h, w) = match *input {
        [n, c, h, w] => (n, c, h, w),
        _ => return dim_err(format!("conv input must be NCHW, got {input:?}")),
    };
    let (o, cg, kh, kw) = match *weight {
        [o, cg, kh, kw] => (o, cg, kh, kw),
        _ => return dim_err(format!("conv weight must be OIKK, got {weight:?}")),
    };
    if geom.groups == 0 || c != cg * geom.groups || o % geom.groups != 0 {
        return dim_err(format!(
            "channel mismatch: input has {c} channels, weight expects {cg} x {} groups with {o} outputs",
            geom.groups
        ));
    }
    let ho = geom.out_len(h, kh)?;
    let wo = geom.out_len(w, kw)?;
    Ok(ConvShape {
        n,
        c,
        h,
        w,
        o,
        cg,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Visits every (output row, input row, output column range) triple for one
/// kernel tap so the three conv rules share one index computation.
#[inline]
fn for_each_tap_row(
    s: &ConvShape,
    geom: &ConvGeom,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize, isize),
) {
    let pad = geom.padding as isize;
    let oy_off = (ky * geom.dilation) as isize - pad;
    let ox_off = (kx * geom.dilation) as isize - pad;
    let (ylo, yhi) = valid_range(oy_off, geom.stride, s.h, s.ho);
    let (xlo, xhi) = valid_range(ox_off, geom.stride, s.w, s.wo);
    if xlo >= xhi {
        return;
    }
    for oy in ylo..yhi {
        let iy = (oy as isize * geom.stride as isize + oy_off) as usize;
        f(oy, iy, xlo, xhi, ox_off);
    }
}

/// Direct-loop forward convolution; reference for the faster paths.
pub fn conv2d_forward_direct(input: &Tensor, weight: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let s = conv_shape(input.shape(), weight.shape(), geom)?;
    let mut out = vec![0.0; s.n * s.o * s.ho * s.wo];
    let x = input.data();
    let wt = weight.data();
    let opg = s.o / geom.groups;
    let st = geom.stride;
    for b in 0..s.n {
        for oc in 0..s.o {
            let grp = oc / opg;
            let obase = (b * s.o + oc) * s.ho * s.wo;
            for icl in 0..s.cg {
                let ic = grp * s.cg + icl;
                let ibase = (b * s.c + ic) * s.h * s.w;
                for ky in 0..s.kh {
                    for kx in 0..s.kw {
                        let wv = wt[((oc * s.cg + icl) * s.kh + ky) * s.kw + kx];
                        for_each_tap_row(&s, geom, ky, kx, |oy, iy, xlo, xhi, off| {
                            let orow = &mut out[obase + oy * s.wo..obase + (oy + 1) * s.wo];
                            let irow = &x[ibase + iy * s.w..ibase + (iy + 1) * s.w];
                            for ox in xlo..xhi {
                                let ix = (ox as isize * st as isize + off) as usize;
                                orow[ox] += wv * irow[ix];
                            }
                        });
                    }
                }
            }
        }
    }
    Tensor::new(vec![s.n, s.o, s.ho, s.wo], out)
}

/// Unfolds one (image, group) of the input into `col`, laid out
/// `[cg·kh·kw][ho·wo]`; padded taps are zero.
fn im2col(x: &[f64], s: &ConvShape, geom: &ConvGeom, b: usize, grp: usize, col: &mut [f64]) {
    let area = s.ho * s.wo;
    let st = geom.stride;
    col.fill(0.0);
    for icl in 0..s.cg {
        let ibase = (b * s.c + grp * s.cg + icl) * s.h * s.w;
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (icl * s.kh + ky) * s.kw + kx;
                let row = &mut col[r * area..(r + 1) * area];
                for_each_tap_row(s, geom, ky, kx, |oy, iy, xlo, xhi, off| {
                    let irow = &x[ibase + iy * s.w..ibase + (iy + 1) * s.w];
                    let orow = &mut row[oy * s.wo..(oy + 1) * s.wo];
                    for ox in xlo..xhi {
                        orow[ox] = irow[(ox as isize * st as isize + off) as usize];
                    }
                });
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto the input gradient.
fn col2im(col: &[f64], s: &ConvShape, geom: &ConvGeom, b: usize, grp: usize, gx: &mut [f64]) {
    let area = s.ho * s.wo;
    let st = geom.stride;
    for icl in 0..s.cg {
        let ibase = (b * s.c + grp * s.cg + icl) * s.h * s.w;
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let r = (icl * s.kh + ky) * s.kw + kx;
                let row = &col[r * area..(r + 1) * area];
                for_each_tap_row(s, geom, ky, kx, |oy, iy, xlo, xhi, off| {
                    let xrow = &mut gx[ibase + iy * s.w..ibase + (iy + 1) * s.w];
                    let crow = &row[oy * s.wo..(oy + 1) * s.wo];
                    for ox in xlo..xhi {
                        xrow[(ox as isize * st as isize + off) as usize] += crow[ox];
                    }
                });
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let s = conv_shape(input.shape(), weight.shape(), geom)?;
    let area = s.ho * s.wo;
    let k = s.cg * s.kh * s.kw;
    let mut out = vec![0.0; s.n * s.o * area];
    let (x, wt) = (input.data(), weight.data());
    let opg = s.o / geom.groups;
    let mut col = vec![0.0; k * area];
    for b in 0..s.n {
        for grp in 0..geom.groups {
            im2col(x, &s, geom, b, grp, &mut col);
            for oc in grp * opg..(grp + 1) * opg {
                let orow = &mut out[(b * s.o + oc) * area..(b * s.o + oc + 1) * area];
                for (r, &wv) in wt[oc * k..(oc + 1) * k].iter().enumerate() {
                    axpy(wv, &col[r * area..(r + 1) * area], orow);
                }
            }
        }
    }
    Tensor::new(vec![s.n, s.o, s.ho, s.wo], out)
}

pub fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_shape: &[usize],
    geom: &ConvGeom,
) -> Result<Tensor> {
    let s = conv_shape(input_shape, weight.shape(), geom)?;
    let area = s.ho * s.wo;
    let k = s.cg * s.kh * s.kw;
    let mut gx = vec![0.0; s.n * s.c * s.h * s.w];
    let (g, wt) = (grad_out.data(), weight.data());
    let opg = s.o / geom.groups;
    let mut col = vec![0.0; k * area];
    for b in 0..s.n {
        for grp in 0..geom.groups {
            col.fill(0.0);
            for oc in grp * opg..(grp + 1) * opg {
                let grow = &g[(b * s.o + oc) * area..(b * s.o + oc + 1) * area];
                for (r, &wv) in wt[oc * k..(oc + 1) * k].iter().enumerate() {
                    axpy(wv, grow, &mut col[r * area..(r + 1) * area]);
                }
            }
            col2im(&col, &s, geom, b, grp, &mut gx);
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    input: &Tensor,
    weight_shape: &[usize],
    geom: &ConvGeom,
) -> Result<Tensor> {
    let s = conv_shape(input.shape(), weight_shape, geom)?;
    let area = s.ho * s.wo;
    let k = s.cg * s.kh * s.kw;
    let mut gw = vec![0.0; s.o * k];
    let (g, x) = (grad_out.data(), input.data());
    let opg = s.o / geom.groups;
    let mut col = vec![0.0; k * area];
    for b in 0..s.n {
        for grp in 0..geom.groups {
            im2col(x, &s, geom, b, grp, &mut col);
            for oc in grp * opg..(grp + 1) * opg {
                let grow = &g[(b * s.o + oc) * area..(b * s.o + oc + 1) * area];
                for r in 0..k {
                    gw[oc * k + r] += dot(grow, &col[r * area..(r + 1) * area]);
                }
            }
        }
    }
    Tensor::new(weight_shape.to_vec(), gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling geometry. Padded sites never win a max and are excluded from the
/// average denominator, so a constant input maps to the same constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) struct PoolOut {
    pub out: Tensor,
    /// Max: flat input index of the winner per output. Avg: valid-site count.
    pub aux: Vec<usize>,
}

pub(crate) fn pool_forward(input: &Tensor, geom: &PoolGeom) -> Result<PoolOut> {
    let (n, c, h, w) = input.nchw()?;
    let cg = ConvGeom::new(geom.stride, geom.padding);
    let ho = cg.out_len(h, geom.window)?;
    let wo = cg.out_len(w, geom.window)?;
    let x = input.data();
    let mut out = vec![0.0; n * c * ho * wo];
    let mut aux = vec![0usize; out.len()];
    let pad = geom.padding as isize;
    for plane in 0..n * c {
        let ibase = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let oi = (plane * ho + oy) * wo + ox;
                let y0 = oy as isize * geom.stride as isize - pad;
                let x0 = ox as isize * geom.stride as isize - pad;
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                let mut sum = 0.0;
                let mut count = 0usize;
                for ky in 0..geom.window as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..geom.window as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = ibase + iy as usize * w + ix as usize;
                        let v = x[idx];
                        if v > best || arg == usize::MAX {
                            best = v;
                            arg = idx;
                        }
                        sum += v;
                        count += 1;
                    }
                }
                if count == 0 {
                    return dim_err("pool window covers only padding");
                }
                match geom.kind {
                    PoolKind::Max => {
                        out[oi] = best;
                        aux[oi] = arg;
                    }
                    PoolKind::Avg => {
                        out[oi] = sum / count as f64;
                        aux[oi] = count;
                    }
                }
            }
        }
    }
    Ok(PoolOut {
        out: Tensor::new(vec![n, c, ho, wo], out)?,
        aux,
    })
}

pub(crate) fn pool_backward(
    grad_out: &Tensor,
    aux: &[usize],
    input_shape: &[usize],
    geom: &PoolGeom,
) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let mut gx = vec![0.0; planes * h * w];
    let g = grad_out.data();
    match geom.kind {
        PoolKind::Max => {
            for (oi, &gv) in g.iter().enumerate() {
                gx[aux[oi]] += gv;
            }
        }
        PoolKind::Avg => {
            let pad = geom.padding as isize;
            for plane in 0..planes {
                let ibase = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let oi = (plane * ho + oy) * wo + ox;
                        let share = g[oi] / aux[oi] as f64;
                        let y0 = oy as isize * geom.stride as isize - pad;
                        let x0 = ox as isize * geom.stride as isize - pad;
                        for ky in 0..geom.window as isize {
                            let iy = y0 + ky;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..geom.window as isize {
                                let ix = x0 + kx;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[ibase + iy as usize * w + ix as usize] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx).expect("pool backward shape")
}

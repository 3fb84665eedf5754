//! Dense CPU kernels behind the graph ops: im2col-based 3D convolution
//! and nearest-neighbour upsampling.

use crate::scalar::Scalar;

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 20;

/// Layers with at most this many output channels skip im2col.
const DIRECT_MAX_COUT: usize = 2;

/// Stride-1 layers with at most this many channel pairs use flat
/// shifted accumulation over a padded copy of the input.
const FLAT_MAX_PAIRS: usize = 64;

/// Cubic-kernel 3D convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent along one axis, or `None` if the window does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvDims {
    fn k_rows(&self) -> usize {
        self.cin * self.geom.kernel.pow(3)
    }

    fn in_spatial(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out.iter().product()
    }

    fn use_direct(&self) -> bool {
        self.cout <= DIRECT_MAX_COUT
    }

    fn use_flat(&self) -> bool {
        self.geom.stride == 1 && self.cout * self.cin <= FLAT_MAX_PAIRS
    }

    /// Padded extents `[D+2p, H+2p, W+2p]`.
    fn padded(&self) -> [usize; 3] {
        self.inp.map(|l| l + 2 * self.geom.pad)
    }

    /// Length of the flat output run in padded coordinates: every output
    /// voxel `(z, y, x)` sits at `(z*Hp + y)*Wp + x`, with junk in between.
    fn flat_len(&self) -> usize {
        let [_, hp, wp] = self.padded();
        let [od, oh, ow] = self.out;
        ((od - 1) * hp + oh - 1) * wp + ow
    }

    /// Output rows (fixed depth and height) in the whole volume.
    fn rows(&self) -> usize {
        self.out[0] * self.out[1]
    }

    /// Output rows processed per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        let per_row = self.k_rows() * self.out[2];
        let min_rows = 256usize.div_ceil(self.out[2]);
        (COLS_BUDGET / per_row.max(1)).max(min_rows).clamp(1, self.rows())
    }
}

/// Output columns `[lo, hi)` whose input index `ow*s - p + kw` lies in
/// `[0, iw)`.
fn valid_range(ow_: usize, iw_: usize, s: isize, p: isize, kw: usize) -> (usize, usize) {
    let kw = kw as isize;
    let lo = if p > kw { (p - kw + s - 1) / s } else { 0 };
    let last = iw_ as isize - 1 + p - kw;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(ow_);
    (lo, (hi as usize).clamp(lo, ow_))
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, r0: usize, r1: usize, cols: &mut [T]) {
    let k = d.geom.kernel;
    let s = d.geom.stride as isize;
    let p = d.geom.pad as isize;
    let [id_, ih_, iw_] = d.inp;
    let [_, oh_, ow_] = d.out;
    let ncols = (r1 - r0) * ow_;
    let mut row = 0;
    for ci in 0..d.cin {
        let xc = &x[ci * id_ * ih_ * iw_..(ci + 1) * id_ * ih_ * iw_];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut col = 0;
                    for r in r0..r1 {
                        let (od, oh) = (r / oh_, r % oh_);
                        let iz = od as isize * s - p + kd as isize;
                        {
                            let iy = oh as isize * s - p + kh as isize;
                            let inside = iz >= 0 && iz < id_ as isize && iy >= 0 && iy < ih_ as isize;
                            if !inside {
                                dst[col..col + ow_].fill(T::zero());
                                col += ow_;
                                continue;
                            }
                            let base = (iz as usize * ih_ + iy as usize) * iw_;
                            let (lo, hi) = valid_range(ow_, iw_, s, p, kw);
                            let out = &mut dst[col..col + ow_];
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            if lo < hi {
                                let start = (lo as isize * s - p + kw as isize) as usize;
                                if s == 1 {
                                    out[lo..hi].copy_from_slice(&xc[base + start..base + start + hi - lo]);
                                } else {
                                    let src = &xc[base + start..];
                                    for (j, v) in out[lo..hi].iter_mut().enumerate() {
                                        *v = src[j * s as usize];
                                    }
                                }
                            }
                            col += ow_;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, r0: usize, r1: usize, dx: &mut [T]) {
    let k = d.geom.kernel;
    let s = d.geom.stride as isize;
    let p = d.geom.pad as isize;
    let [id_, ih_, iw_] = d.inp;
    let [_, oh_, ow_] = d.out;
    let ncols = (r1 - r0) * ow_;
    let mut row = 0;
    for ci in 0..d.cin {
        let xc = &mut dx[ci * id_ * ih_ * iw_..(ci + 1) * id_ * ih_ * iw_];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let mut col = 0;
                    for r in r0..r1 {
                        let (od, oh) = (r / oh_, r % oh_);
                        let iz = od as isize * s - p + kd as isize;
                        {
                            let iy = oh as isize * s - p + kh as isize;
                            let inside = iz >= 0 && iz < id_ as isize && iy >= 0 && iy < ih_ as isize;
                            if !inside {
                                col += ow_;
                                continue;
                            }
                            let base = (iz as usize * ih_ + iy as usize) * iw_;
                            let (lo, hi) = valid_range(ow_, iw_, s, p, kw);
                            if lo < hi {
                                let start = base + (lo as isize * s - p + kw as isize) as usize;
                                let part = &src[col + lo..col + hi];
                                if s == 1 {
                                    for (d, &v) in xc[start..start + hi - lo].iter_mut().zip(part) {
                                        *d += v;
                                    }
                                } else {
                                    for (j, &v) in part.iter().enumerate() {
                                        xc[start + j * s as usize] += v;
                                    }
                                }
                            }
                            col += ow_;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Shift-and-accumulate convolution for layers with very few output
/// channels, where the im2col buffer would dominate the cost.
fn direct_forward<T: Scalar>(xb: &[T], w: &[T], yb: &mut [T], d: &ConvDims) {
    for_each_tap(d, |co, ci, tap, xrow, yrow, lo, hi, start| {
        let wv = w[(co * d.cin + ci) * d.geom.kernel.pow(3) + tap];
        let s = d.geom.stride;
        let src = &xb[xrow + start..];
        let dst = &mut yb[yrow + lo..yrow + hi];
        if s == 1 {
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += wv * v;
            }
        } else {
            for (j, o) in dst.iter_mut().enumerate() {
                *o += wv * src[j * s];
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Scalar>(
    xb: &[T],
    w: &[T],
    dyb: &[T],
    mut dxb: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    d: &ConvDims,
) {
    let k3 = d.geom.kernel.pow(3);
    let s = d.geom.stride;
    for_each_tap(d, |co, ci, tap, xrow, yrow, lo, hi, start| {
        let widx = (co * d.cin + ci) * k3 + tap;
        let g = &dyb[yrow + lo..yrow + hi];
        if let Some(dw) = dw.as_deref_mut() {
            let src = &xb[xrow + start..];
            let acc: T = if s == 1 {
                g.iter().zip(src).map(|(&a, &b)| a * b).sum()
            } else {
                g.iter().enumerate().map(|(j, &a)| a * src[j * s]).sum()
            };
            dw[widx] += acc;
        }
        if let Some(dx) = dxb.as_deref_mut() {
            let wv = w[widx];
            let dst = &mut dx[xrow + start..];
            if s == 1 {
                for (o, &v) in dst.iter_mut().zip(g) {
                    *o += wv * v;
                }
            } else {
                for (j, &v) in g.iter().enumerate() {
                    dst[j * s] += wv * v;
                }
            }
        }
    });
}

/// Copies each channel of `x` into a zero-padded `[Dp, Hp, Wp]` block.
fn pad_channels<T: Scalar>(x: &[T], channels: usize, d: &ConvDims) -> Vec<T> {
    let [id_, ih_, iw_] = d.inp;
    let [dp, hp, wp] = d.padded();
    let p = d.geom.pad;
    let mut out = vec![T::zero(); channels * dp * hp * wp];
    for c in 0..channels {
        for z in 0..id_ {
            for y in 0..ih_ {
                let src = &x[((c * id_ + z) * ih_ + y) * iw_..][..iw_];
                let at = ((c * dp + z + p) * hp + y + p) * wp + p;
                out[at..at + iw_].copy_from_slice(src);
            }
        }
    }
    out
}

/// Offsets of every kernel tap in the padded flat layout.
fn tap_offsets(d: &ConvDims) -> Vec<usize> {
    let k = d.geom.kernel;
    let [_, hp, wp] = d.padded();
    let mut offs = Vec::with_capacity(k * k * k);
    for kd in 0..k {
        for kh in 0..k {
            for kw in 0..k {
                offs.push((kd * hp + kh) * wp + kw);
            }
        }
    }
    offs
}

fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `y[i] += Σ_j w[j] * x[i + j]` for a row of consecutive taps.
fn shifted_axpy<T: Scalar>(w: &[T], x: &[T], y: &mut [T]) {
    let n = y.len();
    match *w {
        [a, b, c] => {
            let (x0, x1, x2) = (&x[..n], &x[1..n + 1], &x[2..n + 2]);
            for i in 0..n {
                y[i] += a * x0[i] + b * x1[i] + c * x2[i];
            }
        }
        [a, b, c, e] => {
            let (x0, x1, x2, x3) = (&x[..n], &x[1..n + 1], &x[2..n + 2], &x[3..n + 3]);
            for i in 0..n {
                y[i] += a * x0[i] + b * x1[i] + c * x2[i] + e * x3[i];
            }
        }
        _ => {
            for (j, &wv) in w.iter().enumerate() {
                axpy(wv, &x[j..j + n], y);
            }
        }
    }
}

/// `out[j] += Σ_i g[i] * x[i + j]` for a row of consecutive taps.
fn shifted_dots<T: Scalar>(g: &[T], x: &[T], out: &mut [T]) {
    const LANES: usize = 8;
    let n = g.len();
    let full = n / LANES * LANES;
    for (j, o) in out.iter_mut().enumerate() {
        let xs = &x[j..j + n];
        let mut acc = [T::zero(); LANES];
        for (gc, xc) in g[..full].chunks_exact(LANES).zip(xs[..full].chunks_exact(LANES)) {
            for l in 0..LANES {
                acc[l] += gc[l] * xc[l];
            }
        }
        let tail: T = g[full..].iter().zip(&xs[full..]).map(|(&a, &b)| a * b).sum();
        *o += acc.iter().copied().sum::<T>() + tail;
    }
}

fn flat_forward<T: Scalar>(xb: &[T], w: &[T], yb: &mut [T], d: &ConvDims) {
    let xp = pad_channels(xb, d.cin, d);
    let np: usize = d.padded().iter().product();
    let [_, hp, wp] = d.padded();
    let [od_, oh_, ow_] = d.out;
    let len = d.flat_len();
    let offs = tap_offsets(d);
    let k3 = offs.len();
    let k = d.geom.kernel;
    let mut acc = vec![T::zero(); len];
    for co in 0..d.cout {
        acc.fill(T::zero());
        for ci in 0..d.cin {
            let xc = &xp[ci * np..(ci + 1) * np];
            let wrow = &w[(co * d.cin + ci) * k3..][..k3];
            for (ws, offs) in wrow.chunks_exact(k).zip(offs.chunks_exact(k)) {
                shifted_axpy(ws, &xc[offs[0]..offs[0] + len + k - 1], &mut acc);
            }
        }
        let yc = &mut yb[co * od_ * oh_ * ow_..][..od_ * oh_ * ow_];
        for z in 0..od_ {
            for y in 0..oh_ {
                yc[(z * oh_ + y) * ow_..][..ow_].copy_from_slice(&acc[(z * hp + y) * wp..][..ow_]);
            }
        }
    }
}

fn flat_backward<T: Scalar>(
    xb: &[T],
    w: &[T],
    dyb: &[T],
    dxb: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    d: &ConvDims,
) {
    let [dp, hp, wp] = d.padded();
    let np = dp * hp * wp;
    let [od_, oh_, ow_] = d.out;
    let len = d.flat_len();
    let offs = tap_offsets(d);
    let k3 = offs.len();
    let k = d.geom.kernel;
    // Output gradient laid out like the forward accumulator (junk slots
    // zero), with k-1 zeros of margin on both sides.
    let margin = k - 1;
    let glen = len + 2 * margin;
    let mut g = vec![T::zero(); d.cout * glen];
    for co in 0..d.cout {
        let dyc = &dyb[co * od_ * oh_ * ow_..][..od_ * oh_ * ow_];
        let gc = &mut g[co * glen + margin..][..len];
        for z in 0..od_ {
            for y in 0..oh_ {
                gc[(z * hp + y) * wp..][..ow_].copy_from_slice(&dyc[(z * oh_ + y) * ow_..][..ow_]);
            }
        }
    }
    if let Some(dw) = dw {
        let xp = pad_channels(xb, d.cin, d);
        for co in 0..d.cout {
            let gc = &g[co * glen + margin..][..len];
            for ci in 0..d.cin {
                let xc = &xp[ci * np..(ci + 1) * np];
                let drow = &mut dw[(co * d.cin + ci) * k3..][..k3];
                for (dv, offs) in drow.chunks_exact_mut(k).zip(offs.chunks_exact(k)) {
                    shifted_dots(gc, &xc[offs[0]..offs[0] + len + k - 1], dv);
                }
            }
        }
    }
    if let Some(dx) = dxb {
        let [id_, ih_, iw_] = d.inp;
        let p = d.geom.pad;
        let mut acc = vec![T::zero(); np];
        let mut wr = vec![T::zero(); k];
        for ci in 0..d.cin {
            acc.fill(T::zero());
            for co in 0..d.cout {
                let gc = &g[co * glen..(co + 1) * glen];
                let wrow = &w[(co * d.cin + ci) * k3..][..k3];
                for (ws, offs) in wrow.chunks_exact(k).zip(offs.chunks_exact(k)) {
                    // Reversed taps over the margined gradient scatter
                    // all k shifts in one pass.
                    for (r, &v) in wr.iter_mut().zip(ws.iter().rev()) {
                        *r = v;
                    }
                    shifted_axpy(&wr, gc, &mut acc[offs[0]..offs[0] + len + k - 1]);
                }
            }
            let dxc = &mut dx[ci * id_ * ih_ * iw_..][..id_ * ih_ * iw_];
            for z in 0..id_ {
                for y in 0..ih_ {
                    let src = &acc[((z + p) * hp + y + p) * wp + p..][..iw_];
                    for (o, &v) in dxc[(z * ih_ + y) * iw_..][..iw_].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Visits every (output channel, input channel, kernel tap, output row)
/// with the valid column range of that row.
fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
    let k = d.geom.kernel;
    let s = d.geom.stride as isize;
    let p = d.geom.pad as isize;
    let [id_, ih_, iw_] = d.inp;
    let [od_, oh_, ow_] = d.out;
    let sin = id_ * ih_ * iw_;
    let sout = od_ * oh_ * ow_;
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let tap = (kd * k + kh) * k + kw;
                        let (lo, hi) = valid_range(ow_, iw_, s, p, kw);
                        if lo >= hi {
                            continue;
                        }
                        let start = (lo as isize * s - p + kw as isize) as usize;
                        for od in 0..od_ {
                            let iz = od as isize * s - p + kd as isize;
                            if iz < 0 || iz >= id_ as isize {
                                continue;
                            }
                            for oh in 0..oh_ {
                                let iy = oh as isize * s - p + kh as isize;
                                if iy < 0 || iy >= ih_ as isize {
                                    continue;
                                }
                                let xrow = ci * sin + (iz as usize * ih_ + iy as usize) * iw_;
                                let yrow = co * sout + (od * oh_ + oh) * ow_;
                                f(co, ci, tap, xrow, yrow, lo, hi, start);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = W * x[n]` for every sample; `y` must be zero-initialised or
/// will be overwritten.
pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], y: &mut [T], n: usize, d: &ConvDims) {
    let kr = d.k_rows();
    let (sin, sout) = (d.in_spatial(), d.out_spatial());
    let chunk = d.rows_per_chunk();
    let ow = d.out[2];
    let mut cols = vec![T::zero(); kr * chunk * ow];
    for b in 0..n {
        let xb = &x[b * d.cin * sin..(b + 1) * d.cin * sin];
        let yb = &mut y[b * d.cout * sout..(b + 1) * d.cout * sout];
        if d.use_flat() {
            flat_forward(xb, w, yb, d);
            continue;
        }
        if d.use_direct() {
            yb.fill(T::zero());
            direct_forward(xb, w, yb, d);
            continue;
        }
        let mut r0 = 0;
        while r0 < d.rows() {
            let r1 = (r0 + chunk).min(d.rows());
            let ncols = (r1 - r0) * ow;
            let cols = &mut cols[..kr * ncols];
            im2col(xb, d, r0, r1, cols);
            // SAFETY: w is cout×kr, cols is kr×ncols, the destination is the
            // column window [r0*ow, r1*ow) of the cout×sout output.
            unsafe {
                T::gemm(
                    d.cout,
                    kr,
                    ncols,
                    T::one(),
                    w.as_ptr(),
                    kr as isize,
                    1,
                    cols.as_ptr(),
                    ncols as isize,
                    1,
                    T::zero(),
                    yb.as_mut_ptr().add(r0 * ow),
                    sout as isize,
                    1,
                );
            }
            r0 = r1;
        }
    }
}

/// Accumulates input and/or weight gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    n: usize,
    d: &ConvDims,
) {
    let kr = d.k_rows();
    let (sin, sout) = (d.in_spatial(), d.out_spatial());
    let chunk = d.rows_per_chunk();
    let ow = d.out[2];
    let mut cols = vec![T::zero(); kr * chunk * ow];
    for b in 0..n {
        let xb = &x[b * d.cin * sin..(b + 1) * d.cin * sin];
        let dyb = &dy[b * d.cout * sout..(b + 1) * d.cout * sout];
        if d.use_flat() || d.use_direct() {
            let dxb = dx.as_deref_mut().map(|dx| &mut dx[b * d.cin * sin..(b + 1) * d.cin * sin]);
            if d.use_flat() {
                flat_backward(xb, w, dyb, dxb, dw.as_deref_mut(), d);
            } else {
                direct_backward(xb, w, dyb, dxb, dw.as_deref_mut(), d);
            }
            continue;
        }
        let mut r0 = 0;
        while r0 < d.rows() {
            let r1 = (r0 + chunk).min(d.rows());
            let ncols = (r1 - r0) * ow;
            let cols = &mut cols[..kr * ncols];
            let dyc = dyb[r0 * ow..].as_ptr();
            if let Some(dw) = dw.as_deref_mut() {
                im2col(xb, d, r0, r1, cols);
                // SAFETY: dy window is cout×ncols with row stride sout;
                // cols^T is ncols×kr; dw is cout×kr.
                unsafe {
                    T::gemm(
                        d.cout,
                        ncols,
                        kr,
                        T::one(),
                        dyc,
                        sout as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        ncols as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        kr as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                // SAFETY: w^T is kr×cout; dy window is cout×ncols.
                unsafe {
                    T::gemm(
                        kr,
                        d.cout,
                        ncols,
                        T::one(),
                        w.as_ptr(),
                        1,
                        kr as isize,
                        dyc,
                        sout as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
                let dxb = &mut dx[b * d.cin * sin..(b + 1) * d.cin * sin];
                col2im(cols, d, r0, r1, dxb);
            }
            r0 = r1;
        }
    }
}

/// Nearest-neighbour 2x upscale of `[rows, D, H, W]` blocks.
pub(crate) fn upsample2x<T: Scalar>(x: &[T], rows: usize, dims: [usize; 3], y: &mut [T]) {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    for r in 0..rows {
        let xs = &x[r * d * h * w..(r + 1) * d * h * w];
        let ys = &mut y[r * d2 * h2 * w2..(r + 1) * d2 * h2 * w2];
        for z in 0..d2 {
            for yy in 0..h2 {
                let src = &xs[((z / 2) * h + yy / 2) * w..((z / 2) * h + yy / 2 + 1) * w];
                let dst = &mut ys[(z * h2 + yy) * w2..(z * h2 + yy + 1) * w2];
                for (xx, v) in dst.iter_mut().enumerate() {
                    *v = src[xx / 2];
                }
            }
        }
    }
}

/// Adjoint of [`upsample2x`]: sums each 2x2x2 block.
pub(crate) fn upsample2x_backward<T: Scalar>(dy: &[T], rows: usize, dims: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    for r in 0..rows {
        let ys = &dy[r * d2 * h2 * w2..(r + 1) * d2 * h2 * w2];
        let xs = &mut dx[r * d * h * w..(r + 1) * d * h * w];
        for z in 0..d2 {
            for yy in 0..h2 {
                let src = &ys[(z * h2 + yy) * w2..(z * h2 + yy + 1) * w2];
                let dst = &mut xs[((z / 2) * h + yy / 2) * w..((z / 2) * h + yy / 2 + 1) * w];
                for (xx, &v) in src.iter().enumerate() {
                    dst[xx / 2] += v;
                }
            }
        }
    }
}

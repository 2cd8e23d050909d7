//! Raw convolution loops over single planes.
//!
//! All routines share one index relation: output `(oy, ox)` reads input
//! `(oy * stride + ky - pad, ox * stride + kx - pad)`, skipping taps that fall
//! into the zero padding.

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < k || span_w < k || stride == 0 {
            return None;
        }
        Some(Self {
            h,
            w,
            ho: (span_h - k) / stride + 1,
            wo: (span_w - k) / stride + 1,
            stride,
            pad,
        })
    }

    /// Output index range along one axis whose input coordinate is in bounds.
    #[inline]
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as i64;
        let off = k as i64 - self.pad as i64;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n_in - 1
        let top = n_in as i64 - 1 - off;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(n_out as i64);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    #[inline]
    fn rows(&self, ky: usize) -> (usize, usize) {
        self.valid(ky, self.h, self.ho)
    }

    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        self.valid(kx, self.w, self.wo)
    }
}

/// `out[oy, ox] += weight * inp[iy, ix]` for one kernel tap.
#[inline]
pub(crate) fn tap_forward(g: &Geometry, out: &mut [f64], inp: &[f64], weight: f64, ky: usize, kx: usize) {
    if weight == 0.0 {
        return;
    }
    let (y0, y1) = g.rows(ky);
    let (x0, x1) = g.cols(kx);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = oy * g.stride + ky - g.pad;
        let orow = &mut out[oy * g.wo..(oy + 1) * g.wo];
        let irow = &inp[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            let ix0 = x0 + kx - g.pad;
            let src = &irow[ix0..ix0 + (x1 - x0)];
            for (o, &i) in orow[x0..x1].iter_mut().zip(src) {
                *o += weight * i;
            }
        } else {
            for ox in x0..x1 {
                orow[ox] += weight * irow[ox * g.stride + kx - g.pad];
            }
        }
    }
}

/// `dinp[iy, ix] += weight * grad[oy, ox]` for one kernel tap.
#[inline]
pub(crate) fn tap_backward_input(
    g: &Geometry,
    dinp: &mut [f64],
    grad: &[f64],
    weight: f64,
    ky: usize,
    kx: usize,
) {
    if weight == 0.0 {
        return;
    }
    let (y0, y1) = g.rows(ky);
    let (x0, x1) = g.cols(kx);
    if x0 >= x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = oy * g.stride + ky - g.pad;
        let grow = &grad[oy * g.wo..(oy + 1) * g.wo];
        let drow = &mut dinp[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            let ix0 = x0 + kx - g.pad;
            for (d, &gv) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                *d += weight * gv;
            }
        } else {
            for ox in x0..x1 {
                drow[ox * g.stride + kx - g.pad] += weight * grow[ox];
            }
        }
    }
}

/// `sum over (oy, ox) of grad[oy, ox] * inp[iy, ix]` for one kernel tap.
#[inline]
pub(crate) fn tap_dot(g: &Geometry, grad: &[f64], inp: &[f64], ky: usize, kx: usize) -> f64 {
    let (y0, y1) = g.rows(ky);
    let (x0, x1) = g.cols(kx);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for oy in y0..y1 {
        let iy = oy * g.stride + ky - g.pad;
        let grow = &grad[oy * g.wo..(oy + 1) * g.wo];
        let irow = &inp[iy * g.w..(iy + 1) * g.w];
        if g.stride == 1 {
            let ix0 = x0 + kx - g.pad;
            acc += grow[x0..x1]
                .iter()
                .zip(&irow[ix0..ix0 + (x1 - x0)])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        } else {
            for ox in x0..x1 {
                acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_dims() {
        let g = Geometry::new(8, 8, 3, 1, 1).unwrap();
        assert_eq!((g.ho, g.wo), (8, 8));
        let g = Geometry::new(8, 8, 2, 2, 0).unwrap();
        assert_eq!((g.ho, g.wo), (4, 4));
        let g = Geometry::new(7, 5, 3, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (4, 3));
        assert!(Geometry::new(2, 2, 3, 1, 0).is_none());
    }

    #[test]
    fn valid_ranges_match_bruteforce() {
        for &(n, k, s, p) in &[(8, 3, 1, 1), (7, 3, 2, 1), (5, 2, 2, 0), (4, 5, 1, 2), (9, 3, 3, 2)] {
            let g = Geometry::new(n, n, k, s, p).unwrap();
            for kk in 0..k {
                let (lo, hi) = g.valid(kk, n, g.wo);
                for o in 0..g.wo {
                    let i = (o * s + kk) as i64 - p as i64;
                    let inside = i >= 0 && i < n as i64;
                    assert_eq!(inside, o >= lo && o < hi, "n={n} k={k} s={s} p={p} kk={kk} o={o}");
                }
            }
        }
    }
}

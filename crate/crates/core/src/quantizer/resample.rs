//! Linear resampling operators between token grids, stored as dense
//! `(out_h*out_w) x (in_h*in_w)` matrices so they can be applied both to plain
//! buffers and, through a matmul, to tensors that carry gradients.

/// 1-D area weights: each output cell averages the input cells it overlaps.
fn area_1d(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let mut taps = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(in_len);
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / ratio));
                }
            }
            taps
        })
        .collect()
}

/// 1-D linear interpolation with half-pixel centers, clamped at the borders.
fn linear_1d(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let frac = src - i0 as f64;
            if frac == 0.0 || i0 + 1 >= in_len {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i0 + 1, frac)]
            }
        })
        .collect()
}

fn outer(
    rows: &[Vec<(usize, f64)>],
    cols: &[Vec<(usize, f64)>],
    in_w: usize,
) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for ry in rows {
        for cx in cols {
            let mut taps = Vec::with_capacity(ry.len() * cx.len());
            for &(y, wy) in ry {
                for &(x, wx) in cx {
                    taps.push((y * in_w + x, wy * wx));
                }
            }
            out.push(taps);
        }
    }
    out
}

/// Sparse resampling operator between two grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    taps: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    pub fn area(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let taps = outer(&area_1d(in_hw.0, out_hw.0), &area_1d(in_hw.1, out_hw.1), in_hw.1);
        Self { in_hw, out_hw, taps }
    }

    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let taps = outer(
            &linear_1d(in_hw.0, out_hw.0),
            &linear_1d(in_hw.1, out_hw.1),
            in_hw.1,
        );
        Self { in_hw, out_hw, taps }
    }

    pub fn in_len(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }

    pub fn out_len(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    /// Applies to position-major rows: `input` is `in_len x dim`, result `out_len x dim`.
    pub fn apply_rows(&self, input: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len() * dim];
        for (o, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[o * dim..(o + 1) * dim];
            for &(i, w) in taps {
                for (d, s) in dst.iter_mut().zip(&input[i * dim..(i + 1) * dim]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Dense `out_len x in_len` matrix, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.in_len();
        let mut m = vec![0.0; self.out_len() * n];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, w) in taps {
                m[o * n + i] += w;
            }
        }
        m
    }
}

//! Direct 1-D convolution kernels and their adjoints.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub lin: usize,
    pub lout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output length of a strided, padded convolution.
pub fn conv_out_len(lin: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || lin + 2 * pad < k {
        return None;
    }
    Some((lin + 2 * pad - k) / stride + 1)
}

/// Output length of a transposed convolution.
pub fn conv_transpose_out_len(lin: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || lin == 0 {
        return None;
    }
    ((lin - 1) * stride + k).checked_sub(2 * pad).filter(|&l| l > 0)
}

impl ConvGeom {
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]`.
    pub fn forward(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[batch, cin, lin], &[cout, wcin, k]) = (x, w) else {
            return None;
        };
        if cin != wcin || k == 0 {
            return None;
        }
        let lout = conv_out_len(lin, k, stride, pad)?;
        Some(Self {
            batch,
            cin,
            cout,
            lin,
            lout,
            k,
            stride,
            pad,
        })
    }

    /// `x: [B, Cin, L]`, `w: [Cin, Cout, K]`.
    pub fn transposed(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (&[batch, cin, lin], &[wcin, cout, k]) = (x, w) else {
            return None;
        };
        if cin != wcin || k == 0 {
            return None;
        }
        let lout = conv_transpose_out_len(lin, k, stride, pad)?;
        Some(Self {
            batch,
            cin,
            cout,
            lin,
            lout,
            k,
            stride,
            pad,
        })
    }

    /// Input position touched by output `t` and tap `j` of a forward conv.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        (t * self.stride + j)
            .checked_sub(self.pad)
            .filter(|&p| p < self.lin)
    }

    /// Output position written by input `i` and tap `j` of a transposed conv.
    #[inline]
    fn dst(&self, i: usize, j: usize) -> Option<usize> {
        (i * self.stride + j)
            .checked_sub(self.pad)
            .filter(|&p| p < self.lout)
    }
}

pub(crate) fn conv1d(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.lout];
    for bi in 0..g.batch {
        for o in 0..g.cout {
            let row = &mut out[(bi * g.cout + o) * g.lout..][..g.lout];
            if let Some(b) = b {
                row.fill(b[o]);
            }
            for c in 0..g.cin {
                let xr = &x[(bi * g.cin + c) * g.lin..][..g.lin];
                let wr = &w[(o * g.cin + c) * g.k..][..g.k];
                for (t, r) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &wv) in wr.iter().enumerate() {
                        if let Some(p) = g.src(t, j) {
                            acc += wv * xr[p];
                        }
                    }
                    *r += acc;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for a forward conv given output gradient `gy`.
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for bi in 0..g.batch {
        for o in 0..g.cout {
            let gr = &gy[(bi * g.cout + o) * g.lout..][..g.lout];
            db[o] += gr.iter().sum::<f64>();
            for c in 0..g.cin {
                let xoff = (bi * g.cin + c) * g.lin;
                let woff = (o * g.cin + c) * g.k;
                for (t, &gv) in gr.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    for j in 0..g.k {
                        if let Some(p) = g.src(t, j) {
                            dx[xoff + p] += w[woff + j] * gv;
                            dw[woff + j] += x[xoff + p] * gv;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_transpose1d(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.lout];
    for bi in 0..g.batch {
        for o in 0..g.cout {
            let row = &mut out[(bi * g.cout + o) * g.lout..][..g.lout];
            if let Some(b) = b {
                row.fill(b[o]);
            }
            for c in 0..g.cin {
                let xr = &x[(bi * g.cin + c) * g.lin..][..g.lin];
                let wr = &w[(c * g.cout + o) * g.k..][..g.k];
                for (i, &xv) in xr.iter().enumerate() {
                    for (j, &wv) in wr.iter().enumerate() {
                        if let Some(p) = g.dst(i, j) {
                            row[p] += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose1d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for bi in 0..g.batch {
        for o in 0..g.cout {
            let gr = &gy[(bi * g.cout + o) * g.lout..][..g.lout];
            db[o] += gr.iter().sum::<f64>();
            for c in 0..g.cin {
                let xoff = (bi * g.cin + c) * g.lin;
                let woff = (c * g.cout + o) * g.k;
                for i in 0..g.lin {
                    let xv = x[xoff + i];
                    let mut acc = 0.0;
                    for j in 0..g.k {
                        if let Some(p) = g.dst(i, j) {
                            acc += w[woff + j] * gr[p];
                            dw[woff + j] += xv * gr[p];
                        }
                    }
                    dx[xoff + i] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

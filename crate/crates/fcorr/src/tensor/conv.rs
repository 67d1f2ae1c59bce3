//! Spatial ops on (B, C, H, W) tensors: convolution, bilinear resize,
//! adaptive average pooling, and window cropping.

use super::ops::kernels::{mm, transpose};
use super::Tensor;
use crate::error::{Error, Result};

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Unrolled patches, laid out as (c*kh*kw, oh*ow) for one image.
fn im2col_t(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let cols = oh * ow;
    let mut out = vec![0.0; c * kh * kw * cols];
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = iy as usize * w;
                    let dst_base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[dst_base + ox] = plane[src_base + ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Scatter-add of the unrolled layout back into an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_t(
    cols_grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let cols = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_base + ix as usize] += src[src_base + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution: x (b,cin,h,w) * kernel (cout,cin,kh,kw) [+ bias (cout)].
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (b, cin, h, w) = dims4("conv2d", self)?;
        let ks = kernel.shape();
        if ks.len() != 4 || ks[1] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} does not fit input {:?}", ks, self.shape()),
            ));
        }
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs cout {}", bt.shape(), cout),
                ));
            }
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} stride {} pad {} too big for {}x{}", kh, kw, stride, pad, h, w),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let cols = oh * ow;
        let mut data = vec![0.0; b * cout * cols];
        let mut cols_cache: Vec<Vec<f64>> = Vec::with_capacity(b);
        for bi in 0..b {
            let ct = im2col_t(
                &self.data()[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            );
            // (cout, ckk) @ (ckk, cols)
            mm(
                kernel.data(),
                &ct,
                cout,
                ckk,
                cols,
                &mut data[bi * cout * cols..(bi + 1) * cout * cols],
            );
            cols_cache.push(ct);
        }
        if let Some(bt) = bias {
            let bd = bt.data();
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * cols;
                    for v in &mut data[base..base + cols] {
                        *v += bd[co];
                    }
                }
            }
        }
        let out_shape = vec![b, cout, oh, ow];
        let mut inputs: Vec<&Tensor> = vec![self, kernel];
        if let Some(bt) = bias {
            inputs.push(bt);
        }
        let parents: Vec<Tensor> = inputs
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| (*t).clone())
            .collect();
        if parents.is_empty() {
            return Tensor::from_op_const("conv2d", out_shape, data);
        }
        let x = self.clone();
        let k = kernel.clone();
        let bias_t = bias.cloned();
        Tensor::from_op(
            "conv2d",
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                if k.requires_grad() {
                    let mut dk = vec![0.0; cout * ckk];
                    for bi in 0..b {
                        // g_b (cout, cols) @ cols_t^T (cols, ckk)
                        let ct = &cols_cache[bi];
                        let c_t = transpose(ct, ckk, cols);
                        mm(&g[bi * cout * cols..(bi + 1) * cout * cols], &c_t, cout, cols, ckk, &mut dk);
                    }
                    k.accumulate_grad(&dk);
                }
                if let Some(bt) = &bias_t {
                    if bt.requires_grad() {
                        let mut db = vec![0.0; cout];
                        for bi in 0..b {
                            for co in 0..cout {
                                let base = (bi * cout + co) * cols;
                                db[co] += g[base..base + cols].iter().sum::<f64>();
                            }
                        }
                        bt.accumulate_grad(&db);
                    }
                }
                if x.requires_grad() {
                    let kt = transpose(k.data(), cout, ckk);
                    let mut dx = vec![0.0; b * cin * h * w];
                    for bi in 0..b {
                        let mut dcols = vec![0.0; ckk * cols];
                        mm(&kt, &g[bi * cout * cols..(bi + 1) * cout * cols], ckk, cout, cols, &mut dcols);
                        col2im_t(
                            &dcols,
                            cin,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                            &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
                        );
                    }
                    x.accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("bilinear_resize", self)?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("bilinear_resize", "zero output dim".to_string()));
        }
        // Per-output-pixel taps are shared by every channel and batch.
        let taps_y = resize_taps(h, oh);
        let taps_x = resize_taps(w, ow);
        let mut data = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let plane = &self.data()[bc * h * w..(bc + 1) * h * w];
            let out_plane = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, ty) = taps_y[oy];
                for ox in 0..ow {
                    let (x0, x1, tx) = taps_x[ox];
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    out_plane[oy * ow + ox] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                        + ty * ((1.0 - tx) * v10 + tx * v11);
                }
            }
        }
        let out_shape = vec![b, c, oh, ow];
        if !self.requires_grad() {
            return Tensor::from_op_const("bilinear_resize", out_shape, data);
        }
        let x = self.clone();
        Tensor::from_op(
            "bilinear_resize",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let gp = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dp = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1, ty) = taps_y[oy];
                        for ox in 0..ow {
                            let (x0, x1, tx) = taps_x[ox];
                            let gv = gp[oy * ow + ox];
                            dp[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                            dp[y0 * w + x1] += gv * (1.0 - ty) * tx;
                            dp[y1 * w + x0] += gv * ty * (1.0 - tx);
                            dp[y1 * w + x1] += gv * ty * tx;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }),
        )
    }

    /// Adaptive average pooling to a bins x bins grid. When bins exceeds the
    /// input side, regions overlap (each stays at least one cell wide).
    pub fn avg_pool_grid(&self, bins: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("avg_pool_grid", self)?;
        if bins == 0 {
            return Err(Error::shape("avg_pool_grid", "zero bins".to_string()));
        }
        let ry = pool_regions(h, bins);
        let rx = pool_regions(w, bins);
        let mut data = vec![0.0; b * c * bins * bins];
        for bc in 0..b * c {
            let plane = &self.data()[bc * h * w..(bc + 1) * h * w];
            let out_plane = &mut data[bc * bins * bins..(bc + 1) * bins * bins];
            for (yi, &(ys, ye)) in ry.iter().enumerate() {
                for (xi, &(xs, xe)) in rx.iter().enumerate() {
                    let mut s = 0.0;
                    for y in ys..ye {
                        for x in xs..xe {
                            s += plane[y * w + x];
                        }
                    }
                    out_plane[yi * bins + xi] = s / ((ye - ys) * (xe - xs)) as f64;
                }
            }
        }
        let out_shape = vec![b, c, bins, bins];
        if !self.requires_grad() {
            return Tensor::from_op_const("avg_pool_grid", out_shape, data);
        }
        let x = self.clone();
        Tensor::from_op(
            "avg_pool_grid",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    let gp = &g[bc * bins * bins..(bc + 1) * bins * bins];
                    let dp = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for (yi, &(ys, ye)) in ry.iter().enumerate() {
                        for (xi, &(xs, xe)) in rx.iter().enumerate() {
                            let gv = gp[yi * bins + xi] / ((ye - ys) * (xe - xs)) as f64;
                            for y in ys..ye {
                                for x in xs..xe {
                                    dp[y * w + x] += gv;
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }),
        )
    }

    /// w x w window starting at cell (r0, c0), zero-filled out of bounds.
    /// Input must have batch dim 1.
    pub fn crop2d(&self, r0: isize, c0: isize, win: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4("crop2d", self)?;
        if b != 1 {
            return Err(Error::shape("crop2d", format!("batch must be 1, got {}", b)));
        }
        let mut data = vec![0.0; c * win * win];
        for ci in 0..c {
            let plane = &self.data()[ci * h * w..(ci + 1) * h * w];
            for i in 0..win {
                let y = r0 + i as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in 0..win {
                    let x = c0 + j as isize;
                    if x >= 0 && x < w as isize {
                        data[(ci * win + i) * win + j] = plane[y as usize * w + x as usize];
                    }
                }
            }
        }
        let out_shape = vec![1, c, win, win];
        if !self.requires_grad() {
            return Tensor::from_op_const("crop2d", out_shape, data);
        }
        let x = self.clone();
        Tensor::from_op(
            "crop2d",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for i in 0..win {
                        let y = r0 + i as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..win {
                            let xx = c0 + j as isize;
                            if xx >= 0 && xx < w as isize {
                                dx[(ci * h + y as usize) * w + xx as usize] +=
                                    g[(ci * win + i) * win + j];
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }),
        )
    }
}

impl Tensor {
    /// Bilinear point sampling: read a (1,C,H,W) map at continuous cell
    /// coordinates (x right, y down, cell centers at integer + 0.5) and
    /// return an (N, C) matrix. Coordinates are edge-clamped.
    pub fn sample_points(&self, points: &[(f64, f64)]) -> Result<Tensor> {
        let (b, c, h, w) = dims4("sample_points", self)?;
        if b != 1 {
            return Err(Error::shape("sample_points", format!("batch must be 1, got {}", b)));
        }
        let n = points.len();
        // Shared taps per point: corner indices and blend weights.
        let taps: Vec<(usize, usize, usize, usize, f64, f64)> = points
            .iter()
            .map(|&(x, y)| {
                let sx = (x - 0.5).max(0.0).min((w - 1) as f64);
                let sy = (y - 0.5).max(0.0).min((h - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                (x0, x1, y0, y1, sx - x0 as f64, sy - y0 as f64)
            })
            .collect();
        let src = self.data();
        let mut data = vec![0.0; n * c];
        for (i, &(x0, x1, y0, y1, tx, ty)) in taps.iter().enumerate() {
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let v = (1.0 - ty) * ((1.0 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1])
                    + ty * ((1.0 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1]);
                data[i * c + ch] = v;
            }
        }
        if !self.requires_grad() {
            return Tensor::from_op_const("sample_points", vec![n, c], data);
        }
        let x = self.clone();
        Tensor::from_op(
            "sample_points",
            vec![n, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for (i, &(x0, x1, y0, y1, tx, ty)) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let gv = g[i * c + ch];
                        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        plane[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                        plane[y0 * w + x1] += gv * (1.0 - ty) * tx;
                        plane[y1 * w + x0] += gv * ty * (1.0 - tx);
                        plane[y1 * w + x1] += gv * ty * tx;
                    }
                }
                x.accumulate_grad(&dx);
            }),
        )
    }
}

/// Source taps for one output coordinate under half-pixel-center resizing.
fn resize_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * ratio - 0.5;
            let s = s.max(0.0).min((in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Half-open row/col ranges for adaptive pooling; never empty.
fn pool_regions(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| {
            let s = (i * len / bins).min(len - 1);
            let e = ((i + 1) * len / bins).max(s + 1).min(len);
            (s, e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_preserves_input() {
        // all-ones 1x1x3x3 input, identity-center 1x1x3x3 kernel, pad 1
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernel = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let y = x.conv2d(&kernel, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_stride_and_pad_shapes() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let k = Tensor::zeros(&[5, 3, 3, 3]);
        let y = x.conv2d(&k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        // Independent naive convolution as the oracle.
        let mut xv = Vec::new();
        for i in 0..2 * 2 * 5 * 5 {
            xv.push(((i * 37 % 11) as f64 - 5.0) / 3.0);
        }
        let mut kv = Vec::new();
        for i in 0..3 * 2 * 3 * 3 {
            kv.push(((i * 17 % 7) as f64 - 3.0) / 2.0);
        }
        let x = Tensor::from_vec(&[2, 2, 5, 5], xv.clone()).unwrap();
        let k = Tensor::from_vec(&[3, 2, 3, 3], kv.clone()).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.1, -0.5, 0.25]).unwrap();
        let y = x.conv2d(&k, Some(&bias), 2, 1).unwrap();
        let (h, w, kh, kw, s, p) = (5usize, 5usize, 3usize, 3usize, 2usize, 1usize);
        let (oh, ow) = ((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1);
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..2 {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += xv[((b * 2 + ci) * h + iy as usize) * w + ix as usize]
                                            * kv[((co * 2 + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 3 + co) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {},{},{},{}", b, co, oy, ox);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_constant_field() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let y = x.bilinear_resize(7, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn crop_is_pure_slicing() {
        let data: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64).collect();
        let x = Tensor::from_vec(&[1, 2, 4, 4], data).unwrap();
        let y = x.crop2d(1, 2, 2).unwrap();
        // rows 1..3, cols 2..4 of each channel
        assert_eq!(y.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
    }

    #[test]
    fn crop_zero_fills_out_of_bounds() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = x.crop2d(-1, -1, 3).unwrap();
        let expect = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn sample_points_reads_cell_centers_exactly() {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let x = Tensor::from_vec(&[1, 2, 3, 4], data).unwrap();
        // cell (row 1, col 2) center is (2.5, 1.5)
        let s = x.sample_points(&[(2.5, 1.5)]).unwrap();
        assert_eq!(s.shape(), &[1, 2]);
        assert_eq!(s.data()[0], 6.0);
        assert_eq!(s.data()[1], 18.0);
        // midpoint between two horizontal neighbors blends them
        let m = x.sample_points(&[(2.0, 0.5)]).unwrap();
        assert_eq!(m.data()[0], 1.5);
    }

    #[test]
    fn sample_points_gradient_matches_fd() {
        use crate::tensor::grad_check;
        let x = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(|v| (v as f64) * 0.1 - 0.4).collect())
            .unwrap();
        let pts = vec![(0.7, 1.9), (2.4, 0.6), (1.5, 1.5)];
        let report =
            grad_check(|t| t.sample_points(&pts)?.mul(&t.sample_points(&pts)?)?.mean(), &x, 1e-5)
                .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn pool_regions_cover_and_overlap() {
        assert_eq!(pool_regions(4, 2), vec![(0, 2), (2, 4)]);
        // bins > side: regions clamp to singletons
        let r = pool_regions(2, 3);
        assert!(r.iter().all(|&(s, e)| e > s));
    }
}

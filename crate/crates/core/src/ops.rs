//! Differentiable primitives recorded on a [`Graph`].

use crate::error::{config_err, shape_err, DfsError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{col2im_strided, gemm, im2col_strided, sigmoid, ConvGeom};
use crate::tensor::Tensor;

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running statistics.
    Train,
    /// Normalize by the running statistics.
    Eval,
}

fn like(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).expect("output shape matches data")
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", self.shape(a), self.shape(b));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = like(self.shape(a), data);
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.record1(
            &[a, b],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                vec![na.then(|| g.to_vec()), nb.then(|| g.to_vec())]
            }),
        ))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", self.shape(a), self.shape(b));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let out = like(self.shape(a), data);
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let sa = nb.then(|| self.data(a).to_vec());
        let sb = na.then(|| self.data(b).to_vec());
        Ok(self.record1(
            &[a, b],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                let ga = sb.map(|b| g.iter().zip(&b).map(|(g, b)| g * b).collect());
                let gb = sa.map(|a| g.iter().zip(&a).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let out = like(self.shape(a), data);
        self.record1(
            &[a],
            out,
            Box::new(move |g| vec![Some(g[0].unwrap().iter().map(|g| g * s).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let data = self.data(a).iter().map(|x| x + s).collect();
        let out = like(self.shape(a), data);
        self.record1(&[a], out, Box::new(move |g| vec![Some(g[0].unwrap().to_vec())]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record1(&[a], out, Box::new(move |g| vec![Some(g[0].unwrap().to_vec())])))
    }

    /// `max(x, 0)`; NaN propagates.
    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect();
        let mask: Vec<bool> = data.iter().map(|&y| y > 0.0).collect();
        let out = like(self.shape(a), data);
        self.record1(
            &[a],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                vec![Some(g.iter().zip(&mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect())]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let y = data.clone();
        let out = like(self.shape(a), data);
        self.record1(
            &[a],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                vec![Some(g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.tanh()).collect();
        let y = data.clone();
        let out = like(self.shape(a), data);
        self.record1(
            &[a],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                vec![Some(g.iter().zip(&y).map(|(g, y)| g * (1.0 - y * y)).collect())]
            }),
        )
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let n = self.value(a).numel();
        self.record1(
            &[a],
            Tensor::scalar(s as f32),
            Box::new(move |g| vec![Some(vec![g[0].unwrap()[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// `a · b` for `a: [M, K]`, `b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let sa = nb.then(|| self.data(a).to_vec());
        let sb = na.then(|| self.data(b).to_vec());
        Ok(self.record1(
            &[a, b],
            like(&[m, n], out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                let ga = sb.map(|b| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b, true, &mut ga, 0.0);
                    ga
                });
                let gb = sa.map(|a| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &a, true, g, false, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Fully connected layer `x · wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, i2) = self.value(w).dims2()?;
        if i != i2 || self.shape(b) != [o] {
            return shape_err("affine", self.shape(x), self.shape(w));
        }
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.data(b));
        }
        gemm(n, i, o, self.data(x), false, self.data(w), true, &mut out, 1.0);
        let (nx, nw, nb) = (self.requires_grad(x), self.requires_grad(w), self.requires_grad(b));
        let sx = nw.then(|| self.data(x).to_vec());
        let sw = nx.then(|| self.data(w).to_vec());
        Ok(self.record1(
            &[x, w, b],
            like(&[n, o], out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                let gx = sw.map(|w| {
                    let mut gx = vec![0.0; n * i];
                    gemm(n, o, i, g, false, &w, false, &mut gx, 0.0);
                    gx
                });
                let gw = sx.map(|x| {
                    let mut gw = vec![0.0; o * i];
                    gemm(o, n, i, g, true, &x, false, &mut gw, 0.0);
                    gw
                });
                let gb = nb.then(|| {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut y = self.data(x).to_vec();
        for row in y.chunks_mut(c) {
            softmax_in_place(row);
        }
        let saved = y.clone();
        let out = like(self.shape(x), y);
        self.record1(
            &[x],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(saved.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return shape_err("cross_entropy", self.shape(logits), &[labels.len()]);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DfsError::Input(format!("label {bad} outside {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[label] as f64;
            softmax_in_place(row);
        }
        let labels = labels.to_vec();
        Ok(self.record1(
            &[logits],
            Tensor::scalar((total / n as f64) as f32),
            Box::new(move |g| {
                let s = g[0].unwrap()[0] / n as f32;
                let mut gx = probs;
                for (row, &label) in gx.chunks_mut(c).zip(&labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let out: Vec<f32> = self
            .data(x)
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        Ok(self.record1(
            &[x],
            like(&[n, c], out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                let inv = 1.0 / hw as f32;
                vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect())]
            }),
        ))
    }

    /// Column `k` of `x: [N, C]` as an `[N]` tensor.
    pub fn column(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if k >= c {
            return shape_err("column", self.shape(x), &[k]);
        }
        let out: Vec<f32> = self.data(x).chunks(c).map(|r| r[k]).collect();
        Ok(self.record1(
            &[x],
            like(&[n], out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                let mut gx = vec![0.0; n * c];
                for (row, &v) in gx.chunks_mut(c).zip(g) {
                    row[k] = v;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Columns `start..end` of `x: [N, C]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return shape_err("slice_cols", self.shape(x), &[start, end]);
        }
        let width = end - start;
        let out: Vec<f32> = self
            .data(x)
            .chunks(c)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        Ok(self.record1(
            &[x],
            like(&[n, width], out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                let mut gx = vec![0.0; n * c];
                for (row, src) in gx.chunks_mut(c).zip(g.chunks(width)) {
                    row[start..end].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Scales every sample `x[i, ...]` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let n = self.shape(x)[0];
        if self.shape(w) != [n] {
            return shape_err("mul_rows", self.shape(x), self.shape(w));
        }
        let stride = self.value(x).numel() / n;
        let wd = self.data(w).to_vec();
        let out: Vec<f32> = self
            .data(x)
            .chunks(stride)
            .zip(&wd)
            .flat_map(|(r, &s)| r.iter().map(move |v| v * s))
            .collect();
        let out = like(self.shape(x), out);
        let (nx, nw) = (self.requires_grad(x), self.requires_grad(w));
        let sx = nw.then(|| self.data(x).to_vec());
        Ok(self.record1(
            &[x, w],
            out,
            Box::new(move |g| {
                let g = g[0].unwrap();
                let gx = nx.then(|| {
                    g.chunks(stride)
                        .zip(&wd)
                        .flat_map(|(r, &s)| r.iter().map(move |v| v * s))
                        .collect()
                });
                let gw = sx.map(|x| {
                    g.chunks(stride)
                        .zip(x.chunks(stride))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Bias-free 2-D cross-correlation of `input: [N, C, H, W]` with
    /// `weight: [O, C, kH, kW]`. Output extents are
    /// `floor((H + 2·pad − kH) / stride) + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, ci, kh, kw) = self.value(weight).dims4()?;
        if ci != c {
            return shape_err("conv2d", self.shape(input), self.shape(weight));
        }
        let geom = conv_geom(c, h, w, kh, kw, stride, pad)?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_stride = c * h * w;
        let out_stride = o * cols_n;
        let ld = n * cols_n;
        // All samples unfolded side by side: one `[rows, n·cols_n]` product.
        let mut cols = vec![0.0; rows * ld];
        let mut prod = vec![0.0; o * ld];
        {
            let x = self.data(input);
            for s in 0..n {
                im2col_strided(&x[s * in_stride..(s + 1) * in_stride], &geom, &mut cols[s * cols_n..], ld);
            }
            gemm(o, rows, ld, self.data(weight), false, &cols, false, &mut prod, 0.0);
        }
        let mut out = vec![0.0; n * out_stride];
        for oc in 0..o {
            for s in 0..n {
                out[s * out_stride + oc * cols_n..s * out_stride + (oc + 1) * cols_n]
                    .copy_from_slice(&prod[oc * ld + s * cols_n..oc * ld + (s + 1) * cols_n]);
            }
        }
        let (nx, nw) = (self.requires_grad(input), self.requires_grad(weight));
        let saved_cols = nw.then_some(cols);
        let sw = nx.then(|| self.data(weight).to_vec());
        Ok(self.record1(
            &[input, weight],
            like(&[n, o, geom.h_out, geom.w_out], out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                // Regroup the output gradient as `[o, n·cols_n]`.
                let mut gy = prod;
                for oc in 0..o {
                    for s in 0..n {
                        gy[oc * ld + s * cols_n..oc * ld + (s + 1) * cols_n]
                            .copy_from_slice(&g[s * out_stride + oc * cols_n..s * out_stride + (oc + 1) * cols_n]);
                    }
                }
                let gw = saved_cols.map(|cols| {
                    let mut gw = vec![0.0; o * rows];
                    gemm(o, ld, rows, &gy, false, &cols, true, &mut gw, 0.0);
                    gw
                });
                let gx = sw.map(|wt| {
                    let mut gcols = vec![0.0; rows * ld];
                    gemm(rows, o, ld, &wt, true, &gy, false, &mut gcols, 0.0);
                    let mut gx = vec![0.0; n * in_stride];
                    for s in 0..n {
                        col2im_strided(&gcols[s * cols_n..], &geom, &mut gx[s * in_stride..(s + 1) * in_stride], ld);
                    }
                    gx
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Per-channel batch normalization of `x: [N, C, H, W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        mode: BnMode,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return config_err(format!("batchnorm eps must be positive, got {eps}"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return shape_err("batchnorm2d", self.shape(x), self.shape(v));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return shape_err("batchnorm2d", self.shape(x), running_mean.shape());
        }
        let hw = h * w;
        let m = n * hw;
        let xd = self.data(x);
        let mut mean = vec![0.0f64; c];
        let mut inv_std = vec![0.0f64; c];
        match mode {
            BnMode::Train => {
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for b in 0..n {
                        ss += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    let var = ss / m as f64;
                    mean[ch] = mu;
                    inv_std[ch] = 1.0 / (var + eps as f64).sqrt();
                    let unbiased = if m > 1 { ss / (m - 1) as f64 } else { var };
                    let rm = &mut running_mean.data_mut()[ch];
                    *rm = (1.0 - momentum) * *rm + momentum * mu as f32;
                    let rv = &mut running_var.data_mut()[ch];
                    *rv = (1.0 - momentum) * *rv + momentum * unbiased as f32;
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    mean[ch] = running_mean.data()[ch] as f64;
                    inv_std[ch] = 1.0 / (running_var.data()[ch] as f64 + eps as f64).sqrt();
                }
            }
        }
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta);
        let mut xhat = vec![0.0f64; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for ((xh, y), &xv) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *xh = (xv as f64 - mean[ch]) * inv_std[ch];
                    *y = (gd[ch] as f64 * *xh + bd[ch] as f64) as f32;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let (ng, nb) = (self.requires_grad(gamma), self.requires_grad(beta));
        Ok(self.record1(
            &[x, gamma, beta],
            like(&shape, out),
            Box::new(move |g| {
                let g = g[0].unwrap();
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_dy[ch] += gv as f64;
                            sum_dy_xhat[ch] += gv as f64 * xh;
                        }
                    }
                }
                let mut gx = vec![0.0f32; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let k = gd[ch] as f64 * inv_std[ch];
                        match mode {
                            BnMode::Train => {
                                let mean_dy = sum_dy[ch] / m as f64;
                                let mean_dy_xhat = sum_dy_xhat[ch] / m as f64;
                                for ((d, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                    *d = (k * (gv as f64 - mean_dy - xh * mean_dy_xhat)) as f32;
                                }
                            }
                            BnMode::Eval => {
                                for (d, &gv) in gx[r.clone()].iter_mut().zip(&g[r]) {
                                    *d = (k * gv as f64) as f32;
                                }
                            }
                        }
                    }
                }
                let gg = ng.then(|| sum_dy_xhat.iter().map(|&v| v as f32).collect());
                let gb = nb.then(|| sum_dy.iter().map(|&v| v as f32).collect());
                vec![Some(gx), gg, gb]
            }),
        ))
    }

    /// One LSTM cell update with gate order input, forget, cell, output.
    ///
    /// Shapes: `x: [N, E]`, `h, c: [N, H]`, `w_ih: [4H, E]`, `w_hh: [4H, H]`,
    /// `bias: [4H]`. Returns `(h', c')`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    ) -> Result<(Var, Var)> {
        let (n, e) = self.value(x).dims2()?;
        let (n2, hd) = self.value(h).dims2()?;
        let h4 = 4 * hd;
        if n2 != n
            || self.shape(c) != [n, hd]
            || self.shape(w_ih) != [h4, e]
            || self.shape(w_hh) != [h4, hd]
            || self.shape(bias) != [h4]
        {
            return shape_err("lstm_cell", self.shape(x), self.shape(w_ih));
        }
        let mut z = vec![0.0f32; n * h4];
        for row in z.chunks_mut(h4) {
            row.copy_from_slice(self.data(bias));
        }
        gemm(n, e, h4, self.data(x), false, self.data(w_ih), true, &mut z, 1.0);
        gemm(n, hd, h4, self.data(h), false, self.data(w_hh), true, &mut z, 1.0);
        // Activated gates, laid out per sample as [i | f | g | o].
        let mut act = z;
        for row in act.chunks_mut(h4) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j / hd == 2 { v.tanh() } else { sigmoid(*v) };
            }
        }
        let cd = self.data(c).to_vec();
        let mut c_new = vec![0.0f32; n * hd];
        let mut h_new = vec![0.0f32; n * hd];
        let mut tanh_c = vec![0.0f32; n * hd];
        for s in 0..n {
            let a = &act[s * h4..(s + 1) * h4];
            for j in 0..hd {
                let idx = s * hd + j;
                let cv = a[hd + j] * cd[idx] + a[j] * a[2 * hd + j];
                c_new[idx] = cv;
                tanh_c[idx] = cv.tanh();
                h_new[idx] = a[3 * hd + j] * tanh_c[idx];
            }
        }
        let needs: Vec<bool> = [x, h, c, w_ih, w_hh, bias].iter().map(|&v| self.requires_grad(v)).collect();
        let sx = self.data(x).to_vec();
        let sh = self.data(h).to_vec();
        let swih = self.data(w_ih).to_vec();
        let swhh = self.data(w_hh).to_vec();
        let outs = self.record(
            &[x, h, c, w_ih, w_hh, bias],
            vec![like(&[n, hd], h_new), like(&[n, hd], c_new)],
            Box::new(move |g| {
                let zeros = vec![0.0f32; n * hd];
                let dh = g[0].unwrap_or(&zeros);
                let dc_in = g[1].unwrap_or(&zeros);
                let mut dz = vec![0.0f32; n * h4];
                let mut dc_prev = vec![0.0f32; n * hd];
                for s in 0..n {
                    let a = &act[s * h4..(s + 1) * h4];
                    let d = &mut dz[s * h4..(s + 1) * h4];
                    for j in 0..hd {
                        let idx = s * hd + j;
                        let (ig, fg, gg, og) = (a[j], a[hd + j], a[2 * hd + j], a[3 * hd + j]);
                        let tc = tanh_c[idx];
                        let dct = dc_in[idx] + dh[idx] * og * (1.0 - tc * tc);
                        d[j] = dct * gg * ig * (1.0 - ig);
                        d[hd + j] = dct * cd[idx] * fg * (1.0 - fg);
                        d[2 * hd + j] = dct * ig * (1.0 - gg * gg);
                        d[3 * hd + j] = dh[idx] * tc * og * (1.0 - og);
                        dc_prev[idx] = dct * fg;
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; n * e];
                    gemm(n, h4, e, &dz, false, &swih, false, &mut gx, 0.0);
                    gx
                });
                let gh = needs[1].then(|| {
                    let mut gh = vec![0.0; n * hd];
                    gemm(n, h4, hd, &dz, false, &swhh, false, &mut gh, 0.0);
                    gh
                });
                let gc = needs[2].then_some(dc_prev);
                let gwih = needs[3].then(|| {
                    let mut gw = vec![0.0; h4 * e];
                    gemm(h4, n, e, &dz, true, &sx, false, &mut gw, 0.0);
                    gw
                });
                let gwhh = needs[4].then(|| {
                    let mut gw = vec![0.0; h4 * hd];
                    gemm(h4, n, hd, &dz, true, &sh, false, &mut gw, 0.0);
                    gw
                });
                let gb = needs[5].then(|| {
                    let mut gb = vec![0.0; h4];
                    for row in dz.chunks(h4) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gh, gc, gwih, gwhh, gb]
            }),
        );
        Ok((outs[0], outs[1]))
    }
}

/// Output geometry of a cross-correlation.
pub fn conv_geom(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    if stride == 0 {
        return config_err("conv2d stride must be positive");
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return config_err(format!(
            "kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        ));
    }
    Ok(ConvGeom {
        c_in: c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        *v = e as f32;
        total += e;
    }
    let inv = (1.0 / total) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

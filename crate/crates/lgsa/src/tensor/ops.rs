//! Forward ops. Each one computes its value eagerly and records the
//! operands when a gradient will be needed.

use super::kernels::{bilinear_axis, bilinear_plane, gemm_nn, im2col, ConvDims};
use super::{dims2, dims4, Op, Tensor};
use crate::error::{Error, Result};

fn track(requires: bool, op: Op) -> Option<Op> {
    if requires {
        Some(op)
    } else {
        None
    }
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Add(self.clone(), other.clone())),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Sub(self.clone(), other.clone())),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Mul(self.clone(), other.clone())),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Scale(self.clone(), c)),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::AddScalar(self.clone())),
        )
    }

    /// Elementwise x^p for non-negative x (p arbitrary).
    pub fn powf(&self, p: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.powf(p)).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Powf(self.clone(), p)),
        )
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Ln(self.clone())),
        )
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.abs()).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Abs(self.clone())),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.clamp(lo, hi)).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Clamp(self.clone(), lo, hi)),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&a| {
                if a >= 0.0 {
                    1.0 / (1.0 + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Sigmoid(self.clone())),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        let rg = self.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            track(rg, Op::Relu(self.clone())),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let rg = self.requires_grad();
        Tensor::new_node(vec![1], vec![total], rg, track(rg, Op::Sum(self.clone())))
    }

    /// 2D matrix product, (m x k) * (k x n) -> (m x n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self.shape(), "matmul")?;
        let (k2, n) = dims2(other.shape(), "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        gemm_nn(self.data(), other.data(), &mut data, m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Tensor::new_node(
            vec![m, n],
            data,
            rg,
            track(rg, Op::Matmul(self.clone(), other.clone())),
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = dims2(self.shape(), "transpose2")?;
        let src = self.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![c, r],
            data,
            rg,
            track(rg, Op::Transpose2(self.clone())),
        ))
    }

    /// Row-wise softmax of a 2D tensor, stabilized by per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = dims2(self.shape(), "softmax_rows")?;
        if c == 0 {
            return Err(Error::InvalidArgument {
                op: "softmax_rows",
                msg: "rows must be non-empty".into(),
            });
        }
        let mut data = vec![0.0; r * c];
        for (row_in, row_out) in self
            .data()
            .chunks_exact(c)
            .zip(data.chunks_exact_mut(c))
        {
            let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
                let e = (v - mx).exp();
                *o = e;
                denom += e;
            }
            for o in row_out.iter_mut() {
                *o /= denom;
            }
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![r, c],
            data,
            rg,
            track(rg, Op::SoftmaxRows(self.clone())),
        ))
    }

    /// 2D cross-correlation over a batched image tensor.
    ///
    /// `self` is (B, Cin, H, W), `kernel` (Cout, Cin, kh, kw), `bias` (Cout).
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (b, cin, h, w) = dims4(self.shape(), "conv2d")?;
        let kshape = kernel.shape();
        if kshape.len() != 4 || kshape[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kshape.to_vec(),
            });
        }
        let (cout, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: bias.shape().to_vec(),
            });
        }
        let dims = ConvDims::new(cin, h, w, cout, kh, kw, stride, pad).ok_or_else(|| {
            Error::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "non-positive output extents for input {}x{}, kernel {}x{}, stride {}, pad {}",
                    h, w, kh, kw, stride, pad
                ),
            }
        })?;
        let npix = dims.out_pixels();
        let mut data = vec![0.0; b * cout * npix];
        let mut cols = vec![0.0; dims.col_rows() * npix];
        let in_plane = cin * h * w;
        for bi in 0..b {
            let x = &self.data()[bi * in_plane..(bi + 1) * in_plane];
            im2col(x, &dims, &mut cols);
            let out = &mut data[bi * cout * npix..(bi + 1) * cout * npix];
            for (oc, chunk) in out.chunks_exact_mut(npix).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
            gemm_nn(kernel.data(), &cols, out, cout, dims.col_rows(), npix);
        }
        let rg = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        Ok(Tensor::new_node(
            vec![b, cout, dims.out_h, dims.out_w],
            data,
            rg,
            track(
                rg,
                Op::Conv2d {
                    x: self.clone(),
                    kernel: kernel.clone(),
                    bias: bias.clone(),
                    dims,
                    batch: b,
                },
            ),
        ))
    }

    /// Bilinear resample of each plane to (out_h, out_w), half-pixel
    /// centers with edge clamping.
    pub fn bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4(self.shape(), "bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument {
                op: "bilinear",
                msg: "target extents must be positive".into(),
            });
        }
        let ax_y = bilinear_axis(h, out_h);
        let ax_x = bilinear_axis(w, out_w);
        let planes = b * c;
        let mut data = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &self.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * out_h * out_w..(p + 1) * out_h * out_w];
            bilinear_plane(src, dst, &ax_y, &ax_x, w, out_w);
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![b, c, out_h, out_w],
            data,
            rg,
            track(rg, Op::Bilinear(self.clone())),
        ))
    }

    /// Concatenate along the channel axis; all other extents must match.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                op: "concat_channels",
                msg: "need at least one input".into(),
            });
        }
        let (b, _, h, w) = dims4(parts[0].shape(), "concat_channels")?;
        let mut c_total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = dims4(p.shape(), "concat_channels")?;
            if pb != b || ph != h || pw != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = vec![0.0; b * c_total * plane];
        for bi in 0..b {
            let mut dst = bi * c_total * plane;
            for p in parts {
                let pc = p.shape()[1];
                let src = &p.data()[bi * pc * plane..(bi + 1) * pc * plane];
                data[dst..dst + pc * plane].copy_from_slice(src);
                dst += pc * plane;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::new_node(
            vec![b, c_total, h, w],
            data,
            rg,
            track(rg, Op::ConcatChannels(parts.to_vec())),
        ))
    }

    /// Replicate a single-channel map across `channels` channels.
    pub fn broadcast_channels(&self, channels: usize) -> Result<Tensor> {
        let (b, c, h, w) = dims4(self.shape(), "broadcast_channels")?;
        if c != 1 {
            return Err(Error::InvalidArgument {
                op: "broadcast_channels",
                msg: format!("source must have one channel, got {}", c),
            });
        }
        let plane = h * w;
        let mut data = vec![0.0; b * channels * plane];
        for bi in 0..b {
            let src = &self.data()[bi * plane..(bi + 1) * plane];
            for ch in 0..channels {
                let at = (bi * channels + ch) * plane;
                data[at..at + plane].copy_from_slice(src);
            }
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![b, channels, h, w],
            data,
            rg,
            track(rg, Op::BroadcastChannels(self.clone())),
        ))
    }

    /// Mean over the channel axis, yielding a single-channel map.
    pub fn mean_channels(&self) -> Result<Tensor> {
        let (b, c, h, w) = dims4(self.shape(), "mean_channels")?;
        if c == 0 {
            return Err(Error::InvalidArgument {
                op: "mean_channels",
                msg: "no channels".into(),
            });
        }
        let plane = h * w;
        let mut data = vec![0.0; b * plane];
        for bi in 0..b {
            let dst = &mut data[bi * plane..(bi + 1) * plane];
            for ch in 0..c {
                let src = &self.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += s;
                }
            }
            let inv = 1.0 / c as f64;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![b, 1, h, w],
            data,
            rg,
            track(rg, Op::MeanChannels(self.clone())),
        ))
    }

    /// Flatten a (1, C, H, W) feature map into (H*W, C) token rows,
    /// raster order.
    pub fn to_tokens(&self) -> Result<Tensor> {
        let (b, c, h, w) = dims4(self.shape(), "to_tokens")?;
        if b != 1 {
            return Err(Error::InvalidArgument {
                op: "to_tokens",
                msg: format!("tokenization runs per image, got batch {}", b),
            });
        }
        let plane = h * w;
        let src = self.data();
        let mut data = vec![0.0; plane * c];
        for ch in 0..c {
            let splane = &src[ch * plane..(ch + 1) * plane];
            for (p, &v) in splane.iter().enumerate() {
                data[p * c + ch] = v;
            }
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![plane, c],
            data,
            rg,
            track(rg, Op::ToTokens(self.clone())),
        ))
    }

    /// Inverse of [`Tensor::to_tokens`]: (H*W, C) rows back to (1, C, H, W).
    pub fn from_tokens(&self, h: usize, w: usize) -> Result<Tensor> {
        let (rows, c) = dims2(self.shape(), "from_tokens")?;
        if rows != h * w {
            return Err(Error::InvalidArgument {
                op: "from_tokens",
                msg: format!("{} tokens cannot fill a {}x{} grid", rows, h, w),
            });
        }
        let src = self.data();
        let mut data = vec![0.0; c * rows];
        for ch in 0..c {
            let dplane = &mut data[ch * rows..(ch + 1) * rows];
            for (p, d) in dplane.iter_mut().enumerate() {
                *d = src[p * c + ch];
            }
        }
        let rg = self.requires_grad();
        Ok(Tensor::new_node(
            vec![1, c, h, w],
            data,
            rg,
            track(rg, Op::FromTokens(self.clone())),
        ))
    }
}

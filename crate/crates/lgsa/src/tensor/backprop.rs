//! Reverse sweep over the recorded graph.

use std::collections::HashSet;

use super::kernels::{bilinear_axis, bilinear_plane_back, col2im, gemm_nt, gemm_tn, im2col};
use super::{Op, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Propagate d(loss)/d(node) from this scalar to every tensor that
    /// requires a gradient. Gradients accumulate across calls until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topological_order(self);
        self.accumulate_grad(&[1.0]);
        // Parents sit before children in `order`; walk it backwards so each
        // node is expanded exactly once, after all its consumers.
        for node in order.iter().rev() {
            step(node);
        }
        Ok(())
    }
}

fn parent_tensors(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Powf(a, _)
        | Op::Ln(a)
        | Op::Abs(a)
        | Op::Clamp(a, _, _)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::Transpose2(a)
        | Op::SoftmaxRows(a)
        | Op::Bilinear(a)
        | Op::BroadcastChannels(a)
        | Op::MeanChannels(a)
        | Op::ToTokens(a)
        | Op::FromTokens(a) => vec![a.clone()],
        Op::Conv2d { x, kernel, bias, .. } => vec![x.clone(), kernel.clone(), bias.clone()],
        Op::ConcatChannels(parts) => parts.clone(),
    }
}

/// Iterative post-order over the DAG rooted at `loss`.
fn topological_order(loss: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, expanded) pairs; a node is emitted once all parents are.
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        if !node.requires_grad() {
            continue;
        }
        if let Some(op) = node.op() {
            let ps = parent_tensors(op);
            stack.push((node, true));
            for p in ps {
                stack.push((p, false));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn step(node: &Tensor) {
    let Some(op) = node.op() else { return };
    // Interior gradients are transient: each consumer has already added its
    // contribution (topological order), so take the total, propagate it, and
    // leave the accumulator empty. Leaves keep theirs, which is what makes
    // repeated backward calls accumulate instead of double-count.
    let Some(g) = node.take_grad() else { return };
    let g = &g;
    match op {
        Op::Add(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.accumulate_grad(g);
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().zip(b.data()).map(|(gv, bv)| gv * bv).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = g.iter().zip(a.data()).map(|(gv, av)| gv * av).collect();
                b.accumulate_grad(&db);
            }
        }
        Op::Scale(a, c) => {
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                a.accumulate_grad(&da);
            }
        }
        Op::AddScalar(a) => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
        }
        Op::Powf(a, p) => {
            if a.requires_grad() {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a.data())
                    .map(|(gv, &av)| gv * p * av.powf(p - 1.0))
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Ln(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().zip(a.data()).map(|(gv, av)| gv / av).collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Abs(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a.data())
                    .map(|(gv, &av)| {
                        if av > 0.0 {
                            *gv
                        } else if av < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Clamp(a, lo, hi) => {
            if a.requires_grad() {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a.data())
                    .map(|(gv, &av)| if av >= *lo && av <= *hi { *gv } else { 0.0 })
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Sigmoid(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = g
                    .iter()
                    .zip(node.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Relu(a) => {
            if a.requires_grad() {
                let da: Vec<f64> = g
                    .iter()
                    .zip(a.data())
                    .map(|(gv, &av)| if av > 0.0 { *gv } else { 0.0 })
                    .collect();
                a.accumulate_grad(&da);
            }
        }
        Op::Sum(a) => {
            if a.requires_grad() {
                let da = vec![g[0]; a.len()];
                a.accumulate_grad(&da);
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = dC * B^T
                let mut da = vec![0.0; m * k];
                gemm_nt(g, b.data(), &mut da, m, n, k);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB = A^T * dC
                let mut db = vec![0.0; k * n];
                gemm_tn(a.data(), g, &mut db, k, m, n);
                b.accumulate_grad(&db);
            }
        }
        Op::Transpose2(a) => {
            if a.requires_grad() {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::SoftmaxRows(a) => {
            if a.requires_grad() {
                let c = node.shape()[1];
                let y = node.data();
                let mut da = vec![0.0; y.len()];
                for ((yrow, grow), drow) in y
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(da.chunks_exact_mut(c))
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(yv, gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            dims,
            batch,
        } => {
            let npix = dims.out_pixels();
            let cout = dims.out_ch;
            let in_plane = dims.in_ch * dims.in_h * dims.in_w;
            let col_rows = dims.col_rows();
            let need_x = x.requires_grad();
            let need_k = kernel.requires_grad();
            let need_b = bias.requires_grad();
            let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
            let mut dk = if need_k { vec![0.0; kernel.len()] } else { Vec::new() };
            let mut db = if need_b { vec![0.0; cout] } else { Vec::new() };
            let mut cols = vec![0.0; col_rows * npix];
            let mut dcols = vec![0.0; col_rows * npix];
            for bi in 0..*batch {
                let gout = &g[bi * cout * npix..(bi + 1) * cout * npix];
                if need_b {
                    for (oc, dbv) in db.iter_mut().enumerate() {
                        *dbv += gout[oc * npix..(oc + 1) * npix].iter().sum::<f64>();
                    }
                }
                if need_k {
                    let xb = &x.data()[bi * in_plane..(bi + 1) * in_plane];
                    im2col(xb, dims, &mut cols);
                    // dK += dOut * cols^T
                    gemm_nt(gout, &cols, &mut dk, cout, npix, col_rows);
                }
                if need_x {
                    // dCols = K^T * dOut, then fold back
                    dcols.fill(0.0);
                    gemm_tn(kernel.data(), gout, &mut dcols, col_rows, cout, npix);
                    col2im(&dcols, dims, &mut dx[bi * in_plane..(bi + 1) * in_plane]);
                }
            }
            if need_x {
                x.accumulate_grad(&dx);
            }
            if need_k {
                kernel.accumulate_grad(&dk);
            }
            if need_b {
                bias.accumulate_grad(&db);
            }
        }
        Op::Bilinear(a) => {
            if a.requires_grad() {
                let (b, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
                let (oh, ow) = (node.shape()[2], node.shape()[3]);
                let ax_y = bilinear_axis(h, oh);
                let ax_x = bilinear_axis(w, ow);
                let mut da = vec![0.0; a.len()];
                for p in 0..b * c {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut da[p * h * w..(p + 1) * h * w];
                    bilinear_plane_back(gp, dp, &ax_y, &ax_x, w, ow);
                }
                a.accumulate_grad(&da);
            }
        }
        Op::ConcatChannels(parts) => {
            let (b, c_total, h, w) = (
                node.shape()[0],
                node.shape()[1],
                node.shape()[2],
                node.shape()[3],
            );
            let plane = h * w;
            let mut offset = 0;
            for p in parts {
                let pc = p.shape()[1];
                if p.requires_grad() {
                    let mut dp = vec![0.0; p.len()];
                    for bi in 0..b {
                        let src = &g[(bi * c_total + offset) * plane
                            ..(bi * c_total + offset + pc) * plane];
                        dp[bi * pc * plane..(bi + 1) * pc * plane].copy_from_slice(src);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += pc;
            }
        }
        Op::BroadcastChannels(a) => {
            if a.requires_grad() {
                let (b, c, h, w) = (
                    node.shape()[0],
                    node.shape()[1],
                    node.shape()[2],
                    node.shape()[3],
                );
                let plane = h * w;
                let mut da = vec![0.0; b * plane];
                for bi in 0..b {
                    let dst = &mut da[bi * plane..(bi + 1) * plane];
                    for ch in 0..c {
                        let src = &g[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::MeanChannels(a) => {
            if a.requires_grad() {
                let (b, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
                let plane = h * w;
                let inv = 1.0 / c as f64;
                let mut da = vec![0.0; a.len()];
                for bi in 0..b {
                    let src = &g[bi * plane..(bi + 1) * plane];
                    for ch in 0..c {
                        let dst = &mut da[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d = s * inv;
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::ToTokens(a) => {
            if a.requires_grad() {
                let (_, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
                let plane = h * w;
                let mut da = vec![0.0; a.len()];
                for ch in 0..c {
                    let dplane = &mut da[ch * plane..(ch + 1) * plane];
                    for (p, d) in dplane.iter_mut().enumerate() {
                        *d = g[p * c + ch];
                    }
                }
                a.accumulate_grad(&da);
            }
        }
        Op::FromTokens(a) => {
            if a.requires_grad() {
                let (rows, c) = (a.shape()[0], a.shape()[1]);
                let mut da = vec![0.0; a.len()];
                for ch in 0..c {
                    let gplane = &g[ch * rows..(ch + 1) * rows];
                    for (p, &gv) in gplane.iter().enumerate() {
                        da[p * c + ch] = gv;
                    }
                }
                a.accumulate_grad(&da);
            }
        }
    }
}

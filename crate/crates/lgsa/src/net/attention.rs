//! Scaled dot-product attention between the two hourglasses, with optional
//! spatial gating of queries and keys by the learnable heatmap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// softmax(Q K^T / sqrt(d)) V over token rows.
///
/// `q` and `k` are tokens x d, `v` is tokens x c; token counts must agree.
/// Returns the attention output and the raw (unscaled) similarity matrix.
/// With more than one head the columns of q/k/v are split evenly and the
/// similarity diagnostic is head 0's.
pub fn scaled_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    num_heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (tq, d) = (q.shape()[0], q.shape()[1]);
    let (tk, dk) = (k.shape()[0], k.shape()[1]);
    let (tv, c) = (v.shape()[0], v.shape()[1]);
    if d != dk {
        return Err(Error::ShapeMismatch {
            op: "scaled_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if tq != tk || tq != tv {
        return Err(Error::InvalidArgument {
            op: "scaled_attention",
            msg: format!("token counts differ: q {tq}, k {tk}, v {tv}"),
        });
    }
    if num_heads == 0 || d % num_heads != 0 || c % num_heads != 0 {
        return Err(Error::InvalidArgument {
            op: "scaled_attention",
            msg: format!("{num_heads} heads do not divide d={d}, c={c}"),
        });
    }
    if num_heads == 1 {
        let sim = q.matmul(&k.transpose2()?)?;
        let attn = sim.scale(1.0 / (d as f64).sqrt()).softmax_rows()?;
        return Ok((attn.matmul(v)?, sim));
    }

    let dh = d / num_heads;
    let ch = c / num_heads;
    let mut outs = Vec::with_capacity(num_heads);
    let mut sim0 = None;
    for h in 0..num_heads {
        let qh = take_cols(q, h * dh, dh)?;
        let kh = take_cols(k, h * dh, dh)?;
        let vh = take_cols(v, h * ch, ch)?;
        let sim = qh.matmul(&kh.transpose2()?)?;
        let attn = sim.scale(1.0 / (dh as f64).sqrt()).softmax_rows()?;
        outs.push(attn.matmul(&vh)?);
        if h == 0 {
            sim0 = Some(sim);
        }
    }
    // stitch head outputs back side by side: (t, c/h) each -> (t, c)
    let parts: Vec<Tensor> = outs
        .iter()
        .map(|o| o.from_tokens(o.shape()[0], 1))
        .collect::<Result<_>>()?;
    let out = Tensor::concat_channels(&parts)?.to_tokens()?;
    Ok((out, sim0.expect("at least one head")))
}

/// Column slice as a tracked op: multiply by a constant 0/1 selector.
fn take_cols(t: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let cols = t.shape()[1];
    let mut sel = vec![0.0; cols * width];
    for j in 0..width {
        sel[(start + j) * width + j] = 1.0;
    }
    let selector = Tensor::from_vec(&[cols, width], sel)?;
    t.matmul(&selector)
}

/// Shrink a grid until it fits the token budget.
pub fn token_grid(h: usize, w: usize, cap: usize) -> (usize, usize) {
    let mut th = h;
    let mut tw = w;
    while th * tw > cap && (th > 1 || tw > 1) {
        th = th.div_ceil(2);
        tw = tw.div_ceil(2);
    }
    (th, tw)
}

/// Attention between matching-scale feature maps.
///
/// Both maps are resampled to a common token grid (the high-resolution
/// map's own grid, pooled down to `token_cap` tokens if needed). When a
/// gate is given it is resampled to the grid and multiplies the query and
/// key features elementwise before embedding. Returns the fused feature at
/// `h_hr`'s resolution plus the similarity matrix.
pub fn embedded_attention(
    h_hr: &Tensor,
    h_lr: &Tensor,
    gate: Option<&Tensor>,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    num_heads: usize,
    token_cap: usize,
) -> Result<(Tensor, Tensor)> {
    let ch = h_hr.shape()[1];
    if h_lr.shape()[1] != ch {
        return Err(Error::ShapeMismatch {
            op: "embedded_attention",
            lhs: h_hr.shape().to_vec(),
            rhs: h_lr.shape().to_vec(),
        });
    }
    if wq.shape()[0] != ch || wk.shape()[0] != ch || wv.shape()[0] != ch {
        return Err(Error::InvalidArgument {
            op: "embedded_attention",
            msg: format!(
                "embedding rows {}/{}/{} do not match {} feature channels",
                wq.shape()[0],
                wk.shape()[0],
                wv.shape()[0],
                ch
            ),
        });
    }
    let (fh, fw) = (h_hr.shape()[2], h_hr.shape()[3]);
    let (th, tw) = token_grid(fh, fw, token_cap);
    let hr_t = if (th, tw) == (fh, fw) {
        h_hr.clone()
    } else {
        h_hr.bilinear(th, tw)?
    };
    let lr_t = h_lr.bilinear(th, tw)?;
    let (q_in, k_in) = match gate {
        Some(g) => {
            let g_t = g.bilinear(th, tw)?.broadcast_channels(ch)?;
            (hr_t.mul(&g_t)?, lr_t.mul(&g_t)?)
        }
        None => (hr_t.clone(), lr_t),
    };
    let q = q_in.to_tokens()?.matmul(wq)?;
    let k = k_in.to_tokens()?.matmul(wk)?;
    let v = hr_t.to_tokens()?.matmul(wv)?;
    let (out, sim) = scaled_attention(&q, &k, &v, num_heads)?;
    let feat = out.from_tokens(th, tw)?;
    let feat = if (th, tw) == (fh, fw) {
        feat
    } else {
        feat.bilinear(fh, fw)?
    };
    Ok((feat, sim))
}

/// Baseline fusion: ungated attention between the feature maps.
pub fn global_attention(
    h_hr: &Tensor,
    h_lr: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    num_heads: usize,
    token_cap: usize,
) -> Result<(Tensor, Tensor)> {
    embedded_attention(h_hr, h_lr, None, wq, wk, wv, num_heads, token_cap)
}

/// Gated attention plus the skip update: conv(h_hr + attention).
#[allow(clippy::too_many_arguments)]
pub fn lgsa_fuse(
    h_hr: &Tensor,
    h_lr: &Tensor,
    gate: Option<&Tensor>,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    fuse_w: &Tensor,
    fuse_b: &Tensor,
    num_heads: usize,
    token_cap: usize,
) -> Result<(Tensor, Tensor)> {
    let (feat, sim) = embedded_attention(h_hr, h_lr, gate, wq, wk, wv, num_heads, token_cap)?;
    let fused = h_hr.add(&feat)?.conv2d(fuse_w, fuse_b, 1, 1)?;
    Ok((fused, sim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_attention_two_token_case() {
        // Q = K = [1; 0], V = [2; 4] -> [2.53788; 3.0]
        let q = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![2.0, 4.0]).unwrap();
        let (out, sim) = scaled_attention(&q, &q, &v, 1).unwrap();
        assert_eq!(sim.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!((out.data()[0] - 2.53788).abs() < 1e-5, "{}", out.data()[0]);
        assert!((out.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let q = Tensor::from_vec(&[3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.2, 0.9]).unwrap();
        let k = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, -0.5, 0.7, 0.2, 0.2]).unwrap();
        let v = Tensor::from_vec(&[3, 2], vec![5.0, -1.0, 2.0, 3.0, -4.0, 0.5]).unwrap();
        let (out, _) = scaled_attention(&q, &k, &v, 1).unwrap();
        for col in 0..2 {
            let vals: Vec<f64> = (0..3).map(|r| v.data()[r * 2 + col]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..3 {
                let o = out.data()[r * 2 + col];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn equal_key_rows_give_uniform_mean() {
        let q = Tensor::from_vec(&[2, 2], vec![0.4, -0.3, 1.5, 0.2]).unwrap();
        let k = Tensor::from_vec(&[2, 2], vec![0.7, 0.7, 0.7, 0.7]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![2.0, 6.0]).unwrap();
        let (out, _) = scaled_attention(&q, &k, &v, 1).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12);
        assert!((out.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gate_zeroes_sim_rows() {
        let h_hr = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| i as f64 * 0.3).collect()).unwrap();
        let h_lr = Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, -0.4]).unwrap();
        let wq = Tensor::from_vec(&[2, 2], vec![0.3, -0.1, 0.2, 0.4]).unwrap();
        let wk = wq.clone();
        let wv = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gate = Tensor::zeros(&[1, 1, 2, 2]);
        let (_, sim) = embedded_attention(&h_hr, &h_lr, Some(&gate), &wq, &wk, &wv, 1, 1024).unwrap();
        assert!(sim.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_matches_ungated_exactly() {
        let h_hr =
            Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.17).sin()).collect())
                .unwrap();
        let h_lr =
            Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| (i as f64 * 0.49).cos()).collect())
                .unwrap();
        let wq = Tensor::from_vec(&[2, 3], (0..6).map(|i| 0.1 * i as f64 - 0.2).collect()).unwrap();
        let wk = Tensor::from_vec(&[2, 3], (0..6).map(|i| 0.07 * i as f64 - 0.1).collect()).unwrap();
        let wv = Tensor::from_vec(&[2, 2], vec![0.9, -0.3, 0.2, 1.1]).unwrap();
        let ones = Tensor::full(&[1, 1, 4, 4], 1.0);
        let (gated, _) = embedded_attention(&h_hr, &h_lr, Some(&ones), &wq, &wk, &wv, 1, 1024).unwrap();
        let (plain, _) = global_attention(&h_hr, &h_lr, &wq, &wk, &wv, 1, 1024).unwrap();
        assert_eq!(gated.data(), plain.data());
    }

    #[test]
    fn token_grid_caps_by_halving() {
        assert_eq!(token_grid(32, 32, 1024), (32, 32));
        assert_eq!(token_grid(64, 64, 1024), (32, 32));
        assert_eq!(token_grid(128, 128, 1024), (32, 32));
    }
}

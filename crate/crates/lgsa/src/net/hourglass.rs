//! One hourglass: stem to stride R, `num_stages` residual encoder levels,
//! mirrored decoder with in-hourglass skip adds, and the three prediction
//! heads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{BoundParams, HourglassConfig, PredictionMaps};

/// Decoder features (deepest level first) plus the raw head outputs.
pub struct HourglassRun {
    pub decoder_feats: Vec<Tensor>,
    pub preds: PredictionMaps,
}

/// Hook invoked after each decoder level's residual block. Receives the
/// level index (0 = stride R) and the feature map; its return value feeds
/// the next decoder stage.
pub type FuseHook<'a> = dyn FnMut(usize, Tensor) -> Result<Tensor> + 'a;

fn conv(p: &BoundParams, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.conv2d(
        p.get(&format!("{name}.w")),
        p.get(&format!("{name}.b")),
        stride,
        pad,
    )
}

fn res_block(p: &BoundParams, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = conv(p, &format!("{name}.c1"), x, 1, 1)?.relu();
    let h = conv(p, &format!("{name}.c2"), &h, 1, 1)?;
    Ok(h.add(x)?.relu())
}

fn head(p: &BoundParams, name: &str, x: &Tensor) -> Result<Tensor> {
    let h = conv(p, &format!("{name}.0"), x, 1, 1)?.relu();
    conv(p, &format!("{name}.1"), &h, 1, 0)
}

/// Run one hourglass. `fuse` is applied at the `num_skip_points` finest
/// decoder levels when present.
pub fn hourglass_forward(
    params: &BoundParams,
    prefix: &str,
    cfg: &HourglassConfig,
    x: &Tensor,
    mut fuse: Option<&mut FuseHook>,
) -> Result<HourglassRun> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::InvalidArgument {
            op: "hourglass_forward",
            msg: format!(
                "expected (1, {}, H, W) input, got {:?}",
                cfg.in_channels, shape
            ),
        });
    }
    let need = (1 << cfg.num_stages) * cfg.stride;
    if shape[2] % need != 0 || shape[3] % need != 0 {
        return Err(Error::InvalidArgument {
            op: "hourglass_forward",
            msg: format!(
                "input extents {}x{} must be multiples of {}",
                shape[2], shape[3], need
            ),
        });
    }

    let stem_steps = cfg.stride.trailing_zeros() as usize;
    let mut h = x.clone();
    for s in 0..stem_steps {
        h = conv(params, &format!("{prefix}stem.{s}"), &h, 2, 1)?.relu();
    }

    let mut enc: Vec<Tensor> = Vec::with_capacity(cfg.num_stages + 1);
    enc.push(res_block(params, &format!("{prefix}enc.0"), &h)?);
    for i in 0..cfg.num_stages {
        let down = conv(params, &format!("{prefix}down.{i}"), &enc[i], 2, 1)?.relu();
        enc.push(res_block(params, &format!("{prefix}enc.{}", i + 1), &down)?);
    }

    let mut d = enc[cfg.num_stages].clone();
    let mut decoder_feats = Vec::with_capacity(cfg.num_stages);
    for i in (0..cfg.num_stages).rev() {
        let target = &enc[i];
        let up = d.bilinear(target.shape()[2], target.shape()[3])?;
        let up = conv(params, &format!("{prefix}up.{i}"), &up, 1, 1)?.relu();
        d = res_block(params, &format!("{prefix}dec.{i}"), &up.add(target)?)?;
        if i < cfg.num_skip_points {
            if let Some(hook) = fuse.as_deref_mut() {
                d = hook(i, d)?;
            }
        }
        decoder_feats.push(d.clone());
    }

    let heat = head(params, &format!("{prefix}head.heat"), &d)?.sigmoid();
    let size = head(params, &format!("{prefix}head.size"), &d)?;
    let offset = head(params, &format!("{prefix}head.offset"), &d)?;
    Ok(HourglassRun {
        decoder_feats,
        preds: PredictionMaps { heat, size, offset },
    })
}

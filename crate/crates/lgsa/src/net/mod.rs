//! The stacked two-hourglass backbone with optional attention fusion at the
//! between-hourglass skip connections.

mod attention;
mod hourglass;
mod model;
mod pam;

pub use attention::{embedded_attention, global_attention, lgsa_fuse, scaled_attention};
pub use hourglass::{hourglass_forward, HourglassRun};
pub use model::{model_forward, ModelOutput};
pub use pam::pam_forward;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which between-hourglass fusion runs at the skip points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionMode {
    None,
    Global,
    Lgsa,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "global" => Ok(AttentionMode::Global),
            "lgsa" => Ok(AttentionMode::Lgsa),
            other => Err(Error::InvalidArgument {
                op: "attention_mode",
                msg: format!("unknown mode '{other}', expected none|global|lgsa"),
            }),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::Global => "global",
            AttentionMode::Lgsa => "lgsa",
        })
    }
}

/// Architecture knobs for both hourglasses and the fusion blocks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HourglassConfig {
    /// Encoder/decoder depth per hourglass.
    pub num_stages: usize,
    /// Channel width at stride R; doubles per encoder level.
    pub base_channels: usize,
    /// How many of the finest decoder levels get skip fusion.
    pub num_skip_points: usize,
    /// Output stride R of the prediction heads.
    pub stride: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// The second hourglass sees the input downsampled by this factor.
    pub lr_scale: usize,
    pub attention_mode: AttentionMode,
    /// Query/key embedding width d_k.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Attention token budget per side; larger grids are pooled down.
    pub token_cap: usize,
    /// Hidden width of the pixel attention module.
    pub pam_hidden: usize,
    /// Replace the learned gate with an all-ones map (testing hook).
    pub force_unit_gate: bool,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        HourglassConfig {
            num_stages: 3,
            base_channels: 32,
            num_skip_points: 3,
            stride: 4,
            num_classes: 1,
            in_channels: 3,
            lr_scale: 2,
            attention_mode: AttentionMode::Lgsa,
            embed_dim: 64,
            num_heads: 1,
            token_cap: 1024,
            pam_hidden: 16,
            force_unit_gate: false,
        }
    }
}

impl HourglassConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_stages", self.num_stages),
            ("base_channels", self.base_channels),
            ("stride", self.stride),
            ("num_classes", self.num_classes),
            ("in_channels", self.in_channels),
            ("lr_scale", self.lr_scale),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("token_cap", self.token_cap),
            ("pam_hidden", self.pam_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument {
                    op: "HourglassConfig",
                    msg: format!("{name} must be positive"),
                });
            }
        }
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return Err(Error::InvalidArgument {
                op: "HourglassConfig",
                msg: format!("stride must be a power of two >= 2, got {}", self.stride),
            });
        }
        if self.num_skip_points == 0 || self.num_skip_points > self.num_stages {
            return Err(Error::InvalidArgument {
                op: "HourglassConfig",
                msg: format!(
                    "num_skip_points must be in 1..={}, got {}",
                    self.num_stages, self.num_skip_points
                ),
            });
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidArgument {
                op: "HourglassConfig",
                msg: format!(
                    "embed_dim {} must divide into {} heads",
                    self.embed_dim, self.num_heads
                ),
            });
        }
        if self.num_heads > 1 && self.base_channels % self.num_heads != 0 {
            return Err(Error::InvalidArgument {
                op: "HourglassConfig",
                msg: "base_channels must split evenly across heads".into(),
            });
        }
        Ok(())
    }

    /// Input extents must be a multiple of this.
    pub fn input_multiple(&self) -> usize {
        self.lr_scale * (1 << self.num_stages) * self.stride
    }

    /// Channel width of decoder level `i` (0 = stride R level).
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

/// The sigmoid heatmap, size, and offset heads of one hourglass, all at
/// stride R.
#[derive(Debug, Clone)]
pub struct PredictionMaps {
    pub heat: Tensor,
    pub size: Tensor,
    pub offset: Tensor,
}

impl PredictionMaps {
    pub fn cells(&self) -> (usize, usize) {
        (self.heat.shape()[2], self.heat.shape()[3])
    }
}

/// Attention internals captured during a forward pass, detached from the
/// graph. One similarity matrix per fused skip point, deepest level first.
#[derive(Debug, Clone, Default)]
pub struct AttentionDiagnostics {
    pub sims: Vec<Tensor>,
    pub pam_weight: Option<Tensor>,
    pub pam_map: Option<Tensor>,
}

/// Initialization recipe for one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Const(f64),
}

/// Named parameter tensors in declaration order.
///
/// Every parameter is seeded independently from (seed, name), so two models
/// that share a subset of parameter names initialize that subset
/// identically regardless of what else they declare.
pub struct ParamStore {
    seed: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            seed,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) {
        assert!(
            !self.index.contains_key(name),
            "parameter '{name}' declared twice"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![v; n],
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a64(name.as_bytes())));
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
        };
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Fresh gradient-tracking leaves over the current values.
    pub fn bind(&self) -> BoundParams {
        let leaves = self
            .entries
            .iter()
            .map(|e| Tensor::param(&e.shape, e.data.clone()).expect("stored shapes are consistent"))
            .collect();
        BoundParams {
            leaves,
            index: self.index.clone(),
        }
    }
}

/// Leaf tensors for one forward/backward pass, keyed by parameter name.
pub struct BoundParams {
    leaves: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.leaves[i]
    }

    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    pub fn zero_grad(&self) {
        for t in &self.leaves {
            t.zero_grad();
        }
    }
}

fn declare_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) {
    store.declare(
        &format!("{name}.w"),
        &[cout, cin, k, k],
        Init::Xavier {
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        },
    );
    store.declare(&format!("{name}.b"), &[cout], Init::Const(0.0));
}

fn declare_hourglass(store: &mut ParamStore, prefix: &str, cfg: &HourglassConfig) {
    let base = cfg.base_channels;
    // stem: log2(stride) stride-2 convs down to the head resolution
    let stem_steps = cfg.stride.trailing_zeros() as usize;
    let mut cin = cfg.in_channels;
    for s in 0..stem_steps {
        declare_conv(store, &format!("{prefix}stem.{s}"), base, cin, 3);
        cin = base;
    }
    declare_res(store, &format!("{prefix}enc.0"), base);
    for i in 0..cfg.num_stages {
        let c_in = cfg.level_channels(i);
        let c_out = cfg.level_channels(i + 1);
        declare_conv(store, &format!("{prefix}down.{i}"), c_out, c_in, 3);
        declare_res(store, &format!("{prefix}enc.{}", i + 1), c_out);
    }
    for i in (0..cfg.num_stages).rev() {
        let c_hi = cfg.level_channels(i + 1);
        let c_lo = cfg.level_channels(i);
        declare_conv(store, &format!("{prefix}up.{i}"), c_lo, c_hi, 3);
        declare_res(store, &format!("{prefix}dec.{i}"), c_lo);
    }
    for (head, out_ch) in [
        ("heat", cfg.num_classes),
        ("size", 2usize),
        ("offset", 2usize),
    ] {
        declare_conv(store, &format!("{prefix}head.{head}.0"), base, base, 3);
        declare_conv(store, &format!("{prefix}head.{head}.1"), out_ch, base, 1);
    }
    // start the sigmoid heads near 0.1 so the focal loss is stable early
    if let Some(i) = store.index.get(&format!("{prefix}head.heat.1.b")).copied() {
        store.entries[i].data.fill(-2.19);
    }
}

fn declare_res(store: &mut ParamStore, name: &str, ch: usize) {
    declare_conv(store, &format!("{name}.c1"), ch, ch, 3);
    declare_conv(store, &format!("{name}.c2"), ch, ch, 3);
}

/// Declare every parameter the configured model needs.
pub fn build_params(cfg: &HourglassConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    declare_hourglass(&mut store, "lr.", cfg);
    declare_hourglass(&mut store, "hr.", cfg);
    if cfg.attention_mode != AttentionMode::None {
        for i in 0..cfg.num_skip_points {
            let ch = cfg.level_channels(i);
            store.declare(
                &format!("attn.l{i}.wq"),
                &[ch, cfg.embed_dim],
                Init::Xavier {
                    fan_in: ch,
                    fan_out: cfg.embed_dim,
                },
            );
            store.declare(
                &format!("attn.l{i}.wk"),
                &[ch, cfg.embed_dim],
                Init::Xavier {
                    fan_in: ch,
                    fan_out: cfg.embed_dim,
                },
            );
            store.declare(
                &format!("attn.l{i}.wv"),
                &[ch, ch],
                Init::Xavier {
                    fan_in: ch,
                    fan_out: ch,
                },
            );
            declare_conv(&mut store, &format!("attn.l{i}.fuse"), ch, ch, 3);
        }
    }
    if cfg.attention_mode == AttentionMode::Lgsa {
        let f_ch = cfg.num_classes + 4;
        declare_conv(&mut store, "pam.c1", cfg.pam_hidden, f_ch, 3);
        declare_conv(&mut store, "pam.c2", cfg.pam_hidden, cfg.pam_hidden, 3);
        declare_conv(&mut store, "pam.c3", 1, cfg.pam_hidden, 3);
    }
    Ok(store)
}

//! Model configuration, latency arithmetic and the analytic cost model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Arch {
    #[serde(rename = "AMTRF")]
    AmTrf,
    #[default]
    #[serde(rename = "EMFORMER")]
    Emformer,
}

/// Structural hyperparameters. Block sizes are in encoder frames; `frame_ms`
/// converts them to time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub left_frames: usize,
    pub center_frames: usize,
    pub right_frames: usize,
    pub memory_size: usize,
    pub frame_ms: f64,
    pub dropout: f64,
    pub eps: f64,
    pub dtype: DType,
    pub arch: Arch,
}

impl Default for ModelConfig {
    /// 24-layer, 512-wide, 8-head encoder with 640/1280/320 ms left/center/right
    /// blocks at 40 ms per frame (10 ms features stacked by 4) and a 4-slot
    /// memory bank.
    fn default() -> Self {
        Self {
            n_layers: 24,
            d_model: 512,
            n_heads: 8,
            ffn_dim: 2048,
            left_frames: 16,
            center_frames: 32,
            right_frames: 8,
            memory_size: 4,
            frame_ms: 40.0,
            dropout: 0.0,
            eps: 1e-5,
            dtype: DType::F32,
            arch: Arch::Emformer,
        }
    }
}

impl ModelConfig {
    /// Low-latency preset: 1280 ms left, 80 ms center, 40 ms right, no memory.
    pub fn low_latency() -> Self {
        Self {
            left_frames: 32,
            center_frames: 2,
            right_frames: 1,
            memory_size: 0,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn has_memory(&self) -> bool {
        self.memory_size > 0
    }

    /// Every violated invariant, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_model == 0 {
            errs.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 {
            errs.push("n_heads must be positive".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "d_model not divisible by n_heads ({} % {} != 0)",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 {
            errs.push("ffn_dim must be positive".to_string());
        }
        if self.center_frames == 0 {
            errs.push("center_frames must be at least 1".to_string());
        }
        if !(self.frame_ms.is_finite() && self.frame_ms > 0.0) {
            errs.push(format!("frame_ms must be positive, got {}", self.frame_ms));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            errs.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            errs.push(format!("eps must be positive, got {}", self.eps));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn center_ms(&self) -> f64 {
        self.center_frames as f64 * self.frame_ms
    }

    pub fn right_ms(&self) -> f64 {
        self.right_frames as f64 * self.frame_ms
    }

    pub fn left_ms(&self) -> f64 {
        self.left_frames as f64 * self.frame_ms
    }
}

pub fn validate(cfg: &ModelConfig) -> Result<()> {
    cfg.validate()
}

/// Encoder-induced latency: the look-ahead plus half the center block.
pub fn eil_ms(cfg: &ModelConfig) -> f64 {
    cfg.right_ms() + 0.5 * cfg.center_ms()
}

/// Latency of the rightmost and leftmost frame of a center block.
pub fn frame_latency_range_ms(cfg: &ModelConfig) -> (f64, f64) {
    (cfg.right_ms(), cfg.right_ms() + cfg.center_ms())
}

/// Multiply-add counts for one layer processing one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FlopReport {
    pub qkv_projection_flops: u64,
    pub attention_flops: u64,
    pub output_projection_flops: u64,
    pub ffn_flops: u64,
    pub total_flops: u64,
}

impl FlopReport {
    fn from_parts(qkv: u64, attn: u64, out: u64, ffn: u64) -> Self {
        Self {
            qkv_projection_flops: qkv,
            attention_flops: attn,
            output_projection_flops: out,
            ffn_flops: ffn,
            total_flops: qkv + attn + out + ffn,
        }
    }
}

/// Steady-state cost of one layer on one full segment (full left context,
/// full memory bank), in multiply-adds:
///
/// * `n` frame rows carry a query; `q = n + s` queries where `s = 1` when the
///   memory bank is enabled (the summary query), else 0.
/// * `k = M + L + C + R` keys.
/// * QKV projection: `(q + 2·(M + n_kv))·d²`, where `n_kv` are the frame rows
///   whose keys/values are computed this step.
/// * attention: `2·d·(q·k − s·M)`: scores and value sums over allowed pairs;
///   the summary query never scores the memory bank.
/// * output projection: `q·d²`.
/// * FFN: `2·n·d·f`.
///
/// AM-TRF recomputes the left block, so `n = n_kv = L + C + R`. Emformer reads
/// left keys/values from its cache and drops left queries, so
/// `n = n_kv = C + R`.
pub fn flops_per_segment(cfg: &ModelConfig, arch: Arch) -> FlopReport {
    let d = cfg.d_model as u64;
    let f = cfg.ffn_dim as u64;
    let (l, c, r, m) = (
        cfg.left_frames as u64,
        cfg.center_frames as u64,
        cfg.right_frames as u64,
        cfg.memory_size as u64,
    );
    let s = u64::from(m > 0);
    let n = match arch {
        Arch::AmTrf => l + c + r,
        Arch::Emformer => c + r,
    };
    let q = n + s;
    let k = m + l + c + r;
    FlopReport::from_parts(
        (q + 2 * (m + n)) * d * d,
        2 * d * (q * k - s * m),
        q * d * d,
        2 * n * d * f,
    )
}

/// Fraction of AM-TRF compute that Emformer avoids.
pub fn savings_ratio(cfg: &ModelConfig) -> f64 {
    let am = flops_per_segment(cfg, Arch::AmTrf).total_flops;
    let em = flops_per_segment(cfg, Arch::Emformer).total_flops;
    if am == 0 {
        return 0.0;
    }
    1.0 - em as f64 / am as f64
}

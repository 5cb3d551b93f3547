use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variant: the full model or one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    None,
    NoInter,
    NoIntra,
    NoAr,
    NoRaconv,
    NoFusion,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::None,
        Variant::NoInter,
        Variant::NoIntra,
        Variant::NoAr,
        Variant::NoRaconv,
        Variant::NoFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::NoInter => "no-inter",
            Variant::NoIntra => "no-intra",
            Variant::NoAr => "no-ar",
            Variant::NoRaconv => "no-raconv",
            Variant::NoFusion => "no-fusion",
        }
    }

    pub fn uses_inter(self) -> bool {
        self != Variant::NoInter
    }

    pub fn uses_intra(self) -> bool {
        self != Variant::NoIntra
    }

    pub fn uses_fusion(self) -> bool {
        self != Variant::NoFusion
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown ablation variant {s:?}; expected one of none, no-inter, no-intra, \
                     no-ar, no-raconv, no-fusion"
            ))
        })
    }
}

/// One convolution block of the region-aware convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub kernel: usize,
    pub dilation: usize,
    /// Followed by adaptive max pooling (all but the window-length block).
    pub pooled: bool,
}

impl ConvBlock {
    pub fn output_len(&self, window: usize) -> Option<usize> {
        window.checked_sub(self.dilation * (self.kernel - 1))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SefnetConfig {
    /// Number of regions `N`.
    pub regions: usize,
    /// Input window `T`.
    pub window: usize,
    /// Forecast horizon `h`.
    pub horizon: usize,
    /// LSTM hidden size `D`.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Filters per convolution block `K`.
    pub filters: usize,
    /// Adaptive pooling output size `P`.
    pub pool: usize,
    /// Inter-series embedding size `A`.
    pub attn_dim: usize,
    /// Autoregressive look-back `q`; 0 disables the linear head.
    pub ar_window: usize,
    pub dropout: f64,
    #[serde(default)]
    pub variant: Variant,
}

impl SefnetConfig {
    /// Hidden sizes as used for the desk-scale experiments.
    pub fn small(regions: usize, window: usize, horizon: usize) -> Self {
        Self {
            regions,
            window,
            horizon,
            lstm_hidden: 16,
            lstm_layers: 1,
            filters: 8,
            pool: 3,
            attn_dim: 16,
            ar_window: window.min(20),
            dropout: 0.2,
            variant: Variant::None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Convolution blocks in feature-concatenation order: local (3/1, 5/1),
    /// periodic (3/2, 5/2), global (T/1).
    pub fn conv_blocks(&self) -> Vec<ConvBlock> {
        let block = |kernel, dilation, pooled| ConvBlock {
            kernel,
            dilation,
            pooled,
        };
        match self.variant {
            Variant::NoRaconv => vec![block(3, 1, true)],
            _ => vec![
                block(3, 1, true),
                block(5, 1, true),
                block(3, 2, true),
                block(5, 2, true),
                block(self.window, 1, false),
            ],
        }
    }

    /// Width of the convolution features per region: `4PK + K` for the full
    /// block set, `PK` with only the 3-wide block.
    pub fn feature_width(&self) -> usize {
        self.conv_blocks()
            .iter()
            .map(|b| {
                if b.pooled {
                    self.pool * self.filters
                } else {
                    self.filters
                }
            })
            .sum()
    }

    /// Effective AR look-back after the variant is applied.
    pub fn effective_ar_window(&self) -> usize {
        if self.variant == Variant::NoAr {
            0
        } else {
            self.ar_window
        }
    }

    /// Width of the fused embedding fed to the dense layer.
    pub fn fused_width(&self) -> usize {
        let mut w = 0;
        if self.variant.uses_inter() {
            w += self.attn_dim;
        }
        if self.variant.uses_intra() {
            w += self.lstm_hidden;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("regions", self.regions),
            ("window", self.window),
            ("horizon", self.horizon),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("filters", self.filters),
            ("pool", self.pool),
            ("attn_dim", self.attn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.ar_window > self.window {
            return Err(Error::config(format!(
                "AR look-back {} exceeds window {}",
                self.ar_window, self.window
            )));
        }
        if self.variant.uses_inter() {
            for b in self.conv_blocks() {
                let field = b.dilation * (b.kernel - 1) + 1;
                let out = b.output_len(self.window).filter(|_| self.window >= field);
                match out {
                    None => {
                        return Err(Error::config(format!(
                            "window {} is shorter than the receptive field of kernel {} \
                             with dilation {}; requires T >= {field}",
                            self.window, b.kernel, b.dilation
                        )))
                    }
                    Some(len) if b.pooled && len < self.pool => {
                        return Err(Error::config(format!(
                            "pool size {} exceeds the {len} outputs of kernel {} with dilation {}; \
                             requires T >= {}",
                            self.pool,
                            b.kernel,
                            b.dilation,
                            field + self.pool - 1
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

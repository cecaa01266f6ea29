use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where channel dropout is applied (after a block's second BN + ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutSites {
    /// The two deepest encoder blocks and the bottleneck.
    #[default]
    DeepEncoderAndBottleneck,
    AllBlocks,
    None,
}

impl DropoutSites {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutSites::DeepEncoderAndBottleneck => "deep-encoder-and-bottleneck",
            DropoutSites::AllBlocks => "all-blocks",
            DropoutSites::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "deep-encoder-and-bottleneck" => Ok(DropoutSites::DeepEncoderAndBottleneck),
            "all-blocks" => Ok(DropoutSites::AllBlocks),
            "none" => Ok(DropoutSites::None),
            other => Err(Error::Parameter(format!("unknown dropout sites {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of down-sampling stages.
    pub depth: usize,
    /// Channels of the first encoder block; doubled at each stage.
    pub base_channels: usize,
    pub dropout_p: f64,
    pub dropout_sites: DropoutSites,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            depth: 4,
            base_channels: 64,
            dropout_p: 0.5,
            dropout_sites: DropoutSites::default(),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Parameter("depth must be at least 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Parameter("channel counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Parameter(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.depth > 16 || self.base_channels.checked_shl(self.depth as u32 + 1).is_none() {
            return Err(Error::Parameter("depth too large".into()));
        }
        Ok(())
    }

    /// Channels of encoder stage `i`; `i == depth` is the bottleneck.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub(crate) fn encoder_dropout(&self, i: usize) -> bool {
        match self.dropout_sites {
            DropoutSites::DeepEncoderAndBottleneck => i + 2 >= self.depth,
            DropoutSites::AllBlocks => true,
            DropoutSites::None => false,
        }
    }

    pub(crate) fn bottleneck_dropout(&self) -> bool {
        self.dropout_sites != DropoutSites::None
    }

    pub(crate) fn decoder_dropout(&self) -> bool {
        self.dropout_sites == DropoutSites::AllBlocks
    }
}

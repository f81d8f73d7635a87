use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameter groups are shared across domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One full network per domain.
    Individual,
    /// Frozen base feature extractor, per-domain classifier.
    ClassifierOnly,
    /// Shared depthwise filters, per-domain pointwise filters.
    ShareDepthwise,
    /// Shared pointwise filters, per-domain depthwise filters.
    SharePointwise,
}

impl SharingMode {
    pub const ALL: [SharingMode; 4] = [
        SharingMode::Individual,
        SharingMode::ClassifierOnly,
        SharingMode::ShareDepthwise,
        SharingMode::SharePointwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SharingMode::Individual => "individual",
            SharingMode::ClassifierOnly => "classifier_only",
            SharingMode::ShareDepthwise => "share_depthwise",
            SharingMode::SharePointwise => "share_pointwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sharing mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroBlock {
    pub width: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub macro_blocks: Vec<MacroBlock>,
    pub input_channels: usize,
    pub input_resolution: usize,
    pub stem_width: usize,
    pub kernel: usize,
    pub sharing: SharingMode,
    /// Duplicate the final separable layer (depthwise and pointwise) per domain.
    pub last_layer_domain_specific: bool,
}

/// One depthwise-separable layer of the plan. Indices start at 1; 0 is the stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SepLayer {
    pub index: usize,
    pub macro_block: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

/// Residual block: two separable layers plus an optional 1x1 shortcut projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub first: SepLayer,
    pub second: SepLayer,
    pub projection: Option<Projection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub index: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ModelConfig {
    /// 3 macro blocks x 2 residual blocks, widths 16/32/64, 3x32x32 input.
    pub fn desk() -> Self {
        Self {
            macro_blocks: vec![
                MacroBlock {
                    width: 16,
                    blocks: 2,
                },
                MacroBlock {
                    width: 32,
                    blocks: 2,
                },
                MacroBlock {
                    width: 64,
                    blocks: 2,
                },
            ],
            input_channels: 3,
            input_resolution: 32,
            stem_width: 16,
            kernel: 3,
            sharing: SharingMode::SharePointwise,
            last_layer_domain_specific: false,
        }
    }

    /// ResNet-26 layout: 3 macro blocks x 4 residual blocks x 2 separable
    /// layers, widened to 96/192/384 channels.
    pub fn paper() -> Self {
        Self {
            macro_blocks: vec![
                MacroBlock {
                    width: 96,
                    blocks: 4,
                },
                MacroBlock {
                    width: 192,
                    blocks: 4,
                },
                MacroBlock {
                    width: 384,
                    blocks: 4,
                },
            ],
            input_channels: 3,
            input_resolution: 64,
            stem_width: 96,
            kernel: 3,
            sharing: SharingMode::SharePointwise,
            last_layer_domain_specific: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn with_sharing(mut self, sharing: SharingMode) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.macro_blocks.is_empty() {
            return bad("at least one macro block is required".into());
        }
        if let Some((i, mb)) = self
            .macro_blocks
            .iter()
            .enumerate()
            .find(|(_, mb)| mb.width == 0 || mb.blocks == 0)
        {
            return bad(format!(
                "macro block {i} has width {} and {} blocks",
                mb.width, mb.blocks
            ));
        }
        if self.input_channels == 0 || self.stem_width == 0 {
            return bad("input_channels and stem_width must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        let min_res = 1usize << (self.macro_blocks.len() - 1);
        if self.input_resolution < min_res {
            return bad(format!(
                "input resolution {} is too small for {} downsampling stages",
                self.input_resolution,
                self.macro_blocks.len() - 1
            ));
        }
        Ok(())
    }

    pub fn num_separable_layers(&self) -> usize {
        2 * self.macro_blocks.iter().map(|m| m.blocks).sum::<usize>()
    }

    /// Stem + separable layers + classifier.
    pub fn num_weight_layers(&self) -> usize {
        self.num_separable_layers() + 2
    }

    pub fn last_width(&self) -> usize {
        self.macro_blocks
            .last()
            .map(|m| m.width)
            .unwrap_or(self.stem_width)
    }

    /// Residual blocks in execution order. Macro blocks after the first
    /// downsample with stride 2 on their first separable layer; a block whose
    /// input and output shapes differ gets a projection shortcut.
    pub fn blocks(&self) -> Vec<ResBlock> {
        let mut out = Vec::new();
        let mut cin = self.stem_width;
        let mut index = 1;
        let mut proj = 0;
        for (mi, mb) in self.macro_blocks.iter().enumerate() {
            for bi in 0..mb.blocks {
                let stride = if mi > 0 && bi == 0 { 2 } else { 1 };
                let first = SepLayer {
                    index,
                    macro_block: mi,
                    cin,
                    cout: mb.width,
                    stride,
                };
                let second = SepLayer {
                    index: index + 1,
                    macro_block: mi,
                    cin: mb.width,
                    cout: mb.width,
                    stride: 1,
                };
                let projection = (stride != 1 || cin != mb.width).then(|| {
                    proj += 1;
                    Projection {
                        index: proj - 1,
                        cin,
                        cout: mb.width,
                        stride,
                    }
                });
                out.push(ResBlock {
                    first,
                    second,
                    projection,
                });
                index += 2;
                cin = mb.width;
            }
        }
        out
    }

    pub fn sep_layers(&self) -> Vec<SepLayer> {
        self.blocks()
            .into_iter()
            .flat_map(|b| [b.first, b.second])
            .collect()
    }

    pub fn projections(&self) -> Vec<Projection> {
        self.blocks()
            .into_iter()
            .filter_map(|b| b.projection)
            .collect()
    }

    /// Spatial size after the stem (stride 1) and every downsampling stage.
    pub fn final_resolution(&self) -> usize {
        let mut r = self.input_resolution;
        for _ in 1..self.macro_blocks.len() {
            r = r.div_ceil(2);
        }
        r
    }
}

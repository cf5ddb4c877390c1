use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, BlockConfig, StageConfig, STAGES};

/// Searchable dimensions of one stage. Option lists are sorted descending,
/// so index 0 is always the largest value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpace {
    pub embed_dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub hiddens: Vec<usize>,
    pub head_dim: usize,
    /// One flag per block slot; `true` slots may be removed.
    pub skippable: Vec<bool>,
}

impl StageSpace {
    pub fn slots(&self) -> usize {
        self.skippable.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceDef {
    pub name: String,
    pub stem_channels: usize,
    pub stages: [StageSpace; STAGES],
    pub num_classes: usize,
    pub input_resolution: usize,
    /// Upper bound on MACs at `input_resolution`; `None` is unconstrained.
    pub max_macs: Option<u64>,
}

/// One position of the flat gene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneSlot {
    Embed { stage: usize },
    Keep { stage: usize, slot: usize },
    Heads { stage: usize, slot: usize },
    Hidden { stage: usize, slot: usize },
}

/// Option list of a keep gene: index 0 keeps the block.
pub const KEEP_OPTIONS: [bool; 2] = [true, false];

fn pattern(slots: usize) -> Vec<bool> {
    (0..slots).map(|i| i % 2 == 1).collect()
}

fn stage(embed: &[usize], heads: &[usize], hiddens: &[usize], head_dim: usize, slots: usize) -> StageSpace {
    StageSpace {
        embed_dims: embed.to_vec(),
        heads: heads.to_vec(),
        hiddens: hiddens.to_vec(),
        head_dim,
        skippable: pattern(slots),
    }
}

fn tiny_space() -> SearchSpaceDef {
    SearchSpaceDef {
        name: "vit-resnas-tiny".into(),
        stem_channels: 24,
        stages: [
            stage(&[256, 224, 192, 176, 160], &[6, 5, 4, 3], &[768, 704, 640, 576, 512, 448, 384], 32, 6),
            stage(&[512, 448, 384, 352, 320], &[12, 10, 8, 6], &[1536, 1408, 1280, 1152, 1024, 896, 768], 48, 6),
            stage(&[1024, 896, 768, 704, 640], &[12, 10, 8, 6], &[3072, 2816, 2560, 2304, 2048, 1792, 1536], 64, 6),
        ],
        num_classes: 1000,
        input_resolution: 224,
        max_macs: Some(1_800_000_000),
    }
}

fn small_medium_space(name: &str, max_macs: u64) -> SearchSpaceDef {
    SearchSpaceDef {
        name: name.into(),
        stem_channels: 24,
        stages: [
            stage(&[320, 280, 240, 220, 200], &[8, 7, 6, 5], &[960, 880, 800, 720, 640, 560, 480], 32, 7),
            stage(&[640, 560, 480, 440, 400], &[16, 14, 12, 10], &[1920, 1760, 1600, 1440, 1280, 1120, 960], 48, 7),
            stage(&[1280, 1120, 960, 880, 800], &[16, 14, 12, 10], &[3840, 3520, 3200, 2880, 2560, 2240, 1920], 64, 7),
        ],
        num_classes: 1000,
        input_resolution: 224,
        max_macs: Some(max_macs),
    }
}

/// Desk-scale space at 112 pixels: four slots per stage (two skippable),
/// widths up to 64, ten classes.
fn toy_space() -> SearchSpaceDef {
    SearchSpaceDef {
        name: "toy".into(),
        stem_channels: 4,
        stages: [
            stage(&[16, 12], &[2, 1], &[32, 24, 16], 8, 4),
            stage(&[32, 24], &[4, 2], &[64, 48, 32], 8, 4),
            stage(&[64, 48], &[4, 2], &[128, 96, 64], 16, 4),
        ],
        num_classes: 10,
        input_resolution: 112,
        max_macs: Some(3_000_000),
    }
}

pub const BUILTIN_SPACES: [&str; 4] = ["vit-resnas-tiny", "vit-resnas-small", "vit-resnas-medium", "toy"];

pub fn builtin_space(name: &str) -> Option<SearchSpaceDef> {
    match name {
        "vit-resnas-tiny" => Some(tiny_space()),
        "vit-resnas-small" => Some(small_medium_space("vit-resnas-small", 2_800_000_000)),
        "vit-resnas-medium" => Some(small_medium_space("vit-resnas-medium", 4_500_000_000)),
        "toy" => Some(toy_space()),
        _ => None,
    }
}

impl SearchSpaceDef {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::contract(format!("search space `{}`: {d}", self.name)));
        for (s, st) in self.stages.iter().enumerate() {
            for (what, list) in [("embed_dims", &st.embed_dims), ("heads", &st.heads), ("hiddens", &st.hiddens)] {
                if list.is_empty() || list.contains(&0) {
                    return bad(format!("stage {s} {what} must be nonempty and positive"));
                }
                if list.windows(2).any(|w| w[0] <= w[1]) {
                    return bad(format!("stage {s} {what} must be strictly descending: {list:?}"));
                }
            }
            if st.head_dim == 0 || st.slots() == 0 {
                return bad(format!("stage {s} needs a positive head_dim and at least one slot"));
            }
            if s > 0 {
                let prev_max = self.stages[s - 1].embed_dims[0];
                let min = *st.embed_dims.last().unwrap();
                if prev_max >= min {
                    return bad(format!("stage {s} minimum width {min} does not exceed stage {} maximum {prev_max}", s - 1));
                }
            }
        }
        self.max_config().validate()
    }

    /// The super-network: every slot present at its widest setting.
    pub fn max_config(&self) -> ArchConfig {
        let stages = self.stages.each_ref().map(|st| StageConfig {
            embed_dim: st.embed_dims[0],
            blocks: vec![BlockConfig::new(st.heads[0], st.head_dim, st.hiddens[0]); st.slots()],
        });
        ArchConfig {
            stem_channels: self.stem_channels,
            stages,
            num_classes: self.num_classes,
            input_resolution: self.input_resolution,
        }
    }

    /// Positions of the flat gene: the three embedding widths, then per
    /// stage and slot an optional keep flag, heads and hidden size.
    pub fn gene_layout(&self) -> Vec<GeneSlot> {
        let mut out: Vec<GeneSlot> = (0..STAGES).map(|stage| GeneSlot::Embed { stage }).collect();
        for (stage, st) in self.stages.iter().enumerate() {
            for (slot, &skippable) in st.skippable.iter().enumerate() {
                if skippable {
                    out.push(GeneSlot::Keep { stage, slot });
                }
                out.push(GeneSlot::Heads { stage, slot });
                out.push(GeneSlot::Hidden { stage, slot });
            }
        }
        out
    }

    /// Number of options at a gene position.
    pub fn options(&self, slot: GeneSlot) -> usize {
        match slot {
            GeneSlot::Embed { stage } => self.stages[stage].embed_dims.len(),
            GeneSlot::Keep { .. } => KEEP_OPTIONS.len(),
            GeneSlot::Heads { stage, .. } => self.stages[stage].heads.len(),
            GeneSlot::Hidden { stage, .. } => self.stages[stage].hiddens.len(),
        }
    }

    pub fn option_counts(&self) -> Vec<usize> {
        self.gene_layout().into_iter().map(|g| self.options(g)).collect()
    }

    /// Total number of distinct genes, saturating at `u128::MAX`.
    pub fn cardinality(&self) -> u128 {
        self.option_counts().iter().fold(1u128, |acc, &n| acc.saturating_mul(n as u128))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("space serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let space: SearchSpaceDef = serde_json::from_str(s)?;
        space.validate()?;
        Ok(space)
    }
}

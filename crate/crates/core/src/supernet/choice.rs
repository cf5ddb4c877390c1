use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, BlockConfig, StageConfig, STAGES};
use crate::search::SearchSpaceDef;

/// Settings of one block slot. `heads` and `hidden` are carried even when
/// the slot is dropped so that every choice maps to a full gene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotChoice {
    pub keep: bool,
    pub heads: usize,
    pub hidden: usize,
}

/// One sub-network of a search space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubNetChoice {
    pub embed: [usize; STAGES],
    pub slots: [Vec<SlotChoice>; STAGES],
}

impl SubNetChoice {
    /// Every slot kept at its largest width.
    pub fn maximal(space: &SearchSpaceDef) -> Self {
        SubNetChoice {
            embed: space.stages.each_ref().map(|s| s.embed_dims[0]),
            slots: space.stages.each_ref().map(|s| {
                vec![SlotChoice { keep: true, heads: s.heads[0], hidden: s.hiddens[0] }; s.slots()]
            }),
        }
    }

    pub fn validate(&self, space: &SearchSpaceDef) -> Result<()> {
        for (s, st) in space.stages.iter().enumerate() {
            if !st.embed_dims.contains(&self.embed[s]) {
                return Err(Error::contract(format!(
                    "stage {s} embed {} not in {:?}",
                    self.embed[s], st.embed_dims
                )));
            }
            if self.slots[s].len() != st.slots() {
                return Err(Error::contract(format!(
                    "stage {s} has {} slot choices for {} slots",
                    self.slots[s].len(),
                    st.slots()
                )));
            }
            for (j, c) in self.slots[s].iter().enumerate() {
                if !c.keep && !st.skippable[j] {
                    return Err(Error::contract(format!("stage {s} slot {j} is not skippable")));
                }
                if !st.heads.contains(&c.heads) || !st.hiddens.contains(&c.hidden) {
                    return Err(Error::contract(format!(
                        "stage {s} slot {j}: heads {} / hidden {} outside {:?} / {:?}",
                        c.heads, c.hidden, st.heads, st.hiddens
                    )));
                }
            }
        }
        Ok(())
    }

    /// Slot indices of the kept blocks of `stage`, in order.
    pub fn kept_slots(&self, stage: usize) -> Vec<usize> {
        self.slots[stage].iter().enumerate().filter(|(_, c)| c.keep).map(|(j, _)| j).collect()
    }

    /// The standalone architecture this choice describes.
    pub fn arch(&self, space: &SearchSpaceDef) -> ArchConfig {
        let stages = std::array::from_fn(|s| StageConfig {
            embed_dim: self.embed[s],
            blocks: self.slots[s]
                .iter()
                .filter(|c| c.keep)
                .map(|c| BlockConfig::new(c.heads, space.stages[s].head_dim, c.hidden))
                .collect(),
        });
        ArchConfig {
            stem_channels: space.stem_channels,
            stages,
            num_classes: space.num_classes,
            input_resolution: space.input_resolution,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("choice serializes")
    }
}

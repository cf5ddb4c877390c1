//! Named architectures: ViT-Res-Tiny and the three searched ViT-ResNAS
//! networks, all at 224 pixels with 1000 classes.

use super::config::{vit_res_tiny_config, ArchConfig, BlockConfig, StageConfig};

pub const FIXTURE_NAMES: [&str; 4] = ["vit-res-tiny", "vit-resnas-tiny", "vit-resnas-small", "vit-resnas-medium"];

/// Stage-wise head widths of the searched networks.
const HEAD_DIMS: [usize; 3] = [32, 48, 64];

fn searched(embed: [usize; 3], blocks: [&[(usize, usize)]; 3]) -> ArchConfig {
    let stage = |i: usize| StageConfig {
        embed_dim: embed[i],
        blocks: blocks[i].iter().map(|&(h, f)| BlockConfig::new(h, HEAD_DIMS[i], f)).collect(),
    };
    ArchConfig { stem_channels: 24, stages: [stage(0), stage(1), stage(2)], num_classes: 1000, input_resolution: 224 }
}

pub fn vit_resnas_tiny() -> ArchConfig {
    searched(
        [176, 352, 704],
        [
            &[(3, 704), (3, 576), (3, 640), (4, 576), (4, 704)],
            &[(10, 1408), (8, 1408), (8, 1280), (8, 1408), (10, 1280), (10, 1024)],
            &[(10, 2560), (10, 1792), (10, 2816), (8, 2816), (8, 2560)],
        ],
    )
}

pub fn vit_resnas_small() -> ArchConfig {
    searched(
        [220, 440, 880],
        [
            &[(5, 880), (5, 880), (7, 800), (5, 720), (5, 720), (5, 720)],
            &[(10, 1760), (10, 1440), (10, 1920), (10, 1600), (12, 1600), (12, 1440)],
            &[(16, 3200), (12, 3200), (16, 2880), (12, 2240), (14, 2560)],
        ],
    )
}

pub fn vit_resnas_medium() -> ArchConfig {
    searched(
        [240, 640, 880],
        [
            &[(7, 960), (6, 960), (7, 800), (8, 960), (7, 880), (8, 880), (6, 800)],
            &[(10, 1120), (14, 1760), (14, 1920), (16, 1760), (14, 1440), (16, 1760), (16, 1920)],
            &[(16, 3200), (10, 3840), (16, 3840), (12, 3200), (16, 3520), (14, 3520)],
        ],
    )
}

pub fn fixture(name: &str) -> Option<ArchConfig> {
    match name {
        "vit-res-tiny" => Some(vit_res_tiny_config()),
        "vit-resnas-tiny" => Some(vit_resnas_tiny()),
        "vit-resnas-small" => Some(vit_resnas_small()),
        "vit-resnas-medium" => Some(vit_resnas_medium()),
        _ => None,
    }
}

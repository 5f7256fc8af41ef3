//! Expansion of the single run seed into per-stage seeds.
//!
//! `stage_seed(seed, stage) = splitmix64(seed ^ splitmix64(stage as u64 + 1))`.
//! Stages are numbered by [`Stage`]; rounds and grid points derive further
//! seeds with [`derive`] as stated in [`SEED_RULE`].

/// Pipeline stages that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Partition = 0,
    Dictionary = 1,
    Mlp = 2,
    Baseline = 3,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    derive(seed, stage as u64)
}

/// Human-readable statement of the rule, echoed in run reports.
pub const SEED_RULE: &str = "stage_seed = splitmix64(seed ^ splitmix64(stage + 1)); \
stages: partition=0, dictionary=1, mlp=2, baseline=3; \
dictionary and mlp seeds of round r are derive(stage_seed, r); \
grid point g replaces seed by derive(seed, 1000 + g) for those two stages";

//! Deterministic seed derivation. Every RNG in the crate is seeded from a
//! value produced here, so a run is a pure function of its master seed:
//! per-task streams are derived from (master seed, stream tag, index) by
//! counter mixing, never from sampling order or thread scheduling.

/// Stream tag for training-task generation.
pub const STREAM_TRAIN_TASKS: u64 = 0x7452_4149_4e00_0001; // "TRAIN", 1
/// Stream tag for test-task generation (disjoint from training for any index).
pub const STREAM_TEST_TASKS: u64 = 0x5445_5354_0000_0002; // "TEST", 2
/// Stream tag for mini-batch shuffling during per-task training.
pub const STREAM_SHUFFLE: u64 = 0x5348_5546_0000_0003;
/// Stream tag for the meta-parameter weight initialization.
pub const STREAM_META_INIT: u64 = 0x4d49_4e49_0000_0004;
/// Stream tag for meta-training task-batch sampling.
pub const STREAM_META_BATCH: u64 = 0x4d42_4154_0000_0005;
/// Stream tag for per-task neural-CV weight initialization.
pub const STREAM_NCV_INIT: u64 = 0x4e43_5649_0000_0006;

/// One round of the splitmix64 output function: a cheap bijective mixer
/// with good avalanche, the standard choice for spreading structured
/// counters into seed material.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `stream`, element `index`, under `master`. Successive
/// mixing rounds keep nearby (stream, index) pairs statistically unrelated.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

//! Independent seed streams derived from one run seed.
//!
//! Every random draw in the pipeline is keyed by (run seed, purpose, epoch,
//! index), so data order, augmentation and dropout never share a stream and
//! resuming needs no saved generator state.

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, purpose: &str, epoch: u64, index: u64) -> u64 {
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    mix(mix(mix(mix(seed) ^ tag) ^ epoch) ^ index)
}

//! Order-independent seed derivation.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over length-prefixed parts, finalized with SplitMix64.
pub fn hash_parts(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for b in (part.len() as u64).to_le_bytes().iter().chain(part.iter()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(h)
}

pub fn trajectory_seed(run_seed: u64, step: u64, task_id: &str, trajectory_index: u32) -> u64 {
    hash_parts(&[
        &run_seed.to_le_bytes(),
        &step.to_le_bytes(),
        task_id.as_bytes(),
        &trajectory_index.to_le_bytes(),
    ])
}

pub fn turn_seed(trajectory_seed: u64, turn_index: u32) -> u64 {
    hash_parts(&[&trajectory_seed.to_le_bytes(), &turn_index.to_le_bytes()])
}

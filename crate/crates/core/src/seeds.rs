//! Deterministic seed derivation so layers, replications, and trials get
//! independent, platform-stable random streams.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with two stream coordinates (e.g. layer and
/// replication index) into a new seed.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(master ^ splitmix(stream)) ^ splitmix(index.wrapping_add(0x51ed_270b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_separates_streams() {
        assert_eq!(derive(7, 1, 2), derive(7, 1, 2));
        assert_ne!(derive(7, 1, 2), derive(7, 1, 3));
        assert_ne!(derive(7, 1, 2), derive(7, 2, 2));
        assert_ne!(derive(7, 1, 2), derive(8, 1, 2));
    }
}

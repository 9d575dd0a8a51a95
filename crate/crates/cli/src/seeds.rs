/// Per-suite seed: FNV-1a of the suite name, xor the global seed, through one
/// splitmix64 round.
pub fn suite_seed(global: u64, suite: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in suite.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ global)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_values() {
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_ne!(suite_seed(0, "davies"), suite_seed(0, "twist"));
        assert_ne!(suite_seed(0, "davies"), suite_seed(1, "davies"));
        assert_eq!(suite_seed(7, "davies"), suite_seed(7, "davies"));
    }
}

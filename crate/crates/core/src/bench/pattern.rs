//! Deterministic per-slot byte patterns.
//!
//! Every aligned 8-byte word is a 64-bit mix of (seed, slot, iteration,
//! word offset) in little-endian order, except the first four bytes of each 16-byte granule, which
//! carry the slot number masked by a mix of (seed, iteration, position).
//! Pages are at least 16-byte aligned, so two slots that share memory share
//! a granule head at the same position, where their patterns must differ.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key(seed: u64, slot: u64, iteration: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(slot)) ^ iteration.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

fn head_mask(seed: u64, iteration: u64) -> u32 {
    key(seed, u64::MAX, iteration) as u32
}

fn word_at(key: u64, head: u32, slot: u32, word: usize) -> [u8; 8] {
    let mut bytes = splitmix(key ^ word as u64).to_le_bytes();
    if word % 2 == 0 {
        bytes[..4].copy_from_slice(&(slot ^ head).to_le_bytes());
    }
    bytes
}

/// Pattern byte of `slot` at `offset` in `iteration`.
pub fn pattern_byte(seed: u64, slot: u32, iteration: u32, offset: usize) -> u8 {
    let k = key(seed, slot as u64, iteration as u64);
    word_at(k, head_mask(seed, iteration as u64), slot, offset / 8)[offset % 8]
}

pub fn write_pattern(buf: &mut [u8], seed: u64, slot: u32, iteration: u32) {
    let k = key(seed, slot as u64, iteration as u64);
    let head = head_mask(seed, iteration as u64);
    for (word, out) in buf.chunks_mut(8).enumerate() {
        let bytes = word_at(k, head, slot, word);
        out.copy_from_slice(&bytes[..out.len()]);
    }
}

/// Offset of the first byte that does not match the pattern.
pub fn verify_pattern(buf: &[u8], seed: u64, slot: u32, iteration: u32) -> Result<(), usize> {
    let k = key(seed, slot as u64, iteration as u64);
    let head = head_mask(seed, iteration as u64);
    for (word, got) in buf.chunks(8).enumerate() {
        let want = word_at(k, head, slot, word);
        if let Some(i) = got.iter().zip(&want).position(|(a, b)| a != b) {
            return Err(word * 8 + i);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn write_then_verify() {
        let mut buf = vec![0u8; 1000];
        write_pattern(&mut buf, 7, 1, 3);
        assert_eq!(verify_pattern(&buf, 7, 1, 3), Ok(()));
        assert_eq!(verify_pattern(&buf, 7, 2, 3), Err(0));
        assert_eq!(verify_pattern(&buf, 7, 1, 4), Err(0));
        assert_eq!(buf[10], pattern_byte(7, 1, 3, 10));
    }

    #[test]
    fn single_flipped_byte_is_located() {
        let mut buf = vec![0u8; 4096];
        write_pattern(&mut buf, 1, 99, 0);
        buf[2345] ^= 0x10;
        assert_eq!(verify_pattern(&buf, 1, 99, 0), Err(2345));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let mut a = vec![0u8; 256];
        let mut b = vec![0u8; 256];
        write_pattern(&mut a, 42, 5, 1);
        write_pattern(&mut b, 42, 5, 1);
        assert_eq!(a, b);
        write_pattern(&mut b, 43, 5, 1);
        assert_ne!(a, b);
    }

    /// Aliased fixture: two slots write into overlapping windows of one
    /// buffer; at least one of them must fail verification.
    fn aliased(len: usize, shift: usize, a: u32, b: u32) -> bool {
        let mut mem = vec![0u8; len + shift];
        write_pattern(&mut mem[..len], 0, a, 0);
        write_pattern(&mut mem[shift..shift + len], 0, b, 0);
        verify_pattern(&mem[..len], 0, a, 0).is_err()
            || verify_pattern(&mem[shift..], 0, b, 0).is_err()
    }

    #[test]
    fn identical_regions_are_detected_for_every_slot_pair_nearby() {
        for a in 0..64 {
            for b in 0..64 {
                if a != b {
                    assert!(aliased(16, 0, a, b));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn overlaps_are_detected(
            granules in 1usize..64,
            shift_granules in 0usize..63,
            a in any::<u32>(),
            b in any::<u32>(),
        ) {
            prop_assume!(a != b && shift_granules < granules);
            prop_assert!(aliased(granules * 16, shift_granules * 16, a, b));
        }
    }
}

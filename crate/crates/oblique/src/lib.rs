//! Desk-scale pipeline around `oblique-core`: synthetic datasets, training,
//! baking to an asset bundle, marched rendering, benchmarks and a static
//! file server for the viewer.

pub mod bench;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod render;
pub mod serve;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    #[test]
    fn fnv_reference_values() {
        assert_eq!(super::fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(super::fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}

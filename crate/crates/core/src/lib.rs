pub mod audio;
pub mod cli;
pub mod distiller;
pub mod encoder;
pub mod gradsuite;
pub mod masking;
pub mod numerics;
pub mod probe;
pub mod synth;
pub mod trainer;

/// Mixes a base seed with stream identifiers (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

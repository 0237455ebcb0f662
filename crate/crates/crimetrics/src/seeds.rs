//! Deterministic seed derivation for parallel simulation.
//!
//! Every stochastic routine in the crate seeds its own RNG from a master seed
//! and a structured key (district, year, category, replicate index, ...).
//! Cells can then run on any number of threads in any order and still produce
//! bit-identical output, because no RNG stream is ever shared.
//!
//! The derivation is a fixed FNV-1a/splitmix64 construction rather than
//! `std::hash`, whose output is allowed to change between releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Accumulates a structured key into a 64-bit seed.
#[derive(Clone, Copy, Debug)]
pub struct SeedKey {
    state: u64,
}

impl SeedKey {
    pub fn new(master_seed: u64) -> Self {
        let state = fnv1a(FNV_OFFSET, &master_seed.to_le_bytes());
        SeedKey { state }
    }

    /// Folds a string component into the key. Length-prefixed so that
    /// ("ab", "c") and ("a", "bc") derive different seeds.
    #[must_use]
    pub fn with_str(self, part: &str) -> Self {
        let state = fnv1a(self.state, &(part.len() as u64).to_le_bytes());
        SeedKey {
            state: fnv1a(state, part.as_bytes()),
        }
    }

    #[must_use]
    pub fn with_u64(self, part: u64) -> Self {
        SeedKey {
            state: fnv1a(self.state, &part.to_le_bytes()),
        }
    }

    #[must_use]
    pub fn with_i64(self, part: i64) -> Self {
        self.with_u64(part as u64)
    }

    /// Finalizes to a seed with the splitmix64 mixer so that keys differing
    /// in a single low bit map to well-separated seeds.
    pub fn seed(self) -> u64 {
        splitmix64(self.state)
    }
}

/// Seed for a simulation cell identified by (district, year, category).
pub fn cell_seed(master_seed: u64, district_id: &str, year: i32, category: &str) -> u64 {
    SeedKey::new(master_seed)
        .with_str(district_id)
        .with_i64(i64::from(year))
        .with_str(category)
        .seed()
}

/// Seed for replicate `index` of a named experiment.
pub fn replicate_seed(master_seed: u64, experiment: &str, index: u64) -> u64 {
    SeedKey::new(master_seed)
        .with_str(experiment)
        .with_u64(index)
        .seed()
}

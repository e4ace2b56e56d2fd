use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent stream seeds from counters.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based key for a dropout mask: the same key always yields the same
/// mask, independent of thread count or call order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, layer: u64, step: u64) -> Self {
        Self { seed, layer, step }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let k = splitmix64(self.seed ^ splitmix64(self.layer ^ splitmix64(self.step)));
        ChaCha8Rng::seed_from_u64(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_stream() {
        let k = DropoutKey::new(7, 2, 99);
        let a: Vec<u32> = (0..16).map({
            let mut r = k.rng();
            move |_| r.gen()
        }).collect();
        let b: Vec<u32> = (0..16).map({
            let mut r = k.rng();
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_layers_differ() {
        let mut a = DropoutKey::new(7, 1, 0).rng();
        let mut b = DropoutKey::new(7, 2, 0).rng();
        assert_ne!(a.gen::<u64>(), b.gen::<u64>());
    }
}

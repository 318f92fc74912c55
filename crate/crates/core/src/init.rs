use rand::Rng;

use crate::tensor::{Scalar, Shape, Tensor};

/// Kaiming-uniform fan-in init for a `[out, in, kh, kw]` conv weight:
/// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: impl Into<Shape>, rng: &mut R) -> Tensor<T> {
    let shape = shape.into();
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Splits one seed into independent, name-addressed streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix64 finalisation with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = kaiming_uniform([16, 8, 3, 3], &mut rng);
        let bound = (6.0f64 / 72.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.9));
    }

    #[test]
    fn derived_seeds_differ_by_label_and_seed() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }
}

use std::collections::HashMap;

use privsynth_core::imaging::{PixelFormat, RasterImage};
use privsynth_core::metrics::{entropy_bits, image_mi_bits};
use proptest::prelude::*;

/// H(A) + H(B) - H(A, B) from hash-map counts with natural logs.
fn brute_mi(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let h = |counts: Vec<usize>| -> f64 {
        counts
            .into_iter()
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum::<f64>()
            / std::f64::consts::LN_2
    };
    let mut ca: HashMap<u8, usize> = HashMap::new();
    let mut cb: HashMap<u8, usize> = HashMap::new();
    let mut cj: HashMap<(u8, u8), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *cj.entry((x, y)).or_default() += 1;
    }
    h(ca.into_values().collect()) + h(cb.into_values().collect()) - h(cj.into_values().collect())
}

fn gray(data: Vec<u8>) -> RasterImage {
    RasterImage::from_raw(8, 8, PixelFormat::Gray8, data).unwrap()
}

/// Pixel values drawn from a small alphabet so joint counts repeat.
fn pixels() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        prop::collection::vec(any::<u8>(), 64),
        prop::collection::vec(0u8..4, 64),
        prop::collection::vec(prop::sample::select(vec![0u8, 17, 200, 255]), 64),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force(a in pixels(), b in pixels()) {
        let mi = image_mi_bits(&gray(a.clone()), &gray(b.clone())).unwrap();
        let oracle = brute_mi(&a, &b).max(0.0);
        prop_assert!((mi - oracle).abs() <= 1e-12, "{mi} vs {oracle}");
    }

    #[test]
    fn symmetric_and_bounded(a in pixels(), b in pixels()) {
        let (ia, ib) = (gray(a), gray(b));
        let ab = image_mi_bits(&ia, &ib).unwrap();
        let ba = image_mi_bits(&ib, &ia).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= entropy_bits(&ia).min(entropy_bits(&ib)) + 1e-12);
    }

    #[test]
    fn self_information_is_entropy(a in pixels()) {
        let ia = gray(a);
        prop_assert!((image_mi_bits(&ia, &ia).unwrap() - entropy_bits(&ia)).abs() <= 1e-12);
    }
}

#[test]
fn known_values() {
    let half: Vec<u8> = (0..64).map(|i| if i < 32 { 0 } else { 255 }).collect();
    let stripes: Vec<u8> = (0..64).map(|i| if i % 2 == 0 { 0 } else { 255 }).collect();
    assert_eq!(image_mi_bits(&gray(half.clone()), &gray(half.clone())).unwrap(), 1.0);
    assert_eq!(image_mi_bits(&gray(half), &gray(stripes)).unwrap(), 0.0);
}

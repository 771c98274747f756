//! Agreement between segmentations.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::volgrid::LabelVolume;

fn pairs(n: u64) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items. Identical
/// partitions give 1; two single-cluster partitions also give 1.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("labelings differ in length: {} vs {}", a.len(), b.len())));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut ra: HashMap<u32, u64> = HashMap::new();
    let mut rb: HashMap<u32, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&n| pairs(n)).sum();
    let sa: f64 = ra.values().map(|&n| pairs(n)).sum();
    let sb: f64 = rb.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Adjusted Rand index over the foreground voxels of `truth`.
pub fn foreground_ari(truth: &LabelVolume, pred: &LabelVolume) -> Result<f64> {
    if !truth.same_shape(pred) {
        return Err(Error::Dimension("label volumes differ in shape".into()));
    }
    let (t, p): (Vec<u32>, Vec<u32>) = truth
        .data()
        .iter()
        .zip(pred.data())
        .filter(|(&t, _)| t != 0)
        .map(|(&t, &p)| (t, p))
        .unzip();
    adjusted_rand_index(&t, &p)
}

/// Number of distinct positive labels.
pub fn region_count(labels: &LabelVolume) -> usize {
    let mut seen = vec![false; labels.max_label() as usize + 1];
    for &l in labels.data() {
        seen[l as usize] = true;
    }
    seen.iter().skip(1).filter(|&&s| s).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Rand index adjusted by enumerating all item pairs.
    fn ari_by_pairs(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_b) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += (sa && sb) as u8 as f64;
                in_a += sa as u8 as f64;
                in_b += sb as u8 as f64;
            }
        }
        let total = (n * (n - 1) / 2) as f64;
        let expected = in_a * in_b / total;
        let max = 0.5 * (in_a + in_b);
        if max == expected {
            1.0
        } else {
            (both - expected) / (max - expected)
        }
    }

    #[test]
    fn known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-12);
        let w = adjusted_rand_index(&[0, 0, 0, 0, 1, 1, 1, 1], &[0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        assert!(w < 0.0);
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn counts_regions() {
        let d = crate::volgrid::Dims::new(5, 1, 1);
        let l = crate::volgrid::Grid3::from_vec(d, 1.0, vec![0, 3, 3, 1, 0]).unwrap();
        assert_eq!(region_count(&l), 2);
    }

    proptest! {
        #[test]
        fn matches_pair_enumeration(
            ab in prop::collection::vec((0u32..4, 0u32..5), 2..40),
        ) {
            let (a, b): (Vec<u32>, Vec<u32>) = ab.into_iter().unzip();
            let fast = adjusted_rand_index(&a, &b).unwrap();
            let slow = ari_by_pairs(&a, &b);
            prop_assert!((fast - slow).abs() < 1e-9);
            let sym = adjusted_rand_index(&b, &a).unwrap();
            prop_assert!((fast - sym).abs() < 1e-12);
        }
    }
}

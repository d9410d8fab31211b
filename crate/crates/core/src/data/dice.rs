use super::LabelGrid;
use crate::error::{shape_err, Result};

/// Per-label Dice overlap `2|A∩B| / (|A|+|B|)`.
///
/// Both sets empty gives 1 (vacuous agreement); exactly one empty gives 0.
pub fn dice(a: &LabelGrid, b: &LabelGrid, labels: &[u32]) -> Result<Vec<f64>> {
    if a.dims != b.dims {
        return shape_err(format!(
            "dice on mismatched extents {:?} and {:?}",
            a.dims, b.dims
        ));
    }
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data.iter().zip(&b.data) {
            let (ia, ib) = (x == l, y == l);
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
        out.push(if na + nb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (na + nb) as f64
        });
    }
    Ok(out)
}

/// Nonzero labels present in either grid, sorted.
pub fn foreground_labels(a: &LabelGrid, b: &LabelGrid) -> Vec<u32> {
    let mut v: Vec<u32> = a.label_set().into_iter().chain(b.label_set()).filter(|&l| l != 0).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Mean Dice over the foreground labels of the pair (1.0 when there are none).
pub fn mean_foreground_dice(a: &LabelGrid, b: &LabelGrid) -> Result<f64> {
    let labels = foreground_labels(a, b);
    if labels.is_empty() {
        return Ok(1.0);
    }
    let d = dice(a, b, &labels)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(data: Vec<u32>) -> LabelGrid {
        let n = data.len();
        LabelGrid::new([1, 1, n], data).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = grid(vec![0, 1, 1, 2, 2, 0]);
        assert_eq!(dice(&a, &a, &[1, 2]).unwrap(), vec![1.0, 1.0]);
        let b = grid(vec![1, 1, 0, 0, 0, 0]);
        let c = grid(vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(dice(&b, &c, &[1]).unwrap(), vec![0.0]);
    }

    #[test]
    fn degenerate_cases() {
        let a = grid(vec![0, 0, 0]);
        let b = grid(vec![0, 5, 0]);
        assert_eq!(dice(&a, &a, &[5]).unwrap(), vec![1.0]);
        assert_eq!(dice(&a, &b, &[5]).unwrap(), vec![0.0]);
        assert!(dice(&a, &grid(vec![0; 4]), &[1]).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_symmetric(a in proptest::collection::vec(0u32..4, 64), b in proptest::collection::vec(0u32..4, 64)) {
            let (ga, gb) = (grid(a), grid(b));
            let ab = dice(&ga, &gb, &[0, 1, 2, 3]).unwrap();
            let ba = dice(&gb, &ga, &[0, 1, 2, 3]).unwrap();
            prop_assert_eq!(&ab, &ba);
            prop_assert!(ab.iter().all(|&d| (0.0..=1.0).contains(&d)));
        }
    }
}

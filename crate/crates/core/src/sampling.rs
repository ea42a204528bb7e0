//! Latin-hypercube sampling over control boxes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problem::{ControlBox, ProblemError, Result};

/// `n` points with exactly one point per `1/n`-wide stratum in every
/// coordinate. Deterministic for a given seed.
pub fn latin_hypercube(n: usize, bounds: &ControlBox, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(ProblemError::Configuration(
            "Latin hypercube needs at least one sample".into(),
        ));
    }
    let dim = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; dim]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        strata.shuffle(&mut rng);
        let (lo, hi) = (bounds.lower()[j], bounds.upper()[j]);
        for (point, &s) in points.iter_mut().zip(&strata) {
            let t = (s as f64 + rng.gen::<f64>()) / n as f64;
            point[j] = (lo + t * (hi - lo)).clamp(lo, hi);
        }
    }
    Ok(points)
}

/// Pairs `(u1, u2)` from two independent hypercubes in the box shrunk by
/// `margin` (relative), so both ends are strictly interior.
pub fn interior_pairs(
    n: usize,
    bounds: &ControlBox,
    margin: f64,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let inner = bounds.shrink(margin);
    let a = latin_hypercube(n, &inner, seed)?;
    let b = latin_hypercube(n, &inner, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    Ok(a.into_iter().zip(b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles() {
        let b = ControlBox::uniform(1, 0.0, 1.0).unwrap();
        let pts = latin_hypercube(4, &b, 9).unwrap();
        let mut bins: Vec<usize> = pts.iter().map(|p| ((p[0] * 4.0) as usize).min(3)).collect();
        bins.sort();
        assert_eq!(bins, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_point_and_determinism() {
        let b = ControlBox::uniform(2, 0.0, 1.0).unwrap();
        let one = latin_hypercube(1, &b, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            latin_hypercube(7, &b, 42).unwrap(),
            latin_hypercube(7, &b, 42).unwrap()
        );
        assert_ne!(
            latin_hypercube(7, &b, 42).unwrap(),
            latin_hypercube(7, &b, 43).unwrap()
        );
        assert!(latin_hypercube(0, &b, 1).is_err());
    }
}

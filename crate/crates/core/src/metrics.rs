//! Earth mover's distance on a shared distance axis and success rates.

use crate::error::{Error, Result};
use crate::geometry::DistanceDistribution;

/// Wasserstein-1 distance `sum_j |P(j) - Q(j)| * width`, where `P` and `Q`
/// are the cumulative masses.
pub fn emd_1d(p: &DistanceDistribution, q: &DistanceDistribution) -> Result<f64> {
    if !p.axis().same_as(q.axis()) {
        return Err(Error::invalid(format!(
            "distributions live on different axes ({:?} vs {:?})",
            p.axis(),
            q.axis()
        )));
    }
    Ok(emd_masses(p.mass(), q.mass(), p.axis().width))
}

/// EMD between two mass vectors on the same equally spaced axis.
pub fn emd_masses(p: &[f64], q: &[f64], width: f64) -> f64 {
    assert_eq!(p.len(), q.len(), "mass vectors must have equal length");
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    total * width
}

/// Fraction of entries `<= th`.
pub fn success_rate(values: &[f64], th: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("success rate of an empty set of trials"));
    }
    if !(th > 0.0) {
        return Err(Error::invalid(format!("threshold {th} must be positive")));
    }
    Ok(values.iter().filter(|&&v| v <= th).count() as f64 / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DistanceAxis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn dist(axis: DistanceAxis, w: Vec<f64>) -> DistanceDistribution {
        DistanceDistribution::from_weights(axis, w).unwrap()
    }

    /// North-west-corner transport plan; optimal for the cost |u_i - u_j|
    /// on a line because the plan never crosses.
    fn transport_oracle(p: &[f64], q: &[f64], centers: &[f64]) -> f64 {
        let (mut a, mut b) = (p.to_vec(), q.to_vec());
        let (mut i, mut j) = (0, 0);
        let mut cost = 0.0;
        while i < a.len() && j < b.len() {
            let flow = a[i].min(b[j]);
            cost += flow * (centers[i] - centers[j]).abs();
            a[i] -= flow;
            b[j] -= flow;
            if a[i] <= 1e-15 {
                i += 1;
            } else {
                j += 1;
            }
        }
        cost
    }

    #[test]
    fn identical_is_zero() {
        let axis = DistanceAxis::new(0.0, 0.1, 5).unwrap();
        let p = dist(axis, vec![1.0, 2.0, 0.0, 3.0, 1.0]);
        assert_eq!(emd_1d(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn point_masses_are_translated() {
        let axis = DistanceAxis::new(0.0, 0.25, 10).unwrap();
        let mut a = vec![0.0; 10];
        let mut b = vec![0.0; 10];
        a[2] = 1.0;
        b[7] = 1.0;
        let e = emd_1d(&dist(axis, a), &dist(axis, b)).unwrap();
        assert!((e - 1.25).abs() < 1e-12);
    }

    #[test]
    fn axis_mismatch_is_rejected() {
        let a = DistanceAxis::new(0.0, 0.1, 5).unwrap();
        let b = DistanceAxis::new(0.0, 0.2, 5).unwrap();
        let p = dist(a, vec![1.0; 5]);
        let q = dist(b, vec![1.0; 5]);
        assert!(matches!(emd_1d(&p, &q), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matches_transport_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let axis = DistanceAxis::new(0.0, 0.05, 64).unwrap();
        for _ in 0..50 {
            let p = dist(axis, (0..64).map(|_| rng.random::<f64>()).collect());
            let q = dist(axis, (0..64).map(|_| rng.random::<f64>().powi(3)).collect());
            let oracle = transport_oracle(p.mass(), q.mass(), &axis.centers());
            assert!((emd_1d(&p, &q).unwrap() - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn success_rate_counts_boundary() {
        assert_eq!(success_rate(&[0.05, 0.2], 0.1).unwrap(), 0.5);
        assert_eq!(success_rate(&[0.0; 7], 0.1).unwrap(), 1.0);
        assert_eq!(success_rate(&[0.1], 0.1).unwrap(), 1.0);
        assert!(success_rate(&[], 0.1).is_err());
        assert!(success_rate(&[0.1], 0.0).is_err());
        assert!(success_rate(&[0.1], f64::NAN).is_err());
    }

    #[test]
    fn binomial_concentration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &p in &[0.1, 0.5, 0.9] {
            let band = 3.0 * (p * (1.0 - p) / 100.0f64).sqrt();
            let reps = 1000;
            let inside = (0..reps)
                .filter(|_| {
                    let draws: Vec<f64> = (0..100).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect();
                    (success_rate(&draws, 0.5).unwrap() - p).abs() <= band
                })
                .count();
            assert!(inside as f64 >= 0.99 * reps as f64, "p = {p}: {inside}/{reps}");
        }
    }

    fn masses(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..1.0f64, n).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn metric_axioms(a in masses(24), b in masses(24), c in masses(24)) {
            let axis = DistanceAxis::new(0.0, 0.1, 24).unwrap();
            let (p, q, r) = (dist(axis, a), dist(axis, b), dist(axis, c));
            let pq = emd_1d(&p, &q).unwrap();
            let qp = emd_1d(&q, &p).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - qp).abs() <= 1e-12);
            prop_assert_eq!(emd_1d(&p, &p).unwrap(), 0.0);
            let pr = emd_1d(&p, &r).unwrap();
            let rq = emd_1d(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-12);
            if p.mass() != q.mass() {
                let differ = p.mass().iter().zip(q.mass()).any(|(x, y)| (x - y).abs() > 1e-9);
                if differ {
                    prop_assert!(pq > 0.0);
                }
            }
        }
    }
}

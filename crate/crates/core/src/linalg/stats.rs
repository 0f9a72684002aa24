use crate::error::{Error, Result};

/// Percentiles by linear interpolation between order statistics.
///
/// For sorted values `v[0..n]` the percentile at fraction `p` sits at
/// position `p * (n - 1)`, interpolating between its two neighbours.
pub fn percentiles(values: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::degenerate("percentiles of an empty sample"));
    }
    if let Some(p) = ps.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::degenerate(format!("percentile fraction {p} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    Ok(ps
        .iter()
        .map(|&p| {
            let pos = p * last;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn median_of_one_to_hundred() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentiles(&values, &[0.5]).unwrap(), vec![50.5]);
    }

    #[test]
    fn single_value_is_every_percentile() {
        assert_eq!(percentiles(&[7.0], &[0.0, 0.3, 1.0]).unwrap(), vec![7.0; 3]);
    }

    #[test]
    fn interpolates_between_two_points() {
        assert_eq!(percentiles(&[0.0, 10.0], &[0.25]).unwrap(), vec![2.5]);
        assert_eq!(percentiles(&[3.0, 4.0], &[0.5]).unwrap(), vec![3.5]);
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        assert!(matches!(percentiles(&[], &[0.5]), Err(Error::DegenerateInput(_))));
        assert!(percentiles(&[1.0], &[1.5]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_p(values in prop::collection::vec(-1e3f64..1e3, 1..50),
                         mut ps in prop::collection::vec(0.0f64..=1.0, 2..10)) {
            ps.sort_by(f64::total_cmp);
            let out = percentiles(&values, &ps).unwrap();
            for w in out.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
        }
    }
}

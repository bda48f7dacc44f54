use crate::error::{Error, Result};
use crate::traj::DurationChain;

/// Turns raw duration estimates into a valid chain summing to
/// `slots_per_day`: clamp to at least one slot, round, then rescale with
/// largest-remainder apportionment.
pub fn repair_durations(raw: &[f64], slots_per_day: usize) -> Result<DurationChain> {
    let m = raw.len();
    if m == 0 || m > slots_per_day {
        return Err(Error::InvalidTrajectory(format!(
            "cannot fit {m} stays into {slots_per_day} slots"
        )));
    }
    let rounded: Vec<u128> = raw
        .iter()
        .map(|&x| if x.is_finite() { x.clamp(1.0, 1e12).round() as u128 } else { 1 })
        .collect();
    let total: u128 = rounded.iter().sum();
    let t = slots_per_day as u128;
    let mut out: Vec<u128> = if total == t {
        rounded
    } else {
        let quotas: Vec<(u128, u128)> = rounded
            .iter()
            .map(|&r| ((r * t) / total, (r * t) % total))
            .collect();
        let mut out: Vec<u128> = quotas.iter().map(|q| q.0).collect();
        let left = t - out.iter().sum::<u128>();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| quotas[b].1.cmp(&quotas[a].1).then(a.cmp(&b)));
        for &i in order.iter().take(left as usize) {
            out[i] += 1;
        }
        out
    };
    // stays rounded down to zero borrow from the longest
    while let Some(i) = out.iter().position(|&d| d == 0) {
        let j = (0..m).max_by(|&a, &b| out[a].cmp(&out[b]).then(b.cmp(&a))).unwrap();
        out[j] -= 1;
        out[i] = 1;
    }
    DurationChain::new(out.into_iter().map(|d| d as u32).collect(), slots_per_day)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn feasible_input_kept() {
        assert_eq!(repair_durations(&[3.0, 21.0], 24).unwrap().as_slice(), &[3, 21]);
    }

    #[test]
    fn tiny_estimates_split_evenly() {
        assert_eq!(repair_durations(&[0.2, 0.2], 24).unwrap().as_slice(), &[12, 12]);
    }

    #[test]
    fn largest_remainder_breaks_ties_by_position() {
        // 1,1,1 -> quotas 8,8,8 at T=24; at T=25 the first gets the extra slot
        assert_eq!(repair_durations(&[1.0, 1.0, 1.0], 25).unwrap().as_slice(), &[9, 8, 8]);
        assert_eq!(repair_durations(&[10.0, 30.0], 24).unwrap().as_slice(), &[6, 18]);
    }

    #[test]
    fn every_stay_keeps_a_slot() {
        let raw = [100.0, 0.0, 0.0, 0.0];
        let d = repair_durations(&raw, 24).unwrap();
        assert!(d.as_slice().iter().all(|&x| x >= 1));
        assert_eq!(d.total(), 24);
    }

    #[test]
    fn non_finite_and_oversized_inputs() {
        assert_eq!(repair_durations(&[f64::NAN, f64::INFINITY], 24).unwrap().total(), 24);
        assert!(repair_durations(&[], 24).is_err());
        assert!(repair_durations(&[1.0; 25], 24).is_err());
        assert_eq!(repair_durations(&[1.0; 24], 24).unwrap().as_slice(), &[1; 24]);
    }

    proptest! {
        #[test]
        fn always_sums_to_slot_count(
            raw in prop::collection::vec(-5.0f64..60.0, 1..24),
            t in prop::sample::select(vec![24usize, 48]),
        ) {
            let d = repair_durations(&raw, t).unwrap();
            prop_assert_eq!(d.total() as usize, t);
            prop_assert_eq!(d.len(), raw.len());
        }
    }
}

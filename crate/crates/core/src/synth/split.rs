use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::UserHistory;

/// Contiguous train/validation/test day ranges (half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<u32>,
    pub validation: Range<u32>,
    pub test: Range<u32>,
}

impl DatasetSplit {
    pub fn span(&self) -> Range<u32> {
        self.train.start..self.test.end
    }
}

/// Splits the observed day span 6:1:3 in time order.
pub fn split_dataset(histories: &[UserHistory]) -> Result<DatasetSplit> {
    let days = histories.iter().flat_map(|h| h.days.keys().copied());
    let (lo, hi) = days.fold((u32::MAX, 0u32), |(lo, hi), d| (lo.min(d), hi.max(d)));
    if lo > hi {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    split_span(lo, hi + 1)
}

/// 6:1:3 split of `[start, end)`, each part rounded to the nearest day.
pub fn split_span(start: u32, end: u32) -> Result<DatasetSplit> {
    let n = end - start;
    let n_train = (n * 6 + 5) / 10;
    let n_val = (n + 5) / 10;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "a span of {n} days cannot be split 6:1:3 into non-empty parts"
        )));
    }
    let a = start + n_train;
    let b = a + n_val;
    Ok(DatasetSplit {
        train: start..a,
        validation: a..b,
        test: b..end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_split() {
        let s = split_span(0, 28).unwrap();
        assert_eq!(s.train, 0..17);
        assert_eq!(s.validation, 17..20);
        assert_eq!(s.test, 20..28);
    }

    #[test]
    fn ordered_disjoint_and_covering() {
        for n in 10..200 {
            let s = split_span(3, 3 + n).unwrap();
            assert_eq!(s.train.start, 3);
            assert_eq!(s.train.end, s.validation.start);
            assert_eq!(s.validation.end, s.test.start);
            assert_eq!(s.test.end, 3 + n);
            assert!(s.train.end - 1 < s.validation.start);
            let ratio = s.train.len() as f64 / n as f64;
            assert!((ratio - 0.6).abs() <= 0.5 / n as f64 + 1e-12);
        }
    }

    #[test]
    fn tiny_span_rejected() {
        assert!(split_span(0, 3).is_err());
        assert!(split_dataset(&[]).is_err());
    }
}

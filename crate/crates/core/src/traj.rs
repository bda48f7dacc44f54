//! Trajectory domain types and the spatial-temporal decoupler.
//!
//! A day is a dense sequence of `T` cell observations. Decoupling factors it
//! into a repeat-free location chain and the run length spent at each entry;
//! recoupling expands the pair back into slots.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl CellId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

/// Number of days in the weekly history window.
pub const WINDOW_DAYS: usize = 7;

/// One user-day: exactly `T` cell observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DailyTrajectory {
    pub user: UserId,
    /// Absolute day within the dataset span.
    pub day: u32,
    /// 0 = Monday .. 6 = Sunday.
    pub weekday: u8,
    pub slots: Vec<CellId>,
}

impl DailyTrajectory {
    pub fn new(user: UserId, day: u32, weekday: u8, slots: Vec<CellId>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::InvalidTrajectory("day has no slots".into()));
        }
        if weekday > 6 {
            return Err(Error::InvalidTrajectory(format!("weekday {weekday} out of range")));
        }
        Ok(Self {
            user,
            day,
            weekday,
            slots,
        })
    }

    pub fn slots_per_day(&self) -> usize {
        self.slots.len()
    }
}

/// Weekday of an absolute day given the weekday of day 0.
pub fn weekday_of(day: u32, epoch_weekday: u8) -> u8 {
    ((day + epoch_weekday as u32) % 7) as u8
}

/// Repeat-free sequence of visited cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocationChain(Vec<CellId>);

impl LocationChain {
    pub fn new(locations: Vec<CellId>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::InvalidTrajectory("empty location chain".into()));
        }
        if let Some(w) = locations.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidTrajectory(format!(
                "consecutive duplicate {} in location chain",
                w[0]
            )));
        }
        Ok(Self(locations))
    }

    pub fn as_slice(&self) -> &[CellId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Stay durations (in timeslots) paired with a [`LocationChain`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DurationChain(Vec<u32>);

impl DurationChain {
    /// Checks positivity and that the entries sum to `slots_per_day`.
    pub fn new(durations: Vec<u32>, slots_per_day: usize) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::InvalidTrajectory("empty duration chain".into()));
        }
        if durations.contains(&0) {
            return Err(Error::InvalidTrajectory("zero stay duration".into()));
        }
        let sum: u32 = durations.iter().sum();
        if sum as usize != slots_per_day {
            return Err(Error::DurationSum {
                got: sum,
                expected: slots_per_day as u32,
            });
        }
        Ok(Self(durations))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// Run-length encodes a day into its location and duration chains.
pub fn decouple(traj: &DailyTrajectory) -> (LocationChain, DurationChain) {
    decouple_slots(&traj.slots)
}

/// [`decouple`] on a bare slot sequence. Panics on an empty slice.
pub fn decouple_slots(slots: &[CellId]) -> (LocationChain, DurationChain) {
    assert!(!slots.is_empty(), "cannot decouple an empty day");
    let mut locations = Vec::new();
    let mut durations: Vec<u32> = Vec::new();
    for &cell in slots {
        match locations.last() {
            Some(&last) if last == cell => *durations.last_mut().unwrap() += 1,
            _ => {
                locations.push(cell);
                durations.push(1);
            }
        }
    }
    (LocationChain(locations), DurationChain(durations))
}

/// Expands a chain pair back into `slots_per_day` observations.
pub fn recouple(
    loc: &LocationChain,
    dur: &DurationChain,
    slots_per_day: usize,
) -> Result<Vec<CellId>> {
    if loc.len() != dur.len() {
        return Err(Error::ChainLengthMismatch {
            locations: loc.len(),
            durations: dur.len(),
        });
    }
    let total = dur.total();
    if total as usize != slots_per_day {
        return Err(Error::DurationSum {
            got: total,
            expected: slots_per_day as u32,
        });
    }
    let mut slots = Vec::with_capacity(slots_per_day);
    for (&cell, &d) in loc.as_slice().iter().zip(dur.as_slice()) {
        slots.extend(std::iter::repeat_n(cell, d as usize));
    }
    Ok(slots)
}

/// All observed days of one user, keyed by absolute day index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user: UserId,
    pub slots_per_day: usize,
    pub days: BTreeMap<u32, DailyTrajectory>,
}

impl UserHistory {
    pub fn new(user: UserId, slots_per_day: usize) -> Self {
        Self {
            user,
            slots_per_day,
            days: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, traj: DailyTrajectory) -> Result<()> {
        if traj.user != self.user {
            return Err(Error::InvalidTrajectory(format!(
                "day for user {} inserted into history of user {}",
                traj.user.0, self.user.0
            )));
        }
        if traj.slots.len() != self.slots_per_day {
            return Err(Error::SlotMismatch {
                context: format!("user {} day {}", traj.user.0, traj.day),
                expected: self.slots_per_day,
                found: traj.slots.len(),
            });
        }
        self.days.insert(traj.day, traj);
        Ok(())
    }

    pub fn get(&self, day: u32) -> Option<&DailyTrajectory> {
        self.days.get(&day)
    }
}

/// The seven days ending at (and including) day `k`, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryWindow<'a> {
    /// Day index of the last window entry.
    pub end_day: u32,
    pub days: [Option<&'a DailyTrajectory>; WINDOW_DAYS],
}

impl HistoryWindow<'_> {
    pub fn mask(&self) -> [bool; WINDOW_DAYS] {
        self.days.map(|d| d.is_some())
    }

    pub fn any_present(&self) -> bool {
        self.days.iter().any(Option::is_some)
    }
}

/// Window for days `k-6..=k`; position `i` holds day `k-6+i`. Days before
/// day 0 are reported absent.
pub fn history_window(history: &UserHistory, k: u32) -> HistoryWindow<'_> {
    let mut days = [None; WINDOW_DAYS];
    for (pos, slot) in days.iter_mut().enumerate() {
        let offset = (WINDOW_DAYS - 1 - pos) as u32;
        if let Some(day) = k.checked_sub(offset) {
            *slot = history.get(day);
        }
    }
    HistoryWindow { end_day: k, days }
}

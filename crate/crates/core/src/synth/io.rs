//! Dataset files: JSON-lines trajectories plus JSON header, city and split.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::{CellId, DailyTrajectory, UserHistory, UserId};

/// Dataset-wide constants every artifact must agree on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub slots_per_day: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    /// Weekday of day 0 (0 = Monday).
    pub epoch_weekday: u8,
    pub n_days: usize,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        if self.slots_per_day != 24 && self.slots_per_day != 48 {
            return Err(Error::Config(format!(
                "slots_per_day must be 24 or 48, got {}",
                self.slots_per_day
            )));
        }
        if self.epoch_weekday > 6 {
            return Err(Error::Config("epoch_weekday must be in 0..=6".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid_width * self.grid_height
    }
}

/// One line of a trajectory file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajRecord {
    pub user: u32,
    pub day: u32,
    pub weekday: u8,
    pub slots: Vec<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub predicted: bool,
}

impl TrajRecord {
    pub fn from_traj(t: &DailyTrajectory, predicted: bool) -> Self {
        Self {
            user: t.user.0,
            day: t.day,
            weekday: t.weekday,
            slots: t.slots.iter().map(|c| c.0).collect(),
            predicted,
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes histories ordered by user then day.
pub fn write_trajectories(histories: &[UserHistory], path: &Path) -> Result<()> {
    let mut sorted: Vec<&UserHistory> = histories.iter().collect();
    sorted.sort_by_key(|h| h.user);
    let days = sorted.iter().flat_map(|h| h.days.values());
    write_records(days, false, path)
}

/// Writes loose days (e.g. predictions) ordered by user then day.
pub fn write_days(days: &[DailyTrajectory], predicted: bool, path: &Path) -> Result<()> {
    let mut sorted: Vec<&DailyTrajectory> = days.iter().collect();
    sorted.sort_by_key(|d| (d.user, d.day));
    write_records(sorted.into_iter(), predicted, path)
}

fn write_records<'a>(
    days: impl Iterator<Item = &'a DailyTrajectory>,
    predicted: bool,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        for d in days {
            let line = serde_json::to_string(&TrajRecord::from_traj(d, predicted))
                .map_err(|e| Error::json(path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &buf)
}

/// Reads a trajectory file, validating slot counts and cell ids against the
/// header. Errors carry the offending line number.
pub fn read_days(path: &Path, header: &DatasetHeader) -> Result<Vec<DailyTrajectory>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let n_cells = header.n_cells() as u32;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: TrajRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.slots.len() != header.slots_per_day {
            return Err(bad(format!(
                "expected {} slots, found {}",
                header.slots_per_day,
                rec.slots.len()
            )));
        }
        if let Some(&c) = rec.slots.iter().find(|&&c| c >= n_cells) {
            return Err(bad(format!("unknown cell {c} (grid has {n_cells} cells)")));
        }
        let traj = DailyTrajectory::new(
            UserId(rec.user),
            rec.day,
            rec.weekday,
            rec.slots.into_iter().map(CellId).collect(),
        )
        .map_err(|e| bad(e.to_string()))?;
        out.push(traj);
    }
    Ok(out)
}

/// Groups days into per-user histories, ordered by user.
pub fn group_histories(days: Vec<DailyTrajectory>, slots_per_day: usize) -> Result<Vec<UserHistory>> {
    let mut by_user: BTreeMap<UserId, UserHistory> = BTreeMap::new();
    for d in days {
        by_user
            .entry(d.user)
            .or_insert_with(|| UserHistory::new(d.user, slots_per_day))
            .insert(d)?;
    }
    Ok(by_user.into_values().collect())
}

pub fn read_trajectories(path: &Path, header: &DatasetHeader) -> Result<Vec<UserHistory>> {
    group_histories(read_days(path, header)?, header.slots_per_day)
}

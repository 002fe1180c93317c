//! Plain-text hypnograms: one `onset_s<TAB>duration_s<TAB>stage` entry per
//! line (any whitespace separates columns), `#` starts a comment line.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const EPOCH_SECONDS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    N4,
    Rem,
    Movement,
    Unknown,
}

impl Stage {
    pub fn token(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::N4 => "N4",
            Stage::Rem => "REM",
            Stage::Movement => "MOVEMENT",
            Stage::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Stage {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "W" | "WAKE" => Stage::W,
            "N1" => Stage::N1,
            "N2" => Stage::N2,
            "N3" => Stage::N3,
            "N4" => Stage::N4,
            "REM" | "R" => Stage::Rem,
            "MOVEMENT" | "MT" => Stage::Movement,
            "UNKNOWN" | "?" => Stage::Unknown,
            _ => return Err(()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypnogramEntry {
    pub onset_s: f64,
    pub duration_s: f64,
    pub stage: Stage,
}

impl HypnogramEntry {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("hypnogram line {line}: {reason}")]
pub struct HypnogramError {
    pub line: usize,
    pub reason: String,
}

/// Ordered, non-overlapping scored intervals, each a whole number of
/// 30 s epochs on a common grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hypnogram {
    entries: Vec<HypnogramEntry>,
}

/// Tolerance when checking that times sit on the epoch grid.
const GRID_TOL: f64 = 1e-6;

fn on_grid(x: f64) -> bool {
    let r = x / EPOCH_SECONDS;
    (r - r.round()).abs() * EPOCH_SECONDS < GRID_TOL
}

impl Hypnogram {
    /// Validates entries as [`parse_hypnogram`] would; `line` in errors is
    /// the 1-based entry index.
    pub fn new(entries: Vec<HypnogramEntry>) -> Result<Self, HypnogramError> {
        let mut h = Hypnogram { entries: Vec::with_capacity(entries.len()) };
        for (i, e) in entries.into_iter().enumerate() {
            h.push(e, i + 1)?;
        }
        Ok(h)
    }

    fn push(&mut self, e: HypnogramEntry, line: usize) -> Result<(), HypnogramError> {
        let err = |reason: String| Err(HypnogramError { line, reason });
        if !(e.onset_s >= 0.0) || !e.onset_s.is_finite() {
            return err(format!("invalid onset {}", e.onset_s));
        }
        if !(e.duration_s > 0.0) || !on_grid(e.duration_s) {
            return err(format!(
                "duration {} s is not a positive multiple of {EPOCH_SECONDS} s",
                e.duration_s
            ));
        }
        if let Some(prev) = self.entries.last() {
            if e.onset_s < prev.end_s() - GRID_TOL {
                return err(format!(
                    "entry at {} s overlaps the previous entry ending at {} s",
                    e.onset_s,
                    prev.end_s()
                ));
            }
            if !on_grid(e.onset_s - self.entries[0].onset_s) {
                return err(format!("onset {} s is off the {EPOCH_SECONDS} s epoch grid", e.onset_s));
            }
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[HypnogramEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn start_s(&self) -> Option<f64> {
        self.entries.first().map(|e| e.onset_s)
    }

    pub fn end_s(&self) -> Option<f64> {
        self.entries.last().map(|e| e.end_s())
    }

    /// One stage per 30 s epoch from the first onset to the last end.
    /// Unscored gaps between entries become [`Stage::Unknown`].
    pub fn epochs(&self) -> Vec<Stage> {
        let Some(start) = self.start_s() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for e in &self.entries {
            let first = ((e.onset_s - start) / EPOCH_SECONDS).round() as usize;
            out.resize(first, Stage::Unknown);
            let n = (e.duration_s / EPOCH_SECONDS).round() as usize;
            out.extend(std::iter::repeat_n(e.stage, n));
        }
        out
    }

    /// Run-length encodes per-epoch stages starting at `start_s`.
    pub fn from_epochs(start_s: f64, stages: &[Stage]) -> Self {
        let mut entries: Vec<HypnogramEntry> = Vec::new();
        for (i, &stage) in stages.iter().enumerate() {
            match entries.last_mut() {
                Some(last) if last.stage == stage => last.duration_s += EPOCH_SECONDS,
                _ => entries.push(HypnogramEntry {
                    onset_s: start_s + i as f64 * EPOCH_SECONDS,
                    duration_s: EPOCH_SECONDS,
                    stage,
                }),
            }
        }
        Hypnogram { entries }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# onset_s\tduration_s\tstage\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.onset_s, e.duration_s, e.stage));
        }
        s
    }
}

pub fn parse_hypnogram(text: &str) -> Result<Hypnogram, HypnogramError> {
    let mut h = Hypnogram::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = content.split_whitespace().collect();
        let err = |reason: String| HypnogramError { line, reason };
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        let onset_s: f64 = cols[0].parse().map_err(|_| err(format!("bad onset {:?}", cols[0])))?;
        let duration_s: f64 = cols[1].parse().map_err(|_| err(format!("bad duration {:?}", cols[1])))?;
        let stage: Stage = cols[2].parse().map_err(|_| err(format!("unknown stage {:?}", cols[2])))?;
        h.push(HypnogramEntry { onset_s, duration_s, stage }, line)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_to_epochs() {
        let h = parse_hypnogram("0 30 W\n30 60 N2").unwrap();
        assert_eq!(h.epochs(), vec![Stage::W, Stage::N2, Stage::N2]);
        let h = parse_hypnogram("# comment\n0\t30\tN4\n").unwrap();
        assert_eq!(h.entries().len(), 1);
        assert_eq!(h.entries()[0].stage, Stage::N4);
    }

    #[test]
    fn overlap_is_reported_on_its_line() {
        let err = parse_hypnogram("0 60 W\n30 30 N1").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.reason.contains("overlaps"));
    }

    #[test]
    fn bad_tokens_and_durations() {
        assert_eq!(parse_hypnogram("0 30 W\n30 30 N5").unwrap_err().line, 2);
        let err = parse_hypnogram("0 45 W").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.reason.contains("multiple"));
        assert!(parse_hypnogram("0 30 W\n45 30 W").is_err());
    }

    #[test]
    fn gaps_become_unknown() {
        let h = parse_hypnogram("30 30 W\n90 30 REM").unwrap();
        assert_eq!(h.epochs(), vec![Stage::W, Stage::Unknown, Stage::Rem]);
        assert_eq!(h.start_s(), Some(30.0));
        assert_eq!(h.end_s(), Some(120.0));
    }

    #[test]
    fn text_round_trip() {
        let stages = [Stage::W, Stage::W, Stage::N1, Stage::Movement, Stage::Rem];
        let h = Hypnogram::from_epochs(0.0, &stages);
        assert_eq!(h.entries().len(), 4);
        assert_eq!(parse_hypnogram(&h.to_text()).unwrap(), h);
        assert_eq!(h.epochs(), stages);
    }
}

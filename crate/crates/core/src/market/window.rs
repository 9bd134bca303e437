use serde::{Deserialize, Serialize};

/// Half-open tick interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn new(start: u64, end: u64) -> Self {
        Window { start, end }
    }

    pub fn is_valid(&self) -> bool {
        self.start < self.end
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_tick(&self, tick: u64) -> bool {
        self.start <= tick && tick < self.end
    }

    pub fn covers(&self, inner: &Window) -> bool {
        self.start <= inner.start && inner.end <= self.end
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl std::str::FromStr for Window {
    type Err = String;

    /// Parses `start:end`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected start:end, got {s:?}"))?;
        let start = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
        let end = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
        Ok(Window { start, end })
    }
}

/// Inserts `window` into a sorted disjoint set, merging anything it overlaps
/// or touches.
pub fn insert_merged(set: &mut Vec<Window>, window: Window) {
    let mut merged = window;
    set.retain(|w| {
        if w.start <= merged.end && merged.start <= w.end {
            merged.start = merged.start.min(w.start);
            merged.end = merged.end.max(w.end);
            false
        } else {
            true
        }
    });
    let pos = set.partition_point(|w| w.start < merged.start);
    set.insert(pos, merged);
}

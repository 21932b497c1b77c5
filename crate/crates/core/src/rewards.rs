//! Carbon-saved accounting, reward points and the append-only user ledger.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::labels::ClassLabel;

#[derive(Debug, thiserror::Error)]
pub enum RewardsError {
    #[error("carbon factor table: {0}")]
    InvalidTable(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("leaderboard limit must be at least 1")]
    InvalidLimit,
    #[error("ledger storage failure on {path}: {reason}")]
    StorageFailure { path: PathBuf, reason: String },
}

/// Grams of CO2-equivalent credited per correctly managed item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonFactorTable {
    pub version: String,
    pub factors_g: BTreeMap<ClassLabel, f64>,
    /// True for the shipped defaults, which are illustrative only.
    #[serde(default)]
    pub placeholder: bool,
}

impl Default for CarbonFactorTable {
    /// Illustrative per-item magnitudes, not life-cycle-analysis figures.
    fn default() -> Self {
        Self {
            version: "placeholder-1".into(),
            factors_g: BTreeMap::from([
                (ClassLabel::Cardboard, 60.0),
                (ClassLabel::Glass, 90.0),
                (ClassLabel::Metal, 150.0),
                (ClassLabel::Paper, 20.0),
                (ClassLabel::Plastic, 40.0),
                (ClassLabel::Trash, 0.0),
            ]),
            placeholder: true,
        }
    }
}

impl CarbonFactorTable {
    pub fn validate(&self) -> Result<(), RewardsError> {
        for label in ClassLabel::ALL {
            match self.factors_g.get(&label) {
                None => return Err(RewardsError::InvalidTable(format!("no factor for {label}"))),
                Some(v) if !v.is_finite() || *v < 0.0 => {
                    return Err(RewardsError::InvalidTable(format!("factor for {label} must be a non-negative number, got {v}")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RewardsError> {
        let table: Self = serde_json::from_str(text).map_err(|e| RewardsError::InvalidTable(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, RewardsError> {
        let text = std::fs::read_to_string(path).map_err(|e| RewardsError::InvalidTable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

pub fn carbon_for(label: ClassLabel, table: &CarbonFactorTable) -> f64 {
    table.factors_g[&label]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    ClassifyConfirmed,
    FeedbackSubmitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointsPolicy {
    pub classify_points: u64,
    pub feedback_points: u64,
}

impl Default for PointsPolicy {
    fn default() -> Self {
        Self { classify_points: 10, feedback_points: 5 }
    }
}

impl PointsPolicy {
    pub fn points(&self, kind: EventType) -> u64 {
        match kind {
            EventType::ClassifyConfirmed => self.classify_points,
            EventType::FeedbackSubmitted => self.feedback_points,
        }
    }
}

/// Points and carbon attached to an event. Feedback earns points but no
/// carbon: reporting a mistake is not itself a managed item.
pub fn award(kind: EventType, label: ClassLabel, table: &CarbonFactorTable, policy: &PointsPolicy) -> (u64, f64) {
    let carbon = match kind {
        EventType::ClassifyConfirmed => carbon_for(label, table),
        EventType::FeedbackSubmitted => 0.0,
    };
    (policy.points(kind), carbon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub client_event_id: String,
    pub user_id: String,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub label: ClassLabel,
    pub points: u64,
    pub carbon_g: f64,
    pub timestamp: DateTime<Utc>,
}

impl LedgerEvent {
    pub fn new(
        user_id: impl Into<String>,
        client_event_id: impl Into<String>,
        kind: EventType,
        label: ClassLabel,
        timestamp: DateTime<Utc>,
        table: &CarbonFactorTable,
        policy: &PointsPolicy,
    ) -> Self {
        let (points, carbon_g) = award(kind, label, table, policy);
        Self { client_event_id: client_event_id.into(), user_id: user_id.into(), kind, label, points, carbon_g, timestamp }
    }

    fn validate(&self) -> Result<(), RewardsError> {
        if self.user_id.is_empty() || self.client_event_id.is_empty() {
            return Err(RewardsError::InvalidEvent("user_id and client_event_id must be non-empty".into()));
        }
        if !self.carbon_g.is_finite() || self.carbon_g < 0.0 {
            return Err(RewardsError::InvalidEvent(format!("carbon_g must be non-negative, got {}", self.carbon_g)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendResult {
    Applied,
    Duplicate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user_id: String,
    pub total_points: u64,
    pub total_carbon_g: f64,
    pub event_count: u64,
}

impl UserSummary {
    fn empty(user_id: &str) -> Self {
        Self { user_id: user_id.into(), ..Self::default() }
    }

    fn add(&mut self, e: &LedgerEvent) {
        self.total_points += e.points;
        self.total_carbon_g += e.carbon_g;
        self.event_count += 1;
    }
}

/// Ranking order: points descending, then user id ascending.
pub fn rank(a: &UserSummary, b: &UserSummary) -> std::cmp::Ordering {
    b.total_points.cmp(&a.total_points).then_with(|| a.user_id.cmp(&b.user_id))
}

#[derive(Default)]
struct State {
    events: Vec<LedgerEvent>,
    seen: HashSet<(String, String)>,
    totals: HashMap<String, UserSummary>,
    journal: Option<(PathBuf, File)>,
}

impl State {
    fn apply(&mut self, e: LedgerEvent) -> AppendResult {
        if !self.seen.insert((e.user_id.clone(), e.client_event_id.clone())) {
            return AppendResult::Duplicate;
        }
        self.totals.entry(e.user_id.clone()).or_insert_with(|| UserSummary::empty(&e.user_id)).add(&e);
        self.events.push(e);
        AppendResult::Applied
    }

    fn is_duplicate(&self, e: &LedgerEvent) -> bool {
        self.seen.contains(&(e.user_id.clone(), e.client_event_id.clone()))
    }
}

/// Idempotent event log keyed by `(user_id, client_event_id)`. With a
/// journal, every applied event is appended as one JSON line before it
/// becomes visible; reopening replays the journal.
pub struct Ledger {
    state: RwLock<State>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::in_memory()
    }
}

fn storage(path: &Path, reason: impl ToString) -> RewardsError {
    RewardsError::StorageFailure { path: path.to_path_buf(), reason: reason.to_string() }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self { state: RwLock::new(State::default()) }
    }

    /// Opens (or creates) a newline-delimited JSON journal. A trailing
    /// partial line left by an interrupted write is discarded.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RewardsError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| storage(path, e))?;
        }
        let mut file =
            OpenOptions::new().read(true).append(true).create(true).open(path).map_err(|e| storage(path, e))?;
        let mut state = State::default();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line).map_err(|e| storage(path, e))?;
                if read == 0 {
                    break;
                }
                lineno += 1;
                let complete = line.ends_with('\n');
                if complete && line.trim().is_empty() {
                    good_len += read as u64;
                    continue;
                }
                if !complete {
                    log::warn!("{}: dropping torn final line {lineno}", path.display());
                    break;
                }
                let e = serde_json::from_str::<LedgerEvent>(line.trim_end())
                    .map_err(|e| storage(path, format!("line {lineno}: {e}")))?;
                state.apply(e);
                good_len += read as u64;
            }
        }
        let len = file.metadata().map_err(|e| storage(path, e))?.len();
        if len != good_len {
            file.set_len(good_len).map_err(|e| storage(path, e))?;
            file.seek(SeekFrom::End(0)).map_err(|e| storage(path, e))?;
        }
        state.journal = Some((path.to_path_buf(), file));
        Ok(Self { state: RwLock::new(state) })
    }

    pub fn append(&self, event: LedgerEvent) -> Result<AppendResult, RewardsError> {
        Ok(self.append_batch(vec![event])?[0])
    }

    /// Appends events in order under one lock; returns one result per event.
    pub fn append_batch(&self, events: Vec<LedgerEvent>) -> Result<Vec<AppendResult>, RewardsError> {
        for e in &events {
            e.validate()?;
        }
        let mut state = self.state.write().expect("ledger lock");
        let mut fresh = Vec::new();
        let mut pending = HashSet::new();
        for e in &events {
            if !state.is_duplicate(e) && pending.insert((e.user_id.clone(), e.client_event_id.clone())) {
                fresh.push(e);
            }
        }
        if let Some((path, file)) = &mut state.journal {
            let mut buf = Vec::new();
            for e in &fresh {
                serde_json::to_writer(&mut buf, e).expect("serializable event");
                buf.push(b'\n');
            }
            if !buf.is_empty() {
                file.write_all(&buf).and_then(|_| file.flush()).map_err(|e| storage(path, e))?;
            }
        }
        Ok(events.into_iter().map(|e| state.apply(e)).collect())
    }

    pub fn summary(&self, user_id: &str) -> UserSummary {
        let state = self.state.read().expect("ledger lock");
        state.totals.get(user_id).cloned().unwrap_or_else(|| UserSummary::empty(user_id))
    }

    pub fn leaderboard(&self, limit: usize) -> Result<Vec<UserSummary>, RewardsError> {
        if limit == 0 {
            return Err(RewardsError::InvalidLimit);
        }
        let state = self.state.read().expect("ledger lock");
        let mut all: Vec<UserSummary> = state.totals.values().cloned().collect();
        all.sort_by(rank);
        all.truncate(limit);
        Ok(all)
    }

    pub fn events(&self) -> Vec<LedgerEvent> {
        self.state.read().expect("ledger lock").events.clone()
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("ledger lock").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

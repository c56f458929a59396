use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dm2rm::retrieval::Phase;
use dm2rm::{ModeToken, RankedList};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const SESSIONS_LOG: &str = "sessions.jsonl";
pub const SELECTIONS_LOG: &str = "selections.jsonl";

/// One tile of a presented ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentedImage {
    pub rank: usize,
    pub image_id: String,
    pub score: f64,
}

pub(crate) fn present(list: &RankedList, k: usize) -> Vec<PresentedImage> {
    list.entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| PresentedImage {
            rank: i + 1,
            image_id: e.image_id.clone(),
            score: e.score,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrases {
    pub target: String,
    pub receptacle: String,
    pub noun_phrases: Vec<String>,
}

/// A user's pick from one presented list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub query_id: String,
    pub mode: ModeToken,
    pub selected_image_id: String,
    pub rank_of_selection: usize,
    /// Milliseconds since the Unix epoch, UTC.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selections {
    pub target: Option<SelectionEvent>,
    pub receptacle: Option<SelectionEvent>,
}

impl Selections {
    pub fn get(&self, mode: ModeToken) -> Option<&SelectionEvent> {
        match mode {
            ModeToken::Target => self.target.as_ref(),
            ModeToken::Receptacle => self.receptacle.as_ref(),
        }
    }

    fn set(&mut self, event: SelectionEvent) {
        match event.mode {
            ModeToken::Target => self.target = Some(event),
            ModeToken::Receptacle => self.receptacle = Some(event),
        }
    }
}

/// One instruction's two top-K rankings and the selections made on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySession {
    pub query_id: String,
    pub instruction: String,
    pub paraphrase: String,
    pub phrases: Phrases,
    pub environment_id: String,
    pub topk: usize,
    /// Size of the environment's candidate pool.
    pub candidate_count: usize,
    pub target: Vec<PresentedImage>,
    pub receptacle: Vec<PresentedImage>,
    #[serde(default)]
    pub selections: Selections,
    pub created_at: u64,
}

impl QuerySession {
    pub fn list(&self, mode: ModeToken) -> &[PresentedImage] {
        match mode {
            ModeToken::Target => &self.target,
            ModeToken::Receptacle => &self.receptacle,
        }
    }

    /// Checks `event` against the presented list without applying it.
    pub fn check(&self, event: &SelectionEvent) -> Result<(), ServiceError> {
        match self
            .list(event.mode)
            .iter()
            .find(|p| p.image_id == event.selected_image_id)
        {
            Some(p) if p.rank == event.rank_of_selection => Ok(()),
            Some(p) => Err(ServiceError::Log(format!(
                "selection of {} in {} claims rank {} but it was presented at {}",
                event.selected_image_id, event.query_id, event.rank_of_selection, p.rank
            ))),
            None => Err(ServiceError::NotPresented {
                query_id: self.query_id.clone(),
                mode: event.mode,
                image_id: event.selected_image_id.clone(),
            }),
        }
    }

    pub fn apply(&mut self, event: SelectionEvent) -> Result<(), ServiceError> {
        self.check(&event)?;
        self.selections.set(event);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub phase: Phase,
    pub successes: u64,
    pub attempts: u64,
    /// `successes / attempts`; absent before the first session.
    pub rate: Option<f64>,
}

impl Aggregate {
    fn new(phase: Phase) -> Self {
        Self {
            phase,
            successes: 0,
            attempts: 0,
            rate: None,
        }
    }

    fn record(&mut self, success: bool) {
        self.attempts += 1;
        self.successes += u64::from(success);
        self.rate = Some(self.successes as f64 / self.attempts as f64);
    }
}

/// Per mode, the share of sessions with a selection inside the presented
/// top-K. `overall` counts sessions with both selections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub sessions: u64,
    pub target: Aggregate,
    pub receptacle: Aggregate,
    pub overall: Aggregate,
}

pub fn aggregate<'a>(sessions: impl IntoIterator<Item = &'a QuerySession>) -> SelectionMetrics {
    let mut m = SelectionMetrics {
        sessions: 0,
        target: Aggregate::new(Phase::Fetching),
        receptacle: Aggregate::new(Phase::Carrying),
        overall: Aggregate::new(Phase::Overall),
    };
    for s in sessions {
        let t = s.selections.target.is_some();
        let r = s.selections.receptacle.is_some();
        m.sessions += 1;
        m.target.record(t);
        m.receptacle.record(r);
        m.overall.record(t && r);
    }
    m
}

/// Append-only JSONL files holding created sessions and selection events.
#[derive(Debug)]
pub struct EventLog {
    dir: PathBuf,
    sessions: File,
    selections: File,
}

impl EventLog {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let open = |name| {
            let path = dir.join(name);
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io(&path, e))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            sessions: open(SESSIONS_LOG)?,
            selections: open(SELECTIONS_LOG)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append_session(&mut self, session: &QuerySession) -> Result<(), ServiceError> {
        let fresh = QuerySession {
            selections: Selections::default(),
            ..session.clone()
        };
        append(&mut self.sessions, &self.dir.join(SESSIONS_LOG), &fresh)
    }

    pub fn append_selection(&mut self, event: &SelectionEvent) -> Result<(), ServiceError> {
        append(&mut self.selections, &self.dir.join(SELECTIONS_LOG), event)
    }
}

fn io(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Log(format!("{}: {e}", path.display()))
}

fn append<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<(), ServiceError> {
    let mut line = serde_json::to_vec(value).map_err(|e| ServiceError::Log(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line)
        .and_then(|_| file.flush())
        .map_err(|e| io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(path, e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ServiceError::Log(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Rebuilds every session, with its live selections, from a log directory.
pub fn replay(dir: &Path) -> Result<BTreeMap<String, QuerySession>, ServiceError> {
    let mut sessions: BTreeMap<String, QuerySession> =
        read_lines::<QuerySession>(&dir.join(SESSIONS_LOG))?
            .into_iter()
            .map(|s| (s.query_id.clone(), s))
            .collect();
    for event in read_lines::<SelectionEvent>(&dir.join(SELECTIONS_LOG))? {
        let session = sessions.get_mut(&event.query_id).ok_or_else(|| {
            ServiceError::Log(format!("selection for unknown session {}", event.query_id))
        })?;
        session.apply(event)?;
    }
    Ok(sessions)
}

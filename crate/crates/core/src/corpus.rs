//! Event/post data model, corpus file ingestion, chronological hour
//! partitioning and deadline filtering.
//!
//! The corpus file is line-delimited JSON, one event per line:
//!
//! ```text
//! {"event_id":"e1","label":1,"posts":[{"post_id":"p1","user_id":"u1","timestamp":1500000000,"text":"..."}]}
//! ```
//!
//! `label` is 1 for rumour, 0 for non-rumour; `timestamp` is integer seconds
//! since the epoch. See `docs/formats.md` for the full format description.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECONDS_PER_HOUR: u64 = 3600;

/// Default cap on the number of hour partitions per event.
pub const DEFAULT_MAX_HOURS: usize = 96;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed event record: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate event id '{event_id}'")]
    DuplicateEvent { line: usize, event_id: String },
    #[error("line {line}: event '{event_id}' has no posts")]
    EmptyEvent { line: usize, event_id: String },
    #[error("line {line}: event '{event_id}': {reason}")]
    InvalidRecord {
        line: usize,
        event_id: String,
        reason: String,
    },
    #[error("post '{post_id}' precedes the event origin ({timestamp_s} < {origin_s})")]
    PostBeforeOrigin {
        post_id: String,
        timestamp_s: u64,
        origin_s: u64,
    },
    #[error("deadline must be positive, got {0}")]
    InvalidDeadline(f64),
    #[error("event '{event_id}' has no engagements before the {deadline_hours} h deadline")]
    NoEngagementsBeforeDeadline {
        event_id: String,
        deadline_hours: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary event class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    NonRumour,
    Rumour,
}

impl Label {
    /// Index into probability vectors: 0 = non-rumour, 1 = rumour.
    pub fn index(self) -> usize {
        match self {
            Label::NonRumour => 0,
            Label::Rumour => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NonRumour => "non_rumour",
            Label::Rumour => "rumour",
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::NonRumour),
            1 => Ok(Label::Rumour),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.index() as u8
    }
}

/// One social engagement: a post by a user at a point in time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub user_id: String,
    #[serde(rename = "timestamp")]
    pub timestamp_s: u64,
    pub text: String,
}

/// A news item with its label and chronologically ordered engagements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub label: Label,
    pub posts: Vec<Post>,
}

impl Event {
    /// Timestamp of the earliest post (the event's first appearance).
    pub fn origin_s(&self) -> u64 {
        self.posts[0].timestamp_s
    }
}

/// Posts of one event sharing an hour index.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub hour_index: usize,
    pub posts: Vec<Post>,
}

impl Partition {
    /// m_k: number of posts in this partition.
    pub fn post_count(&self) -> usize {
        self.posts.len()
    }
}

/// An event reorganized as a contiguous sequence of hour partitions,
/// indexed 0..n_hours-1 with empty partitions present explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedEvent {
    pub event_id: String,
    pub label: Label,
    pub partitions: Vec<Partition>,
}

impl PartitionedEvent {
    pub fn n_hours(&self) -> usize {
        self.partitions.len()
    }
}

/// Corpus-level counts, handy for summary output and ingestion checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSummary {
    pub events: usize,
    pub rumours: usize,
    pub non_rumours: usize,
    pub posts: usize,
    pub users: usize,
}

/// Parses a line-delimited event corpus, validating every record and
/// sorting posts by (timestamp, post_id).
pub fn parse_engagements(reader: impl BufRead) -> Result<Vec<Event>, CorpusError> {
    let mut events = Vec::new();
    let mut seen_ids = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut event: Event = serde_json::from_str(&line).map_err(|source| {
            CorpusError::MalformedLine {
                line: line_no,
                source,
            }
        })?;

        if !seen_ids.insert(event.event_id.clone()) {
            return Err(CorpusError::DuplicateEvent {
                line: line_no,
                event_id: event.event_id,
            });
        }
        if event.posts.is_empty() {
            return Err(CorpusError::EmptyEvent {
                line: line_no,
                event_id: event.event_id,
            });
        }
        if event.event_id.is_empty() {
            return Err(CorpusError::InvalidRecord {
                line: line_no,
                event_id: String::new(),
                reason: "empty event_id".into(),
            });
        }
        for post in &event.posts {
            if post.post_id.is_empty() || post.user_id.is_empty() {
                return Err(CorpusError::InvalidRecord {
                    line: line_no,
                    event_id: event.event_id.clone(),
                    reason: format!("post '{}' has an empty post_id or user_id", post.post_id),
                });
            }
        }

        event
            .posts
            .sort_by(|a, b| (a.timestamp_s, &a.post_id).cmp(&(b.timestamp_s, &b.post_id)));
        events.push(event);
    }
    Ok(events)
}

/// Reads and validates a corpus file from disk.
pub fn read_corpus_file(path: impl AsRef<Path>) -> Result<Vec<Event>, CorpusError> {
    let file = File::open(path)?;
    parse_engagements(BufReader::new(file))
}

/// Writes events in the line-delimited corpus format.
pub fn write_corpus(events: &[Event], mut writer: impl Write) -> Result<(), CorpusError> {
    for event in events {
        serde_json::to_writer(&mut writer, event)
            .map_err(|e| CorpusError::Io(std::io::Error::other(e)))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn summarize(events: &[Event]) -> CorpusSummary {
    let rumours = events.iter().filter(|e| e.label == Label::Rumour).count();
    let posts = events.iter().map(|e| e.posts.len()).sum();
    let users: HashSet<&str> = events
        .iter()
        .flat_map(|e| e.posts.iter().map(|p| p.user_id.as_str()))
        .collect();
    CorpusSummary {
        events: events.len(),
        rumours,
        non_rumours: events.len() - rumours,
        posts,
        users: users.len(),
    }
}

/// Hour index of a post relative to the event origin:
/// floor((timestamp - t0) / 3600).
pub fn assign_hour_index(post: &Post, origin_s: u64) -> Result<usize, CorpusError> {
    if post.timestamp_s < origin_s {
        return Err(CorpusError::PostBeforeOrigin {
            post_id: post.post_id.clone(),
            timestamp_s: post.timestamp_s,
            origin_s,
        });
    }
    Ok(((post.timestamp_s - origin_s) / SECONDS_PER_HOUR) as usize)
}

/// Groups an event's posts into hour partitions. Partitions run 0..n-1 with
/// n = min(max_hours, 1 + highest hour index observed); posts at or beyond
/// `max_hours` are dropped, and empty partitions are materialized.
pub fn partition_event(event: &Event, max_hours: usize) -> PartitionedEvent {
    assert!(max_hours >= 1, "max_hours must be at least 1");
    let origin = event.origin_s();
    let indices: Vec<usize> = event
        .posts
        .iter()
        .map(|p| assign_hour_index(p, origin).expect("posts sorted, none precede the origin"))
        .collect();

    let max_observed = indices.iter().copied().max().unwrap_or(0);
    let n = (max_observed + 1).min(max_hours);

    let mut partitions: Vec<Partition> = (0..n)
        .map(|hour_index| Partition {
            hour_index,
            posts: Vec::new(),
        })
        .collect();
    for (post, &idx) in event.posts.iter().zip(&indices) {
        if idx < max_hours {
            partitions[idx].posts.push(post.clone());
        }
    }

    PartitionedEvent {
        event_id: event.event_id.clone(),
        label: event.label,
        partitions,
    }
}

/// Restricts an event to posts strictly before the deadline, measured in
/// hours from the earliest post.
pub fn filter_by_deadline(event: &Event, deadline_hours: f64) -> Result<Event, CorpusError> {
    if !deadline_hours.is_finite() || deadline_hours <= 0.0 {
        return Err(CorpusError::InvalidDeadline(deadline_hours));
    }
    let origin = event.origin_s();
    let cutoff = deadline_hours * SECONDS_PER_HOUR as f64;
    let posts: Vec<Post> = event
        .posts
        .iter()
        .filter(|p| ((p.timestamp_s - origin) as f64) < cutoff)
        .cloned()
        .collect();
    if posts.is_empty() {
        return Err(CorpusError::NoEngagementsBeforeDeadline {
            event_id: event.event_id.clone(),
            deadline_hours,
        });
    }
    Ok(Event {
        event_id: event.event_id.clone(),
        label: event.label,
        posts,
    })
}

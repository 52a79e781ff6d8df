//! In-process publish/subscribe broker with an MQTT-style topic namespace.
//!
//! Delivery is at-least-once: every scheduled delivery draws against the
//! fault model's drop probability and is re-scheduled after a back-off until
//! it lands or its retries run out (dead letter). A landed delivery may also
//! be duplicated; each subscription remembers the message ids it has handed
//! out, so a handler sees every message id at most once.
//!
//! All randomness comes from one seeded stream consumed in delivery order,
//! so a fixed seed and publish sequence give an identical delivery trace.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::{stream_rng, BUS_STREAM};
use crate::telemetry::SimMs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("invalid topic {0:?}: {1}")]
    InvalidTopic(String, &'static str),
    #[error("invalid topic filter {0:?}: {1}")]
    InvalidFilter(String, &'static str),
    #[error("duplicate message id {0}")]
    DuplicateMessageId(String),
    #[error("invalid fault model: {0}")]
    InvalidFaultModel(String),
}

const SEPARATOR: char = '/';

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Topic(Vec<String>);

impl Topic {
    pub fn segments(&self) -> &[String] {
        &self.0
    }
}

impl FromStr for Topic {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut segments = Vec::new();
        for seg in s.split(SEPARATOR) {
            if seg.is_empty() {
                return Err(BusError::InvalidTopic(s.into(), "empty segment"));
            }
            if seg.contains(['+', '#']) {
                return Err(BusError::InvalidTopic(s.into(), "wildcards are not allowed in topic names"));
            }
            segments.push(seg.to_string());
        }
        Ok(Topic(segments))
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FilterSegment {
    Level(String),
    /// `+`
    Any,
    /// `#`, final position only
    Rest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<FilterSegment>,
}

impl FromStr for TopicFilter {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(SEPARATOR).collect();
        let mut segments = Vec::with_capacity(parts.len());
        for (i, seg) in parts.iter().enumerate() {
            let seg = match *seg {
                "" => return Err(BusError::InvalidFilter(s.into(), "empty segment")),
                "+" => FilterSegment::Any,
                "#" if i + 1 == parts.len() => FilterSegment::Rest,
                "#" => return Err(BusError::InvalidFilter(s.into(), "'#' is only allowed as the last segment")),
                other if other.contains(['+', '#']) => {
                    return Err(BusError::InvalidFilter(s.into(), "wildcards must occupy a whole segment"))
                }
                other => FilterSegment::Level(other.to_string()),
            };
            segments.push(seg);
        }
        Ok(TopicFilter { raw: s.to_string(), segments })
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

pub fn topic_matches(filter: &TopicFilter, topic: &Topic) -> bool {
    let topic = topic.segments();
    for (i, seg) in filter.segments.iter().enumerate() {
        match seg {
            FilterSegment::Rest => return true,
            FilterSegment::Any => {
                if i >= topic.len() {
                    return false;
                }
            }
            FilterSegment::Level(name) => {
                if topic.get(i) != Some(name) {
                    return false;
                }
            }
        }
    }
    filter.segments.len() == topic.len()
}

/// Message unit carried by the broker.
///
/// Wire form: `{"id","topic","ts","schema","attempt","payload"}` with the
/// payload base64-encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub message_id: String,
    pub topic: String,
    pub publish_ts: SimMs,
    pub schema_tag: String,
    pub payload: Vec<u8>,
    pub attempt: u32,
}

#[derive(Serialize, Deserialize)]
struct WireEnvelope {
    id: String,
    topic: String,
    ts: SimMs,
    schema: String,
    attempt: u32,
    payload: String,
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireEnvelope {
            id: self.message_id.clone(),
            topic: self.topic.clone(),
            ts: self.publish_ts,
            schema: self.schema_tag.clone(),
            attempt: self.attempt,
            payload: BASE64.encode(&self.payload),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let w = WireEnvelope::deserialize(deserializer)?;
        let payload = BASE64.decode(w.payload.as_bytes()).map_err(serde::de::Error::custom)?;
        Ok(Envelope {
            message_id: w.id,
            topic: w.topic,
            publish_ts: w.ts,
            schema_tag: w.schema,
            payload,
            attempt: w.attempt,
        })
    }
}

impl Envelope {
    pub fn new(message_id: impl Into<String>, topic: impl Into<String>, publish_ts: SimMs, schema_tag: impl Into<String>, payload: Vec<u8>) -> Self {
        Self {
            message_id: message_id.into(),
            topic: topic.into(),
            publish_ts,
            schema_tag: schema_tag.into(),
            payload,
            attempt: 1,
        }
    }

    pub fn json<T: Serialize>(message_id: impl Into<String>, topic: impl Into<String>, publish_ts: SimMs, schema_tag: impl Into<String>, body: &T) -> Self {
        let payload = serde_json::to_vec(body).expect("payload serializes");
        Self::new(message_id, topic, publish_ts, schema_tag, payload)
    }

    pub fn decode<T: for<'de> Deserialize<'de>>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.payload)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    #[serde(default)]
    pub latency_ms: u64,
    /// Extra uniform latency in `[0, latency_jitter_ms]`.
    #[serde(default)]
    pub latency_jitter_ms: u64,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub duplicate_probability: f64,
    /// `None` retries forever.
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
}

fn default_backoff() -> u64 {
    1000
}

impl Default for FaultModel {
    fn default() -> Self {
        Self {
            latency_ms: 0,
            latency_jitter_ms: 0,
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            max_retries: None,
            retry_backoff_ms: default_backoff(),
        }
    }
}

impl FaultModel {
    pub fn validate(&self) -> Result<(), BusError> {
        for (name, p) in [("drop_probability", self.drop_probability), ("duplicate_probability", self.duplicate_probability)] {
            if !(0.0..1.0).contains(&p) {
                return Err(BusError::InvalidFaultModel(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        if self.retry_backoff_ms == 0 {
            return Err(BusError::InvalidFaultModel("retry_backoff_ms must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Subscription {
    client_id: String,
    filter: TopicFilter,
    seen_ids: HashSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub client_id: String,
    pub at: SimMs,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum BusEvent {
    Published { id: String, topic: String, ts: SimMs, fanout: usize },
    Delivered { client: String, id: String, attempt: u32, ts: SimMs },
    Dropped { client: String, id: String, attempt: u32, ts: SimMs, retry_at: SimMs },
    DuplicateSuppressed { client: String, id: String, ts: SimMs },
    DeadLetter { client: String, id: String, attempts: u32, ts: SimMs },
}

impl BusEvent {
    pub fn ts(&self) -> SimMs {
        match self {
            BusEvent::Published { ts, .. }
            | BusEvent::Delivered { ts, .. }
            | BusEvent::Dropped { ts, .. }
            | BusEvent::DuplicateSuppressed { ts, .. }
            | BusEvent::DeadLetter { ts, .. } => *ts,
        }
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct ScheduleKey {
    due: SimMs,
    publish_seq: u64,
    sub: usize,
}

#[derive(Debug)]
struct Scheduled {
    key: ScheduleKey,
    attempt: u32,
    envelope: std::sync::Arc<Envelope>,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Single owner of all subscription queues.
#[derive(Debug)]
pub struct Broker {
    fault: FaultModel,
    rng: ChaCha8Rng,
    subs: Vec<Subscription>,
    ids: HashSet<String>,
    pending: BinaryHeap<Reverse<Scheduled>>,
    publish_seq: u64,
    /// Latest due time per (subscription, topic); later publishes never overtake.
    fifo_floor: HashMap<(usize, String), SimMs>,
    log: Vec<BusEvent>,
}

impl Broker {
    pub fn new(fault: FaultModel, seed: u64) -> Result<Self, BusError> {
        fault.validate()?;
        Ok(Self {
            fault,
            rng: stream_rng(seed, BUS_STREAM),
            subs: Vec::new(),
            ids: HashSet::new(),
            pending: BinaryHeap::new(),
            publish_seq: 0,
            fifo_floor: HashMap::new(),
            log: Vec::new(),
        })
    }

    pub fn subscribe(&mut self, client_id: &str, filter: &str) -> Result<(), BusError> {
        let filter: TopicFilter = filter.parse()?;
        self.subs.push(Subscription { client_id: client_id.to_string(), filter, seen_ids: HashSet::new() });
        Ok(())
    }

    /// Drops every subscription held by `client_id`; queued deliveries to it
    /// are discarded when they come due.
    pub fn unsubscribe_all(&mut self, client_id: &str) {
        for sub in &mut self.subs {
            if sub.client_id == client_id {
                sub.client_id.clear();
            }
        }
    }

    /// Enqueues a copy for every matching subscription and returns the count.
    pub fn publish(&mut self, mut envelope: Envelope) -> Result<usize, BusError> {
        let topic: Topic = envelope.topic.parse()?;
        if !self.ids.insert(envelope.message_id.clone()) {
            return Err(BusError::DuplicateMessageId(envelope.message_id));
        }
        envelope.attempt = 1;
        let seq = self.publish_seq;
        self.publish_seq += 1;
        let envelope = std::sync::Arc::new(envelope);
        let mut fanout = 0;
        for (idx, sub) in self.subs.iter().enumerate() {
            if sub.client_id.is_empty() || !topic_matches(&sub.filter, &topic) {
                continue;
            }
            let jitter = if self.fault.latency_jitter_ms > 0 {
                self.rng.random_range(0..=self.fault.latency_jitter_ms)
            } else {
                0
            };
            let draw = envelope.publish_ts + (self.fault.latency_ms + jitter) as SimMs;
            let floor = self.fifo_floor.entry((idx, envelope.topic.clone())).or_insert(SimMs::MIN);
            let due = draw.max(*floor);
            *floor = due;
            self.pending.push(Reverse(Scheduled {
                key: ScheduleKey { due, publish_seq: seq, sub: idx },
                attempt: 1,
                envelope: envelope.clone(),
            }));
            fanout += 1;
        }
        self.log.push(BusEvent::Published {
            id: envelope.message_id.clone(),
            topic: envelope.topic.clone(),
            ts: envelope.publish_ts,
            fanout,
        });
        Ok(fanout)
    }

    pub fn next_due(&self) -> Option<SimMs> {
        self.pending.peek().map(|Reverse(s)| s.key.due)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Attempts every delivery due at or before `until`, in (due, publish
    /// order, subscription) order, and returns the handler invocations.
    pub fn deliver(&mut self, until: SimMs) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(Reverse(next)) = self.pending.peek() {
            if next.key.due > until {
                break;
            }
            let Reverse(item) = self.pending.pop().expect("peeked");
            let sub = &mut self.subs[item.key.sub];
            if sub.client_id.is_empty() {
                continue;
            }
            let at = item.key.due;
            let dropped = self.rng.random::<f64>() < self.fault.drop_probability;
            if dropped {
                let retries_used = item.attempt - 1;
                if self.fault.max_retries.is_none_or(|max| retries_used < max) {
                    let retry_at = at + self.fault.retry_backoff_ms as SimMs;
                    self.log.push(BusEvent::Dropped {
                        client: sub.client_id.clone(),
                        id: item.envelope.message_id.clone(),
                        attempt: item.attempt,
                        ts: at,
                        retry_at,
                    });
                    self.pending.push(Reverse(Scheduled {
                        key: ScheduleKey { due: retry_at, ..item.key },
                        attempt: item.attempt + 1,
                        envelope: item.envelope,
                    }));
                } else {
                    self.log.push(BusEvent::DeadLetter {
                        client: sub.client_id.clone(),
                        id: item.envelope.message_id.clone(),
                        attempts: item.attempt,
                        ts: at,
                    });
                }
                continue;
            }
            let id = &item.envelope.message_id;
            if sub.seen_ids.insert(id.clone()) {
                let mut envelope = (*item.envelope).clone();
                envelope.attempt = item.attempt;
                self.log.push(BusEvent::Delivered {
                    client: sub.client_id.clone(),
                    id: id.clone(),
                    attempt: item.attempt,
                    ts: at,
                });
                out.push(Delivery { client_id: sub.client_id.clone(), at, envelope });
            } else {
                self.log.push(BusEvent::DuplicateSuppressed { client: sub.client_id.clone(), id: id.clone(), ts: at });
            }
            if self.rng.random::<f64>() < self.fault.duplicate_probability {
                // the copy always hits the dedup set
                self.log.push(BusEvent::DuplicateSuppressed { client: sub.client_id.clone(), id: id.clone(), ts: at });
            }
        }
        out
    }

    pub fn drain_log(&mut self) -> Vec<BusEvent> {
        std::mem::take(&mut self.log)
    }

    pub fn log(&self) -> &[BusEvent] {
        &self.log
    }
}

//! Telemetry fanout to WebSocket subscribers.
//!
//! Each subscriber owns a bounded queue. A publish that finds a queue full
//! drops that subscriber; nobody else waits on it.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use iohrt_core::protocol::DeviceId;
use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::mpsc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    Reading,
    RobotState,
    Command,
    Device,
    Mission,
    Alert,
    Actuator,
}

impl Topic {
    pub const ALL: [Topic; 7] = [
        Topic::Reading,
        Topic::RobotState,
        Topic::Command,
        Topic::Device,
        Topic::Mission,
        Topic::Alert,
        Topic::Actuator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Reading => "reading",
            Topic::RobotState => "robot_state",
            Topic::Command => "command",
            Topic::Device => "device",
            Topic::Mission => "mission",
            Topic::Alert => "alert",
            Topic::Actuator => "actuator",
        }
    }

    pub fn parse(s: &str) -> Option<Topic> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// One message on the telemetry feed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    #[serde(rename = "type")]
    pub topic: Topic,
    pub device_id: Option<DeviceId>,
    pub payload: serde_json::Value,
    pub timestamp_ms: u64,
}

impl Event {
    pub fn new(topic: Topic, device_id: Option<DeviceId>, payload: impl Serialize, timestamp_ms: u64) -> Self {
        let payload = serde_json::to_value(payload).unwrap_or(serde_json::Value::Null);
        Self { topic, device_id, payload, timestamp_ms }
    }
}

struct Subscriber {
    id: u64,
    topics: Option<HashSet<Topic>>,
    tx: mpsc::Sender<Arc<Event>>,
}

pub struct Subscription {
    pub id: u64,
    pub rx: mpsc::Receiver<Arc<Event>>,
}

pub struct Fanout {
    backlog: usize,
    next_id: AtomicU64,
    subs: Mutex<Vec<Subscriber>>,
    dropped: AtomicU64,
}

impl Fanout {
    pub fn new(backlog: usize) -> Self {
        Self { backlog: backlog.max(1), next_id: AtomicU64::new(1), subs: Mutex::new(Vec::new()), dropped: AtomicU64::new(0) }
    }

    /// `None` subscribes to every topic.
    pub fn subscribe(&self, topics: Option<HashSet<Topic>>) -> Subscription {
        let (tx, rx) = mpsc::channel(self.backlog);
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.subs.lock().push(Subscriber { id, topics, tx });
        Subscription { id, rx }
    }

    pub fn unsubscribe(&self, id: u64) {
        self.subs.lock().retain(|s| s.id != id);
    }

    /// Delivers to every matching subscriber. Holding the lock across the
    /// loop keeps all subscribers seeing the same order.
    pub fn publish(&self, event: Event) {
        let event = Arc::new(event);
        let mut subs = self.subs.lock();
        let before = subs.len();
        subs.retain(|s| {
            if s.topics.as_ref().is_some_and(|t| !t.contains(&event.topic)) {
                return !s.tx.is_closed();
            }
            s.tx.try_send(event.clone()).is_ok()
        });
        let gone = before - subs.len();
        if gone > 0 {
            self.dropped.fetch_add(gone as u64, Ordering::Relaxed);
            tracing::debug!(gone, "dropped telemetry subscribers");
        }
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.lock().len()
    }

    /// Subscribers removed for overflow or a closed receiver.
    pub fn dropped_count(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(n: u64) -> Event {
        Event::new(Topic::Reading, None, n, n)
    }

    #[tokio::test]
    async fn both_subscribers_receive() {
        let f = Fanout::new(8);
        let mut a = f.subscribe(None);
        let mut b = f.subscribe(None);
        f.publish(reading(1));
        assert_eq!(a.rx.recv().await.unwrap().timestamp_ms, 1);
        assert_eq!(b.rx.recv().await.unwrap().timestamp_ms, 1);
    }

    #[tokio::test]
    async fn topic_filter() {
        let f = Fanout::new(8);
        let mut a = f.subscribe(Some([Topic::Alert].into()));
        f.publish(reading(1));
        f.publish(Event::new(Topic::Alert, None, "x", 2));
        assert_eq!(a.rx.recv().await.unwrap().topic, Topic::Alert);
        assert!(a.rx.try_recv().is_err());
    }

    #[tokio::test]
    async fn slow_consumer_is_dropped_alone() {
        let f = Fanout::new(4);
        let slow = f.subscribe(None);
        let mut fast = f.subscribe(None);
        for n in 0..10 {
            f.publish(reading(n));
            assert_eq!(fast.rx.recv().await.unwrap().timestamp_ms, n);
        }
        assert_eq!(f.subscriber_count(), 1);
        assert_eq!(f.dropped_count(), 1);
        let mut slow = slow;
        let mut got = Vec::new();
        while let Some(e) = slow.rx.recv().await {
            got.push(e.timestamp_ms);
        }
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn event_shape() {
        let e = Event::new(Topic::RobotState, Some(DeviceId::new("r1").unwrap()), serde_json::json!({"a":1}), 5);
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v, serde_json::json!({"type":"robot_state","device_id":"r1","payload":{"a":1},"timestamp_ms":5}));
    }
}

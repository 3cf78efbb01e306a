//! Time and identifier sources.
//!
//! Everything that stamps a time or mints an id goes through these traits so
//! the simulator can run the gateway on a virtual clock with seeded ids.

use chrono::{DateTime, Duration, FixedOffset, Utc};
use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use crate::txn::TxnId;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> ManualClock {
        ManualClock { now: Mutex::new(start) }
    }

    pub fn set(&self, t: DateTime<Utc>) {
        let mut now = self.now.lock();
        assert!(t >= *now, "virtual clock cannot run backwards");
        *now = t;
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock() += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock()
    }
}

pub trait IdSource: Send + Sync {
    fn uuid(&self) -> Uuid;
    fn txn_id(&self) -> TxnId;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn uuid(&self) -> Uuid {
        Uuid::new_v4()
    }

    fn txn_id(&self) -> TxnId {
        TxnId::from_bytes(rand::thread_rng().gen())
    }
}

/// Deterministic ids from a seeded stream.
#[derive(Debug)]
pub struct SeededIds {
    rng: Mutex<ChaCha8Rng>,
}

impl SeededIds {
    pub fn new(seed: u64) -> SeededIds {
        SeededIds { rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl IdSource for SeededIds {
    fn uuid(&self) -> Uuid {
        let mut bytes = [0u8; 16];
        self.rng.lock().fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid()
    }

    fn txn_id(&self) -> TxnId {
        let mut bytes = [0u8; 16];
        self.rng.lock().fill_bytes(&mut bytes);
        TxnId::from_bytes(bytes)
    }
}

/// Millisecond precision with a numeric offset, e.g. `2010-04-30T14:12:34.796+02:00`.
pub fn format_timestamp(t: DateTime<FixedOffset>) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.3f%:z").to_string()
}

pub fn with_offset(t: DateTime<Utc>, offset_minutes: i32) -> DateTime<FixedOffset> {
    let off = FixedOffset::east_opt(offset_minutes * 60)
        .unwrap_or_else(|| FixedOffset::east_opt(0).unwrap());
    t.with_timezone(&off)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_ids_repeat() {
        let a = SeededIds::new(7);
        let b = SeededIds::new(7);
        assert_eq!(a.uuid(), b.uuid());
        assert_eq!(a.txn_id(), b.txn_id());
        assert_ne!(SeededIds::new(8).uuid(), SeededIds::new(7).uuid());
    }

    #[test]
    fn timestamp_format() {
        let t = DateTime::parse_from_rfc3339("2010-04-30T14:12:34.796+02:00").unwrap();
        assert_eq!(format_timestamp(t), "2010-04-30T14:12:34.796+02:00");
        let u = with_offset(t.with_timezone(&Utc), 0);
        assert_eq!(format_timestamp(u), "2010-04-30T12:12:34.796+00:00");
    }

    #[test]
    fn manual_clock_moves_forward() {
        let c = ManualClock::new(DateTime::<Utc>::UNIX_EPOCH);
        c.advance(Duration::milliseconds(500));
        assert_eq!(c.now().timestamp_millis(), 500);
    }
}

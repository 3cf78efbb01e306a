//! Scenario files: a device fleet, timed steps and network faults.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error("scenario unreadable")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    pub device_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(default)]
    pub faults: Faults,
    #[serde(default)]
    pub subscriptions: Vec<SubscriptionSpec>,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default = "default_prepare_timeout_ms")]
    pub prepare_timeout_ms: u64,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_deadline_ms: u64,
    /// Longest network delay, in ticks.
    #[serde(default = "default_max_delay")]
    pub max_delay_ticks: u64,
}

fn default_tick_ms() -> u64 {
    100
}

fn default_prepare_timeout_ms() -> u64 {
    50
}

fn default_heartbeat_ms() -> u64 {
    60_000
}

fn default_max_delay() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Step {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase")]
pub enum Action {
    /// Numeric, boolean or string triples from one device.
    Reading { device: usize, triples: BTreeMap<String, serde_json::Value> },
    Move { device: usize, lat: f64, lon: f64 },
    Heartbeat { device: usize },
    Offline { device: usize },
    Send {
        from: usize,
        #[serde(default)]
        to: Option<usize>,
        #[serde(default)]
        mode: SendMode,
        #[serde(default)]
        class: SendClass,
    },
    /// A transaction with one in-process participant per vote. With
    /// `message`, a transactional message from device 0 to device 1 rides
    /// along.
    Transaction {
        votes: Vec<VoteSpec>,
        #[serde(default)]
        message: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SendMode {
    #[default]
    Single,
    Group,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SendClass {
    Unconfirmed,
    #[default]
    Confirmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum VoteSpec {
    Yes,
    No,
    /// Never answers.
    Timeout,
    /// Answers yes after the prepare deadline.
    Late,
    /// Aborts the transaction from inside prepare, then votes yes.
    AbortDuringPrepare,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Faults {
    #[serde(default)]
    pub duplication_rate: f64,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub participant_failures: Vec<ParticipantFailure>,
}

/// Overrides the vote of one participant in one transaction step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ParticipantFailure {
    pub step: usize,
    pub participant: usize,
    pub behavior: VoteSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SubscriptionSpec {
    pub device: usize,
    pub watch: Watch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Watch {
    Band { triple: String, low: f64, high: f64 },
    Circle { lat: f64, lon: f64, radius_m: f64 },
    /// Convex polygon as `[lat, lon]` pairs.
    Polygon { vertices: Vec<[f64; 2]> },
    /// Membership of a group defined by string attributes.
    Group { attributes: BTreeMap<String, String> },
    Presence,
}

impl Scenario {
    pub fn empty(seed: u64) -> Scenario {
        Scenario {
            device_count: 0,
            seed,
            steps: Vec::new(),
            faults: Faults::default(),
            subscriptions: Vec::new(),
            tick_ms: default_tick_ms(),
            prepare_timeout_ms: default_prepare_timeout_ms(),
            heartbeat_deadline_ms: default_heartbeat_ms(),
            max_delay_ticks: default_max_delay(),
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_slice(bytes)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let n = self.device_count;
        let dev = |d: usize, what: &str| {
            if d >= n {
                Err(ScenarioError::Invalid(format!("{what}: device {d} out of range (deviceCount {n})")))
            } else {
                Ok(())
            }
        };
        if self.tick_ms == 0 {
            return bad("tickMs must be positive".into());
        }
        for (name, r) in [("duplicationRate", self.faults.duplication_rate), ("dropRate", self.faults.drop_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        for (i, s) in self.steps.iter().enumerate() {
            let at = format!("step {i}");
            match &s.action {
                Action::Reading { device, triples } => {
                    dev(*device, &at)?;
                    if let Some((k, v)) = triples
                        .iter()
                        .find(|(_, v)| !(v.is_number() || v.is_boolean() || v.is_string()))
                    {
                        return bad(format!("{at}: triple {k} has unsupported value {v}"));
                    }
                }
                Action::Move { device, lat, lon } => {
                    dev(*device, &at)?;
                    if !(-90.0..=90.0).contains(lat) || !(-180.0..=180.0).contains(lon) {
                        return bad(format!("{at}: position ({lat}, {lon}) out of range"));
                    }
                }
                Action::Heartbeat { device } | Action::Offline { device } => dev(*device, &at)?,
                Action::Send { from, to, mode, .. } => {
                    dev(*from, &at)?;
                    match (mode, to) {
                        (SendMode::Single, Some(t)) => dev(*t, &at)?,
                        (SendMode::Single, None) => return bad(format!("{at}: single send needs `to`")),
                        (_, Some(_)) => return bad(format!("{at}: group sends take no `to`")),
                        _ => {}
                    }
                }
                Action::Transaction { votes, message } => {
                    if votes.is_empty() {
                        return bad(format!("{at}: transaction without participants"));
                    }
                    if *message && n < 2 {
                        return bad(format!("{at}: transactional message needs two devices"));
                    }
                }
            }
        }
        for f in &self.faults.participant_failures {
            match self.steps.get(f.step).map(|s| &s.action) {
                Some(Action::Transaction { votes, .. }) if f.participant < votes.len() => {}
                _ => return bad(format!("participant failure refers to step {} participant {}", f.step, f.participant)),
            }
        }
        for (i, s) in self.subscriptions.iter().enumerate() {
            dev(s.device, &format!("subscription {i}"))?;
        }
        Ok(())
    }

    /// `messages` confirmed single-mode sends between random devices.
    pub fn message_storm(devices: usize, messages: usize, duplication: f64, drop: f64, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = (0..messages)
            .map(|i| Step {
                at_ms: (i as u64 * 10) + rng.gen_range(0..10),
                action: Action::Send {
                    from: rng.gen_range(0..devices),
                    to: Some(rng.gen_range(0..devices)),
                    mode: SendMode::Single,
                    class: SendClass::Confirmed,
                },
            })
            .collect();
        Scenario {
            device_count: devices,
            steps,
            faults: Faults { duplication_rate: duplication, drop_rate: drop, participant_failures: Vec::new() },
            ..Scenario::empty(seed)
        }
    }

    /// `trials` transactions with random participant behavior, each also
    /// carrying a transactional message.
    pub fn txn_trials(trials: usize, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = (0..trials)
            .map(|i| {
                let k = rng.gen_range(1..=4);
                let votes = (0..k)
                    .map(|_| match rng.gen_range(0..100) {
                        0..=79 => VoteSpec::Yes,
                        80..=88 => VoteSpec::No,
                        89..=94 => VoteSpec::Timeout,
                        95..=97 => VoteSpec::Late,
                        _ => VoteSpec::AbortDuringPrepare,
                    })
                    .collect();
                Step { at_ms: i as u64 * 100, action: Action::Transaction { votes, message: true } }
            })
            .collect();
        Scenario { device_count: 2, steps, prepare_timeout_ms: 20, ..Scenario::empty(seed) }
    }

    /// `sends` any-mode messages to a group holding every device.
    pub fn any_mode(devices: usize, sends: usize, seed: u64) -> Scenario {
        let steps = (0..sends)
            .map(|i| Step {
                at_ms: i as u64,
                action: Action::Send { from: 0, to: None, mode: SendMode::Any, class: SendClass::Confirmed },
            })
            .collect();
        Scenario { device_count: devices, steps, ..Scenario::empty(seed) }
    }
}

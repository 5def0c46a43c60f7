//! Synthetic CAN traffic: periodic ECUs plus injected attacks.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, with one stream per ECU profile or attack, so a scenario
//! produces the same bytes on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CanMessage, Label, MAX_CAN_ID, MAX_DLC};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("at least one ECU profile is required")]
    EmptyProfileSet,
    #[error("invalid ECU profile {id:#05X}: {reason}")]
    InvalidProfile { id: u16, reason: String },
    #[error("invalid attack scenario: {0}")]
    InvalidScenario(String),
    #[error("attack window [{start}, {end}) does not overlap the trace")]
    WindowOutOfRange { start: f64, end: f64 },
    #[error("replay source window [{start}, {end}) contains no benign messages")]
    ReplaySourceEmpty { start: f64, end: f64 },
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("scenario file: {0}")]
    Config(String),
}

/// How an ECU fills its payload on each emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadModel {
    /// Always emits the profile's initial bytes.
    Constant,
    /// Increments one byte (wrapping) per emission.
    CounterByte { index: usize },
    /// Every byte moves by a uniform integer step in `[-step, step]`,
    /// clamped to `[0, 255]`.
    RandomWalk { step: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcuProfile {
    #[serde(rename = "id")]
    pub can_id: u16,
    /// Seconds between emissions.
    pub period: f64,
    /// Uniform delay of up to `jitter * period` added to each emission.
    #[serde(default)]
    pub jitter: f64,
    /// Time of the first emission.
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "default_dlc")]
    pub dlc: usize,
    /// Starting payload; zero-filled to `dlc` bytes when omitted.
    #[serde(default)]
    pub initial: Vec<u8>,
    #[serde(default = "default_payload")]
    pub payload: PayloadModel,
}

fn default_dlc() -> usize {
    MAX_DLC
}

fn default_payload() -> PayloadModel {
    PayloadModel::Constant
}

impl EcuProfile {
    pub fn new(can_id: u16, period: f64) -> Self {
        EcuProfile {
            can_id,
            period,
            jitter: 0.0,
            offset: 0.0,
            dlc: MAX_DLC,
            initial: Vec::new(),
            payload: PayloadModel::Constant,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| Err(SynthError::InvalidProfile { id: self.can_id, reason: reason.into() });
        if self.can_id > MAX_CAN_ID {
            return bad("id exceeds 11 bits");
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return bad("period must be positive");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return bad("offset must be non-negative");
        }
        if self.dlc > MAX_DLC {
            return bad("dlc exceeds 8");
        }
        if !self.initial.is_empty() && self.initial.len() != self.dlc {
            return bad("initial payload length differs from dlc");
        }
        if let PayloadModel::CounterByte { index } = self.payload {
            if index >= self.dlc {
                return bad("counter index outside payload");
            }
        }
        Ok(())
    }

    fn initial_payload(&self) -> Vec<u8> {
        if self.initial.is_empty() {
            vec![0; self.dlc]
        } else {
            self.initial.clone()
        }
    }
}

fn emission_count(span: f64, period: f64) -> usize {
    // The epsilon absorbs representation error in ratios such as 1.0 / 0.01.
    ((span / period) + 1e-9).floor().max(0.0) as usize
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable merge of two time-sorted sequences; on equal timestamps `a` wins.
fn merge_sorted(a: Vec<CanMessage>, b: Vec<CanMessage>) -> Vec<CanMessage> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut a = a.into_iter().peekable();
    let mut b = b.into_iter().peekable();
    loop {
        let take_a = match (a.peek(), b.peek()) {
            (Some(x), Some(y)) => x.timestamp <= y.timestamp,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        out.push(if take_a { a.next() } else { b.next() }.unwrap());
    }
    out
}

/// Emits benign periodic traffic for every profile over `[0, horizon)`.
pub fn generate_benign(profiles: &[EcuProfile], horizon: f64, seed: u64) -> Result<Vec<CanMessage>, SynthError> {
    if profiles.is_empty() {
        return Err(SynthError::EmptyProfileSet);
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SynthError::BadHorizon(horizon));
    }
    for p in profiles {
        p.validate()?;
    }
    let mut trace = Vec::new();
    for (i, profile) in profiles.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let mut payload = profile.initial_payload();
        let count = emission_count(horizon - profile.offset, profile.period);
        let mut emitted = Vec::with_capacity(count);
        for k in 0..count {
            let delay = if profile.jitter > 0.0 {
                rng.gen::<f64>() * profile.jitter * profile.period
            } else {
                0.0
            };
            let t = profile.offset + k as f64 * profile.period + delay;
            emitted.push(CanMessage { timestamp: t, can_id: profile.can_id, payload: payload.clone(), label: Label::Benign });
            match profile.payload {
                PayloadModel::Constant => {}
                PayloadModel::CounterByte { index } => payload[index] = payload[index].wrapping_add(1),
                PayloadModel::RandomWalk { step } => {
                    for b in payload.iter_mut() {
                        let delta = rng.gen_range(-(step as i32)..=step as i32);
                        *b = (*b as i32 + delta).clamp(0, 255) as u8;
                    }
                }
            }
        }
        trace = merge_sorted(trace, emitted);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// High-priority id at a fixed rate.
    Flooding {
        #[serde(default)]
        id: u16,
        rate: f64,
    },
    /// Uniform random ids in `[0, 2047]` with 8 uniform random bytes.
    Fuzzing { rate: f64 },
    /// Forged payload on a legitimate id.
    Spoofing { target_id: u16, payload: Vec<u8>, rate: f64 },
    /// Re-sends the benign messages seen in `[source_start, source_start + duration)`
    /// shifted to start at the scenario's `start`.
    Replay { source_start: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    #[serde(flatten)]
    pub kind: AttackKind,
    pub start: f64,
    pub duration: f64,
}

impl AttackScenario {
    pub fn new(kind: AttackKind, start: f64, duration: f64) -> Self {
        AttackScenario { kind, start, duration }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |r: &str| Err(SynthError::InvalidScenario(r.to_string()));
        if !(self.start >= 0.0 && self.start.is_finite()) {
            return bad("start must be non-negative");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        match &self.kind {
            AttackKind::Flooding { id, rate } => {
                if *id > MAX_CAN_ID {
                    return bad("flooding id exceeds 11 bits");
                }
                if !(*rate > 0.0) {
                    return bad("rate must be positive");
                }
            }
            AttackKind::Fuzzing { rate } => {
                if !(*rate > 0.0) {
                    return bad("rate must be positive");
                }
            }
            AttackKind::Spoofing { target_id, payload, rate } => {
                if *target_id > MAX_CAN_ID {
                    return bad("spoofing target exceeds 11 bits");
                }
                if payload.len() > MAX_DLC {
                    return bad("forged payload longer than 8 bytes");
                }
                if !(*rate > 0.0) {
                    return bad("rate must be positive");
                }
            }
            AttackKind::Replay { source_start } => {
                if !(*source_start >= 0.0) {
                    return bad("replay source must be non-negative");
                }
            }
        }
        Ok(())
    }
}

/// Injects one attack into a time-sorted trace. Original messages are kept
/// as-is; every added message is labelled [`Label::Attack`].
pub fn inject_attack(trace: &[CanMessage], scenario: &AttackScenario, seed: u64) -> Result<Vec<CanMessage>, SynthError> {
    scenario.validate()?;
    let start = scenario.start;
    let end = start + scenario.duration;
    let (first, last) = match (trace.first(), trace.last()) {
        (Some(f), Some(l)) => (f.timestamp, l.timestamp),
        _ => return Err(SynthError::WindowOutOfRange { start, end }),
    };
    if start > last || end <= first {
        return Err(SynthError::WindowOutOfRange { start, end });
    }

    let mut rng = stream_rng(seed, 0xA77A_C000);
    let periodic = |rate: f64| {
        let n = emission_count(scenario.duration, 1.0 / rate);
        (0..n).map(move |i| start + i as f64 / rate)
    };
    let attack = |timestamp: f64, can_id: u16, payload: Vec<u8>| CanMessage { timestamp, can_id, payload, label: Label::Attack };

    let injected: Vec<CanMessage> = match &scenario.kind {
        AttackKind::Flooding { id, rate } => periodic(*rate).map(|t| attack(t, *id, vec![0; MAX_DLC])).collect(),
        AttackKind::Fuzzing { rate } => periodic(*rate)
            .map(|t| {
                let id = rng.gen_range(0..=MAX_CAN_ID);
                let payload = (0..MAX_DLC).map(|_| rng.gen::<u8>()).collect();
                attack(t, id, payload)
            })
            .collect(),
        AttackKind::Spoofing { target_id, payload, rate } => {
            periodic(*rate).map(|t| attack(t, *target_id, payload.clone())).collect()
        }
        AttackKind::Replay { source_start } => {
            let src_end = source_start + scenario.duration;
            let copied: Vec<CanMessage> = trace
                .iter()
                .filter(|m| m.label != Label::Attack && m.timestamp >= *source_start && m.timestamp < src_end)
                .map(|m| attack(start + (m.timestamp - source_start), m.can_id, m.payload.clone()))
                .collect();
            if copied.is_empty() {
                return Err(SynthError::ReplaySourceEmpty { start: *source_start, end: src_end });
            }
            copied
        }
    };
    Ok(merge_sorted(trace.to_vec(), injected))
}

/// A complete synthetic scenario as read from a TOML scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub horizon: f64,
    #[serde(rename = "ecu")]
    pub ecus: Vec<EcuProfile>,
    #[serde(rename = "attack", default)]
    pub attacks: Vec<AttackScenario>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Benign traffic plus every attack, applied in file order. Attack `i`
    /// draws from seed `seed + i + 1`.
    pub fn generate(&self) -> Result<Vec<CanMessage>, SynthError> {
        self.generate_with_seed(self.seed)
    }

    pub fn generate_with_seed(&self, seed: u64) -> Result<Vec<CanMessage>, SynthError> {
        let mut trace = generate_benign(&self.ecus, self.horizon, seed)?;
        for (i, attack) in self.attacks.iter().enumerate() {
            trace = inject_attack(&trace, attack, seed.wrapping_add(i as u64 + 1))?;
        }
        Ok(trace)
    }

    /// Desk-scale scenario: ten ECUs with periods between 5 and 100 ms over
    /// 60 s (~47k benign messages, ~1000 windows of 50) with flooding,
    /// fuzzing and spoofing episodes spread through the trace. Floods run at
    /// several rates so partially flooded windows are represented.
    pub fn desk_default() -> Self {
        let ecu = |id: u16, period: f64, offset: f64, initial: [u8; 8], payload: PayloadModel| EcuProfile {
            can_id: id,
            period,
            jitter: 0.1,
            offset,
            dlc: 8,
            initial: initial.to_vec(),
            payload,
        };
        use PayloadModel::*;
        let ecus = vec![
            ecu(0x0A0, 0.005, 0.0000, [0x10, 0x00, 0x20, 0x00, 0x00, 0x00, 0x00, 0x00], CounterByte { index: 1 }),
            ecu(0x0B4, 0.005, 0.0011, [0x00, 0x00, 0x00, 0x00, 0x30, 0x30, 0x00, 0x00], RandomWalk { step: 1 }),
            ecu(0x130, 0.010, 0.0023, [0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F], Constant),
            ecu(0x18F, 0.010, 0.0037, [0x20, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], CounterByte { index: 7 }),
            ecu(0x260, 0.020, 0.0041, [0x08, 0x10, 0x08, 0x10, 0x08, 0x10, 0x08, 0x10], RandomWalk { step: 2 }),
            ecu(0x2A0, 0.020, 0.0058, [0x00, 0x40, 0x00, 0x40, 0x00, 0x00, 0x00, 0x00], Constant),
            ecu(0x316, 0.025, 0.0063, [0x05, 0x21, 0x18, 0x09, 0x21, 0x21, 0x00, 0x0F], CounterByte { index: 6 }),
            ecu(0x329, 0.050, 0.0079, [0x40, 0x10, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], RandomWalk { step: 1 }),
            ecu(0x43F, 0.050, 0.0082, [0x01, 0x45, 0x60, 0xFF, 0x6B, 0x00, 0x00, 0x00], Constant),
            ecu(0x545, 0.100, 0.0095, [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], CounterByte { index: 0 }),
        ];
        let flood = |start: f64, rate: f64| AttackScenario::new(AttackKind::Flooding { id: 0x000, rate }, start, 0.4);
        let fuzz = |start: f64| AttackScenario::new(AttackKind::Fuzzing { rate: 200.0 }, start, 0.4);
        let spoof = |start: f64| {
            AttackScenario::new(
                AttackKind::Spoofing { target_id: 0x316, payload: vec![0xFF; 8], rate: 200.0 },
                start,
                0.4,
            )
        };
        let attacks = vec![
            flood(4.0, 1000.0),
            fuzz(9.5),
            spoof(15.0),
            flood(21.0, 500.0),
            fuzz(26.5),
            spoof(32.0),
            flood(38.5, 300.0),
            fuzz(44.0),
            spoof(49.5),
            flood(55.0, 1000.0),
        ];
        Scenario { seed: 7, horizon: 60.0, ecus, attacks }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn benign_100hz(horizon: f64) -> Vec<CanMessage> {
        let mut p = EcuProfile::new(0x100, 0.01);
        p.initial = (0..8).collect();
        p.payload = PayloadModel::CounterByte { index: 0 };
        generate_benign(&[p], horizon, 1).unwrap()
    }

    #[test]
    fn single_profile_count_and_spacing() {
        let trace = generate_benign(&[EcuProfile::new(0x100, 0.01)], 1.0, 0).unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trace.iter().all(|m| m.can_id == 0x100 && m.label == Label::Benign));
        for pair in trace.windows(2) {
            assert!((pair[1].timestamp - pair[0].timestamp - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn two_profiles_interleave() {
        let profiles = [EcuProfile::new(0x100, 0.01), EcuProfile::new(0x200, 0.02)];
        let trace = generate_benign(&profiles, 1.0, 0).unwrap();
        assert_eq!(trace.len(), 150);
        assert!(trace.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(trace.iter().filter(|m| m.can_id == 0x200).count(), 50);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = Scenario::desk_default();
        let a = s.generate().unwrap();
        let b = s.generate().unwrap();
        assert_eq!(a, b);
        let c = s.generate_with_seed(8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_profiles_rejected() {
        assert_eq!(generate_benign(&[], 1.0, 0), Err(SynthError::EmptyProfileSet));
        let mut p = EcuProfile::new(0x100, 0.0);
        assert!(matches!(generate_benign(&[p.clone()], 1.0, 0), Err(SynthError::InvalidProfile { .. })));
        p.period = 0.1;
        p.jitter = 1.0;
        assert!(matches!(generate_benign(&[p], 1.0, 0), Err(SynthError::InvalidProfile { .. })));
    }

    #[test]
    fn flooding_count() {
        let trace = benign_100hz(1.0);
        let scenario = AttackScenario::new(AttackKind::Flooding { id: 0, rate: 1000.0 }, 0.5, 0.1);
        let out = inject_attack(&trace, &scenario, 3).unwrap();
        let attacks: Vec<_> = out.iter().filter(|m| m.label == Label::Attack).collect();
        assert_eq!(attacks.len(), 100);
        assert!(attacks.iter().all(|m| m.can_id == 0 && m.timestamp >= 0.5 && m.timestamp < 0.6));
    }

    #[test]
    fn spoofing_count() {
        let trace = benign_100hz(1.0);
        let scenario = AttackScenario::new(
            AttackKind::Spoofing { target_id: 0x316, payload: vec![0xFF; 8], rate: 50.0 },
            0.0,
            1.0,
        );
        let out = inject_attack(&trace, &scenario, 3).unwrap();
        let attacks: Vec<_> = out.iter().filter(|m| m.label == Label::Attack).collect();
        assert_eq!(attacks.len(), 50);
        assert!(attacks.iter().all(|m| m.can_id == 0x316));
    }

    #[test]
    fn replay_copies_source_segment() {
        let trace = benign_100hz(1.0);
        let scenario = AttackScenario::new(AttackKind::Replay { source_start: 0.0 }, 0.8, 0.1);
        let out = inject_attack(&trace, &scenario, 3).unwrap();
        let replayed: Vec<(u16, Vec<u8>)> = out
            .iter()
            .filter(|m| m.label == Label::Attack)
            .map(|m| (m.can_id, m.payload.clone()))
            .collect();
        let source: Vec<(u16, Vec<u8>)> = trace
            .iter()
            .filter(|m| m.timestamp < 0.1)
            .map(|m| (m.can_id, m.payload.clone()))
            .collect();
        assert_eq!(replayed.len(), 10);
        assert_eq!(replayed, source);
    }

    #[test]
    fn fuzzing_ranges() {
        let trace = benign_100hz(1.0);
        let scenario = AttackScenario::new(AttackKind::Fuzzing { rate: 500.0 }, 0.0, 1.0);
        let out = inject_attack(&trace, &scenario, 9).unwrap();
        let fuzz: Vec<_> = out.iter().filter(|m| m.label == Label::Attack).collect();
        assert_eq!(fuzz.len(), 500);
        assert!(fuzz.iter().all(|m| m.can_id <= MAX_CAN_ID && m.dlc() == 8));
        let distinct: std::collections::BTreeSet<u16> = fuzz.iter().map(|m| m.can_id).collect();
        assert!(distinct.len() > 300);
    }

    #[test]
    fn injection_errors() {
        let trace = benign_100hz(1.0);
        let late = AttackScenario::new(AttackKind::Fuzzing { rate: 10.0 }, 5.0, 1.0);
        assert!(matches!(inject_attack(&trace, &late, 0), Err(SynthError::WindowOutOfRange { .. })));
        let empty_src = AttackScenario::new(AttackKind::Replay { source_start: 3.0 }, 0.5, 0.1);
        assert!(matches!(inject_attack(&trace, &empty_src, 0), Err(SynthError::ReplaySourceEmpty { .. })));
        let zero_rate = AttackScenario::new(AttackKind::Fuzzing { rate: 0.0 }, 0.0, 1.0);
        assert!(matches!(inject_attack(&trace, &zero_rate, 0), Err(SynthError::InvalidScenario(_))));
    }

    #[test]
    fn label_soundness_and_order() {
        let s = Scenario::desk_default();
        let benign = generate_benign(&s.ecus, s.horizon, s.seed).unwrap();
        let full = s.generate().unwrap();
        assert!(full.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let kept: Vec<CanMessage> = full.iter().filter(|m| m.label != Label::Attack).cloned().collect();
        assert_eq!(kept, benign);
        assert!(benign.iter().all(|m| m.label == Label::Benign));
    }

    #[test]
    fn scenario_toml_round_trip() {
        let s = Scenario::desk_default();
        let text = s.to_toml_string();
        assert_eq!(Scenario::from_toml_str(&text).unwrap(), s);

        let text = r#"
            seed = 3
            horizon = 2.0
            [[ecu]]
            id = 0x316
            period = 0.01
            payload = { kind = "counter_byte", index = 2 }
            [[attack]]
            kind = "flooding"
            rate = 100.0
            start = 0.5
            duration = 0.5
        "#;
        let s = Scenario::from_toml_str(text).unwrap();
        assert_eq!(s.ecus[0].can_id, 0x316);
        assert_eq!(s.attacks[0].kind, AttackKind::Flooding { id: 0, rate: 100.0 });
        assert_eq!(s.generate().unwrap().iter().filter(|m| m.label == Label::Attack).count(), 50);
    }
}

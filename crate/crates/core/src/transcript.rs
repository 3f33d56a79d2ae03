//! Deterministic engine for one-shot protocols in the honest-but-curious
//! network model, plus exact analyzers for accuracy, security and randomness
//! cost.
//!
//! A protocol runs on a clock `t = 1..=T` with `T` odd. At odd times each
//! party may draw one random value and run local computations; at even times
//! parties send point-to-point messages. Every rule is a closure that only
//! receives a [`ViewContext`] for the acting party, and every read that leaves
//! that party's view fails with [`EngineError::PrivacyViolation`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infotheory::{
    conditional_entropy, entropy, InfoError, JointDistribution, OutcomeTable, Variable,
    ENTROPY_TOLERANCE,
};

pub type PartyId = usize;
pub type Time = u32;
pub type Value = u64;

/// Largest enumeration (inputs x randomness) that [`analyze`] accepts.
pub const MAX_ENUMERATION_CELLS: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("party {party} read outside its view: {detail}")]
    PrivacyViolation { party: PartyId, detail: String },
    #[error("party {party} sends a message to itself at t={time}")]
    SelfMessage { party: PartyId, time: Time },
    #[error("invalid protocol schedule: {0}")]
    InvalidSchedule(String),
    #[error("party {party} has no local value `{name}` at t={time}")]
    MissingLocal {
        party: PartyId,
        name: String,
        time: Time,
    },
    #[error("expected {expected} randomness values, got {got}")]
    RandomnessArity { expected: usize, got: usize },
    #[error("draw {draw} has value {value} outside alphabet of size {alphabet}")]
    RandomnessOutOfRange {
        draw: usize,
        value: Value,
        alphabet: Value,
    },
    #[error("expected {expected} inputs, got {got}")]
    InputArity { expected: usize, got: usize },
    #[error("input {value} of party {party} outside alphabet of size {alphabet}")]
    InputOutOfRange {
        party: PartyId,
        value: Value,
        alphabet: Value,
    },
    #[error("rule `{rule}` of party {party} is not deterministic: two outputs for one view")]
    Nondeterministic { party: PartyId, rule: String },
    #[error("enumeration of {cells} cells exceeds the limit of {MAX_ENUMERATION_CELLS}")]
    EnumerationTooLarge { cells: f64 },
    #[error("expected {expected} target functions, got {got}")]
    TargetArity { expected: usize, got: usize },
    #[error("input distribution does not match the protocol: {0}")]
    InputDistribution(String),
    #[error("rule failed: {0}")]
    Rule(String),
    #[error(transparent)]
    Info(#[from] InfoError),
}

/// Value computed by a rule from the acting party's view.
pub type Rule = Arc<dyn Fn(&ViewContext<'_>) -> Result<Value, EngineError> + Send + Sync>;

/// Message rule; `None` is an explicit empty message.
pub type SendRule =
    Arc<dyn Fn(&ViewContext<'_>) -> Result<Option<Value>, EngineError> + Send + Sync>;

/// A target function `f_i(x_1, ..., x_m)`.
pub type TargetFn = Arc<dyn Fn(&[Value]) -> Value + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub time: Time,
    pub party: PartyId,
    pub alphabet: Value,
}

#[derive(Clone)]
struct Compute {
    time: Time,
    party: PartyId,
    name: String,
    rule: Rule,
}

#[derive(Clone)]
struct Channel {
    time: Time,
    from: PartyId,
    to: PartyId,
    rule: SendRule,
}

/// Immutable description of a one-shot protocol.
#[derive(Clone)]
pub struct ProtocolSpec {
    name: String,
    input_alphabets: Vec<Value>,
    horizon: Time,
    draws: Vec<Draw>,
    computes: Vec<Compute>,
    sends: Vec<Channel>,
    outputs: Vec<Option<Rule>>,
}

impl fmt::Debug for ProtocolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProtocolSpec")
            .field("name", &self.name)
            .field("parties", &self.parties())
            .field("horizon", &self.horizon)
            .field("draws", &self.draws)
            .field("computes", &self.computes.len())
            .field("sends", &self.sends.len())
            .finish()
    }
}

pub struct ProtocolBuilder {
    spec: ProtocolSpec,
    horizon: Option<Time>,
}

impl ProtocolBuilder {
    /// Every party starts with a binary input and no output.
    pub fn new(name: impl Into<String>, parties: usize) -> Self {
        Self {
            spec: ProtocolSpec {
                name: name.into(),
                input_alphabets: vec![2; parties],
                horizon: 1,
                draws: Vec::new(),
                computes: Vec::new(),
                sends: Vec::new(),
                outputs: vec![None; parties],
            },
            horizon: None,
        }
    }

    pub fn horizon(mut self, horizon: Time) -> Self {
        self.horizon = Some(horizon);
        self
    }

    /// Alphabet size of a party's input; 1 means the party has no input.
    pub fn input_alphabet(mut self, party: PartyId, alphabet: Value) -> Self {
        if let Some(a) = self.spec.input_alphabets.get_mut(party) {
            *a = alphabet;
        }
        self
    }

    pub fn draw(mut self, time: Time, party: PartyId, alphabet: Value) -> Self {
        self.spec.draws.push(Draw {
            time,
            party,
            alphabet,
        });
        self
    }

    pub fn compute<F>(
        mut self,
        time: Time,
        party: PartyId,
        name: impl Into<String>,
        rule: F,
    ) -> Self
    where
        F: Fn(&ViewContext<'_>) -> Result<Value, EngineError> + Send + Sync + 'static,
    {
        self.spec.computes.push(Compute {
            time,
            party,
            name: name.into(),
            rule: Arc::new(rule),
        });
        self
    }

    pub fn send<F>(mut self, time: Time, from: PartyId, to: PartyId, rule: F) -> Self
    where
        F: Fn(&ViewContext<'_>) -> Result<Option<Value>, EngineError> + Send + Sync + 'static,
    {
        self.spec.sends.push(Channel {
            time,
            from,
            to,
            rule: Arc::new(rule),
        });
        self
    }

    /// Shorthand for a send rule that always transmits a value.
    pub fn send_value<F>(self, time: Time, from: PartyId, to: PartyId, rule: F) -> Self
    where
        F: Fn(&ViewContext<'_>) -> Result<Value, EngineError> + Send + Sync + 'static,
    {
        self.send(time, from, to, move |ctx| rule(ctx).map(Some))
    }

    pub fn output<F>(mut self, party: PartyId, rule: F) -> Self
    where
        F: Fn(&ViewContext<'_>) -> Result<Value, EngineError> + Send + Sync + 'static,
    {
        if let Some(slot) = self.spec.outputs.get_mut(party) {
            *slot = Some(Arc::new(rule));
        }
        self
    }

    pub fn build(mut self) -> Result<ProtocolSpec, EngineError> {
        let last_used = self
            .spec
            .draws
            .iter()
            .map(|d| d.time)
            .chain(self.spec.computes.iter().map(|c| c.time))
            .chain(self.spec.sends.iter().map(|s| s.time))
            .max()
            .unwrap_or(1);
        self.spec.horizon = self.horizon.unwrap_or(last_used | 1);
        self.spec.draws.sort_by_key(|d| (d.time, d.party));
        self.spec.validate()?;
        Ok(self.spec)
    }
}

impl ProtocolSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parties(&self) -> usize {
        self.input_alphabets.len()
    }

    pub fn horizon(&self) -> Time {
        self.horizon
    }

    pub fn input_alphabets(&self) -> &[Value] {
        &self.input_alphabets
    }

    /// Randomness declarations, ordered by `(time, party)`; this is the
    /// order of the `randomness` argument of [`execute`].
    pub fn draws(&self) -> &[Draw] {
        &self.draws
    }

    /// Sum of `log2(alphabet)` over all declared draws.
    pub fn declared_randomness_bits(&self) -> f64 {
        self.draws.iter().map(|d| (d.alphabet as f64).log2()).sum()
    }

    pub fn has_output(&self, party: PartyId) -> bool {
        matches!(self.outputs.get(party), Some(Some(_)))
    }

    /// Checks the timing and addressing constraints of the model.
    pub fn validate(&self) -> Result<(), EngineError> {
        let m = self.parties();
        let t_max = self.horizon;
        if m == 0 {
            return Err(EngineError::InvalidSchedule(
                "protocol has no parties".into(),
            ));
        }
        if t_max == 0 || t_max.is_multiple_of(2) {
            return Err(EngineError::InvalidSchedule(format!(
                "horizon {t_max} must be odd and at least 1"
            )));
        }
        if let Some(p) = self.input_alphabets.iter().position(|&a| a == 0) {
            return Err(EngineError::InvalidSchedule(format!(
                "party {p} has an empty input alphabet"
            )));
        }
        let check_party = |p: PartyId, what: &str| {
            if p >= m {
                Err(EngineError::InvalidSchedule(format!(
                    "{what} names party {p} of {m}"
                )))
            } else {
                Ok(())
            }
        };
        let check_odd = |t: Time, what: &str| {
            if t.is_multiple_of(2) || t > t_max {
                Err(EngineError::InvalidSchedule(format!(
                    "{what} at t={t}: local actions happen at odd times up to {t_max}"
                )))
            } else {
                Ok(())
            }
        };
        for (i, d) in self.draws.iter().enumerate() {
            check_party(d.party, "draw")?;
            check_odd(d.time, "draw")?;
            if d.alphabet == 0 {
                return Err(EngineError::InvalidSchedule(format!(
                    "draw {i} has an empty alphabet"
                )));
            }
            if self.draws[..i]
                .iter()
                .any(|e| e.party == d.party && e.time == d.time)
            {
                return Err(EngineError::InvalidSchedule(format!(
                    "party {} draws twice at t={}",
                    d.party, d.time
                )));
            }
        }
        for c in &self.computes {
            check_party(c.party, "compute")?;
            check_odd(c.time, "compute")?;
        }
        for (i, s) in self.sends.iter().enumerate() {
            check_party(s.from, "send")?;
            check_party(s.to, "send")?;
            if s.time % 2 == 1 || s.time == 0 || s.time >= t_max {
                return Err(EngineError::InvalidSchedule(format!(
                    "send at t={}: transmissions happen at even times below {t_max}",
                    s.time
                )));
            }
            if s.from == s.to {
                return Err(EngineError::SelfMessage {
                    party: s.from,
                    time: s.time,
                });
            }
            if self.sends[..i]
                .iter()
                .any(|o| o.time == s.time && o.from == s.from && o.to == s.to)
            {
                return Err(EngineError::InvalidSchedule(format!(
                    "duplicate channel {} -> {} at t={}",
                    s.from, s.to, s.time
                )));
            }
        }
        if self.outputs.len() != m {
            return Err(EngineError::InvalidSchedule(
                "output rule count mismatch".into(),
            ));
        }
        Ok(())
    }

    /// Number of even rounds with at least one declared send.
    pub fn communication_rounds(&self) -> Vec<Time> {
        let mut rounds: Vec<Time> = self.sends.iter().map(|s| s.time).collect();
        rounds.sort_unstable();
        rounds.dedup();
        rounds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub time: Time,
    pub value: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedMessage {
    pub time: Time,
    pub from: PartyId,
    /// `None` records an explicit empty message.
    pub value: Option<Value>,
}

/// Everything a party has seen: its input, its draws and its received messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyView {
    pub party: PartyId,
    pub input: Value,
    pub draws: Vec<DrawRecord>,
    pub messages: Vec<ReceivedMessage>,
}

impl PartyView {
    pub fn new(party: PartyId, input: Value) -> Self {
        Self {
            party,
            input,
            draws: Vec::new(),
            messages: Vec::new(),
        }
    }

    /// Canonical byte encoding: the input, then `(time, tag, id, value)`
    /// entries in time order. Equal encodings mean equal information.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 24 * (self.draws.len() + self.messages.len()));
        out.extend_from_slice(&(self.party as u16).to_le_bytes());
        out.extend_from_slice(&self.input.to_le_bytes());
        let mut draws = self.draws.iter().peekable();
        let mut messages = self.messages.iter().peekable();
        loop {
            let take_draw = match (draws.peek(), messages.peek()) {
                (Some(d), Some(m)) => d.time < m.time,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_draw {
                let d = draws.next().expect("peeked");
                out.extend_from_slice(&d.time.to_le_bytes());
                out.push(0);
                out.extend_from_slice(&(self.party as u16).to_le_bytes());
                out.push(1);
                out.extend_from_slice(&d.value.to_le_bytes());
            } else {
                let m = messages.next().expect("peeked");
                out.extend_from_slice(&m.time.to_le_bytes());
                out.push(1);
                out.extend_from_slice(&(m.from as u16).to_le_bytes());
                match m.value {
                    Some(v) => {
                        out.push(1);
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    None => {
                        out.push(0);
                        out.extend_from_slice(&0u64.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Draw times strictly increase at odd times; message keys `(time, from)`
    /// strictly increase at even times.
    pub fn is_well_formed(&self) -> bool {
        let draws_ok = self.draws.iter().all(|d| d.time % 2 == 1)
            && self.draws.windows(2).all(|w| w[0].time < w[1].time);
        let messages_ok = self.messages.iter().all(|m| m.time % 2 == 0)
            && self
                .messages
                .windows(2)
                .all(|w| (w[0].time, w[0].from) < (w[1].time, w[1].from));
        draws_ok && messages_ok
    }
}

/// Read-only window onto the acting party's view at the current time.
pub struct ViewContext<'a> {
    view: &'a PartyView,
    locals: &'a BTreeMap<String, Value>,
    time: Time,
}

impl<'a> ViewContext<'a> {
    fn violation(&self, detail: String) -> EngineError {
        EngineError::PrivacyViolation {
            party: self.view.party,
            detail,
        }
    }

    pub fn party(&self) -> PartyId {
        self.view.party
    }

    pub fn time(&self) -> Time {
        self.time
    }

    pub fn view(&self) -> &PartyView {
        self.view
    }

    pub fn input(&self) -> Value {
        self.view.input
    }

    /// The input of `party`; only the acting party's own input is readable.
    pub fn input_of(&self, party: PartyId) -> Result<Value, EngineError> {
        if party == self.view.party {
            Ok(self.view.input)
        } else {
            Err(self.violation(format!("input of party {party}")))
        }
    }

    /// The acting party's draw at odd time `t`.
    pub fn draw(&self, t: Time) -> Result<Value, EngineError> {
        self.view
            .draws
            .iter()
            .find(|d| d.time == t)
            .map(|d| d.value)
            .ok_or_else(|| self.violation(format!("no draw at t={t}")))
    }

    /// The draw of `party` at `t`; only the acting party's draws are readable.
    pub fn draw_of(&self, party: PartyId, t: Time) -> Result<Value, EngineError> {
        if party == self.view.party {
            self.draw(t)
        } else {
            Err(self.violation(format!("draw of party {party} at t={t}")))
        }
    }

    /// Message received from `from` at even time `t`, `None` if it was empty.
    pub fn message(&self, t: Time, from: PartyId) -> Result<Option<Value>, EngineError> {
        self.view
            .messages
            .iter()
            .find(|m| m.time == t && m.from == from)
            .map(|m| m.value)
            .ok_or_else(|| self.violation(format!("no message from party {from} at t={t}")))
    }

    /// Like [`ViewContext::message`] but an empty message is an error.
    pub fn value_from(&self, t: Time, from: PartyId) -> Result<Value, EngineError> {
        self.message(t, from)?
            .ok_or_else(|| EngineError::Rule(format!("empty message from party {from} at t={t}")))
    }

    /// A value stored by an earlier compute rule of the acting party.
    pub fn local(&self, name: &str) -> Result<Value, EngineError> {
        self.locals
            .get(name)
            .copied()
            .ok_or_else(|| EngineError::MissingLocal {
                party: self.view.party,
                name: name.to_string(),
                time: self.time,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub time: Time,
    pub from: PartyId,
    pub to: PartyId,
    pub value: Option<Value>,
}

/// A full run: inputs, every party's view and output, and the message ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolTranscript {
    pub protocol: String,
    pub inputs: Vec<Value>,
    pub views: Vec<PartyView>,
    pub outputs: Vec<Option<Value>>,
    pub ledger: Vec<LedgerEntry>,
}

impl ProtocolTranscript {
    /// Assembles a transcript from per-party records, e.g. from separate processes.
    pub fn assemble(protocol: impl Into<String>, mut records: Vec<PartyRecord>) -> Self {
        records.sort_by_key(|r| r.view.party);
        let mut ledger: Vec<LedgerEntry> = records
            .iter()
            .flat_map(|r| r.sent.iter().copied())
            .collect();
        ledger.sort();
        Self {
            protocol: protocol.into(),
            inputs: records.iter().map(|r| r.view.input).collect(),
            outputs: records.iter().map(|r| r.output).collect(),
            views: records.into_iter().map(|r| r.view).collect(),
            ledger,
        }
    }

    /// Every received message matches exactly one ledger entry and vice versa.
    pub fn ledger_is_consistent(&self) -> bool {
        let mut received: Vec<LedgerEntry> = self
            .views
            .iter()
            .flat_map(|v| {
                v.messages.iter().map(move |m| LedgerEntry {
                    time: m.time,
                    from: m.from,
                    to: v.party,
                    value: m.value,
                })
            })
            .collect();
        received.sort();
        received == self.ledger
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

/// What a single party knows at the end of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyRecord {
    pub view: PartyView,
    pub sent: Vec<LedgerEntry>,
    pub output: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum RuleId {
    Compute(usize),
    Send(usize),
    Output(PartyId),
}

/// Records rule outputs per view to detect nondeterministic rules.
#[derive(Default)]
struct DeterminismMemo {
    seen: HashMap<(RuleId, Vec<u8>), Option<Value>>,
}

impl DeterminismMemo {
    fn check(
        &mut self,
        spec: &ProtocolSpec,
        rule: RuleId,
        view: &PartyView,
        out: Option<Value>,
    ) -> Result<(), EngineError> {
        let key = (rule, view.canonical_bytes());
        match self.seen.get(&key) {
            Some(prev) if *prev != out => {
                let (party, name) = match rule {
                    RuleId::Compute(i) => (
                        spec.computes[i].party,
                        format!("compute {}", spec.computes[i].name),
                    ),
                    RuleId::Send(i) => (
                        spec.sends[i].from,
                        format!(
                            "send {}->{} at t={}",
                            spec.sends[i].from, spec.sends[i].to, spec.sends[i].time
                        ),
                    ),
                    RuleId::Output(p) => (p, "output".to_string()),
                };
                Err(EngineError::Nondeterministic { party, rule: name })
            }
            Some(_) => Ok(()),
            None => {
                self.seen.insert(key, out);
                Ok(())
            }
        }
    }
}

/// One party's state machine; drives both in-process and networked runs.
pub struct PartyMachine<'s> {
    spec: &'s ProtocolSpec,
    view: PartyView,
    locals: BTreeMap<String, Value>,
    draws: Vec<Value>,
    sent: Vec<LedgerEntry>,
}

impl<'s> PartyMachine<'s> {
    /// `draws` holds this party's randomness in `(time)` order of its declarations.
    pub fn new(
        spec: &'s ProtocolSpec,
        party: PartyId,
        input: Value,
        draws: Vec<Value>,
    ) -> Result<Self, EngineError> {
        let alphabet = spec.input_alphabets[party];
        if input >= alphabet {
            return Err(EngineError::InputOutOfRange {
                party,
                value: input,
                alphabet,
            });
        }
        let own: Vec<&Draw> = spec.draws.iter().filter(|d| d.party == party).collect();
        if own.len() != draws.len() {
            return Err(EngineError::RandomnessArity {
                expected: own.len(),
                got: draws.len(),
            });
        }
        Ok(Self {
            spec,
            view: PartyView::new(party, input),
            locals: BTreeMap::new(),
            draws,
            sent: Vec::new(),
        })
    }

    pub fn party(&self) -> PartyId {
        self.view.party
    }

    pub fn view(&self) -> &PartyView {
        &self.view
    }

    fn ctx(&self, time: Time) -> ViewContext<'_> {
        ViewContext {
            view: &self.view,
            locals: &self.locals,
            time,
        }
    }

    /// Odd time: draw (if declared) and then run compute rules in order.
    pub fn local_step(&mut self, t: Time) -> Result<(), EngineError> {
        self.local_step_checked(t, None)
    }

    fn local_step_checked(
        &mut self,
        t: Time,
        mut memo: Option<&mut DeterminismMemo>,
    ) -> Result<(), EngineError> {
        let party = self.view.party;
        let own_index = self
            .spec
            .draws
            .iter()
            .filter(|d| d.party == party)
            .position(|d| d.time == t);
        if let Some(k) = own_index {
            let value = self.draws[k];
            self.view.draws.push(DrawRecord { time: t, value });
        }
        for (i, c) in self.spec.computes.iter().enumerate() {
            if c.party != party || c.time != t {
                continue;
            }
            let value = (c.rule)(&self.ctx(t))?;
            if let Some(memo) = memo.as_deref_mut() {
                memo.check(self.spec, RuleId::Compute(i), &self.view, Some(value))?;
            }
            self.locals.insert(c.name.clone(), value);
        }
        Ok(())
    }

    /// Even time: evaluate this party's send rules against its current view.
    pub fn outgoing(&mut self, t: Time) -> Result<Vec<LedgerEntry>, EngineError> {
        self.outgoing_checked(t, None)
    }

    fn outgoing_checked(
        &mut self,
        t: Time,
        mut memo: Option<&mut DeterminismMemo>,
    ) -> Result<Vec<LedgerEntry>, EngineError> {
        let party = self.view.party;
        let mut out = Vec::new();
        for (i, s) in self.spec.sends.iter().enumerate() {
            if s.from != party || s.time != t {
                continue;
            }
            let value = (s.rule)(&self.ctx(t))?;
            if let Some(memo) = memo.as_deref_mut() {
                memo.check(self.spec, RuleId::Send(i), &self.view, value)?;
            }
            out.push(LedgerEntry {
                time: t,
                from: party,
                to: s.to,
                value,
            });
        }
        out.sort();
        self.sent.extend(out.iter().copied());
        Ok(out)
    }

    /// Senders this party expects to hear from at even time `t`.
    pub fn expected_senders(&self, t: Time) -> Vec<PartyId> {
        let mut from: Vec<PartyId> = self
            .spec
            .sends
            .iter()
            .filter(|s| s.time == t && s.to == self.view.party)
            .map(|s| s.from)
            .collect();
        from.sort_unstable();
        from
    }

    /// Appends a round's received messages in canonical sender order.
    pub fn deliver(
        &mut self,
        t: Time,
        mut received: Vec<(PartyId, Option<Value>)>,
    ) -> Result<(), EngineError> {
        received.sort_by_key(|(from, _)| *from);
        let senders: Vec<PartyId> = received.iter().map(|(f, _)| *f).collect();
        if senders != self.expected_senders(t) {
            return Err(EngineError::InvalidSchedule(format!(
                "party {} at t={t} received from {senders:?}, expected {:?}",
                self.view.party,
                self.expected_senders(t)
            )));
        }
        for (from, value) in received {
            self.view.messages.push(ReceivedMessage {
                time: t,
                from,
                value,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PartyRecord, EngineError> {
        self.finish_checked(None)
    }

    fn finish_checked(
        self,
        memo: Option<&mut DeterminismMemo>,
    ) -> Result<PartyRecord, EngineError> {
        let party = self.view.party;
        let output = match &self.spec.outputs[party] {
            Some(rule) => {
                let v = rule(&self.ctx(self.spec.horizon))?;
                if let Some(memo) = memo {
                    memo.check(self.spec, RuleId::Output(party), &self.view, Some(v))?;
                }
                Some(v)
            }
            None => None,
        };
        Ok(PartyRecord {
            view: self.view,
            sent: self.sent,
            output,
        })
    }
}

/// Splits global randomness (ordered as [`ProtocolSpec::draws`]) per party.
fn split_randomness(
    spec: &ProtocolSpec,
    randomness: &[Value],
) -> Result<Vec<Vec<Value>>, EngineError> {
    if randomness.len() != spec.draws.len() {
        return Err(EngineError::RandomnessArity {
            expected: spec.draws.len(),
            got: randomness.len(),
        });
    }
    let mut per_party = vec![Vec::new(); spec.parties()];
    for (i, (d, &v)) in spec.draws.iter().zip(randomness).enumerate() {
        if v >= d.alphabet {
            return Err(EngineError::RandomnessOutOfRange {
                draw: i,
                value: v,
                alphabet: d.alphabet,
            });
        }
        per_party[d.party].push(v);
    }
    Ok(per_party)
}

/// Runs the protocol in-process. Identical arguments give identical transcripts.
pub fn execute(
    spec: &ProtocolSpec,
    inputs: &[Value],
    randomness: &[Value],
) -> Result<ProtocolTranscript, EngineError> {
    execute_inner(spec, inputs, randomness, None)
}

fn execute_inner(
    spec: &ProtocolSpec,
    inputs: &[Value],
    randomness: &[Value],
    mut memo: Option<&mut DeterminismMemo>,
) -> Result<ProtocolTranscript, EngineError> {
    spec.validate()?;
    if inputs.len() != spec.parties() {
        return Err(EngineError::InputArity {
            expected: spec.parties(),
            got: inputs.len(),
        });
    }
    let per_party = split_randomness(spec, randomness)?;
    let mut machines = inputs
        .iter()
        .zip(per_party)
        .enumerate()
        .map(|(i, (&x, r))| PartyMachine::new(spec, i, x, r))
        .collect::<Result<Vec<_>, _>>()?;

    for t in 1..=spec.horizon {
        if t % 2 == 1 {
            for m in machines.iter_mut() {
                m.local_step_checked(t, memo.as_deref_mut())?;
            }
        } else {
            // all sends of a round see the views from before the round
            let mut inboxes: Vec<Vec<(PartyId, Option<Value>)>> = vec![Vec::new(); machines.len()];
            for m in machines.iter_mut() {
                for e in m.outgoing_checked(t, memo.as_deref_mut())? {
                    inboxes[e.to].push((e.from, e.value));
                }
            }
            for (m, inbox) in machines.iter_mut().zip(inboxes) {
                m.deliver(t, inbox)?;
            }
        }
    }

    let records = machines
        .into_iter()
        .map(|m| m.finish_checked(memo.as_deref_mut()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProtocolTranscript::assemble(spec.name.clone(), records))
}

/// Draws for one party derived from its seed, in the party's declaration order.
pub fn draws_from_seed(spec: &ProtocolSpec, party: PartyId, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.draws
        .iter()
        .filter(|d| d.party == party)
        .map(|d| rng.gen_range(0..d.alphabet))
        .collect()
}

/// Global randomness vector equivalent to seeding each party with `seeds[i]`.
pub fn randomness_from_seeds(spec: &ProtocolSpec, seeds: &[u64]) -> Vec<Value> {
    let mut per_party: Vec<std::vec::IntoIter<Value>> = (0..spec.parties())
        .map(|p| draws_from_seed(spec, p, seeds.get(p).copied().unwrap_or(0)).into_iter())
        .collect();
    spec.draws
        .iter()
        .map(|d| per_party[d.party].next().expect("one value per draw"))
        .collect()
}

/// Per-party target functions; `None` is the empty function.
#[derive(Clone)]
pub struct TargetFunctions(Vec<Option<TargetFn>>);

impl TargetFunctions {
    pub fn none(parties: usize) -> Self {
        Self(vec![None; parties])
    }

    /// The same function at every party.
    pub fn all<F>(parties: usize, f: F) -> Self
    where
        F: Fn(&[Value]) -> Value + Send + Sync + 'static,
    {
        let f: TargetFn = Arc::new(f);
        Self(vec![Some(f); parties])
    }

    pub fn with<F>(mut self, party: PartyId, f: F) -> Self
    where
        F: Fn(&[Value]) -> Value + Send + Sync + 'static,
    {
        if let Some(slot) = self.0.get_mut(party) {
            *slot = Some(Arc::new(f));
        }
        self
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, party: PartyId) -> Option<&TargetFn> {
        self.0.get(party).and_then(Option::as_ref)
    }
}

impl fmt::Debug for TargetFunctions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(
                self.0
                    .iter()
                    .map(|t| if t.is_some() { "f" } else { "none" }),
            )
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyResiduals {
    pub party: PartyId,
    pub has_target: bool,
    /// H(f_i | Y_i, X_i).
    pub accuracy_residual: f64,
    /// H(X_~i | X_i, f_i) - H(X_~i | X_i, Y_i, f_i): what the view reveals
    /// about the other inputs beyond f_i. Never below -1e-9.
    pub security_residual: f64,
    /// Enumeration cells where the party's output rule disagrees with f_i.
    pub output_mismatches: u64,
    pub accuracy_pass: bool,
    pub security_pass: bool,
}

/// Exact accuracy, security and randomness figures of one protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub protocol: String,
    pub parties: usize,
    /// H(Y_1, ..., Y_m | X_1, ..., X_m) in bits.
    pub randomness_cost: f64,
    /// The same quantity accumulated party by party with the chain rule.
    pub randomness_cost_chain: f64,
    pub declared_randomness_bits: f64,
    pub cells: u64,
    pub joint_mass: f64,
    pub residuals: Vec<PartyResiduals>,
    pub all_pass: bool,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn max_security_residual(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.security_residual)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// True iff the measured randomness cost reaches `lower_bound` (within 1e-9).
pub fn converse_check(report: &AnalysisReport, lower_bound: f64) -> bool {
    report.randomness_cost >= lower_bound - ENTROPY_TOLERANCE
}

#[derive(Default)]
struct Interner {
    ids: HashMap<Vec<u8>, u32>,
}

impl Interner {
    fn id(&mut self, key: Vec<u8>) -> u32 {
        let next = self.ids.len() as u32;
        *self.ids.entry(key).or_insert(next)
    }
}

fn default_input_distribution(spec: &ProtocolSpec) -> Result<JointDistribution, EngineError> {
    let vars = spec
        .input_alphabets
        .iter()
        .enumerate()
        .map(|(i, &a)| Variable::new(format!("X{i}"), a as usize))
        .collect();
    Ok(JointDistribution::uniform(vars)?)
}

/// Enumerates every input tuple and every randomness tuple, builds the exact
/// joint law of (inputs, views, target values) and evaluates the accuracy,
/// security and randomness-cost quantities. Inputs default to independent
/// uniform values.
pub fn analyze(
    spec: &ProtocolSpec,
    targets: &TargetFunctions,
    inputs: Option<&JointDistribution>,
) -> Result<AnalysisReport, EngineError> {
    spec.validate()?;
    let m = spec.parties();
    if targets.len() != m {
        return Err(EngineError::TargetArity {
            expected: m,
            got: targets.len(),
        });
    }
    let default_dist;
    let dist = match inputs {
        Some(d) => d,
        None => {
            default_dist = default_input_distribution(spec)?;
            &default_dist
        }
    };
    let sizes = dist.alphabet_sizes();
    if sizes.len() != m
        || sizes
            .iter()
            .zip(&spec.input_alphabets)
            .any(|(&s, &a)| s as Value != a)
    {
        return Err(EngineError::InputDistribution(format!(
            "alphabets {sizes:?} vs protocol inputs {:?}",
            spec.input_alphabets
        )));
    }

    let randomness_cells: f64 = spec.draws.iter().map(|d| d.alphabet as f64).product();
    let input_cells: f64 = sizes.iter().map(|&s| s as f64).product();
    let cells = randomness_cells * input_cells;
    if cells > MAX_ENUMERATION_CELLS as f64 {
        return Err(EngineError::EnumerationTooLarge { cells });
    }
    let randomness_mass = 1.0 / randomness_cells;
    let draw_sizes: Vec<usize> = spec.draws.iter().map(|d| d.alphabet as usize).collect();

    // variables: X_0..X_{m-1}, Y_0..Y_{m-1}, F_0..F_{m-1}
    let labels: Vec<String> = (0..m)
        .map(|i| format!("X{i}"))
        .chain((0..m).map(|i| format!("Y{i}")))
        .chain((0..m).map(|i| format!("F{i}")))
        .collect();
    let mut table = OutcomeTable::new(labels);
    let mut interners: Vec<Interner> = (0..m).map(|_| Interner::default()).collect();
    let mut memo = DeterminismMemo::default();
    let mut mismatches = vec![0u64; m];

    for (input_tuple, input_mass) in dist.cells() {
        if input_mass == 0.0 {
            continue;
        }
        let inputs: Vec<Value> = input_tuple.iter().map(|&v| v as Value).collect();
        let f_values: Vec<Value> = (0..m)
            .map(|i| targets.get(i).map_or(0, |f| f(&inputs)))
            .collect();
        let mut draw_tuple = vec![0usize; draw_sizes.len()];
        for _ in 0..randomness_cells as u64 {
            let randomness: Vec<Value> = draw_tuple.iter().map(|&v| v as Value).collect();
            let transcript = execute_inner(spec, &inputs, &randomness, Some(&mut memo))?;
            let mut outcome = Vec::with_capacity(3 * m);
            outcome.extend(inputs.iter().map(|&v| v as u32));
            for (view, interner) in transcript.views.iter().zip(interners.iter_mut()) {
                outcome.push(interner.id(view.canonical_bytes()));
            }
            outcome.extend(f_values.iter().map(|&v| v as u32));
            table.add(outcome, input_mass * randomness_mass)?;
            for i in 0..m {
                if let (Some(_), Some(out)) = (targets.get(i), transcript.outputs[i]) {
                    if out != f_values[i] {
                        mismatches[i] += 1;
                    }
                }
            }
            crate::infotheory::advance_mixed_radix(&mut draw_tuple, &draw_sizes);
        }
    }
    table.check_normalized()?;
    let joint_mass = crate::infotheory::Entropic::total_mass(&table);

    let x: Vec<String> = (0..m).map(|i| format!("X{i}")).collect();
    let y: Vec<String> = (0..m).map(|i| format!("Y{i}")).collect();
    let f: Vec<String> = (0..m).map(|i| format!("F{i}")).collect();
    let xs: Vec<&str> = x.iter().map(String::as_str).collect();
    let ys: Vec<&str> = y.iter().map(String::as_str).collect();

    let randomness_cost = conditional_entropy(&table, &ys, &xs)?;
    let mut randomness_cost_chain = 0.0;
    for i in 0..m {
        let mut given = xs.clone();
        given.extend(&ys[..i]);
        randomness_cost_chain += conditional_entropy(&table, &ys[i..=i], &given)?;
    }

    let mut residuals = Vec::with_capacity(m);
    for i in 0..m {
        let others: Vec<&str> = xs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| *s)
            .collect();
        let accuracy_residual = conditional_entropy(&table, &[f[i].as_str()], &[xs[i], ys[i]])?;
        let security_residual = if others.is_empty() {
            0.0
        } else {
            conditional_entropy(&table, &others, &[xs[i], f[i].as_str()])?
                - conditional_entropy(&table, &others, &[xs[i], ys[i], f[i].as_str()])?
        };
        let has_target = targets.get(i).is_some();
        residuals.push(PartyResiduals {
            party: i,
            has_target,
            accuracy_residual,
            security_residual,
            output_mismatches: mismatches[i],
            accuracy_pass: accuracy_residual.abs() <= ENTROPY_TOLERANCE && mismatches[i] == 0,
            security_pass: security_residual.abs() <= ENTROPY_TOLERANCE,
        });
    }
    debug_assert!(entropy(&table, &xs).is_ok());
    let all_pass = residuals.iter().all(|r| r.accuracy_pass && r.security_pass);
    Ok(AnalysisReport {
        protocol: spec.name.clone(),
        parties: m,
        randomness_cost,
        randomness_cost_chain,
        declared_randomness_bits: spec.declared_randomness_bits(),
        cells: cells as u64,
        joint_mass,
        residuals,
        all_pass,
    })
}

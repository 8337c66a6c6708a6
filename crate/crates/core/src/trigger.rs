//! Per-source trigger blocks: comparators, counter state machines, and
//! trace qualification.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::machine::{CycleEvents, DataAccess, MasterId, Retire};

pub const MAX_COMPARATORS: usize = 32;
pub const MAX_STATES: u8 = 4;
pub const MAX_COUNTERS: usize = 4;
pub const TRIGGER_LINES: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum CompKind {
    Pc,
    DataAddr,
    DataValue,
    /// Matches the id of the master performing a data access.
    BusMaster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum CompOp {
    Eq,
    Neq,
    InRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum Access {
    Read,
    Write,
    Exec,
    #[default]
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SourceFilter {
    #[default]
    Any,
    Master(u8),
}

impl SourceFilter {
    fn admits(self, m: MasterId) -> bool {
        match self {
            SourceFilter::Any => true,
            SourceFilter::Master(id) => id == m.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Comparator {
    pub id: u8,
    pub kind: CompKind,
    pub op: CompOp,
    pub lo: u32,
    #[cfg_attr(feature = "serde", serde(default))]
    pub hi: u32,
    #[cfg_attr(feature = "serde", serde(default))]
    pub access: Access,
    #[cfg_attr(feature = "serde", serde(default))]
    pub source: SourceFilter,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TriggerError {
    #[error("comparator id {0} out of range (max {MAX_COMPARATORS})")]
    ComparatorId(u8),
    #[error("comparator {0} is defined twice")]
    DuplicateComparator(u8),
    #[error("comparator {0}: IN_RANGE needs lo <= hi")]
    EmptyRange(u8),
    #[error("comparator {0}: PC comparators must use access EXEC")]
    PcAccess(u8),
    #[error("comparator {0}: EXEC access only applies to PC comparators")]
    ExecOnData(u8),
    #[error("fsm has {0} states (1..={MAX_STATES})")]
    StateCount(u8),
    #[error("fsm has {0} counters (max {MAX_COUNTERS})")]
    CounterCount(usize),
    #[error("counter {0}: threshold must be at least 1")]
    Threshold(usize),
    #[error("initial state {0} does not exist")]
    InitialState(u8),
    #[error("transition {index}: state {state} does not exist")]
    TransitionState { index: usize, state: u8 },
    #[error("transition {index}: counter {counter} does not exist")]
    TransitionCounter { index: usize, counter: u8 },
    #[error("transition {index}: comparator {comparator} does not exist")]
    TransitionComparator { index: usize, comparator: u8 },
    #[error("counter {counter}: comparator {comparator} does not exist")]
    CounterComparator { counter: usize, comparator: u8 },
    #[error("transition {0}: TRACE_ON and TRACE_OFF together")]
    TraceOnOff(usize),
}

impl Comparator {
    pub fn validate(&self) -> Result<(), TriggerError> {
        if self.id as usize >= MAX_COMPARATORS {
            return Err(TriggerError::ComparatorId(self.id));
        }
        if self.op == CompOp::InRange && self.lo > self.hi {
            return Err(TriggerError::EmptyRange(self.id));
        }
        match (self.kind, self.access) {
            (CompKind::Pc, Access::Exec) => Ok(()),
            (CompKind::Pc, _) => Err(TriggerError::PcAccess(self.id)),
            (_, Access::Exec) => Err(TriggerError::ExecOnData(self.id)),
            _ => Ok(()),
        }
    }

    fn compare(&self, v: u32) -> bool {
        match self.op {
            CompOp::Eq => v == self.lo,
            CompOp::Neq => v != self.lo,
            CompOp::InRange => self.lo <= v && v <= self.hi,
        }
    }

    pub fn matches_retire(&self, r: &Retire) -> bool {
        self.kind == CompKind::Pc && self.source.admits(r.source) && self.compare(r.pc)
    }

    pub fn matches_access(&self, a: &DataAccess) -> bool {
        let access_ok = match self.access {
            Access::Any => true,
            Access::Read => !a.write,
            Access::Write => a.write,
            Access::Exec => false,
        };
        let v = match self.kind {
            CompKind::Pc => return false,
            CompKind::DataAddr => a.addr,
            CompKind::DataValue => a.value,
            CompKind::BusMaster => a.source.0 as u32,
        };
        access_ok && self.source.admits(a.source) && self.compare(v)
    }
}

/// Bitmask of comparators (by id) that hit in one cycle.
pub fn evaluate(events: &CycleEvents, comparators: &[Comparator]) -> u32 {
    let mut hits = 0u32;
    for c in comparators {
        let hit = events.retires.iter().any(|r| c.matches_retire(r)) || events.data.iter().any(|a| c.matches_access(a));
        if hit {
            hits |= 1 << c.id;
        }
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ActionSet {
    pub break_req: bool,
    pub suspend_req: bool,
    pub trace_on: bool,
    pub trace_off: bool,
    pub mark: bool,
    /// Bit `l` drives trigger output line `l`.
    pub trigger_out: u8,
}

impl ActionSet {
    pub fn is_empty(&self) -> bool {
        *self == ActionSet::default()
    }

    pub fn merge(&mut self, o: &ActionSet) {
        self.break_req |= o.break_req;
        self.suspend_req |= o.suspend_req;
        self.trace_on |= o.trace_on;
        self.trace_off |= o.trace_off;
        self.mark |= o.mark;
        self.trigger_out |= o.trigger_out;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Counter {
    pub threshold: u32,
    /// Comparator whose hits advance the counter automatically.
    #[cfg_attr(feature = "serde", serde(default))]
    pub count_event: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Cond {
    Always,
    Hit(u8),
    Elapsed(u8),
    Not(Box<Cond>),
    All(Vec<Cond>),
    Any(Vec<Cond>),
}

impl Cond {
    pub fn eval(&self, hits: u32, elapsed: u8) -> bool {
        match self {
            Cond::Always => true,
            Cond::Hit(c) => *c < 32 && hits >> c & 1 == 1,
            Cond::Elapsed(k) => *k < 8 && elapsed >> k & 1 == 1,
            Cond::Not(c) => !c.eval(hits, elapsed),
            Cond::All(cs) => cs.iter().all(|c| c.eval(hits, elapsed)),
            Cond::Any(cs) => cs.iter().any(|c| c.eval(hits, elapsed)),
        }
    }

    fn check(&self, index: usize, counters: usize, comparators: u32) -> Result<(), TriggerError> {
        match self {
            Cond::Always => Ok(()),
            Cond::Hit(c) => {
                if *c < 32 && comparators >> c & 1 == 1 {
                    Ok(())
                } else {
                    Err(TriggerError::TransitionComparator { index, comparator: *c })
                }
            }
            Cond::Elapsed(k) => {
                if (*k as usize) < counters {
                    Ok(())
                } else {
                    Err(TriggerError::TransitionCounter { index, counter: *k })
                }
            }
            Cond::Not(c) => c.check(index, counters, comparators),
            Cond::All(cs) | Cond::Any(cs) => cs.iter().try_for_each(|c| c.check(index, counters, comparators)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CounterOp {
    Inc(u8),
    Clear(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Transition {
    pub from: u8,
    pub when: Cond,
    pub to: u8,
    #[cfg_attr(feature = "serde", serde(default))]
    pub actions: ActionSet,
    #[cfg_attr(feature = "serde", serde(default))]
    pub counter_ops: Vec<CounterOp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FsmConfig {
    pub states: u8,
    pub initial: u8,
    pub counters: Vec<Counter>,
    pub transitions: Vec<Transition>,
}

impl Default for FsmConfig {
    fn default() -> Self {
        FsmConfig { states: 1, initial: 0, counters: Vec::new(), transitions: Vec::new() }
    }
}

impl FsmConfig {
    /// `comparators` is the bitmask of defined comparator ids.
    pub fn validate(&self, comparators: u32) -> Result<(), TriggerError> {
        if self.states == 0 || self.states > MAX_STATES {
            return Err(TriggerError::StateCount(self.states));
        }
        if self.initial >= self.states {
            return Err(TriggerError::InitialState(self.initial));
        }
        if self.counters.len() > MAX_COUNTERS {
            return Err(TriggerError::CounterCount(self.counters.len()));
        }
        for (i, c) in self.counters.iter().enumerate() {
            if c.threshold == 0 {
                return Err(TriggerError::Threshold(i));
            }
            if let Some(e) = c.count_event {
                if e >= 32 || comparators >> e & 1 == 0 {
                    return Err(TriggerError::CounterComparator { counter: i, comparator: e });
                }
            }
        }
        for (index, t) in self.transitions.iter().enumerate() {
            for s in [t.from, t.to] {
                if s >= self.states {
                    return Err(TriggerError::TransitionState { index, state: s });
                }
            }
            t.when.check(index, self.counters.len(), comparators)?;
            for op in &t.counter_ops {
                let (CounterOp::Inc(k) | CounterOp::Clear(k)) = *op;
                if k as usize >= self.counters.len() {
                    return Err(TriggerError::TransitionCounter { index, counter: k });
                }
            }
            if t.actions.trace_on && t.actions.trace_off {
                return Err(TriggerError::TraceOnOff(index));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FsmState {
    pub state: u8,
    pub counters: Vec<u32>,
}

impl FsmState {
    pub fn initial(cfg: &FsmConfig) -> Self {
        FsmState { state: cfg.initial, counters: vec![0; cfg.counters.len()] }
    }
}

/// One evaluation step: counters advance on their count events, then the
/// first transition out of the current state whose condition holds fires.
pub fn step_fsm(cfg: &FsmConfig, st: &FsmState, hits: u32) -> (FsmState, ActionSet) {
    let mut next = st.clone();
    for (i, c) in cfg.counters.iter().enumerate() {
        if c.count_event.is_some_and(|e| e < 32 && hits >> e & 1 == 1) {
            next.counters[i] = (next.counters[i] + 1).min(c.threshold);
        }
    }
    let elapsed = cfg.counters.iter().enumerate().fold(0u8, |acc, (i, c)| acc | (u8::from(next.counters[i] >= c.threshold) << i));
    let Some(t) = cfg.transitions.iter().find(|t| t.from == st.state && t.when.eval(hits, elapsed)) else {
        return (next, ActionSet::default());
    };
    next.state = t.to;
    for op in &t.counter_ops {
        match *op {
            CounterOp::Inc(k) => {
                let k = k as usize;
                next.counters[k] = (next.counters[k] + 1).min(cfg.counters[k].threshold);
            }
            CounterOp::Clear(k) => next.counters[k as usize] = 0,
        }
    }
    (next, t.actions)
}

/// Outcome of qualifying one cycle for a source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Qualified {
    pub retires: Vec<Retire>,
    pub data: Vec<DataAccess>,
    pub mark: bool,
}

/// Applies TRACE_ON/OFF, then passes the `source` events of the cycle if
/// trace is enabled. MARK passes regardless.
pub fn qualify(enabled: bool, actions: &ActionSet, events: &CycleEvents, source: MasterId) -> (bool, Qualified) {
    let enabled = if actions.trace_on {
        true
    } else if actions.trace_off {
        false
    } else {
        enabled
    };
    let mut q = Qualified { mark: actions.mark, ..Qualified::default() };
    if enabled {
        q.retires = events.retires.iter().filter(|r| r.source == source).copied().collect();
        q.data = events.data.iter().filter(|a| a.source == source).copied().collect();
    }
    (enabled, q)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TriggerConfig {
    pub comparators: Vec<Comparator>,
    pub fsm: FsmConfig,
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<(), TriggerError> {
        let mut defined = 0u32;
        for c in &self.comparators {
            c.validate()?;
            if defined >> c.id & 1 == 1 {
                return Err(TriggerError::DuplicateComparator(c.id));
            }
            defined |= 1 << c.id;
        }
        self.fsm.validate(defined)
    }
}

/// A trigger block with its running state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerBlock {
    config: TriggerConfig,
    state: FsmState,
}

impl TriggerBlock {
    pub fn new(config: TriggerConfig) -> Result<Self, TriggerError> {
        config.validate()?;
        let state = FsmState::initial(&config.fsm);
        Ok(TriggerBlock { config, state })
    }

    pub fn config(&self) -> &TriggerConfig {
        &self.config
    }

    pub fn state(&self) -> &FsmState {
        &self.state
    }

    pub fn step(&mut self, events: &CycleEvents) -> (u32, ActionSet) {
        let hits = evaluate(events, &self.config.comparators);
        let (next, actions) = step_fsm(&self.config.fsm, &self.state, hits);
        self.state = next;
        (hits, actions)
    }

    pub fn reset(&mut self) {
        self.state = FsmState::initial(&self.config.fsm);
    }
}

//! Cross-trigger matrix and break/suspend switch.

use alloc::vec::Vec;
use thiserror::Error;

pub const LINES: usize = 8;
pub const INPUT_PINS: u8 = 2;
pub const OUTPUT_PINS: u8 = 2;
pub const DEFAULT_DELAY: u32 = 1;

/// Anything that can drive a trigger line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TriggerSource {
    /// Trigger output line `line` of the block at index `block`.
    TrigOut {
        block: usize,
        line: u8,
    },
    BreakReq {
        block: usize,
    },
    SuspendReq {
        block: usize,
    },
    Pin(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Destination {
    Core(usize),
    Dma,
    Pin(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum SwitchAction {
    Break,
    Suspend,
    None,
    PulseOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Route {
    pub source: TriggerSource,
    /// Lines driven while the source is asserted.
    pub lines: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SwitchEntry {
    pub dest: Destination,
    pub mask: u8,
    pub action: SwitchAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CrossTriggerConfig {
    pub routes: Vec<Route>,
    pub switch: Vec<SwitchEntry>,
    pub delay: u32,
}

impl Default for CrossTriggerConfig {
    fn default() -> Self {
        CrossTriggerConfig { routes: Vec::new(), switch: Vec::new(), delay: DEFAULT_DELAY }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrossTriggerError {
    #[error("route {index}: block {block} does not exist")]
    NoSuchBlock { index: usize, block: usize },
    #[error("route {index}: trigger line {line} out of range")]
    Line { index: usize, line: u8 },
    #[error("route {index}: input pin {pin} does not exist")]
    InputPin { index: usize, pin: u8 },
    #[error("switch {index}: core {core} does not exist")]
    NoSuchCore { index: usize, core: usize },
    #[error("switch {index}: output pin {pin} does not exist")]
    OutputPin { index: usize, pin: u8 },
    #[error("switch {index}: {action:?} is not valid for {dest:?}")]
    ActionForDest { index: usize, dest: Destination, action: SwitchAction },
    #[error("switch {index}: destination {dest:?} configured twice")]
    DuplicateDest { index: usize, dest: Destination },
}

impl CrossTriggerConfig {
    pub fn validate(&self, blocks: usize, cores: usize) -> Result<(), CrossTriggerError> {
        for (index, r) in self.routes.iter().enumerate() {
            match r.source {
                TriggerSource::TrigOut { block, line } => {
                    if block >= blocks {
                        return Err(CrossTriggerError::NoSuchBlock { index, block });
                    }
                    if line as usize >= LINES {
                        return Err(CrossTriggerError::Line { index, line });
                    }
                }
                TriggerSource::BreakReq { block } | TriggerSource::SuspendReq { block } => {
                    if block >= blocks {
                        return Err(CrossTriggerError::NoSuchBlock { index, block });
                    }
                }
                TriggerSource::Pin(pin) => {
                    if pin >= INPUT_PINS {
                        return Err(CrossTriggerError::InputPin { index, pin });
                    }
                }
            }
        }
        for (index, e) in self.switch.iter().enumerate() {
            let ok = matches!(
                (e.dest, e.action),
                (_, SwitchAction::None)
                    | (Destination::Core(_), SwitchAction::Break)
                    | (Destination::Dma, SwitchAction::Suspend)
                    | (Destination::Pin(_), SwitchAction::PulseOut)
            );
            match e.dest {
                Destination::Core(core) if core >= cores => return Err(CrossTriggerError::NoSuchCore { index, core }),
                Destination::Pin(pin) if pin >= OUTPUT_PINS => return Err(CrossTriggerError::OutputPin { index, pin }),
                _ => {}
            }
            if !ok {
                return Err(CrossTriggerError::ActionForDest { index, dest: e.dest, action: e.action });
            }
            if self.switch[..index].iter().any(|o| o.dest == e.dest) {
                return Err(CrossTriggerError::DuplicateDest { index, dest: e.dest });
            }
        }
        Ok(())
    }
}

/// OR of the lines driven by every asserted source.
pub fn route(asserted: &[TriggerSource], routes: &[Route]) -> u8 {
    routes.iter().filter(|r| asserted.contains(&r.source)).fold(0, |acc, r| acc | r.lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PendingAction {
    pub dest: Destination,
    pub action: SwitchAction,
    pub due: u64,
}

/// Switch state: scheduled actions not yet delivered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossTrigger {
    config: CrossTriggerConfig,
    pending: Vec<PendingAction>,
}

impl CrossTrigger {
    pub fn new(config: CrossTriggerConfig) -> Self {
        CrossTrigger { config, pending: Vec::new() }
    }

    pub fn config(&self) -> &CrossTriggerConfig {
        &self.config
    }

    pub fn pending(&self) -> &[PendingAction] {
        &self.pending
    }

    pub fn route(&self, asserted: &[TriggerSource]) -> u8 {
        route(asserted, &self.config.routes)
    }

    /// Schedules the action of every destination listening on a high line
    /// for `cycle + delay`. A destination with an undelivered action of the
    /// same kind is not scheduled again.
    pub fn dispatch(&mut self, lines: u8, cycle: u64) -> Vec<PendingAction> {
        let mut scheduled = Vec::new();
        for e in self.config.switch.clone() {
            if e.mask & lines == 0 || e.action == SwitchAction::None {
                continue;
            }
            let p = PendingAction { dest: e.dest, action: e.action, due: cycle + self.config.delay as u64 };
            self.schedule_into(p, &mut scheduled);
        }
        scheduled
    }

    /// Schedules an action directly, bypassing the lines.
    pub fn schedule(&mut self, p: PendingAction) -> bool {
        let mut v = Vec::new();
        self.schedule_into(p, &mut v);
        !v.is_empty()
    }

    fn schedule_into(&mut self, p: PendingAction, scheduled: &mut Vec<PendingAction>) {
        if self.pending.iter().any(|q| q.dest == p.dest && q.action == p.action) {
            return;
        }
        self.pending.push(p);
        scheduled.push(p);
    }

    /// Removes and returns the actions due at or before `cycle`.
    pub fn take_due(&mut self, cycle: u64) -> Vec<PendingAction> {
        let (due, rest): (Vec<_>, Vec<_>) = self.pending.iter().partition(|p| p.due <= cycle);
        self.pending = rest;
        due
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn identity() -> Vec<Route> {
        (0..4).map(|b| Route { source: TriggerSource::BreakReq { block: b }, lines: 1 << b }).collect()
    }

    #[test]
    fn routing_is_plain_or() {
        let r = identity();
        assert_eq!(route(&[TriggerSource::BreakReq { block: 0 }], &r), 0b1);
        assert_eq!(route(&[], &r), 0);
        let shared = vec![
            Route { source: TriggerSource::BreakReq { block: 0 }, lines: 1 << 2 },
            Route { source: TriggerSource::BreakReq { block: 3 }, lines: 1 << 2 },
        ];
        let both = [TriggerSource::BreakReq { block: 0 }, TriggerSource::BreakReq { block: 3 }];
        assert_eq!(route(&both, &shared), 1 << 2);
    }

    #[test]
    fn dispatch_delays_and_coalesces() {
        let cfg = CrossTriggerConfig {
            routes: vec![],
            switch: vec![
                SwitchEntry { dest: Destination::Core(1), mask: 1, action: SwitchAction::Break },
                SwitchEntry { dest: Destination::Pin(0), mask: 1 << 5, action: SwitchAction::PulseOut },
            ],
            delay: 1,
        };
        cfg.validate(1, 2).unwrap();
        let mut x = CrossTrigger::new(cfg);
        let s = x.dispatch(0b1, 10);
        assert_eq!(s, vec![PendingAction { dest: Destination::Core(1), action: SwitchAction::Break, due: 11 }]);
        assert!(x.dispatch(0b1, 11).is_empty());
        assert!(x.take_due(10).is_empty());
        assert_eq!(x.take_due(11).len(), 1);
        assert_eq!(x.dispatch(1 << 5, 12)[0].dest, Destination::Pin(0));
    }

    #[test]
    fn action_validity() {
        let bad =
            |dest, action| CrossTriggerConfig { switch: vec![SwitchEntry { dest, mask: 1, action }], ..CrossTriggerConfig::default() };
        assert!(bad(Destination::Dma, SwitchAction::Break).validate(1, 1).is_err());
        assert!(bad(Destination::Core(0), SwitchAction::Suspend).validate(1, 1).is_err());
        assert!(bad(Destination::Core(0), SwitchAction::PulseOut).validate(1, 1).is_err());
        assert!(bad(Destination::Pin(0), SwitchAction::Break).validate(1, 1).is_err());
        assert!(bad(Destination::Core(2), SwitchAction::Break).validate(1, 2).is_err());
        assert!(bad(Destination::Dma, SwitchAction::Suspend).validate(1, 1).is_ok());
    }
}

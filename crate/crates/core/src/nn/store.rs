use crate::codec::CompressedActivation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bytes charged per raw activation element.
pub const RAW_ELEMENT_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Raw(Tensor),
    Compressed(Box<CompressedActivation>),
    /// Rebuilt during backward from the nearest stored conv input.
    Recompute,
}

impl Slot {
    pub fn bytes(&self) -> usize {
        match self {
            Slot::Raw(t) => t.len() * RAW_ELEMENT_BYTES,
            Slot::Compressed(c) => c.encoded_len(),
            Slot::Recompute => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Empty,
    Held(Slot),
    Consumed,
}

/// Per-layer saved activations for one iteration, with byte accounting.
#[derive(Debug, Clone)]
pub struct ActivationStore {
    slots: Vec<State>,
    current: usize,
    peak: usize,
}

impl ActivationStore {
    pub fn new(layers: usize) -> Self {
        ActivationStore {
            slots: vec![State::Empty; layers],
            current: 0,
            peak: 0,
        }
    }

    fn state(&mut self, layer: usize) -> Result<&mut State> {
        self.slots
            .get_mut(layer)
            .ok_or_else(|| Error::Lifecycle(format!("no slot for layer {layer}")))
    }

    pub fn put(&mut self, layer: usize, slot: Slot) -> Result<()> {
        let bytes = slot.bytes();
        let st = self.state(layer)?;
        if *st != State::Empty {
            return Err(Error::Lifecycle(format!("slot {layer} filled twice")));
        }
        *st = State::Held(slot);
        self.current += bytes;
        self.peak = self.peak.max(self.current);
        Ok(())
    }

    /// Removes the slot content; a slot can be taken exactly once.
    pub fn take(&mut self, layer: usize) -> Result<Slot> {
        let st = self.state(layer)?;
        match std::mem::replace(st, State::Consumed) {
            State::Held(slot) => {
                self.current -= slot.bytes();
                Ok(slot)
            }
            State::Empty => {
                *st = State::Empty;
                Err(Error::Lifecycle(format!("slot {layer} was never filled")))
            }
            State::Consumed => Err(Error::Lifecycle(format!("slot {layer} already consumed"))),
        }
    }

    pub fn is_recompute(&self, layer: usize) -> bool {
        matches!(self.slots.get(layer), Some(State::Held(Slot::Recompute)))
    }

    pub fn current_bytes(&self) -> usize {
        self.current
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }

    /// True when every filled slot has been consumed.
    pub fn drained(&self) -> bool {
        self.slots.iter().all(|s| !matches!(s, State::Held(_)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle() {
        let mut s = ActivationStore::new(2);
        s.put(0, Slot::Raw(Tensor::zeros(vec![10]).unwrap())).unwrap();
        s.put(1, Slot::Recompute).unwrap();
        assert_eq!(s.peak_bytes(), 40);
        assert!(matches!(s.put(0, Slot::Recompute), Err(Error::Lifecycle(_))));
        s.take(0).unwrap();
        assert_eq!(s.current_bytes(), 0);
        assert!(matches!(s.take(0), Err(Error::Lifecycle(_))));
        assert!(!s.drained());
        s.take(1).unwrap();
        assert!(s.drained());
        assert_eq!(s.peak_bytes(), 40);
    }

    #[test]
    fn missing_slot() {
        let mut s = ActivationStore::new(1);
        assert!(matches!(s.take(0), Err(Error::Lifecycle(_))));
        assert!(matches!(s.take(5), Err(Error::Lifecycle(_))));
    }
}

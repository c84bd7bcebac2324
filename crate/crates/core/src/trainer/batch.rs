//! Session-parallel mini-batch schedule: a fixed number of sequence slots
//! advance in lockstep through window-sized fragments; when a slot's sequence
//! runs out, the next available sequence is filled in with a fresh state,
//! while continuing fragments carry the GRU state of their predecessor.

use crate::corpus::UserSequence;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentPlan {
    /// Index into the sequence list.
    pub seq: usize,
    /// First event offset of this window within the sequence.
    pub start: usize,
    pub len: usize,
    /// True when the slot was just (re)filled: the GRU starts from zeros.
    pub fresh: bool,
    pub slot: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BatchStep {
    pub fragments: Vec<FragmentPlan>,
}

#[derive(Debug, Clone, Default)]
pub struct Schedule {
    pub steps: Vec<BatchStep>,
}

impl Schedule {
    pub fn total_events(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| &s.fragments)
            .map(|f| f.len)
            .sum()
    }
}

/// Deterministic schedule under `seed`; sequence order is shuffled, then
/// every event of every sequence appears in exactly one fragment.
pub fn make_batches(
    seqs: &[UserSequence],
    batch_size: usize,
    window: usize,
    seed: u64,
) -> Schedule {
    assert!(batch_size >= 1 && window >= 1);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    Rng::from_seed(seed)
        .stream("batch_order")
        .shuffle(&mut order);
    let mut queue = order.into_iter();

    struct SlotState {
        seq: usize,
        offset: usize,
        fresh: bool,
    }
    let mut slots: Vec<Option<SlotState>> = (0..batch_size).map(|_| None).collect();
    let mut steps = Vec::new();
    loop {
        let mut step = BatchStep::default();
        for (slot_idx, slot) in slots.iter_mut().enumerate() {
            if slot.is_none() {
                slot.replace(match queue.next() {
                    Some(seq) => SlotState {
                        seq,
                        offset: 0,
                        fresh: true,
                    },
                    None => continue,
                });
            }
            let state = slot.as_mut().expect("filled above");
            let total = seqs[state.seq].events.len();
            let len = window.min(total - state.offset);
            if len == 0 {
                // Zero-length sequences never reach here (corpus sequences
                // are non-empty), but stay defensive about the slot cycle.
                *slot = None;
                continue;
            }
            step.fragments.push(FragmentPlan {
                seq: state.seq,
                start: state.offset,
                len,
                fresh: state.fresh,
                slot: slot_idx,
            });
            state.offset += len;
            state.fresh = false;
            if state.offset >= total {
                *slot = None;
            }
        }
        if step.fragments.is_empty() {
            break;
        }
        steps.push(step);
    }
    Schedule { steps }
}

//! Execution instrumentation: UNet call counting, activation element
//! accounting, and per-frame visit counters for spatial phases.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::Tensor;

#[derive(Debug, Default)]
pub struct Probe {
    unet_calls: AtomicUsize,
    segment_elements: AtomicUsize,
    visits: Mutex<BTreeMap<usize, Vec<usize>>>,
}

impl Probe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count_unet_call(&self) {
        self.unet_calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn unet_calls(&self) -> usize {
        self.unet_calls.load(Ordering::SeqCst)
    }

    /// Records an activation produced inside the current segment.
    pub fn note(&self, t: &Tensor) {
        self.segment_elements.fetch_add(t.elem_count(), Ordering::SeqCst);
    }

    /// Returns the elements noted since the last call and resets the counter.
    pub fn take_segment(&self) -> usize {
        self.segment_elements.swap(0, Ordering::SeqCst)
    }

    /// Marks frames `start..end` as processed by spatial phase `phase`.
    pub fn visit_frames(&self, phase: usize, start: usize, end: usize, n_frames: usize) {
        let mut v = self.visits.lock().expect("probe lock");
        let counts = v.entry(phase).or_insert_with(|| vec![0; n_frames]);
        for c in &mut counts[start..end] {
            *c += 1;
        }
    }

    /// Per spatial phase, the number of times each frame was processed.
    pub fn frame_visits(&self) -> BTreeMap<usize, Vec<usize>> {
        self.visits.lock().expect("probe lock").clone()
    }

    pub fn reset(&self) {
        self.unet_calls.store(0, Ordering::SeqCst);
        self.segment_elements.store(0, Ordering::SeqCst);
        self.visits.lock().expect("probe lock").clear();
    }
}

//! Byte-accurate allocation accounting for tensor buffers.
//!
//! Every tensor buffer registers its size under one of three categories when
//! created and deregisters on drop. [`meter_scope`] measures the peak number
//! of live bytes a category reaches inside a closure, which is how the
//! memory claims about streaming attention and the in-place loss backward
//! are asserted instead of eyeballed.
//!
//! Accounting is thread-local: a measurement scope sees only allocations made
//! on its own thread.

use std::cell::RefCell;

/// What a buffer is for. Determines which meter bucket it lands in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AllocCategory {
    /// Model weights: long-lived, excluded from activation accounting.
    Parameter,
    /// Values produced by graph operations and saved for backward.
    Activation,
    /// Transient working buffers inside kernels.
    Scratch,
}

impl AllocCategory {
    fn idx(self) -> usize {
        match self {
            AllocCategory::Parameter => 0,
            AllocCategory::Activation => 1,
            AllocCategory::Scratch => 2,
        }
    }
}

/// Snapshot of the thread's live and peak byte counts per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocationMeter {
    pub current_bytes: [u64; 3],
    pub peak_bytes: [u64; 3],
}

impl AllocationMeter {
    pub fn current(&self, cat: AllocCategory) -> u64 {
        self.current_bytes[cat.idx()]
    }

    pub fn peak(&self, cat: AllocCategory) -> u64 {
        self.peak_bytes[cat.idx()]
    }
}

struct Frame {
    entry: [i64; 3],
    peak_delta: [i64; 3],
}

struct MeterState {
    current: [i64; 3],
    peak: [i64; 3],
    frames: Vec<Frame>,
}

thread_local! {
    static METER: RefCell<MeterState> = RefCell::new(MeterState {
        current: [0; 3],
        peak: [0; 3],
        frames: Vec::new(),
    });
}

/// Register `bytes` newly-live bytes in `cat`.
pub fn record_alloc(cat: AllocCategory, bytes: usize) {
    let i = cat.idx();
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.current[i] += bytes as i64;
        if m.current[i] > m.peak[i] {
            m.peak[i] = m.current[i];
        }
        let cur = m.current[i];
        for f in &mut m.frames {
            let delta = cur - f.entry[i];
            if delta > f.peak_delta[i] {
                f.peak_delta[i] = delta;
            }
        }
    });
}

/// Deregister `bytes` on buffer drop.
pub fn record_free(cat: AllocCategory, bytes: usize) {
    let i = cat.idx();
    METER.with(|m| {
        m.borrow_mut().current[i] -= bytes as i64;
    });
}

/// Run `body` and return its result together with the peak bytes the given
/// category reached within the scope, relative to the bytes live at entry.
/// Scopes nest; an inner scope's allocations count toward enclosing scopes.
pub fn meter_scope<T>(cat: AllocCategory, body: impl FnOnce() -> T) -> (T, u64) {
    METER.with(|m| {
        let mut st = m.borrow_mut();
        let entry = st.current;
        st.frames.push(Frame {
            entry,
            peak_delta: [0; 3],
        });
    });
    let out = body();
    let peak = METER.with(|m| {
        let mut st = m.borrow_mut();
        let frame = st.frames.pop().expect("meter scope stack underflow");
        frame.peak_delta[cat.idx()].max(0) as u64
    });
    (out, peak)
}

/// Current live/peak bytes for this thread since it started (or since
/// [`reset_peaks`]).
pub fn snapshot() -> AllocationMeter {
    METER.with(|m| {
        let st = m.borrow();
        AllocationMeter {
            current_bytes: [
                st.current[0].max(0) as u64,
                st.current[1].max(0) as u64,
                st.current[2].max(0) as u64,
            ],
            peak_bytes: [
                st.peak[0].max(0) as u64,
                st.peak[1].max(0) as u64,
                st.peak[2].max(0) as u64,
            ],
        }
    })
}

/// Reset thread-level peaks to the current live counts.
pub fn reset_peaks() {
    METER.with(|m| {
        let mut st = m.borrow_mut();
        for i in 0..3 {
            st.peak[i] = st.current[i];
        }
    });
}

/// RAII guard for raw (non-tensor) scratch buffers inside kernels.
pub struct ScratchGuard {
    bytes: usize,
}

impl ScratchGuard {
    pub fn new(bytes: usize) -> Self {
        record_alloc(AllocCategory::Scratch, bytes);
        ScratchGuard { bytes }
    }
}

impl Drop for ScratchGuard {
    fn drop(&mut self) {
        record_free(AllocCategory::Scratch, self.bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn empty_scope_peaks_at_zero() {
        let ((), peak) = meter_scope(AllocCategory::Scratch, || {});
        assert_eq!(peak, 0);
    }

    #[test]
    fn one_scratch_tensor_is_counted_exactly() {
        let ((), peak) = meter_scope(AllocCategory::Scratch, || {
            let t = Tensor::zeros(&[4, 4], AllocCategory::Scratch);
            assert_eq!(t.numel(), 16);
        });
        assert_eq!(peak, 64);
    }

    #[test]
    fn peak_survives_frees_within_scope() {
        let ((), peak) = meter_scope(AllocCategory::Scratch, || {
            {
                let _a = Tensor::zeros(&[8], AllocCategory::Scratch);
            }
            let _b = Tensor::zeros(&[2], AllocCategory::Scratch);
        });
        assert_eq!(peak, 32);
    }

    #[test]
    fn nested_scopes_contribute_to_outer() {
        let ((), outer) = meter_scope(AllocCategory::Scratch, || {
            let (_, inner) = meter_scope(AllocCategory::Scratch, || {
                let _t = Tensor::zeros(&[16], AllocCategory::Scratch);
            });
            assert_eq!(inner, 64);
        });
        assert_eq!(outer, 64);
    }

    #[test]
    fn categories_do_not_mix() {
        let ((), scratch_peak) = meter_scope(AllocCategory::Scratch, || {
            let _t = Tensor::zeros(&[4], AllocCategory::Activation);
        });
        assert_eq!(scratch_peak, 0);
    }

    #[test]
    fn straight_line_sequence_is_exact() {
        let ((), peak) = meter_scope(AllocCategory::Scratch, || {
            let _a = Tensor::zeros(&[10], AllocCategory::Scratch); // 40
            let _b = Tensor::zeros(&[5], AllocCategory::Scratch); // 60
            let _c = Tensor::zeros(&[1], AllocCategory::Scratch); // 64
        });
        assert_eq!(peak, 64);
    }
}

//! Frame synchronization: the server holds per-frame tensors until every
//! expected device has arrived or a timeout elapses since the first arrival.

use std::collections::{BTreeMap, BTreeSet};

use crate::sparse::SparseFeatureTensor;

/// A frame handed to inference: whatever tensors were present at release
/// time plus a completeness flag. Tensors are sorted by device id.
#[derive(Debug, Clone)]
pub struct FrameRelease {
    pub frame_id: u64,
    pub tensors: Vec<(u16, SparseFeatureTensor)>,
    pub complete: bool,
    pub released_at_us: u64,
}

struct Pending {
    tensors: BTreeMap<u16, SparseFeatureTensor>,
    first_us: u64,
}

/// Per-frame arrival buffer. Every frame with at least one arrival is
/// released exactly once: either when all expected devices are present, or at
/// `first arrival + timeout` with whatever is buffered. Late arrivals after
/// release and duplicate (device, frame) pairs are discarded and counted.
#[derive(Debug)]
pub struct FrameBarrier {
    expected: BTreeSet<u16>,
    timeout_us: u64,
    pending: BTreeMap<u64, Pending>,
    released: BTreeSet<u64>,
    pub duplicates: u64,
    pub late: u64,
    pub unknown_device: u64,
}

impl std::fmt::Debug for Pending {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pending")
            .field("devices", &self.tensors.keys().collect::<Vec<_>>())
            .field("first_us", &self.first_us)
            .finish()
    }
}

impl FrameBarrier {
    pub fn new(expected: impl IntoIterator<Item = u16>, timeout_ms: f64) -> Self {
        Self {
            expected: expected.into_iter().collect(),
            timeout_us: (timeout_ms.max(0.0) * 1000.0) as u64,
            pending: BTreeMap::new(),
            released: BTreeSet::new(),
            duplicates: 0,
            late: 0,
            unknown_device: 0,
        }
    }

    pub fn expected(&self) -> &BTreeSet<u16> {
        &self.expected
    }

    pub fn pending_frames(&self) -> usize {
        self.pending.len()
    }

    /// Offers one tensor; returns the release if this arrival completed the
    /// frame. Timeout releases happen through [`poll`](Self::poll).
    pub fn offer(
        &mut self,
        device: u16,
        frame_id: u64,
        tensor: SparseFeatureTensor,
        now_us: u64,
    ) -> Option<FrameRelease> {
        if !self.expected.contains(&device) {
            self.unknown_device += 1;
            return None;
        }
        if self.released.contains(&frame_id) {
            self.late += 1;
            return None;
        }
        let pending = self.pending.entry(frame_id).or_insert_with(|| Pending {
            tensors: BTreeMap::new(),
            first_us: now_us,
        });
        if pending.tensors.contains_key(&device) {
            self.duplicates += 1;
            return None;
        }
        pending.tensors.insert(device, tensor);
        if pending.tensors.len() == self.expected.len() {
            let pending = self.pending.remove(&frame_id).expect("just inserted");
            self.released.insert(frame_id);
            return Some(FrameRelease {
                frame_id,
                tensors: pending.tensors.into_iter().collect(),
                complete: true,
                released_at_us: now_us,
            });
        }
        None
    }

    /// Releases every pending frame whose timeout has elapsed.
    pub fn poll(&mut self, now_us: u64) -> Vec<FrameRelease> {
        let due: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| now_us >= p.first_us + self.timeout_us)
            .map(|(f, _)| *f)
            .collect();
        due.into_iter()
            .map(|frame_id| {
                let p = self.pending.remove(&frame_id).expect("listed above");
                self.released.insert(frame_id);
                FrameRelease {
                    frame_id,
                    tensors: p.tensors.into_iter().collect(),
                    complete: false,
                    released_at_us: p.first_us + self.timeout_us,
                }
            })
            .collect()
    }

    /// Earliest pending timeout, if any.
    pub fn next_deadline_us(&self) -> Option<u64> {
        self.pending
            .values()
            .map(|p| p.first_us + self.timeout_us)
            .min()
    }

    /// Drains every pending frame immediately (end of stream). Incomplete
    /// frames come out with `complete = false`, as a timeout release would.
    pub fn flush(&mut self, now_us: u64) -> Vec<FrameRelease> {
        let frames: Vec<u64> = self.pending.keys().copied().collect();
        frames
            .into_iter()
            .map(|frame_id| {
                let p = self.pending.remove(&frame_id).expect("listed above");
                self.released.insert(frame_id);
                let complete = p.tensors.len() == self.expected.len();
                FrameRelease {
                    frame_id,
                    tensors: p.tensors.into_iter().collect(),
                    complete,
                    released_at_us: now_us,
                }
            })
            .collect()
    }
}

//! The test-case queue and its favored-entry bookkeeping.
//!
//! Every map byte has at most one top-rated entry: the cheapest case (by
//! [`fav_factor`]) whose trace covers it. Culling then walks the map and
//! marks a small favored subset that still covers every top-rated byte.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::coverage::{ClassifiedTrace, NewBits, TraceChecksum, MAP_SIZE};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to write {path}: {source}")]
    Persist {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One bit per map byte: which bytes a trace covered.
#[derive(Clone, PartialEq, Eq)]
pub struct CoverageMask(Box<[u64; MAP_SIZE / 64]>);

impl CoverageMask {
    pub fn empty() -> Self {
        Self(Box::new([0; MAP_SIZE / 64]))
    }

    pub fn from_trace(trace: &ClassifiedTrace) -> Self {
        let mut mask = Self::empty();
        for i in trace.covered() {
            mask.set(i);
        }
        mask
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    pub fn union_with(&mut self, other: &CoverageMask) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a |= b;
        }
    }

    pub fn count(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }
}

impl std::fmt::Debug for CoverageMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CoverageMask({} bytes)", self.count())
    }
}

#[derive(Clone, Debug)]
pub struct TestCase {
    pub id: usize,
    pub data: Vec<u8>,
    pub exec_us: u64,
    pub bitmap_size: u32,
    pub checksum: TraceChecksum,
    pub depth: u32,
    pub favored: bool,
    pub was_fuzzed: bool,
    /// Covered map bytes, kept only while the case is top-rated somewhere.
    pub minimized_trace: Option<CoverageMask>,
    pub top_rated_count: u32,
}

/// Lower is better when competing for a top-rated slot.
pub fn fav_factor(tc: &TestCase) -> u64 {
    tc.exec_us * tc.data.len() as u64
}

/// Averages over all queue entries, used by the performance score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueueAverages {
    pub exec_us: f64,
    pub bitmap_size: f64,
}

#[derive(Debug)]
pub struct Queue {
    entries: Vec<TestCase>,
    top_rated: Vec<Option<usize>>,
    pending_favored: usize,
    queue_dir: Option<PathBuf>,
    total_exec_us: u128,
    total_bitmap_size: u64,
}

pub fn case_file_name(id: usize) -> String {
    format!("id:{id:06}")
}

impl Queue {
    /// A queue that persists every new entry under `queue_dir`, if given.
    pub fn new(queue_dir: Option<PathBuf>) -> Self {
        Self {
            entries: Vec::new(),
            top_rated: vec![None; MAP_SIZE],
            pending_favored: 0,
            queue_dir,
            total_exec_us: 0,
            total_bitmap_size: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TestCase> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[TestCase] {
        &self.entries
    }

    pub fn top_rated(&self, byte: usize) -> Option<usize> {
        self.top_rated[byte]
    }

    pub fn pending_favored(&self) -> usize {
        self.pending_favored
    }

    pub fn averages(&self) -> Option<QueueAverages> {
        if self.entries.is_empty() {
            return None;
        }
        let n = self.entries.len() as f64;
        Some(QueueAverages {
            exec_us: self.total_exec_us as f64 / n,
            bitmap_size: self.total_bitmap_size as f64 / n,
        })
    }

    /// Enqueues a seed regardless of novelty.
    pub fn add_seed(&mut self, data: &[u8], trace: &ClassifiedTrace, exec_us: u64) -> Result<usize, CorpusError> {
        self.push(data, trace, exec_us, 0)
    }

    /// Enqueues `candidate` if its trace brought new bits. `parent_depth` is
    /// the depth of the case it was mutated from.
    pub fn add_if_interesting(
        &mut self,
        candidate: &[u8],
        verdict: NewBits,
        trace: &ClassifiedTrace,
        exec_us: u64,
        parent_depth: u32,
    ) -> Result<Option<usize>, CorpusError> {
        if !verdict.is_new() {
            return Ok(None);
        }
        self.push(candidate, trace, exec_us, parent_depth + 1).map(Some)
    }

    fn push(&mut self, data: &[u8], trace: &ClassifiedTrace, exec_us: u64, depth: u32) -> Result<usize, CorpusError> {
        let id = self.entries.len();
        if let Some(dir) = &self.queue_dir {
            write_case(dir, id, data)?;
        }
        let exec_us = exec_us.max(1);
        let bitmap_size = trace.count_bytes();
        self.entries.push(TestCase {
            id,
            data: data.to_vec(),
            exec_us,
            bitmap_size,
            checksum: trace.checksum(),
            depth,
            favored: false,
            was_fuzzed: false,
            minimized_trace: None,
            top_rated_count: 0,
        });
        self.total_exec_us += exec_us as u128;
        self.total_bitmap_size += bitmap_size as u64;
        self.update_top_rated(id, trace);
        Ok(id)
    }

    /// Claims every covered byte where `id` is cheaper than the incumbent.
    /// Ties keep the incumbent.
    pub fn update_top_rated(&mut self, id: usize, trace: &ClassifiedTrace) {
        let factor = fav_factor(&self.entries[id]);
        for i in trace.covered() {
            match self.top_rated[i] {
                Some(cur) if cur == id => {}
                Some(cur) if factor >= fav_factor(&self.entries[cur]) => {}
                prev => {
                    if let Some(prev) = prev {
                        let loser = &mut self.entries[prev];
                        loser.top_rated_count -= 1;
                        if loser.top_rated_count == 0 {
                            loser.minimized_trace = None;
                        }
                    }
                    self.top_rated[i] = Some(id);
                    self.entries[id].top_rated_count += 1;
                }
            }
        }
        let tc = &mut self.entries[id];
        if tc.top_rated_count > 0 && tc.minimized_trace.is_none() {
            tc.minimized_trace = Some(CoverageMask::from_trace(trace));
        }
    }

    /// Re-marks the favored set: for each byte not yet covered in this pass,
    /// its top-rated entry becomes favored and claims all of its bytes.
    pub fn cull(&mut self) {
        for e in &mut self.entries {
            e.favored = false;
        }
        let mut covered = CoverageMask::empty();
        for i in 0..MAP_SIZE {
            let Some(id) = self.top_rated[i] else { continue };
            if covered.get(i) {
                continue;
            }
            let tc = &mut self.entries[id];
            tc.favored = true;
            covered.union_with(tc.minimized_trace.as_ref().expect("top-rated entry keeps its trace"));
        }
        self.recount_pending();
    }

    fn recount_pending(&mut self) {
        self.pending_favored = self.entries.iter().filter(|e| e.favored && !e.was_fuzzed).count();
    }

    pub fn mark_fuzzed(&mut self, id: usize) {
        let tc = &mut self.entries[id];
        if !tc.was_fuzzed {
            tc.was_fuzzed = true;
            if tc.favored {
                self.pending_favored -= 1;
            }
        }
    }

    /// Probabilistic skip of non-favored entries: 99% while favored entries
    /// are pending, else 95% if already fuzzed and 75% if not.
    pub fn should_skip<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> bool {
        let tc = &self.entries[id];
        if tc.favored {
            return false;
        }
        let percent = if self.pending_favored > 0 {
            99
        } else if tc.was_fuzzed {
            95
        } else {
            75
        };
        rng.gen_range(0..100) < percent
    }

    /// Checks the queue's structural invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.id != i {
                return Err(format!("entry {i} has id {}", e.id));
            }
            if e.minimized_trace.is_some() != (e.top_rated_count > 0) {
                return Err(format!("entry {i}: minimized trace vs top_rated_count {}", e.top_rated_count));
            }
            if e.exec_us == 0 {
                return Err(format!("entry {i} has zero exec time"));
            }
        }
        let pending = self.entries.iter().filter(|e| e.favored && !e.was_fuzzed).count();
        if pending != self.pending_favored {
            return Err(format!("pending_favored {} but recount {pending}", self.pending_favored));
        }
        let claimed = self.top_rated.iter().filter(|t| t.is_some()).count() as u64;
        let counted: u64 = self.entries.iter().map(|e| e.top_rated_count as u64).sum();
        if claimed != counted {
            return Err(format!("{claimed} top-rated bytes but counts sum to {counted}"));
        }
        for (i, t) in self.top_rated.iter().enumerate() {
            if let Some(id) = t {
                let mask = self.entries[*id].minimized_trace.as_ref().ok_or("top-rated entry lost its trace")?;
                if !mask.get(i) {
                    return Err(format!("entry {id} top-rated for byte {i} it does not cover"));
                }
            }
        }
        Ok(())
    }

    /// Whether every top-rated byte is covered by some favored entry.
    pub fn favored_cover_complete(&self) -> bool {
        let mut covered = CoverageMask::empty();
        for e in self.entries.iter().filter(|e| e.favored) {
            if let Some(m) = &e.minimized_trace {
                covered.union_with(m);
            }
        }
        (0..MAP_SIZE).all(|i| self.top_rated[i].is_none() || covered.get(i))
    }
}

fn write_case(dir: &Path, id: usize, data: &[u8]) -> Result<(), CorpusError> {
    let path = dir.join(case_file_name(id));
    fs::write(&path, data).map_err(|source| CorpusError::Persist { path, source })
}

/// Crashing or hanging inputs, deduplicated by trace checksum.
#[derive(Debug)]
pub struct FindingStore {
    dir: Option<PathBuf>,
    seen: HashSet<TraceChecksum>,
}

impl FindingStore {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, seen: HashSet::new() }
    }

    /// Records the input if its checksum is new. Returns whether it was kept.
    pub fn record(&mut self, data: &[u8], checksum: TraceChecksum) -> Result<bool, CorpusError> {
        if self.seen.contains(&checksum) {
            return Ok(false);
        }
        if let Some(dir) = &self.dir {
            write_case(dir, self.seen.len(), data)?;
        }
        self.seen.insert(checksum);
        Ok(true)
    }

    pub fn unique(&self) -> usize {
        self.seen.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::RawTrace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trace(edges: &[u16]) -> ClassifiedTrace {
        let mut raw = RawTrace::new();
        for &e in edges {
            raw.hit(e);
        }
        raw.classify()
    }

    fn tc(exec_us: u64, len: usize) -> TestCase {
        TestCase {
            id: 0,
            data: vec![0; len],
            exec_us,
            bitmap_size: 1,
            checksum: TraceChecksum(0),
            depth: 0,
            favored: false,
            was_fuzzed: false,
            minimized_trace: None,
            top_rated_count: 0,
        }
    }

    #[test]
    fn fav_factor_examples() {
        assert_eq!(fav_factor(&tc(2000, 50)), 100_000);
        assert_eq!(fav_factor(&tc(1, 1)), 1);
        assert!(fav_factor(&tc(500, 150)) < fav_factor(&tc(1000, 100)));
    }

    #[test]
    fn first_entrant_takes_all_bytes() {
        let mut q = Queue::new(None);
        let id = q.add_seed(b"ab", &trace(&[3, 9]), 10).unwrap();
        assert_eq!(q.top_rated(3), Some(id));
        assert_eq!(q.top_rated(9), Some(id));
        assert_eq!(q.get(id).unwrap().top_rated_count, 2);
        assert!(q.get(id).unwrap().minimized_trace.is_some());
        q.check_invariants().unwrap();
    }

    #[test]
    fn costlier_case_changes_nothing() {
        let mut q = Queue::new(None);
        let a = q.add_seed(b"ab", &trace(&[3, 9]), 10).unwrap();
        let b = q.add_seed(b"abcd", &trace(&[3, 9]), 10).unwrap();
        assert_eq!(q.top_rated(3), Some(a));
        assert_eq!(q.get(b).unwrap().top_rated_count, 0);
        assert!(q.get(b).unwrap().minimized_trace.is_none());
        q.check_invariants().unwrap();
    }

    #[test]
    fn equal_factor_keeps_incumbent() {
        let mut q = Queue::new(None);
        let a = q.add_seed(b"ab", &trace(&[3]), 10).unwrap();
        q.add_seed(b"cd", &trace(&[3]), 10).unwrap();
        assert_eq!(q.top_rated(3), Some(a));
    }

    #[test]
    fn incumbent_losing_only_byte_releases_trace() {
        let mut q = Queue::new(None);
        let a = q.add_seed(b"long input", &trace(&[5]), 100).unwrap();
        let b = q.add_seed(b"x", &trace(&[5, 6]), 100).unwrap();
        let (ea, eb) = (q.get(a).unwrap(), q.get(b).unwrap());
        assert_eq!(ea.top_rated_count, 0);
        assert!(ea.minimized_trace.is_none());
        assert_eq!(eb.top_rated_count, 2);
        assert_eq!(q.top_rated(5), Some(b));
        q.check_invariants().unwrap();
    }

    #[test]
    fn cull_examples() {
        let mut q = Queue::new(None);
        let only = q.add_seed(b"a", &trace(&[1, 2, 3]), 1).unwrap();
        q.cull();
        assert!(q.get(only).unwrap().favored);
        assert_eq!(q.pending_favored(), 1);

        let mut q = Queue::new(None);
        let a = q.add_seed(b"a", &trace(&[1]), 1).unwrap();
        let b = q.add_seed(b"b", &trace(&[2]), 1).unwrap();
        q.cull();
        assert!(q.get(a).unwrap().favored && q.get(b).unwrap().favored);
    }

    #[test]
    fn cull_prefers_covering_entry() {
        // A covers {1,2} cheaply; B covers {2} at a higher cost.
        let mut q = Queue::new(None);
        let a = q.add_seed(b"a", &trace(&[1, 2]), 1).unwrap();
        let b = q.add_seed(b"bb", &trace(&[2]), 1).unwrap();
        q.cull();
        assert!(q.get(a).unwrap().favored);
        assert!(!q.get(b).unwrap().favored);
        assert!(q.favored_cover_complete());
        q.check_invariants().unwrap();
    }

    #[test]
    fn pending_favored_tracks_fuzzing() {
        let mut q = Queue::new(None);
        let a = q.add_seed(b"a", &trace(&[1]), 1).unwrap();
        let b = q.add_seed(b"b", &trace(&[2]), 1).unwrap();
        q.cull();
        assert_eq!(q.pending_favored(), 2);
        q.mark_fuzzed(a);
        q.mark_fuzzed(a);
        assert_eq!(q.pending_favored(), 1);
        q.mark_fuzzed(b);
        q.cull();
        assert_eq!(q.pending_favored(), 0);
        q.check_invariants().unwrap();
    }

    #[test]
    fn add_if_interesting_examples() {
        let mut q = Queue::new(None);
        let seed = q.add_seed(b"s", &trace(&[1]), 1).unwrap();
        assert_eq!(q.add_if_interesting(b"x", NewBits::NoNew, &trace(&[1]), 1, 0).unwrap(), None);
        assert_eq!(q.len(), 1);
        let child = q.add_if_interesting(b"y", NewBits::NewEdge, &trace(&[1, 2]), 1, 2).unwrap().unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.get(child).unwrap().depth, 3);
        assert_eq!(q.get(seed).unwrap().depth, 0);
        assert!(q.add_if_interesting(b"z", NewBits::NewCount, &trace(&[1, 1]), 1, 0).unwrap().is_some());
    }

    #[test]
    fn averages() {
        let mut q = Queue::new(None);
        assert!(q.averages().is_none());
        q.add_seed(b"a", &trace(&[1]), 10).unwrap();
        q.add_seed(b"b", &trace(&[1, 2, 3]), 30).unwrap();
        assert_eq!(q.averages(), Some(QueueAverages { exec_us: 20.0, bitmap_size: 2.0 }));
    }

    #[test]
    fn favored_never_skipped() {
        let mut q = Queue::new(None);
        let a = q.add_seed(b"a", &trace(&[1]), 1).unwrap();
        q.cull();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..10_000).all(|_| !q.should_skip(a, &mut rng)));
    }

    #[test]
    fn persists_to_queue_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = Queue::new(Some(dir.path().to_path_buf()));
        q.add_seed(b"seed", &trace(&[1]), 1).unwrap();
        q.add_if_interesting(b"kid", NewBits::NewEdge, &trace(&[2]), 1, 0).unwrap();
        assert_eq!(fs::read(dir.path().join("id:000000")).unwrap(), b"seed");
        assert_eq!(fs::read(dir.path().join("id:000001")).unwrap(), b"kid");
    }

    #[test]
    fn persist_failure_is_an_error() {
        let mut q = Queue::new(Some(PathBuf::from("/nonexistent/queue")));
        assert!(matches!(q.add_seed(b"s", &trace(&[1]), 1), Err(CorpusError::Persist { .. })));
    }

    #[test]
    fn findings_dedup_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FindingStore::new(Some(dir.path().to_path_buf()));
        assert!(store.record(b"a", TraceChecksum(1)).unwrap());
        assert!(!store.record(b"b", TraceChecksum(1)).unwrap());
        assert!(store.record(b"c", TraceChecksum(2)).unwrap());
        assert_eq!(store.unique(), 2);
        assert_eq!(fs::read(dir.path().join("id:000001")).unwrap(), b"c");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariants_hold_under_random_adds_and_culls(
                cases in prop::collection::vec(
                    (prop::collection::vec(0u16..64, 1..12), 1u64..50, 1usize..20, any::<bool>()),
                    1..40,
                )
            ) {
                let mut q = Queue::new(None);
                for (edges, exec_us, len, fuzz_one) in cases {
                    let id = q.add_seed(&vec![0; len], &trace(&edges), exec_us).unwrap();
                    if fuzz_one {
                        q.cull();
                        q.mark_fuzzed(id);
                    }
                    prop_assert!(q.check_invariants().is_ok(), "{:?}", q.check_invariants());
                }
                q.cull();
                prop_assert!(q.favored_cover_complete());
                prop_assert!(q.check_invariants().is_ok());
            }
        }
    }
}

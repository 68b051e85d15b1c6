//! Edge-coverage bitmaps.
//!
//! A target writes one saturating hit counter per edge into a [`RawTrace`].
//! Before the trace is compared against the campaign-wide [`VirginMap`] it is
//! bucketed into a [`ClassifiedTrace`], where each byte carries at most one
//! bit naming its hit-count bucket. The two types are distinct so a trace can
//! only ever be classified once.

use std::fmt;

use xxhash_rust::xxh3::xxh3_64_with_seed;

/// Size of the trace region in bytes; one byte per edge.
pub const MAP_SIZE: usize = 1 << 16;

const HASH_SEED: u64 = 0xa5b3_5705;

/// Hit-count bucket masks, indexed by raw count.
pub const COUNT_CLASS: [u8; 256] = build_count_class();

const fn build_count_class() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        table[i] = match i {
            0 => 0x00,
            1 => 0x01,
            2 => 0x02,
            3 => 0x04,
            4..=7 => 0x08,
            8..=15 => 0x10,
            16..=31 => 0x20,
            32..=127 => 0x40,
            _ => 0x80,
        };
        i += 1;
    }
    table
}

fn zeroed_map() -> Box<[u8; MAP_SIZE]> {
    vec![0u8; MAP_SIZE]
        .into_boxed_slice()
        .try_into()
        .expect("length is MAP_SIZE")
}

/// Per-execution raw hit counts, as written by the target.
#[derive(Clone, PartialEq, Eq)]
pub struct RawTrace(Box<[u8; MAP_SIZE]>);

impl RawTrace {
    /// An all-zero trace region.
    pub fn new() -> Self {
        Self(zeroed_map())
    }

    /// Builds a trace from exactly [`MAP_SIZE`] bytes.
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let arr: &[u8; MAP_SIZE] = bytes.try_into().ok()?;
        Some(Self(Box::new(*arr)))
    }

    /// Records one execution of `edge`, saturating at 255.
    #[inline]
    pub fn hit(&mut self, edge: u16) {
        let slot = &mut self.0[edge as usize];
        *slot = slot.saturating_add(1);
    }

    pub fn as_bytes(&self) -> &[u8; MAP_SIZE] {
        &self.0
    }

    pub fn clear(&mut self) {
        self.0.fill(0);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    /// Buckets every counter in place. Consumes the raw trace so the same
    /// counts can't be classified twice.
    pub fn classify(mut self) -> ClassifiedTrace {
        classify_counts(&mut self.0);
        ClassifiedTrace(self.0)
    }
}

impl Default for RawTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for RawTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero = self.0.iter().filter(|&&b| b != 0).count();
        f.debug_struct("RawTrace").field("nonzero", &nonzero).finish()
    }
}

/// Replaces every raw count with its bucket mask.
pub fn classify_counts(trace: &mut [u8; MAP_SIZE]) {
    for chunk in trace.chunks_exact_mut(8) {
        if u64::from_ne_bytes(chunk.try_into().unwrap()) == 0 {
            continue;
        }
        for b in chunk {
            *b = COUNT_CLASS[*b as usize];
        }
    }
}

/// A bucketed trace. Every byte is zero or a single bucket bit.
#[derive(Clone, PartialEq, Eq)]
pub struct ClassifiedTrace(Box<[u8; MAP_SIZE]>);

impl ClassifiedTrace {
    /// Wraps bytes that are already bucket masks.
    ///
    /// Returns `None` if any byte has more than one bit set.
    pub fn from_classified(bytes: &[u8; MAP_SIZE]) -> Option<Self> {
        // b & (b - 1) is nonzero exactly when b has two or more bits set.
        if bytes.iter().fold(0u8, |acc, &b| acc | (b & b.wrapping_sub(1))) != 0 {
            return None;
        }
        Some(Self(Box::new(*bytes)))
    }

    pub fn as_bytes(&self) -> &[u8; MAP_SIZE] {
        &self.0
    }

    /// Number of nonzero bytes.
    pub fn count_bytes(&self) -> u32 {
        count_bytes(&self.0)
    }

    pub fn checksum(&self) -> TraceChecksum {
        hash_trace(&self.0)
    }

    /// Indices of all nonzero bytes, ascending.
    pub fn covered(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i)
    }
}

impl fmt::Debug for ClassifiedTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifiedTrace")
            .field("count_bytes", &self.count_bytes())
            .finish()
    }
}

pub fn count_bytes(trace: &[u8; MAP_SIZE]) -> u32 {
    trace.iter().filter(|&&b| b != 0).count() as u32
}

/// 64-bit checksum of a classified trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TraceChecksum(pub u64);

impl fmt::Display for TraceChecksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// XXH3-64 with a fixed seed; stable across runs and platforms.
pub fn hash_trace(trace: &[u8; MAP_SIZE]) -> TraceChecksum {
    TraceChecksum(xxh3_64_with_seed(trace, HASH_SEED))
}

/// Outcome of folding a trace into the virgin map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum NewBits {
    NoNew,
    /// Only new hit-count buckets on edges seen before.
    NewCount,
    /// At least one edge that was never seen.
    NewEdge,
}

impl NewBits {
    pub fn is_new(self) -> bool {
        self != NewBits::NoNew
    }
}

/// Campaign-wide record of seen (edge, bucket) pairs. A cleared bit means
/// "seen"; bits are only ever cleared.
#[derive(Clone, PartialEq, Eq)]
pub struct VirginMap(Box<[u8; MAP_SIZE]>);

impl VirginMap {
    pub fn new() -> Self {
        let mut map = zeroed_map();
        map.fill(0xff);
        Self(map)
    }

    pub fn as_bytes(&self) -> &[u8; MAP_SIZE] {
        &self.0
    }

    /// Clears every bit of `trace` still set here and reports what was new.
    pub fn has_new_bits(&mut self, trace: &ClassifiedTrace) -> NewBits {
        has_new_bits(&trace.0, &mut self.0)
    }

    /// Number of map bytes touched by any execution so far.
    pub fn covered_bytes(&self) -> u32 {
        self.0.iter().filter(|&&b| b != 0xff).count() as u32
    }

    /// Total number of cleared bits.
    pub fn cleared_bits(&self) -> u32 {
        self.0
            .chunks_exact(8)
            .map(|w| u64::from_ne_bytes(w.try_into().unwrap()).count_zeros())
            .sum()
    }
}

impl Default for VirginMap {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for VirginMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VirginMap")
            .field("covered_bytes", &self.covered_bytes())
            .finish()
    }
}

pub fn has_new_bits(classified: &[u8; MAP_SIZE], virgin: &mut [u8; MAP_SIZE]) -> NewBits {
    let mut ret = NewBits::NoNew;
    for (cur, vir) in classified.chunks_exact(8).zip(virgin.chunks_exact_mut(8)) {
        let c = u64::from_ne_bytes(cur.try_into().unwrap());
        if c == 0 {
            continue;
        }
        let v = u64::from_ne_bytes((&*vir).try_into().unwrap());
        if c & v == 0 {
            continue;
        }
        if ret != NewBits::NewEdge {
            let fresh_edge = cur.iter().zip(vir.iter()).any(|(&c, &v)| c != 0 && v == 0xff);
            ret = if fresh_edge { NewBits::NewEdge } else { NewBits::NewCount };
        }
        vir.copy_from_slice(&(v & !c).to_ne_bytes());
    }
    ret
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classified_with(entries: &[(usize, u8)]) -> ClassifiedTrace {
        let mut map = zeroed_map();
        for &(i, v) in entries {
            map[i] = v;
        }
        ClassifiedTrace::from_classified(&map).unwrap()
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(COUNT_CLASS[0], 0x00);
        assert_eq!(COUNT_CLASS[5], 0x08);
        assert_eq!(COUNT_CLASS[255], 0x80);
    }

    #[test]
    fn bucket_table_is_a_partition_of_single_bits() {
        let mut masks: Vec<u8> = COUNT_CLASS[1..].to_vec();
        assert!(masks.iter().all(|m| m.count_ones() == 1));
        masks.dedup();
        // Buckets are contiguous ranges, so dedup leaves one entry per bucket.
        assert_eq!(masks, vec![0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80]);
    }

    #[test]
    fn classify_handles_unaligned_nonzero_words() {
        let mut raw = RawTrace::new();
        for _ in 0..3 {
            raw.hit(65535);
        }
        raw.hit(9);
        let c = raw.classify();
        assert_eq!(c.as_bytes()[65535], 0x04);
        assert_eq!(c.as_bytes()[9], 0x01);
        assert_eq!(c.count_bytes(), 2);
    }

    #[test]
    fn hit_saturates() {
        let mut raw = RawTrace::new();
        for _ in 0..1000 {
            raw.hit(42);
        }
        assert_eq!(raw.as_bytes()[42], 255);
    }

    #[test]
    fn empty_trace_is_not_new() {
        let mut virgin = VirginMap::new();
        let before = virgin.clone();
        assert_eq!(virgin.has_new_bits(&classified_with(&[])), NewBits::NoNew);
        assert_eq!(virgin, before);
    }

    /// Oracle: a bit is new iff set in the trace and in virgin; the verdict is
    /// NewEdge iff the virgin byte was untouched.
    fn single_byte_oracle(cur: u8, vir: u8) -> (NewBits, u8) {
        let mut verdict = NewBits::NoNew;
        let mut out = vir;
        for bit in 0..8 {
            let m = 1u8 << bit;
            if cur & m != 0 && vir & m != 0 {
                out &= !m;
                verdict = if vir == 0xff { NewBits::NewEdge } else { NewBits::NewCount };
            }
        }
        (verdict, out)
    }

    #[test]
    fn has_new_bits_matches_single_bit_oracle() {
        for bit in 0..8 {
            let cur = 1u8 << bit;
            for vir in 0..=255u8 {
                let (want, want_vir) = single_byte_oracle(cur, vir);
                let mut virgin = VirginMap::new();
                virgin.0[7] = vir;
                let got = virgin.has_new_bits(&classified_with(&[(7, cur)]));
                assert_eq!((got, virgin.0[7]), (want, want_vir), "cur={cur:#x} vir={vir:#x}");
            }
        }
    }

    #[test]
    fn has_new_bits_examples() {
        let mut virgin = VirginMap::new();
        assert_eq!(virgin.has_new_bits(&classified_with(&[(7, 0x01)])), NewBits::NewEdge);
        assert_eq!(virgin.0[7], 0xfe);
        assert_eq!(virgin.has_new_bits(&classified_with(&[(7, 0x08)])), NewBits::NewCount);
        assert_eq!(virgin.0[7], 0xf6);
        assert_eq!(virgin.has_new_bits(&classified_with(&[(7, 0x08)])), NewBits::NoNew);
    }

    #[test]
    fn new_edge_wins_over_new_count_in_same_word() {
        let mut virgin = VirginMap::new();
        virgin.has_new_bits(&classified_with(&[(0, 0x01)]));
        let got = virgin.has_new_bits(&classified_with(&[(0, 0x02), (5, 0x01)]));
        assert_eq!(got, NewBits::NewEdge);
        assert_eq!(virgin.covered_bytes(), 2);
    }

    #[test]
    fn count_bytes_examples() {
        assert_eq!(classified_with(&[]).count_bytes(), 0);
        assert_eq!(classified_with(&[(3, 1), (9, 0x80)]).count_bytes(), 2);
        let mut raw = RawTrace::new();
        for i in 0..MAP_SIZE {
            raw.hit(i as u16);
        }
        assert_eq!(raw.classify().count_bytes(), MAP_SIZE as u32);
    }

    #[test]
    fn hash_golden_and_deterministic() {
        let zero = classified_with(&[]);
        assert_eq!(zero.checksum(), zero.clone().checksum());
        assert_eq!(zero.checksum(), TraceChecksum(ZERO_TRACE_CHECKSUM));
    }

    const ZERO_TRACE_CHECKSUM: u64 = 2645801037798622343;

    #[test]
    fn raw_from_bytes_requires_exact_length() {
        assert!(RawTrace::from_bytes(&[0u8; 10]).is_none());
        assert!(RawTrace::from_bytes(&vec![0u8; MAP_SIZE]).is_some());
    }

    #[test]
    fn from_classified_rejects_raw_counts() {
        let mut map = zeroed_map();
        map[1] = 3;
        assert!(ClassifiedTrace::from_classified(&map).is_none());
    }
}

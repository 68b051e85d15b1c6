//! Input mutations: the deterministic stage, stacked havoc and splicing.

use rand::Rng;

/// Largest delta used by the arithmetic mutations.
pub const ARITH_MAX: u8 = 35;

/// Width of the bandit window, in bytes.
pub const WINDOW_LEN: usize = 128;

/// Inputs never grow past this through cloning.
pub const MAX_INPUT_LEN: usize = 1 << 20;

/// Largest block deleted or cloned by one havoc primitive.
pub const HAVOC_BLOCK_MAX: usize = 64;

/// log2 bounds of the havoc stack depth (2^1 ..= 2^7 primitives per step).
const HAVOC_STACK_POW: std::ops::RangeInclusive<u32> = 1..=7;

pub const INTERESTING_8: [i8; 9] = [-128, -1, 0, 1, 16, 32, 64, 100, 127];

pub const INTERESTING_16: [i16; 19] = [
    -128, -1, 0, 1, 16, 32, 64, 100, 127, // 8-bit values, sign-extended
    -32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767,
];

pub const INTERESTING_32: [i32; 27] = [
    -128, -1, 0, 1, 16, 32, 64, 100, 127, // 8-bit values
    -32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767, // 16-bit values
    -2147483648, -100663046, -32769, 32768, 65535, 65536, 100663045, 2147483647,
];

/// A contiguous byte range havoc is confined to. The range never extends
/// past the end of the buffer it was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub offset: usize,
    pub len: usize,
}

impl Window {
    /// The bandit window starting at `offset`, clamped to real data.
    pub fn clamped(offset: usize, data_len: usize) -> Self {
        let offset = offset.min(data_len);
        Self { offset, len: WINDOW_LEN.min(data_len - offset) }
    }

    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// A buffer under mutation, optionally restricted to a window. A windowed
/// buffer never changes length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MutationBuffer {
    pub bytes: Vec<u8>,
    window: Option<Window>,
}

impl MutationBuffer {
    pub fn whole(bytes: Vec<u8>) -> Self {
        Self { bytes, window: None }
    }

    pub fn windowed(bytes: Vec<u8>, offset: usize) -> Self {
        let window = Window::clamped(offset, bytes.len());
        Self { bytes, window: Some(window) }
    }

    pub fn window(&self) -> Option<Window> {
        self.window
    }

    pub fn havoc<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        havoc_step(&mut self.bytes, self.window, rng);
    }
}

/// The individual havoc mutations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HavocOp {
    FlipBit,
    Interesting8,
    Interesting16,
    Interesting32,
    RandomByte,
    ArithByte,
    DeleteBlock,
    CloneBlock,
}

impl HavocOp {
    pub const ALL: [HavocOp; 8] = [
        HavocOp::FlipBit,
        HavocOp::Interesting8,
        HavocOp::Interesting16,
        HavocOp::Interesting32,
        HavocOp::RandomByte,
        HavocOp::ArithByte,
        HavocOp::DeleteBlock,
        HavocOp::CloneBlock,
    ];

    fn applicable(self, region_len: usize, total_len: usize, windowed: bool) -> bool {
        match self {
            HavocOp::FlipBit | HavocOp::Interesting8 | HavocOp::RandomByte | HavocOp::ArithByte => {
                region_len >= 1
            }
            HavocOp::Interesting16 => region_len >= 2,
            HavocOp::Interesting32 => region_len >= 4,
            HavocOp::DeleteBlock => !windowed && total_len >= 2,
            HavocOp::CloneBlock => !windowed && total_len < MAX_INPUT_LEN,
        }
    }
}

/// One havoc iteration: a stack of 2^k (k in 1..=7) random primitives.
pub fn havoc_step<R: Rng + ?Sized>(buf: &mut Vec<u8>, window: Option<Window>, rng: &mut R) {
    havoc_step_with(buf, window, rng, |_| {});
}

/// [`havoc_step`], reporting every primitive it applies to `observe`.
pub fn havoc_step_with<R, F>(buf: &mut Vec<u8>, window: Option<Window>, rng: &mut R, mut observe: F)
where
    R: Rng + ?Sized,
    F: FnMut(HavocOp),
{
    if let Some(w) = window {
        debug_assert!(w.end() <= buf.len(), "window past end of buffer");
    }
    let stack = 1usize << rng.gen_range(HAVOC_STACK_POW);
    let mut ops = [HavocOp::FlipBit; 8];
    for _ in 0..stack {
        let (start, region_len) = match window {
            Some(w) => (w.offset, w.len),
            None => (0, buf.len()),
        };
        let mut n = 0;
        for op in HavocOp::ALL {
            if op.applicable(region_len, buf.len(), window.is_some()) {
                ops[n] = op;
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        let op = ops[rng.gen_range(0..n)];
        observe(op);
        let region = &mut buf[start..start + region_len];
        match op {
            HavocOp::FlipBit => {
                let bit = rng.gen_range(0..region.len() * 8);
                region[bit >> 3] ^= 0x80 >> (bit & 7);
            }
            HavocOp::Interesting8 => {
                let pos = rng.gen_range(0..region.len());
                region[pos] = INTERESTING_8[rng.gen_range(0..INTERESTING_8.len())] as u8;
            }
            HavocOp::Interesting16 => {
                let pos = rng.gen_range(0..=region.len() - 2);
                let v = INTERESTING_16[rng.gen_range(0..INTERESTING_16.len())] as u16;
                let bytes = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
                region[pos..pos + 2].copy_from_slice(&bytes);
            }
            HavocOp::Interesting32 => {
                let pos = rng.gen_range(0..=region.len() - 4);
                let v = INTERESTING_32[rng.gen_range(0..INTERESTING_32.len())] as u32;
                let bytes = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
                region[pos..pos + 4].copy_from_slice(&bytes);
            }
            HavocOp::RandomByte => {
                let pos = rng.gen_range(0..region.len());
                region[pos] ^= rng.gen_range(1..=255u8);
            }
            HavocOp::ArithByte => {
                let pos = rng.gen_range(0..region.len());
                let delta = rng.gen_range(1..=ARITH_MAX);
                region[pos] = if rng.gen() {
                    region[pos].wrapping_add(delta)
                } else {
                    region[pos].wrapping_sub(delta)
                };
            }
            HavocOp::DeleteBlock => {
                let len = rng.gen_range(1..=HAVOC_BLOCK_MAX.min(buf.len() - 1));
                let from = rng.gen_range(0..=buf.len() - len);
                buf.drain(from..from + len);
            }
            HavocOp::CloneBlock => {
                let room = MAX_INPUT_LEN - buf.len();
                let insert_at = rng.gen_range(0..=buf.len());
                // Cloning needs a source; an empty buffer gets a constant block instead.
                if buf.is_empty() || rng.gen_ratio(1, 4) {
                    let len = rng.gen_range(1..=HAVOC_BLOCK_MAX.min(room));
                    let fill: u8 = rng.gen();
                    buf.splice(insert_at..insert_at, std::iter::repeat(fill).take(len));
                } else {
                    let len = rng.gen_range(1..=HAVOC_BLOCK_MAX.min(buf.len()).min(room));
                    let from = rng.gen_range(0..=buf.len() - len);
                    let block: Vec<u8> = buf[from..from + len].to_vec();
                    buf.splice(insert_at..insert_at, block);
                }
            }
        }
    }
}

/// First and last index at which `a` and `b` differ, over their common prefix.
fn locate_diffs(a: &[u8], b: &[u8]) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            first.get_or_insert(i);
            last = Some(i);
        }
    }
    Some((first?, last?))
}

/// Crossover of `a` and `b` at a random point strictly after their first
/// difference and no later than their last. Returns `None` when the inputs
/// are too short or too similar to produce something new.
pub fn splice<R: Rng + ?Sized>(a: &[u8], b: &[u8], rng: &mut R) -> Option<Vec<u8>> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (first, last) = locate_diffs(a, b)?;
    if last <= first {
        return None;
    }
    Some(splice_at(a, b, rng.gen_range(first + 1..=last)))
}

/// `a[..point]` followed by `b[point..]`.
pub fn splice_at(a: &[u8], b: &[u8], point: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(b.len());
    out.extend_from_slice(&a[..point]);
    out.extend_from_slice(&b[point..]);
    out
}

/// Runs every deterministic mutation of `input`, handing each mutant to
/// `on_mutant`. Order: walking bit flips (1, 2, 4 bits), walking byte flips
/// (1, 2, 4 bytes), arithmetic on 8/16/32-bit words, then interesting-value
/// substitution on 8/16/32-bit words. Multi-byte words are tried in both
/// byte orders. Mutants identical to the input, and big-endian variants that
/// repeat the little-endian one, are not emitted.
pub fn deterministic_stage<E, F>(input: &[u8], mut on_mutant: F) -> Result<(), E>
where
    F: FnMut(&[u8]) -> Result<(), E>,
{
    let mut buf = input.to_vec();
    let n = buf.len();
    let bits = n * 8;

    for width in [1usize, 2, 4] {
        for start in 0..(bits + 1).saturating_sub(width) {
            for bit in start..start + width {
                buf[bit >> 3] ^= 0x80 >> (bit & 7);
            }
            on_mutant(&buf)?;
            buf.copy_from_slice(input);
        }
    }

    for width in [1usize, 2, 4] {
        for pos in 0..(n + 1).saturating_sub(width) {
            for b in &mut buf[pos..pos + width] {
                *b ^= 0xff;
            }
            on_mutant(&buf)?;
            buf.copy_from_slice(input);
        }
    }

    for width in [1usize, 2, 4] {
        for pos in 0..(n + 1).saturating_sub(width) {
            for delta in 1..=ARITH_MAX as u32 {
                for add in [true, false] {
                    for &big_endian in endians(width) {
                        let word = read_word(&buf[pos..pos + width], big_endian);
                        let new = if add { word.wrapping_add(delta) } else { word.wrapping_sub(delta) };
                        write_word(&mut buf[pos..pos + width], new & mask(width), big_endian);
                        on_mutant(&buf)?;
                        buf.copy_from_slice(input);
                    }
                }
            }
        }
    }

    let interesting: [Vec<u32>; 3] = [
        INTERESTING_8.iter().map(|&v| v as u8 as u32).collect(),
        INTERESTING_16.iter().map(|&v| v as u16 as u32).collect(),
        INTERESTING_32.iter().map(|&v| v as u32).collect(),
    ];
    for (table, width) in interesting.iter().zip([1usize, 2, 4]) {
        for pos in 0..(n + 1).saturating_sub(width) {
            for &value in table {
                for &big_endian in endians(width) {
                    if big_endian && swap(value, width) == value {
                        continue;
                    }
                    write_word(&mut buf[pos..pos + width], value, big_endian);
                    if buf[pos..pos + width] != input[pos..pos + width] {
                        on_mutant(&buf)?;
                    }
                    buf.copy_from_slice(input);
                }
            }
        }
    }
    Ok(())
}

fn endians(width: usize) -> &'static [bool] {
    if width == 1 {
        &[false]
    } else {
        &[false, true]
    }
}

fn mask(width: usize) -> u32 {
    if width == 4 {
        u32::MAX
    } else {
        (1u32 << (width * 8)) - 1
    }
}

fn read_word(bytes: &[u8], big_endian: bool) -> u32 {
    let mut v = 0u32;
    for i in 0..bytes.len() {
        let b = if big_endian { bytes[i] } else { bytes[bytes.len() - 1 - i] };
        v = (v << 8) | b as u32;
    }
    v
}

fn write_word(bytes: &mut [u8], value: u32, big_endian: bool) {
    let w = bytes.len();
    for i in 0..w {
        let b = (value >> (8 * i)) as u8;
        if big_endian {
            bytes[w - 1 - i] = b;
        } else {
            bytes[i] = b;
        }
    }
}

fn swap(value: u32, width: usize) -> u32 {
    match width {
        1 => value,
        2 => (value as u16).swap_bytes() as u32,
        _ => value.swap_bytes(),
    }
}

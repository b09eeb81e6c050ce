//! Order-independent summation.
//!
//! Every value added to an [`ExactVec`] is placed on a fixed-point grid whose
//! least significant bit is `2^-160` and summed with integer arithmetic. Integer
//! addition is associative, so partial sums computed on different workers (or
//! over different groupings of the same samples) merge to the same bits
//! regardless of how the work was split. Rounding back to `f64` is
//! round-to-nearest-even on the exact value.
//!
//! Inputs must satisfy `|x| < 2^100`; larger or non-finite inputs poison the
//! accumulator. Bits below `2^-160` are rounded away per input, which is itself
//! deterministic.

/// Number of 32-bit digits held in `i64` limbs.
pub const DIGITS: usize = 9;
const DIGIT_BITS: u32 = 32;
/// Weight of bit 0 is `2^LSB_EXP`.
const LSB_EXP: i32 = -160;
const MAX_INPUT_EXP: i32 = 100;
/// Limbs absorb this many unnormalized additions before carries must be pushed.
const NORMALIZE_AFTER: u32 = 1 << 30;

const MASK52: u64 = (1u64 << 52) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placement {
    Zero,
    Bits { mant: u64, pos: u32 },
    Poison,
}

#[inline]
fn place(x: f64) -> Placement {
    if !x.is_finite() {
        return Placement::Poison;
    }
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & MASK52;
    let (mut mant, e) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    if mant == 0 {
        return Placement::Zero;
    }
    if e + 53 > MAX_INPUT_EXP {
        return Placement::Poison;
    }
    let mut pos = e - LSB_EXP;
    if pos < 0 {
        let shift = (-pos) as u32;
        if shift >= 60 {
            return Placement::Zero;
        }
        let kept = mant >> shift;
        let rem = mant & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        mant = if rem > half || (rem == half && kept & 1 == 1) {
            kept + 1
        } else {
            kept
        };
        pos = 0;
        if mant == 0 {
            return Placement::Zero;
        }
    }
    Placement::Bits {
        mant,
        pos: pos as u32,
    }
}

/// Adds `x` into one accumulator's limbs. Returns false if `x` poisons it.
#[inline]
fn add_to_limbs(limbs: &mut [i64], x: f64) -> bool {
    match place(x) {
        Placement::Zero => true,
        Placement::Poison => false,
        Placement::Bits { mant, pos } => {
            let d = (pos / DIGIT_BITS) as usize;
            let wide = (mant as u128) << (pos % DIGIT_BITS);
            let d0 = (wide & 0xffff_ffff) as i64;
            let d1 = ((wide >> 32) & 0xffff_ffff) as i64;
            let d2 = (wide >> 64) as i64;
            if x < 0.0 {
                limbs[d] -= d0;
                limbs[d + 1] -= d1;
                if d2 != 0 {
                    limbs[d + 2] -= d2;
                }
            } else {
                limbs[d] += d0;
                limbs[d + 1] += d1;
                if d2 != 0 {
                    limbs[d + 2] += d2;
                }
            }
            true
        }
    }
}

#[inline]
fn normalize_limbs(limbs: &mut [i64]) {
    for i in 0..DIGITS - 1 {
        let carry = limbs[i] >> DIGIT_BITS;
        limbs[i] -= carry << DIGIT_BITS;
        limbs[i + 1] += carry;
    }
}

fn round_limbs(limbs: &[i64]) -> f64 {
    let mut l = [0i64; DIGITS];
    l.copy_from_slice(limbs);
    normalize_limbs(&mut l);
    let negative = l[DIGITS - 1] < 0;
    if negative {
        for v in l.iter_mut() {
            *v = -*v;
        }
        normalize_limbs(&mut l);
    }
    let mut digits = [0u32; DIGITS + 1];
    for i in 0..DIGITS - 1 {
        digits[i] = l[i] as u32;
    }
    let top = l[DIGITS - 1] as u64;
    digits[DIGITS - 1] = top as u32;
    digits[DIGITS] = (top >> 32) as u32;

    let Some(h) = digits.iter().rposition(|&d| d != 0) else {
        return 0.0;
    };
    let msb = 32 * h as i32 + (31 - digits[h].leading_zeros() as i32);
    let lo = msb - 63;
    let (window, sticky) = if lo < 0 {
        let mut v: u128 = 0;
        for (i, &d) in digits.iter().enumerate().take(3) {
            v |= (d as u128) << (32 * i);
        }
        ((v << (-lo) as u32) as u64, false)
    } else {
        let q = (lo / 32) as usize;
        let r = (lo % 32) as u32;
        let mut v: u128 = 0;
        for i in 0..3 {
            if q + i < digits.len() {
                v |= (digits[q + i] as u128) << (32 * i);
            }
        }
        let below = digits[..q].iter().any(|&d| d != 0) || (digits[q] & ((1u32 << r) - 1)) != 0;
        ((v >> r) as u64, below && r < 32)
    };
    let mut mant = window >> 11;
    let rest = window & 0x7ff;
    let half = 0x400;
    if rest > half || (rest == half && (sticky || mant & 1 == 1)) {
        mant += 1;
    }
    let mut exp2 = msb + LSB_EXP;
    if mant == 1u64 << 53 {
        mant >>= 1;
        exp2 += 1;
    }
    let biased = exp2 + 1023;
    let magnitude = if biased >= 2047 {
        f64::INFINITY
    } else {
        f64::from_bits(((biased as u64) << 52) | (mant & MASK52))
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Sign of `limbs - sum(terms)`, computed exactly.
fn residual_sign(limbs: &[i64], terms: &[f64]) -> f64 {
    let mut l = [0i64; DIGITS];
    l.copy_from_slice(limbs);
    normalize_limbs(&mut l);
    for &t in terms {
        add_to_limbs(&mut l, -t);
    }
    let r = round_limbs(&l);
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Correctly rounded `sum / n` for the exact sum held in `limbs`.
fn round_div_limbs(limbs: &[i64], n: usize) -> f64 {
    let s = round_limbs(limbs);
    if n == 1 || !s.is_finite() {
        return s / n as f64;
    }
    let nf = n as f64;
    let mut q = s / nf;
    for _ in 0..4 {
        let hi = q * nf;
        let lo = q.mul_add(nf, -hi);
        let dir = residual_sign(limbs, &[hi, lo]);
        if dir == 0.0 {
            return q;
        }
        let next = if dir > 0.0 { q.next_up() } else { q.next_down() };
        // residual at the midpoint between q and its neighbour
        let half_gap = (next - q) * nf * 0.5;
        let mid = residual_sign(limbs, &[hi, lo, half_gap]);
        if mid == 0.0 {
            return if q.to_bits() & 1 == 0 { q } else { next };
        }
        if mid == dir {
            q = next;
        } else {
            return q;
        }
    }
    q
}

/// A single order-independent accumulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactSum {
    limbs: [i64; DIGITS],
    pending: u32,
    poisoned: bool,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            limbs: [0; DIGITS],
            pending: 0,
            poisoned: false,
        }
    }

    pub fn add(&mut self, x: f64) {
        if !add_to_limbs(&mut self.limbs, x) {
            self.poisoned = true;
        }
        self.pending += 1;
        if self.pending >= NORMALIZE_AFTER {
            normalize_limbs(&mut self.limbs);
            self.pending = 0;
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let mut o = other.limbs;
        normalize_limbs(&mut o);
        normalize_limbs(&mut self.limbs);
        for (a, b) in self.limbs.iter_mut().zip(o.iter()) {
            *a += *b;
        }
        self.pending = 1;
        self.poisoned |= other.poisoned;
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Correctly rounded `sum / n`.
    pub fn mean(&self, n: usize) -> f64 {
        if self.poisoned {
            f64::NAN
        } else {
            round_div_limbs(&self.limbs, n)
        }
    }

    /// Correctly rounded value, or NaN if a non-finite or out-of-range input
    /// was added.
    pub fn value(&self) -> f64 {
        if self.poisoned {
            f64::NAN
        } else {
            round_limbs(&self.limbs)
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

impl From<&ExactSum> for ExactVec {
    fn from(s: &ExactSum) -> Self {
        let mut limbs = s.limbs;
        normalize_limbs(&mut limbs);
        ExactVec {
            limbs: limbs.to_vec(),
            len: 1,
            pending: 0,
            poisoned: s.poisoned,
        }
    }
}

/// A vector of order-independent accumulators stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactVec {
    limbs: Vec<i64>,
    len: usize,
    pending: u32,
    poisoned: bool,
}

impl ExactVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            limbs: vec![0; len * DIGITS],
            len,
            pending: 0,
            poisoned: false,
        }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut v = Self::zeros(values.len());
        v.add_slice(0, values.iter().copied());
        v
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    fn bump(&mut self) {
        self.pending += 1;
        if self.pending >= NORMALIZE_AFTER {
            self.normalize();
        }
    }

    fn normalize(&mut self) {
        for chunk in self.limbs.chunks_exact_mut(DIGITS) {
            normalize_limbs(chunk);
        }
        self.pending = 0;
    }

    /// Adds `values` element-wise starting at entry `offset`. Each entry
    /// receives at most one addition per call.
    pub fn add_slice<I: IntoIterator<Item = f64>>(&mut self, offset: usize, values: I) {
        let mut ok = true;
        let mut idx = offset;
        for x in values {
            assert!(idx < self.len, "ExactVec::add_slice out of bounds");
            let base = idx * DIGITS;
            ok &= add_to_limbs(&mut self.limbs[base..base + DIGITS], x);
            idx += 1;
        }
        if !ok {
            self.poisoned = true;
        }
        self.bump();
    }

    pub fn add_at(&mut self, idx: usize, x: f64) {
        let base = idx * DIGITS;
        if !add_to_limbs(&mut self.limbs[base..base + DIGITS], x) {
            self.poisoned = true;
        }
        self.bump();
    }

    /// Adds another accumulator of the same length into this one.
    pub fn merge(&mut self, other: &ExactVec) {
        assert_eq!(self.len, other.len, "ExactVec::merge length mismatch");
        if self.pending > 0 {
            self.normalize();
        }
        if other.pending > 0 {
            let mut o = other.clone();
            o.normalize();
            self.merge_normalized(&o.limbs);
        } else {
            self.merge_normalized(&other.limbs);
        }
        self.poisoned |= other.poisoned;
    }

    fn merge_normalized(&mut self, other: &[i64]) {
        for (a, b) in self.limbs.iter_mut().zip(other) {
            *a += *b;
        }
        self.pending = 1;
    }

    /// Appends the entries of `other` after the entries of `self`.
    pub fn extend(&mut self, other: &ExactVec) {
        if self.pending > 0 {
            self.normalize();
        }
        let mut o = other.clone();
        o.normalize();
        self.limbs.extend_from_slice(&o.limbs);
        self.len += o.len;
        self.poisoned |= o.poisoned;
    }

    pub fn value(&self, idx: usize) -> f64 {
        if self.poisoned {
            return f64::NAN;
        }
        let base = idx * DIGITS;
        round_limbs(&self.limbs[base..base + DIGITS])
    }

    /// Correctly rounded `entry / n` of every entry.
    pub fn means(&self, n: usize) -> Vec<f64> {
        (0..self.len)
            .map(|i| {
                if self.poisoned {
                    f64::NAN
                } else {
                    round_div_limbs(&self.limbs[i * DIGITS..(i + 1) * DIGITS], n)
                }
            })
            .collect()
    }

    /// Correctly rounded values of every entry.
    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.value(i)).collect()
    }

    /// Splits off entries `[at, len)` into a new accumulator.
    pub fn split_off(&mut self, at: usize) -> ExactVec {
        assert!(at <= self.len);
        let tail = self.limbs.split_off(at * DIGITS);
        let n = self.len - at;
        self.len = at;
        ExactVec {
            limbs: tail,
            len: n,
            pending: self.pending,
            poisoned: self.poisoned,
        }
    }

    /// Wire form: one flag word followed by `DIGITS` words per entry.
    pub fn to_words(&self) -> Vec<u64> {
        let mut normalized = self.clone();
        normalized.normalize();
        let mut out = Vec::with_capacity(1 + normalized.limbs.len());
        out.push(normalized.poisoned as u64);
        out.extend(normalized.limbs.iter().map(|&l| l as u64));
        out
    }

    pub fn from_words(words: &[u64]) -> Option<ExactVec> {
        let (&flag, rest) = words.split_first()?;
        if rest.len() % DIGITS != 0 || flag > 1 {
            return None;
        }
        Some(ExactVec {
            limbs: rest.iter().map(|&w| w as i64).collect(),
            len: rest.len() / DIGITS,
            pending: 0,
            poisoned: flag == 1,
        })
    }
}

//! Integer arithmetic coding over pluggable frequency models.
//!
//! The coder keeps `B`-bit `low`/`high` registers and renormalizes one bit at
//! a time, deferring straddling bits until they resolve, so no carry ever
//! propagates into already-emitted output. Models hand out integer
//! frequencies with a total of at most `2^f`.
//!
//! Encoded length is at most `ideal_bits + 2 + n * log2(1 / (1 - 2^(f+2-B)))`
//! for `n` symbols, which stays below `4 * n * 2^-f` whenever `B >= 2f + 1`.
//!
//! # Container layout
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ICAC"
//! 4       1     version (1)
//! 5       1     precision bits B
//! 6       1     frequency bits f
//! 7       2     model id length m (u16, little-endian)
//! 9       m     model id (UTF-8)
//! 9+m     8     symbol count (u64, little-endian)
//! 17+m    ..    bitstream, MSB-first, zero-padded to a whole byte
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::metric::CompensatedSum;

pub const MAGIC: &[u8; 4] = b"ICAC";
pub const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoderConfig {
    pub precision_bits: u32,
    pub freq_bits: u32,
}

impl Default for CoderConfig {
    fn default() -> Self {
        CoderConfig {
            precision_bits: 62,
            freq_bits: 30,
        }
    }
}

impl CoderConfig {
    pub fn new(precision_bits: u32, freq_bits: u32) -> Result<Self> {
        let cfg = CoderConfig {
            precision_bits,
            freq_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(16..=62).contains(&self.precision_bits) {
            return Err(Error::Input(format!(
                "precision bits must be in 16..=62, got {}",
                self.precision_bits
            )));
        }
        if self.freq_bits == 0 || self.freq_bits > self.precision_bits - 2 {
            return Err(Error::Input(format!(
                "frequency bits must be in 1..={}, got {}",
                self.precision_bits - 2,
                self.freq_bits
            )));
        }
        Ok(())
    }

    pub fn max_total(&self) -> u64 {
        1u64 << self.freq_bits
    }

    /// Per-symbol allowance on top of `ideal_bits + 2` used by the length check.
    pub fn slack_per_symbol(&self) -> f64 {
        4.0 * (-(self.freq_bits as f64)).exp2()
    }
}

/// Next-symbol frequency tables driven by the already-coded history.
///
/// Encoder and decoder must see identical tables for identical histories.
pub trait ProbabilityModel {
    /// Identifier stored in the container; [`model_from_id`] rebuilds the model.
    fn id(&self) -> String;
    fn alphabet_size(&self) -> usize;
    /// Sum of all frequencies in the current table.
    fn total(&self) -> u64;
    /// Cumulative range `[lo, hi)` of `symbol` in the current table.
    fn symbol_range(&self, symbol: u32) -> (u64, u64);
    /// Symbol whose range contains `target`, with that range.
    fn find(&self, target: u64) -> (u32, u64, u64);
    /// Records `symbol` as the next history element.
    fn update(&mut self, symbol: u32);
    /// Digest of the model's full state.
    fn state_digest(&self) -> u64;
}

fn check_symbol<M: ProbabilityModel + ?Sized>(model: &M, symbol: u32) -> Result<()> {
    if (symbol as usize) < model.alphabet_size() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "symbol {symbol} outside alphabet of size {}",
            model.alphabet_size()
        )))
    }
}

fn checked_range<M: ProbabilityModel + ?Sized>(model: &M, symbol: u32, max_total: u64) -> Result<(u64, u64, u64)> {
    let total = model.total();
    if total == 0 || total > max_total {
        return Err(Error::Model(format!(
            "frequency total {total} outside 1..={max_total}"
        )));
    }
    let (lo, hi) = model.symbol_range(symbol);
    if lo >= hi || hi > total {
        return Err(Error::Model(format!(
            "symbol {symbol} has invalid range [{lo}, {hi}) of total {total}"
        )));
    }
    Ok((lo, hi, total))
}

struct FnvHasher(u64);

impl FnvHasher {
    fn new() -> Self {
        FnvHasher(0xcbf2_9ce4_8422_2325)
    }
    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Floor-then-fixup: scales positive weights to integer frequencies summing
/// to exactly `2^freq_bits`, every frequency at least 1.
pub fn discretize(probabilities: &[f64], freq_bits: u32) -> Result<Vec<u64>> {
    let n = probabilities.len();
    let target = 1u64 << freq_bits;
    if n == 0 || n as u64 > target {
        return Err(Error::Model(format!(
            "cannot discretize {n} symbols into total {target}"
        )));
    }
    let sum: f64 = probabilities.iter().sum();
    if !(sum.is_finite() && sum > 0.0) || probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Model("probabilities must be finite, non-negative and not all zero".into()));
    }
    let freqs: Vec<u64> = probabilities
        .iter()
        .map(|p| (((p / sum) * target as f64).floor() as u64).max(1))
        .collect();
    Ok(fixup(freqs, target))
}

fn discretize_weights(weights: &[u64], target: u64) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| u128::from(w)).sum();
    let freqs = weights
        .iter()
        .map(|&w| ((u128::from(w) * u128::from(target) / sum) as u64).max(1))
        .collect();
    fixup(freqs, target)
}

fn fixup(mut freqs: Vec<u64>, target: u64) -> Vec<u64> {
    let sum: u64 = freqs.iter().sum();
    if sum > target {
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
        let mut excess = sum - target;
        for i in order {
            if excess == 0 {
                break;
            }
            let take = excess.min(freqs[i] - 1);
            freqs[i] -= take;
            excess -= take;
        }
    } else if sum < target {
        let argmax = (0..freqs.len())
            .max_by(|&a, &b| freqs[a].cmp(&freqs[b]).then(b.cmp(&a)))
            .expect("non-empty");
        freqs[argmax] += target - sum;
    }
    freqs
}

/// A fixed table that ignores history.
#[derive(Debug, Clone)]
pub struct StaticModel {
    id: String,
    cumulative: Vec<u64>,
}

impl StaticModel {
    pub fn from_frequencies(id: impl Into<String>, freqs: &[u64]) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::Model("static model needs at least one symbol and no zero frequencies".into()));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        cumulative.push(0);
        let mut acc = 0u64;
        for &f in freqs {
            acc += f;
            cumulative.push(acc);
        }
        Ok(StaticModel {
            id: id.into(),
            cumulative,
        })
    }

    pub fn uniform(alphabet_size: usize) -> Self {
        Self::from_frequencies(format!("uniform-{alphabet_size}"), &vec![1; alphabet_size.max(1)])
            .expect("uniform frequencies are valid")
    }

    pub fn from_probabilities(id: impl Into<String>, probabilities: &[f64], freq_bits: u32) -> Result<Self> {
        Self::from_frequencies(id, &discretize(probabilities, freq_bits)?)
    }
}

impl ProbabilityModel for StaticModel {
    fn id(&self) -> String {
        self.id.clone()
    }
    fn alphabet_size(&self) -> usize {
        self.cumulative.len() - 1
    }
    fn total(&self) -> u64 {
        *self.cumulative.last().expect("non-empty")
    }
    fn symbol_range(&self, symbol: u32) -> (u64, u64) {
        let s = symbol as usize;
        (self.cumulative[s], self.cumulative[s + 1])
    }
    fn find(&self, target: u64) -> (u32, u64, u64) {
        let s = self.cumulative.partition_point(|&c| c <= target) - 1;
        (s as u32, self.cumulative[s], self.cumulative[s + 1])
    }
    fn update(&mut self, _symbol: u32) {}
    fn state_digest(&self) -> u64 {
        let mut h = FnvHasher::new();
        for &c in &self.cumulative {
            h.write_u64(c);
        }
        h.finish()
    }
}

/// Fenwick tree over symbol frequencies.
#[derive(Debug, Clone)]
struct Fenwick {
    tree: Vec<u32>,
}

impl Fenwick {
    /// All frequencies start at 1.
    fn ones(n: usize) -> Self {
        let mut tree = vec![0u32; n + 1];
        for (i, slot) in tree.iter_mut().enumerate().skip(1) {
            *slot = (i & i.wrapping_neg()) as u32;
        }
        Fenwick { tree }
    }

    fn len(&self) -> usize {
        self.tree.len() - 1
    }

    fn add_one(&mut self, index: usize) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum of frequencies of symbols `< index`.
    fn prefix(&self, index: usize) -> u64 {
        let mut i = index;
        let mut acc = 0u64;
        while i > 0 {
            acc += u64::from(self.tree[i]);
            i &= i - 1;
        }
        acc
    }

    /// Largest `s` with `prefix(s) <= target`, plus `prefix(s)`.
    fn find(&self, target: u64) -> (usize, u64) {
        let n = self.len();
        let mut pos = 0usize;
        let mut remaining = target;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && u64::from(self.tree[next]) <= remaining {
                pos = next;
                remaining -= u64::from(self.tree[next]);
            }
            step >>= 1;
        }
        (pos, target - remaining)
    }
}

/// Symbol counts start sparse: most contexts see only a handful of distinct
/// symbols, and a full tree per context is costly on high-entropy input.
const SPARSE_LIMIT: usize = 32;

#[derive(Debug, Clone)]
enum Counts {
    /// `(symbol, count)` sorted by symbol; absent symbols have count 0.
    Sparse(Vec<(u32, u32)>),
    /// Frequencies `count + 1`.
    Dense(Fenwick),
}

#[derive(Debug, Clone)]
struct Context {
    counts: Counts,
    observed: u64,
}

impl Context {
    fn new() -> Self {
        Context {
            counts: Counts::Sparse(Vec::new()),
            observed: 0,
        }
    }

    fn range(&self, s: usize) -> (u64, u64) {
        match &self.counts {
            Counts::Sparse(v) => {
                let mut acc = s as u64;
                for &(sym, c) in v {
                    match (sym as usize).cmp(&s) {
                        std::cmp::Ordering::Less => acc += u64::from(c),
                        std::cmp::Ordering::Equal => return (acc, acc + 1 + u64::from(c)),
                        std::cmp::Ordering::Greater => break,
                    }
                }
                (acc, acc + 1)
            }
            Counts::Dense(f) => (f.prefix(s), f.prefix(s + 1)),
        }
    }

    fn find(&self, target: u64) -> (u32, u64, u64) {
        match &self.counts {
            Counts::Sparse(v) => {
                let mut acc = 0u64;
                for &(sym, c) in v {
                    let start = u64::from(sym) + acc;
                    if target < start {
                        break;
                    }
                    let end = start + 1 + u64::from(c);
                    if target < end {
                        return (sym, start, end);
                    }
                    acc += u64::from(c);
                }
                ((target - acc) as u32, target, target + 1)
            }
            Counts::Dense(f) => {
                let (s, lo) = f.find(target);
                (s as u32, lo, f.prefix(s + 1))
            }
        }
    }

    fn add(&mut self, symbol: u32, alphabet_size: usize) {
        self.observed += 1;
        match &mut self.counts {
            Counts::Sparse(v) => match v.binary_search_by_key(&symbol, |e| e.0) {
                Ok(i) => v[i].1 += 1,
                Err(i) => {
                    v.insert(i, (symbol, 1));
                    if v.len() > SPARSE_LIMIT {
                        let mut f = Fenwick::ones(alphabet_size);
                        for &(sym, c) in v.iter() {
                            for _ in 0..c {
                                f.add_one(sym as usize);
                            }
                        }
                        self.counts = Counts::Dense(f);
                    }
                }
            },
            Counts::Dense(f) => f.add_one(symbol as usize),
        }
    }

    /// Nonzero counts in symbol order, independent of representation.
    fn nonzero(&self, alphabet_size: usize) -> Vec<(u32, u64)> {
        match &self.counts {
            Counts::Sparse(v) => v.iter().map(|&(s, c)| (s, u64::from(c))).collect(),
            Counts::Dense(f) => (0..alphabet_size)
                .filter_map(|s| {
                    let c = f.prefix(s + 1) - f.prefix(s) - 1;
                    (c > 0).then_some((s as u32, c))
                })
                .collect(),
        }
    }
}

/// Order-k adaptive model with add-one smoothing.
///
/// Each context (the previous `k` symbols, with positions before the start
/// of the stream marked separately) keeps `count + 1` per symbol. When a
/// context's total exceeds `2^f` its table is rescaled by [`discretize`]'s
/// floor-then-fixup rule; the raw counts are never altered.
#[derive(Debug, Clone)]
pub struct AdaptiveContextModel {
    order: u32,
    alphabet_size: usize,
    max_total: u64,
    radix: u64,
    modulus: u64,
    current: u64,
    contexts: Vec<Option<Box<Context>>>,
}

impl AdaptiveContextModel {
    /// Largest context table the model will allocate slots for.
    pub const MAX_CONTEXTS: u64 = 1 << 24;

    pub fn new(order: u32, alphabet_size: usize, freq_bits: u32) -> Result<Self> {
        if alphabet_size == 0 || alphabet_size as u64 >= u64::from(u32::MAX) {
            return Err(Error::Model(format!("unsupported alphabet size {alphabet_size}")));
        }
        if alphabet_size as u64 > (1u64 << freq_bits.min(62)) {
            return Err(Error::Model(format!(
                "alphabet of {alphabet_size} symbols does not fit in {freq_bits} frequency bits"
            )));
        }
        let radix = alphabet_size as u64 + 1;
        let modulus = radix
            .checked_pow(order)
            .filter(|&m| m <= Self::MAX_CONTEXTS)
            .ok_or_else(|| {
                Error::Model(format!(
                    "order-{order} contexts over {alphabet_size} symbols exceed {} slots",
                    Self::MAX_CONTEXTS
                ))
            })?;
        // The all-"before start" context.
        let current = (0..order).fold(0u64, |acc, _| acc * radix + alphabet_size as u64);
        Ok(AdaptiveContextModel {
            order,
            alphabet_size,
            max_total: 1u64 << freq_bits,
            radix,
            modulus,
            current,
            contexts: vec![None; modulus as usize],
        })
    }

    /// The reference byte model: order 2 over 256 symbols.
    pub fn order2_bytes(freq_bits: u32) -> Result<Self> {
        Self::new(2, 256, freq_bits)
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    fn context(&self) -> Option<&Context> {
        self.contexts[self.current as usize].as_deref()
    }

    fn raw_total(&self) -> u64 {
        self.alphabet_size as u64 + self.context().map_or(0, |c| c.observed)
    }

    fn scaled_table(&self) -> Option<Vec<u64>> {
        let raw = self.raw_total();
        if raw <= self.max_total {
            return None;
        }
        let ctx = self.context().expect("only observed contexts exceed the limit");
        let weights: Vec<u64> = (0..self.alphabet_size)
            .map(|s| {
                let (lo, hi) = ctx.range(s);
                hi - lo
            })
            .collect();
        let freqs = discretize_weights(&weights, self.max_total);
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        cumulative.push(0);
        let mut acc = 0;
        for f in freqs {
            acc += f;
            cumulative.push(acc);
        }
        Some(cumulative)
    }
}

impl ProbabilityModel for AdaptiveContextModel {
    fn id(&self) -> String {
        format!("adaptive-o{}-{}", self.order, self.alphabet_size)
    }

    fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    fn total(&self) -> u64 {
        self.raw_total().min(self.max_total)
    }

    fn symbol_range(&self, symbol: u32) -> (u64, u64) {
        let s = symbol as usize;
        if let Some(cum) = self.scaled_table() {
            return (cum[s], cum[s + 1]);
        }
        match self.context() {
            Some(ctx) => ctx.range(s),
            None => (s as u64, s as u64 + 1),
        }
    }

    fn find(&self, target: u64) -> (u32, u64, u64) {
        if let Some(cum) = self.scaled_table() {
            let s = cum.partition_point(|&c| c <= target) - 1;
            return (s as u32, cum[s], cum[s + 1]);
        }
        match self.context() {
            Some(ctx) => ctx.find(target),
            None => (target as u32, target, target + 1),
        }
    }

    fn update(&mut self, symbol: u32) {
        let n = self.alphabet_size;
        let slot = &mut self.contexts[self.current as usize];
        slot.get_or_insert_with(|| Box::new(Context::new())).add(symbol, n);
        if self.order > 0 {
            self.current = (self.current * self.radix + u64::from(symbol)) % self.modulus;
        }
    }

    fn state_digest(&self) -> u64 {
        let mut h = FnvHasher::new();
        h.write_u64(u64::from(self.order));
        h.write_u64(self.alphabet_size as u64);
        h.write_u64(self.current);
        for (index, ctx) in self.contexts.iter().enumerate() {
            if let Some(ctx) = ctx {
                h.write_u64(index as u64);
                h.write_u64(ctx.observed);
                for (sym, c) in ctx.nonzero(self.alphabet_size) {
                    h.write_u64(u64::from(sym));
                    h.write_u64(c);
                }
            }
        }
        h.finish()
    }
}

/// Rebuilds a model from its container identifier.
pub fn model_from_id(id: &str, freq_bits: u32) -> Result<Box<dyn ProbabilityModel + Send>> {
    let bad = || Error::Container(format!("unknown model id {id:?}"));
    if let Some(rest) = id.strip_prefix("uniform-") {
        let n: usize = rest.parse().map_err(|_| bad())?;
        if n == 0 || n as u64 > (1u64 << freq_bits) {
            return Err(bad());
        }
        return Ok(Box::new(StaticModel::uniform(n)));
    }
    if let Some(rest) = id.strip_prefix("adaptive-o") {
        let (order, alphabet) = rest.split_once('-').ok_or_else(bad)?;
        let order: u32 = order.parse().map_err(|_| bad())?;
        let alphabet: usize = alphabet.parse().map_err(|_| bad())?;
        return Ok(Box::new(AdaptiveContextModel::new(order, alphabet, freq_bits)?));
    }
    Err(bad())
}

/// Coded bits, MSB-first; `bit_len` excludes the zero padding of the final byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub bit_len: u64,
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    bit_len: u64,
}

impl BitWriter {
    fn push(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | u8::from(bit);
        self.bit_len += 1;
        if self.bit_len % 8 == 0 {
            self.bytes.push(self.acc);
            self.acc = 0;
        }
    }

    fn into_bitstream(mut self) -> Bitstream {
        let tail = (self.bit_len % 8) as u32;
        if tail > 0 {
            self.bytes.push(self.acc << (8 - tail));
        }
        Bitstream {
            bytes: self.bytes,
            bit_len: self.bit_len,
        }
    }

    fn push_with_pending(&mut self, bit: bool, pending: &mut u64) {
        self.push(bit);
        for _ in 0..*pending {
            self.push(!bit);
        }
        *pending = 0;
    }
}

struct Registers {
    low: u64,
    high: u64,
    half: u64,
    quarter: u64,
}

impl Registers {
    fn new(cfg: &CoderConfig) -> Self {
        let b = cfg.precision_bits;
        Registers {
            low: 0,
            high: (1u64 << b) - 1,
            half: 1u64 << (b - 1),
            quarter: 1u64 << (b - 2),
        }
    }

    fn narrow(&mut self, lo: u64, hi: u64, total: u64) {
        let range = u128::from(self.high - self.low) + 1;
        let total = u128::from(total);
        self.high = self.low + (range * u128::from(hi) / total) as u64 - 1;
        self.low += (range * u128::from(lo) / total) as u64;
    }
}

pub struct Encoder {
    cfg: CoderConfig,
    regs: Registers,
    pending: u64,
    out: BitWriter,
}

impl Encoder {
    pub fn new(cfg: CoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            regs: Registers::new(&cfg),
            cfg,
            pending: 0,
            out: BitWriter::default(),
        })
    }

    /// Codes `symbol` under the model's current table, then updates the model.
    pub fn encode<M: ProbabilityModel + ?Sized>(&mut self, model: &mut M, symbol: u32) -> Result<()> {
        check_symbol(model, symbol)?;
        let (lo, hi, total) = checked_range(model, symbol, self.cfg.max_total())?;
        self.regs.narrow(lo, hi, total);
        let Registers { half, quarter, .. } = self.regs;
        loop {
            if self.regs.high < half {
                self.out.push_with_pending(false, &mut self.pending);
            } else if self.regs.low >= half {
                self.out.push_with_pending(true, &mut self.pending);
                self.regs.low -= half;
                self.regs.high -= half;
            } else if self.regs.low >= quarter && self.regs.high < half + quarter {
                self.pending += 1;
                self.regs.low -= quarter;
                self.regs.high -= quarter;
            } else {
                break;
            }
            self.regs.low <<= 1;
            self.regs.high = (self.regs.high << 1) | 1;
        }
        model.update(symbol);
        Ok(())
    }

    pub fn finish(mut self) -> Bitstream {
        self.pending += 1;
        let bit = self.regs.low >= self.regs.quarter;
        self.out.push_with_pending(bit, &mut self.pending);
        self.out.into_bitstream()
    }
}

pub struct Decoder<'a> {
    cfg: CoderConfig,
    regs: Registers,
    value: u64,
    input: &'a [u8],
    cursor: u64,
    shifts: u64,
}

impl<'a> Decoder<'a> {
    pub fn new(cfg: CoderConfig, input: &'a [u8]) -> Result<Self> {
        cfg.validate()?;
        let mut d = Decoder {
            regs: Registers::new(&cfg),
            cfg,
            value: 0,
            input,
            cursor: 0,
            shifts: 0,
        };
        for _ in 0..cfg.precision_bits {
            d.value = (d.value << 1) | d.next_bit();
        }
        Ok(d)
    }

    fn next_bit(&mut self) -> u64 {
        let byte = (self.cursor / 8) as usize;
        let bit = match self.input.get(byte) {
            Some(b) => u64::from((b >> (7 - (self.cursor % 8))) & 1),
            None => 0,
        };
        self.cursor += 1;
        bit
    }

    pub fn decode<M: ProbabilityModel + ?Sized>(&mut self, model: &mut M) -> Result<u32> {
        let total = model.total();
        if total == 0 || total > self.cfg.max_total() {
            return Err(Error::Model(format!(
                "frequency total {total} outside 1..={}",
                self.cfg.max_total()
            )));
        }
        let range = u128::from(self.regs.high - self.regs.low) + 1;
        let offset = u128::from(self.value - self.regs.low);
        let target = ((offset + 1) * u128::from(total) - 1) / range;
        if target >= u128::from(total) {
            return Err(Error::Decode("code value escaped the coding interval".into()));
        }
        let (symbol, lo, hi) = model.find(target as u64);
        if (symbol as usize) >= model.alphabet_size() || lo >= hi || hi > total || !(lo..hi).contains(&(target as u64)) {
            return Err(Error::Model(format!(
                "find({target}) returned symbol {symbol} with invalid range [{lo}, {hi}) of total {total}"
            )));
        }
        self.regs.narrow(lo, hi, total);
        let Registers { half, quarter, .. } = self.regs;
        loop {
            if self.regs.high < half {
            } else if self.regs.low >= half {
                self.regs.low -= half;
                self.regs.high -= half;
                self.value -= half;
            } else if self.regs.low >= quarter && self.regs.high < half + quarter {
                self.regs.low -= quarter;
                self.regs.high -= quarter;
                self.value -= quarter;
            } else {
                break;
            }
            self.regs.low <<= 1;
            self.regs.high = (self.regs.high << 1) | 1;
            self.value = (self.value << 1) | self.next_bit();
            self.shifts += 1;
        }
        model.update(symbol);
        Ok(symbol)
    }

    /// Checks that the input is exactly as long as the encoder would have made it.
    pub fn finish(self) -> Result<()> {
        let expected_bits = self.shifts + 2;
        let expected_bytes = expected_bits.div_ceil(8) as usize;
        if self.input.len() < expected_bytes {
            return Err(Error::Decode(format!(
                "bitstream truncated: {} bytes present, {expected_bytes} required",
                self.input.len()
            )));
        }
        if self.input.len() > expected_bytes {
            return Err(Error::Decode(format!(
                "{} trailing bytes after the bitstream",
                self.input.len() - expected_bytes
            )));
        }
        let pad = (expected_bytes as u64 * 8 - expected_bits) as u32;
        if pad > 0 && self.input[expected_bytes - 1] & ((1u8 << pad) - 1) != 0 {
            return Err(Error::Decode("non-zero padding bits".into()));
        }
        Ok(())
    }
}

pub fn encode_stream<M: ProbabilityModel + ?Sized>(
    model: &mut M,
    symbols: &[u32],
    cfg: CoderConfig,
) -> Result<Bitstream> {
    let mut enc = Encoder::new(cfg)?;
    for &s in symbols {
        enc.encode(model, s)?;
    }
    Ok(enc.finish())
}

pub fn decode_stream<M: ProbabilityModel + ?Sized>(
    model: &mut M,
    bits: &[u8],
    count: u64,
    cfg: CoderConfig,
) -> Result<Vec<u32>> {
    if count == 0 && bits.is_empty() {
        cfg.validate()?;
        return Ok(Vec::new());
    }
    let mut dec = Decoder::new(cfg, bits)?;
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        out.push(dec.decode(model)?);
    }
    dec.finish()?;
    Ok(out)
}

/// `-log2 p(symbol)` under the model's current table, then updates the model.
pub fn symbol_cost<M: ProbabilityModel + ?Sized>(model: &mut M, symbol: u32) -> Result<f64> {
    check_symbol(model, symbol)?;
    let (lo, hi, total) = checked_range(model, symbol, u64::MAX)?;
    model.update(symbol);
    Ok((total as f64).log2() - ((hi - lo) as f64).log2())
}

/// Per-symbol ideal code lengths in bits.
pub fn symbol_costs<M: ProbabilityModel + ?Sized>(model: &mut M, symbols: &[u32]) -> Result<Vec<f64>> {
    symbols.iter().map(|&s| symbol_cost(model, s)).collect()
}

/// Total `-log2` probability of `symbols` under the model's discretized tables.
pub fn ideal_bits<M: ProbabilityModel + ?Sized>(model: &mut M, symbols: &[u32]) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for &s in symbols {
        acc.add(symbol_cost(model, s)?);
    }
    Ok(acc.value())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub config: CoderConfig,
    pub model_id: String,
    pub symbol_count: u64,
    pub bitstream: Vec<u8>,
}

impl fmt::Display for Container {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "model={} B={} f={} symbols={} payload_bytes={}",
            self.model_id,
            self.config.precision_bits,
            self.config.freq_bits,
            self.symbol_count,
            self.bitstream.len()
        )
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.model_id.as_bytes();
        let mut out = Vec::with_capacity(17 + id.len() + self.bitstream.len());
        out.extend_from_slice(MAGIC);
        out.push(CONTAINER_VERSION);
        out.push(self.config.precision_bits as u8);
        out.push(self.config.freq_bits as u8);
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        out.extend_from_slice(&self.bitstream);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let short = || Error::Container("container header truncated".into());
        if data.len() < 9 {
            return Err(short());
        }
        if &data[..4] != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        if data[4] != CONTAINER_VERSION {
            return Err(Error::Container(format!("unsupported version {}", data[4])));
        }
        let config = CoderConfig::new(u32::from(data[5]), u32::from(data[6]))
            .map_err(|e| Error::Container(e.to_string()))?;
        let id_len = u16::from_le_bytes([data[7], data[8]]) as usize;
        let id_end = 9 + id_len;
        if data.len() < id_end + 8 {
            return Err(short());
        }
        let model_id = std::str::from_utf8(&data[9..id_end])
            .map_err(|_| Error::Container("model id is not UTF-8".into()))?
            .to_string();
        let symbol_count = u64::from_le_bytes(data[id_end..id_end + 8].try_into().expect("8 bytes"));
        Ok(Container {
            config,
            model_id,
            symbol_count,
            bitstream: data[id_end + 8..].to_vec(),
        })
    }
}

/// Compresses bytes with the model named by `model_id`.
pub fn pack(data: &[u8], model_id: &str, cfg: CoderConfig) -> Result<Container> {
    cfg.validate()?;
    let mut model = model_from_id(model_id, cfg.freq_bits)?;
    let symbols: Vec<u32> = data.iter().map(|&b| u32::from(b)).collect();
    let bits = encode_stream(model.as_mut(), &symbols, cfg)?;
    Ok(Container {
        config: cfg,
        model_id: model.id(),
        symbol_count: data.len() as u64,
        bitstream: bits.bytes,
    })
}

pub fn unpack(container: &Container) -> Result<Vec<u8>> {
    let mut model = model_from_id(&container.model_id, container.config.freq_bits)?;
    if model.alphabet_size() > 256 {
        return Err(Error::Container(format!(
            "model {} codes more than byte symbols",
            container.model_id
        )));
    }
    let symbols = decode_stream(model.as_mut(), &container.bitstream, container.symbol_count, container.config)?;
    Ok(symbols.into_iter().map(|s| s as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> CoderConfig {
        CoderConfig::default()
    }

    fn bound(ideal: f64, n: usize, cfg: CoderConfig) -> f64 {
        ideal + 2.0 + n as f64 * cfg.slack_per_symbol()
    }

    /// Ideal length recomputed from the uniform table by brute force.
    fn brute_uniform_bits(alphabet: u64, n: usize) -> f64 {
        (0..n).map(|_| -(1.0 / alphabet as f64).log2()).sum()
    }

    #[test]
    fn empty_sequence_round_trips() {
        let mut m = StaticModel::uniform(256);
        let bits = encode_stream(&mut m, &[], cfg()).unwrap();
        assert_eq!(bits.bit_len, 2);
        assert_eq!(bits.bytes.len(), 1);
        assert!(decode_stream(&mut StaticModel::uniform(256), &bits.bytes, 0, cfg()).unwrap().is_empty());
        assert!(decode_stream(&mut StaticModel::uniform(256), &[], 0, cfg()).unwrap().is_empty());
        assert_eq!(ideal_bits(&mut StaticModel::uniform(256), &[]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_256_length() {
        let symbols: Vec<u32> = (0..100).map(|i| (i * 37 % 256) as u32).collect();
        let ideal = ideal_bits(&mut StaticModel::uniform(256), &symbols).unwrap();
        assert_eq!(ideal, 800.0);
        assert_eq!(ideal, brute_uniform_bits(256, 100));
        let bits = encode_stream(&mut StaticModel::uniform(256), &symbols, cfg()).unwrap();
        assert!((800..=802).contains(&bits.bit_len), "{}", bits.bit_len);
        let back = decode_stream(&mut StaticModel::uniform(256), &bits.bytes, 100, cfg()).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn binary_uniform_costs_one_bit_per_symbol() {
        for n in [1usize, 7, 64, 1000] {
            let symbols: Vec<u32> = (0..n).map(|i| (i % 3 == 0) as u32).collect();
            let bits = encode_stream(&mut StaticModel::uniform(2), &symbols, cfg()).unwrap();
            assert!(bits.bit_len <= n as u64 + 2);
        }
    }

    #[test]
    fn ideal_bits_of_skewed_table() {
        let mut m = StaticModel::from_frequencies("skew", &[3, 1]).unwrap();
        let v = ideal_bits(&mut m, &[0]).unwrap();
        assert!((v - 0.415_037_499_278_843_8).abs() < 1e-12, "{v}");
    }

    #[test]
    fn truncated_bitstream_is_an_error() {
        let data: Vec<u32> = b"It was the best of times, it was the worst of times".iter().map(|&b| u32::from(b)).collect();
        let full = encode_stream(&mut AdaptiveContextModel::order2_bytes(30).unwrap(), &data, cfg()).unwrap();
        for cut in 1..full.bytes.len() {
            let r = decode_stream(
                &mut AdaptiveContextModel::order2_bytes(30).unwrap(),
                &full.bytes[..full.bytes.len() - cut],
                data.len() as u64,
                cfg(),
            );
            assert!(matches!(r, Err(Error::Decode(_))), "cut {cut}: {r:?}");
        }
        let mut extended = full.bytes.clone();
        extended.push(0);
        assert!(decode_stream(&mut AdaptiveContextModel::order2_bytes(30).unwrap(), &extended, data.len() as u64, cfg()).is_err());
    }

    #[test]
    fn out_of_alphabet_symbol() {
        let r = encode_stream(&mut StaticModel::uniform(4), &[1, 4], cfg());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    struct BrokenModel;
    impl ProbabilityModel for BrokenModel {
        fn id(&self) -> String {
            "broken".into()
        }
        fn alphabet_size(&self) -> usize {
            2
        }
        fn total(&self) -> u64 {
            2
        }
        fn symbol_range(&self, s: u32) -> (u64, u64) {
            (u64::from(s), u64::from(s))
        }
        fn find(&self, _: u64) -> (u32, u64, u64) {
            (0, 0, 0)
        }
        fn update(&mut self, _: u32) {}
        fn state_digest(&self) -> u64 {
            0
        }
    }

    #[test]
    fn zero_frequency_is_model_error() {
        assert!(matches!(encode_stream(&mut BrokenModel, &[0], cfg()), Err(Error::Model(_))));
        let big = StaticModel::from_frequencies("big", &[1 << 20, 1]).unwrap();
        let small_cfg = CoderConfig::new(32, 16).unwrap();
        assert!(matches!(encode_stream(&mut big.clone(), &[0], small_cfg), Err(Error::Model(_))));
    }

    #[test]
    fn config_validation() {
        assert!(CoderConfig::new(15, 8).is_err());
        assert!(CoderConfig::new(63, 8).is_err());
        assert!(CoderConfig::new(32, 31).is_err());
        assert!(CoderConfig::new(32, 0).is_err());
        assert!(CoderConfig::new(16, 14).is_ok());
    }

    #[test]
    fn discretize_floor_then_fixup() {
        let f = discretize(&[0.5, 0.25, 0.25], 4).unwrap();
        assert_eq!(f, vec![8, 4, 4]);
        let f = discretize(&[1.0, 1e-12, 1e-12, 1e-12], 4).unwrap();
        assert_eq!(f, vec![13, 1, 1, 1]);
        let f = discretize(&[1.0, 1.0, 1.0], 4).unwrap();
        assert_eq!(f.iter().sum::<u64>(), 16);
        assert!(f.iter().all(|&x| x >= 1));
        assert!(discretize(&[0.5; 17], 4).is_err());
        assert!(discretize(&[f64::NAN, 1.0], 4).is_err());
        let m = StaticModel::from_probabilities("p", &[0.9, 0.1], 10).unwrap();
        assert_eq!(m.total(), 1024);
    }

    #[test]
    fn adaptive_model_starts_uniform_and_learns() {
        let mut m = AdaptiveContextModel::order2_bytes(30).unwrap();
        assert_eq!(m.total(), 256);
        assert_eq!(m.symbol_range(65), (65, 66));
        let text: Vec<u32> = b"ab".repeat(1000).iter().map(|&b| u32::from(b)).collect();
        let costs = symbol_costs(&mut m, &text).unwrap();
        assert_eq!(costs[..4], [8.0; 4]);
        // Context "ab" has seen 'a' 998 times when the last 'a' is coded: -log2(999/1254).
        let want = (1254f64 / 999.0).log2();
        assert!((costs[costs.len() - 2] - want).abs() < 1e-12, "{}", costs[costs.len() - 2]);
    }

    #[test]
    fn adaptive_rescales_when_counts_outgrow_table() {
        // 2^10 total with 256 symbols: this order-0 model overflows after 768 symbols.
        let small = CoderConfig::new(24, 10).unwrap();
        let data: Vec<u32> = (0..5000u32).map(|i| if i % 5 == 0 { i % 256 } else { 7 }).collect();
        let ideal = ideal_bits(&mut AdaptiveContextModel::new(0, 256, 10).unwrap(), &data).unwrap();
        let bits = encode_stream(&mut AdaptiveContextModel::new(0, 256, 10).unwrap(), &data, small).unwrap();
        let back = decode_stream(&mut AdaptiveContextModel::new(0, 256, 10).unwrap(), &bits.bytes, data.len() as u64, small).unwrap();
        assert_eq!(back, data);
        assert!(bits.bit_len as f64 <= ideal + 2.0 + data.len() as f64 * small.slack_per_symbol());
    }

    #[test]
    fn model_ids_round_trip() {
        for id in ["uniform-256", "uniform-2", "adaptive-o2-256", "adaptive-o0-17"] {
            assert_eq!(model_from_id(id, 30).unwrap().id(), id);
        }
        for id in ["uniform-0", "adaptive-o2", "adaptive-o9-256", "ppm"] {
            assert!(model_from_id(id, 30).is_err(), "{id}");
        }
    }

    #[test]
    fn container_layout_is_exact() {
        let c = pack(b"abc", "uniform-256", CoderConfig::new(32, 12).unwrap()).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"ICAC");
        assert_eq!(bytes[4], 1);
        assert_eq!((bytes[5], bytes[6]), (32, 12));
        assert_eq!(u16::from_le_bytes([bytes[7], bytes[8]]), 11);
        assert_eq!(&bytes[9..20], b"uniform-256");
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        // 24 bits of uniform-256 payload plus the 2-bit terminator.
        assert_eq!(bytes.len(), 28 + 4);
        assert_eq!(&bytes[28..31], b"abc");
        let parsed = Container::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(unpack(&parsed).unwrap(), b"abc");
    }

    #[test]
    fn container_rejects_garbage() {
        assert!(Container::from_bytes(b"ICA").is_err());
        assert!(Container::from_bytes(b"ICAX\x01\x20\x0c\x00\x00\0\0\0\0\0\0\0\0").is_err());
        assert!(Container::from_bytes(b"ICAC\x02\x20\x0c\x00\x00\0\0\0\0\0\0\0\0").is_err());
        assert!(Container::from_bytes(b"ICAC\x01\x20\x1f\x00\x00\0\0\0\0\0\0\0\0").is_err());
        assert!(Container::from_bytes(b"ICAC\x01\x20\x0c\x05\x00ab").is_err());
    }

    #[test]
    fn fenwick_matches_linear_scan() {
        let mut f = Fenwick::ones(13);
        let mut counts = vec![1u64; 13];
        for (i, s) in [3usize, 3, 0, 12, 7, 7, 7, 1].iter().enumerate() {
            f.add_one(*s);
            counts[*s] += 1;
            let total: u64 = counts.iter().sum();
            for target in 0..total {
                let mut acc = 0;
                let mut want = 0;
                for (j, c) in counts.iter().enumerate() {
                    if acc + c > target {
                        want = j;
                        break;
                    }
                    acc += c;
                }
                assert_eq!(f.find(target), (want, acc), "step {i} target {target}");
            }
        }
    }

    #[test]
    fn sparse_and_dense_contexts_match_counts() {
        let n = 100;
        let mut ctx = Context::new();
        let mut counts = vec![1u64; n];
        let mut rng = 12345u64;
        for step in 0..400 {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let s = ((rng >> 33) % n as u64) as usize;
            ctx.add(s as u32, n);
            counts[s] += 1;
            let total: u64 = counts.iter().sum();
            let mut acc = 0;
            for (j, &c) in counts.iter().enumerate() {
                assert_eq!(ctx.range(j), (acc, acc + c), "step {step} symbol {j}");
                assert_eq!(ctx.find(acc), (j as u32, acc, acc + c));
                assert_eq!(ctx.find(acc + c - 1), (j as u32, acc, acc + c));
                acc += c;
            }
            assert_eq!(acc, total);
            let nz: Vec<(u32, u64)> = (0..n).filter(|&j| counts[j] > 1).map(|j| (j as u32, counts[j] - 1)).collect();
            assert_eq!(ctx.nonzero(n), nz);
        }
        assert!(matches!(ctx.counts, Counts::Dense(_)));
    }

    proptest! {
        #[test]
        fn round_trip_and_state_symmetry(data in proptest::collection::vec(0u32..256, 0..2000), order in 0u32..3) {
            let mut enc_model = AdaptiveContextModel::new(order, 256, 30).unwrap();
            let bits = encode_stream(&mut enc_model, &data, cfg()).unwrap();
            let mut dec_model = AdaptiveContextModel::new(order, 256, 30).unwrap();
            let back = decode_stream(&mut dec_model, &bits.bytes, data.len() as u64, cfg()).unwrap();
            prop_assert_eq!(&back, &data);
            prop_assert_eq!(enc_model.state_digest(), dec_model.state_digest());
            let ideal = ideal_bits(&mut AdaptiveContextModel::new(order, 256, 30).unwrap(), &data).unwrap();
            prop_assert!((bits.bit_len as f64) <= bound(ideal, data.len(), cfg()));
        }

        #[test]
        fn skewed_tables_and_small_registers(
            data in proptest::collection::vec(0u32..5, 0..3000),
            freqs in proptest::collection::vec(1u64..200, 5),
            b in 17u32..40,
        ) {
            let f = ((b - 1) / 2).min(12);
            let config = CoderConfig::new(b, f).unwrap();
            let table: Vec<u64> = freqs.iter().map(|&x| x.min(1u64 << (f - 3))).collect();
            let model = StaticModel::from_frequencies("t", &table).unwrap();
            let bits = encode_stream(&mut model.clone(), &data, config).unwrap();
            let back = decode_stream(&mut model.clone(), &bits.bytes, data.len() as u64, config).unwrap();
            prop_assert_eq!(&back, &data);
            let ideal = ideal_bits(&mut model.clone(), &data).unwrap();
            prop_assert!((bits.bit_len as f64) <= bound(ideal, data.len(), config), "{} > {}", bits.bit_len, bound(ideal, data.len(), config));
        }
    }
}

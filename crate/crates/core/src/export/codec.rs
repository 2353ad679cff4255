//! Self-describing binary snapshot format, used both for files on disk and
//! for shipping snapshots between localities.
//!
//! Layout: magic `TSCP`, one version byte, then each snapshot field in
//! declaration order. Integers are little-endian; strings and sequences are
//! prefixed with a u32 length.

use std::collections::{BTreeMap, BTreeSet};

use crate::device::{ActivityKind, ActivityRecord};
use crate::profiler::{
    CounterSample, CounterStats, FlatProfile, FlatProfileEntry, ScatterSample, Segment, Snapshot, TaskTrace,
};
use crate::tasking::Guid;

pub const MAGIC: &[u8; 4] = b"TSCP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unexpected end of input")]
    Truncated,
    #[error("invalid UTF-8 string")]
    Utf8,
    #[error("invalid tag {0}")]
    Tag(u8),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decode error at byte {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i128(&mut self, v: i128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("sequence longer than u32::MAX"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.u64(x);
            }
            None => self.u8(0),
        }
    }
    fn profile(&mut self, p: &FlatProfile) {
        self.len(p.len());
        for e in p.values() {
            self.str(&e.name);
            self.u64(e.calls);
            self.u64(e.total_active_ns);
            self.u64(e.min_ns);
            self.u64(e.max_ns);
            self.u64(e.total_yields);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError { offset: self.pos, kind }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(DecodeErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i128(&mut self) -> Result<i128, DecodeError> {
        Ok(i128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize, DecodeError> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.len()?;
        let start = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError { offset: start, kind: DecodeErrorKind::Utf8 })
    }
    fn opt_u64(&mut self) -> Result<Option<u64>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.u64()?)),
            t => Err(DecodeError { offset: self.pos - 1, kind: DecodeErrorKind::Tag(t) }),
        }
    }
    fn profile(&mut self) -> Result<FlatProfile, DecodeError> {
        let n = self.len()?;
        let mut p = FlatProfile::new();
        for _ in 0..n {
            let e = FlatProfileEntry {
                name: self.str()?,
                calls: self.u64()?,
                total_active_ns: self.u64()?,
                min_ns: self.u64()?,
                max_ns: self.u64()?,
                total_yields: self.u64()?,
            };
            p.insert(e.name.clone(), e);
        }
        Ok(p)
    }
}

pub fn encode_snapshot(s: &Snapshot) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(256));
    w.0.extend_from_slice(MAGIC);
    w.u8(VERSION);

    w.len(s.ranks.len());
    for r in &s.ranks {
        w.u32(*r);
    }
    w.profile(&s.profile);
    w.profile(&s.provisional);

    w.len(s.counters.len());
    for c in s.counters.values() {
        w.str(&c.name);
        w.u64(c.count);
        w.f64(c.min);
        w.f64(c.max);
        w.i128(c.sum_fixed);
        w.f64(c.last);
        w.u64(c.last_ts_ns);
    }
    w.len(s.counter_samples.len());
    for c in &s.counter_samples {
        w.u32(c.rank);
        w.str(&c.name);
        w.u64(c.ts_ns);
        w.f64(c.value);
    }
    w.len(s.scatter.len());
    for x in &s.scatter {
        w.u32(x.rank);
        w.str(&x.name);
        w.u64(x.start_ns);
        w.u64(x.duration_ns);
    }
    w.len(s.edges.len());
    for ((p, c), n) in &s.edges {
        w.str(p);
        w.str(c);
        w.u64(*n);
    }
    w.len(s.tasks.len());
    for t in &s.tasks {
        w.u32(t.rank);
        w.u64(t.guid.0);
        w.opt_u64(t.parent.map(|g| g.0));
        w.str(&t.name);
        w.len(t.segments.len());
        for seg in &t.segments {
            w.u64(seg.start_ns);
            w.u64(seg.end_ns);
            w.u32(seg.worker);
        }
    }
    w.len(s.activity.len());
    for a in &s.activity {
        w.u8(a.kind.code());
        w.str(&a.name);
        w.u32(a.rank);
        w.u32(a.device_id);
        w.u32(a.stream_id);
        w.u64(a.start_ns);
        w.u64(a.end_ns);
        w.opt_u64(a.bytes);
        w.u64(a.correlation_guid.0);
    }
    w.len(s.diagnostics.len());
    for (k, v) in &s.diagnostics {
        w.str(k);
        w.u64(*v);
    }
    w.0
}

pub fn decode_snapshot(buf: &[u8]) -> Result<Snapshot, DecodeError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|e| DecodeError { offset: 0, ..e })? != MAGIC {
        return Err(DecodeError { offset: 0, kind: DecodeErrorKind::BadMagic });
    }
    let v = r.u8()?;
    if v != VERSION {
        return Err(DecodeError { offset: 4, kind: DecodeErrorKind::Version(v) });
    }
    let mut s = Snapshot::default();

    let mut ranks = BTreeSet::new();
    for _ in 0..r.len()? {
        ranks.insert(r.u32()?);
    }
    s.ranks = ranks;
    s.profile = r.profile()?;
    s.provisional = r.profile()?;

    let mut counters = BTreeMap::new();
    for _ in 0..r.len()? {
        let c = CounterStats {
            name: r.str()?,
            count: r.u64()?,
            min: r.f64()?,
            max: r.f64()?,
            sum_fixed: r.i128()?,
            last: r.f64()?,
            last_ts_ns: r.u64()?,
        };
        counters.insert(c.name.clone(), c);
    }
    s.counters = counters;
    for _ in 0..r.len()? {
        s.counter_samples.push(CounterSample { rank: r.u32()?, name: r.str()?, ts_ns: r.u64()?, value: r.f64()? });
    }
    for _ in 0..r.len()? {
        s.scatter.push(ScatterSample { rank: r.u32()?, name: r.str()?, start_ns: r.u64()?, duration_ns: r.u64()? });
    }
    for _ in 0..r.len()? {
        let key = (r.str()?, r.str()?);
        s.edges.insert(key, r.u64()?);
    }
    for _ in 0..r.len()? {
        let rank = r.u32()?;
        let guid = Guid(r.u64()?);
        let parent = r.opt_u64()?.map(Guid);
        let name = r.str()?;
        let mut segments = Vec::new();
        for _ in 0..r.len()? {
            segments.push(Segment { start_ns: r.u64()?, end_ns: r.u64()?, worker: r.u32()? });
        }
        s.tasks.push(TaskTrace { rank, guid, parent, name, segments });
    }
    for _ in 0..r.len()? {
        let at = r.pos;
        let code = r.u8()?;
        let kind = ActivityKind::from_code(code).ok_or(DecodeError { offset: at, kind: DecodeErrorKind::Tag(code) })?;
        s.activity.push(ActivityRecord {
            kind,
            name: r.str()?,
            rank: r.u32()?,
            device_id: r.u32()?,
            stream_id: r.u32()?,
            start_ns: r.u64()?,
            end_ns: r.u64()?,
            bytes: r.opt_u64()?,
            correlation_guid: Guid(r.u64()?),
        });
    }
    for _ in 0..r.len()? {
        let k = r.str()?;
        s.diagnostics.insert(k, r.u64()?);
    }
    if r.pos != buf.len() {
        return Err(r.err(DecodeErrorKind::Trailing(buf.len() - r.pos)));
    }
    Ok(s)
}

//! Sparse observation matrices, the coordinate file format, and minibatch
//! sources (in memory or streamed from disk).
//!
//! Rows are variables and columns are cases. A missing entry is simply
//! absent. On disk the matrix is a coordinate list:
//!
//! ```text
//! %%MatrixMarket matrix coordinate integer general
//! <vars> <cases> <nnz>
//! <var> <case> <state>      (all 1-based)
//! ```
//!
//! Writers emit triples sorted by case, then variable, which is the order
//! [`FileSource`] needs to stream minibatches without loading the file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::network::Network;

/// Marker for an unobserved cell in dense minibatch buffers.
pub const MISSING: u16 = u16::MAX;

const BANNER: &str = "%%MatrixMarket matrix coordinate integer general";

/// Variables x cases matrix of observed states, stored compressed by case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataMatrix {
    num_vars: usize,
    num_cases: usize,
    case_ptr: Vec<usize>,
    vars: Vec<u32>,
    states: Vec<u16>,
}

impl DataMatrix {
    pub fn empty(num_vars: usize, num_cases: usize) -> Self {
        DataMatrix { num_vars, num_cases, case_ptr: vec![0; num_cases + 1], vars: Vec::new(), states: Vec::new() }
    }

    /// Builds from 0-based `(var, case, state)` triples in any order.
    pub fn from_triples(num_vars: usize, num_cases: usize, mut triples: Vec<(usize, usize, u16)>) -> Result<Self> {
        triples.sort_unstable_by_key(|&(v, c, _)| (c, v));
        let mut case_ptr = vec![0; num_cases + 1];
        for w in triples.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::parse(format!("duplicate entry for variable {} case {}", w[0].0, w[0].1)));
            }
        }
        for &(v, c, s) in &triples {
            if v >= num_vars {
                return Err(Error::InvalidIndex { index: v, bound: num_vars });
            }
            if c >= num_cases {
                return Err(Error::InvalidIndex { index: c, bound: num_cases });
            }
            if s == MISSING {
                return Err(Error::parse(format!("state {s} is reserved")));
            }
            case_ptr[c + 1] += 1;
        }
        for c in 0..num_cases {
            case_ptr[c + 1] += case_ptr[c];
        }
        Ok(DataMatrix {
            num_vars,
            num_cases,
            case_ptr,
            vars: triples.iter().map(|t| t.0 as u32).collect(),
            states: triples.iter().map(|t| t.2).collect(),
        })
    }

    /// Builds from dense case-major rows.
    pub fn from_cases(num_vars: usize, cases: &[Vec<Option<u16>>]) -> Result<Self> {
        let mut triples = Vec::new();
        for (c, row) in cases.iter().enumerate() {
            if row.len() != num_vars {
                return Err(Error::DimensionMismatch(format!(
                    "case {c} has {} values for {num_vars} variables",
                    row.len()
                )));
            }
            triples.extend(row.iter().enumerate().filter_map(|(v, s)| s.map(|s| (v, c, s))));
        }
        Self::from_triples(num_vars, cases.len(), triples)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_cases(&self) -> usize {
        self.num_cases
    }

    pub fn nnz(&self) -> usize {
        self.states.len()
    }

    pub fn density(&self) -> f64 {
        let cells = self.num_vars * self.num_cases;
        if cells == 0 {
            0.0
        } else {
            self.nnz() as f64 / cells as f64
        }
    }

    /// Observed `(var, state)` pairs of one case, ascending by variable.
    pub fn case(&self, c: usize) -> impl Iterator<Item = (usize, u16)> + '_ {
        let range = self.case_ptr[c]..self.case_ptr[c + 1];
        self.vars[range.clone()].iter().zip(&self.states[range]).map(|(&v, &s)| (v as usize, s))
    }

    pub fn get(&self, var: usize, case: usize) -> Option<u16> {
        let range = self.case_ptr[case]..self.case_ptr[case + 1];
        self.vars[range.clone()].binary_search(&(var as u32)).ok().map(|i| self.states[range.start + i])
    }

    /// All `(var, case, state)` triples, sorted by case then variable.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u16)> + '_ {
        (0..self.num_cases).flat_map(move |c| self.case(c).map(move |(v, s)| (v, c, s)))
    }

    /// Checks variable count and that every state fits its cardinality.
    pub fn check_against(&self, net: &Network) -> Result<()> {
        if self.num_vars != net.num_vars() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} variables, network has {}",
                self.num_vars,
                net.num_vars()
            )));
        }
        if let Some((v, c, s)) = self.entries().find(|&(v, _, s)| usize::from(s) >= net.cardinality(v)) {
            return Err(Error::DimensionMismatch(format!(
                "case {c}: state {s} of variable {v} exceeds cardinality {}",
                net.cardinality(v)
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{BANNER}")?;
        writeln!(w, "{} {} {}", self.num_vars, self.num_cases, self.nnz())?;
        for (v, c, s) in self.entries() {
            writeln!(w, "{} {} {}", v + 1, c + 1, s + 1)?;
        }
        w.flush()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn read_from<R: BufRead>(reader: R, path: Option<&Path>) -> Result<Self> {
        let mut parser = TripleReader::new(reader, path)?;
        let header = parser.header;
        let mut triples = Vec::with_capacity(header.nnz);
        while let Some(t) = parser.next_triple()? {
            triples.push(t);
        }
        if triples.len() != header.nnz {
            return Err(Error::parse_at(
                path,
                parser.line_no,
                format!("header declares {} entries, found {}", header.nnz, triples.len()),
            ));
        }
        Self::from_triples(header.num_vars, header.num_cases, triples).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { path: path.map(Path::to_path_buf), line: None, msg },
            other => other,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f), Some(path))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataHeader {
    pub num_vars: usize,
    pub num_cases: usize,
    pub nnz: usize,
}

/// Incremental parser over the coordinate format, yielding 0-based triples.
struct TripleReader<R: BufRead> {
    reader: R,
    buf: String,
    path: Option<PathBuf>,
    line_no: usize,
    header: DataHeader,
}

impl<R: BufRead> TripleReader<R> {
    fn new(reader: R, path: Option<&Path>) -> Result<Self> {
        let mut me = TripleReader {
            reader,
            buf: String::new(),
            path: path.map(Path::to_path_buf),
            line_no: 0,
            header: DataHeader { num_vars: 0, num_cases: 0, nnz: 0 },
        };
        let fields = me.next_fields()?.ok_or_else(|| Error::parse_at(path, me.line_no, "missing header line"))?;
        if fields.len() != 3 {
            return Err(Error::parse_at(path, me.line_no, "header must be `vars cases nnz`"));
        }
        me.header = DataHeader { num_vars: fields[0], num_cases: fields[1], nnz: fields[2] };
        Ok(me)
    }

    fn next_fields(&mut self) -> Result<Option<SmallVec<[usize; 4]>>> {
        loop {
            self.buf.clear();
            let read = self
                .reader
                .read_line(&mut self.buf)
                .map_err(|e| Error::io(self.path.clone().unwrap_or_default(), e))?;
            if read == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            let t = self.buf.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let fields = t
                .split_whitespace()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<SmallVec<_>, _>>()
                .map_err(|e| Error::parse_at(self.path.as_deref(), self.line_no, format!("{e}: `{t}`")))?;
            return Ok(Some(fields));
        }
    }

    fn next_triple(&mut self) -> Result<Option<(usize, usize, u16)>> {
        let Some(f) = self.next_fields()? else { return Ok(None) };
        let bad = |me: &Self, msg: String| Error::parse_at(me.path.as_deref(), me.line_no, msg);
        if f.len() != 3 {
            return Err(bad(self, "expected `var case state`".into()));
        }
        let (v, c, s) = (f[0], f[1], f[2]);
        if v == 0 || c == 0 || s == 0 {
            return Err(bad(self, "indices and states are 1-based".into()));
        }
        if v > self.header.num_vars || c > self.header.num_cases {
            return Err(bad(self, format!("entry ({v}, {c}) outside declared shape")));
        }
        if s > usize::from(MISSING) {
            return Err(bad(self, format!("state {s} too large")));
        }
        Ok(Some((v - 1, c - 1, (s - 1) as u16)))
    }
}

/// A block of consecutive cases, padded to a uniform size.
///
/// Cells are case-major (`case * num_vars + var`) with [`MISSING`] for
/// unobserved entries. Padding cases past `real_cases` are fully missing and
/// carry zero weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub id: usize,
    pub first_case: usize,
    pub num_vars: usize,
    pub real_cases: usize,
    pub cells: Vec<u16>,
}

impl Minibatch {
    pub fn new(id: usize, first_case: usize, num_vars: usize, size: usize, real_cases: usize) -> Self {
        Minibatch { id, first_case, num_vars, real_cases, cells: vec![MISSING; size * num_vars] }
    }

    /// Number of cases including padding.
    pub fn size(&self) -> usize {
        self.cells.len() / self.num_vars.max(1)
    }

    pub fn weight(&self, local_case: usize) -> f64 {
        if local_case < self.real_cases {
            1.0
        } else {
            0.0
        }
    }

    pub fn case(&self, local_case: usize) -> &[u16] {
        &self.cells[local_case * self.num_vars..(local_case + 1) * self.num_vars]
    }

    pub fn bytes(&self) -> usize {
        self.cells.len() * std::mem::size_of::<u16>()
    }
}

/// Anything that can serve a data set as a sequence of minibatches, any
/// number of times.
pub trait MinibatchSource {
    fn num_vars(&self) -> usize;
    fn num_cases(&self) -> usize;
    /// Restarts at case 0; the next minibatch gets id 0.
    fn rewind(&mut self) -> Result<()>;
    /// The next `size` cases (zero-padded at the end of the data), or `None`
    /// once the data is exhausted.
    fn next_minibatch(&mut self, size: usize) -> Result<Option<Minibatch>>;

    fn num_minibatches(&self, size: usize) -> usize {
        self.num_cases().div_ceil(size)
    }
}

pub struct InMemorySource<'a> {
    data: &'a DataMatrix,
    next_case: usize,
    next_id: usize,
}

impl<'a> InMemorySource<'a> {
    pub fn new(data: &'a DataMatrix) -> Self {
        InMemorySource { data, next_case: 0, next_id: 0 }
    }
}

impl MinibatchSource for InMemorySource<'_> {
    fn num_vars(&self) -> usize {
        self.data.num_vars()
    }

    fn num_cases(&self) -> usize {
        self.data.num_cases()
    }

    fn rewind(&mut self) -> Result<()> {
        self.next_case = 0;
        self.next_id = 0;
        Ok(())
    }

    fn next_minibatch(&mut self, size: usize) -> Result<Option<Minibatch>> {
        let start = self.next_case;
        if start >= self.data.num_cases() {
            return Ok(None);
        }
        let end = (start + size).min(self.data.num_cases());
        let n = self.data.num_vars();
        let mut mb = Minibatch::new(self.next_id, start, n, size, end - start);
        for c in start..end {
            for (v, s) in self.data.case(c) {
                mb.cells[(c - start) * n + v] = s;
            }
        }
        self.next_case = end;
        self.next_id += 1;
        Ok(Some(mb))
    }
}

/// Streams minibatches from a coordinate file sorted by case, holding at
/// most one minibatch of data in memory. Each rewind reopens the file.
pub struct FileSource {
    path: PathBuf,
    header: DataHeader,
    reader: Option<TripleReader<BufReader<File>>>,
    pending: Option<(usize, usize, u16)>,
    next_case: usize,
    next_id: usize,
    last_key: Option<(usize, usize)>,
}

impl FileSource {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let reader = Self::open_reader(&path)?;
        let header = reader.header;
        Ok(FileSource { path, header, reader: Some(reader), pending: None, next_case: 0, next_id: 0, last_key: None })
    }

    fn open_reader(path: &Path) -> Result<TripleReader<BufReader<File>>> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        TripleReader::new(BufReader::new(f), Some(path))
    }

    pub fn header(&self) -> DataHeader {
        self.header
    }

    fn pull(&mut self) -> Result<Option<(usize, usize, u16)>> {
        if let Some(t) = self.pending.take() {
            return Ok(Some(t));
        }
        let reader = self.reader.as_mut().expect("reader is open");
        let t = reader.next_triple()?;
        if let Some((v, c, _)) = t {
            if self.last_key.is_some_and(|k| k >= (c, v)) {
                return Err(Error::parse_at(
                    Some(&self.path),
                    reader.line_no,
                    "entries must be sorted by case then variable for streaming",
                ));
            }
            self.last_key = Some((c, v));
        }
        Ok(t)
    }
}

impl MinibatchSource for FileSource {
    fn num_vars(&self) -> usize {
        self.header.num_vars
    }

    fn num_cases(&self) -> usize {
        self.header.num_cases
    }

    fn rewind(&mut self) -> Result<()> {
        self.reader = Some(Self::open_reader(&self.path)?);
        self.pending = None;
        self.next_case = 0;
        self.next_id = 0;
        self.last_key = None;
        Ok(())
    }

    fn next_minibatch(&mut self, size: usize) -> Result<Option<Minibatch>> {
        let start = self.next_case;
        if start >= self.header.num_cases {
            return Ok(None);
        }
        let end = (start + size).min(self.header.num_cases);
        let n = self.header.num_vars;
        let mut mb = Minibatch::new(self.next_id, start, n, size, end - start);
        while let Some((v, c, s)) = self.pull()? {
            if c >= end {
                self.pending = Some((v, c, s));
                break;
            }
            mb.cells[(c - start) * n + v] = s;
        }
        self.next_case = end;
        self.next_id += 1;
        Ok(Some(mb))
    }
}

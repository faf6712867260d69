//! Token-id corpora, per-position samples and deterministic splits.
//!
//! Every token position after the first in every document yields one
//! sample: the target is the token at that position and the prefix is the
//! (at most `context`) tokens before it. Sample ids are assigned in
//! document order and are stable for identical input.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub id: usize,
    pub doc: usize,
    /// Index of the target token inside its document (always ≥ 1).
    pub pos: usize,
    pub target: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocab_size: usize,
    context: usize,
    docs: Vec<Vec<TokenId>>,
    samples: Vec<Sample>,
    doc_first_sample: Vec<usize>,
    categories: Option<Vec<String>>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Vec<TokenId>>, vocab_size: usize, context: usize) -> Result<Self> {
        if vocab_size == 0 || context == 0 {
            return Err(Error::InvalidArgument("vocab size and context must be >= 1".into()));
        }
        let mut samples = Vec::new();
        let mut doc_first_sample = Vec::with_capacity(docs.len());
        for (d, doc) in docs.iter().enumerate() {
            doc_first_sample.push(samples.len());
            for (i, &t) in doc.iter().enumerate() {
                if t as usize >= vocab_size {
                    return Err(Error::TokenOutOfRange { token: t, vocab: vocab_size, index: d });
                }
                if i >= 1 {
                    samples.push(Sample { id: samples.len(), doc: d, pos: i, target: t });
                }
            }
        }
        Ok(Corpus { vocab_size, context, docs, samples, doc_first_sample, categories: None })
    }

    pub fn with_categories(mut self, categories: Vec<String>) -> Result<Self> {
        if categories.len() != self.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "{} category tags for {} samples",
                categories.len(),
                self.samples.len()
            )));
        }
        self.categories = Some(categories);
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn docs(&self) -> &[Vec<TokenId>] {
        &self.docs
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    pub fn target(&self, id: usize) -> TokenId {
        self.samples[id].target
    }

    pub fn prefix(&self, id: usize) -> &[TokenId] {
        let s = &self.samples[id];
        let start = s.pos.saturating_sub(self.context);
        &self.docs[s.doc][start..s.pos]
    }

    /// Sample ids whose target sits in document `doc`.
    pub fn doc_sample_ids(&self, doc: usize) -> std::ops::Range<usize> {
        let start = self.doc_first_sample[doc];
        let end = self.doc_first_sample.get(doc + 1).copied().unwrap_or(self.samples.len());
        start..end
    }

    pub fn categories(&self) -> Option<&[String]> {
        self.categories.as_deref()
    }

    pub fn category(&self, id: usize) -> Option<&str> {
        self.categories.as_ref().map(|c| c[id].as_str())
    }

    /// Sorted list of distinct category names.
    pub fn category_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.categories.iter().flatten().cloned().collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.samples.len()).collect()
    }

    /// Parses one document per line of space-separated token ids.
    pub fn parse(text: &str, vocab_size: usize, context: usize, origin: &Path) -> Result<Self> {
        let mut docs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut doc = Vec::new();
            for field in line.split_whitespace() {
                let t: TokenId = field.parse().map_err(|_| Error::Parse {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    message: format!("not a token id: {field:?}"),
                })?;
                if t as usize >= vocab_size {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: n + 1,
                        message: format!("token {t} out of vocabulary (size {vocab_size})"),
                    });
                }
                doc.push(t);
            }
            docs.push(doc);
        }
        Corpus::from_documents(docs, vocab_size, context)
    }

    pub fn ingest(path: &Path, vocab_size: usize, context: usize, categories: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let corpus = Corpus::parse(&text, vocab_size, context, path)?;
        match categories {
            Some(c) => {
                let tags = read_category_file(c, corpus.len())?;
                corpus.with_categories(tags)
            }
            None => Ok(corpus),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for doc in &self.docs {
            let mut first = true;
            for t in doc {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{t}");
            }
            out.push('\n');
        }
        out
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn categories_text(&self) -> Option<String> {
        self.categories.as_ref().map(|tags| {
            let mut out = String::new();
            for (i, t) in tags.iter().enumerate() {
                let _ = writeln!(out, "{i} {t}");
            }
            out
        })
    }

    pub fn export_categories(&self, path: &Path) -> Result<()> {
        match self.categories_text() {
            Some(text) => fs::write(path, text).map_err(|e| Error::io(path, e)),
            None => Err(Error::Missing("corpus has no category tags".into())),
        }
    }

    /// Hex SHA-256 over vocabulary size, context and documents.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size as u64).to_le_bytes());
        h.update((self.context as u64).to_le_bytes());
        h.update(self.to_text().as_bytes());
        if let Some(c) = self.categories_text() {
            h.update(c.as_bytes());
        }
        hex(&h.finalize())
    }

    /// Target frequency of every token over the given samples.
    pub fn target_counts(&self, ids: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.vocab_size];
        for &i in ids {
            counts[self.samples[i].target as usize] += 1;
        }
        counts
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Reads `<sample id> <category>` lines; every sample must be tagged once.
pub fn read_category_file(path: &Path, samples: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tags: Vec<Option<String>> = vec![None; samples];
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: path.to_path_buf(), line: n + 1, message };
        let (id, tag) = line.trim().split_once(char::is_whitespace).ok_or_else(|| err("expected `<id> <category>`".into()))?;
        let id: usize = id.parse().map_err(|_| err(format!("bad sample id {id:?}")))?;
        if id >= samples {
            return Err(err(format!("sample id {id} out of range ({samples} samples)")));
        }
        if tags[id].is_some() {
            return Err(err(format!("sample id {id} tagged twice")));
        }
        tags[id] = Some(tag.trim().to_string());
    }
    tags.into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Missing(format!("no category for sample {i} in {}", path.display()))))
        .collect()
}

/// A contiguous token slice fed through the model in one pass, with the
/// rows whose outputs belong to samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub doc: usize,
    pub start: usize,
    pub end: usize,
    /// `(row in window, sample id)`; row `r` sees tokens `start..=start + r`.
    pub rows: Vec<(usize, usize)>,
}

impl Window {
    pub fn tokens<'a>(&self, corpus: &'a Corpus) -> &'a [TokenId] {
        &corpus.docs[self.doc][self.start..self.end]
    }
}

/// Groups samples into the fewest forward passes that reproduce each
/// sample's exact prefix. Samples whose prefix starts at the document head
/// share one window; longer positions get their own sliding window.
pub fn windows(corpus: &Corpus, ids: &[usize]) -> Vec<Window> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let c = corpus.context;
    let mut out: Vec<Window> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let doc = corpus.samples[sorted[i]].doc;
        let mut head = Window { doc, start: 0, end: 0, rows: Vec::new() };
        while i < sorted.len() && corpus.samples[sorted[i]].doc == doc {
            let s = corpus.samples[sorted[i]];
            if s.pos <= c {
                head.end = head.end.max(s.pos);
                head.rows.push((s.pos - 1, s.id));
            } else {
                out.push(Window { doc, start: s.pos - c, end: s.pos, rows: vec![(c - 1, s.id)] });
            }
            i += 1;
        }
        if !head.rows.is_empty() {
            out.push(head);
        }
    }
    out.sort_by_key(|w| (w.doc, w.start));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// train / valid / test fractions
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self> {
        let spec = SplitSpec { ratios, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios {:?} must be >= 0 and sum to 1", self.ratios)));
        }
        Ok(())
    }

    /// Exact part sizes for `n` units by largest-remainder rounding.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let raw: Vec<f64> = self.ratios.iter().map(|r| r * n as f64).collect();
        let mut sizes = [0usize; 3];
        for (s, r) in sizes.iter_mut().zip(&raw) {
            *s = r.floor() as usize;
        }
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[k] += 1;
            left -= 1;
        }
        sizes
    }

    /// Assigns each unit id a split tag. Units are ranked by a seeded hash of
    /// their id and the ranking is cut at the exact part sizes.
    pub fn assign(&self, unit_ids: &[usize]) -> Vec<SplitTag> {
        let sizes = self.sizes(unit_ids.len());
        let mut order: Vec<(u64, usize)> = unit_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (crate::rng::hash_u64(self.seed, "split", id as u64), k))
            .collect();
        order.sort_unstable();
        let mut tags = vec![SplitTag::Train; unit_ids.len()];
        for (rank, &(_, k)) in order.iter().enumerate() {
            tags[k] = if rank < sizes[0] {
                SplitTag::Train
            } else if rank < sizes[0] + sizes[1] {
                SplitTag::Valid
            } else {
                SplitTag::Test
            };
        }
        tags
    }
}

/// Sample ids of each LM split, with documents as the split unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    pub fn by_documents(corpus: &Corpus, spec: &SplitSpec) -> Result<Self> {
        spec.validate()?;
        let doc_ids: Vec<usize> = (0..corpus.docs.len()).collect();
        let tags = spec.assign(&doc_ids);
        let mut split = DataSplit { train: Vec::new(), valid: Vec::new(), test: Vec::new() };
        for (d, tag) in tags.iter().enumerate() {
            let ids = corpus.doc_sample_ids(d);
            match tag {
                SplitTag::Train => split.train.extend(ids),
                SplitTag::Valid => split.valid.extend(ids),
                SplitTag::Test => split.test.extend(ids),
            }
        }
        Ok(split)
    }

    pub fn part(&self, tag: SplitTag) -> &[usize] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Valid => &self.valid,
            SplitTag::Test => &self.test,
        }
    }
}

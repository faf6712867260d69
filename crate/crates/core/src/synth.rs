//! Seeded synthetic corpora with token classes and exact pattern injections.
//!
//! Tokens are partitioned into named classes by id range (in declaration
//! order, starting at 0); ids past the last class are reserved for injected
//! patterns and tagged `injected`. Documents follow a Markov chain over
//! classes. Within a class the token is either the "preferred successor" of
//! the previous token (probability `coherence`) or a Zipf draw, which gives
//! the model a mix of predictable and unpredictable positions. A small rate
//! of fixed multi-token collocations, each token corrupted with probability
//! `collocation_noise`, adds near-deterministic continuations and their
//! exceptions.

use std::collections::HashMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::rng::{hash_u64, stream};

pub const INJECTED: &str = "injected";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenClass {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub from: String,
    pub to: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub pattern: Vec<TokenId>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub context: usize,
    pub documents: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub zipf_exponent: f64,
    pub coherence: f64,
    pub start: String,
    pub classes: Vec<TokenClass>,
    pub rules: Vec<Rule>,
    pub collocations: usize,
    pub collocation_len: usize,
    /// Per-position probability of starting a collocation.
    pub collocation_rate: f64,
    pub collocation_noise: f64,
    pub injections: Vec<Injection>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let class = |name: &str, size| TokenClass { name: name.into(), size };
        let rule = |from: &str, to: &str, weight| Rule { from: from.into(), to: to.into(), weight };
        SyntheticSpec {
            vocab_size: 256,
            context: 32,
            documents: 2000,
            min_len: 20,
            max_len: 33,
            seed: 0,
            zipf_exponent: 1.1,
            coherence: 0.6,
            start: "function".into(),
            classes: vec![class("function", 40), class("content", 150), class("punctuation", 10), class("numeral", 20)],
            rules: vec![
                rule("function", "content", 0.7),
                rule("function", "function", 0.1),
                rule("function", "numeral", 0.2),
                rule("content", "function", 0.5),
                rule("content", "content", 0.2),
                rule("content", "punctuation", 0.3),
                rule("punctuation", "function", 0.6),
                rule("punctuation", "content", 0.4),
                rule("numeral", "content", 0.6),
                rule("numeral", "punctuation", 0.4),
            ],
            collocations: 16,
            collocation_len: 5,
            collocation_rate: 0.08,
            collocation_noise: 0.03,
            injections: (0..30).map(|k| Injection { pattern: vec![220 + k], count: 1 + (k as usize % 2) }).collect(),
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("synthetic spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// First id not owned by any class.
    pub fn reserved_start(&self) -> usize {
        self.classes.iter().map(|c| c.size).sum()
    }

    /// Class name of every token id.
    pub fn token_classes(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.vocab_size);
        for c in &self.classes {
            out.extend(std::iter::repeat(c.name.clone()).take(c.size));
        }
        out.resize(self.vocab_size, INJECTED.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size == 0 || self.context == 0 || self.min_len < 2 || self.max_len < self.min_len {
            return bad("need vocab, context >= 1 and 2 <= min_len <= max_len".into());
        }
        if self.reserved_start() > self.vocab_size {
            return bad(format!("classes cover {} ids but vocab is {}", self.reserved_start(), self.vocab_size));
        }
        if self.classes.iter().any(|c| c.size == 0) {
            return bad("every class needs at least one token".into());
        }
        if !(0.0..=1.0).contains(&self.coherence) || !(self.zipf_exponent > 0.0) {
            return bad("coherence must be in [0, 1] and zipf exponent > 0".into());
        }
        if !(0.0..=1.0).contains(&self.collocation_rate) || !(0.0..=1.0).contains(&self.collocation_noise) {
            return bad("collocation rate and noise must be in [0, 1]".into());
        }
        if self.collocations > 0 && self.collocation_len < 2 {
            return bad("collocations need length >= 2".into());
        }
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        if !names.contains(&self.start.as_str()) {
            return bad(format!("start class {} is not declared", self.start));
        }
        for r in &self.rules {
            if !names.contains(&r.from.as_str()) || !names.contains(&r.to.as_str()) || !(r.weight >= 0.0) {
                return bad(format!("bad rule {} -> {}", r.from, r.to));
            }
        }
        for n in &names {
            if !self.rules.iter().any(|r| r.from == *n && r.weight > 0.0) {
                return bad(format!("class {n} has no outgoing rule"));
            }
        }
        let reserved = self.reserved_start();
        let mut owner: HashMap<TokenId, usize> = HashMap::new();
        for (k, inj) in self.injections.iter().enumerate() {
            if inj.pattern.is_empty() {
                return bad(format!("injection {k} has an empty pattern"));
            }
            if inj.pattern.len() > self.max_len {
                return bad(format!(
                    "injection {k} pattern length {} exceeds document length {}",
                    inj.pattern.len(),
                    self.max_len
                ));
            }
            if let Some(&t) = inj.pattern.iter().find(|&&t| t as usize >= self.vocab_size) {
                return bad(format!("injection {k} token {t} outside vocab"));
            }
            for &t in &inj.pattern {
                if (t as usize) >= reserved {
                    if let Some(&o) = owner.get(&t) {
                        if o != k {
                            return bad(format!("reserved token {t} used by injections {o} and {k}"));
                        }
                    }
                    owner.insert(t, k);
                }
            }
        }
        for (k, inj) in self.injections.iter().enumerate() {
            if self.anchor(inj).is_none() {
                return bad(format!(
                    "injection {k} needs a reserved token (id >= {reserved}) that appears once in its pattern"
                ));
            }
        }
        Ok(())
    }

    /// Position of a reserved token occurring exactly once in the pattern;
    /// it pins every occurrence of the pattern to one injection.
    fn anchor(&self, inj: &Injection) -> Option<usize> {
        let reserved = self.reserved_start();
        (0..inj.pattern.len()).find(|&p| {
            let t = inj.pattern[p];
            t as usize >= reserved && inj.pattern.iter().filter(|&&u| u == t).count() == 1
        })
    }
}

/// Generated corpus plus the class table used to tag it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub token_classes: Vec<String>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "synthetic-corpus");
    let classes = &spec.classes;
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect();
    let mut offsets = Vec::with_capacity(classes.len());
    let mut acc = 0;
    for c in classes {
        offsets.push(acc);
        acc += c.size;
    }
    let transitions: Vec<(Vec<usize>, WeightedIndex<f64>)> = classes
        .iter()
        .map(|c| {
            let rules: Vec<&Rule> = spec.rules.iter().filter(|r| r.from == c.name).collect();
            let targets = rules.iter().map(|r| index[r.to.as_str()]).collect();
            let dist = WeightedIndex::new(rules.iter().map(|r| r.weight)).expect("validated weights");
            (targets, dist)
        })
        .collect();
    let zipfs: Vec<Zipf<f64>> =
        classes.iter().map(|c| Zipf::new(c.size as u64, spec.zipf_exponent).expect("validated zipf")).collect();
    // Each class owns a random rank order so the frequent tokens differ per seed.
    let orders: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| {
            let mut o: Vec<usize> = (0..c.size).collect();
            rand::seq::SliceRandom::shuffle(o.as_mut_slice(), &mut rng);
            o
        })
        .collect();

    let owned = spec.reserved_start();
    let class_of = |t: usize| offsets.iter().rposition(|&o| o <= t).expect("owned token");
    let phrases: Vec<Vec<usize>> = {
        let mut prng = stream(spec.seed, "synthetic-collocations");
        (0..spec.collocations).map(|_| (0..spec.collocation_len).map(|_| prng.gen_range(0..owned)).collect()).collect()
    };

    let mut docs: Vec<Vec<TokenId>> = Vec::with_capacity(spec.documents);
    for _ in 0..spec.documents {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut doc = Vec::with_capacity(len);
        let mut class = index[spec.start.as_str()];
        let mut prev: Option<TokenId> = None;
        while doc.len() < len {
            if !phrases.is_empty() && rng.gen::<f64>() < spec.collocation_rate {
                let phrase = &phrases[rng.gen_range(0..phrases.len())];
                for &t in phrase.iter().take(len - doc.len()) {
                    let t = if rng.gen::<f64>() < spec.collocation_noise { rng.gen_range(0..owned) } else { t };
                    doc.push(t as TokenId);
                    prev = Some(t as TokenId);
                    class = class_of(t);
                }
                let (targets, dist) = &transitions[class];
                class = targets[dist.sample(&mut rng)];
                continue;
            }
            let size = classes[class].size;
            let local = match prev {
                Some(p) if rng.gen::<f64>() < spec.coherence => {
                    (hash_u64(spec.seed, &classes[class].name, p as u64) % size as u64) as usize
                }
                _ => orders[class][zipfs[class].sample(&mut rng) as usize - 1],
            };
            let token = (offsets[class] + local) as TokenId;
            doc.push(token);
            prev = Some(token);
            let (targets, dist) = &transitions[class];
            class = targets[dist.sample(&mut rng)];
        }
        docs.push(doc);
    }

    inject(spec, &mut docs, &mut rng)?;

    let token_classes = spec.token_classes();
    let corpus = Corpus::from_documents(docs, spec.vocab_size, spec.context)?;
    let tags = corpus.samples().iter().map(|s| token_classes[s.target as usize].clone()).collect();
    Ok(SyntheticCorpus { corpus: corpus.with_categories(tags)?, token_classes })
}

/// Inserts every injected pattern as an intact block. To stay within
/// `max_len`, grammar tokens (never injected ones) are dropped from the end
/// of the host document.
fn inject(spec: &SyntheticSpec, docs: &mut [Vec<TokenId>], rng: &mut impl Rng) -> Result<()> {
    if spec.injections.is_empty() {
        return Ok(());
    }
    if docs.is_empty() {
        return Err(Error::InvalidArgument("injections need at least one document".into()));
    }
    let mut blocks: Vec<Vec<Option<usize>>> = docs.iter().map(|d| vec![None; d.len()]).collect();
    let mut next_block = 0;
    for inj in &spec.injections {
        for _ in 0..inj.count {
            let first = rng.gen_range(0..docs.len());
            let host = (0..docs.len()).map(|k| (first + k) % docs.len()).find(|&d| {
                let free = blocks[d].iter().filter(|b| b.is_none()).count();
                let excess = (docs[d].len() + inj.pattern.len()).saturating_sub(spec.max_len);
                free >= excess
            });
            let Some(d) = host else {
                return Err(Error::InvalidArgument("injections do not fit in the documents".into()));
            };
            let (doc, block) = (&mut docs[d], &mut blocks[d]);
            let mut excess = (doc.len() + inj.pattern.len()).saturating_sub(spec.max_len);
            let mut k = doc.len();
            while excess > 0 {
                k -= 1;
                if block[k].is_none() {
                    doc.remove(k);
                    block.remove(k);
                    excess -= 1;
                }
            }
            let cuts: Vec<usize> = (0..=doc.len())
                .filter(|&at| at == 0 || at == doc.len() || block[at].is_none() || block[at - 1] != block[at])
                .collect();
            let at = cuts[rng.gen_range(0..cuts.len())];
            doc.splice(at..at, inj.pattern.iter().copied());
            block.splice(at..at, std::iter::repeat(Some(next_block)).take(inj.pattern.len()));
            next_block += 1;
        }
    }
    Ok(())
}

/// Overlap-counting number of occurrences of `pattern` as a contiguous run inside
/// any document.
pub fn count_occurrences(corpus: &Corpus, pattern: &[TokenId]) -> usize {
    if pattern.is_empty() {
        return 0;
    }
    corpus.docs().iter().map(|d| d.windows(pattern.len()).filter(|w| *w == pattern).count()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec { documents: 60, seed, ..Default::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        let c = generate_synthetic(&small(4)).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_ne!(a.corpus.docs(), c.corpus.docs());
    }

    #[test]
    fn injections_are_exact() {
        let mut spec = small(1);
        spec.injections = vec![
            Injection { pattern: vec![240], count: 1 },
            Injection { pattern: vec![5, 241, 7], count: 2 },
            Injection { pattern: vec![242, 243], count: 50 },
        ];
        let g = generate_synthetic(&spec).unwrap();
        assert_eq!(count_occurrences(&g.corpus, &[240]), 1);
        assert_eq!(count_occurrences(&g.corpus, &[5, 241, 7]), 2);
        assert_eq!(count_occurrences(&g.corpus, &[242, 243]), 50);
        assert!(g.corpus.docs().iter().all(|d| d.len() <= spec.max_len));
    }

    #[test]
    fn categories_follow_target_class() {
        let g = generate_synthetic(&small(2)).unwrap();
        for s in g.corpus.samples() {
            assert_eq!(g.corpus.category(s.id).unwrap(), g.token_classes[s.target as usize]);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut spec = small(1);
        spec.injections = vec![Injection { pattern: vec![240; 40], count: 1 }];
        assert!(generate_synthetic(&spec).is_err());
        spec.injections = vec![Injection { pattern: vec![3, 4], count: 1 }];
        assert!(generate_synthetic(&spec).is_err());
        spec.injections = vec![Injection { pattern: vec![240], count: 1 }, Injection { pattern: vec![240, 1], count: 1 }];
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = small(9);
        spec.injections = vec![Injection { pattern: vec![250], count: 2 }];
        assert_eq!(SyntheticSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }
}

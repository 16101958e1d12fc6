//! Seeded Markov-chain corpora with controllable inter-domain redundancy.
//!
//! Token `0` is padding; content tokens are `1..vocab_size`. Each domain owns a
//! transition matrix drawn from its `transition_seed`:
//!
//! ```text
//! P(next = v | ctx) ∝ exp(concentration · (g[ctx, v] + preference · u[v]))
//! ```
//!
//! with `g` and `u` standard normal. `u` gives every domain its own favoured
//! tokens, `concentration` sharpens rows. A blended domain mixes probabilities,
//! `P = λ · P_partner + (1 − λ) · P_own`, so `λ = 1` reproduces the partner.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::PaddedBatch;
use crate::scheduler::SamplingWeights;

pub const PAD_ID: u32 = 0;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Attempts per sequence before giving up on drawing one not already used.
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blend {
    /// Partner domain name.
    pub with: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default = "default_order")]
    pub markov_order: u8,
    pub transition_seed: u64,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_preference")]
    pub preference: f64,
    #[serde(default)]
    pub blend: Option<Blend>,
    #[serde(default = "default_lengths")]
    pub sequence_length_range: [usize; 2],
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
}

fn default_order() -> u8 {
    1
}
fn default_concentration() -> f64 {
    2.0
}
fn default_preference() -> f64 {
    1.0
}
fn default_lengths() -> [usize; 2] {
    [16, 64]
}
fn default_train_size() -> usize {
    4096
}
fn default_probe_size() -> usize {
    512
}

impl DomainSpec {
    pub fn new(name: &str, transition_seed: u64) -> Self {
        Self {
            name: name.to_string(),
            markov_order: default_order(),
            transition_seed,
            concentration: default_concentration(),
            preference: default_preference(),
            blend: None,
            sequence_length_range: default_lengths(),
            train_size: default_train_size(),
            probe_size: default_probe_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.name;
        if !matches!(self.markov_order, 1 | 2) {
            return Err(Error::config(format!("{name}: markov_order must be 1 or 2")));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::config(format!("{name}: concentration must be > 0")));
        }
        if !self.preference.is_finite() {
            return Err(Error::config(format!("{name}: preference must be finite")));
        }
        if let Some(b) = &self.blend {
            if !(0.0..=1.0).contains(&b.lambda) {
                return Err(Error::config(format!("{name}: blend lambda must be in [0, 1]")));
            }
        }
        let [lo, hi] = self.sequence_length_range;
        if lo < 2 || lo > hi {
            return Err(Error::config(format!(
                "{name}: sequence_length_range must satisfy 2 <= min <= max"
            )));
        }
        if self.train_size == 0 || self.probe_size == 0 {
            return Err(Error::config(format!("{name}: split sizes must be >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub vocab_size: usize,
    /// Root of the per-domain sequence substreams.
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Default for Manifest {
    /// Four domains: `A`, `B` blended into `A` at λ = 0.9, and independent `C`, `D`.
    fn default() -> Self {
        let a = DomainSpec::new("A", 11);
        let mut b = DomainSpec::new("B", 22);
        b.blend = Some(Blend {
            with: "A".into(),
            lambda: 0.9,
        });
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            vocab_size: 64,
            seed: 0,
            domains: vec![a, b, DomainSpec::new("C", 33), DomainSpec::new("D", 44)],
        }
    }
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size must be >= 3"));
        }
        if self.domains.is_empty() {
            return Err(Error::config("manifest has no domains"));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            d.validate()?;
            if !seen.insert(d.name.as_str()) {
                return Err(Error::config(format!("duplicate domain name `{}`", d.name)));
            }
        }
        for d in &self.domains {
            if let Some(b) = &d.blend {
                if !seen.contains(b.with.as_str()) {
                    return Err(Error::config(format!(
                        "{}: blend references unknown domain `{}`",
                        d.name, b.with
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Dense transition table over content states `0..vocab_size-1` (token = state + 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub order: u8,
    pub num_states: usize,
    pub start: Vec<f64>,
    /// One row per context: `num_states` rows for order 1, `num_states²` for order 2
    /// (context `(a, b)` at row `a · num_states + b`).
    pub rows: Vec<Vec<f64>>,
}

impl MarkovChain {
    fn own(spec: &DomainSpec, vocab_size: usize) -> Self {
        let s = vocab_size - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.transition_seed);
        let u: Vec<f64> = (0..s).map(|_| rng.sample(StandardNormal)).collect();
        let n_ctx = if spec.markov_order == 1 { s } else { s * s };
        let softmax = |logits: Vec<f64>| {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let rows = (0..n_ctx)
            .map(|_| {
                let logits = (0..s)
                    .map(|v| {
                        let g: f64 = rng.sample(StandardNormal);
                        spec.concentration * (g + spec.preference * u[v])
                    })
                    .collect();
                softmax(logits)
            })
            .collect();
        let start = softmax(u.iter().map(|x| spec.concentration * spec.preference * x).collect());
        Self {
            order: spec.markov_order,
            num_states: s,
            start,
            rows,
        }
    }

    /// Resolves a domain's chain, following blends.
    pub fn for_domain(domains: &[DomainSpec], name: &str, vocab_size: usize) -> Result<Self> {
        Self::resolve(domains, name, vocab_size, 0)
    }

    fn resolve(domains: &[DomainSpec], name: &str, vocab_size: usize, depth: usize) -> Result<Self> {
        if depth > domains.len() {
            return Err(Error::config(format!("blend cycle through `{name}`")));
        }
        let spec = domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::config(format!("blend references unknown domain `{name}`")))?;
        let own = Self::own(spec, vocab_size);
        let Some(blend) = &spec.blend else {
            return Ok(own);
        };
        let mut partner = Self::resolve(domains, &blend.with, vocab_size, depth + 1)?;
        if partner.order < own.order {
            partner = partner.lifted();
        } else if partner.order > own.order {
            return Err(Error::config(format!(
                "{name}: cannot blend an order-{} chain into an order-{} domain",
                partner.order, own.order
            )));
        }
        let lam = blend.lambda;
        let mix = |p: &[f64], o: &[f64]| -> Vec<f64> {
            p.iter().zip(o).map(|(p, o)| lam * p + (1.0 - lam) * o).collect()
        };
        Ok(Self {
            order: own.order,
            num_states: own.num_states,
            start: mix(&partner.start, &own.start),
            rows: partner
                .rows
                .iter()
                .zip(&own.rows)
                .map(|(p, o)| mix(p, o))
                .collect(),
        })
    }

    /// The same process expressed as an order-2 chain.
    pub fn lifted(&self) -> Self {
        if self.order == 2 {
            return self.clone();
        }
        let s = self.num_states;
        let rows = (0..s * s).map(|ctx| self.rows[ctx % s].clone()).collect();
        Self {
            order: 2,
            num_states: s,
            start: self.start.clone(),
            rows,
        }
    }

    fn context(&self, prev2: usize, prev1: usize) -> usize {
        if self.order == 1 {
            prev1
        } else {
            prev2 * self.num_states + prev1
        }
    }

    /// Row index used for the transition out of position `t` of `states`.
    pub fn context_at(&self, states: &[usize], t: usize) -> usize {
        let prev2 = if t == 0 { states[0] } else { states[t - 1] };
        self.context(prev2, states[t])
    }
}

struct ChainSampler {
    start: WeightedIndex<f64>,
    rows: Vec<WeightedIndex<f64>>,
}

impl ChainSampler {
    fn new(chain: &MarkovChain) -> Result<Self> {
        let wi = |w: &[f64]| {
            WeightedIndex::new(w.iter().copied())
                .map_err(|e| Error::data(format!("invalid transition row: {e}")))
        };
        Ok(Self {
            start: wi(&chain.start)?,
            rows: chain.rows.iter().map(|r| wi(r)).collect::<Result<_>>()?,
        })
    }

    fn sequence<R: Rng + ?Sized>(&self, chain: &MarkovChain, len: usize, rng: &mut R) -> Vec<u32> {
        let mut states = Vec::with_capacity(len);
        states.push(self.start.sample(rng));
        while states.len() < len {
            let t = states.len() - 1;
            let ctx = chain.context_at(&states, t);
            states.push(self.rows[ctx].sample(rng));
        }
        states.into_iter().map(|s| s as u32 + 1).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub domain: String,
    pub split: Split,
    pub sequences: Vec<Vec<u32>>,
}

impl DomainCorpus {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Samples a domain's train and probe splits. The splits come from two
/// independent substreams of `rng`, and a probe sequence that already occurs in
/// train is redrawn so the splits never share a sequence.
pub fn generate_corpus<R: RngCore + ?Sized>(
    spec: &DomainSpec,
    domains: &[DomainSpec],
    vocab_size: usize,
    rng: &mut R,
) -> Result<(DomainCorpus, DomainCorpus)> {
    spec.validate()?;
    let chain = MarkovChain::for_domain(domains, &spec.name, vocab_size)?;
    let sampler = ChainSampler::new(&chain)?;
    let [lo, hi] = spec.sequence_length_range;
    let mut train_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut probe_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let train: Vec<Vec<u32>> = (0..spec.train_size)
        .map(|_| {
            let len = train_rng.random_range(lo..=hi);
            sampler.sequence(&chain, len, &mut train_rng)
        })
        .collect();
    let seen: HashSet<&[u32]> = train.iter().map(Vec::as_slice).collect();
    let mut probe_seen: HashSet<Vec<u32>> = HashSet::new();
    let mut probe = Vec::with_capacity(spec.probe_size);
    for _ in 0..spec.probe_size {
        let mut tries = 0;
        loop {
            let len = probe_rng.random_range(lo..=hi);
            let seq = sampler.sequence(&chain, len, &mut probe_rng);
            if !seen.contains(seq.as_slice()) && !probe_seen.contains(&seq) {
                probe_seen.insert(seq.clone());
                probe.push(seq);
                break;
            }
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::data(format!(
                    "{}: could not draw a probe sequence disjoint from train",
                    spec.name
                )));
            }
        }
    }
    Ok((
        DomainCorpus {
            domain: spec.name.clone(),
            split: Split::Train,
            sequences: train,
        },
        DomainCorpus {
            domain: spec.name.clone(),
            split: Split::Probe,
            sequences: probe,
        },
    ))
}

/// All domains of a manifest, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSet {
    pub vocab_size: usize,
    pub train: Vec<DomainCorpus>,
    pub probe: Vec<DomainCorpus>,
}

impl CorpusSet {
    pub fn names(&self) -> Vec<String> {
        self.train.iter().map(|c| c.domain.clone()).collect()
    }

    pub fn num_domains(&self) -> usize {
        self.train.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.train.iter().map(|c| c.sequences.len()).collect()
    }
}

/// Generates every domain in parallel; domain `i` uses substream `i` of the
/// manifest seed, so output does not depend on thread count.
pub fn generate_all(manifest: &Manifest) -> Result<CorpusSet> {
    manifest.validate()?;
    let pairs: Vec<(DomainCorpus, DomainCorpus)> = manifest
        .domains
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
            rng.set_stream(i as u64);
            generate_corpus(spec, &manifest.domains, manifest.vocab_size, &mut rng)
        })
        .collect::<Result<_>>()?;
    let (train, probe) = pairs.into_iter().unzip();
    Ok(CorpusSet {
        vocab_size: manifest.vocab_size,
        train,
        probe,
    })
}

/// A padded batch with the source dataset of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub batch: PaddedBatch,
    pub labels: Vec<usize>,
}

impl SampledBatch {
    pub fn counts(&self, num_datasets: usize) -> Vec<usize> {
        let mut c = vec![0; num_datasets];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Draws each row's dataset from `weights`, then a sequence uniformly with
/// replacement from that dataset.
pub fn sample_batch<R: Rng + ?Sized>(
    weights: &SamplingWeights,
    corpora: &[DomainCorpus],
    batch_size: usize,
    rng: &mut R,
) -> Result<SampledBatch> {
    if weights.len() != corpora.len() {
        return Err(Error::config("one weight per dataset required"));
    }
    if let Some(c) = corpora.iter().find(|c| c.sequences.is_empty()) {
        return Err(Error::data(format!("dataset `{}` has no sequences", c.domain)));
    }
    let pick = WeightedIndex::new(weights.w.iter().copied())
        .map_err(|e| Error::config(format!("invalid sampling weights: {e}")))?;
    let mut labels = Vec::with_capacity(batch_size);
    let mut seqs: Vec<&[u32]> = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let d = pick.sample(rng);
        let pool = &corpora[d].sequences;
        seqs.push(&pool[rng.random_range(0..pool.len())]);
        labels.push(d);
    }
    Ok(SampledBatch {
        batch: PaddedBatch::from_sequences(&seqs, PAD_ID)?,
        labels,
    })
}

/// Splits a corpus into padded batches of at most `batch_size` rows, in order.
pub fn fixed_batches(corpus: &DomainCorpus, batch_size: usize) -> Result<Vec<PaddedBatch>> {
    corpus
        .sequences
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            PaddedBatch::from_sequences(&seqs, PAD_ID)
        })
        .collect()
}

/// Unit-sum concatenation of unigram counts and (optionally hashed) bigram counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEmbedding {
    pub vocab_size: usize,
    pub hash_width: Option<usize>,
    pub vector: Vec<f64>,
}

impl DatasetEmbedding {
    pub fn unigram(&self) -> &[f64] {
        &self.vector[..self.vocab_size]
    }
}

fn bigram_slot(a: u32, b: u32, vocab_size: usize, hash_width: Option<usize>) -> usize {
    let idx = a as usize * vocab_size + b as usize;
    match hash_width {
        None => idx,
        Some(f) => {
            // splitmix64 finalizer
            let mut z = (idx as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            (z % f as u64) as usize
        }
    }
}

pub fn dataset_embedding(
    corpus: &DomainCorpus,
    vocab_size: usize,
    hash_width: Option<usize>,
) -> Result<DatasetEmbedding> {
    if corpus.token_count() == 0 {
        return Err(Error::data(format!("dataset `{}` is empty", corpus.domain)));
    }
    if hash_width == Some(0) {
        return Err(Error::config("hash_width must be >= 1"));
    }
    let width = hash_width.unwrap_or(vocab_size * vocab_size);
    let mut v = vec![0.0; vocab_size + width];
    for seq in &corpus.sequences {
        for &t in seq {
            if t as usize >= vocab_size {
                return Err(Error::data(format!("token {t} outside vocabulary")));
            }
            v[t as usize] += 1.0;
        }
        for pair in seq.windows(2) {
            v[vocab_size + bigram_slot(pair[0], pair[1], vocab_size, hash_width)] += 1.0;
        }
    }
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    Ok(DatasetEmbedding {
        vocab_size,
        hash_width,
        vector: v,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    domain: String,
    split: Split,
    tokens: Vec<u32>,
}

/// Writes one `{domain, split, tokens}` record per line, train before probe.
pub fn write_corpus_jsonl(path: &Path, set: &CorpusSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for corpus in set.train.iter().chain(&set.probe) {
        for seq in &corpus.sequences {
            let rec = CorpusRecord {
                domain: corpus.domain.clone(),
                split: corpus.split,
                tokens: seq.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads records back, grouping by domain in order of first appearance.
pub fn read_corpus_jsonl(path: &Path, vocab_size: usize) -> Result<CorpusSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = Vec::new();
    let mut train: Vec<DomainCorpus> = Vec::new();
    let mut probe: Vec<DomainCorpus> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fault = |msg: String| Error::Trace {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| fault(e.to_string()))?;
        if rec.tokens.iter().any(|&t| t == PAD_ID || t as usize >= vocab_size) {
            return Err(fault("token outside 1..vocab_size".into()));
        }
        let idx = match names.iter().position(|n| *n == rec.domain) {
            Some(idx) => idx,
            None => {
                names.push(rec.domain.clone());
                for (v, split) in [(&mut train, Split::Train), (&mut probe, Split::Probe)] {
                    v.push(DomainCorpus {
                        domain: rec.domain.clone(),
                        split,
                        sequences: Vec::new(),
                    });
                }
                names.len() - 1
            }
        };
        match rec.split {
            Split::Train => train[idx].sequences.push(rec.tokens),
            Split::Probe => probe[idx].sequences.push(rec.tokens),
        }
    }
    if names.is_empty() {
        return Err(Error::data(format!("{}: no corpus records", path.display())));
    }
    Ok(CorpusSet {
        vocab_size,
        train,
        probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_manifest() -> Manifest {
        let mut m = Manifest::default();
        for d in &mut m.domains {
            d.train_size = 200;
            d.probe_size = 50;
        }
        m
    }

    #[test]
    fn rows_are_distributions() {
        let m = Manifest::default();
        for d in &m.domains {
            let c = MarkovChain::for_domain(&m.domains, &d.name, m.vocab_size).unwrap();
            assert_eq!(c.rows.len(), 63);
            for r in c.rows.iter().chain(std::iter::once(&c.start)) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(r.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn full_blend_equals_partner() {
        let mut m = Manifest::default();
        m.domains[1].blend.as_mut().unwrap().lambda = 1.0;
        let a = MarkovChain::for_domain(&m.domains, "A", 64).unwrap();
        let b = MarkovChain::for_domain(&m.domains, "B", 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_blend_partner_faults() {
        let mut m = Manifest::default();
        m.domains[1].blend.as_mut().unwrap().with = "Z".into();
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = m.domains[1].clone();
        assert!(generate_corpus(&spec, &m.domains, 64, &mut rng).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = small_manifest();
        assert_eq!(generate_all(&m).unwrap(), generate_all(&m).unwrap());
    }

    #[test]
    fn sequences_respect_spec() {
        let set = generate_all(&small_manifest()).unwrap();
        for c in set.train.iter().chain(&set.probe) {
            for s in &c.sequences {
                assert!((16..=64).contains(&s.len()));
                assert!(s.iter().all(|&t| t != PAD_ID && t < 64));
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let set = generate_all(&small_manifest()).unwrap();
        for (tr, pr) in set.train.iter().zip(&set.probe) {
            let train: HashSet<&Vec<u32>> = tr.sequences.iter().collect();
            assert!(pr.sequences.iter().all(|s| !train.contains(s)));
        }
    }

    #[test]
    fn tiny_alphabet_forces_redraws_but_stays_disjoint() {
        let mut spec = DomainSpec::new("T", 5);
        spec.sequence_length_range = [2, 2];
        spec.train_size = 3;
        spec.probe_size = 3;
        let domains = vec![spec.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (tr, pr) = generate_corpus(&spec, &domains, 4, &mut rng).unwrap();
        for s in &pr.sequences {
            assert!(!tr.sequences.contains(s));
        }
    }

    #[test]
    fn empirical_bigrams_match_chain() {
        let m = Manifest::default();
        for d in &m.domains {
            let chain = MarkovChain::for_domain(&m.domains, &d.name, 64).unwrap();
            let mut spec = d.clone();
            spec.train_size = 1250;
            spec.probe_size = 1;
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let (train, _) = generate_corpus(&spec, &m.domains, 64, &mut rng).unwrap();
            let mut tokens = 0usize;
            let s = chain.num_states;
            let mut joint = vec![0.0; s * s];
            for seq in &train.sequences {
                tokens += seq.len();
                for p in seq.windows(2) {
                    joint[(p[0] as usize - 1) * s + p[1] as usize - 1] += 1.0;
                }
            }
            assert!(tokens >= 50_000, "{tokens}");
            let n: f64 = joint.iter().sum();
            let mut tv = 0.0;
            for a in 0..s {
                let row_n: f64 = joint[a * s..(a + 1) * s].iter().sum();
                for b in 0..s {
                    let expected = row_n * chain.rows[a][b];
                    tv += (joint[a * s + b] - expected).abs();
                }
            }
            tv /= 2.0 * n;
            assert!(tv < 0.05, "{}: tv {tv}", d.name);
        }
    }

    #[test]
    fn order_two_lift_samples_same_process() {
        let mut spec = DomainSpec::new("Q", 3);
        spec.markov_order = 2;
        let base = DomainSpec::new("P", 4);
        spec.blend = Some(Blend {
            with: "P".into(),
            lambda: 1.0,
        });
        let domains = vec![base, spec];
        let q = MarkovChain::for_domain(&domains, "Q", 16).unwrap();
        let p = MarkovChain::for_domain(&domains, "P", 16).unwrap();
        assert_eq!(q, p.lifted());
        assert_eq!(q.rows.len(), 15 * 15);
    }

    fn corpus(seqs: Vec<Vec<u32>>) -> DomainCorpus {
        DomainCorpus {
            domain: "x".into(),
            split: Split::Train,
            sequences: seqs,
        }
    }

    #[test]
    fn one_hot_weights_select_one_dataset() {
        let corpora = vec![corpus(vec![vec![1, 2]]), corpus(vec![vec![3, 4, 5]])];
        let w = SamplingWeights {
            w: vec![0.0, 1.0],
            round: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&w, &corpora, 16, &mut rng).unwrap();
        assert!(b.labels.iter().all(|&l| l == 1));
        assert_eq!(b.batch.width, 3);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let corpora: Vec<DomainCorpus> = (0..4).map(|i| corpus(vec![vec![i + 1]])).collect();
        let w = SamplingWeights::uniform(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let b = sample_batch(&w, &corpora, 100, &mut rng).unwrap();
            for l in b.labels {
                counts[l] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn batch_stream_is_seeded() {
        let set = generate_all(&small_manifest()).unwrap();
        let w = SamplingWeights::uniform(4);
        let stream = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            (0..5)
                .map(|_| sample_batch(&w, &set.train, 8, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(stream(), stream());
    }

    #[test]
    fn repeated_token_embedding() {
        let c = corpus(vec![vec![7; 10]]);
        let e = dataset_embedding(&c, 16, None).unwrap();
        let uni = e.unigram();
        assert_eq!(uni.iter().filter(|&&x| x > 0.0).count(), 1);
        assert!(uni[7] > 0.0);
        assert!((e.vector.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.vector[16 + 7 * 16 + 7], 9.0 / 19.0);
        assert!(dataset_embedding(&corpus(vec![]), 16, None).is_err());
    }

    #[test]
    fn embedding_distance_shrinks_with_blend() {
        let dist = |lambda: f64| {
            let mut m = small_manifest();
            m.domains[1].blend.as_mut().unwrap().lambda = lambda;
            let set = generate_all(&m).unwrap();
            let a = dataset_embedding(&set.probe[0], 64, Some(256)).unwrap();
            let b = dataset_embedding(&set.probe[1], 64, Some(256)).unwrap();
            a.vector
                .iter()
                .zip(&b.vector)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (d0, d5, d1) = (dist(0.0), dist(0.5), dist(1.0));
        assert!(d0 > d5 && d5 > d1, "{d0} {d5} {d1}");
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let set = generate_all(&small_manifest()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus_jsonl(&path, &set).unwrap();
        assert_eq!(read_corpus_jsonl(&path, 64).unwrap(), set);
        let mpath = dir.path().join("manifest.json");
        small_manifest().save(&mpath).unwrap();
        assert_eq!(Manifest::load(&mpath).unwrap(), small_manifest());
    }

    #[test]
    fn malformed_corpus_line_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"domain\":\"a\",\"split\":\"train\",\"tokens\":[1,2]}\n{\"domain\":\"a\"\n",
        )
        .unwrap();
        match read_corpus_jsonl(&path, 8) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn unigram_block_is_permutation_equivariant(
            seqs in prop::collection::vec(prop::collection::vec(1u32..12, 2..20), 1..8),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let v = 12usize;
            let mut perm: Vec<u32> = (1..v as u32).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let relabel = |t: u32| perm[t as usize - 1];
            let base = dataset_embedding(&corpus(seqs.clone()), v, None).unwrap();
            let moved: Vec<Vec<u32>> = seqs.iter().map(|s| s.iter().map(|&t| relabel(t)).collect()).collect();
            let e = dataset_embedding(&corpus(moved), v, None).unwrap();
            for t in 1..v as u32 {
                prop_assert_eq!(base.unigram()[t as usize], e.unigram()[relabel(t) as usize]);
            }
            prop_assert!((e.vector.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(e.vector.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn sampling_frequencies_converge(raw in prop::collection::vec(0.05f64..1.0, 2..6), seed in any::<u64>()) {
            let sum: f64 = raw.iter().sum();
            let w = SamplingWeights { w: raw.iter().map(|x| x / sum).collect(), round: 0 };
            let corpora: Vec<DomainCorpus> = (0..raw.len()).map(|i| corpus(vec![vec![i as u32 + 1]])).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut counts = vec![0usize; raw.len()];
            for _ in 0..200 {
                for l in sample_batch(&w, &corpora, 100, &mut rng).unwrap().labels {
                    counts[l] += 1;
                }
            }
            for (c, p) in counts.iter().zip(&w.w) {
                // 5 standard deviations at 20k draws
                let sd = (p * (1.0 - p) / 20_000.0).sqrt();
                prop_assert!((*c as f64 / 20_000.0 - p).abs() < 5.0 * sd + 1e-9);
            }
        }
    }
}

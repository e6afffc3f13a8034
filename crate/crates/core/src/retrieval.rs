//! Per-class demonstration selection.

use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{dot, norm};
use crate::tokenizer::split_words;

/// Maps text to a fixed-dimension vector. Implementations must be pure.
pub trait SentenceEncoder: Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Vec<f64>;

    /// Encodes the raw (template-free) text of an example.
    fn encode_example(&self, example: &LabeledExample) -> Vec<f64> {
        self.encode(&example.raw_text())
    }
}

/// Signed feature-hashing bag of words, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBowEncoder {
    dim: usize,
}

impl HashedBowEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }
}

impl Default for HashedBowEncoder {
    fn default() -> Self {
        Self::new(256)
    }
}

/// FNV-1a, 64-bit.
struct Fnv(u64);

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = Fnv(0xcbf2_9ce4_8422_2325);
    h.write(s.as_bytes());
    h.finish()
}

impl SentenceEncoder for HashedBowEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in split_words(text) {
            let h = fnv1a(&w);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

/// Precomputed embeddings keyed by example id, with an encoder fallback.
pub struct CachedEncoder<E> {
    cache: HashMap<String, Vec<f64>>,
    fallback: E,
}

impl<E: SentenceEncoder> CachedEncoder<E> {
    pub fn new(cache: HashMap<String, Vec<f64>>, fallback: E) -> Result<Self> {
        if let Some((id, v)) = cache.iter().find(|(_, v)| v.len() != fallback.dim()) {
            return Err(Error::Shape(format!(
                "cached embedding for {id} has dimension {}, expected {}",
                v.len(),
                fallback.dim()
            )));
        }
        Ok(Self { cache, fallback })
    }
}

impl<E: SentenceEncoder> SentenceEncoder for CachedEncoder<E> {
    fn dim(&self) -> usize {
        self.fallback.dim()
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        self.fallback.encode(text)
    }

    fn encode_example(&self, example: &LabeledExample) -> Vec<f64> {
        match self.cache.get(&example.id) {
            Some(v) => v.clone(),
            None => self.fallback.encode(&example.raw_text()),
        }
    }
}

/// Reads `id<TAB>comma-separated floats` lines.
pub fn load_embedding_cache(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, floats) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `id<TAB>floats`".into()))?;
        let v = floats
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        out.insert(id.to_string(), v);
    }
    Ok(out)
}

pub fn save_embedding_cache(path: &Path, entries: &[(String, Vec<f64>)]) -> Result<()> {
    let mut text = String::new();
    for (id, v) in entries {
        let floats: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        text.push_str(&format!("{id}\t{}\n", floats.join(",")));
    }
    crate::io::write_atomic(path, text.as_bytes())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// One answered example per class, ordered by class index.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    demos: Vec<LabeledExample>,
}

impl DemonstrationSet {
    pub fn new(demos: Vec<LabeledExample>) -> Result<Self> {
        if let Some((k, d)) = demos.iter().enumerate().find(|(k, d)| d.label != *k) {
            return Err(Error::Config(format!(
                "demonstration {k} ({}) has label {}, expected {k}",
                d.id, d.label
            )));
        }
        Ok(Self { demos })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Retrieved,
    Random,
}

/// A demonstration pool with its embeddings computed once.
pub struct EncodedPool<'a> {
    pool: &'a [LabeledExample],
    vectors: Vec<Vec<f64>>,
    num_classes: usize,
}

impl<'a> EncodedPool<'a> {
    pub fn new(
        pool: &'a [LabeledExample],
        num_classes: usize,
        encoder: &dyn SentenceEncoder,
    ) -> Self {
        let vectors = parallel::map(pool, |e| encoder.encode_example(e));
        Self {
            pool,
            vectors,
            num_classes,
        }
    }

    fn candidates(&self, class: usize, query_id: &str) -> impl Iterator<Item = usize> + '_ {
        let query_id = query_id.to_string();
        self.pool
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.label == class && e.id != query_id)
            .map(|(i, _)| i)
    }

    /// Most similar pool example per class, ties broken by smallest id.
    pub fn retrieve(
        &self,
        query: &LabeledExample,
        encoder: &dyn SentenceEncoder,
    ) -> Result<DemonstrationSet> {
        let q = encoder.encode_example(query);
        let mut demos = Vec::with_capacity(self.num_classes);
        for class in 0..self.num_classes {
            let mut best: Option<(f64, usize)> = None;
            for i in self.candidates(class, &query.id) {
                let sim = cosine_similarity(&q, &self.vectors[i])?;
                let better = match best {
                    None => true,
                    Some((s, j)) => sim > s || (sim == s && self.pool[i].id < self.pool[j].id),
                };
                if better {
                    best = Some((sim, i));
                }
            }
            let (_, i) = best.ok_or_else(|| {
                Error::Capacity(format!(
                    "no demonstration candidate of class {class} for {}",
                    query.id
                ))
            })?;
            demos.push(self.pool[i].clone());
        }
        DemonstrationSet::new(demos)
    }

    /// Uniform seeded choice per class. The query id is mixed into the seed
    /// so different queries draw independently.
    pub fn random(&self, query: &LabeledExample, seed: u64) -> Result<DemonstrationSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&query.id));
        let mut demos = Vec::with_capacity(self.num_classes);
        for class in 0..self.num_classes {
            let cands: Vec<usize> = self.candidates(class, &query.id).collect();
            let &i = cands.choose(&mut rng).ok_or_else(|| {
                Error::Capacity(format!(
                    "no demonstration candidate of class {class} for {}",
                    query.id
                ))
            })?;
            demos.push(self.pool[i].clone());
        }
        DemonstrationSet::new(demos)
    }

    pub fn select(
        &self,
        query: &LabeledExample,
        selector: Selector,
        encoder: &dyn SentenceEncoder,
        seed: u64,
    ) -> Result<DemonstrationSet> {
        match selector {
            Selector::Retrieved => self.retrieve(query, encoder),
            Selector::Random => self.random(query, seed),
        }
    }

    /// Selects demonstrations for many queries in parallel, preserving order.
    pub fn select_all(
        &self,
        queries: &[LabeledExample],
        selector: Selector,
        encoder: &dyn SentenceEncoder,
        seed: u64,
    ) -> Result<Vec<DemonstrationSet>> {
        parallel::map(queries, |q| self.select(q, selector, encoder, seed))
            .into_iter()
            .collect()
    }
}

pub fn retrieve_demonstrations(
    query: &LabeledExample,
    pool: &[LabeledExample],
    num_classes: usize,
    encoder: &dyn SentenceEncoder,
) -> Result<DemonstrationSet> {
    EncodedPool::new(pool, num_classes, encoder).retrieve(query, encoder)
}

pub fn random_demonstrations(
    query: &LabeledExample,
    pool: &[LabeledExample],
    num_classes: usize,
    seed: u64,
) -> Result<DemonstrationSet> {
    EncodedPool {
        pool,
        vectors: Vec::new(),
        num_classes,
    }
    .random(query, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Encoder backed by a fixed table of vectors keyed by text.
    struct Table(HashMap<String, Vec<f64>>, f64);

    impl SentenceEncoder for Table {
        fn dim(&self) -> usize {
            2
        }
        fn encode(&self, text: &str) -> Vec<f64> {
            self.0[text].iter().map(|x| x * self.1).collect()
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn picks_most_similar_candidate() {
        let table: HashMap<String, Vec<f64>> = [
            ("q", vec![1.0, 0.0]),
            ("near", vec![1.0, 0.01]),
            ("far", vec![0.0, 1.0]),
            ("other", vec![-1.0, 0.0]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let enc = Table(table, 1.0);
        let pool = vec![
            LabeledExample::new("a", "far", 1),
            LabeledExample::new("b", "near", 1),
            LabeledExample::new("c", "other", 0),
        ];
        let query = LabeledExample::new("q", "q", 0);
        let demos = retrieve_demonstrations(&query, &pool, 2, &enc).unwrap();
        assert_eq!(demos.examples()[0].id, "c");
        assert_eq!(demos.examples()[1].id, "b");
    }

    #[test]
    fn never_returns_the_query_and_reports_empty_class() {
        let enc = HashedBowEncoder::default();
        let pool = vec![
            LabeledExample::new("a", "good film", 0),
            LabeledExample::new("b", "bad film", 1),
        ];
        let err = retrieve_demonstrations(&pool[0], &pool, 2, &enc).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        let q = LabeledExample::new("z", "good film", 0);
        let demos = retrieve_demonstrations(&q, &pool, 2, &enc).unwrap();
        assert_eq!(demos.examples()[0].id, "a");
    }

    #[test]
    fn identical_texts_tie_break_on_smallest_id() {
        let enc = HashedBowEncoder::default();
        let pool = vec![
            LabeledExample::new("m", "same words", 0),
            LabeledExample::new("k", "same words", 0),
            LabeledExample::new("x", "other", 1),
        ];
        let q = LabeledExample::new("q", "same words", 0);
        let demos = retrieve_demonstrations(&q, &pool, 2, &enc).unwrap();
        assert_eq!(demos.examples()[0].id, "k");
    }

    #[test]
    fn random_selection_is_seeded() {
        let pool: Vec<_> = (0..20)
            .map(|i| LabeledExample::new(format!("p{i:02}"), format!("w{i}"), i % 2))
            .collect();
        let q = LabeledExample::new("q", "w", 0);
        let a = random_demonstrations(&q, &pool, 2, 5).unwrap();
        let b = random_demonstrations(&q, &pool, 2, 5).unwrap();
        assert_eq!(a, b);
        let single = vec![
            LabeledExample::new("only0", "x", 0),
            LabeledExample::new("only1", "y", 1),
        ];
        let forced = random_demonstrations(&q, &single, 2, 9).unwrap();
        assert_eq!(forced.examples()[0].id, "only0");
    }

    #[test]
    fn random_selection_frequencies_are_uniform() {
        // chi-square over 10 candidates, 10_000 draws with distinct seeds
        let pool: Vec<_> = (0..10)
            .map(|i| LabeledExample::new(format!("p{i}"), format!("w{i}"), 0))
            .collect();
        let q = LabeledExample::new("q", "w", 0);
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            let d = random_demonstrations(&q, &pool, 1, seed).unwrap();
            let idx: usize = d.examples()[0].id[1..].parse().unwrap();
            counts[idx] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom: mean 9, sd sqrt(18); 3 sigma bound
        assert!(
            chi2 < 9.0 + 3.0 * 18f64.sqrt(),
            "chi2 = {chi2}, counts {counts:?}"
        );
    }

    #[test]
    fn embedding_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let entries = vec![
            ("a".to_string(), vec![0.1, -2.5]),
            ("b".to_string(), vec![3.0, 1e-9]),
        ];
        save_embedding_cache(&path, &entries).unwrap();
        let loaded = load_embedding_cache(&path).unwrap();
        assert_eq!(loaded["a"], entries[0].1);
        assert_eq!(loaded["b"], entries[1].1);
        let enc = CachedEncoder::new(loaded, Table(HashMap::new(), 1.0)).unwrap();
        assert_eq!(
            enc.encode_example(&LabeledExample::new("b", "zzz", 0)),
            vec![3.0, 1e-9]
        );
    }

    proptest! {
        #[test]
        fn retrieval_is_permutation_and_scale_invariant(
            vecs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..2), 4..30),
            q in (-5.0f64..5.0, -5.0f64..5.0),
            scale_exp in -4i32..5,
            rot in 0usize..30,
        ) {
            prop_assume!(q.0.abs() + q.1.abs() > 1e-3);
            let vecs: Vec<_> = vecs.into_iter().filter(|(x, y, _)| x.abs() + y.abs() > 1e-3).collect();
            prop_assume!((0..2).all(|c| vecs.iter().any(|v| v.2 == c)));
            let mut table = HashMap::new();
            table.insert("query".to_string(), vec![q.0, q.1]);
            let mut pool = Vec::new();
            for (i, (x, y, c)) in vecs.iter().enumerate() {
                table.insert(format!("t{i}"), vec![*x, *y]);
                pool.push(LabeledExample::new(format!("id{i:03}"), format!("t{i}"), *c));
            }
            let query = LabeledExample::new("q", "query", 0);
            let scale = 2f64.powi(scale_exp);
            let base = retrieve_demonstrations(&query, &pool, 2, &Table(table.clone(), 1.0)).unwrap();
            let scaled = retrieve_demonstrations(&query, &pool, 2, &Table(table.clone(), scale)).unwrap();
            let mut rotated = pool.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            let permuted = retrieve_demonstrations(&query, &rotated, 2, &Table(table, 1.0)).unwrap();
            let ids = |d: &DemonstrationSet| d.examples().iter().map(|e| e.id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&base), ids(&permuted));
            prop_assert_eq!(ids(&base), ids(&scaled));
        }
    }
}

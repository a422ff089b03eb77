//! Datasets, synthetic corpora and checkpoint files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::eval::ScoredPair;
use crate::rng::{self, Stream};
use crate::trainer::TrainData;
use crate::{Error, Result};

/// A training example for contrastive supervision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub anchor: String,
    pub positive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
}

impl TrainExample {
    pub fn new(anchor: impl Into<String>, positive: impl Into<String>) -> Self {
        Self {
            anchor: anchor.into(),
            positive: positive.into(),
            negative: None,
        }
    }

    pub fn with_negative(mut self, negative: impl Into<String>) -> Self {
        self.negative = Some(negative.into());
        self
    }
}

// ---------------------------------------------------------------------------
// JSON-lines

/// Reads one JSON object per non-blank line. Errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| Error::Input(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<ScoredPair>> {
    read_jsonl(path)
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<TrainExample>> {
    read_jsonl(path)
}

/// Loads training data, choosing the supervision kind from the first record:
/// `anchor`/`positive` records are contrastive, `text_a`/`text_b`/`score`
/// records are graded pairs.
pub fn load_train_data(path: impl AsRef<Path>) -> Result<TrainData> {
    let path = path.as_ref();
    let records: Vec<serde_json::Value> = read_jsonl(path)?;
    let scored = records.first().is_some_and(|r| r.get("text_a").is_some());
    let convert_err = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    // line numbers here count records; blank lines are rare in generated data
    if scored {
        let pairs = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| serde_json::from_value(r).map_err(|e| convert_err(i + 1, e)))
            .collect::<Result<Vec<ScoredPair>>>()?;
        Ok(TrainData::Scored(pairs))
    } else {
        let ex = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| serde_json::from_value(r).map_err(|e| convert_err(i + 1, e)))
            .collect::<Result<Vec<TrainExample>>>()?;
        Ok(TrainData::Positives(ex))
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Clustered random-token corpus: sentences of one cluster draw words from
/// that cluster's private vocabulary, so cluster membership is the meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub num_clusters: usize,
    pub vocab_per_cluster: usize,
    pub pairs_per_cluster: usize,
    /// Same-cluster eval pairs per cluster; as many cross-cluster pairs are added.
    pub eval_pairs_per_cluster: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a word is replaced by a shared noise word.
    pub noise_rate: f64,
    pub noise_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            vocab_per_cluster: 96,
            pairs_per_cluster: 96,
            eval_pairs_per_cluster: 32,
            min_len: 6,
            max_len: 10,
            noise_rate: 0.1,
            noise_vocab: 64,
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(Error::Config("need at least 2 clusters".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.vocab_per_cluster < 2 * self.max_len {
            return Err(Error::Config(format!(
                "vocab_per_cluster {} is too small: paraphrase pairs of up to {} words need at least {}",
                self.vocab_per_cluster,
                self.max_len,
                2 * self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        if self.noise_rate > 0.0 && self.noise_vocab == 0 {
            return Err(Error::Config("noise needs a non-empty noise vocabulary".into()));
        }
        if self.pairs_per_cluster == 0 {
            return Err(Error::Config("pairs_per_cluster must be positive".into()));
        }
        Ok(())
    }

    pub fn cluster_word(cluster: usize, index: usize) -> String {
        format!("c{cluster}w{index}")
    }

    pub fn noise_word(index: usize) -> String {
        format!("n{index}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<TrainExample>,
    pub eval: Vec<ScoredPair>,
}

struct CorpusSampler<'a, R> {
    spec: &'a SyntheticCorpusSpec,
    rng: R,
}

impl<R: Rng> CorpusSampler<'_, R> {
    /// Distinct in-cluster word indices.
    fn words(&mut self) -> Vec<usize> {
        let len = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        let mut pool: Vec<usize> = (0..self.spec.vocab_per_cluster).collect();
        pool.shuffle(&mut self.rng);
        pool.truncate(len);
        pool
    }

    fn render(&mut self, cluster: usize, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| {
                if self.spec.noise_rate > 0.0 && self.rng.random_bool(self.spec.noise_rate) {
                    SyntheticCorpusSpec::noise_word(self.rng.random_range(0..self.spec.noise_vocab))
                } else {
                    SyntheticCorpusSpec::cluster_word(cluster, w)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Two same-cluster sentences; the second keeps roughly half of the
    /// first one's words (always at least one) and redraws the rest.
    fn positive_pair(&mut self, cluster: usize) -> (String, String) {
        let anchor = self.words();
        let keep = self.rng.random_range(0..anchor.len());
        let mut partner = Vec::with_capacity(anchor.len());
        for (i, &w) in anchor.iter().enumerate() {
            if i == keep || self.rng.random_bool(0.5) {
                partner.push(w);
            } else {
                let fresh = loop {
                    let c = self.rng.random_range(0..self.spec.vocab_per_cluster);
                    if !anchor.contains(&c) && !partner.contains(&c) {
                        break c;
                    }
                };
                partner.push(fresh);
            }
        }
        (self.render(cluster, &anchor), self.render(cluster, &partner))
    }

    fn sentence(&mut self, cluster: usize) -> String {
        let w = self.words();
        self.render(cluster, &w)
    }
}

/// Deterministic corpus: `num_clusters * pairs_per_cluster` positive pairs for
/// training; eval pairs with gold 1.0 (same cluster) or 0.0 (different).
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut s = CorpusSampler {
        spec,
        rng: rng::stream(spec.seed, Stream::Corpus),
    };
    let mut train = Vec::with_capacity(spec.num_clusters * spec.pairs_per_cluster);
    for c in 0..spec.num_clusters {
        for _ in 0..spec.pairs_per_cluster {
            let (a, p) = s.positive_pair(c);
            train.push(TrainExample::new(a, p));
        }
    }
    train.shuffle(&mut s.rng);

    let mut eval = Vec::with_capacity(2 * spec.num_clusters * spec.eval_pairs_per_cluster);
    for c in 0..spec.num_clusters {
        for _ in 0..spec.eval_pairs_per_cluster {
            let (a, b) = s.positive_pair(c);
            eval.push(ScoredPair::new(a, b, 1.0));
            let other = (c + s.rng.random_range(1..spec.num_clusters)) % spec.num_clusters;
            let a = s.sentence(c);
            let b = s.sentence(other);
            eval.push(ScoredPair::new(a, b, 0.0));
        }
    }
    eval.shuffle(&mut s.rng);
    Ok(SyntheticCorpus { train, eval })
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"M2DSECKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Magic plus the little-endian `u64` header length.
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset from the start of the payload.
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advertised_dim: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn for_model(model: &EncoderModel) -> Self {
        let mut offset = 0u64;
        let tensors = model
            .parameters()
            .iter()
            .map(|p| {
                let entry = TensorEntry {
                    name: p.full_name(),
                    shape: p.tensor.shape().to_vec(),
                    byte_offset: offset,
                };
                offset += 8 * p.tensor.len() as u64;
                entry
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: *model.config(),
            advertised_dim: model.advertised_dim(),
            tensors,
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        self.tensors
            .iter()
            .map(|t| 8 * t.shape.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Serialized checkpoint: magic, header length, JSON header, raw
/// little-endian `f64` payload in canonical parameter order.
pub fn checkpoint_bytes(model: &EncoderModel) -> Vec<u8> {
    let header = CheckpointHeader::for_model(model);
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + header.payload_bytes() as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.parameters() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    read_checkpoint(&mut file, file_len)
}

/// Reads a checkpoint of `total_len` bytes, allocating no more than the
/// header declares.
pub fn read_checkpoint(reader: &mut impl Read, total_len: u64) -> Result<EncoderModel> {
    let bad = |m: String| Error::Checkpoint(m);
    if total_len < PREAMBLE as u64 {
        return Err(bad(format!("file of {total_len} bytes is too short")));
    }
    let mut preamble = [0u8; PREAMBLE];
    reader
        .read_exact(&mut preamble)
        .map_err(|e| bad(format!("reading preamble: {e}")))?;
    if &preamble[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(preamble[8..].try_into().unwrap());
    let remaining = total_len - PREAMBLE as u64;
    if header_len > remaining {
        return Err(bad(format!(
            "header declares {header_len} bytes but only {remaining} follow"
        )));
    }
    let mut json = vec![0u8; header_len as usize];
    reader
        .read_exact(&mut json)
        .map_err(|e| bad(format!("reading header: {e}")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    if let Some(d) = header.advertised_dim {
        if d == 0 || d > header.config.hidden_dim {
            return Err(bad(format!("advertised_dim {d} outside [1, hidden_dim]")));
        }
    }

    let mut model = EncoderModel::zeros(header.config);
    let expected = CheckpointHeader::for_model(&model);
    if expected.tensors.len() != header.tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, configuration needs {}",
            header.tensors.len(),
            expected.tensors.len()
        )));
    }
    for (want, got) in expected.tensors.iter().zip(&header.tensors) {
        if want != got {
            return Err(bad(format!(
                "manifest entry {} {:?} @ {} does not match expected {} {:?} @ {}",
                got.name, got.shape, got.byte_offset, want.name, want.shape, want.byte_offset
            )));
        }
    }
    let declared = expected.payload_bytes();
    let available = remaining - header_len;
    if available != declared {
        return Err(bad(format!(
            "payload is {available} bytes but the manifest declares {declared}"
        )));
    }
    let mut payload = vec![0u8; declared as usize];
    reader
        .read_exact(&mut payload)
        .map_err(|e| bad(format!("reading payload: {e}")))?;
    let mut words = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for tensor in model.parameters_mut() {
        let t = std::sync::Arc::make_mut(tensor);
        for v in t.data_mut() {
            *v = words.next().expect("payload length checked");
        }
    }
    model.set_advertised_dim(header.advertised_dim);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn corpus_is_deterministic() {
        let spec = SyntheticCorpusSpec {
            pairs_per_cluster: 5,
            eval_pairs_per_cluster: 3,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic_corpus(&spec).unwrap(),
            generate_synthetic_corpus(&spec).unwrap()
        );
        let other = SyntheticCorpusSpec { seed: 43, ..spec.clone() };
        assert_ne!(
            generate_synthetic_corpus(&spec).unwrap(),
            generate_synthetic_corpus(&other).unwrap()
        );
    }

    #[test]
    fn noiseless_positives_share_a_word() {
        let spec = SyntheticCorpusSpec {
            noise_rate: 0.0,
            pairs_per_cluster: 40,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(corpus.train.len(), 8 * 40);
        for ex in &corpus.train {
            let a: HashSet<&str> = ex.anchor.split(' ').collect();
            assert!(ex.positive.split(' ').any(|w| a.contains(w)), "{ex:?}");
            let cluster = |w: &str| w.split('w').next().unwrap().to_string();
            let ca: HashSet<String> = ex.anchor.split(' ').map(cluster).collect();
            let cp: HashSet<String> = ex.positive.split(' ').map(cluster).collect();
            assert_eq!(ca.len(), 1);
            assert_eq!(ca, cp);
        }
    }

    #[test]
    fn eval_gold_is_binary_and_balanced() {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        let ones = corpus.eval.iter().filter(|p| p.score == 1.0).count();
        let zeros = corpus.eval.iter().filter(|p| p.score == 0.0).count();
        assert_eq!(ones + zeros, corpus.eval.len());
        assert_eq!(ones, zeros);
    }

    #[test]
    fn corpus_spec_validation() {
        let small = SyntheticCorpusSpec {
            vocab_per_cluster: 4,
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&small).is_err());
        let one = SyntheticCorpusSpec {
            num_clusters: 1,
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&one).is_err());
        let noisy = SyntheticCorpusSpec {
            noise_rate: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&noisy).is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut short: &[u8] = b"M2DS";
        assert!(read_checkpoint(&mut short, 4).is_err());
        let mut wrong: &[u8] = &[0u8; 32];
        assert!(read_checkpoint(&mut wrong, 32).unwrap_err().to_string().contains("magic"));
        let mut huge = Vec::from(&CHECKPOINT_MAGIC[..]);
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        let len = huge.len() as u64;
        let err = read_checkpoint(&mut huge.as_slice(), len).unwrap_err();
        assert!(err.to_string().contains("header declares"), "{err}");
    }
}

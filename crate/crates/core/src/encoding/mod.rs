//! Semantic encoders, prototype fusion and inter-encoder disagreement.

mod descriptions;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian, gaussian_vec, keyed_rng};

pub use descriptions::load_descriptions;
pub use remote::{RemoteEncoder, DEFAULT_TIMEOUT, TOKEN_ENV, URL_ENV};

/// Weight of the encoder-specific component of each token direction.
/// Shared token directions make descriptions with overlapping vocabulary
/// land close together; the private component is what makes encoders
/// disagree.
pub const ENCODER_IDIOSYNCRASY: f64 = 0.35;

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "to", "of", "in", "on", "for", "with", "from", "by", "at", "as", "is", "are", "be",
    "into", "so", "while", "then", "too", "one", "few", "many",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Offensive,
    Defensive,
    Adversarial,
}

impl Perspective {
    /// Binding order: the i-th perspective is encoded by the i-th encoder.
    pub const ALL: [Perspective; 3] = [Perspective::Offensive, Perspective::Defensive, Perspective::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            Perspective::Offensive => "offensive",
            Perspective::Defensive => "defensive",
            Perspective::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Perspective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offensive" => Ok(Perspective::Offensive),
            "defensive" => Ok(Perspective::Defensive),
            "adversarial" => Ok(Perspective::Adversarial),
            other => Err(Error::InvalidArgument(format!("unknown perspective {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDescription {
    pub concept_id: String,
    pub perspective: Perspective,
    pub text: String,
}

impl ConceptDescription {
    pub fn new(concept_id: impl Into<String>, perspective: Perspective, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Empty("description text"));
        }
        Ok(Self {
            concept_id: concept_id.into(),
            perspective,
            text,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub encoder_id: String,
    pub values: Vec<f64>,
}

impl SemanticEmbedding {
    pub fn new(encoder_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self {
            encoder_id: encoder_id.into(),
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

impl AsRef<[f64]> for SemanticEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub encoder_id: String,
    pub target_norm_mean: f64,
    pub target_norm_std: f64,
    /// ms per token
    pub latency_slope: f64,
    /// ms
    pub latency_intercept: f64,
    /// ms
    pub latency_noise_std: f64,
}

impl EncoderProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{}: {what}", self.encoder_id)));
        if self.encoder_id.is_empty() {
            return Err(Error::InvalidArgument("empty encoder id".into()));
        }
        if !(self.target_norm_mean > 0.0 && self.target_norm_mean.is_finite()) {
            return bad("target_norm_mean must be positive");
        }
        if !(self.target_norm_std >= 0.0 && self.target_norm_std.is_finite()) {
            return bad("target_norm_std must be non-negative");
        }
        if !(self.latency_slope >= 0.0 && self.latency_slope.is_finite()) {
            return bad("latency_slope must be non-negative");
        }
        if !self.latency_intercept.is_finite() {
            return bad("latency_intercept must be finite");
        }
        if !(self.latency_noise_std >= 0.0 && self.latency_noise_std.is_finite()) {
            return bad("latency_noise_std must be non-negative");
        }
        Ok(())
    }

    // Latency parameters are chosen so that prompts of 10..=50 tokens give
    // the mean and standard deviation reported for each model.

    pub fn gpt4o() -> Self {
        Self {
            encoder_id: "gpt-4o".into(),
            target_norm_mean: 1.145,
            target_norm_std: 0.011,
            latency_slope: 1.0,
            latency_intercept: 32.8,
            latency_noise_std: 13.829,
        }
    }

    pub fn deepseek_v3() -> Self {
        Self {
            encoder_id: "deepseek-v3".into(),
            target_norm_mean: 1.042,
            target_norm_std: 0.007,
            latency_slope: 0.8,
            latency_intercept: 33.0,
            latency_noise_std: 16.934,
        }
    }

    pub fn llama3_8b() -> Self {
        Self {
            encoder_id: "llama-3-8b".into(),
            target_norm_mean: 1.221,
            target_norm_std: 0.026,
            latency_slope: 1.4,
            latency_intercept: 30.4,
            latency_noise_std: 17.504,
        }
    }

    /// Offensive, defensive and adversarial encoders, in binding order.
    pub fn defaults() -> Vec<Self> {
        vec![Self::gpt4o(), Self::deepseek_v3(), Self::llama3_8b()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub embedding: SemanticEmbedding,
    pub latency_ms: f64,
}

pub trait Encoder: Send + Sync {
    fn encoder_id(&self) -> &str;
    fn encode(&self, text: &str, k: usize) -> Result<Encoded>;
}

/// Offline encoder backed by [`encode`].
#[derive(Clone, Debug)]
pub struct StubEncoder {
    profile: EncoderProfile,
    seed: u64,
}

impl StubEncoder {
    pub fn new(profile: EncoderProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        Ok(Self { profile, seed })
    }

    pub fn profile(&self) -> &EncoderProfile {
        &self.profile
    }
}

impl Encoder for StubEncoder {
    fn encoder_id(&self) -> &str {
        &self.profile.encoder_id
    }

    fn encode(&self, text: &str, k: usize) -> Result<Encoded> {
        encode(&self.profile, text, k, self.seed)
    }
}

/// Lowercased alphanumeric tokens with stopwords removed.
pub fn content_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_owned)
        .collect()
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Deterministic stub embedding plus synthetic latency.
///
/// The direction is a sum of per-token hashed Gaussian directions, each
/// mixing a component shared by all encoders with one private to the
/// encoder. The norm is drawn from the profile's target distribution.
pub fn encode(profile: &EncoderProfile, text: &str, k: usize, seed: u64) -> Result<Encoded> {
    if text.trim().is_empty() {
        return Err(Error::Empty("text"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("embedding dimension k must be >= 1".into()));
    }
    let seed_s = seed.to_string();
    let enc = profile.encoder_id.as_str();

    let mut v = vec![0.0; k];
    for tok in content_tokens(text) {
        let shared = gaussian_vec(&mut keyed_rng(&[&seed_s, "token", &tok]), k);
        let private = gaussian_vec(&mut keyed_rng(&[&seed_s, "encoder", enc, &tok]), k);
        for ((acc, s), p) in v.iter_mut().zip(&shared).zip(&private) {
            *acc += s + ENCODER_IDIOSYNCRASY * p;
        }
    }
    let mut norm = l2_norm(&v);
    if norm == 0.0 {
        v = gaussian_vec(&mut keyed_rng(&[&seed_s, "text", enc, text]), k);
        norm = l2_norm(&v);
    }

    let mut norm_rng = keyed_rng(&[&seed_s, "norm", enc, text]);
    let target = profile.target_norm_mean + profile.target_norm_std * gaussian(&mut norm_rng);
    let target = target.max(1e-12);
    for x in v.iter_mut() {
        *x *= target / norm;
    }

    let mut lat_rng = keyed_rng(&[&seed_s, "latency", enc, text]);
    let noise = if profile.latency_noise_std > 0.0 {
        profile.latency_noise_std * gaussian(&mut lat_rng)
    } else {
        0.0
    };
    let latency_ms = (profile.latency_slope * token_count(text) as f64 + profile.latency_intercept + noise).max(0.0);

    Ok(Encoded {
        embedding: SemanticEmbedding::new(enc, v)?,
        latency_ms,
    })
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean L2 distance over ordered member pairs.
pub fn disagreement<V: AsRef<[f64]>>(members: &[V]) -> Result<f64> {
    let m = members.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "disagreement needs at least 2 members, got {m}"
        )));
    }
    let dim = members[0].as_ref().len();
    for member in members {
        if member.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: member.as_ref().len(),
                context: "disagreement members",
            });
        }
    }
    let mut total = 0.0;
    for (i, a) in members.iter().enumerate() {
        for (j, b) in members.iter().enumerate() {
            if i != j {
                total += l2_distance(a.as_ref(), b.as_ref());
            }
        }
    }
    Ok(total / (m * (m - 1)) as f64)
}

/// Mean and population standard deviation of embedding norms.
pub fn semantic_strength<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<(f64, f64)> {
    if embeddings.is_empty() {
        return Err(Error::Empty("embeddings"));
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| l2_norm(e.as_ref())).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPrototype {
    pub concept_id: String,
    pub fused: SemanticEmbedding,
    pub members: Vec<SemanticEmbedding>,
    pub disagreement: f64,
}

impl AttackPrototype {
    pub fn from_members(concept_id: impl Into<String>, members: Vec<SemanticEmbedding>) -> Result<Self> {
        let disagreement = disagreement(&members)?;
        let k = members[0].dim();
        let mut fused = vec![0.0; k];
        for member in &members {
            for (f, v) in fused.iter_mut().zip(&member.values) {
                *f += v;
            }
        }
        let m = members.len() as f64;
        for f in fused.iter_mut() {
            *f /= m;
        }
        Ok(Self {
            concept_id: concept_id.into(),
            fused: SemanticEmbedding::new("fused", fused)?,
            members,
            disagreement,
        })
    }
}

/// Encodes each perspective with its bound encoder and fuses the results.
pub fn build_prototype(
    concept_id: &str,
    descriptions: &[ConceptDescription],
    encoders: &[&dyn Encoder],
    k: usize,
) -> Result<AttackPrototype> {
    if encoders.len() != Perspective::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} encoders, got {}",
            Perspective::ALL.len(),
            encoders.len()
        )));
    }
    for (i, a) in encoders.iter().enumerate() {
        if encoders[..i].iter().any(|b| b.encoder_id() == a.encoder_id()) {
            return Err(Error::DuplicateEncoder(a.encoder_id().to_owned()));
        }
    }
    if let Some(other) = descriptions.iter().find(|d| d.concept_id != concept_id) {
        return Err(Error::InvalidArgument(format!(
            "description for {} passed to prototype {concept_id}",
            other.concept_id
        )));
    }
    let mut members = Vec::with_capacity(encoders.len());
    for (perspective, encoder) in Perspective::ALL.iter().zip(encoders) {
        let mut matching = descriptions.iter().filter(|d| d.perspective == *perspective);
        let desc = matching.next().ok_or_else(|| Error::MissingPerspective {
            concept_id: concept_id.to_owned(),
            perspective: perspective.as_str(),
        })?;
        if matching.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "{concept_id} has more than one {perspective} description"
            )));
        }
        let encoded = encoder.encode(&desc.text, k)?;
        if encoded.embedding.dim() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: encoded.embedding.dim(),
                context: "encoder output",
            });
        }
        members.push(encoded.embedding);
    }
    AttackPrototype::from_members(concept_id, members)
}

/// Prototypes indexed by concept id, iterated in ascending id order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<AttackPrototype>", into = "Vec<AttackPrototype>")]
pub struct PrototypeSet {
    items: Vec<AttackPrototype>,
    index: BTreeMap<String, usize>,
}

impl PrototypeSet {
    pub fn new(mut items: Vec<AttackPrototype>) -> Result<Self> {
        items.sort_by(|a, b| a.concept_id.cmp(&b.concept_id));
        for pair in items.windows(2) {
            if pair[0].concept_id == pair[1].concept_id {
                return Err(Error::InvalidArgument(format!(
                    "duplicate prototype {}",
                    pair[0].concept_id
                )));
            }
        }
        if let Some(first) = items.first() {
            let k = first.fused.dim();
            if let Some(bad) = items.iter().find(|p| p.fused.dim() != k) {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    actual: bad.fused.dim(),
                    context: "prototype set",
                });
            }
        }
        Ok(Self::from(items))
    }

    pub fn get(&self, concept_id: &str) -> Option<&AttackPrototype> {
        self.index.get(concept_id).map(|&i| &self.items[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &AttackPrototype> {
        self.items.iter()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Embedding dimension, or 0 for an empty set.
    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |p| p.fused.dim())
    }

    /// Restriction to the given concept ids.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut items = Vec::new();
        for id in ids {
            let p = self.get(id).ok_or_else(|| Error::UnknownLabel(id.to_owned()))?;
            items.push(p.clone());
        }
        Self::new(items)
    }
}

impl From<Vec<AttackPrototype>> for PrototypeSet {
    fn from(mut items: Vec<AttackPrototype>) -> Self {
        items.sort_by(|a, b| a.concept_id.cmp(&b.concept_id));
        let index = items
            .iter()
            .enumerate()
            .map(|(i, p)| (p.concept_id.clone(), i))
            .collect();
        Self { items, index }
    }
}

impl From<PrototypeSet> for Vec<AttackPrototype> {
    fn from(set: PrototypeSet) -> Self {
        set.items
    }
}

const CORPUS_VOCAB: &[&str] = &[
    "packet",
    "flow",
    "host",
    "port",
    "burst",
    "session",
    "payload",
    "header",
    "request",
    "reply",
    "login",
    "probe",
    "beacon",
    "tunnel",
    "query",
    "domain",
    "socket",
    "handshake",
    "stream",
    "archive",
    "upload",
    "credential",
    "token",
    "firewall",
    "gateway",
    "subnet",
    "router",
    "client",
    "server",
    "daemon",
    "process",
    "kernel",
    "registry",
    "script",
    "macro",
    "binary",
    "checksum",
    "certificate",
    "cipher",
    "timeout",
    "retry",
    "latency",
    "jitter",
    "volume",
    "spike",
    "scan",
];

/// Distinct texts whose whitespace token counts are uniform on 10..=50.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = keyed_rng(&[&seed.to_string(), "corpus"]);
    (0..n)
        .map(|i| {
            let len = rng.random_range(10..=50usize);
            let mut words = Vec::with_capacity(len);
            words.push(format!("doc{i}"));
            for _ in 1..len {
                words.push(CORPUS_VOCAB[rng.random_range(0..CORPUS_VOCAB.len())].to_owned());
            }
            words.join(" ")
        })
        .collect()
}

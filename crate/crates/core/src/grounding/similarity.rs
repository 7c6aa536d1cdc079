//! Text similarity providers used for document ranking and step grounding.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embeds texts into a shared vector space; similarity is the cosine of two
/// embeddings. Implementations must be safe to query from several threads.
pub trait SimilarityProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let v = self.embed(&[a.to_string(), b.to_string()])?;
        Ok(cosine(&v[0], &v[1]))
    }

    /// Cosine similarity of every query against every target.
    fn score_matrix(&self, queries: &[String], targets: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut all = Vec::with_capacity(queries.len() + targets.len());
        all.extend_from_slice(queries);
        all.extend_from_slice(targets);
        let vectors = self.embed(&all)?;
        let (q, t) = vectors.split_at(queries.len());
        Ok(q.iter()
            .map(|qv| t.iter().map(|tv| cosine(qv, tv)).collect())
            .collect())
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Lowercased alphanumeric word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token-level TF-IDF vectors over a fitted vocabulary.
///
/// Tokens never seen during fitting are ignored when embedding, so the
/// provider should be fitted on every text it will later compare.
#[derive(Debug, Clone)]
pub struct TfIdfProvider {
    vocab: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl TfIdfProvider {
    /// Smoothed idf: ln((1 + n) / (1 + df)) + 1.
    pub fn fit<S: AsRef<str>>(documents: &[S]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in documents {
            let mut tokens = word_tokens(doc.as_ref());
            tokens.sort();
            tokens.dedup();
            for t in tokens {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = documents.len() as f64;
        let mut vocab = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (token, count)) in df.into_iter().enumerate() {
            idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
            vocab.insert(token, i);
        }
        TfIdfProvider { vocab, idf }
    }

    pub fn dimension(&self) -> usize {
        self.idf.len()
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.idf.len()];
        for t in word_tokens(text) {
            if let Some(&i) = self.vocab.get(&t) {
                v[i] += self.idf[i];
            }
        }
        v
    }
}

impl SimilarityProvider for TfIdfProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an external embedding service (`POST {base}/embed`).
///
/// Failures are hard errors; there is no fallback to lexical similarity.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        let endpoint = format!("{}/embed", base_url.trim_end_matches('/'));
        Ok(HttpEmbeddingProvider { endpoint, client })
    }
}

impl SimilarityProvider for HttpEmbeddingProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let response = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Embedding(e.to_string()))?;
        let body: EmbedResponse = response
            .json()
            .map_err(|e| Error::Embedding(format!("bad response body: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(Error::Embedding(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        let dim = body.vectors[0].len();
        if body
            .vectors
            .iter()
            .any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Embedding(
                "vectors differ in dimension or contain non-finite values".into(),
            ));
        }
        Ok(body.vectors)
    }
}

//! Maps a free-text response onto the closest class description.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::{StubEncoder, TextEncoder};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub classes: BTreeMap<u32, String>,
}

impl ClassTaxonomy {
    pub fn new(classes: BTreeMap<u32, String>) -> Result<Self> {
        let taxonomy = Self { classes };
        taxonomy.validate()?;
        Ok(taxonomy)
    }

    /// Ids are unique by construction of the map.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Contract("taxonomy has no classes".into()));
        }
        Ok(())
    }

    /// Parses `{"classes": {"0": "...", ...}}` or a bare `{"0": "...", ...}` map.
    pub fn from_json(src: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(src)?;
        let map = match value.get("classes") {
            Some(inner) => inner.clone(),
            None => value,
        };
        let raw: BTreeMap<String, String> = serde_json::from_value(map)?;
        let mut classes = BTreeMap::new();
        for (key, text) in raw {
            let id = key
                .parse::<u32>()
                .map_err(|_| Error::Validation(format!("class id {key:?} is not an integer")))?;
            classes.insert(id, text);
        }
        Self::new(classes)
    }

    /// Class lines rendered as `"{id}: {description}"`, the form shown to the model.
    pub fn labelled(&self) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .map(|(id, text)| (*id, format!("{id}: {text}")))
                .collect(),
        }
    }

    /// The eleven-class fashion taxonomy (no class 5) used as the default fixture.
    pub fn fashion() -> Self {
        let classes = [
            (0, "Sneakers and Men's Formal Shoes"),
            (1, "Lingerie, Costumes, and Women's Footwear"),
            (2, "Jewelry and Accessories"),
            (3, "Stockings and Watches"),
            (4, "Graphic T-Shirts and Sweatshirts"),
            (6, "Scarves, Suspenders, and Wallets"),
            (7, "Undergarments and Socks"),
            (8, "Basic T-Shirts"),
            (9, "Men's Casual and Formal Shirts"),
            (10, "Dresses"),
            (11, "Shoes and Boots"),
        ];
        Self {
            classes: classes.iter().map(|&(id, text)| (id, text.to_string())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Block,
    /// Cosine of mean stub-encoder token embeddings.
    Embedding,
}

/// Longest common contiguous block of `a[alo..ahi]` and `b[blo..bhi]`.
///
/// Returns `(i, j, len)`; ties go to the smallest `i`, then the smallest `j`.
fn longest_block(
    a: &[char],
    b: &[char],
    (alo, ahi): (usize, usize),
    (blo, bhi): (usize, usize),
) -> (usize, usize, usize) {
    let mut best = (alo, blo, 0);
    let mut prev = vec![0usize; bhi - blo + 1];
    let mut cur = vec![0usize; bhi - blo + 1];
    for i in alo..ahi {
        for j in blo..bhi {
            let k = if a[i] == b[j] { prev[j - blo] + 1 } else { 0 };
            cur[j - blo + 1] = k;
            if k > best.2 {
                best = (i + 1 - k, j + 1 - k, k);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Total matched length from recursive longest-block matching.
pub fn matched_length(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut total = 0;
    let mut stack = vec![((0, a.len()), (0, b.len()))];
    while let Some((ra, rb)) = stack.pop() {
        if ra.0 >= ra.1 || rb.0 >= rb.1 {
            continue;
        }
        let (i, j, k) = longest_block(&a, &b, ra, rb);
        if k == 0 {
            continue;
        }
        total += k;
        stack.push(((ra.0, i), (rb.0, j)));
        stack.push(((i + k, ra.1), (j + k, rb.1)));
    }
    total
}

/// `2M / (|a| + |b|)`, with the arguments put in lexicographic order first so
/// that the score does not depend on which string is passed first.
pub fn similarity_ratio(a: &str, b: &str) -> f64 {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    let total = a.chars().count() + b.chars().count();
    if total == 0 {
        return 1.0;
    }
    2.0 * matched_length(a, b) as f64 / total as f64
}

fn embedding_similarity(encoder: &StubEncoder, a: &str, b: &str) -> f64 {
    let ea = encoder.encode_tokens(a).mean_rows().into_vec();
    let eb = encoder.encode_tokens(b).mean_rows().into_vec();
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
    let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scores of `response` against every class, in ascending id order.
pub fn class_scores(
    response: &str,
    taxonomy: &ClassTaxonomy,
    similarity: Similarity,
    encoder: &StubEncoder,
) -> Result<Vec<(u32, f64)>> {
    taxonomy.validate()?;
    if response.is_empty() {
        return Err(Error::Contract("response is empty".into()));
    }
    Ok(taxonomy
        .classes
        .iter()
        .map(|(&id, text)| {
            let score = match similarity {
                Similarity::Block => similarity_ratio(response, text),
                Similarity::Embedding => embedding_similarity(encoder, response, text),
            };
            (id, score)
        })
        .collect())
}

/// Highest-ratio class; equal ratios resolve to the lowest id.
pub fn classify_by_similarity(response: &str, taxonomy: &ClassTaxonomy) -> Result<u32> {
    classify_with(response, taxonomy, Similarity::Block, &StubEncoder::default())
}

pub fn classify_with(
    response: &str,
    taxonomy: &ClassTaxonomy,
    similarity: Similarity,
    encoder: &StubEncoder,
) -> Result<u32> {
    let scores = class_scores(response, taxonomy, similarity, encoder)?;
    let mut best = scores[0];
    for &(id, score) in &scores[1..] {
        if score > best.1 {
            best = (id, score);
        }
    }
    Ok(best.0)
}

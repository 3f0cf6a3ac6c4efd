use super::{check_embed_request, Embedder, EmbeddingVector, GatewayError};

pub const HASH_EMBED_DIM: usize = 256;
pub const HASH_EMBED_MODEL: &str = "hash-ngram-256";

/// Deterministic embedding stub: word unigrams and bigrams hashed into a
/// signed 256-bucket vector, then L2-normalized.
#[derive(Debug, Clone, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn new() -> Self {
        Self
    }

    pub fn embed_one(text: &str) -> Vec<f64> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect();

        let mut v = vec![0.0f64; HASH_EMBED_DIM];
        for t in &tokens {
            add_feature(&mut v, t, 1.0);
        }
        for pair in tokens.windows(2) {
            add_feature(&mut v, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        if v.iter().all(|x| *x == 0.0) {
            // No alphanumeric tokens, or every feature cancelled out.
            add_feature(&mut v, &format!("\u{0}raw:{text}"), 1.0);
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

fn add_feature(v: &mut [f64], feature: &str, weight: f64) {
    let h = fnv1a(feature.as_bytes());
    let bucket = (h % HASH_EMBED_DIM as u64) as usize;
    let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
    v[bucket] += sign * weight;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn model_id(&self) -> &str {
        HASH_EMBED_MODEL
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        check_embed_request(texts)?;
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector {
                values: Self::embed_one(t),
                model_id: HASH_EMBED_MODEL.to_string(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::cosine;
    use proptest::prelude::*;

    #[test]
    fn identical_inputs_identical_vectors() {
        let e = HashEmbedder::new();
        let v = e.embed(&["a".into(), "a".into()]).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn self_similarity_is_one() {
        let v = HashEmbedder::embed_one("plate on sink");
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn order_preserved_for_21_texts() {
        let texts: Vec<String> = (0..21).map(|i| format!("entry number {i}")).collect();
        let out = HashEmbedder::new().embed(&texts).unwrap();
        assert_eq!(out.len(), 21);
        for (t, v) in texts.iter().zip(&out) {
            assert_eq!(v.values, HashEmbedder::embed_one(t));
            assert_eq!(v.dim(), HASH_EMBED_DIM);
        }
    }

    #[test]
    fn punctuation_only_text_still_has_norm() {
        let v = HashEmbedder::embed_one("?!");
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(HashEmbedder::new().embed(&[" ".into()]).is_err());
        assert!(HashEmbedder::new().embed(&[]).is_err());
    }

    proptest! {
        #[test]
        fn unit_norm_and_self_cosine(s in "\\PC{1,60}") {
            let v = HashEmbedder::embed_one(&s);
            prop_assert_eq!(v.len(), HASH_EMBED_DIM);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            prop_assert!((cosine(&v, &v) - 1.0).abs() < 1e-9);
        }
    }
}

//! A minimal prompt encoder: whitespace tokens, a trainable embedding table,
//! mean pooling and a bias-free linear projection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use synthvision_nn::{rng, BoundParams, Graph, ParamSet, Tensor, Var};

pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub cond_dim: usize,
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
    pub params: ParamSet,
}

impl TextEncoder {
    /// Build an encoder whose vocabulary is `<unk>` followed by the distinct
    /// tokens of `words`, in first-seen order. Weights are random.
    pub fn new<'a>(
        words: impl IntoIterator<Item = &'a str>,
        config: TextEncoderConfig,
        seed: u64,
    ) -> Self {
        let mut vocab = vec![UNK.to_string()];
        for w in words {
            for tok in tokenize(w) {
                if !vocab.contains(&tok) {
                    vocab.push(tok);
                }
            }
        }
        let mut r = rng::stream(seed, rng::label("text.init"));
        let mut params = ParamSet::new();
        params.insert(
            "tok_emb",
            Tensor::randn(&[vocab.len(), config.embed_dim], 1.0, &mut r),
        );
        params.insert(
            "proj",
            Tensor::randn(
                &[config.embed_dim, config.cond_dim],
                (1.0 / config.embed_dim.max(1) as f64).sqrt(),
                &mut r,
            ),
        );
        Self::from_parts(config, vocab, params)
    }

    pub fn from_parts(config: TextEncoderConfig, vocab: Vec<String>, params: ParamSet) -> Self {
        let ids = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            config,
            vocab,
            ids,
            params,
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    /// Token ids; unknown tokens map to id 0.
    pub fn token_ids(&self, prompt: &str) -> Vec<usize> {
        tokenize(prompt)
            .iter()
            .map(|t| self.ids.get(t).copied().unwrap_or(0))
            .collect()
    }

    /// Record the encoding of `prompts` in `g`, giving `[prompts.len(), cond_dim]`.
    pub fn encode_graph(&self, g: &mut Graph, p: &BoundParams, prompts: &[String]) -> Var {
        let token_lists: Vec<Vec<usize>> = prompts.iter().map(|s| self.token_ids(s)).collect();
        let total: usize = token_lists.iter().map(Vec::len).sum();
        let mut pool = vec![0.0; prompts.len() * total];
        let mut offset = 0;
        for (row, ids) in token_lists.iter().enumerate() {
            for j in 0..ids.len() {
                pool[row * total + offset + j] = 1.0 / ids.len() as f64;
            }
            offset += ids.len();
        }
        let flat: Vec<usize> = token_lists.concat();
        let emb = g.gather(p.get("tok_emb"), &flat);
        let pool = g.constant(Tensor::new(&[prompts.len(), total], pool).expect("pool dims"));
        let pooled = g.matmul(pool, emb);
        g.matmul(pooled, p.get("proj"))
    }

    /// Conditioning vectors for a batch of prompts, `[N, cond_dim]`.
    pub fn encode_batch(&self, prompts: &[String]) -> Tensor {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let out = self.encode_graph(&mut g, &p, prompts);
        g.value(out).clone()
    }

    /// Conditioning vector for one prompt, `[cond_dim]`. The empty prompt
    /// maps to the zero vector.
    pub fn encode(&self, prompt: &str) -> Tensor {
        let t = self.encode_batch(&[prompt.to_string()]);
        t.reshape(&[self.config.cond_dim]).expect("single row")
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Small token vocabulary. Ids `0..NUM_SPECIAL` are reserved markers, the
/// rest are content tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const SEP_QUERY: TokenId = 3;
    pub const SEP_RESP1: TokenId = 4;
    pub const SEP_RESP2: TokenId = 5;
    pub const NUM_SPECIAL: TokenId = 6;

    pub const DEFAULT_SIZE: usize = 64;

    pub fn new(size: usize) -> Result<Self> {
        if size <= Self::NUM_SPECIAL as usize {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed the {} special ids", Self::NUM_SPECIAL),
            ));
        }
        Ok(Self { size })
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        id >= Self::NUM_SPECIAL && (id as usize) < self.size
    }

    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        Self::NUM_SPECIAL..self.size as TokenId
    }

    pub fn num_content(&self) -> usize {
        self.size - Self::NUM_SPECIAL as usize
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            size: Self::DEFAULT_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Query,
    Response,
    PairwiseInput,
}

/// Token ids tagged with what they represent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    role: Role,
}

impl TokenSequence {
    /// Query or response made of content tokens only.
    pub fn content(ids: Vec<TokenId>, role: Role, vocab: &Vocab) -> Result<Self> {
        if role == Role::PairwiseInput {
            return Err(Error::InvalidSequence(
                "pairwise inputs are built with `pairwise_input`".into(),
            ));
        }
        if ids.is_empty() {
            return Err(Error::InvalidSequence(format!("empty {role:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&id| !vocab.is_content(id)) {
            return Err(Error::InvalidSequence(format!(
                "{role:?} token {bad} is not a content id (vocab size {})",
                vocab.size
            )));
        }
        Ok(Self { ids, role })
    }

    pub fn query(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        Self::content(ids, Role::Query, vocab)
    }

    pub fn response(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        Self::content(ids, Role::Response, vocab)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token ids plus segment ids, ready for the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: TokenId, segment: usize) {
        self.ids.push(id as usize);
        self.segments.push(segment);
    }

    fn extend(&mut self, seq: &[TokenId], segment: usize) {
        for &id in seq {
            self.push(id, segment);
        }
    }

    fn with_capacity(n: usize) -> Self {
        Self {
            ids: Vec::with_capacity(n),
            segments: Vec::with_capacity(n),
        }
    }
}

/// Number of segment embeddings: query, first response, second response.
pub const NUM_SEGMENTS: usize = 3;

/// `[BOS] x [SEP_QUERY] y`. Position `|x| + 1 + t` predicts `y_t`.
pub fn policy_input(x: &TokenSequence, y: &TokenSequence) -> ModelInput {
    let mut m = ModelInput::with_capacity(x.len() + y.len() + 2);
    m.push(Vocab::BOS, 0);
    m.extend(x.ids(), 0);
    m.push(Vocab::SEP_QUERY, 0);
    m.extend(y.ids(), 1);
    m
}

/// Prompt prefix used when decoding: `[BOS] x [SEP_QUERY]`.
pub fn prompt_input(x: &TokenSequence) -> ModelInput {
    let mut m = ModelInput::with_capacity(x.len() + 2);
    m.push(Vocab::BOS, 0);
    m.extend(x.ids(), 0);
    m.push(Vocab::SEP_QUERY, 0);
    m
}

/// `[BOS] x [SEP_QUERY] y [EOS]`, read out at the final `EOS`.
pub fn reward_input(x: &TokenSequence, y: &TokenSequence) -> ModelInput {
    let mut m = policy_input(x, y);
    m.push(Vocab::EOS, 1);
    m
}

/// `[BOS] x [SEP_QUERY] y1 [SEP_RESP1] y2 [SEP_RESP2]`, read out at the final
/// `SEP_RESP2`.
pub fn pairwise_input(x: &TokenSequence, y1: &TokenSequence, y2: &TokenSequence) -> ModelInput {
    let mut m = ModelInput::with_capacity(x.len() + y1.len() + y2.len() + 4);
    m.push(Vocab::BOS, 0);
    m.extend(x.ids(), 0);
    m.push(Vocab::SEP_QUERY, 0);
    m.extend(y1.ids(), 1);
    m.push(Vocab::SEP_RESP1, 1);
    m.extend(y2.ids(), 2);
    m.push(Vocab::SEP_RESP2, 2);
    m
}

/// Checks the separator invariant of a pairwise input: each of SEP_QUERY,
/// SEP_RESP1 and SEP_RESP2 appears exactly once, in that order.
pub fn validate_pairwise(ids: &[usize]) -> Result<()> {
    let seps = [Vocab::SEP_QUERY, Vocab::SEP_RESP1, Vocab::SEP_RESP2];
    let mut positions = Vec::with_capacity(3);
    for sep in seps {
        let hits: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == sep as usize)
            .map(|(i, _)| i)
            .collect();
        if hits.len() != 1 {
            return Err(Error::InvalidSequence(format!(
                "separator {sep} appears {} times in pairwise input",
                hits.len()
            )));
        }
        positions.push(hits[0]);
    }
    if !positions.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidSequence(
            "pairwise separators out of order".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32], role: Role) -> TokenSequence {
        TokenSequence::content(ids.to_vec(), role, &Vocab::default()).unwrap()
    }

    #[test]
    fn pairwise_layout_is_exact() {
        let x = seq(&[10, 11], Role::Query);
        let a = seq(&[20], Role::Response);
        let b = seq(&[30, 31], Role::Response);
        let m = pairwise_input(&x, &a, &b);
        assert_eq!(m.ids, vec![1, 10, 11, 3, 20, 4, 30, 31, 5]);
        assert_eq!(m.segments, vec![0, 0, 0, 0, 1, 1, 2, 2, 2]);
        validate_pairwise(&m.ids).unwrap();
    }

    #[test]
    fn reward_layout_ends_with_eos() {
        let x = seq(&[10], Role::Query);
        let y = seq(&[20, 21], Role::Response);
        assert_eq!(reward_input(&x, &y).ids, vec![1, 10, 3, 20, 21, 2]);
        assert_eq!(policy_input(&x, &y).ids, vec![1, 10, 3, 20, 21]);
    }

    #[test]
    fn rejects_specials_and_empty() {
        let v = Vocab::default();
        assert!(TokenSequence::query(vec![], &v).is_err());
        assert!(TokenSequence::query(vec![Vocab::SEP_RESP1], &v).is_err());
        assert!(TokenSequence::response(vec![64], &v).is_err());
        assert!(TokenSequence::response(vec![63], &v).is_ok());
    }

    #[test]
    fn pairwise_validation_catches_duplicates() {
        assert!(validate_pairwise(&[1, 3, 4, 4, 5]).is_err());
        assert!(validate_pairwise(&[1, 4, 3, 5]).is_err());
        assert!(validate_pairwise(&[1, 3, 4, 5]).is_ok());
    }
}

//! Byte-level byte-pair encoding.
//!
//! Text is first cut into chunks (a leading space attaches to the word that
//! follows it; letters/digits and punctuation form separate runs), and merges
//! never cross chunk boundaries.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::TokenizerError;

pub const NUM_SPECIALS: usize = 8;
const VOCAB_FILE_VERSION: u32 = 1;

/// Ids of the special tokens, which sit directly above the merge budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pmt: u32,
    pub pmt_sep: u32,
    pub bos: u32,
    pub sep: u32,
    pub eos: u32,
    pub npf: u32,
    pub npi: u32,
    pub pad: u32,
}

impl Specials {
    pub const NAMES: [&'static str; NUM_SPECIALS] = ["[PMT]", "[PMT-SEP]", "[BOS]", "[SEP]", "[EOS]", "[NPF]", "[NPI]", "[PAD]"];

    fn starting_at(base: u32) -> Self {
        Self {
            pmt: base,
            pmt_sep: base + 1,
            bos: base + 2,
            sep: base + 3,
            eos: base + 4,
            npf: base + 5,
            npi: base + 6,
            pad: base + 7,
        }
    }

    pub fn all(&self) -> [u32; NUM_SPECIALS] {
        [self.pmt, self.pmt_sep, self.bos, self.sep, self.eos, self.npf, self.npi, self.pad]
    }

    pub fn contains(&self, id: u32) -> bool {
        (self.pmt..=self.pad).contains(&id)
    }

    pub fn name(&self, id: u32) -> Option<&'static str> {
        self.contains(id).then(|| Self::NAMES[(id - self.pmt) as usize])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    budget: usize,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
    specials: Specials,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    budget: usize,
    merges: Vec<String>,
    specials: BTreeMap<String, u32>,
}

fn byte_class(b: u8) -> u8 {
    match b {
        b' ' => 0,
        b if b.is_ascii_alphanumeric() || b >= 0x80 => 1,
        b if b.is_ascii_whitespace() => 3,
        _ => 2,
    }
}

/// Splits bytes into merge domains. Concatenating the chunks restores the input.
pub(crate) fn chunks(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        let prev = bytes[i - 1];
        let cur = bytes[i];
        let boundary = cur == b' ' || (prev != b' ' && byte_class(prev) != byte_class(cur)) || (prev == b' ' && byte_class(cur) == 0);
        if boundary {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

impl Vocabulary {
    fn from_merges(budget: usize, merges: Vec<(u32, u32)>) -> Self {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut bytes = token_bytes[a as usize].clone();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(bytes);
            ranks.insert((a, b), rank as u32);
        }
        Self { budget, merges, ranks, token_bytes, specials: Specials::starting_at(budget as u32) }
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    /// Total number of ids, including unused merge slots and the specials.
    pub fn size(&self) -> usize {
        self.budget + NUM_SPECIALS
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in chunks(bytes) {
            let mut ids: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                    .min();
                let Some(rank) = best else { break };
                let pair = self.merges[rank as usize];
                ids = merge_pair(&ids, pair, 256 + rank);
            }
            out.extend(ids);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            if self.specials.contains(id) {
                return Err(TokenizerError::SpecialInDecode(id));
            }
            let bytes = self.token_bytes.get(id as usize).ok_or(TokenizerError::UnknownId(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> String {
        let hex_of = |id: u32| hex::encode(&self.token_bytes[id as usize]);
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            budget: self.budget,
            merges: self.merges.iter().map(|&(a, b)| format!("{} {}", hex_of(a), hex_of(b))).collect(),
            specials: Specials::NAMES.iter().zip(self.specials.all()).map(|(n, id)| (n.to_string(), id)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(TokenizerError::Format(format!("unsupported vocabulary version {}", file.version)));
        }
        if file.budget < 256 || file.merges.len() > file.budget - 256 {
            return Err(TokenizerError::Format("merge count exceeds budget".into()));
        }
        let mut by_bytes: HashMap<Vec<u8>, u32> = (0..=255u8).map(|b| (vec![b], b as u32)).collect();
        let mut merges = Vec::with_capacity(file.merges.len());
        for (i, m) in file.merges.iter().enumerate() {
            let (l, r) = m
                .split_once(' ')
                .ok_or_else(|| TokenizerError::Format(format!("merge {i} is not `<hex> <hex>`")))?;
            let lookup = |h: &str| -> Result<(Vec<u8>, u32), TokenizerError> {
                let bytes = hex::decode(h).map_err(|e| TokenizerError::Format(format!("merge {i}: {e}")))?;
                let id = *by_bytes
                    .get(&bytes)
                    .ok_or_else(|| TokenizerError::Format(format!("merge {i} references unknown token {h}")))?;
                Ok((bytes, id))
            };
            let (lb, li) = lookup(l)?;
            let (rb, ri) = lookup(r)?;
            let mut joined = lb;
            joined.extend(rb);
            by_bytes.insert(joined, 256 + i as u32);
            merges.push((li, ri));
        }
        let vocab = Self::from_merges(file.budget, merges);
        let expected: BTreeMap<String, u32> =
            Specials::NAMES.iter().zip(vocab.specials.all()).map(|(n, id)| (n.to_string(), id)).collect();
        if file.specials != expected {
            return Err(TokenizerError::Format("special token ids do not match the budget layout".into()));
        }
        Ok(vocab)
    }

    /// Stable digest of the merge table, for run manifests.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns `budget - 256` merges (fewer if the corpus runs out of pairs).
///
/// The most frequent adjacent pair wins; ties go to the lexicographically
/// smallest `(left bytes, right bytes)`. A pair whose merged byte string
/// already names a token is skipped, so every id spells a distinct string.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], budget: usize) -> Result<Vocabulary, TokenizerError> {
    if budget < 256 {
        return Err(TokenizerError::BudgetTooSmall(budget));
    }
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for t in texts {
        for c in chunks(t.as_ref().as_bytes()) {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, usize)> =
        counts.into_iter().map(|(c, n)| (c.iter().map(|&b| b as u32).collect(), n)).collect();
    words.sort();

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut known: HashSet<Vec<u8>> = token_bytes.iter().cloned().collect();
    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    let mut merges = Vec::new();

    while merges.len() < budget - 256 {
        let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|(p, _)| !banned.contains(p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&token_bytes[pa.0 as usize], &token_bytes[pa.1 as usize]);
                    let kb = (&token_bytes[pb.0 as usize], &token_bytes[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some((pair, _)) = best else { break };
        let mut joined = token_bytes[pair.0 as usize].clone();
        joined.extend_from_slice(&token_bytes[pair.1 as usize]);
        if !known.insert(joined.clone()) {
            banned.insert(pair);
            continue;
        }
        let new_id = token_bytes.len() as u32;
        token_bytes.push(joined);
        merges.push(pair);
        for (ids, _) in words.iter_mut() {
            if ids.len() > 1 {
                *ids = merge_pair(ids, pair, new_id);
            }
        }
    }
    Ok(Vocabulary::from_merges(budget, merges))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_merge_is_the_most_frequent_pair() {
        // "aaab" holds the pairs aa, aa, ab: (a, a) counts 4 over both texts, (a, b) counts 2.
        let v = train_bpe(&["aaab", "aaab"], 257).unwrap();
        assert_eq!(v.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert_eq!(v.encode("aaab"), vec![256, b'a' as u32, b'b' as u32]);
    }

    #[test]
    fn equal_counts_break_toward_smaller_bytes() {
        let v = train_bpe(&["ba", "dc"], 257).unwrap();
        assert_eq!(v.merges(), &[(b'b' as u32, b'a' as u32)]);
    }

    #[test]
    fn minimal_budget_encodes_raw_bytes() {
        let v = train_bpe(&["hello world"], 256).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("hi"), vec![b'h' as u32, b'i' as u32]);
        assert_eq!(v.size(), 256 + NUM_SPECIALS);
    }

    #[test]
    fn budget_below_bytes_is_rejected() {
        assert!(matches!(train_bpe(&["x"], 255), Err(TokenizerError::BudgetTooSmall(255))));
    }

    #[test]
    fn training_is_deterministic_and_json_round_trips() {
        let texts = ["The heart is enlarged.", "There is no pneumothorax.", "The lungs are clear."];
        let a = train_bpe(&texts, 300).unwrap();
        let b = train_bpe(&texts, 300).unwrap();
        assert_eq!(a, b);
        let back = Vocabulary::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.encode(texts[0]), a.encode(texts[0]));
    }

    #[test]
    fn chunks_concatenate_to_input() {
        let s = b"  The heart,  is\tenlarged.\n";
        let joined: Vec<u8> = chunks(s).concat();
        assert_eq!(joined, s);
        assert_eq!(chunks(b"the heart."), vec![&b"the"[..], b" heart", b"."]);
    }

    #[test]
    fn decode_rejects_specials_and_unknown_ids() {
        let v = train_bpe(&["abc"], 260).unwrap();
        assert!(matches!(v.decode(&[v.specials().bos]), Err(TokenizerError::SpecialInDecode(_))));
        assert!(matches!(v.decode(&[259]), Err(TokenizerError::UnknownId(259))));
        assert_eq!(v.encode(""), Vec::<u32>::new());
    }
}

//! Tokenization and assembly of the decoder input stream.
//!
//! A stream is a prompt (the previous study's report, or placeholders when
//! there is none) followed by the target report:
//!
//! ```text
//! [PMT] prev findings [PMT-SEP] prev impression [BOS] findings [SEP] impression [EOS]
//!   0        0            1             1          2       2      3      3         3
//! ```
//!
//! The second row is the section id of every token.

mod bpe;

pub use bpe::{train_bpe, Specials, Vocabulary, NUM_SPECIALS};

pub const DEFAULT_MAX_PROMPT: usize = 256;
pub const DEFAULT_MAX_TARGET: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("merge budget {0} is below the 256 byte tokens")]
    BudgetTooSmall(usize),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("special token id {0} passed to decode")]
    SpecialInDecode(u32),
    #[error("previous findings and impression must both be present or both absent")]
    OneSidedPrompt,
    #[error("empty {0} section")]
    EmptySection(&'static str),
    #[error("length limit {0} cannot hold the structural tokens")]
    LimitTooSmall(usize),
    #[error("vocabulary file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Section {
    PromptFindings = 0,
    PromptImpression = 1,
    Findings = 2,
    Impression = 3,
}

pub const NUM_SECTIONS: usize = 4;

/// Whether a target stream may be truncated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    Training,
    Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenStream {
    pub token_ids: Vec<u32>,
    pub section_ids: Vec<u8>,
    pub position_ids: Vec<u32>,
    /// Number of leading prompt tokens; for a joined stream the token at this
    /// position is `[BOS]`.
    pub prompt_len: usize,
}

impl TokenStream {
    fn fragment(tokens: Vec<(u32, Section)>, is_prompt: bool) -> Self {
        let n = tokens.len();
        Self {
            token_ids: tokens.iter().map(|t| t.0).collect(),
            section_ids: tokens.iter().map(|t| t.1 as u8).collect(),
            position_ids: (0..n as u32).collect(),
            prompt_len: if is_prompt { n } else { 0 },
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Prompt fragment followed by target fragment, with one running position index.
    pub fn join(prompt: &TokenStream, target: &TokenStream) -> TokenStream {
        let mut token_ids = prompt.token_ids.clone();
        token_ids.extend_from_slice(&target.token_ids);
        let mut section_ids = prompt.section_ids.clone();
        section_ids.extend_from_slice(&target.section_ids);
        let n = token_ids.len() as u32;
        TokenStream { token_ids, section_ids, position_ids: (0..n).collect(), prompt_len: prompt.len() }
    }

    /// Tokens after the prompt.
    pub fn target_ids(&self) -> &[u32] {
        &self.token_ids[self.prompt_len..]
    }
}

/// Drops tokens from the right of `second`, then of `first`, until
/// `first.len() + second.len() <= room`.
fn truncate_pair(first: &mut Vec<u32>, second: &mut Vec<u32>, room: usize) {
    let excess = (first.len() + second.len()).saturating_sub(room);
    let from_second = excess.min(second.len());
    second.truncate(second.len() - from_second);
    let from_first = excess - from_second;
    first.truncate(first.len() - from_first);
}

/// Prompt fragment for the previous study's report, or the `[NPF]`/`[NPI]`
/// placeholders when there is none. Over-long prompts lose impression tokens
/// first, then findings tokens, from the right.
pub fn assemble_prompt(
    prev_findings: Option<&str>,
    prev_impression: Option<&str>,
    vocab: &Vocabulary,
    max_prompt: usize,
) -> Result<TokenStream, TokenizerError> {
    let sp = vocab.specials();
    if max_prompt < 4 {
        return Err(TokenizerError::LimitTooSmall(max_prompt));
    }
    let (mut f, mut i) = match (prev_findings, prev_impression) {
        (Some(f), Some(i)) => (vocab.encode(f), vocab.encode(i)),
        (None, None) => (vec![sp.npf], vec![sp.npi]),
        _ => return Err(TokenizerError::OneSidedPrompt),
    };
    truncate_pair(&mut f, &mut i, max_prompt - 2);
    let mut tokens = Vec::with_capacity(f.len() + i.len() + 2);
    tokens.push((sp.pmt, Section::PromptFindings));
    tokens.extend(f.into_iter().map(|t| (t, Section::PromptFindings)));
    tokens.push((sp.pmt_sep, Section::PromptImpression));
    tokens.extend(i.into_iter().map(|t| (t, Section::PromptImpression)));
    Ok(TokenStream::fragment(tokens, true))
}

/// Target fragment `[BOS] findings [SEP] impression [EOS]`. Truncation to
/// `max_len` (impression first) applies only in training mode.
pub fn assemble_target(
    findings: &str,
    impression: &str,
    vocab: &Vocabulary,
    max_len: usize,
    mode: StreamMode,
) -> Result<TokenStream, TokenizerError> {
    if findings.trim().is_empty() {
        return Err(TokenizerError::EmptySection("findings"));
    }
    if impression.trim().is_empty() {
        return Err(TokenizerError::EmptySection("impression"));
    }
    let sp = vocab.specials();
    let mut f = vocab.encode(findings);
    let mut i = vocab.encode(impression);
    if mode == StreamMode::Training {
        if max_len < 3 {
            return Err(TokenizerError::LimitTooSmall(max_len));
        }
        truncate_pair(&mut f, &mut i, max_len - 3);
    }
    let mut tokens = Vec::with_capacity(f.len() + i.len() + 3);
    tokens.push((sp.bos, Section::Findings));
    tokens.extend(f.into_iter().map(|t| (t, Section::Findings)));
    tokens.push((sp.sep, Section::Impression));
    tokens.extend(i.into_iter().map(|t| (t, Section::Impression)));
    tokens.push((sp.eos, Section::Impression));
    Ok(TokenStream::fragment(tokens, false))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SectionFlags {
    pub missing_sep: bool,
    pub empty_findings: bool,
    pub empty_impression: bool,
    /// Specials other than the structural ones were dropped from the text.
    pub stray_specials: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitReport {
    pub findings: String,
    pub impression: String,
    pub flags: SectionFlags,
}

/// Recovers the two sections of a generated sequence that begins with `[BOS]`.
pub fn split_sections(generated: &[u32], vocab: &Vocabulary) -> SplitReport {
    let sp = vocab.specials();
    let body = generated.strip_prefix(&[sp.bos]).unwrap_or(generated);
    let body = match body.iter().position(|&t| t == sp.eos) {
        Some(end) => &body[..end],
        None => body,
    };
    let mut flags = SectionFlags::default();
    let (f_ids, i_ids) = match body.iter().position(|&t| t == sp.sep) {
        Some(s) => (&body[..s], &body[s + 1..]),
        None => {
            flags.missing_sep = true;
            (body, &[][..])
        }
    };
    let mut text = |ids: &[u32]| {
        let plain: Vec<u32> = ids.iter().copied().filter(|&t| !sp.contains(t)).collect();
        if plain.len() != ids.len() {
            flags.stray_specials = true;
        }
        let plain: Vec<u32> = plain.into_iter().filter(|&t| vocab.token_bytes(t).is_some()).collect();
        vocab.decode(&plain).expect("specials and unknown ids were filtered")
    };
    let findings = text(f_ids);
    let impression = text(i_ids);
    flags.empty_findings = findings.trim().is_empty();
    flags.empty_impression = !flags.missing_sep && impression.trim().is_empty();
    SplitReport { findings, impression, flags }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        train_bpe(&["There is a small left pleural effusion.", "The heart is enlarged.", "Cardiomegaly."], 320).unwrap()
    }

    #[test]
    fn placeholder_prompt() {
        let v = vocab();
        let sp = *v.specials();
        let p = assemble_prompt(None, None, &v, 256).unwrap();
        assert_eq!(p.token_ids, vec![sp.pmt, sp.npf, sp.pmt_sep, sp.npi]);
        assert_eq!(p.section_ids, vec![0, 0, 1, 1]);
        assert_eq!(p.prompt_len, 4);
    }

    #[test]
    fn report_prompt_layout() {
        let v = vocab();
        let sp = *v.specials();
        let p = assemble_prompt(Some("f"), Some("i"), &v, 256).unwrap();
        let mut expect = vec![sp.pmt];
        expect.extend(v.encode("f"));
        expect.push(sp.pmt_sep);
        expect.extend(v.encode("i"));
        assert_eq!(p.token_ids, expect);
        assert_eq!(p.section_ids, vec![0, 0, 1, 1]);
        assert!(matches!(assemble_prompt(Some("f"), None, &v, 256), Err(TokenizerError::OneSidedPrompt)));
    }

    #[test]
    fn long_prompt_truncates_impression_first() {
        let v = vocab();
        let long = "x ".repeat(300);
        let p = assemble_prompt(Some("The heart is enlarged."), Some(&long), &v, 256).unwrap();
        assert_eq!(p.len(), 256);
        let f = v.encode("The heart is enlarged.");
        assert_eq!(&p.token_ids[1..1 + f.len()], &f[..]);
        let p = assemble_prompt(Some(&long), Some(&long), &v, 256).unwrap();
        assert_eq!(p.len(), 256);
        assert_eq!(p.token_ids[255], v.specials().pmt_sep);
        assert_eq!(*p.section_ids.last().unwrap(), 1);
    }

    #[test]
    fn target_layout_and_truncation_modes() {
        let v = vocab();
        let sp = *v.specials();
        let t = assemble_target("f", "i", &v, 256, StreamMode::Training).unwrap();
        let mut expect = vec![sp.bos];
        expect.extend(v.encode("f"));
        expect.push(sp.sep);
        expect.extend(v.encode("i"));
        expect.push(sp.eos);
        assert_eq!(t.token_ids, expect);
        assert_eq!(t.section_ids, vec![2, 2, 3, 3, 3]);

        let long = "z ".repeat(150);
        let train = assemble_target(&long, &long, &v, 256, StreamMode::Training).unwrap();
        assert!(train.len() <= 256);
        let eval = assemble_target(&long, &long, &v, 256, StreamMode::Evaluation).unwrap();
        assert_eq!(eval.len(), 3 + 2 * v.encode(&long).len());
        assert!(eval.len() > 256);
        assert_eq!(assemble_target("", "i", &v, 256, StreamMode::Training), Err(TokenizerError::EmptySection("findings")));
    }

    #[test]
    fn join_runs_one_position_index() {
        let v = vocab();
        let p = assemble_prompt(None, None, &v, 256).unwrap();
        let t = assemble_target("a", "b", &v, 256, StreamMode::Training).unwrap();
        let s = TokenStream::join(&p, &t);
        assert_eq!(s.position_ids, (0..s.len() as u32).collect::<Vec<_>>());
        assert_eq!(s.token_ids[s.prompt_len], v.specials().bos);
        assert!(s.section_ids.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn split_sections_cases() {
        let v = vocab();
        let sp = *v.specials();
        let a = v.encode("a");
        let b = v.encode("b");
        let seq: Vec<u32> = [vec![sp.bos], a.clone(), vec![sp.sep], b, vec![sp.eos]].concat();
        let r = split_sections(&seq, &v);
        assert_eq!((r.findings.as_str(), r.impression.as_str()), ("a", "b"));
        assert_eq!(r.flags, SectionFlags::default());

        let seq: Vec<u32> = [vec![sp.bos], a, vec![sp.eos]].concat();
        let r = split_sections(&seq, &v);
        assert_eq!((r.findings.as_str(), r.impression.as_str()), ("a", ""));
        assert!(r.flags.missing_sep);

        let r = split_sections(&[sp.bos, sp.sep, sp.eos], &v);
        assert_eq!((r.findings.as_str(), r.impression.as_str()), ("", ""));
        assert!(r.flags.empty_findings && r.flags.empty_impression && !r.flags.missing_sep);
    }
}

#[cfg(test)]
mod props {
    use std::sync::OnceLock;

    use proptest::prelude::*;

    use super::*;

    fn vocab() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| train_bpe(&["There is a small left pleural effusion.", "The heart is enlarged.", "No acute process."], 300).unwrap())
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(s in any::<String>()) {
            let v = vocab();
            let ids = v.encode(&s);
            prop_assert!(ids.iter().all(|&t| !v.specials().contains(t)));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }

        #[test]
        fn training_targets_fit_and_sections_never_go_back(
            f in "[a-z .]{0,80}[a-z]", i in "[a-z .]{0,80}[a-z]", max_len in 3usize..120
        ) {
            let t = assemble_target(&f, &i, vocab(), max_len, StreamMode::Training).unwrap();
            prop_assert!(t.len() <= max_len);
            prop_assert!(t.section_ids.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(t.token_ids.iter().filter(|&&x| x == vocab().specials().sep).count(), 1);
        }
    }
}

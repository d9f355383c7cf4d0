//! Tokenized sentence corpus for the next-word task.
//!
//! File format, UTF-8, one sentence per line:
//! `client_id <TAB> timestamp <TAB> space-separated tokens`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::model::{ClientDataset, Example, InputToken};
use crate::models::special;
use crate::models::NwpConfig;

pub const MAX_SENTENCES_PER_CLIENT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub client_id: u64,
    pub timestamp: i64,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorpusStats {
    pub num_sentences: usize,
    pub num_tokens: usize,
    pub oov_tokens: usize,
    pub num_examples: usize,
}

impl CorpusStats {
    /// Fraction of word tokens outside the vocabulary.
    pub fn oov_rate(&self) -> f64 {
        if self.num_tokens == 0 {
            0.0
        } else {
            self.oov_tokens as f64 / self.num_tokens as f64
        }
    }

    pub fn coverage(&self) -> f64 {
        1.0 - self.oov_rate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    /// Ascending client id; examples in sentence-timestamp order.
    pub clients: Vec<ClientDataset>,
    /// Core vocabulary; word `vocab[i]` has token id `i + special::COUNT`.
    pub vocab: Vec<String>,
    pub stats: CorpusStats,
}

pub fn parse_token_corpus(text: &str) -> Result<Vec<SentenceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut fields = line.splitn(3, '\t');
        let (Some(c), Some(t), Some(tokens)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad(
                "expected client_id, timestamp and tokens separated by tabs".into(),
            ));
        };
        let client_id = c
            .trim()
            .parse::<u64>()
            .map_err(|e| bad(format!("client id {c:?}: {e}")))?;
        let timestamp = t
            .trim()
            .parse::<i64>()
            .map_err(|e| bad(format!("timestamp {t:?}: {e}")))?;
        if tokens.contains('\t') {
            return Err(bad("tokens field contains a tab".into()));
        }
        out.push(SentenceRecord {
            client_id,
            timestamp,
            tokens: tokens.split_whitespace().map(str::to_owned).collect(),
        });
    }
    Ok(out)
}

pub fn load_token_corpus(path: &Path, cfg: &NwpConfig) -> Result<TokenCorpus> {
    let text = std::fs::read_to_string(path)?;
    build_corpus(&parse_token_corpus(&text)?, cfg)
}

pub fn write_token_corpus(records: &[SentenceRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}",
            r.client_id,
            r.timestamp,
            r.tokens.join(" ")
        )?;
    }
    Ok(())
}

/// Caps, builds the vocabulary and windows every sentence into
/// `(context, next token)` examples.
///
/// Each client keeps its earliest [`MAX_SENTENCES_PER_CLIENT`] sentences.
/// The vocabulary is the `vocab_size` most frequent words over the kept
/// sentences, ties broken lexicographically. A sentence becomes
/// `BOS w1 .. wn EOS` truncated to 20 slots (EOS is dropped when it does not
/// fit) and padded with PAD; every non-PAD slot after BOS is one target.
pub fn build_corpus(records: &[SentenceRecord], cfg: &NwpConfig) -> Result<TokenCorpus> {
    cfg.validate()?;
    let mut by_client: BTreeMap<u64, Vec<&SentenceRecord>> = BTreeMap::new();
    for r in records {
        by_client.entry(r.client_id).or_default().push(r);
    }
    for sentences in by_client.values_mut() {
        sentences.sort_by_key(|s| s.timestamp);
        sentences.truncate(MAX_SENTENCES_PER_CLIENT);
    }

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in by_client.values().flatten() {
        for t in &s.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cfg.vocab_size);
    let vocab: Vec<String> = ranked.iter().map(|(w, _)| w.to_string()).collect();
    let ids: HashMap<&str, u32> = ranked
        .iter()
        .enumerate()
        .map(|(i, (w, _))| (*w, i as u32 + special::COUNT))
        .collect();

    let len = cfg.max_sentence_len;
    let mut stats = CorpusStats::default();
    let mut clients = Vec::with_capacity(by_client.len());
    for (client_id, sentences) in by_client {
        let mut examples = Vec::new();
        for s in sentences {
            stats.num_sentences += 1;
            let mut slots: Vec<(InputToken, u32)> = Vec::with_capacity(len);
            slots.push((InputToken::Vocab(special::BOS), special::BOS));
            for t in &s.tokens {
                stats.num_tokens += 1;
                let slot = match ids.get(t.as_str()) {
                    Some(&id) => (InputToken::Vocab(id), id),
                    None => {
                        stats.oov_tokens += 1;
                        (InputToken::Unknown(fnv1a64(t.as_bytes())), special::OOV)
                    }
                };
                if slots.len() < len {
                    slots.push(slot);
                }
            }
            if slots.len() < len {
                slots.push((InputToken::Vocab(special::EOS), special::EOS));
            }
            for i in 1..slots.len() {
                let start = i.saturating_sub(cfg.context_window);
                let context = slots[start..i].iter().map(|s| s.0).collect();
                examples.push(Example::next_token(context, slots[i].1, s.timestamp));
            }
        }
        stats.num_examples += examples.len();
        clients.push(ClientDataset::new(client_id, examples));
    }
    Ok(TokenCorpus {
        clients,
        vocab,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Features, Target};

    fn cfg(v: usize) -> NwpConfig {
        NwpConfig::new(v, 1, 4, 3)
    }

    fn records(text: &str) -> Vec<SentenceRecord> {
        parse_token_corpus(text).unwrap()
    }

    #[test]
    fn single_token_corpus() {
        let c = build_corpus(&records("1\t0\ta a a\n"), &cfg(5)).unwrap();
        assert_eq!(c.vocab, vec!["a"]);
        assert_eq!(c.stats.oov_tokens, 0);
        let targets: Vec<Target> = c.clients[0].examples.iter().map(|e| e.target).collect();
        assert_eq!(
            targets,
            vec![
                Target::Token(4),
                Target::Token(4),
                Target::Token(4),
                Target::Token(special::EOS)
            ]
        );
    }

    #[test]
    fn ranking_and_ties() {
        let c = build_corpus(&records("1\t0\tb a b\n"), &cfg(1)).unwrap();
        assert_eq!(c.vocab, vec!["b"]);
        assert_eq!(c.stats.oov_tokens, 1);
        let c = build_corpus(&records("1\t0\tz y\n"), &cfg(1)).unwrap();
        assert_eq!(c.vocab, vec!["y"]);
    }

    #[test]
    fn coverage_matches_hand_count() {
        // Counts: the=4, cat=2, sat=1, mat=1, on=1.
        let text = "1\t0\tthe cat sat\n1\t1\ton the mat\n2\t0\tthe cat the\n";
        let c = build_corpus(&records(text), &cfg(2)).unwrap();
        assert_eq!(c.vocab, vec!["the", "cat"]);
        assert_eq!(c.stats.num_tokens, 9);
        assert_eq!(c.stats.oov_tokens, 3);
        assert!((c.stats.coverage() - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn truncation_padding_and_windows() {
        let long: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let text = format!("3\t5\t{}\n", long.join(" "));
        let c = build_corpus(&records(&text), &cfg(100)).unwrap();
        let exs = &c.clients[0].examples;
        assert_eq!(exs.len(), 19);
        assert!(exs.iter().all(|e| e.target != Target::Token(special::EOS)));
        let Features::Context(ctx) = &exs[0].features else {
            panic!()
        };
        assert_eq!(ctx, &vec![InputToken::Vocab(special::BOS)]);
        let Features::Context(ctx) = &exs[10].features else {
            panic!()
        };
        assert_eq!(ctx.len(), 3);
    }

    #[test]
    fn oov_inputs_hash_and_targets_collapse() {
        let c = build_corpus(&records("1\t0\ta a zz a\n"), &cfg(1)).unwrap();
        let exs = &c.clients[0].examples;
        assert_eq!(exs[2].target, Target::Token(special::OOV));
        let Features::Context(ctx) = &exs[3].features else {
            panic!()
        };
        assert_eq!(*ctx.last().unwrap(), InputToken::Unknown(fnv1a64(b"zz")));
    }

    #[test]
    fn keeps_earliest_sentences() {
        let mut text = String::new();
        for t in (0..1005).rev() {
            text.push_str(&format!("1\t{t}\tw{t}\n"));
        }
        let c = build_corpus(&records(&text), &cfg(2000)).unwrap();
        assert_eq!(c.stats.num_sentences, 1000);
        assert!(c
            .vocab
            .iter()
            .all(|w| w[1..].parse::<usize>().unwrap() < 1000));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            parse_token_corpus("1\t2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_token_corpus("x\t2\ta\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        let mut buf = Vec::new();
        let recs = records("4\t9\thello world\n");
        write_token_corpus(&recs, &mut buf).unwrap();
        assert_eq!(
            parse_token_corpus(std::str::from_utf8(&buf).unwrap()).unwrap(),
            recs
        );
    }
}

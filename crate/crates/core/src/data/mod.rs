//! Dataset ingestion, synthetic generators and train/validation/test splits.

mod corpus;
mod movielens;
mod synthetic;

pub use corpus::{
    build_corpus, load_token_corpus, parse_token_corpus, write_token_corpus, CorpusStats,
    SentenceRecord, TokenCorpus, MAX_SENTENCES_PER_CLIENT,
};
pub use movielens::{parse_movielens, parse_movielens_bytes, RatingRecord, RatingsData};
pub use synthetic::{
    gen_synthetic_corpus, gen_synthetic_mf, SyntheticCorpusConfig, SyntheticMf, SyntheticMfConfig,
};

use crate::model::ClientDataset;
use crate::rng::{shuffled, StreamRng};

/// Three-way partition of clients or of each client's examples.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeWaySplit {
    pub train: Vec<ClientDataset>,
    pub valid: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
}

/// Sizes `ceil(.8 n)`, `ceil(.1 n)` (capped by what remains) and the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((0.8 * n as f64).ceil() as usize).min(n);
    let valid = ((0.1 * n as f64).ceil() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// Random 80/10/10 partition of whole clients.
pub fn split_users(clients: &[ClientDataset], rng: &mut StreamRng) -> ThreeWaySplit {
    let order = shuffled(clients.len(), rng);
    let (a, b, _) = split_sizes(clients.len());
    let pick = |idx: &[usize]| {
        let mut sel: Vec<usize> = idx.to_vec();
        sel.sort_unstable();
        sel.into_iter().map(|i| clients[i].clone()).collect()
    };
    ThreeWaySplit {
        train: pick(&order[..a]),
        valid: pick(&order[a..a + b]),
        test: pick(&order[a + b..]),
    }
}

/// Per-client 80/10/10 split of examples in timestamp order (ties keep their
/// original order). Clients with an empty part are left out of that part.
pub fn split_by_timestamp(clients: &[ClientDataset]) -> ThreeWaySplit {
    let mut out = ThreeWaySplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for c in clients {
        let mut examples = c.examples.clone();
        examples.sort_by_key(|e| e.timestamp);
        let (a, b, _) = split_sizes(examples.len());
        let test = examples.split_off(a + b);
        let valid = examples.split_off(a);
        for (part, exs) in [
            (&mut out.train, examples),
            (&mut out.valid, valid),
            (&mut out.test, test),
        ] {
            if !exs.is_empty() {
                part.push(ClientDataset::new(c.client_id, exs));
            }
        }
    }
    out
}

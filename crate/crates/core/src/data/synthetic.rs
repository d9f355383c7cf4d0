//! Seeded synthetic datasets with known structure.

use rand::seq::index::sample_weighted;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::corpus::SentenceRecord;
use crate::error::{Error, Result};
use crate::model::{ClientDataset, Example};
use crate::rng::{gaussian, shuffled, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMfConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub true_rank: usize,
    pub noise_std: f64,
    /// Mean number of ratings per user.
    pub ratings_per_user: usize,
    /// Lower bound on ratings per user; equal to the mean gives a fixed count.
    #[serde(default)]
    pub min_ratings_per_user: Option<usize>,
    /// Zipf exponent of item popularity; 0 samples items uniformly.
    #[serde(default)]
    pub item_popularity_skew: f64,
    #[serde(default = "default_rating_mean")]
    pub rating_mean: f64,
    /// Standard deviation of per-user offsets.
    #[serde(default)]
    pub user_bias_std: f64,
    /// Standard deviation of per-item offsets.
    #[serde(default)]
    pub item_bias_std: f64,
    /// Standard deviation of the user-item interaction term.
    #[serde(default = "default_signal_std")]
    pub signal_std: f64,
    pub seed: u64,
}

fn default_rating_mean() -> f64 {
    3.0
}

fn default_signal_std() -> f64 {
    1.0
}

impl SyntheticMfConfig {
    pub fn new(
        num_users: usize,
        num_items: usize,
        true_rank: usize,
        ratings_per_user: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_users,
            num_items,
            true_rank,
            noise_std: 0.0,
            ratings_per_user,
            min_ratings_per_user: None,
            item_popularity_skew: 0.0,
            rating_mean: default_rating_mean(),
            user_bias_std: 0.0,
            item_bias_std: 0.0,
            signal_std: default_signal_std(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::config(
                "synthetic",
                "needs at least one user and one item",
            ));
        }
        if self.true_rank < self.structural_rank()
            || self.true_rank > self.num_users.min(self.num_items)
        {
            return Err(Error::config(
                "synthetic.true_rank",
                "must cover the offset (and user bias) coordinates and not exceed min(users, items)",
            ));
        }
        if self.ratings_per_user == 0 || self.ratings_per_user > self.num_items {
            return Err(Error::config(
                "synthetic.ratings_per_user",
                "must lie in 1..=num_items",
            ));
        }
        if self
            .min_ratings_per_user
            .is_some_and(|m| m == 0 || m > self.ratings_per_user)
        {
            return Err(Error::config(
                "synthetic.min_ratings_per_user",
                "must lie in 1..=ratings_per_user",
            ));
        }
        let scales = [
            self.noise_std,
            self.signal_std,
            self.user_bias_std,
            self.item_bias_std,
            self.item_popularity_skew,
        ];
        if !scales.iter().all(|&x| x >= 0.0 && x.is_finite()) {
            return Err(Error::config(
                "synthetic",
                "noise, signal, bias and skew scales must be non-negative",
            ));
        }
        Ok(())
    }

    /// Coordinates used by the mean and the user bias.
    fn structural_rank(&self) -> usize {
        1 + usize::from(self.user_bias_std > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMf {
    pub clients: Vec<ClientDataset>,
    /// Row-major `num_users x true_rank`.
    pub p_star: Vec<f64>,
    /// Row-major `num_items x true_rank`.
    pub q_star: Vec<f64>,
    pub rank: usize,
}

impl SyntheticMf {
    pub fn clean_rating(&self, user: usize, item: usize) -> f64 {
        let r = self.rank;
        let p = &self.p_star[user * r..(user + 1) * r];
        let q = &self.q_star[item * r..(item + 1) * r];
        p.iter().zip(q).map(|(a, b)| a * b).sum()
    }
}

/// Low-rank ratings `clamp(round(P*_u . Q*_j + noise), 1, 5)`.
///
/// The clean rating is `mean + b_u + b_j + p_u . q_j`, written exactly as a
/// dot product: coordinate 0 carries `sqrt(mean)` against
/// `(mean + b_j) / sqrt(mean)`, the next coordinate (when user offsets are
/// on) carries `b_u` against 1, and the remaining coordinates are Gaussian,
/// scaled so the interaction term has standard deviation `signal_std`.
pub fn gen_synthetic_mf(cfg: &SyntheticMfConfig) -> Result<SyntheticMf> {
    cfg.validate()?;
    let r = cfg.true_rank;
    let fixed = cfg.structural_rank();
    let free = r - fixed;
    let scale = if free > 0 {
        (cfg.signal_std * cfg.signal_std / free as f64).powf(0.25)
    } else {
        0.0
    };
    let root = cfg.rating_mean.abs().sqrt().max(1e-12);
    let mut factor_rng = stream(cfg.seed, 0, u64::MAX, "synthetic_factors");
    let mut p_star = Vec::with_capacity(cfg.num_users * r);
    for _ in 0..cfg.num_users {
        p_star.push(root);
        if fixed == 2 {
            p_star.push(gaussian(&mut factor_rng, cfg.user_bias_std));
        }
        p_star.extend((0..free).map(|_| gaussian(&mut factor_rng, scale)));
    }
    let mut q_star = Vec::with_capacity(cfg.num_items * r);
    for _ in 0..cfg.num_items {
        q_star.push((cfg.rating_mean + gaussian(&mut factor_rng, cfg.item_bias_std)) / root);
        if fixed == 2 {
            q_star.push(1.0);
        }
        q_star.extend((0..free).map(|_| gaussian(&mut factor_rng, scale)));
    }

    let mut pop_rng = stream(cfg.seed, 0, u64::MAX, "synthetic_popularity");
    let perm = shuffled(cfg.num_items, &mut pop_rng);
    let mut weights = vec![0.0; cfg.num_items];
    for (rank, &item) in perm.iter().enumerate() {
        weights[item] = ((rank + 1) as f64).powf(-cfg.item_popularity_skew);
    }

    let mut out = SyntheticMf {
        clients: Vec::with_capacity(cfg.num_users),
        p_star,
        q_star,
        rank: r,
    };
    let min = cfg.min_ratings_per_user.unwrap_or(cfg.ratings_per_user);
    let extra = Exp::new(1.0 / (cfg.ratings_per_user - min).max(1) as f64).expect("positive rate");
    for u in 0..cfg.num_users {
        let mut rng = stream(cfg.seed, 0, u as u64, "synthetic_ratings");
        let count = if min == cfg.ratings_per_user {
            min
        } else {
            (min + extra.sample(&mut rng).round() as usize).min(cfg.num_items)
        };
        let items = sample_weighted(&mut rng, cfg.num_items, |j| weights[j], count)
            .map_err(|e| Error::Data(format!("item sampling failed: {e}")))?;
        let examples = items
            .into_iter()
            .enumerate()
            .map(|(t, j)| {
                let noisy = out.clean_rating(u, j) + gaussian(&mut rng, cfg.noise_std);
                Example::rating(j, noisy.round().clamp(1.0, 5.0), t as i64)
            })
            .collect();
        out.clients.push(ClientDataset::new(u as u64, examples));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub num_clients: usize,
    pub sentences_per_client: usize,
    /// Words per sentence before BOS/EOS.
    pub sentence_len: usize,
    /// Words shared by every client, named `w0`, `w1`, ...
    pub core_words: usize,
    /// Words only one client uses; each is always followed by the same core
    /// word, chosen per client.
    pub private_words_per_client: usize,
    /// Probability of emitting a private word where one may appear.
    pub private_rate: f64,
    /// Probability a core word is followed by its fixed global successor.
    pub follow_prob: f64,
    pub seed: u64,
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.sentences_per_client == 0 || self.sentence_len == 0 {
            return Err(Error::config("synthetic_corpus", "counts must be positive"));
        }
        if self.core_words == 0 {
            return Err(Error::config(
                "synthetic_corpus.core_words",
                "must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.private_rate) || !(0.0..=1.0).contains(&self.follow_prob) {
            return Err(Error::config(
                "synthetic_corpus",
                "probabilities must lie in [0, 1]",
            ));
        }
        if self.private_rate > 0.0 && self.private_words_per_client == 0 {
            return Err(Error::config(
                "synthetic_corpus.private_words_per_client",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Sentences where client-private words (outside any small vocabulary)
/// carry client-specific next-word information.
pub fn gen_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<SentenceRecord>> {
    cfg.validate()?;
    let v = cfg.core_words;
    let successor = shuffled(v, &mut stream(cfg.seed, 0, u64::MAX, "corpus_successor"));
    let mut out = Vec::with_capacity(cfg.num_clients * cfg.sentences_per_client);
    for c in 0..cfg.num_clients as u64 {
        let mut rng = stream(cfg.seed, 0, c, "corpus_client");
        let followers: Vec<usize> = (0..cfg.private_words_per_client)
            .map(|_| rng.random_range(0..v))
            .collect();
        for s in 0..cfg.sentences_per_client {
            let mut tokens = Vec::with_capacity(cfg.sentence_len);
            let mut core = rng.random_range(0..v);
            let mut pending: Option<usize> = None;
            tokens.push(format!("w{core}"));
            while tokens.len() < cfg.sentence_len {
                if let Some(k) = pending.take() {
                    core = followers[k];
                    tokens.push(format!("w{core}"));
                } else if rng.random_bool(cfg.private_rate) {
                    let k = rng.random_range(0..cfg.private_words_per_client);
                    tokens.push(format!("c{c}p{k}"));
                    pending = Some(k);
                } else {
                    core = if rng.random_bool(cfg.follow_prob) {
                        successor[core]
                    } else {
                        rng.random_range(0..v)
                    };
                    tokens.push(format!("w{core}"));
                }
            }
            out.push(SentenceRecord {
                client_id: c,
                timestamp: s as i64,
                tokens,
            });
        }
    }
    Ok(out)
}

//! Policy-gradient training on decoded trajectories.
//!
//! Each query yields a batch of trajectories, either the beam-search
//! results (the default: the search output is the reward signal) or
//! independent ancestral samples from the masked per-step distribution.
//! A trajectory's reward is the R-Precision of its decoded titles against
//! the query's gold titles, and one gradient step minimizes
//!
//! ```text
//! loss = -(1/B) sum_tau R(tau) sum_t log pi(a_t | s_t)
//! ```
//!
//! so zero-reward batches change nothing, bit for bit. No baseline is
//! subtracted; the estimator is plain REINFORCE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QueryRecord;
use crate::decoder::{
    constrained_beam_search, encode_query, step_mask, DecodeConfig, DecodeError,
};
use crate::metrics::r_precision;
use crate::policy::{masked_log_softmax, PolicyError, PolicyParams};
use crate::scalar::{count, scalar, Scalar};
use crate::trie::TitleTrie;
use crate::vocab::{TokenId, Vocabulary, EOS, SEP};

#[derive(Debug, Error)]
pub enum ReinforceError {
    #[error("query {id} has no gold titles; skip it")]
    EmptyGold { id: String },
    #[error("cannot update on an empty trajectory batch")]
    EmptyBatch,
    #[error("learning rate must be positive")]
    InvalidLearningRate,
    #[error("non-finite loss; update aborted")]
    NonFinite,
    #[error("no query has gold titles; nothing to train on")]
    NoTrainableQueries,
    #[error("training failed on query {id}: {source}")]
    Query {
        id: String,
        #[source]
        source: Box<ReinforceError>,
    },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How a query's trajectory batch is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    /// Finished beam-search hypotheses, scored as they are.
    Beam,
    /// `beam_size` independent ancestral samples from the policy.
    Sample,
}

/// One decoded episode with everything the update step needs.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub actions: Vec<TokenId>,
    pub masks: Vec<Vec<TokenId>>,
    pub step_log_probs: Vec<S>,
    pub titles: Vec<String>,
    /// R-Precision of `titles` against the owning query's gold titles.
    pub reward: f64,
}

/// Decodes or samples a trajectory batch for one query and scores it.
pub fn collect_trajectories<S: Scalar>(
    params: &PolicyParams<S>,
    vocab: &Vocabulary,
    query: &QueryRecord,
    trie: &TitleTrie,
    config: &DecodeConfig,
    mode: RolloutMode,
    rng_seed: u64,
) -> Result<Vec<Trajectory<S>>, ReinforceError> {
    if query.gold_titles.is_empty() {
        return Err(ReinforceError::EmptyGold {
            id: query.id.clone(),
        });
    }
    let query_ids = encode_query(vocab, &query.input);
    let reward_of = |titles: &[String]| {
        r_precision(titles, &query.gold_titles).expect("gold titles checked non-empty")
    };
    match mode {
        RolloutMode::Beam => {
            let hyps = constrained_beam_search(params, &query_ids, trie, config)?;
            Ok(hyps
                .into_iter()
                .map(|hyp| Trajectory {
                    reward: reward_of(&hyp.titles),
                    actions: hyp.actions,
                    masks: hyp.masks,
                    step_log_probs: hyp.step_log_probs,
                    titles: hyp.titles,
                })
                .collect())
        }
        RolloutMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let mut out = Vec::with_capacity(config.beam_size);
            for _ in 0..config.beam_size {
                let mut traj = sample_rollout(params, &query_ids, trie, config, &mut rng)?;
                traj.reward = reward_of(&traj.titles);
                out.push(traj);
            }
            Ok(out)
        }
    }
}

/// One ancestral sample. Hitting the token budget ends the rollout early;
/// its completed titles still earn reward, in-progress tokens are lost.
fn sample_rollout<S: Scalar>(
    params: &PolicyParams<S>,
    query_ids: &[TokenId],
    trie: &TitleTrie,
    config: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory<S>, ReinforceError> {
    let mut traj = Trajectory {
        actions: Vec::new(),
        masks: Vec::new(),
        step_log_probs: Vec::new(),
        titles: Vec::new(),
        reward: 0.0,
    };
    let mut node = TitleTrie::ROOT;
    while traj.actions.len() < config.max_total_tokens {
        let mask = step_mask(trie, node, traj.titles.len(), config.max_titles_per_beam);
        let logits = params.score_next(query_ids, &traj.actions)?;
        let dist = masked_log_softmax(&logits, &mask)?;
        let action = dist.sample(rng);
        let log_prob = dist.log_prob(action).expect("sampled from the allowed set");
        traj.actions.push(action);
        traj.masks.push(mask);
        traj.step_log_probs.push(log_prob);
        match action {
            EOS | SEP => {
                let title = trie
                    .title_at(node)
                    .expect("completion offered only at terminal nodes");
                traj.titles.push(title.to_string());
                if action == EOS {
                    break;
                }
                node = TitleTrie::ROOT;
            }
            token => {
                node = trie.step(node, token).expect("mask tokens are trie children");
            }
        }
    }
    Ok(traj)
}

/// One REINFORCE update. Returns the stepped parameters, the batch mean
/// reward, and the pre-step loss. A non-finite loss aborts with the
/// parameters untouched.
pub fn reinforce_step<S: Scalar>(
    params: &PolicyParams<S>,
    query_ids: &[TokenId],
    trajectories: &[Trajectory<S>],
    learning_rate: S,
) -> Result<(PolicyParams<S>, f64, S), ReinforceError> {
    if trajectories.is_empty() {
        return Err(ReinforceError::EmptyBatch);
    }
    if learning_rate <= S::zero() {
        return Err(ReinforceError::InvalidLearningRate);
    }
    let inv_batch = S::one() / count(trajectories.len());
    let mut grad = vec![S::zero(); params.theta().len()];
    let mut loss = S::zero();
    let mut reward_sum = 0.0;
    for traj in trajectories {
        reward_sum += traj.reward;
        let weight = scalar::<S>(traj.reward) * inv_batch;
        if weight == S::zero() {
            // Zero reward contributes nothing; skipping it keeps the
            // all-zero batch update exactly a no-op.
            continue;
        }
        let nll =
            params.accumulate_weighted_nll(query_ids, &traj.actions, &traj.masks, weight, &mut grad)?;
        loss = loss + weight * nll;
    }
    if !loss.is_finite() {
        return Err(ReinforceError::NonFinite);
    }
    let mut next = params.clone();
    for (slot, g) in next.theta_mut().iter_mut().zip(&grad) {
        *slot = *slot - learning_rate * *g;
    }
    Ok((next, reward_sum / trajectories.len() as f64, loss))
}

/// Epoch counters for the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub loss: f64,
}

/// Epoch/step plan for a REINFORCE run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub mode: RolloutMode,
    pub seed: u64,
}

/// Runs `epochs` passes over the queries, one update per query, visiting
/// queries in a per-epoch shuffled order. Queries without gold titles are
/// skipped up front. Fully deterministic for a fixed schedule.
pub fn train_reinforce<S: Scalar>(
    params: &PolicyParams<S>,
    vocab: &Vocabulary,
    queries: &[QueryRecord],
    trie: &TitleTrie,
    config: &DecodeConfig,
    schedule: &RlSchedule,
) -> Result<(PolicyParams<S>, Vec<EpochStats>), ReinforceError> {
    let mut current = params.clone();
    let mut trace = Vec::with_capacity(schedule.epochs);
    if schedule.epochs == 0 {
        return Ok((current, trace));
    }
    let trainable: Vec<usize> = (0..queries.len())
        .filter(|&i| !queries[i].gold_titles.is_empty())
        .collect();
    if trainable.is_empty() {
        return Err(ReinforceError::NoTrainableQueries);
    }
    let lr = scalar::<S>(schedule.learning_rate);
    for epoch in 0..schedule.epochs {
        // The shuffle stream uses index = queries.len(), which no query
        // index can collide with.
        let shuffle_seed = crate::seeding::derive_seed(schedule.seed, epoch as u64, queries.len() as u64);
        let mut order = trainable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        for &qi in &order {
            let query = &queries[qi];
            let in_context = |source: ReinforceError| ReinforceError::Query {
                id: query.id.clone(),
                source: Box::new(source),
            };
            let rollout_seed = crate::seeding::derive_seed(schedule.seed, epoch as u64, qi as u64);
            let trajectories = collect_trajectories(
                &current,
                vocab,
                query,
                trie,
                config,
                schedule.mode,
                rollout_seed,
            )
            .map_err(in_context)?;
            let query_ids = encode_query(vocab, &query.input);
            let (next, mean_reward, loss) =
                reinforce_step(&current, &query_ids, &trajectories, lr).map_err(in_context)?;
            current = next;
            reward_sum += mean_reward;
            loss_sum += loss.to_f64().expect("loss convertible to f64");
        }
        trace.push(EpochStats {
            epoch,
            mean_reward: reward_sum / order.len() as f64,
            loss: loss_sum / order.len() as f64,
        });
    }
    Ok((current, trace))
}

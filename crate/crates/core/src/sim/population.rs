use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dale::{CandidateItem, Responder};
use crate::decoder::{DecoderWeights, Dims, ForwardCache};
use crate::error::{contract, Result};
use crate::likelihoods::{inverse_link, sample_unchecked, ThetaVector};
use crate::rng::{self, stream};
use crate::task::{Outcome, TrialRecord, THETA_DIM};
use crate::vi::{standard_normal_vec, ParticipantData, PopulationData};

/// Ground truth of a simulated participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Latent(Vec<f64>),
    Theta(ThetaVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParticipant {
    pub id: String,
    pub truth: Truth,
    pub seed: u64,
}

impl SyntheticParticipant {
    pub fn theta(&self, generator: &DecoderWeights) -> Result<ThetaVector> {
        match &self.truth {
            Truth::Latent(x) => generator.decode(x),
            Truth::Theta(t) => {
                t.validate()?;
                Ok(*t)
            }
        }
    }

    /// A responder answering from this participant's true parameters, on its
    /// own stream labelled by `run`.
    pub fn responder(&self, generator: &DecoderWeights, run: u64) -> Result<SyntheticResponder> {
        Ok(SyntheticResponder::new(self.theta(generator)?, rng::derive_seed(self.seed, &[stream::RESPONDER, run])))
    }
}

/// Answers items by sampling from fixed true parameters.
#[derive(Debug, Clone)]
pub struct SyntheticResponder {
    pub theta: ThetaVector,
    rng: rng::Rng,
}

impl SyntheticResponder {
    pub fn new(theta: ThetaVector, seed: u64) -> Self {
        Self { theta, rng: rng::rng(seed) }
    }
}

impl Responder for SyntheticResponder {
    fn respond(&mut self, item: &CandidateItem) -> Result<Outcome> {
        item.validate()?;
        Ok(sample_unchecked(self.theta.params(item.task_id), item.stimulus, &mut self.rng))
    }
}

/// Typical centre of each constrained parameter for the constructed generator.
pub const GENERATOR_CENTER: ThetaVector =
    ThetaVector([6.5, 0.3, 6.7, 0.35, -5.0, 1.0, -4.0, 1.2, 0.8, 0.75, 0.85, 0.7]);

/// Spread of each raw (pre-link) output over the latent prior.
pub const GENERATOR_RAW_SPREAD: [f64; THETA_DIM] = [0.25, 0.3, 0.25, 0.3, 1.0, 0.3, 1.0, 0.3, 0.8, 0.8, 0.8, 0.8];

/// Builds a decoder whose outputs over `x ~ N(0, I)` have the given raw
/// means (`inverse_link(center)`) and standard deviations.
pub fn constructed_generator(seed: u64, center: &ThetaVector, raw_spread: &[f64; THETA_DIM]) -> Result<DecoderWeights> {
    let dims = Dims::default();
    let raw_center = inverse_link(center)?;
    let mut w = DecoderWeights::init(dims, seed);
    w.b3_mut().iter_mut().for_each(|b| *b = 0.0);
    let mut r = rng::rng_from(seed, &[stream::POPULATION, u64::MAX]);
    let n = 4000;
    let mut cache = ForwardCache::default();
    let outs: Vec<[f64; THETA_DIM]> = (0..n)
        .map(|_| {
            let x = standard_normal_vec(dims.latent, &mut r);
            w.forward_cached(&x, &mut cache);
            cache.out
        })
        .collect();
    let h = dims.hidden;
    for j in 0..THETA_DIM {
        let mean = outs.iter().map(|o| o[j]).sum::<f64>() / n as f64;
        let sd = (outs.iter().map(|o| (o[j] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd < 1e-9 {
            return Err(contract(format!("generator output {j} is constant; try another seed")));
        }
        let scale = raw_spread[j] / sd;
        for v in &mut w.w3_mut()[j * h..(j + 1) * h] {
            *v *= scale;
        }
        w.b3_mut()[j] = raw_center[j] - scale * mean;
    }
    Ok(w)
}

/// The default generator used by the simulations.
pub fn default_generator(seed: u64) -> Result<DecoderWeights> {
    constructed_generator(seed, &GENERATOR_CENTER, &GENERATOR_RAW_SPREAD)
}

/// Draws `n` participants with `x* ~ N(0, I)`.
pub fn draw_participants(n: usize, seed: u64, id_prefix: &str) -> Vec<SyntheticParticipant> {
    (0..n)
        .map(|i| {
            let mut r = rng::rng_from(seed, &[stream::POPULATION, i as u64]);
            let x = standard_normal_vec(crate::decoder::DEFAULT_LATENT_DIM, &mut r);
            SyntheticParticipant { id: format!("{id_prefix}{i:04}"), truth: Truth::Latent(x), seed: r.random() }
        })
        .collect()
}

/// Simulates a fixed item list for every participant.
pub fn simulate_items(
    participants: &[SyntheticParticipant],
    generator: &DecoderWeights,
    items: &[CandidateItem],
    run: u64,
) -> Result<PopulationData> {
    let mut out = Vec::with_capacity(participants.len());
    for p in participants {
        let mut responder = p.responder(generator, run)?;
        let trials = items
            .iter()
            .enumerate()
            .map(|(i, item)| Ok(TrialRecord::new(item.task_id, item.stimulus, responder.respond(item)?, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        out.push(ParticipantData { id: p.id.clone(), trials });
    }
    Ok(PopulationData { participants: out })
}

/// `n` participants answering the same fixed item list, plus their truth.
pub fn generate_population(
    n: usize,
    generator: &DecoderWeights,
    items: &[CandidateItem],
    seed: u64,
) -> Result<(PopulationData, Vec<SyntheticParticipant>)> {
    if n == 0 {
        return Err(contract("population size must be at least 1"));
    }
    let participants = draw_participants(n, seed, "p");
    let data = simulate_items(&participants, generator, items, 0)?;
    Ok((data, participants))
}

//! Deep latent variable model for cognitive test batteries, with active
//! item selection by mutual information.

pub mod adam;
pub mod dale;
pub mod decoder;
pub mod error;
pub mod imle;
pub mod io;
pub mod likelihoods;
pub mod rng;
pub mod sim;
pub mod task;
pub mod vi;

pub use dale::{
    candidate_space, run_session, select_next, update_latent, CandidateItem, MiConfig, MiEstimate, Phase, Responder,
    SelectionPolicy, Session, SessionConfig, SessionLogRecord, SessionResult, SessionState, PRIMER, PRIMER_LEN,
};
pub use decoder::{Checkpoint, DecoderWeights, Dims};
pub use error::{Error, Result};
pub use imle::{fit_participant, ImleFit};
pub use likelihoods::{link, log_prob, FamilyParams, ThetaVector};
pub use task::{Family, Outcome, Stimulus, TaskId, TaskRegistry, TaskSpec, TrialRecord, THETA_DIM};
pub use vi::{train, LatentGaussian, ParticipantData, PopulationData, TrainConfig, TrainResult};

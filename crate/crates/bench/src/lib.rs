//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use dlvm::dale::Responder;
use dlvm::sim::{default_generator, draw_participants};
use dlvm::{DecoderWeights, Session, SessionConfig, SessionState};

pub fn generator() -> DecoderWeights {
    default_generator(3).expect("generator")
}

/// A session state with `n` answered items from a synthetic participant.
pub fn answered_state(weights: &DecoderWeights, n: usize) -> SessionState {
    let mut session = Session::start(Arc::new(weights.clone()), SessionConfig::default()).expect("session");
    let mut responder = draw_participants(1, 5, "b")[0].responder(weights, 0).expect("responder");
    for _ in 0..n {
        let item = session.pending().expect("pending item");
        let outcome = responder.respond(&item).expect("outcome");
        session.submit(outcome).expect("submit");
    }
    session.state().clone()
}

//! Per-session files under the data directory: `<id>.meta.json` written once
//! at creation and `<id>.jsonl`, one appended line per accepted response.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dlvm::io::{append_session_record, read_session_log};
use dlvm::{DecoderWeights, Session, SessionConfig, SessionLogRecord};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub participant_label: String,
    pub created_ms: u64,
    pub model_sha256: String,
    pub config: SessionConfig,
}

#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn open(dir: &Path) -> dlvm::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.meta.json"))
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn create(&self, meta: &SessionMeta) -> dlvm::Result<()> {
        let tmp = self.dir.join(format!("{}.meta.json.tmp", meta.session_id));
        std::fs::write(&tmp, serde_json::to_vec_pretty(meta)?)?;
        std::fs::rename(&tmp, self.meta_path(&meta.session_id))?;
        std::fs::File::create(self.log_path(&meta.session_id))?;
        Ok(())
    }

    pub fn append(&self, id: &str, record: &SessionLogRecord) -> dlvm::Result<()> {
        append_session_record(&self.log_path(id), record)
    }

    /// All stored sessions with their logs.
    pub fn load_all(&self) -> dlvm::Result<Vec<(SessionMeta, Vec<SessionLogRecord>)>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if !name.ends_with(".meta.json") {
                continue;
            }
            let meta: SessionMeta = serde_json::from_slice(&std::fs::read(&path)?)?;
            let log_path = self.log_path(&meta.session_id);
            let log = if log_path.exists() { read_session_log(&log_path)? } else { Vec::new() };
            out.push((meta, log));
        }
        out.sort_by(|a, b| (a.0.created_ms, &a.0.session_id).cmp(&(b.0.created_ms, &b.0.session_id)));
        Ok(out)
    }
}

/// Rebuilds a session from its log and checks that every replayed posterior
/// matches the logged one bit for bit.
pub fn replay(weights: Arc<DecoderWeights>, meta: &SessionMeta, log: &[SessionLogRecord]) -> dlvm::Result<Session> {
    let session = Session::replay(weights, meta.config, log)?;
    for (a, b) in session.log().iter().zip(log) {
        let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
        if !same(&a.q_mean, &b.q_mean) || !same(&a.q_log_s, &b.q_log_s) {
            return Err(dlvm::Error::Contract(format!(
                "replay of session {} diverged from its log at index {}",
                meta.session_id, b.index
            )));
        }
    }
    Ok(session)
}

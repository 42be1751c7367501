use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Federation, Participant, PhaseStats};
use crate::data::EvalMetrics;
use crate::knowledge::ParticipantId;

/// Bumped whenever the round-log columns or summary fields change.
pub const SUMMARY_SCHEMA: u32 = 1;

/// One CSV row: a participant's view of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participant: ParticipantId,
    pub role: String,
    /// Mean private fine-tuning loss (clients only).
    pub local_loss: Option<f64>,
    pub ft_loss: f64,
    pub kd_loss: f64,
    pub combined_loss: f64,
    pub steps: usize,
    /// Size of the selective knowledge set used this round.
    pub selected: usize,
    pub accuracy: f64,
    pub perplexity: f64,
    pub upload_floats: usize,
    pub download_floats: usize,
    pub upload_bytes: usize,
    pub download_bytes: usize,
}

impl RoundRecord {
    pub(super) fn new(
        round: usize,
        p: &Participant,
        stats: PhaseStats,
        local_loss: Option<f64>,
        selected: usize,
        metrics: EvalMetrics,
    ) -> Self {
        RoundRecord {
            round,
            participant: p.id,
            role: p.role.as_str().to_string(),
            local_loss,
            ft_loss: stats.ft,
            kd_loss: stats.kd,
            combined_loss: stats.total,
            steps: stats.steps,
            selected,
            accuracy: metrics.accuracy,
            perplexity: metrics.perplexity,
            upload_floats: 0,
            download_floats: 0,
            upload_bytes: 0,
            download_bytes: 0,
        }
    }

    pub fn write_csv<W: Write>(rows: &[RoundRecord], w: W) -> Result<(), csv::Error> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(CSV_COLUMNS)?;
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const CSV_COLUMNS: [&str; 15] = [
    "round",
    "participant",
    "role",
    "local_loss",
    "ft_loss",
    "kd_loss",
    "combined_loss",
    "steps",
    "selected",
    "accuracy",
    "perplexity",
    "upload_floats",
    "download_floats",
    "upload_bytes",
    "download_bytes",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunicationCost {
    pub upload_floats: usize,
    pub download_floats: usize,
    pub upload_bytes: usize,
    pub download_bytes: usize,
}

impl CommunicationCost {
    pub fn total_floats(&self) -> usize {
        self.upload_floats + self.download_floats
    }
}

/// Sums the traffic recorded in the round log.
pub fn communication_cost(rows: &[RoundRecord]) -> CommunicationCost {
    rows.iter().fold(CommunicationCost::default(), |acc, r| CommunicationCost {
        upload_floats: acc.upload_floats + r.upload_floats,
        download_floats: acc.download_floats + r.download_floats,
        upload_bytes: acc.upload_bytes + r.upload_bytes,
        download_bytes: acc.download_bytes + r.download_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSummary {
    pub id: ParticipantId,
    pub role: String,
    pub tokenizer: String,
    pub vocab_size: usize,
    pub hidden: usize,
    pub rank: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub accuracy: f64,
    pub perplexity: f64,
    pub base_digest: String,
    pub adapter_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: u32,
    pub mode: String,
    pub seed: u64,
    pub world_seed: u64,
    pub rounds: usize,
    pub log_rows: usize,
    pub participants: Vec<ParticipantSummary>,
    pub communication: CommunicationCost,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunSummary {
    pub(super) fn new(fed: &Federation, rows: &[RoundRecord], eval: &[(ParticipantId, EvalMetrics)]) -> Self {
        let participants = fed
            .participants()
            .map(|p| {
                let m = eval.iter().find(|e| e.0 == p.id).map(|e| e.1);
                ParticipantSummary {
                    id: p.id,
                    role: p.role.as_str().to_string(),
                    tokenizer: format!("{}:{}", p.model.tokenizer().kind().as_str(), p.model.vocab_size()),
                    vocab_size: p.model.vocab_size(),
                    hidden: p.model.hidden_size(),
                    rank: p.model.adapter.rank(),
                    trainable_params: p.model.trainable_params(),
                    total_params: p.model.total_params(),
                    accuracy: m.map_or(f64::NAN, |m| m.accuracy),
                    perplexity: m.map_or(f64::NAN, |m| m.perplexity),
                    base_digest: hex(&p.base_digest()),
                    adapter_digest: hex(&p.model.adapter.digest()),
                }
            })
            .collect();
        RunSummary {
            schema: SUMMARY_SCHEMA,
            mode: fed.config.mode.as_str().to_string(),
            seed: fed.config.seed,
            world_seed: fed.config.task.seed,
            rounds: fed.config.rounds,
            log_rows: rows.len(),
            participants,
            communication: communication_cost(rows),
        }
    }
}

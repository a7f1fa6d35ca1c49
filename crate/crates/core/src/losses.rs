//! Decoder likelihood, order-preserving ranking and reconstruction losses.

use serde::{Deserialize, Serialize};

use crate::dataio::AlbumExample;
use crate::error::{Error, Result};
use crate::model::decoder::{encode_album, Attender};
use crate::model::{reconstruct, sentence_log_prob, AttentionState, Bound, FlagMode};
use crate::tape::{Tape, Var};

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_MU: f64 = 0.8;
pub const RANK_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub rank: f64,
    pub recon: f64,
    pub total: f64,
    pub word_count: usize,
}

impl LossReport {
    pub fn per_word_nll(&self) -> f64 {
        if self.word_count == 0 {
            0.0
        } else {
            self.nll / self.word_count as f64
        }
    }

    pub fn merge(&mut self, other: &LossReport) {
        self.nll += other.nll;
        self.rank += other.rank;
        self.recon += other.recon;
        self.total += other.total;
        self.word_count += other.word_count;
    }
}

/// Sum of `−log p` over positions where `mask` is set.
pub fn nll_loss(log_probs: &[f64], mask: &[bool]) -> f64 {
    log_probs.iter().zip(mask).filter(|(_, m)| **m).map(|(lp, _)| -lp).sum()
}

/// Hinge loss pushing each true sentence at least one nat above its shuffled counterpart.
pub fn rank_loss(pos: &[f64], neg: &[f64]) -> f64 {
    pos.iter().zip(neg).map(|(p, n)| (RANK_MARGIN - p + n).max(0.0)).sum()
}

/// Summed squared Euclidean distance between aligned representations.
pub fn recon_loss(z: &[Vec<f64>], z_hat: &[Vec<f64>]) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::dim("reconstructions", &[z.len()], &[z_hat.len()]));
    }
    let mut total = 0.0;
    for (a, b) in z.iter().zip(z_hat) {
        if a.len() != b.len() {
            return Err(Error::dim("reconstruction", &[a.len()], &[b.len()]));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total)
}

pub fn total_loss(report: &LossReport, lambda: f64, mu: f64) -> f64 {
    report.nll + lambda * report.rank + mu * report.recon
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            mu: DEFAULT_MU,
        }
    }
}

/// Loss terms of one album/reference pair as tape nodes.
#[derive(Debug, Clone)]
pub struct AlbumLoss {
    pub nll: Var,
    pub rank: Option<Var>,
    pub recon: Option<Var>,
    pub total: Var,
    pub word_count: usize,
    /// Teacher-forced log-probability of each true sentence.
    pub sentence_log_probs: Vec<f64>,
    /// Log-probability of the shuffled sentence scored at each position.
    pub negative_log_probs: Vec<f64>,
}

impl AlbumLoss {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            nll: tape.scalar(self.nll),
            rank: self.rank.map_or(0.0, |v| tape.scalar(v)),
            recon: self.recon.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(self.total),
            word_count: self.word_count,
        }
    }
}

/// Builds the weighted objective for one reference story of `album`.
///
/// `derangement[j]` names the reference sentence scored at position j for the
/// ranking term; it is skipped when λ is zero or no derangement is given. The
/// reconstruction term is built only when µ is positive.
pub fn album_objective(
    tape: &mut Tape,
    p: &Bound,
    album: &AlbumExample,
    reference: usize,
    derangement: Option<&[usize]>,
    weights: LossWeights,
    mode: &FlagMode,
) -> Result<AlbumLoss> {
    let story = album
        .stories
        .get(reference)
        .ok_or_else(|| Error::Config(format!("album {} has no reference {reference}", album.album_id)))?;
    let n = story.len();
    if n != p.config.sentences {
        return Err(Error::dim("story sentences", &[p.config.sentences], &[n]));
    }
    let enc = encode_album(tape, p, album, mode)?;
    let attender = Attender::new(tape, p, &enc.memory)?;
    let mut state = AttentionState::initial(tape, p, &enc.photos);

    let use_rank = weights.lambda > 0.0 && derangement.is_some();
    let use_recon = weights.mu > 0.0;
    let mut positives = Vec::with_capacity(n);
    let mut hinges = Vec::new();
    let mut recon_terms = Vec::new();
    let mut sentence_log_probs = Vec::with_capacity(n);
    let mut negative_log_probs = Vec::new();
    let mut word_count = 0;

    for (j, sentence) in story.iter().enumerate() {
        let (z, _, next) = attender.step(tape, p, &state)?;
        state = next;
        let score = sentence_log_prob(tape, p, z, sentence)?;
        word_count += sentence.len();
        sentence_log_probs.push(tape.scalar(score.log_prob));
        positives.push(score.log_prob);

        if use_rank {
            let perm = derangement.expect("checked above");
            let shuffled = &story[perm[j]];
            let neg = sentence_log_prob(tape, p, z, shuffled)?;
            negative_log_probs.push(tape.scalar(neg.log_prob));
            let gap = tape.sub(neg.log_prob, score.log_prob);
            let margin = tape.constant_vec(vec![RANK_MARGIN]);
            let pre = tape.add(margin, gap);
            hinges.push(tape.relu(pre));
        }
        if use_recon {
            let z_hat = reconstruct(tape, p, &score.logits)?;
            let diff = tape.sub(z_hat, z);
            recon_terms.push(tape.dot(diff, diff));
        }
    }

    let total_lp = tape.add_all(&positives);
    let nll = tape.scale(total_lp, -1.0);
    let mut total = nll;
    let rank = if use_rank {
        let r = tape.add_all(&hinges);
        let w = tape.scale(r, weights.lambda);
        total = tape.add(total, w);
        Some(r)
    } else {
        None
    };
    let recon = if use_recon {
        let r = tape.add_all(&recon_terms);
        let w = tape.scale(r, weights.mu);
        total = tape.add(total, w);
        Some(r)
    } else {
        None
    };
    Ok(AlbumLoss {
        nll,
        rank,
        recon,
        total,
        word_count,
        sentence_log_probs,
        negative_log_probs,
    })
}

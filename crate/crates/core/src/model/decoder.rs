//! Attentive album summarization and the sentence decoder.

use std::cmp::Ordering;

use crate::dataio::{AlbumExample, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{AttentionMemory, Bound, FlagMode, Model, PhotoEncoding, SceneSegmentation};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    pub h: Var,
    /// Previous attention weights padded to `L_max`; all zero before the first step.
    pub alpha_prev: Var,
    pub step: usize,
}

impl AttentionState {
    /// Starts from a linear map of `[→h_m; ←h_1]`.
    pub fn initial(tape: &mut Tape, p: &Bound, photos: &PhotoEncoding) -> Self {
        let both = tape.concat(&[photos.fwd_final(), photos.bwd_final()]);
        let proj = tape.matvec(p.attn_init_w, both);
        let h = tape.add(proj, p.attn_init_b);
        let alpha_prev = tape.zeros(p.config.attn_len());
        Self { h, alpha_prev, step: 0 }
    }
}

/// Attention memory with the state-independent half of the scores precomputed.
pub struct Attender<'a> {
    memory: &'a AttentionMemory,
    /// `W_αr r_l + b_α` for valid columns.
    projected: Vec<(usize, Var)>,
}

impl<'a> Attender<'a> {
    pub fn new(tape: &mut Tape, p: &Bound, memory: &'a AttentionMemory) -> Result<Self> {
        let projected: Vec<(usize, Var)> = memory
            .rows
            .iter()
            .enumerate()
            .filter_map(|(l, r)| r.map(|r| (l, r)))
            .map(|(l, r)| {
                let wr = tape.matvec(p.w_alpha_r, r);
                (l, tape.add(wr, p.b_alpha))
            })
            .collect();
        if projected.is_empty() {
            return Err(Error::InvalidMask);
        }
        Ok(Self { memory, projected })
    }

    /// One summarization step: returns `z_j`, `α^j` and the advanced state.
    pub fn step(&self, tape: &mut Tape, p: &Bound, state: &AttentionState) -> Result<(Var, Var, AttentionState)> {
        let h = p.attn.step(tape, state.alpha_prev, state.h)?;
        let query = tape.matvec(p.w_alpha_h, h);
        let scores: Vec<Var> = self
            .projected
            .iter()
            .map(|(_, proj)| {
                let pre = tape.add(*proj, query);
                let act = tape.tanh(pre);
                tape.dot(p.w_alpha, act)
            })
            .collect();
        let packed = tape.concat(&scores);
        let positions: Vec<usize> = self.projected.iter().map(|(l, _)| *l).collect();
        let logits = tape.scatter(packed, &positions, self.memory.mask.len());
        let alpha = tape.masked_softmax(logits, &self.memory.mask)?;
        let z = tape.vecmat(alpha, self.memory.columns);
        Ok((
            z,
            alpha,
            AttentionState {
                h,
                alpha_prev: alpha,
                step: state.step + 1,
            },
        ))
    }
}

pub fn attend(tape: &mut Tape, p: &Bound, memory: &AttentionMemory, state: &AttentionState) -> Result<(Var, Var, AttentionState)> {
    Attender::new(tape, p, memory)?.step(tape, p, state)
}

/// Word distribution logits after reading `prev` from state `h`.
pub fn decode_step(tape: &mut Tape, p: &Bound, z: Var, prev: usize, h: Var) -> Result<(Var, Var)> {
    let vocab = p.config.vocab_size;
    if prev >= vocab {
        return Err(Error::TokenOutOfRange { id: prev, size: vocab });
    }
    let e = tape.row(p.embed, prev);
    let x = tape.concat(&[e, z]);
    let h = p.dec.step(tape, x, h)?;
    let hz = tape.concat(&[h, z]);
    let a = tape.matvec(p.mlp_w1, hz);
    let a = tape.add(a, p.mlp_b1);
    let hidden = tape.tanh(a);
    let d = tape.matvec(p.mlp_w2, hidden);
    let logits = tape.add(d, p.mlp_b2);
    Ok((h, logits))
}

#[derive(Debug, Clone)]
pub struct SentenceScore {
    /// Sum of per-token log-probabilities, including the EOS term.
    pub log_prob: Var,
    pub token_log_probs: Vec<Var>,
    pub logits: Vec<Var>,
}

/// Teacher-forced log-probability of `target` (ending in EOS) given `z`.
pub fn sentence_log_prob(tape: &mut Tape, p: &Bound, z: Var, target: &[usize]) -> Result<SentenceScore> {
    if target.is_empty() {
        return Err(Error::Empty("target sentence"));
    }
    let vocab = p.config.vocab_size;
    if let Some(&id) = target.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, size: vocab });
    }
    let mut h = tape.zeros(p.config.dec_hidden);
    let mut prev = BOS;
    let mut token_log_probs = Vec::with_capacity(target.len());
    let mut logits = Vec::with_capacity(target.len());
    for &word in target {
        let (h_next, d) = decode_step(tape, p, z, prev, h)?;
        let lp = tape.log_softmax(d);
        token_log_probs.push(tape.pick(lp, word));
        logits.push(d);
        h = h_next;
        prev = word;
    }
    let log_prob = tape.add_all(&token_log_probs);
    Ok(SentenceScore {
        log_prob,
        token_log_probs,
        logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoryHypothesis {
    /// Token ids per sentence, ending in EOS unless the length cap was hit.
    pub sentences: Vec<Vec<usize>>,
    pub token_log_probs: Vec<Vec<f64>>,
    /// Attention weights per sentence over the valid columns (photos, then true scenes).
    pub alphas: Vec<Vec<f64>>,
    pub logits: Vec<Vec<Vec<f64>>>,
    pub flags: Vec<bool>,
    pub soft: Vec<f64>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct Decoded {
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    logits: Vec<Vec<f64>>,
}

fn greedy_sentence(tape: &mut Tape, p: &Bound, z: Var) -> Result<Decoded> {
    let cap = p.config.max_words + 1;
    let mut h = tape.zeros(p.config.dec_hidden);
    let mut prev = BOS;
    let mut out = Decoded {
        tokens: vec![],
        log_probs: vec![],
        logits: vec![],
    };
    while out.tokens.len() < cap {
        let (h_next, d) = decode_step(tape, p, z, prev, h)?;
        let lp = tape.log_softmax(d);
        let word = argmax(tape.value(lp));
        out.log_probs.push(tape.value(lp)[word]);
        out.logits.push(tape.value(d).to_vec());
        out.tokens.push(word);
        h = h_next;
        prev = word;
        if word == EOS {
            break;
        }
    }
    Ok(out)
}

struct Beam {
    decoded: Decoded,
    score: f64,
    h: Var,
    done: bool,
}

/// (score, beam index, token, (new state, logits, token log-prob)).
type Candidate = (f64, usize, Option<usize>, Option<(Var, Vec<f64>, f64)>);

fn beam_sentence(tape: &mut Tape, p: &Bound, z: Var, width: usize) -> Result<Decoded> {
    let cap = p.config.max_words + 1;
    let width = width.max(1);
    let mut beams = vec![Beam {
        decoded: Decoded {
            tokens: vec![],
            log_probs: vec![],
            logits: vec![],
        },
        score: 0.0,
        h: tape.zeros(p.config.dec_hidden),
        done: false,
    }];
    while beams.iter().any(|b| !b.done) {
        let mut candidates: Vec<Candidate> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                candidates.push((b.score, bi, None, None));
                continue;
            }
            let prev = b.decoded.tokens.last().copied().unwrap_or(BOS);
            let (h_next, d) = decode_step(tape, p, z, prev, b.h)?;
            let lp = tape.log_softmax(d);
            let logits = tape.value(d).to_vec();
            for (w, l) in tape.value(lp).iter().enumerate() {
                candidates.push((b.score + l, bi, Some(w), Some((h_next, logits.clone(), *l))));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for (score, bi, word, extra) in candidates.into_iter().take(width) {
            let parent = &beams[bi];
            match (word, extra) {
                (Some(w), Some((h, logits, l))) => {
                    let mut decoded = Decoded {
                        tokens: parent.decoded.tokens.clone(),
                        log_probs: parent.decoded.log_probs.clone(),
                        logits: parent.decoded.logits.clone(),
                    };
                    decoded.tokens.push(w);
                    decoded.log_probs.push(l);
                    decoded.logits.push(logits);
                    let done = w == EOS || decoded.tokens.len() >= cap;
                    next.push(Beam { decoded, score, h, done });
                }
                _ => next.push(Beam {
                    decoded: Decoded {
                        tokens: parent.decoded.tokens.clone(),
                        log_probs: parent.decoded.log_probs.clone(),
                        logits: parent.decoded.logits.clone(),
                    },
                    score,
                    h: parent.h,
                    done: true,
                }),
            }
        }
        beams = next;
    }
    let best = beams.into_iter().next().expect("non-empty beam");
    Ok(best.decoded)
}

/// Everything the decoder needs from the encoders for one album.
pub struct Encoded {
    pub photos: PhotoEncoding,
    pub scenes: SceneSegmentation,
    pub memory: AttentionMemory,
}

pub fn encode_album(tape: &mut Tape, p: &Bound, album: &AlbumExample, mode: &FlagMode) -> Result<Encoded> {
    if album.features.len() > p.config.max_photos {
        return Err(Error::Config(format!(
            "album {} has {} photos, model accepts {}",
            album.album_id,
            album.features.len(),
            p.config.max_photos
        )));
    }
    let feats: Vec<Var> = album.features.iter().map(|f| tape.constant(f)).collect();
    let photos = super::encode_photos(tape, p, &feats)?;
    let scenes = super::encode_scenes(tape, p, &photos.v, mode)?;
    let memory = AttentionMemory::build(tape, &p.config, &photos, &scenes);
    Ok(Encoded { photos, scenes, memory })
}

pub fn generate_story(model: &Model, store: &ParamStore, album: &AlbumExample, mode: DecodeMode) -> Result<StoryHypothesis> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, store)?;
    let enc = encode_album(&mut tape, &p, album, &FlagMode::Detect)?;
    let attender = Attender::new(&mut tape, &p, &enc.memory)?;
    let mut state = AttentionState::initial(&mut tape, &p, &enc.photos);
    let mut story = StoryHypothesis {
        sentences: vec![],
        token_log_probs: vec![],
        alphas: vec![],
        logits: vec![],
        flags: enc.scenes.flags.clone(),
        soft: enc.scenes.soft.clone(),
    };
    for _ in 0..model.config.sentences {
        let (z, alpha, next) = attender.step(&mut tape, &p, &state)?;
        state = next;
        let decoded = match mode {
            DecodeMode::Greedy => greedy_sentence(&mut tape, &p, z)?,
            DecodeMode::Beam(w) => beam_sentence(&mut tape, &p, z, w)?,
        };
        story.alphas.push(
            tape.value(alpha)
                .iter()
                .zip(&enc.memory.mask)
                .filter(|(_, m)| **m)
                .map(|(a, _)| *a)
                .collect(),
        );
        story.sentences.push(decoded.tokens);
        story.token_log_probs.push(decoded.log_probs);
        story.logits.push(decoded.logits);
    }
    Ok(story)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{names, ModelConfig};
    use crate::params::{ATTENTION, SENTENCE_DECODER};
    use crate::tape::sigmoid;
    use crate::tensor::NumArray;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize) -> Model {
        Model::new(ModelConfig {
            feature_dim: 3,
            photo_hidden: 2,
            attn_hidden: 3,
            attn_proj: 3,
            embed_dim: 2,
            dec_hidden: 3,
            mlp_hidden: 4,
            vocab_size: vocab,
            max_photos: 3,
            max_words: 6,
            sentences: 3,
        })
        .unwrap()
    }

    fn album(seed: u64, m: usize) -> AlbumExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AlbumExample {
            album_id: "x".into(),
            features: (0..m)
                .map(|_| NumArray::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect(),
            stories: vec![],
            reference_tokens: vec![],
            gold_boundaries: None,
        }
    }

    /// Memory with hand-picked rows at the given positions.
    fn memory(tape: &mut Tape, rows: &[(usize, Vec<f64>)], len: usize, width: usize) -> AttentionMemory {
        let mut slots = vec![None; len];
        for (pos, r) in rows {
            slots[*pos] = Some(tape.constant_vec(r.clone()));
        }
        let zero = tape.zeros(width);
        let stacked: Vec<Var> = slots.iter().map(|r| r.unwrap_or(zero)).collect();
        let columns = tape.stack(&stacked);
        let mask = slots.iter().map(Option::is_some).collect();
        AttentionMemory { columns, rows: slots, mask }
    }

    #[test]
    fn single_valid_column_is_selected() {
        let m = model(8);
        let store = m.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, &store).unwrap();
        let mem = memory(&mut tape, &[(4, vec![0.1, 0.2, 0.3, 0.4])], 7, 4);
        let h = tape.zeros(3);
        let state = AttentionState { h, alpha_prev: tape.zeros(7), step: 0 };
        let (z, alpha, next) = attend(&mut tape, &p, &mem, &state).unwrap();
        assert_eq!(tape.value(alpha), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(tape.value(z), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(next.step, 1);

        let empty = memory(&mut tape, &[], 7, 4);
        assert!(matches!(attend(&mut tape, &p, &empty, &state), Err(Error::InvalidMask)));
    }

    #[test]
    fn zero_scoring_vector_gives_uniform_weights() {
        let m = model(8);
        let mut store = m.init(&mut ChaCha8Rng::seed_from_u64(1));
        store.insert(ATTENTION, names::W_ALPHA, NumArray::zeros(&[3]));
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, &store).unwrap();
        let rows = vec![(0, vec![1.0, 0.0, 2.0, 4.0]), (1, vec![3.0, 1.0, 0.0, 0.0]), (6, vec![-1.0, 2.0, 1.0, 1.0])];
        let mem = memory(&mut tape, &rows, 7, 4);
        let state = AttentionState { h: tape.zeros(3), alpha_prev: tape.zeros(7), step: 0 };
        let (z, alpha, _) = attend(&mut tape, &p, &mem, &state).unwrap();
        let a = tape.value(alpha);
        for l in [0, 1, 6] {
            assert!((a[l] - 1.0 / 3.0).abs() < 1e-15);
        }
        let expect = [1.0, 1.0, 1.0, 5.0 / 3.0];
        for (g, e) in tape.value(z).iter().zip(expect) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let m = model(8);
        let store = m.init(&mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<(usize, Vec<f64>)> = [0, 2, 3, 6]
            .iter()
            .map(|&l| (l, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let h_prev: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut alpha_prev = vec![0.0; 7];
        alpha_prev[2] = 0.4;
        alpha_prev[6] = 0.6;

        let mut tape = Tape::new();
        let p = m.bind(&mut tape, &store).unwrap();
        let mem = memory(&mut tape, &rows, 7, 4);
        let state = AttentionState {
            h: tape.constant_vec(h_prev.clone()),
            alpha_prev: tape.constant_vec(alpha_prev.clone()),
            step: 1,
        };
        let (z, alpha, _) = attend(&mut tape, &p, &mem, &state).unwrap();

        let g = |n: &str| store.get(n).unwrap().data().to_vec();
        let mv = |w: &[f64], x: &[f64], r: usize| -> f64 { (0..x.len()).map(|c| w[r * x.len() + c] * x[c]).sum() };
        let (wx, wh, b) = (g("attn.gru.wx"), g("attn.gru.wh"), g("attn.gru.b"));
        let hz: Vec<f64> = (0..3).map(|i| sigmoid(mv(&wx, &alpha_prev, i) + mv(&wh, &h_prev, i) + b[i])).collect();
        let hr: Vec<f64> = (0..3).map(|i| sigmoid(mv(&wx, &alpha_prev, 3 + i) + mv(&wh, &h_prev, 3 + i) + b[3 + i])).collect();
        let rh: Vec<f64> = (0..3).map(|i| hr[i] * h_prev[i]).collect();
        let h: Vec<f64> = (0..3)
            .map(|i| {
                let n = (mv(&wx, &alpha_prev, 6 + i) + mv(&wh, &rh, 6 + i) + b[6 + i]).tanh();
                (1.0 - hz[i]) * h_prev[i] + hz[i] * n
            })
            .collect();
        let (wa, wah, war, ba) = (g(names::W_ALPHA), g(names::W_ALPHA_H), g(names::W_ALPHA_R), g(names::B_ALPHA));
        let scores: Vec<f64> = rows
            .iter()
            .map(|(_, r)| (0..3).map(|k| wa[k] * (mv(&wah, &h, k) + mv(&war, r, k) + ba[k]).tanh()).sum())
            .collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        for ((l, _), s) in rows.iter().zip(&scores) {
            assert!((tape.value(alpha)[*l] - s.exp() / total).abs() < 1e-14);
        }
        for d in 0..4 {
            let want: f64 = rows.iter().zip(&scores).map(|((_, r), s)| r[d] * s.exp() / total).sum();
            assert!((tape.value(z)[d] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform_log_prob() {
        let m = model(8);
        let mut store = m.init(&mut ChaCha8Rng::seed_from_u64(4));
        store.insert(SENTENCE_DECODER, names::MLP_W2, NumArray::zeros(&[8, 4]));
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, &store).unwrap();
        let z = tape.constant_vec(vec![0.5, -0.2, 0.1, 0.9]);
        let score = sentence_log_prob(&mut tape, &p, z, &[5, 6, 7, EOS]).unwrap();
        assert!((tape.scalar(score.log_prob) - 4.0 * (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!(matches!(
            sentence_log_prob(&mut tape, &p, z, &[9, EOS]),
            Err(Error::TokenOutOfRange { id: 9, size: 8 })
        ));
    }

    #[test]
    fn one_word_vocabulary_hand_evaluation() {
        // Vocabulary: 4 specials + "w" (id 4). Reference "w EOS".
        let m = model(5);
        let store = m.init(&mut ChaCha8Rng::seed_from_u64(5));
        let z = vec![0.3, -0.4, 0.8, 0.1];
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, &store).unwrap();
        let zv = tape.constant_vec(z.clone());
        let score = sentence_log_prob(&mut tape, &p, zv, &[4, EOS]).unwrap();

        let g = |n: &str| store.get(n).unwrap().data().to_vec();
        let mv = |w: &[f64], x: &[f64], r: usize| -> f64 { (0..x.len()).map(|c| w[r * x.len() + c] * x[c]).sum() };
        let (wx, wh, b) = (g("dec.gru.wx"), g("dec.gru.wh"), g("dec.gru.b"));
        let embed = g(names::EMBED);
        let (w1, b1, w2, b2) = (g(names::MLP_W1), g(names::MLP_B1), g(names::MLP_W2), g(names::MLP_B2));
        let step = |prev: usize, h: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let x: Vec<f64> = embed[prev * 2..prev * 2 + 2].iter().chain(&z).copied().collect();
            let zg: Vec<f64> = (0..3).map(|i| sigmoid(mv(&wx, &x, i) + mv(&wh, h, i) + b[i])).collect();
            let rg: Vec<f64> = (0..3).map(|i| sigmoid(mv(&wx, &x, 3 + i) + mv(&wh, h, 3 + i) + b[3 + i])).collect();
            let rh: Vec<f64> = (0..3).map(|i| rg[i] * h[i]).collect();
            let hn: Vec<f64> = (0..3)
                .map(|i| (1.0 - zg[i]) * h[i] + zg[i] * (mv(&wx, &x, 6 + i) + mv(&wh, &rh, 6 + i) + b[6 + i]).tanh())
                .collect();
            let hz: Vec<f64> = hn.iter().chain(&z).copied().collect();
            let hidden: Vec<f64> = (0..4).map(|k| (mv(&w1, &hz, k) + b1[k]).tanh()).collect();
            let logits = (0..5).map(|v| mv(&w2, &hidden, v) + b2[v]).collect();
            (hn, logits)
        };
        let log_softmax_at = |d: &[f64], i: usize| d[i] - d.iter().map(|x| x.exp()).sum::<f64>().ln();
        let (h1, d1) = step(BOS, &[0.0; 3]);
        let (_, d2) = step(4, &h1);
        let want = log_softmax_at(&d1, 4) + log_softmax_at(&d2, EOS);
        assert!((tape.scalar(score.log_prob) - want).abs() < 1e-13);
        assert!(tape.scalar(score.log_prob) <= 0.0);
    }

    #[test]
    fn beam_of_one_is_greedy_and_generation_is_deterministic() {
        let m = model(8);
        for seed in 0..5 {
            let store = m.init(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = album(seed + 10, 3);
            let greedy = generate_story(&m, &store, &a, DecodeMode::Greedy).unwrap();
            let beam = generate_story(&m, &store, &a, DecodeMode::Beam(1)).unwrap();
            assert_eq!(greedy.sentences, beam.sentences);
            assert_eq!(greedy, generate_story(&m, &store, &a, DecodeMode::Greedy).unwrap());
            assert_eq!(greedy.sentences.len(), 3);
            for s in &greedy.sentences {
                assert!(s.last() == Some(&EOS) || s.len() == 7);
            }
            for alpha in &greedy.alphas {
                assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let wide = generate_story(&m, &store, &a, DecodeMode::Beam(3)).unwrap();
            assert_eq!(wide.sentences.len(), 3);
        }
    }

    #[test]
    fn greedy_is_locally_optimal() {
        let m = model(8);
        let store = m.init(&mut ChaCha8Rng::seed_from_u64(7));
        let a = album(8, 3);
        let story = generate_story(&m, &store, &a, DecodeMode::Greedy).unwrap();

        let score = |sentences: &[Vec<usize>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape, &store).unwrap();
            let enc = encode_album(&mut tape, &p, &a, &FlagMode::Detect).unwrap();
            let att = Attender::new(&mut tape, &p, &enc.memory).unwrap();
            let mut state = AttentionState::initial(&mut tape, &p, &enc.photos);
            sentences
                .iter()
                .map(|s| {
                    let (z, _, next) = att.step(&mut tape, &p, &state).unwrap();
                    state = next;
                    let sc = sentence_log_prob(&mut tape, &p, z, s).unwrap();
                    tape.scalar(sc.log_prob)
                })
                .collect()
        };
        let base = score(&story.sentences);
        for (j, s) in story.sentences.iter().enumerate() {
            let expect: f64 = story.token_log_probs[j].iter().sum();
            assert!((base[j] - expect).abs() < 1e-10);
            // Perturbing the final token only changes the last factor.
            let t = s.len() - 1;
            for w in 0..8 {
                if w == s[t] {
                    continue;
                }
                let mut other = story.sentences.clone();
                other[j][t] = w;
                let alt = score(&other);
                assert!(base[j] >= alt[j] - 1e-12);
            }
        }
    }
}

//! Synthetic albums with known scene structure.
//!
//! Each cluster has a centre in {−s, +s}^F (s = `cluster_separation`) and a
//! fixed three-word template drawn from a pool of `vocab_size` pseudo-words.
//! An album is a run of scenes with pairwise-distinct consecutive clusters;
//! every photo of a scene is its cluster centre plus Gaussian noise. Sentence
//! j of the story opens with a position word and continues with the template
//! of the scene that covers story position j.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::album::AlbumRecord;
use crate::error::{Error, Result};

pub const TEMPLATE_WORDS: usize = 3;
const OPENERS: [&str; 8] = ["first", "then", "next", "after", "later", "soon", "again", "finally"];
const SYLLABLES: [&str; 16] = [
    "ba", "ko", "mi", "tu", "re", "sa", "lo", "ne", "pi", "du", "ga", "fe", "zo", "hi", "wu", "ya",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub albums: usize,
    pub scenes_per_album: (usize, usize),
    pub photos_per_scene: (usize, usize),
    pub feature_dim: usize,
    pub clusters: usize,
    pub cluster_separation: f64,
    pub noise_scale: f64,
    pub vocab_size: usize,
    pub sentences: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            albums: 8,
            scenes_per_album: (2, 3),
            photos_per_scene: (1, 3),
            feature_dim: 8,
            clusters: 6,
            cluster_separation: 1.0,
            noise_scale: 0.1,
            vocab_size: 18,
            sentences: 5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.cluster_separation <= 0.0 || !self.cluster_separation.is_finite() {
            return bad("cluster_separation must be positive");
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return bad("noise_scale must be non-negative");
        }
        let (smin, smax) = self.scenes_per_album;
        let (pmin, pmax) = self.photos_per_scene;
        if smin == 0 || smin > smax || pmin == 0 || pmin > pmax {
            return bad("scene and photo ranges must be non-empty and positive");
        }
        if self.clusters < 2 && smax > 1 {
            return bad("at least two clusters are needed for multi-scene albums");
        }
        if self.clusters == 0 {
            return bad("clusters must be positive");
        }
        if self.feature_dim == 0 || (self.feature_dim < 63 && (1u64 << self.feature_dim) < self.clusters as u64) {
            return bad("feature_dim too small for distinct sign-vector centres");
        }
        if self.vocab_size < TEMPLATE_WORDS {
            return bad("vocab_size must cover one template");
        }
        if self.sentences == 0 {
            return bad("sentences must be positive");
        }
        Ok(())
    }
}

fn pseudo_word(i: usize) -> String {
    let mut word = String::new();
    let mut k = i;
    loop {
        word.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
        if k == 0 {
            break;
        }
        k -= 1;
    }
    word.push_str(SYLLABLES[(i * 7 + 3) % SYLLABLES.len()]);
    word
}

pub fn opener(position: usize, sentences: usize) -> &'static str {
    if position + 1 == sentences && sentences > 1 {
        OPENERS[OPENERS.len() - 1]
    } else {
        OPENERS[position.min(OPENERS.len() - 2)]
    }
}

/// Cluster centres and word templates shared by every album of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub centres: Vec<Vec<f64>>,
    pub templates: Vec<Vec<String>>,
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut centres: Vec<Vec<f64>> = Vec::with_capacity(spec.clusters);
        while centres.len() < spec.clusters {
            let c: Vec<f64> = (0..spec.feature_dim)
                .map(|_| if rng.random::<bool>() { spec.cluster_separation } else { -spec.cluster_separation })
                .collect();
            if !centres.contains(&c) {
                centres.push(c);
            }
        }
        let pool: Vec<String> = (0..spec.vocab_size).map(pseudo_word).collect();
        let templates = (0..spec.clusters)
            .map(|_| pool.choose_multiple(rng, TEMPLATE_WORDS).cloned().collect())
            .collect();
        Self { centres, templates }
    }
}

/// Index of the scene that story position `j` describes.
pub fn scene_for_sentence(j: usize, scenes: usize, sentences: usize) -> usize {
    j * scenes / sentences
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<AlbumRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = SynthWorld::new(spec, &mut rng);
    let mut albums = Vec::with_capacity(spec.albums);
    for a in 0..spec.albums {
        let scenes = rng.random_range(spec.scenes_per_album.0..=spec.scenes_per_album.1);
        let mut cluster_ids: Vec<usize> = Vec::with_capacity(scenes);
        for _ in 0..scenes {
            let c = loop {
                let c = rng.random_range(0..spec.clusters);
                if cluster_ids.last() != Some(&c) {
                    break c;
                }
            };
            cluster_ids.push(c);
        }
        let mut features = Vec::new();
        let mut gold = Vec::new();
        for (s, &c) in cluster_ids.iter().enumerate() {
            let photos = rng.random_range(spec.photos_per_scene.0..=spec.photos_per_scene.1);
            for p in 0..photos {
                let row = world.centres[c]
                    .iter()
                    .map(|x| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        x + spec.noise_scale * n
                    })
                    .collect();
                features.push(row);
                gold.push(u8::from(p == 0 && s > 0));
            }
        }
        let story = (0..spec.sentences)
            .map(|j| {
                let c = cluster_ids[scene_for_sentence(j, scenes, spec.sentences)];
                std::iter::once(opener(j, spec.sentences).to_string())
                    .chain(world.templates[c].iter().cloned())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        albums.push(AlbumRecord {
            album_id: format!("synth-{a:04}"),
            features,
            stories: vec![story],
            gold_boundaries: Some(gold),
        });
    }
    Ok(albums)
}

/// A derangement of `0..n` drawn uniformly by rejection.
pub fn random_derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "no derangement of fewer than two items");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

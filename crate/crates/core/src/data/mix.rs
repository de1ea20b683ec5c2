use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CorpusTag;

/// Domain:general sequence ratio for one epoch of the training stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub domain: f64,
    pub general: f64,
    /// Sequences per epoch. `None` anchors the epoch on one full pass over
    /// the domain corpus.
    pub epoch_len: Option<usize>,
    pub seed: u64,
}

impl MixPlan {
    pub fn new(domain: f64, general: f64, seed: u64) -> Result<Self> {
        let plan = Self {
            domain,
            general,
            epoch_len: None,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.domain) || !ok(self.general) {
            return Err(Error::Config(format!(
                "mix ratio {}:{} must have positive parts",
                self.domain, self.general
            )));
        }
        if self.epoch_len == Some(0) {
            return Err(Error::Config("epoch length must be positive".into()));
        }
        Ok(())
    }

    /// `(domain, general)` sequences per epoch given the domain corpus size.
    pub fn counts(&self, n_domain: usize) -> (usize, usize) {
        match self.epoch_len {
            Some(e) => {
                let d = ((e as f64) * self.domain / (self.domain + self.general)).round() as usize;
                let d = d.clamp(1, e.max(2) - 1);
                (d, e - d)
            }
            None => {
                let g = ((n_domain as f64) * self.general / self.domain).round() as usize;
                (n_domain, g.max(1))
            }
        }
    }
}

/// Index into the domain or general sequence list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamItem {
    pub tag: CorpusTag,
    pub index: usize,
}

const STREAM_DOMAIN: u64 = 1 << 40;
const STREAM_GENERAL: u64 = 2 << 40;
const STREAM_MIX: u64 = 3 << 40;

/// Produces the shuffled training stream epoch by epoch. Each corpus is read
/// as an endless concatenation of seeded permutations, so a corpus smaller
/// than its per-epoch share repeats with a fresh shuffle.
#[derive(Debug, Clone)]
pub struct Mixer {
    plan: MixPlan,
    n_domain: usize,
    n_general: usize,
    counts: (usize, usize),
}

fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

impl Mixer {
    pub fn new(n_domain: usize, n_general: usize, plan: MixPlan) -> Result<Self> {
        plan.validate()?;
        if n_domain == 0 || n_general == 0 {
            return Err(Error::Data(format!(
                "mixing needs both corpora (domain {n_domain}, general {n_general} sequences)"
            )));
        }
        Ok(Self {
            plan,
            n_domain,
            n_general,
            counts: plan.counts(n_domain),
        })
    }

    pub fn counts(&self) -> (usize, usize) {
        self.counts
    }

    pub fn epoch_len(&self) -> usize {
        self.counts.0 + self.counts.1
    }

    fn draw(&self, tag: CorpusTag, n: usize, epoch: u64, stream: u64) -> Vec<StreamItem> {
        let per_epoch = match tag {
            CorpusTag::Domain => self.counts.0,
            CorpusTag::General => self.counts.1,
        } as u64;
        let start = epoch * per_epoch;
        let mut out = Vec::with_capacity(per_epoch as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + per_epoch {
            let (cycle, offset) = (pos / n as u64, (pos % n as u64) as usize);
            if cached.as_ref().map(|(c, _)| *c) != Some(cycle) {
                cached = Some((cycle, permutation(n, self.plan.seed, stream + cycle)));
            }
            let perm = &cached.as_ref().expect("cached permutation").1;
            out.push(StreamItem {
                tag,
                index: perm[offset],
            });
        }
        out
    }

    /// The stream for epoch `epoch`, a seeded shuffle of the ratio-satisfying
    /// multiset.
    pub fn epoch(&self, epoch: u64) -> Vec<StreamItem> {
        let mut items = self.draw(CorpusTag::Domain, self.n_domain, epoch, STREAM_DOMAIN);
        items.extend(self.draw(CorpusTag::General, self.n_general, epoch, STREAM_GENERAL));
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(STREAM_MIX + epoch);
        items.shuffle(&mut rng);
        items
    }
}

/// The first epoch of the mixed stream for the given corpora.
pub fn mix<T>(domain: &[T], general: &[T], plan: &MixPlan) -> Result<Vec<StreamItem>> {
    Ok(Mixer::new(domain.len(), general.len(), *plan)?.epoch(0))
}

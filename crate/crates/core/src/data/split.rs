use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TaggedSequence;
use crate::error::{Error, Result};
use crate::losses::CorpusTag;

/// Held-out sequences of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub source: String,
    pub tag: CorpusTag,
    pub sequences: Vec<TaggedSequence>,
}

impl ValidationSet {
    /// Groups held-out sequences by source, in source order.
    pub fn group(val: Vec<TaggedSequence>) -> Vec<ValidationSet> {
        let mut by_source: BTreeMap<String, ValidationSet> = BTreeMap::new();
        for s in val {
            by_source
                .entry(s.source.clone())
                .or_insert_with(|| ValidationSet {
                    source: s.source.clone(),
                    tag: s.tag,
                    sequences: Vec::new(),
                })
                .sequences
                .push(s);
        }
        by_source.into_values().collect()
    }
}

/// Holds out `k` sequences, stratified by source: with `S` sources, each
/// contributes `ceil(k/S)` or `floor(k/S)` (the extra ones go to the first
/// sources in sorted order). Both outputs keep the input order.
pub fn split_validation(
    seqs: Vec<TaggedSequence>,
    k: usize,
    seed: u64,
) -> Result<(Vec<TaggedSequence>, Vec<TaggedSequence>)> {
    if k == 0 {
        return Ok((seqs, Vec::new()));
    }
    if k >= seqs.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {k} of {} sequences",
            seqs.len()
        )));
    }
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        by_source.entry(s.source.as_str()).or_default().push(i);
    }
    let n_sources = by_source.len();
    let (base, extra) = (k / n_sources, k % n_sources);
    let mut held = vec![false; seqs.len()];
    for (rank, (source, mut idx)) in by_source.into_iter().enumerate() {
        let quota = base + usize::from(rank < extra);
        if quota > idx.len() {
            return Err(Error::InvalidArgument(format!(
                "source {source} has {} sequences, fewer than its validation quota {quota}",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rank as u64);
        idx.shuffle(&mut rng);
        for &i in &idx[..quota] {
            held[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, h) in seqs.into_iter().zip(held) {
        if h {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

//! Low-rank adapters `W' = W + scale * down^T up`, one pair per targeted
//! weight matrix.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{fill_normal, ModelArch};
use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    AttnQkv,
    AttnOut,
    MlpUp,
    MlpDown,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 4] = [
        AdapterTarget::AttnQkv,
        AdapterTarget::AttnOut,
        AdapterTarget::MlpUp,
        AdapterTarget::MlpDown,
    ];

    /// Attention projections.
    pub const DEFAULT: [AdapterTarget; 2] = [AdapterTarget::AttnQkv, AdapterTarget::AttnOut];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterTarget::AttnQkv => "attn_qkv",
            AdapterTarget::AttnOut => "attn_out",
            AdapterTarget::MlpUp => "mlp_up",
            AdapterTarget::MlpDown => "mlp_down",
        }
    }

    /// `(d_in, d_out)` of the adapted matrix.
    pub fn dims(self, arch: &ModelArch) -> (usize, usize) {
        let d = arch.d_model;
        match self {
            AdapterTarget::AttnQkv => (d, 3 * d),
            AdapterTarget::AttnOut => (d, d),
            AdapterTarget::MlpUp => (d, arch.d_ff),
            AdapterTarget::MlpDown => (arch.d_ff, d),
        }
    }
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter target {s:?}")))
    }
}

/// One low-rank pair. `down` is `rank x d_in`; `up` is stored transposed as
/// `rank x d_out` so that applying it is a sum of axpys.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F> {
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub down: Vec<F>,
    pub up: Vec<F>,
}

impl<F: Real> LoraPair<F> {
    pub fn zeros(rank: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            rank,
            d_in,
            d_out,
            down: vec![F::zero(); rank * d_in],
            up: vec![F::zero(); rank * d_out],
        }
    }

    pub fn down_row(&self, j: usize) -> &[F] {
        &self.down[j * self.d_in..(j + 1) * self.d_in]
    }

    pub fn up_row(&self, j: usize) -> &[F] {
        &self.up[j * self.d_out..(j + 1) * self.d_out]
    }
}

/// Trainable adapters for every layer. `layers[l][target.index()]` is `Some`
/// for attached targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<F> {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<AdapterTarget>,
    pub layers: Vec<[Option<LoraPair<F>>; 4]>,
}

impl<F: Real> AdapterSet<F> {
    /// All-zero adapters (both projections zero).
    pub fn zeros(arch: &ModelArch, rank: usize, scale: f64, targets: &[AdapterTarget]) -> Result<Self> {
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        if targets.is_empty() {
            return Err(Error::Config("at least one adapter target is required".into()));
        }
        for t in &targets {
            let (d_in, d_out) = t.dims(arch);
            if rank == 0 || rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "adapter rank {rank} outside [1, {}] for {t}",
                    d_in.min(d_out)
                )));
            }
        }
        let layers = (0..arch.n_layers)
            .map(|_| {
                let mut slots: [Option<LoraPair<F>>; 4] = Default::default();
                for t in &targets {
                    let (d_in, d_out) = t.dims(arch);
                    slots[t.index()] = Some(LoraPair::zeros(rank, d_in, d_out));
                }
                slots
            })
            .collect();
        Ok(Self {
            rank,
            scale,
            targets,
            layers,
        })
    }

    /// Standard initialisation: random down-projections, zero up-projections,
    /// so the initial delta is exactly zero.
    pub fn init(
        arch: &ModelArch,
        rank: usize,
        scale: f64,
        targets: &[AdapterTarget],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut set = Self::zeros(arch, rank, scale, targets)?;
        for slots in &mut set.layers {
            for pair in slots.iter_mut().flatten() {
                let std = 1.0 / (pair.d_in as f64).sqrt();
                fill_normal(&mut pair.down, std, rng);
            }
        }
        Ok(set)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.set_zero();
        out
    }

    pub fn get(&self, layer: usize, target: AdapterTarget) -> Option<&LoraPair<F>> {
        self.layers[layer][target.index()].as_ref()
    }

    pub fn get_mut(&mut self, layer: usize, target: AdapterTarget) -> Option<&mut LoraPair<F>> {
        self.layers[layer][target.index()].as_mut()
    }

    pub fn slots(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = Vec::new();
        for (l, slots) in self.layers.iter().enumerate() {
            for (t, pair) in AdapterTarget::ALL.iter().zip(slots) {
                if let Some(p) = pair {
                    out.push((format!("h{l}.{t}.down"), &p.down));
                    out.push((format!("h{l}.{t}.up"), &p.up));
                }
            }
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for slots in &mut self.layers {
            for p in slots.iter_mut().flatten() {
                out.push(&mut p.down);
                out.push(&mut p.up);
            }
        }
        out
    }

    pub fn set_zero(&mut self) {
        for s in self.slots_mut() {
            s.fill(F::zero());
        }
    }

    pub fn num_params(&self) -> usize {
        self.slots().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> AdapterSet<G> {
        AdapterSet {
            rank: self.rank,
            scale: self.scale,
            targets: self.targets.clone(),
            layers: self
                .layers
                .iter()
                .map(|slots| {
                    slots.clone().map(|p| {
                        p.map(|p| LoraPair {
                            rank: p.rank,
                            d_in: p.d_in,
                            d_out: p.d_out,
                            down: p.down.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
                            up: p.up.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
                        })
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ModelArch {
        ModelArch {
            vocab: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_context: 8,
        }
    }

    #[test]
    fn rank_bounds_enforced() {
        assert!(AdapterSet::<f32>::zeros(&arch(), 0, 1.0, &AdapterTarget::DEFAULT).is_err());
        assert!(AdapterSet::<f32>::zeros(&arch(), 9, 1.0, &AdapterTarget::DEFAULT).is_err());
        assert!(AdapterSet::<f32>::zeros(&arch(), 8, 1.0, &AdapterTarget::DEFAULT).is_ok());
    }

    #[test]
    fn init_has_zero_up_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = AdapterSet::<f32>::init(&arch(), 2, 1.0, &AdapterTarget::ALL, &mut rng).unwrap();
        for slots in &set.layers {
            for p in slots.iter().flatten() {
                assert!(p.up.iter().all(|&v| v == 0.0));
                assert!(p.down.iter().any(|&v| v != 0.0));
            }
        }
        assert_eq!(set.slots().len(), 2 * 4 * 2);
    }

    #[test]
    fn target_names_round_trip() {
        for t in AdapterTarget::ALL {
            assert_eq!(t.as_str().parse::<AdapterTarget>().unwrap(), t);
        }
        assert!("ffn".parse::<AdapterTarget>().is_err());
    }
}

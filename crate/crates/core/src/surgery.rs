//! Layer plans: the executable order of ICL-stage layer blocks.
//!
//! A plan is a sequence of block indices. The identity plan runs every
//! block once in order; skip, swap and repeat plans each change exactly one
//! thing about it. Plans never touch parameters, only execution order.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("layer index {index} out of range for {layers} layers")]
    OutOfRange { index: usize, layers: usize },
    #[error("repeat count must be at least 1, got {0}")]
    RepeatCount(usize),
    #[error("a plan needs at least one layer to index")]
    NoLayers,
    #[error("plan built for {plan} layers cannot run on a model with {model}")]
    Depth { plan: usize, model: usize },
    #[error("cannot parse plan `{0}`")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Identity,
    Skip(usize),
    Swap(usize, usize),
    Repeat(usize, usize),
    Custom,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    depth: usize,
    layers: Vec<usize>,
    provenance: Provenance,
}

impl LayerPlan {
    pub fn identity(depth: usize) -> Result<Self, PlanError> {
        if depth == 0 {
            return Err(PlanError::NoLayers);
        }
        Ok(Self {
            depth,
            layers: (0..depth).collect(),
            provenance: Provenance::Identity,
        })
    }

    /// Every layer but `i`, in order.
    pub fn skip(depth: usize, i: usize) -> Result<Self, PlanError> {
        check(depth, i)?;
        let layers = (0..depth).filter(|&l| l != i).collect();
        Ok(Self {
            depth,
            layers,
            provenance: Provenance::Skip(i),
        })
    }

    /// The identity order with positions `i` and `j` exchanged.
    pub fn swap(depth: usize, i: usize, j: usize) -> Result<Self, PlanError> {
        check(depth, i)?;
        check(depth, j)?;
        if i == j {
            return Self::identity(depth);
        }
        let mut layers: Vec<usize> = (0..depth).collect();
        layers.swap(i, j);
        Ok(Self {
            depth,
            layers,
            provenance: Provenance::Swap(i.min(j), i.max(j)),
        })
    }

    /// The identity order with layer `i` run `k` consecutive times.
    pub fn repeat(depth: usize, i: usize, k: usize) -> Result<Self, PlanError> {
        check(depth, i)?;
        if k == 0 {
            return Err(PlanError::RepeatCount(k));
        }
        if k == 1 {
            return Self::identity(depth);
        }
        let mut layers = Vec::with_capacity(depth + k - 1);
        for l in 0..depth {
            let times = if l == i { k } else { 1 };
            layers.extend(std::iter::repeat(l).take(times));
        }
        Ok(Self {
            depth,
            layers,
            provenance: Provenance::Repeat(i, k),
        })
    }

    /// An arbitrary sequence of layer indices. A sequence equal to the
    /// identity order is tagged as the identity plan.
    pub fn custom(depth: usize, layers: Vec<usize>) -> Result<Self, PlanError> {
        if depth == 0 {
            return Err(PlanError::NoLayers);
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
            return Err(PlanError::OutOfRange {
                index: bad,
                layers: depth,
            });
        }
        let provenance = if layers.iter().copied().eq(0..depth) {
            Provenance::Identity
        } else {
            Provenance::Custom
        };
        Ok(Self {
            depth,
            layers,
            provenance,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_identity(&self) -> bool {
        self.provenance == Provenance::Identity
    }

    /// Rejects plans whose entries fall outside a model with `layers` blocks.
    pub fn validate(&self, layers: usize) -> Result<(), PlanError> {
        if self.depth != layers {
            return Err(PlanError::Depth {
                plan: self.depth,
                model: layers,
            });
        }
        match self.layers.iter().find(|&&l| l >= layers) {
            Some(&bad) => Err(PlanError::OutOfRange { index: bad, layers }),
            None => Ok(()),
        }
    }
}

fn check(depth: usize, i: usize) -> Result<(), PlanError> {
    if depth == 0 {
        return Err(PlanError::NoLayers);
    }
    if i >= depth {
        return Err(PlanError::OutOfRange {
            index: i,
            layers: depth,
        });
    }
    Ok(())
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.provenance {
            Provenance::Identity => write!(f, "identity"),
            Provenance::Skip(i) => write!(f, "skip:{i}"),
            Provenance::Swap(i, j) => write!(f, "swap:{i}-{j}"),
            Provenance::Repeat(i, k) => write!(f, "repeat:{i}x{k}"),
            Provenance::Custom => {
                let parts: Vec<String> = self.layers.iter().map(usize::to_string).collect();
                write!(f, "custom:{}", parts.join("_"))
            }
        }
    }
}

impl LayerPlan {
    /// Parses the compact form produced by `Display` for a model with
    /// `depth` layers.
    pub fn parse(s: &str, depth: usize) -> Result<Self, PlanError> {
        let bad = || PlanError::Parse(s.to_string());
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "identity" if arg.is_empty() => Self::identity(depth),
            "skip" => Self::skip(depth, num(arg)?),
            "swap" => {
                let (i, j) = arg.split_once('-').ok_or_else(bad)?;
                Self::swap(depth, num(i)?, num(j)?)
            }
            "repeat" => {
                let (i, k) = arg.split_once('x').ok_or_else(bad)?;
                Self::repeat(depth, num(i)?, num(k)?)
            }
            "custom" => {
                let layers = if arg.is_empty() {
                    Vec::new()
                } else {
                    arg.split('_').map(num).collect::<Result<_, _>>()?
                };
                Self::custom(depth, layers)
            }
            _ => Err(bad()),
        }
    }
}

/// Every single-layer skip.
pub fn skip_grid(depth: usize) -> Result<Vec<LayerPlan>, PlanError> {
    (0..depth).map(|i| LayerPlan::skip(depth, i)).collect()
}

/// Every unordered pair `i < j`.
pub fn swap_grid(depth: usize) -> Result<Vec<LayerPlan>, PlanError> {
    let mut plans = Vec::new();
    for i in 0..depth {
        for j in i + 1..depth {
            plans.push(LayerPlan::swap(depth, i, j)?);
        }
    }
    Ok(plans)
}

/// Every layer repeated `k` times.
pub fn repeat_grid(depth: usize, k: usize) -> Result<Vec<LayerPlan>, PlanError> {
    (0..depth).map(|i| LayerPlan::repeat(depth, i, k)).collect()
}

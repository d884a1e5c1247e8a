//! Folding-style baseline decoders. The trunk is shared; only the origin of
//! the per-point seeds differs.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use seedcloud_tensor::{Conv1x1, ConvBnRelu, Graph, Linear, ParamStore, Real, Tensor, Var};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    FixedGrid,
    UniformRandom,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldingConfig {
    pub seeds: SeedKind,
    /// Seed dimension; fixed to 2 for the grid and uniform sources.
    pub seed_dim: usize,
    /// Hidden width of both folding stacks.
    pub width: usize,
}

impl Default for FoldingConfig {
    fn default() -> Self {
        FoldingConfig { seeds: SeedKind::FixedGrid, seed_dim: 2, width: 512 }
    }
}

/// Regular lattice on `[0, 1]²` laid out as `[2, side²]`, row-major over the grid.
pub fn grid_seeds(count: usize) -> Result<Vec<f64>> {
    let side = (count as f64).sqrt().round() as usize;
    if side * side != count || side < 2 {
        return Err(Error::Config(format!("fixed grid needs a square count of at least 4 seeds, got {count}")));
    }
    let step = 1.0 / (side - 1) as f64;
    let mut out = vec![0.0; 2 * count];
    for i in 0..side {
        for j in 0..side {
            out[i * side + j] = j as f64 * step;
            out[count + i * side + j] = i as f64 * step;
        }
    }
    Ok(out)
}

/// Seed provider of one decoder.
#[derive(Clone, Debug)]
pub enum SeedSource {
    FixedGrid { count: usize, lattice: Vec<f64> },
    UniformRandom { count: usize },
    Generated { count: usize, dim: usize, map: Linear },
}

impl SeedSource {
    pub fn count(&self) -> usize {
        match self {
            SeedSource::FixedGrid { count, .. } | SeedSource::UniformRandom { count } | SeedSource::Generated { count, .. } => {
                *count
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SeedSource::Generated { dim, .. } => *dim,
            _ => 2,
        }
    }

    /// Seeds `[B, dim, count]` for a batch of `batch` codewords.
    pub fn seeds<F: Real>(&self, g: &mut Graph<'_, F>, batch: usize, theta: Option<Var>) -> Result<Var> {
        match self {
            SeedSource::FixedGrid { count, lattice } => {
                let data = (0..batch).flat_map(|_| lattice.iter().map(|&v| F::of(v))).collect();
                Ok(g.input(Tensor::new(vec![batch, 2, *count], data)?))
            }
            SeedSource::UniformRandom { count } => {
                let n = batch * 2 * count;
                let mut data = Vec::with_capacity(n);
                while data.len() < n {
                    let v = F::of(g.rng.random::<f64>());
                    if v > F::zero() && v < F::one() {
                        data.push(v);
                    }
                }
                Ok(g.input(Tensor::new(vec![batch, 2, *count], data)?))
            }
            SeedSource::Generated { count, dim, map } => {
                let theta = theta.ok_or_else(|| Error::Usage("generated seeds need a codeword".into()))?;
                let flat = map.forward(g, theta)?;
                Ok(g.tape.reshape(flat, &[batch, *dim, *count])?)
            }
        }
    }
}

pub fn make_seed_source<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    cfg: &FoldingConfig,
    codeword_dim: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<SeedSource> {
    if count == 0 {
        return Err(Error::Config("seed count must be positive".into()));
    }
    let fixed_dim = |kind: &str| {
        if cfg.seed_dim != 2 {
            return Err(Error::Config(format!("{kind} seeds are 2-D, got seed_dim = {}", cfg.seed_dim)));
        }
        Ok(())
    };
    Ok(match cfg.seeds {
        SeedKind::FixedGrid => {
            fixed_dim("fixed_grid")?;
            SeedSource::FixedGrid { count, lattice: grid_seeds(count)? }
        }
        SeedKind::UniformRandom => {
            fixed_dim("uniform_random")?;
            SeedSource::UniformRandom { count }
        }
        SeedKind::Generated => {
            if cfg.seed_dim == 0 {
                return Err(Error::Config("generated seed dimension must be positive".into()));
            }
            let map = Linear::new(store, &format!("{name}.seedgen"), codeword_dim, count * cfg.seed_dim, rng)?;
            SeedSource::Generated { count, dim: cfg.seed_dim, map }
        }
    })
}

/// Two hidden blocks and a bare projection to xyz.
#[derive(Clone, Debug)]
pub struct FoldStack {
    pub name: String,
    pub hidden: [ConvBnRelu; 2],
    pub out: Conv1x1,
}

impl FoldStack {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, in_ch: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FoldStack {
            name: name.to_string(),
            hidden: [
                ConvBnRelu::new(store, &format!("{name}.0"), in_ch, width, rng)?,
                ConvBnRelu::new(store, &format!("{name}.1"), width, width, rng)?,
            ],
            out: Conv1x1::new(store, &format!("{name}.2"), width, 3, rng)?,
        })
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.hidden[0].forward(g, x)?;
        let h = self.hidden[1].forward(g, h)?;
        Ok(self.out.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct FoldingDecoder {
    pub codeword_dim: usize,
    pub source: SeedSource,
    pub fold1: FoldStack,
    pub fold2: FoldStack,
}

#[derive(Clone, Copy, Debug)]
pub struct FoldingTrace {
    pub seeds: Var,
    pub points: Var,
}

impl FoldingDecoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &FoldingConfig,
        codeword_dim: usize,
        output_points: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::Config("folding width must be positive".into()));
        }
        let source = make_seed_source(store, name, cfg, codeword_dim, output_points, rng)?;
        let fold1 = FoldStack::new(store, &format!("{name}.fold1"), codeword_dim + source.dim(), cfg.width, rng)?;
        let fold2 = FoldStack::new(store, &format!("{name}.fold2"), codeword_dim + 3, cfg.width, rng)?;
        Ok(FoldingDecoder { codeword_dim, source, fold1, fold2 })
    }

    /// Trainable element count of the two folding stacks alone.
    pub fn trunk_parameters<F: Real>(&self, store: &ParamStore<F>) -> usize {
        let prefixes = [format!("{}.", self.fold1.name), format!("{}.", self.fold2.name)];
        store
            .iter()
            .filter(|(_, p)| p.trainable && prefixes.iter().any(|n| p.name.starts_with(n)))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn trace<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var) -> Result<FoldingTrace> {
        let shape = g.shape(theta);
        if shape.len() != 2 || shape[1] != self.codeword_dim {
            return Err(Error::Usage(format!(
                "decoder expects codewords [B, {}], got {shape:?}",
                self.codeword_dim
            )));
        }
        let batch = shape[0];
        let n = self.source.count();
        let seeds = self.source.seeds(g, batch, Some(theta))?;
        let tiled = g.tape.replicate(theta, &[n])?;
        let x = g.tape.concat_channels(&[tiled, seeds])?;
        let first = self.fold1.forward(g, x)?;
        let x = g.tape.concat_channels(&[tiled, first])?;
        let xyz = self.fold2.forward(g, x)?;
        let points = g.tape.transpose_last2(xyz)?;
        Ok(FoldingTrace { seeds, points })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var) -> Result<Var> {
        Ok(self.trace(g, theta)?.points)
    }
}

/// Writes seeds `[dim, count]` of one shape as CSV, one seed per row.
pub fn write_seed_csv(path: &Path, seeds: &[f64], dim: usize) -> Result<()> {
    let count = seeds.len() / dim;
    let mut out = String::new();
    let header: Vec<String> = (0..dim).map(|d| format!("s{d}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..count {
        let row: Vec<String> = (0..dim).map(|d| seeds[d * count + i].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

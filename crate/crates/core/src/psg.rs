//! Progressive seed-generation decoder: a transposed-convolution ladder that
//! turns the codeword into seed feature maps, propagation stages that fuse
//! the codeword with successive seed levels, and the point generation layers.

use rand::Rng;
use serde::{Deserialize, Serialize};
use seedcloud_tensor::kernels::conv_transpose_extent;
use seedcloud_tensor::{BatchNorm, Conv1x1, ConvBnRelu, ConvTranspose2d, Graph, ParamStore, Real, SharedMlp, Var};

use crate::error::{Error, Result};

/// Decoder shape parameters that do not depend on the codeword or output size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsgConfig {
    /// Side of the square block the codeword is reshaped into.
    pub initial: usize,
    /// Side of the square seed grid produced by each ladder stage.
    pub resolutions: Vec<usize>,
    /// Channels of each ladder stage; the last entry is the seed dimension.
    pub channels: Vec<usize>,
    /// Number of propagation stages.
    pub sfpm: usize,
    /// Per-point widths of the point generation layers.
    pub point_widths: Vec<usize>,
}

impl Default for PsgConfig {
    fn default() -> Self {
        PsgConfig {
            initial: 4,
            resolutions: vec![4, 8, 16, 32],
            channels: vec![256, 128, 64, 32],
            sfpm: 3,
            point_widths: vec![256, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub codeword_dim: usize,
    pub output_points: usize,
    pub psg: PsgConfig,
}

/// Kernel, stride and padding of a ladder stage.
pub fn stage_geometry(from: usize, to: usize) -> Result<(usize, usize, usize)> {
    let (k, s, p) = if to == from {
        (3, 1, 1)
    } else if to == 2 * from {
        (4, 2, 1)
    } else {
        return Err(Error::Config(format!(
            "seed ladder step {from}→{to} must keep or double the resolution"
        )));
    };
    debug_assert_eq!(conv_transpose_extent(from, k, s, p), Some(to));
    Ok((k, s, p))
}

impl DecoderConfig {
    pub fn levels(&self) -> usize {
        self.psg.resolutions.len()
    }

    pub fn seed_dim(&self) -> usize {
        *self.psg.channels.last().expect("validated")
    }

    pub fn initial_channels(&self) -> usize {
        self.codeword_dim / (self.psg.initial * self.psg.initial)
    }

    pub fn propagated_dim(&self) -> usize {
        self.codeword_dim / 2
    }

    /// Zero-based seed level consumed by propagation stage `k` (1-based).
    pub fn sfpm_level(&self, k: usize) -> usize {
        self.levels() - self.psg.sfpm + k - 2
    }

    pub fn sfpm_in_channels(&self, k: usize) -> usize {
        let prev = if k >= 2 { self.propagated_dim() } else { 0 };
        self.codeword_dim + self.psg.channels[self.sfpm_level(k)] + prev
    }

    pub fn point_in_channels(&self) -> usize {
        let prev = if self.psg.sfpm > 0 { self.propagated_dim() } else { 0 };
        self.codeword_dim + self.seed_dim() + prev
    }

    /// Side of the smallest square grid holding `output_points` positions.
    pub fn output_grid(&self) -> usize {
        let mut s = (self.output_points as f64).sqrt() as usize;
        while s * s < self.output_points {
            s += 1;
        }
        while s > 1 && (s - 1) * (s - 1) >= self.output_points {
            s -= 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.psg;
        let err = |m: String| Err(Error::Config(m));
        if c.initial == 0 || self.codeword_dim % (c.initial * c.initial) != 0 {
            return err(format!(
                "codeword dimension {} is not divisible into a {}×{} block",
                self.codeword_dim, c.initial, c.initial
            ));
        }
        if self.codeword_dim % 2 != 0 {
            return err(format!("codeword dimension {} must be even", self.codeword_dim));
        }
        if c.resolutions.is_empty() || c.channels.len() != c.resolutions.len() {
            return err("seed ladder needs one channel count per resolution".into());
        }
        if c.channels.contains(&0) || c.point_widths.contains(&0) {
            return err("decoder widths must be positive".into());
        }
        let mut side = c.initial;
        for &r in &c.resolutions {
            stage_geometry(side, r)?;
            side = r;
        }
        if c.resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return err(format!("seed resolutions must strictly increase, got {:?}", c.resolutions));
        }
        if c.sfpm >= c.resolutions.len() {
            return err(format!(
                "{} propagation stages need at least {} seed levels, got {}",
                c.sfpm,
                c.sfpm + 1,
                c.resolutions.len()
            ));
        }
        if self.output_points == 0 {
            return err("output point count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SgmStage {
    pub deconv: ConvTranspose2d,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct PsgDecoder {
    pub cfg: DecoderConfig,
    pub sgm: Vec<SgmStage>,
    pub sfpm: Vec<ConvBnRelu>,
    pub point_mlp: SharedMlp,
    pub point_fc: Conv1x1,
}

/// Everything a decoder pass produces.
#[derive(Clone, Debug)]
pub struct PsgTrace {
    pub seeds: Vec<Var>,
    pub propagated: Vec<Var>,
    pub points: Var,
}

impl PsgDecoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.psg;
        let mut sgm = Vec::with_capacity(c.resolutions.len());
        let (mut side, mut ch) = (c.initial, cfg.initial_channels());
        for (l, (&r, &out)) in c.resolutions.iter().zip(&c.channels).enumerate() {
            let (k, s, p) = stage_geometry(side, r)?;
            sgm.push(SgmStage {
                deconv: ConvTranspose2d::new(store, &format!("{name}.sgm{l}.deconv"), ch, out, k, s, p, rng)?,
                bn: BatchNorm::new(store, &format!("{name}.sgm{l}.bn"), out)?,
            });
            side = r;
            ch = out;
        }
        let sfpm = (1..=c.sfpm)
            .map(|k| ConvBnRelu::new(store, &format!("{name}.sfpm{k}"), cfg.sfpm_in_channels(k), cfg.propagated_dim(), rng))
            .collect::<seedcloud_tensor::Result<Vec<_>>>()?;
        let point_mlp = SharedMlp::new(store, &format!("{name}.points"), cfg.point_in_channels(), &c.point_widths, rng)?;
        let last = point_mlp.out_channels().unwrap_or(cfg.point_in_channels());
        let point_fc = Conv1x1::new(store, &format!("{name}.points.fc"), last, 3, rng)?;
        Ok(PsgDecoder { cfg, sgm, sfpm, point_mlp, point_fc })
    }

    /// Seed feature maps `[B, c_l, h_l, w_l]` for every ladder level.
    pub fn seed_generate<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var) -> Result<Vec<Var>> {
        let batch = g.shape(theta)[0];
        let h0 = self.cfg.psg.initial;
        let mut x = g.tape.reshape(theta, &[batch, self.cfg.initial_channels(), h0, h0])?;
        let mut seeds = Vec::with_capacity(self.sgm.len());
        for stage in &self.sgm {
            let y = stage.deconv.forward(g, x)?;
            let y = stage.bn.forward(g, y)?;
            x = g.tape.relu(y)?;
            seeds.push(x);
        }
        Ok(seeds)
    }

    /// Propagation stage `k` (1-based): fuses the replicated codeword, the
    /// consumed seed level and the previous stage, then resizes to the next
    /// level.
    pub fn sfpm_step<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        k: usize,
        seeds: &[Var],
        theta: Var,
        prev: Option<Var>,
    ) -> Result<Var> {
        if k == 0 || k > self.sfpm.len() {
            return Err(Error::Usage(format!("propagation stage {k} outside 1..={}", self.sfpm.len())));
        }
        if (k == 1) != prev.is_none() {
            return Err(Error::Usage(format!("stage {k} {} a previous propagated map", if k == 1 { "takes no" } else { "needs" })));
        }
        let level = self.cfg.sfpm_level(k);
        let u = seeds[level];
        let (h, w) = (g.shape(u)[2], g.shape(u)[3]);
        let tiled = g.tape.replicate(theta, &[h, w])?;
        let mut parts = vec![tiled, u];
        if let Some(p) = prev {
            if g.shape(p)[2..] != [h, w] {
                return Err(Error::Tensor(seedcloud_tensor::TensorError::Dimension {
                    op: "sfpm",
                    detail: format!("previous map {:?} vs seeds {h}×{w}", g.shape(p)),
                }));
            }
            parts.push(p);
        }
        let x = g.tape.concat_channels(&parts)?;
        let v = self.sfpm[k - 1].forward(g, x)?;
        let next = self.cfg.psg.resolutions[level + 1];
        Ok(g.tape.bilinear(v, next, next)?)
    }

    /// Point generation from the codeword, the finest seeds and the last
    /// propagated map; returns `[B, M, 3]`.
    pub fn generate_points<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var, seeds_last: Var, v_last: Option<Var>) -> Result<Var> {
        let shape = g.shape(seeds_last).to_vec();
        let (batch, h, w) = (shape[0], shape[2], shape[3]);
        let tiled = g.tape.replicate(theta, &[h, w])?;
        let mut parts = vec![tiled, seeds_last];
        parts.extend(v_last);
        let x = g.tape.concat_channels(&parts)?;
        let f = self.point_mlp.forward(g, x)?;
        let side = self.cfg.output_grid();
        let f = g.tape.bilinear(f, side, side)?;
        let c = g.shape(f)[1];
        let f = g.tape.reshape(f, &[batch, c, side * side])?;
        let f = g.tape.narrow_last(f, self.cfg.output_points)?;
        let xyz = self.point_fc.forward(g, f)?;
        Ok(g.tape.transpose_last2(xyz)?)
    }

    pub fn trace<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var) -> Result<PsgTrace> {
        let shape = g.shape(theta);
        if shape.len() != 2 || shape[1] != self.cfg.codeword_dim {
            return Err(Error::Usage(format!(
                "decoder expects codewords [B, {}], got {shape:?}",
                self.cfg.codeword_dim
            )));
        }
        let seeds = self.seed_generate(g, theta)?;
        let mut propagated = Vec::with_capacity(self.sfpm.len());
        for k in 1..=self.sfpm.len() {
            let v = self.sfpm_step(g, k, &seeds, theta, propagated.last().copied())?;
            propagated.push(v);
        }
        let last = *seeds.last().expect("at least one level");
        let points = self.generate_points(g, theta, last, propagated.last().copied())?;
        Ok(PsgTrace { seeds, propagated, points })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var) -> Result<Var> {
        Ok(self.trace(g, theta)?.points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sfpm: usize) -> DecoderConfig {
        DecoderConfig {
            codeword_dim: 512,
            output_points: 1024,
            psg: PsgConfig { sfpm, ..PsgConfig::default() },
        }
    }

    #[test]
    fn channel_bookkeeping() {
        let c = cfg(3);
        c.validate().unwrap();
        assert_eq!(c.sfpm_in_channels(1), 512 + 256);
        assert_eq!(c.sfpm_in_channels(2), 512 + 128 + 256);
        assert_eq!(c.sfpm_in_channels(3), 512 + 64 + 256);
        assert_eq!(c.point_in_channels(), 512 + 32 + 256);
        assert_eq!(c.output_grid(), 32);
        assert_eq!(cfg(0).point_in_channels(), 512 + 32);
    }

    #[test]
    fn rejects_bad_ladders() {
        let mut c = cfg(3);
        c.psg.resolutions = vec![4, 12, 16, 32];
        assert!(c.validate().is_err());
        assert!(cfg(4).validate().is_err());
        let mut c = cfg(1);
        c.codeword_dim = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_grid_is_smallest_square() {
        for (m, s) in [(1, 1), (2, 2), (4, 2), (5, 3), (1000, 32), (1024, 32), (1025, 33)] {
            let c = DecoderConfig { output_points: m, ..cfg(3) };
            assert_eq!(c.output_grid(), s, "M={m}");
        }
    }
}

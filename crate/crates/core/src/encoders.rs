//! Encoders mapping a batch of clouds `[B, N, 3]` to codewords `[B, D]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use seedcloud_tensor::{Graph, ParamStore, Real, SharedMlp, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{ball_query, farthest_point_sample, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Pointnet,
    Pointnetpp,
    Pcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointNetConfig {
    /// Hidden per-point widths; the codeword width is appended.
    pub widths: Vec<usize>,
}

impl Default for PointNetConfig {
    fn default() -> Self {
        PointNetConfig { widths: vec![64, 128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointNetPpConfig {
    pub centers: Vec<usize>,
    pub radii: Vec<f64>,
    pub group_sizes: Vec<usize>,
    /// Per-stage mini-network widths; the codeword width is appended to the
    /// last stage.
    pub widths: Vec<Vec<usize>>,
}

impl Default for PointNetPpConfig {
    fn default() -> Self {
        PointNetPpConfig {
            centers: vec![256, 64, 16],
            radii: vec![0.2, 0.4, 0.8],
            group_sizes: vec![32, 32, 16],
            widths: vec![vec![64, 64, 128], vec![128, 128, 256], vec![256, 512]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcnConfig {
    pub first: Vec<usize>,
    /// Widths after re-concatenating the global feature; the codeword width
    /// is appended.
    pub second: Vec<usize>,
}

impl Default for PcnConfig {
    fn default() -> Self {
        PcnConfig { first: vec![128, 256], second: vec![512] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    #[serde(default)]
    pub pointnet: PointNetConfig,
    #[serde(default)]
    pub pointnetpp: PointNetPpConfig,
    #[serde(default)]
    pub pcn: PcnConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Pointnet,
            pointnet: PointNetConfig::default(),
            pointnetpp: PointNetPpConfig::default(),
            pcn: PcnConfig::default(),
        }
    }
}

fn with_codeword(widths: &[usize], d: usize) -> Vec<usize> {
    widths.iter().copied().chain([d]).collect()
}

fn check_widths(what: &str, widths: &[usize]) -> Result<()> {
    if widths.contains(&0) {
        return Err(Error::Config(format!("{what} widths must be positive, got {widths:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PointNetEncoder {
    pub mlp: SharedMlp,
}

impl PointNetEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &PointNetConfig,
        codeword_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_widths("pointnet", &cfg.widths)?;
        let mlp = SharedMlp::new(store, &format!("{name}.mlp"), 3, &with_codeword(&cfg.widths, codeword_dim), rng)?;
        Ok(PointNetEncoder { mlp })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let xt = g.tape.transpose_last2(x)?;
        let f = self.mlp.forward(g, xt)?;
        Ok(g.tape.max_last(f)?)
    }
}

#[derive(Clone, Debug)]
pub struct PointNetPpEncoder {
    pub cfg: PointNetPpConfig,
    pub stages: Vec<SharedMlp>,
}

impl PointNetPpEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &PointNetPpConfig,
        codeword_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let s = cfg.centers.len();
        if s == 0 || cfg.radii.len() != s || cfg.group_sizes.len() != s || cfg.widths.len() != s {
            return Err(Error::Config(
                "pointnetpp centers, radii, group_sizes and widths must have one entry per stage".into(),
            ));
        }
        if cfg.centers.windows(2).any(|w| w[1] > w[0]) || cfg.centers.contains(&0) {
            return Err(Error::Config(format!("pointnetpp centers must be positive and non-increasing, got {:?}", cfg.centers)));
        }
        if cfg.radii.iter().any(|r| !(*r > 0.0)) || cfg.group_sizes.contains(&0) {
            return Err(Error::Config("pointnetpp radii and group sizes must be positive".into()));
        }
        let mut stages = Vec::with_capacity(s);
        let mut c = 0;
        for (i, w) in cfg.widths.iter().enumerate() {
            check_widths("pointnetpp", w)?;
            let widths = if i + 1 == s { with_codeword(w, codeword_dim) } else { w.clone() };
            if widths.is_empty() {
                return Err(Error::Config(format!("pointnetpp stage {i} has no layers")));
            }
            stages.push(SharedMlp::new(store, &format!("{name}.sa{i}"), 3 + c, &widths, rng)?);
            c = *widths.last().expect("nonempty");
        }
        Ok(PointNetPpEncoder { cfg: cfg.clone(), stages })
    }

    pub fn min_points(&self) -> usize {
        self.cfg.centers[0]
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (batch, n) = (shape[0], shape[1]);
        if n < self.min_points() {
            return Err(Error::Config(format!(
                "pointnetpp needs at least {} points, got {n}",
                self.min_points()
            )));
        }
        // Sampling starts from index 0; a canonical coordinate order makes
        // that choice, and hence the codeword, independent of input order.
        let raw = g.value(x).to_f64_vec();
        let mut clouds = Vec::with_capacity(batch);
        for item in raw.chunks_exact(n * 3) {
            let mut pts: Vec<[f64; 3]> = item.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                let (p, q) = (pts[a], pts[b]);
                p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(p[2].total_cmp(&q[2]))
            });
            pts = idx.iter().map(|&i| pts[i]).collect();
            clouds.push(PointCloud::new(pts)?);
        }
        let mut features: Option<Var> = None;
        for (s, mlp) in self.stages.iter().enumerate() {
            let (m, k, r) = (self.cfg.centers[s], self.cfg.group_sizes[s], self.cfg.radii[s]);
            let mut rel = Vec::with_capacity(batch * 3 * m * k);
            let mut gather = Vec::with_capacity(batch * m * k);
            let mut next = Vec::with_capacity(batch);
            for pc in &clouds {
                let centers = farthest_point_sample(pc, m.min(pc.len()), 0)?;
                let groups = ball_query(pc, &centers, r, k)?;
                let pts = pc.points();
                let mut planes = vec![Vec::with_capacity(m * k); 3];
                for (c, group) in centers.iter().zip(&groups) {
                    for &j in group {
                        for axis in 0..3 {
                            planes[axis].push(F::of(pts[j][axis] - pts[*c][axis]));
                        }
                        gather.push(j);
                    }
                }
                rel.extend(planes.into_iter().flatten());
                next.push(pc.select(&centers));
            }
            let q = m * k;
            let rel = g.input(Tensor::new(vec![batch, 3, q], rel)?);
            let input = match features {
                None => rel,
                Some(f) => {
                    let grouped = g.tape.gather_last(f, &gather)?;
                    g.tape.concat_channels(&[rel, grouped])?
                }
            };
            let h = mlp.forward(g, input)?;
            let c = g.shape(h)[1];
            let h = g.tape.reshape(h, &[batch, c, m, k])?;
            features = Some(g.tape.max_last(h)?);
            clouds = next;
        }
        let f = features.expect("at least one stage");
        Ok(g.tape.max_last(f)?)
    }
}

#[derive(Clone, Debug)]
pub struct PcnEncoder {
    pub first: SharedMlp,
    pub second: SharedMlp,
}

/// Intermediate values of a PCN pass.
#[derive(Clone, Copy, Debug)]
pub struct PcnTrace {
    pub global: Var,
    pub fused: Var,
    pub codeword: Var,
}

impl PcnEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &PcnConfig,
        codeword_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_widths("pcn", &cfg.first)?;
        check_widths("pcn", &cfg.second)?;
        if cfg.first.is_empty() {
            return Err(Error::Config("pcn first stage has no layers".into()));
        }
        let first = SharedMlp::new(store, &format!("{name}.first"), 3, &cfg.first, rng)?;
        let c = 2 * cfg.first.last().expect("nonempty");
        let second = SharedMlp::new(store, &format!("{name}.second"), c, &with_codeword(&cfg.second, codeword_dim), rng)?;
        Ok(PcnEncoder { first, second })
    }

    pub fn trace<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<PcnTrace> {
        let n = g.shape(x)[1];
        let xt = g.tape.transpose_last2(x)?;
        let local = self.first.forward(g, xt)?;
        let global = g.tape.max_last(local)?;
        let tiled = g.tape.replicate(global, &[n])?;
        let fused = g.tape.concat_channels(&[local, tiled])?;
        let f = self.second.forward(g, fused)?;
        let codeword = g.tape.max_last(f)?;
        Ok(PcnTrace { global, fused, codeword })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.codeword)
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    PointNet(PointNetEncoder),
    PointNetPp(PointNetPpEncoder),
    Pcn(PcnEncoder),
}

impl Encoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        codeword_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if codeword_dim == 0 {
            return Err(Error::Config("codeword dimension must be positive".into()));
        }
        Ok(match cfg.kind {
            EncoderKind::Pointnet => Encoder::PointNet(PointNetEncoder::new(store, name, &cfg.pointnet, codeword_dim, rng)?),
            EncoderKind::Pointnetpp => {
                Encoder::PointNetPp(PointNetPpEncoder::new(store, name, &cfg.pointnetpp, codeword_dim, rng)?)
            }
            EncoderKind::Pcn => Encoder::Pcn(PcnEncoder::new(store, name, &cfg.pcn, codeword_dim, rng)?),
        })
    }

    /// Encodes `x [B, N, 3]` into `[B, D]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Usage(format!("encoder input must be [B, N, 3], got {shape:?}")));
        }
        match self {
            Encoder::PointNet(e) => e.forward(g, x),
            Encoder::PointNetPp(e) => e.forward(g, x),
            Encoder::Pcn(e) => e.forward(g, x),
        }
    }
}

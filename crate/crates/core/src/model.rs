//! Encoder/decoder pairs and their parameter accounting.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seedcloud_tensor::{Graph, Mode, ParamStore, Real, Tensor, Var};

use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::folding::{FoldingConfig, FoldingDecoder};
use crate::geometry::PointCloud;
use crate::psg::{DecoderConfig, PsgConfig, PsgDecoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Psg,
    Folding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub codeword_dim: usize,
    pub output_points: usize,
    pub decoder: DecoderKind,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub psg: PsgConfig,
    #[serde(default)]
    pub folding: FoldingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            codeword_dim: 512,
            output_points: 1024,
            decoder: DecoderKind::Psg,
            encoder: EncoderConfig::default(),
            psg: PsgConfig::default(),
            folding: FoldingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            codeword_dim: self.codeword_dim,
            output_points: self.output_points,
            psg: self.psg.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Psg(PsgDecoder),
    Folding(FoldingDecoder),
}

impl Decoder {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, theta: Var) -> Result<Var> {
        match self {
            Decoder::Psg(d) => d.forward(g, theta),
            Decoder::Folding(d) => d.forward(g, theta),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Network {
    pub fn build<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(store, "encoder", &cfg.encoder, cfg.codeword_dim, rng)?;
        let decoder = match cfg.decoder {
            DecoderKind::Psg => Decoder::Psg(PsgDecoder::new(store, "decoder", cfg.decoder_config(), rng)?),
            DecoderKind::Folding => Decoder::Folding(FoldingDecoder::new(
                store,
                "decoder",
                &cfg.folding,
                cfg.codeword_dim,
                cfg.output_points,
                rng,
            )?),
        };
        Ok(Network { encoder, decoder })
    }

    /// Codewords `[B, D]` and reconstructions `[B, M, 3]` of `x [B, N, 3]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Var, Var)> {
        let theta = self.encoder.forward(g, x)?;
        let points = self.decoder.forward(g, theta)?;
        Ok((theta, points))
    }
}

/// A network together with the parameters it owns.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub net: Network,
    pub store: ParamStore<F>,
}

/// Stacks clouds of equal size into `[B, N, 3]`.
pub fn batch_tensor<F: Real>(clouds: &[&PointCloud]) -> Result<Tensor<F>> {
    let n = clouds.first().ok_or_else(|| Error::Usage("empty batch".into()))?.len();
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::Usage("clouds in a batch must have equal sizes".into()));
    }
    let data = clouds.iter().flat_map(|c| c.flat::<F>()).collect();
    Ok(Tensor::new(vec![clouds.len(), n, 3], data)?)
}

impl<F: Real> Model<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&mut store, cfg, &mut rng)?;
        Ok(Model { cfg: cfg.clone(), net, store })
    }

    /// Eval-mode codewords and reconstructions for a batch of clouds.
    pub fn infer(&mut self, clouds: &[&PointCloud], seed: u64) -> Result<(Vec<Vec<f64>>, Vec<PointCloud>)> {
        let x = batch_tensor::<F>(clouds)?;
        let mut g = Graph::new(&mut self.store, Mode::Eval, seed);
        let xv = g.input(x);
        let (theta, points) = self.net.forward(&mut g, xv)?;
        let d = self.cfg.codeword_dim;
        let codes = g.value(theta).to_f64_vec().chunks_exact(d).map(<[f64]>::to_vec).collect();
        let m = g.shape(points)[1];
        let clouds = g
            .value(points)
            .data()
            .chunks_exact(m * 3)
            .map(PointCloud::from_flat)
            .collect::<Result<Vec<_>>>()?;
        Ok((codes, clouds))
    }

    pub fn parameter_count(&self) -> ParameterCount {
        count_parameters(&self.store)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    /// Counts grouped by the first two name components, e.g. `decoder.sgm0`.
    pub breakdown: BTreeMap<String, usize>,
}

pub fn count_parameters<F: Real>(store: &ParamStore<F>) -> ParameterCount {
    ParameterCount {
        total: store.num_trainable(),
        breakdown: store.breakdown(2),
    }
}

//! Full model: embeddings, tokenizers, sandglass attention, backbone and the
//! unified output projection
//! `Y = MLP(Z_N' + Z_T'[trend] + Z_S)`.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, FinetunePolicy, SequenceBackbone};
use crate::config::{BackboneKind, ModelConfig};
use crate::error::{structural, Error, Result};
use crate::losses;
use crate::nn::{Init, Linear, Mlp, ParamGroup, ParamReport, ParamStore};
use crate::sga::SandglassAttention;
use crate::spectral::{self, SensorGraph, SpectralBasis};
use crate::tokenizer::{SpatialTokenizer, TemporalTokenizer};

/// One batch of input windows. `x` and `mask` are (B, T, N, C); `tod` and
/// `dow` are (B, T) lookup indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub mask: Tensor,
    pub tod: Tensor,
    pub dow: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// (B, N, T_out·C), time-major within each node row.
    pub y: Tensor,
    /// Precoder attention weights (B, M, N).
    pub s: Tensor,
    pub z_s: Tensor,
    pub z_t: Tensor,
    pub z_h: Tensor,
    /// Backbone output (B, 2 + M, d).
    pub hidden: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub total: f64,
}

/// Everything derived from the graph: spectral basis and constraint-loss inputs.
#[derive(Debug, Clone)]
pub struct GraphCache {
    pub basis: SpectralBasis,
    basis_t: Tensor,
    adjacency_t: Tensor,
    alpha_minus_one: Tensor,
    log_normalizer: f64,
}

impl GraphCache {
    pub fn build(graph: &SensorGraph, k: usize, device: &Device, dtype: DType) -> Result<Self> {
        let basis = spectral::spectral_basis(&graph.laplacian()?, k)?;
        let n = graph.n_nodes();
        let basis_t = Tensor::from_vec(
            basis.vectors.transpose().as_slice().to_vec(),
            (n, k),
            device,
        )?
        .to_dtype(dtype)?;
        let adj = graph.binary_symmetric();
        let adjacency_t = Tensor::from_vec(adj.transpose().as_slice().to_vec(), (n, n), device)?.to_dtype(dtype)?;
        let alpha = losses::alpha_from_graph(&graph.symmetrized())?;
        let alpha_minus_one = Tensor::from_vec(
            alpha.alpha.iter().map(|a| a - 1.0).collect::<Vec<_>>(),
            n,
            device,
        )?
        .to_dtype(dtype)?;
        Ok(Self {
            basis,
            basis_t,
            adjacency_t,
            alpha_minus_one,
            log_normalizer: alpha.log_normalizer(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.basis.n_nodes()
    }
}

#[derive(Debug)]
pub struct StdPlm {
    config: ModelConfig,
    store: ParamStore,
    tod_table: Tensor,
    dow_table: Tensor,
    node_proj: Linear,
    spatial: SpatialTokenizer,
    temporal: TemporalTokenizer,
    sga: SandglassAttention,
    backbone: Box<dyn SequenceBackbone>,
    head: Mlp,
    graph: GraphCache,
}

impl StdPlm {
    /// Builds the model; a pretrained backbone is read from `config.backbone.checkpoint`.
    pub fn new(config: &ModelConfig, graph: &SensorGraph, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(config, graph, device, dtype, seed, None)
    }

    /// Same as [`StdPlm::new`] with the pretrained backbone weights supplied in memory.
    pub fn with_pretrained_weights(
        config: &ModelConfig,
        graph: &SensorGraph,
        weights: HashMap<String, Tensor>,
        device: &Device,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        if config.backbone.kind != BackboneKind::Pretrained {
            return Err(Error::Config("pretrained weights supplied for a scratch backbone".into()));
        }
        Self::build(config, graph, device, dtype, seed, Some(weights))
    }

    fn build(
        config: &ModelConfig,
        graph: &SensorGraph,
        device: &Device,
        dtype: DType,
        seed: u64,
        weights: Option<HashMap<String, Tensor>>,
    ) -> Result<Self> {
        config.validate()?;
        if config.m >= graph.n_nodes() {
            log::warn!(
                "{} region tokens for {} nodes: the precoder does not compress",
                config.m,
                graph.n_nodes()
            );
        }
        let mut store = ParamStore::new(device.clone(), dtype, ChaCha8Rng::seed_from_u64(seed));
        let slots = spectral::slots_per_day(config.interval_seconds)?;
        let bound = 1.0 / (config.d_t as f64).sqrt();
        let g = ParamGroup::Trainable;
        let tod_table = store.get("embedding.tod", &[slots, config.d_t], Init::Uniform(bound), g)?;
        let dow_table = store.get("embedding.dow", &[7, config.d_t], Init::Uniform(bound), g)?;
        let node_proj = Linear::new(&mut store, "embedding.node", config.k, config.d_n, g)?;
        let spatial = SpatialTokenizer::new(&mut store, config)?;
        let temporal = TemporalTokenizer::new(&mut store, config)?;
        let sga = SandglassAttention::new(&mut store, config)?;
        let backbone: Box<dyn SequenceBackbone> = match weights {
            Some(w) => Box::new(backbone::pretrained_from_weights(
                &mut store,
                w,
                config,
                &FinetunePolicy::from_config(config),
            )?),
            None => backbone::build(&mut store, config)?,
        };
        let head = Mlp::new(&mut store, "head", config.d_plm, config.d_plm, config.output_width())?;
        let graph = GraphCache::build(graph, config.k, device, dtype)?;
        Ok(Self {
            config: config.clone(),
            store,
            tod_table,
            dow_table,
            node_proj,
            spatial,
            temporal,
            sga,
            backbone,
            head,
            graph,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn graph_cache(&self) -> &GraphCache {
        &self.graph
    }

    pub fn sga(&self) -> &SandglassAttention {
        &self.sga
    }

    pub fn backbone(&self) -> &dyn SequenceBackbone {
        self.backbone.as_ref()
    }

    pub fn param_report(&self) -> ParamReport {
        self.store.report()
    }

    /// Recomputes the spectral basis for another graph; trained weights are kept.
    pub fn set_graph(&mut self, graph: &SensorGraph) -> Result<()> {
        self.graph = GraphCache::build(graph, self.config.k, self.store.device(), self.store.dtype())?;
        Ok(())
    }

    /// Restores a cached basis (e.g. from a checkpoint) instead of recomputing it.
    pub fn set_graph_with_basis(&mut self, graph: &SensorGraph, basis: SpectralBasis) -> Result<()> {
        let mut cache = GraphCache::build(graph, self.config.k, self.store.device(), self.store.dtype())?;
        if basis.vectors.shape() != cache.basis.vectors.shape() {
            return Err(structural!("cached basis does not match graph"));
        }
        let n = basis.n_nodes();
        cache.basis_t = Tensor::from_vec(
            basis.vectors.transpose().as_slice().to_vec(),
            (n, self.config.k),
            self.store.device(),
        )?
        .to_dtype(self.store.dtype())?;
        cache.basis = basis;
        self.graph = cache;
        Ok(())
    }

    /// (B, T, 2·d_t) time embeddings from lookup indices.
    pub fn time_embedding(&self, tod: &Tensor, dow: &Tensor) -> Result<Tensor> {
        let (b, t) = tod.dims2()?;
        let tod_e = self.tod_table.index_select(&tod.flatten_all()?, 0)?;
        let dow_e = self.dow_table.index_select(&dow.flatten_all()?, 0)?;
        Ok(Tensor::cat(&[&tod_e, &dow_e], 1)?.reshape((b, t, 2 * self.config.d_t))?)
    }

    /// (N, d_n) topology-aware node embedding.
    pub fn node_embedding(&self) -> Result<Tensor> {
        self.node_proj.forward(&self.graph.basis_t)
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        let dims = batch.x.dims();
        if dims.len() != 4 {
            return Err(structural!("expected (B, T, N, C) input, got {dims:?}"));
        }
        let n = dims[2];
        if n != self.graph.n_nodes() {
            return Err(Error::RebuildRequired {
                expected: self.graph.n_nodes(),
                got: n,
            });
        }
        let te = self.time_embedding(&batch.tod, &batch.dow)?;
        let ne = self.node_embedding()?;
        let z_s = self.spatial.forward(&batch.x, &batch.mask, &te, &ne)?;
        let z_t = self.temporal.forward(&batch.x, &te)?;
        let (z_h, s) = self.sga.precode(&z_s)?;
        let tokens = Tensor::cat(&[&z_t, &z_h], 1)?;
        let hidden = self.backbone.forward(&tokens)?;
        let z_t_out = hidden.narrow(1, 0, 2)?;
        let z_h_out = hidden.narrow(1, 2, self.config.m)?;
        let z_n_out = self.sga.decode(&z_s, &z_h_out)?;
        let y = self.project(&z_n_out, &z_t_out, &z_s)?;
        Ok(ForwardOutput {
            y,
            s,
            z_s,
            z_t,
            z_h,
            hidden,
        })
    }

    /// `MLP(Z_N' + Z_T'[1] + Z_S)` with the trend state broadcast over nodes.
    pub fn project(&self, z_n_out: &Tensor, z_t_out: &Tensor, z_s: &Tensor) -> Result<Tensor> {
        let trend = z_t_out.narrow(1, 1, 1)?;
        let h = (z_n_out + z_s)?.broadcast_add(&trend)?;
        self.head.forward(&h)
    }

    /// Training objective on normalized values. `target` and `eval_mask` are
    /// in the output layout (B, N, T_out·C).
    pub fn objective(
        &self,
        out: &ForwardOutput,
        target: &Tensor,
        eval_mask: &Tensor,
        lambda_c: f64,
    ) -> Result<(Tensor, LossTerms)> {
        let l1 = losses::masked_l1_tensor(&out.y, target, eval_mask)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let mut terms = LossTerms {
            l1: scalar(&l1)?,
            l_g: 0.0,
            l_r: 0.0,
            total: 0.0,
        };
        let total = if lambda_c != 0.0 {
            let lg = losses::structure_loss_tensor(&out.s, &self.graph.adjacency_t)?.mean(0)?;
            let lr = losses::dirichlet_regularizer_tensor(
                &out.s,
                &self.graph.alpha_minus_one,
                self.graph.log_normalizer,
            )?
            .mean(0)?;
            terms.l_g = scalar(&lg)?;
            terms.l_r = scalar(&lr)?;
            (l1 + (lg + lr)?.affine(lambda_c, 0.0)?)?
        } else {
            l1
        };
        terms.total = scalar(&total)?;
        Ok((total, terms))
    }
}

/// (B, T, N, C) -> (B, N, T·C), time-major within each row.
pub fn to_node_major(t: &Tensor) -> Result<Tensor> {
    let (b, steps, n, c) = t.dims4()?;
    Ok(t.permute((0, 2, 1, 3))?.contiguous()?.reshape((b, n, steps * c))?)
}

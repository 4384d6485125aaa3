//! Missing-value patterns. Masks use `true` for observed (visible) cells.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use ndarray::Array3;
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::MissingPattern;
use crate::data::cluster::{default_region_count, spectral_clusters};
use crate::error::{invalid, Error, Result};
use crate::spectral::SensorGraph;

/// Steps per temporal patch in continuous missing.
pub const CM_PATCH: usize = 3;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid!("missing rate {rate} outside [0, 1]"));
    }
    Ok(())
}

pub fn missing_fraction(mask: &Array3<bool>) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&m| !m).count() as f64 / mask.len() as f64
}

/// Random missing: every cell dropped independently with probability `rate`.
pub fn generate_rm(shape: (usize, usize, usize), rate: f64, seed: u64) -> Result<Array3<bool>> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Array3::from_shape_simple_fn(shape, || rng.random::<f64>() >= rate))
}

#[derive(Debug, Clone)]
pub struct CmMask {
    pub mask: Array3<bool>,
    /// Region id per node.
    pub regions: Vec<usize>,
}

/// Continuous missing: (3-step patch x region) blocks, all channels, dropped
/// in random order until at least `rate` of the cells are missing.
pub fn generate_cm(graph: &SensorGraph, shape: (usize, usize, usize), rate: f64, seed: u64) -> Result<CmMask> {
    check_rate(rate)?;
    let (t, n, _) = shape;
    if graph.n_nodes() != n {
        return Err(invalid!("graph has {} nodes, mask has {n}", graph.n_nodes()));
    }
    let regions = spectral_clusters(graph, default_region_count(n), seed)?;
    let n_regions = regions.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_regions];
    for (node, &r) in regions.iter().enumerate() {
        members[r].push(node);
    }
    let patches = t.div_ceil(CM_PATCH);
    let mut blocks: Vec<(usize, usize)> = (0..patches).flat_map(|p| (0..n_regions).map(move |r| (p, r))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    blocks.shuffle(&mut rng);
    let mut mask = Array3::from_elem(shape, true);
    let target = (rate * mask.len() as f64).round() as usize;
    let mut missing = 0usize;
    for (p, r) in blocks {
        if missing >= target {
            break;
        }
        for step in p * CM_PATCH..((p + 1) * CM_PATCH).min(t) {
            for &node in &members[r] {
                for v in mask.slice_mut(ndarray::s![step, node, ..]).iter_mut() {
                    *v = false;
                    missing += 1;
                }
            }
        }
    }
    Ok(CmMask { mask, regions })
}

/// Number of (patch, region) blocks that are only partly missing. Zero for
/// every mask produced by [`generate_cm`].
pub fn block_closure_violations(mask: &Array3<bool>, regions: &[usize]) -> usize {
    let (t, n, _) = mask.dim();
    let n_regions = regions.iter().max().map_or(0, |m| m + 1);
    let mut bad = 0;
    for p in 0..t.div_ceil(CM_PATCH) {
        for r in 0..n_regions {
            let (mut seen_missing, mut seen_present) = (false, false);
            for step in p * CM_PATCH..((p + 1) * CM_PATCH).min(t) {
                for node in (0..n).filter(|&i| regions[i] == r) {
                    for &v in mask.slice(ndarray::s![step, node, ..]) {
                        if v {
                            seen_present = true;
                        } else {
                            seen_missing = true;
                        }
                    }
                }
            }
            if seen_missing && seen_present {
                bad += 1;
            }
        }
    }
    bad
}

/// Hides a fraction of the observed cells from the model. The fraction is
/// drawn uniformly from `ratio_range`; exactly `round(ratio * observed)`
/// cells move from the model mask to the evaluation mask.
pub fn condition_missing<R: Rng>(
    mask_in: &Array3<bool>,
    ratio_range: [f64; 2],
    rng: &mut R,
) -> Result<(Array3<bool>, Array3<bool>)> {
    let [lo, hi] = ratio_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(invalid!("condition ratio range [{lo}, {hi}] invalid"));
    }
    let observed: Vec<usize> = mask_in
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if observed.is_empty() {
        return Err(invalid!("window has no observed entries"));
    }
    let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let k = (ratio * observed.len() as f64).round() as usize;
    let mut model = mask_in.clone();
    let mut eval = Array3::from_elem(mask_in.dim(), false);
    {
        let m = model.as_slice_mut().expect("standard layout");
        let e = eval.as_slice_mut().expect("standard layout");
        for pick in index::sample(rng, observed.len(), k) {
            let i = observed[pick];
            m[i] = false;
            e[i] = true;
        }
    }
    Ok((model, eval))
}

/// JSON sidecar stored next to a persisted mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub pattern: MissingPattern,
    pub rate: f64,
    pub seed: u64,
    pub shape: [usize; 3],
    pub achieved_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<usize>>,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (zlib-compressed bits, row-major, LSB first) and a
/// `.json` sidecar with the same stem.
pub fn save_mask(path: &Path, mask: &Array3<bool>, meta: &MaskMeta) -> Result<()> {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut enc = ZlibEncoder::new(file, Compression::default());
    enc.write_all(&bytes).map_err(io)?;
    enc.finish().map_err(io)?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(sidecar(path), json).map_err(|e| Error::io(format!("writing sidecar for {}", path.display()), e))?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<(Array3<bool>, MaskMeta)> {
    let side = sidecar(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
    let meta: MaskMeta = serde_json::from_str(&text)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    ZlibDecoder::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("{}: corrupt mask stream: {e}", path.display())))?;
    let [t, n, c] = meta.shape;
    let len = t * n * c;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Format(format!(
            "{}: {} bytes for shape {:?}",
            path.display(),
            bytes.len(),
            meta.shape
        )));
    }
    let bits: Vec<bool> = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    let mask = Array3::from_shape_vec((t, n, c), bits).map_err(|e| Error::Format(e.to_string()))?;
    Ok((mask, meta))
}

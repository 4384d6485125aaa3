use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{MetricAccumulator, Metrics, WindowSpec};
use crate::error::{invalid, Result};
use crate::model::StdPlm;
use crate::runtime::prepare::{HostBatch, PreparedData, Purpose};

/// Produces de-normalized predictions in the (B, N, T_out·C) layout.
pub trait Predictor {
    fn predict(&self, batch: &HostBatch, data: &PreparedData) -> Result<Vec<f64>>;
}

pub struct ModelPredictor<'a>(pub &'a StdPlm);

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, hb: &HostBatch, data: &PreparedData) -> Result<Vec<f64>> {
        let model = self.0;
        let (batch, _, _) = hb.to_device(model.device(), model.dtype())?;
        let out = model.forward(&batch)?;
        let y = out.y.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(y
            .iter()
            .enumerate()
            .map(|(k, &v)| data.stats.denorm_value(v, hb.channel_of(k)))
            .collect())
    }
}

/// Repeats the last visible input value; falls back to the node mean.
pub struct CopyLast;

impl Predictor for CopyLast {
    fn predict(&self, hb: &HostBatch, data: &PreparedData) -> Result<Vec<f64>> {
        let per_row = hb.horizon * hb.c;
        Ok((0..hb.b * hb.n * per_row)
            .map(|k| {
                let (bi, node, ch) = (k / (hb.n * per_row), hb.node_of(k), hb.channel_of(k));
                match hb.last_visible(bi, node, ch) {
                    Some(v) => data.stats.denorm_value(v as f64, ch),
                    None => data.node_means[node * hb.c + ch],
                }
            })
            .collect())
    }
}

/// Per (node, channel) training mean.
pub struct NodeMean;

impl Predictor for NodeMean {
    fn predict(&self, hb: &HostBatch, data: &PreparedData) -> Result<Vec<f64>> {
        Ok((0..hb.target.len())
            .map(|k| data.node_means[hb.node_of(k) * hb.c + hb.channel_of(k)])
            .collect())
    }
}

/// The same value everywhere.
pub struct Constant(pub f64);

impl Predictor for Constant {
    fn predict(&self, hb: &HostBatch, _: &PreparedData) -> Result<Vec<f64>> {
        Ok(vec![self.0; hb.target.len()])
    }
}

/// Metrics over `windows`, scored against raw values at evaluation positions.
pub fn evaluate_windows(
    predictor: &dyn Predictor,
    data: &PreparedData,
    windows: &[WindowSpec],
    batch_size: usize,
) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(invalid!("no windows to evaluate"));
    }
    let mut acc = MetricAccumulator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(batch_size.max(1)) {
        let hb = data.assemble(chunk, Purpose::Eval, &mut rng)?;
        let y = predictor.predict(&hb, data)?;
        for (k, &yk) in y.iter().enumerate() {
            if hb.eval[k] > 0.0 {
                acc.push(yk, hb.raw_target[k]);
            }
        }
    }
    if acc.count() == 0 {
        return Err(invalid!("evaluation mask is empty"));
    }
    acc.finish()
}

/// Predicted and true series for one (node, channel) at the first horizon
/// step of each window, for plotting.
pub fn trace(
    predictor: &dyn Predictor,
    data: &PreparedData,
    windows: &[WindowSpec],
    node: usize,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(batch_size.max(1)) {
        let hb = data.assemble(chunk, Purpose::Eval, &mut rng)?;
        let y = predictor.predict(&hb, data)?;
        let row = hb.horizon * hb.c;
        for bi in 0..hb.b {
            let k = bi * hb.n * row + node * row;
            pred.push(y[k]);
            truth.push(hb.raw_target[k]);
        }
    }
    Ok((pred, truth))
}

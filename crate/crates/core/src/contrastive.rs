//! Three-way contrastive alignment of text, video and audio embeddings.
//!
//! Each modality's pooled features go through its own two-layer projection
//! head into a shared space. For a batch of aligned triplets the objective is
//! `L_TV + L_VA + L_AT`, each term an InfoNCE loss whose anchor is the first
//! named modality and whose negatives are the other samples in the batch.

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FeatureMatrix, Manifest, Modality};
use crate::error::{Error, Result};
use crate::numerics::{
    cosine, Bound, Linear, Optimizer, OptimizerConfig, ParamId, ParamSet, Real, Tape, Tensor, Var,
};
use crate::rng;

pub const EMBED_DIM: usize = 768;
pub const DEFAULT_TAU: f64 = 0.07;
/// Bounds for a learned inverse temperature.
pub const INV_TAU_RANGE: (f32, f32) = (1.0, 100.0);

/// Anchor/positive pairs in the order `L_TV`, `L_VA`, `L_AT`.
pub const PAIRS: [(Modality, Modality); 3] = [
    (Modality::Text, Modality::Video),
    (Modality::Video, Modality::Audio),
    (Modality::Audio, Modality::Text),
];

/// Mean over token rows.
pub fn pool(features: &FeatureMatrix) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; features.cols()];
    for r in 0..features.rows() {
        for (o, &v) in out.iter_mut().zip(features.row(r)) {
            *o += v;
        }
    }
    let n = features.rows() as f32;
    out.iter_mut().for_each(|v| *v /= n);
    if out.iter().all(|&v| v == 0.0) {
        return Err(Error::numeric("pool", format!("{} features pool to a zero vector", features.modality)));
    }
    Ok(out)
}

/// Pools one modality of the given records into a `[len × dim]` matrix.
pub fn pooled_matrix(manifest: &Manifest, indices: &[usize], m: Modality) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut cols = 0;
    for &i in indices {
        let r = &manifest.records()[i];
        let v = pool(manifest.features(r, m)).map_err(|e| match e {
            Error::Numeric { op, detail } => Error::Numeric {
                op,
                detail: format!("record `{}`: {detail}", r.video_id),
            },
            other => other,
        })?;
        cols = v.len();
        data.extend(v);
    }
    Tensor::matrix(indices.len(), cols, data)
}

/// Rows `idx` of a matrix.
pub fn gather_rows<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let c = t.last_dim();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(&[idx.len(), c], data).expect("gathered shape")
}

/// `Linear → ReLU → Linear`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub first: Linear,
    pub second: Linear,
}

impl ProjectionHead {
    pub fn init<R: rand::Rng + ?Sized>(
        params: &mut ParamSet<f32>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::init(params, &format!("{name}.0"), in_dim, hidden, rng),
            second: Linear::init(params, &format!("{name}.1"), hidden, out_dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, p, h)
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }
}

/// Mean InfoNCE loss with `a` as anchors and `b` as candidates:
/// cross-entropy of `cos(aᵢ, bⱼ) · inv_tau` against the diagonal.
/// `inv_tau` is a one-element variable. With `symmetric` the loss is the
/// mean of both anchor directions.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, inv_tau: Var, symmetric: bool) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dimension {
            op: "info_nce",
            lhs: sa,
            rhs: sb,
        });
    }
    if !tape.value(inv_tau).is_scalar() || tape.value(inv_tau).item() <= T::zero() {
        return Err(Error::Config("temperature must be a positive scalar".into()));
    }
    let n = sa[0];
    let na = tape.normalize_rows(a)?;
    let nb = tape.normalize_rows(b)?;
    let nbt = tape.transpose(nb)?;
    let sims = tape.matmul(na, nbt)?;
    let logits = tape.mul(sims, inv_tau)?;
    let labels: Vec<usize> = (0..n).collect();
    let forward = tape.cross_entropy(logits, &labels)?;
    if !symmetric {
        return Ok(forward);
    }
    let lt = tape.transpose(logits)?;
    let backward = tape.cross_entropy(lt, &labels)?;
    let both = tape.add(forward, backward)?;
    tape.scale(both, T::of(0.5))
}

/// The three pairwise terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct PairLosses {
    pub tv: Var,
    pub va: Var,
    pub at: Var,
    pub total: Var,
}

/// `L_TV + L_VA + L_AT` over projected embeddings indexed by
/// [`Modality::index`].
pub fn total_contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    projected: [Var; 3],
    inv_tau: Var,
    symmetric: bool,
) -> Result<PairLosses> {
    let [tv, va, at] = PAIRS.map(|(x, y)| (projected[x.index()], projected[y.index()]));
    let tv = info_nce(tape, tv.0, tv.1, inv_tau, symmetric)?;
    let va = info_nce(tape, va.0, va.1, inv_tau, symmetric)?;
    let at = info_nce(tape, at.0, at.1, inv_tau, symmetric)?;
    let s = tape.add(tv, va)?;
    let total = tape.add(s, at)?;
    Ok(PairLosses { tv, va, at, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Input dimension per modality, indexed by [`Modality::index`].
    pub in_dims: [usize; 3],
    pub hidden: usize,
    pub out_dim: usize,
    pub tau: f64,
    pub learnable_tau: bool,
    pub symmetric: bool,
}

/// Projection heads for all three modalities plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    pub config: HeadConfig,
    pub params: ParamSet<f32>,
    pub heads: [ProjectionHead; 3],
    pub inv_tau: Option<ParamId>,
}

impl ContrastiveModel {
    pub fn new<R: rand::Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        if config.tau.is_nan() || config.tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", config.tau)));
        }
        let mut params = ParamSet::new();
        let heads = Modality::ALL.map(|m| {
            ProjectionHead::init(
                &mut params,
                &format!("head.{m}"),
                config.in_dims[m.index()],
                config.hidden,
                config.out_dim,
                rng,
            )
        });
        let inv_tau = config
            .learnable_tau
            .then(|| params.add("inv_tau", Tensor::scalar((1.0 / config.tau) as f32)));
        Ok(Self {
            config,
            params,
            heads,
            inv_tau,
        })
    }

    /// Rebuilds the layout for `config` and adopts `params`, which must
    /// match it name for name and shape for shape.
    pub fn with_params(config: HeadConfig, params: ParamSet<f32>) -> Result<Self> {
        let mut model = Self::new(config, &mut rng::stream(0, "layout", 0))?;
        check_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn tau(&self) -> f64 {
        match self.inv_tau {
            Some(id) => 1.0 / f64::from(self.params.get(id).item()),
            None => self.config.tau,
        }
    }

    fn inv_tau_var<T: Real>(&self, tape: &mut Tape<T>, p: &Bound) -> Result<Var> {
        match self.inv_tau {
            Some(id) => Ok(p.var(id)),
            None => tape.constant(Tensor::scalar(T::of(1.0 / self.config.tau))),
        }
    }

    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, m: Modality, x: Var) -> Result<Var> {
        self.heads[m.index()].forward(tape, p, x)
    }

    /// Contrastive loss of a batch of pooled inputs `[B × dim]` per modality.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, inputs: [Var; 3]) -> Result<PairLosses> {
        let mut projected = inputs;
        for m in Modality::ALL {
            projected[m.index()] = self.project(tape, p, m, inputs[m.index()])?;
        }
        let inv_tau = self.inv_tau_var(tape, p)?;
        total_contrastive_loss(tape, projected, inv_tau, self.config.symmetric)
    }

    /// Projected embeddings of pooled rows, without recording gradients.
    pub fn embed(&self, m: Modality, pooled: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(pooled.clone())?;
        let y = self.project(&mut tape, &p, m, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("contrastive", &self.config, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "contrastive" {
            return Err(Error::Config(format!(
                "expected a contrastive checkpoint, found `{}`",
                ck.header.kind
            )));
        }
        Self::with_params(ck.config()?, ck.params.clone())
    }

    fn clamp_temperature(&mut self) {
        if let Some(id) = self.inv_tau {
            let v = self.params.get_mut(id);
            let x = v.item().clamp(INV_TAU_RANGE.0, INV_TAU_RANGE.1);
            v.data_mut()[0] = x;
        }
    }
}

pub(crate) fn check_layout(expected: &ParamSet<f32>, found: &ParamSet<f32>) -> Result<()> {
    let a: Vec<_> = expected.iter().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<_> = found.iter().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        return Err(Error::Config(format!(
            "checkpoint parameters do not match the configured model ({} vs {} tensors)",
            b.len(),
            a.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub tau: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub out_dim: usize,
    pub learnable_tau: bool,
    pub symmetric: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            batch: 64,
            epochs: 50,
            lr: 2e-4,
            weight_decay: 0.01,
            hidden: EMBED_DIM,
            out_dim: EMBED_DIM,
            learnable_tau: false,
            symmetric: false,
            seed: 0,
        }
    }
}

/// Mean training losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub tv: f64,
    pub va: f64,
    pub at: f64,
    pub total: f64,
}

pub fn loss_curve_csv(curve: &[EpochLosses]) -> String {
    let mut s = String::from("epoch,L_TV,L_VA,L_AT,L_total\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.tv, e.va, e.at, e.total));
    }
    s
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: ContrastiveModel,
    pub curve: Vec<EpochLosses>,
}

/// Splits a permutation into batches; a trailing singleton joins the batch
/// before it so every sample has at least one negative.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let n = out.len();
        let start = (n - 2) * size;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Trains the heads on every record of `manifest`, variants included.
pub fn pretrain(manifest: &Manifest, config: &PretrainConfig) -> Result<Pretrained> {
    let all: Vec<usize> = (0..manifest.len()).collect();
    let pooled = Modality::ALL
        .iter()
        .map(|&m| pooled_matrix(manifest, &all, m))
        .collect::<Result<Vec<_>>>()?;
    let pooled: [Tensor<f32>; 3] = pooled.try_into().expect("three modalities");
    pretrain_pooled(&pooled, config)
}

/// As [`pretrain`], over pre-pooled `[N × dim]` inputs per modality.
pub fn pretrain_pooled(pooled: &[Tensor<f32>; 3], config: &PretrainConfig) -> Result<Pretrained> {
    if config.batch < 2 {
        return Err(Error::Config(format!(
            "contrastive batch size must be at least 2, got {}",
            config.batch
        )));
    }
    let n = pooled[0].rows();
    if n < 2 || pooled.iter().any(|t| t.rows() != n) {
        return Err(Error::Config(format!("need at least 2 aligned triplets, got {n}")));
    }
    let head_config = HeadConfig {
        in_dims: pooled.clone().map(|t| t.last_dim()),
        hidden: config.hidden,
        out_dim: config.out_dim,
        tau: config.tau,
        learnable_tau: config.learnable_tau,
        symmetric: config.symmetric,
    };
    let mut model = ContrastiveModel::new(head_config, &mut rng::stream(config.seed, "pretrain-init", 0))?;
    let mut opt = Optimizer::new(OptimizerConfig::adamw(config.lr, config.weight_decay), &model.params);
    let mut shuffle = rng::stream(config.seed, "pretrain-shuffle", 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0f64; 4];
        let groups = batches(&order, config.batch);
        for idx in &groups {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true)?;
            let inputs = Modality::ALL
                .iter()
                .map(|m| tape.constant(gather_rows(&pooled[m.index()], idx)))
                .collect::<Result<Vec<_>>>()?;
            let inputs: [Var; 3] = inputs.try_into().expect("three modalities");
            let l = model.loss(&mut tape, &p, inputs)?;
            for (s, v) in sums.iter_mut().zip([l.tv, l.va, l.at, l.total]) {
                *s += f64::from(tape.value(v).item());
            }
            let mut grads = tape.backward(l.total)?;
            let grads = p.gradients(&mut grads);
            opt.step(&mut model.params, &grads)?;
            model.clamp_temperature();
        }
        let k = groups.len() as f64;
        let e = EpochLosses {
            epoch,
            tv: sums[0] / k,
            va: sums[1] / k,
            at: sums[2] / k,
            total: sums[3] / k,
        };
        log::debug!("pretrain epoch {epoch}: L_total {:.5}", e.total);
        curve.push(e);
    }
    Ok(Pretrained { model, curve })
}

/// Fraction of queries whose true counterpart (same row of `keys`) has the
/// highest cosine among itself and `candidates − 1` random other keys.
/// Ties count as misses.
pub fn retrieval_top1(queries: &Tensor<f32>, keys: &Tensor<f32>, candidates: usize, seed: u64) -> Result<f64> {
    let n = queries.rows();
    if keys.rows() != n || candidates < 2 || n < candidates {
        return Err(Error::Config(format!(
            "retrieval needs {candidates} ≤ n and aligned rows, got {n} queries and {} keys",
            keys.rows()
        )));
    }
    let mut rng = rng::stream(seed, "retrieval", 0);
    let mut hits = 0usize;
    for i in 0..n {
        let q = queries.row(i);
        let positive = cosine(q, keys.row(i))?;
        let mut best_other = f32::NEG_INFINITY;
        for j in index::sample(&mut rng, n - 1, candidates - 1) {
            let j = if j >= i { j + 1 } else { j };
            best_other = best_other.max(cosine(q, keys.row(j))?);
        }
        if positive > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Top-1 retrieval for each pair of [`PAIRS`] (anchor as query).
pub fn pair_retrieval(model: &ContrastiveModel, pooled: &[Tensor<f32>; 3], candidates: usize, seed: u64) -> Result<[f64; 3]> {
    let emb = Modality::ALL
        .iter()
        .map(|&m| model.embed(m, &pooled[m.index()]))
        .collect::<Result<Vec<_>>>()?;
    let mut out = [0.0; 3];
    for (k, (a, b)) in PAIRS.iter().enumerate() {
        out[k] = retrieval_top1(&emb[a.index()], &emb[b.index()], candidates, seed)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_examples() {
        let one = FeatureMatrix::new(Modality::Text, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pool(&one).unwrap(), [1.0, 2.0, 3.0]);
        let same = FeatureMatrix::new(Modality::Text, 2, 2, vec![4.0, -1.0, 4.0, -1.0]).unwrap();
        assert_eq!(pool(&same).unwrap(), [4.0, -1.0]);
        let basis = FeatureMatrix::new(Modality::Text, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pool(&basis).unwrap(), [0.5, 0.5]);
        let cancel = FeatureMatrix::new(Modality::Audio, 2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(matches!(pool(&cancel), Err(Error::Numeric { .. })));
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), [4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), [3, 3, 3]);
    }

    #[test]
    fn tiny_batch_is_rejected() {
        let t = [Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 2])];
        let cfg = PretrainConfig {
            batch: 1,
            ..PretrainConfig::default()
        };
        assert!(matches!(pretrain_pooled(&t, &cfg), Err(Error::Config(_))));
    }
}

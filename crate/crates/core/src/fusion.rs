//! Supervised fusion classifiers and their training loops.
//!
//! Two baselines read the encoder features directly: a concatenation MLP
//! over pooled vectors and a stack of cross-attention decoder blocks over
//! token sequences. The fine-tuned classifier is the same MLP fed with the
//! frozen projection-head embeddings of a pretrained contrastive model.
//!
//! Cross-attention routing: text tokens form the query stream when text is
//! active, otherwise the first active of video, audio. Blocks cycle through
//! the remaining active modalities as keys (video, audio, video, audio for
//! the full set); a single active modality attends to itself.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::contrastive::{gather_rows, pooled_matrix, ContrastiveModel};
use crate::data::{FoldAssignment, Manifest, Modality, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::{
    clip_gradients, Bound, LayerNorm, Linear, LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, ParamSet,
    Real, ScheduleKind, Tape, Tensor, Var,
};
use crate::rng;

/// Non-empty subset of the three modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Modalities(u8);

impl Modalities {
    pub const ALL: Modalities = Modalities(0b111);

    /// The seven ablation arms: V, A, T, VA, VT, AT, VAT.
    pub const SUBSETS: [Modalities; 7] = [
        Modalities(0b001),
        Modalities(0b010),
        Modalities(0b100),
        Modalities(0b011),
        Modalities(0b101),
        Modalities(0b110),
        Modalities(0b111),
    ];

    pub fn from_list(ms: &[Modality]) -> Result<Self> {
        let bits = ms.iter().fold(0u8, |b, m| b | 1 << m.index());
        if bits == 0 {
            return Err(Error::Config("at least one modality must be active".into()));
        }
        Ok(Self(bits))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    /// Active modalities in video, audio, text order.
    pub fn active(self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.contains(m)).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Comma-separated letters, e.g. `v,t`.
    pub fn label(self) -> String {
        self.active().iter().map(|m| m.letter().to_string()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Modalities {
    type Err = Error;

    /// Accepts `v,a,t`, `vat`, `all` and any subset thereof.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let mut ms = Vec::new();
        for c in s.chars().filter(|c| !matches!(c, ',' | ' ' | '+')) {
            let m = match c.to_ascii_lowercase() {
                'v' => Modality::Video,
                'a' => Modality::Audio,
                't' => Modality::Text,
                other => return Err(Error::Config(format!("unknown modality `{other}` in `{s}`"))),
            };
            if ms.contains(&m) {
                return Err(Error::Config(format!("modality `{c}` repeated in `{s}`")));
            }
            ms.push(m);
        }
        Self::from_list(&ms)
    }
}

impl Serialize for Modalities {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Modalities {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Xattn,
    Finetune,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "xattn" | "cross_attention" => Ok(Arch::Xattn),
            "finetune" => Ok(Arch::Finetune),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Xattn => "xattn",
            Arch::Finetune => "finetune",
        })
    }
}

/// Three affine layers with ReLU and dropout between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    pub layers: [Linear; 3],
    pub dropout: f64,
}

impl MlpClassifier {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet<f32>,
        in_dim: usize,
        hidden: [usize; 2],
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let dims = [in_dim, hidden[0], hidden[1], classes];
        let layers = [0, 1, 2].map(|i| Linear::init(params, &format!("mlp.{i}"), dims[i], dims[i + 1], rng));
        Self { layers, dropout }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < 2 {
                h = tape.relu(h)?;
                h = tape.dropout(h, self.dropout, rng, training)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XattnConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for XattnConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            ff_dim: 2048,
            heads: 8,
            blocks: 4,
            dropout: 0.2,
        }
    }
}

/// Multi-head scaled dot-product attention over already projected `q`
/// `[Lq × d]`, `k` and `v` `[Lk × d]`. Returns the concatenated head
/// outputs and each head's `[Lq × Lk]` weight matrix.
pub fn attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q).last_dim();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide model dim {d}")));
    }
    if tape.value(k).last_dim() != d || tape.value(v).shape() != tape.value(k).shape() {
        return Err(Error::Dimension {
            op: "attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale)?;
        let w = tape.softmax(s, 1)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Post-norm decoder block: cross-attention then feed-forward, each with
/// residual dropout, a residual connection and layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl DecoderBlock {
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet<f32>, name: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::init(params, &format!("{name}.q"), d, d, rng),
            wk: Linear::init(params, &format!("{name}.k"), d, d, rng),
            wv: Linear::init(params, &format!("{name}.v"), d, d, rng),
            wo: Linear::init(params, &format!("{name}.o"), d, d, rng),
            norm1: LayerNorm::init(params, &format!("{name}.norm1"), d),
            ff1: Linear::init(params, &format!("{name}.ff1"), d, ff, rng),
            ff2: Linear::init(params, &format!("{name}.ff2"), ff, d, rng),
            norm2: LayerNorm::init(params, &format!("{name}.norm2"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        kv: Var,
        heads: usize,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, p, x)?;
        let k = self.wk.forward(tape, p, kv)?;
        let v = self.wv.forward(tape, p, kv)?;
        let (a, _) = attention(tape, q, k, v, heads)?;
        let a = self.wo.forward(tape, p, a)?;
        let a = tape.dropout(a, dropout, rng, training)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, p, x)?;
        let f = self.ff1.forward(tape, p, x)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, p, f)?;
        let f = tape.dropout(f, dropout, rng, training)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, p, x)
    }
}

/// Query modality and per-block key modalities for an active set.
pub fn routing(active: Modalities) -> (Modality, Vec<Modality>) {
    let query = if active.contains(Modality::Text) {
        Modality::Text
    } else {
        active.active()[0]
    };
    let mut keys: Vec<Modality> = active.active().into_iter().filter(|&m| m != query).collect();
    if keys.is_empty() {
        keys.push(query);
    }
    (query, keys)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionFusion {
    pub config: XattnConfig,
    pub modalities: Modalities,
    pub input: [Option<Linear>; 3],
    pub blocks: Vec<DecoderBlock>,
    pub head: Linear,
}

impl CrossAttentionFusion {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet<f32>,
        config: XattnConfig,
        modalities: Modalities,
        in_dims: [usize; 3],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                config.heads, config.d_model
            )));
        }
        let input = Modality::ALL.map(|m| {
            modalities
                .contains(m)
                .then(|| Linear::init(params, &format!("xattn.in.{m}"), in_dims[m.index()], config.d_model, rng))
        });
        let blocks = (0..config.blocks)
            .map(|i| DecoderBlock::init(params, &format!("xattn.block{i}"), config.d_model, config.ff_dim, rng))
            .collect();
        let head = Linear::init(params, "xattn.head", config.d_model, classes, rng);
        Ok(Self {
            config,
            modalities,
            input,
            blocks,
            head,
        })
    }

    /// Final query state of one sample, mean-pooled to `[d_model]`.
    /// `tokens` is indexed by [`Modality::index`]; inactive entries are
    /// ignored.
    pub fn encode<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: [Option<Var>; 3],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut embedded = [None; 3];
        for m in self.modalities.active() {
            let t = tokens[m.index()]
                .ok_or_else(|| Error::shape("cross_attention", format!("missing {m} token sequence")))?;
            let lin = self.input[m.index()].expect("active modality has an input projection");
            embedded[m.index()] = Some(lin.forward(tape, p, t)?);
        }
        let (query, keys) = routing(self.modalities);
        let mut x = embedded[query.index()].expect("query is active");
        for (i, block) in self.blocks.iter().enumerate() {
            let kv = embedded[keys[i % keys.len()].index()].expect("key is active");
            x = block.forward(tape, p, x, kv, self.config.heads, self.config.dropout, training, rng)?;
        }
        tape.mean_rows(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Mlp(MlpClassifier),
    Xattn(CrossAttentionFusion),
}

/// Everything needed to rebuild a classifier's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: Arch,
    pub modalities: Modalities,
    pub classes: usize,
    /// Per-modality input width, indexed by [`Modality::index`]. For the
    /// fine-tuned classifier these are projection widths.
    pub in_dims: [usize; 3],
    pub mlp_hidden: [usize; 2],
    pub dropout: f64,
    pub xattn: XattnConfig,
}

impl ClassifierSpec {
    /// Width of the concatenated input of the MLP variants.
    pub fn flat_dim(&self) -> usize {
        self.modalities.active().iter().map(|m| self.in_dims[m.index()]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub params: ParamSet<f32>,
    pub net: Network,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self> {
        if spec.modalities.is_empty() {
            return Err(Error::Config("at least one modality must be active".into()));
        }
        let mut params = ParamSet::new();
        let net = match spec.arch {
            Arch::Mlp | Arch::Finetune => Network::Mlp(MlpClassifier::init(
                &mut params,
                spec.flat_dim(),
                spec.mlp_hidden,
                spec.classes,
                spec.dropout,
                rng,
            )),
            Arch::Xattn => Network::Xattn(CrossAttentionFusion::init(
                &mut params,
                spec.xattn,
                spec.modalities,
                spec.in_dims,
                spec.classes,
                rng,
            )?),
        };
        Ok(Self { spec, params, net })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("classifier", &self.spec, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "classifier" {
            return Err(Error::Config(format!(
                "expected a classifier checkpoint, found `{}`",
                ck.header.kind
            )));
        }
        let mut c = Self::new(ck.config()?, &mut rng::stream(0, "layout", 0))?;
        crate::contrastive::check_layout(&c.params, &ck.params)?;
        c.params = ck.params.clone();
        Ok(c)
    }

    /// Logits `[B × classes]` for the samples `idx` of `data`.
    pub fn logits<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        data: &Dataset,
        idx: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match (&self.net, &data.inputs) {
            (Network::Mlp(mlp), Inputs::Flat(x)) => {
                if x.last_dim() != mlp.in_dim() {
                    return Err(Error::Dimension {
                        op: "mlp",
                        lhs: vec![idx.len(), x.last_dim()],
                        rhs: vec![mlp.in_dim()],
                    });
                }
                let x = tape.constant(gather_rows(x, idx).cast())?;
                mlp.forward(tape, p, x, training, rng)
            }
            (Network::Xattn(xa), Inputs::Tokens(seqs)) => {
                let mut pooled = Vec::with_capacity(idx.len());
                for &i in idx {
                    let mut toks = [None; 3];
                    for m in xa.modalities.active() {
                        let t = seqs[i][m.index()]
                            .as_ref()
                            .ok_or_else(|| Error::shape("cross_attention", format!("sample {i} lacks {m} tokens")))?;
                        toks[m.index()] = Some(tape.constant(t.cast())?);
                    }
                    pooled.push(xa.encode(tape, p, toks, training, rng)?);
                }
                let h = tape.concat_rows(&pooled)?;
                xa.head.forward(tape, p, h)
            }
            _ => Err(Error::Config("dataset inputs do not match the classifier architecture".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Inputs {
    /// One concatenated feature row per sample.
    Flat(Tensor<f32>),
    /// Token matrices per sample, indexed by [`Modality::index`].
    Tokens(Vec<[Option<Tensor<f32>>; 3]>),
}

/// Model-ready view of a manifest: inputs, labels and record ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub in_dims: [usize; 3],
    pub inputs: Inputs,
}

fn labels_of(manifest: &Manifest, binary: bool) -> (Vec<usize>, usize) {
    let labels = manifest
        .records()
        .iter()
        .map(|r| if binary { r.class.polarity().index() } else { r.class.index() })
        .collect();
    (labels, if binary { 2 } else { NUM_CLASSES })
}

fn concat_columns(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let rows = parts[0].rows();
    let width: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, width, data)
}

impl Dataset {
    fn base(manifest: &Manifest, binary: bool, inputs: Inputs, in_dims: [usize; 3]) -> Self {
        let (labels, classes) = labels_of(manifest, binary);
        Self {
            ids: manifest.records().iter().map(|r| r.video_id.clone()).collect(),
            labels,
            classes,
            in_dims,
            inputs,
        }
    }

    fn dims(manifest: &Manifest) -> Result<[usize; 3]> {
        manifest
            .dims()
            .ok_or_else(|| Error::Config("manifest has no records".into()))
    }

    /// Pooled features of the active modalities, concatenated V, A, T.
    pub fn pooled(manifest: &Manifest, modalities: Modalities, binary: bool) -> Result<Self> {
        let dims = Self::dims(manifest)?;
        let all: Vec<usize> = (0..manifest.len()).collect();
        let parts = modalities
            .active()
            .iter()
            .map(|&m| pooled_matrix(manifest, &all, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::base(manifest, binary, Inputs::Flat(concat_columns(&parts)?), dims))
    }

    /// Full token sequences of the active modalities.
    pub fn tokens(manifest: &Manifest, modalities: Modalities, binary: bool) -> Result<Self> {
        let dims = Self::dims(manifest)?;
        let seqs = manifest
            .records()
            .iter()
            .map(|r| {
                Modality::ALL.map(|m| modalities.contains(m).then(|| manifest.features(r, m).to_tensor()))
            })
            .collect();
        Ok(Self::base(manifest, binary, Inputs::Tokens(seqs), dims))
    }

    /// Frozen projection-head embeddings of the active modalities,
    /// concatenated V, A, T.
    pub fn embedded(
        manifest: &Manifest,
        model: &ContrastiveModel,
        modalities: Modalities,
        binary: bool,
    ) -> Result<Self> {
        let dims = Self::dims(manifest)?;
        if dims != model.config.in_dims {
            return Err(Error::Config(format!(
                "manifest feature dims {dims:?} do not match the pretrained heads {:?}",
                model.config.in_dims
            )));
        }
        let all: Vec<usize> = (0..manifest.len()).collect();
        let parts = modalities
            .active()
            .iter()
            .map(|&m| model.embed(m, &pooled_matrix(manifest, &all, m)?))
            .collect::<Result<Vec<_>>>()?;
        let out = model.config.out_dim;
        Ok(Self::base(manifest, binary, Inputs::Flat(concat_columns(&parts)?), [out; 3]))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Replaces labels, e.g. with a permutation for null-model runs.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Config("label count does not match the dataset".into()));
        }
        self.labels = labels;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub modalities: Modalities,
    pub binary: bool,
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    /// Dropout between MLP layers.
    pub dropout: f64,
    pub mlp_hidden: [usize; 2],
    pub xattn: XattnConfig,
    /// Train on variants of training-fold originals as well.
    pub include_variants: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Supervised baseline regimen: Adam 1e-4 with weight decay 1e-5,
    /// batch 4, 30 epochs, plateau halving after 3 stale epochs, clipping
    /// at 1.0.
    pub fn supervised(arch: Arch) -> Self {
        Self {
            arch,
            modalities: Modalities::ALL,
            binary: false,
            epochs: 30,
            batch: 4,
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            weight_decay: 1e-5,
            schedule: ScheduleKind::PlateauHalving { patience: 3 },
            clip: Some(1.0),
            dropout: 0.0,
            mlp_hidden: [1024, 512],
            xattn: XattnConfig::default(),
            include_variants: false,
            seed: 0,
        }
    }

    /// Fine-tuning regimen: AdamW 1e-4, cosine annealing over the run,
    /// dropout 0.3.
    pub fn finetune() -> Self {
        Self {
            arch: Arch::Finetune,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            schedule: ScheduleKind::Cosine { horizon: 30 },
            clip: None,
            dropout: 0.3,
            ..Self::supervised(Arch::Finetune)
        }
    }

    /// Sets the epoch count, keeping a cosine horizon equal to the run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.epochs = epochs;
        if let ScheduleKind::Cosine { horizon } = &mut self.schedule {
            *horizon = epochs;
        }
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr, self.weight_decay),
            OptimizerKind::AdamW => OptimizerConfig::adamw(self.lr, self.weight_decay),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("epochs, batch and learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self, data: &Dataset) -> ClassifierSpec {
        ClassifierSpec {
            arch: self.arch,
            modalities: self.modalities,
            classes: data.classes,
            in_dims: data.in_dims,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            xattn: self.xattn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.split, r.loss, r.accuracy, r.lr));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub label: usize,
    pub prediction: usize,
}

/// Outcome of training on one fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    /// 1-based epoch whose validation loss was lowest.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub classifier: Classifier,
    pub log: Vec<LogRow>,
    /// Held-out originals under the best checkpoint.
    pub predictions: Vec<Prediction>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss, accuracy and predictions on `idx` in evaluation mode.
pub fn evaluate(classifier: &Classifier, data: &Dataset, idx: &[usize]) -> Result<(f64, f64, Vec<usize>)> {
    const CHUNK: usize = 64;
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(idx.len());
    let mut rng = rng::stream(0, "eval", 0);
    for chunk in idx.chunks(CHUNK) {
        let mut tape = Tape::<f32>::new();
        let p = classifier.params.bind(&mut tape, false)?;
        let logits = classifier.logits(&mut tape, &p, data, chunk, false, &mut rng)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let loss = tape.cross_entropy(logits, &labels)?;
        total += f64::from(tape.value(loss).item()) * chunk.len() as f64;
        let lv = tape.value(logits);
        preds.extend((0..chunk.len()).map(|r| argmax(lv.row(r))));
    }
    let n = idx.len().max(1) as f64;
    let correct = preds.iter().zip(idx).filter(|(p, &i)| **p == data.labels[i]).count();
    Ok((total / n, correct as f64 / n, preds))
}

fn with_context(e: Error, fold: usize, epoch: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("fold {fold}, epoch {epoch}: {detail}"),
        },
        other => other,
    }
}

fn train_step(
    classifier: &mut Classifier,
    opt: &mut Optimizer<f32>,
    data: &Dataset,
    idx: &[usize],
    clip: Option<f64>,
    rng: &mut rng::Rng,
) -> Result<(f64, usize)> {
    let mut tape = Tape::<f32>::new();
    let p = classifier.params.bind(&mut tape, true)?;
    let logits = classifier.logits(&mut tape, &p, data, idx, true, rng)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let loss = tape.cross_entropy(logits, &labels)?;
    let lv = tape.value(logits);
    let hits = labels.iter().enumerate().filter(|(r, &y)| argmax(lv.row(*r)) == y).count();
    let value = f64::from(tape.value(loss).item());
    let mut grads = tape.backward(loss)?;
    let mut grads = p.gradients(&mut grads);
    if let Some(max) = clip {
        clip_gradients(&mut grads, max);
    }
    opt.step(&mut classifier.params, &grads)?;
    Ok((value * idx.len() as f64, hits))
}

/// Trains on `train` and keeps the parameters with the lowest loss on
/// `val`. Earlier epochs win ties.
pub fn train_fold(data: &Dataset, train: &[usize], val: &[usize], config: &TrainConfig, fold: usize) -> Result<FoldRun> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!("fold {fold} has an empty training or validation split")));
    }
    let fold_key = fold as u64;
    let mut classifier = Classifier::new(config.spec(data), &mut rng::stream(config.seed, "init", fold_key))?;
    let mut opt = Optimizer::new(config.optimizer_config(), &classifier.params);
    let mut schedule = LrSchedule::new(config.schedule, config.lr);
    let mut shuffle = rng::stream(config.seed, "shuffle", fold_key);
    let mut dropout = rng::stream(config.seed, "dropout", fold_key);
    let mut order = train.to_vec();
    let mut log = Vec::with_capacity(2 * config.epochs);
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;

    for epoch in 1..=config.epochs {
        let lr = schedule.rate();
        opt.set_lr(lr);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(config.batch) {
            let (l, h) = train_step(&mut classifier, &mut opt, data, idx, config.clip, &mut dropout)
                .map_err(|e| with_context(e, fold, epoch))?;
            loss_sum += l;
            correct += h;
        }
        log.push(LogRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            lr,
        });
        let (val_loss, val_acc, _) = evaluate(&classifier, data, val).map_err(|e| with_context(e, fold, epoch))?;
        log.push(LogRow {
            epoch,
            split: "val".into(),
            loss: val_loss,
            accuracy: val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, classifier.params.clone()));
        }
        schedule.step(epoch, val_loss);
    }

    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch");
    classifier.params = params;
    let (_, _, preds) = evaluate(&classifier, data, val)?;
    let predictions = val
        .iter()
        .zip(preds)
        .map(|(&i, prediction)| Prediction {
            video_id: data.ids[i].clone(),
            label: data.labels[i],
            prediction,
        })
        .collect();
    Ok(FoldRun {
        fold,
        best_epoch,
        best_val_loss,
        classifier,
        log,
        predictions,
    })
}

/// Runs [`train_fold`] for every fold of `folds`.
pub fn train_folds(data: &Dataset, manifest: &Manifest, folds: &FoldAssignment, config: &TrainConfig) -> Result<Vec<FoldRun>> {
    folds.check(manifest)?;
    (0..folds.k)
        .map(|f| {
            let train = folds.train_indices(manifest, f, config.include_variants);
            let val = folds.eval_indices(manifest, f);
            train_fold(data, &train, &val, config, f)
        })
        .collect()
}

/// Builds the dataset for `config.arch` and trains every fold.
pub fn train_supervised(manifest: &Manifest, folds: &FoldAssignment, config: &TrainConfig) -> Result<Vec<FoldRun>> {
    let data = match config.arch {
        Arch::Mlp => Dataset::pooled(manifest, config.modalities, config.binary)?,
        Arch::Xattn => Dataset::tokens(manifest, config.modalities, config.binary)?,
        Arch::Finetune => {
            return Err(Error::Config(
                "the fine-tuned classifier needs a pretrained checkpoint; use finetune_classifier".into(),
            ))
        }
    };
    train_folds(&data, manifest, folds, config)
}

/// Fine-tunes an MLP over the frozen heads of `pretrained`, fold by fold.
pub fn finetune_classifier(
    pretrained: Option<&ContrastiveModel>,
    manifest: &Manifest,
    folds: &FoldAssignment,
    config: &TrainConfig,
) -> Result<Vec<FoldRun>> {
    let model = pretrained.ok_or_else(|| Error::Config("fine-tuning requires a pretrained checkpoint".into()))?;
    let before = model.params.fingerprint();
    let data = Dataset::embedded(manifest, model, config.modalities, config.binary)?;
    let runs = train_folds(&data, manifest, folds, config)?;
    if model.params.fingerprint() != before {
        return Err(Error::Config("frozen projection heads changed during fine-tuning".into()));
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_sets_parse() {
        assert_eq!("v,t".parse::<Modalities>().unwrap().label(), "v,t");
        assert_eq!("tv".parse::<Modalities>().unwrap().label(), "v,t");
        assert_eq!("all".parse::<Modalities>().unwrap(), Modalities::ALL);
        assert!("".parse::<Modalities>().is_err());
        assert!("v,v".parse::<Modalities>().is_err());
        assert!("x".parse::<Modalities>().is_err());
        let labels: Vec<String> = Modalities::SUBSETS.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["v", "a", "t", "v,a", "v,t", "a,t", "v,a,t"]);
    }

    #[test]
    fn routing_alternates_keys() {
        let (q, k) = routing(Modalities::ALL);
        assert_eq!(q, Modality::Text);
        assert_eq!(k, [Modality::Video, Modality::Audio]);
        let (q, k) = routing("v,a".parse().unwrap());
        assert_eq!((q, k), (Modality::Video, vec![Modality::Audio]));
        let (q, k) = routing("a".parse().unwrap());
        assert_eq!((q, k), (Modality::Audio, vec![Modality::Audio]));
    }

    #[test]
    fn cosine_horizon_follows_epochs() {
        let mut c = TrainConfig::finetune();
        c.set_epochs(7);
        assert_eq!(c.schedule, ScheduleKind::Cosine { horizon: 7 });
    }
}

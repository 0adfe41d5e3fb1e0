//! Two-branch inception-style classifier.
//!
//! Each branch is a backbone (stride-2 stem, `num_blocks` inception blocks
//! with max-pooling between them, global average pooling) followed by a
//! `head_units`-wide dense layer. The two branch vectors are concatenated and
//! mapped to class logits. Branch `full` sees the whole image, branch `crop`
//! the lesion crop.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::param::{Bound, Group, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::segnet::ConvLayer;
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Class index order used everywhere.
pub const CLASS_NAMES: [&str; 3] = ["melanoma", "nevus", "seborrheic_keratosis"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecConfig {
    pub stem_filters: usize,
    pub num_blocks: usize,
    /// Branch width of block `k` is `block_width · 2^k`.
    pub block_width: usize,
    pub head_units: usize,
    pub num_classes: usize,
    pub share_backbones: bool,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            stem_filters: 8,
            num_blocks: 4,
            block_width: 8,
            head_units: 1024,
            num_classes: 3,
            share_backbones: false,
        }
    }
}

impl RecConfig {
    pub fn branch_width(&self, block: usize) -> usize {
        self.block_width << block
    }

    /// Channels after block `k`'s four-way concat.
    pub fn block_out(&self, block: usize) -> usize {
        4 * self.branch_width(block)
    }

    /// Length of the pooled backbone vector entering the branch dense layer.
    pub fn feature_dim(&self) -> usize {
        self.block_out(self.num_blocks - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_blocks must be at least 2, got {}",
                self.num_blocks
            )));
        }
        if self.stem_filters == 0 || self.block_width == 0 || self.head_units == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(format!("invalid recognition config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Only the head trains; both backbones are frozen.
    HeadOnly,
    /// Head plus the last two inception blocks of each backbone.
    FineTuneLastTwo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Full,
    Crop,
    Both,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    weight: usize,
    bias: usize,
}

impl DenseLayer {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let w = Tensor::new(vec![inputs, outputs], rng::he_normal(rng, inputs * outputs, inputs))?;
        let weight = store.add(format!("{name}.weight"), w, Group::Head)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]), Group::Head)?;
        Ok(Self { weight, bias })
    }

    fn apply<'t, T: Scalar>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.dense(bound.var(self.weight), bound.var(self.bias))
    }
}

#[derive(Clone, Debug)]
struct InceptionBlock {
    /// 1×1
    b1: ConvLayer,
    /// 1×1 → 3×3
    b2: [ConvLayer; 2],
    /// 1×1 → 3×3 → 3×3
    b3: [ConvLayer; 3],
    /// avg-pool 3×3 → 1×1
    b4: ConvLayer,
}

impl InceptionBlock {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        group: Group,
        cin: usize,
        width: usize,
    ) -> Result<Self> {
        let mut conv = |suffix: &str, i: usize, o: usize, k: usize| {
            ConvLayer::create(store, rng, &format!("{name}.{suffix}"), group, i, o, k)
        };
        Ok(Self {
            b1: conv("b1", cin, width, 1)?,
            b2: [conv("b2a", cin, width, 1)?, conv("b2b", width, width, 3)?],
            b3: [
                conv("b3a", cin, width, 1)?,
                conv("b3b", width, width, 3)?,
                conv("b3c", width, width, 3)?,
            ],
            b4: conv("b4", cin, width, 1)?,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.b1).chain(&self.b2).chain(&self.b3).chain(std::iter::once(&self.b4))
    }

    fn forward<'t, T: Scalar>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let one = |l: &ConvLayer, v| l.conv_relu(bound, v);
        let p1 = one(&self.b1, x)?;
        let p2 = one(&self.b2[1], one(&self.b2[0], x)?)?;
        let p3 = one(&self.b3[2], one(&self.b3[1], one(&self.b3[0], x)?)?)?;
        let p4 = one(&self.b4, x.avg_pool3x3()?)?;
        p1.concat(p2)?.concat(p3)?.concat(p4)
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: ConvLayer,
    blocks: Vec<InceptionBlock>,
}

/// Mirror-pads an odd side by one, then 2×2 max-pools.
fn pool_even<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.pad_reflect(s[2] % 2, s[3] % 2)?.max_pool2d()
}

impl Backbone {
    fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        cfg: &RecConfig,
        group: Group,
    ) -> Result<Self> {
        let prefix = group.to_string();
        let stem = ConvLayer::create(store, rng, &format!("{prefix}.stem"), group, 3, cfg.stem_filters, 3)?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut cin = cfg.stem_filters;
        for k in 0..cfg.num_blocks {
            let name = format!("{prefix}.block{k}");
            blocks.push(InceptionBlock::create(store, rng, &name, group, cin, cfg.branch_width(k))?);
            cin = cfg.block_out(k);
        }
        Ok(Self { stem, blocks })
    }

    fn forward<'t, T: Scalar>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut cur = pool_even(self.stem.conv(bound, x, Padding::Valid, 2)?.relu())?;
        let last = self.blocks.len() - 1;
        for (k, block) in self.blocks.iter().enumerate() {
            cur = block.forward(bound, cur)?;
            if k < last {
                cur = pool_even(cur)?;
            }
        }
        cur.global_avg_pool()
    }

    fn last_two_params(&self) -> Vec<usize> {
        self.blocks[self.blocks.len() - 2..]
            .iter()
            .flat_map(|b| b.layers().flat_map(|l| [l.weight, l.bias]).collect::<Vec<_>>())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RecModel<T> {
    cfg: RecConfig,
    params: ParamStore<T>,
    full: Backbone,
    /// Same indices as `full` when backbones are shared.
    crop: Backbone,
    full_fc: DenseLayer,
    crop_fc: DenseLayer,
    out: DenseLayer,
    phase: Phase,
}

impl<T: Scalar> RecModel<T> {
    /// He-initialized model in phase [`Phase::HeadOnly`], deterministic in `seed`.
    pub fn build(cfg: RecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 0x4ec);
        let mut params = ParamStore::new();
        let full = Backbone::create(&mut params, &mut rng, &cfg, Group::BackboneFull)?;
        let crop = if cfg.share_backbones {
            full.clone()
        } else {
            Backbone::create(&mut params, &mut rng, &cfg, Group::BackboneCrop)?
        };
        let feat = cfg.feature_dim();
        let full_fc = DenseLayer::create(&mut params, &mut rng, "head.full_fc", feat, cfg.head_units)?;
        let crop_fc = DenseLayer::create(&mut params, &mut rng, "head.crop_fc", feat, cfg.head_units)?;
        let out = DenseLayer::create(&mut params, &mut rng, "head.out", 2 * cfg.head_units, cfg.num_classes)?;
        let mut model = Self { cfg, params, full, crop, full_fc, crop_fc, out, phase: Phase::HeadOnly };
        model.set_phase(Phase::HeadOnly);
        Ok(model)
    }

    /// Rebuilds the architecture from tensor shapes and loads every tensor.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| {
            ckpt.get(name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| Error::Checkpoint(format!("not a recognition checkpoint: missing {name}")))
        };
        let stem = shape("backbone_full.stem.weight")?;
        let b1 = shape("backbone_full.block0.b1.weight")?;
        let fc = shape("head.full_fc.weight")?;
        let out = shape("head.out.weight")?;
        let cfg = RecConfig {
            stem_filters: stem[0],
            num_blocks: (0..)
                .take_while(|k| ckpt.get(&format!("backbone_full.block{k}.b1.weight")).is_some())
                .count(),
            block_width: b1[0],
            head_units: fc[1],
            num_classes: out[1],
            share_backbones: !ckpt.entries.iter().any(|e| e.group == Group::BackboneCrop),
        };
        let mut model = Self::build(cfg, 0)?;
        ckpt.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn config(&self) -> &RecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.params)
    }

    /// Checkpoint holding only backbone tensors.
    pub fn backbone_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params.iter().filter(|p| p.group.is_backbone()))
    }

    /// Updates trainable flags only; no values change.
    pub fn set_phase(&mut self, phase: Phase) {
        let mut tune = vec![false; self.params.len()];
        if phase == Phase::FineTuneLastTwo {
            for i in self.full.last_two_params().into_iter().chain(self.crop.last_two_params()) {
                tune[i] = true;
            }
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            p.trainable = p.group == Group::Head || tune[i];
        }
        self.phase = phase;
    }

    /// Makes every parameter trainable (backbone pre-training).
    pub fn unfreeze_all(&mut self) {
        self.params.set_trainable(|_| true);
    }

    /// Class logits `[N, num_classes]`.
    pub fn forward_logits<'t>(&self, bound: &Bound<'t, T>, full: Var<'t, T>, crop: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sf, sc) = (full.shape(), crop.shape());
        if sf.len() != 4 || sc.len() != 4 || sf[0] != sc[0] {
            return Err(Error::shape("rec_forward", &sf, &sc));
        }
        let f = self.full_fc.apply(bound, self.full.forward(bound, full)?)?.relu();
        let c = self.crop_fc.apply(bound, self.crop.forward(bound, crop)?)?.relu();
        self.out.apply(bound, f.concat(c)?)
    }

    /// Class probabilities without gradient tracking.
    pub fn infer(&self, full: &Tensor<T>, crop: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let logits = self.forward_logits(&bound, tape.constant(full.clone()), tape.constant(crop.clone()))?;
        Ok(logits.softmax()?.value())
    }

    /// Copies backbone tensors from `ckpt`; head tensors are never touched.
    ///
    /// A target `backbone_crop.X` reads `backbone_crop.X` when the checkpoint
    /// has any crop-branch tensors and `backbone_full.X` otherwise (and vice
    /// versa), so a single-backbone checkpoint can initialize both branches.
    pub fn load_backbone_checkpoint(&mut self, ckpt: &Checkpoint, branch: Branch) -> Result<LoadReport> {
        let has = |g: Group| ckpt.entries.iter().any(|e| e.group == g);
        let source_group = |g: Group| {
            let other = if g == Group::BackboneFull { Group::BackboneCrop } else { Group::BackboneFull };
            if has(g) || !has(other) {
                g
            } else {
                other
            }
        };
        let shared = self.cfg.share_backbones;
        let wanted = |g: Group| match branch {
            Branch::Both => g.is_backbone(),
            Branch::Full => g == Group::BackboneFull,
            Branch::Crop => g == Group::BackboneCrop || (shared && g == Group::BackboneFull),
        };
        let mut report = LoadReport::default();
        for p in self.params.iter_mut().filter(|p| wanted(p.group)) {
            let own = p.group.to_string();
            let suffix = &p.name[own.len()..];
            let src = format!("{}{suffix}", source_group(p.group));
            match ckpt.get(&src) {
                Some(e) => {
                    e.write_into(&mut p.tensor)?;
                    report.loaded.push(p.name.clone());
                }
                None => report.skipped.push(p.name.clone()),
            }
        }
        Ok(report)
    }
}

pub fn build_recnet<T: Scalar>(cfg: RecConfig, seed: u64) -> Result<RecModel<T>> {
    RecModel::build(cfg, seed)
}

pub fn rec_forward<T: Scalar>(model: &RecModel<T>, full: &Tensor<T>, crop: &Tensor<T>) -> Result<Tensor<T>> {
    model.infer(full, crop)
}

pub fn set_phase<T: Scalar>(model: &mut RecModel<T>, phase: Phase) {
    model.set_phase(phase)
}

pub fn load_backbone_checkpoint<T: Scalar>(model: &mut RecModel<T>, ckpt: &Checkpoint, branch: Branch) -> Result<LoadReport> {
    model.load_backbone_checkpoint(ckpt, branch)
}

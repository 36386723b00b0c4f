//! Bottleneck variants: residual, depthwise-separable, Ghost, Shuffle, DiCE,
//! dilated and multi-dilated.
//!
//! Every block is stride-1 and preserves `(n, h, w)`. Blocks hold layer
//! descriptors only; tensors live in the [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::graph::Graph;
use crate::params::{BnLayer, ConvLayer, Init, ParamStore};
use crate::tensor::{ConvSpec, Real, Shape4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Residual,
    SeparableResidual,
    Ghost,
    Shuffle,
    Dice,
    Dilated,
    MultiDilated,
}

impl BlockKind {
    pub const ALL: [BlockKind; 7] = [
        BlockKind::Residual,
        BlockKind::SeparableResidual,
        BlockKind::Ghost,
        BlockKind::Shuffle,
        BlockKind::Dice,
        BlockKind::Dilated,
        BlockKind::MultiDilated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Residual => "residual",
            BlockKind::SeparableResidual => "separable_residual",
            BlockKind::Ghost => "ghost",
            BlockKind::Shuffle => "shuffle",
            BlockKind::Dice => "dice",
            BlockKind::Dilated => "dilated",
            BlockKind::MultiDilated => "multi_dilated",
        }
    }

    /// Accepts the snake-case names plus a few hyphenated aliases.
    pub fn parse(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        let kind = match k.as_str() {
            "residual" => BlockKind::Residual,
            "separable_residual" | "separable" => BlockKind::SeparableResidual,
            "ghost" => BlockKind::Ghost,
            "shuffle" => BlockKind::Shuffle,
            "dice" => BlockKind::Dice,
            "dilated" => BlockKind::Dilated,
            "multi_dilated" | "multidilated" => BlockKind::MultiDilated,
            _ => {
                return Err(HgError::usage(format!(
                    "unknown block kind '{s}' (expected one of: {})",
                    BlockKind::ALL.map(|k| k.name()).join(", ")
                )))
            }
        };
        Ok(kind)
    }
}

fn default_dilations() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_groups() -> usize {
    4
}

fn default_ghost_ratio() -> usize {
    2
}

/// Channel-independent part of a block description, as used by network
/// configs where channel widths are implied by position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStyle {
    pub kind: BlockKind,
    /// Branch dilations (multi-dilated only).
    #[serde(default = "default_dilations")]
    pub dilations: Vec<usize>,
    /// Group count of the pointwise group convolutions (shuffle only).
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Ghost module expansion ratio.
    #[serde(default = "default_ghost_ratio")]
    pub ghost_ratio: usize,
    /// Use depthwise-separable 3×3 stages (dilated only).
    #[serde(default)]
    pub separable: bool,
}

impl BlockStyle {
    pub fn new(kind: BlockKind) -> Self {
        Self {
            kind,
            dilations: default_dilations(),
            groups: default_groups(),
            ghost_ratio: default_ghost_ratio(),
            separable: false,
        }
    }

    pub fn separable(mut self, separable: bool) -> Self {
        self.separable = separable;
        self
    }

    pub fn spec(&self, in_channels: usize, out_channels: usize, mid_channels: Option<usize>) -> BlockSpec {
        BlockSpec {
            style: self.clone(),
            in_channels,
            out_channels,
            mid_channels,
        }
    }
}

/// Full block description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    #[serde(flatten)]
    pub style: BlockStyle,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Bottleneck width; `out_channels / 2` when absent.
    #[serde(default)]
    pub mid_channels: Option<usize>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockStyle::new(kind).spec(in_channels, out_channels, None)
    }

    pub fn with_mid(mut self, mid: usize) -> Self {
        self.mid_channels = Some(mid);
        self
    }

    pub fn kind(&self) -> BlockKind {
        self.style.kind
    }

    pub fn mid(&self) -> Result<usize> {
        match self.mid_channels {
            Some(0) => Err(HgError::config("mid_channels must be positive")),
            Some(m) => Ok(m),
            None if self.out_channels % 2 != 0 => Err(HgError::config(format!(
                "out_channels must be even for a bottleneck, got {}",
                self.out_channels
            ))),
            None => Ok(self.out_channels / 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(HgError::config("block channels must be positive"));
        }
        let s = &self.style;
        match s.kind {
            BlockKind::MultiDilated => {
                if s.dilations.is_empty() || s.dilations.contains(&0) {
                    return Err(HgError::config(
                        "dilations must be a nonempty list of positive integers",
                    ));
                }
                let k = s.dilations.len();
                if self.out_channels < 2 * k {
                    return Err(HgError::config(format!(
                        "multi-dilated out_channels {} below minimum {}",
                        self.out_channels,
                        2 * k
                    )));
                }
            }
            BlockKind::Dice => {}
            _ => {
                if self.out_channels < 2 || self.in_channels < 2 {
                    return Err(HgError::config("bottleneck channels must be at least 2"));
                }
                let mid = self.mid()?;
                match s.kind {
                    BlockKind::Ghost => {
                        if s.ghost_ratio == 0 || mid % s.ghost_ratio != 0 {
                            return Err(HgError::config(format!(
                                "ghost width {mid} not divisible by ratio {}",
                                s.ghost_ratio
                            )));
                        }
                    }
                    BlockKind::Shuffle => {
                        let g = s.groups;
                        if g == 0 || mid % g != 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
                            return Err(HgError::config(format!(
                                "shuffle groups {g} must divide in {}, mid {mid} and out {} channels",
                                self.in_channels, self.out_channels
                            )));
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// `(primary, cheap)` output widths of a Ghost module.
pub fn ghost_split(out_channels: usize, ratio: usize) -> Result<(usize, usize)> {
    if ratio == 0 || out_channels % ratio != 0 {
        return Err(HgError::config(format!(
            "ghost output {out_channels} not divisible by ratio {ratio}"
        )));
    }
    let primary = out_channels / ratio;
    Ok((primary, out_channels - primary))
}

/// Per-branch width of a multi-dilated block.
pub fn multidilated_branch_width(out_channels: usize, branches: usize) -> usize {
    out_channels / (2 * branches)
}

/// Ghost module: a 1×1 conv emits a fraction of the channels, a depthwise
/// 3×3 on those emits the rest.
#[derive(Clone, Debug)]
pub struct GhostModule {
    pub primary: ConvLayer,
    pub cheap: Option<ConvLayer>,
}

impl GhostModule {
    pub fn build<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize, ratio: usize) -> Result<Self> {
        let (p, c) = ghost_split(out_ch, ratio)?;
        let primary = init.conv("primary", ConvSpec::pointwise(in_ch, p).with_bias(false))?;
        let cheap = if c > 0 {
            let spec = ConvSpec::same(p, c, 3).with_groups(p).with_bias(false);
            Some(init.conv("cheap", spec)?)
        } else {
            None
        };
        Ok(Self { primary, cheap })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: G::Var) -> Result<G::Var> {
        let p = g.conv(store, &self.primary, x)?;
        match &self.cheap {
            Some(cheap) => {
                let c = g.conv(store, cheap, p)?;
                g.concat(&[p, c])
            }
            None => Ok(p),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Spatial {
    Dense(ConvLayer),
    Separable { dw: ConvLayer, pw: ConvLayer },
    Ghost(GhostModule),
}

impl Spatial {
    fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: G::Var) -> Result<G::Var> {
        match self {
            Spatial::Dense(c) => g.conv(store, c, x),
            Spatial::Separable { dw, pw } => {
                let y = g.conv(store, dw, x)?;
                g.conv(store, pw, y)
            }
            Spatial::Ghost(m) => m.forward(g, store, x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum BlockBody {
    /// Pre-activation bottleneck: BN-ReLU-1×1, BN-ReLU-spatial, BN-ReLU-1×1.
    Bottleneck {
        bn1: BnLayer,
        conv1: ConvLayer,
        bn2: BnLayer,
        spatial: Spatial,
        bn3: BnLayer,
        conv3: ConvLayer,
    },
    Shuffle {
        bn1: BnLayer,
        gconv1: ConvLayer,
        bn2: BnLayer,
        groups: usize,
        dw: ConvLayer,
        bn3: BnLayer,
        gconv2: ConvLayer,
    },
    Dilated {
        bn1: BnLayer,
        stage1: Spatial,
        bn2: BnLayer,
        stage2: Spatial,
    },
    MultiDilated {
        bn1: BnLayer,
        entry: ConvLayer,
        bn2: BnLayer,
        branch_width: usize,
        branches: Vec<(ConvLayer, ConvLayer)>,
        bn3: BnLayer,
        exit: ConvLayer,
    },
    Dice(DiceUnit),
}

/// DiCE unit: depth-, width- and height-wise convolutions fused by a
/// grouped 1×1, gated per channel by a pooled sigmoid.
#[derive(Clone, Debug)]
pub struct DiceUnit {
    pub channels: usize,
    pub bn: BnLayer,
    pub depth: ConvLayer,
    pub width: ConvLayer,
    pub height: ConvLayer,
    pub fuse: ConvLayer,
    pub gate: ConvLayer,
    pub out: ConvLayer,
}

impl DiceUnit {
    pub fn build<T: Real>(init: &mut Init<'_, T>, c: usize) -> Result<Self> {
        let slice = |kh: usize, kw: usize| ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (kh, kw),
            stride: (1, 1),
            padding: (kh / 2, kw / 2),
            dilation: 1,
            groups: 1,
            has_bias: false,
        };
        Ok(Self {
            channels: c,
            bn: init.bn("bn", c)?,
            depth: init.conv("depthwise", ConvSpec::depthwise3x3(c, 1))?,
            width: init.conv("widthwise", slice(3, 1))?,
            height: init.conv("heightwise", slice(1, 3))?,
            fuse: init.conv("fuse", ConvSpec::pointwise(3 * c, c).with_groups(c))?,
            gate: init.conv("gate", ConvSpec::pointwise(c, c))?,
            out: init.conv("out", ConvSpec::pointwise(c, c))?,
        })
    }

    /// Convolves every `axis` slice of `f` with a shared single-channel
    /// kernel over the remaining (channel, spatial) plane.
    fn slice_conv<T: Real, G: Graph<T>>(
        g: &mut G,
        store: &ParamStore<T>,
        layer: &ConvLayer,
        f: G::Var,
        axes: [usize; 4],
    ) -> Result<G::Var> {
        let p = g.permute_axes(f, axes)?;
        let ps = g.shape(p);
        let folded = g.reshape(p, Shape4::new(ps.n * ps.c, 1, ps.h, ps.w))?;
        let y = g.conv(store, layer, folded)?;
        let y = g.reshape(y, ps)?;
        g.permute_axes(y, crate::kernels::inverse_axes(axes))
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: G::Var) -> Result<G::Var> {
        let c = g.shape(x).c;
        if c != self.channels {
            return Err(HgError::config(format!(
                "DiCE unit expects {} channels, got {c}",
                self.channels
            )));
        }
        let f = g.bn_relu(store, &self.bn, x)?;
        let d = g.conv(store, &self.depth, f)?;
        // (n, w, c, h): kernel runs along c, 1 along h
        let wv = Self::slice_conv(g, store, &self.width, f, [0, 3, 1, 2])?;
        // (n, h, c, w): kernel runs along w
        let hv = Self::slice_conv(g, store, &self.height, f, [0, 2, 1, 3])?;
        let cat = g.concat(&[d, wv, hv])?;
        let grouped = g.channel_shuffle(cat, 3)?;
        let fused = g.conv(store, &self.fuse, grouped)?;
        let pooled = g.global_avg_pool(fused);
        let logits = g.conv(store, &self.gate, pooled)?;
        let gate = g.sigmoid(logits);
        let y = g.conv(store, &self.out, fused)?;
        let y = g.add(x, y)?;
        g.mul_broadcast(y, gate)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub spec: BlockSpec,
    /// 1×1 projection applied before a channel-preserving unit (DiCE).
    pub pre: Option<ConvLayer>,
    pub body: BlockBody,
    /// 1×1 projection on the skip path when channel counts differ.
    pub skip: Option<ConvLayer>,
}

fn bottleneck_parts<T: Real>(
    init: &mut Init<'_, T>,
    spec: &BlockSpec,
    spatial: impl FnOnce(&mut Init<'_, T>, usize) -> Result<Spatial>,
) -> Result<BlockBody> {
    let (i, o, m) = (spec.in_channels, spec.out_channels, spec.mid()?);
    let bn1 = init.bn("bn1", i)?;
    let conv1 = init.conv("conv1", ConvSpec::pointwise(i, m).with_bias(false))?;
    let bn2 = init.bn("bn2", m)?;
    let spatial = spatial(init, m)?;
    let bn3 = init.bn("bn3", m)?;
    let conv3 = init.conv("conv3", ConvSpec::pointwise(m, o))?;
    Ok(BlockBody::Bottleneck {
        bn1,
        conv1,
        bn2,
        spatial,
        bn3,
        conv3,
    })
}

fn separable<T: Real>(
    init: &mut Init<'_, T>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    dilation: usize,
    bias: bool,
) -> Result<Spatial> {
    let dw = init.conv(&format!("{name}_dw"), ConvSpec::depthwise3x3(in_ch, dilation))?;
    let pw = init.conv(
        &format!("{name}_pw"),
        ConvSpec::pointwise(in_ch, out_ch).with_bias(bias),
    )?;
    Ok(Spatial::Separable { dw, pw })
}

/// Builds any block kind under the initializer's current scope.
pub fn build_block<T: Real>(init: &mut Init<'_, T>, spec: &BlockSpec) -> Result<Block> {
    spec.validate()?;
    let (i, o) = (spec.in_channels, spec.out_channels);
    let mut pre = None;
    let body = match spec.kind() {
        BlockKind::Residual => bottleneck_parts(init, spec, |init, m| {
            Ok(Spatial::Dense(
                init.conv("conv2", ConvSpec::same(m, m, 3).with_bias(false))?,
            ))
        })?,
        BlockKind::SeparableResidual => {
            bottleneck_parts(init, spec, |init, m| separable(init, "conv2", m, m, 1, false))?
        }
        BlockKind::Ghost => {
            let ratio = spec.style.ghost_ratio;
            bottleneck_parts(init, spec, |init, m| {
                Ok(Spatial::Ghost(GhostModule::build(&mut init.scope("ghost"), m, m, ratio)?))
            })?
        }
        BlockKind::Shuffle => {
            let (m, g) = (spec.mid()?, spec.style.groups);
            BlockBody::Shuffle {
                bn1: init.bn("bn1", i)?,
                gconv1: init.conv("gconv1", ConvSpec::pointwise(i, m).with_groups(g).with_bias(false))?,
                bn2: init.bn("bn2", m)?,
                groups: g,
                dw: init.conv("dw", ConvSpec::depthwise3x3(m, 1))?,
                bn3: init.bn("bn3", m)?,
                gconv2: init.conv("gconv2", ConvSpec::pointwise(m, o).with_groups(g))?,
            }
        }
        BlockKind::Dilated => {
            let m = spec.mid()?;
            let bn1 = init.bn("bn1", i)?;
            let stage1 = if spec.style.separable {
                separable(init, "conv1", i, m, 2, false)?
            } else {
                Spatial::Dense(init.conv(
                    "conv1",
                    ConvSpec::same(i, m, 3).with_dilation(2).with_padding(2, 2).with_bias(false),
                )?)
            };
            let bn2 = init.bn("bn2", m)?;
            let stage2 = if spec.style.separable {
                separable(init, "conv2", m, o, 2, true)?
            } else {
                Spatial::Dense(init.conv(
                    "conv2",
                    ConvSpec::same(m, o, 3).with_dilation(2).with_padding(2, 2),
                )?)
            };
            BlockBody::Dilated {
                bn1,
                stage1,
                bn2,
                stage2,
            }
        }
        BlockKind::MultiDilated => {
            let k = spec.style.dilations.len();
            let b = multidilated_branch_width(o, k);
            let bn1 = init.bn("bn1", i)?;
            let entry = init.conv("entry", ConvSpec::pointwise(i, k * b).with_bias(false))?;
            let bn2 = init.bn("bn2", k * b)?;
            let mut branches = Vec::with_capacity(k);
            for &l in &spec.style.dilations {
                let mut br = init.scope(&format!("branch_l{l}"));
                let dw = br.conv("dw", ConvSpec::depthwise3x3(b, l))?;
                let pw = br.conv("pw", ConvSpec::pointwise(b, b).with_bias(false))?;
                branches.push((dw, pw));
            }
            BlockBody::MultiDilated {
                bn1,
                entry,
                bn2,
                branch_width: b,
                branches,
                bn3: init.bn("bn3", k * b)?,
                exit: init.conv("exit", ConvSpec::pointwise(k * b, o))?,
            }
        }
        BlockKind::Dice => {
            if i != o {
                pre = Some(init.conv("proj_in", ConvSpec::pointwise(i, o))?);
            }
            BlockBody::Dice(DiceUnit::build(&mut init.scope("dice"), o)?)
        }
    };
    let skip = if i != o && spec.kind() != BlockKind::Dice {
        Some(init.conv("skip", ConvSpec::pointwise(i, o))?)
    } else {
        None
    };
    Ok(Block {
        name: init.prefix().to_string(),
        spec: spec.clone(),
        pre,
        body,
        skip,
    })
}

pub fn build_residual<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize) -> Result<Block> {
    build_block(init, &BlockSpec::new(BlockKind::Residual, in_ch, out_ch))
}

pub fn build_separable_residual<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize) -> Result<Block> {
    build_block(init, &BlockSpec::new(BlockKind::SeparableResidual, in_ch, out_ch))
}

pub fn build_ghost<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize, ratio: usize) -> Result<Block> {
    let mut spec = BlockSpec::new(BlockKind::Ghost, in_ch, out_ch);
    spec.style.ghost_ratio = ratio;
    build_block(init, &spec)
}

pub fn build_shuffle<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize, groups: usize) -> Result<Block> {
    let mut spec = BlockSpec::new(BlockKind::Shuffle, in_ch, out_ch);
    spec.style.groups = groups;
    build_block(init, &spec)
}

/// The DiCE unit is channel-preserving; use [`build_block`] to get an
/// input projection when `in_ch != out_ch`.
pub fn build_dice<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize) -> Result<Block> {
    if in_ch != out_ch {
        return Err(HgError::config(format!(
            "DiCE unit needs in_channels == out_channels, got {in_ch} and {out_ch}"
        )));
    }
    build_block(init, &BlockSpec::new(BlockKind::Dice, in_ch, out_ch))
}

pub fn build_dilated<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize, separable: bool) -> Result<Block> {
    let mut spec = BlockSpec::new(BlockKind::Dilated, in_ch, out_ch);
    spec.style.separable = separable;
    build_block(init, &spec)
}

pub fn build_multidilated<T: Real>(init: &mut Init<'_, T>, in_ch: usize, out_ch: usize) -> Result<Block> {
    build_block(init, &BlockSpec::new(BlockKind::MultiDilated, in_ch, out_ch))
}

impl Block {
    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    /// Residual branch only, without the skip add.
    pub fn main_branch<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: G::Var) -> Result<G::Var> {
        match &self.body {
            BlockBody::Bottleneck {
                bn1,
                conv1,
                bn2,
                spatial,
                bn3,
                conv3,
            } => {
                let y = g.bn_relu(store, bn1, x)?;
                let y = g.conv(store, conv1, y)?;
                let y = g.bn_relu(store, bn2, y)?;
                let y = spatial.forward(g, store, y)?;
                let y = g.bn_relu(store, bn3, y)?;
                g.conv(store, conv3, y)
            }
            BlockBody::Shuffle {
                bn1,
                gconv1,
                bn2,
                groups,
                dw,
                bn3,
                gconv2,
            } => {
                let y = g.bn_relu(store, bn1, x)?;
                let y = g.conv(store, gconv1, y)?;
                let y = g.bn_relu(store, bn2, y)?;
                let y = g.channel_shuffle(y, *groups)?;
                let y = g.conv(store, dw, y)?;
                let y = g.batchnorm(store, bn3, y)?;
                g.conv(store, gconv2, y)
            }
            BlockBody::Dilated {
                bn1,
                stage1,
                bn2,
                stage2,
            } => {
                let y = g.bn_relu(store, bn1, x)?;
                let y = stage1.forward(g, store, y)?;
                let y = g.bn_relu(store, bn2, y)?;
                stage2.forward(g, store, y)
            }
            BlockBody::MultiDilated {
                bn1,
                entry,
                bn2,
                branch_width,
                branches,
                bn3,
                exit,
            } => {
                let y = g.bn_relu(store, bn1, x)?;
                let y = g.conv(store, entry, y)?;
                let y = g.bn_relu(store, bn2, y)?;
                let mut outs = Vec::with_capacity(branches.len());
                for (k, (dw, pw)) in branches.iter().enumerate() {
                    let idx: Vec<usize> = (k * branch_width..(k + 1) * branch_width).collect();
                    let part = g.gather_channels(y, &idx)?;
                    let part = g.conv(store, dw, part)?;
                    outs.push(g.conv(store, pw, part)?);
                }
                let y = g.concat(&outs)?;
                let y = g.bn_relu(store, bn3, y)?;
                g.conv(store, exit, y)
            }
            BlockBody::Dice(_) => Err(HgError::config(
                "DiCE blocks gate the sum and have no separable main branch",
            )),
        }
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: G::Var) -> Result<G::Var> {
        let c = g.shape(x).c;
        if c != self.spec.in_channels {
            return Err(HgError::config(format!(
                "block {} expects {} input channels, got {c}",
                self.name, self.spec.in_channels
            )));
        }
        if let BlockBody::Dice(unit) = &self.body {
            let x = match &self.pre {
                Some(p) => g.conv(store, p, x)?,
                None => x,
            };
            return unit.forward(g, store, x);
        }
        let main = self.main_branch(g, store, x)?;
        let skip = match &self.skip {
            Some(s) => g.conv(store, s, x)?,
            None => x,
        };
        g.add(skip, main)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ShapeTracer;
    use crate::params::seeded_rng;

    fn count(spec: &BlockSpec) -> usize {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(0);
        build_block(&mut Init::new(&mut store, &mut rng), spec).unwrap();
        store.num_trainable()
    }

    #[test]
    fn residual_param_formula() {
        let (c, m) = (256, 128);
        let want = 2 * c + c * m + 2 * m + m * m * 9 + 2 * m + (m * c + c);
        assert_eq!(count(&BlockSpec::new(BlockKind::Residual, c, c)), want);
    }

    #[test]
    fn ordering_at_256() {
        let p = |k| count(&BlockSpec::new(k, 256, 256));
        let shuffle = p(BlockKind::Shuffle);
        let ghost = p(BlockKind::Ghost);
        let dice = p(BlockKind::Dice);
        let sep = p(BlockKind::SeparableResidual);
        let res = p(BlockKind::Residual);
        let dil = p(BlockKind::Dilated);
        assert!(shuffle < ghost && ghost < sep && sep < res && res < dil);
        assert!(ghost < dice && dice < res);
    }

    #[test]
    fn odd_out_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(0);
        assert!(build_residual(&mut Init::new(&mut store, &mut rng), 8, 7).is_err());
        assert!(build_multidilated(&mut Init::new(&mut store, &mut rng), 8, 5).is_err());
        assert!(build_dice(&mut Init::new(&mut store, &mut rng), 8, 16).is_err());
        assert!(build_shuffle(&mut Init::new(&mut store, &mut rng), 8, 12, 4).is_err());
    }

    #[test]
    fn ghost_split_arithmetic() {
        assert_eq!(ghost_split(16, 2).unwrap(), (8, 8));
        assert_eq!(ghost_split(16, 1).unwrap(), (16, 0));
        assert_eq!(ghost_split(12, 3).unwrap(), (4, 8));
        assert!(ghost_split(10, 3).is_err());
    }

    #[test]
    fn multidilated_split_for_84() {
        assert_eq!(3 * multidilated_branch_width(84, 3), 42);
        assert_eq!(multidilated_branch_width(84, 3), 14);
    }

    #[test]
    fn every_kind_traces_with_shape_contract() {
        for kind in BlockKind::ALL {
            for (i, o) in [(16, 16), (8, 24)] {
                let mut store = ParamStore::<f32>::new();
                let mut rng = seeded_rng(1);
                let spec = BlockSpec::new(kind, i, o);
                let b = build_block(&mut Init::new(&mut store, &mut rng), &spec).unwrap();
                let mut t = ShapeTracer::new();
                let x = t.input(Shape4::new(2, i, 8, 6)).unwrap();
                let out = b.forward(&mut t, &store, x).unwrap();
                let y = Graph::<f32>::shape(&t, out);
                assert_eq!(y, Shape4::new(2, o, 8, 6), "{kind:?}");
            }
        }
    }

    #[test]
    fn style_serde_defaults() {
        let s: BlockStyle = serde_json::from_str(r#"{"kind":"multi_dilated"}"#).unwrap();
        assert_eq!(s.dilations, vec![1, 2, 3]);
        assert_eq!(s.groups, 4);
        assert_eq!(s.ghost_ratio, 2);
        assert!(!s.separable);
        assert_eq!(BlockKind::parse("Multi-Dilated").unwrap(), BlockKind::MultiDilated);
        assert!(BlockKind::parse("nope").is_err());
    }
}

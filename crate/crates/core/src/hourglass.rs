//! Stacked hourglass network: preamble, recursive hourglasses, per-stack
//! heads and inter-stack wiring, plus the ResConcat and NarrowRes options.

use serde::{Deserialize, Serialize};

use crate::blocks::{build_block, Block, BlockKind, BlockStyle};
use crate::error::{HgError, Result};
use crate::graph::Graph;
use crate::params::{seeded_rng, BnLayer, ConvLayer, Init, ParamStore};
use crate::tensor::{ConvSpec, Real, Shape4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Add,
    ResConcat,
}

fn default_depth() -> usize {
    4
}

fn default_stem() -> usize {
    128
}

fn default_joints() -> usize {
    16
}

fn default_resolution() -> usize {
    256
}

fn default_skip() -> SkipMode {
    SkipMode::Add
}

fn residual_style() -> BlockStyle {
    BlockStyle::new(BlockKind::Residual)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_stacks: usize,
    #[serde(default = "default_depth")]
    pub hourglass_depth: usize,
    /// Feature width carried through every hourglass level.
    pub channels_main: usize,
    /// Bottleneck width inside every block.
    pub channels_inner: usize,
    /// Output width of the first preamble block.
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    /// Block used inside the hourglasses.
    #[serde(default = "residual_style")]
    pub block: BlockStyle,
    /// Block used in the preamble and the post-hourglass heads.
    #[serde(default = "residual_style")]
    pub outer_block: BlockStyle,
    #[serde(default = "default_skip")]
    pub skip_mode: SkipMode,
    /// Number of hourglass levels, counted from the outermost, that merge by
    /// ResConcat when `skip_mode` is `res_concat`. All levels when absent.
    #[serde(default)]
    pub resconcat_levels: Option<usize>,
    #[serde(default)]
    pub narrow_res: bool,
    #[serde(default = "default_joints")]
    pub num_joints: usize,
    #[serde(default = "default_resolution")]
    pub input_resolution: usize,
}

impl NetworkConfig {
    /// Baseline recipe: residual blocks, additive skips.
    pub fn baseline(num_stacks: usize, channels_main: usize, channels_inner: usize) -> Self {
        Self {
            num_stacks,
            hourglass_depth: 4,
            channels_main,
            channels_inner,
            stem_channels: 128,
            block: residual_style(),
            outer_block: residual_style(),
            skip_mode: SkipMode::Add,
            resconcat_levels: None,
            narrow_res: false,
            num_joints: 16,
            input_resolution: 256,
        }
    }

    /// Desk-scale network: 2 stacks, 32/16 channels, 64×64 input.
    pub fn toy() -> Self {
        Self {
            stem_channels: 16,
            input_resolution: 64,
            ..Self::baseline(2, 32, 16)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)
            .map_err(|e| HgError::config(format!("architecture file: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn heatmap_resolution(&self) -> usize {
        self.input_resolution / 4
    }

    pub fn resconcat_at(&self, level: usize) -> bool {
        self.skip_mode == SkipMode::ResConcat
            && level < self.resconcat_levels.unwrap_or(self.hourglass_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(HgError::config(format!("{field}: {msg}")));
        if self.num_stacks == 0 {
            return bad("num_stacks", "must be at least 1".into());
        }
        if self.hourglass_depth == 0 || self.hourglass_depth > 16 {
            return bad("hourglass_depth", format!("{} out of range 1..=16", self.hourglass_depth));
        }
        if self.channels_inner == 0 || self.channels_inner >= self.channels_main {
            return bad(
                "channels_inner",
                format!(
                    "must satisfy 0 < channels_inner < channels_main, got {} and {}",
                    self.channels_inner, self.channels_main
                ),
            );
        }
        if self.stem_channels < 2 {
            return bad("stem_channels", format!("{} below 2", self.stem_channels));
        }
        if self.num_joints == 0 {
            return bad("num_joints", "must be at least 1".into());
        }
        let unit = 4usize << self.hourglass_depth;
        if self.input_resolution == 0 || self.input_resolution % unit != 0 {
            return bad(
                "input_resolution",
                format!("{} not divisible by {unit}", self.input_resolution),
            );
        }
        if let Some(l) = self.resconcat_levels {
            if l > self.hourglass_depth {
                return bad(
                    "resconcat_levels",
                    format!("{l} exceeds hourglass_depth {}", self.hourglass_depth),
                );
            }
        }
        for (field, style) in [("block", &self.block), ("outer_block", &self.outer_block)] {
            self.block_spec(style, self.channels_main, self.channels_main, self.channels_inner)
                .validate()
                .map_err(|e| HgError::config(format!("{field}: {e}")))?;
        }
        self.block_spec(&self.outer_block, 64, self.stem_channels, self.stem_channels / 2)
            .validate()
            .map_err(|e| HgError::config(format!("outer_block (stem): {e}")))?;
        self.block_spec(&self.outer_block, self.stem_channels, self.channels_main, self.channels_inner)
            .validate()
            .map_err(|e| HgError::config(format!("outer_block (stem): {e}")))?;
        Ok(())
    }

    fn block_spec(&self, style: &BlockStyle, i: usize, o: usize, mid: usize) -> crate::blocks::BlockSpec {
        style.spec(i, o, Some(mid.max(1)))
    }
}

/// Combines a skip branch with an upsampled branch. `merge` is the learned
/// 1×1 of a ResConcat connection; `None` means addition.
pub fn merge_skip<T: Real, G: Graph<T>>(
    g: &mut G,
    store: &ParamStore<T>,
    skip: G::Var,
    up: G::Var,
    merge: Option<&ConvLayer>,
) -> Result<G::Var> {
    let (s, u) = (g.shape(skip), g.shape(up));
    if (s.n, s.h, s.w) != (u.n, u.h, u.w) {
        return Err(HgError::config(format!(
            "merge: spatial mismatch between skip {s} and upsampled {u}"
        )));
    }
    match merge {
        None => g.add(skip, up),
        Some(conv) => {
            let cat = g.concat(&[skip, up])?;
            g.conv(store, conv, cat)
        }
    }
}

/// Neck-to-neck residual between consecutive stacks.
pub fn narrow_res_connect<T: Real, G: Graph<T>>(g: &mut G, prev: G::Var, cur: G::Var) -> Result<G::Var> {
    let (p, c) = (g.shape(prev), g.shape(cur));
    if p != c {
        return Err(HgError::config(format!("narrow-res: neck shapes differ, {p} vs {c}")));
    }
    g.add(cur, prev)
}

#[derive(Clone, Debug)]
pub struct HourglassLevel {
    pub up: Block,
    pub low1: Block,
    pub low3: Block,
    pub merge: Option<ConvLayer>,
}

/// One hourglass. `levels[0]` is the outermost (full resolution) level.
#[derive(Clone, Debug)]
pub struct Hourglass {
    pub channels: usize,
    pub levels: Vec<HourglassLevel>,
    pub neck: Block,
}

impl Hourglass {
    pub fn build<T: Real>(
        init: &mut Init<'_, T>,
        depth: usize,
        channels: usize,
        mid: usize,
        style: &BlockStyle,
        resconcat_levels: usize,
    ) -> Result<Self> {
        let spec = style.spec(channels, channels, Some(mid));
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let mut lv = init.scope(&format!("level{}", l + 1));
            let up = build_block(&mut lv.scope("up"), &spec)?;
            let low1 = build_block(&mut lv.scope("low1"), &spec)?;
            let low3 = build_block(&mut lv.scope("low3"), &spec)?;
            let merge = if l < resconcat_levels {
                Some(lv.conv("merge", ConvSpec::pointwise(2 * channels, channels))?)
            } else {
                None
            };
            levels.push(HourglassLevel { up, low1, low3, merge });
        }
        let neck = build_block(&mut init.scope("neck"), &spec)?;
        Ok(Self {
            channels,
            levels,
            neck,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Returns `(output, neck)`. `prev_neck`, when given, is added to this
    /// hourglass's neck before the innermost block.
    pub fn forward<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        x: G::Var,
        prev_neck: Option<G::Var>,
    ) -> Result<(G::Var, G::Var)> {
        let s = g.shape(x);
        let unit = 1usize << self.depth();
        if s.h % unit != 0 || s.w % unit != 0 {
            return Err(HgError::config(format!(
                "hourglass input {}x{} not divisible by {unit}",
                s.h, s.w
            )));
        }
        if s.c != self.channels {
            return Err(HgError::config(format!(
                "hourglass expects {} channels, got {}",
                self.channels, s.c
            )));
        }
        self.level(g, store, 0, x, prev_neck)
    }

    fn level<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        l: usize,
        x: G::Var,
        prev_neck: Option<G::Var>,
    ) -> Result<(G::Var, G::Var)> {
        let lv = &self.levels[l];
        let up1 = lv.up.forward(g, store, x)?;
        let pooled = g.maxpool2x2(x)?;
        let low1 = lv.low1.forward(g, store, pooled)?;
        let (low2, neck) = if l + 1 < self.depth() {
            self.level(g, store, l + 1, low1, prev_neck)?
        } else {
            let neck = match prev_neck {
                Some(p) => narrow_res_connect(g, p, low1)?,
                None => low1,
            };
            (self.neck.forward(g, store, neck)?, neck)
        };
        let low3 = lv.low3.forward(g, store, low2)?;
        let up2 = g.upsample2x(low3);
        let out = merge_skip(g, store, up1, up2, lv.merge.as_ref())?;
        Ok((out, neck))
    }
}

#[derive(Clone, Debug)]
pub struct Stack {
    pub hourglass: Hourglass,
    pub post: Block,
    pub tail_conv: ConvLayer,
    pub tail_bn: BnLayer,
    pub score: ConvLayer,
    /// `(feature remap, prediction remap)` for all but the last stack.
    pub remap: Option<(ConvLayer, ConvLayer)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub stem_conv: ConvLayer,
    pub stem_bn: BnLayer,
    pub stem_blocks: [Block; 3],
    pub stacks: Vec<Stack>,
}

/// Per-stack outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput<V> {
    pub heatmaps: Vec<V>,
    pub neck_features: Vec<V>,
    pub tail_features: Vec<V>,
}

impl Network {
    pub fn build<T: Real>(config: &NetworkConfig, init: &mut Init<'_, T>) -> Result<Self> {
        config.validate()?;
        let c = config.channels_main;
        let mid = config.channels_inner;
        let stem = config.stem_channels;
        let outer = &config.outer_block;

        let mut pre = init.scope("pre");
        let stem_conv = pre.conv(
            "conv1",
            ConvSpec::same(3, 64, 7).with_stride(2).with_bias(false),
        )?;
        let stem_bn = pre.bn("bn1", 64)?;
        let b1 = build_block(&mut pre.scope("block1"), &outer.spec(64, stem, Some((stem / 2).max(1))))?;
        let b2 = build_block(&mut pre.scope("block2"), &outer.spec(stem, c, Some(mid)))?;
        let b3 = build_block(&mut pre.scope("block3"), &outer.spec(c, c, Some(mid)))?;

        let rc = if config.skip_mode == SkipMode::ResConcat {
            config.resconcat_levels.unwrap_or(config.hourglass_depth)
        } else {
            0
        };
        let mut stacks = Vec::with_capacity(config.num_stacks);
        for s in 0..config.num_stacks {
            let mut st = init.scope(&format!("stack{}", s + 1));
            let hourglass = Hourglass::build(
                &mut st.scope("hg"),
                config.hourglass_depth,
                c,
                mid,
                &config.block,
                rc,
            )?;
            let post = build_block(&mut st.scope("post"), &outer.spec(c, c, Some(mid)))?;
            let tail_conv = st.conv("tail_conv", ConvSpec::pointwise(c, c).with_bias(false))?;
            let tail_bn = st.bn("tail_bn", c)?;
            let score = st.conv("score", ConvSpec::pointwise(c, config.num_joints))?;
            let remap = if s + 1 < config.num_stacks {
                Some((
                    st.conv("remap_features", ConvSpec::pointwise(c, c))?,
                    st.conv("remap_scores", ConvSpec::pointwise(config.num_joints, c))?,
                ))
            } else {
                None
            };
            stacks.push(Stack {
                hourglass,
                post,
                tail_conv,
                tail_bn,
                score,
                remap,
            });
        }
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stem_blocks: [b1, b2, b3],
            stacks,
        })
    }

    /// Builds a network and a freshly initialized parameter store.
    pub fn with_seed<T: Real>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let net = Self::build(config, &mut Init::new(&mut store, &mut rng))?;
        Ok((net, store))
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        let r = self.config.input_resolution;
        Shape4::new(batch, 3, r, r)
    }

    pub fn heatmap_shape(&self, batch: usize) -> Shape4 {
        let r = self.config.heatmap_resolution();
        Shape4::new(batch, self.config.num_joints, r, r)
    }

    pub fn forward<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        images: G::Var,
    ) -> Result<NetworkOutput<G::Var>> {
        let s = g.shape(images);
        let want = self.input_shape(s.n);
        if s != want {
            return Err(HgError::config(format!(
                "network expects input {want}, got {s}"
            )));
        }
        let x = g.conv(store, &self.stem_conv, images)?;
        let x = g.bn_relu(store, &self.stem_bn, x)?;
        let x = self.stem_blocks[0].forward(g, store, x)?;
        let x = g.maxpool2x2(x)?;
        let x = self.stem_blocks[1].forward(g, store, x)?;
        let mut x = self.stem_blocks[2].forward(g, store, x)?;

        let narrow = self.config.narrow_res;
        let mut out = NetworkOutput {
            heatmaps: Vec::new(),
            neck_features: Vec::new(),
            tail_features: Vec::new(),
        };
        for stack in &self.stacks {
            let prev = if narrow { out.neck_features.last().copied() } else { None };
            let (h, neck) = stack.hourglass.forward(g, store, x, prev)?;
            let y = stack.post.forward(g, store, h)?;
            let y = g.conv(store, &stack.tail_conv, y)?;
            let tail = g.bn_relu(store, &stack.tail_bn, y)?;
            let heat = g.conv(store, &stack.score, tail)?;
            if let Some((fc, sc)) = &stack.remap {
                let a = g.conv(store, fc, tail)?;
                let b = g.conv(store, sc, heat)?;
                let x1 = g.add(x, a)?;
                x = g.add(x1, b)?;
            }
            out.heatmaps.push(heat);
            out.neck_features.push(neck);
            out.tail_features.push(tail);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ShapeTracer;

    #[test]
    fn config_json_defaults_and_validation() {
        let c = NetworkConfig::from_json(
            r#"{"num_stacks":2,"channels_main":32,"channels_inner":16,"stem_channels":16,"input_resolution":64}"#,
        )
        .unwrap();
        assert_eq!(c, NetworkConfig::toy());
        assert_eq!(NetworkConfig::from_json(&c.to_json()).unwrap(), c);

        let mut bad = NetworkConfig::toy();
        bad.input_resolution = 96;
        assert!(bad.validate().unwrap_err().to_string().contains("input_resolution"));
        let mut bad = NetworkConfig::toy();
        bad.channels_inner = 32;
        assert!(bad.validate().unwrap_err().to_string().contains("channels_inner"));
        assert!(NetworkConfig::from_json(r#"{"num_stacks":1,"channels_main":8,"channels_inner":4,"bogus":1}"#).is_err());
    }

    #[test]
    fn toy_shapes() {
        let cfg = NetworkConfig::toy();
        let (net, store) = Network::with_seed::<f32>(&cfg, 1).unwrap();
        let mut t = ShapeTracer::new();
        let x = t.input(net.input_shape(1)).unwrap();
        let out = net.forward(&mut t, &store, x).unwrap();
        assert_eq!(out.heatmaps.len(), 2);
        for h in &out.heatmaps {
            assert_eq!(Graph::<f32>::shape(&t, *h), Shape4::new(1, 16, 16, 16));
        }
        assert_eq!(Graph::<f32>::shape(&t, out.neck_features[0]), Shape4::new(1, 32, 1, 1));
    }
}

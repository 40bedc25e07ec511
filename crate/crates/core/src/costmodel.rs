//! Analytical and counted FLOPs (one multiply or one add = one FLOP).
//!
//! *Formula mode* evaluates the closed-form complexity expressions in exact rational
//! arithmetic. *Exact mode* walks the network layer by layer and counts the multiplies and
//! adds the implementation performs. Every counted op also carries its "table" count when
//! the closed-form analysis has a matching row, so the counter can be read under either
//! convention:
//!
//! * [`Convention::Table`] reproduces the closed forms: attention units contribute only
//!   their table rows (normalization, pooling, excitation, value aggregation, residuals
//!   and the convolution branch's linear map are omitted, as in the analysis).
//! * [`Convention::Strict`] counts everything except transcendental ops (softmax
//!   exponentials, layer-norm square roots, GELU).
//!
//! Spatial-attention terms of the analysis are not split into multiplies and adds; under
//! the table convention they are booked as multiplies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize, Serializer};

use crate::backbone::CatAir;
use crate::channel::{select_channel_variant, ChannelVariant};
use crate::config::{ModelConfig, Side, LEVELS};
use crate::error::{Error, Result};
use crate::spatial::hard_count;

pub type Rational = Ratio<i128>;

fn int(v: usize) -> Rational {
    Rational::from_integer(v as i128)
}

/// Converts a decimal such as `1.5` or `0.25` to the simplest nearby rational.
pub fn rational(x: f64) -> Result<Rational> {
    Rational::approximate_float(x).ok_or_else(|| Error::Config(format!("{x} is not representable as a ratio")))
}

/// Rational as an `f64`, for display.
pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Integers as plain numbers, fractions as `"n/d"`.
pub fn serialize_rational<S: Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    if r.is_integer() {
        s.serialize_i128(r.to_integer())
    } else {
        s.serialize_str(&r.to_string())
    }
}

fn serialize_opt_rational<S: Serializer>(r: &Option<Rational>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match r {
        Some(r) => serialize_rational(r, s),
        None => s.serialize_none(),
    }
}

/// Shallow squeeze-excitation unit: `HW(3C^2 + 16C)`.
pub fn flops_se(h: usize, w: usize, c: usize) -> Rational {
    let c = int(c);
    int(h * w) * (int(3) * c * c + int(16) * c)
}

/// Bottleneck transposed self-attention unit: `HW(10C^2 + 46C)`.
pub fn flops_bottleneck(h: usize, w: usize, c: usize) -> Rational {
    let c = int(c);
    int(h * w) * (int(10) * c * c + int(46) * c)
}

/// Shallow-level weight of the channel-attention aggregation.
pub fn shallow_weight() -> Rational {
    Rational::new(13, 2)
}

/// Bottleneck weight of the channel-attention aggregation.
pub fn bottleneck_weight() -> Rational {
    Rational::new(1, 16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CrossLayerFlops {
    #[serde(serialize_with = "serialize_rational")]
    pub mixed: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub all_complex: Rational,
}

impl CrossLayerFlops {
    /// Fraction of the all-complex cost removed by the mixed design.
    pub fn savings(&self) -> Rational {
        Rational::one() - self.mixed / self.all_complex
    }
}

/// Whole-network channel attention: SE in shallow levels plus bottleneck attention, versus
/// bottleneck attention everywhere.
pub fn flops_cross_layer(h: usize, w: usize, c: usize) -> CrossLayerFlops {
    let se = flops_se(h, w, c);
    let bottleneck = flops_bottleneck(h, w, c);
    CrossLayerFlops {
        mixed: shallow_weight() * se + bottleneck_weight() * bottleneck,
        all_complex: (shallow_weight() + bottleneck_weight()) * bottleneck,
    }
}

/// Per-level weights `sum(blocks * 4^-(l-1))` of SE and bottleneck units for a block schedule,
/// under the assumption that every level keeps `C` channels and halves its resolution.
pub fn layer_weights(config: &ModelConfig) -> Result<(Rational, Rational)> {
    let mut shallow = Rational::zero();
    let mut bottleneck = Rational::zero();
    let mut add = |level: usize, side: Side, blocks: usize| -> Result<()> {
        let w = Rational::new(blocks as i128, 1i128 << (2 * (level - 1)));
        match select_channel_variant(level, side)? {
            ChannelVariant::SqueezeExcite => shallow += w,
            ChannelVariant::Transposed => bottleneck += w,
        }
        Ok(())
    };
    for level in 1..=LEVELS {
        add(level, Side::Encoder, config.enc_blocks[level - 1])?;
    }
    for (i, level) in (1..LEVELS).rev().enumerate() {
        add(level, Side::Decoder, config.dec_blocks[i])?;
    }
    Ok((shallow, bottleneck))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SpatialFlops {
    #[serde(serialize_with = "serialize_rational")]
    pub mixed: Rational,
    #[serde(serialize_with = "serialize_rational")]
    pub attention_only: Rational,
}

/// Routed spatial attention `HW(4C + (3C^2 + 2 tau^2 q^2 C) gamma + 2 k^2 C (1 - gamma))`
/// versus attention on every patch, `HW(3C^2 + 2 tau^2 q^2 C)`.
pub fn flops_spatial(h: usize, w: usize, c: usize, tau: Rational, q: usize, gamma: Rational, k: usize) -> Result<SpatialFlops> {
    if gamma < Rational::zero() || gamma > Rational::one() {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let hw = int(h * w);
    let (c, q, k) = (int(c), int(q), int(k));
    let attn = int(3) * c * c + int(2) * tau * tau * q * q * c;
    let conv = int(2) * k * k * c;
    Ok(SpatialFlops {
        mixed: hw * (int(4) * c + attn * gamma + conv * (Rational::one() - gamma)),
        attention_only: hw * attn,
    })
}

/// One counted operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCount {
    pub kind: &'static str,
    pub mults: Rational,
    pub adds: Rational,
    /// `(mults, adds)` of the matching row of the closed-form analysis, if it has one.
    pub table: Option<(Rational, Rational)>,
}

impl OpCount {
    fn new(kind: &'static str, mults: usize, adds: usize) -> Self {
        Self {
            kind,
            mults: int(mults),
            adds: int(adds),
            table: None,
        }
    }

    fn table(mut self, mults: Rational, adds: Rational) -> Self {
        self.table = Some((mults, adds));
        self
    }

    fn counts(&self, convention: Convention) -> Option<(Rational, Rational)> {
        match convention {
            Convention::Strict => Some((self.mults, self.adds)),
            Convention::Table => self.table,
        }
    }
}

fn linear(kind: &'static str, n: usize, cin: usize, cout: usize, bias: bool) -> OpCount {
    let adds = n * (cin - 1) * cout + if bias { n * cout } else { 0 };
    OpCount::new(kind, n * cin * cout, adds)
}

fn conv(kind: &'static str, n: usize, cin: usize, cout: usize, k: usize) -> OpCount {
    linear(kind, n, k * k * cin, cout, true)
}

fn depthwise(kind: &'static str, n: usize, c: usize, k: usize) -> OpCount {
    OpCount::new(kind, n * k * k * c, n * (k * k - 1) * c)
}

fn sum_ops(kind: &'static str, ops: &[OpCount]) -> OpCount {
    OpCount {
        kind,
        mults: ops.iter().map(|o| o.mults).sum(),
        adds: ops.iter().map(|o| o.adds).sum(),
        table: None,
    }
}

/// Squeeze-excitation sublayer on `n` pixels with `c` channels.
pub fn count_se(n: usize, c: usize) -> Vec<OpCount> {
    let (cn, hn, half) = (int(c), int(n), c / 2);
    vec![
        linear("pointwise", n, c, c, false).table(hn * cn * cn, hn * (cn * cn - cn)),
        depthwise("depthwise", n, c, 3).table(int(9) * hn * cn, int(8) * hn * cn),
        OpCount::new("gate", n * half, 0).table(int(n * half), Rational::zero()),
        OpCount::new("squeeze", half, (n - 1) * half),
        linear("excite", 1, half, half, false),
        OpCount::new("excite_scale", n * half, 0).table(int(n * half), Rational::zero()),
        linear("final_pointwise", n, half, c, false)
            .table(hn * cn * cn / int(2), hn * (cn * cn / int(2) - cn)),
        OpCount::new("residual", 0, n * c),
    ]
}

/// Transposed (channel) self-attention sublayer on `n` pixels.
pub fn count_transposed(n: usize, c: usize, heads: usize) -> Vec<OpCount> {
    let (cn, hn) = (int(c), int(n));
    let d = c / heads;
    vec![
        OpCount::new("pointwise_qkv", 3 * n * c * c, 3 * n * (c - 1) * c)
            .table(int(3) * hn * cn * cn, int(3) * hn * (cn * cn - cn)),
        OpCount::new("depthwise_qkv", 27 * n * c, 24 * n * c).table(int(27) * hn * cn, int(24) * hn * cn),
        OpCount::new("attention_scores", heads * d * d * n, heads * d * d * (n - 1))
            .table(hn * cn * cn, hn * (cn * cn - cn)),
        OpCount::new("temperature", heads * d * d, 0),
        OpCount::new("attention_apply", n * heads * d * d, n * heads * d * (d - 1)),
        linear("final_pointwise", n, c, c, false).table(hn * cn * cn, hn * (cn * cn - cn)),
        OpCount::new("residual", 0, n * c),
    ]
}

/// Gated feed-forward network on `n` pixels.
pub fn count_ffn(n: usize, c: usize) -> Vec<OpCount> {
    let hidden = 2 * c;
    vec![
        linear("expand", n, c, hidden, false),
        depthwise("depthwise", n, hidden, 3),
        OpCount::new("gate", n * c, 0),
        linear("contract", n, c, c, false),
        OpCount::new("residual", 0, n * c),
    ]
}

/// Geometry of one spatial-attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub window: usize,
    pub kv_window: usize,
    pub conv_kernel: usize,
    pub router_global: usize,
    pub router_hidden: usize,
    pub hard_patches: usize,
}

impl SpatialShape {
    pub fn patches(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }
}

/// Routed spatial-attention sublayer at inference.
pub fn count_spatial(s: &SpatialShape) -> Vec<OpCount> {
    let n = s.height * s.width;
    let c = s.channels;
    let (cn, kv2) = (int(c), s.kv_window * s.kv_window);
    let hard = s.hard_patches * s.window * s.window;
    let easy = n - hard;
    let k2 = s.conv_kernel * s.conv_kernel;
    let p = s.patches();
    let router = sum_ops(
        "router",
        &[
            conv("global_in", n, 3, s.router_global, 3),
            linear("global_out", n, s.router_global, s.router_global, true),
            linear("mask_in", n, c + s.router_global + 2, s.router_hidden, true),
            OpCount::new("patch_pool", p * s.router_hidden, (n - p) * s.router_hidden),
            conv("mask_out", p, s.router_hidden, 1, 3),
        ],
    )
    .table(int(4 * n) * cn, Rational::zero());
    let mut ops = vec![router];
    if hard > 0 {
        let hn = int(hard);
        ops.extend([
            linear("query", hard, c, c, false).table(hn * cn * cn, Rational::zero()),
            linear("key_value", 2 * n, c, c, false).table(int(2) * hn * cn * cn, Rational::zero()),
            OpCount::new("window_scores", hard * kv2 * c, hard * kv2 * (c - 1))
                .table(hn * int(kv2) * cn, Rational::zero()),
            OpCount::new("temperature", hard * kv2, 0),
            OpCount::new("window_apply", hard * kv2 * c, hard * (kv2 - 1) * c)
                .table(hn * int(kv2) * cn, Rational::zero()),
        ]);
    }
    if easy > 0 {
        ops.extend([
            linear("easy_linear", easy, c, c, false),
            depthwise("easy_depthwise", easy, c, s.conv_kernel).table(int(2 * k2 * easy) * cn, Rational::zero()),
            OpCount::new("easy_modulate", easy * c, 0),
        ]);
    }
    ops.push(linear("final_pointwise", n, c, c, false));
    ops.push(OpCount::new("residual", 0, n * c));
    ops
}

/// Prompt generation and fusion at an `h x w` level.
pub fn count_prompt(h: usize, w: usize, c: usize, tasks: usize, size: usize) -> Vec<OpCount> {
    let n = h * w;
    let mut ops = vec![
        OpCount::new("prompt_pool", c, (n - 1) * c),
        linear("prompt_mix", 1, c, tasks, true),
        OpCount::new("prompt_generate", tasks * size * size * c, (tasks - 1) * size * size * c),
    ];
    if (h, w) != (size, size) {
        ops.push(OpCount::new(
            "prompt_resize",
            h * size * size * c + n * size * c,
            h * (size - 1) * size * c + n * (size - 1) * c,
        ));
    }
    ops.push(conv("prompt_fuse", n, 2 * c, c, 3));
    ops
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ChannelAttention,
    SpatialAttention,
    FeedForward,
    Other,
}

impl Category {
    fn is_attention(self) -> bool {
        matches!(self, Self::ChannelAttention | Self::SpatialAttention)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Formula,
    Exact,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "formula" => Ok(Self::Formula),
            "exact" => Ok(Self::Exact),
            _ => Err(Error::Config(format!("unknown FLOPs mode `{s}` (expected formula or exact)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Table,
    Strict,
}

/// Channel widths used when counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `C * 2^(l-1)` channels at level `l`, as instantiated.
    TrueChannels,
    /// `C` channels at every level, as assumed by the closed-form aggregation.
    ConstantC,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsEntry {
    pub layer_id: String,
    pub kind: String,
    pub category: Category,
    #[serde(serialize_with = "serialize_opt_rational")]
    pub mults: Option<Rational>,
    #[serde(serialize_with = "serialize_opt_rational")]
    pub adds: Option<Rational>,
    #[serde(serialize_with = "serialize_rational")]
    pub flops: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    #[serde(serialize_with = "serialize_opt_rational")]
    pub mults: Option<Rational>,
    #[serde(serialize_with = "serialize_opt_rational")]
    pub adds: Option<Rational>,
    #[serde(serialize_with = "serialize_rational")]
    pub flops: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub mode: Mode,
    pub convention: Convention,
    pub schedule: Schedule,
    pub height: usize,
    pub width: usize,
    pub gamma: f64,
    pub entries: Vec<FlopsEntry>,
    pub totals: Totals,
    #[serde(serialize_with = "serialize_category_totals")]
    pub by_category: BTreeMap<Category, Rational>,
    pub assumptions: Vec<String>,
}

fn serialize_category_totals<S: Serializer>(m: &BTreeMap<Category, Rational>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        let key = serde_json::to_value(k).map_err(serde::ser::Error::custom)?;
        let key = key.as_str().unwrap_or_default().to_owned();
        if v.is_integer() {
            map.serialize_entry(&key, &v.to_integer())?;
        } else {
            map.serialize_entry(&key, &v.to_string())?;
        }
    }
    map.end()
}

impl FlopsReport {
    fn from_entries(
        mode: Mode,
        convention: Convention,
        schedule: Schedule,
        (height, width, gamma): (usize, usize, f64),
        entries: Vec<FlopsEntry>,
        assumptions: Vec<String>,
    ) -> Self {
        let flops = entries.iter().map(|e| e.flops).sum();
        let mults = entries.iter().map(|e| e.mults).sum::<Option<Rational>>();
        let adds = entries.iter().map(|e| e.adds).sum::<Option<Rational>>();
        let mut by_category = BTreeMap::new();
        for e in &entries {
            *by_category.entry(e.category).or_insert_with(Rational::zero) += e.flops;
        }
        Self {
            mode,
            convention,
            schedule,
            height,
            width,
            gamma,
            entries,
            totals: Totals { mults, adds, flops },
            by_category,
            assumptions,
        }
    }

    pub fn category(&self, c: Category) -> Rational {
        self.by_category.get(&c).copied().unwrap_or_else(Rational::zero)
    }

    /// Entries whose layer id is `prefix` or lies below it (`prefix.*`).
    pub fn layer_total(&self, prefix: &str) -> Rational {
        self.entries
            .iter()
            .filter(|e| {
                e.layer_id
                    .strip_prefix(prefix)
                    .is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
            })
            .map(|e| e.flops)
            .sum()
    }
}

struct Counter {
    convention: Convention,
    entries: Vec<FlopsEntry>,
}

impl Counter {
    fn push(&mut self, layer: &str, category: Category, ops: Vec<OpCount>) {
        for op in ops {
            let counts = if category.is_attention() {
                op.counts(self.convention)
            } else {
                Some((op.mults, op.adds))
            };
            if let Some((m, a)) = counts {
                self.entries.push(FlopsEntry {
                    layer_id: layer.to_owned(),
                    kind: op.kind.to_owned(),
                    category,
                    mults: Some(m),
                    adds: Some(a),
                    flops: m + a,
                });
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Counts the network described by `config` on an `h x w` input with inference ratio `gamma`.
pub fn count_exact(
    config: &ModelConfig,
    h: usize,
    w: usize,
    gamma: f64,
    convention: Convention,
    schedule: Schedule,
) -> Result<FlopsReport> {
    config.validate()?;
    config.check_input(h, w)?;
    check_gamma(gamma)?;
    let width = |level: usize| match schedule {
        Schedule::TrueChannels => config.channels(level),
        Schedule::ConstantC => config.base_channels,
    };
    let dims = |level: usize| (h >> (level - 1), w >> (level - 1));
    let mut counter = Counter {
        convention,
        entries: Vec::new(),
    };
    let block = |counter: &mut Counter, id: String, level: usize, side: Side| -> Result<()> {
        let (lh, lw) = dims(level);
        let (n, c) = (lh * lw, width(level));
        let channel = match select_channel_variant(level, side)? {
            ChannelVariant::SqueezeExcite => count_se(n, c),
            ChannelVariant::Transposed => count_transposed(n, c, config.heads[level - 1]),
        };
        counter.push(&format!("{id}.channel"), Category::ChannelAttention, channel);
        counter.push(&format!("{id}.channel_ffn"), Category::FeedForward, count_ffn(n, c));
        let mut shape = SpatialShape {
            height: lh,
            width: lw,
            channels: c,
            window: config.window,
            kv_window: config.kv_window(),
            conv_kernel: config.conv_kernel,
            router_global: config.router_global_channels,
            router_hidden: config.router_hidden,
            hard_patches: 0,
        };
        shape.hard_patches = hard_count(gamma, shape.patches());
        counter.push(&format!("{id}.spatial"), Category::SpatialAttention, count_spatial(&shape));
        counter.push(&format!("{id}.spatial_ffn"), Category::FeedForward, count_ffn(n, c));
        Ok(())
    };

    counter.push("shallow", Category::Other, vec![conv("conv3x3", h * w, 3, width(1), 3)]);
    for level in 1..=LEVELS {
        for i in 0..config.enc_blocks[level - 1] {
            block(&mut counter, format!("enc{level}.block{i}"), level, Side::Encoder)?;
        }
        if level < LEVELS {
            let (nh, nw) = dims(level + 1);
            counter.push(
                &format!("enc{level}.down"),
                Category::Other,
                vec![linear("pointwise", nh * nw, 4 * width(level), width(level + 1), false)],
            );
        }
    }
    for (i, level) in (1..LEVELS).rev().enumerate() {
        let (lh, lw) = dims(level);
        let (uh, uw) = dims(level + 1);
        let c = width(level);
        counter.push(
            &format!("dec{level}.up"),
            Category::Other,
            vec![linear("pointwise", uh * uw, width(level + 1), 4 * c, false)],
        );
        counter.push(&format!("dec{level}.fuse"), Category::Other, vec![linear("pointwise", lh * lw, 2 * c, c, false)]);
        counter.push(
            &format!("dec{level}.prompt"),
            Category::Other,
            count_prompt(lh, lw, c, config.task_count, config.prompt_size),
        );
        for j in 0..config.dec_blocks[i] {
            block(&mut counter, format!("dec{level}.block{j}"), level, Side::Decoder)?;
        }
    }
    counter.push(
        "output",
        Category::Other,
        vec![conv("conv3x3", h * w, width(1), 3, 3), OpCount::new("residual", 0, 3 * h * w)],
    );

    let mut assumptions = vec![match schedule {
        Schedule::TrueChannels => "level l uses C*2^(l-1) channels".to_owned(),
        Schedule::ConstantC => "every level uses C channels; resolution halves per level".to_owned(),
    }];
    assumptions.push(match convention {
        Convention::Table => "attention units counted by the closed-form table rows; other layers counted strictly".to_owned(),
        Convention::Strict => "all multiplies and adds counted; transcendental ops excluded".to_owned(),
    });
    assumptions.push(format!("hard patches per sublayer = round({gamma} * P)"));
    Ok(FlopsReport::from_entries(
        Mode::Exact,
        convention,
        schedule,
        (h, w, gamma),
        counter.entries,
        assumptions,
    ))
}

/// Exact count of an instantiated model.
pub fn count_model(model: &CatAir, h: usize, w: usize, gamma: f64, convention: Convention, schedule: Schedule) -> Result<FlopsReport> {
    count_exact(&model.config, h, w, gamma, convention, schedule)
}

/// Closed-form evaluation for `config`: the channel-attention aggregation at `C` plus one
/// routed spatial-attention term per sublayer at that level's resolution.
pub fn formula_report(config: &ModelConfig, h: usize, w: usize, gamma: f64) -> Result<FlopsReport> {
    config.validate()?;
    config.check_input(h, w)?;
    check_gamma(gamma)?;
    let c = config.base_channels;
    let cross = flops_cross_layer(h, w, c);
    let entry = |layer_id: String, kind: &str, category, flops| FlopsEntry {
        layer_id,
        kind: kind.to_owned(),
        category,
        mults: None,
        adds: None,
        flops,
    };
    let mut entries = vec![
        entry("channel.shallow".into(), "se", Category::ChannelAttention, shallow_weight() * flops_se(h, w, c)),
        entry(
            "channel.bottleneck".into(),
            "transposed",
            Category::ChannelAttention,
            bottleneck_weight() * flops_bottleneck(h, w, c),
        ),
    ];
    debug_assert_eq!(entries[0].flops + entries[1].flops, cross.mixed);
    let tau = rational(config.tau)?;
    let g = rational(gamma)?;
    let mut push_spatial = |id: String, level: usize| -> Result<()> {
        let s = flops_spatial(h >> (level - 1), w >> (level - 1), c, tau, config.window, g, config.conv_kernel)?;
        entries.push(entry(id, "spatial", Category::SpatialAttention, s.mixed));
        Ok(())
    };
    for level in 1..=LEVELS {
        for i in 0..config.enc_blocks[level - 1] {
            push_spatial(format!("enc{level}.block{i}.spatial"), level)?;
        }
    }
    for (i, level) in (1..LEVELS).rev().enumerate() {
        for j in 0..config.dec_blocks[i] {
            push_spatial(format!("dec{level}.block{j}.spatial"), level)?;
        }
    }
    let assumptions = vec![
        "every level uses C channels; resolution halves per level".to_owned(),
        "channel attention aggregated with weights 13/2 (SE) and 1/16 (bottleneck)".to_owned(),
        "feed-forward, sampling, prompt and head/tail convolutions are not modelled".to_owned(),
    ];
    Ok(FlopsReport::from_entries(
        Mode::Formula,
        Convention::Table,
        Schedule::ConstantC,
        (h, w, gamma),
        entries,
        assumptions,
    ))
}

/// Parameter swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    Tau,
    Q,
    C,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" | "γ" => Ok(Self::Gamma),
            "tau" | "τ" => Ok(Self::Tau),
            "q" | "window" => Ok(Self::Q),
            "c" | "C" | "channels" => Ok(Self::C),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (expected gamma, tau, q or c)"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gamma => "gamma",
            Self::Tau => "tau",
            Self::Q => "q",
            Self::C => "c",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub formula: Rational,
    pub exact: Rational,
    pub psnr: Option<f64>,
}

/// Parses `start:end:step` or a comma-separated list.
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("invalid range `{spec}` (use a,b,c or start:end:step)"));
    if spec.trim().is_empty() {
        return Err(Error::Empty("sweep range"));
    }
    if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, end, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor();
        if n < 0.0 {
            return Err(Error::Empty("sweep range"));
        }
        Ok((0..=n as usize).map(|i| start + i as f64 * step).collect())
    } else {
        spec.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
    }
}

/// Model configuration and ratio after setting `param = value`.
pub fn apply_sweep(base: &ModelConfig, gamma: f64, param: SweepParam, value: f64) -> Result<(ModelConfig, f64)> {
    let mut cfg = base.clone();
    let mut g = gamma;
    let integral = || -> Result<usize> {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(Error::Config(format!("{param} must be a non-negative integer, got {value}")));
        }
        Ok(value as usize)
    };
    match param {
        SweepParam::Gamma => g = value,
        SweepParam::Tau => cfg.tau = value,
        SweepParam::Q => cfg.window = integral()?,
        SweepParam::C => cfg.base_channels = integral()?,
    }
    cfg.validate()?;
    Ok((cfg, g))
}

/// Formula (closed-form total) and exact (strict count, true channels) FLOPs per sweep value.
pub fn sweep(base: &ModelConfig, h: usize, w: usize, gamma: f64, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep range"));
    }
    values
        .iter()
        .map(|&v| {
            let (cfg, g) = apply_sweep(base, gamma, param, v)?;
            Ok(SweepRow {
                value: v,
                formula: formula_report(&cfg, h, w, g)?.totals.flops,
                exact: count_exact(&cfg, h, w, g, Convention::Strict, Schedule::TrueChannels)?.totals.flops,
                psnr: None,
            })
        })
        .collect()
}

fn fmt_rational(r: &Rational) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{:.3}", to_f64(r))
    }
}

/// CSV with header `param,formula_flops,exact_flops[,psnr]`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let with_psnr = rows.iter().any(|r| r.psnr.is_some());
    let mut out = String::from("param,formula_flops,exact_flops");
    if with_psnr {
        out.push_str(",psnr");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.value, fmt_rational(&r.formula), fmt_rational(&r.exact)));
        if with_psnr {
            match r.psnr {
                Some(p) if p.is_finite() => out.push_str(&format!(",{p:.4}")),
                Some(_) => out.push_str(",inf"),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_total(ops: &[OpCount]) -> Rational {
        ops.iter().filter_map(|o| o.table).map(|(m, a)| m + a).sum()
    }

    #[test]
    fn se_table_rows_reproduce_formula() {
        for c in (2..=96).step_by(2) {
            let ops = count_se(64, c);
            assert_eq!(table_total(&ops), flops_se(8, 8, c), "C={c}");
        }
    }

    #[test]
    fn bottleneck_table_rows_reproduce_formula() {
        for c in 1..=96 {
            let ops = count_transposed(16, c, 1);
            assert_eq!(table_total(&ops), flops_bottleneck(4, 4, c), "C={c}");
        }
    }

    #[test]
    fn strict_counts_exceed_table_counts() {
        let se = count_se(256, 16);
        let strict: Rational = se.iter().map(|o| o.mults + o.adds).sum();
        assert!(strict > table_total(&se));
    }

    #[test]
    fn spatial_table_rows_reproduce_formula() {
        for (q, kv, gamma) in [(8, 12, 0.5), (4, 6, 0.25), (8, 8, 1.0), (4, 8, 0.0)] {
            let s = SpatialShape {
                height: 32,
                width: 32,
                channels: 16,
                window: q,
                kv_window: kv,
                conv_kernel: 3,
                router_global: 8,
                router_hidden: 16,
                hard_patches: hard_count(gamma, (32 / q) * (32 / q)),
            };
            let tau = Rational::new(kv as i128, q as i128);
            let f = flops_spatial(32, 32, 16, tau, q, rational(gamma).unwrap(), 3).unwrap();
            assert_eq!(table_total(&count_spatial(&s)), f.mixed);
        }
    }

    #[test]
    fn parse_ranges() {
        assert_eq!(parse_range("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_range("8, 16,32").unwrap(), vec![8.0, 16.0, 32.0]);
        assert!(parse_range("").is_err());
        assert!(parse_range("1:0:0.5").is_err());
        assert!(parse_range("0:1:0").is_err());
        assert!(parse_range("a,b").is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow {
            value: 0.5,
            formula: Rational::new(3, 2),
            exact: int(7),
            psnr: None,
        }];
        assert_eq!(sweep_csv(&rows), "param,formula_flops,exact_flops\n0.5,1.500,7\n");
    }
}

//! Hierarchical windowed-attention feature extractor.
//!
//! Feature maps are channels-last `[batch, height, width, channels]`. Each
//! stage after the first opens with a 2×2 patch merge; blocks inside a
//! stage alternate plain and shifted windows, starting with plain.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Additive mask value separating tokens that must not attend to each other.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 16,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![1, 2, 4, 8],
            window_size: 2,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Token-grid side of stage `s` (0-based).
    pub fn stage_side(&self, s: usize) -> usize {
        self.image_size / self.patch_size >> s
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() {
            return fail("backbone needs at least one stage".into());
        }
        if self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths has {} stages but num_heads has {}",
                self.depths.len(),
                self.num_heads.len()
            ));
        }
        if [self.image_size, self.in_channels, self.patch_size, self.embed_dim]
            .contains(&0)
            || self.window_size == 0
            || self.mlp_ratio == 0
        {
            return fail("backbone sizes must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid = self.image_size / self.patch_size;
        for s in 0..self.stages() {
            if grid % (1 << s) != 0 {
                return fail(format!("token grid {grid} cannot be halved {s} times"));
            }
            let side = self.stage_side(s);
            if side % self.window_size != 0 {
                return fail(format!(
                    "stage {} side {side} not divisible by window_size {}",
                    s + 1,
                    self.window_size
                ));
            }
            if self.depths[s] == 0 {
                return fail(format!("stage {} has zero depth", s + 1));
            }
            let heads = self.num_heads[s];
            if heads == 0 || self.stage_dim(s) % heads != 0 {
                return fail(format!(
                    "stage {} width {} not divisible by {heads} heads",
                    s + 1,
                    self.stage_dim(s)
                ));
            }
        }
        Ok(())
    }
}

/// Per-stage feature maps `O_1..O_S`, each taken after that stage's blocks.
pub struct BackboneOutput<'g> {
    pub stage_maps: Vec<Var<'g>>,
}

impl<'g> BackboneOutput<'g> {
    pub fn last(&self) -> Var<'g> {
        *self.stage_maps.last().expect("at least one stage")
    }
}

fn dims4(x: &Var<'_>, op: &'static str) -> Result<[usize; 4]> {
    let s = x.shape();
    <[usize; 4]>::try_from(s.as_slice())
        .map_err(|_| Error::dim(op, format!("expected [batch, h, w, c], got {s:?}")))
}

/// Splits `[B, H, W, C]` into non-overlapping `w×w` windows `[B·nW, w², C]`,
/// windows ordered batch-major then row-major.
pub fn window_partition<'g>(x: Var<'g>, w: usize) -> Result<Var<'g>> {
    let [b, h, wd, c] = dims4(&x, "window_partition")?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::Config(format!(
            "map {h}x{wd} not divisible by window {w}"
        )));
    }
    x.reshape(&[b, h / w, w, wd / w, w, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * (h / w) * (wd / w), w * w, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'g>(windows: Var<'g>, h: usize, wd: usize, w: usize) -> Result<Var<'g>> {
    let s = windows.shape();
    if s.len() != 3 || w == 0 || h % w != 0 || wd % w != 0 || s[1] != w * w {
        return Err(Error::dim(
            "window_reverse",
            format!("windows {s:?} do not tile a {h}x{wd} map with window {w}"),
        ));
    }
    let per_image = (h / w) * (wd / w);
    if s[0] % per_image != 0 {
        return Err(Error::dim(
            "window_reverse",
            format!("{} windows is not a multiple of {per_image}", s[0]),
        ));
    }
    let (b, c) = (s[0] / per_image, s[2]);
    windows
        .reshape(&[b, h / w, wd / w, w, w, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, wd, c])
}

/// Toroidal roll of a `[B, H, W, C]` map: output `(i, j)` reads input
/// `(i − dy, j − dx)` modulo the map size. A shift of `(−1, −1)` moves
/// content up-left by one.
pub fn cyclic_shift<'g>(x: Var<'g>, dy: isize, dx: isize) -> Result<Var<'g>> {
    let [b, h, wd, c] = dims4(&x, "cyclic_shift")?;
    if dy.rem_euclid(h as isize) == 0 && dx.rem_euclid(wd as isize) == 0 {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(b * h * wd * c);
    for n in 0..b {
        for i in 0..h {
            let si = (i as isize - dy).rem_euclid(h as isize) as usize;
            for j in 0..wd {
                let sj = (j as isize - dx).rem_euclid(wd as isize) as usize;
                let base = ((n * h + si) * wd + sj) * c;
                index.extend(base..base + c);
            }
        }
    }
    x.gather(Rc::new(index), &[b, h, wd, c])
}

/// Additive mask `[nW, w², w²]` for shifted windows: 0 where both tokens come
/// from the same pre-shift region, [`MASK_NEG`] otherwise.
pub fn shifted_attention_mask(h: usize, wd: usize, w: usize, shift: usize) -> Result<Tensor> {
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::Config(format!(
            "map {h}x{wd} not divisible by window {w}"
        )));
    }
    if shift >= w {
        return Err(Error::Config(format!(
            "shift {shift} must be smaller than window {w}"
        )));
    }
    let n_win = (h / w) * (wd / w);
    let n = w * w;
    if shift == 0 {
        return Ok(Tensor::zeros(&[n_win, n, n]));
    }
    let band = |i: usize, size: usize| -> usize {
        if i < size - w {
            0
        } else if i < size - shift {
            1
        } else {
            2
        }
    };
    let mut data = Vec::with_capacity(n_win * n * n);
    for wy in 0..h / w {
        for wx in 0..wd / w {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (i, j) = (wy * w + t / w, wx * w + t % w);
                    band(i, h) * 3 + band(j, wd)
                })
                .collect();
            for a in &labels {
                for b in &labels {
                    data.push(if a == b { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Tensor::new(vec![n_win, n, n], data)
}

/// Offsets of token pairs inside a window into the `(2w−1)²` bias table.
fn relative_position_index(w: usize) -> Vec<usize> {
    let n = w * w;
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dy = a / w + w - 1 - b / w;
            let dx = a % w + w - 1 - b % w;
            idx.push(dy * span + dx);
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_pos_bias: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    bias_index: Rc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let qkv = Linear::new(b, &format!("{prefix}.qkv"), dim, 3 * dim, true)?;
        let span = 2 * window - 1;
        let rel_pos_bias = b.zeros(format!("{prefix}.rel_pos_bias"), &[span * span, heads])?;
        let proj = Linear::new(b, &format!("{prefix}.proj"), dim, dim, true)?;
        let n = window * window;
        let table_index = relative_position_index(window);
        // Gather layout [heads, n, n] from the [(2w-1)², heads] table.
        let mut bias_index = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            bias_index.extend(table_index.iter().map(|&r| r * heads + h));
        }
        Ok(WindowAttention {
            qkv,
            proj,
            rel_pos_bias,
            dim,
            heads,
            window,
            bias_index: Rc::new(bias_index),
        })
    }

    /// Multi-head attention inside each window of `[B·nW, w², C]` tokens.
    /// `mask`, when given, is `[nW, w², w²]` and repeats over the batch.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        windows: Var<'g>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'g>> {
        let s = windows.shape();
        if s.len() != 3 || s[2] != self.dim || s[1] != self.window * self.window {
            return Err(Error::dim(
                "window_attention",
                format!(
                    "expected [windows, {}, {}], got {s:?}",
                    self.window * self.window,
                    self.dim
                ),
            ));
        }
        let (bw, n, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = c / h;
        let qkv = self
            .qkv
            .forward(g, store, windows)?
            .reshape(&[bw, n, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let parts = qkv.split(0, &[1, 1, 1])?;
        let q = parts[0].reshape(&[bw * h, n, dh])?.scale(1.0 / (dh as f64).sqrt());
        let k_t = parts[1].reshape(&[bw * h, n, dh])?.permute(&[0, 2, 1])?;
        let v = parts[2].reshape(&[bw * h, n, dh])?;

        let bias = g
            .param(store, self.rel_pos_bias)
            .gather(self.bias_index.clone(), &[h, n, n])?;
        let mut logits = q.bmm(k_t)?;
        logits = match mask {
            Some(mask) => {
                let n_win = mask.shape()[0];
                if mask.shape() != [n_win, n, n] || bw % n_win != 0 {
                    return Err(Error::dim(
                        "window_attention",
                        format!("mask {:?} does not fit {bw} windows", mask.shape()),
                    ));
                }
                // Repeat the mask over heads so it tiles [B, nW, h, n, n].
                let per_head = Tensor::from_fn(&[n_win, h, n, n], |i| {
                    let (win, rest) = (i / (h * n * n), i % (n * n));
                    mask.data()[win * n * n + rest]
                });
                logits
                    .reshape(&[bw / n_win, n_win, h, n, n])?
                    .add_tiled(bias)?
                    .add_tiled(g.constant(per_head))?
            }
            None => logits.reshape(&[bw, h, n, n])?.add_tiled(bias)?,
        };
        let rank = logits.shape().len();
        let attn = logits.softmax(rank - 1)?.reshape(&[bw * h, n, n])?;
        let out = attn
            .bmm(v)?
            .reshape(&[bw, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bw, n, c])?;
        self.proj.forward(g, store, out)
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub side: usize,
    pub shift: usize,
    mask: Option<Tensor>,
}

impl SwinBlock {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        dim: usize,
        heads: usize,
        side: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
    ) -> Result<Self> {
        // A map no larger than one window has nothing to shift across.
        let shift = if shifted && side > window { window / 2 } else { 0 };
        let mask = if shift > 0 {
            Some(shifted_attention_mask(side, side, window, shift)?)
        } else {
            None
        };
        Ok(SwinBlock {
            norm1: LayerNorm::new(b, &format!("{prefix}.norm1"), dim)?,
            attn: WindowAttention::new(b, &format!("{prefix}.attn"), dim, heads, window)?,
            norm2: LayerNorm::new(b, &format!("{prefix}.norm2"), dim)?,
            fc1: Linear::new(b, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio, true)?,
            fc2: Linear::new(b, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim, true)?,
            side,
            shift,
            mask,
        })
    }

    pub fn is_shifted(&self) -> bool {
        self.shift > 0
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let [_, h, wd, _] = dims4(&x, "swin_block")?;
        let w = self.attn.window;
        let s = self.shift as isize;
        let mut y = self.norm1.forward(g, store, x)?;
        if s > 0 {
            y = cyclic_shift(y, -s, -s)?;
        }
        let windows = window_partition(y, w)?;
        let attended = self.attn.forward(g, store, windows, self.mask.as_ref())?;
        let mut y = window_reverse(attended, h, wd, w)?;
        if s > 0 {
            y = cyclic_shift(y, s, s)?;
        }
        let x = x.add(y)?;
        let hidden = self.fc1.forward(g, store, self.norm2.forward(g, store, x)?)?.gelu();
        x.add(self.fc2.forward(g, store, hidden)?)
    }
}

/// Concatenates 2×2 neighborhoods to `4C`, normalizes, reduces to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(b: &mut ParamBuilder<'_>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(PatchMerge {
            norm: LayerNorm::new(b, &format!("{prefix}.norm"), 4 * dim)?,
            reduction: Linear::new(b, &format!("{prefix}.reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let [b, h, w, c] = dims4(&x, "patch_merge")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("cannot merge odd map {h}x{w}")));
        }
        // Neighborhood order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
        let merged = x
            .reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 4, 2, 5])?
            .reshape(&[b, h / 2, w / 2, 4 * c])?;
        let normed = self.norm.forward(g, store, merged)?;
        self.reduction.forward(g, store, normed)
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub in_channels: usize,
}

impl PatchEmbed {
    /// `[B, H, W, Cin]` image to `[B, H/p, W/p, embed]` tokens.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, image: Var<'g>) -> Result<Var<'g>> {
        let [b, h, w, c] = dims4(&image, "patch_embed")?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        if c != self.in_channels {
            return Err(Error::dim(
                "patch_embed",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        let patches = image
            .reshape(&[b, h / p, p, w / p, p, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[b, h / p, w / p, p * p * c])?;
        self.proj.forward(g, store, patches)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(b: &mut ParamBuilder<'_>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let embed = PatchEmbed {
            proj: Linear::new(
                b,
                "patch_embed",
                p * p * config.in_channels,
                config.embed_dim,
                true,
            )?,
            patch: p,
            in_channels: config.in_channels,
        };
        let mut stages = Vec::with_capacity(config.stages());
        for s in 0..config.stages() {
            let dim = config.stage_dim(s);
            let merge = if s == 0 {
                None
            } else {
                Some(PatchMerge::new(b, &format!("stage{}.merge", s + 1), dim / 2)?)
            };
            let blocks = (0..config.depths[s])
                .map(|i| {
                    SwinBlock::new(
                        b,
                        &format!("stage{}.block{i}", s + 1),
                        dim,
                        config.num_heads[s],
                        config.stage_side(s),
                        config.window_size,
                        config.mlp_ratio,
                        i % 2 == 1,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { merge, blocks });
        }
        Ok(Backbone {
            config: config.clone(),
            embed,
            stages,
        })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        images: Var<'g>,
    ) -> Result<BackboneOutput<'g>> {
        let [_, h, w, _] = dims4(&images, "backbone")?;
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::dim(
                "backbone",
                format!(
                    "image {h}x{w} does not match configured size {}",
                    self.config.image_size
                ),
            ));
        }
        let mut x = self.embed.forward(g, store, images)?;
        let mut stage_maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, store, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(g, store, x)?;
            }
            stage_maps.push(x);
        }
        Ok(BackboneOutput { stage_maps })
    }
}

#[cfg(test)]
mod tests;

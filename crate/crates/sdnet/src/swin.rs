//! The modified Swin basic block: patch partition, 2x linear embedding, one
//! W-MSA + SW-MSA pair with relative position bias, un-embedding, and the
//! inverse patch partition, mapping an HxWx3 feature to an HxWx3 feature.

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamKind, ParamSpec};
use crate::tensor::{Element, Tensor};

pub const IMG_CHANNELS: usize = 3;
pub const LN_EPS: f64 = 1e-5;
/// Additive logit for masked token pairs; large but finite so softmax stays
/// well defined.
pub const MASK_NEG: f64 = -1e9;

/// Architecture hyperparameters of one basic block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Window side in patches.
    pub window_size: usize,
    pub num_heads: usize,
    /// Token dimension after linear embedding.
    pub embed_dim: usize,
    /// Cyclic shift of the second attention sub-block, in patches.
    pub shift_size: usize,
    /// MLP hidden dim = mlp_ratio * embed_dim.
    pub mlp_ratio: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        // embed_dim = 2 * patch_size^2 * 3: the embedding doubles the token.
        BlockConfig {
            patch_size: 3,
            window_size: 7,
            num_heads: 3,
            embed_dim: 54,
            shift_size: 3,
            mlp_ratio: 4,
        }
    }
}

impl BlockConfig {
    /// Test-scale config: 9x9 inputs, window 3, embed dim 18.
    pub fn tiny() -> Self {
        BlockConfig {
            patch_size: 3,
            window_size: 3,
            num_heads: 3,
            embed_dim: 18,
            shift_size: 1,
            mlp_ratio: 4,
        }
    }

    pub fn token_dim(&self) -> usize {
        IMG_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.shift_size >= self.window_size {
            return Err(Error::Config(format!(
                "shift_size {} must be < window_size {}",
                self.shift_size, self.window_size
            )));
        }
        if self.patch_size == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch/window/mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Check an input of `h x w` pixels divides into patches and windows.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                "block",
                format!("input {h}x{w} not divisible by patch size {p}"),
            ));
        }
        let m = self.window_size;
        if (h / p) % m != 0 || (w / p) % m != 0 {
            return Err(Error::shape(
                "block",
                format!("patch grid {}x{} not divisible by window size {m}", h / p, w / p),
            ));
        }
        Ok(())
    }

    /// Smallest valid input side: patch_size * window_size.
    pub fn min_side(&self) -> usize {
        self.patch_size * self.window_size
    }
}

/// Split an HxWx3 image into flattened non-overlapping pxp patches.
/// Patch vectors are flattened in (row, col, channel) order; tokens follow
/// raster order over the patch grid.
pub fn patch_partition<E: Element>(x: &Tensor<E>, p: usize) -> Result<Tensor<E>> {
    if x.ndim() != 3 || x.shape()[2] != IMG_CHANNELS {
        return Err(Error::shape("patch_partition", format!("expected [H,W,3], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patch_partition",
            format!("{h}x{w} not divisible by patch size {p}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[gh, p, gw, p, IMG_CHANNELS])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[gh * gw, p * p * IMG_CHANNELS])
}

/// Exact inverse of [`patch_partition`].
pub fn unpatch_partition<E: Element>(tokens: &Tensor<E>, p: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("unpatch_partition", format!("{h}x{w} vs patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.ndim() != 2
        || tokens.shape()[0] != gh * gw
        || tokens.shape()[1] != p * p * IMG_CHANNELS
    {
        return Err(Error::shape(
            "unpatch_partition",
            format!("tokens {:?} vs expected [{}, {}]", tokens.shape(), gh * gw, p * p * IMG_CHANNELS),
        ));
    }
    tokens
        .reshape(&[gh, gw, p, p, IMG_CHANNELS])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[h, w, IMG_CHANNELS])
}

/// Cut a [Gh, Gw, C] token grid into non-overlapping MxM windows:
/// [num_windows, M*M, C], windows in raster order.
pub fn window_partition<E: Element>(grid: &Tensor<E>, m: usize) -> Result<Tensor<E>> {
    if grid.ndim() != 3 {
        return Err(Error::shape("window_partition", format!("expected [G,G,C], got {:?}", grid.shape())));
    }
    let (gh, gw, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if m == 0 || gh % m != 0 || gw % m != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("grid {gh}x{gw} not divisible by window size {m}"),
        ));
    }
    grid.reshape(&[gh / m, m, gw / m, m, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[(gh / m) * (gw / m), m * m, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<E: Element>(wins: &Tensor<E>, m: usize, gh: usize, gw: usize) -> Result<Tensor<E>> {
    if wins.ndim() != 3 || m == 0 || gh % m != 0 || gw % m != 0 {
        return Err(Error::shape("window_reverse", format!("{:?} vs {gh}x{gw}/{m}", wins.shape())));
    }
    let c = wins.shape()[2];
    if wins.shape()[0] != (gh / m) * (gw / m) || wins.shape()[1] != m * m {
        return Err(Error::shape(
            "window_reverse",
            format!("windows {:?} vs grid {gh}x{gw} window {m}", wins.shape()),
        ));
    }
    wins.reshape(&[gh / m, gw / m, m, m, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[gh, gw, c])
}

/// Relative-coordinate index into the (2M-1)^2 bias table for every ordered
/// token pair of an MxM window. Row-major [M^2, M^2], flattened.
pub fn relative_index_map(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m * m * m * m);
    for yi in 0..m {
        for xi in 0..m {
            for yj in 0..m {
                for xj in 0..m {
                    let dy = yi as isize - yj as isize + (m as isize - 1);
                    let dx = xi as isize - xj as isize + (m as isize - 1);
                    idx.push(dy as usize * span + dx as usize);
                }
            }
        }
    }
    idx
}

/// Additive attention mask for shifted windows on a [Gh, Gw] patch grid
/// rolled by (-s, -s): token pairs that originate from different pre-shift
/// regions get `MASK_NEG`, same-region pairs get 0. Shape
/// [num_windows, M^2, M^2].
pub fn build_shift_mask<E: Element>(gh: usize, gw: usize, m: usize, s: usize) -> Result<Tensor<E>> {
    if s == 0 || s >= m {
        return Err(Error::Contract(format!("shift mask needs 0 < s < M, got s={s}, M={m}")));
    }
    if gh % m != 0 || gw % m != 0 || gh < m || gw < m {
        return Err(Error::shape("build_shift_mask", format!("grid {gh}x{gw} vs window {m}")));
    }
    // Region label along one axis in rolled coordinates: rows [0, G-M) are
    // whole untouched windows, [G-M, G-s) is wrapped-in contiguous content,
    // [G-s, G) is content carried over from the top/left edge.
    let label = |pos: usize, g: usize| -> usize {
        if pos < g - m {
            0
        } else if pos < g - s {
            1
        } else {
            2
        }
    };
    let (wh, ww) = (gh / m, gw / m);
    let neg = E::from_f64(MASK_NEG);
    let mut data = vec![E::zero(); wh * ww * m * m * m * m];
    let mut off = 0;
    for wy in 0..wh {
        for wx in 0..ww {
            for ti in 0..m * m {
                let ry = label(wy * m + ti / m, gh) * 3 + label(wx * m + ti % m, gw);
                for tj in 0..m * m {
                    let rj = label(wy * m + tj / m, gh) * 3 + label(wx * m + tj % m, gw);
                    if ry != rj {
                        data[off] = neg;
                    }
                    off += 1;
                }
            }
        }
    }
    Tensor::from_vec(data, &[wh * ww, m * m, m * m])
}

/// Per-window multi-head attention parameter handles.
pub struct AttentionParams<'a, E: Element> {
    pub wq: &'a Tensor<E>,
    pub bq: &'a Tensor<E>,
    pub wk: &'a Tensor<E>,
    pub bk: &'a Tensor<E>,
    pub wv: &'a Tensor<E>,
    pub bv: &'a Tensor<E>,
    pub wo: &'a Tensor<E>,
    pub bo: &'a Tensor<E>,
    /// Learnable bias table, [(2M-1)^2, heads].
    pub bias_table: &'a Tensor<E>,
}

impl<'a, E: Element> AttentionParams<'a, E> {
    pub fn from_store(params: &'a BoundParams<E>, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            wq: params.get(&format!("{prefix}.wq"))?,
            bq: params.get(&format!("{prefix}.bq"))?,
            wk: params.get(&format!("{prefix}.wk"))?,
            bk: params.get(&format!("{prefix}.bk"))?,
            wv: params.get(&format!("{prefix}.wv"))?,
            bv: params.get(&format!("{prefix}.bv"))?,
            wo: params.get(&format!("{prefix}.wo"))?,
            bo: params.get(&format!("{prefix}.bo"))?,
            bias_table: params.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// Windowed multi-head self-attention over [num_windows, M^2, C] tokens
/// (a bare [M^2, C] window is accepted). Per head: softmax(QK^T/sqrt(d) +
/// B + mask) V, heads concatenated and projected.
pub fn window_attention<E: Element>(
    x: &Tensor<E>,
    p: &AttentionParams<'_, E>,
    cfg: &BlockConfig,
    mask: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let squeeze = x.ndim() == 2;
    let x3;
    let x = if squeeze {
        x3 = x.reshape(&[1, x.shape()[0], x.shape()[1]])?;
        &x3
    } else {
        x
    };
    if x.ndim() != 3 {
        return Err(Error::shape("window_attention", format!("tokens {:?}", x.shape())));
    }
    let (nw, m2, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = cfg.window_size;
    let (h, d) = (cfg.num_heads, cfg.head_dim());
    if m2 != m * m || c != cfg.embed_dim {
        return Err(Error::shape(
            "window_attention",
            format!("tokens {:?} vs window {m}, embed {}", x.shape(), cfg.embed_dim),
        ));
    }
    let span = 2 * m - 1;
    if p.bias_table.shape() != [span * span, h] {
        return Err(Error::shape(
            "window_attention",
            format!("bias table {:?} vs [{}, {h}]", p.bias_table.shape(), span * span),
        ));
    }

    let flat = x.reshape(&[nw * m2, c])?;
    let split_heads = |t: &Tensor<E>| -> Result<Tensor<E>> {
        t.reshape(&[nw, m2, h, d])?.permute(&[0, 2, 1, 3])
    };
    let q = split_heads(&flat.linear(p.wq, p.bq)?)?;
    let k = split_heads(&flat.linear(p.wk, p.bk)?)?;
    let v = split_heads(&flat.linear(p.wv, p.bv)?)?;

    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let mut logits = q.matmul(&k.permute(&[0, 1, 3, 2])?)?.scale(scale)?; // [nw,h,M2,M2]

    // relative position bias, broadcast over windows
    let bias = p
        .bias_table
        .gather_rows(&relative_index_map(m))?
        .reshape(&[m2, m2, h])?
        .permute(&[2, 0, 1])?;
    logits = logits.add(&bias)?;

    if let Some(mask) = mask {
        if mask.shape() != [nw, m2, m2] {
            return Err(Error::shape(
                "window_attention",
                format!("mask {:?} vs [{nw}, {m2}, {m2}]", mask.shape()),
            ));
        }
        // tile per head
        let mut tiled = Vec::with_capacity(nw * h * m2 * m2);
        for w in 0..nw {
            let win = &mask.data()[w * m2 * m2..(w + 1) * m2 * m2];
            for _ in 0..h {
                tiled.extend_from_slice(win);
            }
        }
        logits = logits.add(&Tensor::from_vec(tiled, &[nw, h, m2, m2])?)?;
    }

    let attn = logits.softmax(3)?;
    let out = attn
        .matmul(&v)? // [nw,h,M2,d]
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw * m2, c])?
        .linear(p.wo, p.bo)?;
    let out = out.reshape(&[nw, m2, c])?;
    if squeeze {
        out.reshape(&[m2, c])
    } else {
        Ok(out)
    }
}

/// Parameter specs for one basic block under `prefix`.
pub fn block_param_specs(prefix: &str, cfg: &BlockConfig) -> Vec<ParamSpec> {
    use ParamKind::*;
    let t = cfg.token_dim();
    let c = cfg.embed_dim;
    let hid = cfg.mlp_ratio * c;
    let span = 2 * cfg.window_size - 1;
    let h = cfg.num_heads;
    let mut specs = vec![
        ParamSpec::new(format!("{prefix}.embed.w"), vec![t, c], Weight),
        ParamSpec::new(format!("{prefix}.embed.b"), vec![c], Bias),
    ];
    for sub in ["a", "b"] {
        specs.extend([
            ParamSpec::new(format!("{prefix}.{sub}.norm1.g"), vec![c], Gain),
            ParamSpec::new(format!("{prefix}.{sub}.norm1.b"), vec![c], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.attn.wq"), vec![c, c], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.attn.bq"), vec![c], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.attn.wk"), vec![c, c], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.attn.bk"), vec![c], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.attn.wv"), vec![c, c], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.attn.bv"), vec![c], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.attn.wo"), vec![c, c], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.attn.bo"), vec![c], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.attn.bias"), vec![span * span, h], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.norm2.g"), vec![c], Gain),
            ParamSpec::new(format!("{prefix}.{sub}.norm2.b"), vec![c], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.mlp.w1"), vec![c, hid], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.mlp.b1"), vec![hid], Bias),
            ParamSpec::new(format!("{prefix}.{sub}.mlp.w2"), vec![hid, c], Weight),
            ParamSpec::new(format!("{prefix}.{sub}.mlp.b2"), vec![c], Bias),
        ]);
    }
    specs.extend([
        ParamSpec::new(format!("{prefix}.unembed.w"), vec![c, t], Weight),
        ParamSpec::new(format!("{prefix}.unembed.b"), vec![t], Bias),
    ]);
    specs
}

/// One pre-norm transformer sub-block: LN -> windowed attention (optionally
/// shifted/masked) -> residual, LN -> MLP -> residual. Tokens stay [N, C].
fn attention_sub_block<E: Element>(
    tokens: &Tensor<E>,
    params: &BoundParams<E>,
    prefix: &str,
    cfg: &BlockConfig,
    gh: usize,
    gw: usize,
    shifted: bool,
) -> Result<Tensor<E>> {
    let c = cfg.embed_dim;
    let m = cfg.window_size;
    let s = cfg.shift_size;
    let apply_shift = shifted && s > 0;

    let normed = tokens.layer_norm(
        params.get(&format!("{prefix}.norm1.g"))?,
        params.get(&format!("{prefix}.norm1.b"))?,
        LN_EPS,
    )?;
    let mut grid = normed.reshape(&[gh, gw, c])?;
    let mask = if apply_shift {
        grid = grid.roll2d(-(s as isize), -(s as isize))?;
        Some(build_shift_mask::<E>(gh, gw, m, s)?)
    } else {
        None
    };
    let wins = window_partition(&grid, m)?;
    let attn_params = AttentionParams::from_store(params, &format!("{prefix}.attn"))?;
    let attended = window_attention(&wins, &attn_params, cfg, mask.as_ref())?;
    let mut grid = window_reverse(&attended, m, gh, gw)?;
    if apply_shift {
        grid = grid.roll2d(s as isize, s as isize)?;
    }
    let tokens = tokens.add(&grid.reshape(&[gh * gw, c])?)?;

    let normed = tokens.layer_norm(
        params.get(&format!("{prefix}.norm2.g"))?,
        params.get(&format!("{prefix}.norm2.b"))?,
        LN_EPS,
    )?;
    let hidden = normed
        .linear(params.get(&format!("{prefix}.mlp.w1"))?, params.get(&format!("{prefix}.mlp.b1"))?)?
        .gelu()?;
    let mlp_out =
        hidden.linear(params.get(&format!("{prefix}.mlp.w2"))?, params.get(&format!("{prefix}.mlp.b2"))?)?;
    tokens.add(&mlp_out)
}

/// Full basic block: patch partition -> linear embed -> W-MSA sub-block ->
/// SW-MSA sub-block -> linear un-embed -> unpatch. Output shape equals
/// input shape.
pub fn basic_block_forward<E: Element>(
    x: &Tensor<E>,
    params: &BoundParams<E>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor<E>> {
    if x.ndim() != 3 || x.shape()[2] != IMG_CHANNELS {
        return Err(Error::shape("basic_block", format!("expected [H,W,3], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    cfg.validate_input(h, w)?;
    let p = cfg.patch_size;
    let (gh, gw) = (h / p, w / p);

    let tokens = patch_partition(x, p)?;
    let tokens = tokens.linear(
        params.get(&format!("{prefix}.embed.w"))?,
        params.get(&format!("{prefix}.embed.b"))?,
    )?;
    let tokens = attention_sub_block(&tokens, params, &format!("{prefix}.a"), cfg, gh, gw, false)?;
    let tokens = attention_sub_block(&tokens, params, &format!("{prefix}.b"), cfg, gh, gw, true)?;
    let tokens = tokens.linear(
        params.get(&format!("{prefix}.unembed.w"))?,
        params.get(&format!("{prefix}.unembed.b"))?,
    )?;
    unpatch_partition(&tokens, p, h, w)
}

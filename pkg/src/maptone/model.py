"""Variable-width translator: patch embedding, windowed local attention with
directional product relative position bias, global-token aggregation and
broadcast, channel-wise rectangular-bin pooling, plus the deconvolutional
decoder and the convolutional discriminator.

A weighting map of 20 x Y_i (Y_i up to 12,000) is cut into 1x20 patches,
run through four attention layers whose bin schedule contracts the token
grid to 8x8, and decoded to a 64x64 spectrogram.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_x: int = 1
    patch_y: int = 20
    n_layers: int = 4
    n_global: int = 8                  # T anchor tokens
    window: int = 64                   # local attention span, in tokens
    max_grid_x: int = 20               # M_x
    max_grid_y: int = 600              # M_y
    bin_schedule: tuple = ((20, 256), (20, 64), (16, 16), (8, 8))
    ffn_mult: int = 4
    utterance_channels: int = 4
    ln_eps: float = 1e-5

    @property
    def token_dim(self) -> int:
        return self.patch_x * self.patch_y

    @property
    def max_width(self) -> int:
        return self.max_grid_y * self.patch_y

    @property
    def latent_shape(self) -> tuple:
        bx, by = self.bin_schedule[-1]
        return (bx, by, self.token_dim)


@dataclass
class PatchGrid:
    tokens: np.ndarray                 # (N, d), row-major over (x, y)
    n_x: int
    n_y: int
    coords_x: np.ndarray
    coords_y: np.ndarray
    valid: np.ndarray                  # False only for fully-padded patches


def patchify(h: np.ndarray, patch_x: int, patch_y: int) -> PatchGrid:
    """Zero-pad bottom/right and flatten each patch to a d-vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] == 0:
        raise ModelError(f"weighting map must be 2D with >=1 column, "
                         f"got shape {h.shape}")
    rows, cols = h.shape
    n_x = -(-rows // patch_x)
    n_y = -(-cols // patch_y)
    padded = np.zeros((n_x * patch_x, n_y * patch_y), dtype=h.dtype)
    padded[:rows, :cols] = h
    tokens = (padded.reshape(n_x, patch_x, n_y, patch_y)
              .transpose(0, 2, 1, 3)
              .reshape(n_x * n_y, patch_x * patch_y))
    cx = np.repeat(np.arange(n_x), n_y)
    cy = np.tile(np.arange(n_y), n_x)
    valid = (cx * patch_x < rows) & (cy * patch_y < cols)
    return PatchGrid(tokens=tokens, n_x=n_x, n_y=n_y,
                     coords_x=cx, coords_y=cy, valid=valid)


# -- relative position bias ---------------------------------------------------

def table_extents(table) -> tuple:
    rows, cols = table.shape
    if rows % 2 == 0 or cols % 2 == 0:
        raise ModelError(f"bias table dims must be odd, got {table.shape}")
    return (rows + 1) // 2, (cols + 1) // 2


def _bias_flat_index(cx_a, cy_a, cx_b, cy_b, mx: int, my: int) -> np.ndarray:
    dx = cx_a[..., :, None] - cx_b[..., None, :]
    dy = cy_a[..., :, None] - cy_b[..., None, :]
    if np.any(np.abs(dx) >= mx) or np.any(np.abs(dy) >= my):
        bad = np.argwhere((np.abs(dx) >= mx) | (np.abs(dy) >= my))[0]
        raise ModelError(f"relative offset out of table range for token pair "
                         f"{tuple(bad)}: dx={int(dx[tuple(bad)])}, "
                         f"dy={int(dy[tuple(bad)])} (bounds {mx}, {my})")
    return (dx + mx - 1) * (2 * my - 1) + (dy + my - 1)


def rel_bias(coords_a, coords_b, table: Tensor) -> Tensor:
    """Bias matrix R[a, b] = table[dx_ab + M_x - 1, dy_ab + M_y - 1].

    Directional: swapping a and b indexes an independent table entry.
    """
    ax, ay = (np.asarray(c) for c in coords_a)
    bx, by = (np.asarray(c) for c in coords_b)
    mx, my = table_extents(table)
    idx = _bias_flat_index(ax, ay, bx, by, mx, my)
    return T.gather(table, idx)


_IDX_CACHE: OrderedDict = OrderedDict()
_IDX_CACHE_CAP = 16


def _window_bias_indices(n_x: int, n_y: int, window: int, mx: int, my: int):
    """Flat bias indices for all padded windows, (n_win, w, w); cached."""
    key = (n_x, n_y, window, mx, my)
    got = _IDX_CACHE.get(key)
    if got is not None:
        _IDX_CACHE.move_to_end(key)
        return got
    n = n_x * n_y
    cx = np.repeat(np.arange(n_x), n_y)
    cy = np.tile(np.arange(n_y), n_x)
    n_pad = (-n) % window
    if n_pad:
        cx = np.concatenate([cx, np.full(n_pad, cx[-1])])
        cy = np.concatenate([cy, np.full(n_pad, cy[-1])])
    wx = cx.reshape(-1, window)
    wy = cy.reshape(-1, window)
    idx = _bias_flat_index(wx, wy, wx, wy, mx, my)
    _IDX_CACHE[key] = idx
    if len(_IDX_CACHE) > _IDX_CACHE_CAP:
        _IDX_CACHE.popitem(last=False)
    return idx


# -- attention cores ----------------------------------------------------------

def _masked(logits: Tensor, key_invalid: np.ndarray | None) -> Tensor:
    if key_invalid is None or not key_invalid.any():
        return logits
    mask = np.where(key_invalid, -1e9, 0.0)
    shape = (1,) * (len(logits.shape) - 1) + (mask.size,)
    return logits + mask.reshape(shape)


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, bias_idx: np.ndarray,
                       table: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Per-window SoftMax((QK^T + R)/sqrt(d)) V over consecutive-token windows.

    Inputs are full (N, d) projections; windows (and the shrunken tail) are
    zero-padded to a common width and padded keys are masked out.
    """
    n, d = q.shape
    n_win, w, _ = bias_idx.shape
    n_pad = n_win * w - n
    key_invalid = np.zeros(n_win * w, dtype=bool)
    if valid is not None:
        key_invalid[:n] = ~valid
    if n_pad:
        key_invalid[n:] = True
        zeros = Tensor(np.zeros((n_pad, d)), dtype=q.dtype)
        q = T.concat([q, zeros])
        k = T.concat([k, zeros])
        v = T.concat([v, zeros])
    qw = q.reshape(n_win, w, d)
    kw = k.reshape(n_win, w, d)
    vw = v.reshape(n_win, w, d)
    logits = T.matmul(qw, T.transpose(kw, (0, 2, 1))) + T.gather(table, bias_idx)
    logits = logits * (1.0 / np.sqrt(d))
    if key_invalid.any():
        mask = np.where(key_invalid.reshape(n_win, 1, w), -1e9, 0.0)
        logits = logits + mask
    out = T.matmul(T.softmax(logits, axis=-1), vw)
    return out.reshape(n_win * w, d)[:n]


def aggregate_attention(g_q: Tensor, k: Tensor, v: Tensor, bias: Tensor,
                        valid: np.ndarray | None = None) -> Tensor:
    """Anchor tokens gather context: SoftMax((G_q K^T + b)/sqrt(d)) V."""
    d = k.shape[-1]
    logits = T.matmul(g_q, T.transpose(k, (1, 0))) + bias.reshape(-1, 1)
    logits = logits * (1.0 / np.sqrt(d))
    logits = _masked(logits, None if valid is None else ~valid)
    return T.matmul(T.softmax(logits, axis=-1), v)


def broadcast_attention(q: Tensor, k_g: Tensor, v_g: Tensor, bias: Tensor) -> Tensor:
    """Every token reads the anchors: SoftMax((Q K_g^T + b)/sqrt(d)) V_g."""
    d = q.shape[-1]
    logits = T.matmul(q, T.transpose(k_g, (1, 0))) + bias.reshape(1, -1)
    logits = logits * (1.0 / np.sqrt(d))
    return T.matmul(T.softmax(logits, axis=-1), v_g)


@dataclass
class AttnParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    table: Tensor


def local_attention(tokens: Tensor | np.ndarray, params: AttnParams, window: int,
                    coords: tuple | None = None,
                    valid: np.ndarray | None = None) -> Tensor:
    """Standalone windowed local attention over a token matrix.

    coords defaults to a single-row layout (x=0, y=0..N-1).
    """
    tokens = T.as_tensor(tokens)
    n = tokens.shape[0]
    if coords is None:
        cx, cy = np.zeros(n, dtype=int), np.arange(n)
    else:
        cx, cy = (np.asarray(c) for c in coords)
    mx, my = table_extents(params.table)
    n_pad = (-n) % window
    if n_pad:
        cx = np.concatenate([cx, np.full(n_pad, cx[-1])])
        cy = np.concatenate([cy, np.full(n_pad, cy[-1])])
    idx = _bias_flat_index(cx.reshape(-1, window), cy.reshape(-1, window),
                           cx.reshape(-1, window), cy.reshape(-1, window), mx, my)
    q = T.matmul(tokens, params.wq)
    k = T.matmul(tokens, params.wk)
    v = T.matmul(tokens, params.wv)
    return windowed_attention(q, k, v, idx, params.table, valid)


def global_aggregate(g_tokens: Tensor, tokens: Tensor | np.ndarray,
                     params: AttnParams, bias: Tensor | None = None,
                     valid: np.ndarray | None = None) -> Tensor:
    """Project and aggregate: anchors attend over all local tokens."""
    tokens = T.as_tensor(tokens)
    if bias is None:
        bias = Tensor(np.zeros(g_tokens.shape[0]))
    g_q = T.matmul(g_tokens, params.wq)
    k = T.matmul(tokens, params.wk)
    v = T.matmul(tokens, params.wv)
    return aggregate_attention(g_q, k, v, bias, valid)


def global_broadcast(tokens: Tensor | np.ndarray, g_hat: Tensor,
                     params: AttnParams, bias: Tensor | None = None) -> Tensor:
    """Project and broadcast: every token attends over the aggregated anchors."""
    tokens = T.as_tensor(tokens)
    if bias is None:
        bias = Tensor(np.zeros(g_hat.shape[0]))
    q = T.matmul(tokens, params.wq)
    k_g = T.matmul(g_hat, params.wk)
    v_g = T.matmul(g_hat, params.wv)
    return broadcast_attention(q, k_g, v_g, bias)


def sspp(feature_map: Tensor | np.ndarray, out_bins: tuple) -> Tensor:
    """Channel-wise average pooling onto a fixed bin grid."""
    return T.avg_pool_bins(T.as_tensor(feature_map), out_bins)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return (xc / T.sqrt(var + eps)) * gain + bias


# -- parameter helpers --------------------------------------------------------

def _uniform_init(rng, shape, fan_in) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _trunc_normal_init(rng, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Module:
    """Flat named-parameter container."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        p = Tensor(data, requires_grad=True)
        self._params[name] = p
        return p

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def load_state(self, state: dict, prefix: str = "") -> None:
        for name, p in self._params.items():
            key = prefix + name
            if key not in state:
                raise ModelError(f"checkpoint missing parameter {key}")
            arr = np.asarray(state[key])
            if arr.shape != p.shape:
                raise ModelError(f"checkpoint parameter {key} has shape "
                                 f"{arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.dtype)


class PltLayer(Module):
    """One translator layer: local + global attention, FFN, bin pooling."""

    def __init__(self, cfg: ModelConfig, out_bins: tuple, rng, prefix: str = ""):
        super().__init__()
        self.cfg = cfg
        self.out_bins = tuple(out_bins)
        d = cfg.token_dim
        a = prefix
        self.wq = self._add(a + "wq", _uniform_init(rng, (d, d), d))
        self.wk = self._add(a + "wk", _uniform_init(rng, (d, d), d))
        self.wv = self._add(a + "wv", _uniform_init(rng, (d, d), d))
        self.wo = self._add(a + "wo", _uniform_init(rng, (d, d), d))
        self.table = self._add(a + "bias_table", _trunc_normal_init(
            rng, (2 * cfg.max_grid_x - 1, 2 * cfg.max_grid_y - 1)))
        self.g_tokens = self._add(a + "g_tokens",
                                  _trunc_normal_init(rng, (cfg.n_global, d)))
        self.b_agg = self._add(a + "b_agg", np.zeros(cfg.n_global))
        self.b_bc = self._add(a + "b_bc", np.zeros(cfg.n_global))
        self.ln1_g = self._add(a + "ln1.gain", np.ones(d))
        self.ln1_b = self._add(a + "ln1.bias", np.zeros(d))
        self.ln2_g = self._add(a + "ln2.gain", np.ones(d))
        self.ln2_b = self._add(a + "ln2.bias", np.zeros(d))
        hid = cfg.ffn_mult * d
        self.ffn_w1 = self._add(a + "ffn.w1", _uniform_init(rng, (d, hid), d))
        self.ffn_b1 = self._add(a + "ffn.b1", np.zeros(hid))
        self.ffn_w2 = self._add(a + "ffn.w2", _uniform_init(rng, (hid, d), hid))
        self.ffn_b2 = self._add(a + "ffn.b2", np.zeros(d))

    def forward(self, tokens: Tensor, n_x: int, n_y: int,
                valid: np.ndarray | None = None):
        cfg = self.cfg
        d = cfg.token_dim
        normed = layer_norm(tokens, self.ln1_g, self.ln1_b, cfg.ln_eps)
        q = T.matmul(normed, self.wq)
        k = T.matmul(normed, self.wk)
        v = T.matmul(normed, self.wv)

        idx = _window_bias_indices(n_x, n_y, cfg.window,
                                   cfg.max_grid_x, cfg.max_grid_y)
        h_local = windowed_attention(q, k, v, idx, self.table, valid)

        g_q = T.matmul(self.g_tokens, self.wq)
        g_hat = aggregate_attention(g_q, k, v, self.b_agg, valid)
        k_g = T.matmul(g_hat, self.wk)
        v_g = T.matmul(g_hat, self.wv)
        h_global = broadcast_attention(q, k_g, v_g, self.b_bc)

        x = tokens + T.matmul(h_local + h_global, self.wo)
        f = layer_norm(x, self.ln2_g, self.ln2_b, cfg.ln_eps)
        f = T.matmul(T.relu(T.matmul(f, self.ffn_w1) + self.ffn_b1),
                     self.ffn_w2) + self.ffn_b2
        x = x + f

        bx, by = self.out_bins
        pooled = sspp(x.reshape(n_x, n_y, d), self.out_bins)
        return pooled.reshape(bx * by, d), bx, by


class Encoder(Module):
    """Four cascaded layers contracting any input grid to the latent grid."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.layers = []
        for i, bins in enumerate(cfg.bin_schedule):
            layer = PltLayer(cfg, bins, rng, prefix=f"enc.l{i}.")
            self.layers.append(layer)
            self._params.update(layer.parameters())

    def forward(self, h: np.ndarray) -> Tensor:
        cfg = self.cfg
        h = np.asarray(h)
        if h.shape[0] != cfg.max_grid_x * cfg.patch_x:
            raise ModelError(f"weighting map must have "
                             f"{cfg.max_grid_x * cfg.patch_x} rows, "
                             f"got {h.shape[0]}")
        if h.shape[1] > cfg.max_width:
            raise ModelError(f"width {h.shape[1]} exceeds bias-table bound "
                             f"{cfg.max_width}")
        grid = patchify(h, cfg.patch_x, cfg.patch_y)
        tokens = Tensor(grid.tokens)
        n_x, n_y = grid.n_x, grid.n_y
        valid = None if grid.valid.all() else grid.valid
        for layer in self.layers:
            tokens, n_x, n_y = layer.forward(tokens, n_x, n_y, valid)
            valid = None
        d = cfg.token_dim
        return tokens.reshape(n_x, n_y, d)


class Decoder(Module):
    """Three stride-2 transposed convolutions, 8x8x20 -> sigmoid 64x64."""

    CHANNELS = (20, 32, 16, 1)

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        ch = self.CHANNELS
        for i in range(3):
            fan_in = ch[i] * 16
            self._add(f"dec.conv{i}.w", _uniform_init(
                rng, (ch[i], ch[i + 1], 4, 4), fan_in))
            self._add(f"dec.conv{i}.b", np.zeros(ch[i + 1]))

    def forward(self, latent: Tensor) -> Tensor:
        """latent (8,8,20) -> (64,64), or batched (B,8,8,20) -> (B,64,64)."""
        single = len(latent.shape) == 3
        if single:
            latent = latent.reshape(1, *latent.shape)
        x = T.transpose(latent, (0, 3, 1, 2))
        for i in range(3):
            x = T.conv_transpose2d(x, self._params[f"dec.conv{i}.w"],
                                   self._params[f"dec.conv{i}.b"],
                                   stride=2, padding=1)
            if i < 2:
                x = T.relu(x)
        out = T.sigmoid(x)
        b = out.shape[0]
        out = out.reshape(b, out.shape[2], out.shape[3])
        return out.reshape(out.shape[1], out.shape[2]) if single else out


class Discriminator(Module):
    """Three stride-2 convolutions then two fully connected layers."""

    CHANNELS = (1, 16, 32, 64)

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        ch = self.CHANNELS
        for i in range(3):
            fan_in = ch[i] * 16
            self._add(f"disc.conv{i}.w", _uniform_init(
                rng, (ch[i + 1], ch[i], 4, 4), fan_in))
            self._add(f"disc.conv{i}.b", np.zeros(ch[i + 1]))
        self._add("disc.fc0.w", _uniform_init(rng, (4096, 128), 4096))
        self._add("disc.fc0.b", np.zeros(128))
        self._add("disc.fc1.w", _uniform_init(rng, (128, 1), 128))
        self._add("disc.fc1.b", np.zeros(1))

    def forward(self, grids: Tensor) -> Tensor:
        """grids (B,64,64) or (64,64) -> probabilities (B,) or scalar ()."""
        single = len(grids.shape) == 2
        if single:
            grids = grids.reshape(1, *grids.shape)
        b = grids.shape[0]
        x = grids.reshape(b, 1, grids.shape[1], grids.shape[2])
        for i in range(3):
            x = T.relu(T.conv2d(x, self._params[f"disc.conv{i}.w"],
                                self._params[f"disc.conv{i}.b"],
                                stride=2, padding=1))
        x = x.reshape(b, 4096)
        x = T.relu(T.matmul(x, self._params["disc.fc0.w"]) + self._params["disc.fc0.b"])
        x = T.matmul(x, self._params["disc.fc1.w"]) + self._params["disc.fc1.b"]
        out = T.sigmoid(x).reshape(b)
        return out.reshape(()) if single else out


class Translator(Module):
    """Encoder + decoder; the only part used at inference time."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        rng = T.make_rng(seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        self._params.update(self.encoder.parameters())
        self._params.update(self.decoder.parameters())

    def forward(self, h: np.ndarray) -> tuple[Tensor, Tensor]:
        latent = self.encoder.forward(h)
        return self.decoder.forward(latent), latent

    def forward_batch(self, hs) -> tuple[Tensor, Tensor]:
        latents = T.stack([self.encoder.forward(h) for h in hs])
        return self.decoder.forward(latents), latents

    def translate(self, h: np.ndarray) -> np.ndarray:
        return self.forward(h)[0].data

    def utterance_part(self, latent: Tensor) -> Tensor:
        """First channels of the latent, flattened to a vector (per sample)."""
        u = self.cfg.utterance_channels
        if len(latent.shape) == 3:
            return latent[:, :, :u].reshape(-1)
        b = latent.shape[0]
        return latent[:, :, :, :u].reshape(b, -1)

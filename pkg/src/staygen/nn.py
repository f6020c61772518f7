"""Neural sequence model kernel: embedding, stacked LSTMs, attention
over skip connections, softmax output. Gradients are hand-derived
backpropagation through time for this fixed architecture.

Layout and numeric conventions
------------------------------
Batches are (B, L) int32 token windows, left-padded with token 0 and
accompanied by a lengths vector; padded positions are masked out of the
recurrence and the attention softmax. Internally activations are kept
time-major (L, B, features) so per-timestep slices are contiguous.

Gate blocks are packed [input, forget, output, candidate]. All four
pre-activations share a single tanh pass: with half-scaled weights for
the sigmoid gates, sigmoid(a) = 0.5 * tanh(a / 2) + 0.5, so the cached
gate tensor holds tanh-space values and the cheap affine corrections
happen inside the fused update kernels.

The attention layer scores the per-timestep concatenation of the
embedding and every layer's hidden state with a learned vector,
softmaxes the scores over time, and feeds the weighted average to the
output projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from .errors import ConfigurationError, DomainError, TrainingError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embedding_size: int = 128
    layer_size: int = 128
    n_layers: int = 6
    dropout_rate: float = 0.1
    max_length: int = 60
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if min(self.vocab_size, self.embedding_size, self.layer_size, self.n_layers) < 1:
            raise ConfigurationError("model sizes must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.max_length < 1:
            raise ConfigurationError("max_length must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def concat_size(self) -> int:
        return self.embedding_size + self.n_layers * self.layer_size

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embedding_size": self.embedding_size,
            "layer_size": self.layer_size,
            "n_layers": self.n_layers,
            "dropout_rate": self.dropout_rate,
            "max_length": self.max_length,
            "seed": self.seed,
            "dtype": self.dtype,
        }


def init_parameters(config: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded initialization: uniform(-0.05, 0.05) weights, zero biases,
    forget-gate bias +1."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    E, H, V = config.embedding_size, config.layer_size, config.vocab_size

    def uniform(*shape):
        return rng.uniform(-0.05, 0.05, size=shape).astype(dt)

    params: dict[str, np.ndarray] = {"embedding": uniform(V, E)}
    for k in range(config.n_layers):
        in_dim = E if k == 0 else H
        params[f"lstm{k}_Wx"] = uniform(in_dim, 4 * H)
        params[f"lstm{k}_Wh"] = uniform(H, 4 * H)
        b = np.zeros(4 * H, dtype=dt)
        b[H : 2 * H] = 1.0  # forget gate bias
        params[f"lstm{k}_b"] = b
    params["attention_v"] = uniform(config.concat_size)
    params["output_W"] = uniform(config.concat_size, V)
    params["output_b"] = np.zeros(V, dtype=dt)
    return params


def _halved(w: np.ndarray, H: int) -> np.ndarray:
    """Scale the sigmoid-gate columns by 0.5 so one tanh evaluates all gates."""
    out = w * np.float32(0.5)
    out[..., 3 * H :] = w[..., 3 * H :]
    return out


@njit(cache=True, fastmath=True)
def _cell_forward(y, c_prev, m, c_out):
    """New cell state from tanh-space gates and the previous cell state."""
    B, H4 = y.shape
    H = H4 // 4
    half = np.float32(0.5)
    for b in range(B):
        mb = m[b]
        for j in range(H):
            c_out[b, j] = (half * y[b, H + j] + half) * c_prev[b, j] * mb
        for j in range(H):
            c_out[b, j] += (half * y[b, j] + half) * y[b, 3 * H + j] * mb


@njit(cache=True, fastmath=True)
def _cell_hidden(y, tanhc, m, h_out):
    B, H4 = y.shape
    H = H4 // 4
    half = np.float32(0.5)
    for b in range(B):
        mb = m[b]
        for j in range(H):
            og = half * y[b, 2 * H + j] + half
            h_out[b, j] = og * tanhc[b, j] * mb


@njit(cache=True, fastmath=True)
def _attention_dalpha(z, dcontext, out):
    """out[t, b] = z[t, b, :] . dcontext[b, :]"""
    L, B, D = z.shape
    for t in range(L):
        for b in range(B):
            s = z[t, b, 0] * dcontext[b, 0]
            for d in range(1, D):
                s += z[t, b, d] * dcontext[b, d]
            out[t, b] = s


@njit(cache=True, fastmath=True)
def _attention_dz_chunk(alpha, dcontext, dscores, v, col0, out):
    """out[t, b, j] = alpha[t, b] * dcontext[b, col0+j] + dscores[t, b] * v[col0+j]"""
    L, B, H = out.shape
    for t in range(L):
        for b in range(B):
            a = alpha[t, b]
            e = dscores[t, b]
            for j in range(H):
                out[t, b, j] = a * dcontext[b, col0 + j] + e * v[col0 + j]


@njit(cache=True, fastmath=True)
def _scaled_mask(u, p, scale, out):
    """Inverted-dropout mask from uniform draws: (u >= p) * scale."""
    n = u.size
    uf = u.reshape(n)
    of = out.reshape(n)
    for i in range(n):
        of[i] = scale if uf[i] >= p else 0.0


@njit(cache=True, fastmath=True)
def _lstm_backward_time(y, tanhc, c, mask, dh_out, WhT, da, ds_row):
    """Backward through one layer's time loop.

    y is the cached tanh-space gate tensor (L, B, 4H); da receives the
    gradient in canonical pre-activation space. dh_out carries the
    gradient arriving at each timestep's hidden output; ds_row is a
    (B, H) scratch buffer.
    """
    L, B, H4 = y.shape
    H = H4 // 4
    half = np.float32(0.5)
    quarter = np.float32(0.25)
    one = np.float32(1.0)
    dt = y.dtype
    dh_next = np.zeros((B, H), dtype=dt)
    dcarry = np.zeros((B, H), dtype=dt)
    zero_row = np.zeros((B, H), dtype=dt)
    for t in range(L - 1, -1, -1):
        y_t = y[t]
        tc_t = tanhc[t]
        da_t = da[t]
        c_prev = c[t - 1] if t > 0 else zero_row
        for b in range(B):
            mb = mask[t, b]
            for j in range(H):
                yo = y_t[b, 2 * H + j]
                og = half * yo + half
                tc = tc_t[b, j]
                dh = (dh_out[t, b, j] + dh_next[b, j]) * mb
                ds = (dh * og * (one - tc * tc) + dcarry[b, j]) * mb
                ds_row[b, j] = ds
                da_t[b, 2 * H + j] = dh * tc * quarter * (one - yo * yo)
            for j in range(H):
                yi = y_t[b, j]
                yf = y_t[b, H + j]
                yg = y_t[b, 3 * H + j]
                ds = ds_row[b, j]
                da_t[b, j] = ds * yg * quarter * (one - yi * yi)
                da_t[b, H + j] = ds * c_prev[b, j] * quarter * (one - yf * yf)
                da_t[b, 3 * H + j] = ds * (half * yi + half) * (one - yg * yg)
                dcarry[b, j] = ds * (half * yf + half)
        dh_next = np.dot(da_t, WhT)


class _Workspace:
    """Shape-keyed scratch buffers reused across training steps."""

    def __init__(self):
        self._buffers: dict = {}

    def get(self, key, shape, dtype):
        buf = self._buffers.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._buffers[key] = buf
        return buf


def _dropout_masks(rng, L: int, B: int, config: ModelConfig, ws: "_Workspace"):
    """Per-layer inverted-dropout masks as views into one shared buffer."""
    p = config.dropout_rate
    dt = config.np_dtype
    E, H, K = config.embedding_size, config.layer_size, config.n_layers
    width = E + K * H
    u = ws.get(("dropu", L, B, width), (L, B, width), dt)
    rng.random(out=u.reshape(-1), dtype=dt)
    masks = ws.get(("dropm", L, B, width), (L, B, width), dt)
    _scaled_mask(u, dt(p), dt(1.0 / (1.0 - p)), masks)
    return [masks[:, :, :E]] + [
        masks[:, :, E + k * H : E + (k + 1) * H] for k in range(K)
    ]


def _forward_batch(
    params: dict,
    windows: np.ndarray,
    lengths: np.ndarray,
    config: ModelConfig,
    mode: str,
    rng=None,
    want_cache: bool = False,
    workspace: Optional[_Workspace] = None,
):
    """Forward pass over a left-padded batch; returns (probs (B, V), cache)."""
    if mode not in ("train", "eval"):
        raise DomainError(f"unknown mode {mode!r}")
    B, L = windows.shape
    if L == 0 or np.any(lengths < 1):
        raise DomainError("windows must be non-empty")
    if windows.min() < 0 or windows.max() >= config.vocab_size:
        raise DomainError("token id outside vocabulary")
    E, H, K = config.embedding_size, config.layer_size, config.n_layers
    dt = config.np_dtype
    ws = workspace or _Workspace()

    # (L, B) mask: position t of row b is live iff t >= L - lengths[b]
    mask = (np.arange(L)[:, None] >= (L - lengths)[None, :]).astype(dt)
    all_live = bool(np.all(lengths == L))

    train = mode == "train"
    p = config.dropout_rate if train else 0.0
    if p > 0.0 and rng is None:
        raise DomainError("train-mode forward with dropout needs an rng")
    all_masks = _dropout_masks(rng, L, B, config, ws) if p > 0.0 else [None] * (K + 1)

    x = params["embedding"][windows.T]  # (L, B, E), contiguous gather
    drop0 = all_masks[0]
    xd = x if drop0 is None else x * drop0

    drops, inputs, gates_all, c_all, tanhc_all, h_all, hd_all = [], [], [], [], [], [], []
    layer_inp = xd
    for k in range(K):
        Wx_h = _halved(params[f"lstm{k}_Wx"], H)
        Wh_h = _halved(params[f"lstm{k}_Wh"], H)
        b_h = _halved(params[f"lstm{k}_b"], H)
        in_dim = layer_inp.shape[2]
        y = ws.get(("y", k, L, B), (L, B, 4 * H), dt)
        np.matmul(
            np.ascontiguousarray(layer_inp).reshape(L * B, in_dim),
            Wx_h,
            out=y.reshape(L * B, 4 * H),
        )
        y += b_h
        c_seq = ws.get(("c", k, L, B), (L, B, H), dt)
        tanhc = ws.get(("tanhc", k, L, B), (L, B, H), dt)
        h_seq = ws.get(("h", k, L, B), (L, B, H), dt)
        rec = ws.get(("rec", k, B), (B, 4 * H), dt)
        h = np.zeros((B, H), dtype=dt)
        c_prev = np.zeros((B, H), dtype=dt)
        for t in range(L):
            y_t = y[t]
            np.matmul(h, Wh_h, out=rec)
            y_t += rec
            np.tanh(y_t, out=y_t)
            _cell_forward(y_t, c_prev, mask[t], c_seq[t])
            np.tanh(c_seq[t], out=tanhc[t])
            _cell_hidden(y_t, tanhc[t], mask[t], h_seq[t])
            h = h_seq[t]
            c_prev = c_seq[t]
        drop_k = all_masks[k + 1]
        hd = h_seq if drop_k is None else h_seq * drop_k
        drops.append(drop_k)
        inputs.append(layer_inp)
        gates_all.append(y)
        c_all.append(c_seq)
        tanhc_all.append(tanhc)
        h_all.append(h_seq)
        hd_all.append(hd)
        layer_inp = hd

    z = np.concatenate([xd] + hd_all, axis=2)  # (L, B, D)
    D = z.shape[2]

    scores = (z.reshape(L * B, D) @ params["attention_v"]).reshape(L, B)
    if not all_live:
        scores = np.where(mask > 0, scores, -np.inf)
    scores -= scores.max(axis=0, keepdims=True)
    alpha = np.exp(scores)
    alpha /= alpha.sum(axis=0, keepdims=True)
    context = np.einsum("lb,lbd->bd", alpha, z)

    logits = context @ params["output_W"] + params["output_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shifted)
    denom = expl.sum(axis=1, keepdims=True)
    probs = expl / denom

    cache = None
    if want_cache:
        cache = {
            "windows": windows,
            "mask": mask,
            "drop0": drop0,
            "drops": drops,
            "xd": xd,
            "inputs": inputs,
            "gates": gates_all,
            "c": c_all,
            "tanhc": tanhc_all,
            "h": h_all,
            "z": z,
            "alpha": alpha,
            "context": context,
            "probs": probs,
            "logprobs": shifted - np.log(denom),
            "ws": ws,
        }
    return probs, cache


def _backward_batch(params: dict, cache: dict, targets: np.ndarray, config: ModelConfig) -> dict:
    """Gradients of the summed cross-entropy over the batch."""
    mask = cache["mask"]
    L, B = mask.shape
    E, H, K, V = config.embedding_size, config.layer_size, config.n_layers, config.vocab_size
    dt = config.np_dtype
    z, alpha, context = cache["z"], cache["alpha"], cache["context"]

    dlogits = cache["probs"].copy()
    dlogits[np.arange(B), targets] -= 1.0  # d(sum nll)/dlogits

    grads: dict[str, np.ndarray] = {}
    grads["output_W"] = context.T @ dlogits
    grads["output_b"] = dlogits.sum(axis=0)
    dcontext = dlogits @ params["output_W"].T  # (B, D)

    ws = cache["ws"]
    dalpha = ws.get(("dalpha", L, B), (L, B), dt)
    _attention_dalpha(z, dcontext, dalpha)
    dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=0, keepdims=True))
    D = z.shape[2]
    grads["attention_v"] = dscores.reshape(L * B) @ z.reshape(L * B, D)
    v = params["attention_v"]

    dxd = ws.get(("dxd", L, B), (L, B, E), dt)
    _attention_dz_chunk(alpha, dcontext, dscores, v, 0, dxd)
    du_above: Optional[np.ndarray] = None
    for k in range(K - 1, -1, -1):
        dh_out = ws.get(("dh_out", k, L, B), (L, B, H), dt)
        _attention_dz_chunk(alpha, dcontext, dscores, v, E + k * H, dh_out)
        if du_above is not None:
            dh_out += du_above
        if cache["drops"][k] is not None:
            dh_out *= cache["drops"][k]

        y, c_seq, tanhc = cache["gates"][k], cache["c"][k], cache["tanhc"][k]
        da = ws.get(("da", k, L, B), (L, B, 4 * H), dt)
        ds_row = ws.get(("ds_row", k, B), (B, H), dt)
        WhT = np.ascontiguousarray(params[f"lstm{k}_Wh"].T)
        _lstm_backward_time(y, tanhc, c_seq, mask, dh_out, WhT, da, ds_row)

        inp = cache["inputs"][k]
        in_dim = inp.shape[2]
        da_flat = da.reshape(L * B, 4 * H)
        grads[f"lstm{k}_Wx"] = inp.reshape(L * B, in_dim).T @ da_flat
        h_prev = ws.get(("hprev", k, L, B), (L, B, H), dt)
        h_prev[0] = 0.0
        h_prev[1:] = cache["h"][k][:-1]
        grads[f"lstm{k}_Wh"] = h_prev.reshape(L * B, H).T @ da_flat
        grads[f"lstm{k}_b"] = da_flat.sum(axis=0)
        du = ws.get(("du", k, L, B), (L, B, in_dim), dt)
        np.matmul(da_flat, params[f"lstm{k}_Wx"].T, out=du.reshape(L * B, in_dim))
        if k == 0:
            dxd += du
        else:
            du_above = du

    if cache["drop0"] is not None:
        dxd *= cache["drop0"]
    onehot = np.zeros((L * B, V), dtype=dt)
    onehot[np.arange(L * B), cache["windows"].T.reshape(-1)] = 1.0
    grads["embedding"] = onehot.T @ dxd.reshape(L * B, E)
    return grads


def _as_padded_batch(windows: Sequence[Sequence[int]], dtype=np.int32):
    lengths = np.array([len(w) for w in windows], dtype=np.int64)
    L = int(lengths.max())
    arr = np.zeros((len(windows), L), dtype=dtype)
    for i, w in enumerate(windows):
        if len(w):
            arr[i, L - len(w) :] = w
    return arr, lengths


def forward(
    params: dict,
    window: Sequence[int],
    config: ModelConfig,
    mode: str = "eval",
    rng=None,
) -> np.ndarray:
    """Next-token probability vector for a single window of tokens."""
    if len(window) == 0:
        raise DomainError("window must be non-empty")
    if len(window) > config.max_length:
        window = window[-config.max_length :]
    arr = np.asarray(window, dtype=np.int32).reshape(1, -1)
    lengths = np.array([arr.shape[1]], dtype=np.int64)
    probs, _ = _forward_batch(params, arr, lengths, config, mode, rng)
    return probs[0]


def loss_and_gradients(
    params: dict,
    batch: Sequence[tuple[Sequence[int], int]],
    config: ModelConfig,
    mode: str = "train",
    rng=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over (window, next-token) pairs plus gradients
    of that mean for every parameter block."""
    if not batch:
        raise DomainError("batch must be non-empty")
    windows = [w for w, _ in batch]
    targets = np.array([t for _, t in batch], dtype=np.int64)
    arr, lengths = _as_padded_batch([w[-config.max_length :] for w in windows])
    return loss_and_gradients_arrays(params, arr, lengths, targets, config, mode, rng)


def loss_and_gradients_arrays(
    params: dict,
    windows: np.ndarray,
    lengths: np.ndarray,
    targets: np.ndarray,
    config: ModelConfig,
    mode: str = "train",
    rng=None,
    workspace: Optional[_Workspace] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Array-level variant of loss_and_gradients for pre-padded batches."""
    if targets.min() < 0 or targets.max() >= config.vocab_size:
        raise DomainError("target token outside vocabulary")
    _, cache = _forward_batch(
        params, windows, lengths, config, mode, rng, want_cache=True, workspace=workspace
    )
    n = windows.shape[0]
    nll = -cache["logprobs"][np.arange(n), targets]
    grads = _backward_batch(params, cache, targets, config)
    for g in grads.values():
        g /= n
    return float(nll.mean()), grads


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def optimizer_step(
    params: dict,
    grads: dict,
    state: AdamState,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One Adam update, in place. Non-finite gradients abort the step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in block {name!r}; step aborted")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def tiny_config(dtype: str = "float64") -> ModelConfig:
    """Small configuration used by the gradient-check harness."""
    return ModelConfig(
        vocab_size=10,
        embedding_size=4,
        layer_size=8,
        n_layers=2,
        dropout_rate=0.0,
        max_length=12,
        seed=7,
        dtype=dtype,
    )


def gradient_check(
    config: Optional[ModelConfig] = None,
    epsilon: float = 1e-4,
    seed: int = 123,
) -> dict[str, float]:
    """Compare analytic BPTT gradients against central finite differences.

    Runs a randomized small model on a mixed-length batch and returns
    the max relative error per parameter block.
    """
    cfg = config or tiny_config()
    params = init_parameters(cfg)
    rng = np.random.default_rng(seed)
    # randomize away from the symmetric init point
    for name, p in params.items():
        params[name] = (p + rng.normal(scale=0.05, size=p.shape)).astype(cfg.np_dtype)

    batch = []
    for _ in range(4):
        n = int(rng.integers(1, cfg.max_length + 1))
        window = rng.integers(0, cfg.vocab_size, size=n).tolist()
        batch.append((window, int(rng.integers(0, cfg.vocab_size))))

    _, grads = loss_and_gradients(params, batch, cfg, mode="train", rng=None)

    def batch_loss() -> float:
        loss, _ = loss_and_gradients(params, batch, cfg, mode="train", rng=None)
        return loss

    report = {}
    for name in sorted(params):
        p = params[name]
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            hi = batch_loss()
            flat[idx] = orig - epsilon
            lo = batch_loss()
            flat[idx] = orig
            fd_flat[idx] = (hi - lo) / (2.0 * epsilon)
        g = grads[name]
        rel = np.abs(g - fd) / np.maximum(np.abs(g) + np.abs(fd), 1e-6)
        report[name] = float(rel.max())
    return report


_CHECKPOINT_MAGIC = b"STAYGEN-CKPT\n"


def save_checkpoint(
    path: Union[str, Path],
    config: ModelConfig,
    params: dict,
    metadata: Optional[dict] = None,
) -> None:
    """Self-describing binary container: a json header describing named
    parameter blocks followed by their little-endian IEEE-754 bytes.

    The byte layout is fully determined by (config, params, metadata),
    so identical training runs produce identical files.
    """
    blocks = []
    payload = bytearray()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blocks.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        payload.extend(le.tobytes())
    header = json.dumps(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": config.to_dict(),
            "metadata": metadata or {},
            "blocks": blocks,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelConfig, dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path}: not a staygen checkpoint")
        header_len = int.from_bytes(fh.read(8), "little")
        meta = json.loads(fh.read(header_len).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError("unsupported checkpoint format version")
        params = {}
        for block in meta["blocks"]:
            dtype = np.dtype(block["dtype"]).newbyteorder("<")
            count = int(np.prod(block["shape"])) if block["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype).reshape(block["shape"])
            params[block["name"]] = arr.astype(np.dtype(block["dtype"]), copy=True)
    config = ModelConfig(**meta["config"])
    return config, params, meta["metadata"]

"""Multi-output recurrent classifier with hand-written backpropagation.

One shared stem (embedding, GRU, dropout on the final hidden state) feeds
independent dense branches, one per vulnerability class, each ending in a
single sigmoid neuron. Freezing is tracked per parameter block so new
branches can be trained while the stem and old branches stay bit-identical.

All parameters and activations are 32-bit floats unless a caller builds
the model with float64 blocks (the gradient tests do, for a quieter
finite-difference comparison); the math is dtype-agnostic.

GRU convention used everywhere here, with m the padding mask at step t:

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_c + (r * h) U_c + b_c)
    h_new = z * h + (1 - z) * c
    h_next = m * h_new + (1 - m) * h

One bias per gate; the update gate multiplies the previous state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LoadError, MalformedInputError, UsageError

DEFAULT_GRU_HIDDEN = 64
DEFAULT_DROPOUT = 0.2
DEFAULT_MAX_SEQUENCE_LENGTH = 4100
DEFAULT_DENSE_WIDTHS = (128, 64, 1)

PROB_EPS = 1e-7

_MAGIC = b"EVMG"
_VERSION = 1

_GATES = ("z", "r", "c")


@dataclass(frozen=True)
class StemConfig:
    vocab_size: int
    embedding_dim: int
    gru_hidden: int = DEFAULT_GRU_HIDDEN
    dropout_rate: float = DEFAULT_DROPOUT
    max_sequence_length: int = DEFAULT_MAX_SEQUENCE_LENGTH

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover padding and OOV ids")
        if self.embedding_dim < 1 or self.gru_hidden < 1:
            raise ConfigError("embedding_dim and gru_hidden must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.max_sequence_length < 1:
            raise ConfigError("max_sequence_length must be >= 1")


@dataclass(frozen=True)
class BranchConfig:
    class_name: str
    dense_widths: tuple[int, ...] = DEFAULT_DENSE_WIDTHS

    def __post_init__(self):
        if not self.dense_widths or self.dense_widths[-1] != 1:
            raise ConfigError("branch must end in a single-neuron head")
        if any(w < 1 for w in self.dense_widths):
            raise ConfigError("dense widths must be >= 1")


# Stem sized so its parameter count is exactly 16,000: with six default
# branches (6 * 16,641) the whole model lands on 115,846 parameters.
REFERENCE_STEM = StemConfig(vocab_size=28, embedding_dim=16, gru_hidden=64)


def stem_block_names() -> tuple[str, ...]:
    names = ["embedding"]
    for g in _GATES:
        names += [f"gru/w{g}", f"gru/u{g}", f"gru/b{g}"]
    return tuple(names)


def branch_block_names(class_name: str, n_layers: int) -> tuple[str, ...]:
    out = []
    for i in range(n_layers):
        out += [f"branch:{class_name}:w{i}", f"branch:{class_name}:b{i}"]
    return tuple(out)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class MolModel:
    stem: StemConfig
    branches: list[BranchConfig]
    params: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    vocab_fingerprint: str | None = None

    @property
    def class_names(self) -> list[str]:
        return [b.class_name for b in self.branches]

    def blocks_of_branch(self, class_name: str) -> tuple[str, ...]:
        for b in self.branches:
            if b.class_name == class_name:
                return branch_block_names(class_name, len(b.dense_widths))
        raise ConfigError(f"no branch named {class_name!r}")

    def set_stem_frozen(self, flag: bool) -> None:
        for name in stem_block_names():
            self.frozen.add(name) if flag else self.frozen.discard(name)

    def set_branch_frozen(self, class_name: str, flag: bool) -> None:
        for name in self.blocks_of_branch(class_name):
            self.frozen.add(name) if flag else self.frozen.discard(name)

    def stem_frozen(self) -> bool:
        return all(name in self.frozen for name in stem_block_names())

    def trainable_blocks(self) -> list[str]:
        return [name for name in self.params if name not in self.frozen]


def _init_branch_params(
    rng: np.random.Generator,
    config: BranchConfig,
    input_width: int,
    dtype,
) -> dict[str, np.ndarray]:
    params = {}
    fan_in = input_width
    for i, width in enumerate(config.dense_widths):
        params[f"branch:{config.class_name}:w{i}"] = _uniform(
            rng, (fan_in, width), fan_in, dtype
        )
        params[f"branch:{config.class_name}:b{i}"] = np.zeros(width, dtype=dtype)
        fan_in = width
    return params


def init_model(
    stem: StemConfig,
    branches: list[BranchConfig],
    seed: int,
    dtype=np.float32,
) -> MolModel:
    """Fan-in uniform weights, zero biases, deterministic per seed.

    Draw order is fixed: embedding, then GRU input/recurrent kernels gate
    by gate (z, r, c), then each branch layer by layer. Biases consume no
    randomness.
    """
    names = {b.class_name for b in branches}
    if len(names) != len(branches):
        raise ConfigError("branch class names must be unique")
    if not branches:
        raise ConfigError("need at least one branch")
    rng = np.random.default_rng(seed)
    d, h = stem.embedding_dim, stem.gru_hidden
    params: dict[str, np.ndarray] = {
        "embedding": _uniform(rng, (stem.vocab_size, d), d, dtype)
    }
    for g in _GATES:
        params[f"gru/w{g}"] = _uniform(rng, (d, h), d, dtype)
        params[f"gru/u{g}"] = _uniform(rng, (h, h), h, dtype)
        params[f"gru/b{g}"] = np.zeros(h, dtype=dtype)
    for b in branches:
        params.update(_init_branch_params(rng, b, h, dtype))
    return MolModel(stem=stem, branches=list(branches), params=params)


def add_branch(model: MolModel, config: BranchConfig, seed: int) -> None:
    """Append a freshly initialized branch; every existing block is untouched."""
    if config.class_name in model.class_names:
        raise ConfigError(f"branch {config.class_name!r} already exists")
    dtype = model.params["embedding"].dtype
    rng = np.random.default_rng(seed)
    model.params.update(
        _init_branch_params(rng, config, model.stem.gru_hidden, dtype)
    )
    model.branches.append(config)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dropout_mask(shape, rate: float, seed: int, dtype) -> np.ndarray:
    """Inverted-dropout scale mask; a function of (seed, shape) alone."""
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


@dataclass
class ForwardCache:
    model: MolModel
    ids: np.ndarray
    mask: np.ndarray  # (batch, t_used) float
    t_used: int
    h_states: np.ndarray  # (t_used + 1, batch, hidden); [0] is the zero state
    gates: dict[str, np.ndarray]  # z, r, c stacked (t_used, batch, hidden)
    drop: np.ndarray | None  # inverted-dropout scale mask or None in eval
    h_final: np.ndarray  # post-dropout stem output (batch, hidden)
    branch_inputs: list[list[np.ndarray]]  # per branch, input to each layer
    branch_pre: list[list[np.ndarray]]  # per branch, pre-activation per layer
    probs: np.ndarray  # (batch, n_branches)


def forward(
    model: MolModel,
    ids: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
    keep_cache: bool = False,
) -> np.ndarray | tuple[np.ndarray, ForwardCache]:
    """Probabilities (batch, n_branches), optionally with backward state.

    The GRU scan stops at the longest true length in the batch; padding
    steps never update the hidden state, so right-padding is a no-op.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise MalformedInputError(f"ids must be 2-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.stem.vocab_size):
        raise MalformedInputError(
            f"token ids must be in [0, {model.stem.vocab_size})"
        )
    emb = model.params["embedding"]
    dtype = emb.dtype
    batch = ids.shape[0]
    h = model.stem.gru_hidden

    mask_full = (ids != 0).astype(dtype)
    t_used = int(ids.shape[1] if batch == 0 else mask_full.sum(axis=1).max())
    mask = mask_full[:, :t_used]

    x = emb[ids[:, :t_used]]  # (batch, t_used, d)
    h_states = np.zeros((t_used + 1, batch, h), dtype=dtype)
    gates = {
        g: np.zeros((t_used, batch, h), dtype=dtype) for g in _GATES
    }
    p = model.params
    h_t = h_states[0]
    for t in range(t_used):
        x_t = x[:, t, :]
        z = _sigmoid(x_t @ p["gru/wz"] + h_t @ p["gru/uz"] + p["gru/bz"])
        r = _sigmoid(x_t @ p["gru/wr"] + h_t @ p["gru/ur"] + p["gru/br"])
        c = np.tanh(x_t @ p["gru/wc"] + (r * h_t) @ p["gru/uc"] + p["gru/bc"])
        h_new = z * h_t + (1.0 - z) * c
        m = mask[:, t : t + 1]
        h_t = m * h_new + (1.0 - m) * h_t
        h_states[t + 1] = h_t
        gates["z"][t], gates["r"][t], gates["c"][t] = z, r, c

    drop = None
    h_final = h_t
    if mode == "train" and model.stem.dropout_rate > 0.0:
        drop = dropout_mask((batch, h), model.stem.dropout_rate, seed, dtype)
        h_final = h_t * drop

    branch_inputs: list[list[np.ndarray]] = []
    branch_pre: list[list[np.ndarray]] = []
    probs = np.zeros((batch, len(model.branches)), dtype=dtype)
    for k, b in enumerate(model.branches):
        inputs, pre = [], []
        a = h_final
        n = len(b.dense_widths)
        for i in range(n):
            inputs.append(a)
            s = a @ p[f"branch:{b.class_name}:w{i}"] + p[f"branch:{b.class_name}:b{i}"]
            pre.append(s)
            a = _sigmoid(s) if i == n - 1 else np.maximum(s, 0.0)
        probs[:, k] = np.clip(a[:, 0], PROB_EPS, 1.0 - PROB_EPS)
        branch_inputs.append(inputs)
        branch_pre.append(pre)

    if not keep_cache:
        return probs
    cache = ForwardCache(
        model=model,
        ids=ids,
        mask=mask,
        t_used=t_used,
        h_states=h_states,
        gates=gates,
        drop=drop,
        h_final=h_final,
        branch_inputs=branch_inputs,
        branch_pre=branch_pre,
        probs=probs,
    )
    return probs, cache


def bce_loss(labels: np.ndarray, probs: np.ndarray, eps: float = PROB_EPS) -> float:
    """Mean of -(y log p + (1-y) log(1-p)) over every (sample, branch) cell."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape:
        raise ConfigError(f"labels shape {y.shape} != probabilities shape {p.shape}")
    p = np.clip(p, eps, 1.0 - eps)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def backward(
    model: MolModel,
    cache: ForwardCache,
    labels: np.ndarray,
    branch_subset: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Analytic gradients of mean BCE for every unfrozen parameter block.

    `branch_subset` restricts the loss to those output columns (in the
    given order); `labels` must then have one column per selected branch.
    When the whole stem is frozen the time scan is skipped outright, which
    is what makes branch-only transfer training cheap.
    """
    if cache.model is not model:
        raise UsageError("backward called with a cache from a different model")
    names = model.class_names
    if branch_subset is None:
        selected = list(range(len(names)))
    else:
        missing = [n for n in branch_subset if n not in names]
        if missing:
            raise ConfigError(f"unknown branches {missing!r}")
        selected = [names.index(n) for n in branch_subset]
    y = np.asarray(labels)
    batch = cache.ids.shape[0]
    if y.shape != (batch, len(selected)):
        raise ConfigError(
            f"labels shape {y.shape} != expected {(batch, len(selected))}"
        )

    p = model.params
    dtype = p["embedding"].dtype
    y = y.astype(dtype)
    grads: dict[str, np.ndarray] = {}
    cells = batch * len(selected)
    dh_final = np.zeros_like(cache.h_final)

    for col, k in enumerate(selected):
        b = model.branches[k]
        blocks = branch_block_names(b.class_name, len(b.dense_widths))
        frozen_branch = all(name in model.frozen for name in blocks)
        probs_k = cache.probs[:, k]
        ds = ((probs_k - y[:, col]) / cells)[:, None]
        n = len(b.dense_widths)
        for i in reversed(range(n)):
            if i != n - 1:
                ds = ds * (cache.branch_pre[k][i] > 0)
            w_name = f"branch:{b.class_name}:w{i}"
            b_name = f"branch:{b.class_name}:b{i}"
            if not frozen_branch:
                if w_name not in model.frozen:
                    grads[w_name] = cache.branch_inputs[k][i].T @ ds
                if b_name not in model.frozen:
                    grads[b_name] = ds.sum(axis=0)
            ds = ds @ p[w_name].T
        dh_final += ds

    if model.stem_frozen():
        return grads

    dh = dh_final if cache.drop is None else dh_final * cache.drop

    d, h = model.stem.embedding_dim, model.stem.gru_hidden
    demb = np.zeros_like(p["embedding"])
    g = {
        name: np.zeros_like(p[name])
        for name in stem_block_names()
        if name != "embedding"
    }
    dx = np.zeros((batch, cache.t_used, d), dtype=dtype)
    x = p["embedding"][cache.ids[:, : cache.t_used]]
    for t in reversed(range(cache.t_used)):
        m = cache.mask[:, t : t + 1]
        h_prev = cache.h_states[t]
        z = cache.gates["z"][t]
        r = cache.gates["r"][t]
        c = cache.gates["c"][t]
        x_t = x[:, t, :]

        dh_new = dh * m
        dh_prev = dh * (1.0 - m)

        dz = dh_new * (h_prev - c)
        dc = dh_new * (1.0 - z)
        dh_prev += dh_new * z

        dsc = dc * (1.0 - c * c)
        g["gru/wc"] += x_t.T @ dsc
        g["gru/uc"] += (r * h_prev).T @ dsc
        g["gru/bc"] += dsc.sum(axis=0)
        dx_t = dsc @ p["gru/wc"].T
        drh = dsc @ p["gru/uc"].T
        dr = drh * h_prev
        dh_prev += drh * r

        dsz = dz * z * (1.0 - z)
        g["gru/wz"] += x_t.T @ dsz
        g["gru/uz"] += h_prev.T @ dsz
        g["gru/bz"] += dsz.sum(axis=0)
        dx_t += dsz @ p["gru/wz"].T
        dh_prev += dsz @ p["gru/uz"].T

        dsr = dr * r * (1.0 - r)
        g["gru/wr"] += x_t.T @ dsr
        g["gru/ur"] += h_prev.T @ dsr
        g["gru/br"] += dsr.sum(axis=0)
        dx_t += dsr @ p["gru/wr"].T
        dh_prev += dsr @ p["gru/ur"].T

        dx[:, t, :] = dx_t
        dh = dh_prev

    np.add.at(
        demb,
        cache.ids[:, : cache.t_used].reshape(-1),
        dx.reshape(-1, d),
    )
    if "embedding" not in model.frozen:
        grads["embedding"] = demb
    for name, val in g.items():
        if name not in model.frozen:
            grads[name] = val
    return grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    model: MolModel,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 0.001,
) -> None:
    """Standard bias-corrected Adam over the supplied unfrozen blocks."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, grad in grads.items():
        if name in model.frozen:
            continue
        param = model.params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def stem_param_count(config: StemConfig) -> int:
    d, h, v = config.embedding_dim, config.gru_hidden, config.vocab_size
    return v * d + 3 * (d * h + h * h + h)


def branch_param_count(config: BranchConfig, input_width: int = DEFAULT_GRU_HIDDEN) -> int:
    total = 0
    fan_in = input_width
    for width in config.dense_widths:
        total += fan_in * width + width
        fan_in = width
    return total


def param_count(model: MolModel, scope: str = "all"):
    """Exact parameter counts: 'all' or 'trainable' (ints), 'per-branch' (dict)."""
    if scope == "all":
        return sum(arr.size for arr in model.params.values())
    if scope == "trainable":
        return sum(
            arr.size for name, arr in model.params.items() if name not in model.frozen
        )
    if scope == "per-branch":
        return {
            b.class_name: sum(
                model.params[n].size
                for n in branch_block_names(b.class_name, len(b.dense_widths))
            )
            for b in model.branches
        }
    raise UsageError(f"unknown scope {scope!r}")


def save_model(model: MolModel, path) -> None:
    """Versioned container: magic, version, JSON header, raw little-endian blocks."""
    block_names = list(model.params)
    header = {
        "stem": {
            "vocab_size": model.stem.vocab_size,
            "embedding_dim": model.stem.embedding_dim,
            "gru_hidden": model.stem.gru_hidden,
            "dropout_rate": model.stem.dropout_rate,
            "max_sequence_length": model.stem.max_sequence_length,
        },
        "branches": [
            {"class_name": b.class_name, "dense_widths": list(b.dense_widths)}
            for b in model.branches
        ],
        "frozen": sorted(model.frozen),
        "vocab_fingerprint": model.vocab_fingerprint,
        "blocks": [
            {"name": name, "shape": list(model.params[name].shape)}
            for name in block_names
        ],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for name in block_names:
            f.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_model(path) -> MolModel:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise LoadError(f"truncated model file while reading {what}")
        out = blob[off : off + n]
        off += n
        return out

    if take(4, "magic") != _MAGIC:
        raise LoadError("not a model file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != _VERSION:
        raise LoadError(f"model file version {version}, this build reads {_VERSION}")
    (header_len,) = struct.unpack("<Q", take(8, "header length"))
    try:
        header = json.loads(take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"corrupt model header: {exc}") from None

    stem = StemConfig(**header["stem"])
    branches = [
        BranchConfig(b["class_name"], tuple(b["dense_widths"]))
        for b in header["branches"]
    ]
    params = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        raw = take(n_bytes, f"block {block['name']}")
        params[block["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if off != len(blob):
        raise LoadError(f"{len(blob) - off} trailing bytes after last block")
    return MolModel(
        stem=stem,
        branches=branches,
        params=params,
        frozen=set(header["frozen"]),
        vocab_fingerprint=header["vocab_fingerprint"],
    )

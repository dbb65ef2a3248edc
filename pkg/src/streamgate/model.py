"""Patch-attention classifier, written directly against numpy.

The network is deliberately desk-scale: square frames are cut into patches,
linearly embedded with a learned position term, run through a few pre-norm
attention + MLP blocks, mean-pooled, and projected to class logits. Forward,
backward, and Adam are all explicit float64 so gradients can be checked
against finite differences and runs are exactly repeatable.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from streamgate.catalog import Catalog, CatalogError, Image, load_image
from streamgate.enhance import resize
from streamgate.metrics import collapse_binary, combined_f1, confusion, class_f1

_MAGIC = b"SGMODEL1"
_VERSION = 1
_LN_EPS = 1e-5
_INIT_STD = 0.02


class ModelError(CatalogError):
    """Bad model configuration, weights file, or training setup."""


@dataclass
class ModelConfig:
    """Architecture knobs. input_size must be divisible by patch_size and
    dim by heads; m is the number of classes (6 for the full label set,
    2 for direct binary training)."""

    input_size: int = 64
    patch_size: int = 8
    dim: int = 32
    heads: int = 2
    blocks: int = 2
    mlp_ratio: int = 2
    m: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.input_size < 1 or self.patch_size < 1:
            raise ModelError("input_size and patch_size must be positive")
        if self.input_size % self.patch_size != 0:
            raise ModelError(
                f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.blocks < 1 or self.mlp_ratio < 1:
            raise ModelError("blocks and mlp_ratio must be positive")
        if self.m < 2:
            raise ModelError("m must be at least 2")

    @property
    def tokens(self) -> int:
        side = self.input_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return self.dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "patch_size": self.patch_size,
            "dim": self.dim,
            "heads": self.heads,
            "blocks": self.blocks,
            "mlp_ratio": self.mlp_ratio,
            "m": self.m,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ModelError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ModelError("lr must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ModelState:
    """Weights plus everything needed to serve them: the architecture and
    the preprocessing settings the training data went through."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    preprocess: dict = field(default_factory=dict)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {
        "patch_w": (cfg.patch_dim, cfg.dim),
        "patch_b": (cfg.dim,),
        "pos": (cfg.tokens, cfg.dim),
        "head_w": (cfg.dim, cfg.m),
        "head_b": (cfg.m,),
    }
    for i in range(cfg.blocks):
        p = f"block{i}."
        shapes[p + "ln1_g"] = (cfg.dim,)
        shapes[p + "ln1_b"] = (cfg.dim,)
        shapes[p + "wq"] = (cfg.dim, cfg.dim)
        shapes[p + "bq"] = (cfg.dim,)
        shapes[p + "wk"] = (cfg.dim, cfg.dim)
        shapes[p + "bk"] = (cfg.dim,)
        shapes[p + "wv"] = (cfg.dim, cfg.dim)
        shapes[p + "bv"] = (cfg.dim,)
        shapes[p + "wo"] = (cfg.dim, cfg.dim)
        shapes[p + "bo"] = (cfg.dim,)
        shapes[p + "ln2_g"] = (cfg.dim,)
        shapes[p + "ln2_b"] = (cfg.dim,)
        shapes[p + "mlp_w1"] = (cfg.dim, cfg.mlp_hidden)
        shapes[p + "mlp_b1"] = (cfg.mlp_hidden,)
        shapes[p + "mlp_w2"] = (cfg.mlp_hidden, cfg.dim)
        shapes[p + "mlp_b2"] = (cfg.dim,)
    return shapes


def init_state(cfg: ModelConfig, preprocess: Optional[dict] = None) -> ModelState:
    """Fresh weights: normal(0, 0.02) for projections and positions, ones
    for norm gains, zeros for biases. Deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    shapes = _tensor_shapes(cfg)

    def draw(name):
        params[name] = rng.normal(0.0, _INIT_STD, size=shapes[name])

    draw("patch_w")
    draw("pos")
    for i in range(cfg.blocks):
        for w in ("wq", "wk", "wv", "wo", "mlp_w1", "mlp_w2"):
            draw(f"block{i}.{w}")
    draw("head_w")
    for name, shape in shapes.items():
        if name in params:
            continue
        if name.endswith(("ln1_g", "ln2_g")):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ModelState(cfg, params, dict(preprocess or {}))


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, S, S, 3) uint8 frames -> (B, tokens, 3*p*p) float64 in [0, 1].

    Patches run row-major across the image; within a patch, values run
    row-major with the channel fastest.
    """
    if images.ndim != 4 or images.shape[3] != 3:
        raise ModelError(f"expected (B, S, S, 3) frames, got {images.shape}")
    b, h, w, _ = images.shape
    if h != w or h % patch_size != 0:
        raise ModelError(f"frames must be square multiples of {patch_size}, got {h}x{w}")
    g = h // patch_size
    x = images.astype(np.float64) / 255.0
    x = x.reshape(b, g, patch_size, g, patch_size, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, 3 * patch_size * patch_size)


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dy, xhat, inv, g):
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dg, db


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def forward(state: ModelState, images: np.ndarray, want_cache: bool = False):
    """Class probabilities for a batch of frames.

    Returns (probs, cache); cache holds every intermediate the backward
    pass needs and is None unless requested. Chain: patch embed + position,
    blocks of pre-norm attention and pre-norm GELU MLP with residuals,
    mean pool over tokens, linear head, softmax.
    """
    cfg = state.config
    p = state.params
    patches = patchify(images, cfg.patch_size)
    x = patches @ p["patch_w"] + p["patch_b"] + p["pos"]
    scale = 1.0 / math.sqrt(cfg.dim // cfg.heads)

    blocks_cache = []
    for i in range(cfg.blocks):
        pre = f"block{i}."
        x_in = x
        h, xhat1, inv1 = _layer_norm(x_in, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = _split_heads(h @ p[pre + "wq"] + p[pre + "bq"], cfg.heads)
        k = _split_heads(h @ p[pre + "wk"] + p[pre + "bk"], cfg.heads)
        v = _split_heads(h @ p[pre + "wv"] + p[pre + "bv"], cfg.heads)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        merged = _merge_heads(att @ v)
        x_mid = x_in + (merged @ p[pre + "wo"] + p[pre + "bo"])

        h2, xhat2, inv2 = _layer_norm(x_mid, p[pre + "ln2_g"], p[pre + "ln2_b"])
        m1 = h2 @ p[pre + "mlp_w1"] + p[pre + "mlp_b1"]
        a = _gelu(m1)
        x = x_mid + (a @ p[pre + "mlp_w2"] + p[pre + "mlp_b2"])
        if want_cache:
            blocks_cache.append(
                {
                    "h": h, "xhat1": xhat1, "inv1": inv1,
                    "q": q, "k": k, "v": v, "att": att, "merged": merged,
                    "xhat2": xhat2, "inv2": inv2, "h2": h2, "m1": m1, "a": a,
                }
            )

    pooled = x.mean(axis=1)
    logits = pooled @ p["head_w"] + p["head_b"]
    probs = _softmax(logits)
    cache = None
    if want_cache:
        cache = {"patches": patches, "pooled": pooled, "blocks": blocks_cache, "scale": scale}
    return probs, cache


def _target_indices(labels, m: int) -> np.ndarray:
    """Catalog labels (1..6) -> 0-based class indices for an m-way head.
    m = 2 trains directly on the binary collapse."""
    out = []
    for label in labels:
        if m == 2:
            out.append(collapse_binary(label) - 1)
        else:
            if not 1 <= label <= m:
                raise ModelError(f"label {label} outside 1..{m}")
            out.append(label - 1)
    return np.asarray(out, dtype=np.int64)


def loss_and_gradients(state: ModelState, images: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over the batch plus gradients for every tensor.

    targets are 0-based class indices. This is the exact reverse of
    forward; every gradient is checkable by central differences.
    """
    cfg = state.config
    p = state.params
    bsz = images.shape[0]
    if targets.shape != (bsz,):
        raise ModelError("targets must be one index per image")
    probs, cache = forward(state, images, want_cache=True)
    picked = probs[np.arange(bsz), targets]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    dlogits = probs.copy()
    dlogits[np.arange(bsz), targets] -= 1.0
    dlogits /= bsz

    pooled = cache["pooled"]
    grads["head_w"] = pooled.T @ dlogits
    grads["head_b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ p["head_w"].T
    n_tok = cfg.tokens
    dx = np.repeat(dpooled[:, np.newaxis, :], n_tok, axis=1) / n_tok

    scale = cache["scale"]
    for i in reversed(range(cfg.blocks)):
        pre = f"block{i}."
        c = cache["blocks"][i]

        # MLP sub-block: x = x_mid + mlp(h2)
        dm2 = dx
        flat_a = c["a"].reshape(-1, cfg.mlp_hidden)
        flat_dm2 = dm2.reshape(-1, cfg.dim)
        grads[pre + "mlp_w2"] = flat_a.T @ flat_dm2
        grads[pre + "mlp_b2"] = flat_dm2.sum(axis=0)
        da = dm2 @ p[pre + "mlp_w2"].T
        dm1 = da * _gelu_grad(c["m1"])
        flat_h2 = c["h2"].reshape(-1, cfg.dim)
        flat_dm1 = dm1.reshape(-1, cfg.mlp_hidden)
        grads[pre + "mlp_w1"] = flat_h2.T @ flat_dm1
        grads[pre + "mlp_b1"] = flat_dm1.sum(axis=0)
        dh2 = dm1 @ p[pre + "mlp_w1"].T
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, c["xhat2"], c["inv2"], p[pre + "ln2_g"])
        grads[pre + "ln2_g"] = dg2
        grads[pre + "ln2_b"] = db2
        dx_mid = dx_mid + dx

        # attention sub-block: x_mid = x_in + proj(attend(h))
        do = dx_mid
        flat_merged = c["merged"].reshape(-1, cfg.dim)
        flat_do = do.reshape(-1, cfg.dim)
        grads[pre + "wo"] = flat_merged.T @ flat_do
        grads[pre + "bo"] = flat_do.sum(axis=0)
        dmerged = do @ p[pre + "wo"].T
        dav = _split_heads(dmerged, cfg.heads)
        datt = dav @ c["v"].transpose(0, 1, 3, 2)
        dv = c["att"].transpose(0, 1, 3, 2) @ dav
        dscores = c["att"] * (datt - (datt * c["att"]).sum(axis=-1, keepdims=True))
        dq = dscores @ c["k"] * scale
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"] * scale

        flat_h = c["h"].reshape(-1, cfg.dim)
        dh = np.zeros_like(c["h"])
        for name, grad_heads in (("wq", dq), ("wk", dk), ("wv", dv)):
            flat_g = _merge_heads(grad_heads).reshape(-1, cfg.dim)
            grads[pre + name] = flat_h.T @ flat_g
            grads[pre + "b" + name[1]] = flat_g.sum(axis=0)
            dh += (flat_g @ p[pre + name].T).reshape(c["h"].shape)
        dx_in, dg1, db1 = _layer_norm_backward(dh, c["xhat1"], c["inv1"], p[pre + "ln1_g"])
        grads[pre + "ln1_g"] = dg1
        grads[pre + "ln1_b"] = db1
        dx = dx_in + dx_mid

    flat_patches = cache["patches"].reshape(-1, cfg.patch_dim)
    flat_dx = dx.reshape(-1, cfg.dim)
    grads["patch_w"] = flat_patches.T @ flat_dx
    grads["patch_b"] = flat_dx.sum(axis=0)
    grads["pos"] = dx.sum(axis=0)
    return loss, grads


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _load_frame(path: str, input_size: int, loader: Callable[[str], Image]) -> np.ndarray:
    img = loader(path)
    if img.channels != 3:
        raise ModelError("classifier input must be RGB")
    img = resize(img, input_size, input_size)
    return img.pixels


def _load_split(catalog: Catalog, input_size: int, loader) -> tuple[np.ndarray, list[int], list[str]]:
    frames = []
    labels = []
    ids = []
    for rec in catalog.labeled():
        frames.append(_load_frame(rec.path, input_size, loader))
        labels.append(rec.label)
        ids.append(rec.id)
    if not frames:
        raise ModelError("no labeled frames to learn from")
    return np.stack(frames), labels, ids


def _monitor_scores(state: ModelState, images: np.ndarray, labels: list[int]) -> tuple[float, float]:
    probs, _ = forward(state, images)
    pred = probs.argmax(axis=1) + 1
    truth = _target_indices(labels, state.config.m) + 1
    cm = confusion(truth.tolist(), pred.tolist(), state.config.m)
    f1s = [class_f1(cm, label).f1 for label in range(1, state.config.m + 1)]
    accuracy = float(np.trace(cm)) / float(cm.sum())
    return combined_f1(f1s), accuracy


def train(
    train_catalog: Catalog,
    model_cfg: Optional[ModelConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    monitor_catalog: Optional[Catalog] = None,
    preprocess: Optional[dict] = None,
    loader: Callable[[str], Image] = load_image,
) -> tuple[ModelState, list[dict]]:
    """Fit the classifier on one split's labeled frames.

    monitor_catalog (held-out sites) is scored each epoch and the weights
    with the best combined F1 are the ones returned; without it the lowest
    training loss wins. Sharing any site between the two catalogs is an
    error, not a warning. Raises if the loss stops being finite.
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    if monitor_catalog is not None:
        overlap = set(train_catalog.sites) & set(monitor_catalog.sites)
        if overlap:
            raise ModelError(f"sites leak between train and monitor: {sorted(overlap)}")

    frames, labels, _ = _load_split(train_catalog, model_cfg.input_size, loader)
    targets = _target_indices(labels, model_cfg.m)
    monitor = None
    if monitor_catalog is not None and any(r.label is not None for r in monitor_catalog.records()):
        m_frames, m_labels, _ = _load_split(monitor_catalog, model_cfg.input_size, loader)
        monitor = (m_frames, m_labels)

    state = init_state(model_cfg, preprocess)
    opt = _Adam(state.params, train_cfg.lr)
    n = frames.shape[0]
    best_key = None
    best_params = state.copy_params()
    history: list[dict] = []

    for epoch in range(train_cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, epoch]))
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            loss, grads = loss_and_gradients(state, frames[idx], targets[idx])
            if not math.isfinite(loss):
                raise ModelError(f"training diverged at epoch {epoch} (loss={loss})")
            opt.step(state.params, grads)
            epoch_loss += loss * idx.size
        epoch_loss /= n

        entry = {"epoch": epoch, "loss": epoch_loss, "best": False}
        if monitor is not None:
            combined, accuracy = _monitor_scores(state, monitor[0], monitor[1])
            entry["monitor_combined_f1"] = combined
            entry["monitor_accuracy"] = accuracy
            key = (combined, accuracy, -epoch_loss)
        else:
            entry["monitor_combined_f1"] = None
            entry["monitor_accuracy"] = None
            key = (-epoch_loss,)
        if best_key is None or key > best_key:
            best_key = key
            best_params = state.copy_params()
            entry["best"] = True
        history.append(entry)

    return ModelState(model_cfg, best_params, dict(preprocess or {})), history


def predict_catalog(
    catalog: Catalog,
    state: ModelState,
    jobs: int = 1,
    loader: Callable[[str], Image] = load_image,
) -> tuple[list[tuple[str, int, float]], list[tuple[str, str]]]:
    """Predicted (id, label, confidence) for every record, canonical order.

    Each frame runs through the network alone, so results never depend on
    batch composition or job count. Unusable frames come back as
    (id, reason) issues instead of predictions.
    """
    records = list(catalog.records())

    def run(rec):
        try:
            frame = _load_frame(rec.path, state.config.input_size, loader)
        except Exception as exc:
            return rec.id, None, str(exc)
        probs, _ = forward(state, frame[np.newaxis])
        label = int(probs[0].argmax()) + 1
        return rec.id, (label, float(probs[0].max())), None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, records))
    else:
        results = [run(rec) for rec in records]

    rows = []
    issues = []
    for rid, hit, err in results:
        if hit is None:
            issues.append((rid, err))
        else:
            rows.append((rid, hit[0], hit[1]))
    return rows, issues


def save_model(state: ModelState, path) -> None:
    """Single-file weights format: magic, version, a JSON header (config,
    preprocess, tensor shapes), raw float64 little-endian tensors sorted by
    name, and a trailing SHA-256 of everything before it."""
    shapes = _tensor_shapes(state.config)
    for name, shape in shapes.items():
        if name not in state.params:
            raise ModelError(f"missing tensor {name!r}")
        if tuple(state.params[name].shape) != shape:
            raise ModelError(
                f"tensor {name!r} has shape {state.params[name].shape}, expected {shape}"
            )
    header = {
        "config": state.config.to_dict(),
        "preprocess": state.preprocess,
        "tensors": {name: list(shapes[name]) for name in sorted(shapes)},
    }
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for name in sorted(state.params):
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        arr = state.params[name]
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))


def load_model(path, expected_classes: Optional[int] = None) -> ModelState:
    """Read a weights file back, refusing anything corrupted, truncated,
    mis-shaped, or trained for a different class count."""
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 8 + 32:
        raise ModelError("weights file is truncated")
    body, checksum = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise ModelError("weights file failed its checksum")
    if body[: len(_MAGIC)] != _MAGIC:
        raise ModelError("not a model weights file")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != _VERSION:
        raise ModelError(f"unsupported weights version {version}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    if expected_classes is not None and cfg.m != expected_classes:
        raise ModelError(f"model has {cfg.m} classes, expected {expected_classes}")
    shapes = _tensor_shapes(cfg)
    params: dict[str, np.ndarray] = {}
    while off < len(body):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name not in shapes:
            raise ModelError(f"unexpected tensor {name!r}")
        if tuple(shape) != shapes[name]:
            raise ModelError(
                f"tensor {name!r} has shape {tuple(shape)}, expected {shapes[name]}"
            )
        params[name] = arr.astype(np.float64)
    missing = set(shapes) - set(params)
    if missing:
        raise ModelError(f"weights file is missing tensors: {sorted(missing)}")
    return ModelState(cfg, params, dict(header.get("preprocess", {})))

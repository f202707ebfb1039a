"""Attention-pooled bag classifier with exact, hand-written gradients.

The network embeds each instance with one tanh layer, pools the embeddings
with learned softmax attention (plain scoring ``w . tanh(V^T h)`` or gated
scoring ``w . (tanh(V^T h) * sigmoid(U^T h))``), and classifies the pooled
vector with a two-class linear head.

Everything is float64 numpy with a fixed summation order, so training and
inference are bit-reproducible for a fixed seed. The input gradient
propagates through the attention softmax in full: every instance influences
every attention weight, and the derivative keeps that coupling (no
stop-gradient shortcut).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Bag, BagDataset, FormatError, as_instance_matrix
from .seeding import substream

MODEL_MAGIC = b"MILM"
MODEL_VERSION = 1
VARIANTS = ("plain", "gated")


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class ForwardTrace:
    """Per-bag forward results: class probabilities, pooled embedding, attention."""

    probs: np.ndarray       # (2,), sums to 1
    embedding: np.ndarray   # (hidden,)
    attention: np.ndarray   # (n,), sums to 1
    predicted: int          # argmax class, ties -> 0


@dataclass
class _Cache:
    """Intermediates of one forward pass, kept for backprop."""

    x: np.ndarray
    hid: np.ndarray        # tanh embeddings (n, h)
    att_t: np.ndarray      # tanh attention features (n, a)
    att_g: np.ndarray | None  # sigmoid gate (n, a), gated only
    scores: np.ndarray     # (n,)
    alpha: np.ndarray      # (n,)
    pooled: np.ndarray     # (h,)
    logits: np.ndarray     # (2,)
    probs: np.ndarray      # (2,)


@dataclass
class AttentionMILModel:
    """Model parameters plus hyperparameters.

    Parameter shapes: ``embed_w (d, h)``, ``embed_b (h,)``, ``attn_v (h, a)``,
    ``attn_w (a,)``, optional ``attn_gate_u (h, a)`` (gated variant only),
    ``head_w (h, 2)``, ``head_b (2,)``.
    """

    d: int
    hidden: int
    attention_dim: int
    variant: str
    seed: int
    embed_w: np.ndarray
    embed_b: np.ndarray
    attn_v: np.ndarray
    attn_w: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    attn_gate_u: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if (self.attn_gate_u is not None) != (self.variant == "gated"):
            raise ValueError("attn_gate_u must be present iff variant is 'gated'")
        for name, arr in self.parameters():
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} contains non-finite values")

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Named parameters in declaration order (the serialization order)."""
        params = [
            ("embed_w", self.embed_w),
            ("embed_b", self.embed_b),
            ("attn_v", self.attn_v),
            ("attn_w", self.attn_w),
        ]
        if self.attn_gate_u is not None:
            params.append(("attn_gate_u", self.attn_gate_u))
        params += [("head_w", self.head_w), ("head_b", self.head_b)]
        return params

    @property
    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in self.parameters())

    def copy(self) -> "AttentionMILModel":
        return replace(
            self,
            embed_w=self.embed_w.copy(),
            embed_b=self.embed_b.copy(),
            attn_v=self.attn_v.copy(),
            attn_w=self.attn_w.copy(),
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            attn_gate_u=None if self.attn_gate_u is None else self.attn_gate_u.copy(),
        )

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[1] != self.d:
            raise ValueError(f"instance dimension {x.shape[1]} does not match model dimension {self.d}")

    def _forward_cache(self, x: np.ndarray) -> _Cache:
        self._check_input(x)
        hid = np.tanh(x @ self.embed_w + self.embed_b)
        att_t = np.tanh(hid @ self.attn_v)
        if self.variant == "gated":
            att_g = _sigmoid(hid @ self.attn_gate_u)
            scores = (att_t * att_g) @ self.attn_w
        else:
            att_g = None
            scores = att_t @ self.attn_w
        alpha = _softmax(scores)
        pooled = alpha @ hid
        logits = pooled @ self.head_w + self.head_b
        probs = _softmax(logits)
        return _Cache(x, hid, att_t, att_g, scores, alpha, pooled, logits, probs)

    def forward(self, bag) -> ForwardTrace:
        """Class probabilities, pooled embedding, and attention for one bag."""
        cache = self._forward_cache(as_instance_matrix(bag))
        return ForwardTrace(
            probs=cache.probs,
            embedding=cache.pooled,
            attention=cache.alpha,
            predicted=int(cache.probs[1] > cache.probs[0]),
        )

    def _backprop_to_hidden(self, cache: _Cache, g_logits: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the tanh embeddings, including the attention coupling."""
        g_pooled = self.head_w @ g_logits
        g_alpha = cache.hid @ g_pooled
        g_hid = np.outer(cache.alpha, g_pooled)
        # softmax backward: every score moves every attention weight
        g_scores = cache.alpha * (g_alpha - cache.alpha @ g_alpha)
        gw = g_scores[:, None] * self.attn_w
        if self.variant == "gated":
            g_att_pre = gw * cache.att_g * (1.0 - cache.att_t**2)
            g_gate_pre = gw * cache.att_t * cache.att_g * (1.0 - cache.att_g)
            g_hid += g_att_pre @ self.attn_v.T + g_gate_pre @ self.attn_gate_u.T
        else:
            g_att_pre = gw * (1.0 - cache.att_t**2)
            g_hid += g_att_pre @ self.attn_v.T
        return g_hid

    def input_gradient(self, bag, class_c: int) -> np.ndarray:
        """Exact gradient of p[class_c] w.r.t. every instance vector; shape (n, d)."""
        if class_c not in (0, 1):
            raise ValueError(f"class_c must be 0 or 1, got {class_c!r}")
        cache = self._forward_cache(as_instance_matrix(bag))
        p = cache.probs
        onehot = np.zeros(2)
        onehot[class_c] = 1.0
        g_logits = p[class_c] * (onehot - p)
        g_hid = self._backprop_to_hidden(cache, g_logits)
        g_pre = g_hid * (1.0 - cache.hid**2)
        return g_pre @ self.embed_w.T

    def _parameter_gradients(self, cache: _Cache, label: int) -> dict[str, np.ndarray]:
        """Gradients of -log p[label] w.r.t. every parameter."""
        g_logits = cache.probs.copy()
        g_logits[label] -= 1.0
        grads = {
            "head_w": np.outer(cache.pooled, g_logits),
            "head_b": g_logits,
        }
        g_pooled = self.head_w @ g_logits
        g_alpha = cache.hid @ g_pooled
        g_hid = np.outer(cache.alpha, g_pooled)
        g_scores = cache.alpha * (g_alpha - cache.alpha @ g_alpha)
        gw = g_scores[:, None] * self.attn_w
        if self.variant == "gated":
            grads["attn_w"] = (cache.att_t * cache.att_g).T @ g_scores
            g_att_pre = gw * cache.att_g * (1.0 - cache.att_t**2)
            g_gate_pre = gw * cache.att_t * cache.att_g * (1.0 - cache.att_g)
            grads["attn_v"] = cache.hid.T @ g_att_pre
            grads["attn_gate_u"] = cache.hid.T @ g_gate_pre
            g_hid += g_att_pre @ self.attn_v.T + g_gate_pre @ self.attn_gate_u.T
        else:
            grads["attn_w"] = cache.att_t.T @ g_scores
            g_att_pre = gw * (1.0 - cache.att_t**2)
            grads["attn_v"] = cache.hid.T @ g_att_pre
            g_hid += g_att_pre @ self.attn_v.T
        g_pre = g_hid * (1.0 - cache.hid**2)
        grads["embed_w"] = cache.x.T @ g_pre
        grads["embed_b"] = g_pre.sum(axis=0)
        return grads

    def fingerprint(self) -> str:
        """Short stable hash of the serialized parameters."""
        return hashlib.sha256(model_bytes(self)).hexdigest()[:12]


def init_model(
    d: int,
    hidden: int = 128,
    attention_dim: int = 64,
    variant: str = "plain",
    seed: int = 0,
) -> AttentionMILModel:
    """Fresh model with uniform(+-1/sqrt(fan_in)) parameters; deterministic per seed."""
    if min(d, hidden, attention_dim) < 1:
        raise ValueError("d, hidden, and attention_dim must all be at least 1")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    rng = substream(seed, "init")

    def uniform(fan_in: int, *shape: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    embed_w = uniform(d, d, hidden)
    embed_b = uniform(d, hidden)
    attn_v = uniform(hidden, hidden, attention_dim)
    attn_w = uniform(attention_dim, attention_dim)
    attn_gate_u = uniform(hidden, hidden, attention_dim) if variant == "gated" else None
    head_w = uniform(hidden, hidden, 2)
    head_b = uniform(hidden, 2)
    return AttentionMILModel(
        d=d,
        hidden=hidden,
        attention_dim=attention_dim,
        variant=variant,
        seed=seed,
        embed_w=embed_w,
        embed_b=embed_b,
        attn_v=attn_v,
        attn_w=attn_w,
        head_w=head_w,
        head_b=head_b,
        attn_gate_u=attn_gate_u,
    )


def train(
    model: AttentionMILModel,
    dataset: BagDataset,
    epochs: int = 50,
    learning_rate: float = 0.0001,
    seed: int = 0,
    optimizer: str = "adam",
) -> tuple[AttentionMILModel, np.ndarray]:
    """Minimize the bag-label negative log-likelihood, one bag per step.

    Bag visit order is reshuffled every epoch from the run seed. Returns the
    trained model and the per-epoch mean loss. Bit-reproducible for fixed
    (model, dataset, seed).
    """
    if epochs < 1:
        raise ValueError(f"epochs must be at least 1, got {epochs}")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"optimizer must be 'sgd' or 'adam', got {optimizer!r}")
    if dataset.dimension != model.d:
        raise ValueError(f"dataset dimension {dataset.dimension} does not match model dimension {model.d}")
    work = model.copy()
    params = dict(work.parameters())
    rng = substream(seed, "train")
    # Adam state (unused for sgd)
    m_state = {name: np.zeros_like(arr) for name, arr in params.items()}
    v_state = {name: np.zeros_like(arr) for name, arr in params.items()}
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0

    losses = np.zeros(epochs)
    for epoch in range(epochs):
        order = rng.permutation(len(dataset.bags))
        total = 0.0
        for idx in order:
            bag = dataset.bags[idx]
            cache = work._forward_cache(bag.instances)
            loss = -_log_softmax(cache.logits)[bag.label]
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch + 1}, bag id {bag.id}")
            total += loss
            grads = work._parameter_gradients(cache, bag.label)
            step += 1
            for name, arr in params.items():
                g = grads[name]
                if optimizer == "sgd":
                    arr -= learning_rate * g
                else:
                    m_state[name] = beta1 * m_state[name] + (1.0 - beta1) * g
                    v_state[name] = beta2 * v_state[name] + (1.0 - beta2) * g * g
                    m_hat = m_state[name] / (1.0 - beta1**step)
                    v_hat = v_state[name] / (1.0 - beta2**step)
                    arr -= learning_rate * m_hat / (np.sqrt(v_hat) + adam_eps)
        losses[epoch] = total / len(dataset.bags)
    return work, losses


def attention_argmax(trace: ForwardTrace) -> int:
    """Index of the largest attention weight; ties go to the lowest index."""
    if trace.attention.size < 1:
        raise ValueError("trace has no attention entries")
    return int(np.argmax(trace.attention))


def collect_attention(model: AttentionMILModel, dataset: BagDataset) -> np.ndarray:
    """All attention values over the dataset, concatenated bag by bag."""
    return np.concatenate([model.forward(bag).attention for bag in dataset.bags])


def model_bytes(model: AttentionMILModel) -> bytes:
    """Binary serialization: header then parameters as little-endian f64."""
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack(
        "<IBIII",
        MODEL_VERSION,
        VARIANTS.index(model.variant),
        model.d,
        model.hidden,
        model.attention_dim,
    )
    for _, arr in model.parameters():
        buf += arr.astype("<f8").tobytes(order="C")
    return bytes(buf)


def save_model(model: AttentionMILModel, path, train_seed: int | None = None) -> Path:
    """Write ``<name>.milmodel`` plus ``<name>.model.json``; returns the binary path."""
    path = Path(path)
    if path.suffix != ".milmodel":
        path = path.with_suffix(".milmodel")
    path.write_bytes(model_bytes(model))
    meta = {
        "d": model.d,
        "hidden": model.hidden,
        "attention": model.attention_dim,
        "variant": model.variant,
        "seed": model.seed,
        "train_seed": train_seed,
        "fingerprint": model.fingerprint(),
    }
    path.with_suffix(".model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> AttentionMILModel:
    """Read a checkpoint written by :func:`save_model` (metadata JSON optional)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(path, 0, f"expected magic {MODEL_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 21:
        raise FormatError(path, 4, "truncated header")
    version, variant_code, d, hidden, attention_dim = struct.unpack_from("<IBIII", raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if variant_code >= len(VARIANTS):
        raise FormatError(path, 8, f"unknown variant code {variant_code}")
    variant = VARIANTS[variant_code]

    shapes = [("embed_w", (d, hidden)), ("embed_b", (hidden,)), ("attn_v", (hidden, attention_dim)),
              ("attn_w", (attention_dim,))]
    if variant == "gated":
        shapes.append(("attn_gate_u", (hidden, attention_dim)))
    shapes += [("head_w", (hidden, 2)), ("head_b", (2,))]

    offset = 21
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise FormatError(path, offset, f"truncated parameter block {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(path, offset, "trailing data after parameters")

    seed = 0
    meta_path = path.with_suffix(".model.json")
    if meta_path.exists():
        seed = json.loads(meta_path.read_text()).get("seed", 0)
    return AttentionMILModel(
        d=d,
        hidden=hidden,
        attention_dim=attention_dim,
        variant=variant,
        seed=seed,
        attn_gate_u=arrays.get("attn_gate_u"),
        **{k: arrays[k] for k in ("embed_w", "embed_b", "attn_v", "attn_w", "head_w", "head_b")},
    )

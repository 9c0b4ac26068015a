"""Stage 2: modality-specific hash functions fitted to the joint codes.

Each modality gets an encoder ``F^m`` (affine map, or fully-connected ReLU
network) trained jointly on

    1/2 sum_m |F^m - B|^2  -  g1 sum_{m != t} Tr(F^m' F^t)  +  g2 sum_{m,t} |F^m' F^t - n I|^2

over mini-batches of ``n`` paired rows.  Codes for new points are
``sign(F^m(x))`` with sign(0) = +1.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MODEL_MAGIC = b"XMHM"
ARCH_TAGS = {"linear": 0, "mlp": 1}


class TrainingError(RuntimeError):
    pass


@dataclass
class Stage2Config:
    gamma1: float = 100.0
    gamma2: float = 100.0
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    include_self_pairs: bool = True
    mode: str = "joint"          # "joint" or "pretrain" (fidelity-only warm-up, then joint)
    pretrain_epochs: int = 20

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma1 and gamma2 must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.mode not in ("joint", "pretrain"):
            raise ValueError("mode must be 'joint' or 'pretrain'")


# ------------------------------------------------------------------- models


@dataclass
class HashModel:
    """Stack of affine layers; ReLU between layers, none after the last.

    ``layers`` holds ``(W, b)`` pairs with ``W`` of shape (fan_in, fan_out).
    """

    layers: list
    arch: str = "linear"

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def sizes(self) -> list:
        return [self.input_dim] + [W.shape[1] for W, _ in self.layers]

    @classmethod
    def create(cls, input_dim, L, hidden=(), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [input_dim, *hidden, L]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / math.sqrt(fan_in)
            layers.append((rng.uniform(-lim, lim, (fan_in, fan_out)), rng.uniform(-lim, lim, fan_out)))
        return cls(layers, "mlp" if hidden else "linear")

    def forward(self, X, cache=False):
        acts = [np.asarray(X, dtype=np.float64)]
        h = acts[0]
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if cache else h

    def backward(self, acts, grad_out):
        """Parameter gradients given cached activations and dLoss/dOutput."""
        grads = [None] * len(self.layers)
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            grads[i] = (acts[i].T @ g, g.sum(axis=0))
            if i > 0:
                g = (g @ W.T) * (acts[i] > 0)
        return grads

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def set_flat(self, theta):
        pos = 0
        out = []
        for W, b in self.layers:
            nw, nb = W.size, b.size
            out.append((theta[pos:pos + nw].reshape(W.shape).copy(), theta[pos + nw:pos + nw + nb].copy()))
            pos += nw + nb
        self.layers = out

    def round_to_f32(self):
        """Round parameters to float32 precision so in-memory and saved models agree."""
        self.layers = [(W.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64))
                       for W, b in self.layers]


def encode(model: HashModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"feature dimension {X.shape[-1]} does not match model input {model.input_dim}")
    return np.where(model.forward(X) >= 0, 1.0, -1.0)


# --------------------------------------------------------------------- loss


def _pairs(M, include_self):
    return [(a, b) for a in range(M) for b in range(M) if include_self or a != b]


def stage2_loss(outputs: Sequence, B, gamma1, gamma2, include_self_pairs=True, n=None) -> float:
    """Fidelity, cross-modal correlation and independence terms on N x L outputs.

    ``n`` is the scale of the identity target (defaults to the row count).
    """
    B = np.asarray(B, dtype=np.float64)
    Fs = [np.asarray(F, dtype=np.float64) for F in outputs]
    for F in Fs:
        if F.shape != B.shape:
            raise ValueError(f"output shape {F.shape} does not match codes {B.shape}")
    N, L = B.shape
    n = N if n is None else n
    fid = 0.5 * sum(float(((F - B) ** 2).sum()) for F in Fs)
    corr = sum(float((Fs[a] * Fs[b]).sum()) for a in range(len(Fs)) for b in range(len(Fs)) if a != b)
    ind = 0.0
    eye = n * np.eye(L)
    for a, b in _pairs(len(Fs), include_self_pairs):
        E = Fs[a].T @ Fs[b] - eye
        ind += float((E * E).sum())
    return fid - gamma1 * corr + gamma2 * ind


def stage2_output_grads(outputs, B, gamma1, gamma2, include_self_pairs=True, n=None):
    """dLoss/dF^m for every modality."""
    Fs = [np.asarray(F, dtype=np.float64) for F in outputs]
    N, L = B.shape
    n = N if n is None else n
    total = np.sum(Fs, axis=0)
    grads = [(F - B) - 2.0 * gamma1 * (total - F) for F in Fs]
    eye = n * np.eye(L)
    for a, b in _pairs(len(Fs), include_self_pairs):
        E = Fs[a].T @ Fs[b] - eye
        grads[a] = grads[a] + 2.0 * gamma2 * (Fs[b] @ E.T)
        grads[b] = grads[b] + 2.0 * gamma2 * (Fs[a] @ E)
    return grads


def batch_loss_and_grads(models, Xs, B, cfg: Stage2Config, gammas=None, need_grads=True):
    """Loss on one batch (identity target scaled to the batch size) and parameter gradients."""
    g1, g2 = gammas if gammas is not None else (cfg.gamma1, cfg.gamma2)
    outs, caches = zip(*(mdl.forward(X, cache=True) for mdl, X in zip(models, Xs)))
    with np.errstate(over="ignore", invalid="ignore"):
        loss = stage2_loss(outs, B, g1, g2, cfg.include_self_pairs)
    if not need_grads:
        return loss
    dF = stage2_output_grads(outs, B, g1, g2, cfg.include_self_pairs)
    grads = [mdl.backward(c, g) for mdl, c, g in zip(models, caches, dF)]
    return loss, grads


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    models: list
    loss_curve: list = field(default_factory=list)


def _epoch_loss(models, Xs, B, cfg, gammas, batches):
    return sum(batch_loss_and_grads(models, [X[idx] for X in Xs], B[idx], cfg, gammas, need_grads=False)
               for idx in batches)


def _make_batches(n, size, rng):
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + size]) for i in range(0, n, size)]


def train_hash_models(features: Sequence, B, hidden=(), config: Optional[Stage2Config] = None) -> TrainResult:
    """Fit one encoder per modality by mini-batch gradient descent with momentum.

    ``features`` are the training matrices aligned row-wise with ``B``.  The
    recorded loss curve is the full-data sum of per-batch losses after each
    epoch (under the fixed epoch-0 batching, so epochs are comparable).
    """
    cfg = config or Stage2Config()
    B = np.asarray(B, dtype=np.float64)
    Xs = [np.asarray(X, dtype=np.float64) for X in features]
    N, L = B.shape
    if any(X.shape[0] != N for X in Xs):
        raise ValueError("feature rows must align with the code rows")
    rng = np.random.default_rng(cfg.seed)
    models = [HashModel.create(X.shape[1], L, tuple(hidden), rng) for X in Xs]
    vel = [[(np.zeros_like(W), np.zeros_like(b)) for W, b in mdl.layers] for mdl in models]
    eval_batches = _make_batches(N, cfg.batch_size, np.random.default_rng(cfg.seed + 1))

    phases = []
    if cfg.mode == "pretrain" and cfg.pretrain_epochs:
        phases.append(((0.0, 0.0), cfg.pretrain_epochs))
    phases.append(((cfg.gamma1, cfg.gamma2), cfg.epochs))

    curve = [_epoch_loss(models, Xs, B, cfg, phases[-1][0], eval_batches)]
    step = cfg.learning_rate
    for gammas, epochs in phases:
        for epoch in range(epochs):
            for idx in _make_batches(N, cfg.batch_size, rng):
                Xb, Bb = [X[idx] for X in Xs], B[idx]
                scale = 1.0 / len(idx)
                loss, grads = batch_loss_and_grads(models, Xb, Bb, cfg, gammas)
                old = [mdl.layers for mdl in models]
                while True:
                    trial_vel = [[(cfg.momentum * vW - step * scale * gW, cfg.momentum * vb - step * scale * gb)
                                  for (gW, gb), (vW, vb) in zip(g_m, v_m)] for g_m, v_m in zip(grads, vel)]
                    for mdl, layers, v_m in zip(models, old, trial_vel):
                        mdl.layers = [(W + vW, b + vb) for (W, b), (vW, vb) in zip(layers, v_m)]
                    new_loss = batch_loss_and_grads(models, Xb, Bb, cfg, gammas, need_grads=False)
                    if np.isfinite(new_loss) and new_loss <= loss:
                        vel = trial_vel
                        step = min(cfg.learning_rate, step * 1.1)
                        break
                    # overshoot on the quartic terms: shrink the step, drop momentum
                    step *= 0.5
                    vel = [[(np.zeros_like(vW), np.zeros_like(vb)) for vW, vb in v_m] for v_m in vel]
                    if step < cfg.learning_rate * 1e-12:
                        for mdl, layers in zip(models, old):
                            mdl.layers = layers
                        break
            if gammas == phases[-1][0]:
                loss = _epoch_loss(models, Xs, B, cfg, gammas, eval_batches)
                if not np.isfinite(loss):
                    raise TrainingError(f"training diverged at epoch {epoch}; last finite loss {curve[-1]:.6g}")
                curve.append(loss)
    return TrainResult(models, curve)


# ----------------------------------------------------------------- save/load

_MODEL_HEADER = struct.Struct("<4sIII")


def save_model(path, model: HashModel):
    """Header (magic, arch tag, layer count, reserved), layer sizes, then f32 W/b blobs."""
    sizes = model.sizes
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, ARCH_TAGS[model.arch], len(model.layers), 0))
        fh.write(np.asarray(sizes, dtype="<u4").tobytes())
        for W, b in model.layers:
            fh.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path) -> HashModel:
    blob = Path(path).read_bytes()
    magic, tag, n_layers, _ = _MODEL_HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a hash model file")
    arch = {v: k for k, v in ARCH_TAGS.items()}[tag]
    pos = _MODEL_HEADER.size
    sizes = np.frombuffer(blob, dtype="<u4", count=n_layers + 1, offset=pos).astype(int)
    pos += 4 * (n_layers + 1)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.frombuffer(blob, dtype="<f4", count=fan_in * fan_out, offset=pos).reshape(fan_in, fan_out)
        pos += 4 * W.size
        b = np.frombuffer(blob, dtype="<f4", count=fan_out, offset=pos)
        pos += 4 * fan_out
        layers.append((W.astype(np.float64), b.astype(np.float64)))
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after model parameters")
    return HashModel(layers, arch)

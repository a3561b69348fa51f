"""Per-concept LoRA erasure of masked cross-attention with focal timestep sampling.

The loss drives down the attention that the target phrase's tokens receive
inside the concept's mask::

    L = mean_batch  sum_{i in S} sum_layers || A[:, i] * M ||^2

``A`` is the post-softmax cross-attention map of the LoRA-modulated layer on
forward-diffused training latents.  Gradients are analytic (through the
softmax and the ``B @ D`` factorization) and are checked against central
finite differences in the test-suite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DidNotImprove, DimensionMismatch, TimestepOutOfRange, ValidationError
from .numerics import load_matrix, save_matrix, sigmoid, softmax_rows
from .toy_model import ToyModel, find_span, forward_diffuse, image_features, tokenize

KEY = "key"
VALUE = "value"


@dataclass
class LoraModule:
    B: np.ndarray          # d2 x r
    D: np.ndarray          # r x d_attn
    target: str = KEY
    concept_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        if self.B.shape[1] != self.D.shape[0]:
            raise DimensionMismatch(f"B {self.B.shape} and D {self.D.shape} disagree on rank")
        if self.target not in (KEY, VALUE):
            raise ValidationError(f"unknown LoRA target {self.target!r}")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.B @ self.D

    @classmethod
    def init(cls, d2: int, d_attn: int, rank: int, rng, target=KEY, concept_id="",
             init_scale: float = 0.1) -> "LoraModule":
        """B = 0 (so the initial delta vanishes), D small Gaussian."""
        return cls(np.zeros((d2, rank)), init_scale * rng.standard_normal((rank, d_attn)),
                   target, concept_id)

    def copy(self) -> "LoraModule":
        return LoraModule(self.B.copy(), self.D.copy(), self.target, self.concept_id, dict(self.meta))


def apply_lora(W_refined, lora: LoraModule) -> np.ndarray:
    W = np.asarray(W_refined, dtype=np.float64)
    if W.shape != (lora.B.shape[0], lora.D.shape[1]):
        raise DimensionMismatch(f"LoRA delta {lora.B.shape[0]}x{lora.D.shape[1]} vs matrix {W.shape}")
    return W + lora.B @ lora.D


def save_lora(path, lora: LoraModule) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_matrix(path / "B.mat", lora.B)
    save_matrix(path / "D.mat", lora.D)
    man = {"concept_id": lora.concept_id, "target": lora.target, "rank": lora.rank, **lora.meta}
    (path / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=1) + "\n")
    return path


def load_lora(path) -> LoraModule:
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    meta = {k: v for k, v in man.items() if k not in ("concept_id", "target", "rank")}
    return LoraModule(load_matrix(path / "B.mat"), load_matrix(path / "D.mat"),
                      man["target"], man["concept_id"], meta)


# --------------------------------------------------------------------------- timestep sampling

@dataclass(frozen=True)
class CfisDistribution:
    """Difference-of-sigmoids timestep density over the discrete steps 1..T."""

    t1: float
    t2: float
    gamma: float
    T: int

    def __post_init__(self):
        if not self.t1 < self.t2:
            raise ValidationError("CFIS needs t1 < t2")

    @classmethod
    def scaled(cls, T: int, t1_frac: float = 0.2, t2_frac: float = 0.4,
               gamma_ref: float = 0.05, T_ref: int = 1000) -> "CfisDistribution":
        """Bounds as fractions of T; temperature rescaled so the shape over t/T is kept."""
        return cls(t1_frac * T, t2_frac * T, gamma_ref * T_ref / T, T)

    def unnormalized(self) -> np.ndarray:
        t = np.arange(1, self.T + 1, dtype=np.float64)
        return sigmoid(self.gamma * (t - self.t1)) - sigmoid(self.gamma * (t - self.t2))

    def pmf(self) -> np.ndarray:
        u = self.unnormalized()
        return u / u.sum()

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.pmf())
        c[-1] = 1.0
        return c


def cfis_pdf(dist: CfisDistribution, t) -> float:
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > dist.T):
        raise TimestepOutOfRange(f"timestep outside 1..{dist.T}: {t}")
    p = dist.pmf()[t_arr - 1]
    return float(p) if np.ndim(p) == 0 else p


def cfis_sample(dist: CfisDistribution, rng, size=None):
    """Inverse-CDF draw(s) from the discrete density."""
    u = rng.random(size)
    t = np.searchsorted(dist.cdf(), u, side="right") + 1
    t = np.minimum(t, dist.T)
    return int(t) if size is None else t


@dataclass(frozen=True)
class UniformTimesteps:
    T: int

    def pmf(self) -> np.ndarray:
        return np.full(self.T, 1.0 / self.T)


def sample_timesteps(dist, rng, size):
    if isinstance(dist, UniformTimesteps):
        return rng.integers(1, dist.T + 1, size=size)
    return cfis_sample(dist, rng, size)


# --------------------------------------------------------------------------- loss and gradient

@dataclass
class EraseItem:
    latent: np.ndarray
    prompt: list
    mask: np.ndarray       # (16,) on the patch grid
    t: int
    eps: np.ndarray
    span: tuple = None     # target token positions [start, stop) within the prompt


@dataclass
class EraseTrainConfig:
    steps: int = 50
    learning_rate: float = 1.0
    rank: int = 1
    token_set: Sequence[int] | None = None   # None -> each item's own target span
    layers: Sequence[int] = (0,)
    targets: tuple = (KEY, VALUE)
    init_scale: float = 0.1
    sampler: str = "cfis"                    # or "uniform"
    max_grad_norm: float | None = None       # global clipping of the LoRA gradient

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValidationError("max_grad_norm must be positive")
        if self.token_set is not None and len(self.token_set) == 0:
            raise ValidationError("token_set must be non-empty")
        if tuple(self.layers) != (0,):
            raise ValidationError("the toy denoiser has a single cross-attention layer (id 0)")
        if not set(self.targets) <= {KEY, VALUE} or not self.targets:
            raise ValidationError(f"bad LoRA targets {self.targets!r}")


def _item_tokens(item: EraseItem, S):
    if S is not None:
        return list(S)
    if item.span is None:
        raise ValidationError("item has no target span and no token_set was given")
    return list(range(*item.span))


def _item_forward(model: ToyModel, item: EraseItem, W_k):
    z_t = forward_diffuse(item.latent, item.t, item.eps, model.schedule)
    F = image_features(z_t, item.t, model.schedule)[0]
    E = model.condition(model.encode(item.prompt))
    Q = F @ model.denoiser.attn.W_q
    K = E @ W_k
    da = model.denoiser.attn.d_attn
    A = softmax_rows(Q @ K.T / np.sqrt(da))
    return Q, E, A


def _check_layers(layers):
    if tuple(layers) != (0,):
        raise ValidationError("the toy denoiser has a single cross-attention layer (id 0)")


def erasure_loss(model: ToyModel, batch: Sequence[EraseItem], S=None, layers=(0,), W_k=None) -> float:
    """Batch-mean masked attention energy of the target tokens.

    ``S`` indexes positions of the encoded prompt (BOS excluded); ``None``
    uses each item's span.  ``W_k`` overrides the layer's key projection
    (e.g. a LoRA-modulated one).
    """
    _check_layers(layers)
    W_k = model.denoiser.attn.W_k if W_k is None else W_k
    if not batch:
        return 0.0
    total = 0.0
    for item in batch:
        M = np.asarray(item.mask, dtype=np.float64)
        if not M.any():
            continue
        _, _, A = _item_forward(model, item, W_k)
        cols = [i + 1 for i in _item_tokens(item, S)]  # +1 skips the BOS column
        total += float(np.sum((A[:, cols] * M[:, None]) ** 2))
    return total / len(batch)


def erasure_grad_wk(model: ToyModel, batch: Sequence[EraseItem], S=None, layers=(0,), W_k=None):
    """Loss and its gradient with respect to the full key projection."""
    _check_layers(layers)
    W_k = model.denoiser.attn.W_k if W_k is None else W_k
    G = np.zeros_like(W_k)
    total = 0.0
    if not batch:
        return 0.0, G
    da = model.denoiser.attn.d_attn
    for item in batch:
        M = np.asarray(item.mask, dtype=np.float64)
        if not M.any():
            continue
        Q, E, A = _item_forward(model, item, W_k)
        cols = [i + 1 for i in _item_tokens(item, S)]
        dA = np.zeros_like(A)
        sub = A[:, cols] * M[:, None]
        total += float(np.sum(sub * sub))
        dA[:, cols] = 2.0 * sub * M[:, None]
        dLg = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
        dK = dLg.T @ Q / np.sqrt(da)
        G += E.T @ dK
    n = len(batch)
    return total / n, G / n


def erasure_loss_grad(model: ToyModel, loras: dict, batch, S=None, layers=(0,)):
    """Analytic gradients of :func:`erasure_loss` w.r.t. each LoRA's B and D.

    ``loras`` maps ``"key"``/``"value"`` to modules applied on top of the
    model's projections.  Returns ``(loss, {target: (dB, dD)})``.  The map
    depends on the key projection only, so value gradients are zero.
    """
    W_k = model.denoiser.attn.W_k
    if KEY in loras:
        W_k = apply_lora(W_k, loras[KEY])
    loss, G = erasure_grad_wk(model, batch, S, layers, W_k)
    grads = {}
    for target, lo in loras.items():
        if target == KEY:
            grads[target] = (G @ lo.D.T, lo.B.T @ G)
        else:
            grads[target] = (np.zeros_like(lo.B), np.zeros_like(lo.D))
    return loss, grads


def lora_projections(model: ToyModel, loras: dict):
    W_k = model.denoiser.attn.W_k
    W_v = model.denoiser.attn.W_v
    if KEY in loras:
        W_k = apply_lora(W_k, loras[KEY])
    if VALUE in loras:
        W_v = apply_lora(W_v, loras[VALUE])
    return W_k, W_v


# --------------------------------------------------------------------------- training

def make_batch(model: ToyModel, training_set, sampler, rng) -> list[EraseItem]:
    """Draw t and noise for each (latent, prompt, mask) triple."""
    n = len(training_set)
    ts = sample_timesteps(sampler, rng, n)
    out = []
    for (z0, prompt, mask), t in zip(training_set, ts):
        eps = rng.standard_normal(np.shape(z0))
        toks = tokenize(prompt)
        out.append(EraseItem(z0, toks, mask, int(t), eps, _target_span(model, toks)))
    return out


def _target_span(model: ToyModel, toks):
    for i, tok in enumerate(toks):
        if model.concept_of_token(tok) is not None and model.concept_of_token(tok).super_category:
            return (i, i + 1)
    return None


def train_lora(model_refined: ToyModel, concept: str, training_set, config: EraseTrainConfig,
               sampler, rng, require_improvement: bool = True) -> dict[str, LoraModule]:
    """Plain gradient descent on freshly initialised key/value LoRA modules.

    Every step draws new timesteps (from ``sampler``) and noise for the whole
    training set.  Improvement is judged on a fixed evaluation batch drawn
    before training.
    """
    d2 = model_refined.encoder.dim
    da = model_refined.denoiser.attn.d_attn
    loras = {tgt: LoraModule.init(d2, da, config.rank, rng, tgt, concept, config.init_scale)
             for tgt in config.targets}
    eval_batch = make_batch(model_refined, training_set, sampler, rng)

    def eval_loss():
        W_k, _ = lora_projections(model_refined, loras)
        return erasure_loss(model_refined, eval_batch, config.token_set, config.layers, W_k)

    initial = eval_loss()
    history = []
    for _ in range(config.steps):
        batch = make_batch(model_refined, training_set, sampler, rng)
        loss, grads = erasure_loss_grad(model_refined, loras, batch, config.token_set, config.layers)
        history.append(loss)
        if config.max_grad_norm is not None:
            norm = np.sqrt(sum(np.sum(dB * dB) + np.sum(dD * dD) for dB, dD in grads.values()))
            if norm > config.max_grad_norm:
                scale = config.max_grad_norm / norm
                grads = {k: (dB * scale, dD * scale) for k, (dB, dD) in grads.items()}
        for tgt, (dB, dD) in grads.items():
            lo = loras[tgt]
            lo.B = lo.B - config.learning_rate * dB
            lo.D = lo.D - config.learning_rate * dD
    final = eval_loss()
    if require_improvement and config.learning_rate > 0 and not final < initial:
        raise DidNotImprove(f"{concept}: erasure loss {initial:.6g} -> {final:.6g}")
    for lo in loras.values():
        lo.meta.update(steps=config.steps, learning_rate=config.learning_rate,
                       initial_loss=initial, final_loss=final, sampler=config.sampler,
                       loss_history=history)
    return loras

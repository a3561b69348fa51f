"""A miniature text-conditioned latent diffusion model.

Latents are 8x8 single-channel images cut into a 4x4 grid of 2x2 patches.
A one-layer bidirectional attention encoder turns prompts into context-mixed
token embeddings; a single cross-attention layer lets each patch attend over
those embeddings; a linear head reads the attended values and predicts the
clean latent, which is converted to a noise prediction.

Conventions: projections act on row vectors (``K = E @ W_k`` with ``W_k`` of
shape ``d2 x d_attn``).  The closed-form editors in :mod:`mace_toy.cfr` use the
column convention, i.e. they operate on ``W_k.T``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cfr import MappingPair
from .errors import (DidNotConverge, DimensionMismatch, SpanOutOfRange,
                     TimestepOutOfRange, UnknownToken, ValidationError)
from .numerics import load_matrix, make_rng, save_matrix, softmax_rows

BOS = "<bos>"
EOS = "<eos>"
LATENT = 8
PATCH = 2
GRID = LATENT // PATCH
N_PATCHES = GRID * GRID
PATCH_DIM = PATCH * PATCH
D_IMG = PATCH_DIM + N_PATCHES + 3

DEFAULT_FILLERS = ("a", "an", "the", "photo", "image", "picture", "painting", "sketch",
                   "of", "with", "in", "close", "view", "scene")
DEFAULT_TEMPLATES = ("a photo of the {}", "an image of a {}", "a picture of the {}",
                     "a painting of a {}", "a sketch of the {}", "a close view of {}")


# --------------------------------------------------------------------------- vocabulary

@dataclass
class TinyVocab:
    tokens: list[str]

    def __post_init__(self):
        self.tokens = list(self.tokens)
        if self.tokens.count(EOS) != 1:
            raise ValidationError("vocabulary must contain exactly one EOS token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("duplicate tokens in vocabulary")
        if len(self.tokens) > 64:
            raise ValidationError("toy vocabulary is limited to 64 tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self._index

    def id(self, tok: str) -> int:
        try:
            return self._index[tok]
        except KeyError:
            raise UnknownToken(f"unknown token {tok!r}") from None

    def ids(self, prompt: Sequence[str]) -> list[int]:
        return [self.id(t) for t in prompt]


def tokenize(prompt) -> list[str]:
    """Whitespace tokenization; EOS is appended if absent."""
    toks = prompt.split() if isinstance(prompt, str) else list(prompt)
    if not toks or toks[-1] != EOS:
        toks.append(EOS)
    return toks


@dataclass
class ConceptSpec:
    name: str
    pattern: np.ndarray
    mask_threshold: float = 0.5
    super_category: str = ""
    synonyms: tuple[str, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.pattern, dtype=np.float64).reshape(LATENT, LATENT)
        peak = np.max(np.abs(p))
        if peak <= 0:
            raise ValidationError(f"concept {self.name!r} has an all-zero pattern")
        self.pattern = p / peak
        self.synonyms = tuple(self.synonyms)

    @property
    def tokens(self) -> tuple[str, ...]:
        return (self.name,) + self.synonyms


def random_patch_patterns(n: int, rng, support: int = 6, max_overlap: int = 3,
                          max_tries: int = 2000) -> list[np.ndarray]:
    """Binary 8x8 patterns, constant on 2x2 patches, with bounded pairwise overlap."""
    for _ in range(max_tries):
        chosen: list[np.ndarray] = []
        for _ in range(50 * n):
            cells = np.zeros(N_PATCHES, dtype=bool)
            cells[rng.choice(N_PATCHES, size=support, replace=False)] = True
            if all(np.sum(cells & c) <= max_overlap for c in chosen):
                chosen.append(cells)
                if len(chosen) == n:
                    return [patches_to_latent(np.repeat(c.astype(float)[:, None], PATCH_DIM, axis=1))
                            for c in chosen]
    raise ValidationError("could not place distinct concept patterns")


# --------------------------------------------------------------------------- patch helpers

def latent_to_patches(z: np.ndarray) -> np.ndarray:
    """(..., 8, 8) -> (..., 16, 4)"""
    lead = z.shape[:-2]
    p = z.reshape(*lead, GRID, PATCH, GRID, PATCH)
    p = np.moveaxis(p, -3, -2)
    return p.reshape(*lead, N_PATCHES, PATCH_DIM)


def patches_to_latent(p: np.ndarray) -> np.ndarray:
    lead = p.shape[:-2]
    z = p.reshape(*lead, GRID, GRID, PATCH, PATCH)
    z = np.moveaxis(z, -2, -3)
    return z.reshape(*lead, LATENT, LATENT)


# --------------------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    """Discrete schedule with ``alpha_bar[0] = 1`` and ``alpha_bar[T] > 0``."""

    T: int
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, T: int = 100, alpha_bar_min: float = 0.01) -> "NoiseSchedule":
        t = np.arange(T + 1)
        return cls(T, 1.0 - (1.0 - alpha_bar_min) * t / T)

    def check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise TimestepOutOfRange(f"timestep outside 1..{self.T}: {t}")


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    schedule.check(t)
    ab = schedule.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(z0) - np.ndim(ab)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# --------------------------------------------------------------------------- text encoder

@dataclass
class TextEncoder:
    embed_table: np.ndarray
    mix_Wq: np.ndarray
    mix_Wk: np.ndarray
    mix_Wv: np.ndarray

    @property
    def dim(self) -> int:
        return self.embed_table.shape[1]

    def encode_ids(self, ids: Sequence[int]) -> np.ndarray:
        X = self.embed_table[np.asarray(ids)]
        S = (X @ self.mix_Wq) @ (X @ self.mix_Wk).T / np.sqrt(self.dim)
        return X + softmax_rows(S) @ (X @ self.mix_Wv)


def encode_prompt(vocab: TinyVocab, encoder: TextEncoder, prompt) -> np.ndarray:
    """Context-mixed embeddings ``(y, d2)`` for a prompt (EOS appended)."""
    return encoder.encode_ids(vocab.ids(tokenize(prompt)))


# --------------------------------------------------------------------------- denoiser

@dataclass
class CrossAttentionLayer:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray

    @property
    def d_attn(self) -> int:
        return self.W_q.shape[1]


@dataclass
class ToyDenoiser:
    attn: CrossAttentionLayer
    W_o: np.ndarray
    b_o: np.ndarray


def image_features(z_t: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Per-patch features: pixels, one-hot position, noise level, bias -> (B, 16, D_IMG)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim == 2:
        z_t = z_t[None]
    B = z_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    ab = schedule.alpha_bar[t]
    F = np.empty((B, N_PATCHES, D_IMG))
    F[..., :PATCH_DIM] = latent_to_patches(z_t)
    F[..., PATCH_DIM:PATCH_DIM + N_PATCHES] = np.eye(N_PATCHES)
    F[..., -3] = np.sqrt(ab)[:, None]
    F[..., -2] = np.sqrt(1.0 - ab)[:, None]
    F[..., -1] = 1.0
    return F


def attention_map(layer: CrossAttentionLayer, image_feats, embeddings, W_k=None) -> np.ndarray:
    """softmax(q k^T / sqrt(d)); works on single ``(P, d_img)`` or batched inputs."""
    W_k = layer.W_k if W_k is None else W_k
    F = np.asarray(image_feats, dtype=np.float64)
    E = np.asarray(embeddings, dtype=np.float64)
    if F.shape[-1] != layer.W_q.shape[0] or E.shape[-1] != W_k.shape[0]:
        raise DimensionMismatch(f"features {F.shape} / embeddings {E.shape} do not fit the layer")
    Q = F @ layer.W_q
    K = E @ W_k
    return softmax_rows(Q @ np.swapaxes(K, -1, -2) / np.sqrt(layer.d_attn))


@dataclass
class ToyModel:
    """Complete toy model state (vocabulary, encoder, denoiser, schedule, concepts)."""

    vocab: TinyVocab
    encoder: TextEncoder
    denoiser: ToyDenoiser
    schedule: NoiseSchedule
    concepts: list[ConceptSpec]
    meta: dict = field(default_factory=dict)

    # -- helpers
    def concept(self, name: str) -> ConceptSpec:
        for c in self.concepts:
            if c.name == name:
                return c
        raise UnknownToken(f"unknown concept {name!r}")

    def concept_of_token(self, tok: str) -> ConceptSpec | None:
        for c in self.concepts:
            if tok in c.tokens:
                return c
        return None

    def encode(self, prompt) -> np.ndarray:
        return encode_prompt(self.vocab, self.encoder, prompt)

    @property
    def bos(self) -> np.ndarray:
        """Context-free begin-token embedding, always visible to cross-attention."""
        return self.encoder.embed_table[self.vocab.id(BOS)]

    def condition(self, embeddings) -> np.ndarray:
        """Prepend the BOS embedding to encoder outputs ``(..., y, d2)``."""
        E = np.asarray(embeddings, dtype=np.float64)
        bos = np.broadcast_to(self.bos, E.shape[:-2] + (1, E.shape[-1]))
        return np.concatenate([bos, E], axis=-2)

    def copy(self) -> "ToyModel":
        return dataclasses.replace(
            self,
            encoder=TextEncoder(*(a.copy() for a in dataclasses.astuple(self.encoder))),
            denoiser=ToyDenoiser(
                CrossAttentionLayer(self.denoiser.attn.W_q.copy(), self.denoiser.attn.W_k.copy(),
                                    self.denoiser.attn.W_v.copy()),
                self.denoiser.W_o.copy(), self.denoiser.b_o.copy()),
            concepts=list(self.concepts),
            meta=dict(self.meta),
        )

    def with_projections(self, W_k=None, W_v=None) -> "ToyModel":
        m = self.copy()
        if W_k is not None:
            m.denoiser.attn.W_k = np.array(W_k, dtype=np.float64)
        if W_v is not None:
            m.denoiser.attn.W_v = np.array(W_v, dtype=np.float64)
        return m

    # -- forward
    def predict_x0(self, z_t, t, embeddings, W_k=None, W_v=None) -> np.ndarray:
        """Predicted clean latent, batched over the leading axis of ``z_t``."""
        at = self.denoiser.attn
        W_k = at.W_k if W_k is None else W_k
        W_v = at.W_v if W_v is None else W_v
        F = image_features(z_t, t, self.schedule)
        E = self.condition(embeddings)
        A = attention_map(at, F, E, W_k)
        O = A @ (E @ W_v)
        return patches_to_latent(O @ self.denoiser.W_o + self.denoiser.b_o)

    def predict_eps(self, z_t, t, embeddings, **kw) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        squeeze = z_t.ndim == 2
        z = z_t[None] if squeeze else z_t
        t_arr = np.broadcast_to(np.asarray(t), (z.shape[0],))
        self.schedule.check(t_arr)
        ab = self.schedule.alpha_bar[t_arr][:, None, None]
        x0 = self.predict_x0(z, t_arr, embeddings, **kw)
        eps = (z - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        return eps[0] if squeeze else eps


def ldm_loss(model: ToyModel, z0, prompt, t, eps) -> float:
    """Squared error between the true noise and the model's noise prediction."""
    z_t = forward_diffuse(z0, t, eps, model.schedule)
    pred = model.predict_eps(z_t, t, model.encode(prompt))
    return float(np.sum((np.asarray(eps) - pred) ** 2))


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    steps = max(1, min(int(steps), T))
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]
    return ts


def ddim_sample_embeddings(model: ToyModel, embeddings, steps: int, rng=None, n: int = 1,
                           z_T=None, **kw) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from ``z_T``; returns ``(n, 8, 8)``."""
    if z_T is None:
        z_T = rng.standard_normal((n, LATENT, LATENT))
    z = np.array(z_T, dtype=np.float64)
    ab = model.schedule.alpha_bar
    ts = ddim_timesteps(model.schedule.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        x0 = model.predict_x0(z, t, embeddings, **kw)
        eps = (z - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])
        z = np.sqrt(ab[t_prev]) * x0 + np.sqrt(1.0 - ab[t_prev]) * eps
    return z


def ddim_sample(model: ToyModel, prompt, steps: int = 20, rng=None, n: int = 1, **kw) -> np.ndarray:
    out = ddim_sample_embeddings(model, model.encode(prompt), steps, rng, n=n, **kw)
    return out


# --------------------------------------------------------------------------- construction

def init_toy_model(concepts: Sequence[ConceptSpec], seed: int, d2: int = 32, d_attn: int = 16,
                   T: int = 100, fillers: Sequence[str] = DEFAULT_FILLERS,
                   mix_strength: float = 2.0, synonym_noise: float = 0.35,
                   family_weight: float = 0.0) -> ToyModel:
    """Random initial model.

    Non-synonym tokens get orthonormal embeddings (while they fit in ``d2``);
    with ``family_weight`` > 0 each concept is then tilted towards its
    super-category, so concepts of one family are correlated.  Synonyms are
    placed near their concept's embedding.
    """
    concepts = list(concepts)
    names = [c.name for c in concepts]
    supers = [c.super_category for c in concepts if c.super_category and c.super_category not in names]
    base = [BOS, EOS, *fillers, *dict.fromkeys(supers), *names]
    synonyms = [s for c in concepts for s in c.synonyms]
    vocab = TinyVocab(base + synonyms)

    rng = make_rng(seed, "init")
    table = np.zeros((len(vocab), d2))
    G = rng.standard_normal((d2, max(d2, len(base))))
    if len(base) <= d2:
        Qm, _ = np.linalg.qr(G[:, :len(base)])
        table[:len(base)] = Qm.T
    else:
        table[:len(base)] = (G / np.linalg.norm(G, axis=0)).T[:len(base)]
    if family_weight:
        for c in concepts:
            if c.super_category and c.super_category != c.name:
                v = table[vocab.id(c.name)] + family_weight * table[vocab.id(c.super_category)]
                table[vocab.id(c.name)] = v / np.linalg.norm(v)
    for c in concepts:
        b = table[vocab.id(c.name)]
        for syn in c.synonyms:
            v = b + synonym_noise * rng.standard_normal(d2) / np.sqrt(d2)
            table[vocab.id(syn)] = v / np.linalg.norm(v)
    mix_Wq = rng.standard_normal((d2, d2)) / np.sqrt(d2)
    mix_Wk = rng.standard_normal((d2, d2)) / np.sqrt(d2)
    mix_Wv = mix_strength * (np.eye(d2) + 0.1 * rng.standard_normal((d2, d2)) / np.sqrt(d2))
    encoder = TextEncoder(table, mix_Wq, mix_Wk, mix_Wv)

    attn = CrossAttentionLayer(
        W_q=rng.standard_normal((D_IMG, d_attn)) / np.sqrt(D_IMG),
        W_k=rng.standard_normal((d2, d_attn)) / np.sqrt(d2),
        W_v=rng.standard_normal((d2, d_attn)) / np.sqrt(d2),
    )
    den = ToyDenoiser(attn, 0.1 * rng.standard_normal((d_attn, PATCH_DIM)) / np.sqrt(d_attn),
                      np.zeros(PATCH_DIM))
    meta = {"seed": int(seed), "d2": d2, "d_attn": d_attn, "T": T, "mix_strength": mix_strength,
            "family_weight": family_weight}
    return ToyModel(vocab, encoder, den, NoiseSchedule.linear(T), concepts, meta)


def concept_prompts(concept: ConceptSpec, templates=DEFAULT_TEMPLATES, synonyms: bool = True):
    toks = concept.tokens if synonyms else (concept.name,)
    return [tokenize(tpl.format(tok)) for tok in toks for tpl in templates]


# --------------------------------------------------------------------------- pretraining

_PARAMS = ("W_q", "W_k", "W_v", "W_o", "b_o")


def _get_params(model):
    a = model.denoiser.attn
    return {"W_q": a.W_q, "W_k": a.W_k, "W_v": a.W_v, "W_o": model.denoiser.W_o, "b_o": model.denoiser.b_o}


def x0_loss_and_grads(model: ToyModel, z_t, t, E, x0):
    """Mean clean-latent squared error over a batch and its parameter gradients.

    ``E`` is ``(B, y, d2)``; every prompt in the batch has the same length.
    """
    a = model.denoiser.attn
    B = z_t.shape[0]
    da = a.d_attn
    E = model.condition(E)
    F = image_features(z_t, t, model.schedule)
    Q = F @ a.W_q
    K = E @ a.W_k
    V = E @ a.W_v
    A = softmax_rows(Q @ np.swapaxes(K, 1, 2) / np.sqrt(da))
    O = A @ V
    pred = O @ model.denoiser.W_o + model.denoiser.b_o
    target = latent_to_patches(x0)
    diff = pred - target
    loss = float(np.sum(diff * diff)) / B

    dP = 2.0 * diff / B
    g = {"W_o": np.einsum("bpd,bpk->dk", O, dP), "b_o": dP.sum(axis=(0, 1))}
    dO = dP @ model.denoiser.W_o.T
    dA = dO @ np.swapaxes(V, 1, 2)
    dV = np.swapaxes(A, 1, 2) @ dO
    dL = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(da)
    dQ = dL @ K
    dK = np.swapaxes(dL, 1, 2) @ Q
    g["W_q"] = np.einsum("bpi,bpj->ij", F, dQ)
    g["W_k"] = np.einsum("byi,byj->ij", E, dK)
    g["W_v"] = np.einsum("byi,byj->ij", E, dV)
    return loss, g


def _sample_batch(model, prompts_by_class, rng, batch, drop_prob=0.0, amp_range=(0.8, 1.2),
                  pixel_noise=0.05):
    """One batch drawn from a single prompt length; returns z0, E, class ids.

    With probability ``drop_prob`` the concept token's embedding is replaced
    by the prompt's final EOS embedding, so concept identity must also be read
    from the co-existing words.
    """
    classes = list(prompts_by_class)
    cls = rng.integers(len(classes), size=batch)
    pick = rng.random(batch)
    drop = rng.random(batch) < drop_prob
    amp = rng.uniform(*amp_range, size=batch)
    noise = rng.standard_normal((batch, LATENT, LATENT))
    E = []
    z0 = np.empty((batch, LATENT, LATENT))
    for b, ci in enumerate(cls):
        c = classes[ci]
        plist = prompts_by_class[c]
        emb, pos = plist[int(pick[b] * len(plist))]
        if drop[b]:
            emb = emb.copy()
            emb[pos] = emb[-1]
        E.append(emb)
        z0[b] = amp[b] * model.concept(c).pattern + pixel_noise * noise[b]
    return z0, np.stack(E), cls


def pretrain_toy(model: ToyModel, steps: int = 3000, seed: int = 0, batch: int = 64,
                 lr: float = 0.01, templates=DEFAULT_TEMPLATES, drop_prob: float = 0.3,
                 gate: bool = True, gate_samples: int = 16, gate_steps: int = 20,
                 log=None) -> ToyModel:
    """Adam on the denoiser (encoder frozen) with a clean-latent regression loss.

    Returns a trained copy.  With ``gate`` set, every concept must be sampled
    back and recognised by the pattern classifier at >= 0.95 accuracy.
    """
    if len(model.concepts) < 2:
        raise ValidationError("pretraining needs at least two concepts")
    m = model.copy()
    rng = make_rng(seed, "pretrain")
    by_len: dict[int, dict[str, list]] = {}
    for c in m.concepts:
        for tok in c.tokens:
            for tpl in templates:
                p = tokenize(tpl.format(tok))
                by_len.setdefault(len(p), {}).setdefault(c.name, []).append(
                    (m.encode(p), p.index(tok)))
    groups = [by_len[k] for k in sorted(by_len)]

    params = _get_params(m)
    mom = {k: np.zeros_like(v) for k, v in params.items()}
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2 = 0.9, 0.999
    history = []
    for step in range(1, steps + 1):
        grp = groups[rng.integers(len(groups))]
        z0, E, _ = _sample_batch(m, grp, rng, batch, drop_prob)
        t = rng.integers(1, m.schedule.T + 1, size=batch)
        eps = rng.standard_normal(z0.shape)
        z_t = forward_diffuse(z0, t, eps, m.schedule)
        loss, g = x0_loss_and_grads(m, z_t, t, E, z0)
        history.append(loss)
        rate = lr * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / steps))
        for k in _PARAMS:
            mom[k] = b1 * mom[k] + (1 - b1) * g[k]
            vel[k] = b2 * vel[k] + (1 - b2) * g[k] ** 2
            mhat = mom[k] / (1 - b1 ** step)
            vhat = vel[k] / (1 - b2 ** step)
            params[k] -= rate * mhat / (np.sqrt(vhat) + 1e-8)
        if log is not None and (step % 500 == 0 or step == steps):
            log(f"pretrain step {step}/{steps} loss {np.mean(history[-100:]):.5f}")
    m.meta["pretrain_steps"] = steps
    m.meta["pretrain_seed"] = int(seed)
    m.meta["pretrain_final_loss"] = float(np.mean(history[-100:]))
    if gate:
        acc = pattern_gate(m, seed, gate_samples, gate_steps)
        bad = {k: v for k, v in acc.items() if v < 0.95}
        if bad:
            raise DidNotConverge(f"pretraining gate failed: {bad}")
        m.meta["pretrain_gate"] = acc
    return m


def pattern_correlations(latents, patterns) -> np.ndarray:
    """Normalized correlation of each latent with each pattern -> (n, k)."""
    Z = np.asarray(latents, dtype=np.float64).reshape(-1, LATENT * LATENT)
    P = np.asarray(patterns, dtype=np.float64).reshape(-1, LATENT * LATENT)
    Zn = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
    Pn = P / np.maximum(np.linalg.norm(P, axis=1, keepdims=True), 1e-12)
    return Zn @ Pn.T


def pattern_gate(model: ToyModel, seed: int, n: int = 16, steps: int = 20) -> dict[str, float]:
    """Per-concept accuracy of samples judged against the true concept patterns."""
    patterns = np.stack([c.pattern for c in model.concepts])
    out = {}
    for ci, c in enumerate(model.concepts):
        rng = make_rng(seed, "gate", c.name)
        z = ddim_sample(model, concept_prompts(c, synonyms=False)[0], steps, rng, n=n)
        pred = np.argmax(pattern_correlations(z, patterns), axis=1)
        out[c.name] = float(np.mean(pred == ci))
    return out


# --------------------------------------------------------------------------- erasure helpers

def _replace_span(tokens, span, replacement):
    start, stop = span
    return tokens[:start] + [replacement] + tokens[stop:]


def extract_mapping_pairs(vocab: TinyVocab, encoder: TextEncoder, prompt_with_target,
                          target_span: tuple[int, int], replacement: str) -> list[MappingPair]:
    """Pairs (e_f, e_g) for every non-target position, EOS included.

    ``target_span`` is a half-open token range ``[start, stop)`` inside the
    prompt (EOS is never part of the target).
    """
    toks = tokenize(prompt_with_target)
    start, stop = target_span
    if not (0 <= start < stop <= len(toks) - 1):
        raise SpanOutOfRange(f"span {target_span} outside prompt of {len(toks) - 1} words")
    vocab.id(replacement)
    swapped = _replace_span(toks, target_span, replacement)
    Ef = encoder.encode_ids(vocab.ids(toks))
    Eg = encoder.encode_ids(vocab.ids(swapped))
    shift = (stop - start) - 1
    pairs = []
    for i, tok in enumerate(toks):
        if start <= i < stop:
            continue
        j = i if i < start else i - shift
        pairs.append(MappingPair(Ef[i], Eg[j], position=i, token=tok))
    return pairs


def find_span(tokens, phrase) -> tuple[int, int]:
    words = phrase.split() if isinstance(phrase, str) else list(phrase)
    for i in range(len(tokens) - len(words) + 1):
        if tokens[i:i + len(words)] == words:
            return i, i + len(words)
    raise SpanOutOfRange(f"{phrase!r} not found in {tokens}")


def probe_embeddings(model: ToyModel, prompt, target_span, replace_with: str = "eos") -> np.ndarray:
    toks = tokenize(prompt)
    start, stop = target_span
    if not (0 <= start < stop <= len(toks) - 1):
        raise SpanOutOfRange(f"span {target_span} outside prompt")
    E = model.encode(toks).copy()
    if replace_with == "eos":
        E[start:stop] = E[-1]
    return E


def residual_probe(model: ToyModel, prompt, target_span, steps: int = 20, rng=None, n: int = 1,
                   replace_with: str = "eos") -> np.ndarray:
    """Sample with the target tokens' embeddings overwritten by the final EOS embedding.

    ``replace_with="self"`` keeps the original embeddings (identity rewrite).
    """
    E = probe_embeddings(model, prompt, target_span, replace_with)
    return ddim_sample_embeddings(model, E, steps, rng, n=n)


def synth_mask(latent, concept: ConceptSpec) -> np.ndarray:
    """Patch-grid (16,) binary mask of where ``concept`` shows up in ``latent``.

    The latent must correlate with the pattern above ``mask_threshold``
    globally; inside that, pixels on the pattern's support that agree in sign
    are marked and max-pooled onto the 4x4 patch grid.
    """
    z = np.asarray(latent, dtype=np.float64).reshape(LATENT, LATENT)
    p = concept.pattern
    ncc = pattern_correlations(z[None], p[None])[0, 0]
    if ncc <= concept.mask_threshold:
        return np.zeros(N_PATCHES)
    pix = (p >= 0.5) & (z * p > 0)
    return latent_to_patches(pix.astype(np.float64)).max(axis=-1)


def generate_training_set(model: ToyModel, concept: ConceptSpec, count: int = 8, rng=None,
                          steps: int = 20, templates=DEFAULT_TEMPLATES):
    """``count`` (latent, prompt, mask) triples sampled from the model for one concept."""
    out = []
    prompts = concept_prompts(concept, templates, synonyms=False)
    for i in range(count):
        prompt = prompts[i % len(prompts)]
        z = ddim_sample(model, prompt, steps, rng, n=1)[0]
        out.append((z, prompt, synth_mask(z, concept)))
    return out


# --------------------------------------------------------------------------- checkpoints

_MATRICES = {
    "embed_table": lambda m: m.encoder.embed_table,
    "mix_Wq": lambda m: m.encoder.mix_Wq,
    "mix_Wk": lambda m: m.encoder.mix_Wk,
    "mix_Wv": lambda m: m.encoder.mix_Wv,
    "W_q": lambda m: m.denoiser.attn.W_q,
    "W_k": lambda m: m.denoiser.attn.W_k,
    "W_v": lambda m: m.denoiser.attn.W_v,
    "W_o": lambda m: m.denoiser.W_o,
    "b_o": lambda m: m.denoiser.b_o[None, :],
    "alpha_bar": lambda m: m.schedule.alpha_bar[None, :],
}


def _fmt(v) -> str:
    # JSON keeps floats exact (shortest repr) and nests dicts and lists
    return json.dumps(v, sort_keys=True, default=float)


def save_checkpoint(model: ToyModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, get in _MATRICES.items():
        save_matrix(path / f"{name}.mat", get(model))
    for c in model.concepts:
        save_matrix(path / f"pattern_{c.name}.mat", c.pattern)
    lines = [
        "format = mace-toy-checkpoint/1",
        f"vocab = {','.join(model.vocab.tokens)}",
        f"d2 = {model.encoder.dim}",
        f"d_attn = {model.denoiser.attn.d_attn}",
        f"T = {model.schedule.T}",
        f"concepts = {','.join(c.name for c in model.concepts)}",
    ]
    for c in model.concepts:
        lines.append(f"concept.{c.name} = super={c.super_category}|threshold={c.mask_threshold!r}"
                     f"|synonyms={'+'.join(c.synonyms)}")
    for k in sorted(model.meta):
        lines.append(f"meta.{k} = {_fmt(model.meta[k])}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> ToyModel:
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path / 'manifest.txt'}")
    man = read_manifest(path / "manifest.txt")
    mats = {name: load_matrix(path / f"{name}.mat") for name in _MATRICES}
    vocab = TinyVocab(man["vocab"].split(","))
    concepts = []
    for name in man["concepts"].split(","):
        fields = dict(kv.split("=", 1) for kv in man[f"concept.{name}"].split("|"))
        syn = tuple(s for s in fields["synonyms"].split("+") if s)
        concepts.append(ConceptSpec(name, load_matrix(path / f"pattern_{name}.mat"),
                                    float(fields["threshold"]), fields["super"], syn))
    meta = {}
    for k, v in man.items():
        if k.startswith("meta."):
            meta[k[5:]] = json.loads(v)
    encoder = TextEncoder(mats["embed_table"], mats["mix_Wq"], mats["mix_Wk"], mats["mix_Wv"])
    den = ToyDenoiser(CrossAttentionLayer(mats["W_q"], mats["W_k"], mats["W_v"]),
                      mats["W_o"], mats["b_o"][0])
    ab = mats["alpha_bar"][0]
    return ToyModel(vocab, encoder, den, NoiseSchedule(len(ab) - 1, ab), concepts, meta)


def weights_digest(model: ToyModel, exclude=("W_k", "W_v")) -> str:
    """SHA-256 over every stored matrix except the excluded ones."""
    h = hashlib.sha256()
    for name, get in _MATRICES.items():
        if name in exclude:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(get(model), dtype="<f8").tobytes())
    return h.hexdigest()

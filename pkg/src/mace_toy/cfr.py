"""Closed-form editors for a linear projection ``W`` (d1 x d2, acting as ``W @ e``).

Two problems are solved here:

* refinement: map the keys/values of words that co-occur with an erased
  phrase onto the keys/values the same words receive when the phrase is
  swapped for a harmless replacement, while anchoring prior embeddings;
* fusion: find one matrix reproducing the action of several independently
  trained LoRA-modulated matrices on their own prompt embeddings, again
  anchored on prior embeddings.

Both are ridge-type least squares with a shared right factor of the form
``sum e e^T + lambda * G`` and are solved through :class:`SpdFactor`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, WeightsNotNormalized
from .numerics import SpdFactor, as_matrix, load_matrix, save_matrix

GENERAL = "general"
DOMAIN = "domain_specific"


@dataclass(frozen=True)
class MappingPair:
    """Embedding of one co-existing word under the original prompt (``e_f``)
    and under the prompt with the target replaced (``e_g``)."""

    e_f: np.ndarray
    e_g: np.ndarray
    position: int = -1
    token: str = ""

    def __post_init__(self):
        if np.shape(self.e_f) != np.shape(self.e_g):
            raise DimensionMismatch("e_f and e_g differ in dimension")


@dataclass(frozen=True)
class PriorCache:
    gram: np.ndarray
    cross: np.ndarray
    count: int
    kind: str = GENERAL

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    def merge(self, other: "PriorCache") -> "PriorCache":
        if self.gram.shape != other.gram.shape or self.cross.shape != other.cross.shape:
            raise DimensionMismatch("cannot merge caches of different shapes")
        return PriorCache(self.gram + other.gram, self.cross + other.cross,
                          self.count + other.count, self.kind)


def _stack(embeddings, d2: int | None = None) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.size == 0:
        return np.zeros((0, d2 or 0))
    if E.ndim == 1:
        E = E[None, :]
    if d2 is not None and E.shape[1] != d2:
        raise DimensionMismatch(f"embedding dim {E.shape[1]} != {d2}")
    return E


def build_prior_cache(W, embeddings, kind: str = GENERAL) -> PriorCache:
    """Accumulate ``sum e e^T`` and ``sum (W e) e^T`` over the embeddings.

    Accumulation is strictly sequential (embedding order, then column order
    inside ``W e``) so the result does not depend on BLAS blocking.
    """
    W = as_matrix(W)
    d1, d2 = W.shape
    E = _stack(embeddings, d2)
    gram = np.zeros((d2, d2))
    cross = np.zeros((d1, d2))
    for e in E:
        we = np.zeros(d1)
        for k in range(d2):
            we += W[:, k] * e[k]
        gram += np.multiply.outer(e, e)
        cross += np.multiply.outer(we, e)
    return PriorCache(gram, cross, E.shape[0], kind)


def save_prior_cache(path, cache: PriorCache, weight: float | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_matrix(path / "gram.mat", cache.gram)
    save_matrix(path / "cross.mat", cache.cross)
    header = {"kind": cache.kind, "count": cache.count, "weight": weight}
    (path / "cache.json").write_text(json.dumps(header, sort_keys=True) + "\n")


def load_prior_cache(path) -> tuple[PriorCache, float | None]:
    path = Path(path)
    header = json.loads((path / "cache.json").read_text())
    cache = PriorCache(load_matrix(path / "gram.mat"), load_matrix(path / "cross.mat"),
                       int(header["count"]), header["kind"])
    return cache, header.get("weight")


@dataclass
class RefineProblem:
    W: np.ndarray
    pairs: Sequence[MappingPair] = ()
    general_prior: PriorCache | None = None
    lambda1: float = 1.0
    domain_prior: PriorCache | None = None
    lambda3: float = 0.0
    # "embedding_prior", or "weight_anchor" with anchor_lambda
    anchor_mode: str = "embedding_prior"
    anchor_lambda: float = 1.0

    def __post_init__(self):
        self.W = as_matrix(self.W)
        if self.anchor_mode not in ("embedding_prior", "weight_anchor"):
            raise ValueError(f"unknown anchor_mode {self.anchor_mode!r}")
        d1, d2 = self.W.shape
        for p in self.pairs:
            if np.shape(p.e_f) != (d2,):
                raise DimensionMismatch(f"pair embedding dim {np.shape(p.e_f)} != ({d2},)")
        for cache in (self.general_prior, self.domain_prior):
            if cache is not None and (cache.gram.shape != (d2, d2) or cache.cross.shape != (d1, d2)):
                raise DimensionMismatch("prior cache shape does not match W")

    def pair_arrays(self):
        d2 = self.W.shape[1]
        Ef = _stack([p.e_f for p in self.pairs], d2)
        Eg = _stack([p.e_g for p in self.pairs], d2)
        return Ef, Eg

    def _priors(self):
        if self.anchor_mode == "weight_anchor":
            return []
        out = []
        if self.general_prior is not None:
            out.append((self.lambda1, self.general_prior))
        if self.domain_prior is not None and self.lambda3 > 0:
            out.append((self.lambda3, self.domain_prior))
        return out

    def normal_equations(self):
        """Right factor R and left side Y with the minimiser solving ``W' R = Y``."""
        Ef, Eg = self.pair_arrays()
        R = Ef.T @ Ef
        Y = self.W @ (Eg.T @ Ef)
        if self.anchor_mode == "weight_anchor":
            R = R + self.anchor_lambda * np.eye(R.shape[0])
            Y = Y + self.anchor_lambda * self.W
        for lam, cache in self._priors():
            R = R + lam * cache.gram
            Y = Y + lam * cache.cross
        return R, Y


def closed_form_refine(problem: RefineProblem, factor: SpdFactor | None = None) -> np.ndarray:
    """Minimiser of the refinement objective.

    ``factor`` may carry a pre-built factorization of the right factor, so the
    key and value projections can share one Cholesky decomposition.
    """
    if not problem.pairs:
        return problem.W.copy()
    R, Y = problem.normal_equations()
    if factor is None:
        factor = SpdFactor(R)
    return factor.solve_right(Y)


def refine_factor(problem: RefineProblem) -> SpdFactor:
    return SpdFactor(problem.normal_equations()[0])


def refine_objective(problem: RefineProblem, W_candidate) -> float:
    Wc = as_matrix(W_candidate)
    W = problem.W
    if Wc.shape != W.shape:
        raise DimensionMismatch(f"candidate shape {Wc.shape} != {W.shape}")
    Ef, Eg = problem.pair_arrays()
    total = float(np.sum((Ef @ Wc.T - Eg @ W.T) ** 2))
    D = Wc - W
    if problem.anchor_mode == "weight_anchor":
        return total + problem.anchor_lambda * float(np.sum(D * D))
    # sum ||D e_p||^2 = tr(D G D^T)
    for lam, cache in problem._priors():
        total += lam * float(np.sum((D @ cache.gram) * D))
    return total


@dataclass
class FusionProblem:
    W: np.ndarray
    W_refined: np.ndarray
    deltas: Sequence[np.ndarray]
    map_embeddings: Sequence[np.ndarray]
    prior: PriorCache | None = None
    lambda2: float = 1.0
    _grams: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.W = as_matrix(self.W)
        self.W_refined = as_matrix(self.W_refined)
        self.deltas = [as_matrix(d) for d in self.deltas]
        if not self.deltas:
            raise ValueError("fusion needs at least one LoRA delta")
        if len(self.deltas) != len(self.map_embeddings):
            raise DimensionMismatch("one embedding set per delta is required")
        shape = self.W.shape
        if self.W_refined.shape != shape or any(d.shape != shape for d in self.deltas):
            raise DimensionMismatch("all deltas must share W's shape")
        d1, d2 = shape
        self.map_embeddings = [_stack(E, d2) for E in self.map_embeddings]
        if self.prior is not None and (self.prior.gram.shape != (d2, d2) or self.prior.cross.shape != (d1, d2)):
            raise DimensionMismatch("prior cache shape does not match W")
        self._grams = [E.T @ E for E in self.map_embeddings]

    def normal_equations(self):
        d2 = self.W.shape[1]
        R = np.zeros((d2, d2))
        Y = np.zeros_like(self.W)
        for delta, G in zip(self.deltas, self._grams):
            R += G
            Y += (self.W_refined + delta) @ G
        if self.prior is not None and self.lambda2 > 0:
            R += self.lambda2 * self.prior.gram
            Y += self.lambda2 * self.prior.cross
        return R, Y


def closed_form_fuse(problem: FusionProblem) -> np.ndarray:
    R, Y = problem.normal_equations()
    return SpdFactor(R).solve_right(Y)


def fusion_objective(problem: FusionProblem, W_candidate) -> float:
    Wc = as_matrix(W_candidate)
    if Wc.shape != problem.W.shape:
        raise DimensionMismatch(f"candidate shape {Wc.shape} != {problem.W.shape}")
    total = 0.0
    for delta, E in zip(problem.deltas, problem.map_embeddings):
        target = problem.W_refined + delta
        total += float(np.sum((E @ (Wc - target).T) ** 2))
    if problem.prior is not None and problem.lambda2 > 0:
        D = Wc - problem.W
        total += problem.lambda2 * float(np.sum((D @ problem.prior.gram) * D))
    return total


def naive_lora_fusion(W_refined, deltas, weights=None) -> np.ndarray:
    """``W' + sum_i w_i dW_i`` with weights summing to one (uniform by default)."""
    W_refined = as_matrix(W_refined)
    deltas = [as_matrix(d) for d in deltas]
    if weights is None:
        weights = np.full(len(deltas), 1.0 / len(deltas))
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(deltas):
        raise DimensionMismatch("one weight per delta is required")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise WeightsNotNormalized(f"weights sum to {weights.sum()!r}")
    out = W_refined.copy()
    for w, d in zip(weights, deltas):
        if d.shape != out.shape:
            raise DimensionMismatch(f"delta shape {d.shape} != {out.shape}")
        out += w * d
    return out

"""Erasure metrics, the toy concept classifier and evaluation reports.

Accuracies follow the usual convention: ``acc_e`` is the fraction of samples
under an erased prompt still classified as the erased concept (lower is
better), ``acc_s`` the fraction of retained-prompt samples classified
correctly, ``acc_g`` the same as ``acc_e`` for synonym prompts.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ClassifierGateFailed, UndefinedMean, ValidationError
from .numerics import make_rng
from .toy_model import (DEFAULT_TEMPLATES, ToyModel, concept_prompts, ddim_sample,
                        forward_diffuse)

NONE = -1  # classifier label for "no concept detected"


def _check_fraction(name: str, x: float) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise ValidationError(f"{name}={x!r} is not a fraction in [0, 1]")
    return x


@dataclass(frozen=True)
class AccuracyTriple:
    acc_e: float
    acc_s: float
    acc_g: float | None = None

    def __post_init__(self):
        _check_fraction("acc_e", self.acc_e)
        _check_fraction("acc_s", self.acc_s)
        if self.acc_g is not None:
            _check_fraction("acc_g", self.acc_g)


def harmonic_mean_object(triple: AccuracyTriple) -> float:
    e, s, g = triple.acc_e, triple.acc_s, triple.acc_g
    if g is None:
        raise UndefinedMean("H_o needs acc_g")
    if not (e < 1.0 and s > 0.0 and g < 1.0):
        raise UndefinedMean(f"H_o undefined for acc_e={e}, acc_s={s}, acc_g={g}")
    return 3.0 / (1.0 / (1.0 - e) + 1.0 / s + 1.0 / (1.0 - g))


def harmonic_mean_celebrity(acc_e: float, acc_s: float) -> float:
    e = _check_fraction("acc_e", acc_e)
    s = _check_fraction("acc_s", acc_s)
    if not (e < 1.0 and s > 0.0):
        raise UndefinedMean(f"H_c undefined for acc_e={e}, acc_s={s}")
    return 2.0 / (1.0 / (1.0 - e) + 1.0 / s)


def style_gap(clip_e: float, clip_s: float) -> float:
    """Retained-style score minus erased-style score."""
    clip_e, clip_s = float(clip_e), float(clip_s)
    if not (math.isfinite(clip_e) and math.isfinite(clip_s)):
        raise ValidationError("style scores must be finite")
    return clip_s - clip_e


# --------------------------------------------------------------------------- classifier

@dataclass
class ToyClassifier:
    """Nearest centroid by normalized correlation, with a presence gate.

    A latent is assigned to the best-correlated centroid only if its
    projection on that centroid reaches ``min_amplitude`` times the
    centroid's norm; otherwise it is labelled ``NONE``. ``min_amplitude=0.5``
    is the midpoint between an empty latent and a typical clean sample, so a
    concept that has faded by more than half no longer counts as present.
    """

    names: list[str]
    centroids: np.ndarray  # (k, LATENT*LATENT)
    min_amplitude: float = 0.5
    kappa: float = 20.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(len(self.names), -1)
        self._norms = np.linalg.norm(self.centroids, axis=1)
        if np.any(self._norms <= 0):
            raise ClassifierGateFailed("a centroid is identically zero")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def correlations(self, latents) -> np.ndarray:
        Z = np.asarray(latents, dtype=np.float64).reshape(-1, self.centroids.shape[1])
        zn = np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
        return (Z / zn) @ (self.centroids / self._norms[:, None]).T

    def amplitudes(self, latents) -> np.ndarray:
        """Projection on each centroid relative to that centroid's norm."""
        Z = np.asarray(latents, dtype=np.float64).reshape(-1, self.centroids.shape[1])
        return Z @ self.centroids.T / self._norms[None, :] ** 2

    def predict(self, latents) -> np.ndarray:
        C = self.correlations(latents)
        best = np.argmax(C, axis=1)
        amp = self.amplitudes(latents)[np.arange(len(best)), best]
        return np.where(amp >= self.min_amplitude, best, NONE)

    def predict_proba(self, latents) -> np.ndarray:
        """Softmax of scaled correlations; a soft score for probes."""
        C = self.kappa * self.correlations(latents)
        C = np.exp(C - C.max(axis=1, keepdims=True))
        return C / C.sum(axis=1, keepdims=True)

    def accuracy(self, latents, name: str) -> float:
        return float(np.mean(self.predict(latents) == self.index(name)))


def fit_toy_classifier(model: ToyModel, samples_per_concept: int = 32, rng=None, *,
                       steps: int = 20, gate: float = 0.95, min_amplitude: float = 0.5,
                       concepts: Sequence[str] | None = None) -> tuple[ToyClassifier, dict[str, float]]:
    """Centroids are mean samples of the pretrained model under each concept's
    first prompt; the gate is checked on a fresh batch under every template."""
    rng = rng if rng is not None else make_rng(0, "classifier")
    names = list(concepts) if concepts is not None else [c.name for c in model.concepts]
    cents = []
    for name in names:
        prompt = concept_prompts(model.concept(name), synonyms=False)[0]
        z = ddim_sample(model, prompt, steps, rng, n=samples_per_concept)
        cents.append(z.reshape(len(z), -1).mean(axis=0))
    clf = ToyClassifier(names, np.stack(cents), min_amplitude)
    accs = {}
    for name in names:
        prompts = concept_prompts(model.concept(name), synonyms=False)
        per = max(1, samples_per_concept // len(prompts))
        z = np.concatenate([ddim_sample(model, p, steps, rng, n=per) for p in prompts])
        accs[name] = clf.accuracy(z, name)
    bad = {k: v for k, v in accs.items() if v < gate}
    if bad:
        raise ClassifierGateFailed(f"classifier gate {gate} failed: {bad}")
    return clf, accs


# --------------------------------------------------------------------------- reports

@dataclass
class ConceptResult:
    concept: str
    role: str  # "erase" or "retain"
    accuracy: float
    synonym_accuracy: float | None = None
    baseline: float | None = None
    n_samples: int = 0


@dataclass
class EvalReport:
    results: list[ConceptResult]
    meta: dict = field(default_factory=dict)

    def by_role(self, role: str) -> list[ConceptResult]:
        return [r for r in self.results if r.role == role]

    def triples(self) -> dict[str, AccuracyTriple]:
        """One triple per erased concept, paired with the mean retained accuracy."""
        acc_s = self.acc_s
        out = {}
        for r in self.by_role("erase"):
            out[r.concept] = AccuracyTriple(r.accuracy, 1.0 if acc_s is None else acc_s,
                                            r.synonym_accuracy)
        return out

    @staticmethod
    def _mean(xs):
        xs = [x for x in xs if x is not None]
        return float(np.mean(xs)) if xs else None

    @property
    def acc_e(self):
        return self._mean(r.accuracy for r in self.by_role("erase"))

    @property
    def acc_g(self):
        return self._mean(r.synonym_accuracy for r in self.by_role("erase"))

    @property
    def acc_s(self):
        return self._mean(r.accuracy for r in self.by_role("retain"))

    def harmonic_means(self) -> dict[str, float | None]:
        e, s, g = self.acc_e, self.acc_s, self.acc_g
        out = {"H_c": None, "H_o": None}
        if e is None or s is None:
            return out
        try:
            out["H_c"] = harmonic_mean_celebrity(e, s)
        except UndefinedMean:
            pass
        if g is not None:
            try:
                out["H_o"] = harmonic_mean_object(AccuracyTriple(e, s, g))
            except UndefinedMean:
                pass
        return out

    # -- serialization: a sectioned text report plus a CSV table; floats are
    # written with repr() so the harmonic means recompute bitwise.

    CSV_FIELDS = ("concept", "role", "accuracy", "synonym_accuracy", "baseline", "n_samples")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.results:
            w.writerow([r.concept, r.role, repr(r.accuracy),
                        "" if r.synonym_accuracy is None else repr(r.synonym_accuracy),
                        "" if r.baseline is None else repr(r.baseline), r.n_samples])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        opt = lambda s: None if s == "" else float(s)  # noqa: E731
        res = [ConceptResult(r["concept"], r["role"], float(r["accuracy"]),
                             opt(r["synonym_accuracy"]), opt(r["baseline"]), int(r["n_samples"]))
               for r in rows]
        return cls(res, dict(meta or {}))

    def to_text(self) -> str:
        fmt = lambda x: "n/a" if x is None else f"{x:.4f}"  # noqa: E731
        lines = ["[meta]"]
        lines += [f"{k} = {self.meta[k]}" for k in sorted(self.meta)]
        erase = self.by_role("erase")
        if erase:
            lines += ["", "[efficacy]"]
            lines += [f"{r.concept}: acc_e = {fmt(r.accuracy)} (before {fmt(r.baseline)})" for r in erase]
            lines += ["", "[generality]"]
            lines += [f"{r.concept}: acc_g = {fmt(r.synonym_accuracy)}" for r in erase]
        lines += ["", "[specificity]"]
        lines += [f"{r.concept}: acc_s = {fmt(r.accuracy)} (before {fmt(r.baseline)})"
                  for r in self.by_role("retain")]
        lines += ["", "[summary]", f"acc_e = {fmt(self.acc_e)}", f"acc_g = {fmt(self.acc_g)}",
                  f"acc_s = {fmt(self.acc_s)}"]
        for k, v in self.harmonic_means().items():
            lines.append(f"{k} = {fmt(v)}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "accuracies.csv").write_text(self.to_csv())
        (d / "report.txt").write_text(self.to_text())

    @classmethod
    def read(cls, directory) -> "EvalReport":
        d = Path(directory)
        meta = {}
        section = None
        for line in (d / "report.txt").read_text().splitlines():
            if line.startswith("["):
                section = line.strip("[]")
            elif section == "meta" and " = " in line:
                k, v = line.split(" = ", 1)
                meta[k] = v
        return cls.from_csv((d / "accuracies.csv").read_text(), meta)


def _sample_prompts(model: ToyModel, prompts: Sequence[str], n: int, steps: int, seed: int,
                    tag: str) -> np.ndarray:
    # every prompt gets its own stream so before/after models see identical noise
    per = max(1, n // len(prompts))
    return np.concatenate([ddim_sample(model, p, steps, make_rng(seed, tag, p), n=per)
                           for p in prompts])


def run_erasure_eval(model_before: ToyModel, model_after: ToyModel, erase_set: Sequence[str],
                     retain_set: Sequence[str], synonym_map: Mapping[str, Sequence[str]] | None,
                     samples_per_prompt: int = 64, seed: int = 0, *,
                     classifier: ToyClassifier | None = None, steps: int = 20,
                     templates: Sequence[str] = DEFAULT_TEMPLATES) -> EvalReport:
    """Sample erased, synonym and retained prompts and classify the results.

    ``samples_per_prompt`` counts samples per (concept or synonym) token,
    spread evenly over the templates.
    """
    if classifier is None:
        classifier, _ = fit_toy_classifier(model_before, rng=make_rng(seed, "classifier"),
                                           steps=steps)
    synonym_map = synonym_map or {}
    results = []
    n = samples_per_prompt

    def prompts_for(word):
        return [t.format(word) for t in templates]

    for name in erase_set:
        z_after = _sample_prompts(model_after, prompts_for(name), n, steps, seed, "eval")
        z_before = _sample_prompts(model_before, prompts_for(name), n, steps, seed, "eval")
        syn = list(synonym_map.get(name, ()))
        g = None
        if syn:
            zs = np.concatenate([_sample_prompts(model_after, prompts_for(s), n, steps, seed, "eval")
                                 for s in syn])
            g = classifier.accuracy(zs, name)
        results.append(ConceptResult(name, "erase", classifier.accuracy(z_after, name), g,
                                     classifier.accuracy(z_before, name), len(z_after)))
    for name in retain_set:
        z_after = _sample_prompts(model_after, prompts_for(name), n, steps, seed, "eval")
        z_before = _sample_prompts(model_before, prompts_for(name), n, steps, seed, "eval")
        results.append(ConceptResult(name, "retain", classifier.accuracy(z_after, name), None,
                                     classifier.accuracy(z_before, name), len(z_after)))
    meta = {"seed": seed, "samples_per_prompt": n, "steps": steps,
            "min_amplitude": classifier.min_amplitude}
    return EvalReport(results, meta)


def noise_prediction_shift(model_a: ToyModel, model_b: ToyModel, prompts: Sequence[str],
                           t_min: int, seed: int = 0, n: int = 32) -> float:
    """Mean squared difference of the two models' noise predictions at
    timesteps ``t > t_min``.

    The noisy latents are forward-diffused samples of ``model_a`` under each
    prompt, so both models are queried on the same on-distribution inputs.
    """
    rng = make_rng(seed, "shift")
    T = model_a.schedule.T
    ts = np.arange(t_min + 1, T + 1)
    total, count = 0.0, 0
    for p in prompts:
        E = model_a.encode(p)
        x0 = ddim_sample(model_a, p, 20, rng, n=n)
        t = rng.choice(ts, size=n)
        z = forward_diffuse(x0, t, rng.standard_normal(x0.shape), model_a.schedule)
        da = model_a.predict_eps(z, t, E)
        db = model_b.predict_eps(z, t, E)
        total += float(np.sum((da - db) ** 2))
        count += da.size
    return total / count


__all__ = [
    "AccuracyTriple", "ConceptResult", "EvalReport", "NONE", "ToyClassifier",
    "fit_toy_classifier", "harmonic_mean_celebrity", "harmonic_mean_object",
    "noise_prediction_shift", "run_erasure_eval", "style_gap"
]

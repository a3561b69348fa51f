"""Report figures (PNG, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .lora import UniformTimesteps  # noqa: E402
from .numerics import make_rng  # noqa: E402
from .toy_model import ddim_sample, tokenize  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def sample_grid(path, models: dict, concepts, template: str, seed: int, steps: int = 20) -> Path:
    """Rows are concepts, columns are models; each cell is one sample with a
    shared starting noise per row."""
    cols = list(models)
    fig, axes = plt.subplots(len(concepts), len(cols), figsize=(1.6 * len(cols), 1.6 * len(concepts)),
                             squeeze=False)
    for i, name in enumerate(concepts):
        prompt = tokenize(template.format(name))
        for j, col in enumerate(cols):
            z = ddim_sample(models[col], prompt, steps, make_rng(seed, "grid", name), n=1)[0]
            ax = axes[i, j]
            ax.imshow(z, cmap="gray", vmin=-0.3, vmax=1.3)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(col, fontsize=8)
            if j == 0:
                ax.set_ylabel(name, fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def timestep_pmfs(path, cfis, T: int) -> Path:
    t = np.arange(1, T + 1)
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot(t, cfis.pmf(), label="concept-focal")
    ax.plot(t, UniformTimesteps(T).pmf(), label="uniform", linestyle="--")
    ax.axvspan(cfis.t1, cfis.t2, color="0.9")
    ax.set_xlabel("timestep t")
    ax.set_ylabel("probability")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def loss_curves(path, loras: dict, target: str = "key") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    for name, mods in loras.items():
        hist = mods[target].meta.get("loss_history", [])
        ax.plot(np.arange(1, len(hist) + 1), hist, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("attention loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def accuracy_bars(path, reports: dict) -> Path:
    """Per-concept accuracy before erasure and under each fused model."""
    first = next(iter(reports.values()))
    names = [r.concept for r in first.results]
    x = np.arange(len(names))
    width = 0.8 / (len(reports) + 1)
    fig, ax = plt.subplots(figsize=(max(4.5, 0.6 * len(names)), 3.0))
    ax.bar(x, [r.baseline or 0.0 for r in first.results], width, label="before", color="0.7")
    for k, (mode, rep) in enumerate(reports.items(), start=1):
        ax.bar(x + k * width, [r.accuracy for r in rep.results], width, label=mode)
    ax.set_xticks(x + 0.4 - width / 2, names, rotation=45, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("classifier accuracy")
    n_erase = sum(r.role == "erase" for r in first.results)
    ax.axvline(n_erase - 0.5 + 0.4 - width / 2, color="k", linewidth=0.8)
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    fig.tight_layout()
    return _save(fig, Path(path))


def probe_bars(path, probes: dict, chance: float) -> Path:
    names = list(probes)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.bar(x - 0.2, [probes[n][0] for n in names], 0.4, label="before refinement")
    ax.bar(x + 0.2, [probes[n][1] for n in names], 0.4, label="after refinement")
    ax.axhline(chance, color="k", linestyle=":", linewidth=0.8, label="chance")
    ax.set_xticks(x, names)
    ax.set_ylabel("target probability")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(path))


def render_demo_figures(out_dir, cfg, model, refined, fused: dict, loras: dict, reports: dict,
                        probes: dict, classifier) -> list[Path]:
    out = Path(out_dir)
    models = {"original": model, "refined": refined, **{f"fused ({k})": m for k, m in fused.items()}}
    return [
        sample_grid(out / "samples.png", models, [*cfg.erase, *cfg.retain], cfg.templates[0],
                    cfg.seed, cfg.sample_steps),
        timestep_pmfs(out / "timesteps.png", cfg.cfis(), cfg.T),
        loss_curves(out / "lora_loss.png", loras, cfg.targets[0]),
        accuracy_bars(out / "accuracy.png", reports),
        probe_bars(out / "probe.png", probes, 1.0 / len(classifier.names)),
    ]

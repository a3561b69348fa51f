import numpy as np
import pytest

from mace_toy.errors import DimensionMismatch, TimestepOutOfRange, ValidationError
from mace_toy.lora import (KEY, VALUE, CfisDistribution, EraseItem, EraseTrainConfig, LoraModule,
                           UniformTimesteps, apply_lora, cfis_pdf, cfis_sample, erasure_grad_wk,
                           erasure_loss, erasure_loss_grad, load_lora, save_lora, train_lora)
from mace_toy.pipeline import ErasureConfig, initial_model
from mace_toy.toy_model import LATENT, N_PATCHES, tokenize

from oracles import central_difference, sigmoid_pdf_oracle


@pytest.fixture(scope="module")
def model():
    return initial_model(ErasureConfig(seed=5).validate())


def random_batch(model, seed, n=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        prompt = tokenize(["a photo of a cat", "a cat", "a painting of a cat"][i % 3])
        start = prompt.index("cat")
        mask = (rng.random(N_PATCHES) < 0.5).astype(float)
        mask[0] = 1.0
        out.append(EraseItem(rng.standard_normal((LATENT, LATENT)), prompt, mask,
                             int(rng.integers(1, model.schedule.T + 1)),
                             rng.standard_normal((LATENT, LATENT)), (start, start + 1)))
    return out


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("seed", range(3))
def test_key_projection_gradient_matches_finite_differences(model, seed):
    batch = random_batch(model, seed)
    W = model.denoiser.attn.W_k.copy()
    _, G = erasure_grad_wk(model, batch, W_k=W)
    num = central_difference(lambda X: erasure_loss(model, batch, W_k=X), W.copy())
    assert rel_err(G, num) <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_lora_factor_gradients_match_finite_differences(model, seed):
    batch = random_batch(model, 10 + seed)
    rng = np.random.default_rng(seed)
    d2, da = model.denoiser.attn.W_k.shape
    lo = LoraModule(0.3 * rng.standard_normal((d2, 2)), 0.3 * rng.standard_normal((2, da)), KEY)
    lv = LoraModule(0.3 * rng.standard_normal((d2, 2)), 0.3 * rng.standard_normal((2, da)), VALUE)
    _, grads = erasure_loss_grad(model, {KEY: lo, VALUE: lv}, batch)

    def loss_B(B):
        return erasure_loss(model, batch, W_k=model.denoiser.attn.W_k + B @ lo.D)

    def loss_D(D):
        return erasure_loss(model, batch, W_k=model.denoiser.attn.W_k + lo.B @ D)

    assert rel_err(grads[KEY][0], central_difference(loss_B, lo.B.copy())) <= 1e-5
    assert rel_err(grads[KEY][1], central_difference(loss_D, lo.D.copy())) <= 1e-5
    # the attention map does not depend on the value projection
    assert not np.any(grads[VALUE][0]) and not np.any(grads[VALUE][1])


def test_empty_mask_contributes_nothing(model):
    batch = random_batch(model, 0, n=1)
    batch[0].mask = np.zeros(N_PATCHES)
    loss, G = erasure_grad_wk(model, batch)
    assert loss == 0.0 and not np.any(G)
    assert erasure_loss(model, []) == 0.0


def test_single_layer_only(model):
    with pytest.raises(ValidationError):
        erasure_loss(model, random_batch(model, 0), layers=(0, 1))
    with pytest.raises(ValidationError):
        EraseTrainConfig(layers=(1,))


# -- timestep sampling

def test_scaled_temperature():
    d = CfisDistribution.scaled(100)
    assert (d.t1, d.t2, d.T) == (20.0, 40.0, 100)
    assert d.gamma == pytest.approx(0.5)
    assert CfisDistribution.scaled(1000).gamma == pytest.approx(0.05)


@pytest.mark.parametrize("T,t1,t2,gamma", [(100, 20, 40, 0.5), (1000, 200, 400, 0.05),
                                           (50, 5, 30, 1.3)])
def test_pmf_matches_oracle_and_normalises(T, t1, t2, gamma):
    d = CfisDistribution(t1, t2, gamma, T)
    pmf = d.pmf()
    assert abs(pmf.sum() - 1.0) <= 1e-12
    assert np.allclose(pmf, sigmoid_pdf_oracle(T, t1, t2, gamma), rtol=1e-10, atol=0)


def test_mode_is_the_midpoint():
    for T, t1, t2 in [(100, 20, 40), (1000, 200, 400), (100, 21, 40)]:
        d = CfisDistribution.scaled(T, t1 / T, t2 / T)
        mode = int(np.argmax(d.pmf())) + 1
        mid = (t1 + t2) / 2
        assert abs(mode - mid) <= 0.5


def test_sampler_total_variation():
    d = CfisDistribution.scaled(100)
    t = cfis_sample(d, np.random.default_rng(0), 100_000)
    emp = np.bincount(t, minlength=d.T + 1)[1:] / len(t)
    assert 0.5 * np.abs(emp - d.pmf()).sum() <= 0.02
    assert t.min() >= 1 and t.max() <= d.T


def test_pdf_rejects_out_of_range():
    d = CfisDistribution.scaled(100)
    assert cfis_pdf(d, 30) == pytest.approx(d.pmf()[29])
    for bad in (0, 101, -3):
        with pytest.raises(TimestepOutOfRange):
            cfis_pdf(d, bad)
    with pytest.raises(ValidationError):
        CfisDistribution(40, 20, 0.5, 100)


def test_uniform_pmf():
    assert np.allclose(UniformTimesteps(10).pmf(), 0.1)


# -- modules

def test_apply_and_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    lo = LoraModule.init(6, 4, 2, rng, KEY, "cat")
    assert not np.any(lo.delta)
    lo.B = rng.standard_normal((6, 2))
    lo.meta["final_loss"] = 0.125
    W = rng.standard_normal((6, 4))
    assert np.allclose(apply_lora(W, lo), W + lo.B @ lo.D)
    with pytest.raises(DimensionMismatch):
        apply_lora(np.ones((4, 6)), lo)
    save_lora(tmp_path / "l", lo)
    back = load_lora(tmp_path / "l")
    assert np.array_equal(back.B, lo.B) and np.array_equal(back.D, lo.D)
    assert back.target == KEY and back.concept_id == "cat" and back.meta["final_loss"] == 0.125
    with pytest.raises(DimensionMismatch):
        LoraModule(np.ones((3, 2)), np.ones((1, 3)))
    with pytest.raises(ValidationError):
        LoraModule(np.ones((3, 1)), np.ones((1, 3)), target="query")


def test_training_reduces_loss_and_clipping_bounds_steps(model):
    batch = random_batch(model, 3, n=4)
    ts = [(it.latent, " ".join(it.prompt[:-1]), it.mask) for it in batch]
    sampler = CfisDistribution.scaled(model.schedule.T)
    cfg = EraseTrainConfig(steps=15, learning_rate=2.0, max_grad_norm=0.5)
    loras = train_lora(model, "cat", ts, cfg, sampler, np.random.default_rng(0))
    k = loras[KEY]
    assert k.meta["final_loss"] < k.meta["initial_loss"]
    # each clipped step moves (B, D) by at most lr * max_grad_norm
    assert np.linalg.norm(k.B) <= cfg.steps * cfg.learning_rate * cfg.max_grad_norm + 1e-12
    with pytest.raises(ValidationError):
        EraseTrainConfig(max_grad_norm=0.0)

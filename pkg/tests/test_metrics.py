import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mace_toy.errors import ClassifierGateFailed, UndefinedMean, ValidationError
from mace_toy.metrics import (NONE, AccuracyTriple, ConceptResult, EvalReport, ToyClassifier,
                              fit_toy_classifier, harmonic_mean_celebrity, harmonic_mean_object,
                              run_erasure_eval, style_gap)
from mace_toy.numerics import make_rng
from mace_toy.pipeline import classifier_for


def test_harmonic_means_published_rows():
    assert harmonic_mean_celebrity(0.0431, 0.8456) == pytest.approx(0.8978, abs=1e-4)
    assert harmonic_mean_celebrity(0.9648, 0.9388) == pytest.approx(0.0679, abs=1e-4)
    assert harmonic_mean_object(AccuracyTriple(0.0906, 0.9539, 0.1003)) == pytest.approx(0.9204, abs=5e-4)


def test_harmonic_means_trivial_cases():
    assert harmonic_mean_celebrity(0.0, 1.0) == 1.0
    assert harmonic_mean_object(AccuracyTriple(0.0, 1.0, 0.0)) == 1.0
    s = 0.7
    assert harmonic_mean_object(AccuracyTriple(1 - s, s, 1 - s)) == pytest.approx(s, abs=1e-15)


def test_style_gap_published_rows():
    assert style_gap(clip_e=22.59, clip_s=28.58) == pytest.approx(5.99, abs=1e-12)
    assert style_gap(clip_e=29.63, clip_s=28.90) == pytest.approx(-0.73, abs=1e-12)
    assert style_gap(3.0, 3.0) == 0.0
    with pytest.raises(ValidationError):
        style_gap(float("nan"), 1.0)


def test_undefined_means_raise():
    with pytest.raises(UndefinedMean):
        harmonic_mean_celebrity(1.0, 0.5)
    with pytest.raises(UndefinedMean):
        harmonic_mean_celebrity(0.5, 0.0)
    with pytest.raises(UndefinedMean):
        harmonic_mean_object(AccuracyTriple(0.1, 0.5, 1.0))
    with pytest.raises(UndefinedMean):
        harmonic_mean_object(AccuracyTriple(0.1, 0.5))
    with pytest.raises(ValidationError):
        AccuracyTriple(1.2, 0.5)


frac = st.floats(0.0, 0.99)
pos = st.floats(0.01, 1.0)


@settings(max_examples=200, deadline=None)
@given(frac, pos, frac, st.floats(0.0, 0.5))
def test_harmonic_means_are_monotone(e, s, g, d):
    base_o = harmonic_mean_object(AccuracyTriple(e, s, g))
    assert harmonic_mean_object(AccuracyTriple(max(0.0, e - d), s, g)) >= base_o - 1e-15
    assert harmonic_mean_object(AccuracyTriple(e, s, max(0.0, g - d))) >= base_o - 1e-15
    assert harmonic_mean_object(AccuracyTriple(e, min(1.0, s + d), g)) >= base_o - 1e-15
    base_c = harmonic_mean_celebrity(e, s)
    assert harmonic_mean_celebrity(max(0.0, e - d), s) >= base_c - 1e-15
    assert harmonic_mean_celebrity(e, min(1.0, s + d)) >= base_c - 1e-15
    assert base_c == 2.0 / (1.0 / (1.0 - e) + 1.0 / s)


def random_report(seed):
    rng = np.random.default_rng(seed)
    res = [ConceptResult(f"e{i}", "erase", float(rng.random()), float(rng.random()),
                         float(rng.random()), 64) for i in range(3)]
    res += [ConceptResult(f"r{i}", "retain", float(rng.random()), None, float(rng.random()), 64)
            for i in range(3)]
    return EvalReport(res, {"seed": seed})


@pytest.mark.parametrize("seed", range(5))
def test_report_round_trip_is_bitwise(tmp_path, seed):
    rep = random_report(seed)
    rep.write(tmp_path)
    back = EvalReport.read(tmp_path)
    assert back.results == rep.results
    assert back.harmonic_means() == rep.harmonic_means()
    text = (tmp_path / "report.txt").read_text()
    for sec in ("[meta]", "[efficacy]", "[generality]", "[specificity]", "[summary]"):
        assert sec in text


def test_report_without_erasures_has_only_specificity():
    rep = EvalReport([ConceptResult("r", "retain", 1.0, None, 1.0, 8)])
    text = rep.to_text()
    assert "[efficacy]" not in text and "[specificity]" in text
    assert rep.harmonic_means() == {"H_c": None, "H_o": None}


# -- classifier

def test_classifier_on_its_own_centroids():
    C = np.random.default_rng(0).standard_normal((4, 64))
    clf = ToyClassifier(list("abcd"), C)
    assert list(clf.predict(C)) == [0, 1, 2, 3]
    # a faded copy keeps its shape but fails the presence gate
    assert list(clf.predict(0.3 * C)) == [NONE] * 4
    p = clf.predict_proba(C)
    assert np.allclose(p.sum(axis=1), 1.0) and np.all(np.argmax(p, axis=1) == np.arange(4))


def test_indistinguishable_concepts_fail_the_gate(two_concept_model):
    twin = two_concept_model.copy()
    tab = twin.encoder.embed_table
    tab[twin.vocab.id("car")] = tab[twin.vocab.id("cat")]
    # both prompts now produce the same samples, so one class is never predicted
    with pytest.raises(ClassifierGateFailed):
        fit_toy_classifier(twin, 16, make_rng(0, "c"), concepts=["cat", "car"])


def test_two_concept_gate_passes(two_concept_model):
    _, accs = fit_toy_classifier(two_concept_model, 16, make_rng(0, "c"), concepts=["cat", "car"])
    assert min(accs.values()) >= 0.95


def test_identity_edit_keeps_baseline(pretrained, default_cfg):
    clf = classifier_for(pretrained, default_cfg)
    rep = run_erasure_eval(pretrained, pretrained, ["cat"], ["bird"], {"cat": ["kitty"]}, 16,
                           seed=3, classifier=clf)
    cat = rep.by_role("erase")[0]
    assert cat.accuracy == cat.baseline >= 0.95
    assert rep.acc_s >= 0.95
    rep2 = run_erasure_eval(pretrained, pretrained, ["cat"], ["bird"], {"cat": ["kitty"]}, 16,
                            seed=3, classifier=clf)
    assert rep2.results == rep.results
    # nothing was erased: acc_e = 1 puts H_c on its undefined boundary
    assert rep.acc_e == 1.0 and rep.harmonic_means()["H_c"] is None

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcadv import detect as D
from mcadv.attacks import AttackConfig
from mcadv.errors import ConfigError, ContractError

scores = st.lists(st.integers(0, 6).map(float), min_size=1, max_size=25)


def brute_auc(pos, neg):
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("pos, neg, auc", [
    ([2, 3], [0, 1], 1.0),
    ([0, 1], [2, 3], 0.0),
    ([1, 3], [0, 2], 0.75),
    ([1, 1, 2], [2, 1, 1], 0.5),
])
def test_known_aucs(pos, neg, auc):
    assert D.roc_auc(pos, neg).auc == pytest.approx(auc, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_sweep_matches_rank_and_pairwise_oracles(pos, neg):
    curve = D.roc_auc(pos, neg)
    assert abs(curve.auc - D.rank_auc(pos, neg)) <= 1e-9
    assert abs(curve.auc - brute_auc(pos, neg)) <= 1e-12
    assert curve.fpr[0] == curve.tpr[0] == 0.0 and curve.fpr[-1] == curve.tpr[-1] == 1.0
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert np.all(np.diff(curve.thresholds) < 0)
    trapz = np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2)
    assert abs(curve.auc - trapz) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(scores, scores, st.floats(-5, 5), st.floats(0.1, 3))
def test_auc_invariant_under_monotone_maps(pos, neg, shift, scale):
    base = D.roc_auc(pos, neg).auc
    pos, neg = np.array(pos), np.array(neg)
    assert D.roc_auc(pos + shift, neg + shift).auc == pytest.approx(base, abs=1e-12)
    assert D.roc_auc(scale * pos + shift, scale * neg + shift).auc == pytest.approx(base, abs=1e-12)
    assert D.roc_auc(np.exp(pos), np.exp(neg)).auc == pytest.approx(base, abs=1e-12)


def test_empty_pool_is_a_contract_error():
    with pytest.raises(ContractError):
        D.roc_auc([], [1.0])


def test_uninformative_scores_give_chance_auc():
    rng = np.random.default_rng(0)
    n = 2000
    auc = D.roc_auc(rng.random(n), rng.random(n)).auc
    se = np.sqrt((2 * n + 1) / (12 * n * n))  # null s.e. of the Mann-Whitney AUC
    assert abs(auc - 0.5) < 3 * se


def test_gaussian_noise():
    rng = np.random.default_rng(0)
    x = np.full(100_000, 0.5)
    assert np.array_equal(D.add_gaussian_noise(x, 0.0, rng), x)
    sigma = 0.05
    noisy = D.add_gaussian_noise(x, sigma, np.random.default_rng(1))
    # no clipping at this sigma, so the sample std estimates sigma directly
    se = sigma / np.sqrt(2 * (len(x) - 1))
    assert abs((noisy - x).std(ddof=1) - sigma) < 3 * se
    wide = D.add_gaussian_noise(x, 5.0, rng)
    assert wide.min() >= 0 and wide.max() <= 1
    again = D.add_gaussian_noise(x, sigma, np.random.default_rng(1))
    assert np.array_equal(noisy, again)


def test_detection_set_bookkeeping(tiny_model, tiny_data):
    x, y = tiny_data
    ds = D.build_detection_set(tiny_model, x, y, AttackConfig("fgm", 0.1), counts=(10, 8, 12))
    assert len(ds) == 30
    assert [int((ds.provenance == t).sum()) for t in (D.CLEAN, D.NOISY, D.ADVERSARIAL)] == [10, 8, 12]
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert len(ds.success_filtered()) <= len(ds)
    assert not ds.success[~ds.is_positive].any()
    # the three pools come from distinct test rows
    assert len(set(ds.attack.indices.tolist())) == 12


def test_detection_set_edge_cases(tiny_model, tiny_data):
    x, y = tiny_data
    assert len(D.build_detection_set(tiny_model, x, y, AttackConfig(), counts=(0, 0, 0))) == 0
    zero = D.build_detection_set(tiny_model, x, y, AttackConfig("bim", 0.0), counts=(5, 5, 5))
    assert not zero.success.any()
    assert zero.success_filtered().is_positive.sum() == 0
    with pytest.raises(ConfigError):
        D.build_detection_set(tiny_model, x, y, AttackConfig(), counts=(20, 20, 1))


def test_report_marks_zero_measures_unavailable(tmp_path, tiny_model, tiny_data):
    x, y = tiny_data
    cfg = AttackConfig("bim", 0.2)
    ds = D.build_detection_set(tiny_model, x, y, cfg, counts=(10, 10, 10))
    det = D.detection_report(tiny_model, ds, cfg, "deterministic")
    mc = D.detection_report(tiny_model, ds, cfg, "mc", num_samples=10)
    by = {r.measure: r for r in det}
    assert by["mi"].auc is None and by["variance"].auc is None
    assert by["entropy"].auc is not None
    assert all(r.auc is not None for r in mc)
    D.write_report(tmp_path / "r.csv", det + mc)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(D.REPORT_COLUMNS)
    assert "N.A" in lines[2]
    written = D.write_rocs(tmp_path, mc)
    assert written and all(p.read_text().startswith("fpr,tpr\n") for p in written)


def test_scored_items_respect_mi_bound(tiny_model, tiny_data):
    s = D.score_items(tiny_model, tiny_data[0], "mc", num_samples=15)
    assert np.all(s.mutual_information <= s.predictive_entropy)
    with pytest.raises(ConfigError):
        D.score_items(tiny_model, tiny_data[0], "bayes")

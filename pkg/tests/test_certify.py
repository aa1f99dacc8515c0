# tests/test_certify.py
# -------------------------------------------------------------------
# Certification checks, threaded evaluation and report files.
# -------------------------------------------------------------------

import csv
import json

import numpy as np
import pytest

import src.cure_training.certify as certify
from src.cure_training.attacks import AttackConfig, pgd_robust_mask
from src.cure_training.certify import (
    BOUND_DIFF_COLUMNS,
    TABLE_COLUMNS,
    VERDICT_COLUMNS,
    bound_diff_arrays,
    certify_l2,
    certify_l2_bounding_box,
    certify_linf,
    clean_correct,
    empirical_accuracy,
    evaluate,
    export_bound_diffs,
    read_aggregates,
    union_accuracy,
    write_comparison,
    write_report,
)
from src.cure_training.data import make_synthetic
from src.cure_training.errors import ReportFormatError
from src.cure_training.nn import Affine, Flatten, Network, build_architecture, init
from src.cure_training.types import EvalReport, SampleVerdict


# =========================
# Helpers
# =========================

def threshold_net() -> Network:
    """o_0 = x_0, o_1 = 0.5 on a (1, 1, 2) input."""
    w = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([0.0, 0.5])
    return Network([Flatten((1, 1, 2)), Affine((2,), w, b)], 2, (1, 1, 2))


def make_data(n: int = 12, k: int = 3):
    return make_synthetic(n, k, (1, 4, 4), seed=2, split="test")


def make_net(data, arch: str = "fc", seed: int = 0) -> Network:
    return init(build_architecture(arch, data.input_shape, data.num_classes), seed=seed, gain=2.0)


def verdict(i, clean=True, linf=False, l2=False, pgd_linf=True, pgd_l2=True) -> SampleVerdict:
    return SampleVerdict(i, clean, linf, l2, pgd_linf, pgd_l2)


# =========================
# Tests: certificates
# =========================

def test_threshold_net_certificates():
    net = threshold_net()
    x = np.array([[[0.55, 0.5]]])
    assert certify_linf(net, x, 0, 0.01) is True
    assert certify_linf(net, x, 0, 0.1) is False
    assert certify_l2(net, x, 0, 0.01) is True
    assert certify_l2(net, x, 0, 0.1) is False


def test_zero_margin_is_not_certified():
    net = threshold_net()
    x = np.array([[[0.5, 0.5]]])
    assert certify_linf(net, x, 0, 0.0) is False


def test_batch_certificates_return_arrays():
    data = make_data()
    net = make_net(data)
    flags = certify_linf(net, data.images, data.labels, 0.05)
    assert flags.shape == (len(data),)
    assert flags.dtype == bool


def test_certified_implies_pgd_robust_implies_clean():
    data = make_data(n=20)
    net = make_net(data)
    clean = clean_correct(net, data.images, data.labels)
    for norm, eps, cert in (("linf", 0.05, certify_linf), ("l2", 0.2, certify_l2)):
        flags = cert(net, data.images, data.labels, eps)
        robust = pgd_robust_mask(net, data.images, data.labels, AttackConfig(norm, eps, steps=10, restarts=2))
        assert np.all(flags <= robust)
        assert np.all(robust <= clean)


def test_l2_certificate_at_least_as_strong_as_bounding_box():
    data = make_data(n=20)
    net = make_net(data)
    tight = certify_l2(net, data.images, data.labels, 0.3)
    loose = certify_l2_bounding_box(net, data.images, data.labels, 0.3)
    assert np.all(loose <= tight)


@pytest.mark.parametrize("arch", ["fc", "cnn4"])
def test_certificates_only_grow_as_eps_shrinks(arch):
    data = make_data(n=16)
    for seed in range(4):
        net = make_net(data, arch=arch, seed=seed)
        for cert, radii in ((certify_linf, (0.2, 0.05, 0.01, 0.0)), (certify_l2, (1.0, 0.3, 0.05, 0.0))):
            previous = cert(net, data.images, data.labels, radii[0])
            for eps in radii[1:]:
                flags = cert(net, data.images, data.labels, eps)
                assert np.all(previous <= flags), (arch, seed, cert.__name__, eps)
                previous = flags


def test_union_accuracy():
    vs = [verdict(0, linf=True, l2=True), verdict(1, linf=True), verdict(2, l2=True), verdict(3)]
    assert union_accuracy(vs) == 25.0
    assert union_accuracy([]) == 0.0


def test_empirical_accuracy_is_percent():
    data = make_data()
    net = make_net(data)
    acc = empirical_accuracy(net, data, AttackConfig("linf", 0.0))
    assert acc == pytest.approx(100.0 * clean_correct(net, data.images, data.labels).mean())


# =========================
# Tests: evaluation
# =========================

def test_evaluate_is_independent_of_thread_count():
    data = make_data(n=10)
    net = make_net(data)
    one = evaluate(net, data, 0.05, 0.2, attack_steps=3, restarts=2, seed=4, worker_threads=1)
    many = evaluate(net, data, 0.05, 0.2, attack_steps=3, restarts=2, seed=4, worker_threads=3)
    assert [v.as_row() for v in one.verdicts] == [v.as_row() for v in many.verdicts]
    assert [v.sample_id for v in many.verdicts] == list(range(10))
    assert one.aggregates == many.aggregates


def test_evaluate_more_threads_than_samples():
    data = make_data(n=3)
    net = make_net(data)
    report = evaluate(net, data, 0.05, 0.2, attack_steps=1, restarts=1, worker_threads=8)
    assert len(report.verdicts) == 3


def test_evaluate_aggregates_are_ordered():
    data = make_data(n=20)
    net = make_net(data)
    agg = evaluate(net, data, 0.05, 0.2, attack_steps=5, restarts=1).aggregates
    assert agg["union"] <= min(agg["cert_linf"], agg["cert_l2"])
    assert agg["cert_linf"] <= agg["pgd_linf"] <= agg["clean"]
    assert agg["cert_l2"] <= agg["pgd_l2"] <= agg["clean"]


def test_evaluate_reraises_worker_errors(monkeypatch):
    data = make_data(n=6)
    net = make_net(data)

    def _boom(*args, **kwargs):
        raise RuntimeError("worker failed")

    monkeypatch.setattr(certify, "_verdict_chunk", _boom)
    with pytest.raises(RuntimeError, match="worker failed"):
        evaluate(net, data, 0.05, 0.2, worker_threads=2)


# =========================
# Tests: bound differences and files
# =========================

def test_bound_diff_arrays_shapes_and_sign():
    data = make_data(n=5)
    net = make_net(data)
    diffs = bound_diff_arrays(net, data.images, data.labels, 0.05, 0.2)
    assert diffs["linf"].shape == (5, 2)
    assert diffs["l2"].shape == (5, 2)
    certified = certify_linf(net, data.images, data.labels, 0.05)
    np.testing.assert_array_equal(diffs["linf"].min(axis=1) > 0, certified)


def test_small_box_bound_diffs_are_tighter():
    data = make_data(n=5)
    net = make_net(data)
    full = bound_diff_arrays(net, data.images, data.labels, 0.05, 0.2)
    small = bound_diff_arrays(net, data.images, data.labels, 0.05, 0.2, lambda_inf=0.2, lambda_2=0.2)
    assert np.all(small["linf"] >= full["linf"] - 1e-12)


def test_export_bound_diffs_writes_one_row_per_class(tmp_path):
    data = make_data(n=4)
    net = make_net(data)
    path = tmp_path / "bounds.csv"
    count = export_bound_diffs(net, data.images, data.labels, 0.05, 0.2, None, None, path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert count == len(rows) == 2 * 4 * 2
    assert list(rows[0].keys()) == BOUND_DIFF_COLUMNS
    assert all(row["class"] != row["label"] for row in rows)


def test_write_report_and_comparison_table(tmp_path):
    data = make_data(n=6)
    net = make_net(data)
    report = evaluate(net, data, 0.05, 0.2, attack_steps=2, restarts=1,
                      config={"eps_inf": 0.05}, version="test", with_bound_diffs=True)
    write_report(report, tmp_path / "a")

    payload = json.loads((tmp_path / "a" / "eval_report.json").read_text(encoding="utf-8"))
    assert payload["n_samples"] == 6
    assert payload["config"] == {"eps_inf": 0.05}
    assert payload["version"] == "test"
    with open(tmp_path / "a" / "verdicts.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0].keys()) == VERDICT_COLUMNS
    assert (tmp_path / "a" / "bound_diffs.csv").exists()

    rows = write_comparison({"run-a": tmp_path / "a" / "eval_report.json"}, tmp_path / "table.csv")
    assert rows[0]["method"] == "run-a"
    assert rows[0]["clean"] == round(report.aggregates["clean"], 2)
    with open(tmp_path / "table.csv", newline="", encoding="utf-8") as f:
        assert next(csv.reader(f)) == TABLE_COLUMNS
    assert read_aggregates(tmp_path / "a" / "eval_report.json") == report.aggregates


def test_eval_report_without_verdicts():
    report = EvalReport(verdicts=[])
    assert report.aggregates["clean"] == 0.0
    assert report.to_json_dict()["n_samples"] == 0


def test_read_aggregates_names_missing_key(tmp_path):
    path = tmp_path / "eval_report.json"
    path.write_text(json.dumps({"aggregates": {"clean": 90.0, "cert_linf": 50.0, "union": 40.0}}), encoding="utf-8")
    with pytest.raises(ReportFormatError) as info:
        read_aggregates(path)
    assert info.value.missing == "aggregates.cert_l2"
    assert str(path) in str(info.value)

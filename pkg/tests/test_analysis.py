import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locstitch import analysis
from locstitch.analysis import MergeReport, pairwise_matrices, retention_check
from locstitch.errors import StructuralMismatchError, UsageError
from locstitch.harness import grafted_accuracy
from locstitch.params import ParamSet, TaskVector
from locstitch.sparse import Mask, mask_apply


def random_masks(n, seed, layout={"a": 30, "b": 17}, p=0.3):
    rng = np.random.default_rng(seed)
    masks = [Mask({k: rng.random(s) < p for k, s in layout.items()}) for _ in range(n)]
    tvs = [TaskVector(ParamSet({k: rng.standard_normal(s) for k, s in layout.items()}), 1) for _ in range(n)]
    return masks, tvs, [mask_apply(m, tv) for m, tv in zip(masks, tvs)]


def brute_jaccard(a: Mask, b: Mask):
    sa = {(k, i) for k in a.bits for i in np.flatnonzero(a.bits[k])}
    sb = {(k, i) for k in b.bits for i in np.flatnonzero(b.bits[k])}
    union = sa | sb
    return len(sa & sb) / len(union) if union else 1.0


def test_three_task_brute_force():
    masks, _, svs = random_masks(3, 0)
    jac, cos = pairwise_matrices(masks, svs)
    for i, j in itertools.product(range(3), repeat=2):
        assert jac[i, j] == pytest.approx(brute_jaccard(masks[i], masks[j]), abs=1e-12)
    assert np.allclose(np.diag(jac), 1) and np.allclose(np.diag(cos), 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 5), p=st.floats(0, 1))
def test_matrices_symmetric_and_bounded(seed, n, p):
    masks, _, svs = random_masks(n, seed, p=p)
    jac, cos = pairwise_matrices(masks, svs)
    assert np.allclose(jac, jac.T, atol=1e-9) and np.allclose(cos, cos.T, atol=1e-9)
    assert np.all((0 <= jac) & (jac <= 1))
    assert np.all((-1 - 1e-12 <= cos) & (cos <= 1 + 1e-12))


def test_identical_and_disjoint_masks():
    a = Mask({"w": [1, 1, 0, 0]})
    b = Mask({"w": [0, 0, 1, 1]})
    tv = TaskVector(ParamSet({"w": [1.0, 2.0, 3.0, 4.0]}), 1)
    jac, cos = pairwise_matrices([a, a, b], [mask_apply(m, tv) for m in (a, a, b)])
    assert jac[0, 1] == 1 and jac[0, 2] == 0
    assert cos[0, 1] == pytest.approx(1) and cos[0, 2] == 0


def test_pairwise_errors():
    masks, _, svs = random_masks(2, 0)
    with pytest.raises(UsageError):
        pairwise_matrices(masks, svs[:1])
    with pytest.raises(StructuralMismatchError):
        pairwise_matrices([masks[0], Mask({"a": np.ones(3, bool)})], svs)


# -- reports -------------------------------------------------------------------


def test_merge_report_invariants():
    r = MergeReport.build("simple", {}, [0.5, 0.7, 0.9], seeds=[0])
    assert r.average == pytest.approx(0.7, abs=1e-12)
    r.check(3)
    with pytest.raises(ValueError):
        r.check(4)
    with pytest.raises(ValueError):
        MergeReport("simple", {}, [0.5, 0.7], 0.7)
    d = r.to_dict(with_timestamps=False)
    assert d["schema_version"] == analysis.SCHEMA_VERSION and "timestamps" not in d


def test_config_hash_canonical():
    assert analysis.config_hash({"a": 1, "b": [1, 2]}) == analysis.config_hash({"b": [1, 2], "a": 1})
    assert analysis.config_hash({"a": 1}) != analysis.config_hash({"a": 2})


@settings(max_examples=50, deadline=None)
@given(rows=st.lists(st.fixed_dictionaries({
    "method": st.text(alphabet='ab,"\n\r x', min_size=0, max_size=6),
    "seed": st.integers(-5, 5),
    "value": st.floats(allow_nan=False, allow_infinity=False),
}), min_size=0, max_size=6))
def test_csv_roundtrip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "rows.csv"
    analysis.write_csv(path, rows, columns=["method", "seed", "value"])
    back = analysis.read_csv(path)
    assert len(back) == len(rows)
    for r, b in zip(rows, back):
        assert b["method"] == r["method"]
        assert int(b["seed"]) == r["seed"]
        assert float(b["value"]) == r["value"]


def test_csv_uses_crlf_and_blank_none(tmp_path):
    analysis.write_csv(tmp_path / "x.csv", [{"a": 0.1, "b": None}])
    assert (tmp_path / "x.csv").read_bytes() == b"a,b\r\n0.1,\r\n"


def test_json_handles_numpy(tmp_path):
    analysis.write_json(tmp_path / "x.json", {"a": np.float32(0.5), "b": np.arange(2)})
    assert '"a": 0.5' in (tmp_path / "x.json").read_text()


def test_median_by():
    rows = [{"k": 1, "merged_avg": v} for v in (0.1, 0.3, 0.2)] + [{"k": 2, "merged_avg": 0.5}]
    assert analysis.median_by(rows, "k") == {1: 0.2, 2: 0.5}


# -- sweeps on the toy suite ---------------------------------------------------


def test_sweep_endpoints_exact(suite):
    rows = analysis.sparsity_sweep(suite, [0.0, 1.0], method="dataless")
    ft = suite.per_task_accuracy(suite.finetuned)
    pre = suite.accuracy(suite.pre)
    n = len(suite.tasks)
    assert [rows[0][f"grafted_{t}"] for t in range(n)] == pre
    assert [rows[1][f"grafted_{t}"] for t in range(n)] == ft
    for r in rows:
        assert {"method", "seed", "config_hash"} <= set(r)


def test_sweep_errors(suite):
    with pytest.raises(UsageError):
        analysis.sparsity_sweep(suite, [])
    with pytest.raises(UsageError):
        analysis.sparsity_sweep(suite, [1.5], method="dataless")
    with pytest.raises(UsageError):
        analysis.shots_sweep(suite, [])


def test_shots_sweep_shape(suite):
    rows = analysis.shots_sweep(suite, [8, 64], dataless_k=5.0)
    assert [r["shots"] for r in rows] == [8, 64, 0]
    assert [r["method"] for r in rows] == ["lns", "lns", "lns-dataless"]
    assert rows == analysis.shots_sweep(suite, [8, 64], dataless_k=5.0)


def test_retention_identity(suite):
    pre_acc, merged_acc, delta = retention_check(suite.pre, suite.pre, suite.data.heldout.test, suite.arch)
    assert delta == 0 and pre_acc == merged_acc


def test_retention_row_reports_union_fraction(suite):
    masks = [Mask.zeros(suite.pre) for _ in suite.tasks]
    row = analysis.retention_row(suite, "lns", suite.pre, masks)
    assert row["union_fraction"] == 0 and row["delta"] == 0


def test_grafted_zero_masks_are_pre(suite):
    masks = [Mask.zeros(suite.pre) for _ in suite.tasks]
    assert grafted_accuracy(suite, masks) == suite.accuracy(suite.pre)


def test_compression_rows():
    p = ParamSet({"w": np.arange(1000, dtype=np.float32)})
    tv = TaskVector(p, p.fingerprint)
    m = Mask({"w": np.arange(1000) < 10})
    (row,) = analysis.compression_rows(p, [mask_apply(m, tv)])
    assert row["nnz"] == 10 and row["numel"] == 1000 and row["ratio"] < 0.03

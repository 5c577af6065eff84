from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from oracles import branin_oracle, hartmann3_minimum, hartmann3_oracle
from mfsim.benchmarks import (
    MfBranin,
    MfBraninParams,
    MfHartmann,
    MfHartmannParams,
    NotFoundError,
    TabularBenchmark,
    TabularError,
    branin,
    hartmann,
    hartmann_runtime,
    load_tabular,
    query,
)
from mfsim.core import Categorical, Descriptor, DomainError, Integer, Ordinal, QueryArgs, SearchSpace, bundled_descriptor

unit = st.floats(0.0, 1.0)


# -- Branin -----------------------------------------------------------------


def test_branin_known_minimizer():
    assert branin(math.pi, 2.275).objectives["loss"] == pytest.approx(0.397887, abs=1e-4)


@settings(max_examples=300)
@given(st.floats(-5, 10), st.floats(0, 15))
def test_branin_full_fidelity_is_exact(x1, x2):
    assert branin(x1, x2, (1.0, 1.0, 1.0)).objectives["loss"] == pytest.approx(branin_oracle(x1, x2), rel=1e-14, abs=1e-12)


@settings(max_examples=200)
@given(st.floats(-5, 10), st.floats(0, 15))
def test_branin_converges_to_full_fidelity(x1, x2):
    full = branin(x1, x2, 1.0).objectives["loss"]
    gaps = [abs(branin(x1, x2, 1 - eps).objectives["loss"] - full) for eps in (1e-1, 1e-3, 1e-6)]
    assert gaps[2] <= gaps[1] + 1e-9 and gaps[2] < 1e-3 * (1 + abs(full))


def test_branin_runtime_endpoints():
    p = MfBraninParams(runtime_scale=100.0)
    assert branin(0.0, 0.0, (0.0, 1.0, 1.0), p).runtime == pytest.approx(5.0)
    assert branin(0.0, 0.0, 1.0, p).runtime == pytest.approx(100.0)


@pytest.mark.parametrize("x1, x2, name", [(-5.1, 1.0, "x1"), (0.0, 15.5, "x2")])
def test_branin_domain(x1, x2, name):
    with pytest.raises(DomainError, match=name):
        branin(x1, x2)
    with pytest.raises(DomainError, match="z2"):
        branin(0.0, 0.0, (1.0, 1.5, 1.0))


# -- Hartmann -----------------------------------------------------------------


def test_hartmann3_minimum_from_grid_oracle():
    best, x = hartmann3_minimum()
    assert best == pytest.approx(-3.8628, abs=1e-3)
    assert hartmann(x).objectives["loss"] == pytest.approx(best, abs=1e-12)


def test_hartmann3_matches_oracle_pointwise():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(10_000, 3))
    ours = np.array([hartmann(p).objectives["loss"] for p in pts])
    assert np.max(np.abs(ours - hartmann3_oracle(pts))) <= 1e-12


def test_hartmann_runtime_endpoints():
    assert hartmann(np.full(3, 0.5), 1.0, MfHartmannParams(3, runtime_scale=10.0)).runtime == pytest.approx(10.0)
    for d in (3, 6):
        assert hartmann(np.full(d, 0.5), 0.0, MfHartmannParams(d, runtime_scale=10.0)).runtime == pytest.approx(1.0)


@settings(max_examples=300)
@given(st.sampled_from([3, 6]), st.lists(unit, min_size=4, max_size=4), st.integers(0, 3), unit)
def test_runtime_models_monotone(dim, z, i, bump):
    lo = list(z)
    hi = list(z)
    hi[i] = max(z[i], bump)
    assert hartmann_runtime(hi, dim) >= hartmann_runtime(lo, dim)
    assert MfBraninParams().runtime_scale * (0.05 + 0.95 * hi[0] ** 1.5) >= branin(0, 0, (lo[0], 1, 1)).runtime


@settings(max_examples=300)
@given(st.sampled_from([3, 6]), st.data())
def test_hartmann_non_positive(dim, data):
    x = data.draw(st.lists(unit, min_size=dim, max_size=dim))
    z = data.draw(st.lists(unit, min_size=4, max_size=4))
    assert hartmann(x, z, MfHartmannParams(dim)).objectives["loss"] <= 0.0


def test_hartmann_low_fidelity_differs():
    x = [0.114614, 0.555649, 0.852547]
    assert hartmann(x, 0.0).objectives["loss"] > hartmann(x, 1.0).objectives["loss"]


def test_hartmann_domain():
    with pytest.raises(DomainError, match="x2"):
        hartmann([0.1, 1.2, 0.3])
    with pytest.raises(DomainError):
        MfHartmannParams(dim=4)


def test_synthetic_wrappers():
    b = MfBranin(runtime_scale=100.0, min_fidel=1, max_fidel=100)
    out = b({"x1": math.pi, "x2": 2.275}, {"epoch": 100})
    assert out["runtime"] == pytest.approx(100.0) and out["loss"] == pytest.approx(0.397887, abs=1e-4)
    assert b({"x1": 0.0, "x2": 0.0}, {"epoch": 25})["runtime"] == pytest.approx(100 * (0.05 + 0.95 * 0.25**1.5))
    with pytest.raises(DomainError, match="resolution"):
        b({"x1": 0.0, "x2": 0.0}, {"resolution": 1})
    with pytest.raises(DomainError, match="epoch"):
        b({"x1": 0.0, "x2": 0.0}, {"epoch": 0})
    h = MfHartmann(dim=6, runtime_scale=10.0, max_fidel=9)
    assert h({f"x{i}": 0.5 for i in range(6)}, {"epoch": 9})["runtime"] == pytest.approx(10.0)


# -- tabular ------------------------------------------------------------------


TOY = Descriptor(
    name="toy",
    space=SearchSpace((Ordinal("width", (16, 32)), Categorical("act", ("relu", "tanh")))),
    fidelities=SearchSpace((Integer("epoch", 1, 3),)),
    seeds=(0, 1, 2, 3),
    obj_keys=("loss",),
    runtime_key="runtime",
)


def _write_toy(tmp_path, rows, header="width,act,epoch,seed,loss,runtime"):
    d = tmp_path / "toy.json"
    d.write_text(TOY.dumps())
    f = tmp_path / "toy.csv"
    f.write_text(header + "\n" + "\n".join(rows) + "\n")
    return d, f


FOUR = ["16,relu,1,0,0.5,10", "16,relu,1,1,0.6,11", "32,tanh,3,0,0.2,30", "32,relu,2,2,0.3,20"]


def test_tabular_load_and_query(tmp_path):
    table = load_tabular(*_write_toy(tmp_path, FOUR))
    assert len(table) == 4
    r = query(table, {"width": 32, "act": "tanh"}, QueryArgs({"epoch": 3}, 0))
    assert dict(r.objectives) == {"loss": 0.2, "runtime": 30.0} and r.runtime == 30.0
    for row in FOUR:
        w, a, e, s, loss, rt = row.split(",")
        got = query(table, {"width": int(w), "act": a}, QueryArgs({"epoch": int(e)}, int(s)))
        assert got.objectives["loss"] == float(loss)
    again = query(table, {"width": 32, "act": "tanh"}, QueryArgs({"epoch": 3}, 0))
    assert again == r


def test_tabular_not_found(tmp_path):
    table = load_tabular(*_write_toy(tmp_path, FOUR))
    with pytest.raises(NotFoundError, match="width"):
        query(table, {"width": 16, "act": "tanh"}, QueryArgs({"epoch": 1}, 0))
    with pytest.raises(NotFoundError):
        query(table, {"width": 16, "act": "tanh"}, QueryArgs({"epoch": 1}))
    with pytest.raises(DomainError, match="resolution"):
        query(table, {"width": 16, "act": "relu"}, QueryArgs({"epoch": 1, "resolution": 1}, 0))


def test_tabular_rejects_bad_files(tmp_path):
    with pytest.raises(TabularError, match="runtime"):
        load_tabular(*_write_toy(tmp_path, ["16,relu,1,0,0.5"], header="width,act,epoch,seed,loss"))
    with pytest.raises(TabularError, match="duplicate"):
        load_tabular(*_write_toy(tmp_path, FOUR + [FOUR[0]]))
    with pytest.raises(TabularError, match="width"):
        load_tabular(*_write_toy(tmp_path, ["64,relu,1,0,0.5,10"]))
    with pytest.raises(TabularError, match="act"):
        load_tabular(*_write_toy(tmp_path, ["16,gelu,1,0,0.5,10"]))
    with pytest.raises(TabularError, match="seed"):
        load_tabular(*_write_toy(tmp_path, ["16,relu,1,9,0.5,10"]))


def test_tabular_jsonl(tmp_path):
    d = tmp_path / "toy.json"
    d.write_text(TOY.dumps())
    f = tmp_path / "toy.jsonl"
    f.write_text(json.dumps({"width": 16, "act": "relu", "epoch": 2, "seed": 1, "loss": 0.4, "runtime": 7}) + "\n")
    bench = TabularBenchmark(d, f)
    assert bench({"width": 16, "act": "relu"}, {"epoch": 2}, 1) == {"loss": 0.4, "runtime": 7.0}


def test_unseeded_queries_are_uniform(tmp_path):
    rows = [f"16,relu,1,{s},{0.1 * s},{s + 1}" for s in range(4)]
    table = load_tabular(*_write_toy(tmp_path, rows))
    rng = np.random.default_rng(12345)
    counts = np.zeros(4)
    for _ in range(10_000):
        r = query(table, {"width": 16, "act": "relu"}, QueryArgs({"epoch": 1}), rng)
        counts[int(r.runtime) - 1] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_hpolib_shaped_table_validates(tmp_path):
    desc = bundled_descriptor("hpolib")
    d = tmp_path / "hpolib.json"
    d.write_text(desc.dumps())
    first = {dim.name: (dim.grid[0] if dim.kind == "ordinal" else dim.choices[0]) for dim in desc.space}
    cols = list(first) + ["epoch", "seed"] + list(desc.obj_keys) + [desc.runtime_key]
    cols = list(dict.fromkeys(cols))
    lines = [",".join(cols)]
    for seed in desc.seeds:
        vals = {**first, "epoch": 100, "seed": seed, desc.runtime_key: 12.5}
        vals.update({k: 0.25 for k in desc.obj_keys if k != desc.runtime_key})
        lines.append(",".join(str(vals[c]) for c in cols))
    f = tmp_path / "hpolib.csv"
    f.write_text("\n".join(lines) + "\n")
    table = load_tabular(d, f)
    assert len(table) == 4
    assert query(table, first, QueryArgs({"epoch": 100}, desc.seeds[0])).runtime == 12.5

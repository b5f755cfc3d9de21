import json

import numpy as np
import pytest

from srlab.io import read_matrix, sidecar_path, write_matrix, write_plan
from srlab.ot_core import SolverConfig, semi_relaxed_ot


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_matrix_roundtrip_exact(tmp_path, suffix):
    m = np.random.default_rng(0).dirichlet(np.ones(5), size=7)
    path = tmp_path / f"m{suffix}"
    write_matrix(m, path)
    assert np.array_equal(read_matrix(path), m)


def test_csv_layout(tmp_path):
    path = tmp_path / "m.csv"
    write_matrix([[0.5, 0.25], [1.0, 0.0]], path)
    assert path.read_text() == "0.5,0.25\n1.0,0.0\n"


def test_ragged_rejected(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("0.5,0.5\n1.0\n")
    with pytest.raises(ValueError):
        read_matrix(path)


def test_plan_sidecar(tmp_path):
    plan = semi_relaxed_ot(np.array([[0.8, 0.2], [0.6, 0.4]]), SolverConfig())
    path = tmp_path / "q.csv"
    side = write_plan(plan, path)
    assert side == sidecar_path(path) == tmp_path / "q.csv.json"
    meta = json.loads(side.read_text())
    assert meta["converged"] is True and meta["iterations"] == plan.iterations
    np.testing.assert_array_equal(read_matrix(path), plan.values)

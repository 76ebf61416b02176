from __future__ import annotations

import numpy as np
import pytest

from fedpgp import checkpoint
from fedpgp.config import from_mapping
from fedpgp.errors import InvalidParameterError
from fedpgp.federation import run_experiment
from fedpgp.numkit import Rng


def test_roundtrip_bit_exact(tmp_path):
    rng = Rng(0)
    arrays = {"p_G": rng.normal_array((4, 3)), "client0.U": rng.normal_array((4, 2)),
              "client0.V": np.array([[np.pi, -0.0, 1e-300], [5e-324, 1e300, 2.0]])}
    checkpoint.save(tmp_path / "c.bin", arrays, {"round": 7, "seed": 3})
    back, meta = checkpoint.load(tmp_path / "c.bin")
    assert meta == {"round": 7, "seed": 3}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_experiment_state(tmp_path):
    res = run_experiment(from_mapping(dict(K=20, N=5, T=2, n_per_class=10)), seed=0)
    arrays = checkpoint.collect_arrays(res.p_G, res.adapters)
    assert set(arrays) == {"p_G"} | {f"client{i}.{m}" for i in range(5) for m in "UV"}
    blob = checkpoint.dumps(arrays)
    assert checkpoint.dumps(checkpoint.loads(blob)[0]) == blob


def test_rejects_garbage():
    with pytest.raises(InvalidParameterError):
        checkpoint.loads(b"not a checkpoint at all")
    blob = checkpoint.dumps({"a": np.ones(3)})
    with pytest.raises(InvalidParameterError):
        checkpoint.loads(blob[:-8])
    with pytest.raises(InvalidParameterError):
        checkpoint.loads(blob + b"x")

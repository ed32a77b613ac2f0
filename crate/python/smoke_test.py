"""Smoke test for the sparse_npls extension module.

Build and install first, e.g. from crates/python:
    maturin develop --release
then run:
    python python/smoke_test.py
"""

import math
import sys
import tempfile

import sparse_npls as sn


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    # thresholds: L1 soft threshold at lam / (2 kappa^2), L0 hard at sqrt(lam) / kappa
    assert close(sn.threshold(1.0, 0.5, 0.2, 1.0), 0.4)
    assert sn.threshold(1.0, 0.05, 0.2, 1.0) == 0.0
    assert sn.threshold(0.0, 0.3, 0.16, 1.0) == 0.0
    assert sn.threshold(0.0, 0.3, 0.16, 1.0, protected=True) == 0.3
    x = sn.cubic_largest_root(4.0 / 27.0)
    assert close(x, 1.0 / 3.0)

    # rank-1 recovery
    a, b, c = [0.6, 0.8], [1.0, 0.0, 0.0], [0.0, 1.0]
    data = [3.0 * i * j * k for i in a for j in b for k in c]
    rho, factors, residual, status = sn.als_rank1(data, [2, 3, 2])
    assert close(rho, 3.0, 1e-12) and residual < 1e-12, (rho, residual, status)

    # metrics
    t = [[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]]
    assert sn.dot_product(t, t)["mean"] == 1.0
    assert sn.dot_product(t, [[-v for v in r] for r in t])["mean"] == -1.0
    assert round(sn.sparse_idx([0.0] * 41 + [1.0] * 23), 4) == 0.6406

    # planted-sparsity stream, online learner and a small grid replay
    stream = sn.Stream.generate(
        [8, 6, 4], 3, 100, 12, seed=1, noise=1 / math.sqrt(10), zero_slices=[(0, list(range(2, 8)))]
    )
    assert len(stream) == 12 and stream.dims == [8, 6, 4]
    learner = sn.Learner([8, 6, 4], 3, f_max=5, p=1.0, lam=0.2)
    for i in range(8):
        f_star = learner.step(stream.x(i), stream.y(i))
    model = learner.model
    assert 1 <= f_star <= 5
    assert model.sparsity_pattern(0) == [2, 3, 4, 5, 6, 7], model.summary()
    pred = model.predict(stream.x(8))
    assert len(pred) == 100 and len(pred[0]) == 3

    records, models = sn.replay(stream, [(1.0, 0.0), (1.0, 0.2)], f_max=5, mu=1.0, train_prefix=8)
    assert "header" in records[0] and len(records) == 3
    dense, sparse = records[1], records[2]
    assert dense["sparse_idx_mode_1"] == 0.0 and sparse["sparse_idx_mode_1"] == 0.75
    assert abs(dense["dotp_mean"] - sparse["dotp_mean"]) < 0.05

    with tempfile.TemporaryDirectory() as d:
        models[1].save(f"{d}/m.nplsm")
        again = sn.Model.load(f"{d}/m.nplsm")
        assert again.predict(stream.x(9)) == models[1].predict(stream.x(9))
        stream.save(f"{d}/s")
        assert sn.Stream.load(f"{d}/s").y(3) == stream.y(3)
        try:
            sn.Model.load(f"{d}/missing.nplsm")
        except OSError:
            pass
        else:
            raise AssertionError("missing model should raise OSError")

    try:
        sn.Learner([0, 3], 1, f_max=2)
    except ValueError:
        pass
    else:
        raise AssertionError("zero dimension should raise ValueError")

    print(f"sparse_npls {sn.__version__}: smoke test passed")
    print(model.summary(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())

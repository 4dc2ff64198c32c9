"""Smoke test for the Python bindings.

Build first:
    cargo build --release -p decoupled-dt-py --features extension-module
then run `python3 python/smoke_test.py`.
"""

import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_module():
    try:
        import decoupled_dt_py
        return decoupled_dt_py
    except ImportError:
        pass
    built = os.path.join(ROOT, "target", "release", "libdecoupled_dt_py.so")
    if not os.path.exists(built):
        sys.exit(f"extension not found at {built}; build it first")
    tmp = tempfile.mkdtemp()
    shutil.copy(built, os.path.join(tmp, "decoupled_dt_py.so"))
    sys.path.insert(0, tmp)
    import decoupled_dt_py
    return decoupled_dt_py


def main():
    ddt = import_module()

    assert ddt.compute_rtgs([1.0, 2.0, 3.0]) == [6.0, 5.0, 3.0]
    assert ddt.normalized_score(-6.0, -10.0, -2.0) == 50.0
    random_ref, expert_ref = ddt.reference_scores("reacher")
    assert expert_ref > random_ref

    mask = ddt.attention_mask("blocked-dt", 2)
    assert len(mask) == 6 and mask[4] == [False, True, True, True, True, False]

    for variant in ("dt", "blocked-dt", "ddt"):
        err, passed = ddt.grad_check(variant)
        assert passed, (variant, err)

    ds = ddt.Dataset.generate("reacher", "mix:0.5", episodes=60, seed=1)
    assert len(ds) == 60 and ds.env_id == "reacher"
    assert ds.decomposition_rate() == 1.0
    assert ds.rtgs(0)[0] == sum(ds.rewards(0)) or abs(ds.rtgs(0)[0] - sum(ds.rewards(0))) < 1e-9

    fresh = ddt.Model("reacher", "ddt", seed=3)
    obs, acts, ts = [[0.1], [0.2]], [[0.5]], [0, 1]
    assert fresh.predict(obs, acts, ts, -5.0) == fresh.predict(obs, acts, ts, 5.0)
    x = [float(i) for i in range(16)]
    assert fresh.adaln(x, 0.3) == fresh.adaln(x, -7.0)

    model, losses = ddt.Model.train(ds, "ddt", seed=0, steps=200)
    assert len(losses) == 200 and losses[-1] < losses[0]
    report = ddt.rollout(model, "reacher", episodes=5, seed=2)
    assert len(report["returns"]) == 5 and report["normalized"] is not None

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.json")
        model.save(path)
        back = ddt.Model.load(path)
        assert back.predict(obs, acts, ts, -3.0) == model.predict(obs, acts, ts, -3.0)
        ds.save(os.path.join(d, "r.jsonl"))
        assert ddt.Dataset.load(os.path.join(d, "r.jsonl")).returns() == ds.returns()

    layers, labels, diag = ddt.attention(model, "reacher", steps=20, seed=0)
    assert len(labels) == 20 and 0.0 < diag <= 1.0 + 1e-9
    rows = ddt.bench_inference([4], trials=3)
    assert [r[2] for r in rows] == [12, 12, 8]

    try:
        ddt.Model("reacher", "ddt", config={"d_model": 15})
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

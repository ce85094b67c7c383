"""Smoke test for the fedmeta_py extension module.

Build and run from the repository root:

    cargo build --release -p fedmeta-py --features extension-module
    cp target/release/libfedmeta_py.so python/fedmeta_py.so
    python3 python/smoke_test.py
"""

import math
import pathlib

import fedmeta_py as fm

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_gradient():
    spec = fm.ModelSpec(3, [5, 2], activation="tanh")
    params = spec.init_params(1)
    assert len(params) == spec.param_count
    xs = [[0.1, -0.4, 0.9], [1.2, 0.3, -0.5]]
    ys = [0, 1]
    grad = spec.gradient(params, xs, ys)
    h = 1e-6
    for i in range(0, len(params), 7):
        up, down = list(params), list(params)
        up[i] += h
        down[i] -= h
        fd = (spec.loss(up, xs, ys) - spec.loss(down, xs, ys)) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-6 * max(1.0, abs(fd)), (i, fd, grad[i])
    assert spec.predict(params, xs[0]) in (0, 1)
    try:
        spec.loss(params[:-1], xs, ys)
    except ValueError:
        pass
    else:
        raise AssertionError("short parameter vector accepted")


def check_experiment():
    text = (ROOT / "crates/cli/configs/smoke.toml").read_text()
    exp = fm.Experiment.from_toml(text)
    assert len(exp.config_hash) == 16
    a, b = exp.train(), exp.train()
    assert a.metrics == b.metrics, "training is not deterministic"
    assert a.completed_rounds == 30
    mi, _, mp, _ = a.personalize(epochs=0)
    assert mi == mp
    residual, fedavg, fedsgd, fomaml = exp.decompose(round=25)
    assert residual <= 1e-10 and len(fomaml) == 4, (residual, fomaml)
    assert math.isfinite(fedavg) and math.isfinite(fedsgd)
    print(f"final round {a.metrics[-1][0]}: initial {a.metrics[-1][1]:.4f}, personalized {a.metrics[-1][3]:.4f}")


if __name__ == "__main__":
    check_gradient()
    check_experiment()
    print("python smoke test passed")

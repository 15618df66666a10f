"""Smoke test for the combts Python extension.

Build and install with `maturin develop` (or `pip install .`) from crates/py,
then run `python python/smoke.py`.
"""

import math
import os
import sys
import tempfile

import combts_py as ct


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    xs = [0.5, 0.7, 0.4, 0.9, 0.6]
    assert close(ct.mu_hat(xs), 0.62)
    assert close(ct.sigma_hat(xs), math.sqrt(0.037))
    assert ct.l_best(xs) == 0.4
    lo, hi = ct.ci95(xs)
    assert lo < 0.62 < hi
    assert close(ct.student_t_quantile(0.975, 99), 1.9842169515864171, 1e-12)

    u, p, exact = ct.mann_whitney([1.0, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert (u, exact) == (0.0, True) and close(p, 0.05)

    signal = [math.sin(2 * math.pi * t / 8) for t in range(32)]
    back = ct.idft(ct.dft(signal))
    assert max(abs(a - b) for a, b in zip(back, signal)) < 1e-12

    trend, seasonal = ct.decompose(signal, 5)
    assert max(abs(t + s - x) for t, s, x in zip(trend, seasonal, signal)) < 1e-12
    assert [len(s) for s in ct.multiscale(signal, 2, 2)] == [32, 16, 8]
    normalized, mean, std = ct.revin([3.0, 5.0, 7.0])
    assert close(mean, 5.0) and abs(sum(normalized)) < 1e-12

    rows = ct.synthetic(600, variates=2, period=12, noise=0.05, seed=3)
    assert len(rows) == 600 and len(rows[0]) == 2

    model = ct.Model(48, 12, 2, transform="cycle", embedding="identity", encoder="identity", cycle_len=12)
    window = [[r[n] for r in rows[:48]] for n in range(2)]
    forecast = model.predict([window], starts=[0])
    assert len(forecast) == 1 and len(forecast[0]) == 2 and len(forecast[0][0]) == 12
    mse, mae, best = model.fit(rows, learning_rate=1e-2, epochs=5)
    assert math.isfinite(mse) and best >= 1
    print(f"model: {model.param_count} parameters, attention over {model.attention_axis}, test MSE {mse:.4f}")

    try:
        ct.Model(96, 24, 3, embedding="lstm")
    except ValueError as e:
        assert "lstm" in str(e)
    else:
        raise AssertionError("unknown embedding accepted")

    with tempfile.TemporaryDirectory() as tmp:
        config = os.path.join(tmp, "tiny.toml")
        with open(config, "w") as f:
            f.write(TINY)
        config_hash, plan_hash, runs = ct.validate_config(config)
        assert runs == 8
        out = os.path.join(tmp, "out")
        plan, ok, diverged, failed = ct.run_experiment(config, out=out)
        assert plan == plan_hash and ok + diverged + failed == 8
        assert "identity" in ct.report(out)
        rows = ct.significance(out, "identity", "mlp", alpha=0.1)
        assert rows[-1][0] == "overall"
    print("smoke test passed")


TINY = """
name = "tiny"
stage = "encoder"
variants = ["identity", "mlp"]
k = 4

[training]
epochs = 2

[space]
datasets = ["a", "b"]
lookbacks = [24]
horizons = [8, 12]
layers = [1]
latent_dims = [8]
learning_rates = [1e-2]
embeddings = ["patch"]
patch_lens = [8]
strides = [4]

[datasets.a]
synthetic = { length = 300, variates = 2, period = 12, noise = 0.1, seed = 1 }
split = { ratio = { train = 0.6, val = 0.2 } }

[datasets.b]
synthetic = { length = 300, variates = 1, period = 8, noise = 0.1, seed = 2 }
split = { ratio = { train = 0.6, val = 0.2 } }
"""

if __name__ == "__main__":
    sys.exit(main())

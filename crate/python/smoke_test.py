"""Smoke test for the sensiq Python module.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import json
import pathlib
import tempfile

import numpy as np
from scipy.stats import spearmanr

import sensiq

EXPERIMENT_KEYS = {"experiment", "seed", "scalars", "series", "config_digest"}


def mlp_forward(net, x):
    h = np.asarray(x)
    for name, kind in net.layers():
        if kind == "linear":
            h = h @ np.asarray(net.weight(name)).T + np.asarray(net.bias(name))
        elif kind == "relu":
            h = np.maximum(h, 0.0)
    return h


def rtn_oracle(w, bits):
    w = np.asarray(w)
    qmax = 2 ** (bits - 1) - 1
    scale = np.abs(w).max() / qmax
    r = w / scale
    q = np.clip(np.sign(r) * np.floor(np.abs(r) + 0.5), -qmax - 1, qmax)
    return q * scale


def check_network():
    net = sensiq.Network.random([5, 7, 3], relu=True, seed=3)
    teacher = sensiq.Network.random([5, 7, 3], relu=True, seed=4)
    x, t = sensiq.sample_gaussian(teacher, 32, seed=5)
    assert np.allclose(net.predict(x), mlp_forward(net, x), atol=1e-12)

    loss = net.loss(x, t)
    assert abs(loss - np.mean(np.sum((mlp_forward(net, x) - np.asarray(t)) ** 2, axis=1))) <= 1e-12

    # weight gradient from the tap against central differences
    _, (tap,) = net.backward(x, t, taps=["fc2"])
    grad = np.asarray(tap.g).T @ np.asarray(tap.x) / tap.n_samples
    w = np.asarray(net.weight("fc2"))
    h = 1e-6
    for k, j in [(0, 0), (1, 3), (2, 6)]:
        wp, wm = w.copy(), w.copy()
        wp[k, j] += h
        wm[k, j] -= h
        fd = (net.with_weight("fc2", wp.tolist()).loss(x, t) - net.with_weight("fc2", wm.tolist()).loss(x, t)) / (2 * h)
        assert abs(fd - grad[k, j]) <= 1e-6 * max(1.0, abs(fd)), (fd, grad[k, j])

    again = sensiq.Network.parse(net.to_text())
    assert again.to_text() == net.to_text()
    return net, teacher, x, t


def check_sensitivity(net, x, t):
    _, taps = net.backward(x, t)
    assert [tp.layer_name for tp in taps] == ["fc1", "fc2"]
    tap = taps[0]
    w = net.weight("fc1")
    mag = sensiq.compute_sensitivity("magnitude", tap, w)
    assert np.allclose(mag.scores, np.mean(np.asarray(tap.x) ** 2, axis=0), rtol=1e-12)
    reports = {m: sensiq.compute_sensitivity(m, tap, w) for m in sensiq.metric_names()}
    assert reports["obd-weight"].shape == (7, 5)
    a = reports["exact-sensitivity"].channel_scores()
    b = reports["fisher-diag"].channel_scores()
    rho = sensiq.rank_correlation(reports["exact-sensitivity"], reports["fisher-diag"])
    assert abs(rho - spearmanr(a, b).statistic) <= 1e-12
    assert sensiq.rank_correlation([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == spearmanr([1, 2, 3], [3, 1, 2]).statistic


def check_quantizers(net, x, t):
    w = net.weight("fc1")
    spec = sensiq.QuantSpec(bits=3)
    rtn = sensiq.quantize_rtn(w, spec)
    assert np.allclose(rtn.dequantized(), rtn_oracle(w, 3), atol=1e-15)
    assert np.allclose(np.asarray(rtn.dequantized()) - np.asarray(w), rtn.delta, atol=1e-15)

    _, (tap,) = net.backward(x, t, taps=["fc1"])
    awq0 = sensiq.quantize_awq(w, tap, spec, alpha_grid=[0.0])
    assert np.allclose(awq0.dequantized(), rtn.dequantized(), atol=1e-15)

    diag = np.diag(np.arange(1.0, 6.0)).tolist()
    obs = sensiq.quantize_obs(w, diag, spec)
    assert np.allclose(obs.dequantized(), rtn.dequantized(), atol=1e-12)

    h = sensiq.gram_mean(tap.x)
    assert np.allclose(h, np.asarray(tap.x).T @ np.asarray(tap.x) / tap.n_samples, atol=1e-12)
    obs = sensiq.quantize_obs(w, h, spec)
    assert set(np.unique(obs.q_weight)) <= set(range(spec.qmin, spec.qmax + 1))

    zero = sensiq.LayerTap("fc1", tap.x, tap.y, np.zeros_like(tap.y).tolist())
    try:
        sensiq.quantize_obs_weighted(w, zero, spec)
    except sensiq.DegenerateCurvatureError:
        pass
    else:
        raise AssertionError("zero gradients must give degenerate curvature")
    assert issubclass(sensiq.DegenerateCurvatureError, sensiq.NumericalError)

    try:
        sensiq.QuantSpec(bits=1)
    except sensiq.ValidationError:
        pass
    else:
        raise AssertionError("bits=1 must be rejected")

    alloc = sensiq.allocate_bits(net, x, t, sensiq.QuantSpec(bits=4), budget=3.0)
    assert alloc["average_bits"] <= 3.0
    assert set(alloc["bits"]) == {"fc1", "fc2"}


def check_experiments(net, teacher, x, t):
    spec = sensiq.QuantSpec(bits=3)
    results = [
        sensiq.run_prediction_fidelity(net, x, t, "fc2", spec),
        sensiq.run_cross_layer(net, x, t, spec),
        sensiq.run_static_vs_adaptive(net, x, t, spec, rounds=2),
        sensiq.run_proxy_ranking(net, x, t, "fc1", spec),
        sensiq.run_bit_allocation(net, x, t, spec, budgets=[2.5, 3.5]),
        sensiq.run_calibration_mismatch(net, teacher, "fc1", spec, shift=[0.0, 3.0, 0.0, 0.0, 0.0], n=64, seed=1),
        sensiq.run_static_vs_adaptive_trials([3, 4, 2], spec, trials=4, n=16, jobs=2),
        sensiq.run_weighted_obs_trials([3, 4, 2], spec, trials=4, n=16),
    ]
    for r in results:
        assert set(r) == EXPERIMENT_KEYS, r.keys()
        assert len(r["config_digest"]) == 64
    fid = results[0]["series"]
    assert np.allclose(fid["abs_gap"], np.abs(np.asarray(fid["predicted"]) - np.asarray(fid["measured"])))
    proxy = results[3]["scalars"]
    assert abs(proxy["interaction"] - (proxy["joint_delta"] - proxy["sum_single"])) <= 1e-12
    again = sensiq.run_weighted_obs_trials([3, 4, 2], spec, trials=4, n=16, jobs=3)
    assert again == results[-1]


def check_cli(net):
    with tempfile.TemporaryDirectory() as d:
        root = pathlib.Path(d)
        net.save(str(root / "m.nnm"))
        (root / "data.cfg").write_text("seed = 2\nmodel_path = m.nnm\nn = 16\n")
        code = sensiq.cli(["gen-data", "--config", str(root / "data.cfg"), "--out", str(root / "data")])
        assert code == 0
        x, t = sensiq.load_csv(str(root / "data" / "data.csv"))
        assert len(x) == 16 and len(t[0]) == 3
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        assert manifest["files"] == ["data.csv"]
        assert sensiq.cli(["sensitivity", "--config", str(root / "missing.cfg"), "--out", str(root / "s")]) == 2


def main():
    net, teacher, x, t = check_network()
    check_sensitivity(net, x, t)
    check_quantizers(net, x, t)
    check_experiments(net, teacher, x, t)
    check_cli(net)
    print(f"sensiq {sensiq.__version__}: python smoke test passed")


if __name__ == "__main__":
    main()

"""Independent reference implementations used by the tests.

Each one is written the slow, obvious way and shares no code with the
package beyond numpy itself.
"""
import math

import numpy as np


def naive_dft_magnitudes(frames):
    """|DFT| of each row via an explicit complex-exponential sum (bins 0..N/2)."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[1]
    out = np.zeros((frames.shape[0], n // 2 + 1))
    t = np.arange(n)
    for k in range(n // 2 + 1):
        basis = np.exp(-2j * math.pi * k * t / n)
        out[:, k] = np.abs(frames @ basis)
    return out


def periodic_hann(n):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])


def l2_by_loop(matrix):
    out = []
    for row in matrix:
        s = 0.0
        for v in row:
            s += v * v
        out.append(math.sqrt(s))
    return np.array(out)


def dtw_bruteforce(cost):
    """Minimum summed cost over every monotone path with steps (1,0), (0,1), (1,1).

    Enumerates paths depth-first; the running sum is accumulated in path order
    so the float result is reproducible by a forward dynamic program.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best = [math.inf]

    def walk(i, j, acc):
        acc = acc + cost[i, j] if (i, j) != (0, 0) else cost[0, 0]
        if i == n - 1 and j == m - 1:
            best[0] = min(best[0], acc)
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


def count_paths(n, m):
    """Delannoy number D(n-1, m-1): how many monotone paths exist."""
    table = [[1] * m for _ in range(n)]
    for i in range(1, n):
        for j in range(1, m):
            table[i][j] = table[i - 1][j] + table[i][j - 1] + table[i - 1][j - 1]
    return table[n - 1][m - 1]


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    """Norm-wise relative error ``max|a-b| / max(max|a|, max|b|)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def f_mae_formula(f, fp, v, vp):
    num = 0.0
    den = 0
    for ft, fpt, vt, vpt in zip(f, fp, v, vp):
        num += abs(ft - fpt) * int(vt) * int(vpt)
        den += int(vt) * int(vpt)
    return num / den if den else None


def e_mae_formula(e, ep):
    return sum(abs(a - b) for a, b in zip(e, ep)) / len(e)


def sawtooth(freq_hz, sr, seconds):
    """Band-unlimited sawtooth with an instantaneous-frequency schedule."""
    n = int(sr * seconds)
    f = np.asarray(freq_hz(np.arange(n) / sr), dtype=np.float64)
    phase = np.cumsum(f) / sr
    return 2.0 * (phase - np.floor(phase + 0.5))


def gradcheck(net, x, ctx=None, train=False, seed=0, wrt_input=True):
    """Worst relative error between ``net.backward`` and central differences.

    The loss is ``sum(out * R)`` for a fixed random ``R``. Dropout counters are
    rewound before every evaluation so each one sees the same mask.
    """
    calls = [d.calls for d in net.dropout_layers()]

    def run():
        net.set_rng_state(calls)
        return net.forward(x, train=train, ctx=ctx)

    out = run()
    weights = np.random.default_rng(seed).normal(size=out.shape)
    loss = lambda: float(np.sum(run() * weights))  # noqa: E731
    net.zero_grad()
    run()
    gx = net.backward(weights)
    analytic = dict(net.named_grads())
    worst = 0.0
    for name, p in net.named_params().items():
        worst = max(worst, rel_error(analytic[name], numeric_grad(loss, p)))
    if wrt_input:
        worst = max(worst, rel_error(gx, numeric_grad(loss, x)))
    return worst


def model_gradcheck(model, example, seed=0):
    """Like :func:`gradcheck` but over every module a predictor trains."""
    mods = model.modules()
    calls = {k: [d.calls for d in m.dropout_layers()] for k, m in mods.items()}

    def run():
        for k, m in mods.items():
            m.set_rng_state(calls[k])
        return model.forward(example, train=True)

    out = run()
    weights = np.random.default_rng(seed).normal(size=out.shape)
    loss = lambda: float(np.sum(run() * weights))  # noqa: E731
    for m in mods.values():
        m.zero_grad()
    run()
    model.backward(weights)
    worst = 0.0
    for name, m in mods.items():
        grads = m.named_grads()
        for k, p in m.named_params().items():
            worst = max(worst, rel_error(grads[k], numeric_grad(loss, p)))
    return worst


# One small network per layer kind, each with an input that exercises it.
LAYER_CASES = {
    "linear": ([{"kind": "linear", "in_dim": 4, "out_dim": 3}], (5, 4), None),
    "conv1d": ([{"kind": "conv1d", "in_ch": 3, "out_ch": 4, "kernel": 3}], (7, 3), None),
    "conv1d_stride2_even_kernel": (
        [{"kind": "conv1d", "in_ch": 2, "out_ch": 3, "kernel": 4, "stride": 2}], (9, 2), None),
    "conv2d": ([{"kind": "conv2d", "in_ch": 2, "out_ch": 3, "kernel": [3, 3],
                 "stride": [1, 2]}], (2, 6, 7), None),
    "layer_norm": ([{"kind": "linear", "in_dim": 5, "out_dim": 5},
                    {"kind": "layer_norm", "dim": 5}], (4, 5), None),
    "relu": ([{"kind": "linear", "in_dim": 3, "out_dim": 6}, {"kind": "relu"}], (5, 3), None),
    "dropout": ([{"kind": "linear", "in_dim": 3, "out_dim": 6},
                 {"kind": "dropout", "rate": 0.4, "seed": 3}], (5, 3), None),
    "token_mean_pool": ([{"kind": "linear", "in_dim": 3, "out_dim": 2},
                         {"kind": "token_mean_pool"}], (9, 3), {"durations": [2, 3, 4]}),
    "flatten": ([{"kind": "conv2d", "in_ch": 1, "out_ch": 2, "kernel": [3, 3]},
                 {"kind": "flatten"}, {"kind": "linear", "in_dim": 8, "out_dim": 2}],
                (1, 5, 4), None),
}

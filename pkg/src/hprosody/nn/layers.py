"""Layers with hand-written backward passes.

Arrays are unbatched: sequences are ``(length, channels)``, images for
:class:`Conv2d` are ``(channels, height, width)``. Training loops run one
utterance at a time and accumulate gradients across a batch.

Each layer caches what it needs during ``forward`` and consumes it in
``backward``; gradients are *accumulated* into ``layer.grads`` until
:meth:`Layer.zero_grad`.
"""
from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from ..errors import ConfigError, ShapeError, StateError

LAYER_KINDS = (
    "conv1d", "conv2d", "linear", "layer_norm", "relu", "dropout",
    "embedding_lookup", "token_mean_pool", "flatten",
)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        return self._cache

    def forward(self, x, train=False, ctx=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(self.in_dim)
        self.params = {"weight": _uniform(rng, bound, (self.in_dim, self.out_dim)),
                       "bias": _uniform(rng, bound, (self.out_dim,))}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x, train=False, ctx=None):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: expected last dim {self.in_dim}, got shape {x.shape}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, g):
        x = self._need_cache()
        x2 = x.reshape(-1, self.in_dim)
        g2 = g.reshape(-1, self.out_dim)
        self.grads["weight"] += x2.T @ g2
        self.grads["bias"] += g2.sum(axis=0)
        return g @ self.params["weight"].T


def _same_pad(k):
    return (k - 1) // 2, k // 2


class Conv1d(Layer):
    """Time convolution over ``(length, in_ch)`` with "same" padding."""

    kind = "conv1d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ConfigError("conv1d: kernel and stride must be positive")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride = int(kernel), int(stride)
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(self.in_ch * self.kernel)
        self.params = {"weight": _uniform(rng, bound, (self.kernel, self.in_ch, self.out_ch)),
                       "bias": _uniform(rng, bound, (self.out_ch,))}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 2 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv1d: expected (length, {self.in_ch}), got {x.shape}")
        n = x.shape[0]
        left, right = _same_pad(self.kernel)
        xp = np.pad(x, ((left, right), (0, 0)))
        n_out = -(-n // self.stride)
        span = self.stride * (n_out - 1) + 1
        w = self.params["weight"]
        out = np.zeros((n_out, self.out_ch)) + self.params["bias"]
        for d in range(self.kernel):
            out += xp[d:d + span:self.stride] @ w[d]
        self._cache = (xp, n, n_out, span)
        return out

    def backward(self, g):
        xp, n, n_out, span = self._need_cache()
        w = self.params["weight"]
        gxp = np.zeros_like(xp)
        for d in range(self.kernel):
            self.grads["weight"][d] += xp[d:d + span:self.stride].T @ g
            gxp[d:d + span:self.stride] += g @ w[d].T
        self.grads["bias"] += g.sum(axis=0)
        left = _same_pad(self.kernel)[0]
        return gxp[left:left + n]


class Conv2d(Layer):
    """2-D convolution over ``(in_ch, H, W)`` with "same" padding."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=(3, 3), stride=(1, 1), rng=None):
        super().__init__()
        kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
        if min(kernel) < 1 or min(stride) < 1:
            raise ConfigError("conv2d: kernel and stride must be positive")
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)
        rng = rng or np.random.default_rng(0)
        kh, kw = self.kernel
        bound = 1.0 / np.sqrt(self.in_ch * kh * kw)
        self.params = {"weight": _uniform(rng, bound, (kh, kw, self.in_ch, self.out_ch)),
                       "bias": _uniform(rng, bound, (self.out_ch,))}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": list(self.kernel), "stride": list(self.stride)}

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 3 or x.shape[0] != self.in_ch:
            raise ShapeError(f"conv2d: expected ({self.in_ch}, H, W), got {x.shape}")
        (kh, kw), (sh, sw) = self.kernel, self.stride
        _, h, wd = x.shape
        (t, b), (l, r) = _same_pad(kh), _same_pad(kw)
        xp = np.pad(x, ((0, 0), (t, b), (l, r)))
        ho, wo = -(-h // sh), -(-wd // sw)
        span_h, span_w = sh * (ho - 1) + 1, sw * (wo - 1) + 1
        weight = self.params["weight"]
        out = np.zeros((self.out_ch, ho, wo)) + self.params["bias"][:, None, None]
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + span_h:sh, j:j + span_w:sw]
                out += np.tensordot(weight[i, j], patch, axes=([0], [0]))
        self._cache = (xp, h, wd, span_h, span_w)
        return out

    def backward(self, g):
        xp, h, wd, span_h, span_w = self._need_cache()
        (kh, kw), (sh, sw) = self.kernel, self.stride
        weight = self.params["weight"]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + span_h:sh, j:j + span_w:sw]
                self.grads["weight"][i, j] += np.tensordot(patch, g, axes=([1, 2], [1, 2]))
                gxp[:, i:i + span_h:sh, j:j + span_w:sw] += np.tensordot(
                    weight[i, j], g, axes=([1], [0]))
        self.grads["bias"] += g.sum(axis=(1, 2))
        t, l = _same_pad(kh)[0], _same_pad(kw)[0]
        return gxp[:, t:t + h, l:l + wd]


class LayerNorm(Layer):
    kind = "layer_norm"

    def __init__(self, dim, eps=1e-5, rng=None):
        super().__init__()
        self.dim, self.eps = int(dim), float(eps)
        self.params = {"gain": np.ones(self.dim), "bias": np.zeros(self.dim)}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}

    def forward(self, x, train=False, ctx=None):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layer_norm: expected last dim {self.dim}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.params["gain"] + self.params["bias"]

    def backward(self, g):
        xhat, inv = self._need_cache()
        self.grads["gain"] += (g * xhat).reshape(-1, self.dim).sum(axis=0)
        self.grads["bias"] += g.reshape(-1, self.dim).sum(axis=0)
        gh = g * self.params["gain"]
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, ctx=None):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, g):
        return np.where(self._need_cache(), g, 0.0)


class Dropout(Layer):
    """Inverted dropout; masks come from a counter-based seeded stream.

    Mask ``k`` is drawn from ``default_rng([seed, k])`` so a run resumed with
    the saved ``calls`` counter reproduces the same masks.
    """

    kind = "dropout"

    def __init__(self, rate=0.5, seed=0, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.seed = int(seed)
        self.calls = 0
        self._passthrough = None

    def spec(self):
        return {"kind": self.kind, "rate": self.rate, "seed": self.seed}

    def forward(self, x, train=False, ctx=None):
        if not train or self.rate == 0.0:
            self._cache = None
            self._passthrough = True
            return x
        gen = np.random.default_rng([self.seed, self.calls])
        self.calls += 1
        mask = (gen.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = mask
        self._passthrough = False
        return x * mask

    def backward(self, g):
        if self._passthrough is None:
            raise StateError("dropout: backward called before forward")
        if self._passthrough:
            return g
        return g * self._cache


class Embedding(Layer):
    """Row lookup; input is an integer index array."""

    kind = "embedding_lookup"

    def __init__(self, vocab, dim, rng=None, scale=None):
        super().__init__()
        self.vocab, self.dim = int(vocab), int(dim)
        rng = rng or np.random.default_rng(0)
        scale = 1.0 / np.sqrt(self.dim) if scale is None else scale
        self.params = {"weight": rng.normal(0.0, scale, (self.vocab, self.dim))}
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "vocab": self.vocab, "dim": self.dim}

    def forward(self, idx, train=False, ctx=None):
        idx = np.asarray(idx)
        if idx.dtype.kind not in "iu":
            raise ShapeError("embedding_lookup: indices must be integers")
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise ShapeError(f"embedding_lookup: index outside [0, {self.vocab})")
        self._cache = idx
        return self.params["weight"][idx]

    def backward(self, g):
        idx = self._need_cache()
        np.add.at(self.grads["weight"], idx, g)
        return None


class TokenMeanPool(Layer):
    """Average frames ``(T, F)`` within each token span -> ``(n_tokens, F)``.

    Token durations are read from ``ctx["durations"]``.
    """

    kind = "token_mean_pool"

    def forward(self, x, train=False, ctx=None):
        if ctx is None or "durations" not in ctx:
            raise ShapeError("token_mean_pool: needs ctx['durations']")
        durs = np.asarray(ctx["durations"], dtype=np.int64)
        if np.any(durs < 1) or durs.sum() != x.shape[0]:
            raise ShapeError(
                f"token_mean_pool: durations sum to {durs.sum()}, input has {x.shape[0]} frames"
            )
        starts = np.concatenate(([0], np.cumsum(durs)[:-1]))
        self._cache = durs
        return np.add.reduceat(x, starts, axis=0) / durs[:, None]

    def backward(self, g):
        durs = self._need_cache()
        return np.repeat(g / durs[:, None], durs, axis=0)


class Flatten(Layer):
    """``(C, T, M)`` -> ``(T, C * M)``: channels then mel bins per frame."""

    kind = "flatten"

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 3:
            raise ShapeError(f"flatten: expected (C, T, M), got {x.shape}")
        self._cache = x.shape
        c, t, m = x.shape
        return x.transpose(1, 0, 2).reshape(t, c * m)

    def backward(self, g):
        c, t, m = self._need_cache()
        return g.reshape(t, c, m).transpose(1, 0, 2)


_BUILDERS = {
    "linear": lambda s, rng: Linear(s["in_dim"], s["out_dim"], rng=rng),
    "conv1d": lambda s, rng: Conv1d(s["in_ch"], s["out_ch"], s.get("kernel", 3),
                                    s.get("stride", 1), rng=rng),
    "conv2d": lambda s, rng: Conv2d(s["in_ch"], s["out_ch"], s.get("kernel", (3, 3)),
                                    s.get("stride", (1, 1)), rng=rng),
    "layer_norm": lambda s, rng: LayerNorm(s["dim"], s.get("eps", 1e-5)),
    "relu": lambda s, rng: ReLU(),
    "dropout": lambda s, rng: Dropout(s.get("rate", 0.5), s.get("seed", 0)),
    "embedding_lookup": lambda s, rng: Embedding(s["vocab"], s["dim"], rng=rng),
    "token_mean_pool": lambda s, rng: TokenMeanPool(),
    "flatten": lambda s, rng: Flatten(),
}


def build_layer(spec: dict, rng=None) -> Layer:
    kind = spec.get("kind")
    if kind not in _BUILDERS:
        raise ConfigError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    try:
        return _BUILDERS[kind](spec, rng)
    except KeyError as exc:
        raise ConfigError(f"{kind}: missing hyperparameter {exc}") from exc


class Sequential:
    """A chain of layers; the unit that gets checkpointed and optimized."""

    def __init__(self, layers: List[Layer]):
        self.layers = list(layers)

    @classmethod
    def from_specs(cls, specs, seed=0) -> "Sequential":
        rng = np.random.default_rng(seed)
        layers = []
        for s in specs:
            s = dict(s)
            if s.get("kind") == "dropout" and "seed" not in s:
                s["seed"] = int(rng.integers(2**31))
            layers.append(build_layer(s, rng))
        return cls(layers)

    def specs(self) -> List[dict]:
        return [layer.spec() for layer in self.layers]

    def forward(self, x, train=False, ctx=None):
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train=train, ctx=ctx)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
        return x

    __call__ = forward

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": p for i, layer in enumerate(self.layers)
                for k, p in layer.params.items()}

    def named_grads(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": g for i, layer in enumerate(self.layers)
                for k, g in layer.grads.items()}

    def load_params(self, params: Dict[str, np.ndarray]):
        own = self.named_params()
        missing = set(own) - set(params)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters {sorted(missing)}")
        for key, arr in own.items():
            src = np.asarray(params[key], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"parameter {key}: shape {src.shape}, expected {arr.shape}")
            arr[...] = src

    def dropout_layers(self) -> List[Dropout]:
        return [layer for layer in self.layers if isinstance(layer, Dropout)]

    def rng_state(self) -> List[int]:
        return [d.calls for d in self.dropout_layers()]

    def set_rng_state(self, calls: Optional[List[int]]):
        for d, c in zip(self.dropout_layers(), calls or []):
            d.calls = int(c)

    def freeze(self):
        """Make every parameter array read-only."""
        for p in self.named_params().values():
            p.flags.writeable = False

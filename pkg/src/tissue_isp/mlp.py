"""Feed-forward networks on a flat float64 parameter vector, with Adam."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tissue_isp.errors import ShapeError

HIDDEN = (256, 256)
CHECKPOINT_MAGIC = b"ISPMLP\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Affine layers with rectifiers between them.

    ``widths`` lists every layer width including input and output; the
    parameters live in ``values`` ordered ``W0, b0, W1, b1, ...`` with each
    ``W`` stored row-major as (fan_in, fan_out).
    """

    widths: tuple[int, ...]
    values: np.ndarray
    _views: tuple = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.size != n_params(self.widths):
            raise ShapeError(f"expected {n_params(self.widths)} parameters, got {self.values.size}")
        self._views = None

    @property
    def layers(self):
        # rebuilt when ``values`` is reassigned
        if self._views is None or self._views[0] is not self.values:
            views = []
            for name, (off, shape) in index_map(self.widths).items():
                if name.startswith("W"):
                    w = self.values[off : off + shape[0] * shape[1]].reshape(shape)
                else:
                    views[-1] = (views[-1], self.values[off : off + shape[0]])
                    continue
                views.append(w)
            self._views = (self.values, views)
        return self._views[1]

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.widths, self.values.copy())


def n_params(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def index_map(widths) -> dict[str, tuple[int, tuple[int, ...]]]:
    out, off = {}, 0
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"W{i}"] = (off, (a, b))
        off += a * b
        out[f"b{i}"] = (off, (b,))
        off += b
    return out


def init_mlp(widths, rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    chunks = []
    for a, b in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(a)
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(rng.uniform(-bound, bound, size=b))
    return MlpParams(tuple(widths), np.concatenate(chunks))


def forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass returning ``(output, cache)`` for :func:`backward_cached`."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.n_in:
        raise ShapeError(f"input width {h.shape[-1]} != {params.n_in}")
    acts = [h]
    layers = params.layers
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return (h[0] if single else h), (acts, single)


def forward(params: MlpParams, x) -> np.ndarray:
    return forward_cached(params, x)[0]


def backward_cached(
    params: MlpParams, cache, grad_out: np.ndarray, need_input_grad: bool = True, need_param_grad: bool = True
):
    """Reverse pass. Returns ``(param_grad_flat, input_grad)``.

    For a batch, parameter gradients are summed over rows. Either part can be
    skipped, in which case ``None`` is returned in its place.
    """
    acts, single = cache
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != acts[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != {acts[-1].shape}")
    layers = params.layers
    grads = [None] * (2 * len(layers))
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (acts[i + 1] > 0.0)
        if need_param_grad:
            grads[2 * i] = (acts[i].T @ g).ravel()
            grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ W.T
    flat = np.concatenate(grads) if need_param_grad else None
    gin = None
    if need_input_grad:
        gin = g[0] if single else g
    return flat, gin


def backward(params: MlpParams, x, grad_out):
    _, cache = forward_cached(params, x)
    return backward_cached(params, cache, grad_out)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 7e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_update(values: np.ndarray, grads: np.ndarray, state: AdamState):
    """Bias-corrected Adam step, in place. Returns ``True`` if applied.

    A gradient containing non-finite entries leaves everything untouched.
    """
    if values.shape != grads.shape or state.m.shape != values.shape:
        raise ShapeError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grads)):
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    mhat = state.m / (1.0 - b1**state.step)
    vhat = state.v / (1.0 - b2**state.step)
    values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return True


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, networks: dict[str, MlpParams], manifest: dict | None = None) -> None:
    """Binary file: magic, version, JSON header length, JSON header, then the
    concatenated little-endian float64 parameter vectors."""
    header = {"version": CHECKPOINT_VERSION, "networks": {}, "manifest": manifest or {}}
    offset = 0
    for name, p in networks.items():
        header["networks"][name] = {
            "widths": list(p.widths),
            "offset": offset,
            "count": int(p.values.size),
            "index_map": {k: [o, list(s)] for k, (o, s) in index_map(p.widths).items()},
        }
        offset += p.values.size
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in networks.values():
            fh.write(p.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, MlpParams], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a parameter checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    data = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    nets = {}
    for name, meta in header["networks"].items():
        vals = data[meta["offset"] : meta["offset"] + meta["count"]].astype(np.float64)
        nets[name] = MlpParams(tuple(meta["widths"]), vals)
    return nets, header["manifest"]

"""Dense-network core: flat parameter vectors with named segments, MLP
forward passes (plain numpy and autodiff twins), Adam, seeded Gaussian
streams, a finite-difference gradient checker, and checkpoint files.

The three policy networks are small enough that everything stays float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ShapeMismatch

# ---------------------------------------------------------------------------
# Parameter layout


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths plus whether the last affine layer is followed by ReLU."""

    widths: tuple[int, ...]
    final_relu: bool = False

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ShapeMismatch(f"bad MLP widths {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [
            ((self.widths[k + 1], self.widths[k]), (self.widths[k + 1],))
            for k in range(self.n_layers)
        ]


# Message net consumes (relative block offset, neighbor hidden): 2 + 32.
EDGE_SPEC = MLPSpec((34, 32, 32, 32))
# State update consumes (own hidden, aggregated messages): 32 + 32; the
# trailing ReLU keeps hidden states nonnegative.
UPDATE_SPEC = MLPSpec((64, 32, 32), final_relu=True)
# Velocity modulator consumes (hidden, in-block position, tentative velocity).
STEER_SPEC = MLPSpec((36, 32, 32, 16, 2))

POLICY_SPECS: dict[str, MLPSpec] = {
    "edge": EDGE_SPEC,
    "update": UPDATE_SPEC,
    "steer": STEER_SPEC,
}


class ParamVector:
    """Flat float64 parameter array with named reshaped views."""

    def __init__(self, segments: list[tuple[str, tuple[int, ...]]], data=None):
        self.segments = [(name, tuple(shape)) for name, shape in segments]
        offset = 0
        self._index: dict[str, tuple[int, tuple[int, ...]]] = {}
        for name, shape in self.segments:
            if name in self._index:
                raise ShapeMismatch(f"duplicate segment {name}")
            self._index[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.size = offset
        if data is None:
            self.data = np.zeros(self.size, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
            if self.data.shape != (self.size,):
                raise ShapeMismatch(
                    f"data length {self.data.shape} != segment total ({self.size},)"
                )

    @classmethod
    def for_specs(cls, specs: dict[str, MLPSpec]) -> "ParamVector":
        segments = []
        for net, spec in specs.items():
            for k, (w_shape, b_shape) in enumerate(spec.layer_shapes()):
                segments.append((f"{net}.w{k}", w_shape))
                segments.append((f"{net}.b{k}", b_shape))
        return cls(segments)

    def view(self, name: str) -> np.ndarray:
        offset, shape = self._index[name]
        return self.data[offset : offset + int(np.prod(shape))].reshape(shape)

    def layers(self, net: str, spec: MLPSpec) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.view(f"{net}.w{k}"), self.view(f"{net}.b{k}")) for k in range(spec.n_layers)]

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.data.copy())

    def __len__(self) -> int:
        return self.size


def init_params(seed: int, specs: dict[str, MLPSpec] | None = None) -> ParamVector:
    """Xavier-uniform weights, zero biases, from the init stream of `seed`."""
    specs = POLICY_SPECS if specs is None else specs
    params = ParamVector.for_specs(specs)
    rng = rng_stream(seed, STREAM_INIT)
    for name, shape in params.segments:
        if len(shape) == 2:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.view(name)[...] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# Forward passes


def mlp_forward(spec: MLPSpec, layers, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass. `layers` is a list of (W, b) with W (out, in)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != spec.widths[0]:
        raise ShapeMismatch(f"input width {x.shape[1]}, expected {spec.widths[0]}")
    if len(layers) != spec.n_layers:
        raise ShapeMismatch(f"{len(layers)} layers for a {spec.n_layers}-layer spec")
    for k, (w, b) in enumerate(layers):
        x = x @ w.T + b
        if k < spec.n_layers - 1 or spec.final_relu:
            x = np.where(x > 0.0, x, 0.0)
    return x[0] if squeeze else x


def mlp_forward_t(spec: MLPSpec, layers, x: ad.Tensor) -> ad.Tensor:
    """Autodiff twin of mlp_forward: identical operations on Tensors."""
    if x.value.shape[1] != spec.widths[0]:
        raise ShapeMismatch(f"input width {x.value.shape[1]}, expected {spec.widths[0]}")
    for k, (w, b) in enumerate(layers):
        x = ad.affine(x, w, b)
        if k < spec.n_layers - 1 or spec.final_relu:
            x = ad.relu(x)
    return x


def tensor_layers(params: ParamVector, net: str, spec: MLPSpec) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Leaf tensors over the parameter views, ready for backward()."""
    return [
        (ad.Tensor(params.view(f"{net}.w{k}")), ad.Tensor(params.view(f"{net}.b{k}")))
        for k in range(spec.n_layers)
    ]


def collect_gradient(params: ParamVector, leaves: dict[str, list[tuple[ad.Tensor, ad.Tensor]]]) -> np.ndarray:
    """Assemble a flat gradient aligned with `params` from per-layer leaves."""
    grad = np.zeros(params.size, dtype=np.float64)
    out = ParamVector(params.segments, grad)
    for net, layer_list in leaves.items():
        for k, (w, b) in enumerate(layer_list):
            out.view(f"{net}.w{k}")[...] = w.grad if w.grad is not None else 0.0
            out.view(f"{net}.b{k}")[...] = b.grad if b.grad is not None else 0.0
    return grad


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class Adam:
    dim: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.dim, dtype=np.float64)
        self.v = np.zeros(self.dim, dtype=np.float64)

    def step(self, data: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        """One in-place update of `data`."""
        if grad.shape != (self.dim,):
            raise ShapeMismatch(f"gradient shape {grad.shape}, expected ({self.dim},)")
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Seeded randomness

# Stream purposes; every random draw in the package flows from one root seed
# through (seed, purpose, *indices) so runs replay bit-exactly.
STREAM_INIT = 0
STREAM_PERTURB = 1
STREAM_ROLLOUT = 2
STREAM_SCENARIO = 3
STREAM_DATASET = 4
STREAM_PROBE = 5
STREAM_EVAL = 6
STREAM_PROFILE = 7


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible generator for (seed, key...)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def sample_perturbation(seed: int, key: tuple[int, ...] | int, dim: int) -> np.ndarray:
    """Standard-normal vector from the perturbation stream (seed, key)."""
    if dim <= 0:
        raise ShapeMismatch(f"dim must be positive, got {dim}")
    key = (key,) if isinstance(key, int) else tuple(key)
    return rng_stream(seed, STREAM_PERTURB, *key).standard_normal(dim)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    loss_fn,
    params: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic_grad and central differences.

    loss_fn takes the flat parameter array and returns a float; it must be
    deterministic. `coords` restricts the check to a subset of indices.
    """
    if coords is None:
        coords = np.arange(params.size)
    worst = 0.0
    work = params.copy()
    for c in coords:
        orig = work[c]
        work[c] = orig + h
        hi = loss_fn(work)
        work[c] = orig - h
        lo = loss_fn(work)
        work[c] = orig
        fd = (hi - lo) / (2.0 * h)
        a = analytic_grad[c]
        err = abs(a - fd) / max(1.0, abs(a), abs(fd))
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"BNAVCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamVector
    seed: int
    iteration: int
    hyperparams: dict
    extra: dict
    adam: Adam | None = None


def save_checkpoint(
    path,
    params: ParamVector,
    *,
    seed: int,
    iteration: int,
    hyperparams: dict | None = None,
    extra: dict | None = None,
    adam: Adam | None = None,
) -> None:
    """Write magic | version | header-length | JSON header | float64 payload.

    The header records the segment table, training metadata, and a SHA-256 of
    the payload; load_checkpoint refuses files whose digest does not match.
    """
    payload = params.data.astype("<f8").tobytes()
    adam_meta = None
    if adam is not None:
        payload += adam.m.astype("<f8").tobytes() + adam.v.astype("<f8").tobytes()
        adam_meta = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    header = {
        "format_version": CKPT_VERSION,
        "segments": [[name, list(shape)] for name, shape in params.segments],
        "seed": int(seed),
        "iteration": int(iteration),
        "hyperparams": hyperparams or {},
        "extra": extra or {},
        "adam": adam_meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 8 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_start = len(CKPT_MAGIC) + 8
    try:
        header = json.loads(raw[header_start : header_start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = raw[header_start + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    segments = [(name, tuple(shape)) for name, shape in header["segments"]]
    n = sum(int(np.prod(shape)) for _, shape in segments)
    adam_meta = header.get("adam")
    expect = n * 8 * (3 if adam_meta else 1)
    if len(payload) != expect:
        raise CheckpointError(f"{path}: payload length {len(payload)}, expected {expect}")
    flat = np.frombuffer(payload, dtype="<f8", count=n).astype(np.float64)
    params = ParamVector(segments, flat)
    adam = None
    if adam_meta:
        adam = Adam(
            dim=n,
            lr=adam_meta["lr"],
            beta1=adam_meta["beta1"],
            beta2=adam_meta["beta2"],
            eps=adam_meta["eps"],
        )
        adam.t = int(adam_meta["t"])
        adam.m = np.frombuffer(payload, dtype="<f8", count=n, offset=n * 8).astype(np.float64)
        adam.v = np.frombuffer(payload, dtype="<f8", count=n, offset=2 * n * 8).astype(np.float64)
    return Checkpoint(
        params=params,
        seed=int(header["seed"]),
        iteration=int(header["iteration"]),
        hyperparams=header.get("hyperparams", {}),
        extra=header.get("extra", {}),
        adam=adam,
    )


BUNDLE_MAGIC = b"BNAVBNDL"
BUNDLE_VERSION = 1

_BUNDLE_DTYPES = {"f8": "<f8", "i8": "<i8"}


def save_array_bundle(path, arrays, meta: dict | None = None) -> None:
    """Several arrays plus a JSON note in one self-checking file.

    Same layout discipline as checkpoints: magic | version | header-length |
    JSON header | raw little-endian payload. Bytes are a pure function of the
    inputs, so identical data always produces identical files.
    """
    descs = []
    blobs = []
    for arr in arrays:
        a = np.ascontiguousarray(arr)
        kind = "i8" if np.issubdtype(a.dtype, np.integer) else "f8"
        blobs.append(a.astype(_BUNDLE_DTYPES[kind]).tobytes())
        descs.append({"shape": list(a.shape), "dtype": kind})
    payload = b"".join(blobs)
    header = {
        "format_version": BUNDLE_VERSION,
        "meta": meta or {},
        "arrays": descs,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<II", BUNDLE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_array_bundle(path) -> tuple[list[np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(BUNDLE_MAGIC) + 8 or not raw.startswith(BUNDLE_MAGIC):
        raise CheckpointError(f"{path}: not an array bundle")
    version, header_len = struct.unpack_from("<II", raw, len(BUNDLE_MAGIC))
    if version != BUNDLE_VERSION:
        raise CheckpointError(f"{path}: unsupported bundle version {version}")
    header_start = len(BUNDLE_MAGIC) + 8
    try:
        header = json.loads(raw[header_start : header_start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = raw[header_start + header_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = []
    offset = 0
    for desc in header["arrays"]:
        shape = tuple(desc["shape"])
        dtype = _BUNDLE_DTYPES.get(desc["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown array dtype {desc['dtype']!r}")
        count = int(np.prod(shape)) if shape else 1
        arrays.append(
            np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
            .astype(dtype[1:])
            .reshape(shape)
        )
        offset += count * 8
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload length {len(payload)}, expected {offset}")
    return arrays, header.get("meta", {})

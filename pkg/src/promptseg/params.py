"""Named parameters, freezing, the Adam optimizer, and checkpoint files.

Checkpoint format: a single-line JSON manifest (name, shape, dtype, frozen
per parameter) terminated by a newline, followed by each parameter's raw
little-endian float32 payload in manifest order.
"""

from __future__ import annotations

import json
from typing import Iterable, Iterator

import numpy as np

from .errors import InputError, ShapeError
from .tensor import Tensor


class Parameter:
    """A named leaf tensor; frozen parameters never accumulate gradients."""

    def __init__(self, name: str, data: np.ndarray, frozen: bool = False,
                 always_frozen: bool = False):
        self.name = name
        self.always_frozen = always_frozen
        self.frozen = frozen or always_frozen
        self.tensor = Tensor(np.array(data), requires_grad=not self.frozen)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def set_frozen(self, flag: bool) -> None:
        self.frozen = bool(flag) or self.always_frozen
        self.tensor.requires_grad = not self.frozen
        if self.frozen:
            self.tensor.grad = None

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


class ParamStore:
    """Ordered registry of parameters keyed by dotted names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, frozen: bool = False,
            always_frozen: bool = False) -> Parameter:
        if name in self._params:
            raise InputError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data, frozen=frozen, always_frozen=always_frozen)
        self._params[name] = p
        return p

    def get(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def trainable(self) -> list[Parameter]:
        return [p for p in self if not p.frozen]

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def freeze_by_prefix(self, prefixes: Iterable[str]) -> None:
        """Freeze exactly the parameters matching a prefix (plus permanent ones)."""
        prefixes = tuple(prefixes)
        for p in self:
            p.set_frozen(any(p.name.startswith(pre) for pre in prefixes))

    def num_values(self) -> int:
        return sum(p.data.size for p in self)


class Adam:
    """Adaptive-moment gradient descent over a ParamStore; skips frozen params."""

    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in self.store:
            if p.frozen or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[p.name] = m
                self._v[p.name] = np.zeros_like(p.data)
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.tensor.data = p.data - self.lr * update


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def save_checkpoint(path, store: ParamStore) -> None:
    manifest = {"params": [
        {"name": p.name, "shape": list(p.data.shape), "dtype": "f32", "frozen": bool(p.frozen)}
        for p in store
    ]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for p in store:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, tuple[np.ndarray, bool]]:
    """Read a checkpoint into {name: (float32 array, frozen flag)}."""
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
            entries = manifest["params"]
        except (ValueError, KeyError) as err:
            raise InputError(f"bad checkpoint manifest in {path}") from err
        result: dict[str, tuple[np.ndarray, bool]] = {}
        for entry in entries:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise InputError(f"truncated checkpoint payload for {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            result[entry["name"]] = (arr, bool(entry["frozen"]))
        if fh.read(1):
            raise InputError("trailing bytes after checkpoint payloads")
    return result


def load_into(path, store: ParamStore) -> None:
    """Load checkpoint values into matching parameters (frozen flags untouched)."""
    loaded = load_checkpoint(path)
    missing = [n for n in store.names() if n not in loaded]
    if missing:
        raise InputError(f"checkpoint lacks parameters: {missing[:5]}")
    for p in store:
        arr, _frozen = loaded[p.name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"checkpoint shape {arr.shape} != model shape {p.data.shape} for {p.name!r}")
        p.tensor.data = arr.astype(p.data.dtype)
        p.zero_grad()

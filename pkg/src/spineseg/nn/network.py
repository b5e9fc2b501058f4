"""Patch classifier: two conv/ReLU/pool stages, three dense layers, softmax."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class Architecture:
    input_size: int = 32
    in_channels: int = 1
    conv_channels: tuple[int, ...] = (32, 64)
    kernel: int = 5
    dense: tuple[int, ...] = (1024, 2048)
    classes: int = 4
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "dense", tuple(self.dense))
        if self.input_size % (2 ** len(self.conv_channels)):
            raise ValueError("input size must halve evenly through every pooling stage")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @classmethod
    def reduced(cls, classes: int = 4) -> "Architecture":
        """Small variant for finite-difference gradient checks."""
        return cls(input_size=8, conv_channels=(4, 8), dense=(16, 32), classes=classes)

    def shape_chain(self) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape of each layer for a single input patch."""
        chain = []
        size, ch = self.input_size, self.in_channels
        for i, cout in enumerate(self.conv_channels, 1):
            chain.append((f"conv{i}", (size, size, cout)))
            chain.append((f"relu_c{i}", (size, size, cout)))
            size //= 2
            ch = cout
            chain.append((f"pool{i}", (size, size, ch)))
        width = size * size * ch
        chain.append(("flatten", (width,)))
        for i, units in enumerate(self.dense, 1):
            chain.append((f"fc{i}", (units,)))
            chain.append((f"relu_f{i}", (units,)))
            chain.append((f"dropout{i}", (units,)))
        chain.append(("logits", (self.classes,)))
        chain.append(("softmax", (self.classes,)))
        return chain

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        cin = self.in_channels
        for i, cout in enumerate(self.conv_channels, 1):
            shapes.append((f"conv{i}.w", (self.kernel, self.kernel, cin, cout)))
            shapes.append((f"conv{i}.b", (cout,)))
            cin = cout
        size = self.input_size // 2 ** len(self.conv_channels)
        width = size * size * cin
        for i, units in enumerate(self.dense + (self.classes,), 1):
            name = f"fc{i}" if i <= len(self.dense) else "out"
            shapes.append((f"{name}.w", (width, units)))
            shapes.append((f"{name}.b", (units,)))
            width = units
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["dense"] = list(self.dense)
        return d


class Network:
    """Parameters plus forward/backward passes for an :class:`Architecture`.

    ``params`` is an ordered dict; that order is the fixed layer order used
    by optimizers and checkpoints.
    """

    def __init__(self, arch: Architecture = Architecture(), params=None, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        shapes = arch.param_shapes()
        if params is None:
            params = {name: np.zeros(shape, dtype=self.dtype) for name, shape in shapes}
        else:
            for name, shape in shapes:
                if name not in params or tuple(params[name].shape) != shape:
                    got = None if name not in params else params[name].shape
                    raise L.ShapeError(f"parameter {name}: expected {shape}, got {got}")
            params = {name: np.asarray(params[name], dtype=self.dtype) for name, _ in shapes}
        self.params: dict[str, np.ndarray] = params

    @classmethod
    def init(cls, arch: Architecture = Architecture(), rng=None, dtype=np.float32) -> "Network":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(rng)
        params = {}
        for name, shape in arch.param_shapes():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return cls(arch, params, dtype)

    def astype(self, dtype) -> "Network":
        return Network(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, dtype)

    def copy(self) -> "Network":
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    @property
    def n_classes(self) -> int:
        return self.arch.classes

    def _prepare_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        a = self.arch
        if x.ndim == 2:
            x = x[None, :, :, None]
        elif x.ndim == 3:
            # a batch of single-channel patches or one HWC patch
            x = x[..., None] if a.in_channels == 1 and x.shape[-1] != 1 else x[None]
        if x.shape[1:] != (a.input_size, a.input_size, a.in_channels):
            raise L.ShapeError(
                f"input {x.shape[1:]} does not match network input "
                f"{(a.input_size, a.input_size, a.in_channels)}"
            )
        return x

    def _run(self, x, train, rng):
        a, p = self.arch, self.params
        caches = []
        h = x
        for i in range(1, len(a.conv_channels) + 1):
            h, c_conv = L.conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
            # relu and 2x2 max commute (values and routed gradients alike);
            # pooling first runs the relu on a quarter of the data
            h, c_pool = L.maxpool2_forward(h)
            h, c_relu = L.relu_forward(h)
            caches.append((c_conv, c_relu, c_pool))
        flat_shape = h.shape
        h = h.reshape(len(h), -1)
        for i in range(1, len(a.dense) + 1):
            h, c_fc = L.dense_forward(h, p[f"fc{i}.w"], p[f"fc{i}.b"])
            h, c_relu = L.relu_forward(h)
            h, c_drop = L.dropout_forward(h, a.dropout, train, rng)
            caches.append((c_fc, c_relu, c_drop))
        logits, c_out = L.dense_forward(h, p["out.w"], p["out.b"])
        return logits, (caches, flat_shape, c_out)

    def logits(self, x, train: bool = False, rng=None) -> np.ndarray:
        return self._run(self._prepare_input(x), train, rng)[0]

    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        """Class probabilities, shape ``(N, classes)``."""
        return L.softmax(self.logits(x, train, rng))

    def predict_proba(self, x, batch_size: int = 512) -> np.ndarray:
        x = self._prepare_input(x)
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes), self.dtype)

    def loss_and_grads(self, x, labels, train: bool = True, rng=None):
        """Mean cross-entropy, gradients per parameter, and probabilities.

        Dropout masks drawn in the forward pass are reused going back.
        """
        x = self._prepare_input(x)
        logits, (caches, flat_shape, c_out) = self._run(x, train, rng)
        loss, probs, dlogits = L.softmax_xent(logits, labels)
        dlogits = dlogits.astype(self.dtype, copy=False)
        a = self.arch
        grads = {}
        dh, grads["out.w"], grads["out.b"] = L.dense_backward(dlogits, c_out)
        n_conv = len(a.conv_channels)
        for i in range(len(a.dense), 0, -1):
            c_fc, c_relu, c_drop = caches[n_conv + i - 1]
            dh = L.dropout_backward(dh, c_drop)
            dh = L.relu_backward(dh, c_relu)
            dh, grads[f"fc{i}.w"], grads[f"fc{i}.b"] = L.dense_backward(dh, c_fc)
        dh = dh.reshape(flat_shape)
        for i in range(n_conv, 0, -1):
            c_conv, c_relu, c_pool = caches[i - 1]
            dh = L.relu_backward(dh, c_relu)
            dh = L.maxpool2_backward(dh, c_pool)
            dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv2d_backward(dh, c_conv, need_dx=i > 1)
        ordered = {name: grads[name].astype(self.dtype, copy=False) for name in self.params}
        return loss, ordered, probs

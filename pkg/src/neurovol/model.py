"""Volumetric CNN assembly: presets, forward/backward passes, head expansion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConvParams, PoolSpec, ShapeError

MRI_INPUT_DIMS = (116, 130, 83)

# class index convention; MCI is appended so head expansion keeps NC/AD units
CLASS_NAMES = ("NC", "AD", "MCI")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


class NumericalError(FloatingPointError):
    """A non-finite value was produced; the message names the layer."""


@dataclass
class ArchConfig:
    variant: str = "simple"
    # (convs_per_stage, filters, pool_window)
    stages: list = field(default_factory=lambda: [(1, 16, 2), (1, 32, 3), (1, 64, 4)])
    fc_widths: list = field(default_factory=lambda: [256])
    keep_rates: list = field(default_factory=lambda: [0.4])
    num_classes: int = 2
    input_dims: tuple = MRI_INPUT_DIMS
    demographic_dim: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        self.fc_widths = [int(w) for w in self.fc_widths]
        self.keep_rates = [float(r) for r in self.keep_rates]
        self.input_dims = tuple(int(d) for d in self.input_dims)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ArchConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        cfg = replace(PRESETS[name])
        cfg = replace(cfg, **overrides)
        cfg.validate()
        return cfg

    def validate(self):
        if self.num_classes not in (2, 3):
            raise ValueError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if not self.stages:
            raise ValueError("at least one conv stage is required")
        for n, f, w in self.stages:
            if n < 1 or f < 1 or w < 2:
                raise ValueError(f"bad stage {(n, f, w)}")
        if any(w < 1 for w in self.fc_widths):
            raise ValueError(f"bad fc widths {self.fc_widths}")
        if len(self.keep_rates) != len(self.fc_widths):
            raise ValueError(
                f"{len(self.keep_rates)} keep rates for {len(self.fc_widths)} FC layers"
            )
        if any(not 0 < r <= 1 for r in self.keep_rates):
            raise ValueError(f"keep rates must lie in (0, 1]: {self.keep_rates}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"bad input dims {self.input_dims}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.demographic_dim < 0:
            raise ValueError("demographic_dim must be >= 0")
        self.dimension_chain()

    def dimension_chain(self) -> list:
        """Spatial extents at the input and after every pool."""
        chain = [tuple(self.input_dims)]
        for _, _, w in self.stages:
            nxt = tc.pooled_shape(chain[-1], w)
            if min(nxt) < 1:
                raise ShapeError(
                    f"pool window {w} reduces spatial extent {chain[-1]} to {nxt}"
                )
            chain.append(nxt)
        return chain

    @property
    def flatten_width(self) -> int:
        d, h, w = self.dimension_chain()[-1]
        return d * h * w * self.stages[-1][1]

    @property
    def fc1_input_width(self) -> int:
        return self.flatten_width + self.demographic_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ArchConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


PRESETS = {
    "complex": ArchConfig(
        variant="complex",
        stages=[(2, 32, 2), (2, 64, 3), (2, 128, 4)],
        fc_widths=[512, 256],
        keep_rates=[0.15, 0.25],
    ),
    "simple": ArchConfig(
        variant="simple",
        stages=[(1, 16, 2), (1, 32, 3), (1, 64, 4)],
        fc_widths=[256],
        keep_rates=[0.4],
    ),
    # gradient-check scale: 6^3 -> 3^3 -> 1^3
    "tiny": ArchConfig(
        variant="tiny",
        stages=[(1, 2, 2), (1, 2, 2)],
        fc_widths=[4],
        keep_rates=[0.5],
        input_dims=(6, 6, 6),
    ),
}


@dataclass
class DemographicVec:
    age_norm: float
    sex: int  # male 0, female 1

    @classmethod
    def from_subject(cls, age_years: float, sex: str) -> "DemographicVec":
        if sex not in ("M", "F"):
            raise ValueError(f"sex must be 'M' or 'F', got {sex!r}")
        return cls((age_years - 70.0) / 10.0, 0 if sex == "M" else 1)

    def as_array(self) -> np.ndarray:
        return np.array([self.age_norm, self.sex], dtype=tc.DTYPE)


@dataclass
class Model:
    config: ArchConfig
    params: dict  # name -> ndarray, in declaration order

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return Model(replace(self.config), {k: v.copy() for k, v in self.params.items()})

    def predict_proba(self, volumes, demos) -> np.ndarray:
        logits, _ = forward(self, volumes, demos, mode="eval")
        return tc.softmax(logits.astype(np.float64))


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_model(config: ArchConfig, seed: int = 0, dtype=tc.DTYPE) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params = {}
    c_in = 1
    for s, (n, f, _) in enumerate(config.stages):
        for j in range(n):
            name = f"conv{s + 1}.{j + 1}"
            fan_in = c_in * k**3
            params[f"{name}.kernels"] = _he(rng, (f, c_in, k, k, k), fan_in, dtype)
            params[f"{name}.bias"] = np.zeros(f, dtype=dtype)
            c_in = f
    n_in = config.fc1_input_width
    for i, width in enumerate(config.fc_widths):
        params[f"fc{i + 1}.weights"] = _he(rng, (n_in, width), n_in, dtype)
        params[f"fc{i + 1}.bias"] = np.zeros(width, dtype=dtype)
        n_in = width
    params["out.weights"] = _he(rng, (n_in, config.num_classes), n_in, dtype)
    params["out.bias"] = np.zeros(config.num_classes, dtype=dtype)
    return Model(replace(config), params)


def param_names(config: ArchConfig) -> list:
    names = []
    for s, (n, _, _) in enumerate(config.stages):
        for j in range(n):
            names += [f"conv{s + 1}.{j + 1}.kernels", f"conv{s + 1}.{j + 1}.bias"]
    for i in range(len(config.fc_widths)):
        names += [f"fc{i + 1}.weights", f"fc{i + 1}.bias"]
    return names + ["out.weights", "out.bias"]


def param_count(model) -> int:
    params = getattr(model, "params", model)
    return int(sum(p.size for p in params.values()))


def _guard(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced at layer {name}")


def _as_demos(demos, batch: int, dim: int, dtype) -> np.ndarray:
    if dim == 0:
        return np.zeros((batch, 0), dtype=dtype)
    if len(demos) and isinstance(demos[0], DemographicVec):
        demos = [d.as_array() for d in demos]
    arr = np.asarray(demos, dtype=dtype).reshape(batch, -1)
    if arr.shape[1] != dim:
        raise ShapeError(f"demographics have {arr.shape[1]} features, expected {dim}")
    return arr


def forward(model: Model, volumes, demos, mode: str = "eval", rng=None):
    """Run the network. Returns ``(logits [B, c], cache)``.

    Dropout is applied only in ``mode="train"``, which requires ``rng``.
    """
    cfg = model.config
    P = model.params
    dtype = model.dtype
    x = np.asarray(volumes, dtype=dtype)
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != tuple(cfg.input_dims):
        raise ShapeError(
            f"volumes must be [B,1,{','.join(map(str, cfg.input_dims))}], got {x.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    B = x.shape[0]
    d = _as_demos(demos, B, cfg.demographic_dim, dtype)

    cache = {"mode": mode, "conv": [], "pool": [], "fc": [], "demos": d}
    for s, (n, _, w) in enumerate(cfg.stages):
        for j in range(n):
            name = f"conv{s + 1}.{j + 1}"
            p = ConvParams(P[f"{name}.kernels"], P[f"{name}.bias"])
            pre = tc.conv3d_forward(x, p)
            _guard(name, pre)
            cache["conv"].append((name, x, pre))
            x = tc.relu(pre)
        x, argmax = tc.maxpool3d_forward(x, PoolSpec(w))
        cache["pool"].append(argmax)
    cache["pooled_shape"] = x.shape
    h = np.concatenate([x.reshape(B, -1), d], axis=1)
    for i, keep in enumerate(cfg.keep_rates):
        name = f"fc{i + 1}"
        z = tc.dense_forward(h, P[f"{name}.weights"], P[f"{name}.bias"])
        _guard(name, z)
        a = tc.relu(z)
        mask = None
        if mode == "train" and keep < 1:
            a, mask = tc.dropout_apply(a, keep, rng)
        cache["fc"].append((name, h, z, mask))
        h = a
    logits = tc.dense_forward(h, P["out.weights"], P["out.bias"])
    _guard("out", logits)
    cache["out_in"] = h
    return logits, cache


def backward(model: Model, cache: dict, grad_logits: np.ndarray) -> dict:
    """Gradients of the loss w.r.t. every parameter, keyed like ``model.params``."""
    cfg = model.config
    P = model.params
    if grad_logits.shape != (cache["out_in"].shape[0], cfg.num_classes):
        raise ShapeError(
            f"grad_logits {grad_logits.shape} does not match model output "
            f"({cache['out_in'].shape[0]}, {cfg.num_classes})"
        )
    if len(cache["fc"]) != len(cfg.fc_widths) or len(cache["pool"]) != len(cfg.stages):
        raise ShapeError("cache was produced by a different architecture")
    grads = {}
    g, grads["out.weights"], grads["out.bias"] = tc.dense_backward(
        cache["out_in"], P["out.weights"], grad_logits
    )
    for name, h, z, mask in reversed(cache["fc"]):
        if mask is not None:
            g = tc.dropout_backward(mask, g)
        g = tc.relu_backward(z, g)
        g, grads[f"{name}.weights"], grads[f"{name}.bias"] = tc.dense_backward(
            h, P[f"{name}.weights"], g
        )
    # drop the demographic columns; they have no parameters upstream
    g = g[:, : cfg.flatten_width].reshape(cache["pooled_shape"])

    conv = list(cache["conv"])
    for s in reversed(range(len(cfg.stages))):
        g = tc.maxpool3d_backward(cache["pool"][s], g)
        for _ in range(cfg.stages[s][0]):
            name, x, pre = conv.pop()
            g = tc.relu_backward(pre, g)
            p = ConvParams(P[f"{name}.kernels"], P[f"{name}.bias"])
            g, grads[f"{name}.kernels"], grads[f"{name}.bias"] = tc.conv3d_backward(
                x, p, g, need_input_grad=bool(conv)
            )
    return {k: grads[k] for k in P}


def expand_head(model: Model, new_c: int = 3, seed: int = 0) -> Model:
    """Grow the output layer to ``new_c`` classes, keeping existing columns bit-exact."""
    c = model.config.num_classes
    if new_c <= c:
        raise ValueError(f"cannot expand head from {c} to {new_c} classes")
    cfg = replace(model.config, num_classes=new_c)
    cfg.validate()
    W, b = model.params["out.weights"], model.params["out.bias"]
    rng = np.random.default_rng(seed)
    n_in = W.shape[0]
    extra = _he(rng, (n_in, new_c - c), n_in, W.dtype)
    params = {k: v.copy() for k, v in model.params.items()}
    params["out.weights"] = np.concatenate([W, extra], axis=1)
    params["out.bias"] = np.concatenate([b, np.zeros(new_c - c, dtype=b.dtype)])
    return Model(cfg, params)


def layer_table(config: ArchConfig) -> list:
    """Rows of (layer, kind, output shape, parameter count) for reporting."""
    rows = []
    chain = config.dimension_chain()
    k = config.kernel_size
    c_in = 1
    for s, (n, f, w) in enumerate(config.stages):
        for j in range(n):
            rows.append((f"conv{s + 1}.{j + 1}", f"conv {k}^3", (f,) + chain[s], f * c_in * k**3 + f))
            c_in = f
        rows.append((f"pool{s + 1}", f"maxpool {w}^3", (f,) + chain[s + 1], 0))
    n_in = config.fc1_input_width
    rows.append(("concat", f"flatten + {config.demographic_dim} demographics", (n_in,), 0))
    for i, width in enumerate(config.fc_widths):
        rows.append((f"fc{i + 1}", "dense", (width,), n_in * width + width))
        n_in = width
    rows.append(("out", "dense", (config.num_classes,), n_in * config.num_classes + config.num_classes))
    return rows

"""Parameters and forward execution: stem -> M branches -> gated head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .arch import BranchNetSpec, Layer, layer_output_shape
from .gates import GateBank, binarize_deterministic, binarize_stochastic, gated_head

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class NetworkState:
    spec: BranchNetSpec
    params: dict  # name -> Tensor, insertion order is the canonical order
    gates: GateBank
    momentum: dict  # name -> ndarray
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.momentum:
                self.momentum[name] = np.zeros_like(p.data)
            if self.momentum[name].shape != p.shape:
                raise ValueError(f"momentum buffer for {name} has shape "
                                 f"{self.momentum[name].shape}, parameter {p.shape}")

    def copy(self):
        return NetworkState(
            self.spec,
            {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            self.gates.copy(),
            {k: v.copy() for k, v in self.momentum.items()},
            self.seed, self.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
        self.gates.gate_grad[:] = 0.0


def _param_shapes(layers, in_shape, prefix):
    out = []
    shape = tuple(in_shape)
    for i, layer in enumerate(layers):
        if layer.kind in ("conv", "conv_gates"):
            fan_in = shape[0] * layer.kh * layer.kw
            out.append((f"{prefix}{i}.weight", (layer.filters, shape[0], layer.kh, layer.kw), fan_in))
            out.append((f"{prefix}{i}.bias", (layer.filters,), None))
        elif layer.kind in ("fc", "fc_gates"):
            d = int(np.prod(shape))
            out.append((f"{prefix}{i}.weight", (d, layer.units), d))
            out.append((f"{prefix}{i}.bias", (layer.units,), None))
        shape = layer_output_shape(layer, shape)
    return out, shape


def parameter_layout(spec: BranchNetSpec):
    """Ordered (name, shape, fan_in) for every trainable tensor."""
    stem, stem_out = _param_shapes(spec.stem, spec.input_shape, "stem.")
    layout = list(stem)
    e_shape = stem_out
    for m in range(spec.M):
        branch, e_shape = _param_shapes(spec.branch, stem_out, f"branch{m}.")
        layout += branch
    head, _ = _param_shapes(spec.head, e_shape, "head.")
    # head layer index is always 0; drop it from the name
    layout += [(n.replace("head.0.", "head."), s, f) for n, s, f in head]
    return layout


def init_network(spec: BranchNetSpec, seed: int = 0, dtype: str = "float64") -> NetworkState:
    """Gaussian weights (std from the spec's INIT line, or sqrt(2/fan_in) for MSRA),
    zero biases, every real gate at 0.5."""
    rng = np.random.default_rng(seed)
    np_dtype = DTYPES[dtype]
    params = {}
    for name, shape, fan_in in parameter_layout(spec):
        if fan_in is None:
            data = np.zeros(shape)
        else:
            std = np.sqrt(2.0 / fan_in) if spec.init[0] == "msra" else spec.init[1]
            data = rng.normal(0.0, std, size=shape)
        params[name] = ad.Tensor(data.astype(np_dtype), requires_grad=True, name=name)
    gates = GateBank(spec.num_classes, spec.M, spec.K)
    return NetworkState(spec, params, gates, {}, seed, dtype)


# ---------------------------------------------------------------- execution


def _run_layers(layers, x, params, prefix):
    for i, layer in enumerate(layers):
        x = _run_layer(layer, x, params, f"{prefix}{i}")
    return x


def _run_layer(layer: Layer, x, params, key):
    k = layer.kind
    if k == "conv":
        x = ad.conv2d(x, params[key + ".weight"], params[key + ".bias"],
                      stride=layer.stride, pad=layer.pad, name=key)
        return ad.relu(x, name=key + ".relu")
    if k == "pool":
        if layer.is_global:
            n, c = x.shape[:2]
            return ad.reshape(ad.global_avg_pool(x), (n, c, 1, 1), name=key)
        return ad.pool2d(x, layer.kh, layer.stride, layer.pool_type, layer.pad, name=key)
    if k == "fc":
        if x.data.ndim > 2:
            x = ad.flatten(x)
        x = ad.affine(x, params[key + ".weight"], params[key + ".bias"], name=key)
        return ad.relu(x, name=key + ".relu")
    if k == "relu":
        return ad.relu(x, name=key)
    if k == "flatten":
        return ad.flatten(x, name=key)
    if k == "lrn":
        return x
    raise ValueError(f"layer kind {k!r} cannot run inside stem/branch")


def _as_input(state, images):
    images = np.asarray(images)
    expect = tuple(state.spec.input_shape)
    if images.ndim != len(expect) + 1 or images.shape[1:] != expect:
        raise ad.ShapeError(f"batch shape {images.shape[1:]} does not match model input {expect}")
    return ad.Tensor(images.astype(DTYPES[state.dtype], copy=False), name="input")


def branch_outputs(state: NetworkState, images):
    """(stem output, [E_0 .. E_{M-1}]) as tensors; E_m flattened for FC heads."""
    spec = state.spec
    x = _as_input(state, images)
    stem_out = _run_layers(spec.stem, x, state.params, "stem.")
    E = []
    for m in range(spec.M):
        e = _run_layers(spec.branch, stem_out, state.params, f"branch{m}.")
        if spec.head_kind == "fc_gates" and e.data.ndim > 2:
            e = ad.flatten(e, name=f"branch{m}.out")
        elif spec.head_kind == "conv_gates" and e.data.ndim != 4:
            raise ad.ShapeError("a CONV_Gates head needs convolutional branch outputs")
        E.append(e)
    return stem_out, E


def forward(state: NetworkState, images, mode="infer", rng=None, gates=None):
    """Logits for a batch.

    train: gates are re-binarized stochastically from ``rng`` (unless frozen)
    and the gate tensor requires grad, so the active tape collects dloss/dg^b.
    infer: top-K deterministic gates; no rng use.
    ``gates`` overrides the gate matrix (used for gradient checks).
    """
    if gates is None:
        if mode == "train":
            if rng is None and not state.gates.frozen:
                raise ValueError("train-mode forward needs an rng")
            binary = binarize_stochastic(state.gates, rng)
        elif mode == "infer":
            binary = binarize_deterministic(state.gates)
        else:
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        gate_t = ad.Tensor(binary.astype(DTYPES[state.dtype]), name="gates",
                           requires_grad=(mode == "train" and not state.gates.frozen))
    else:
        gate_t = gates
    _, E = branch_outputs(state, images)
    return gated_head(E, gate_t, state.params["head.weight"], state.params["head.bias"],
                      state.spec.head_kind, name="logits"), gate_t

"""Declarative model construction and the two-stream forward pass.

A backbone is an ordered stack of conv/pool/relu layers with named tap
points.  At each tapped feature map a patch-detector module attaches a
bank of 1x1 filters (``conv6``), pools each response map to one value
(``pool6``), classifies the pooled vector (P-Stream), and optionally
exposes a parameter-free side branch that averages each class's filter
group.  The G-Stream classifies the final backbone output.  Streams are
merged at test time by a weighted sum of logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, resolve_dtype

LAYER_KINDS = ("conv", "pool", "relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    out_channels: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(f"bad layer geometry: {self}")
        if self.kind == "conv" and (self.out_channels is None or self.out_channels < 1):
            raise ValueError(f"conv layer needs out_channels >= 1: {self}")
        if self.kind != "conv" and self.out_channels is not None:
            raise ValueError(f"only conv layers carry out_channels: {self}")
        if self.kind == "pool" and self.pad != 0:
            raise ValueError("pool layers support pad=0 only")


def conv(kernel: int, out_channels: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("conv", kernel, stride, pad, out_channels)


def pool(kernel: int, stride: int) -> LayerSpec:
    return LayerSpec("pool", kernel, stride)


def relu_layer() -> LayerSpec:
    return LayerSpec("relu")


@dataclass
class BackboneSpec:
    layers: tuple[LayerSpec, ...]
    taps: dict[str, int]

    def __post_init__(self):
        self.layers = tuple(self.layers)
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValueError(f"tap {name!r} index {idx} out of range")


@dataclass(frozen=True)
class ReceptiveFieldInfo:
    size: int      # pixels covered by one site
    stride: int    # pixels between adjacent sites
    offset: float  # image-space center of site (0, 0)


def _layer_geometry(layer: LayerSpec) -> tuple[int, int, int]:
    if layer.kind == "relu":
        return 1, 1, 0
    return layer.kernel, layer.stride, layer.pad


def receptive_field(spec: BackboneSpec, tap: str) -> ReceptiveFieldInfo:
    """Receptive field size/stride/offset of the feature map at a tap point.

    Composition recurrence: size += (kernel-1)*jump, offset moves by
    ((kernel-1)/2 - pad)*jump, jump *= stride.
    """
    if tap not in spec.taps:
        raise KeyError(f"unknown tap {tap!r}; available: {sorted(spec.taps)}")
    size, jump, offset = 1, 1, 0.0
    for layer in spec.layers[: spec.taps[tap] + 1]:
        kernel, stride, padding = _layer_geometry(layer)
        size += (kernel - 1) * jump
        offset += ((kernel - 1) / 2.0 - padding) * jump
        jump *= stride
    return ReceptiveFieldInfo(size=size, stride=jump, offset=offset)


def feature_shapes(spec: BackboneSpec, in_channels: int, input_size: int) -> list[tuple[int, int, int]]:
    """(C, H, W) after each backbone layer for a square input."""
    c, h, w = in_channels, input_size, input_size
    out = []
    for layer in spec.layers:
        kernel, stride, padding = _layer_geometry(layer)
        if layer.kind != "relu":
            h = (h + 2 * padding - kernel) // stride + 1
            w = (w + 2 * padding - kernel) // stride + 1
        if layer.kind == "conv":
            c = layer.out_channels
        if h < 1 or w < 1:
            raise ValueError(f"feature map collapses to {h}x{w} at layer {layer}")
        out.append((c, h, w))
    return out


@dataclass(frozen=True)
class DFLModuleSpec:
    """One patch-detector module: a k-per-class 1x1 filter bank at a tap."""

    tap: str
    classes: int
    filters_per_class: int
    with_side_branch: bool = True

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.filters_per_class < 1:
            raise ValueError(f"need at least 1 filter per class, got {self.filters_per_class}")


@dataclass
class ModelSpec:
    backbone: BackboneSpec
    modules: tuple[DFLModuleSpec, ...]
    input_size: int
    in_channels: int = 3
    pooling: str = "gmp"           # pool6 mode: "gmp" or "gap"
    g_hidden: int = 0              # 0 -> GAP+FC head; >0 -> GAP+FC+ReLU+FC
    fusion_g: float = 1.0
    fusion_p: float = 1.0          # per module
    fusion_side: float = 0.1       # per module

    def __post_init__(self):
        self.modules = tuple(self.modules)
        if not self.modules:
            raise ValueError("at least one patch-detector module is required")
        classes = {m.classes for m in self.modules}
        if len(classes) != 1:
            raise ValueError(f"all modules must share one class count, got {sorted(classes)}")
        if self.pooling not in ("gmp", "gap"):
            raise ValueError(f"pooling must be 'gmp' or 'gap', got {self.pooling!r}")
        if min(self.fusion_g, self.fusion_p, self.fusion_side) < 0:
            raise ValueError("fusion weights must be nonnegative")
        if max(self.fusion_g, self.fusion_p, self.fusion_side) <= 0:
            raise ValueError("at least one fusion weight must be positive")
        for m in self.modules:
            if m.tap not in self.backbone.taps:
                raise ValueError(f"module tap {m.tap!r} is not a backbone tap")
        feature_shapes(self.backbone, self.in_channels, self.input_size)

    @property
    def classes(self) -> int:
        return self.modules[0].classes

    def tap_channels(self, tap: str) -> int:
        shapes = feature_shapes(self.backbone, self.in_channels, self.input_size)
        return shapes[self.backbone.taps[tap]][0]

    def default_fusion_weights(self) -> np.ndarray:
        n_side = sum(1 for m in self.modules if m.with_side_branch)
        return np.array(
            [self.fusion_g]
            + [self.fusion_p] * len(self.modules)
            + [self.fusion_side] * n_side,
            dtype=np.float64,
        )


@dataclass
class FilterBank:
    """The k*M grid of 1x1 patch-detector filters; filter j belongs to class j // k."""

    weight: Tensor                 # (k*M, C, 1, 1)
    classes: int
    filters_per_class: int

    def __post_init__(self):
        km = self.classes * self.filters_per_class
        if self.weight.ndim != 4 or self.weight.shape[0] != km or self.weight.shape[2:] != (1, 1):
            raise ValueError(
                f"filter bank weight must be ({km}, C, 1, 1), got {self.weight.shape}"
            )

    def class_of_filter(self, j: int) -> int:
        return j // self.filters_per_class


@dataclass
class StreamOutputs:
    """Per-sample logits of every stream plus filter-bank diagnostics."""

    g_logits: Tensor
    p_logits: list[Tensor]
    side_logits: list[Tensor]
    pool6: list[Tensor]
    peak_values: list[Tensor]      # GMP values of each conv6 map
    peak_argmax: list[np.ndarray]  # (..., k*M, 2) int (h, w) per filter


class Model:
    """A built network: spec plus named parameter tensors."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def rf(self, tap: str) -> ReceptiveFieldInfo:
        return receptive_field(self.spec.backbone, tap)

    def clone(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def build_model(spec: ModelSpec, bank_init=None, seed: int = 0, dtype="f64") -> Model:
    """Materialize parameters for a spec.

    Unspecified weights are drawn from a symmetric uniform law scaled by
    fan-in.  ``bank_init`` optionally provides one FilterBank per module;
    its weights are copied into conv6 bit-exactly.  The random stream is
    consumed identically whether or not banks are provided, so two builds
    with the same seed share every other parameter.
    """
    np_dtype = resolve_dtype(dtype)
    if bank_init is not None and len(bank_init) != len(spec.modules):
        raise ValueError(
            f"bank_init must have one entry per module ({len(spec.modules)}), got {len(bank_init)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    params: dict[str, Tensor] = {}
    shapes = feature_shapes(spec.backbone, spec.in_channels, spec.input_size)

    c_in = spec.in_channels
    for i, layer in enumerate(spec.backbone.layers):
        if layer.kind == "conv":
            shape = (layer.out_channels, c_in, layer.kernel, layer.kernel)
            params[f"backbone.{i}.weight"] = _uniform(
                rng, shape, c_in * layer.kernel * layer.kernel, np_dtype
            )
            c_in = layer.out_channels

    for mi, mod in enumerate(spec.modules):
        c_tap = shapes[spec.backbone.taps[mod.tap]][0]
        km = mod.classes * mod.filters_per_class
        w6 = _uniform(rng, (km, c_tap, 1, 1), c_tap, np_dtype)
        if bank_init is not None and bank_init[mi] is not None:
            bank = bank_init[mi]
            if bank.weight.shape != (km, c_tap, 1, 1):
                raise ValueError(
                    f"module {mi} bank shape {bank.weight.shape} does not match "
                    f"required ({km}, {c_tap}, 1, 1)"
                )
            w6 = Tensor(bank.weight.data.astype(np_dtype, copy=True), requires_grad=True)
        params[f"module{mi}.conv6.weight"] = w6
        params[f"module{mi}.phead.weight"] = _uniform(rng, (mod.classes, km), km, np_dtype)
        params[f"module{mi}.phead.bias"] = Tensor(np.zeros(mod.classes, dtype=np_dtype),
                                                  requires_grad=True)

    c_final = shapes[-1][0]
    m = spec.classes
    if spec.g_hidden > 0:
        params["ghead.fc1.weight"] = _uniform(rng, (spec.g_hidden, c_final), c_final, np_dtype)
        params["ghead.fc1.bias"] = Tensor(np.zeros(spec.g_hidden, dtype=np_dtype), requires_grad=True)
        params["ghead.fc2.weight"] = _uniform(rng, (m, spec.g_hidden), spec.g_hidden, np_dtype)
        params["ghead.fc2.bias"] = Tensor(np.zeros(m, dtype=np_dtype), requires_grad=True)
    else:
        params["ghead.weight"] = _uniform(rng, (m, c_final), c_final, np_dtype)
        params["ghead.bias"] = Tensor(np.zeros(m, dtype=np_dtype), requires_grad=True)
    return Model(spec, params)


def _check_input(model: Model, image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(image)
    spec = model.spec
    want = (spec.in_channels, spec.input_size, spec.input_size)
    if x.shape[-3:] != want or x.ndim not in (3, 4):
        raise ValueError(f"input shape {x.shape} does not match spec {want}")
    if x.dtype != model.dtype:
        x = x.astype(model.dtype)
    return x


def _run_backbone(model: Model, x: Tensor, upto: int | None = None,
                  keep: set[int] | None = None) -> tuple[Tensor, dict[int, Tensor]]:
    taps: dict[int, Tensor] = {}
    cur = x
    last = len(model.spec.backbone.layers) - 1 if upto is None else upto
    for i, layer in enumerate(model.spec.backbone.layers[: last + 1]):
        if layer.kind == "conv":
            cur = ops.conv2d(cur, model.params[f"backbone.{i}.weight"], layer.stride, layer.pad)
        elif layer.kind == "pool":
            cur = ops.maxpool2d(cur, layer.kernel, layer.stride)
        else:
            cur = ops.relu(cur)
        if keep and i in keep:
            taps[i] = cur
    return cur, taps


def tap_features(model: Model, image, tap: str) -> Tensor:
    """Feature map at a tap point (runs only the backbone prefix)."""
    x = _check_input(model, image)
    idx = model.spec.backbone.taps[tap]
    out, _ = _run_backbone(model, x, upto=idx)
    return out


def forward(model: Model, image) -> StreamOutputs:
    """Run every stream on one image (C,S,S) or a batch (N,C,S,S).

    Deterministic; also records the argmax location of every conv6 filter
    response for later patch visualization.
    """
    spec = model.spec
    x = _check_input(model, image)
    tap_idx = {spec.backbone.taps[m.tap] for m in spec.modules}
    final, taps = _run_backbone(model, x, keep=tap_idx)

    pooled = ops.global_avg_pool(final)
    if spec.g_hidden > 0:
        hidden = ops.relu(
            ops.fully_connected(pooled, model.params["ghead.fc1.weight"],
                                model.params["ghead.fc1.bias"])
        )
        g_logits = ops.fully_connected(hidden, model.params["ghead.fc2.weight"],
                                       model.params["ghead.fc2.bias"])
    else:
        g_logits = ops.fully_connected(pooled, model.params["ghead.weight"],
                                       model.params["ghead.bias"])

    p_logits, side_logits, pool6, peaks, argmaxes = [], [], [], [], []
    for mi, mod in enumerate(spec.modules):
        tap_feat = taps[spec.backbone.taps[mod.tap]]
        conv6 = ops.conv2d(tap_feat, model.params[f"module{mi}.conv6.weight"])
        peak, argmax = ops.global_max_pool(conv6)
        vec = peak if spec.pooling == "gmp" else ops.global_avg_pool(conv6)
        p_logits.append(
            ops.fully_connected(vec, model.params[f"module{mi}.phead.weight"],
                                model.params[f"module{mi}.phead.bias"])
        )
        pool6.append(vec)
        peaks.append(peak)
        argmaxes.append(argmax)
        if mod.with_side_branch:
            side_logits.append(ops.cross_channel_avg_pool(vec, mod.filters_per_class))
    return StreamOutputs(g_logits=g_logits, p_logits=p_logits, side_logits=side_logits,
                         pool6=pool6, peak_values=peaks, peak_argmax=argmaxes)


def logit_streams(outputs: StreamOutputs) -> list[Tensor]:
    """All logit streams in fusion order: G, then P per module, then side per module."""
    return [outputs.g_logits] + list(outputs.p_logits) + list(outputs.side_logits)


def fuse_predictions(outputs: StreamOutputs, weights) -> tuple[Tensor, np.ndarray | int]:
    """Weighted sum of stream logits and its argmax class (ties -> smallest index)."""
    streams = logit_streams(outputs)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(streams),):
        raise ValueError(f"expected {len(streams)} fusion weights, got shape {w.shape}")
    if w.min() < 0 or w.max() <= 0:
        raise ValueError("fusion weights must be nonnegative with at least one positive")
    fused = sum(wi * s.data for wi, s in zip(w, streams))
    cls = fused.argmax(axis=-1)
    return Tensor(fused), (int(cls) if fused.ndim == 1 else cls)


def tinynet_spec(classes: int, filters_per_class: int = 4, input_size: int = 64,
                 pooling: str = "gmp", g_hidden: int = 0,
                 with_side_branch: bool = True) -> ModelSpec:
    """Desk-scale default backbone: four 3x3 conv blocks (16,32,64,64), 2x2
    pools after blocks 1 and 2, patch module tapped after block 3
    (receptive field 18, stride 4 on the input)."""
    layers = (
        conv(3, 16, pad=1), relu_layer(), pool(2, 2),
        conv(3, 32, pad=1), relu_layer(), pool(2, 2),
        conv(3, 64, pad=1), relu_layer(),
        conv(3, 64, pad=1), relu_layer(),
    )
    backbone = BackboneSpec(layers=layers, taps={"block3": 7, "block4": 9})
    module = DFLModuleSpec(tap="block3", classes=classes,
                           filters_per_class=filters_per_class,
                           with_side_branch=with_side_branch)
    return ModelSpec(backbone=backbone, modules=(module,), input_size=input_size,
                     pooling=pooling, g_hidden=g_hidden)


def vgg16_backbone() -> BackboneSpec:
    """The 16-layer VGG conv stack through conv5_3 with named taps."""
    channels = [(64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)]
    layers: list[LayerSpec] = []
    names: dict[str, int] = {}
    for bi, block in enumerate(channels, start=1):
        for ci, ch in enumerate(block, start=1):
            layers.append(conv(3, ch, pad=1))
            layers.append(relu_layer())
            names[f"conv{bi}_{ci}"] = len(layers) - 1  # tap after the relu
        if bi < len(channels):
            layers.append(pool(2, 2))
    return BackboneSpec(layers=tuple(layers), taps=names)


BUILTIN_BACKBONES = {"vgg16": vgg16_backbone}


def builtin_backbone(name: str) -> BackboneSpec:
    try:
        return BUILTIN_BACKBONES[name]()
    except KeyError:
        raise ValueError(f"unknown builtin backbone {name!r}; have {sorted(BUILTIN_BACKBONES)}")

"""Declarative 3-D networks: generator, discriminator, segmentation and fusion branches.

A network is a flat list of :class:`LayerSpec` evaluated in order by
:func:`forward`. Skip connections are ``concat_skip`` layers that name the
layer whose output they append along the channel axis. Parameters live in
plain ``{layer_id: {"weight": tensor, "bias": tensor}}`` maps so they can be
copied between networks by layer id.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .volume import Volume

LAYER_KINDS = (
    "conv3d",
    "transposed_conv3d",
    "instance_norm",
    "leaky_relu",
    "concat_skip",
    "softmax_channels",
    "mask_guidance",
)
PARAM_KINDS = ("conv3d", "transposed_conv3d")
LRELU_SLOPE = 0.2
IN_EPS = 1e-5
CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple = (1, 1, 1)
    stride: int = 1
    padding: int = 0
    source: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"{self.id}: unknown layer kind {self.kind!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"{self.id}: channel counts must be positive")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.kind in PARAM_KINDS:
            if len(self.kernel) != 3 or min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(f"{self.id}: bad kernel/stride/padding")
        elif self.kind == "concat_skip":
            if self.source is None:
                raise ValueError(f"{self.id}: concat_skip needs a source layer")
        elif self.in_channels != self.out_channels:
            raise ValueError(f"{self.id}: {self.kind} cannot change channel count")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> dict:
        if self.kind == "conv3d":
            w = (self.out_channels, self.in_channels, *self.kernel)
        elif self.kind == "transposed_conv3d":
            w = (self.in_channels, self.out_channels, *self.kernel)
        else:
            return {}
        return {"weight": w, "bias": (self.out_channels,)}

    def spatial_out(self, n: int) -> int:
        if self.kind == "conv3d":
            return (n + 2 * self.padding - self.kernel[0]) // self.stride + 1
        if self.kind == "transposed_conv3d":
            return (n - 1) * self.stride - 2 * self.padding + self.kernel[0]
        return n


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    taps: tuple = ()
    # input spatial sizes must be a multiple of this (U-Net pooling depth)
    spatial_multiple: int = 1
    # extra inputs consumed by mask_guidance layers
    needs_masks: bool = False

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "taps", tuple(self.taps))
        seen = {}
        prev = None
        for layer in layers:
            if layer.id in seen:
                raise ValueError(f"duplicate layer id {layer.id}")
            if prev is not None and layer.in_channels != prev.out_channels:
                raise ValueError(
                    f"{layer.id}: expects {layer.in_channels} channels but {prev.id} emits {prev.out_channels}"
                )
            if layer.kind == "concat_skip":
                if layer.source not in seen:
                    raise ValueError(f"{layer.id}: unknown skip source {layer.source}")
                if layer.out_channels != layer.in_channels + seen[layer.source].out_channels:
                    raise ValueError(f"{layer.id}: concat output channels do not add up")
            seen[layer.id] = layer
            prev = layer
        missing = [t for t in self.taps if t not in seen]
        if missing:
            raise ValueError(f"unknown tap ids {missing}")

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def ids(self) -> tuple:
        return tuple(layer.id for layer in self.layers)

    @property
    def final_conv(self) -> str:
        return [layer.id for layer in self.layers if layer.has_params][-1]

    def param_shapes(self) -> dict:
        return {layer.id: layer.param_shapes() for layer in self.layers if layer.has_params}

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for p in self.param_shapes().values() for s in p.values())

    def trace_shapes(self, in_shape) -> dict:
        """Output shape (channels, d, h, w) of every layer for an input of ``in_shape``."""
        c, *spatial = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.layers[0].id}: expects {self.in_channels} input channels, got {c}")
        m = self.spatial_multiple
        if any(n % m for n in spatial):
            raise ShapeError(f"{self.name}: input spatial size {tuple(spatial)} not divisible by {m}")
        shapes = {}
        for layer in self.layers:
            if layer.kind == "concat_skip":
                src = shapes[layer.source][1:]
                if tuple(src) != tuple(spatial):
                    raise ShapeError(f"{layer.id}: skip from {layer.source} has size {src}, expected {tuple(spatial)}")
            spatial = [layer.spatial_out(n) for n in spatial]
            if min(spatial) < 1:
                raise ShapeError(f"{layer.id}: input too small, output size {tuple(spatial)}")
            if layer.kind == "instance_norm" and int(np.prod(spatial)) < 2:
                raise ShapeError(f"{layer.id}: instance norm needs more than one voxel, got {tuple(spatial)}")
            shapes[layer.id] = (layer.out_channels, *spatial)
        return shapes

    def output_shape(self, in_shape) -> tuple:
        return self.trace_shapes(in_shape)[self.layers[-1].id]

    def describe(self) -> dict:
        return {"name": self.name, "layers": [layer.__dict__ for layer in self.layers], "taps": list(self.taps)}


# ------------------------------------------------------------- builders


def _conv_block(prefix: str, cin: int, cout: int, kernel=3, stride=1, padding=1, suffix="") -> list:
    k = (kernel,) * 3
    return [
        LayerSpec(f"{prefix}_conv{suffix}", "conv3d", cin, cout, k, stride, padding),
        LayerSpec(f"{prefix}_norm{suffix}", "instance_norm", cout, cout),
        LayerSpec(f"{prefix}_act{suffix}", "leaky_relu", cout, cout),
    ]


def _unet_trunk(in_channels: int, base_filters: int, depth: int) -> list:
    if base_filters < 1 or depth < 1:
        raise ValueError("base_filters and depth must be >= 1")
    widths = [base_filters * 2**level for level in range(depth + 1)]
    layers = _conv_block("enc0", in_channels, widths[0], suffix="1") + _conv_block("enc0", widths[0], widths[0], suffix="2")
    for level in range(1, depth + 1):
        layers += _conv_block(f"down{level}", widths[level - 1], widths[level], stride=2)
        layers += _conv_block(f"enc{level}", widths[level], widths[level], suffix="1")
        layers += _conv_block(f"enc{level}", widths[level], widths[level], suffix="2")
    for level in range(depth, 0, -1):
        w_hi, w_lo = widths[level], widths[level - 1]
        layers += [
            LayerSpec(f"up{level}_conv", "transposed_conv3d", w_hi, w_lo, (2, 2, 2), 2, 0),
            LayerSpec(f"up{level}_norm", "instance_norm", w_lo, w_lo),
            LayerSpec(f"up{level}_act", "leaky_relu", w_lo, w_lo),
            LayerSpec(f"up{level}_concat", "concat_skip", w_lo, 2 * w_lo, source=f"enc{level - 1}_act2"),
        ]
        layers += _conv_block(f"dec{level}", 2 * w_lo, w_lo, suffix="1")
        layers += _conv_block(f"dec{level}", w_lo, w_lo, suffix="2")
    return layers


TRUNK_TAPS = ("dec1_act1", "dec1_act2")


def build_generator(in_channels: int, base_filters: int = 16, depth: int = 3) -> NetworkSpec:
    if in_channels not in (1, 2):
        raise ValueError("generator input must have 1 or 2 channels")
    layers = _unet_trunk(in_channels, base_filters, depth)
    layers.append(LayerSpec("out_conv", "conv3d", base_filters, in_channels))
    return NetworkSpec("generator", layers, TRUNK_TAPS, spatial_multiple=2**depth)


def build_seg_branch(in_channels: int, base_filters: int = 16, depth: int = 3) -> NetworkSpec:
    if in_channels not in (1, 2):
        raise ValueError("segmentation branch input must have 1 or 2 channels")
    layers = _unet_trunk(in_channels, base_filters, depth)
    layers.append(LayerSpec("out_conv", "conv3d", base_filters, 4))
    layers.append(LayerSpec("out_softmax", "softmax_channels", 4, 4))
    return NetworkSpec("seg_branch", layers, TRUNK_TAPS, spatial_multiple=2**depth)


def build_discriminator(in_channels: int = 1) -> NetworkSpec:
    """Patch discriminator: four stride-2 4x4x4 convs (16, 32, 64, 128 filters) and a stride-1 scoring conv."""
    if in_channels not in (1, 2):
        raise ValueError("discriminator input must have 1 or 2 channels")
    k = (4, 4, 4)
    layers = [
        LayerSpec("L1", "conv3d", in_channels, 16, k, 2, 1),
        LayerSpec("L2", "leaky_relu", 16, 16),
        LayerSpec("L3", "conv3d", 16, 32, k, 2, 1),
        LayerSpec("L4", "instance_norm", 32, 32),
        LayerSpec("L5", "leaky_relu", 32, 32),
        LayerSpec("L6", "conv3d", 32, 64, k, 2, 1),
        LayerSpec("L7", "instance_norm", 64, 64),
        LayerSpec("L8", "leaky_relu", 64, 64),
        LayerSpec("L9", "conv3d", 64, 128, k, 2, 1),
        LayerSpec("L10", "instance_norm", 128, 128),
        LayerSpec("L11", "leaky_relu", 128, 128),
        LayerSpec("L12", "conv3d", 128, 1, k, 1, 1),
    ]
    return NetworkSpec("discriminator", layers)


# smallest cube the discriminator accepts: n -> n // 2 four times, then n - 1
DISCRIMINATOR_MIN_SIZE = 32


def build_fusion_branch(tap_channels: int = 16, mask_guidance: bool = True) -> NetworkSpec:
    c = tap_channels
    layers = _conv_block("fuse", 4 * c, 2 * c, suffix="1")
    if mask_guidance:
        layers.append(LayerSpec("mask_guidance", "mask_guidance", 2 * c, 2 * c))
    layers += _conv_block("fuse", 2 * c, c, suffix="2")
    layers.append(LayerSpec("out_conv", "conv3d", c, 4))
    layers.append(LayerSpec("out_softmax", "softmax_channels", 4, 4))
    return NetworkSpec("fusion_branch", layers, needs_masks=mask_guidance)


# --------------------------------------------------------------- params


def layer_seed(seed: int, layer_id: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{layer_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def init_layer(layer: LayerSpec, seed: int) -> dict:
    """Fan-in scaled normal weights (leaky-ReLU gain), zero bias."""
    g = torch.Generator().manual_seed(layer_seed(seed, layer.id))
    shapes = layer.param_shapes()
    k = int(np.prod(layer.kernel))
    fan_in = layer.in_channels * k
    if layer.kind == "transposed_conv3d":
        fan_in = max(1, fan_in // layer.stride**3)
    std = float(np.sqrt(2.0 / (1.0 + LRELU_SLOPE**2) / fan_in))
    return {
        "weight": torch.randn(shapes["weight"], generator=g) * std,
        "bias": torch.zeros(shapes["bias"]),
    }


def init_params(spec: NetworkSpec, seed: int) -> dict:
    return {layer.id: init_layer(layer, seed) for layer in spec.layers if layer.has_params}


def check_params(spec: NetworkSpec, params: Mapping) -> None:
    expected = spec.param_shapes()
    if set(expected) != set(params):
        raise ShapeError(
            f"{spec.name}: parameter layers differ; missing {sorted(set(expected) - set(params))}, "
            f"unexpected {sorted(set(params) - set(expected))}"
        )
    for lid, shapes in expected.items():
        for name, shape in shapes.items():
            got = tuple(params[lid][name].shape)
            if got != tuple(shape):
                raise ShapeError(f"{lid}.{name}: shape {got} does not match spec {tuple(shape)}")


def clone_params(params: Mapping, requires_grad: bool = False) -> dict:
    return {
        lid: {k: t.detach().clone().requires_grad_(requires_grad) for k, t in p.items()}
        for lid, p in params.items()
    }


def params_equal(p: Mapping, q: Mapping) -> bool:
    if set(p) != set(q):
        return False
    return all(
        set(p[l]) == set(q[l]) and all(torch.equal(torch.as_tensor(p[l][k]), torch.as_tensor(q[l][k])) for k in p[l])
        for l in p
    )


# ---------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Parameters of one network plus run metadata (phase, seed, step, config hash)."""

    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = {
            lid: {k: torch.as_tensor(np.asarray(v.detach() if torch.is_tensor(v) else v)).clone() for k, v in p.items()}
            for lid, p in self.params.items()
        }

    def check(self, spec: NetworkSpec) -> None:
        check_params(spec, self.params)

    def save(self, path) -> None:
        arrays = {f"{lid}/{k}": v.numpy() for lid, p in self.params.items() for k, v in p.items()}
        save_arrays(path, arrays, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        return cls(unflatten(arrays), meta)


def unflatten(arrays: Mapping, prefix: str = "") -> dict:
    params = {}
    for key, arr in arrays.items():
        if not key.startswith(prefix):
            continue
        lid, name = key[len(prefix):].rsplit("/", 1)
        params.setdefault(lid, {})[name] = torch.from_numpy(np.array(arr))
    return params


def flatten(params: Mapping, prefix: str = "") -> dict:
    return {f"{prefix}{lid}/{k}": v.detach().numpy().copy() for lid, p in params.items() for k, v in p.items()}


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, arrays: Mapping, meta: Mapping) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps.

    Every array is stored as ``<key>.npy``; ``__meta__.npy`` holds the UTF-8
    JSON metadata block including ``format_version``.
    """
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, **dict(meta)}
    entries = dict(arrays)
    entries["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(entries[key]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)


def load_arrays(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version {version}")
    return arrays, meta


def transfer_parameters(source: Checkpoint, target_spec: NetworkSpec, seed: int = 0) -> Checkpoint:
    """Copy every layer shared with ``source``; re-initialize the final conv.

    Raises TransferError when any other layer of the target is absent from the
    source or has a different shape (configuration drift between phases).
    """
    final = target_spec.final_conv
    params = {}
    for layer in target_spec.layers:
        if not layer.has_params:
            continue
        if layer.id == final:
            params[layer.id] = init_layer(layer, seed)
            continue
        if layer.id not in source.params:
            raise TransferError(f"{layer.id}: not present in source checkpoint")
        src = source.params[layer.id]
        for name, shape in layer.param_shapes().items():
            if tuple(src[name].shape) != tuple(shape):
                raise TransferError(f"{layer.id}.{name}: source shape {tuple(src[name].shape)} != target {shape}")
        params[layer.id] = {k: v.clone() for k, v in src.items()}
    meta = dict(source.meta)
    meta.update(phase="cmff", seed=int(seed), step=0, transferred_from=source.meta.get("network"))
    return Checkpoint(params, meta)


# -------------------------------------------------------------- forward


def apply_mask_guidance(features, mask_a, mask_b):
    """Gate features by the stronger of the two branches' foreground probability.

    ``out = features * (1 + m)`` with ``m = max(1 - mask_a[bg], 1 - mask_b[bg])``.
    Works on Volumes (C, D, H, W) or batched tensors (N, C, D, H, W).
    """
    if isinstance(features, Volume):
        out = apply_mask_guidance(
            torch.from_numpy(np.array(features.data))[None],
            torch.from_numpy(np.array(mask_a.data))[None],
            torch.from_numpy(np.array(mask_b.data))[None],
        )
        return Volume(out[0].numpy(), features.spacing)
    if mask_a.shape[2:] != features.shape[2:] or mask_b.shape[2:] != features.shape[2:]:
        raise ShapeError(
            f"mask sizes {tuple(mask_a.shape[2:])}/{tuple(mask_b.shape[2:])} differ from features {tuple(features.shape[2:])}"
        )
    m = torch.maximum(1.0 - mask_a[:, :1], 1.0 - mask_b[:, :1])
    return features * (1.0 + m)


def _as_params(params) -> Mapping:
    return params.params if isinstance(params, Checkpoint) else params


def forward(spec: NetworkSpec, params, x, masks=None, stop_before: Optional[str] = None):
    """Evaluate ``spec`` on ``x``; returns (output, {tap_id: activation}).

    ``x`` is a Volume (returned values are Volumes) or an (N, C, D, H, W)
    tensor. ``masks`` is the (mask_a, mask_b) pair consumed by a
    mask_guidance layer. With ``stop_before`` the output is the activation
    entering that layer.
    """
    params = _as_params(params)
    as_volume = isinstance(x, Volume)
    if as_volume:
        spacing = x.spacing
        h = torch.from_numpy(np.array(x.data, dtype=np.float32))[None]
        if masks is not None:
            masks = tuple(torch.from_numpy(np.array(m.data, dtype=np.float32))[None] for m in masks)
    else:
        h = x
    spec.trace_shapes(tuple(h.shape[1:]))
    keep = {layer.source for layer in spec.layers if layer.kind == "concat_skip"}
    saved, taps = {}, {}
    for layer in spec.layers:
        if layer.id == stop_before:
            break
        if h.shape[1] != layer.in_channels:
            raise ShapeError(f"{layer.id}: expects {layer.in_channels} channels, got {h.shape[1]}")
        h = _apply_layer(layer, params, h, saved, masks)
        if layer.id in keep:
            saved[layer.id] = h
        if layer.id in spec.taps:
            taps[layer.id] = h
    if as_volume:
        out = Volume(h[0].detach().numpy(), spacing)
        return out, {k: Volume(v[0].detach().numpy(), spacing) for k, v in taps.items()}
    return h, taps


def _apply_layer(layer: LayerSpec, params: Mapping, h, saved: Mapping, masks):
    kind = layer.kind
    if kind == "conv3d":
        p = params[layer.id]
        return F.conv3d(h, p["weight"], p["bias"], stride=layer.stride, padding=layer.padding)
    if kind == "transposed_conv3d":
        p = params[layer.id]
        return F.conv_transpose3d(h, p["weight"], p["bias"], stride=layer.stride, padding=layer.padding)
    if kind == "instance_norm":
        return F.instance_norm(h, eps=IN_EPS)
    if kind == "leaky_relu":
        return F.leaky_relu(h, LRELU_SLOPE)
    if kind == "concat_skip":
        return torch.cat([h, saved[layer.source]], dim=1)
    if kind == "softmax_channels":
        return torch.softmax(h, dim=1)
    if kind == "mask_guidance":
        if masks is None:
            raise ShapeError(f"{layer.id}: mask_guidance needs (mask_a, mask_b)")
        return apply_mask_guidance(h, *masks)
    raise ValueError(f"{layer.id}: unknown kind {kind}")


def fusion_input(taps_a: Mapping, taps_b: Mapping, tap_ids=TRUNK_TAPS):
    """Channel concatenation of both branches' taps in (a..., b...) order."""
    feats = [taps_a[t] for t in tap_ids] + [taps_b[t] for t in tap_ids]
    shapes = {tuple(f.shape[-3:]) for f in feats}
    chans = {f.shape[-4] for f in feats}
    if len(shapes) != 1 or len(chans) != 1:
        raise ShapeError(f"tap shape mismatch between branches: {[tuple(f.shape) for f in feats]}")
    if isinstance(feats[0], Volume):
        return Volume(np.concatenate([f.data for f in feats], axis=0), feats[0].spacing)
    return torch.cat(feats, dim=1)


def pad_to_min(x, min_size: int):
    """Zero-pad a batched tensor symmetrically so every spatial axis is >= ``min_size``."""
    pads = []
    for n in reversed(x.shape[2:]):
        extra = max(0, min_size - n)
        pads += [extra // 2, extra - extra // 2]
    if not any(pads):
        return x
    return F.pad(x, pads)

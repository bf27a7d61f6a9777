"""Residual pore-map network, domain-classifier head, and checkpoint IO.

The backbone is a stride-free residual CNN: a 7x7 stem convolution, four
stages of two 3x3 residual blocks (channel plan 64-64-128-256-512 at full
width), and a final 3x3 convolution to one channel followed by batch norm and
ReLU. Every layer preserves the spatial size, so the output pore intensity
map matches the input patch. The domain head flattens the pore map, passes it
through a gradient-reversal coupling and a small MLP, and ends in a softmax
over the two domains.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .ndgrad import DOMAIN_GROUP, PORE_GROUP, BnState, Grid4, ParamSet, Tape

FORMAT_VERSION = 1
_MAGIC = b"POREPAK1"


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated, or does not match its config."""


@dataclass(frozen=True)
class ResPoreConfig:
    """Backbone geometry. stage_channels[0] is the stem width, the rest are
    the four residual stages; width_multiplier rescales the whole plan."""

    input_size: int = 80
    stage_channels: tuple[int, ...] = (64, 64, 128, 256, 512)
    blocks_per_stage: int = 2
    first_kernel: int = 7
    block_kernel: int = 3
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.input_size <= 0:
            raise ValueError("input_size must be positive")
        if len(self.stage_channels) < 2 or any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage_channels needs a stem width plus at least one stage")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be at least 1")
        if self.first_kernel % 2 == 0 or self.block_kernel % 2 == 0:
            raise ValueError("kernels must be odd for size-preserving padding")
        if not self.width_multiplier > 0:
            raise ValueError("width_multiplier must be positive")

    def channel_plan(self) -> tuple[int, ...]:
        return tuple(max(1, round(c * self.width_multiplier))
                     for c in self.stage_channels)


@dataclass(frozen=True)
class DomainHeadConfig:
    """Domain-classifier MLP over the flattened pore map; output is 2 wide."""

    input_dim: int = 6400
    hidden_dims: tuple[int, ...] = (1024, 100)

    def __post_init__(self):
        if self.input_dim <= 0 or any(d <= 0 for d in self.hidden_dims):
            raise ValueError("all layer widths must be positive")


@dataclass
class TrainMeta:
    epoch: int = 0
    seed: int = 0
    lam: float = 0.0
    learning_rate: float = 0.0


@dataclass
class PoreModel:
    cfg: ResPoreConfig
    head_cfg: DomainHeadConfig
    params: ParamSet


@dataclass
class Checkpoint:
    respore: ResPoreConfig
    domain_head: DomainHeadConfig
    params: ParamSet
    meta: TrainMeta = field(default_factory=TrainMeta)
    version: int = FORMAT_VERSION

    def model(self) -> PoreModel:
        return PoreModel(self.respore, self.domain_head, self.params)


# ---------------------------------------------------------------------------
# parameter census

@dataclass(frozen=True)
class _ParamSpec:
    shape: tuple[int, ...]
    init: str  # conv | zeros | ones | linear
    group: str


def respore_census(cfg: ResPoreConfig) -> tuple[dict[str, _ParamSpec], list[tuple[str, int]]]:
    """Ordered parameter specs and (bn layer name, channels) pairs."""
    plan = cfg.channel_plan()
    k1, kb = cfg.first_kernel, cfg.block_kernel
    specs: dict[str, _ParamSpec] = {}
    bn_layers: list[tuple[str, int]] = []

    def conv(name, c_out, c_in, k):
        specs[f"{name}.weight"] = _ParamSpec((c_out, c_in, k, k), "conv", PORE_GROUP)
        specs[f"{name}.bias"] = _ParamSpec((1, c_out, 1, 1), "zeros", PORE_GROUP)

    def bn(name, c):
        specs[f"{name}.gamma"] = _ParamSpec((1, c, 1, 1), "ones", PORE_GROUP)
        specs[f"{name}.beta"] = _ParamSpec((1, c, 1, 1), "zeros", PORE_GROUP)
        bn_layers.append((name, c))

    conv("conv1", plan[0], 1, k1)
    c_in = plan[0]
    for s, c_out in enumerate(plan[1:], start=1):
        for b in range(cfg.blocks_per_stage):
            prefix = f"stage{s}.block{b}"
            conv(f"{prefix}.conv1", c_out, c_in, kb)
            bn(f"{prefix}.bn1", c_out)
            conv(f"{prefix}.conv2", c_out, c_out, kb)
            bn(f"{prefix}.bn2", c_out)
            if c_in != c_out:
                conv(f"{prefix}.proj", c_out, c_in, 1)
                bn(f"{prefix}.proj_bn", c_out)
            c_in = c_out
    conv("conv6", 1, c_in, kb)
    bn("bn6", 1)
    return specs, bn_layers


def domain_head_census(cfg: DomainHeadConfig) -> dict[str, _ParamSpec]:
    specs: dict[str, _ParamSpec] = {}
    widths = (cfg.input_dim,) + cfg.hidden_dims + (2,)
    for i in range(len(widths) - 1):
        d_in, d_out = widths[i], widths[i + 1]
        specs[f"domain.fc{i + 1}.weight"] = _ParamSpec((d_out, d_in, 1, 1), "linear", DOMAIN_GROUP)
        specs[f"domain.fc{i + 1}.bias"] = _ParamSpec((1, d_out, 1, 1), "zeros", DOMAIN_GROUP)
    return specs


def _init_array(spec: _ParamSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    if spec.init == "conv":
        fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3]
        return (rng.standard_normal(spec.shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    if spec.init == "linear":
        bound = 1.0 / np.sqrt(spec.shape[1])
        return rng.uniform(-bound, bound, size=spec.shape).astype(dtype)
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=dtype)
    return np.zeros(spec.shape, dtype=dtype)


def build_deeprespore(cfg: ResPoreConfig, seed: int, dtype=np.float32) -> ParamSet:
    """Initialize the pore-branch parameters deterministically from seed."""
    rng = np.random.default_rng(seed)
    specs, bn_layers = respore_census(cfg)
    params = ParamSet()
    for name, spec in specs.items():
        params.add(name, ng.param(_init_array(spec, rng, dtype)), spec.group)
    for name, c in bn_layers:
        params.stats[name] = BnState(c, dtype=dtype)
    return params


def build_model(cfg: ResPoreConfig, head_cfg: DomainHeadConfig, seed: int,
                dtype=np.float32) -> PoreModel:
    """Backbone plus domain head in one ParamSet; head init uses a child seed."""
    if head_cfg.input_dim != cfg.input_size * cfg.input_size:
        raise ValueError(
            f"domain head input_dim {head_cfg.input_dim} does not match "
            f"{cfg.input_size}x{cfg.input_size} pore maps")
    params = build_deeprespore(cfg, seed, dtype)
    head_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    for name, spec in domain_head_census(head_cfg).items():
        params.add(name, ng.param(_init_array(spec, head_rng, dtype)), spec.group)
    return PoreModel(cfg, head_cfg, params)


# ---------------------------------------------------------------------------
# forward passes

def _conv_bn(params: ParamSet, prefix: str, x: Grid4, mode: str, tape) -> Grid4:
    h = ng.conv2d_same(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], tape=tape)
    bn_name = prefix.replace(".conv1", ".bn1").replace(".conv2", ".bn2") \
                    .replace(".proj", ".proj_bn").replace("conv6", "bn6")
    return ng.batch_norm(h, params[f"{bn_name}.gamma"], params[f"{bn_name}.beta"],
                         params.stats[bn_name], mode, tape=tape)


def _residual_block(params: ParamSet, prefix: str, x: Grid4, mode: str, tape,
                    trace) -> Grid4:
    h = ng.relu(_conv_bn(params, f"{prefix}.conv1", x, mode, tape), tape=tape)
    h = _conv_bn(params, f"{prefix}.conv2", h, mode, tape)
    skip = x
    if f"{prefix}.proj.weight" in params:
        skip = _conv_bn(params, f"{prefix}.proj", x, mode, tape)
    out = ng.relu(ng.residual_add(h, skip, tape=tape), tape=tape)
    if trace is not None:
        trace.append((prefix, out.shape))
    return out


def forward_backbone(model: PoreModel, x: Grid4, mode: str = "train",
                     tape: Tape | None = None, trace: list | None = None) -> Grid4:
    """Stem and residual stages; output feeds the final pore-map head."""
    cfg = model.cfg
    n, c, h, w = x.shape
    if c != 1 or h != cfg.input_size or w != cfg.input_size:
        raise ng.ShapeError(
            f"expected (n, 1, {cfg.input_size}, {cfg.input_size}) input, got {x.shape}")
    params = model.params
    out = ng.relu(ng.conv2d_same(x, params["conv1.weight"], params["conv1.bias"],
                                 tape=tape), tape=tape)
    if trace is not None:
        trace.append(("conv1", out.shape))
    for s in range(1, len(cfg.channel_plan()[1:]) + 1):
        for b in range(cfg.blocks_per_stage):
            out = _residual_block(params, f"stage{s}.block{b}", out, mode, tape, trace)
    return out


def forward_head(model: PoreModel, features: Grid4, mode: str = "train",
                 tape: Tape | None = None, trace: list | None = None) -> Grid4:
    """Final convolution, batch norm, and ReLU producing the pore map."""
    out = ng.relu(_conv_bn(model.params, "conv6", features, mode, tape), tape=tape)
    if trace is not None:
        trace.append(("conv6", out.shape))
    return out


def forward_pore(model: PoreModel, x: Grid4, mode: str = "train",
                 tape: Tape | None = None, trace: list | None = None) -> Grid4:
    """Pore intensity map of the input patch batch; nonnegative, same size."""
    return forward_head(model, forward_backbone(model, x, mode, tape, trace),
                        mode, tape, trace)


def forward_domain(model: PoreModel, yhat: Grid4, lam: float,
                   tape: Tape | None = None, coupling: str = "grl") -> Grid4:
    """Per-sample domain probabilities (n, 2, 1, 1) from a pore map batch.

    coupling selects how gradients reach the pore branch: "grl" scales them
    by -lam, "detached" blocks them, "direct" passes them unchanged (the
    diagnostic baseline for the reversal contract).
    """
    n, c, h, w = yhat.shape
    head_cfg = model.head_cfg
    if c * h * w != head_cfg.input_dim:
        raise ng.ShapeError(
            f"pore map flattens to {c * h * w}, domain head expects {head_cfg.input_dim}")
    if coupling == "grl":
        z = ng.gradient_reversal(yhat, lam, tape=tape)
    elif coupling == "detached":
        z = yhat.detach()
    elif coupling == "direct":
        z = yhat
    else:
        raise ValueError(f"unknown coupling {coupling!r}")
    h_act = ng.flatten(z, tape=tape)
    n_layers = len(head_cfg.hidden_dims) + 1
    params = model.params
    for i in range(1, n_layers + 1):
        h_act = ng.linear(h_act, params[f"domain.fc{i}.weight"],
                          params[f"domain.fc{i}.bias"], tape=tape)
        if i < n_layers:
            h_act = ng.relu(h_act, tape=tape)
    return ng.softmax_rows(h_act, tape=tape)


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# File layout (all integers little-endian):
#   bytes 0..7    magic "POREPAK1"
#   bytes 8..15   uint64 manifest length in bytes
#   manifest      UTF-8 JSON, keys sorted, compact separators
#   payload       raw tensor bytes at the offsets the manifest declares
#
# Each manifest tensor entry carries name, kind (param | bn_mean | bn_var),
# group, shape, numpy dtype string, offset into the payload, and nbytes.

def _config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _respore_from_dict(d: dict) -> ResPoreConfig:
    d = dict(d)
    d["stage_channels"] = tuple(d["stage_channels"])
    return ResPoreConfig(**d)


def _head_from_dict(d: dict) -> DomainHeadConfig:
    d = dict(d)
    d["hidden_dims"] = tuple(d["hidden_dims"])
    return DomainHeadConfig(**d)


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Serialize to the container format above; the write is atomic."""
    tensors = []
    chunks = []
    offset = 0

    def push(name, kind, group, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append({"name": name, "kind": kind, "group": group,
                        "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, p in ckpt.params.items():
        push(name, "param", ckpt.params.group_of(name), p.values)
    for name in sorted(ckpt.params.stats):
        st = ckpt.params.stats[name]
        push(name, "bn_mean", PORE_GROUP, st.mean)
        push(name, "bn_var", PORE_GROUP, st.var)

    manifest = {
        "format_version": ckpt.version,
        "respore_config": _config_to_dict(ckpt.respore),
        "domain_head_config": _config_to_dict(ckpt.domain_head),
        "meta": dataclasses.asdict(ckpt.meta),
        "tensors": tensors,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    _atomic_write(path, _MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks))


def load_checkpoint(path: str, expect_respore: ResPoreConfig | None = None,
                    expect_domain: DomainHeadConfig | None = None) -> Checkpoint:
    """Load and validate a checkpoint; no state escapes a failed load.

    The stored configs define the expected parameter census; every tensor is
    checked against it. When expect_* configs are given they must equal the
    stored ones, so a checkpoint from a differently sized model is rejected.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(_MAGIC) + 8 or data[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack_from("<Q", data, len(_MAGIC))
    header_end = len(_MAGIC) + 8
    if header_end + mlen > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[header_end:header_end + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown format version {version!r}")
    try:
        respore = _respore_from_dict(manifest["respore_config"])
        head = _head_from_dict(manifest["domain_head_config"])
        meta = TrainMeta(**manifest["meta"])
        entries = manifest["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if expect_respore is not None and respore != expect_respore:
        raise CheckpointError(f"{path}: backbone config mismatch: "
                              f"stored {respore}, expected {expect_respore}")
    if expect_domain is not None and head != expect_domain:
        raise CheckpointError(f"{path}: domain head config mismatch: "
                              f"stored {head}, expected {expect_domain}")

    payload = data[header_end + mlen:]
    try:
        declared = sum(int(e["nbytes"]) for e in entries)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if len(payload) != declared:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, "
                              f"manifest declares {declared}")
    specs, bn_layers = respore_census(respore)
    specs.update(domain_head_census(head))
    bn_channels = dict(bn_layers)

    def read_array(entry, want_shape):
        shape = tuple(entry["shape"])
        if shape != want_shape:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} has shape "
                                  f"{shape}, config requires {want_shape}")
        dtype = np.dtype(entry["dtype"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != dtype.itemsize * int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} byte count "
                                  "disagrees with its shape")
        if start < 0 or start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} extends past "
                                  "end of file")
        return np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)),
                             offset=start).reshape(shape).copy()

    params = ParamSet()
    stats_parts: dict[str, dict[str, np.ndarray]] = {}
    for entry in entries:
        name, kind = entry["name"], entry["kind"]
        if kind == "param":
            spec = specs.get(name)
            if spec is None:
                raise CheckpointError(f"{path}: unexpected parameter {name!r}")
            if entry["group"] != spec.group:
                raise CheckpointError(f"{path}: parameter {name!r} stored in "
                                      f"group {entry['group']!r}, expected {spec.group!r}")
            params.add(name, ng.param(read_array(entry, spec.shape)), spec.group)
        elif kind in ("bn_mean", "bn_var"):
            if name not in bn_channels:
                raise CheckpointError(f"{path}: unexpected batch-norm stats {name!r}")
            arr = read_array(entry, (bn_channels[name],))
            stats_parts.setdefault(name, {})[kind] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {kind!r}")

    missing = set(specs) - set(params.names())
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:4]}")
    for name in bn_channels:
        parts = stats_parts.get(name)
        if parts is None or set(parts) != {"bn_mean", "bn_var"}:
            raise CheckpointError(f"{path}: incomplete batch-norm stats for {name!r}")
        st = BnState.__new__(BnState)
        st.mean = parts["bn_mean"]
        st.var = parts["bn_var"]
        params.stats[name] = st
    return Checkpoint(respore, head, params, meta, version)

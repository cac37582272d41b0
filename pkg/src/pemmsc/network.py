"""Encoders, perception-enhancement classifier, fusion encoder, decoders.

Every block is an FC layer followed by batch norm and an activation:
RB = FC + BN + ReLU, SB = FC + BN + Sigmoid. Parameters live in a flat
``ModelParams`` dict keyed ``"<submodule>.<layer>.<kind>"``.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import BatchNormState, DimensionError, Graph, Tensor
from .channel import power_normalize


class ConfigurationError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VariantInfo:
    modalities: tuple[str, ...]
    pe: bool
    fusion: bool
    deep_fusion: bool = False


VARIANTS: dict[str, VariantInfo] = {
    "PE-MMSC": VariantInfo(("hsi", "lidar"), pe=True, fusion=True),
    "EndNet": VariantInfo(("hsi", "lidar"), pe=False, fusion=True),
    "DeepEndNet": VariantInfo(("hsi", "lidar"), pe=False, fusion=True, deep_fusion=True),
    "HSI+PE": VariantInfo(("hsi",), pe=True, fusion=True),
    "LiDAR+PE": VariantInfo(("lidar",), pe=True, fusion=True),
    "HSI": VariantInfo(("hsi",), pe=False, fusion=False),
    "LiDAR": VariantInfo(("lidar",), pe=False, fusion=False),
}


def variant_info(variant: str) -> VariantInfo:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ConfigurationError(
            f"unknown variant {variant!r}; expected one of {list(VARIANTS)}") from None


@dataclass
class ModelSpec:
    variant: str = "PE-MMSC"
    d_hsi: int = 144
    d_lidar: int = 21
    m: int = 15
    K: int = 64
    encoder_widths: list[int] = field(default_factory=lambda: [64, 48, 48])
    fusion_widths: Optional[list[int]] = None
    decoder_widths: list[int] = field(default_factory=lambda: [48, 96])

    def __post_init__(self):
        info = variant_info(self.variant)
        self.encoder_widths = list(self.encoder_widths)
        self.decoder_widths = list(self.decoder_widths)
        if self.fusion_widths is None:
            self.fusion_widths = [96, 96, 96] if info.deep_fusion else [96]
        self.fusion_widths = list(self.fusion_widths)
        if len(self.encoder_widths) != 3:
            raise ConfigurationError("encoder_widths must list the 3 hidden widths (4th is K)")
        if len(self.decoder_widths) != 2:
            raise ConfigurationError("decoder_widths must list the 2 SB widths")
        expected = 3 if info.deep_fusion else 1
        if len(self.fusion_widths) != expected:
            raise ConfigurationError(
                f"{self.variant} fusion needs {expected} hidden width(s) before K, "
                f"got {self.fusion_widths}")
        for name in ("d_hsi", "d_lidar", "m", "K"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if min(self.encoder_widths + self.decoder_widths + self.fusion_widths) < 1:
            raise ConfigurationError("layer widths must be >= 1")

    @property
    def info(self) -> VariantInfo:
        return VARIANTS[self.variant]

    def input_dim(self, modality: str) -> int:
        return {"hsi": self.d_hsi, "lidar": self.d_lidar}[modality]

    def fusion_input_dim(self) -> int:
        info = self.info
        return self.K * len(info.modalities) + (self.m if info.pe else 0)

    def layers(self) -> dict[str, list[tuple[str, int, int]]]:
        """Submodule name -> [(block kind, in_dim, out_dim), ...]."""
        info = self.info
        out: dict[str, list[tuple[str, int, int]]] = {}
        for mod in info.modalities:
            dims = [self.input_dim(mod)] + self.encoder_widths + [self.K]
            out[f"enc_{mod}"] = [("RB", a, b) for a, b in zip(dims, dims[1:])]
        if info.pe:
            out["pe"] = [("FC", self.K, self.m)]
        if info.fusion:
            dims = [self.fusion_input_dim()] + self.fusion_widths + [self.K]
            out["fusion"] = [("RB", a, b) for a, b in zip(dims, dims[1:])]
        for mod in info.modalities:
            w1, w2 = self.decoder_widths
            out[f"dec_{mod}"] = [("SB", self.K, w1), ("SB", w1, w2),
                                 ("FC", w2, self.input_dim(mod))]
        out["cls"] = [("FC", self.K, self.m)]
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}


def init_params(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """Glorot-uniform FC weights, zero biases, BN gamma 1 / beta 0."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    tensors: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    for sub, blocks in spec.layers().items():
        for i, (kind, fan_in, fan_out) in enumerate(blocks):
            prefix = f"{sub}.{i}"
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"{prefix}.w"] = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)),
                                            requires_grad=True, name=f"{prefix}.w")
            tensors[f"{prefix}.b"] = Tensor(np.zeros((1, fan_out)), True, f"{prefix}.b")
            if kind != "FC":
                tensors[f"{prefix}.gamma"] = Tensor(np.ones((1, fan_out)), True, f"{prefix}.gamma")
                tensors[f"{prefix}.beta"] = Tensor(np.zeros((1, fan_out)), True, f"{prefix}.beta")
                bn[prefix] = BatchNormState.fresh(fan_out)
    return ModelParams(tensors, bn)


def _block(g: Graph, params: ModelParams, prefix: str, kind: str, x: Tensor, train: bool) -> Tensor:
    t = params.tensors
    y = g.linear(x, t[f"{prefix}.w"], t[f"{prefix}.b"])
    if kind == "FC":
        return y
    y = g.batchnorm(y, t[f"{prefix}.gamma"], t[f"{prefix}.beta"], params.bn[prefix], train)
    return g.relu(y) if kind == "RB" else g.sigmoid(y)


def _chain(g: Graph, params: ModelParams, spec: ModelSpec, sub: str, x: Tensor,
           train: bool) -> Tensor:
    blocks = spec.layers()[sub]
    if x.cols != blocks[0][1]:
        raise DimensionError(f"{sub} expects input width {blocks[0][1]}, got {x.shape}")
    for i, (kind, _, _) in enumerate(blocks):
        x = _block(g, params, f"{sub}.{i}", kind, x, train)
    return x


def encode(g: Graph, params: ModelParams, spec: ModelSpec, d: Tensor, modality: str,
           train: bool = True) -> Tensor:
    """Four RB blocks mapping raw modality features to K semantic features."""
    return _chain(g, params, spec, f"enc_{modality}", d, train)


def _classify(g: Graph, params: ModelParams, prefix: str, s: Tensor) -> Tensor:
    w = params.tensors[f"{prefix}.0.w"]
    if s.cols != w.rows:
        raise DimensionError(f"classifier expects width {w.rows}, got {s.shape}")
    return g.softmax_rows(g.linear(s, w, params.tensors[f"{prefix}.0.b"]))


def pe_classify(g: Graph, params: ModelParams, s: Tensor) -> Tensor:
    """Coarse class probabilities computed on the transmitter side."""
    return _classify(g, params, "pe", s)


def final_classify(g: Graph, params: ModelParams, s_hat: Tensor) -> Tensor:
    return _classify(g, params, "cls", s_hat)


def fuse(g: Graph, params: ModelParams, spec: ModelSpec, s_hsi: Optional[Tensor],
         s_lidar: Optional[Tensor], c_pre: Optional[Tensor], train: bool = True) -> Tensor:
    """Concatenate [S_hsi, S_lidar, C_pre] (present parts only) and run the RB chain."""
    info = spec.info
    if not info.fusion:
        raise ConfigurationError(f"{spec.variant} has no fusion encoder")
    given = {"hsi": s_hsi is not None, "lidar": s_lidar is not None}
    for mod, present in given.items():
        if present != (mod in info.modalities):
            raise ConfigurationError(
                f"{spec.variant}: {mod} semantics {'given' if present else 'missing'}")
    if (c_pre is not None) != info.pe:
        raise ConfigurationError(
            f"{spec.variant}: coarse classification {'given' if c_pre is not None else 'missing'}")
    parts = [p for p in (s_hsi, s_lidar, c_pre) if p is not None]
    return _chain(g, params, spec, "fusion", g.concat_cols(parts), train)


def decode(g: Graph, params: ModelParams, spec: ModelSpec, s_hat: Tensor, modality: str,
           train: bool = True) -> Tensor:
    """Two SB blocks and a sigmoid-activated FC back to the modality width."""
    return g.sigmoid(_chain(g, params, spec, f"dec_{modality}", s_hat, train))


@dataclass
class ForwardResult:
    c_pre: Optional[Tensor]
    s: Tensor
    s_hat: Tensor
    c_fin: Tensor
    d_hat: dict[str, Tensor]
    semantics: dict[str, Tensor]


def transmitter(g: Graph, params: ModelParams, spec: ModelSpec, inputs: dict[str, Tensor],
                train: bool = True) -> tuple[Tensor, Optional[Tensor], dict[str, Tensor]]:
    """UAV side: encoders, PE classifier, fusion, power normalization."""
    info = spec.info
    sem = {mod: encode(g, params, spec, inputs[mod], mod, train) for mod in info.modalities}
    c_pre = pe_classify(g, params, sem[info.modalities[0]]) if info.pe else None
    if info.fusion:
        s = fuse(g, params, spec, sem.get("hsi"), sem.get("lidar"), c_pre, train)
    else:
        s = sem[info.modalities[0]]
    return power_normalize(g, s), c_pre, sem


def receiver(g: Graph, params: ModelParams, spec: ModelSpec, s_hat: Tensor,
             train: bool = True) -> tuple[Tensor, dict[str, Tensor]]:
    c_fin = final_classify(g, params, s_hat)
    d_hat = {mod: decode(g, params, spec, s_hat, mod, train) for mod in spec.info.modalities}
    return c_fin, d_hat


def forward_full(g: Graph, params: ModelParams, spec: ModelSpec, inputs: dict[str, Tensor],
                 channel_fn: Callable[[Graph, Tensor], Tensor], train: bool = True) -> ForwardResult:
    """Encode, classify coarsely, fuse, transmit, then classify and reconstruct.

    ``inputs`` maps modality name ("hsi"/"lidar") to its N x d batch; only the
    variant's modalities are read. ``s`` in the result is the power-normalized
    symbol block actually handed to ``channel_fn``.
    """
    s, c_pre, sem = transmitter(g, params, spec, inputs, train)
    s_hat = channel_fn(g, s)
    c_fin, d_hat = receiver(g, params, spec, s_hat, train)
    return ForwardResult(c_pre, s, s_hat, c_fin, d_hat, sem)


# -- FLOPs ---------------------------------------------------------------

FLOPS_COLUMNS = ("hsi", "lidar", "pe", "fusion", "total")


def fc_flops(fan_in: int, fan_out: int) -> int:
    return 2 * fan_in * fan_out


def count_flops(spec: ModelSpec) -> dict[str, Optional[int]]:
    """Transmitter-side FLOPs per submodule (FC layers only: 2*in*out).

    ``total`` sums the transmitter columns; absent submodules are ``None``.
    The receiver (decoders + final classifier) is reported separately and is
    not part of ``total``.
    """
    per_sub = {sub: sum(fc_flops(a, b) for _, a, b in blocks)
               for sub, blocks in spec.layers().items()}
    report: dict[str, Optional[int]] = {
        "hsi": per_sub.get("enc_hsi"),
        "lidar": per_sub.get("enc_lidar"),
        "pe": per_sub.get("pe"),
        "fusion": per_sub.get("fusion"),
    }
    report["total"] = sum(v for v in report.values() if v is not None)
    report["receiver"] = sum(v for k, v in per_sub.items() if k.startswith("dec_") or k == "cls")
    return report


def parameter_count(spec: ModelSpec) -> int:
    n = 0
    for blocks in spec.layers().values():
        for kind, a, b in blocks:
            n += a * b + b + (0 if kind == "FC" else 2 * b)
    return n


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_MAGIC = b"PMSC"
CHECKPOINT_VERSION = 1


def _named_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    items = [(k, t.data) for k, t in params.tensors.items()]
    for prefix, st in params.bn.items():
        items.append((f"{prefix}.running_mean", st.mean))
        items.append((f"{prefix}.running_var", st.var))
    return items


def checkpoint_bytes(spec: ModelSpec, params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    spec_blob = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_blob)))
    buf.write(spec_blob)
    arrays = _named_arrays(params)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(blob: bytes) -> tuple[ModelSpec, ModelParams]:
    r = _Reader(blob)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic at byte 0")
    (version,) = r.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at byte 4")
    (spec_len,) = r.unpack("<I", "spec length")
    try:
        spec = ModelSpec(**json.loads(r.take(spec_len, "spec").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad model spec in checkpoint: {exc}") from exc
    params = init_params(spec)
    (count,) = r.unpack("<I", "tensor count")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        rows, cols = r.unpack("<II", f"shape of {name}")
        arr = np.frombuffer(r.take(8 * rows * cols, f"values of {name}"), dtype="<f8")
        arr = arr.reshape(rows, cols).astype(np.float64)
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            prefix, stat = name.rsplit(".", 1)
            target = params.bn.get(prefix)
            expected = None if target is None else target.mean.shape
            if expected != (rows, cols):
                raise CheckpointFormatError(f"unexpected tensor {name} {rows}x{cols}")
            if stat == "running_mean":
                target.mean = arr
            else:
                target.var = arr
        else:
            t = params.tensors.get(name)
            if t is None or t.shape != (rows, cols):
                raise CheckpointFormatError(f"unexpected tensor {name} {rows}x{cols}")
            t.data = arr
        seen.add(name)
    missing = {n for n, _ in _named_arrays(params)} - seen
    if missing:
        raise CheckpointFormatError(f"checkpoint missing tensors: {sorted(missing)}")
    if r.pos != len(blob):
        raise CheckpointFormatError(f"trailing bytes after checkpoint at byte {r.pos}")
    return spec, params

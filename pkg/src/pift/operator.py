"""Compact Fourier neural operator with backbone / embedding parameter subsets.

Lifting and projection form the embedding subset (re-drawn on transfer);
spectral and bypass weights form the backbone subset (copied on transfer).
Two fixed coordinate channels (x, y) are appended to every input before
lifting so the otherwise translation-equivariant layers can see where the
Dirichlet boundary is.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_FORMAT = 1
BACKBONE = "backbone"
EMBED = "embed"
COORD_CHANNELS = 2


class CheckpointError(Exception):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class OperatorConfig:
    in_channels: int = 1
    width: int = 32
    layers: int = 4
    modes: int = 12
    output_scale: float = 1.0   # fixed multiplier on the projection, not trained

    def __post_init__(self):
        if self.in_channels < 1 or self.width < 1 or self.layers < 1 or self.modes < 1:
            raise ValueError(f"invalid operator config {self}")
        if not (math.isfinite(self.output_scale) and self.output_scale > 0):
            raise ValueError("output_scale must be positive and finite")

    def check_grid(self, n: int) -> None:
        if self.modes > n // 2:
            raise ValueError(f"{self.modes} modes exceed n//2 = {n // 2} for an {n}x{n} grid")

    def backbone_compatible(self, other: "OperatorConfig") -> bool:
        return (self.width, self.layers, self.modes) == (other.width, other.layers, other.modes)

    def param_count(self) -> int:
        """Real scalars; each complex weight counts twice."""
        w, m = self.width, self.modes
        lifting = w * (self.in_channels + COORD_CHANNELS) + w
        layer = 2 * (2 * w * w * m * m) + w * w + w
        projection = w + 1
        return lifting + self.layers * layer + projection


class SpectralConv2d(nn.Module):
    """Mode-wise complex channel mixing on the lowest ``modes`` frequencies.

    Retained modes: rows ``[0, m)`` and ``[n-m, n)`` of the 2-D spectrum,
    columns ``[0, m)`` of the real-input half spectrum.
    """

    def __init__(self, width: int, modes: int):
        super().__init__()
        self.modes = modes
        shape = (width, width, modes, modes)
        self.w_pos = nn.Parameter(torch.zeros(shape, dtype=torch.complex128))
        self.w_neg = nn.Parameter(torch.zeros(shape, dtype=torch.complex128))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n1, n2 = x.shape[-2:]
        m = self.modes
        x_ft = torch.fft.rfft2(x)
        out = torch.zeros(x.shape[0], self.w_pos.shape[1], n1, n2 // 2 + 1,
                          dtype=torch.complex128, device=x.device)
        out[:, :, :m, :m] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, :m, :m], self.w_pos)
        out[:, :, -m:, :m] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, -m:, :m], self.w_neg)
        return torch.fft.irfft2(out, s=(n1, n2))


class Pointwise(nn.Module):
    """Per-node affine channel map."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(c_out, c_in, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bchw,oc->bohw", x, self.weight) + self.bias[None, :, None, None]


class FourierLayer(nn.Module):
    def __init__(self, width: int, modes: int):
        super().__init__()
        self.spectral = SpectralConv2d(width, modes)
        self.bypass = Pointwise(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.silu(self.spectral(x) + self.bypass(x))


class SpectralOperator(nn.Module):
    """``(B, in_channels, n, n)`` -> raw ``(B, n, n)`` output (boundary not yet imposed)."""

    def __init__(self, config: OperatorConfig, seed: Optional[int] = 0):
        super().__init__()
        self.config = config
        self.lifting = Pointwise(config.in_channels + COORD_CHANNELS, config.width)
        self.layers = nn.ModuleList(FourierLayer(config.width, config.modes) for _ in range(config.layers))
        self.projection = Pointwise(config.width, 1)
        if seed is not None:
            self.reset_parameters(seed)

    def subset_of(self, name: str) -> str:
        return EMBED if name.startswith(("lifting.", "projection.")) else BACKBONE

    def reset_parameters(self, seed: int, subset: Optional[str] = None) -> None:
        """Draw parameters (all, or one subset) from a generator seeded with ``seed``."""
        gen = torch.Generator().manual_seed(int(seed) % 2**63)
        w, m = self.config.width, self.config.modes
        with torch.no_grad():
            for name, p in self.named_parameters():
                if subset is not None and self.subset_of(name) != subset:
                    continue
                if p.is_complex():
                    re = torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1
                    im = torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1
                    p.copy_(torch.complex(re, im) / (w * m))
                else:
                    owner = self.get_submodule(name.rsplit(".", 1)[0])
                    bound = 1.0 / math.sqrt(owner.weight.shape[1])
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[-1] != x.shape[-2]:
            raise ValueError(f"expected (B, {self.config.in_channels}, n, n) input, got {tuple(x.shape)}")
        n = x.shape[-1]
        self.config.check_grid(n)
        t = torch.linspace(0.0, 1.0, n, dtype=torch.float64, device=x.device)
        gy, gx = torch.meshgrid(t, t, indexing="ij")
        coords = torch.stack([gx, gy]).expand(x.shape[0], 2, n, n)
        h = self.lifting(torch.cat([x, coords], dim=1))
        for layer in self.layers:
            h = layer(h)
        return self.projection(h)[:, 0] * self.config.output_scale

    # flat-vector views -------------------------------------------------------------------

    def index_map(self) -> list[dict[str, Any]]:
        out, offset = [], 0
        for name, p in self.named_parameters():
            length = p.numel() * (2 if p.is_complex() else 1)
            out.append({"name": name, "shape": list(p.shape), "complex": p.is_complex(),
                        "offset": offset, "length": length, "subset": self.subset_of(name)})
            offset += length
        return out

    def subset_mask(self, subset: str) -> np.ndarray:
        mask = np.zeros(self.config.param_count(), dtype=bool)
        for e in self.index_map():
            if e["subset"] == subset:
                mask[e["offset"]:e["offset"] + e["length"]] = True
        return mask

    def get_vector(self) -> np.ndarray:
        return _flatten([p.detach() for p in self.parameters()])

    def set_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.config.param_count(),):
            raise ShapeMismatchError(f"parameter vector has {vec.size} entries, "
                                     f"config needs {self.config.param_count()}")
        with torch.no_grad():
            for e, p in zip(self.index_map(), self.parameters()):
                chunk = torch.from_numpy(vec[e["offset"]:e["offset"] + e["length"]].copy())
                if p.is_complex():
                    chunk = torch.view_as_complex(chunk.reshape(*p.shape, 2))
                p.copy_(chunk.reshape(p.shape))

    def predict(self, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Raw outputs for an ``(N, C, n, n)`` array, without gradient tracking."""
        outs = []
        with torch.no_grad():
            for s in range(0, len(inputs), batch_size):
                outs.append(self(torch.from_numpy(np.ascontiguousarray(inputs[s:s + batch_size]))).numpy())
        return np.concatenate(outs) if outs else np.zeros((0,) + inputs.shape[2:])


def _flatten(tensors) -> np.ndarray:
    parts = [(torch.view_as_real(t) if t.is_complex() else t).reshape(-1) for t in tensors]
    return torch.cat(parts).numpy().astype(np.float64, copy=True) if parts else np.zeros(0)


def gradient(model: SpectralOperator, loss_closure: Callable[[SpectralOperator], torch.Tensor]) -> np.ndarray:
    """Reverse-mode gradient of ``loss_closure(model)``, flattened like ``get_vector``."""
    model.zero_grad(set_to_none=True)
    loss = loss_closure(model)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in model.parameters()]
    # torch stores conj(dL/dz*) convention for complex leaves; the real/imag parts of p.grad
    # are exactly dL/dRe and dL/dIm.
    return _flatten(grads)


# checkpoints ---------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: OperatorConfig
    vector: np.ndarray
    index_map: list[dict[str, Any]]
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SpectralOperator, **metadata) -> "Checkpoint":
        return cls(model.config, model.get_vector(), model.index_map(), dict(metadata))

    def to_model(self, config: Optional[OperatorConfig] = None) -> SpectralOperator:
        if config is not None and config != self.config:
            raise ShapeMismatchError(f"checkpoint config {self.config} does not match {config}")
        model = SpectralOperator(self.config, seed=None)
        model.set_vector(self.vector)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """One JSON header line, then the little-endian float64 parameter blob."""
    blob = np.ascontiguousarray(ckpt.vector, dtype="<f8").tobytes()
    header = {"format_version": CKPT_FORMAT, "config": asdict(ckpt.config), "index_map": ckpt.index_map,
              "metadata": ckpt.metadata, "param_count": int(ckpt.vector.size), "blob_bytes": len(blob)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)
    return path


def load_checkpoint(path: str | os.PathLike, config: Optional[OperatorConfig] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head, sep, blob = raw.partition(b"\n")
    try:
        header = json.loads(head)
        version = header["format_version"]
        cfg = OperatorConfig(**header["config"])
        count = int(header["param_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header in {path}: {exc}") from exc
    if not sep or version != CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    if len(blob) != count * 8 or int(header.get("blob_bytes", -1)) != len(blob):
        raise CheckpointError(f"checkpoint {path} is truncated: {len(blob)} of {count * 8} bytes")
    if count != cfg.param_count():
        raise ShapeMismatchError(f"checkpoint holds {count} parameters, its config implies {cfg.param_count()}")
    if config is not None and config != cfg:
        raise ShapeMismatchError(f"checkpoint config {cfg} does not match requested {config}")
    vec = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return Checkpoint(cfg, vec, header["index_map"], header.get("metadata", {}))


def transfer_init(pretrained: Checkpoint, new_config: OperatorConfig, seed: int) -> SpectralOperator:
    """Copy backbone weights from ``pretrained``; draw fresh lifting/projection."""
    if not pretrained.config.backbone_compatible(new_config):
        raise ShapeMismatchError(f"backbone of {pretrained.config} cannot seed {new_config}")
    model = SpectralOperator(new_config, seed=None)
    model.reset_parameters(seed, subset=EMBED)
    src = pretrained.to_model()
    with torch.no_grad():
        for (name, p), (_, q) in zip(model.named_parameters(), src.named_parameters()):
            if model.subset_of(name) == BACKBONE:
                p.copy_(q)
    return model

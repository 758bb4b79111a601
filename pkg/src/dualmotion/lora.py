"""Low-rank adapters, the injection policy for spatial/temporal sets, and adapter archives."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import ArchiveError, read_archive, write_archive

SPATIAL_CLASSES = ("spatial_self_attn", "spatial_ff")
TEMPORAL_CLASSES = ("temporal_self_attn", "temporal_ff")
KIND_CLASSES = {"spatial": SPATIAL_CLASSES, "temporal": TEMPORAL_CLASSES}
DEFAULT_RANK = 32


class LoRAAdapter(nn.Module):
    """Factors of ``delta W = B @ A`` for one linear layer with weight shape (d, k)."""

    def __init__(self, target_path: str, d: int, k: int, rank: int, scale: float = 1.0,
                 dropout: float = 0.0, dtype=torch.float32):
        super().__init__()
        if rank < 1 or rank > min(d, k):
            raise ValueError(f"rank {rank} invalid for a {d}x{k} weight (max {min(d, k)})")
        self.target_path = target_path
        self.rank = rank
        self.scale = float(scale)
        self.dropout = float(dropout)
        self.A = nn.Parameter(torch.zeros(rank, k, dtype=dtype))
        self.B = nn.Parameter(torch.zeros(d, rank, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> torch.Tensor:
        return self.B @ self.A


def init_adapter(target_path: str, d: int, k: int, r: int = DEFAULT_RANK, seed: int = 0,
                 dtype=torch.float32, dropout: float = 0.0) -> LoRAAdapter:
    """A ~ N(0, 1/r^2), B = 0, so the initial update is exactly zero."""
    adapter = LoRAAdapter(target_path, d, k, r, dropout=dropout, dtype=dtype)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        adapter.A.copy_(torch.randn(r, k, generator=g, dtype=torch.float64).to(dtype) / r)
    return adapter


def effective_weight(W0: torch.Tensor, adapter: LoRAAdapter, gamma: float = 1.0) -> torch.Tensor:
    d, k = W0.shape
    if adapter.shape != (d, k):
        raise ValueError(f"adapter shape {adapter.shape} does not match weight {tuple(W0.shape)}")
    return W0 + gamma * (adapter.B @ adapter.A)


class AdaptableLinear(nn.Linear):
    """``nn.Linear`` with an optional low-rank branch; the adapter is not a registered submodule."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__(in_features, out_features, bias=bias)
        object.__setattr__(self, "adapter", None)
        object.__setattr__(self, "adapter_scale", 0.0)

    def attach(self, adapter: LoRAAdapter | None, scale: float = 0.0) -> None:
        object.__setattr__(self, "adapter", adapter)
        object.__setattr__(self, "adapter_scale", float(scale))

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        a = self.adapter
        if a is None or self.adapter_scale == 0.0:
            return out
        h = F.dropout(x, a.dropout, self.training) if a.dropout > 0 else x
        return out + self.adapter_scale * F.linear(F.linear(h, a.A), a.B)


@dataclass
class AdapterSet:
    kind: str
    adapters: dict[str, LoRAAdapter]
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KIND_CLASSES:
            raise ValueError(f"adapter set kind must be spatial or temporal, got {self.kind!r}")

    def parameters(self) -> Iterator[nn.Parameter]:
        for path in sorted(self.adapters):
            yield self.adapters[path].A
            yield self.adapters[path].B

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def state(self) -> dict[str, torch.Tensor]:
        out = {}
        for path, a in self.adapters.items():
            out[f"{path}.A"] = a.A.detach().clone()
            out[f"{path}.B"] = a.B.detach().clone()
        return out

    def set_dropout(self, p: float) -> None:
        for a in self.adapters.values():
            a.dropout = float(p)


def make_adapter_set(model, kind: str, rank: int = DEFAULT_RANK, seed: int = 0,
                     source_id: str = "", dropout: float = 0.0) -> AdapterSet:
    """Zero-initialized adapters on every layer the kind is allowed to touch."""
    if kind not in KIND_CLASSES:
        raise ValueError(f"unknown adapter kind {kind!r}")
    layers = model.enumerate_layers()
    dtype = next(model.parameters()).dtype
    paths = sorted(p for cls in KIND_CLASSES[kind] for p in layers[cls])
    adapters = {}
    for i, path in enumerate(paths):
        lin = model.get_layer(path)
        adapters[path] = init_adapter(path, lin.out_features, lin.in_features, rank,
                                      seed=seed * 100_003 + i, dtype=dtype, dropout=dropout)
    return AdapterSet(kind, adapters, source_id)


def check_set(model, aset: AdapterSet) -> None:
    classes = model.layer_classes()
    missing = sorted(p for p in aset.adapters if p not in classes)
    if missing:
        raise KeyError(f"target paths absent from model: {missing}")
    for path in aset.adapters:
        cls = classes[path]
        if cls == "spatial_cross_attn":
            raise ValueError(f"adapters may not target cross-attention: {path}")
        if cls not in KIND_CLASSES[aset.kind]:
            raise ValueError(f"{aset.kind} adapter set may not target {cls} layer {path}")


class Injection:
    """Live attachment of adapter sets to a model; ``eject`` restores the model exactly."""

    def __init__(self, model, sets: list[AdapterSet], trainable: Iterable[AdapterSet] = (),
                 scales: dict[str, float] | None = None):
        self.model = model
        self.sets = list(sets)
        trainable = list(trainable)
        scales = scales or {}
        for s in trainable:
            if not any(s is t for t in self.sets):
                raise ValueError("trainable set is not among the injected sets")
        seen: dict[str, str] = {}
        for s in self.sets:
            check_set(model, s)
            for path in s.adapters:
                if path in seen or model.get_layer(path).adapter is not None:
                    raise ValueError(f"layer {path} already carries an adapter")
                seen[path] = s.kind
        self._grad_flags = [(p, p.requires_grad) for p in model.parameters()]
        model.requires_grad_(False)
        for s in self.sets:
            train = any(s is t for t in trainable)
            for path, a in s.adapters.items():
                scale = scales.get(s.kind, a.scale)
                model.get_layer(path).attach(a, scale)
                a.A.requires_grad_(train)
                a.B.requires_grad_(train)
        self.touched = sorted(seen)
        self.active = True

    def eject(self) -> None:
        if not self.active:
            return
        for path in self.touched:
            self.model.get_layer(path).attach(None)
        for p, flag in self._grad_flags:
            p.requires_grad_(flag)
        self.active = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.eject()


def inject(model, sets: list[AdapterSet], trainable: Iterable[AdapterSet] = (),
           scales: dict[str, float] | None = None) -> Injection:
    return Injection(model, sets, trainable, scales)


def save_adapter_set(aset: AdapterSet, path: str | Path) -> Path:
    header = {
        "kind": aset.kind,
        "source_id": aset.source_id,
        "adapters": {
            p: {"rank": a.rank, "scale": a.scale, "shape": list(a.shape)}
            for p, a in sorted(aset.adapters.items())
        },
        "meta": aset.meta,
    }
    tensors = {}
    for p, a in aset.adapters.items():
        tensors[f"{p}.A"] = a.A.detach().cpu().numpy()
        tensors[f"{p}.B"] = a.B.detach().cpu().numpy()
    return write_archive(path, header, tensors)


def load_adapter_set(path: str | Path, model=None) -> AdapterSet:
    """Read an adapter archive; with ``model`` given, every target path must exist in it."""
    header, tensors = read_archive(path)
    if header.get("kind") not in KIND_CLASSES:
        raise ArchiveError(f"{path}: not an adapter archive (kind={header.get('kind')!r})")
    adapters = {}
    for p, info in header["adapters"].items():
        try:
            A, B = tensors[f"{p}.A"], tensors[f"{p}.B"]
        except KeyError as exc:
            raise ArchiveError(f"{path}: missing factor {exc}") from exc
        d, k = info["shape"]
        a = LoRAAdapter(p, d, k, info["rank"], scale=info["scale"])
        with torch.no_grad():
            a.A.copy_(torch.from_numpy(A))
            a.B.copy_(torch.from_numpy(B))
        adapters[p] = a
    aset = AdapterSet(header["kind"], adapters, header.get("source_id", ""), header.get("meta", {}))
    if model is not None:
        missing = sorted(p for p in adapters if p not in model.layer_classes())
        if missing:
            raise KeyError(f"adapter archive {path} targets paths absent from model: {missing}")
    return aset


def delta_rank(adapter: LoRAAdapter, tol: float = 1e-6) -> int:
    s = np.linalg.svd(adapter.delta().detach().double().numpy(), compute_uv=False)
    return int((s > tol * max(s.max(initial=0.0), 1.0)).sum())

"""Versioned checkpoint container.

Layout: a UTF-8 text header (format line, config echo, category list, region
count, selection metadata, parameter manifest), a ``payload`` marker, then
the raw little-endian float64 payloads concatenated in manifest order.
Save(load(file)) is byte-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig, format_config, parse_config_text
from .errors import ConfigError, DataError
from .features import NormStats
from .model import ModelParams, named_parameters, init_model
from .autodiff import Tensor

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = "anomcast-checkpoint"
FORMAT_VERSION = 1

_STATS_PARAMS = ("norm.mu", "norm.sigma", "norm.vmin", "norm.vmax")


@dataclass
class Checkpoint:
    model: ModelParams
    run_cfg: RunConfig
    stats: NormStats
    n_regions: int
    categories: tuple[str, ...]
    best_epoch: int
    best_val_mae: float


def _manifest(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(name, t.data) for name, t in named_parameters(ckpt.model)]
    entries += [
        ("norm.mu", ckpt.stats.mu),
        ("norm.sigma", ckpt.stats.sigma),
        ("norm.vmin", ckpt.stats.vmin),
        ("norm.vmax", ckpt.stats.vmax),
    ]
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = _manifest(ckpt)
    header = [f"{MAGIC} {FORMAT_VERSION}"]
    header += [f"config {line}" for line in format_config(ckpt.run_cfg).strip().splitlines()]
    header.append(f"categories {','.join(ckpt.categories)}")
    header.append(f"n_regions {ckpt.n_regions}")
    header.append(f"best_epoch {ckpt.best_epoch}")
    header.append(f"best_val_mae {ckpt.best_val_mae!r}")
    for name, arr in entries:
        dims = " ".join(str(d) for d in arr.shape)
        header.append(f"param {name} {dims}".rstrip())
    total = sum(arr.size for _, arr in entries)
    header.append(f"payload {total}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        marker = blob.index(b"\npayload ")
        newline = blob.index(b"\n", marker + 1)
    except ValueError:
        raise DataError(f"{path}: not a checkpoint (missing payload marker)") from None
    header_lines = blob[:newline].decode("utf-8").splitlines()
    payload = blob[newline + 1 :]

    first = header_lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic line {header_lines[0]!r})")
    if int(first[1]) != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {first[1]}")

    config_lines: list[str] = []
    manifest: list[tuple[str, tuple[int, ...]]] = []
    categories: tuple[str, ...] = ()
    n_regions = -1
    best_epoch = -1
    best_val_mae = float("nan")
    declared = -1
    for line in header_lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config_lines.append(rest)
        elif kind == "categories":
            categories = tuple(s for s in rest.split(",") if s)
        elif kind == "n_regions":
            n_regions = int(rest)
        elif kind == "best_epoch":
            best_epoch = int(rest)
        elif kind == "best_val_mae":
            best_val_mae = float(rest)
        elif kind == "param":
            parts = rest.split()
            manifest.append((parts[0], tuple(int(d) for d in parts[1:])))
        elif kind == "payload":
            declared = int(rest)
        else:
            raise DataError(f"{path}: unknown header line {line!r}")
    if n_regions < 1 or not categories:
        raise DataError(f"{path}: header missing n_regions or categories")

    run_cfg = parse_config_text("\n".join(config_lines), source=f"{path}#config")
    total = sum(int(np.prod(shape)) if shape else 1 for _, shape in manifest)
    if declared != total:
        raise DataError(f"{path}: payload count {declared} != manifest total {total}")
    expected_bytes = total * 8
    if len(payload) != expected_bytes:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected_bytes}")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        offset += count

    model = init_model(
        d=run_cfg.hidden_size,
        n_heads=run_cfg.n_heads,
        n_layers=run_cfg.n_layers,
        n_categories=len(categories),
        rng=np.random.default_rng(0),
        ablation=run_cfg.ablation,
        dsa_self_loop=run_cfg.dsa_self_loop,
        dsa_activation=run_cfg.dsa_activation,
    )
    expected_names = {name for name, _ in named_parameters(model)}
    stored_names = {name for name, _ in manifest if not name.startswith("norm.")}
    if expected_names != stored_names:
        missing = expected_names - stored_names
        extra = stored_names - expected_names
        raise ConfigError(
            f"{path}: parameter manifest mismatch (missing {sorted(missing)}, extra {sorted(extra)})"
        )
    from .model import set_parameter

    for name in sorted(expected_names):
        arr = arrays[name]
        param = dict(named_parameters(model))[name]
        if arr.shape != param.data.shape:
            raise ConfigError(f"{path}: {name} shape {arr.shape} != expected {param.data.shape}")
        set_parameter(model, name, Tensor(arr, requires_grad=True))

    for key in _STATS_PARAMS:
        if key not in arrays:
            raise DataError(f"{path}: missing normalization entry {key}")
    stats = NormStats(
        kind=run_cfg.norm_kind,
        mu=arrays["norm.mu"],
        sigma=arrays["norm.sigma"],
        vmin=arrays["norm.vmin"],
        vmax=arrays["norm.vmax"],
    )
    return Checkpoint(
        model=model,
        run_cfg=run_cfg,
        stats=stats,
        n_regions=n_regions,
        categories=categories,
        best_epoch=best_epoch,
        best_val_mae=best_val_mae,
    )

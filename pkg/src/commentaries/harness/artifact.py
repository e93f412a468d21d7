"""Versioned text serialisation of a learned commentary.

Layout::

    COMMENTARY v1
    family = augmentation
    config_hash = ...
    ...
    [tensor grid 4x4]
    0.0 0.0 0.0 0.0
    ...

Floats are written with ``repr`` so they parse back to the same bits, which
makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..commentary import Augmentation, AttentionMask, AuxTarget, ExampleWeight, FreeParameters
from ..models import MlpSpec
from ..params import ParamVector

FORMAT_VERSION = 1
HEADER = f"COMMENTARY v{FORMAT_VERSION}"


class ArtifactError(ValueError):
    pass


class ArtifactVersionError(ArtifactError):
    pass


class ArtifactIncompatibleError(ArtifactError):
    pass


@dataclass(frozen=True)
class CommentaryArtifact:
    commentary: object
    config_hash: str = ""
    meta_seed: int = 0
    timestamp: str = "1970-01-01T00:00:00Z"
    extra: dict = field(default_factory=dict)

    @property
    def family(self) -> str:
        return self.commentary.family

    def phi_digest(self) -> str:
        return params_digest(self.commentary.params)


def params_digest(params: ParamVector) -> str:
    h = hashlib.sha256()
    for name, value in zip(params.names, params.values()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype=np.float64).tobytes())
    return h.hexdigest()


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _spec_meta(prefix: str, spec: MlpSpec) -> list[tuple[str, str]]:
    grid = ",".join(str(g) for g in spec.grid) if spec.grid else "none"
    return [
        (f"{prefix}.widths", ",".join(str(w) for w in spec.widths)),
        (f"{prefix}.activation", spec.activation),
        (f"{prefix}.head", spec.head),
        (f"{prefix}.grid", grid),
    ]


def _spec_from(meta: dict, prefix: str) -> MlpSpec:
    grid = meta[f"{prefix}.grid"]
    return MlpSpec(
        tuple(int(w) for w in meta[f"{prefix}.widths"].split(",")),
        meta[f"{prefix}.activation"],
        meta[f"{prefix}.head"],
        None if grid == "none" else tuple(int(g) for g in grid.split(",")),
    )


def _family_meta(com) -> list[tuple[str, str]]:
    if isinstance(com, ExampleWeight):
        const = "none" if com.constant is None else _fmt_float(com.constant)
        return _spec_meta("teacher", com.teacher) + [("constant", const)]
    if isinstance(com, Augmentation):
        return [("num_classes", str(com.num_classes))]
    if isinstance(com, AttentionMask):
        return _spec_meta("net", com.net) + [
            ("sigma", _fmt_float(com.sigma)),
            ("height", str(com.height)),
            ("width", str(com.width)),
            ("channels", str(com.channels)),
        ]
    if isinstance(com, AuxTarget):
        return _spec_meta("net", com.net) + [
            ("target_dim", str(com.target_dim)),
            ("aux_weight", _fmt_float(com.aux_weight)),
        ]
    if isinstance(com, FreeParameters):
        return []
    raise ArtifactError(f"cannot serialise {type(com).__name__}")


def _build(family: str, meta: dict, params: ParamVector):
    if family == "example_weight":
        const = meta["constant"]
        return ExampleWeight(_spec_from(meta, "teacher"), params, None if const == "none" else float(const))
    if family == "augmentation":
        return Augmentation(params)
    if family == "attention_mask":
        return AttentionMask(_spec_from(meta, "net"), params, float(meta["sigma"]), int(meta["height"]),
                             int(meta["width"]), int(meta["channels"]))
    if family == "aux_target":
        return AuxTarget(_spec_from(meta, "net"), params, int(meta["target_dim"]), float(meta["aux_weight"]))
    if family == "free":
        return FreeParameters(params)
    raise ArtifactError(f"unknown commentary family {family!r}")


def dumps(artifact: CommentaryArtifact) -> str:
    com = artifact.commentary
    lines = [HEADER]
    meta = [
        ("family", com.family),
        ("config_hash", artifact.config_hash or "none"),
        ("meta_seed", str(artifact.meta_seed)),
        ("timestamp", artifact.timestamp),
    ]
    meta += [(f"extra.{k}", str(v)) for k, v in sorted(artifact.extra.items())]
    meta += _family_meta(com)
    lines += [f"{k} = {v}" for k, v in meta]
    for name, value in zip(com.params.names, com.params.values()):
        shape = "x".join(str(s) for s in value.shape) or "scalar"
        lines.append(f"[tensor {name} {shape}]")
        rows = value.reshape(-1, value.shape[-1]) if value.ndim >= 1 else value.reshape(1, 1)
        for row in rows:
            lines.append(" ".join(_fmt_float(v) for v in row))
    return "\n".join(lines) + "\n"


def loads(text: str) -> CommentaryArtifact:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("COMMENTARY "):
        raise ArtifactError("not a commentary artifact (missing header)")
    if lines[0] != HEADER:
        raise ArtifactVersionError(f"unsupported artifact version {lines[0]!r}; this build reads {HEADER!r}")
    meta: dict[str, str] = {}
    pos = 1
    while pos < len(lines) and not lines[pos].startswith("[tensor "):
        if lines[pos].strip():
            if " = " not in lines[pos]:
                raise ArtifactError(f"line {pos + 1}: malformed metadata {lines[pos]!r}")
            k, v = lines[pos].split(" = ", 1)
            meta[k] = v
        pos += 1
    names, arrays = [], []
    while pos < len(lines):
        head = lines[pos]
        if not (head.startswith("[tensor ") and head.endswith("]")):
            raise ArtifactError(f"line {pos + 1}: expected a tensor section")
        _, name, shape_s = head[1:-1].split(" ")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        nrows = int(np.prod(shape[:-1])) if len(shape) >= 1 else 1
        body = lines[pos + 1: pos + 1 + nrows]
        if len(body) != nrows:
            raise ArtifactError(f"tensor {name}: truncated")
        try:
            flat = np.array([float(v) for row in body for v in row.split(" ")], dtype=np.float64)
        except ValueError as exc:
            raise ArtifactError(f"tensor {name}: {exc}") from None
        if flat.size != max(1, int(np.prod(shape))):
            raise ArtifactError(f"tensor {name}: expected {shape}, got {flat.size} values")
        names.append(name)
        arrays.append(flat.reshape(shape))
        pos += 1 + nrows
    try:
        family = meta["family"]
        params = ParamVector.from_arrays(names, arrays)
        com = _build(family, meta, params)
        extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
        return CommentaryArtifact(
            com,
            "" if meta["config_hash"] == "none" else meta["config_hash"],
            int(meta["meta_seed"]),
            meta["timestamp"],
            extra,
        )
    except KeyError as exc:
        raise ArtifactError(f"missing metadata key {exc}") from None


def save_artifact(artifact: CommentaryArtifact, path) -> Path:
    path = Path(path)
    path.write_text(dumps(artifact))
    return path


def load_artifact(path) -> CommentaryArtifact:
    return loads(Path(path).read_text())

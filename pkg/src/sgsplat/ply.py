"""Binary little-endian PLY checkpoints.

Two vertex layouts are supported:

* ``reference``: the 3D-GS layout ``x y z f_dc_0..2 f_rest_0..44 opacity
  scale_0..2 rot_0..3`` (59 float32 per Gaussian). ``f_rest`` is channel-major,
  ``f_rest_{c*15 + k-1}`` holds channel ``c`` of SH coefficient ``k``.
* ``sg``: the spherical-Gaussian layout. ``f_rest_*`` is replaced by
  ``sg_alpha_{i}_{c}`` / ``sg_lambda_{i}`` (log sharpness) plus ``sg_mu_0..2``
  for the single-lobe model, or ``sg_frame_0..2`` (per-Gaussian rotation vector of
  the lobe frame relative to the shared axes) for the orthogonal models. The mixed
  model adds ``sh2_{c*8 + k-1}`` for SH bands 1-2. For ``sg1``/``sg3`` the
  ``f_dc_*`` columns hold the raw diffuse color.

Scene-wide values (color model, shared axes, background) travel in header
comments and optionally in a ``<file>.meta`` key=value sidecar.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np

from . import color_model as cm
from .color_model import ModelKind
from .errors import PLYFormatError, PLYTruncatedError
from .scene import Scene

REFERENCE = "reference"
SG_EXTENDED = "sg"
LAYOUTS = (REFERENCE, SG_EXTENDED)

_COMMENT_TAG = "sgsplat"
# Normals are written by the reference trainer but carry no information.
_IGNORED = {"nx", "ny", "nz"}
_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4",
}


def _head(names: list[str]) -> list[str]:
    return ["x", "y", "z", *names]


def _tail() -> list[str]:
    return ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _sg_names(lobes: int) -> list[str]:
    names = [f"sg_alpha_{i}_{c}" for i in range(lobes) for c in range(3)]
    return names + [f"sg_lambda_{i}" for i in range(lobes)]


def field_names(kind: ModelKind | str, layout: str) -> list[str]:
    """Ordered vertex properties for a color model in a layout."""
    kind = ModelKind(kind)
    dc = [f"f_dc_{c}" for c in range(3)]
    if layout == REFERENCE:
        if kind is not ModelKind.SH:
            raise PLYFormatError(f"the reference layout stores SH colors only, not {kind.value!r}")
        return _head(dc + [f"f_rest_{i}" for i in range(45)]) + _tail()
    if layout != SG_EXTENDED:
        raise PLYFormatError(f"unknown layout {layout!r}")
    if kind is ModelKind.SH:
        raise PLYFormatError("SH-only scenes are saved in the reference layout")
    if kind is ModelKind.SG1:
        return _head(dc + _sg_names(1) + ["sg_mu_0", "sg_mu_1", "sg_mu_2"]) + _tail()
    frame = ["sg_frame_0", "sg_frame_1", "sg_frame_2"]
    sh2 = [f"sh2_{k}" for k in range(24)] if kind is ModelKind.MIXED else []
    return _head(dc + sh2 + _sg_names(3) + frame) + _tail()


def floats_per_gaussian(kind: ModelKind | str, layout: Optional[str] = None) -> int:
    kind = ModelKind(kind)
    if layout is None:
        layout = REFERENCE if kind is ModelKind.SH else SG_EXTENDED
    return len(field_names(kind, layout))


def bytes_per_gaussian(kind: ModelKind | str, layout: Optional[str] = None) -> int:
    return 4 * floats_per_gaussian(kind, layout)


def default_layout(kind: ModelKind | str) -> str:
    return REFERENCE if ModelKind(kind) is ModelKind.SH else SG_EXTENDED


# ---------------------------------------------------------------------------
# scene <-> column table
# ---------------------------------------------------------------------------


def _rest_columns(sh: np.ndarray, bands: int) -> np.ndarray:
    """(N, K, 3) coefficients 1..bands-1 -> channel-major (N, 3*(bands-1)) columns."""
    return np.transpose(sh[:, 1:bands, :], (0, 2, 1)).reshape(len(sh), -1)


def _scene_columns(scene: Scene, layout: str) -> tuple[list[str], np.ndarray]:
    names = field_names(scene.kind, layout)
    n = len(scene)
    cols: dict[str, np.ndarray] = {}
    for i, axis in enumerate("xyz"):
        cols[axis] = scene.means[:, i]
    for i in range(3):
        cols[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = scene.quats[:, i]
    cols["opacity"] = scene.opacity_logits

    if scene.kind is ModelKind.SH:
        sh = np.zeros((n, 16, 3))
        sh[:, : scene.sh.shape[1]] = scene.sh
        dc, rest = sh[:, 0], _rest_columns(sh, 16)
        for i in range(45):
            cols[f"f_rest_{i}"] = rest[:, i]
    elif scene.kind is ModelKind.MIXED:
        dc, rest = scene.sh[:, 0], _rest_columns(scene.sh, 9)
        for i in range(24):
            cols[f"sh2_{i}"] = rest[:, i]
    else:
        dc = scene.diffuse
    for c in range(3):
        cols[f"f_dc_{c}"] = dc[:, c]

    if scene.kind is not ModelKind.SH:
        lobes = scene.sg_alpha.shape[1]
        for i in range(lobes):
            cols[f"sg_lambda_{i}"] = scene.sg_log_lambda[:, i]
            for c in range(3):
                cols[f"sg_alpha_{i}_{c}"] = scene.sg_alpha[:, i, c]
        extra = scene.sg_mu if scene.kind is ModelKind.SG1 else scene.sg_frame
        prefix = "sg_mu" if scene.kind is ModelKind.SG1 else "sg_frame"
        for i in range(3):
            cols[f"{prefix}_{i}"] = extra[:, i]
    table = np.stack([cols[name] for name in names], axis=1) if n else np.zeros((0, len(names)))
    return names, table


def _columns_scene(kind: ModelKind, cols: dict[str, np.ndarray], meta: dict) -> Scene:
    n = len(cols["x"])
    kw = dict(
        kind=kind,
        means=np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        log_scales=np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1),
        quats=np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1),
        opacity_logits=cols["opacity"],
        background=meta.get("background", np.zeros(3)),
    )
    dc = np.stack([cols[f"f_dc_{c}"] for c in range(3)], axis=1)

    def sh_from(rest_prefix: str, bands: int) -> np.ndarray:
        sh = np.empty((n, bands, 3))
        sh[:, 0] = dc
        rest = np.stack([cols[f"{rest_prefix}_{i}"] for i in range(3 * (bands - 1))], axis=1)
        sh[:, 1:] = np.transpose(rest.reshape(n, 3, bands - 1), (0, 2, 1))
        return sh

    if kind is ModelKind.SH:
        sh = sh_from("f_rest", 16)
        degree = int(meta.get("sh_degree", 3))
        k = cm.num_sh_coeffs(degree)
        if degree < 3 and np.any(sh[:, k:]):
            degree, k = 3, 16
        kw["sh"] = sh[:, :k]
    elif kind is ModelKind.MIXED:
        kw["sh"] = sh_from("sh2", 9)
    else:
        kw["diffuse"] = dc
    if kind is not ModelKind.SH:
        lobes = 1 if kind is ModelKind.SG1 else 3
        kw["sg_alpha"] = np.stack(
            [np.stack([cols[f"sg_alpha_{i}_{c}"] for c in range(3)], axis=1) for i in range(lobes)], axis=1
        )
        kw["sg_log_lambda"] = np.stack([cols[f"sg_lambda_{i}"] for i in range(lobes)], axis=1)
    if kind is ModelKind.SG1:
        kw["sg_mu"] = np.stack([cols[f"sg_mu_{i}"] for i in range(3)], axis=1)
    if kind in (ModelKind.SG3, ModelKind.MIXED):
        kw["sg_frame"] = np.stack([cols[f"sg_frame_{i}"] for i in range(3)], axis=1)
        if "shared_axes" in meta:
            kw["shared_axes"] = meta["shared_axes"]
    return Scene(**kw)


# ---------------------------------------------------------------------------
# metadata (header comments and sidecar)
# ---------------------------------------------------------------------------


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def _scene_meta(scene: Scene) -> dict[str, str]:
    meta = {"color_model": scene.kind.value, "background": _format_floats(scene.background)}
    if scene.shared_axes is not None:
        meta["shared_axes"] = _format_floats(scene.shared_axes)
    if scene.kind is ModelKind.SH:
        meta["sh_degree"] = str(scene.sh_degree)
    return meta


def _parse_meta(items: dict[str, str]) -> dict:
    out: dict = {}
    for key, value in items.items():
        try:
            if key == "color_model":
                out[key] = ModelKind(value.strip())
            elif key == "background":
                out[key] = np.array([float(v) for v in value.split()]).reshape(3)
            elif key == "shared_axes":
                out[key] = np.array([float(v) for v in value.split()]).reshape(3, 3)
            elif key == "sh_degree":
                out[key] = int(value)
        except ValueError as exc:
            raise PLYFormatError(f"bad metadata value for {key!r}: {value!r}") from exc
    return out


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_sidecar(scene: Scene, path) -> Path:
    side = sidecar_path(path)
    side.write_text("".join(f"{k}={v}\n" for k, v in _scene_meta(scene).items()))
    return side


def read_sidecar(path) -> dict:
    side = sidecar_path(path)
    items = {}
    for line in side.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise PLYFormatError(f"{side}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    return _parse_meta(items)


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------


def save_ply(scene: Scene, path, layout: Optional[str] = None, sidecar: bool = False) -> int:
    """Write ``scene``; returns the number of bytes written."""
    layout = default_layout(scene.kind) if layout is None else layout
    names, table = _scene_columns(scene, layout)
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {_COMMENT_TAG} {k}={v}" for k, v in _scene_meta(scene).items()]
    lines.append(f"element vertex {len(scene)}")
    lines += [f"property float {name}" for name in names]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    body = np.ascontiguousarray(table, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
    if sidecar:
        write_sidecar(scene, path)
    return len(header) + len(body)


def _read_header(f) -> tuple[str, int, list[tuple[str, str]], dict[str, str]]:
    magic = f.readline()
    if magic.strip() != b"ply":
        raise PLYFormatError("not a PLY file (missing 'ply' magic)")
    fmt, count, props, comments = None, None, [], {}
    element = None
    while True:
        raw = f.readline()
        if not raw:
            raise PLYTruncatedError("PLY header ended before end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment":
            if len(parts) >= 3 and parts[1] == _COMMENT_TAG:
                key, _, value = " ".join(parts[2:]).partition("=")
                comments[key] = value
        elif parts[0] == "element":
            element = parts[1]
            if element != "vertex":
                raise PLYFormatError(f"unsupported PLY element {element!r}")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] == "list":
                raise PLYFormatError(f"list property {parts[-1]!r} is not supported")
            if parts[1] not in _PLY_TYPES:
                raise PLYFormatError(f"unsupported property type {parts[1]!r} for {parts[2]!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "obj_info":
            continue
        else:
            raise PLYFormatError(f"unexpected header line {line!r}")
    if fmt not in ("binary_little_endian", "ascii"):
        raise PLYFormatError(f"unsupported PLY format {fmt!r}; expected binary_little_endian or ascii")
    if count is None:
        raise PLYFormatError("PLY file declares no vertex element")
    return fmt, count, props, comments


def _infer_kind(names: set[str]) -> tuple[ModelKind, str]:
    if any(n.startswith("f_rest_") for n in names):
        return ModelKind.SH, REFERENCE
    if "sg_mu_0" in names:
        return ModelKind.SG1, SG_EXTENDED
    if "sh2_0" in names:
        return ModelKind.MIXED, SG_EXTENDED
    if "sg_alpha_0_0" in names:
        return ModelKind.SG3, SG_EXTENDED
    return ModelKind.SH, REFERENCE


def load_ply(path, layout: Optional[str] = None) -> Scene:
    """Read a scene written by :func:`save_ply` or by the reference 3D-GS trainer."""
    path = Path(path)
    with open(path, "rb") as f:
        fmt, count, props, comments = _read_header(f)
        names = [p[0] for p in props]
        meta = _parse_meta(comments)
        if sidecar_path(path).exists():
            meta = {**meta, **read_sidecar(path)}
        kind, found_layout = _infer_kind(set(names))
        if "color_model" in meta and meta["color_model"] is not kind:
            raise PLYFormatError(
                f"header declares color model {meta['color_model'].value!r} but fields describe {kind.value!r}"
            )
        if layout is not None and layout != found_layout:
            raise PLYFormatError(f"{path}: expected {layout!r} layout, found {found_layout!r}")
        expected = field_names(kind, found_layout)
        unknown = [n for n in names if n not in expected and n not in _IGNORED]
        if unknown:
            raise PLYFormatError(f"{path}: unknown PLY properties: {', '.join(unknown)}")
        missing = [n for n in expected if n not in names]
        if missing:
            raise PLYFormatError(f"{path}: missing PLY properties: {', '.join(missing)}")

        dtype = np.dtype([(n, t) for n, t in props])
        if fmt == "binary_little_endian":
            data = f.read(dtype.itemsize * count)
            if len(data) < dtype.itemsize * count:
                raise PLYTruncatedError(
                    f"{path}: body has {len(data)} bytes, header declares {dtype.itemsize * count}"
                )
            rows = np.frombuffer(data, dtype=dtype, count=count)
            cols = {n: rows[n].astype(np.float64) for n in expected}
        else:
            text = f.read().split()
            need = count * len(props)
            if len(text) < need:
                raise PLYTruncatedError(f"{path}: ASCII body has {len(text)} values, expected {need}")
            values = np.array(text[:need], dtype=np.float64).reshape(count, len(props))
            cols = {n: values[:, names.index(n)] for n in expected}
    return _columns_scene(kind, cols, meta)


def file_size(path) -> int:
    return os.path.getsize(path)

"""Text formats: XYZ and PLY clouds, OBJ meshes, flat configs, CSV.

All writers go through an atomic temp-file rename and print floats with
%.9g, which round-trips any float32 exactly.
"""

import csv
import io
import os
import tempfile

import numpy as np

from .geometry import Mesh, PointCloud

FLOAT_FMT = "%.9g"


class FormatError(ValueError):
    """Malformed file content; the message carries the line number."""


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_row(values) -> str:
    return " ".join(FLOAT_FMT % v for v in values)


def write_xyz(path, pc: PointCloud) -> None:
    lines = [_fmt_row(p) for p in pc.points]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_xyz(path) -> PointCloud:
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise FormatError(
                    f"{path}:{lineno}: expected 3 coordinates, "
                    f"got {len(parts)}")
            try:
                pts.append([float(x) for x in parts])
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from None
    if not pts:
        raise FormatError(f"{path}: no points")
    return PointCloud(np.asarray(pts, dtype=np.float64))


def colormap(d) -> np.ndarray:
    """Blue(0) through green(0.5) to red(1) as uint8 RGB rows.

    Each channel is linearly interpolated, scaled to 255, rounded to the
    nearest integer and clipped, so stored colors are quantized to 8 bits.
    """
    t = np.clip(np.asarray(d, dtype=np.float64), 0.0, 1.0)
    low = t <= 0.5
    r = np.where(low, 0.0, (t - 0.5) * 2.0)
    g = np.where(low, t * 2.0, 1.0 - (t - 0.5) * 2.0)
    b = np.where(low, 1.0 - t * 2.0, 0.0)
    rgb = np.stack([r, g, b], axis=-1) * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_ply(path, pc: PointCloud, d=None, color: bool = False) -> None:
    """ASCII PLY with optional per-vertex distinctiveness and RGB."""
    values = None
    if d is not None:
        values = np.asarray(d.values if hasattr(d, "values") else d,
                            dtype=np.float64)
        if values.shape != (pc.n,):
            raise ValueError("field length must match the cloud")
    if color and values is None:
        raise ValueError("coloring needs a distinctiveness field")
    head = ["ply", "format ascii 1.0", f"element vertex {pc.n}",
            "property float x", "property float y", "property float z"]
    if values is not None:
        head.append("property float distinctiveness")
    if color:
        head += ["property uchar red", "property uchar green",
                 "property uchar blue"]
    head.append("end_header")
    rgb = colormap(values) if color else None
    body = []
    for i in range(pc.n):
        row = _fmt_row(pc.points[i])
        if values is not None:
            row += " " + FLOAT_FMT % values[i]
        if color:
            row += " %d %d %d" % tuple(rgb[i])
        body.append(row)
    atomic_write_text(path, "\n".join(head + body) + "\n")


def read_ply(path):
    """Returns (PointCloud, distinctiveness array or None).

    Understands ASCII PLY with scalar float/uchar vertex properties;
    properties other than x/y/z/distinctiveness are read and dropped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: not a PLY file")
    n_vertex = None
    props = []
    in_vertex = False
    body_at = None
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                raise FormatError(f"{path}:{lineno}: only ascii 1.0 "
                                  "is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] not in ("float", "uchar"):
                raise FormatError(f"{path}:{lineno}: unsupported property "
                                  f"type {tok[1]!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_at = lineno
            break
    if body_at is None or n_vertex is None:
        raise FormatError(f"{path}: header missing end_header or "
                          "vertex element")
    for name in ("x", "y", "z"):
        if name not in props:
            raise FormatError(f"{path}: vertex element lacks property "
                              f"{name!r}")
    body = [ln for ln in lines[body_at:] if ln.strip()]
    if len(body) != n_vertex:
        raise FormatError(
            f"{path}: element vertex declares {n_vertex} rows but the "
            f"body holds {len(body)}")
    table = np.empty((n_vertex, len(props)))
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != len(props):
            raise FormatError(
                f"{path}:{body_at + 1 + i}: expected {len(props)} values, "
                f"got {len(parts)}")
        try:
            table[i] = [float(x) for x in parts]
        except ValueError as err:
            raise FormatError(f"{path}:{body_at + 1 + i}: {err}") from None
    cols = {name: table[:, k] for k, name in enumerate(props)}
    pc = PointCloud(np.stack([cols["x"], cols["y"], cols["z"]], axis=1))
    dist = cols.get("distinctiveness")
    return pc, dist


def read_obj(path) -> Mesh:
    """ASCII OBJ ingestion: v and triangular f records only."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 "
                                      "coordinates")
                try:
                    verts.append([float(x) for x in tok[1:4]])
                except ValueError as err:
                    raise FormatError(f"{path}:{lineno}: {err}") from None
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise FormatError(f"{path}:{lineno}: only triangular "
                                      "faces are supported")
                idx = []
                for part in tok[1:]:
                    head = part.split("/")[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise FormatError(
                            f"{path}:{lineno}: bad face index "
                            f"{head!r}") from None
                    if k < 1:
                        raise FormatError(f"{path}:{lineno}: face indices "
                                          "must be positive")
                    idx.append(k - 1)
                faces.append(idx)
    if not verts:
        raise FormatError(f"{path}: no vertices")
    try:
        return Mesh(vertices=np.asarray(verts),
                    faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from None


def write_config(path, flat: dict) -> None:
    lines = [f"{k}={flat[k]}" for k in sorted(flat)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_config(path) -> dict:
    """Flat key=value lines; blank lines and # comments are skipped."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = stripped.split("=", 1)
            key = key.strip()
            if not key:
                raise FormatError(f"{path}:{lineno}: empty key")
            out[key] = value.strip()
    return out


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([FLOAT_FMT % v if isinstance(v, float) else v
                         for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]

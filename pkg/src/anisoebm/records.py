"""On-disk formats: JSON records, ANISO1 arrays, trajectory dumps and config files."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import covariance as cov
from .covariance import DiagonalCovariance, Domain

ARRAY_MAGIC = "ANISO1"
TRAJ_MAGIC = "ANISOTRAJ1"
FAMILIES = ("explicit", "box", "half_mask", "patch", "blur", "superres")


class ConfigError(ValueError):
    pass


class OutputExistsError(FileExistsError):
    pass


# -- covariance records ------------------------------------------------------------


def covariance_to_record(Sigma: DiagonalCovariance):
    """Explicit-family record holding ``phi`` as a flat float list."""
    return {"family": "explicit", "domain": Sigma.domain.value, "dims": list(Sigma.dims),
            "parameters": {"phi": Sigma.phi.tolist(), "phi_min": Sigma.phi_min,
                           "phi_max": Sigma.phi_max}}


def covariance_from_record(rec):
    """Build a covariance from ``{family, domain, dims, parameters}``.

    Parametric families return the grouped partition too when they have one
    (``patch``); all others return ``(Sigma, None)``.
    """
    family = rec.get("family")
    if family not in FAMILIES:
        raise ConfigError(f"unknown covariance family {family!r}")
    p = dict(rec.get("parameters", {}))
    dims = tuple(int(n) for n in rec.get("dims", ()))
    bounds = {k: float(p.pop(k)) for k in ("phi_min", "phi_max") if k in p}
    try:
        if family == "explicit":
            phi = np.asarray(p["phi"], dtype=float)
            return DiagonalCovariance(phi, Domain(rec.get("domain", "spatial")),
                                      dims or None, **bounds), None
        h, w = dims
        if family == "box":
            return cov.make_box_covariance(h, w, int(p["s"]), float(p["sigma_in"]),
                                           float(p["sigma_out"]), **bounds), None
        if family == "half_mask":
            return cov.make_half_mask_covariance(h, w, float(p["sigma_in"]),
                                                 float(p["sigma_out"]), **bounds), None
        if family == "patch":
            return cov.make_patch_grouped_covariance(h, w, int(p["b"]),
                                                     np.asarray(p["variances"], float), **bounds)
        if family == "blur":
            return cov.make_blur_covariance(h, w, float(p["blur_std"]), float(p["sigma"]),
                                            float(p.get("eps", 1e-3)), **bounds), None
        return cov.make_superres_covariance(h, w, int(p["factor"]), float(p["sigma"]),
                                            float(p.get("eps", 1e-3)), **bounds), None
    except KeyError as exc:
        raise ConfigError(f"covariance family {family!r} is missing parameter {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad covariance record: {exc}") from None


# -- files -----------------------------------------------------------------------


def fresh_path(path):
    """Refuse to overwrite: outputs must go to new paths."""
    path = Path(path)
    if path.exists():
        raise OutputExistsError(f"output {path} already exists")
    return path


def write_json(path, rec):
    path = fresh_path(path)
    path.write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_text(path, text):
    path = fresh_path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def write_array(path, arr):
    """``ANISO1 n d`` header line, then little-endian float64 rows."""
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if arr.ndim != 2:
        raise ValueError("array files hold 2-D data")
    path = fresh_path(path)
    with open(path, "wb") as fh:
        fh.write(f"{ARRAY_MAGIC} {arr.shape[0]} {arr.shape[1]}\n".encode("ascii"))
        fh.write(arr.astype("<f8").tobytes())


def read_array(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) != 3 or header[0] != ARRAY_MAGIC:
            raise ConfigError(f"{path} is not an {ARRAY_MAGIC} file")
        n, d = int(header[1]), int(header[2])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * d:
        raise ConfigError(f"{path}: expected {n * d} values, found {data.size}")
    return data.reshape(n, d).astype(float)


def write_trajectory(path, trajectory):
    """Header ``ANISOTRAJ1 T d n fields=...`` then the phi rows and, if kept, the iterates."""
    phis = trajectory.phis()
    L, d = phis.shape
    fields = ["phi"]
    payload = [phis.astype("<f8").tobytes()]
    n = 0
    if trajectory.iterates:
        xs = np.stack([np.atleast_2d(x) for x in trajectory.iterates])
        n = xs.shape[1]
        fields.append("x")
        payload.append(xs.astype("<f8").tobytes())
    path = fresh_path(path)
    with open(path, "wb") as fh:
        fh.write(f"{TRAJ_MAGIC} T={L - 1} d={d} n={n} fields={','.join(fields)}\n".encode("ascii"))
        for block in payload:
            fh.write(block)


def read_trajectory(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if not header or header[0] != TRAJ_MAGIC:
            raise ConfigError(f"{path} is not a trajectory file")
        meta = dict(item.split("=", 1) for item in header[1:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    L, d, n = int(meta["T"]) + 1, int(meta["d"]), int(meta["n"])
    out = {"phi": data[:L * d].reshape(L, d)}
    if "x" in meta["fields"].split(","):
        out["x"] = data[L * d:].reshape(L, n, d)
    return out


# -- config files ----------------------------------------------------------------------


def _parse_value(text):
    text = text.strip()
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_config(text):
    """Parse ``section.key = value`` lines into nested dicts.

    ``#`` starts a comment; values are int, float, bool, ``none``, a comma
    list or a bare string.
    """
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key!r} conflicts with a scalar key")
        if parts[-1] in node:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return out


def load_config(path):
    try:
        return parse_config(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def format_config(cfg, prefix=""):
    """Inverse of :func:`parse_config` for echoing a run's settings."""
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            lines.append(format_config(val, name + "."))
        elif isinstance(val, (list, tuple)):
            lines.append(f"{name} = {', '.join(repr(v) if isinstance(v, float) else str(v) for v in val)},")
        else:
            lines.append(f"{name} = {val!r}" if isinstance(val, float) else f"{name} = {val}")
    return "\n".join(line for line in lines if line)


def env_threads(default=None):
    """Thread count from ``ANISO_THREADS`` (overrides any flag), else ``default``."""
    val = os.environ.get("ANISO_THREADS")
    if val is None or val == "":
        return default
    try:
        n = int(val)
    except ValueError:
        raise ConfigError(f"ANISO_THREADS must be an integer, got {val!r}") from None
    if n < 1:
        raise ConfigError("ANISO_THREADS must be >= 1")
    return n

"""File formats: JSON configs, RFC-4180 CSV tables, binary snapshots.

Configs are plain JSON wrapping :class:`~compflow.geometry.NetworkConfig`.
Snapshots and reduced bases use a small self-describing binary container
(JSON header + little-endian float64 payload); bases additionally carry a
norm tag and a provenance JSON sidecar.  Every artifact directory gets a
single run manifest recording command, config hash, seed and timings.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .geometry import NetworkConfig

SNAPSHOT_MAGIC = b"CFSN"
SNAPSHOT_VERSION = 1


# ---------------------------------------------------------------------------
# configs

def save_config(config: NetworkConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_config(path) -> NetworkConfig:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"malformed config {path}: line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    return NetworkConfig.from_dict(d)


def config_hash(config: NetworkConfig | dict) -> str:
    d = config.to_dict() if hasattr(config, "to_dict") else config
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# CSV (RFC 4180: CRLF line endings, quoting only where needed)

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        rows = list(r)
    return rows[0], rows[1:]


def write_convergence_log(path, log: list[tuple]) -> None:
    """Optimizer history as (it, objective, jump, increment) rows."""
    write_csv(path, ["it", "objective", "jump", "increment"], log)


def write_mesh_csv(space, outdir) -> list[Path]:
    """Mesh as a CSV triplet: nodes, triangles, boundary groups."""
    outdir = Path(outdir)
    mesh = space.mesh
    paths = []
    p = outdir / "nodes.csv"
    write_csv(p, ["node", "x", "y"],
              [(i, xy[0], xy[1]) for i, xy in enumerate(mesh.nodes)])
    paths.append(p)
    p = outdir / "triangles.csv"
    write_csv(p, ["tri"] + [f"n{a}" for a in range(mesh.tris.shape[1])],
              [(e, *t) for e, t in enumerate(mesh.tris)])
    paths.append(p)
    p = outdir / "boundary.csv"
    rows = []
    for group in sorted(mesh.groups):
        for edge in mesh.groups[group]:
            rows.append((group, *edge))
    write_csv(p, ["group", "end0", "mid", "end1"], rows)
    paths.append(p)
    return paths


def write_port_profile(path, xi: np.ndarray, series: dict[str, np.ndarray]) -> None:
    """Plot-ready port profile: one x column, one column per series."""
    names = list(series)
    rows = [(x, *[series[k][i] for k in names]) for i, x in enumerate(xi)]
    write_csv(path, ["xi"] + names, rows)


# ---------------------------------------------------------------------------
# binary snapshots and bases

def save_snapshot(path, data: np.ndarray, meta: dict) -> None:
    """Self-describing binary array: JSON header + little-endian float64."""
    arr = np.ascontiguousarray(data, dtype="<f8")
    header = dict(meta)
    header["shape"] = list(arr.shape)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<II", SNAPSHOT_VERSION, len(blob)))
        f.write(blob)
        f.write(arr.tobytes())


def load_snapshot(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        meta = json.loads(f.read(hlen).decode())
        payload = f.read()
    arr = np.frombuffer(payload, dtype="<f8").reshape(meta["shape"]).copy()
    return arr, meta


def save_basis(path, basis, norm: str = "", extra: dict | None = None) -> None:
    """Reduced basis in snapshot format with a provenance JSON sidecar."""
    path = Path(path)
    meta = {"kind": "reduced_basis", "tag": basis.tag, "norm": norm}
    save_snapshot(path, basis.V, meta)
    side = {
        "tag": basis.tag,
        "norm": norm,
        "dim": int(basis.V.shape[1]),
        "eigvals": [float(v) for v in np.atleast_1d(basis.eigvals)],
        "provenance": _jsonable(basis.provenance),
    }
    if extra:
        side.update(_jsonable(extra))
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_basis(path):
    from .rom import ReducedBasis

    path = Path(path)
    V, meta = load_snapshot(path)
    side_path = path.with_suffix(path.suffix + ".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    basis = ReducedBasis(
        V=V,
        tag=meta.get("tag", path.stem),
        eigvals=np.asarray(side.get("eigvals", []), float),
        provenance=side.get("provenance", {}),
    )
    return basis, meta.get("norm", "")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# ---------------------------------------------------------------------------
# run manifest

@dataclass
class RunManifest:
    """Record of one CLI run; exactly one per artifact directory."""

    command: str
    config_hash: str = ""
    seed: int | None = None
    versions: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.versions:
            self.versions = {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            }
        self._t0 = time.perf_counter()

    def record(self, name: str) -> None:
        self.timings[name] = round(time.perf_counter() - self._t0, 3)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def save(self, outdir) -> Path:
        path = Path(outdir) / "manifest.json"
        d = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "versions": self.versions,
            "timings": self.timings,
            "outputs": sorted(self.outputs),
        }
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def load(outdir) -> dict:
        return json.loads((Path(outdir) / "manifest.json").read_text())

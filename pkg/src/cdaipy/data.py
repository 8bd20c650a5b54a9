"""Partial solution data: coarse-cell observations, noise and SVD compression."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import build_nudging
from .mesh import CoarseOverlay


@dataclass(frozen=True)
class PartialData:
    """Coarse means of both velocity components, one row per coarse cell."""
    overlay: CoarseOverlay
    values: np.ndarray                       # (n_coarse, 2)
    provenance: dict = field(default_factory=lambda: {"kind": "exact"})

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.overlay.n_coarse, 2):
            raise ValueError(f"expected {self.overlay.n_coarse} x 2 values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("partial data must be finite")
        object.__setattr__(self, "values", v)

    @property
    def tag(self) -> str:
        p = self.provenance
        if p["kind"] == "noisy":
            return f"noisy(snr={p['snr']:g},seed={p['seed']})"
        if p["kind"] == "svd":
            return f"svd(rank={p['rank']})"
        return p["kind"]


def extract_partial_data(reference: np.ndarray, space, overlay: CoarseOverlay) -> PartialData:
    """I_H u: exact coarse-cell means of each component of a velocity field on ``space``."""
    setup = build_nudging(space, overlay)
    values = setup.project(np.asarray(reference, dtype=float), space.n_scalar)
    return PartialData(overlay, values, {"kind": "exact"})


def add_noise(data: PartialData, snr: float, seed: int, reference_max: float) -> PartialData:
    """Add U[-1, 1] * snr * reference_max to every entry (numpy PCG64 stream from ``seed``)."""
    if snr < 0:
        raise ValueError("snr must be non-negative")
    rng = np.random.default_rng(seed)
    eps = rng.uniform(-1.0, 1.0, size=data.values.shape) * snr * reference_max
    return PartialData(data.overlay, data.values + eps,
                       {"kind": "noisy", "snr": float(snr), "seed": int(seed), "parent": data.tag})


def data_noise_norm(noisy: PartialData, exact: PartialData) -> float:
    """||I_H eps||_{L2} = sqrt(sum_K |K| |delta_K|^2)."""
    a, b = noisy.overlay, exact.overlay
    if a is not b and (a.H != b.H or not np.array_equal(a.coarse_ij, b.coarse_ij)):
        raise ValueError("data live on different overlays")
    d = noisy.values - exact.values
    return float(np.sqrt(np.sum(a.coarse_measures[:, None] * d**2)))


@dataclass(frozen=True)
class SvdPackage:
    """Rank-r truncated SVD of each component's coarse grid (rows = y index, cols = x index)."""
    rank: int
    grid_shape: tuple
    left: tuple          # per component, (rows, r)
    singular: tuple      # per component, (r,)
    right: tuple         # per component, (cols, r)

    def __post_init__(self):
        for s in self.singular:
            if np.any(s < 0) or np.any(np.diff(s) > 0):
                raise ValueError("singular values must be non-negative and non-increasing")

    @property
    def entries_count(self) -> int:
        rows, cols = self.grid_shape
        return 2 * (rows * self.rank + cols * self.rank + self.rank)

    def save(self, path: str | Path) -> None:
        """Flat binary (.npz) with the factors; a JSON sidecar holds the metadata."""
        path = Path(path)
        arrays = {}
        for c in range(2):
            arrays[f"U{c}"] = self.left[c]
            arrays[f"s{c}"] = self.singular[c]
            arrays[f"V{c}"] = self.right[c]
        np.savez(path.with_suffix(".npz"), **arrays)
        meta = {"rank": self.rank, "grid_shape": list(self.grid_shape), "entries_count": self.entries_count}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SvdPackage":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        z = np.load(path.with_suffix(".npz"))
        return cls(meta["rank"], tuple(meta["grid_shape"]),
                   (z["U0"], z["U1"]), (z["s0"], z["s1"]), (z["V0"], z["V1"]))


def entries_count(rows: int, cols: int, rank: int) -> int:
    return 2 * (rows * rank + cols * rank + rank)


def data_to_grids(data: PartialData) -> list[np.ndarray]:
    """Per component (rows, cols) grid; coarse cell (ix, iy) goes to [iy, ix] (x fastest)."""
    ov = data.overlay
    if not ov.is_uniform_grid:
        raise ValueError("SVD compression needs a full rectangular grid of unclipped coarse cells "
                         "(not available with an obstacle or clipped cells)")
    nx, ny = ov.grid_shape
    grids = []
    for c in range(2):
        g = np.empty((ny, nx))
        g[ov.coarse_ij[:, 1], ov.coarse_ij[:, 0]] = data.values[:, c]
        grids.append(g)
    return grids


def svd_compress(data: PartialData, rank: int) -> SvdPackage:
    grids = data_to_grids(data)
    rows, cols = grids[0].shape
    if not 1 <= rank <= min(rows, cols):
        raise ValueError(f"rank must be in [1, {min(rows, cols)}]")
    U, S, V = [], [], []
    for g in grids:
        u, s, vt = np.linalg.svd(g, full_matrices=False)
        U.append(u[:, :rank].copy())
        S.append(s[:rank].copy())
        V.append(vt[:rank].T.copy())
    return SvdPackage(rank, (rows, cols), tuple(U), tuple(S), tuple(V))


def svd_reconstruct(package: SvdPackage, overlay: CoarseOverlay, original: PartialData | None = None):
    """Rebuild coarse data; returns (PartialData, error) where error is the Frobenius
    distance to ``original`` over both components (None if not given)."""
    ij = overlay.coarse_ij
    vals = np.empty((overlay.n_coarse, 2))
    for c in range(2):
        g = (package.left[c] * package.singular[c]) @ package.right[c].T
        vals[:, c] = g[ij[:, 1], ij[:, 0]]
    data = PartialData(overlay, vals, {"kind": "svd", "rank": package.rank})
    err = None if original is None else float(np.linalg.norm(vals - original.values))
    return data, err


def write_data_csv(path: str | Path, data: PartialData) -> None:
    ov = data.overlay
    buf = io.StringIO()
    prov = data.provenance
    buf.write(f"# H={ov.H!r} provenance={data.tag} seed={prov.get('seed', '')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_ix", "cell_iy", "u1", "u2"])
    for (ix, iy), (a, b) in zip(ov.coarse_ij, data.values):
        w.writerow([int(ix), int(iy), repr(float(a)), repr(float(b))])
    Path(path).write_text(buf.getvalue())


def read_data_csv(path: str | Path, overlay: CoarseOverlay) -> PartialData:
    lines = Path(path).read_text().splitlines()
    header = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
    if float(header["H"]) != overlay.H:
        raise ValueError(f"data file has H={header['H']}, overlay has H={overlay.H}")
    rows = list(csv.DictReader(lines[1:]))
    index = {(int(i), int(j)): n for n, (i, j) in enumerate(overlay.coarse_ij)}
    vals = np.full((overlay.n_coarse, 2), np.nan)
    for r in rows:
        vals[index[int(r["cell_ix"]), int(r["cell_iy"])]] = float(r["u1"]), float(r["u2"])
    return PartialData(overlay, vals, {"kind": "file", "source": header.get("provenance", "")})

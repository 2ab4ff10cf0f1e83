"""Tetrahedral meshes: box generator, JSON I/O and validation."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MeshError

VOLUME_EPS = 1e-12


def signed_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = nodes[tets]
    e1, e2, e3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


@dataclass(frozen=True)
class TetMesh:
    """Node positions and tetrahedral connectivity.

    Arrays are copied and made read-only on construction; ``rest_nodes``
    keeps the configuration the mesh was built in.
    """

    nodes: np.ndarray
    tets: np.ndarray
    rest_nodes: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        tets = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        rest = nodes.copy() if self.rest_nodes is None else np.array(self.rest_nodes, dtype=float)
        for a in (nodes, tets, rest):
            a.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "rest_nodes", rest)
        validate(self)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def volumes(self) -> np.ndarray:
        return signed_volumes(self.rest_nodes, self.tets)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rest_nodes.min(axis=0), self.rest_nodes.max(axis=0)

    def find_node(self, point, tol: float = 1e-6) -> int:
        """Index of the rest node at ``point`` (within ``tol``)."""
        d = np.linalg.norm(self.rest_nodes - np.asarray(point, dtype=float), axis=1)
        i = int(np.argmin(d))
        if d[i] > tol:
            raise MeshError(f"no mesh node at {list(point)} (closest is {d[i]:.3g} away)")
        return i

    def nodes_in_box(self, lo, hi, tol: float = 1e-9) -> np.ndarray:
        lo = np.asarray(lo, dtype=float) - tol
        hi = np.asarray(hi, dtype=float) + tol
        inside = np.all((self.rest_nodes >= lo) & (self.rest_nodes <= hi), axis=1)
        return np.flatnonzero(inside)

    def mirrored(self, axis: int, plane: float) -> "TetMesh":
        """Reflection across ``x[axis] = plane`` with tets reordered to stay positive."""
        nodes = self.rest_nodes.copy()
        nodes[:, axis] = 2.0 * plane - nodes[:, axis]
        tets = self.tets[:, [0, 2, 1, 3]]
        return TetMesh(nodes, tets)


def validate(mesh: TetMesh) -> None:
    n = len(mesh.nodes)
    if mesh.rest_nodes.shape != mesh.nodes.shape:
        raise MeshError("rest_nodes shape does not match nodes")
    if not np.all(np.isfinite(mesh.nodes)):
        raise MeshError("non-finite node coordinate")
    if mesh.tets.size and mesh.tets.min() < 0:
        e = int(np.argwhere(mesh.tets < 0)[0, 0])
        raise MeshError(f"tet {e}: negative node index")
    bad = np.argwhere(mesh.tets >= n)
    if len(bad):
        e = int(bad[0, 0])
        raise MeshError(f"tet {e}: node index {int(mesh.tets[e].max())} out of range ({n} nodes)")
    vol = signed_volumes(mesh.rest_nodes, mesh.tets)
    degenerate = np.flatnonzero(np.abs(vol) <= VOLUME_EPS)
    if len(degenerate):
        e = int(degenerate[0])
        raise MeshError(f"tet {e} is degenerate (volume {vol[e]:.3e})")
    negative = np.flatnonzero(vol < 0)
    if len(negative):
        e = int(negative[0])
        raise MeshError(f"tet {e} has negative orientation (volume {vol[e]:.3e})")


# six tets along the 0-7 diagonal of a unit cube; corner id = i + 2j + 4k
def _kuhn_tets() -> list[tuple[int, int, int, int]]:
    out = []
    for perm in itertools.permutations(range(3)):
        a = 1 << perm[0]
        b = a | (1 << perm[1])
        sign = np.linalg.det(np.eye(3)[list(perm)])
        out.append((0, a, b, 7) if sign > 0 else (0, b, a, 7))
    return out


_KUHN = _kuhn_tets()


def build_box_mesh(dims, res) -> TetMesh:
    """Regular grid over [0, dims] with ``res`` cells per axis, 6 tets per cell.

    The cell pattern is reflected across every cell boundary, so faces stay
    conforming and an even resolution gives a mesh symmetric about its
    mid-planes.
    """
    dims = np.asarray(dims, dtype=float)
    res = np.asarray(res)
    if dims.shape != (3,) or res.shape != (3,):
        raise MeshError("dims and res need three components")
    if np.any(dims <= 0):
        raise MeshError(f"box extents must be positive, got {dims.tolist()}")
    if np.any(res < 1) or np.any(res != np.round(res)):
        raise MeshError(f"resolution must be integers >= 1, got {res.tolist()}")
    nx, ny, nz = (int(r) for r in res)
    xs = np.linspace(0.0, dims[0], nx + 1)
    ys = np.linspace(0.0, dims[1], ny + 1)
    zs = np.linspace(0.0, dims[2], nz + 1)
    # x fastest, then y, then z
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    tets = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                corner = [nid(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) for c in range(8)]
                mask = (i & 1) | ((j & 1) << 1) | ((k & 1) << 2)
                flip = bin(mask).count("1") % 2 == 1
                for a, b, c, d in _KUHN:
                    a, b, c, d = a ^ mask, b ^ mask, c ^ mask, d ^ mask
                    if flip:
                        b, c = c, b
                    tets.append([corner[a], corner[b], corner[c], corner[d]])
    return TetMesh(nodes, np.array(tets))


def mesh_to_dict(mesh: TetMesh) -> dict:
    return {"nodes": mesh.rest_nodes.tolist(), "tets": mesh.tets.tolist()}


def mesh_from_dict(data: dict) -> TetMesh:
    try:
        nodes = np.array(data["nodes"], dtype=float)
        tets = np.array(data["tets"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"malformed mesh data: {exc}") from exc
    if nodes.ndim != 2 or nodes.shape[1] != 3:
        raise MeshError("'nodes' must be a list of [x, y, z] triples")
    if tets.ndim != 2 or tets.shape[1] != 4:
        raise MeshError("'tets' must be a list of 4 node indices")
    if tets.size and (tets.dtype.kind not in "iu"):
        raise MeshError("tet indices must be non-negative integers")
    return TetMesh(nodes, tets.astype(np.int64))


def save_mesh(mesh: TetMesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)) + "\n")


def load_mesh(path) -> TetMesh:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: not valid JSON ({exc})") from exc
    return mesh_from_dict(data)

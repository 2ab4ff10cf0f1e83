"""Dataset collection and the MLP surrogate of the condensed mechanics.

The surrogate maps ``[delta_a, W0_tri, delta0_free]`` to ``[W_tri, delta_a_free]``
where ``W0_tri`` and ``delta0_free`` are the zero-actuation anchor. Inputs and
outputs are standardized element-wise with statistics of the training split.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .condense import condense, tri_flatten, tri_unflatten
from .errors import CollectionError, CompliantError, ConfigError, TrainingError
from .fem import FemSystem

log = logging.getLogger(__name__)

STD_GUARD = 1e-12
TEST_FRACTION = 0.25
CHUNK = 16


# ---------------------------------------------------------------------- data

@dataclass
class Anchor:
    """Condensed state at zero actuation."""

    W_tri: np.ndarray
    delta_a_free: np.ndarray
    delta_a: np.ndarray
    size: int
    n_effector_rows: int

    @property
    def W(self) -> np.ndarray:
        return tri_unflatten(self.W_tri, self.size)

    def to_dict(self) -> dict:
        return {
            "W_tri": self.W_tri.tolist(),
            "delta_a_free": self.delta_a_free.tolist(),
            "delta_a": self.delta_a.tolist(),
            "size": self.size,
            "n_effector_rows": self.n_effector_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Anchor":
        return cls(
            np.asarray(d["W_tri"], dtype=float),
            np.asarray(d["delta_a_free"], dtype=float),
            np.asarray(d["delta_a"], dtype=float),
            int(d["size"]),
            int(d["n_effector_rows"]),
        )


@dataclass
class SampleSet:
    delta_a: np.ndarray  # (N, m)
    W_tri: np.ndarray  # (N, t)
    delta_a_free: np.ndarray  # (N, m)

    def __post_init__(self):
        self.delta_a = np.atleast_2d(np.asarray(self.delta_a, dtype=float))
        self.W_tri = np.atleast_2d(np.asarray(self.W_tri, dtype=float))
        self.delta_a_free = np.atleast_2d(np.asarray(self.delta_a_free, dtype=float))
        n = len(self.delta_a)
        if len(self.W_tri) != n or len(self.delta_a_free) != n:
            raise ValueError("sample columns have different lengths")

    def __len__(self) -> int:
        return len(self.delta_a)

    def inputs(self, anchor: Anchor) -> np.ndarray:
        ctx = np.concatenate([anchor.W_tri, anchor.delta_a_free])
        return np.hstack([self.delta_a, np.tile(ctx, (len(self), 1))])

    def outputs(self) -> np.ndarray:
        return np.hstack([self.W_tri, self.delta_a_free])


@dataclass
class Dataset:
    train: SampleSet
    test: SampleSet
    anchor: Anchor
    meta: dict = field(default_factory=dict)


def csv_header(m: int, t: int) -> list[str]:
    return (
        [f"delta_a_{i}" for i in range(m)]
        + [f"W_tri_{i}" for i in range(t)]
        + [f"delta_a_free_{i}" for i in range(m)]
    )


def _write_csv(path: Path, s: SampleSet) -> None:
    m, t = s.delta_a.shape[1], s.W_tri.shape[1]
    rows = np.hstack([s.delta_a, s.W_tri, s.delta_a_free])
    with open(path, "w") as fh:
        fh.write(",".join(csv_header(m, t)) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_csv(path: Path, m: int, t: int) -> SampleSet:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != csv_header(m, t):
        raise ValueError(f"{path}: unexpected header")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2).reshape(-1, 2 * m + t)
    return SampleSet(data[:, :m], data[:, m : m + t], data[:, m + t :])


def sidecar_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("")
    return Path(f"{stem}.test.csv"), Path(f"{stem}.meta.json")


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    test_path, meta_path = sidecar_paths(path)
    _write_csv(path, ds.train)
    _write_csv(test_path, ds.test)
    meta = dict(ds.meta)
    meta["anchor"] = ds.anchor.to_dict()
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    test_path, meta_path = sidecar_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise CollectionError(f"dataset metadata {meta_path} not found") from exc
    anchor = Anchor.from_dict(meta.pop("anchor"))
    m, t = len(anchor.delta_a), len(anchor.W_tri)
    train = _read_csv(path, m, t)
    test = _read_csv(test_path, m, t) if test_path.exists() else train
    return Dataset(train, test, anchor, meta)


# ---------------------------------------------------------------- collection

def compute_anchor(model, tol_newton: float = 1e-6) -> tuple[FemSystem, Anchor]:
    system = FemSystem(model, tol_newton=tol_newton)
    system.solve_free()
    st = condense(system)
    anchor = Anchor(tri_flatten(st.W), st.delta_a_free, st.delta_a, st.size, st.n_effector_rows)
    return system, anchor


def grid_points(ranges, n_samples: int) -> np.ndarray:
    """Cartesian grid, last cable varying fastest."""
    axes = [np.linspace(lo, hi, n_samples) for lo, hi in ranges]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def random_points(ranges, n: int, rng: np.random.Generator) -> np.ndarray:
    lo = np.array([r[0] for r in ranges], dtype=float)
    hi = np.array([r[1] for r in ranges], dtype=float)
    return lo + (hi - lo) * rng.random((n, len(ranges)))


def _collect_chunk(args):
    """Solve a run of points by continuation from the anchor equilibrium."""
    system, points = args
    system = system.clone()
    rows, failed = [], []
    for s in points:
        try:
            system.solve_with_displacement(s)
            st = condense(system)
        except (CompliantError, ValueError, np.linalg.LinAlgError) as exc:
            failed.append((s.tolist(), str(exc)))
            rows.append(None)
            continue
        rows.append((st.delta_a, tri_flatten(st.W), st.delta_a_free))
    return rows, failed


def _chunks(points: np.ndarray, size: int):
    return [points[i : i + size] for i in range(0, len(points), size)]


def sample_points(system: FemSystem, points: np.ndarray, jobs: int = 1, chunk: int | None = None):
    """Run ``_collect_chunk`` over fixed chunks; the result does not depend on ``jobs``."""
    chunk = chunk or CHUNK
    tasks = [(system, c) for c in _chunks(points, chunk)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_collect_chunk, tasks))
    else:
        results = [_collect_chunk(t) for t in tasks]
    rows, failed = [], []
    for r, f in results:
        rows.extend(r)
        failed.extend(f)
    for s, msg in failed:
        log.warning("point s=%s did not converge, skipped: %s", s, msg)
    kept = [r for r in rows if r is not None]
    if not kept:
        return None, failed
    return SampleSet(*(np.array(col) for col in zip(*kept))), failed


def collect(
    model,
    ranges,
    n_samples: int,
    seed: int = 0,
    jobs: int = 1,
    n_test: int | None = None,
    tol_newton: float = 1e-6,
) -> Dataset:
    """Grid sweep of cable pull-ins for training plus uniform random test points.

    ``ranges`` holds one ``(s_min, s_max)`` per cable. Each grid row runs by
    continuation from the anchor; the test split has 25% of the training
    size (at least one point).
    """
    ranges = [tuple(map(float, r)) for r in ranges]
    if len(ranges) != len(model.cables):
        raise CollectionError(f"{len(ranges)} ranges given for {len(model.cables)} cables")
    if n_samples < 1:
        raise CollectionError("need at least one sample per cable")
    system, anchor = compute_anchor(model, tol_newton)
    grid = grid_points(ranges, n_samples)
    chunk = n_samples if len(ranges) > 1 else max(1, n_samples)
    train, failed = sample_points(system, grid, jobs, chunk)
    if train is None:
        raise CollectionError("no grid point converged")
    rng = np.random.default_rng(seed)
    n_test = max(1, round(TEST_FRACTION * len(grid))) if n_test is None else n_test
    test, failed_test = sample_points(system, random_points(ranges, n_test, rng), jobs)
    if test is None:
        raise CollectionError("no test point converged")
    meta = {
        "robot": model.name,
        "ranges": [list(r) for r in ranges],
        "samples": n_samples,
        "seed": seed,
        "n_train": len(train),
        "n_test": len(test),
        "skipped": [s for s, _ in failed + failed_test],
    }
    return Dataset(train, test, anchor, meta)


# ------------------------------------------------------------ standardization

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.atleast_2d(X)
        if len(X) < 1:
            raise ValueError("cannot standardize an empty set")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std < STD_GUARD, 1.0, std)
        return cls(mean, std)

    def apply(self, X):
        return (X - self.mean) / self.std

    def invert(self, Z):
        return Z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def standardize(ds: Dataset):
    """Standardized (train, test) input/output arrays plus the two standardizers."""
    Xtr, Ytr = ds.train.inputs(ds.anchor), ds.train.outputs()
    sx, sy = Standardizer.fit(Xtr), Standardizer.fit(Ytr)
    Xte, Yte = ds.test.inputs(ds.anchor), ds.test.outputs()
    return (sx.apply(Xtr), sy.apply(Ytr)), (sx.apply(Xte), sy.apply(Yte)), sx, sy


# ----------------------------------------------------------------------- MLP

@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)


def init_layers(sizes, rng: np.random.Generator) -> list[Layer]:
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
        layers.append(Layer(w, np.zeros(n_out)))
    return layers


def forward(layers: list[Layer], X: np.ndarray, cache: bool = False):
    """ReLU on hidden layers, identity on the output layer."""
    acts = [X]
    h = X
    for k, layer in enumerate(layers):
        z = h @ layer.w.T + layer.b
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(h)
    return (h, acts) if cache else h


def loss_and_grads(layers: list[Layer], X: np.ndarray, Y: np.ndarray):
    """Mean squared error over samples and output elements, with its gradient."""
    out, acts = forward(layers, X, cache=True)
    diff = out - Y
    loss = float(np.mean(diff**2))
    g = 2.0 * diff / diff.size
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        grads[k] = Layer(g.T @ acts[k], g.sum(axis=0))
        if k:
            g = (g @ layers[k].w) * (acts[k] > 0.0)
    return loss, grads


def mse(layers, X, Y) -> float:
    return float(np.mean((forward(layers, X) - Y) ** 2))


def hidden_width(n_in: int, n_out: int, n_layers: int, weights: int) -> int:
    """Widest equal hidden width keeping the weight count near ``weights``."""
    if n_layers < 2:
        return 0
    best = 1
    for h in range(1, 4096):
        count = n_in * h + (n_layers - 2) * h * h + h * n_out
        if count > weights:
            break
        best = h
    return best


class Adam:
    def __init__(self, layers, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in layers]
        self.v = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in layers]
        self.t = 0

    def step(self, layers, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, (layer, g) in enumerate(zip(layers, grads)):
            for j, (p, gp) in enumerate(((layer.w, g.w), (layer.b, g.b))):
                m, v = self.m[k][j], self.v[k][j]
                m *= self.beta1
                m += (1.0 - self.beta1) * gp
                v *= self.beta2
                v += (1.0 - self.beta2) * gp * gp
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    n_layers: int = 3
    hidden: tuple | None = None
    weights: int = 400
    lr: float = 1e-3
    epochs: int = 10000
    batch: int = 64
    seed: int = 0
    patience: int | None = None


@dataclass
class SurrogateModel:
    layers: list
    x_stats: Standardizer
    y_stats: Standardizer
    anchor: Anchor
    meta: dict = field(default_factory=dict)

    @property
    def n_actuators(self) -> int:
        return len(self.anchor.delta_a)

    def predict_raw(self, delta_a: np.ndarray) -> np.ndarray:
        delta_a = np.atleast_2d(np.asarray(delta_a, dtype=float))
        if delta_a.shape[1] != self.n_actuators:
            raise ValueError(f"expected {self.n_actuators} actuation values, got {delta_a.shape[1]}")
        X = SampleSet(delta_a, np.zeros((len(delta_a), 1)), delta_a).inputs(self.anchor)
        if X.shape[1] != self.layers[0].w.shape[1]:
            raise ValueError("model input dimension does not match the anchor")
        return self.y_stats.invert(forward(self.layers, self.x_stats.apply(X)))

    def predict(self, delta_a) -> tuple[np.ndarray, np.ndarray]:
        """Full symmetric W and delta_a_free at one actuation state."""
        y = self.predict_raw(delta_a)[0]
        t = len(self.anchor.W_tri)
        return tri_unflatten(y[:t], self.anchor.size), y[t:]

    def training_range(self) -> np.ndarray | None:
        r = self.meta.get("delta_a_range")
        return None if r is None else np.asarray(r, dtype=float)

    def outside_hull(self, delta_a, slack: float = 1e-6) -> np.ndarray:
        """Per-coordinate flags for actuation values outside the training range."""
        r = self.training_range()
        if r is None:
            return np.zeros(len(delta_a), dtype=bool)
        pad = slack * (1.0 + np.abs(r).max())
        return (delta_a < r[:, 0] - pad) | (delta_a > r[:, 1] + pad)

    def to_dict(self) -> dict:
        return {
            "layers": [{"w": l.w.tolist(), "b": l.b.tolist()} for l in self.layers],
            "stats": {"input": self.x_stats.to_dict(), "output": self.y_stats.to_dict()},
            "anchor": self.anchor.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        layers = [Layer(np.asarray(l["w"], dtype=float), np.asarray(l["b"], dtype=float)) for l in d["layers"]]
        for a, b in zip(layers[:-1], layers[1:]):
            if a.w.shape[0] != b.w.shape[1]:
                raise ValueError("layer dimensions do not chain")
        return cls(
            layers,
            Standardizer.from_dict(d["stats"]["input"]),
            Standardizer.from_dict(d["stats"]["output"]),
            Anchor.from_dict(d["anchor"]),
            d.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        schema = json.loads(resources.files("compliant").joinpath("schemas/model.schema.json").read_text())
        try:
            jsonschema.validate(d, schema)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{path}: model file invalid at {where}: {exc.message}") from exc
        return cls.from_dict(d)


def train(ds: Dataset, cfg: TrainConfig | None = None) -> tuple[SurrogateModel, dict]:
    """Mini-batch Adam; keeps the weights with the lowest test loss."""
    cfg = cfg or TrainConfig()
    if len(ds.train) < 1 or len(ds.test) < 1:
        raise TrainingError("training and test splits must be non-empty")
    (Xtr, Ytr), (Xte, Yte), sx, sy = standardize(ds)
    n_in, n_out = Xtr.shape[1], Ytr.shape[1]
    if cfg.hidden:
        hidden = list(cfg.hidden)
    else:
        h = hidden_width(n_in, n_out, cfg.n_layers, cfg.weights)
        hidden = [h] * (cfg.n_layers - 1)
    sizes = [n_in, *hidden, n_out]
    rng = np.random.default_rng(cfg.seed)
    layers = init_layers(sizes, rng)
    opt = Adam(layers, cfg.lr)
    best = (mse(layers, Xte, Yte), 0, [Layer(l.w.copy(), l.b.copy()) for l in layers])
    curve = {"train": [mse(layers, Xtr, Ytr)], "test": [best[0]]}
    n = len(Xtr)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            _, grads = loss_and_grads(layers, Xtr[idx], Ytr[idx])
            opt.step(layers, grads)
        tr, te = mse(layers, Xtr, Ytr), mse(layers, Xte, Yte)
        if not (np.isfinite(tr) and np.isfinite(te)):
            raise TrainingError(f"loss diverged at epoch {epoch}; try a lower learning rate")
        curve["train"].append(tr)
        curve["test"].append(te)
        if te < best[0]:
            best = (te, epoch, [Layer(l.w.copy(), l.b.copy()) for l in layers])
        elif cfg.patience and epoch - best[1] > cfg.patience:
            break
    lo = np.minimum(ds.train.delta_a.min(axis=0), ds.test.delta_a.min(axis=0))
    hi = np.maximum(ds.train.delta_a.max(axis=0), ds.test.delta_a.max(axis=0))
    meta = {
        "seed": cfg.seed,
        "arch": sizes,
        "activation": "relu",
        "optimizer": {"name": "adam", "lr": cfg.lr, "beta1": 0.9, "beta2": 0.999, "batch": cfg.batch},
        "epochs": len(curve["test"]) - 1,
        "best_epoch": best[1],
        "initial_test_loss": curve["test"][0],
        "best_test_loss": best[0],
        "delta_a_range": np.column_stack([lo, hi]).tolist(),
        "loss_curve": curve,
    }
    return SurrogateModel(best[2], sx, sy, ds.anchor, meta), curve

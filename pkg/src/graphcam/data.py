"""Datasets on disk, model files, and the planted-saliency connectome generator.

Dataset directory layout::

    manifest.json         {format_version, class_names, d_nodes, feature_dim,
                           subjects: [{id, label, features_file}],
                           ground_truth_salient (optional)}
    graph.csv             d x d adjacency, comma separated, no header
    features/<id>.csv     d_x x d_y node features
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    DatasetError,
    DimensionError,
    MissingFileError,
    ModelFormatError,
    NonFiniteError,
    UnknownLabelError,
    ValidationError,
)
from .nn import ChebConvParams, DenseParams, Model, ModelConfig
from .spectral import Graph, ScaledLaplacian, build_group_graph

DATASET_FORMAT = "graphcam-dataset/1"
MODEL_FORMAT = "graphcam-model/1"
SYMMETRY_TOL = 1e-9


@dataclass
class Subject:
    id: str
    label: int
    features: np.ndarray


@dataclass
class Dataset:
    graph: Graph
    subjects: list
    class_names: list = field(default_factory=lambda: ["class0", "class1"])
    ground_truth_salient: list = None

    def __post_init__(self):
        validate_dataset(self)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def feature_dim(self) -> int:
        return self.subjects[0].features.shape[1]

    @cached_property
    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.subjects])

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects], dtype=np.int64)

    @cached_property
    def ltilde(self) -> ScaledLaplacian:
        return ScaledLaplacian.from_graph(self.graph)

    def __getstate__(self):
        # drop cached arrays so process pools ship only the raw data
        state = self.__dict__.copy()
        for key in ("features", "labels", "ltilde"):
            state.pop(key, None)
        return state


def validate_dataset(ds: Dataset):
    if not ds.subjects:
        raise ValidationError("dataset has no subjects")
    d = ds.graph.num_nodes
    dy = ds.subjects[0].features.shape[1] if ds.subjects[0].features.ndim == 2 else None
    seen = set()
    for s in ds.subjects:
        if s.id in seen:
            raise DatasetError("duplicate subject id", location=s.id)
        seen.add(s.id)
        f = s.features
        if f.ndim != 2 or f.shape != (d, dy):
            raise DimensionError(f"features have shape {f.shape}, expected ({d}, {dy})", location=s.id)
        if not np.all(np.isfinite(f)):
            raise NonFiniteError("features contain non-finite values", location=s.id)
        if not 0 <= s.label < len(ds.class_names):
            raise UnknownLabelError(f"label {s.label} not in {list(range(len(ds.class_names)))}", location=s.id)
    present = {s.label for s in ds.subjects}
    missing = [c for c in range(len(ds.class_names)) if c not in present]
    if missing:
        raise ValidationError(f"no subjects for class(es) {missing}")
    if ds.ground_truth_salient is not None:
        if any(not 0 <= i < d for i in ds.ground_truth_salient):
            raise ValidationError("ground_truth_salient index out of range")


# --- CSV helpers -----------------------------------------------------------------


def _write_matrix(path: Path, mat):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.asarray(mat, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def _read_matrix(path: Path, location):
    if not path.is_file():
        raise MissingFileError(f"missing file {path}", location=location)
    try:
        mat = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2, encoding="utf-8")
    except ValueError as exc:
        raise DatasetError(f"cannot parse {path.name}: {exc}", location=location) from None
    if not np.all(np.isfinite(mat)):
        raise NonFiniteError(f"non-finite value in {path.name}", location=location)
    return mat


# --- datasets ----------------------------------------------------------------------


def save_dataset(ds: Dataset, path):
    path = Path(path)
    (path / "features").mkdir(parents=True, exist_ok=True)
    _write_matrix(path / "graph.csv", ds.graph.weights)
    entries = []
    for s in ds.subjects:
        rel = f"features/{s.id}.csv"
        _write_matrix(path / rel, s.features)
        entries.append({"id": s.id, "label": int(s.label), "features_file": rel})
    manifest = {
        "format_version": DATASET_FORMAT,
        "class_names": list(ds.class_names),
        "d_nodes": ds.num_nodes,
        "feature_dim": ds.feature_dim,
        "subjects": entries,
    }
    if ds.ground_truth_salient is not None:
        manifest["ground_truth_salient"] = [int(i) for i in ds.ground_truth_salient]
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise MissingFileError(f"missing {mpath}", location="manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc}", location="manifest.json") from None
    for key in ("format_version", "class_names", "d_nodes", "feature_dim", "subjects"):
        if key not in manifest:
            raise DatasetError(f"missing key {key!r}", location="manifest.json")
    if manifest["format_version"] != DATASET_FORMAT:
        raise DatasetError(
            f"unsupported format_version {manifest['format_version']!r}", location="manifest.json"
        )
    d, dy = int(manifest["d_nodes"]), int(manifest["feature_dim"])
    n_classes = len(manifest["class_names"])

    w = _read_matrix(path / "graph.csv", "graph.csv")
    if w.shape != (d, d):
        raise DimensionError(f"graph is {w.shape}, manifest says ({d}, {d})", location="graph.csv")
    asym = np.max(np.abs(w - w.T)) if d else 0.0
    if asym >= SYMMETRY_TOL:
        raise DatasetError(f"graph not symmetric (max |W - W^T| = {asym:.3g})", location="graph.csv")
    try:
        graph = Graph(0.5 * (w + w.T))
    except ValidationError as exc:
        raise DatasetError(str(exc), location="graph.csv") from None

    subjects = []
    for entry in manifest["subjects"]:
        sid = str(entry["id"])
        label = entry.get("label")
        if not isinstance(label, int) or not 0 <= label < n_classes:
            raise UnknownLabelError(f"unknown label {label!r}", location=sid)
        feats = _read_matrix(path / entry["features_file"], sid)
        if feats.shape != (d, dy):
            raise DimensionError(f"features are {feats.shape}, expected ({d}, {dy})", location=sid)
        subjects.append(Subject(sid, label, feats))
    return Dataset(graph, subjects, list(manifest["class_names"]), manifest.get("ground_truth_salient"))


def dataset_checksum(path) -> str:
    """SHA-256 over the manifest, graph and feature files in manifest order."""
    path = Path(path)
    h = hashlib.sha256()
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    files = ["manifest.json", "graph.csv"] + [e["features_file"] for e in manifest["subjects"]]
    for rel in files:
        h.update(rel.encode())
        h.update((path / rel).read_bytes())
    return h.hexdigest()


FEATURE_TRANSFORMS = {
    "identity": lambda x: x,
    "fisher_z": lambda x: np.arctanh(np.clip(x, -1 + 1e-12, 1 - 1e-12)),
}


def transform_features(ds: Dataset, name="identity") -> Dataset:
    """Apply an element-wise feature transform (e.g. Fisher z) to every subject."""
    if name not in FEATURE_TRANSFORMS:
        raise ValidationError(f"unknown transform {name!r}; choose from {sorted(FEATURE_TRANSFORMS)}")
    fn = FEATURE_TRANSFORMS[name]
    subjects = [Subject(s.id, s.label, fn(s.features)) for s in ds.subjects]
    return Dataset(ds.graph, subjects, ds.class_names, ds.ground_truth_salient)


# --- synthetic data ------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_subjects: int = 500
    d_nodes: int = 20
    n_salient: int = 3
    effect_size: float = 0.8
    noise_sd: float = 0.5
    seed: int = 7

    def __post_init__(self):
        if self.d_nodes < 2:
            raise ValidationError("d_nodes must be >= 2")
        if not 0 <= self.n_salient < self.d_nodes:
            raise ValidationError(f"n_salient must be < d_nodes ({self.n_salient} >= {self.d_nodes})")
        if not self.effect_size > 0:
            raise ValidationError("effect_size must be positive")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be non-negative")
        if self.n_subjects < 2:
            raise ValidationError("need at least 2 subjects (one per class)")


def _symmetric_draw(rng, d, scale=1.0):
    upper = np.triu(rng.standard_normal((d, d)) * scale, k=1)
    return upper + upper.T


def salient_edge_mask(d, salient) -> np.ndarray:
    """Indicator of edges incident to any salient node (symmetric, zero diagonal)."""
    s = np.zeros((d, d))
    idx = list(salient)
    s[idx, :] = 1.0
    s[:, idx] = 1.0
    np.fill_diagonal(s, 0.0)
    return s


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Connectome-like subjects whose classes differ only on edges of the first ``n_salient`` nodes.

    Subject ``i`` has label ``i % 2``, giving ceil(n/2) class-0 and floor(n/2)
    class-1 subjects.
    """
    rng = np.random.default_rng(config.seed)
    d = config.d_nodes
    base = _symmetric_draw(rng, d)
    salient = list(range(config.n_salient))
    shift = (config.effect_size / 2.0) * salient_edge_mask(d, salient)
    subjects = []
    for i in range(config.n_subjects):
        label = i % 2
        sign = 1.0 if label == 1 else -1.0
        feats = base + sign * shift
        if config.noise_sd > 0:
            feats = feats + _symmetric_draw(rng, d, config.noise_sd)
        subjects.append(Subject(f"sub{i:04d}", label, feats))
    graph = build_group_graph([s.features for s in subjects])
    return Dataset(graph, subjects, ["class0", "class1"], salient)


# --- models ----------------------------------------------------------------------------


def model_to_dict(model: Model) -> dict:
    return {
        "format_version": MODEL_FORMAT,
        "config": model.config.to_dict(),
        "parameters": {
            name: {"shape": list(p.shape), "data": [float(v) for v in p.ravel()]}
            for name, p in model.parameters().items()
        },
    }


def model_from_dict(obj) -> Model:
    if not isinstance(obj, dict) or obj.get("format_version") != MODEL_FORMAT:
        got = obj.get("format_version") if isinstance(obj, dict) else None
        raise ModelFormatError(f"unsupported model format_version {got!r}, expected {MODEL_FORMAT!r}")
    try:
        config = ModelConfig.from_dict(obj["config"])
        params = {}
        for name, entry in obj["parameters"].items():
            shape = tuple(int(s) for s in entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
            if data.size != math.prod(shape):
                raise ModelFormatError(f"{name}: {data.size} values for shape {shape}")
            params[name] = data.reshape(shape)
        conv = [
            ChebConvParams(params[f"conv{i}.coeffs"], params[f"conv{i}.bias"])
            for i in range(len(config.channels))
        ]
        dense = DenseParams(params["dense.weights"], params["dense.bias"])
        return Model(config, conv, dense)
    except KeyError as exc:
        raise ModelFormatError(f"missing model entry {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"inconsistent model file: {exc}") from None


def save_model(model: Model, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")
    return path


def load_model(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing model file {path}", location=str(path))
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"cannot parse {path}: {exc}") from None
    return model_from_dict(obj)

"""Region graphs: one node per anatomical ROI, cosine-similarity edges.

Nodes are ordered canonically -- liver first, then tumours by decreasing
voxel count (ties by label, then by first voxel in raster order).  The
node and edge distillation losses rely on this ordering to pair student
and teacher nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, EmptyLiverError, FormatError, MissingInputError, ShapeMismatchError
from .volio import CONNECTIVITY_6, MaskVolume, Volume, resample_labels


@dataclass(frozen=True)
class Region:
    label: int
    mask: np.ndarray  # bool, same dims as the MaskVolume

    @property
    def voxel_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class RegionNode:
    label: int
    voxel_count: int
    feature: np.ndarray


@dataclass(frozen=True)
class RegionGraph:
    nodes: tuple
    edges: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def features(self) -> np.ndarray:
        """Node features stacked as an (N, C) array."""
        return np.stack([n.feature for n in self.nodes])

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"label": int(n.label), "voxel_count": int(n.voxel_count), "feature": [float(x) for x in n.feature]}
                for n in self.nodes
            ],
            "edges": [[float(x) for x in row] for row in self.edges],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "RegionGraph":
        try:
            nodes = tuple(
                RegionNode(int(n["label"]), int(n["voxel_count"]), np.asarray(n["feature"], dtype=np.float64))
                for n in payload["nodes"]
            )
            edges = np.asarray(payload["edges"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed region graph: {exc}") from exc
        if not nodes or edges.shape != (len(nodes), len(nodes)):
            raise FormatError(f"edge matrix shape {edges.shape} does not match {len(nodes)} nodes")
        return cls(nodes, edges)


def save_graph(path, graph: RegionGraph) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), indent=1) + "\n")


def load_graph(path) -> RegionGraph:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing graph file: {path}")
    try:
        return RegionGraph.from_json(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _labels_of(m) -> np.ndarray:
    return m.labels if isinstance(m, MaskVolume) else np.asarray(m)


def extract_regions(m) -> list:
    """Liver region (tumour voxels excluded) followed by one region per tumour component."""
    labels = _labels_of(m)
    liver = labels == 1
    if not liver.any():
        raise EmptyLiverError("extract_regions: mask has no liver voxels")
    tumors = []
    for lab in np.unique(labels[labels >= 2]):
        comp, n = ndimage.label(labels == lab, structure=CONNECTIVITY_6)
        for k in range(1, n + 1):
            region = comp == k
            first = int(np.flatnonzero(region.ravel())[0])
            tumors.append((-int(region.sum()), int(lab), first, region))
    tumors.sort(key=lambda t: t[:3])
    return [Region(1, liver)] + [Region(lab, region) for _, lab, _, region in tumors]


def masked_gap(f: np.ndarray, region) -> np.ndarray:
    """Per-channel mean of a (C, D, H, W) feature volume over the region voxels."""
    mask = region.mask if isinstance(region, Region) else np.asarray(region, dtype=bool)
    f = np.asarray(f)
    if f.ndim != 4 or f.shape[1:] != mask.shape:
        raise ShapeMismatchError(f"feature volume {f.shape} does not match region {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("masked_gap: empty region")
    return f[:, mask].astype(np.float64).sum(axis=1) / count


def cosine_matrix(features: np.ndarray) -> np.ndarray:
    """Cosine similarities between rows; raises on zero-norm rows."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cosine similarity undefined for zero-norm or non-finite node features")
    unit = features / norms[:, None]
    s = unit @ unit.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def build_graph(features, labels=None, voxel_counts=None) -> RegionGraph:
    feats = [np.asarray(f, dtype=np.float64).ravel() for f in features]
    if not feats:
        raise DegenerateInputError("build_graph: need at least one node")
    if len({f.size for f in feats}) != 1:
        raise ShapeMismatchError("build_graph: node features have different lengths")
    stacked = np.stack(feats)
    labels = list(range(1, len(feats) + 1)) if labels is None else list(labels)
    voxel_counts = [1] * len(feats) if voxel_counts is None else list(voxel_counts)
    nodes = tuple(RegionNode(int(l), int(c), f) for l, c, f in zip(labels, voxel_counts, feats))
    return RegionGraph(nodes, cosine_matrix(stacked))


def match_mask_to_features(labels: np.ndarray, feature_dims) -> np.ndarray:
    """Nearest-neighbour map of a label grid onto the feature grid (mask follows features)."""
    feature_dims = tuple(int(d) for d in feature_dims)
    if labels.shape == feature_dims:
        return labels
    return resample_labels(labels, feature_dims)


def graph_from_volume(f: np.ndarray, m) -> RegionGraph:
    """Regions of ``m`` pooled over feature volume ``f`` (C, D, H, W) into a region graph."""
    labels = match_mask_to_features(_labels_of(m), np.asarray(f).shape[1:])
    regions = extract_regions(labels)
    feats = [masked_gap(f, r) for r in regions]
    return build_graph(feats, [r.label for r in regions], [r.voxel_count for r in regions])


def project_node_scores(m, regions, scores) -> Volume:
    """Paint each region with its score; background stays 0."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size != len(regions):
        raise ShapeMismatchError(f"{scores.size} scores for {len(regions)} regions")
    labels = _labels_of(m)
    out = np.zeros(labels.shape, dtype=np.float64)
    for region, score in zip(regions, scores):
        out[region.mask] = score
    spacing = m.spacing if isinstance(m, MaskVolume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)

"""Areal units and their contiguity structure.

Regions are always held in canonical order: the lexicographic order of their
string ids, fixed at ingestion. Every matrix built from a graph (weights,
ICAR structure, Kronecker layouts downstream) uses that order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class UnknownRegionError(KeyError):
    """An edge or record refers to a region id absent from the region set."""


@dataclass(frozen=True)
class RegionSet:
    ids: tuple[str, ...]
    names: tuple[str, ...]
    population: np.ndarray
    area_km2: np.ndarray | None = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("region ids must be unique")
        if list(self.ids) != sorted(self.ids):
            raise ValueError("region ids must be in canonical (sorted) order; use RegionSet.from_records")
        pop = np.asarray(self.population, dtype=float)
        if pop.shape != (len(self.ids),):
            raise ValueError("one population value per region required")
        if np.any(~np.isfinite(pop)) or np.any(pop <= 0):
            raise ValueError("population must be positive for every region")
        object.__setattr__(self, "population", pop)
        if self.area_km2 is not None:
            area = np.asarray(self.area_km2, dtype=float)
            if np.any(area <= 0):
                raise ValueError("area_km2 must be positive")
            object.__setattr__(self, "area_km2", area)

    @classmethod
    def from_records(cls, ids, names=None, population=None, area_km2=None) -> RegionSet:
        ids = [str(i) for i in ids]
        order = np.argsort(ids, kind="stable")
        names = list(ids) if names is None else [str(n) for n in names]
        population = np.ones(len(ids)) if population is None else np.asarray(population, float)
        area = None if area_km2 is None else np.asarray(area_km2, float)[order]
        return cls(
            ids=tuple(ids[k] for k in order),
            names=tuple(names[k] for k in order),
            population=population[order],
            area_km2=area,
        )

    @classmethod
    def read_csv(cls, path) -> RegionSet:
        """Read a region file with header ``id,name,population`` (optional ``area_km2``)."""
        df = pd.read_csv(path, dtype={"id": str, "name": str})
        missing = {"id", "name", "population"} - set(df.columns)
        if missing:
            raise ValueError(f"region file {path} lacks columns {sorted(missing)}")
        area = df["area_km2"].to_numpy(float) if "area_km2" in df.columns else None
        return cls.from_records(df["id"], df["name"], df["population"].to_numpy(float), area)

    def to_csv(self, path) -> None:
        df = pd.DataFrame({"id": self.ids, "name": self.names, "population": self.population})
        if self.area_km2 is not None:
            df["area_km2"] = self.area_km2
        df.to_csv(path, index=False)

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, region_id) -> int:
        try:
            return self._index[str(region_id)]
        except KeyError:
            raise UnknownRegionError(str(region_id)) from None

    @property
    def _index(self) -> dict[str, int]:
        # cached lazily; the dataclass is frozen so bypass __setattr__
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {r: k for k, r in enumerate(self.ids)}
            object.__setattr__(self, "_index_cache", cache)
        return cache


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected contiguity graph over regions in canonical order."""

    ids: tuple[str, ...]
    edges: frozenset[tuple[int, int]]
    neighbor_counts: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @classmethod
    def from_edges(cls, ids, edges) -> AdjacencyGraph:
        ids = tuple(sorted(str(i) for i in ids))
        index = {r: k for k, r in enumerate(ids)}
        canon = set()
        for a, b in edges:
            a, b = str(a), str(b)
            for r in (a, b):
                if r not in index:
                    raise UnknownRegionError(r)
            i, j = index[a], index[b]
            if i == j:
                raise ValueError(f"self-loop on region {a}")
            canon.add((min(i, j), max(i, j)))
        counts = np.zeros(len(ids), dtype=int)
        for i, j in canon:
            counts[i] += 1
            counts[j] += 1
        isolated = [ids[k] for k in np.flatnonzero(counts == 0)]
        if isolated and len(ids) > 1:
            logger.warning("isolated regions without neighbours: %s", ", ".join(isolated))
        return cls(ids=ids, edges=frozenset(canon), neighbor_counts=counts)

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency matrix."""
        if not self.edges:
            return sp.csr_matrix((self.n, self.n))
        i, j = np.array(sorted(self.edges)).T
        data = np.ones(2 * len(i))
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(self.n, self.n))

    def components(self) -> np.ndarray:
        """Component label for every region (labels 0..k-1)."""
        _, labels = connected_components(self.adjacency(), directed=False)
        return labels

    @property
    def isolated(self) -> np.ndarray:
        return np.flatnonzero(self.neighbor_counts == 0)

    def edge_list(self) -> list[tuple[str, str]]:
        return [(self.ids[i], self.ids[j]) for i, j in sorted(self.edges)]


def build_adjacency(regions: RegionSet | list, neighbor_list) -> AdjacencyGraph:
    """Build the contiguity graph from a region set and an edge-pair file or list.

    Duplicate and reversed edges are merged silently; an id missing from the
    region set raises :class:`UnknownRegionError`.
    """
    ids = regions.ids if isinstance(regions, RegionSet) else [str(r) for r in regions]
    if isinstance(neighbor_list, (str, Path)):
        df = pd.read_csv(neighbor_list, dtype=str)
        if list(df.columns[:2]) != ["id_a", "id_b"]:
            raise ValueError(f"neighbor file {neighbor_list} must have header id_a,id_b")
        pairs = list(zip(df["id_a"], df["id_b"]))
    else:
        pairs = list(neighbor_list)
    return AdjacencyGraph.from_edges(ids, pairs)


def write_neighbors(graph: AdjacencyGraph, path) -> None:
    pd.DataFrame(graph.edge_list(), columns=["id_a", "id_b"]).to_csv(path, index=False)


def row_standardize(graph: AdjacencyGraph) -> sp.csr_matrix:
    """Row-standardised weights: w_ij = 1/N_i for neighbours, zero rows for isolated regions."""
    A = graph.adjacency()
    counts = graph.neighbor_counts.astype(float)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return sp.csr_matrix(sp.diags(inv) @ A)


def icar_structure(graph: AdjacencyGraph):
    """ICAR structure matrix R = diag(N) - A, with null space from graph components."""
    from .gmrf import StructureMatrix

    A = graph.adjacency()
    R = sp.csr_matrix(sp.diags(graph.neighbor_counts.astype(float)) - A)
    labels = graph.components()
    k = labels.max() + 1 if graph.n else 0
    basis = np.zeros((graph.n, k))
    for c in range(k):
        members = labels == c
        basis[members, c] = 1.0 / np.sqrt(members.sum())
    return StructureMatrix(R, rank_deficiency=k, null_basis=basis, label="icar")


# --- polygon helpers -------------------------------------------------------


def read_polygons(path) -> dict[str, object]:
    """Read a GeoJSON FeatureCollection keyed by the ``id`` property (or feature id)."""
    from shapely.geometry import shape

    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for feat in doc["features"]:
        rid = feat.get("properties", {}).get("id", feat.get("id"))
        if rid is None:
            raise ValueError("every feature needs an 'id' property")
        geom = shape(feat["geometry"])
        if geom.is_empty or geom.area <= 0:
            raise ValueError(f"degenerate polygon for region {rid}")
        out[str(rid)] = geom
    return dict(sorted(out.items()))


def write_polygons(polygons: dict, path, properties: dict | None = None) -> None:
    from shapely.geometry import mapping

    feats = []
    for rid, geom in sorted(polygons.items()):
        props = {"id": rid}
        if properties and rid in properties:
            props.update(properties[rid])
        feats.append({"type": "Feature", "id": rid, "properties": props, "geometry": mapping(geom)})
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)


def neighbors_from_polygons(polygons: dict, contiguity: str = "queen", tol: float = 1e-9):
    """Derive contiguity pairs from polygons.

    ``queen`` links polygons sharing at least one boundary point, ``rook``
    requires a shared boundary segment of positive length.
    """
    if contiguity not in ("queen", "rook"):
        raise ValueError("contiguity must be 'queen' or 'rook'")
    ids = sorted(polygons)
    pairs = []
    for a_pos, a in enumerate(ids):
        ga = polygons[a]
        for b in ids[a_pos + 1:]:
            gb = polygons[b]
            if ga.distance(gb) > tol:
                continue
            if contiguity == "rook" and ga.boundary.intersection(gb.boundary).length <= tol:
                continue
            pairs.append((a, b))
    return pairs

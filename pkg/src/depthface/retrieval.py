"""Part-wise database retrieval over pseudo-landmark and orientation
descriptors.

An index is built once over the registered database (every mesh on the
shared template topology) and is immutable afterwards. Queries compare
input part descriptors against each database entry with the combined
distance d_pts + alpha * d_normals and return one full ranking per part.
By default every database mesh is landmark-warped toward the query
before comparison, which removes coarse shape differences so that the
ranking is driven by part-level detail; warping recomputes the entry
descriptors per query, so a no-warp mode is available that compares the
cached descriptors directly, trading accuracy for speed.

The scan is exhaustive and single threaded. Ranking order is the sort
by (distance, entry id), so results are deterministic regardless of how
the per-entry distances would be scheduled.
"""

import json
import logging
from pathlib import Path
from types import MappingProxyType

import numpy as np
from sklearn.base import BaseEstimator

from .align import landmark_warp
from .dataset import FULL83_NAMES, landmark_vertex_ids, parameter_hash
from .depthio import LandmarkSet
from .errors import (
    InsufficientLandmarks,
    ParamMismatch,
    TopologyMismatch,
    UnknownId,
    UnreadableFile,
)
from .features import (
    DEFAULT_ALPHA,
    DEFAULT_BINS,
    DEFAULT_M,
    DEFAULT_N,
    PART_NAMES,
    PartDescriptor,
    PartDistance,
    PartMask,
    combined_distance,
    load_descriptors,
    part_descriptor,
    save_descriptors,
    validate_part_masks,
)

__all__ = [
    "DescriptorIndex",
    "PartMask",
    "PartRetriever",
    "RetrievalResult",
    "build_index",
    "load_index",
    "query",
    "rank_of",
    "save_index",
]

logger = logging.getLogger(__name__)

DESCRIPTOR_FILE = "descriptors.bin"
MANIFEST_FILE = "manifest.json"

# minimum landmarks shared between query and index before the warp
# field is considered determined
_MIN_WARP_LANDMARKS = 4


class RetrievalResult:
    """Full ranking of the database for one part.

    ``ranking`` is a tuple of (entry id, PartDistance) pairs in
    ascending distance order, ties broken by ascending id. ``best`` is
    the top-ranked entry id.
    """

    __slots__ = ("part", "ranking")

    def __init__(self, part, ranking):
        self.part = str(part)
        ranking = tuple((str(i), d) for i, d in ranking)
        if not ranking:
            raise ValueError(f"empty ranking for part {self.part!r}")
        for _, dist in ranking:
            if not isinstance(dist, PartDistance):
                raise TypeError(
                    f"ranking entries must be (id, PartDistance), got {dist!r}"
                )
        self.ranking = ranking

    @property
    def best(self):
        return self.ranking[0][0]

    def __len__(self):
        return len(self.ranking)

    def __repr__(self):
        return (
            f"RetrievalResult(part={self.part!r}, best={self.best!r}, "
            f"n={len(self.ranking)})"
        )


def rank_of(result, entry_id):
    """1-based position of an entry in a part ranking.

    The best match has rank 1, the worst rank N.

    Raises
    ------
    UnknownId
        The id does not appear in the ranking.
    """
    entry_id = str(entry_id)
    for pos, (eid, _) in enumerate(result.ranking, start=1):
        if eid == entry_id:
            return pos
    raise UnknownId(
        f"entry {entry_id!r} not in the {result.part!r} ranking"
    )


class DescriptorIndex:
    """Immutable per-part descriptor cache over a registered database.

    Holds the grid and histogram parameters, the per-part alpha map,
    one PartDescriptor per (entry id, part), and the registered rest
    meshes themselves, which the query-time warp deforms toward each
    query. ``anchors`` are the template vertex ids of the sellion and
    chin tip used to place the slicing planes, and ``landmarks`` maps
    landmark names to template vertex ids for the warp.
    """

    __slots__ = (
        "_ids",
        "_meshes",
        "_masks",
        "_m",
        "_n",
        "_bins",
        "_alphas",
        "_anchors",
        "_landmarks",
        "_descriptors",
    )

    def __init__(self, ids, meshes, masks, m, n, bins, alphas, anchors,
                 landmarks, descriptors):
        object.__setattr__(self, "_ids", tuple(str(i) for i in ids))
        object.__setattr__(self, "_meshes", MappingProxyType(dict(meshes)))
        # name order, so built and cache-loaded indexes agree
        object.__setattr__(
            self, "_masks", tuple(sorted(masks, key=lambda mask: mask.name))
        )
        object.__setattr__(self, "_m", int(m))
        object.__setattr__(self, "_n", int(n))
        object.__setattr__(self, "_bins", int(bins))
        object.__setattr__(self, "_alphas", MappingProxyType(dict(alphas)))
        object.__setattr__(
            self, "_anchors", (int(anchors[0]), int(anchors[1]))
        )
        object.__setattr__(
            self,
            "_landmarks",
            MappingProxyType(
                {str(k): int(v) for k, v in dict(landmarks).items()}
            ),
        )
        object.__setattr__(
            self, "_descriptors", MappingProxyType(dict(descriptors))
        )

    def __setattr__(self, name, value):
        raise AttributeError(f"DescriptorIndex is immutable; cannot set {name!r}")

    @property
    def ids(self):
        return self._ids

    @property
    def meshes(self):
        return self._meshes

    @property
    def masks(self):
        return self._masks

    @property
    def m(self):
        return self._m

    @property
    def n(self):
        return self._n

    @property
    def bins(self):
        return self._bins

    @property
    def alphas(self):
        return self._alphas

    @property
    def anchors(self):
        return self._anchors

    @property
    def landmarks(self):
        return self._landmarks

    @property
    def descriptors(self):
        return self._descriptors

    @property
    def parts(self):
        return tuple(mask.name for mask in self.masks)

    @property
    def params(self):
        return {
            "m": self.m,
            "n": self.n,
            "bins": self.bins,
            "alphas": dict(self.alphas),
        }

    @property
    def parameter_hash(self):
        return parameter_hash(self.params)

    def __len__(self):
        return len(self.ids)

    def __repr__(self):
        return (
            f"DescriptorIndex(entries={len(self.ids)}, "
            f"parts={len(self.masks)}, m={self.m}, n={self.n}, "
            f"bins={self.bins})"
        )


def _normalize_database(database):
    """(id, mesh) pairs from (id, mesh) or (id, mesh, rms) records."""
    pairs = []
    seen = set()
    for record in database:
        entry_id, mesh = str(record[0]), record[1]
        if entry_id in seen:
            raise ValueError(f"duplicate database id {entry_id!r}")
        seen.add(entry_id)
        pairs.append((entry_id, mesh))
    if not pairs:
        raise ValueError("database is empty")
    return pairs


def _default_anchors(num_vertices):
    ids = landmark_vertex_ids(("sellion", "chin_tip"))
    if ids.max() >= num_vertices:
        raise ValueError(
            "meshes are not on the shared head grid; pass anchors "
            "(sellion and chin tip vertex ids) explicitly"
        )
    return int(ids[0]), int(ids[1])


def _default_landmarks(num_vertices):
    ids = landmark_vertex_ids(FULL83_NAMES)
    if ids.max() >= num_vertices:
        raise ValueError(
            "meshes are not on the shared head grid; pass a landmarks "
            "name-to-vertex-id map explicitly"
        )
    return dict(zip(FULL83_NAMES, (int(i) for i in ids)))


def build_index(database, masks, m=DEFAULT_M, n=DEFAULT_N, bins=DEFAULT_BINS,
                alphas=None, anchors=None, landmarks=None):
    """Build the retrieval index over a registered database.

    ``database`` is a list of (id, mesh) pairs, or the (id, mesh, rms)
    triples produced by database registration. All meshes must share
    one topology; ``masks`` are the part masks on that topology. One
    descriptor per (entry, part) is computed and cached. ``anchors``
    and ``landmarks`` identify the slicing anchors and the warp
    landmarks by template vertex id; both default to the shared head
    grid's fixed table.

    Raises
    ------
    TopologyMismatch
        A mesh does not match the first entry's topology, or a mask
        references a vertex outside it.
    """
    pairs = _normalize_database(database)
    masks = validate_part_masks(masks)
    if alphas is None:
        alphas = dict(DEFAULT_ALPHA)
    part_names = [mask.name for mask in masks]
    if set(alphas) != set(part_names):
        raise ValueError(
            f"alpha map keys {sorted(alphas)} do not match parts "
            f"{sorted(part_names)}"
        )

    first = pairs[0][1]
    for entry_id, mesh in pairs:
        if not mesh.same_topology(first):
            raise TopologyMismatch(
                f"entry {entry_id!r} has {mesh.num_vertices} vertices and "
                f"{mesh.num_triangles} triangles, expected "
                f"{first.num_vertices} and {first.num_triangles}"
            )
    for mask in masks:
        if len(mask) and int(np.max(mask.vertices)) >= first.num_vertices:
            raise TopologyMismatch(
                f"mask {mask.name!r} references vertex "
                f"{int(np.max(mask.vertices))}, mesh has only "
                f"{first.num_vertices}"
            )

    if anchors is None:
        anchors = _default_anchors(first.num_vertices)
    if landmarks is None:
        landmarks = _default_landmarks(first.num_vertices)

    descriptors = {}
    for entry_id, mesh in pairs:
        sellion = mesh.vertices[anchors[0]]
        chin = mesh.vertices[anchors[1]]
        for mask in masks:
            descriptors[(entry_id, mask.name)] = part_descriptor(
                mesh, mask, sellion, chin, m=m, n=n, bins=bins
            )
    logger.info(
        "built index: %d entries x %d parts = %d descriptors",
        len(pairs), len(masks), len(descriptors),
    )
    return DescriptorIndex(
        ids=[i for i, _ in pairs],
        meshes=dict(pairs),
        masks=masks,
        m=m,
        n=n,
        bins=bins,
        alphas=alphas,
        anchors=anchors,
        landmarks=landmarks,
        descriptors=descriptors,
    )


def _query_positions(query_landmarks, names):
    """Positions of the named landmarks, skipping missing or invalid."""
    if isinstance(query_landmarks, LandmarkSet):
        if not query_landmarks.is_3d:
            raise ValueError("query landmarks must be 3D")
        found = [n for n in names if query_landmarks.has(n)]
        return found, np.array([query_landmarks.get(n) for n in found])
    table = dict(query_landmarks)
    found = [n for n in names if n in table]
    return found, np.asarray([table[n] for n in found], dtype=np.float64)


def _entry_descriptors(index, entry_id, query_landmarks):
    """Descriptors of one entry after warping it toward the query."""
    mesh = index.meshes[entry_id]
    names = list(index.landmarks)
    found, dst = _query_positions(query_landmarks, names)
    if len(found) < _MIN_WARP_LANDMARKS:
        raise InsufficientLandmarks(
            f"query shares only {len(found)} landmarks with the index, "
            f"need at least {_MIN_WARP_LANDMARKS}; pass warp=False to "
            "compare unwarped descriptors"
        )
    src_ids = np.array([index.landmarks[n] for n in found])
    warped = landmark_warp(mesh, mesh.vertices[src_ids], dst)
    sellion = warped.vertices[index.anchors[0]]
    chin = warped.vertices[index.anchors[1]]
    return {
        mask.name: part_descriptor(
            warped, mask, sellion, chin, m=index.m, n=index.n,
            bins=index.bins,
        )
        for mask in index.masks
    }


def query(index, input_descriptors, query_landmarks=None, warp=True,
          alphas=None, normals_only=False):
    """Rank every database entry against the query, per part.

    ``input_descriptors`` holds one PartDescriptor per index part
    (a dict keyed by part name, or a list). With ``warp`` enabled
    (the default) each database rest mesh is landmark-warped toward
    ``query_landmarks`` before its descriptors are recomputed and
    compared; with ``warp=False`` the cached descriptors are compared
    directly. ``alphas`` overrides the index's per-part alpha map;
    ``normals_only`` ranks by the histogram distance alone, the
    alpha-to-infinity limit of the combined distance.

    Returns one RetrievalResult per part, in index part order. Ties in
    the ranking key are broken by ascending entry id.

    Raises
    ------
    ParamMismatch
        An input descriptor's grid shape or histogram binning differs
        from the index parameters.
    InsufficientLandmarks
        Warping requested but fewer than four query landmarks match
        the index's landmark table.
    """
    by_part = input_descriptors
    if not isinstance(by_part, dict):
        by_part = {d.part: d for d in input_descriptors}
    missing = [p for p in index.parts if p not in by_part]
    if missing:
        raise ValueError(f"query lacks descriptors for parts {missing}")
    for part in index.parts:
        desc = by_part[part]
        if (desc.grid.m, desc.grid.n) != (index.m, index.n):
            raise ParamMismatch(
                f"query {part!r} grid is ({desc.grid.m}, {desc.grid.n}), "
                f"index uses ({index.m}, {index.n})"
            )
        if desc.histogram.shape != (index.bins, index.bins):
            raise ParamMismatch(
                f"query {part!r} histogram shape {desc.histogram.shape}, "
                f"index uses ({index.bins}, {index.bins})"
            )
    if alphas is None:
        alphas = index.alphas
    elif set(alphas) != set(index.parts):
        raise ValueError(
            f"alpha map keys {sorted(alphas)} do not match parts "
            f"{sorted(index.parts)}"
        )

    if warp:
        if query_landmarks is None:
            raise ValueError(
                "warped query needs query_landmarks; pass warp=False to "
                "compare unwarped descriptors"
            )
        entry_desc = {
            entry_id: _entry_descriptors(index, entry_id, query_landmarks)
            for entry_id in index.ids
        }
    else:
        entry_desc = {
            entry_id: {
                part: index.descriptors[(entry_id, part)]
                for part in index.parts
            }
            for entry_id in index.ids
        }

    results = []
    for part in index.parts:
        scored = []
        for entry_id in index.ids:
            dist = combined_distance(
                by_part[part], entry_desc[entry_id][part], alphas[part]
            )
            key = dist.d_normals if normals_only else dist.combined
            scored.append((key, entry_id, dist))
        scored.sort(key=lambda t: (t[0], t[1]))
        results.append(
            RetrievalResult(part, [(eid, d) for _, eid, d in scored])
        )
    return results


def save_index(index, directory):
    """Write the index cache: a descriptor file plus a JSON manifest.

    The descriptor file is sorted by (id, part) and the manifest is
    written with sorted keys, so rebuilding from identical inputs
    produces byte-identical files. The registered meshes themselves are
    not stored here; load_index takes them from the database.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    desc_path = directory / DESCRIPTOR_FILE
    save_descriptors(desc_path, dict(index.descriptors), index.m, index.n,
                     index.bins)
    manifest = {
        "ids": list(index.ids),
        "m": index.m,
        "n": index.n,
        "bins": index.bins,
        "alphas": dict(index.alphas),
        "anchors": list(index.anchors),
        "landmarks": dict(index.landmarks),
        "masks": {
            mask.name: {
                "vertices": [int(v) for v in mask.vertices],
                "weights": [float(w) for w in mask.feather],
            }
            for mask in index.masks
        },
        "parameter_hash": index.parameter_hash,
    }
    manifest_path = directory / MANIFEST_FILE
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return desc_path, manifest_path


def load_index(directory, database):
    """Rebuild an index from its cache directory and the rest meshes.

    ``database`` must provide exactly the ids listed in the manifest,
    as (id, mesh) pairs or (id, mesh, rms) triples.

    Raises
    ------
    UnreadableFile
        Missing or inconsistent cache files.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.is_file():
        raise UnreadableFile(f"no index manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        ids = [str(i) for i in manifest["ids"]]
        m, n, bins = (int(manifest[k]) for k in ("m", "n", "bins"))
        alphas = {str(k): float(v) for k, v in manifest["alphas"].items()}
        anchors = tuple(int(a) for a in manifest["anchors"])
        landmarks = {
            str(k): int(v) for k, v in manifest["landmarks"].items()
        }
        masks = [
            PartMask(name, rec["vertices"], rec["weights"])
            for name, rec in sorted(manifest["masks"].items())
        ]
        stored_hash = manifest["parameter_hash"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UnreadableFile(f"{manifest_path}: bad index manifest: {exc}") from exc

    records, cm, cn, cbins = load_descriptors(directory / DESCRIPTOR_FILE)
    if (cm, cn, cbins) != (m, n, bins):
        raise UnreadableFile(
            f"{directory}: descriptor cache is ({cm}, {cn}, {cbins}), "
            f"manifest says ({m}, {n}, {bins})"
        )
    part_names = {mask.name for mask in masks}
    expected = {(i, p) for i in ids for p in part_names}
    if set(records) != expected:
        raise UnreadableFile(
            f"{directory}: descriptor cache does not cover the manifest's "
            "(id, part) set"
        )

    pairs = _normalize_database(database)
    given = {i for i, _ in pairs}
    if given != set(ids):
        raise ValueError(
            f"database ids do not match the manifest: missing "
            f"{sorted(set(ids) - given)}, extra {sorted(given - set(ids))}"
        )
    index = DescriptorIndex(
        ids=ids,
        meshes=dict(pairs),
        masks=masks,
        m=m,
        n=n,
        bins=bins,
        alphas=alphas,
        anchors=anchors,
        landmarks=landmarks,
        descriptors=records,
    )
    if index.parameter_hash != stored_hash:
        raise UnreadableFile(
            f"{directory}: parameter hash {index.parameter_hash} does not "
            f"match manifest {stored_hash}"
        )
    return index


class PartRetriever(BaseEstimator):
    """Estimator wrapper around index building and querying.

    fit() builds the index over a registered database; predict() ranks
    the database against query descriptors. Parameters mirror
    build_index and query.
    """

    def __init__(self, m=DEFAULT_M, n=DEFAULT_N, bins=DEFAULT_BINS,
                 alphas=None, warp=True, normals_only=False):
        self.m = m
        self.n = n
        self.bins = bins
        self.alphas = alphas
        self.warp = warp
        self.normals_only = normals_only

    def fit(self, database, masks, anchors=None, landmarks=None):
        self.index_ = build_index(
            database, masks, m=self.m, n=self.n, bins=self.bins,
            alphas=self.alphas, anchors=anchors, landmarks=landmarks,
        )
        return self

    def predict(self, input_descriptors, query_landmarks=None):
        if not hasattr(self, "index_"):
            raise RuntimeError("PartRetriever is not fitted")
        return query(
            self.index_, input_descriptors, query_landmarks=query_landmarks,
            warp=self.warp, normals_only=self.normals_only,
        )

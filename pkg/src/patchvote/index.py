"""Immutable patch database and two-stage majority-vote retrieval.

Build: every database shape is rendered at each canonical view, patch
rects are sampled, empties dropped, and the shape tower embeds each
patch into a unit vector stored as f32. Retrieval: Kq query patches
vote; each patch elects the modal shape among its Kr nearest records,
and the object-level answer is the majority over patch winners, with
ties resolved by aggregate similarity then shape id.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import Config, to_dict
from .descriptor import PatchRect, content_rect, sample_patches
from .embed import TowerParams, image_patch_features, shape_patch_features, tower_forward
from .errors import EmptyIndexError, FormatError, NoRetrievalError, RenderError
from .mesh import TriMesh
from .render import ShadedRender, rasterize, scene_light
from .views import ViewSet

INDEX_MAGIC = b"P2CI"
INDEX_VERSION = 1


@dataclass
class PatchIndex:
    embeddings: np.ndarray  # (N, d) float32 unit rows
    shape_ids: np.ndarray   # (N,) int64
    view_ids: np.ndarray    # (N,) int64
    rects: np.ndarray       # (N, 4) int64: x, y, w, h
    manifest: dict          # shapes, views, config, build inputs

    def __len__(self) -> int:
        return len(self.embeddings)

    def category_of(self, shape_id: int) -> str:
        return self.manifest["shapes"][str(shape_id)]["category"]


def derive_seed(base: int, shape_id: int, view_id: int) -> int:
    """Stable per-(shape, view) stream, independent of build order."""
    ss = np.random.SeedSequence(entropy=base, spawn_key=(shape_id, view_id))
    return int(ss.generate_state(1)[0])


def enumerate_view_patches(
    shapes: dict[int, TriMesh],
    views: ViewSet,
    patches_per_view: int,
    cfg: Config,
):
    """Yield (shape_id, view_id, normal map, non-empty rects) per rendered view.

    The single source of record identity: index construction and training
    corpus assembly both consume this, so record ids line up by position.
    Views with an empty projection are skipped, as are empty patches.
    Every rect is anchored to its content centroid before use (see
    content_rect), with the noiseless shading as the weight so the
    placement matches what the image domain computes from a photograph
    of the same surface. Rects that collapse onto the same placement
    are deduplicated, so patches_per_view is an upper bound per view.
    """
    light = scene_light()
    for sid in sorted(shapes):
        mesh = shapes[sid]
        for vid, view in enumerate(views.medoids):
            try:
                nmap = rasterize(mesh, view, cfg.render_resolution)
            except RenderError:
                continue  # a fully empty view costs records, not the build
            patch_seed = derive_seed(cfg.seed, sid, vid)
            patches = sample_patches(
                nmap, cfg.patch_fraction, patches_per_view, patch_seed,
                cfg.min_coverage,
            )
            lambert = np.maximum(0.0, nmap.normals @ light)
            lambert[~nmap.mask] = 0.0
            kept = []
            seen = set()
            for r in patches:
                if r.empty:
                    continue
                snapped = content_rect(lambert, nmap.mask, r)
                if (snapped.x, snapped.y) not in seen:
                    seen.add((snapped.x, snapped.y))
                    kept.append(snapped)
            if kept:
                yield sid, vid, nmap, kept


def build_index(
    shapes: dict[int, TriMesh],
    views: ViewSet,
    model: TowerParams,
    patches_per_view: int,
    cfg: Config,
    mesh_paths: dict[int, str] | None = None,
) -> PatchIndex:
    """Render, sample, and embed every shape x view into one flat index."""
    if not shapes:
        raise EmptyIndexError("no shapes to index")
    embeddings = []
    shape_ids = []
    view_ids = []
    rects = []
    for sid, vid, nmap, kept in enumerate_view_patches(
        shapes, views, patches_per_view, cfg
    ):
        feats = [
            shape_patch_features(nmap.normals, r, cfg.pool_size) for r in kept
        ]
        Y = tower_forward(model.shape, np.stack(feats)).Y
        embeddings.append(Y.astype(np.float32))
        for r in kept:
            shape_ids.append(sid)
            view_ids.append(vid)
            rects.append((r.x, r.y, r.w, r.h))
    if not embeddings:
        raise EmptyIndexError("index build produced no records")
    manifest = {
        "shapes": {
            str(sid): {
                "category": shapes[sid].category,
                "obj": (mesh_paths or {}).get(sid, ""),
            }
            for sid in sorted(shapes)
        },
        "views": {
            "n": len(views.medoids),
            "medoids": [[float(c) for c in q] for q in views.medoids],
            "seed": views.seed,
            "source_size": views.source_size,
        },
        "config": to_dict(cfg),
        "patches_per_view": patches_per_view,
    }
    return PatchIndex(
        embeddings=np.vstack(embeddings),
        shape_ids=np.asarray(shape_ids, dtype=np.int64),
        view_ids=np.asarray(view_ids, dtype=np.int64),
        rects=np.asarray(rects, dtype=np.int64),
        manifest=manifest,
    )


def knn_query(
    index: PatchIndex,
    query: np.ndarray,
    k: int,
    subset: np.ndarray | None = None,
) -> list[tuple[int, float]]:
    """Exact top-k by cosine similarity; ties break to the lower record id.

    `subset` restricts the search to the given record ids (used for
    category-conditioned retrieval).
    """
    if len(index) == 0:
        raise EmptyIndexError("index holds no records")
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.arange(len(index)) if subset is None else np.asarray(subset)
    if len(ids) == 0:
        raise EmptyIndexError("no records in the searched subset")
    emb = index.embeddings[ids].astype(np.float64)
    sims = emb @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((ids, -sims))[:k]
    return [(int(ids[i]), float(sims[i])) for i in order]


@dataclass
class PatchVote:
    rect: PatchRect
    winner: int
    best_similarity: float
    neighbors: list[tuple[int, float]]


@dataclass
class RetrievalResult:
    ranking: list[tuple[int, int, float]]  # (shape_id, votes, aggregate)
    patch_votes: list[PatchVote] = field(default_factory=list)
    excluded_patches: int = 0

    def ranked_ids(self) -> list[int]:
        return [sid for sid, _, _ in self.ranking]


def _elect(neighbors: list[tuple[int, float]], shape_ids: np.ndarray):
    """Modal shape among the neighbors; ties by summed sim then lower id."""
    tally: dict[int, list[float]] = {}
    for rid, sim in neighbors:
        tally.setdefault(int(shape_ids[rid]), []).append(sim)
    best = max(
        tally.items(), key=lambda kv: (len(kv[1]), sum(kv[1]), -kv[0])
    )
    winner = best[0]
    return winner, max(best[1])


def retrieve_shape(
    index: PatchIndex,
    query_raster: ShadedRender,
    instance_mask: np.ndarray,
    model: TowerParams,
    kq: int,
    kr: int,
    seed: int,
    cfg: Config | None = None,
    category: str | None = None,
) -> RetrievalResult:
    """Two-stage majority vote over Kq query patches and Kr neighbors each."""
    if kq < 1 or kr < 1:
        raise ValueError("kq and kr must be >= 1")
    if len(index) == 0:
        raise EmptyIndexError("index holds no records")
    cfg = cfg or Config(**index.manifest["config"])

    subset = None
    if category is not None:
        subset = np.flatnonzero(
            np.array(
                [index.category_of(int(s)) == category for s in index.shape_ids]
            )
        )
    patches = sample_patches(
        query_raster, cfg.patch_fraction, kq, seed, cfg.min_coverage
    )
    survivors = []
    for r in patches:
        overlap = instance_mask[r.y : r.y + r.h, r.x : r.x + r.w].any()
        if overlap:
            survivors.append(
                content_rect(query_raster.intensity, query_raster.mask, r)
            )
    if not survivors:
        raise NoRetrievalError("every query patch was excluded")

    feats = np.stack(
        [
            image_patch_features(query_raster.intensity, r, cfg.pool_size)
            for r in survivors
        ]
    )
    Y = tower_forward(model.image, feats).Y

    votes: list[PatchVote] = []
    seen_shapes: set[int] = set()
    for r, y in zip(survivors, Y):
        neighbors = knn_query(index, y, kr, subset=subset)
        winner, best = _elect(neighbors, index.shape_ids)
        votes.append(
            PatchVote(rect=r, winner=winner, best_similarity=best, neighbors=neighbors)
        )
        seen_shapes.update(int(index.shape_ids[rid]) for rid, _ in neighbors)

    counts: dict[int, int] = {}
    aggregates: dict[int, float] = {}
    for v in votes:
        counts[v.winner] = counts.get(v.winner, 0) + 1
        aggregates[v.winner] = aggregates.get(v.winner, 0.0) + v.best_similarity
    for sid in seen_shapes:
        counts.setdefault(sid, 0)
        aggregates.setdefault(sid, 0.0)
    ranking = sorted(
        ((sid, n, aggregates[sid]) for sid, n in counts.items()),
        key=lambda row: (-row[1], -row[2], row[0]),
    )
    return RetrievalResult(
        ranking=ranking,
        patch_votes=votes,
        excluded_patches=len(patches) - len(survivors),
    )


# ---------------------------------------------------------------------------
# index file format


def save_index(index: PatchIndex, path: str) -> None:
    manifest_blob = json.dumps(index.manifest, sort_keys=True).encode("utf-8")
    n, d = index.embeddings.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, n, d))
        fh.write(struct.pack("<I", len(manifest_blob)))
        fh.write(manifest_blob)
        for i in range(n):
            fh.write(
                struct.pack(
                    "<II4I",
                    int(index.shape_ids[i]),
                    int(index.view_ids[i]),
                    *(int(v) for v in index.rects[i]),
                )
            )
            fh.write(np.ascontiguousarray(index.embeddings[i], dtype="<f4").tobytes())


def load_index(path: str) -> PatchIndex:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != INDEX_MAGIC:
        raise FormatError("not an index file (bad magic)")
    if len(buf) < 20:
        raise FormatError("truncated index header")
    version, n, d = struct.unpack_from("<III", buf, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    (mlen,) = struct.unpack_from("<I", buf, 16)
    offset = 20
    if offset + mlen > len(buf):
        raise FormatError("truncated index manifest")
    manifest = json.loads(buf[offset : offset + mlen].decode("utf-8"))
    offset += mlen
    rec_size = 24 + 4 * d
    if len(buf) - offset != n * rec_size:
        raise FormatError(
            f"index payload size {len(buf) - offset} != expected {n * rec_size}"
        )
    shape_ids = np.empty(n, dtype=np.int64)
    view_ids = np.empty(n, dtype=np.int64)
    rects = np.empty((n, 4), dtype=np.int64)
    embeddings = np.empty((n, d), dtype=np.float32)
    for i in range(n):
        vals = struct.unpack_from("<II4I", buf, offset)
        shape_ids[i] = vals[0]
        view_ids[i] = vals[1]
        rects[i] = vals[2:6]
        offset += 24
        embeddings[i] = np.frombuffer(buf, dtype="<f4", count=d, offset=offset)
        offset += 4 * d
    return PatchIndex(
        embeddings=embeddings,
        shape_ids=shape_ids,
        view_ids=view_ids,
        rects=rects,
        manifest=manifest,
    )

"""Parametric box-assembled shapes and retrieval benchmarks.

Shapes are unions of axis-aligned boxes (chairs, tables, cabinets)
driven by a small parameter vector. Benchmark generation draws the
parameters from small per-category pools, so distinct shapes share
exact part dimensions by construction, and held-out query shapes are
mutations of a database parent. That gives leave-out queries a known
best match while guaranteeing the query shape itself is absent from
the database.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SynthError
from .mesh import TriMesh, normalize_mesh, save_obj
from .views import default_view_grid, perturb_quat

CATEGORIES = ("chair", "table", "cabinet")

# Query views sit a bounded angle away from a canonical view: far enough
# that no query duplicates a database render, close enough that the
# canonical grid still covers what the query sees. The band is sampled
# uniformly (uniform axis, uniform angle, uniform choice of base view).
QUERY_GAP_MIN = np.radians(3.0)
QUERY_GAP_MAX = np.radians(10.0)

# Standalone benchmarks derive the canonical grid themselves; the seed
# offset and pool size mirror the retrieval pipeline's view selection so
# both paths agree on the grid for a given seed.
_VIEW_GRID_OFFSET = 11
_VIEW_GRID_POOL = 256
_VIEW_GRID_SIZE = 16

# parameter name -> (low, high); drawer_count is an integer-valued param
PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "chair": {
        "leg_height": (0.15, 1.1),
        "leg_thickness": (0.03, 0.2),
        "seat_width": (0.3, 1.1),
        "seat_depth": (0.3, 1.0),
        "seat_thickness": (0.04, 0.22),
        "back_height": (0.15, 1.0),
        "back_thickness": (0.03, 0.18),
        "slat_count": (1, 4),
    },
    "table": {
        "leg_height": (0.2, 1.1),
        "leg_thickness": (0.03, 0.2),
        "top_width": (0.5, 1.6),
        "top_depth": (0.4, 1.4),
        "top_thickness": (0.04, 0.25),
        "plank_count": (1, 3),
    },
    "cabinet": {
        "width": (0.35, 1.5),
        "height": (0.3, 1.5),
        "depth": (0.25, 0.9),
        "drawer_count": (2, 6),
        "front_thickness": (0.03, 0.12),
    },
}


@dataclass
class SynthSpec:
    category: str
    params: dict[str, float]
    seed: int = 0


@dataclass
class Query:
    shape_id: int
    view_quat: np.ndarray
    aug_seed: int
    leave_out: bool
    gt_shape_id: int  # the shape recall is scored against


@dataclass
class ShapeEntry:
    spec: SynthSpec
    mesh: TriMesh
    parent_id: int = -1  # database parent for held-out shapes


@dataclass
class Benchmark:
    shapes: dict[int, ShapeEntry]
    database_ids: list[int]
    queries: list[Query]
    seed: int = 0

    def categories(self) -> dict[int, str]:
        return {sid: e.spec.category for sid, e in self.shapes.items()}


_BOX_QUADS = (
    (1, 3, 2, 0), (6, 7, 5, 4),
    (4, 5, 1, 0), (3, 7, 6, 2),
    (2, 6, 4, 0), (5, 7, 3, 1),
)


def _box(cx, cy, cz, sx, sy, sz):
    """Axis-aligned box: center (cx,cy,cz), full sizes (sx,sy,sz)."""
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    verts = np.array(
        [
            [cx + (ix * 2 - 1) * hx, cy + (iy * 2 - 1) * hy, cz + (iz * 2 - 1) * hz]
            for ix in (0, 1)
            for iy in (0, 1)
            for iz in (0, 1)
        ]
    )
    tris = []
    for a, b, c, d in _BOX_QUADS:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return verts, np.array(tris)


def _merge(boxes) -> TriMesh:
    verts = []
    tris = []
    offset = 0
    for v, t in boxes:
        verts.append(v)
        tris.append(t + offset)
        offset += len(v)
    return TriMesh(np.vstack(verts), np.vstack(tris))


def _check_params(spec: SynthSpec) -> None:
    ranges = PARAM_RANGES.get(spec.category)
    if ranges is None:
        raise SynthError(f"unknown category: {spec.category}")
    missing = sorted(set(ranges) - set(spec.params))
    if missing:
        raise SynthError(f"missing parameter: {missing[0]}")
    for name, value in spec.params.items():
        if name not in ranges:
            raise SynthError(f"unknown parameter: {name}")
        lo, hi = ranges[name]
        if not lo <= value <= hi:
            raise SynthError(f"{name}={value} outside [{lo}, {hi}]")


def _chair_boxes(p):
    lh, lt = p["leg_height"], p["leg_thickness"]
    sw, sd, st = p["seat_width"], p["seat_depth"], p["seat_thickness"]
    bh, bt = p["back_height"], p["back_thickness"]
    slats = int(round(p["slat_count"]))
    boxes = []
    for dx in (-1, 1):
        for dz in (-1, 1):
            boxes.append(
                _box(dx * (sw - lt) / 2, lh / 2, dz * (sd - lt) / 2, lt, lh, lt)
            )
    boxes.append(_box(0.0, lh + st / 2, 0.0, sw, st, sd))
    # back as evenly spaced vertical slats; a single slat is a solid panel
    z = -(sd - bt) / 2
    if slats == 1:
        boxes.append(_box(0.0, lh + st + bh / 2, z, sw, bh, bt))
    else:
        pitch = sw / slats
        width = pitch * 0.55
        x0 = -sw / 2 + pitch / 2
        for i in range(slats):
            boxes.append(_box(x0 + i * pitch, lh + st + bh / 2, z, width, bh, bt))
    return boxes


def _table_boxes(p):
    lh, lt = p["leg_height"], p["leg_thickness"]
    tw, td, tt = p["top_width"], p["top_depth"], p["top_thickness"]
    planks = int(round(p["plank_count"]))
    boxes = []
    for dx in (-1, 1):
        for dz in (-1, 1):
            boxes.append(
                _box(dx * (tw - lt) / 2, lh / 2, dz * (td - lt) / 2, lt, lh, lt)
            )
    # top as evenly spaced planks along depth; a single plank is a solid top
    if planks == 1:
        boxes.append(_box(0.0, lh + tt / 2, 0.0, tw, tt, td))
    else:
        pitch = td / planks
        depth = pitch * 0.6
        z0 = -td / 2 + pitch / 2
        for i in range(planks):
            boxes.append(_box(0.0, lh + tt / 2, z0 + i * pitch, tw, tt, depth))
    return boxes


def _cabinet_boxes(p):
    w, h, d = p["width"], p["height"], p["depth"]
    n = int(round(p["drawer_count"]))
    ft = p["front_thickness"]
    boxes = [_box(0.0, h / 2, 0.0, w, h, d)]
    slot = h / n
    for i in range(n):
        cy = slot * (i + 0.5)
        boxes.append(_box(0.0, cy, d / 2 + ft / 2, w * 0.85, slot * 0.7, ft))
    return boxes


_BUILDERS = {"chair": _chair_boxes, "table": _table_boxes, "cabinet": _cabinet_boxes}


def generate_shape(spec: SynthSpec) -> TriMesh:
    """Assemble the category template and normalize; pure in the spec."""
    _check_params(spec)
    mesh = _merge(_BUILDERS[spec.category](spec.params))
    mesh.category = spec.category
    return normalize_mesh(mesh)


def _build_pools(seed: int, values_per_param: int = 3) -> dict:
    """Small per-parameter value pools; sharing falls out of reuse."""
    rng = np.random.default_rng(seed)
    pools: dict[str, dict[str, np.ndarray]] = {}
    for cat, ranges in PARAM_RANGES.items():
        pools[cat] = {}
        for name, (lo, hi) in ranges.items():
            if name in ("drawer_count", "slat_count", "plank_count"):
                pools[cat][name] = np.arange(int(lo), int(hi) + 1, dtype=float)
            else:
                # One draw per equal sub-interval keeps the pool values far
                # apart, so instances built from them stay visually distinct.
                strata = np.arange(values_per_param) + rng.random(values_per_param)
                vals = lo + (hi - lo) * strata / values_per_param
                pools[cat][name] = np.round(vals, 4)
    return pools


def _draw_spec(category: str, pools: dict, rng, seed: int) -> SynthSpec:
    params = {
        name: float(rng.choice(pool)) for name, pool in pools[category].items()
    }
    return SynthSpec(category=category, params=params, seed=seed)


def _params_key(spec: SynthSpec):
    return (spec.category, tuple(sorted(spec.params.items())))


def generate_benchmark(
    num_shapes: int,
    leave_out_fraction: float,
    views_per_query: int,
    seed: int,
    base_views: np.ndarray | None = None,
) -> Benchmark:
    """Database + queries with controlled part sharing.

    Held-out shapes are mutations (1-2 parameter swaps) of a database
    parent of the same category; the parent is the ground-truth target
    for their queries. Every shape, held out or not, contributes
    views_per_query query views, each drawn uniformly from a band of
    rotations offset from the canonical grid (see QUERY_GAP_MIN/MAX), so
    no query view coincides with a canonical one. base_views overrides
    the grid the offsets are measured from; by default the grid matches
    the one the retrieval pipeline selects for this seed.
    """
    if num_shapes < 4:
        raise SynthError("num_shapes must be >= 4")
    if not 0.0 <= leave_out_fraction < 1.0:
        raise SynthError("leave_out_fraction must be in [0, 1)")
    num_out = int(round(num_shapes * leave_out_fraction))
    num_db = num_shapes - num_out
    if num_db < 1:
        raise SynthError("leave_out_fraction leaves an empty database")

    rng = np.random.default_rng(seed)
    pools = _build_pools(seed)
    shapes: dict[int, ShapeEntry] = {}
    database_ids = []
    seen_keys = set()

    for sid in range(num_db):
        category = CATEGORIES[sid % len(CATEGORIES)]
        for _ in range(100):
            spec = _draw_spec(category, pools, rng, seed=sid)
            if _params_key(spec) not in seen_keys:
                break
        else:
            raise SynthError("parameter pools too small for distinct shapes")
        seen_keys.add(_params_key(spec))
        shapes[sid] = ShapeEntry(spec=spec, mesh=generate_shape(spec))
        database_ids.append(sid)

    for j in range(num_out):
        sid = num_db + j
        parent_id = int(rng.choice(database_ids))
        parent = shapes[parent_id].spec
        for _ in range(100):
            params = dict(parent.params)
            names = list(params)
            n_mut = int(rng.integers(1, min(2, len(names)) + 1))
            for name in rng.choice(names, size=n_mut, replace=False):
                pool = pools[parent.category][name]
                alternatives = pool[pool != params[name]]
                if len(alternatives):
                    params[name] = float(rng.choice(alternatives))
            spec = SynthSpec(category=parent.category, params=params, seed=sid)
            if _params_key(spec) not in seen_keys:
                break
        else:
            raise SynthError("could not mutate a distinct held-out shape")
        seen_keys.add(_params_key(spec))
        shared = sum(
            1 for k, v in spec.params.items() if parent.params[k] == v
        )
        assert shared >= 1, "held-out shape shares no part parameter"
        shapes[sid] = ShapeEntry(
            spec=spec, mesh=generate_shape(spec), parent_id=parent_id
        )

    if base_views is None:
        base_views = default_view_grid(
            _VIEW_GRID_SIZE, seed + _VIEW_GRID_OFFSET, _VIEW_GRID_POOL
        ).medoids
    base_views = np.asarray(base_views, dtype=np.float64)
    if base_views.ndim != 2 or base_views.shape[1] != 4 or len(base_views) == 0:
        raise SynthError("base_views must be a non-empty (n, 4) array")

    queries = []
    vrng = np.random.default_rng(seed + 7919)
    qi = 0
    for sid in sorted(shapes):
        held_out = sid >= num_db
        for _ in range(views_per_query):
            base = base_views[vrng.integers(len(base_views))]
            qview = perturb_quat(base, QUERY_GAP_MIN, QUERY_GAP_MAX, vrng)
            queries.append(
                Query(
                    shape_id=sid,
                    view_quat=qview,
                    aug_seed=int(seed * 100003 + qi),
                    leave_out=held_out,
                    gt_shape_id=shapes[sid].parent_id if held_out else sid,
                )
            )
            qi += 1
    return Benchmark(
        shapes=shapes, database_ids=database_ids, queries=queries, seed=seed
    )


def save_benchmark(bench: Benchmark, out_dir: str) -> str:
    """Materialize meshes as OBJ plus a manifest JSON; returns manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    shape_docs = {}
    for sid in sorted(bench.shapes):
        entry = bench.shapes[sid]
        obj_name = f"shape_{sid:04d}.obj"
        save_obj(entry.mesh, str(root / obj_name))
        shape_docs[str(sid)] = {
            "category": entry.spec.category,
            "obj": obj_name,
            "params": entry.spec.params,
            "parent": entry.parent_id,
        }
    doc = {
        "seed": bench.seed,
        "database": bench.database_ids,
        "shapes": shape_docs,
        "queries": [
            {
                "shape": q.shape_id,
                "view_quat": [float(c) for c in q.view_quat],
                "seed": q.aug_seed,
                "leave_out": q.leave_out,
                "gt_shape": q.gt_shape_id,
            }
            for q in bench.queries
        ],
    }
    manifest = root / "benchmark.json"
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(manifest)


def load_benchmark(manifest_path: str) -> Benchmark:
    from .mesh import load_obj

    root = Path(manifest_path).parent
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    shapes = {}
    for sid_text, info in doc["shapes"].items():
        sid = int(sid_text)
        mesh = load_obj(str(root / info["obj"]), category=info["category"])
        spec = SynthSpec(
            category=info["category"], params=dict(info["params"]), seed=sid
        )
        shapes[sid] = ShapeEntry(
            spec=spec, mesh=mesh, parent_id=int(info.get("parent", -1))
        )
    queries = [
        Query(
            shape_id=int(q["shape"]),
            view_quat=np.asarray(q["view_quat"], dtype=np.float64),
            aug_seed=int(q["seed"]),
            leave_out=bool(q["leave_out"]),
            gt_shape_id=int(q.get("gt_shape", q["shape"])),
        )
        for q in doc["queries"]
    ]
    return Benchmark(
        shapes=shapes,
        database_ids=[int(i) for i in doc["database"]],
        queries=queries,
        seed=int(doc.get("seed", 0)),
    )

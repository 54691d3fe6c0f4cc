"""End-to-end pipelines over the synthetic benchmarks.

Everything here is orchestration: rendering a benchmark into a training
corpus, fitting the towers, building the index, scoring queries, and the
parameter sweeps behind the ablation CSVs. Descriptor labeling follows
the double-threshold oracle; anchors live in the image domain (shaded
renders at views nudged off the canonical grid), candidates in the
shape domain (the same records the index holds, enumerated by the same
generator).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import Config, to_dict
from .descriptor import (
    PatchRect,
    content_rect,
    sample_patches,
    self_similarity_histogram,
)
from .embed import (
    PatchCorpus,
    TowerParams,
    image_patch_features,
    init_params,
    shape_patch_features,
    train,
)
from .errors import NoRetrievalError, RenderError, TrainingError
from .index import (
    PatchIndex,
    build_index,
    derive_seed,
    enumerate_view_patches,
    retrieve_shape,
)
from .metrics import build_report, recall_at_k, rotation_error
from .pose import (
    PoseDataset,
    PoseHeadParams,
    PosePrediction,
    assign_rotation_bin,
    compose_rotation,
    pose_forward,
    train_pose_head,
)
from .render import rasterize, scene_light, shade
from .synth import QUERY_GAP_MAX, QUERY_GAP_MIN, Benchmark, generate_benchmark
from .views import (
    ViewSet,
    canonical_quat,
    default_view_grid,
    kmedoids,
    perturb_quat,
    quat_geodesic,
    random_rotations,
)

# disjoint seed streams hanging off cfg.seed; collisions would correlate
# sampling decisions that must stay independent
_ANCHOR_RECT_BASE = 1
_NEG_SUBSAMPLE_BASE = 2
_ANCHOR_NOISE_BASE = 3
_ANCHOR_ROT_OFFSET = 7
_VIEW_SELECT_OFFSET = 11
_POSE_MEDOID_OFFSET = 13
_POSE_TRAIN_OFFSET = 17
_POSE_EVAL_OFFSET = 19


def select_views(cfg: Config, candidates: int = 256) -> ViewSet:
    return default_view_grid(
        cfg.num_views, cfg.seed + _VIEW_SELECT_OFFSET, candidates
    )


def render_query(mesh, view, cfg: Config, seed: int):
    """Shaded render of a mesh under the fixed scene light at the given view."""
    nmap = rasterize(mesh, view, cfg.render_resolution)
    shaded = shade(nmap, scene_light(), cfg.shade_noise, seed)
    return shaded, nmap


@dataclass
class CandidateSet:
    feats: np.ndarray      # (N, 3 * pool^2) float32
    hists: np.ndarray      # (N, B) float64 descriptor histograms
    shape_ids: np.ndarray  # (N,) int64
    view_ids: np.ndarray   # (N,) int64
    rects: np.ndarray      # (N, 4) int64 rows of (x, y, w, h)


def collect_candidates(
    shapes: dict, views: ViewSet, cfg: Config, patches_per_view: int
) -> CandidateSet:
    """Shape-domain records in index order, with descriptors attached."""
    feats, hists, sids, vids, rects = [], [], [], [], []
    for sid, vid, nmap, kept in enumerate_view_patches(
        shapes, views, patches_per_view, cfg
    ):
        for r in kept:
            desc = self_similarity_histogram(
                nmap, r, cfg.hist_bins, cfg.max_pair_samples, cfg.min_coverage
            )
            assert not desc.empty, "non-empty rect produced an empty descriptor"
            feats.append(shape_patch_features(nmap.normals, r, cfg.pool_size))
            hists.append(desc.hist)
            sids.append(sid)
            vids.append(vid)
            rects.append((r.x, r.y, r.w, r.h))
    return CandidateSet(
        feats=np.asarray(feats, dtype=np.float32),
        hists=np.asarray(hists, dtype=np.float64),
        shape_ids=np.asarray(sids, dtype=np.int64),
        view_ids=np.asarray(vids, dtype=np.int64),
        rects=np.asarray(rects, dtype=np.int64),
    )


def _rect_iou(rect: PatchRect, rects: np.ndarray) -> np.ndarray:
    """Intersection over union of one rect against (N, 4) rows (x, y, w, h)."""
    x0 = np.maximum(rect.x, rects[:, 0])
    y0 = np.maximum(rect.y, rects[:, 1])
    x1 = np.minimum(rect.x + rect.w, rects[:, 0] + rects[:, 2])
    y1 = np.minimum(rect.y + rect.h, rects[:, 1] + rects[:, 3])
    inter = np.maximum(0, x1 - x0) * np.maximum(0, y1 - y0)
    union = rect.w * rect.h + rects[:, 2] * rects[:, 3] - inter
    return inter / union


def build_corpus(
    bench: Benchmark,
    views: ViewSet,
    cfg: Config,
    patches_per_view: int,
    anchor_patches: int = 8,
) -> PatchCorpus:
    """Label image-domain anchors against shape-domain candidates.

    Anchors are patches of shaded renders of database shapes, taken at
    views perturbed off the canonical grid by the same angular band the
    benchmark queries use (cfg.anchor_views such views per shape), so
    training sees the same view offsets retrieval has to absorb. Each
    anchor patch is pooled from its own noise draw of the render, so no
    two anchors share a pixel-exact grain pattern for the towers to
    key on.

    Both polarities follow the double-threshold rule on the rect
    footprint IoU, measured in pixel coordinates. A candidate is
    positive when it shows the same region of the same shape: it must
    come from the canonical view nearest the anchor's view and overlap
    the anchor's rect with IoU at least theta_pos. A candidate is
    negative when it comes from another shape and its footprint IoU
    stays at or below theta_neg; cross-shape records parked on the
    anchor's own position are dropped rather than pushed apart,
    because shapes share exact part dimensions by construction and a
    same-position patch of a lookalike part is often inseparable.
    Negative pools are capped at cfg.negatives_pool by a seeded
    subsample.
    """
    db = {sid: bench.shapes[sid].mesh for sid in bench.database_ids}
    cand = collect_candidates(db, views, cfg, patches_per_view)
    if len(cand.feats) == 0:
        raise TrainingError("no shape-domain candidates to train against")
    sids_sorted = sorted(db)
    rot_rng = np.random.default_rng(cfg.seed + _ANCHOR_ROT_OFFSET)
    anchor_feats, pos_lists, neg_lists = [], [], []
    skipped = 0
    for si, sid in enumerate(sids_sorted):
        for av in range(cfg.anchor_views):
            base = views.medoids[av % len(views.medoids)]
            rot = perturb_quat(base, QUERY_GAP_MIN, QUERY_GAP_MAX, rot_rng)
            try:
                nmap = rasterize(db[sid], rot, cfg.render_resolution)
            except RenderError:
                continue
            shaded = shade(
                nmap,
                scene_light(),
                cfg.shade_noise,
                derive_seed(cfg.seed + _ANCHOR_NOISE_BASE, sid, av),
            )
            rects = sample_patches(
                shaded,
                cfg.patch_fraction,
                anchor_patches,
                derive_seed(cfg.seed + _ANCHOR_RECT_BASE, sid, av),
                cfg.min_coverage,
            )
            variants = [
                shade(
                    nmap,
                    scene_light(),
                    cfg.shade_noise,
                    derive_seed(
                        cfg.seed + _ANCHOR_NOISE_BASE,
                        sid,
                        (av + 1) * anchor_patches + pi,
                    ),
                )
                for pi in range(len(rects))
            ]
            near_vid = int(
                np.argmin(
                    [quat_geodesic(rot, m) for m in views.medoids]
                )
            )
            for pi, r in enumerate(rects):
                if r.empty:
                    continue
                r = content_rect(
                    variants[pi].intensity, variants[pi].mask, r
                )
                footprint = _rect_iou(r, cand.rects)
                pos = np.flatnonzero(
                    (cand.shape_ids == sid)
                    & (cand.view_ids == near_vid)
                    & (footprint >= cfg.theta_pos)
                )
                neg = np.flatnonzero(
                    (cand.shape_ids != sid) & (footprint <= cfg.theta_neg)
                )
                if len(neg) > cfg.negatives_pool:
                    rng = np.random.default_rng(
                        derive_seed(
                            cfg.seed + _NEG_SUBSAMPLE_BASE,
                            sid,
                            av * anchor_patches + pi,
                        )
                    )
                    neg = np.sort(
                        rng.choice(neg, cfg.negatives_pool, replace=False)
                    )
                if len(pos) == 0 or len(neg) == 0:
                    skipped += 1
                    continue
                anchor_feats.append(
                    image_patch_features(
                        variants[pi].intensity, r, cfg.pool_size
                    )
                )
                pos_lists.append(pos.astype(np.int64))
                neg_lists.append(neg.astype(np.int64))
    if not anchor_feats:
        raise TrainingError("corpus has no usable anchors")
    return PatchCorpus(
        anchor_feats=np.asarray(anchor_feats, dtype=np.float32),
        cand_feats=cand.feats,
        pos_lists=pos_lists,
        neg_lists=neg_lists,
        skipped_anchors=skipped,
    )


@dataclass
class Pipeline:
    model: TowerParams
    views: ViewSet
    index: PatchIndex
    history: list
    corpus_skipped: int


_INDEX_JITTER_OFFSET = 29


def augment_views(views: ViewSet, extra_per_view: int, seed: int) -> ViewSet:
    """Canonical medoids plus jittered copies inside the query gap band.

    Queries sit a few degrees off the canonical grid, and pooled-cell
    matching decays quickly with view offset even after rects are
    anchored to content. Indexing each shape at the canonical views
    plus a few perturbed copies drawn from the same angular band puts a
    record within a degree or two of any query view, at a linear cost
    in index size and no change to retrieval semantics.
    """
    if extra_per_view < 1:
        return views
    rng = np.random.default_rng(seed)
    med = [np.asarray(m, dtype=np.float64) for m in views.medoids]
    for base in views.medoids:
        for _ in range(extra_per_view):
            med.append(perturb_quat(base, QUERY_GAP_MIN, QUERY_GAP_MAX, rng))
    return ViewSet(
        medoids=np.asarray(med, dtype=np.float64),
        source_size=views.source_size,
        seed=views.seed,
        cost_history=list(views.cost_history),
    )


_LIT_INIT_OFFSET = 23
_LIT_INIT_SIGMA = 1.0


def lit_init(cfg: Config, corpus: PatchCorpus | None = None) -> TowerParams:
    """Initial towers that agree through the rendering physics.

    Two facts shape the construction. First, a rendered pixel is
    rectified Lambert shading, so dotting a pooled normal cell with the
    light reproduces the pooled intensity cell wherever the cell faces
    the light. Second, a hidden relu distributes over a sum of
    same-sign terms, so a hidden unit whose input weights are local and
    nonnegative rectifies its whole receptive field at once; a dense
    random first layer cannot, which is why a plain linear map between
    the two patch domains stays poor no matter how it is fitted.

    The image tower therefore starts as a grid of nonnegative Gaussian
    bumps over the pooled cells (a blur, transparent to its own relu
    because intensities are nonnegative), the shape tower starts as
    those same bumps composed with the light direction, and the output
    layer is shared verbatim. Both towers then assign nearly the same
    embedding to an image patch and to the shape record it was rendered
    from, except where a receptive field straddles lit and unlit faces,
    and training refines the correspondence instead of having to
    rediscover the lighting from scratch.

    Blurred intensities share a big all-positive mean component, and a
    linear projection of vectors in a tight cone lands in a tight cone:
    left alone, every embedding would sit at cosine one from every
    other and the loss would see no spread. When a corpus is given, the
    shared output bias is set to subtract the mean hidden response, so
    the normalize step measures each patch's deviation from average
    rather than its share of the common brightness.
    """
    pool = cfg.pool_size
    cells = pool * pool
    params = init_params(
        d_in_image=cells,
        d_in_shape=3 * cells,
        h=cfg.hidden_dim,
        d=cfg.embed_dim,
        seed=cfg.seed,
    )
    side = int(round(np.sqrt(cfg.hidden_dim)))
    if side * side == cfg.hidden_dim and pool % side == 0:
        step = pool / side
        ticks = (np.arange(side) + 0.5) * step - 0.5
        cy, cx = (g.reshape(-1) for g in np.meshgrid(ticks, ticks, indexing="ij"))
    else:
        rng = np.random.default_rng(cfg.seed + _LIT_INIT_OFFSET)
        cy = rng.uniform(-0.5, pool - 0.5, cfg.hidden_dim)
        cx = rng.uniform(-0.5, pool - 0.5, cfg.hidden_dim)
    gy, gx = np.meshgrid(np.arange(pool), np.arange(pool), indexing="ij")
    d2 = (gy.reshape(-1)[:, None] - cy[None]) ** 2
    d2 += (gx.reshape(-1)[:, None] - cx[None]) ** 2
    W1 = np.exp(-d2 / (2.0 * _LIT_INIT_SIGMA**2))
    W1 /= np.linalg.norm(W1, axis=0, keepdims=True)
    params.image.W1 = W1
    light = scene_light()
    W1s = np.zeros_like(params.shape.W1)
    for c in range(3):
        W1s[c::3, :] = light[c] * W1
    params.shape.W1 = W1s
    params.shape.b1 = params.image.b1.copy()
    params.shape.W2 = params.image.W2.copy()
    params.shape.b2 = params.image.b2.copy()
    if corpus is not None:
        h_img = np.maximum(0.0, corpus.anchor_feats.astype(np.float64) @ W1)
        h_shp = np.maximum(0.0, corpus.cand_feats.astype(np.float64) @ W1s)
        h_bar = 0.5 * (h_img.mean(axis=0) + h_shp.mean(axis=0))
        center = -(h_bar @ params.image.W2)
        params.image.b2 = center.copy()
        params.shape.b2 = center.copy()
    return params


def train_pipeline(
    bench: Benchmark,
    cfg: Config,
    patches_per_view: int = 64,
    view_candidates: int = 256,
    views: ViewSet | None = None,
    index_view_jitter: int = 3,
    index_patches_per_view: int = 256,
) -> Pipeline:
    if views is None:
        views = select_views(cfg, view_candidates)
    corpus = build_corpus(bench, views, cfg, patches_per_view)
    result = train(corpus, cfg, params=lit_init(cfg, corpus))
    db = {sid: bench.shapes[sid].mesh for sid in bench.database_ids}
    index_views = augment_views(
        views, index_view_jitter, cfg.seed + _INDEX_JITTER_OFFSET
    )
    index = build_index(
        db, index_views, result.params, index_patches_per_view, cfg
    )
    return Pipeline(
        model=result.params,
        views=views,
        index=index,
        history=result.history,
        corpus_skipped=corpus.skipped_anchors,
    )


def evaluate_queries(
    bench: Benchmark,
    pipe: Pipeline,
    cfg: Config,
    kq: int | None = None,
    kr: int | None = None,
):
    """Score every benchmark query; a fully excluded query scores a miss."""
    kq = cfg.kq if kq is None else kq
    kr = cfg.kr if kr is None else kr
    results, gts, qids = [], [], []
    for qi, q in enumerate(bench.queries):
        entry = bench.shapes[q.shape_id]
        shaded, _ = render_query(entry.mesh, q.view_quat, cfg, q.aug_seed)
        try:
            res = retrieve_shape(
                pipe.index, shaded, shaded.mask, pipe.model,
                kq, kr, seed=q.aug_seed + 1, cfg=cfg,
                category=entry.spec.category,
            )
        except NoRetrievalError:
            res = []
        results.append(res)
        gts.append(q.gt_shape_id)
        qids.append(qi)
    return results, gts, qids


def run_retrieval_experiment(
    cfg: Config,
    num_shapes: int = 20,
    leave_out: float = 0.0,
    views_per_query: int = 5,
    patches_per_view: int = 64,
    view_candidates: int = 256,
    kq: int | None = None,
    kr: int | None = None,
):
    views = select_views(cfg, view_candidates)
    bench = generate_benchmark(
        num_shapes, leave_out, views_per_query, cfg.seed,
        base_views=views.medoids,
    )
    pipe = train_pipeline(bench, cfg, patches_per_view, view_candidates, views)
    results, gts, qids = evaluate_queries(bench, pipe, cfg, kq, kr)
    report = build_report(results, gts, query_ids=qids, config=to_dict(cfg))
    return report, pipe, bench


# ---------------------------------------------------------------------------
# pose experiments


def pose_samples(
    shapes: dict, cfg: Config, medoids: np.ndarray, per_shape: int, seed: int
):
    """Full-object pose samples; returns the dataset plus the gt rotations."""
    sids = sorted(shapes)
    rots = random_rotations(len(sids) * per_shape, seed)
    res = cfg.render_resolution
    rect = PatchRect(0, 0, res, res)
    n = len(rots)
    feats = np.empty((n, cfg.pool_size * cfg.pool_size), dtype=np.float64)
    bins = np.empty(n, dtype=np.int64)
    offsets = np.empty((n, 4), dtype=np.float64)
    trans = np.empty((n, 2), dtype=np.float64)
    idx = 0
    for sid in sids:
        for j in range(per_shape):
            rot = rots[idx]
            nmap = rasterize(shapes[sid], rot, res)
            shaded = shade(
                nmap, scene_light(), cfg.shade_noise,
                derive_seed(seed, sid, j),
            )
            feats[idx] = image_patch_features(shaded.intensity, rect, cfg.pool_size)
            b, resid = assign_rotation_bin(medoids, rot)
            bins[idx] = b
            offsets[idx] = resid
            ys, xs = np.nonzero(shaded.mask)
            cy = (ys.min() + ys.max() + 1) / 2.0
            cx = (xs.min() + xs.max() + 1) / 2.0
            trans[idx] = ((cx - res / 2.0) / res, (cy - res / 2.0) / res)
            idx += 1
    return PoseDataset(feats, bins, offsets, trans), rots


@dataclass
class PoseEvaluation:
    bin_accuracy: float
    median_error_deg: float
    median_bin_radius_deg: float
    params: PoseHeadParams
    medoids: np.ndarray
    history: list


def run_pose_experiment(
    bench: Benchmark,
    cfg: Config,
    train_per_shape: int = 24,
    eval_per_shape: int = 8,
    epochs: int | None = None,
    learning_rate: float | None = None,
) -> PoseEvaluation:
    medoid_set = kmedoids(
        random_rotations(256, cfg.seed + _POSE_MEDOID_OFFSET),
        cfg.pose_bins,
        cfg.seed + _POSE_MEDOID_OFFSET,
    )
    medoids = medoid_set.medoids
    db = {sid: bench.shapes[sid].mesh for sid in bench.database_ids}
    train_ds, _ = pose_samples(
        db, cfg, medoids, train_per_shape, cfg.seed + _POSE_TRAIN_OFFSET
    )
    eval_ds, eval_rots = pose_samples(
        db, cfg, medoids, eval_per_shape, cfg.seed + _POSE_EVAL_OFFSET
    )
    result = train_pose_head(
        train_ds, cfg, epochs=epochs, learning_rate=learning_rate
    )
    logits, offs, _, trs = pose_forward(result.params, eval_ds.features)
    pred_bins = logits.argmax(axis=1)
    accuracy = float(np.mean(pred_bins == eval_ds.gt_bins))
    errors = np.empty(len(eval_rots))
    radii = np.empty(len(eval_rots))
    for i, rot in enumerate(eval_rots):
        pred = PosePrediction(
            bin_logits=logits[i],
            offset=canonical_quat(offs[i]),
            translation=trs[i],
        )
        errors[i] = rotation_error(compose_rotation(medoids, pred), rot)
        radii[i] = np.degrees(quat_geodesic(rot, medoids[eval_ds.gt_bins[i]]))
    return PoseEvaluation(
        bin_accuracy=accuracy,
        median_error_deg=float(np.median(errors)),
        median_bin_radius_deg=float(np.median(radii)),
        params=result.params,
        medoids=medoids,
        history=result.history,
    )


# ---------------------------------------------------------------------------
# ablation sweeps


def patch_size_sweep(
    values,
    seeds,
    cfg: Config,
    num_shapes: int,
    leave_out: float,
    views_per_query: int,
    patches_per_view: int = 64,
    eval_k: int = 5,
):
    """Retrain per patch fraction; returns (value, mean recall@eval_k) rows."""
    rows = []
    for v in values:
        recalls = []
        for s in seeds:
            c = replace(cfg, patch_fraction=float(v), seed=int(s))
            report, _, _ = run_retrieval_experiment(
                c, num_shapes, leave_out, views_per_query, patches_per_view
            )
            recalls.append(report.recall[eval_k])
        rows.append((float(v), float(np.mean(recalls))))
    return rows


def vote_count_sweep(
    param: str,
    values,
    seeds,
    cfg: Config,
    num_shapes: int,
    leave_out: float,
    views_per_query: int,
    patches_per_view: int = 64,
    eval_k: int = 1,
):
    """Sweep kq or kr at retrieval time, one trained pipeline per seed."""
    if param not in ("kq", "kr"):
        raise ValueError("param must be 'kq' or 'kr'")
    per_value = {v: [] for v in values}
    for s in seeds:
        c = replace(cfg, seed=int(s))
        bench = generate_benchmark(num_shapes, leave_out, views_per_query, c.seed)
        pipe = train_pipeline(bench, c, patches_per_view)
        for v in values:
            kq = int(v) if param == "kq" else c.kq
            kr = int(v) if param == "kr" else c.kr
            results, gts, _ = evaluate_queries(bench, pipe, c, kq=kq, kr=kr)
            per_value[v].append(recall_at_k(results, gts, eval_k))
    return [(int(v), float(np.mean(per_value[v]))) for v in values]

"""Weakly supervised correspondence mining.

Pipeline per class: a k-NN graph over global image descriptors picks image
pairs; for each pair, pyramid patches are proposed in both images, each
proposal gets nearest-neighbour candidates in the other image, and a sparse
second-order labeling problem (one label per candidate plus an outlier
label) selects a geometrically consistent subset. The labeling problem is
solved with sequential tree-reweighted message passing (TRW-S).
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing as mp
from typing import Sequence

import numpy as np

from .encoder import Backbone, raw_features
from .synthetic import resize
from .tensor import no_grad

log = logging.getLogger(__name__)

LARGE = 1e4


# ---------------------------------------------------------------------------
# image graph
# ---------------------------------------------------------------------------

@dataclass
class ImageGraph:
    ids: list[str]
    descriptors: np.ndarray
    edges: list[tuple[str, str]]
    k: int

    def out_edges(self, node: str) -> list[str]:
        return [j for i, j in self.edges if i == node]

    def pairs(self) -> list[tuple[str, str]]:
        """Unordered image pairs in deterministic order."""
        seen = set()
        out = []
        for i, j in self.edges:
            key = (i, j) if i <= j else (j, i)
            if key not in seen:
                seen.add(key)
                out.append(key)
        return sorted(out)


def global_descriptor(image: np.ndarray, backbone: Backbone) -> np.ndarray:
    with no_grad():
        f = raw_features(image, backbone).data[0].astype(np.float64)
    f = f / np.maximum(np.sqrt((f ** 2).sum(0, keepdims=True)), 1e-12)
    g = f.mean(axis=(1, 2))
    return g / max(np.linalg.norm(g), 1e-12)


def knn_graph(ids: Sequence[str], descriptors: np.ndarray, classes: Sequence[str], k: int = 10) -> ImageGraph:
    """Directed i->j edges to the k nearest same-class images; ties by ascending id."""
    ids = list(ids)
    desc = np.asarray(descriptors, dtype=np.float64)
    if desc.ndim == 1:
        desc = desc[:, None]
    edges = []
    by_class: dict[str, list[int]] = {}
    for idx, c in enumerate(classes):
        by_class.setdefault(c, []).append(idx)
    for c in sorted(by_class):
        members = by_class[c]
        if len(members) < 2:
            log.warning("class %r has fewer than 2 images; skipped", c)
            continue
        for i in sorted(members, key=lambda m: ids[m]):
            others = [j for j in members if j != i]
            others.sort(key=lambda j: (float(np.linalg.norm(desc[i] - desc[j])), ids[j]))
            edges.extend((ids[i], ids[j]) for j in others[:k])
    return ImageGraph(ids, desc, edges, k)


def build_image_graph(images: dict[str, np.ndarray], classes: dict[str, str], backbone: Backbone,
                      k: int = 10) -> ImageGraph:
    ids = sorted(images)
    desc = np.stack([global_descriptor(images[i], backbone) for i in ids])
    return knn_graph(ids, desc, [classes[i] for i in ids], k)


# ---------------------------------------------------------------------------
# patch proposals
# ---------------------------------------------------------------------------

@dataclass
class PatchSet:
    """Sliding-window patches over a feature pyramid, in original pixel units."""

    centers: np.ndarray      # (n, 2) x, y
    sides: np.ndarray        # (n,) patch side
    strides: np.ndarray      # (n,) sliding-window step
    levels: np.ndarray       # (n,)
    features: np.ndarray     # (n, d) unit norm
    activations: np.ndarray  # (n,)
    image_id: str = ""

    def __len__(self):
        return len(self.centers)

    def subset(self, idx) -> PatchSet:
        idx = np.asarray(idx, dtype=np.intp)
        return PatchSet(self.centers[idx], self.sides[idx], self.strides[idx], self.levels[idx],
                        self.features[idx], self.activations[idx], self.image_id)


@dataclass
class PyramidConfig:
    levels: int = 6
    min_side: float = 20.0 * 64 / 224
    max_side: float = 80.0 * 64 / 224
    window: int = 3
    budget: int = 80


def dense_patches(image: np.ndarray, backbone: Backbone, cfg: PyramidConfig | None = None,
                  image_id: str = "") -> PatchSet:
    """Fixed-size windows of ``window x window`` feature sites at every pyramid level.

    Level scales are chosen so the patch side spans ``[min_side, max_side]``
    geometrically. The window descriptor is the concatenation of its unit
    site features, renormalised; its activation is the mean raw feature norm.
    """
    cfg = cfg or PyramidConfig()
    h, w = image.shape[:2]
    stride = backbone.stride
    ws = cfg.window
    sides = np.geomspace(cfg.min_side, cfg.max_side, cfg.levels) if cfg.levels > 1 else np.array([cfg.min_side])
    need = backbone.config.min_input_size()
    cs, ss, st, lv, fs, acts = [], [], [], [], [], []
    for level, side in enumerate(sides):
        scale = ws * stride / side
        lh, lw = int(round(h * scale)), int(round(w * scale))
        if min(lh, lw) < max(need, ws * stride):
            log.info("pyramid level %d (%dx%d) too small; skipped", level, lh, lw)
            continue
        img = resize(image, lh, lw)
        with no_grad():
            raw = raw_features(img, backbone).data[0].astype(np.float64)
        d, fh, fw = raw.shape
        nrm = np.sqrt((raw ** 2).sum(0))
        unit = raw / np.maximum(nrm, 1e-12)
        nh, nw = fh - ws + 1, fw - ws + 1
        if nh <= 0 or nw <= 0:
            continue
        desc = np.concatenate([unit[:, i: i + nh, j: j + nw] for i in range(ws) for j in range(ws)], axis=0)
        desc = desc.reshape(d * ws * ws, -1).T
        desc = desc / np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
        act = sum(nrm[i: i + nh, j: j + nw] for i in range(ws) for j in range(ws)) / (ws * ws)
        gy, gx = np.meshgrid(np.arange(nh), np.arange(nw), indexing="ij")
        # level pixel coordinate of the window center, then back to the original image
        cx = stride * (gx + (ws - 1) / 2.0) + (stride - 1) / 2.0
        cy = stride * (gy + (ws - 1) / 2.0) + (stride - 1) / 2.0
        sx, sy = lw / w, lh / h
        ox, oy = (cx + 0.5) / sx - 0.5, (cy + 0.5) / sy - 0.5
        real_side = ws * stride / np.array([sx, sy]).mean()
        inside = ((ox - real_side / 2 >= -0.5) & (ox + real_side / 2 <= w - 0.5)
                  & (oy - real_side / 2 >= -0.5) & (oy + real_side / 2 <= h - 0.5)).ravel()
        cs.append(np.stack([ox.ravel(), oy.ravel()], -1)[inside])
        ss.append(np.full(inside.sum(), real_side))
        st.append(np.full(inside.sum(), stride / np.array([sx, sy]).mean()))
        lv.append(np.full(inside.sum(), level))
        fs.append(desc[inside])
        acts.append(act.ravel()[inside])
    if not cs:
        log.warning("image %s too small for the smallest patch", image_id or "?")
        return PatchSet(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0, int), np.zeros((0, 1)), np.zeros(0), image_id)
    return PatchSet(np.concatenate(cs), np.concatenate(ss), np.concatenate(st), np.concatenate(lv).astype(int),
                    np.concatenate(fs), np.concatenate(acts), image_id)


def nms(patches: PatchSet) -> np.ndarray:
    """Greedy per-level suppression; radius one patch side, ties in raster order."""
    keep = []
    for level in np.unique(patches.levels):
        idx = np.nonzero(patches.levels == level)[0]
        order = idx[np.argsort(-patches.activations[idx], kind="stable")]
        kept: list[int] = []
        for i in order:
            c = patches.centers[i]
            r = patches.sides[i]
            if kept:
                d = np.sqrt(((patches.centers[kept] - c) ** 2).sum(1))
                if (d < r - 1e-9).any():
                    continue
            kept.append(i)
        keep.extend(kept)
    return np.array(sorted(keep), dtype=np.intp)


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None]
    return np.argmin(d, axis=1)


def one_cycle_filter(proposals: PatchSet, partner: PatchSet, own: PatchSet) -> np.ndarray:
    """Keep proposals whose nearest neighbour's nearest neighbour returns within one stride."""
    if len(proposals) == 0 or len(partner) == 0:
        return np.zeros(0, dtype=bool)
    fwd = _nearest(proposals.features, partner.features)
    back = _nearest(partner.features[fwd], own.features)
    dist = np.sqrt(((own.centers[back] - proposals.centers) ** 2).sum(1))
    return dist <= proposals.strides + 1e-9


def propose_patches(image: np.ndarray, backbone: Backbone, pyramid_levels: int = 6,
                    cfg: PyramidConfig | None = None, partner: PatchSet | None = None,
                    dense: PatchSet | None = None) -> PatchSet:
    """NMS on activation, optional one-cycle filter against ``partner``, capped at the budget."""
    cfg = cfg or PyramidConfig(levels=pyramid_levels)
    if pyramid_levels != cfg.levels:
        cfg = PyramidConfig(pyramid_levels, cfg.min_side, cfg.max_side, cfg.window, cfg.budget)
    dense = dense if dense is not None else dense_patches(image, backbone, cfg)
    if len(dense) == 0:
        return dense
    kept = dense.subset(nms(dense))
    if partner is not None:
        kept = kept.subset(np.nonzero(one_cycle_filter(kept, partner, dense))[0])
    order = np.argsort(-kept.activations, kind="stable")[: cfg.budget]
    return kept.subset(np.sort(order))


# ---------------------------------------------------------------------------
# labeling problem
# ---------------------------------------------------------------------------

@dataclass
class MatchConfig:
    candidates: int = 2
    neighbors: int = 5
    lambda_d: float = 1.0
    lambda_s: float = 0.5
    outlier_cost: float = 0.8


@dataclass
class MatchProblem:
    """Pairwise labeling problem; label ``len(candidates[i])`` of node i is the outlier."""

    candidates: list[np.ndarray]       # per node: target patch indices
    unary: list[np.ndarray]            # per node: costs, outlier last
    edges: np.ndarray                  # (E, 2) with i < j
    pairwise: list[np.ndarray]         # per edge: (L_i, L_j)
    outlier_cost: float
    positions: np.ndarray | None = None   # source centers
    target_positions: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.unary)

    def n_labels(self, i: int) -> int:
        return len(self.unary[i])

    def outlier_label(self, i: int) -> int:
        return len(self.candidates[i])

    def energy(self, labeling: Sequence[int]) -> float:
        lab = np.asarray(labeling, dtype=np.intp)
        e = sum(float(self.unary[i][lab[i]]) for i in range(self.n_nodes))
        for (i, j), p in zip(self.edges, self.pairwise):
            e += float(p[lab[i], lab[j]])
        return e

    def assigned_targets(self, labeling: Sequence[int]) -> dict[int, int]:
        out = {}
        for i, l in enumerate(labeling):
            if l != self.outlier_label(i):
                out[i] = int(self.candidates[i][l])
        return out


def _pairwise_geometry(src, tgt, side_s, side_t, ci, cj, a, b, diag, cfg: MatchConfig) -> np.ndarray:
    li, lj = len(ci), len(cj)
    p = np.zeros((li + 1, lj + 1))
    va = tgt[ci] - src[a]
    vb = tgt[cj] - src[b]
    dev = np.sqrt(((va[:, None, :] - vb[None, :, :]) ** 2).sum(-1)) / diag
    ratio = np.abs(np.log((side_s[a] / side_s[b]) * (side_t[cj][None, :] / side_t[ci][:, None])))
    p[:li, :lj] = cfg.lambda_d * dev + cfg.lambda_s * ratio
    return p


def build_match_problem(proposals: PatchSet, targets: PatchSet, cfg: MatchConfig | None = None,
                        image_diag: float | None = None) -> MatchProblem:
    """Candidates are the feature-space nearest target patches; the neighbourhood
    structure links each proposal to its spatially nearest proposals, plus an
    edge for every pair of nodes sharing a candidate (one-to-one penalty)."""
    cfg = cfg or MatchConfig()
    n = len(proposals)
    if n == 0:
        raise ValueError("build_match_problem needs at least one proposal")
    if image_diag is None:
        ext = np.concatenate([proposals.centers, targets.centers]).max(0) + 1
        image_diag = float(np.hypot(*ext))
    f = proposals.features
    d = np.sqrt(np.maximum((f * f).sum(1)[:, None] - 2 * f @ targets.features.T
                           + (targets.features ** 2).sum(1)[None], 0))
    k = min(cfg.candidates, len(targets))
    cands = [np.argsort(d[i], kind="stable")[:k] for i in range(n)]
    unary = [np.concatenate([d[i, c], [cfg.outlier_cost]]) for i, c in enumerate(cands)]

    pos = proposals.centers
    edge_set: set[tuple[int, int]] = set()
    if n > 1:
        sd = np.sqrt(((pos[:, None] - pos[None]) ** 2).sum(-1))
        np.fill_diagonal(sd, np.inf)
        for i in range(n):
            for j in np.argsort(sd[i], kind="stable")[: min(cfg.neighbors, n - 1)]:
                edge_set.add((min(i, int(j)), max(i, int(j))))
    geo_edges = set(edge_set)
    owners: dict[int, list[int]] = {}
    for i, c in enumerate(cands):
        for t in c:
            owners.setdefault(int(t), []).append(i)
    for nodes in owners.values():
        for x in range(len(nodes)):
            for y in range(x + 1, len(nodes)):
                a, b = sorted((nodes[x], nodes[y]))
                if a != b:
                    edge_set.add((a, b))
    edges = np.array(sorted(edge_set), dtype=np.intp).reshape(-1, 2)
    pairwise = []
    for a, b in edges:
        if (a, b) in geo_edges:
            p = _pairwise_geometry(pos, targets.centers, proposals.sides, targets.sides,
                                   cands[a], cands[b], a, b, image_diag, cfg)
        else:
            p = np.zeros((len(cands[a]) + 1, len(cands[b]) + 1))
        same = cands[a][:, None] == cands[b][None, :]
        p[:-1, :-1][same] = LARGE
        pairwise.append(p)
    return MatchProblem(cands, unary, edges, pairwise, cfg.outlier_cost, pos.copy(), targets.centers.copy())


# ---------------------------------------------------------------------------
# TRW-S
# ---------------------------------------------------------------------------

@dataclass
class TRWSResult:
    labeling: np.ndarray
    energy: float
    lower_bound: float
    bound_history: list[float] = field(default_factory=list)
    iterations: int = 0


def _lower_bound(prob: MatchProblem, msg_in: list[list[np.ndarray]], incident, msgs) -> float:
    """Dual bound of the current reparameterisation, edge-wise decomposition.

    With theta_bar the reparameterised potentials, E(x) = sum_i theta_bar_i +
    sum_e theta_bar_e for all x, so splitting each node term evenly over its
    edges and minimising every edge block independently bounds min E.
    """
    n = prob.n_nodes
    node = [prob.unary[i] + sum((msgs[e][1 - side] for e, side in incident[i]), np.zeros_like(prob.unary[i]))
            for i in range(n)]
    deg = [len(incident[i]) for i in range(n)]
    lb = 0.0
    for i in range(n):
        if deg[i] == 0:
            lb += float(node[i].min())
    for e, (i, j) in enumerate(prob.edges):
        m_ij, m_ji = msgs[e]  # m_ij: message i->j (len L_j), m_ji: j->i (len L_i)
        block = (prob.pairwise[e] - m_ij[None, :] - m_ji[:, None]
                 + node[i][:, None] / deg[i] + node[j][None, :] / deg[j])
        lb += float(block.min())
    return lb


def _icm(prob: MatchProblem, lab: np.ndarray, incident) -> np.ndarray:
    lab = lab.copy()
    changed = True
    while changed:
        changed = False
        for i in range(prob.n_nodes):
            cost = prob.unary[i].copy()
            for e, side in incident[i]:
                a, b = prob.edges[e]
                cost += prob.pairwise[e][:, lab[b]] if side == 0 else prob.pairwise[e][lab[a], :]
            best = int(np.argmin(cost))
            if cost[best] < cost[lab[i]] - 1e-12:
                lab[i] = best
                changed = True
    return lab


def _repair_one_to_one(prob: MatchProblem, lab: np.ndarray) -> np.ndarray:
    lab = lab.copy()
    while True:
        owner: dict[int, int] = {}
        clash = None
        for i in range(prob.n_nodes):
            if lab[i] == prob.outlier_label(i):
                continue
            t = int(prob.candidates[i][lab[i]])
            if t in owner:
                clash = (owner[t], i)
                break
            owner[t] = i
        if clash is None:
            return lab
        a, b = clash
        worse = a if prob.unary[a][lab[a]] > prob.unary[b][lab[b]] else b
        lab[worse] = prob.outlier_label(worse)


def solve_trws(problem: MatchProblem, max_iters: int = 50, tol: float = 1e-9) -> TRWSResult:
    """Sequential tree-reweighted max-product (min-sum) message passing.

    Nodes are processed in index order (forward) and reverse (backward);
    each node's weight is 1 / max(#earlier neighbours, #later neighbours).
    A labeling is decoded in every forward pass; the best one, polished by
    ICM and checked for one-to-one consistency, is returned. The reported
    bound is the running maximum of valid dual bounds, hence monotone.
    """
    prob = problem
    n = prob.n_nodes
    incident: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for e, (i, j) in enumerate(prob.edges):
        incident[i].append((e, 0))
        incident[j].append((e, 1))
    n_before = [sum(1 for e, s in incident[i] if s == 1) for i in range(n)]
    n_after = [sum(1 for e, s in incident[i] if s == 0) for i in range(n)]
    gamma = [1.0 / max(a, b, 1) for a, b in zip(n_before, n_after)]
    # msgs[e] = [message i->j over labels of j, message j->i over labels of i]
    msgs = [[np.zeros(prob.n_labels(j)), np.zeros(prob.n_labels(i))] for i, j in prob.edges]

    def belief(i):
        b = prob.unary[i].copy()
        for e, side in incident[i]:
            b += msgs[e][1 - side] if side == 0 else msgs[e][0]
        return b

    best_lab = np.array([int(np.argmin(u)) for u in prob.unary], dtype=np.intp)
    best_lab = _icm(prob, _repair_one_to_one(prob, best_lab), incident)
    best_e = prob.energy(best_lab)
    history: list[float] = []
    bound = -np.inf
    it = 0
    for it in range(1, max_iters + 1):
        lab = np.zeros(n, dtype=np.intp)
        for i in range(n):
            b = belief(i)
            # decode: fix earlier labels, use messages from later nodes
            cost = prob.unary[i].copy()
            for e, side in incident[i]:
                a, c = prob.edges[e]
                if side == 1:
                    cost += prob.pairwise[e][lab[a], :]
                else:
                    cost += msgs[e][1]
            lab[i] = int(np.argmin(cost))
            for e, side in incident[i]:
                if side != 0:
                    continue
                # i -> j with j later
                m = (gamma[i] * b - msgs[e][1])[:, None] + prob.pairwise[e]
                m = m.min(axis=0)
                msgs[e][0] = m - m.min()
        for i in reversed(range(n)):
            b = belief(i)
            for e, side in incident[i]:
                if side != 1:
                    continue
                # i -> earlier node a
                m = (gamma[i] * b - msgs[e][0])[None, :] + prob.pairwise[e]
                m = m.min(axis=1)
                msgs[e][1] = m - m.min()
        cand = _icm(prob, _repair_one_to_one(prob, lab), incident)
        e_cand = prob.energy(cand)
        if e_cand < best_e - 1e-12:
            best_e, best_lab = e_cand, cand
        lb = _lower_bound(prob, None, incident, msgs)
        improved = lb - bound if np.isfinite(bound) else np.inf
        bound = max(bound, lb)
        history.append(bound)
        if best_e - bound <= 1e-9 or (it > 2 and improved < tol):
            break
    bound = min(bound, best_e)
    return TRWSResult(best_lab, best_e, float(bound), history, it)


def exhaustive_minimum(problem: MatchProblem) -> tuple[np.ndarray, float]:
    """Brute-force minimum energy labeling (small problems only)."""
    sizes = [problem.n_labels(i) for i in range(problem.n_nodes)]
    grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
    labs = np.stack([g.ravel() for g in grids], -1)
    e = np.zeros(len(labs))
    for i in range(problem.n_nodes):
        e += problem.unary[i][labs[:, i]]
    for (i, j), p in zip(problem.edges, problem.pairwise):
        e += p[labs[:, i], labs[:, j]]
    k = int(np.argmin(e))
    return labs[k], float(e[k])


# ---------------------------------------------------------------------------
# pair mining
# ---------------------------------------------------------------------------

@dataclass
class Correspondence:
    pair_id: str
    x_s: float
    y_s: float
    x_t: float
    y_t: float
    scale: float
    confidence: float
    stride: float = 0.0

    def as_row(self) -> list[float]:
        return [self.x_s, self.y_s, self.x_t, self.y_t]


@dataclass
class MinerConfig:
    k: int = 10
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    max_iters: int = 30
    tol: float = 1e-6


def _solve_direction(props: PatchSet, targets: PatchSet, cfg: MinerConfig, diag: float):
    prob = build_match_problem(props, targets, cfg.match, diag)
    res = solve_trws(prob, cfg.max_iters, cfg.tol)
    return prob, res


def mine_pair(image_s: np.ndarray, image_t: np.ndarray, backbone: Backbone, cfg: MinerConfig | None = None,
              pair_id: str = "") -> list[Correspondence]:
    """Correspondences between two images surviving the forward-backward check.

    Forward: proposals in the source labelled against dense target patches.
    Backward: the forward-matched target patches labelled against dense
    source patches; a match is kept iff the backward assignment lands within
    one patch stride of the original proposal.
    """
    cfg = cfg or MinerConfig()
    dense_s = dense_patches(image_s, backbone, cfg.pyramid)
    dense_t = dense_patches(image_t, backbone, cfg.pyramid)
    if len(dense_s) == 0 or len(dense_t) == 0:
        return []
    props = propose_patches(image_s, backbone, cfg.pyramid.levels, cfg.pyramid, partner=dense_t, dense=dense_s)
    if len(props) == 0:
        return []
    h, w = image_s.shape[:2]
    diag = float(np.hypot(h, w))
    prob_f, res_f = _solve_direction(props, dense_t, cfg, diag)
    fwd = prob_f.assigned_targets(res_f.labeling)
    if not fwd:
        return []
    nodes = sorted(fwd)
    back_src = dense_t.subset([fwd[i] for i in nodes])
    prob_b, res_b = _solve_direction(back_src, dense_s, cfg, diag)
    bwd = prob_b.assigned_targets(res_b.labeling)
    out = []
    for bi, i in enumerate(nodes):
        if bi not in bwd:
            continue
        back = dense_s.centers[bwd[bi]]
        if np.hypot(*(back - props.centers[i])) > props.strides[i] + 1e-9:
            continue
        t = fwd[i]
        lab = res_f.labeling[i]
        out.append(Correspondence(pair_id, float(props.centers[i, 0]), float(props.centers[i, 1]),
                                  float(dense_t.centers[t, 0]), float(dense_t.centers[t, 1]),
                                  float(props.sides[i]), float(-prob_f.unary[i][lab]), float(props.strides[i])))
    return out


def _mine_task(args):
    image_s, image_t, backbone, cfg, pair_id = args
    return mine_pair(image_s, image_t, backbone, cfg, pair_id)


def pair_key(a: str, b: str) -> str:
    return f"{a}__{b}"


def mine_pairs(graph: ImageGraph, images: dict[str, np.ndarray], backbone: Backbone,
               cfg: MinerConfig | None = None, jobs: int = 1) -> dict[str, list[Correspondence]]:
    """Mine every unordered graph edge; pairs without surviving matches are omitted."""
    cfg = cfg or MinerConfig()
    pairs = graph.pairs()
    tasks = [(images[a], images[b], backbone, cfg, pair_key(a, b)) for a, b in pairs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as ex:
            results = list(ex.map(_mine_task, tasks))
    else:
        results = [_mine_task(t) for t in tasks]
    return {t[4]: r for t, r in zip(tasks, results) if r}


def random_problem(rng: np.random.Generator, max_nodes: int = 8, max_labels: int = 3,
                   edge_prob: float = 0.5, n_targets: int | None = None,
                   outlier_cost: float = 0.8) -> MatchProblem:
    """Random valid MatchProblem: candidates drawn from a small shared target pool so
    one-to-one penalties occur, random geometric pairwise costs on random edges."""
    n = int(rng.integers(1, max_nodes + 1))
    pool = n_targets or max(2, n)
    cands, unary = [], []
    for _ in range(n):
        k = int(rng.integers(1, max_labels))
        cands.append(rng.choice(pool, size=k, replace=False))
        unary.append(np.concatenate([rng.uniform(0, 1.5, size=k), [outlier_cost]]))
    edges, pairwise = [], []
    for a in range(n):
        for b in range(a + 1, n):
            shares = np.intersect1d(cands[a], cands[b]).size > 0
            if not shares and rng.random() >= edge_prob:
                continue
            p = np.zeros((len(cands[a]) + 1, len(cands[b]) + 1))
            if rng.random() < edge_prob:
                p[:-1, :-1] = rng.uniform(0, 1, size=(len(cands[a]), len(cands[b])))
            p[:-1, :-1][cands[a][:, None] == cands[b][None, :]] = LARGE
            edges.append((a, b))
            pairwise.append(p)
    return MatchProblem(cands, unary, np.array(edges, dtype=np.intp).reshape(-1, 2), pairwise, outlier_cost)


def overlay_image(image_s: np.ndarray, image_t: np.ndarray, correspondences: Sequence[Correspondence]) -> np.ndarray:
    """Source and target side by side with one line per match, (H, W_s + W_t, 3) in [0, 1]."""
    from PIL import Image, ImageDraw

    from .io import to_uint8

    hs, ws = image_s.shape[:2]
    ht, wt = image_t.shape[:2]
    canvas = np.zeros((max(hs, ht), ws + wt, 3), dtype=np.uint8)
    canvas[:hs, :ws] = to_uint8(image_s)
    canvas[:ht, ws:] = to_uint8(image_t)
    img = Image.fromarray(canvas)
    draw = ImageDraw.Draw(img)
    for i, c in enumerate(correspondences):
        hue = (i * 0.61803398875) % 1.0
        color = tuple(int(255 * v) for v in (abs(hue * 6 - 3) - 1, 2 - abs(hue * 6 - 2), 2 - abs(hue * 6 - 4)))
        color = tuple(min(255, max(0, v)) for v in color)
        draw.line([(c.x_s, c.y_s), (c.x_t + ws, c.y_t)], fill=color, width=1)
    return np.asarray(img, dtype=np.float32) / 255.0

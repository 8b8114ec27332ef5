"""Retrieval evaluation: pairwise distances, protocol filtering, mAP and CMC.

Two protocols are supported. ``general``: gallery items sharing both person
and camera with the query are junked; any remaining same-person item is a
positive. ``clothes_change``: additionally junks same-person same-clothes
items, so a correct match must show the person in a different outfit.

``compute_map_cmc`` is the production path; ``oracle_map_cmc`` re-implements
the identical contract by naive enumeration and exists purely to cross-check
it in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PROTOCOLS = ("general", "clothes_change")


@dataclass
class EvalMeta:
    person_ids: np.ndarray
    clothes_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self) -> None:
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.clothes_ids = np.asarray(self.clothes_ids, dtype=np.int64)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        n = len(self.person_ids)
        if len(self.clothes_ids) != n or len(self.camera_ids) != n:
            raise ValueError("metadata arrays must share one length")

    def __len__(self) -> int:
        return len(self.person_ids)

    def row(self, i: int) -> tuple[int, int, int]:
        return int(self.person_ids[i]), int(self.clothes_ids[i]), int(self.camera_ids[i])


@dataclass
class RetrievalTask:
    query_feats: np.ndarray
    gallery_feats: np.ndarray
    query_meta: EvalMeta
    gallery_meta: EvalMeta
    protocol: str
    use_camera: bool = True  # False for datasets without camera labels

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        self.query_feats = np.asarray(self.query_feats, dtype=np.float64)
        self.gallery_feats = np.asarray(self.gallery_feats, dtype=np.float64)
        if self.query_feats.shape[0] != len(self.query_meta):
            raise ValueError("query feature count does not match query metadata length")
        if self.gallery_feats.shape[0] != len(self.gallery_meta):
            raise ValueError("gallery feature count does not match gallery metadata length")
        for name, feats in (("query", self.query_feats), ("gallery", self.gallery_feats)):
            norms = np.linalg.norm(feats, axis=1)
            if np.abs(norms - 1.0).max() > 1e-3:
                raise ValueError(f"{name} feature rows must be unit-norm")


@dataclass
class EvalReport:
    map: float
    cmc: list[float]
    n_valid_queries: int
    protocol: str
    notes: str = ""

    def to_dict(self) -> dict:
        d = {"protocol": self.protocol, "map": self.map, "cmc": self.cmc, "n_valid_queries": self.n_valid_queries}
        if self.notes:
            d["notes"] = self.notes
        return d


def pairwise_distance(query_feats: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    """Euclidean distances, Nq x Ng; monotone in negative cosine for unit rows."""
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims disagree: {q.shape} vs {g.shape}")
    sq = (q**2).sum(axis=1)[:, None] + (g**2).sum(axis=1)[None, :] - 2.0 * (q @ g.T)
    return np.sqrt(np.clip(sq, 0.0, None))


def valid_gallery_mask(
    q_meta: tuple[int, int, int],
    gallery_meta: EvalMeta,
    protocol: str,
    use_camera: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (kept, positive) vectors over the gallery for one query."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    pid, clothes, cam = q_meta
    same_pid = gallery_meta.person_ids == pid
    same_cam = gallery_meta.camera_ids == cam
    same_clothes = gallery_meta.clothes_ids == clothes

    junk = same_pid & same_cam if use_camera else np.zeros(len(gallery_meta), dtype=bool)
    if protocol == "clothes_change":
        junk = junk | (same_pid & same_clothes)
    valid = ~junk
    positive = valid & same_pid
    if protocol == "clothes_change":
        positive = positive & ~same_clothes
    return valid, positive


def compute_map_cmc(task: RetrievalTask, max_rank: int = 20) -> EvalReport:
    """Rank the filtered gallery per query and aggregate AP and CMC.

    Ties in distance are broken by gallery index. Queries with no positive
    among the kept gallery are dropped and only counted via n_valid_queries.
    """
    dist = pairwise_distance(task.query_feats, task.gallery_feats)
    n_query = dist.shape[0]
    hits = np.zeros(max_rank, dtype=np.int64)
    aps = []
    for i in range(n_query):
        valid, positive = valid_gallery_mask(
            task.query_meta.row(i), task.gallery_meta, task.protocol, task.use_camera
        )
        if not positive.any():
            continue
        keep_idx = np.flatnonzero(valid)
        order = keep_idx[np.argsort(dist[i, keep_idx], kind="stable")]
        matches = positive[order]

        first = int(np.argmax(matches))
        if first < max_rank:
            hits[first:] += 1

        ranks = np.arange(1, len(matches) + 1, dtype=np.float64)
        precisions = np.cumsum(matches) / ranks
        # fsum keeps the result independent of summation order, so the naive
        # oracle reproduces it bit-for-bit
        aps.append(math.fsum(precisions[matches]) / int(matches.sum()))

    if not aps:
        raise ValueError("no valid queries: every query lacks positives under this protocol")
    cmc = (hits / len(aps)).tolist()
    return EvalReport(
        map=math.fsum(aps) / len(aps),
        cmc=cmc,
        n_valid_queries=len(aps),
        protocol=task.protocol,
        notes="" if task.use_camera else "camera labels unavailable; same-camera exclusion skipped",
    )


def oracle_map_cmc(task: RetrievalTask, max_rank: int = 20) -> EvalReport:
    """Same contract as compute_map_cmc, by naive per-pair enumeration."""
    n_query = len(task.query_meta)
    n_gallery = len(task.gallery_meta)
    aps = []
    hit_ranks = []
    for i in range(n_query):
        qpid, qclothes, qcam = task.query_meta.row(i)
        ranked = []
        for j in range(n_gallery):
            gpid, gclothes, gcam = task.gallery_meta.row(j)
            junk = task.use_camera and gpid == qpid and gcam == qcam
            if task.protocol == "clothes_change" and gpid == qpid and gclothes == qclothes:
                junk = True
            if junk:
                continue
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(task.query_feats[i], task.gallery_feats[j])))
            good = gpid == qpid and (task.protocol == "general" or gclothes != qclothes)
            ranked.append((d, j, good))
        ranked.sort(key=lambda t: (t[0], t[1]))
        n_pos = sum(1 for _, _, good in ranked if good)
        if n_pos == 0:
            continue
        seen = 0
        precisions = []
        first_hit = None
        for rank, (_, _, good) in enumerate(ranked, start=1):
            if good:
                seen += 1
                precisions.append(seen / rank)
                if first_hit is None:
                    first_hit = rank
        aps.append(math.fsum(precisions) / n_pos)
        hit_ranks.append(first_hit)

    if not aps:
        raise ValueError("no valid queries: every query lacks positives under this protocol")
    cmc = [sum(1 for h in hit_ranks if h <= r) / len(aps) for r in range(1, max_rank + 1)]
    return EvalReport(
        map=math.fsum(aps) / len(aps),
        cmc=cmc,
        n_valid_queries=len(aps),
        protocol=task.protocol,
        notes="" if task.use_camera else "camera labels unavailable; same-camera exclusion skipped",
    )


def build_retrieval_task(model, manifest, protocol: str, batch_size: int = 64) -> RetrievalTask:
    """Extract RGB-branch features for query/gallery splits and bundle metadata.

    Only the RGB branch is evaluated; mask branch, predictor, and fusion
    parameters are never read on this path.
    """
    feats = {}
    metas = {}
    for split in ("query", "gallery"):
        samples = manifest.split(split)
        if not samples:
            raise ValueError(f"dataset has no {split} split")
        rows = []
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                images = np.stack([s.image for s in chunk])
                x = model.encode_rgb(images)
                rows.append(torch.nn.functional.normalize(x, dim=1).cpu().numpy())
        feats[split] = np.concatenate(rows, axis=0)
        metas[split] = EvalMeta(
            person_ids=np.array([s.person_id for s in samples]),
            clothes_ids=np.array([s.clothes_id for s in samples]),
            camera_ids=np.array([s.camera_id for s in samples]),
        )
    all_cams = np.concatenate([metas["query"].camera_ids, metas["gallery"].camera_ids])
    return RetrievalTask(
        query_feats=feats["query"],
        gallery_feats=feats["gallery"],
        query_meta=metas["query"],
        gallery_meta=metas["gallery"],
        protocol=protocol,
        use_camera=len(np.unique(all_cams)) > 1,
    )

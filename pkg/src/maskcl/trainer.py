"""Alternating training: structure construction, then contrastive updates.

Each epoch re-extracts RGB features with the current parameters, re-clusters
them into pseudo-labels, rebuilds fused cluster centers and top-k neighbor
sets (k following the curriculum schedule), then runs PK-sampled batches:
forward both branches plus predictor and fusion, evaluate the three losses
against bank prototypes, take an optimizer step, and EMA-update all three
banks in ascending sample_id order.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import DatasetManifest
from .encoder import EncoderConfig, TwoBranchModel, build_model, save_checkpoint
from .losses import loss_crossview, loss_neighbor, loss_prototypical, loss_total, posterior
from .memory import BankTriplet, init_banks
from .structure import (
    ClusteringConfig,
    ClusterState,
    NeighborDraw,
    build_neighbor_sets,
    cluster_feature_means,
    cluster_instances,
    compute_fused_centers,
    curriculum_k,
    sample_neighbors,
)

NEIGHBOR_FEATURES = ("fused", "rgb", "mask", "concat")


class ClusteringCollapseError(RuntimeError):
    """Raised when clustering yields fewer than 2 clusters for 3 consecutive epochs."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3.5e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    tau: float = 0.05
    alpha: float = 0.2
    k_max: int = 10
    clusters_per_batch: int = 16  # P
    instances_per_cluster: int = 4  # Q
    iters_per_epoch: int = 0  # 0 -> one pass: ceil(n_train / batch_size)
    seed: int = 0
    checkpoint_every: int = 10
    disable_l_n: bool = False
    disable_bernoulli_weight: bool = False
    neighbor_feature: str = "fused"
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        positives = (
            "epochs",
            "batch_size",
            "lr",
            "lr_decay_every",
            "tau",
            "k_max",
            "clusters_per_batch",
            "instances_per_cluster",
            "checkpoint_every",
        )
        for name in positives:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.weight_decay < 0 or self.iters_per_epoch < 0:
            raise ValueError("weight_decay and iters_per_epoch must be >= 0")
        if self.clusters_per_batch * self.instances_per_cluster != self.batch_size:
            raise ValueError(
                f"clusters_per_batch * instances_per_cluster must equal batch_size "
                f"({self.clusters_per_batch} * {self.instances_per_cluster} != {self.batch_size})"
            )
        if self.neighbor_feature not in NEIGHBOR_FEATURES:
            raise ValueError(f"neighbor_feature must be one of {NEIGHBOR_FEATURES}, got {self.neighbor_feature!r}")
        self.clustering.validate()
        self.encoder.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["clustering"] = self.clustering.to_dict()
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config key(s): {sorted(unknown)}")
        d = dict(d)
        if "clustering" in d:
            d["clustering"] = ClusteringConfig.from_dict(d["clustering"])
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


@dataclass
class EpochDiagnostics:
    epoch: int
    m: int
    n_outliers: int
    k: int
    neighbor_precision: Optional[float]
    mean_neighbor_sim: Optional[float]
    mean_l_p: float
    mean_l_c: float
    mean_l_n: float
    mean_total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """lr(epoch) = lr * decay_factor ** floor((epoch - 1) / decay_every), epochs 1-based."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    return config.lr * config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_every)


def pk_sample(state: ClusterState, p: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Draw min(p, m) clusters without replacement, then q instances from each
    (with replacement only when the cluster holds fewer than q samples)."""
    if state.m < 1:
        raise ValueError("cannot sample a batch from an empty cluster structure")
    chosen = rng.choice(state.m, size=min(p, state.m), replace=False)
    ids = []
    for l in chosen:
        members = state.clusters[int(l)]
        replace = len(members) < q
        ids.extend(rng.choice(members, size=q, replace=replace))
    return np.asarray(ids, dtype=np.int64)


def extract_features(
    model: TwoBranchModel, images: np.ndarray, masks: np.ndarray, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-dataset forward pass: unit-norm RGB, mask, and fused feature rows.

    Row i corresponds to sample_id i of the arrays passed in.
    """
    model.eval()
    xs, xts, fs = [], [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out = model.forward_all(images[start : start + batch_size], masks[start : start + batch_size])
            xs.append(torch.nn.functional.normalize(out.x, dim=1).cpu().numpy())
            xts.append(torch.nn.functional.normalize(out.x_tilde, dim=1).cpu().numpy())
            fs.append(torch.nn.functional.normalize(out.f, dim=1).cpu().numpy())
    return np.concatenate(xs), np.concatenate(xts), np.concatenate(fs)


def _majority_person(cluster: np.ndarray, person_ids: np.ndarray) -> int:
    return int(np.bincount(person_ids[cluster]).argmax())


def _prototype_matrix(bank, clusters) -> torch.Tensor:
    return torch.stack([bank.prototype(c) for c in clusters])


def run_training(
    manifest: DatasetManifest,
    config: TrainConfig,
    run_dir: str | Path | None = None,
) -> tuple[TwoBranchModel, BankTriplet, list[EpochDiagnostics]]:
    """Train on the manifest's train split; returns model, banks, diagnostics.

    When ``run_dir`` is given, writes train_log.csv (per step),
    structure_log.jsonl (per epoch), and periodic + final checkpoints there.
    """
    config.validate()
    train_samples = manifest.split("train")
    min_cluster = config.clustering.min_samples if config.clustering.method == "dbscan" else 1
    if len(train_samples) < 2 * min_cluster:
        raise ValueError(
            f"train split has {len(train_samples)} samples; need at least {2 * min_cluster}"
        )

    torch.set_num_threads(1)  # keeps reductions bit-reproducible across runs
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    model = build_model(config.encoder)
    images = np.stack([s.image for s in train_samples])
    masks = np.stack([s.mask for s in train_samples])
    person_ids = np.array([s.person_id for s in train_samples], dtype=np.int64)
    labels_available = manifest.generator_config is not None
    n_train = len(train_samples)

    x0, xt0, _ = extract_features(model, images, masks, config.batch_size)
    banks = init_banks(x0, xt0, config.alpha)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    run_dir = Path(run_dir) if run_dir is not None else None
    train_log = structure_log = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        train_log = open(run_dir / "train_log.csv", "w", newline="")
        csv.writer(train_log).writerow(["epoch", "step", "l_p", "l_c", "l_n", "total"])
        structure_log = open(run_dir / "structure_log.jsonl", "w")

    diagnostics: list[EpochDiagnostics] = []
    degenerate_epochs = 0
    try:
        for epoch in range(1, config.epochs + 1):
            for group in optimizer.param_groups:
                group["lr"] = learning_rate(config, epoch)

            x_all, _, _ = extract_features(model, images, masks, config.batch_size)
            state: Optional[ClusterState] = None
            try:
                state = cluster_instances(x_all, config.clustering)
                state.epoch = epoch
            except ValueError:
                state = None

            m = state.m if state is not None else 0
            degenerate_epochs = degenerate_epochs + 1 if m < 2 else 0
            if degenerate_epochs >= 3:
                raise ClusteringCollapseError(
                    f"clustering produced fewer than 2 clusters for 3 consecutive epochs (through epoch {epoch})"
                )

            k = curriculum_k(epoch, config.epochs, config.k_max)
            step_stats: list[tuple[float, float, float, float]] = []
            sampled_pairs: list[tuple[int, int]] = []

            if state is not None:
                if config.neighbor_feature == "fused":
                    state.centers = compute_fused_centers(state, banks.m_fused)
                elif config.neighbor_feature == "rgb":
                    state.centers = cluster_feature_means(state.clusters, banks.m_rgb.entries.numpy())
                elif config.neighbor_feature == "mask":
                    state.centers = cluster_feature_means(state.clusters, banks.m_mask.entries.numpy())
                else:  # concat
                    both = np.concatenate([banks.m_rgb.entries.numpy(), banks.m_mask.entries.numpy()], axis=1)
                    state.centers = cluster_feature_means(state.clusters, both)
                state.neighbor_sets = build_neighbor_sets(state.centers, k)

                steps = config.iters_per_epoch or math.ceil(n_train / config.batch_size)
                model.train()
                for step in range(steps):
                    ids = pk_sample(state, config.clusters_per_batch, config.instances_per_cluster, rng)
                    out = model.forward_all(images[ids], masks[ids])
                    xn = torch.nn.functional.normalize(out.x, dim=1)
                    xtn = torch.nn.functional.normalize(out.x_tilde, dim=1)
                    fn = torch.nn.functional.normalize(out.f, dim=1)

                    proto_rgb = _prototype_matrix(banks.m_rgb, state.clusters)
                    proto_mask = _prototype_matrix(banks.m_mask, state.clusters)
                    proto_fused = _prototype_matrix(banks.m_fused, state.clusters)

                    draws: dict[int, NeighborDraw] = {}
                    if not config.disable_l_n:
                        for l in sorted({int(state.labels[i]) for i in ids}):
                            if config.disable_bernoulli_weight:
                                draws[l] = NeighborDraw(l, [(j, 1.0) for j, _ in state.neighbor_sets[l]])
                            else:
                                draws[l] = sample_neighbors(state, l, rng)
                            sampled_pairs.extend((l, j) for j, _ in draws[l].drawn)

                    l_p_terms, l_c_terms, l_n_terms = [], [], []
                    for b, sid in enumerate(ids):
                        own = int(state.labels[sid])
                        q = posterior(proto_rgb, xn[b], config.tau)
                        q_tilde = posterior(proto_mask, xtn[b], config.tau)
                        q_hat = posterior(proto_fused, fn[b], config.tau)
                        l_p_terms.append(loss_prototypical(q.q[own], q_tilde.q[own], q_hat.q[own]))
                        l_c_terms.append(loss_crossview(out.z[b], out.x_tilde[b], proto_mask[own]))
                        if not config.disable_l_n:
                            l_n_terms.append(loss_neighbor(draws[own], q, q_tilde))

                    l_p = torch.stack(l_p_terms).mean()
                    l_c = torch.stack(l_c_terms).mean()
                    l_n = torch.stack(l_n_terms).mean() if l_n_terms else l_p.new_zeros(())
                    total = loss_total(l_p, l_c, l_n)

                    optimizer.zero_grad()
                    total.backward()
                    optimizer.step()

                    for b in np.argsort(ids, kind="stable"):
                        sid = int(ids[b])
                        banks.m_rgb.ema_update(sid, out.x[b].detach())
                        banks.m_mask.ema_update(sid, out.x_tilde[b].detach())
                        banks.m_fused.ema_update(sid, out.f[b].detach())

                    row = tuple(float(v.detach()) for v in (l_p, l_c, l_n, total))
                    step_stats.append(row)
                    if train_log is not None:
                        csv.writer(train_log).writerow([epoch, step, *(f"{v:.6f}" for v in row)])
                if train_log is not None:
                    train_log.flush()

            precision = None
            if labels_available and sampled_pairs:
                majors = [_majority_person(c, person_ids) for c in state.clusters]
                correct = sum(1 for src, j in sampled_pairs if majors[j] == majors[src])
                precision = correct / len(sampled_pairs)

            mean_sim = None
            if state is not None and state.neighbor_sets is not None:
                sims = [s for entries in state.neighbor_sets for _, s in entries]
                mean_sim = float(np.mean(sims)) if sims else None

            means = tuple(float(np.mean(col)) for col in zip(*step_stats)) if step_stats else (0.0,) * 4
            diag = EpochDiagnostics(
                epoch=epoch,
                m=m,
                n_outliers=state.n_outliers if state is not None else n_train,
                k=k,
                neighbor_precision=precision,
                mean_neighbor_sim=mean_sim,
                mean_l_p=means[0],
                mean_l_c=means[1],
                mean_l_n=means[2],
                mean_total=means[3],
            )
            diagnostics.append(diag)

            if structure_log is not None:
                structure_log.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "m": diag.m,
                            "n_outliers": diag.n_outliers,
                            "k": diag.k,
                            "mean_neighbor_sim": diag.mean_neighbor_sim,
                            "neighbor_precision": diag.neighbor_precision,
                        }
                    )
                    + "\n"
                )
                structure_log.flush()

            if run_dir is not None and epoch % config.checkpoint_every == 0:
                save_checkpoint(run_dir / f"checkpoint_ep{epoch:03d}.pt", model, banks, epoch)
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoint_final.pt", model, banks, config.epochs)
    finally:
        if train_log is not None:
            train_log.close()
        if structure_log is not None:
            structure_log.close()
    return model, banks, diagnostics

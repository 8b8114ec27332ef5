"""Synthetic clothes-change re-id datasets with silhouette masks.

Each generated person owns a latent body shape (head radius, torso and leg
geometry) that is shared across outfits, while every outfit owns its own
region colors. Images of one person in different outfits therefore differ
strongly in RGB statistics but only weakly in silhouette geometry, which is
the property the training framework exploits.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

SPLITS = ("train", "query", "gallery")


class ConfigError(ValueError):
    """Invalid configuration value; message names the offending field."""


class DatasetError(ValueError):
    """Missing files, schema mismatch, or violated dataset invariant."""


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic pedestrian generator.

    ``n_persons`` are used for the train split; ``eval_persons`` additional
    identities are held out for query/gallery unless ``closed_set`` is set,
    in which case query/gallery images are extra renders of the train
    identities.
    """

    n_persons: int = 10
    outfits_per_person: int = 3
    images_per_outfit: int = 4
    n_cameras: int = 2
    image_size: tuple[int, int] = (64, 32)
    shape_noise: float = 0.02
    color_noise: float = 0.02
    camera_tint_strength: float = 0.06
    seed: int = 0
    eval_persons: int = 10
    closed_set: bool = False

    def validate(self) -> None:
        for name in ("n_persons", "outfits_per_person", "images_per_outfit", "n_cameras"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.image_size) != 2:
            raise ConfigError(f"image_size must be (H, W), got {self.image_size!r}")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image_size entries must be >= 16, got {self.image_size}")
        for name in ("shape_noise", "color_noise", "camera_tint_strength"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.eval_persons < 0:
            raise ConfigError(f"eval_persons must be >= 0, got {self.eval_persons}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset config key(s): {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(int(v) for v in d["image_size"])
        return cls(**d)


@dataclass
class Sample:
    """One pedestrian observation: RGB image, silhouette mask, labels."""

    sample_id: int
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, float32 in [0, 1]
    person_id: int
    clothes_id: int
    camera_id: int
    split: str


@dataclass
class DatasetManifest:
    samples: list[Sample]
    generator_config: Optional[SyntheticConfig]
    seed: int

    def split(self, name: str) -> list[Sample]:
        return sorted((s for s in self.samples if s.split == name), key=lambda s: s.sample_id)

    def counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}


def manifests_equal(a: DatasetManifest, b: DatasetManifest) -> bool:
    """Field-for-field equality, including pixel payloads."""
    if a.seed != b.seed or a.generator_config != b.generator_config:
        return False
    if len(a.samples) != len(b.samples):
        return False
    for sa, sb in zip(a.samples, b.samples):
        if (sa.sample_id, sa.person_id, sa.clothes_id, sa.camera_id, sa.split) != (
            sb.sample_id,
            sb.person_id,
            sb.clothes_id,
            sb.camera_id,
            sb.split,
        ):
            return False
        if not np.array_equal(sa.image, sb.image) or not np.array_equal(sa.mask, sb.mask):
            return False
    return True


def validate_manifest(manifest: DatasetManifest) -> None:
    """Re-check every dataset invariant; raises DatasetError on violation."""
    clothes_owner: dict[int, int] = {}
    per_split_ids: dict[str, list[int]] = {name: [] for name in SPLITS}
    for s in manifest.samples:
        if s.split not in SPLITS:
            raise DatasetError(f"sample {s.sample_id}: unknown split {s.split!r}")
        per_split_ids[s.split].append(s.sample_id)
        if s.image.ndim != 3 or s.image.shape[2] != 3:
            raise DatasetError(f"sample {s.sample_id}: image must be HxWx3, got {s.image.shape}")
        if s.mask.shape != s.image.shape[:2]:
            raise DatasetError(
                f"sample {s.sample_id}: mask shape {s.mask.shape} does not match image {s.image.shape[:2]}"
            )
        if s.image.min() < 0 or s.image.max() > 1:
            raise DatasetError(f"sample {s.sample_id}: image values outside [0, 1]")
        if s.mask.min() < 0 or s.mask.max() > 1:
            raise DatasetError(f"sample {s.sample_id}: mask values outside [0, 1]")
        if manifest.generator_config is not None:
            binary = np.isin(s.mask, (0.0, 1.0)).all()
            if not binary:
                raise DatasetError(f"sample {s.sample_id}: synthetic mask is not binary")
        owner = clothes_owner.setdefault(s.clothes_id, s.person_id)
        if owner != s.person_id:
            raise DatasetError(
                f"sample {s.sample_id}: clothes_id {s.clothes_id} appears under person_ids "
                f"{owner} and {s.person_id}"
            )
    for name, ids in per_split_ids.items():
        if sorted(ids) != list(range(len(ids))):
            raise DatasetError(f"split {name!r}: sample_ids are not contiguous 0..{len(ids) - 1}")


# ---------------------------------------------------------------------------
# generation


def _person_shape(rng: np.random.Generator) -> dict[str, float]:
    return {
        "head_r": rng.uniform(0.05, 0.10),  # of H
        "head_cy": rng.uniform(0.10, 0.16),  # of H
        "torso_top": rng.uniform(0.19, 0.25),  # of H
        "torso_halfw": rng.uniform(0.12, 0.30),  # of W
        "torso_h": rng.uniform(0.26, 0.44),  # of H
        "leg_halfw": rng.uniform(0.040, 0.090),  # of W
        "leg_len": rng.uniform(0.18, 0.38),  # of H
        "leg_offset": rng.uniform(0.05, 0.14),  # of W
    }


def _outfit_appearance(rng: np.random.Generator) -> dict:
    return {
        "torso_rgb": rng.uniform(0.15, 0.95, size=3),
        "leg_rgb": rng.uniform(0.15, 0.95, size=3),
        "striped": bool(rng.random() < 0.5),
        "stripe_rgb": rng.uniform(0.15, 0.95, size=3),
        "stripe_period": int(rng.integers(3, 7)),
    }


def _render(
    shape: dict[str, float],
    outfit: dict,
    skin_rgb: np.ndarray,
    cam_tint: np.ndarray,
    cfg: SyntheticConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.image_size
    jitter = {k: v * (1.0 + cfg.shape_noise * rng.standard_normal()) for k, v in shape.items()}
    cx = (0.5 + 0.5 * cfg.shape_noise * rng.standard_normal()) * w

    ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5

    head_cy, head_r = jitter["head_cy"] * h, jitter["head_r"] * h
    head = (xs - cx) ** 2 + (ys - head_cy) ** 2 <= head_r**2

    torso_top = jitter["torso_top"] * h
    torso_h = jitter["torso_h"] * h
    torso_cy = torso_top + torso_h / 2
    torso_hw = jitter["torso_halfw"] * w
    torso = ((xs - cx) / torso_hw) ** 2 + ((ys - torso_cy) / (torso_h / 2)) ** 2 <= 1.0

    legs_top = torso_top + torso_h * 0.92
    legs_bot = legs_top + jitter["leg_len"] * h
    leg_hw = jitter["leg_halfw"] * w
    off = jitter["leg_offset"] * w
    in_rows = (ys >= legs_top) & (ys <= legs_bot)
    left = in_rows & (np.abs(xs - (cx - off)) <= leg_hw)
    right = in_rows & (np.abs(xs - (cx + off)) <= leg_hw)
    legs = left | right

    mask = head | torso | legs

    img = np.full((h, w, 3), 0.12, dtype=np.float64)
    img[head] = skin_rgb
    torso_fill = np.where(torso, 1.0, 0.0)[:, :, None] * outfit["torso_rgb"][None, None, :]
    if outfit["striped"]:
        stripe_rows = (np.arange(h) // outfit["stripe_period"]) % 2 == 0
        torso_stripe = torso & stripe_rows[:, None]
        torso_fill[torso_stripe] = outfit["stripe_rgb"]
    img[torso] = torso_fill[torso]
    img[legs & ~torso] = outfit["leg_rgb"]

    shade = (1.0 - 0.25 * ys / h)[:, :, None]
    img = np.where(mask[:, :, None], img * shade, img)
    img = img * (1.0 + cfg.camera_tint_strength * cam_tint)[None, None, :]
    img = img + rng.normal(0.0, cfg.color_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = (np.round(img * 255.0) / 255.0).astype(np.float32)
    return img, mask.astype(np.float32)


def generate_synthetic(config: SyntheticConfig) -> DatasetManifest:
    """Render a full dataset deterministically from ``config`` (seed included)."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    tints = rng.standard_normal((config.n_cameras, 3))
    tints /= np.linalg.norm(tints, axis=1, keepdims=True)

    n_total = config.n_persons if config.closed_set else config.n_persons + config.eval_persons
    persons = []
    for pid in range(n_total):
        shape = _person_shape(rng)
        skin = rng.uniform(0.40, 0.90, size=3)
        outfits = [_outfit_appearance(rng) for _ in range(config.outfits_per_person)]
        persons.append((shape, skin, outfits))

    samples: list[Sample] = []
    next_id = {name: 0 for name in SPLITS}

    def emit(split: str, pid: int, clothes_id: int, cam: int, img: np.ndarray, msk: np.ndarray) -> None:
        samples.append(
            Sample(
                sample_id=next_id[split],
                image=img,
                mask=msk,
                person_id=pid,
                clothes_id=clothes_id,
                camera_id=cam,
                split=split,
            )
        )
        next_id[split] += 1

    for pid, (shape, skin, outfits) in enumerate(persons):
        train_person = pid < config.n_persons
        for oi, outfit in enumerate(outfits):
            clothes_id = pid * config.outfits_per_person + oi
            for j in range(config.images_per_outfit):
                cam = j % config.n_cameras
                img, msk = _render(shape, outfit, skin, tints[cam], config, rng)
                if train_person:
                    emit("train", pid, clothes_id, cam, img, msk)
                else:
                    split = "query" if j == 0 else "gallery"
                    emit(split, pid, clothes_id, cam, img, msk)
            if train_person and config.closed_set:
                # extra renders of train identities for closed-set evaluation
                for j, split in enumerate(("query", "gallery")):
                    cam = j % config.n_cameras
                    img, msk = _render(shape, outfit, skin, tints[cam], config, rng)
                    emit(split, pid, clothes_id, cam, img, msk)

    manifest = DatasetManifest(samples=samples, generator_config=config, seed=config.seed)
    validate_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# persistence


def _rel_paths(sample: Sample) -> tuple[str, str]:
    stem = f"{sample.split}_{sample.sample_id:05d}.png"
    return f"images/{stem}", f"masks/{stem}"


def save_dataset(manifest: DatasetManifest, root: str | os.PathLike) -> None:
    """Write pixel files plus manifest.json under ``root``.

    The manifest is written last via an atomic rename, so an I/O failure
    while writing pixels never leaves a partial manifest behind.
    """
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        records = []
        for s in manifest.samples:
            img_rel, msk_rel = _rel_paths(s)
            Image.fromarray(np.round(s.image * 255.0).astype(np.uint8), mode="RGB").save(root / img_rel)
            Image.fromarray(np.round(s.mask * 255.0).astype(np.uint8), mode="L").save(root / msk_rel)
            records.append(
                {
                    "sample_id": s.sample_id,
                    "image_path": img_rel,
                    "mask_path": msk_rel,
                    "person_id": s.person_id,
                    "clothes_id": s.clothes_id,
                    "camera_id": s.camera_id,
                    "split": s.split,
                }
            )
        doc = {
            "seed": manifest.seed,
            "generator_config": manifest.generator_config.to_dict() if manifest.generator_config else None,
            "samples": records,
        }
        tmp = root / "manifest.json.tmp"
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, root / "manifest.json")
    except OSError as exc:
        raise DatasetError(f"failed to write dataset under {root}: {exc}") from exc


def load_dataset(root: str | os.PathLike) -> DatasetManifest:
    """Load a dataset root and re-validate every invariant."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest file: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc

    for key in ("seed", "generator_config", "samples"):
        if key not in doc:
            raise DatasetError(f"manifest {manifest_path} lacks key {key!r}")
    gen_cfg = doc["generator_config"]
    config = SyntheticConfig.from_dict(gen_cfg) if gen_cfg is not None else None

    record_keys = {"sample_id", "image_path", "mask_path", "person_id", "clothes_id", "camera_id", "split"}
    samples = []
    for rec in doc["samples"]:
        if set(rec) != record_keys:
            raise DatasetError(f"manifest record has keys {sorted(rec)}, expected {sorted(record_keys)}")
        img_path = root / rec["image_path"]
        msk_path = root / rec["mask_path"]
        if not img_path.is_file():
            raise DatasetError(f"missing image file: {img_path}")
        if not msk_path.is_file():
            raise DatasetError(f"missing mask file: {msk_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        msk = np.asarray(Image.open(msk_path).convert("L"), dtype=np.float32) / 255.0
        samples.append(
            Sample(
                sample_id=int(rec["sample_id"]),
                image=img,
                mask=msk,
                person_id=int(rec["person_id"]),
                clothes_id=int(rec["clothes_id"]),
                camera_id=int(rec["camera_id"]),
                split=str(rec["split"]),
            )
        )
    manifest = DatasetManifest(samples=samples, generator_config=config, seed=int(doc["seed"]))
    validate_manifest(manifest)
    return manifest


def dataset_hash(root: str | os.PathLike) -> str:
    """SHA-256 over manifest.json plus every referenced pixel file, in manifest order."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest file: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    digest = hashlib.sha256()
    digest.update(manifest_path.read_bytes())
    for rec in doc["samples"]:
        for key in ("image_path", "mask_path"):
            p = root / rec[key]
            if not p.is_file():
                raise DatasetError(f"missing file referenced by manifest: {p}")
            digest.update(p.read_bytes())
    return digest.hexdigest()

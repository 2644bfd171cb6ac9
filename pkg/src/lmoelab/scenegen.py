"""Synthetic long-tailed multi-camera scenes.

Each scene holds ground-truth boxes with class and appearance-mode ids, one
teacher embedding per instance, and a k x D block of per-query observation
vectors that stand in for the detector's attended features: one row per
instance plus pure-noise distractor rows, in shuffled order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import Box3D, Camera
from .semantics import (
    ClassVocabulary,
    FrequencyGroup,
    LanguageEmbeddings,
    default_vocabulary,
    mode_offset,
    synth_language_embeddings,
    synth_visual_embedding,
    two_group_vocabulary,
)

SCN_VERSION = "SCN v1"

# nominal (length, width, height) per semantic group of the default vocabularies
GROUP_SIZES = ((0.8, 0.7, 1.75), (4.5, 1.9, 1.7), (1.0, 1.0, 1.0))


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    vocabulary: ClassVocabulary = field(default_factory=default_vocabulary)
    zipf_exponent: float = 1.0
    objects_min: int = 3
    objects_max: int = 8
    n_modes: int = 2
    confusion_pairs: tuple[tuple[int, int, float], ...] = ((6, 14, 0.6), (15, 3, 0.6))
    confusion_fraction: float = 0.6
    obs_dim: int = 32
    obs_noise: float = 0.3
    semantic_mix: float = 0.5
    pos_scale: float = 1.0
    distractors: int = 4
    lang_dim: int = 64
    intra_group_cos: float = 0.3
    teacher_noise: float = 0.2
    mode_scale: float = 0.6
    n_cameras: int = 6
    world_extent: float = 30.0
    min_range: float = 4.0
    min_separation: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be positive")
        if self.n_modes < 1:
            raise ValueError("need at least one appearance mode per class")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("objects_min must lie in [1, objects_max]")
        n = len(self.vocabulary)
        for a, b, c in self.confusion_pairs:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"bad confusion pair ({a}, {b})")
            if not 0 <= c < 1:
                raise ValueError("confusion cosine must lie in [0, 1)")
        if self.world_extent <= self.min_range:
            raise ValueError("world_extent must exceed min_range")

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocabulary"] = [[e.name, e.group] for e in self.vocabulary.entries]
        d["confusion_pairs"] = [list(p) for p in self.confusion_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "vocabulary" in d:
            v = d["vocabulary"]
            if v == "default":
                d["vocabulary"] = default_vocabulary()
            elif v == "two_group":
                d["vocabulary"] = two_group_vocabulary()
            else:
                d["vocabulary"] = ClassVocabulary.from_names([x[0] for x in v], [x[1] for x in v])
        if "confusion_pairs" in d:
            d["confusion_pairs"] = tuple((int(a), int(b), float(c)) for a, b, c in d["confusion_pairs"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


def two_group_config(**overrides) -> SceneConfig:
    """Eight classes in two semantic groups (human-like, vehicle-like)."""
    base = dict(vocabulary=two_group_vocabulary(), confusion_pairs=((5, 7, 0.6),))
    base.update(overrides)
    return SceneConfig(**base)


@dataclass
class Scene:
    seed: int
    boxes: list[Box3D]
    modes: np.ndarray  # G
    teacher: np.ndarray  # G x d, unit rows
    observations: np.ndarray  # k x D
    query_source: np.ndarray  # k, instance index or -1 for distractors
    rig: list[Camera]

    @property
    def classes(self) -> np.ndarray:
        return np.array([b.class_id for b in self.boxes], dtype=int)

    @property
    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.boxes], dtype=np.float64).reshape(-1, 3)

    @property
    def n_queries(self) -> int:
        return self.observations.shape[0]


# --------------------------------------------------------------------------
# class frequencies


def zipf_masses(s: float, n: int) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-s)
    return w / w.sum()


def sample_class(zipf_exponent: float, n: int, rng: np.random.Generator, size=None):
    """Class ids with P(r) proportional to (r + 1)^-s (class 0 is the head)."""
    if n < 1:
        raise ValueError("need at least one class")
    return rng.choice(n, size=size, p=zipf_masses(zipf_exponent, n))


def default_cuts(counts) -> tuple[float, float]:
    """Tertiles of log counts as (cut_many, cut_few)."""
    logc = np.log(np.asarray(counts, dtype=np.float64) + 1.0)
    lo, hi = np.quantile(logc, [1 / 3, 2 / 3])
    cut_few, cut_many = np.exp(lo) - 1.0, np.exp(hi) - 1.0
    if cut_many <= cut_few:  # tied tertiles: everything at the cut is Many, nothing is Few
        cut_few = np.nextafter(cut_many, -np.inf)
    return float(cut_many), float(cut_few)


def frequency_groups(counts, cut_many: float | None = None, cut_few: float | None = None) -> list[FrequencyGroup]:
    """Many if count >= cut_many, Few if count <= cut_few, Medium otherwise."""
    counts = np.asarray(counts)
    if cut_many is None or cut_few is None:
        cut_many, cut_few = default_cuts(counts)
    if not cut_many > cut_few:
        raise ValueError("cuts must satisfy cut_many > cut_few")
    out = []
    for c in counts:
        if c >= cut_many:
            out.append(FrequencyGroup.MANY)
        elif c <= cut_few:
            out.append(FrequencyGroup.FEW)
        else:
            out.append(FrequencyGroup.MEDIUM)
    return out


# --------------------------------------------------------------------------
# world-level fixed quantities (depend on config, not on the scene seed)


@lru_cache(maxsize=16)
def _language(vocab: ClassVocabulary, d: int, seed: int, intra_group_cos: float) -> LanguageEmbeddings:
    return synth_language_embeddings(vocab, d, seed, intra_group_cos)


def language_for(config: SceneConfig) -> LanguageEmbeddings:
    return _language(config.vocabulary, config.lang_dim, config.seed, config.intra_group_cos)


@lru_cache(maxsize=16)
def _world(config: SceneConfig) -> dict:
    rng = np.random.default_rng([config.seed, 1])
    D, d = config.obs_dim, config.lang_dim
    lang = language_for(config)
    mix = np.linalg.qr(rng.standard_normal((d, D)))[0] if d >= D else rng.standard_normal((d, D)) / np.sqrt(d)
    pos = rng.standard_normal((3, D))
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    sigs = np.zeros((config.n_classes, config.n_modes, D))
    for c in range(config.n_classes):
        for m in range(config.n_modes):
            proto = lang.matrix[c] + mode_offset(c, m, d, config.mode_scale, config.seed)
            proto /= np.linalg.norm(proto)
            sem = proto @ mix
            sem /= np.linalg.norm(sem)
            own = rng.standard_normal(D)
            own /= np.linalg.norm(own)
            a = config.semantic_mix
            v = np.sqrt(a) * sem + np.sqrt(1.0 - a) * own
            sigs[c, m] = v / np.linalg.norm(v)
    confusers = {}
    for a, b, cos in config.confusion_pairs:
        confusers.setdefault(a, []).append((b, cos))
    return {"signatures": sigs, "pos": pos, "confusers": confusers, "rig": geometry.default_rig(config.n_cameras)}


def class_signatures(config: SceneConfig) -> np.ndarray:
    """n x modes x D noiseless observation directions."""
    return _world(config)["signatures"]


# --------------------------------------------------------------------------
# scenes


def _box_size(group: int, rng: np.random.Generator) -> tuple[float, float, float]:
    base = np.array(GROUP_SIZES[group % len(GROUP_SIZES)])
    return tuple(float(x) for x in base * rng.uniform(0.85, 1.15, 3))


def _visible(box: Box3D, rig) -> bool:
    return any(geometry.crop_rect(box, cam, i) is not None for i, cam in enumerate(rig))


def generate_scene(config: SceneConfig, scene_seed: int) -> Scene:
    rng = np.random.default_rng([config.seed, 2, scene_seed])
    world = _world(config)
    lang = language_for(config)
    rig = world["rig"]
    groups = config.vocabulary.groups
    D = config.obs_dim

    count = int(rng.integers(config.objects_min, config.objects_max + 1))
    classes = sample_class(config.zipf_exponent, config.n_classes, rng, size=count)
    modes = rng.integers(0, config.n_modes, size=count)

    boxes: list[Box3D] = []
    for c in classes:
        for _ in range(1000):
            r = np.sqrt(rng.uniform(config.min_range**2, config.world_extent**2))
            theta = rng.uniform(-np.pi, np.pi)
            size = _box_size(int(groups[c]), rng)
            yaw = float(np.pi - rng.uniform(0.0, 2 * np.pi))
            center = (float(r * np.cos(theta)), float(r * np.sin(theta)), size[2] / 2.0)
            if any(np.hypot(center[0] - b.center[0], center[1] - b.center[1]) < config.min_separation for b in boxes):
                continue
            box = Box3D(center, size, yaw if yaw > -np.pi else np.pi, int(c))
            if _visible(box, rig):
                boxes.append(box)
                break
        else:
            raise RuntimeError("could not place objects: world too small for the separation constraint")

    teacher = np.zeros((count, config.lang_dim))
    for g, (c, m) in enumerate(zip(classes, modes)):
        confuse, cos = None, 0.0
        options = world["confusers"].get(int(c), [])
        if options and rng.uniform() < config.confusion_fraction:
            confuse, cos = options[int(rng.integers(len(options)))]
        teacher[g] = synth_visual_embedding(
            int(c), int(m), config.teacher_noise, lang, rng,
            mode_scale=config.mode_scale, mode_seed=config.seed,
            confuse_with=confuse, confusion_cos=cos,
        ).vector

    centers = np.array([b.center for b in boxes])
    sig = world["signatures"][classes, modes]
    pos = config.pos_scale * (centers / config.world_extent) @ world["pos"]
    inst = sig + pos + config.obs_noise * rng.standard_normal((count, D)) / np.sqrt(D)
    distract = rng.standard_normal((config.distractors, D)) / np.sqrt(D)
    obs = np.concatenate([inst, distract], axis=0) * np.sqrt(D)
    source = np.concatenate([np.arange(count), -np.ones(config.distractors, dtype=int)])
    order = rng.permutation(len(source))
    return Scene(int(scene_seed), boxes, modes.astype(int), teacher, obs[order], source[order].astype(int), list(rig))


@dataclass
class CorpusStats:
    class_counts: np.ndarray
    groups: list[FrequencyGroup]
    n_scenes: int
    n_objects: int

    def to_dict(self) -> dict:
        return {
            "class_counts": self.class_counts.tolist(),
            "groups": [g.value for g in self.groups],
            "n_scenes": self.n_scenes,
            "n_objects": self.n_objects,
        }


@dataclass
class Corpus:
    config: SceneConfig
    scenes: list[Scene]
    base_seed: int
    stats: CorpusStats


def corpus_stats(config: SceneConfig, scenes) -> CorpusStats:
    counts = np.zeros(config.n_classes, dtype=int)
    for s in scenes:
        counts += np.bincount(s.classes, minlength=config.n_classes)
    return CorpusStats(counts, frequency_groups(counts), len(scenes), int(counts.sum()))


def corpus(config: SceneConfig, n_scenes: int, base_seed: int = 0) -> Corpus:
    if n_scenes < 1:
        raise ValueError("a corpus needs at least one scene")
    scenes = [generate_scene(config, base_seed + i) for i in range(n_scenes)]
    return Corpus(config, scenes, base_seed, corpus_stats(config, scenes))


# --------------------------------------------------------------------------
# SCN v1 text container


def _fmt(values) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(values))


def save_corpus(c: Corpus, path) -> Path:
    path = Path(path)
    lines = [SCN_VERSION, "config " + json.dumps(c.config.to_dict(), sort_keys=True)]
    lines.append(f"corpus {len(c.scenes)} {c.base_seed}")
    for s in c.scenes:
        k, D = s.observations.shape
        lines.append(f"scene {s.seed} {len(s.boxes)} {k} {D} {s.teacher.shape[1]} {len(s.rig)}")
        for b, m in zip(s.boxes, s.modes):
            lines.append(f"box {b.class_id} {int(m)} " + _fmt([*b.center, *b.size, b.yaw]))
        for row in s.teacher:
            lines.append("teacher " + _fmt(row))
        for src, row in zip(s.query_source, s.observations):
            lines.append(f"obs {int(src)} " + _fmt(row))
        for cam in s.rig:
            lines.append(f"cam {cam.width} {cam.height} " + _fmt(cam.intrinsic) + " " + _fmt(cam.extrinsic))
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_corpus(path) -> Corpus:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != SCN_VERSION:
        raise CorpusFormatError(f"{path}: missing '{SCN_VERSION}' header")
    try:
        config = SceneConfig.from_dict(json.loads(lines[1].split(" ", 1)[1]))
        _, n, base = lines[2].split()
        it = iter(lines[3:])
        scenes = []
        for _ in range(int(n)):
            head = next(it).split()
            if head[0] != "scene":
                raise CorpusFormatError(f"{path}: expected a scene record, got {head[0]!r}")
            seed, G, k, D, d, C = (int(x) for x in head[1:])
            boxes, modes = [], []
            for _ in range(G):
                p = next(it).split()
                v = [float(x) for x in p[3:]]
                boxes.append(Box3D(tuple(v[0:3]), tuple(v[3:6]), v[6], int(p[1])))
                modes.append(int(p[2]))
            teacher = np.array([[float(x) for x in next(it).split()[1:]] for _ in range(G)]).reshape(G, d)
            src, obs = [], []
            for _ in range(k):
                p = next(it).split()
                src.append(int(p[1]))
                obs.append([float(x) for x in p[2:]])
            rig = []
            for _ in range(C):
                p = next(it).split()
                v = np.array([float(x) for x in p[3:]])
                rig.append(Camera(v[9:].reshape(4, 4), v[:9].reshape(3, 3), int(p[1]), int(p[2])))
            scenes.append(
                Scene(seed, boxes, np.array(modes, dtype=int), teacher, np.array(obs).reshape(k, D), np.array(src, dtype=int), rig)
            )
        if next(it) != "end":
            raise CorpusFormatError(f"{path}: trailing data after the last scene")
    except (StopIteration, IndexError, ValueError) as exc:
        if isinstance(exc, CorpusFormatError):
            raise
        raise CorpusFormatError(f"{path}: truncated or malformed corpus file ({exc})") from exc
    return Corpus(config, scenes, int(base), corpus_stats(config, scenes))

"""Class vocabularies and the embedding provider standing in for a frozen
vision-language model.

Language embeddings are either synthesized with a controlled semantic-group
structure or read from a plain-text ``EMB v1`` file of precomputed vectors.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TEMPLATE = "a photo of a {}"


class EmbeddingFormatError(ValueError):
    pass


class FrequencyGroup(str, enum.Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"


@dataclass(frozen=True)
class VocabEntry:
    name: str
    group: int
    frequency: FrequencyGroup | None = None


@dataclass(frozen=True)
class ClassVocabulary:
    entries: tuple[VocabEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(names) < 2:
            raise ValueError("a vocabulary needs at least 2 classes")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        groups = sorted({e.group for e in self.entries})
        if groups != list(range(len(groups))):
            raise ValueError(f"semantic group ids must be contiguous from 0, got {groups}")

    @classmethod
    def from_names(cls, names, groups) -> "ClassVocabulary":
        return cls(tuple(VocabEntry(n, int(g)) for n, g in zip(names, groups)))

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def groups(self) -> np.ndarray:
        return np.array([e.group for e in self.entries])

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1

    def __len__(self) -> int:
        return len(self.entries)

    def with_frequency(self, labels) -> "ClassVocabulary":
        return ClassVocabulary(
            tuple(VocabEntry(e.name, e.group, FrequencyGroup(lab)) for e, lab in zip(self.entries, labels))
        )


# 18 classes in three groups: human-like, vehicle-like, static.
DEFAULT_CLASSES = (
    ("car", 1), ("adult", 0), ("barrier", 2), ("traffic_cone", 2), ("truck", 1),
    ("pedestrian_child", 0), ("construction_worker", 0), ("bus", 1), ("pushable_pullable", 2),
    ("motorcycle", 1), ("bicycle", 1), ("construction_vehicle", 1), ("trailer", 1),
    ("bicycle_rack", 2), ("police_officer", 0), ("debris", 2), ("stroller", 0),
    ("emergency_vehicle", 1),
)

TWO_GROUP_CLASSES = (
    ("car", 1), ("adult", 0), ("truck", 1), ("pedestrian_child", 0), ("bus", 1),
    ("construction_worker", 0), ("motorcycle", 1), ("police_officer", 0),
)


def default_vocabulary() -> ClassVocabulary:
    return ClassVocabulary.from_names(*zip(*DEFAULT_CLASSES))


def two_group_vocabulary() -> ClassVocabulary:
    return ClassVocabulary.from_names(*zip(*TWO_GROUP_CLASSES))


def prompt_strings(vocab: ClassVocabulary, template: str = DEFAULT_TEMPLATE) -> list[str]:
    if template.count("{}") != 1 or template.replace("{}", "").count("{") or template.replace("{}", "").count("}"):
        raise ValueError(f"prompt template must contain exactly one '{{}}' placeholder: {template!r}")
    return [template.format(name.replace("_", " ")) for name in vocab.names]


@dataclass(frozen=True)
class SyntheticProvenance:
    seed: int
    intra_group_cos: float

    def describe(self) -> dict:
        return {"kind": "synthetic", "seed": self.seed, "intra_group_cos": self.intra_group_cos}


@dataclass(frozen=True)
class FileProvenance:
    path: str
    checksum: str

    def describe(self) -> dict:
        return {"kind": "file", "path": self.path, "sha256": self.checksum}


@dataclass
class LanguageEmbeddings:
    matrix: np.ndarray
    names: list[str]
    provenance: SyntheticProvenance | FileProvenance
    prompts: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        norms = np.linalg.norm(self.matrix, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9, rtol=0):
            raise ValueError("language embedding rows must have unit norm")
        self.matrix.flags.writeable = False

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class VisualEmbedding:
    vector: np.ndarray
    class_id: int
    mode_id: int


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _renormalize(m: np.ndarray) -> np.ndarray:
    # rows already at unit norm (to float precision) are kept bit-for-bit
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.where(np.abs(norms - 1.0) <= 4e-16, m, m / norms)


def synth_language_embeddings(
    vocab: ClassVocabulary,
    d: int = 64,
    seed: int = 0,
    intra_group_cos: float = 0.3,
    template: str = DEFAULT_TEMPLATE,
) -> LanguageEmbeddings:
    """Random unit class embeddings clustered around one anchor per semantic group.

    Anchors are resampled until pairwise |cos| < 0.2; each class is
    ``normalize(sqrt(rho) * anchor + sqrt(1 - rho) * u)`` with ``u`` a random
    unit vector, so within-group cosine is about ``rho``.
    """
    if d < 8:
        raise ValueError("embedding dimension must be at least 8")
    if not 0.0 <= intra_group_cos < 1.0:
        raise ValueError("intra_group_cos must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    g = vocab.n_groups
    for _ in range(1000):
        anchors = _unit(rng.standard_normal((g, d)))
        gram = anchors @ anchors.T
        if np.all(np.abs(gram[~np.eye(g, dtype=bool)]) < 0.2):
            break
    else:
        raise ValueError(f"could not draw {g} near-orthogonal anchors in d={d}")
    noise = _unit(rng.standard_normal((len(vocab), d)))
    rho = intra_group_cos
    mat = _unit(np.sqrt(rho) * anchors[vocab.groups] + np.sqrt(1.0 - rho) * noise)
    return LanguageEmbeddings(
        mat, vocab.names, SyntheticProvenance(seed, intra_group_cos), prompt_strings(vocab, template)
    )


def save_embeddings(emb: LanguageEmbeddings, path, write_checksum: bool = True) -> Path:
    path = Path(path)
    lines = [f"EMB v1 {emb.n} {emb.d}"]
    for name, row in zip(emb.names, emb.matrix):
        lines.append(" ".join([name] + [repr(float(x)) for x in row]))
    payload = ("\n".join(lines) + "\n").encode()
    path.write_bytes(payload)
    if write_checksum:
        path.with_name(path.name + ".sha256").write_text(hashlib.sha256(payload).hexdigest() + "\n")
    return path


def load_embeddings(path, vocab: ClassVocabulary | None = None) -> LanguageEmbeddings:
    """Read an ``EMB v1 n d`` file; rows are re-normalized to unit length."""
    path = Path(path)
    payload = path.read_bytes()
    checksum = hashlib.sha256(payload).hexdigest()
    sidecar = path.with_name(path.name + ".sha256")
    if sidecar.exists():
        expected = sidecar.read_text().split()[0]
        if expected != checksum:
            raise EmbeddingFormatError(f"{path}: sha256 mismatch (file {checksum}, sidecar {expected})")
    lines = payload.decode().splitlines()
    if not lines:
        raise EmbeddingFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "EMB":
        raise EmbeddingFormatError(f"{path}: bad magic, expected 'EMB v1 n d'")
    if head[1] != "v1":
        raise EmbeddingFormatError(f"{path}: unsupported version {head[1]}")
    n, d = int(head[2]), int(head[3])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise EmbeddingFormatError(f"{path}: header promises {n} rows, found {len(body)}")
    names, rows = [], []
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != d + 1:
            raise EmbeddingFormatError(f"{path}: row {i} has {len(parts) - 1} values, expected {d}")
        names.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    mat = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise EmbeddingFormatError(f"{path}: non-finite values")
    if vocab is not None:
        if len(vocab) != n:
            raise EmbeddingFormatError(f"{path}: file has {n} classes but vocabulary has {len(vocab)}")
        if names != vocab.names:
            raise EmbeddingFormatError(f"{path}: class names do not match the vocabulary order")
    return LanguageEmbeddings(_renormalize(mat), names, FileProvenance(str(path), checksum))


def mode_offset(class_id: int, mode_id: int, d: int, scale: float, seed: int = 0) -> np.ndarray:
    """Fixed appearance offset of one (class, mode); mode 0 is the prototype itself."""
    if mode_id == 0 or scale == 0:
        return np.zeros(d)
    rng = np.random.default_rng([seed, 7919, class_id, mode_id])
    return scale * _unit(rng.standard_normal(d))


def synth_visual_embedding(
    class_id: int,
    mode_id: int,
    noise_scale: float,
    language: LanguageEmbeddings,
    rng: np.random.Generator,
    *,
    mode_scale: float = 0.6,
    mode_seed: int = 0,
    confuse_with: int | None = None,
    confusion_cos: float = 0.0,
) -> VisualEmbedding:
    """Teacher embedding of one instance.

    ``normalize(base + mode_offset + noise_scale * N(0, I/d))`` where ``base`` is
    the class language row, or, with ``confuse_with``, a unit vector leaning
    towards that class's row at cosine ``confusion_cos``.
    """
    if not 0 <= class_id < language.n:
        raise ValueError(f"class id {class_id} outside [0, {language.n})")
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    d = language.d
    base = language.matrix[class_id]
    if confuse_with is not None and confuse_with != class_id:
        other = language.matrix[confuse_with]
        ortho = other - (other @ base) * base
        ortho = ortho / max(np.linalg.norm(ortho), 1e-12)
        c = confusion_cos
        base = np.sqrt(1.0 - c * c) * base + c * ortho
    v = base + mode_offset(class_id, mode_id, d, mode_scale, mode_seed)
    if noise_scale > 0:
        v = v + noise_scale * rng.standard_normal(d) / np.sqrt(d)
    return VisualEmbedding(_unit(v), class_id, mode_id)

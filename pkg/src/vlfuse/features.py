"""Multilevel vision features: on-disk format, synthetic scenes, saliency.

Synthetic scenes stand in for a real vision encoder.  Every patch carries a
concept; two designated *object* patches carry theirs at higher amplitude.
The relation between the two objects is written only into intermediate
encoder layers, as a field that is strongest along the segment joining the
objects and decays with grid distance from it.  The final layer therefore
looks like a classifier output (concepts only) and the answer is decodable
only from the intermediate layer.

Token layout: ``PAD=0, BOS=1, ASK=2, SEP=3``, concept ``c`` is ``4 + c`` and
relation ``r`` is ``4 + n_concepts + r``.  A question is
``[BOS, concept(a), concept(b), ASK]`` and the answer is ``[relation]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import ShapeInconsistencyError, read_container, write_container
from .prng import SplitMix64, derive_seed

FEATURE_KIND = "feature-file"
FEATURE_VERSION = 1

PAD, BOS, ASK, SEP = 0, 1, 2, 3
CONCEPT_BASE = 4


@dataclass
class MultilevelFeatures:
    """Per-source-layer patch features; key 0 is raw input, the max key is final."""

    layers: dict

    def __post_init__(self):
        self.layers = {int(k): np.asarray(v, dtype=np.float32)
                       for k, v in sorted(self.layers.items())}
        if not self.layers:
            raise ValueError("MultilevelFeatures needs at least one layer")
        shapes = {v.shape for v in self.layers.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"all layers must share one N x d1 shape, got {shapes}")

    @property
    def n_patches(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @property
    def d1(self) -> int:
        return next(iter(self.layers.values())).shape[1]

    @property
    def final_index(self) -> int:
        return max(self.layers)

    def __getitem__(self, idx):
        return self.layers[idx]


def write_features(f: MultilevelFeatures, path, seed: int | None = None) -> None:
    meta = {"n_patches": f.n_patches, "d1": f.d1,
            "layer_indices": list(f.layers), "producer_seed": seed}
    write_container(path, FEATURE_KIND, FEATURE_VERSION, meta,
                    [(f"layer_{k}", v) for k, v in f.layers.items()])


def read_features(path) -> MultilevelFeatures:
    manifest, arrays = read_container(path, FEATURE_KIND, FEATURE_VERSION)
    layers = {}
    for k in manifest["layer_indices"]:
        arr = arrays.get(f"layer_{k}")
        if arr is None or arr.shape != (manifest["n_patches"], manifest["d1"]):
            raise ShapeInconsistencyError(f"layer {k} missing or not n_patches x d1")
        layers[int(k)] = arr
    return MultilevelFeatures(layers)


# ---------------------------------------------------------------------------
# synthetic relational scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    n_patches: int = 16
    d1: int = 32
    n_concepts: int = 8
    n_relations: int = 4
    vocab: int = 64
    encoder_depth: int = 24
    intermediate_layer_index: int = 12
    layers: list | None = None  # default: [intermediate, final]
    object_scale: float = 3.0
    background_scale: float = 1.0
    relation_amplitude: float = 3.0
    field_width: float | None = None  # default: half the grid side
    noise: float = 0.02
    world_seed: int = 0

    def __post_init__(self):
        if self.n_concepts < 2:
            raise ValueError("n_concepts must be >= 2")
        if self.n_relations < 1:
            raise ValueError("n_relations must be >= 1")
        if self.n_patches < 2:
            raise ValueError("need at least two patches")
        if not 0 <= self.intermediate_layer_index <= self.encoder_depth:
            raise ValueError("intermediate_layer_index outside [0, encoder_depth]")
        if CONCEPT_BASE + self.n_concepts + self.n_relations > self.vocab:
            raise ValueError("vocab too small for concept and relation tokens")
        for k in self.source_layers:
            if not 0 <= k <= self.encoder_depth:
                raise ValueError(f"layer {k} outside [0, {self.encoder_depth}]")

    @property
    def source_layers(self) -> list:
        if self.layers is None:
            return sorted({self.intermediate_layer_index, self.encoder_depth})
        return sorted(set(int(k) for k in self.layers))

    @property
    def relation_base(self) -> int:
        return CONCEPT_BASE + self.n_concepts

    @property
    def answer_vocab(self) -> list:
        return list(range(self.relation_base, self.relation_base + self.n_relations))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    features: MultilevelFeatures
    question: list
    answer: list
    relation: tuple  # (patch_a, patch_b, relation_id)
    seed: int = 0
    concepts: list = field(default_factory=list)

    @property
    def tokens(self) -> list:
        """Teacher-forced LM input: question plus all but the last answer token."""
        return list(self.question) + list(self.answer[:-1])

    @property
    def answer_positions(self) -> list:
        start = len(self.question) - 1
        return list(range(start, start + len(self.answer)))


def _orthonormal_rows(rng: SplitMix64, n: int, d: int) -> np.ndarray:
    # modified Gram-Schmidt, plain loops so the result does not depend on LAPACK
    raw = rng.normal((n, d))
    out = np.zeros((n, d))
    for i in range(n):
        v = raw[i].copy()
        if i < d:
            for j in range(i):
                v -= float(np.sum(v * out[j])) * out[j]
        out[i] = v / math.sqrt(float(np.sum(v * v)))
    return out


def world_embeddings(cfg: SceneConfig):
    """Fixed concept and relation directions shared by every scene of a world."""
    rng = SplitMix64(derive_seed(cfg.world_seed, 0xC0FFEE))
    basis = _orthonormal_rows(rng, cfg.n_concepts + cfg.n_relations, cfg.d1)
    return basis[:cfg.n_concepts], basis[cfg.n_concepts:]


def layer_weights(cfg: SceneConfig, layer: int):
    """(concept weight, relation weight) for an encoder layer.

    Concept content ramps up to full strength at the intermediate layer and
    stays there.  Relation content is triangular: zero at the raw input and at
    the final layer, peaking at the intermediate layer.
    """
    m, depth = cfg.intermediate_layer_index, cfg.encoder_depth
    cw = 1.0 if m == 0 else min(1.0, layer / m)
    if layer <= m:
        rw = 1.0 if m == 0 else layer / m
    else:
        rw = (depth - layer) / (depth - m)
    return cw, rw


def relation_field(n_patches: int, a: int, b: int, width: float | None = None) -> np.ndarray:
    side = math.ceil(math.sqrt(n_patches))
    width = side / 2 if width is None else width
    pos = np.array([divmod(p, side) for p in range(n_patches)], dtype=np.float64)
    pa, pb = pos[a], pos[b]
    seg = pb - pa
    t = np.clip(((pos - pa) @ seg) / max(float(seg @ seg), 1e-12), 0.0, 1.0)
    d2 = np.sum((pos - (pa + t[:, None] * seg)) ** 2, axis=1)
    return np.exp(-d2 / (2 * width * width))


def generate_synthetic_scene(seed: int, cfg: SceneConfig | None = None,
                             world=None) -> SyntheticSample:
    """Draw a random layout from ``seed`` and render it.

    Draw order: patch concepts, object patch a, object patch b, relation id,
    then per-layer noise in ascending layer order.
    """
    cfg = cfg or SceneConfig()
    rng = SplitMix64(seed)
    n = cfg.n_patches
    concepts = rng.integers(cfg.n_concepts, n)
    a = int(rng.integers(n, 1)[0])
    b = int(rng.integers(n - 1, 1)[0])
    b = b + 1 if b >= a else b
    rel = int(rng.integers(cfg.n_relations, 1)[0])
    return render_scene(cfg, concepts, a, b, rel, rng, world, seed)


def render_scene(cfg: SceneConfig, concepts, a: int, b: int, rel: int,
                 rng: SplitMix64, world=None, seed: int = 0) -> SyntheticSample:
    """Build features, question and answer for an explicit scene layout."""
    concept_emb, relation_emb = world if world is not None else world_embeddings(cfg)
    n = cfg.n_patches
    concepts = np.asarray(concepts, dtype=np.int64)
    if a == b or not (0 <= a < n and 0 <= b < n):
        raise ValueError(f"object patches must be distinct indices below {n}")
    amp = np.full(n, cfg.background_scale)
    amp[[a, b]] = cfg.object_scale
    concept_part = amp[:, None] * concept_emb[concepts]
    rel_part = (cfg.relation_amplitude * relation_field(n, a, b, cfg.field_width)[:, None]
                * relation_emb[rel][None, :])

    layers = {}
    for k in cfg.source_layers:
        cw, rw = layer_weights(cfg, k)
        noise = cfg.noise * rng.normal((n, cfg.d1))
        layers[k] = (cw * concept_part + rw * rel_part + noise).astype(np.float32)

    question = [BOS, CONCEPT_BASE + int(concepts[a]), CONCEPT_BASE + int(concepts[b]), ASK]
    answer = [cfg.relation_base + rel]
    return SyntheticSample(MultilevelFeatures(layers), question, answer, (a, b, rel),
                           seed=seed, concepts=[int(c) for c in concepts])


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

DATASET_VERSION = 1


def sample_seed(base_seed: int, split: str, index: int) -> int:
    return derive_seed(base_seed, {"train": 1, "eval": 2}[split], index)


def write_sample(sample: SyntheticSample, directory, sample_id: str) -> None:
    directory = Path(directory)
    write_features(sample.features, directory / f"{sample_id}.feat", seed=sample.seed)
    side = {"question": sample.question, "answer": sample.answer,
            "relation_truth": list(sample.relation), "concepts": sample.concepts,
            "seed": sample.seed}
    (directory / f"{sample_id}.json").write_text(json.dumps(side, sort_keys=True) + "\n")


def read_sample(directory, sample_id: str) -> SyntheticSample:
    directory = Path(directory)
    side = json.loads((directory / f"{sample_id}.json").read_text())
    feats = read_features(directory / f"{sample_id}.feat")
    return SyntheticSample(feats, side["question"], side["answer"],
                           tuple(side["relation_truth"]), seed=side["seed"],
                           concepts=side.get("concepts", []))


def write_dataset(out_dir, cfg: SceneConfig, n_train: int, n_eval: int, seed: int) -> dict:
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    world = world_embeddings(cfg)
    index = {"version": DATASET_VERSION, "seed": seed, "generator": cfg.to_dict(),
             "train": [], "eval": []}
    for split, count in (("train", n_train), ("eval", n_eval)):
        for i in range(count):
            sid = f"{split}-{i:05d}"
            s = generate_synthetic_scene(sample_seed(seed, split, i), cfg, world)
            write_sample(s, out_dir / "samples", sid)
            index[split].append(sid)
    (out_dir / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index


def load_dataset(path):
    """Return ``(index, train_samples, eval_samples)`` from a dataset directory."""
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    if index.get("version") != DATASET_VERSION:
        raise ValueError(f"dataset version {index.get('version')!r} unsupported")
    train = [read_sample(path / "samples", sid) for sid in index["train"]]
    ev = [read_sample(path / "samples", sid) for sid in index["eval"]]
    return index, train, ev


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

def extract_patch_saliency(projected) -> np.ndarray:
    """Per-patch maximum of the projected feature vector."""
    data = getattr(projected, "data", projected)
    return np.asarray(data).max(axis=1)


def saliency_entropy(saliency) -> float:
    """Shannon entropy (nats) of the clipped, normalised saliency over patches."""
    s = np.clip(np.asarray(saliency, dtype=np.float64), 0.0, None)
    total = s.sum()
    if total <= 0:
        return math.log(len(s))
    p = s[s > 0] / total
    return float(-(p * np.log(p)).sum())

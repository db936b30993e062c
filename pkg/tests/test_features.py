import json
import math

import numpy as np
import pytest

from vlfuse.container import TruncatedPayloadError
from vlfuse.features import (ASK, BOS, CONCEPT_BASE, MultilevelFeatures, SceneConfig,
                             extract_patch_saliency, generate_synthetic_scene, load_dataset,
                             read_features, relation_field, render_scene, saliency_entropy,
                             world_embeddings, write_dataset, write_features)
from vlfuse.prng import SplitMix64


def test_zero_features_roundtrip(tmp_path):
    f = MultilevelFeatures({12: np.zeros((4, 8)), 24: np.zeros((4, 8))})
    write_features(f, tmp_path / "z.feat")
    back = read_features(tmp_path / "z.feat")
    assert list(back.layers) == [12, 24]
    assert all(v.shape == (4, 8) and not v.any() for v in back.layers.values())


def test_random_features_bitwise(tmp_path, rng):
    f = MultilevelFeatures({0: rng.standard_normal((5, 3)), 7: rng.standard_normal((5, 3))})
    write_features(f, tmp_path / "r.feat", seed=9)
    back = read_features(tmp_path / "r.feat")
    for k in f.layers:
        assert back[k].tobytes() == f[k].tobytes()


def test_truncated_feature_file(tmp_path, rng):
    f = MultilevelFeatures({1: rng.standard_normal((4, 8))})
    p = tmp_path / "t.feat"
    write_features(f, p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_features(p)


def test_features_reject_mixed_shapes():
    with pytest.raises(ValueError):
        MultilevelFeatures({1: np.zeros((4, 8)), 2: np.zeros((4, 7))})


def test_generator_deterministic():
    a, b = generate_synthetic_scene(42), generate_synthetic_scene(42)
    for k in a.features.layers:
        assert a.features[k].tobytes() == b.features[k].tobytes()
    assert (a.question, a.answer, a.relation) == (b.question, b.answer, b.relation)
    c = generate_synthetic_scene(43)
    assert c.features[12].tobytes() != a.features[12].tobytes()


def test_generator_token_contract():
    cfg = SceneConfig()
    for seed in range(200):
        s = generate_synthetic_scene(seed, cfg)
        a, b, rel = s.relation
        assert a != b
        assert s.question == [BOS, CONCEPT_BASE + s.concepts[a], CONCEPT_BASE + s.concepts[b], ASK]
        assert s.answer == [cfg.relation_base + rel]
        assert max(s.tokens + s.answer) < cfg.vocab
        assert set(s.features.layers) == {12, 24}
        assert s.features[12].shape == (16, 32)


def test_zero_relation_amplitude_leaves_only_noise():
    cfg = SceneConfig(relation_amplitude=0.0)
    s = generate_synthetic_scene(5, cfg)
    diff = s.features[12] - s.features[24]
    # both layers carry full concept content; the gap is two independent noise draws
    assert abs(diff.std() - cfg.noise * math.sqrt(2)) < 0.03
    with_rel = generate_synthetic_scene(5, SceneConfig())
    assert (with_rel.features[12] - with_rel.features[24]).std() > 3 * diff.std()


def test_relation_field_shape():
    f = relation_field(16, 0, 3)
    assert f[0] == f[1] == f[3] == 1.0
    assert f[12] < f[4] < f[0]


def test_render_scene_validates_layout():
    cfg = SceneConfig()
    with pytest.raises(ValueError):
        render_scene(cfg, [0] * 16, 3, 3, 0, SplitMix64(0))


def _probe_accuracy(layer, n=1000):
    cfg = SceneConfig()
    world = world_embeddings(cfg)

    def split(offset):
        ss = [generate_synthetic_scene(offset + i, cfg, world) for i in range(n)]
        x = np.array([s.features[layer].mean(axis=0) for s in ss])
        return np.c_[x, np.ones(n)], np.array([s.relation[2] for s in ss])

    x, y = split(0)
    xt, yt = split(10**6)
    w = np.linalg.lstsq(x, np.eye(cfg.n_relations)[y], rcond=None)[0]
    return float(np.mean(np.argmax(xt @ w, axis=1) == yt))


def test_linear_probe_layer_asymmetry():
    # a least-squares probe reads the relation from the intermediate layer only
    assert _probe_accuracy(12) >= 0.95
    assert _probe_accuracy(24) <= 0.25 + 0.10


def test_saliency_examples():
    assert not extract_patch_saliency(np.zeros((4, 3))).any()
    x = np.zeros((4, 3))
    x[2] = [1, 5, -2]
    np.testing.assert_array_equal(extract_patch_saliency(x), [0, 0, 5, 0])
    r = np.random.default_rng(0).standard_normal((6, 5))
    perm = np.random.default_rng(1).permutation(5)
    np.testing.assert_array_equal(extract_patch_saliency(r), extract_patch_saliency(r[:, perm]))


def test_saliency_entropy_bounds():
    assert saliency_entropy(np.ones(8)) == pytest.approx(math.log(8))
    assert saliency_entropy(np.zeros(8)) == pytest.approx(math.log(8))
    assert saliency_entropy([0, 0, 3, 0]) == 0.0
    assert saliency_entropy([1, 2, 3]) < math.log(3)


def test_dataset_roundtrip(tmp_path):
    cfg = SceneConfig()
    index = write_dataset(tmp_path / "d", cfg, 3, 2, seed=7)
    idx, train, ev = load_dataset(tmp_path / "d")
    assert idx == index and len(train) == 3 and len(ev) == 2
    assert len({s.seed for s in train + ev}) == 5
    fresh = generate_synthetic_scene(train[1].seed, cfg)
    assert fresh.features[12].tobytes() == train[1].features[12].tobytes()
    assert fresh.answer == train[1].answer


def test_dataset_version_checked(tmp_path):
    write_dataset(tmp_path / "d", SceneConfig(), 1, 1, seed=0)
    p = tmp_path / "d" / "index.json"
    idx = json.loads(p.read_text())
    idx["version"] = 99
    p.write_text(json.dumps(idx))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "d")

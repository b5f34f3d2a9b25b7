import numpy as np
import pytest
import torch

from dualmae import oracles
from dualmae.config import load_config
from dualmae.errors import ConfigError, InputError
from dualmae.evalkit import (
    attention_heatmap,
    embed_clip,
    embed_clips,
    export_figure,
    figure_panel,
    linear_probe,
    rank_gallery,
    retrieve,
    split_indices,
)
from dualmae.masking import sample_mask
from dualmae.trainer import Trainer, build_model, synthetic_data

from .helpers import random_orthogonal

SMALL = {"data.frames": 4, "data.height": 16, "data.width": 16, "data.per_class": 8}


@pytest.fixture(scope="module")
def setup():
    cfg = load_config(overrides=SMALL)
    return cfg, build_model(cfg), synthetic_data(cfg)[0]


@pytest.fixture(scope="module")
def pretrained():
    cfg = load_config(overrides={**SMALL, "train.steps": 30, "train.batch_size": 4})
    t = Trainer(cfg)
    t.run()
    return t.model, synthetic_data(cfg, split=1)[0]


class TestEmbedding:
    def test_deterministic_and_copy_invariant(self, setup):
        _, model, clips = setup
        a = embed_clip(model, clips[0])
        b = embed_clip(model, clips[0].copy())
        assert a.shape == (32,)
        assert np.array_equal(a, b)
        assert float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))) == pytest.approx(1.0)

    def test_batching_does_not_matter(self, setup):
        _, model, clips = setup
        np.testing.assert_allclose(embed_clips(model, clips, batch_size=3), embed_clips(model, clips, batch_size=64), atol=1e-6)


def gaussian_blobs(seed, n=200, d=8, classes=2, spread=0.1):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, d)) * 5
    y = np.arange(n) % classes
    return centers[y] + spread * rng.normal(size=(n, d)), y


class TestProbe:
    def test_separable(self):
        x, y = gaussian_blobs(0)
        r = linear_probe(x[:100], y[:100], x[100:], y[100:])
        assert r.top1 == 1.0

    def test_chance_level(self):
        accs = []
        for s in range(10):
            rng = np.random.default_rng(s)
            x = rng.normal(size=(400, 16))
            y = rng.permutation(np.arange(400) % 4)
            accs.append(linear_probe(x[:200], y[:200], x[200:], y[200:], seed=s).top1)
        assert abs(np.mean(accs) - 0.25) <= 0.05

    def test_orthogonal_transform(self):
        x, y = gaussian_blobs(1, classes=3)
        q = random_orthogonal(8, np.random.default_rng(3))
        r = linear_probe((x @ q)[:100], y[:100], (x @ q)[100:], y[100:])
        assert r.top1 == 1.0

    def test_per_class_weighted_mean(self):
        x, y = gaussian_blobs(2, classes=4, spread=4.0)
        r = linear_probe(x[:120], y[:120], x[120:], y[120:])
        counts = np.bincount(y[120:])
        weighted = sum(r.per_class[c] * counts[c] for c in r.per_class) / counts.sum()
        assert weighted == pytest.approx(r.top1)
        assert 0 <= r.top1 <= 1
        assert '"top1"' in r.to_json()

    def test_single_class(self):
        with pytest.raises(ConfigError):
            linear_probe(np.ones((4, 2)), np.zeros(4, int), np.ones((2, 2)), np.zeros(2, int))

    def test_non_finite(self):
        x = np.ones((4, 2))
        x[0, 0] = np.nan
        with pytest.raises(InputError):
            linear_probe(x, np.array([0, 1, 0, 1]), x, np.array([0, 1, 0, 1]))

    def test_stratified_split(self):
        y = np.repeat(np.arange(4), 10)
        tr, te = split_indices(y, 0.5, 0)
        assert np.bincount(y[tr]).tolist() == [5] * 4
        assert np.intersect1d(tr, te).size == 0 and len(tr) + len(te) == 40


class TestRetrieval:
    def test_duplicates(self):
        q = np.random.default_rng(0).normal(size=(10, 6))
        r = retrieve(q, np.arange(10), q.copy(), np.arange(10), list(range(10)), list(range(10, 20)))
        assert r.r1 == 1.0 and r.r5 == 1.0

    def test_orthogonal_one_hot(self):
        e = np.eye(6)
        r = retrieve(e[:1], [0], e[1:], [1, 2, 3, 4, 5])
        assert r.r1 == 0.0

    def test_query_excluded_by_id(self):
        e = np.array([[1.0, 0.0], [0.0, 1.0], [0.1, 1.0]])
        r = retrieve(e, [0, 1, 1], e, [0, 1, 1], [0, 1, 2], [0, 1, 2])
        # query 0 has no other class-0 item once it is excluded
        assert r.r1 == pytest.approx(2 / 3)

    def test_ranking_matches_oracle(self, setup):
        _, model, clips = setup
        emb = embed_clips(model, clips)
        assert rank_gallery(emb, emb).tolist() == oracles.ranking(emb.tolist(), emb.tolist())

    def test_r1_le_r5(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q, g = rng.normal(size=(8, 4)), rng.normal(size=(12, 4))
            r = retrieve(q, rng.integers(0, 3, 8), g, rng.integers(0, 3, 12))
            assert r.r1 <= r.r5

    def test_empty_gallery(self):
        with pytest.raises(InputError):
            retrieve(np.ones((1, 2)), [0], np.zeros((0, 2)), [])


class TestFigures:
    def test_layout(self, setup):
        _, model, clips = setup
        panel = figure_panel(model, clips[0], 0.5)
        assert panel.shape == (5 * 16, 4 * 16, 3) and panel.dtype == np.uint8

    def test_ratio_zero_masked_row_is_original(self, setup):
        _, model, clips = setup
        panel = figure_panel(model, clips[0], 0.0)
        assert np.array_equal(panel[:16], panel[16:32])

    def test_heatmap_range_on_pretrained_model(self, pretrained):
        model, clips = pretrained
        grid = model.cfg.patch.grid(*clips.shape[2:])
        mask = sample_mask(grid, 0.5, "random", 0)
        heat = attention_heatmap(model, clips[0], mask.visible_indices)
        for frame in heat:
            assert frame.min() == 0 and frame.max() == 255

    def test_byte_identical_files(self, setup, tmp_path):
        _, model, clips = setup
        for fmt in ("png", "ppm"):
            a = export_figure(model, clips[1], 0.5, tmp_path / f"a.{fmt}", seed=2).read_bytes()
            b = export_figure(model, clips[1], 0.5, tmp_path / f"b.{fmt}", seed=2).read_bytes()
            assert a == b
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n64 80\n255\n")

    def test_unwritable_path(self, setup, tmp_path):
        _, model, clips = setup
        target = tmp_path / "missing" / "fig.png"
        with pytest.raises(OSError, match="missing"):
            export_figure(model, clips[0], 0.5, target)

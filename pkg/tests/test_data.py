import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meme.data import (
    Mask, ObservationScheme, PairedDataset, PairedSample, SchemeMode, apply_observation_scheme, collate,
    mask_checksum, mask_counts, pair_by_class, read_dataset, read_idx, synth_two_view, write_dataset,
)
from meme.exceptions import ConfigError, DataError
from meme.objective import S_ONLY, T_ONLY


def corpus(n, n_classes, dim, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)), np.arange(n) % n_classes


def canonical_correlations(a, b):
    """Canonical correlations from orthonormal bases of the centred views."""
    qa, _ = np.linalg.qr(a - a.mean(0))
    qb, _ = np.linalg.qr(b - b.mean(0))
    return np.linalg.svd(qa.T @ qb, compute_uv=False)


class TestPairedSample:
    def test_requires_a_payload(self):
        with pytest.raises(DataError):
            PairedSample(None, None, Mask.S_ONLY)

    @pytest.mark.parametrize("s,t,mask", [(1, None, "both"), (None, 1, "s-only"), (1, 1, "t-only")])
    def test_mask_matches_presence(self, s, t, mask):
        with pytest.raises(DataError):
            PairedSample(None if s is None else np.zeros(2), None if t is None else np.zeros(2), mask)


class TestPairing:
    def test_single_items(self):
        pairs = pair_by_class((np.zeros((1, 2)), [3]), (np.ones((1, 4)), [3]))
        assert len(pairs) == 1 and pairs[0].label == 3

    @pytest.mark.parametrize("multiplicity", [1, 3])
    def test_count_and_labels(self, multiplicity):
        a, b = corpus(40, 4, 2, 0), corpus(25, 4, 3, 1)
        pairs = pair_by_class(a, b, multiplicity, seed=0)
        assert len(pairs) == multiplicity * 40
        lookup_b = {tuple(x): y for x, y in zip(*b)}
        for i, p in enumerate(pairs):
            assert p.label == a[1][i // multiplicity] == lookup_b[tuple(p.t)]
            assert np.array_equal(p.s, a[0][i // multiplicity])

    def test_deterministic(self):
        a, b = corpus(30, 3, 2, 0), corpus(30, 3, 2, 1)
        x, y = pair_by_class(a, b, 2, seed=5), pair_by_class(a, b, 2, seed=5)
        assert all(np.array_equal(p.t, q.t) for p, q in zip(x, y))

    def test_one_sided_class_named(self):
        with pytest.raises(DataError, match=r"a-only=\[7\]"):
            pair_by_class((np.zeros((2, 1)), [0, 7]), (np.zeros((2, 1)), [0, 0]))

    def test_bad_multiplicity(self):
        with pytest.raises(ConfigError):
            pair_by_class(corpus(4, 2, 1, 0), corpus(4, 2, 1, 1), multiplicity=0)


class TestObservationScheme:
    @pytest.fixture
    def pairs(self):
        return synth_two_view(100, seed=3)

    def test_full_fraction_is_identity(self, pairs):
        out = apply_observation_scheme(pairs, ObservationScheme(1.0, "keep_s", 4))
        assert all(p is q for p, q in zip(pairs, out))

    @pytest.mark.parametrize("mode,kind", [("keep_s", "s-only"), ("keep_t", "t-only")])
    def test_quarter(self, pairs, mode, kind):
        out = apply_observation_scheme(pairs, ObservationScheme(0.25, mode, 0))
        counts = mask_counts([p.mask.code for p in out])
        assert counts["both"] == 25 and counts[kind] == 75

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 60), st.floats(0.01, 1.0), st.sampled_from(list(SchemeMode)), st.integers(0, 1000))
    def test_counts_and_invariants(self, n, f, mode, seed):
        pairs = synth_two_view(n, seed=seed, s_dim=2, t_dim=2)
        scheme = ObservationScheme(f, mode, seed)
        out = apply_observation_scheme(pairs, scheme)
        counts = mask_counts([p.mask.code for p in out])
        assert counts["both"] == math.ceil(f * n)
        if mode == SchemeMode.SPLIT:
            assert abs(counts["s-only"] - counts["t-only"]) <= 1
        for p, q in zip(pairs, out):
            if q.s is not None:
                assert q.s.tobytes() == p.s.tobytes()
            if q.t is not None:
                assert q.t.tobytes() == p.t.tobytes()
            assert q.label == p.label
        again = apply_observation_scheme(out, scheme)
        assert [p.mask for p in again] == [p.mask for p in out]
        assert mask_checksum(again) == mask_checksum(out)

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.5, float("nan")])
    def test_fraction_domain(self, f):
        with pytest.raises(ConfigError):
            ObservationScheme(f)

    def test_seed_changes_selection(self, pairs):
        a = apply_observation_scheme(pairs, ObservationScheme(0.5, "split", 0))
        b = apply_observation_scheme(pairs, ObservationScheme(0.5, "split", 1))
        assert mask_checksum(a) != mask_checksum(b)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ObservationScheme(0.5, "keep_both")


class TestSynthetic:
    def test_deterministic(self):
        a, b = synth_two_view(50, seed=9), synth_two_view(50, seed=9)
        assert all(np.array_equal(p.s, q.s) and np.array_equal(p.t, q.t) and p.label == q.label
                   for p, q in zip(a, b))
        c = synth_two_view(50, seed=10)
        assert not np.array_equal(a[0].s, c[0].s)

    def test_noiseless_views_are_linear_images(self):
        ds = PairedDataset.from_samples(synth_two_view(600, latent_dim=2, noise_scale=0.0, seed=1))
        for c in np.unique(ds.labels):
            s, t = ds.s[ds.labels == c], ds.t[ds.labels == c]
            assert np.linalg.matrix_rank(s, tol=1e-9) == 2
            coef, *_ = np.linalg.lstsq(s, t, rcond=None)
            assert np.abs(s @ coef - t).max() < 1e-10

    def test_per_class_correlation_approaches_one(self):
        top = []
        for noise in (0.5, 0.1, 0.01):
            ds = PairedDataset.from_samples(synth_two_view(2000, noise_scale=noise, seed=2))
            per_class = [canonical_correlations(ds.s[ds.labels == c], ds.t[ds.labels == c])[0]
                         for c in np.unique(ds.labels)]
            top.append(min(per_class))
        assert top[0] < top[1] < top[2]
        assert top[2] > 0.9999

    def test_private_factor_lowers_shared_correlation(self):
        plain = PairedDataset.from_samples(synth_two_view(2000, seed=4))
        private = PairedDataset.from_samples(synth_two_view(2000, seed=4, private_dim=4, private_scale=2.0))
        k = plain.labels == 0
        assert canonical_correlations(private.s[k], private.t[k])[0] < canonical_correlations(plain.s[k], plain.t[k])[0]

    @pytest.mark.parametrize("kw", [{"n": 0}, {"n": 5, "noise_scale": -1.0}])
    def test_argument_validation(self, kw):
        with pytest.raises(ConfigError):
            synth_two_view(**kw)


class TestColumnar:
    def test_round_trip_through_samples(self):
        pairs = apply_observation_scheme(synth_two_view(20, seed=0), ObservationScheme(0.5, "split", 0))
        ds = PairedDataset.from_samples(pairs)
        back = ds.to_samples()
        assert [p.mask for p in back] == [p.mask for p in pairs]
        assert all(p.s is None or np.array_equal(p.s, q.s) for p, q in zip(back, pairs))
        assert mask_checksum(ds.mask) == mask_checksum(pairs)

    def test_collate(self):
        pairs = [PairedSample(np.ones(2), None, "s-only", 1), PairedSample(None, np.ones(3), "t-only")]
        batch = collate(pairs, dtype=torch.float64)
        assert batch.s.shape == (2, 2) and batch.t.shape == (2, 3)
        assert batch.mask.tolist() == [S_ONLY, T_ONLY] and batch.labels.tolist() == [1, -1]
        assert batch.t[0].abs().sum() == 0

    def test_subset_and_counts(self):
        ds = PairedDataset.from_samples(synth_two_view(10, seed=0))
        sub = ds.subset(np.array([0, 3]))
        assert len(sub) == 2 and mask_counts(sub.mask) == {"both": 2, "s-only": 0, "t-only": 0}

    def test_empty(self):
        with pytest.raises(DataError):
            PairedDataset.from_samples([])


class TestManifest:
    def test_round_trip(self, tmp_path):
        pairs = apply_observation_scheme(synth_two_view(30, seed=0), ObservationScheme(0.3, "keep_t", 2))
        ds = PairedDataset.from_samples(pairs)
        written = write_dataset(str(tmp_path / "d"), ds, {"scheme": {"fraction": 0.3}})
        train, test, manifest = read_dataset(tmp_path / "d.json")
        assert test is None
        assert manifest == written
        assert manifest["counts"] == {"both": 9, "s-only": 0, "t-only": 21}
        assert np.array_equal(train.s, ds.s) and np.array_equal(train.mask, ds.mask)

    def test_checksum_mismatch(self, tmp_path):
        ds = PairedDataset.from_samples(synth_two_view(5, seed=0))
        write_dataset(str(tmp_path / "d"), ds, {})
        ds.mask[0] = S_ONLY
        np.savez(tmp_path / "d.npz", s=ds.s, t=ds.t, mask=ds.mask, labels=ds.labels)
        with pytest.raises(DataError):
            read_dataset(tmp_path / "d.json")


class TestIdx:
    def test_reads_unsigned_bytes(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        path = tmp_path / "x.idx"
        path.write_bytes(b"\x00\x00\x08\x03" + np.array([2, 3, 4], dtype=">u4").tobytes() + arr.tobytes())
        assert np.array_equal(read_idx(path), arr)

    def test_rejects_other_types(self, tmp_path):
        path = tmp_path / "x.idx"
        path.write_bytes(b"\x00\x00\x0d\x01" + np.array([1], dtype=">u4").tobytes() + b"\x00" * 4)
        with pytest.raises(DataError):
            read_idx(path)

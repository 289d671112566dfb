import numpy as np
import pytest

from cpmf import detect
from cpmf.errors import BankFormatError
from cpmf.features3d import FeatureMatrix


def fm(data):
    return FeatureMatrix(np.asarray(data, dtype=float), modality="cpmf")


def brute_min_sq(bank_rows, test_rows):
    d = ((test_rows[:, None, :] - bank_rows[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1)


def greedy_oracle(rows, n_keep, start):
    selected = [start]
    while len(selected) < n_keep:
        best_i, best_d = None, -1.0
        for i in range(len(rows)):
            d = min(((rows[i] - rows[s]) ** 2).sum() for s in selected)
            if d > best_d:
                best_i, best_d = i, d
        selected.append(best_i)
    return selected


class TestFit:
    def test_union_cardinality(self, rng):
        bank = detect.fit([fm(rng.normal(size=(100, 4))), fm(rng.normal(size=(150, 4)))])
        assert bank.rows == 250
        assert bank.coreset_ratio == 1.0

    def test_full_ratio_preserves_rows_in_order(self, rng):
        a = rng.normal(size=(5, 3))
        b = rng.normal(size=(4, 3))
        bank = detect.fit([fm(a), fm(b)])
        np.testing.assert_array_equal(bank.features, np.vstack([a, b]))

    def test_provenance_tracks_cloud_and_point(self, rng):
        bank = detect.fit([fm(rng.normal(size=(3, 2))), fm(rng.normal(size=(2, 2)))])
        assert bank.provenance.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1]]

    def test_coreset_four_row_example(self):
        rows = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [1.0, 1.0]])
        bank = detect.fit([fm(rows)], coreset_ratio=0.5, seed=7)
        assert bank.rows == 2
        start = int(np.random.default_rng(7).integers(4))
        expected = greedy_oracle(rows, 2, start)
        np.testing.assert_array_equal(bank.features, rows[expected])

    def test_coreset_matches_oracle_for_every_seed(self, rng):
        rows = rng.normal(size=(12, 3))
        for seed in range(8):
            keep = detect.greedy_coreset(rows, 5, seed=seed)
            start = int(np.random.default_rng(seed).integers(12))
            assert keep.tolist() == greedy_oracle(rows, 5, start)

    def test_coreset_deterministic(self, rng):
        rows = rng.normal(size=(30, 4))
        a = detect.greedy_coreset(rows, 10, seed=3)
        b = detect.greedy_coreset(rows, 10, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_dim_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            detect.fit([fm(rng.normal(size=(3, 2))), fm(rng.normal(size=(3, 3)))])

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            detect.fit([])


class TestScore:
    def test_bank_row_scores_zero(self, rng):
        rows = rng.normal(size=(20, 5))
        bank = detect.fit([fm(rows)])
        res = detect.score(bank, fm(rows))
        assert res.point_scores.max() <= 1e-12

    def test_hand_example(self):
        bank = detect.fit([fm([[0.0, 0.0], [1.0, 1.0]])])
        res = detect.score(bank, fm([[0.5, 0.5]]))
        assert res.point_scores[0] == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("dim", [33, 481])
    def test_matches_brute_force(self, rng, dim):
        for _ in range(10):
            m = int(rng.integers(1, 101))
            n = int(rng.integers(1, 101))
            bank_rows = rng.normal(size=(m, dim))
            test_rows = rng.normal(size=(n, dim))
            bank = detect.fit([fm(bank_rows)])
            res = detect.score(bank, fm(test_rows))
            brute = brute_min_sq(bank_rows, test_rows)
            np.testing.assert_allclose(res.point_scores, brute, rtol=1e-12, atol=1e-300)

    def test_image_score_is_max(self, rng):
        bank = detect.fit([fm(rng.normal(size=(10, 3)))])
        res = detect.score(bank, fm(rng.normal(size=(7, 3))))
        assert res.image_score == res.point_scores.max()

    def test_top_q_mode(self, rng):
        bank = detect.fit([fm(rng.normal(size=(10, 3)))])
        res = detect.score(bank, fm(rng.normal(size=(200, 3))), image_score_mode="topq", top_q=0.01)
        top = np.sort(res.point_scores)[-2:]
        assert res.image_score == pytest.approx(top.mean())

    def test_monotone_in_bank_size(self, rng):
        a = rng.normal(size=(30, 4))
        b = rng.normal(size=(20, 4))
        test = fm(rng.normal(size=(25, 4)))
        small = detect.score(detect.fit([fm(a)]), test).point_scores
        big = detect.score(detect.fit([fm(a), fm(b)]), test).point_scores
        assert (big <= small + 1e-15).all()

    def test_dim_mismatch_rejected(self, rng):
        bank = detect.fit([fm(rng.normal(size=(5, 4)))])
        with pytest.raises(ValueError):
            detect.score(bank, fm(rng.normal(size=(5, 3))))


class TestPersistence:
    def test_round_trip(self, tmp_path, rng):
        bank = detect.fit([fm(rng.normal(size=(11, 6)))], coreset_ratio=0.7, seed=4)
        path = tmp_path / "m.bank"
        detect.save_bank(path, bank)
        loaded = detect.load_bank(path)
        assert (loaded.rows, loaded.dim) == (bank.rows, bank.dim)
        assert loaded.coreset_ratio == bank.coreset_ratio
        np.testing.assert_array_equal(loaded.provenance, bank.provenance)
        np.testing.assert_array_equal(
            loaded.features, bank.features.astype(np.float32).astype(np.float64)
        )

    def test_bad_magic_rejected(self, tmp_path, rng):
        bank = detect.fit([fm(rng.normal(size=(3, 2)))])
        path = tmp_path / "m.bank"
        detect.save_bank(path, bank)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(BankFormatError, match="magic"):
            detect.load_bank(path)

    def test_truncated_payload_rejected(self, tmp_path, rng):
        bank = detect.fit([fm(rng.normal(size=(10, 4)))])
        path = tmp_path / "m.bank"
        detect.save_bank(path, bank)
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(BankFormatError, match="truncated"):
            detect.load_bank(path)

    def test_wrong_version_rejected(self, tmp_path, rng):
        bank = detect.fit([fm(rng.normal(size=(3, 2)))])
        path = tmp_path / "m.bank"
        detect.save_bank(path, bank)
        blob = bytearray(path.read_bytes())
        blob[8] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(BankFormatError, match="version"):
            detect.load_bank(path)

    def test_expected_dim_check(self, tmp_path, rng):
        bank = detect.fit([fm(rng.normal(size=(3, 5)))])
        path = tmp_path / "m.bank"
        detect.save_bank(path, bank)
        with pytest.raises(BankFormatError, match="dimension"):
            detect.load_bank(path, expected_dim=6)

    def test_scores_after_round_trip_stay_tiny_for_training_rows(self, tmp_path, rng):
        rows = rng.normal(size=(50, 481))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        bank = detect.fit([fm(rows)])
        path = tmp_path / "m.bank"
        detect.save_bank(path, bank)
        loaded = detect.load_bank(path)
        res = detect.score(loaded, fm(rows))
        assert res.point_scores.max() <= 1e-12

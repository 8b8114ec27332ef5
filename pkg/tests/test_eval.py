import numpy as np
import pytest
import torch

from maskcl.data import save_dataset
from maskcl.encoder import EncoderConfig, build_model
from maskcl.evaluation import (
    EvalMeta,
    RetrievalTask,
    build_retrieval_task,
    compute_map_cmc,
    oracle_map_cmc,
    pairwise_distance,
    valid_gallery_mask,
)


def _unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _meta(rows):
    rows = np.asarray(rows)
    return EvalMeta(person_ids=rows[:, 0], clothes_ids=rows[:, 1], camera_ids=rows[:, 2])


def _random_task(rng, protocol, nq=8, ng=30, n_pids=4, n_clothes=3, n_cams=3, dim=6):
    def meta(n):
        pids = rng.integers(0, n_pids, n)
        clothes = pids * n_clothes + rng.integers(0, n_clothes, n)
        cams = rng.integers(0, n_cams, n)
        return EvalMeta(pids, clothes, cams)

    nq = int(rng.integers(2, nq + 1))
    ng = int(rng.integers(8, ng + 1))
    return RetrievalTask(
        query_feats=_unit(rng.standard_normal((nq, dim))),
        gallery_feats=_unit(rng.standard_normal((ng, dim))),
        query_meta=meta(nq),
        gallery_meta=meta(ng),
        protocol=protocol,
    )


class TestPairwiseDistance:
    def test_identical_vectors(self):
        v = _unit([[0.3, 0.4, 0.5]])
        assert pairwise_distance(v, v)[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_unit(self):
        d = pairwise_distance(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        assert d[0, 0] == pytest.approx(1.4142, abs=1e-4)

    def test_matches_elementwise_oracle(self, rng):
        q = rng.standard_normal((3, 2))
        g = rng.standard_normal((4, 2))
        d = pairwise_distance(q, g)
        for i in range(3):
            for j in range(4):
                assert d[i, j] == pytest.approx(np.sqrt(((q[i] - g[j]) ** 2).sum()), rel=1e-10)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_distance(np.ones((2, 3)), np.ones((2, 4)))


class TestValidGalleryMask:
    G = _meta([[1, 3, 0], [1, 3, 1], [1, 5, 1], [2, 7, 0]])

    def test_same_camera_same_id_junk_both_protocols(self):
        for protocol in ("general", "clothes_change"):
            valid, _ = valid_gallery_mask((1, 3, 0), self.G, protocol)
            assert not valid[0]

    def test_same_clothes_cross_camera(self):
        valid, positive = valid_gallery_mask((1, 3, 0), self.G, "general")
        assert valid[1] and positive[1]
        valid, positive = valid_gallery_mask((1, 3, 0), self.G, "clothes_change")
        assert not valid[1]

    def test_different_clothes_positive_both(self):
        for protocol in ("general", "clothes_change"):
            valid, positive = valid_gallery_mask((1, 3, 0), self.G, protocol)
            assert valid[2] and positive[2]

    def test_other_person_kept_never_positive(self):
        for protocol in ("general", "clothes_change"):
            valid, positive = valid_gallery_mask((1, 3, 0), self.G, protocol)
            assert valid[3] and not positive[3]

    def test_camera_free_mode(self):
        valid, positive = valid_gallery_mask((1, 3, 0), self.G, "general", use_camera=False)
        assert valid.all() and positive[0]


class TestComputeMapCmc:
    def test_single_positive_rank_one(self):
        task = RetrievalTask(
            query_feats=_unit([[1.0, 0.0]]),
            gallery_feats=_unit([[1.0, 0.1], [-1.0, 0.0], [0.0, 1.0]]),
            query_meta=_meta([[0, 0, 0]]),
            gallery_meta=_meta([[0, 1, 1], [1, 2, 0], [2, 3, 1]]),
            protocol="general",
        )
        rep = compute_map_cmc(task)
        assert rep.map == pytest.approx(1.0)
        assert rep.cmc[0] == pytest.approx(1.0)
        assert rep.n_valid_queries == 1

    def test_ap_hand_value_ranks_one_and_three(self):
        # gallery ordering by distance: positive, negative, positive
        task = RetrievalTask(
            query_feats=_unit([[1.0, 0.0]]),
            gallery_feats=_unit([[1.0, 0.05], [1.0, 0.2], [1.0, 0.4]]),
            query_meta=_meta([[0, 0, 0]]),
            gallery_meta=_meta([[0, 1, 1], [1, 9, 0], [0, 2, 1]]),
            protocol="general",
        )
        rep = compute_map_cmc(task)
        assert rep.map == pytest.approx(0.8333, abs=1e-4)
        assert rep.cmc[:3] == pytest.approx([1.0, 1.0, 1.0])

    @pytest.mark.parametrize("protocol", ["general", "clothes_change"])
    def test_matches_oracle_on_random_tasks(self, protocol):
        rng = np.random.default_rng(42)
        done = 0
        while done < 50:
            task = _random_task(rng, protocol)
            try:
                a = compute_map_cmc(task)
            except ValueError:
                continue
            b = oracle_map_cmc(task)
            assert a.map == b.map
            assert a.cmc == b.cmc
            assert a.n_valid_queries == b.n_valid_queries
            done += 1

    def test_gallery_permutation_invariance(self, rng):
        task = _random_task(rng, "general")
        perm = rng.permutation(len(task.gallery_meta))
        permuted = RetrievalTask(
            query_feats=task.query_feats,
            gallery_feats=task.gallery_feats[perm],
            query_meta=task.query_meta,
            gallery_meta=EvalMeta(
                task.gallery_meta.person_ids[perm],
                task.gallery_meta.clothes_ids[perm],
                task.gallery_meta.camera_ids[perm],
            ),
            protocol="general",
        )
        a, b = compute_map_cmc(task), compute_map_cmc(permuted)
        assert a.map == pytest.approx(b.map, rel=1e-12)
        assert a.cmc == pytest.approx(b.cmc)

    def test_query_without_positives_dropped(self):
        task = RetrievalTask(
            query_feats=_unit([[1.0, 0.0], [0.0, 1.0]]),
            gallery_feats=_unit([[1.0, 0.1], [0.5, 1.0]]),
            query_meta=_meta([[0, 0, 0], [9, 9, 0]]),
            gallery_meta=_meta([[0, 1, 1], [1, 2, 1]]),
            protocol="general",
        )
        rep = compute_map_cmc(task)
        assert rep.n_valid_queries == 1

    def test_zero_valid_queries_error(self):
        # single outfit per person: clothes-change has no positives anywhere
        task = RetrievalTask(
            query_feats=_unit([[1.0, 0.0]]),
            gallery_feats=_unit([[1.0, 0.1]]),
            query_meta=_meta([[0, 0, 0]]),
            gallery_meta=_meta([[0, 0, 1]]),
            protocol="clothes_change",
        )
        with pytest.raises(ValueError, match="valid quer"):
            compute_map_cmc(task)
        with pytest.raises(ValueError, match="valid quer"):
            oracle_map_cmc(task)

    def test_cmc_non_decreasing(self, rng):
        for _ in range(10):
            task = _random_task(rng, "general")
            try:
                rep = compute_map_cmc(task)
            except ValueError:
                continue
            assert all(a <= b for a, b in zip(rep.cmc, rep.cmc[1:]))
            assert all(0.0 <= c <= 1.0 for c in rep.cmc)


class TestInferenceUsesOnlyRgbBranch:
    def test_zeroed_mask_branch_identical_report(self, tiny_manifest, tmp_path):
        torch.set_num_threads(1)
        model = build_model(EncoderConfig(feature_dim=16), seed=0)
        task_a = build_retrieval_task(model, tiny_manifest, "general")
        with torch.no_grad():
            for p in model.mask_encoder.parameters():
                p.zero_()
            for p in model.predictor.parameters():
                p.zero_()
            for p in model.fusion.parameters():
                p.zero_()
        task_b = build_retrieval_task(model, tiny_manifest, "general")
        a, b = compute_map_cmc(task_a), compute_map_cmc(task_b)
        assert a.map == b.map and a.cmc == b.cmc

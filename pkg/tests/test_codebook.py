import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from deconfrec.codebook import (
    EnvironmentCodebook,
    assign_hard,
    assign_soft,
    assignment_records,
    straight_through,
    vq_losses,
)


def brute_nearest(points, codes):
    """Exhaustive nearest-neighbor with (distance, index) ordering."""
    out = []
    for p in points:
        dists = [(float(((p - c) ** 2).sum()), j) for j, c in enumerate(codes)]
        out.append(min(dists)[1])
    return out


class TestAssignHard:
    def test_worked_fixture(self):
        points = torch.tensor([[0.0, 0.0]])
        codes = torch.tensor([[1.0, 0.0], [0.0, 0.5]])
        hard, quant = assign_hard(points, codes)
        # distances 1.0 vs 0.25 -> second code
        assert hard.tolist() == [1]
        torch.testing.assert_close(quant, torch.tensor([[0.0, 0.5]]))

    def test_exact_match_zero_distance(self):
        codes = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        hard, quant = assign_hard(codes.clone(), codes)
        assert hard.tolist() == [0, 1]
        torch.testing.assert_close(quant, codes)

    def test_tie_breaks_to_lowest(self):
        points = torch.tensor([[0.0, 0.0]])
        codes = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
        hard, _ = assign_hard(points, codes)
        assert hard.tolist() == [0]

    def test_thousand_random_instances_match_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            k = int(rng.integers(2, 17))
            d = int(rng.integers(1, 33))
            points = torch.tensor(rng.normal(size=(n, d)))
            codes = torch.tensor(rng.normal(size=(k, d)))
            hard, _ = assign_hard(points, codes)
            assert hard.tolist() == brute_nearest(points, codes)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            assign_hard(torch.zeros(1, 3), torch.zeros(2, 4))


class TestAssignSoft:
    def test_single_code_is_certain(self):
        soft, blended = assign_soft(torch.randn(4, 3), torch.ones(1, 3), 0.7)
        torch.testing.assert_close(soft, torch.ones(4, 1))
        torch.testing.assert_close(blended, torch.ones(4, 3))

    def test_equidistant_pair_is_half_half(self):
        points = torch.tensor([[0.0, 0.0]])
        codes = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
        soft, blended = assign_soft(points, codes, 1.0)
        torch.testing.assert_close(soft, torch.tensor([[0.5, 0.5]]))
        torch.testing.assert_close(blended, torch.tensor([[0.0, 0.0]]))

    def test_low_temperature_matches_hard(self):
        rng = np.random.default_rng(5)
        points = torch.tensor(rng.normal(size=(50, 8)))
        codes = torch.tensor(rng.normal(size=(6, 8)))
        _, hard_q = assign_hard(points, codes)
        _, soft_q = assign_soft(points, codes, temperature=1e-6)
        assert (soft_q - hard_q).abs().max().item() < 1e-4

    def test_monotone_in_distance(self):
        # moving a code strictly closer must strictly raise its probability
        point = torch.tensor([[0.0, 0.0]])
        far = torch.tensor([[3.0, 0.0], [0.0, 2.0]])
        near = torch.tensor([[1.5, 0.0], [0.0, 2.0]])
        q_far, _ = assign_soft(point, far, 1.0)
        q_near, _ = assign_soft(point, near, 1.0)
        assert q_near[0, 0] > q_far[0, 0]

    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=2, max_value=8),
        st.floats(min_value=0.01, max_value=50.0),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_rows_are_distributions(self, n, k, temperature, seed):
        rng = np.random.default_rng(seed)
        points = torch.tensor(rng.normal(size=(n, 4)))
        codes = torch.tensor(rng.normal(size=(k, 4)))
        soft, _ = assign_soft(points, codes, temperature)
        assert torch.all(soft >= 0) and torch.all(soft <= 1)
        np.testing.assert_allclose(soft.sum(dim=1).numpy(), 1.0, atol=1e-6)

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            assign_soft(torch.zeros(1, 2), torch.zeros(2, 2), 0.0)


class TestVqLosses:
    def test_zero_when_points_sit_on_codes(self):
        codes = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        points = codes[[1, 0, 0]].clone()
        hard, _ = assign_hard(points, codes)
        loss = vq_losses(points, codes, hard, commitment_weight=0.25)
        assert loss.item() == 0.0

    def test_single_item_distance_d(self):
        codes = torch.tensor([[0.0, 0.0], [10.0, 10.0]])
        points = torch.tensor([[3.0, 4.0]])  # distance 5 from code 0
        hard, _ = assign_hard(points, codes)
        loss = vq_losses(points, codes, hard, commitment_weight=0.25)
        assert loss.item() == pytest.approx((1 + 0.25) * 25.0)

    def test_codebook_gets_gradient_commitment_gets_encoder(self):
        codes = torch.tensor([[0.0, 0.0]], requires_grad=True)
        points = torch.tensor([[2.0, 0.0]], requires_grad=True)
        hard = torch.tensor([0])
        loss = vq_losses(points, torch.cat([codes, codes + 5.0]), hard, 0.5)
        loss.backward()
        # d/dcode ||sg(p) - c||^2 = 2(c - p) = [-4, 0]
        torch.testing.assert_close(codes.grad, torch.tensor([[-4.0, 0.0]]))
        # d/dp cw * ||p - sg(c)||^2 = 0.5 * 2(p - c) = [2, 0]
        torch.testing.assert_close(points.grad, torch.tensor([[2.0, 0.0]]))

    def test_straight_through_passes_gradient(self):
        points = torch.tensor([[1.0, 2.0]], requires_grad=True)
        quantized = torch.tensor([[0.0, 5.0]])
        out = straight_through(points, quantized)
        torch.testing.assert_close(out, quantized)  # forward value is the code
        w = torch.tensor([[3.0, -2.0]])
        (out * w).sum().backward()
        torch.testing.assert_close(points.grad, w)  # gradient is the input's


class TestEnvironmentCodebook:
    def test_validations(self):
        with pytest.raises(ValueError, match="K >= 2"):
            EnvironmentCodebook(torch.zeros(1, 4))
        with pytest.raises(ValueError, match="finite"):
            EnvironmentCodebook(torch.tensor([[1.0], [float("nan")]]))
        with pytest.raises(ValueError, match="distinct"):
            EnvironmentCodebook(torch.ones(2, 3))

    def test_kmeans_pp_init_covers_clusters(self):
        rng = np.random.default_rng(0)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        pts = np.concatenate([c + 0.1 * rng.normal(size=(30, 2)) for c in centers])
        cb = EnvironmentCodebook.init_kmeans_pp(torch.tensor(pts, dtype=torch.float32), 3, seed=1)
        hard, _ = assign_hard(torch.tensor(pts, dtype=torch.float32), cb)
        # each true cluster maps to one code
        groups = [set(hard[i * 30 : (i + 1) * 30].tolist()) for i in range(3)]
        assert all(len(g) == 1 for g in groups)
        assert len(set().union(*groups)) == 3

    def test_kmeans_pp_handles_duplicate_points(self):
        pts = torch.zeros(10, 3)
        pts[5:] = 1.0
        cb = EnvironmentCodebook.init_kmeans_pp(pts, 3, seed=0)
        assert len(torch.unique(cb.vectors, dim=0)) == 3


def test_assignment_records_shape():
    hard = torch.tensor([1, 0])
    soft = torch.tensor([[0.2, 0.8], [0.7, 0.3]])
    recs = assignment_records(hard, soft)
    assert recs[0] == {"item": 0, "stratum": 1, "soft": [pytest.approx(0.2), pytest.approx(0.8)]}
    assert recs[1]["stratum"] == 0

"""Loss terms, their compositions and gradient checks."""

import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from hmtlpose.errors import DegenerateBatchError, InvalidInputError
from hmtlpose.geometry import BinSpec
from hmtlpose.losses import (
    LossWeights,
    barlow_twins_loss,
    cross_entropy,
    cross_entropy_logits,
    hopenet_angle_loss,
    rmse_loss,
    total_loss,
)

W3 = BinSpec()
D = torch.float64


def t(*v):
    return torch.tensor(v, dtype=D)


def one_hot(index, count, batch=1):
    p = torch.zeros(batch, count, dtype=D)
    p[:, index] = 1
    return p


class TestRMSE:
    def test_exact(self):
        assert rmse_loss(t(1, 2), t(1, 2)) == 0

    def test_constant_error(self):
        assert float(rmse_loss(t(1, 2, 3) - 2.5, t(1, 2, 3))) == pytest.approx(2.5)

    def test_three_four(self):
        assert float(rmse_loss(t(3, 4), t(0, 0))) == pytest.approx(3.5355, abs=1e-4)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            rmse_loss(t(), t())


class TestCrossEntropy:
    def test_correct_one_hot(self):
        assert float(cross_entropy(one_hot(2, 4), torch.tensor([2]))) == 0

    @pytest.mark.parametrize("k", [4, 66])
    def test_uniform(self, k):
        p = torch.full((3, k), 1 / k, dtype=D)
        assert float(cross_entropy(p, torch.tensor([0, 1, k - 1]))) == pytest.approx(math.log(k), abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(InvalidInputError):
            cross_entropy(one_hot(0, 4), torch.tensor([4]))

    def test_floor_keeps_finite(self):
        assert math.isfinite(float(cross_entropy(one_hot(0, 4), torch.tensor([1]))))

    def test_fused_matches(self):
        logits = torch.randn(5, 9, dtype=D)
        y = torch.randint(0, 9, (5,))
        a = cross_entropy(torch.softmax(logits, -1), y)
        assert float(cross_entropy_logits(logits, y)) == pytest.approx(float(a), abs=1e-6)


class TestHopeNetLoss:
    def test_argmin(self):
        v = hopenet_angle_loss(one_hot(33, 66), t(1.5), torch.tensor([33]), W3)
        assert float(v) == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        p = torch.full((1, 66), 1 / 66, dtype=D)
        v = hopenet_angle_loss(p, t(0.0), torch.tensor([33]), W3)
        assert float(v) == pytest.approx(math.log(66), abs=1e-6)

    def test_center_gap(self):
        v = hopenet_angle_loss(one_hot(33, 66), t(0.0), torch.tensor([33]), W3, alpha=2.0)
        assert float(v) == pytest.approx(3.0, abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            hopenet_angle_loss(one_hot(0, 65), t(0.0), torch.tensor([0]), W3)

    def test_default_alpha(self):
        assert LossWeights().alpha == 2.0
        assert LossWeights().ssl_scale == 50.0


def _outputs(angles=("yaw", "pitch"), puzzle=None, rotation=None, bins=False, batch=2):
    labels = {a: torch.tensor([10.5, -4.5], dtype=D)[:batch] for a in angles}
    out = {}
    for a in angles:
        if bins:
            idx = ((labels[a] + 99) // 3).long()
            out[f"{a}_probs"] = torch.nn.functional.one_hot(idx, 66).to(D)
            out[f"{a}_logits"] = torch.log(out[f"{a}_probs"].clamp_min(1e-30))
            out[a] = labels[a]
        else:
            out[a] = labels[a].clone()
    for task, logits in (("puzzle", puzzle), ("rotation", rotation)):
        if logits is None:
            continue
        regions, classes = logits
        labels[task] = torch.zeros(batch, regions, dtype=torch.long)
        for j in range(regions):
            out[f"{task}_region_{j}"] = torch.full((batch, classes), -60.0, dtype=D)
            out[f"{task}_region_{j}"][:, 0] = 60.0
    return out, labels


class TestTotalLoss:
    @pytest.mark.parametrize("mode", ["eq1", "eq2", "eq3"])
    def test_exact_heads_zero(self, mode):
        out, lab = _outputs(angles=("yaw", "pitch", "roll") if mode == "eq2" else ("yaw", "pitch"),
                            puzzle=(4, 4), rotation=(4, 4) if mode == "eq1" else None, bins=mode == "eq2")
        if mode == "eq2":
            for a in ("yaw", "pitch", "roll"):  # put labels on bin centres
                lab[a] = lab[a] * 0 + torch.tensor([10.5, -4.5], dtype=D)
        b = total_loss(mode, out, lab, LossWeights(), W3)
        assert float(b.total) == pytest.approx(0.0, abs=1e-9)

    def test_eq3_uniform_puzzle(self):
        out, lab = _outputs(puzzle=(4, 4))
        for j in range(4):
            out[f"puzzle_region_{j}"] = torch.zeros(2, 4, dtype=D)
        b = total_loss("eq3", out, lab, LossWeights(ssl_scale=1.0))
        assert float(b.total) == pytest.approx(4 * math.log(4), abs=1e-6)
        assert len(b.ssl) == 4

    def test_eq2_scaling(self):
        out, lab = _outputs(angles=("yaw", "pitch", "roll"), puzzle=(9, 9), bins=True)
        out["puzzle_region_0"] = torch.zeros(2, 9, dtype=D)
        b = total_loss("eq2", out, lab, LossWeights(ssl_scale=50.0), W3)
        assert float(b.total) == pytest.approx(50 * math.log(9), abs=1e-4)

    @pytest.mark.parametrize("mode", ["eq1", "eq2", "eq3"])
    def test_breakdown_recomposes(self, mode):
        torch.manual_seed(1)
        angles = ("yaw", "pitch", "roll")
        out, lab = {}, {a: torch.randn(4, dtype=D) * 30 for a in angles}
        for a in angles:
            logits = torch.randn(4, 66, dtype=D)
            out[f"{a}_logits"], out[f"{a}_probs"] = logits, torch.softmax(logits, -1)
            out[a] = torch.randn(4, dtype=D) * 30
        for task in ("puzzle",) + (("rotation",) if mode == "eq1" else ()):
            lab[task] = torch.randint(0, 4, (4, 4))
            for j in range(4):
                out[f"{task}_region_{j}"] = torch.randn(4, 4, dtype=D)
        b = total_loss(mode, out, lab, LossWeights(), W3)
        assert b.recompose() == pytest.approx(float(b.total), rel=1e-6)
        assert b.ssl_scale == 50.0
        assert all(float(v) >= 0 for v in list(b.supervised.values()) + list(b.ssl.values()))
        assert set(b.as_record()) >= set(angles) | {"total", "puzzle_region_0"}

    def test_eq3_rejects_rotation_heads(self):
        out, lab = _outputs(puzzle=(4, 4), rotation=(4, 4))
        with pytest.raises(InvalidInputError):
            total_loss("eq3", out, lab, LossWeights())

    def test_missing_head(self):
        out, lab = _outputs()
        del out["pitch"]
        with pytest.raises(InvalidInputError):
            total_loss("eq1", out, lab, LossWeights(), angles=("yaw", "pitch"))

    def test_eq2_needs_bins(self):
        out, lab = _outputs()
        with pytest.raises(InvalidInputError):
            total_loss("eq2", out, lab, LossWeights(), W3)

    def test_missing_ssl_labels(self):
        out, lab = _outputs(puzzle=(4, 4))
        del lab["puzzle"]
        with pytest.raises(InvalidInputError):
            total_loss("eq3", out, lab, LossWeights())


class TestBarlowTwins:
    def test_identical_views(self):
        z = torch.randn(8, 1, dtype=D)
        assert float(barlow_twins_loss(z, z)) == pytest.approx(0.0, abs=1e-9)

    def test_negated_views(self):
        z = torch.randn(8, 1, dtype=D)
        assert float(barlow_twins_loss(z, -z)) == pytest.approx(4.0, abs=1e-6)

    def test_duplicated_feature(self):
        f = torch.randn(8, 1, dtype=D)
        z = torch.cat([f, f], 1)
        lam = 5e-3
        assert float(barlow_twins_loss(z, z, lam)) == pytest.approx(2 * lam, abs=1e-6)

    def test_batch_permutation(self):
        za, zb = torch.randn(6, 5, dtype=D), torch.randn(6, 5, dtype=D)
        perm = torch.randperm(6)
        a = barlow_twins_loss(za, zb)
        b = barlow_twins_loss(za[perm], zb[perm])
        assert abs(float(a) - float(b)) <= 1e-9

    def test_degenerate(self):
        with pytest.raises(DegenerateBatchError):
            barlow_twins_loss(torch.randn(1, 3, dtype=D), torch.randn(1, 3, dtype=D))
        z = torch.randn(4, 2, dtype=D)
        z[:, 1] = 3.0
        with pytest.raises(DegenerateBatchError):
            barlow_twins_loss(z, torch.randn(4, 2, dtype=D))


class TestGradients:
    """Analytic gradients against central finite differences in double precision."""

    def test_rmse(self):
        x, y = torch.randn(4, dtype=D, requires_grad=True), torch.randn(4, dtype=D)
        assert gradcheck(lambda a: rmse_loss(a, y), (x,), eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_cross_entropy(self):
        logits = torch.randn(4, 8, dtype=D, requires_grad=True)
        y = torch.randint(0, 8, (4,))
        assert gradcheck(lambda z: cross_entropy(torch.softmax(z, -1), y), (logits,), eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_hopenet(self):
        spec = BinSpec(-12, 12, 3)  # 8 bins
        logits = torch.randn(4, spec.count, dtype=D, requires_grad=True)
        reg = torch.rand(4, dtype=D) * 20 - 10
        from hmtlpose.geometry import bin_indices

        bins = bin_indices(reg, spec)
        f = lambda z: hopenet_angle_loss(torch.softmax(z, -1), reg, bins, spec)  # noqa: E731
        assert gradcheck(f, (logits,), eps=1e-6, atol=1e-8, rtol=1e-4)

    def test_barlow_twins(self):
        za = torch.randn(4, 6, dtype=D, requires_grad=True)
        zb = torch.randn(4, 6, dtype=D, requires_grad=True)
        assert gradcheck(barlow_twins_loss, (za, zb), eps=1e-6, atol=1e-8, rtol=1e-4)

import math

import numpy as np
import pytest
import torch

from microau.errors import ConfigurationError, ValidationError
from microau.objective import (AslConfig, ConfusionCounts, MetricsReport, asl_loss,
                               confusion_counts, f1_per_au, macro_f1, render_table)
from microau.tensorcore import Rng

F64 = torch.float64


class TestAslLoss:
    def test_reduces_to_bce(self):
        cfg = AslConfig(gamma_pos=0.0, gamma_neg=0.0, margin=0.0)
        rng = Rng(0)
        probs = rng.uniform((16, 6), 0.02, 0.98, dtype=F64)
        labels = torch.from_numpy((rng.uniform_np((16, 6)) < 0.4).astype(np.float64))
        got = asl_loss(probs, labels, cfg).item()
        bce = -(labels * torch.log(probs) + (1 - labels) * torch.log(1 - probs))
        expect = bce.sum(dim=1).mean().item()
        assert got == pytest.approx(expect, abs=1e-9)

    def test_positive_at_half_contributes_ln2(self):
        cfg = AslConfig(gamma_pos=0.0, gamma_neg=4.0, margin=0.05)
        probs = torch.tensor([[0.5]], dtype=F64)
        labels = torch.tensor([[1.0]], dtype=F64)
        assert asl_loss(probs, labels, cfg).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_negative_worked_value(self):
        # y=0, p=0.55, m=0.05 -> p_m=0.5, term = 0.5^4 * (-ln 0.5)
        cfg = AslConfig(gamma_pos=0.0, gamma_neg=4.0, margin=0.05)
        probs = torch.tensor([[0.55]], dtype=F64)
        labels = torch.tensor([[0.0]], dtype=F64)
        expect = 0.5 ** 4 * math.log(2)
        assert asl_loss(probs, labels, cfg).item() == pytest.approx(expect, abs=1e-12)

    def test_labels_must_be_binary(self):
        cfg = AslConfig()
        with pytest.raises(ValidationError):
            asl_loss(torch.full((2, 2), 0.5, dtype=F64),
                     torch.full((2, 2), 0.5, dtype=F64), cfg)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            asl_loss(torch.zeros(2, 3, dtype=F64), torch.zeros(2, 4, dtype=F64), AslConfig())

    def test_nonnegative_and_zero_iff_solved(self):
        cfg = AslConfig(gamma_pos=0.0, gamma_neg=4.0, margin=0.05)
        # every positive at p=1, every negative at p <= margin -> exactly zero
        probs = torch.tensor([[1.0, 0.05, 0.02], [1.0, 1.0, 0.0]], dtype=F64)
        labels = torch.tensor([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]], dtype=F64)
        assert asl_loss(probs, labels, cfg).item() == 0.0
        # any deviation is strictly positive
        probs2 = probs.clone()
        probs2[0, 1] = 0.2
        assert asl_loss(probs2, labels, cfg).item() > 0
        rng = Rng(4)
        rand = asl_loss(rng.uniform((8, 5), 0.01, 0.99, dtype=F64),
                        torch.from_numpy((rng.uniform_np((8, 5)) < 0.3).astype(np.float64)),
                        cfg)
        assert rand.item() > 0

    def test_raising_gamma_neg_never_amplifies_negative_terms(self):
        rng = Rng(9)
        probs = rng.uniform((40, 8), 0.0, 1.0, dtype=F64)
        labels = torch.zeros(40, 8, dtype=F64)
        prev = None
        for gamma in (0.0, 1.0, 2.0, 4.0, 8.0):
            cfg = AslConfig(gamma_pos=0.0, gamma_neg=gamma, margin=0.05)
            val = asl_loss(probs, labels, cfg).item()
            if prev is not None:
                assert val <= prev + 1e-12
            prev = val

    def test_gradient_matches_finite_differences(self):
        from microau.verification import check_asl
        rep = check_asl(seed=0)
        assert rep.max_rel_error < 1e-4

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            AslConfig(gamma_neg=-1.0).validate()
        with pytest.raises(ConfigurationError):
            AslConfig(margin=1.0).validate()


class TestF1:
    def test_perfect_detection(self):
        assert f1_per_au(ConfusionCounts(tp=5, fp=0, fn=0, tn=3)) == 1.0

    def test_brute_force_value(self):
        assert f1_per_au(ConfusionCounts(tp=2, fp=1, fn=1, tn=6)) == pytest.approx(2 / 3)

    def test_degenerate_zero(self):
        assert f1_per_au(ConfusionCounts(tp=0, fp=2, fn=3, tn=1)) == 0.0
        assert f1_per_au(ConfusionCounts(tp=0, fp=0, fn=0, tn=4)) == 0.0

    def test_macro_is_plain_mean(self):
        assert macro_f1([1.0, 0.5]) == 0.75
        assert macro_f1([0.3, 0.3, 0.3]) == pytest.approx(0.3)
        with pytest.raises(ValidationError):
            macro_f1([])

    def test_counts_match_naive_recount(self):
        rng = Rng(5)
        probs = rng.uniform_np((30, 4))
        labels = (rng.uniform_np((30, 4)) < 0.5).astype(np.int64)
        counts = confusion_counts(probs, labels, 0.5)
        for j, c in enumerate(counts):
            tp = fp = fn = tn = 0
            for i in range(30):
                pred = probs[i, j] >= 0.5
                lab = labels[i, j] == 1
                tp += pred and lab
                fp += pred and not lab
                fn += (not pred) and lab
                tn += (not pred) and (not lab)
            assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
            assert c.total == 30


class TestMetricsReport:
    def test_merge_sums_counts(self):
        a = MetricsReport("s0", [1, 2], [ConfusionCounts(1, 2, 3, 4), ConfusionCounts(0, 1, 0, 9)])
        b = MetricsReport("s1", [1, 2], [ConfusionCounts(5, 0, 1, 4), ConfusionCounts(2, 2, 2, 4)])
        merged = MetricsReport.merged("ALL", [a, b])
        assert (merged.counts[0].tp, merged.counts[0].fp) == (6, 2)
        assert merged.counts[1].tn == 13
        assert merged.counts[0].total == a.counts[0].total + b.counts[0].total

    def test_merge_rejects_mismatched_au_sets(self):
        a = MetricsReport("s0", [1], [ConfusionCounts(1, 0, 0, 1)])
        b = MetricsReport("s1", [2], [ConfusionCounts(1, 0, 0, 1)])
        with pytest.raises(ValidationError):
            MetricsReport.merged("ALL", [a, b])

    def test_table_layout(self):
        rep = MetricsReport("s00", [1, 12], [ConfusionCounts(3, 1, 0, 4),
                                             ConfusionCounts(2, 0, 2, 4)])
        text = render_table([rep], MetricsReport.merged("ALL", [rep]))
        lines = text.splitlines()
        assert lines[0].split() == ["fold", "AU1", "AU12", "Avg."]
        assert lines[1].startswith("s00")
        assert lines[2].startswith("ALL")

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskdetr.autodiff import Tensor
from deskdetr.errors import ConfigError
from deskdetr.query_selection import (
    EncoderHead,
    SelectionStats,
    best_gt_iou,
    export_scatter,
    make_anchors,
    prop_metrics,
    select_queries,
    select_topk,
    token_count,
    uncertainty,
)


class TestTopK:
    def test_descending_with_lower_index_on_ties(self):
        np.testing.assert_array_equal(select_topk(np.array([0.2, 0.9, 0.5, 0.9, 0.5]), 4), [1, 3, 2, 4])

    def test_batched(self):
        s = np.array([[0.1, 0.3, 0.2], [0.9, 0.0, 0.9]])
        np.testing.assert_array_equal(select_topk(s, 2), [[1, 2], [0, 2]])

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ConfigError):
            select_topk(np.zeros(3), k)

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.data())
    def test_selected_dominate_the_rest(self, values, data):
        scores = np.array(values, dtype=float)
        k = data.draw(st.integers(1, len(values)))
        idx = select_topk(scores, k)
        rest = np.setdiff1d(np.arange(len(values)), idx)
        assert len(set(idx)) == k
        if rest.size:
            assert scores[idx].min() >= scores[rest].max()
        assert list(idx) == sorted(idx, key=lambda i: (-scores[i], i))


class TestAnchorsAndHead:
    def test_anchor_layout(self):
        shapes = [(4, 4), (2, 2), (1, 1)]
        a = 1 / (1 + np.exp(-make_anchors(shapes)))
        assert a.shape == (21, 4)
        np.testing.assert_allclose(a[0], [0.125, 0.125, 0.05, 0.05])
        np.testing.assert_allclose(a[-1], [0.5, 0.5, 0.2, 0.2])

    def test_token_count(self):
        assert token_count(96, 96) == 144 + 36 + 9
        assert token_count(640, 640) == 8400

    def test_uncertainty(self):
        np.testing.assert_allclose(uncertainty([0.9, 0.2], [0.3, 0.2]), [0.6, 0.0])

    def test_selection_matches_full_head(self):
        rng = np.random.default_rng(0)
        head = EncoderHead(8, 3, rng)
        head.bbox_head.layers[-1].weight.data = rng.normal(size=head.bbox_head.layers[-1].weight.shape).astype(np.float32)
        head.score_head.weight.data = rng.normal(size=head.score_head.weight.shape).astype(np.float32)
        anchors = make_anchors([(4, 4), (2, 2), (1, 1)])
        memory = Tensor(rng.normal(size=(2, 21, 8)).astype(np.float32))
        feats, logits, boxes = head(memory, anchors)
        sel = select_queries(head, memory, anchors, 5)
        expect = select_topk(logits.data.max(-1), 5)
        np.testing.assert_array_equal(sel.indices, expect)
        np.testing.assert_allclose(sel.box_logits.data, np.take_along_axis(boxes.data, expect[..., None], 1), atol=1e-6)
        np.testing.assert_allclose(sel.content.data, np.take_along_axis(feats.data, expect[..., None], 1))
        np.testing.assert_allclose(sel.scores, 1 / (1 + np.exp(-logits.data.max(-1)[np.arange(2)[:, None], expect])),
                                   rtol=1e-6)
        assert not sel.content.requires_grad


class TestSelectionMetrics:
    def test_best_gt_iou(self):
        gt = np.array([[0.5, 0.5, 0.2, 0.2]])
        np.testing.assert_allclose(best_gt_iou(np.array([[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.1, 0.1]]), gt), [1, 0])
        np.testing.assert_array_equal(best_gt_iou(np.zeros((3, 4)), np.zeros((0, 4))), np.zeros(3))

    def test_prop_metrics(self):
        cls = np.array([0.9, 0.8, 0.4, 0.6])
        ious = np.array([0.7, 0.3, 0.9, 0.5])
        assert prop_metrics(cls, ious) == (0.75, 0.25)
        assert prop_metrics(np.zeros(0), np.zeros(0)) == (0.0, 0.0)

    def test_stats_extend(self):
        s = SelectionStats.empty()
        s.extend([0.1, 0.2], [0.3, 0.4])
        s.extend([0.5], [0.6])
        np.testing.assert_allclose(s.cls_scores, [0.1, 0.2, 0.5])

    def test_export_scatter_keeps_confident_rows(self, tmp_path):
        rows = {"vanilla": SelectionStats(np.array([0.4, 0.7]), np.array([0.9, 0.2])),
                "uncertainty": SelectionStats(np.array([0.95]), np.array([0.85]))}
        path = tmp_path / "scatter.csv"
        assert export_scatter(rows, path) == 2
        with open(path, newline="") as fh:
            got = list(csv.reader(fh))
        assert got == [["cls_score", "iou_score", "scheme"], ["0.700000", "0.200000", "vanilla"],
                       ["0.950000", "0.850000", "uncertainty"]]

    def test_export_scatter_unknown_scheme(self, tmp_path):
        with pytest.raises(ConfigError):
            export_scatter({"other": SelectionStats.empty()}, tmp_path / "x.csv")


class TestSelectionProperties:
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=50), st.floats(0.05, 0.95))
    def test_prop_both_never_exceeds_prop_cls(self, pairs, thr):
        cls = np.array([p[0] for p in pairs])
        ious = np.array([p[1] for p in pairs])
        p_cls, p_both = prop_metrics(cls, ious, thr)
        assert 0.0 <= p_both <= p_cls <= 1.0

    @settings(max_examples=50)
    @given(st.lists(st.integers(-20, 20), min_size=1, max_size=40, unique=True), st.data())
    def test_topk_invariant_to_increasing_transform(self, values, data):
        scores = np.array(values, dtype=float)  # distinct integers stay distinct under each transform
        k = data.draw(st.integers(1, len(values)))
        for f in (lambda x: 1 / (1 + np.exp(-x)), lambda x: x**3 + 2 * x, np.exp):
            np.testing.assert_array_equal(select_topk(f(scores), k), select_topk(scores, k))

    def test_uncertainty_vanishes_at_loss_minimum(self):
        from deskdetr.autodiff import backward, precision
        from deskdetr.decoder import LayerOutput
        from deskdetr.losses import LossWeights, Targets, set_loss

        with precision(np.float64):
            rng = np.random.default_rng(0)
            boxes = np.concatenate([rng.uniform(0.3, 0.7, (1, 6, 2)), rng.uniform(0.1, 0.3, (1, 6, 2))], -1)
            gt = boxes[0, [1, 3, 5]] + rng.normal(0, 0.02, (3, 4))
            targets = Targets([np.array([0, 2, 1])], [gt])
            matches = [(np.array([1, 3, 5]), np.array([0, 1, 2]))]
            logits = Tensor(rng.normal(size=(1, 6, 3)), requires_grad=True)
            for _ in range(400):
                logits.grad = None
                terms = set_loss(LayerOutput(logits, Tensor(boxes)), matches, targets, LossWeights(), "uncertainty", 1.0)
                backward(terms["cls"])
                logits.data -= 2.0 * logits.grad
            p = 1 / (1 + np.exp(-logits.data[0, [1, 3, 5], [0, 2, 1]]))
            ious = np.array([best_gt_iou(boxes[0, [i]], gt[[j]])[0] for i, j in zip([1, 3, 5], [0, 1, 2])])
        assert uncertainty(ious, p).max() < 1e-3

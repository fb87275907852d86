import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from estf_tad.instances import ActionInstance, GroundTruthInstance
from estf_tad.metrics import (
    AnnotationSet,
    EvaluationError,
    VideoAnnotation,
    average_precision,
    evaluate,
    load_annotations,
    load_predictions,
    annotations_from_dict,
    predictions_from_dict,
)

GOLDEN = Path(__file__).parent / "fixtures" / "golden"


def gt(s, e, label=0, video="v"):
    return GroundTruthInstance(s, e, label, video)


def pred(s, e, score, label=0, video="v"):
    return ActionInstance(s, e, label, score, video)


def random_case(rng):
    n_gt = int(rng.integers(0, 5))
    n_pred = int(rng.integers(0, 7))
    vids = ["a", "b"]
    gts = []
    for _ in range(n_gt):
        s = float(rng.integers(0, 16))
        gts.append((vids[rng.integers(0, 2)], s, s + float(rng.integers(1, 6))))
    preds = []
    for _ in range(n_pred):
        s = float(rng.integers(0, 16)) + float(rng.choice([0, 0.5]))
        # coarse scores so ties happen
        preds.append((vids[rng.integers(0, 2)], s, s + float(rng.integers(1, 6)), float(rng.integers(1, 5)) / 4))
    return preds, gts


class TestAveragePrecision:
    def test_exact_hit(self):
        for thr in (0.1, 0.5, 1.0):
            assert average_precision([pred(1, 3, 0.4)], [gt(1, 3)], thr) == 1.0

    def test_disjoint(self):
        assert average_precision([pred(5, 6, 0.9)], [gt(1, 3)], 0.5) == 0.0

    def test_undefined_and_no_gt(self):
        assert average_precision([], [], 0.5) is None
        assert average_precision([pred(1, 2, 0.5)], [], 0.5) == 0.0

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(400):
            preds, gts = random_case(rng)
            thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
            got = average_precision(
                [pred(s, e, sc, video=v) for v, s, e, sc in preds], [gt(s, e, video=v) for v, s, e in gts], thr
            )
            assert got == oracles.average_precision_bruteforce(preds, gts, thr)
            checked += 1
        assert checked >= 200

    def test_duplicates_never_raise_ap(self):
        # Holds when a prediction can clear the threshold against at most one
        # gt: pairwise-disjoint gts and a threshold above 0.5.
        rng = np.random.default_rng(1)
        for _ in range(300):
            preds, _ = random_case(rng)
            cuts = np.sort(rng.choice(np.arange(1, 20), size=6, replace=False))
            g = [gt(float(a), float(b), video=str(rng.choice(["a", "b"]))) for a, b in zip(cuts[::2], cuts[1::2])]
            p = [pred(s, e, sc, video=v) for v, s, e, sc in preds]
            for thr in (0.55, 0.7, 0.9):
                assert average_precision(p + p, g, thr) <= average_precision(p, g, thr)

    def test_duplicates_can_claim_a_second_overlapping_gt(self):
        g = [gt(0, 5), gt(5, 10)]
        p = [pred(0, 10, 0.9)]
        assert average_precision(p, g, 0.5) == 0.5
        assert average_precision(p + p, g, 0.5) == 1.0


def two_video_annos():
    return AnnotationSet(
        ["a", "b"],
        [
            VideoAnnotation("x", 20.0, 4.0, [gt(1, 4, 0, "x"), gt(6, 9, 1, "x")]),
            VideoAnnotation("y", 20.0, 4.0, [gt(2, 5, 0, "y")]),
        ],
    )


class TestEvaluate:
    def test_perfect(self):
        annos = two_video_annos()
        preds = [pred(g.t_start, g.t_end, 1.0, g.label, g.video) for g in annos.ground_truth()]
        rep = evaluate(preds, annos)
        assert rep.average_map == 1.0 and all(m == 1.0 for m in rep.map_per_threshold)

    def test_empty_predictions(self):
        rep = evaluate([], two_video_annos())
        assert rep.average_map == 0.0

    def test_unknown_video_and_label(self):
        with pytest.raises(EvaluationError, match="'zz'"):
            evaluate([pred(1, 2, 0.5, 0, "zz")], two_video_annos())
        with pytest.raises(EvaluationError, match="label 7"):
            evaluate([pred(1, 2, 0.5, 7, "x")], two_video_annos())

    def test_mapping_input(self):
        rep = evaluate({"x": [pred(1, 4, 0.9, 0)]}, two_video_annos())
        assert rep.ap[0][0] == 0.5

    def random_preds(self, rng, annos, n=12):
        out = []
        for _ in range(n):
            v = annos.videos[rng.integers(0, len(annos.videos))].id
            s = float(rng.uniform(0, 15))
            out.append(pred(s, s + float(rng.uniform(0.5, 5)), float(rng.uniform(0.01, 1)), int(rng.integers(0, 2)), v))
        return out

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        annos = two_video_annos()
        for _ in range(100):
            rep = evaluate(self.random_preds(rng, annos), annos, [0.1, 0.3, 0.5, 0.7, 0.9])
            assert all(a >= b for a, b in zip(rep.map_per_threshold, rep.map_per_threshold[1:]))

    def test_order_and_rescaling_invariance(self):
        rng = np.random.default_rng(3)
        annos = two_video_annos()
        for _ in range(50):
            ps = self.random_preds(rng, annos)
            base = evaluate(ps, annos).to_dict()
            shuffled = [ps[i] for i in rng.permutation(len(ps))]
            rescaled = [pred(p.t_start, p.t_end, p.score ** 3 * 0.5, p.label, p.video) for p in ps]
            assert evaluate(shuffled, annos).to_dict() == base
            assert evaluate(rescaled, annos).to_dict() == base


class TestGolden:
    def test_report_matches_hand_table(self):
        annos = load_annotations(GOLDEN / "annotations.json")
        preds = load_predictions(GOLDEN / "predictions.json", annos.labels)
        rep = evaluate(preds, annos)
        expected = json.loads((GOLDEN / "expected_report.json").read_text())
        assert rep.thresholds == expected["thresholds"]
        for c, name in enumerate(annos.labels):
            for got, want in zip(rep.ap[c], expected["ap"][name]):
                assert abs(got - float(Fraction(want))) <= 1e-9
        for got, want in zip(rep.map_per_threshold, expected["map_per_threshold"]):
            assert abs(got - float(Fraction(want))) <= 1e-9
        assert abs(rep.average_map - float(Fraction(expected["average_map"]))) <= 1e-9

    def test_table_text(self):
        annos = load_annotations(GOLDEN / "annotations.json")
        rep = evaluate(load_predictions(GOLDEN / "predictions.json", annos.labels), annos)
        assert rep.format_table() == (GOLDEN / "expected_table.txt").read_text()


class TestFiles:
    base = {"version": 1, "labels": ["a"], "videos": [{"id": "v", "duration": 10, "fps": 4, "annotations": []}]}

    def doc(self, **changes):
        d = json.loads(json.dumps(self.base))
        d["videos"][0]["annotations"] = [changes.get("ann", {"start": 1, "end": 2, "label": "a"})]
        return d

    def test_roundtrip(self):
        annos = annotations_from_dict(self.doc())
        assert annos.videos[0].instances == [gt(1.0, 2.0, 0, "v")]

    @pytest.mark.parametrize(
        "ann, where",
        [
            ({"start": 1, "end": 2, "label": "zz"}, "/videos/0/annotations/0/label"),
            ({"start": 3, "end": 2, "label": "a"}, "/videos/0/annotations/0/end"),
            ({"start": 3, "end": 12, "label": "a"}, "/videos/0/annotations/0/end"),
            ({"start": -1, "end": 2, "label": "a"}, "/videos/0/annotations/0/start"),
            ({"start": "1", "end": 2, "label": "a"}, "/videos/0/annotations/0/start"),
            ({"end": 2, "label": "a"}, "/videos/0/annotations/0"),
        ],
    )
    def test_error_locations(self, ann, where):
        with pytest.raises(EvaluationError, match=where):
            annotations_from_dict(self.doc(ann=ann))

    def test_duplicate_ids(self):
        d = self.doc()
        d["videos"].append(d["videos"][0])
        with pytest.raises(EvaluationError, match="/videos/1/id"):
            annotations_from_dict(d)

    def test_prediction_schema(self):
        bad = {"results": {"v": [{"start": 0, "end": 1, "label": "a", "score": 1.5}]}}
        with pytest.raises(EvaluationError, match="/results/v/0/score"):
            predictions_from_dict(bad, ["a"])

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(EvaluationError, match="nope.json"):
            load_annotations(tmp_path / "nope.json")

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import micro_config
from oracle_refs import ref_auroc, ref_confusion
from tmae.datasets import ClipStore, generate_dataset
from tmae.errors import LengthMismatch, OutOfRange, SingleClassOnly
from tmae.evaluation import (
    auroc,
    confusion_metrics,
    evaluate_checkpoint,
    label_from_ef,
    save_report,
)
from tmae.train import pretrain


class TestLabelRule:
    def test_boundary_is_positive(self):
        assert label_from_ef(50.0) is True

    def test_above_threshold_negative(self):
        assert label_from_ef(62.1) is False

    def test_below_positive(self):
        assert label_from_ef(12.0) is True

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            label_from_ef(101.0)
        with pytest.raises(OutOfRange):
            label_from_ef(-0.5)


class TestConfusion:
    def test_perfect(self):
        cm = confusion_metrics([True, False, True], [True, False, True])
        assert (cm.f1, cm.recall, cm.precision, cm.accuracy) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_counts(self):
        preds = [True] * 3 + [True] + [False] + [False] * 5
        labels = [True] * 3 + [False] + [True] + [False] * 5
        cm = confusion_metrics(preds, labels)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (3, 1, 1, 5)
        assert cm.precision == pytest.approx(0.75)
        assert cm.recall == pytest.approx(0.75)
        assert cm.f1 == pytest.approx(0.75)
        assert cm.accuracy == pytest.approx(0.8)

    def test_all_negative_predictions_flagged(self):
        cm = confusion_metrics([False, False, False], [True, False, True])
        assert cm.precision == 0.0
        assert cm.f1 == 0.0
        assert "no_positive_predictions" in cm.flags

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion_metrics([True], [True, False])
        with pytest.raises(LengthMismatch):
            confusion_metrics([], [])

    @given(
        n=st.integers(1, 200),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_matches_bruteforce(self, n, seed):
        rng = np.random.default_rng(seed)
        preds = rng.random(n) < 0.5
        labels = rng.random(n) < 0.5
        cm = confusion_metrics(preds.tolist(), labels.tolist())
        f1, recall, precision, accuracy = ref_confusion(preds.tolist(), labels.tolist())
        assert cm.f1 == f1
        assert cm.recall == recall
        assert cm.precision == precision
        assert cm.accuracy == accuracy


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0

    def test_all_ties_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [True, False, True, False]) == 0.5

    def test_enumerated_pairs(self):
        scores = [0.9, 0.4, 0.6, 0.1]
        labels = [True, True, False, False]
        assert auroc(scores, labels) == pytest.approx(0.75)

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassOnly):
            auroc([0.5, 0.7], [True, True])

    def test_invariant_under_monotone_transform(self, rng):
        scores = rng.random(50)
        labels = rng.random(50) < 0.4
        if labels.all() or not labels.any():
            labels[0] = True
            labels[1] = False
        base = auroc(scores, labels)
        assert auroc(np.exp(5 * scores), labels) == pytest.approx(base, abs=1e-12)

    def test_complement_rule_no_ties(self, rng):
        scores = rng.permutation(60) / 60.0  # distinct scores
        labels = rng.random(60) < 0.5
        if labels.all() or not labels.any():
            labels[0] = True
            labels[1] = False
        assert auroc(scores, labels) + auroc(scores, ~labels) == pytest.approx(1.0, abs=1e-12)

    @given(n=st.integers(2, 200), seed=st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_matches_pairwise_reference(self, n, seed):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.random(n) < 0.5
        if labels.all() or not labels.any():
            return
        ours = auroc(scores.tolist(), labels.tolist())
        ref = ref_auroc(scores.tolist(), labels.tolist())
        assert ours == pytest.approx(ref, abs=1e-12)


class TestEvaluate:
    @pytest.fixture(scope="class")
    @staticmethod
    def setup(tmp_path_factory):
        out = tmp_path_factory.mktemp("eval_data")
        cfg = micro_config(
            **{
                "data.manifest": str(out / "manifest.csv"),
                "data.synth_r_max_lo": 1.2,
                "data.synth_r_max_hi": 1.8,
                "mask.ratio": 0.5,
                "train.max_epochs": 3,
                "train.warmup_epochs": 1,
                "train.batch_size": 4,
            }
        )
        generate_dataset(out, 16, cfg, seed=2)
        store = ClipStore.from_manifest(out / "manifest.csv")
        ckpt = pretrain(store, cfg, out / "run", log=lambda _: None).best_path
        return cfg, store, ckpt

    def test_deterministic_report(self, setup):
        cfg, store, ckpt = setup
        a = evaluate_checkpoint(ckpt, store, cfg, split="test")
        b = evaluate_checkpoint(ckpt, store, cfg, split="test")
        assert a.to_csv() == b.to_csv()
        assert a.n_pos > 0 and a.n_neg > 0

    def test_zero_threshold_full_recall(self, setup):
        cfg, store, ckpt = setup
        report = evaluate_checkpoint(ckpt, store, cfg, split="test", threshold=0.0)
        assert report.recall == 1.0

    def test_single_class_split_rejected(self, setup, tmp_path):
        import copy

        cfg, store, ckpt = setup
        doctored = ClipStore(copy.deepcopy(store.records), store.root)
        for r in doctored.records:
            r.ef_percent = 70.0
        with pytest.raises(SingleClassOnly):
            evaluate_checkpoint(ckpt, doctored, cfg, split="test")

    def test_report_file_format(self, setup, tmp_path):
        cfg, store, ckpt = setup
        report = evaluate_checkpoint(ckpt, store, cfg, split="test")
        path = tmp_path / "metrics.csv"
        save_report(report, path)
        lines = path.read_text().splitlines()
        meta = [l for l in lines if l.startswith("# ")]
        assert any("split = test" in l for l in meta)
        assert "metric,value" in lines
        data = dict(
            l.split(",") for l in lines if "," in l and not l.startswith(("#", "metric"))
        )
        assert set(data) == {
            "f1", "recall", "precision", "accuracy", "auroc", "n_pos", "n_neg", "threshold"
        }
        for key in ("f1", "recall", "precision", "accuracy", "auroc"):
            assert 0.0 <= float(data[key]) <= 1.0

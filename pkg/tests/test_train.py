import json

import numpy as np
import pytest
import torch

from fsseg.config import parse_config
from fsseg.data import make_fold, sample_episode
from fsseg.evaluation import EvalReport
from fsseg.model import BACKBONE, NetworkConfig, build_network, expand_classifier_outputs
from fsseg.pipeline import run_pipeline
from fsseg.train import StageConfig, TrainingError, label_lookup, state_checksum, train_stage1, train_stage2

SMALL = """
method = "{method}"
folds = [0]
shots = {shots}
seeds = [0]
[dataset]
source = "synthetic"
images = 48
size = [32, 32]
seed = 3
[stage1]
epochs = 2
[stage2]
epochs = 4
eval_every = 2
"""


def small_cfg(method="vanilla", shots=(1,)):
    return parse_config(SMALL.format(method=method, shots=list(shots)))


@pytest.fixture
def setup(small_synthetic):
    train, val, spec = small_synthetic
    fold = make_fold(spec, 0)
    net = build_network(NetworkConfig(len(fold.output_classes("base")), input_size=(32, 32)), 0)
    return train, val, spec, fold, net


def test_label_lookup_ignores_novel():
    lut = label_lookup((0, 3, 4), 4)
    assert lut[[0, 3, 4, 1, 2, 255]].tolist() == [0, 1, 2, 255, 255, 255]


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(regularizer="l2")
    with pytest.raises(ValueError):
        StageConfig(lr=0)


def test_stage1_deterministic(setup):
    train, _, spec, fold, _ = setup
    cfg = StageConfig("base", epochs=2)
    sums = []
    for _ in range(2):
        net = build_network(NetworkConfig(len(fold.output_classes("base")), input_size=(32, 32)), 0)
        net, rec = train_stage1(net, train, fold, cfg, spec.num_classes)
        sums.append((state_checksum(net), [e["loss"] for e in rec.epochs]))
    assert sums[0] == sums[1]


def test_stage1_components(setup):
    train, _, spec, fold, net = setup
    _, rec = train_stage1(net, train, fold, StageConfig("base", epochs=1), spec.num_classes)
    assert set(rec.epochs[0]["components"]) == {"main", "aux"}
    assert "triplet" not in rec.to_jsonl()
    e = rec.epochs[0]
    assert e["loss"] == pytest.approx(e["components"]["main"] + 0.4 * e["components"]["aux"], rel=1e-5)


def test_stage1_triplet_component(setup):
    train, _, spec, fold, net = setup
    _, rec = train_stage1(net, train, fold, StageConfig("base", epochs=1, regularizer="triplet"), spec.num_classes)
    c = rec.epochs[0]["components"]
    assert c["triplet"] > 0
    assert rec.epochs[0]["loss"] == pytest.approx(c["main"] + 0.4 * c["aux"] + 0.5 * c["triplet"], rel=1e-5)


def test_stage1_novel_pixels_have_no_effect(setup):
    """Relabelling novel pixels as any other novel class leaves Stage I unchanged."""
    train, _, spec, fold, _ = setup
    swapped = []
    for s in train:
        labels = s.labels.copy()
        labels[s.labels == 1], labels[s.labels == 2] = 2, 1
        swapped.append(type(s)(s.image, labels, s.id))
    cfg = StageConfig("base", epochs=1)
    a = train_stage1(build_network(NetworkConfig(7, input_size=(32, 32)), 0), train, fold, cfg, spec.num_classes)[0]
    b = train_stage1(build_network(NetworkConfig(7, input_size=(32, 32)), 0), swapped, fold, cfg, spec.num_classes)[0]
    assert state_checksum(a) == state_checksum(b)


@pytest.mark.slow
def test_stage1_loss_decreases(synthetic):
    train, _, spec = synthetic
    fold = make_fold(spec, 0)
    net = build_network(NetworkConfig(7), 0)
    _, rec = train_stage1(net, train[:50], fold, StageConfig("base", epochs=20), spec.num_classes)
    losses = np.array([e["loss"] for e in rec.epochs])
    moving = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(moving) < 0), moving


def test_non_finite_loss_aborts(setup):
    train, _, spec, fold, net = setup
    with pytest.raises(TrainingError) as info:
        train_stage1(net, train, fold, StageConfig("base", epochs=1, lr=1e30), spec.num_classes)
    assert "aborted" in info.value.record.provenance


def _stage2_net(net, fold):
    return expand_classifier_outputs(net, len(fold.output_classes("base")), len(fold.output_classes("finetune")), 0)


class TestStage2:
    def test_backbone_untouched_and_head_changes(self, setup):
        train, val, spec, fold, net = setup
        net = _stage2_net(net, fold)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        episode = sample_episode(train, fold, 2, 0, eval_set=val[:4])
        net, rec = train_stage2(net, episode, fold, StageConfig("finetune", epochs=3, freeze="freeze_backbone", eval_every=1), spec.num_classes)
        after = net.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before if k.startswith("backbone."))
        assert len(rec.evaluations) == 3
        assert "aux" not in rec.epochs[0]["components"]

    def test_freeze_all_but_last(self, setup):
        train, val, spec, fold, net = setup
        net = _stage2_net(net, fold)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        episode = sample_episode(train, fold, 1, 0, eval_set=val[:4])
        evaluate_fn = lambda n, e: EvalReport({}, 0.0, 0.0, float(e), 0)  # noqa: E731  keeps the last epoch
        net, _ = train_stage2(net, episode, fold, StageConfig("finetune", epochs=2, freeze="freeze_all_but_last", eval_every=1), spec.num_classes, evaluate_fn=evaluate_fn)
        after = net.state_dict()
        changed = {k for k in before if not torch.equal(before[k], after[k])}
        assert changed == {"final.weight", "final.bias"}

    def test_unfrozen_backbone_changes(self, setup):
        train, val, spec, fold, net = setup
        net = _stage2_net(net, fold)
        before = next(net.backbone.parameters()).clone()
        episode = sample_episode(train, fold, 1, 0)
        evaluate_fn = lambda n, e: EvalReport({}, 0.0, 0.0, float(e), 0)  # noqa: E731
        net, _ = train_stage2(net, episode, fold, StageConfig("finetune", epochs=2, freeze="none"), spec.num_classes, evaluate_fn=evaluate_fn)
        assert not torch.equal(before, next(net.backbone.parameters()))

    def test_selects_best_epoch(self, setup):
        train, _, spec, fold, net = setup
        net = _stage2_net(net, fold)
        episode = sample_episode(train, fold, 1, 0)
        scores = iter([0.3, 0.5, 0.4])
        snapshots = {}

        def evaluate_fn(n, epoch):
            snapshots[epoch] = state_checksum(n)
            return EvalReport({}, 0.0, 0.0, next(scores), 0)

        net, rec = train_stage2(net, episode, fold, StageConfig("finetune", epochs=3, eval_every=1, freeze="freeze_backbone"), spec.num_classes, evaluate_fn=evaluate_fn)
        assert rec.best["epoch"] == 2
        assert state_checksum(net) == snapshots[2]

    def test_ties_keep_earliest(self, setup):
        train, _, spec, fold, net = setup
        episode = sample_episode(train, fold, 1, 0)
        evaluate_fn = lambda n, e: EvalReport({}, 0.0, 0.0, 0.5, 0)  # noqa: E731
        _, rec = train_stage2(_stage2_net(net, fold), episode, fold, StageConfig("finetune", epochs=4, eval_every=2), spec.num_classes, evaluate_fn=evaluate_fn)
        assert rec.best["epoch"] == 2
        assert [e["epoch"] for e in rec.evaluations] == [2, 4]

    def test_empty_support(self, setup):
        train, _, spec, fold, net = setup
        episode = sample_episode(train, fold, 1, 0)
        episode.support = []
        with pytest.raises(ValueError, match="empty support"):
            train_stage2(_stage2_net(net, fold), episode, fold, StageConfig("finetune"), spec.num_classes)

    def test_rejects_aux_head(self, setup):
        train, _, spec, fold, _ = setup
        net = build_network(NetworkConfig(len(fold.output_classes("finetune")), input_size=(32, 32)), 0)
        with pytest.raises(ValueError, match="auxiliary"):
            train_stage2(net, sample_episode(train, fold, 1, 0), fold, StageConfig("finetune"), spec.num_classes)

    def test_cached_and_direct_evaluation_agree(self, setup):
        train, val, spec, fold, net = setup
        episode = sample_episode(train, fold, 1, 0, eval_set=val)
        cfg = StageConfig("finetune", epochs=2, eval_every=1, freeze="freeze_backbone")
        _, cached = train_stage2(_stage2_net(net, fold), episode, fold, cfg, spec.num_classes)
        from fsseg.evaluation import evaluate

        direct_fn = lambda n, e: evaluate(n, val, fold, fold.output_classes("finetune"), spec.num_classes)  # noqa: E731
        _, direct = train_stage2(_stage2_net(net, fold), episode, fold, cfg, spec.num_classes, evaluate_fn=direct_fn)
        a = [e["report"]["total_miou"] for e in cached.evaluations]
        b = [e["report"]["total_miou"] for e in direct.evaluations]
        assert a == pytest.approx(b, abs=1e-9)


class TestPipeline:
    def test_smoke_and_outputs(self, tmp_path):
        results = run_pipeline(small_cfg(shots=(1, 2)), tmp_path)
        assert [r.shots for r in results] == [1, 2]
        d = tmp_path / "vanilla" / "0" / "1" / "0"
        report = json.loads((d / "report.json").read_text())
        assert 0 <= report["total_miou"] <= 1
        events = [json.loads(l) for l in (d / "train_record.jsonl").read_text().splitlines()]
        assert {e["stage"] for e in events} == {"base", "finetune"}
        assert (d / "model.pt").is_file() and (tmp_path / "summary.csv").is_file()

    def test_stage1_cache_hit(self, tmp_path):
        first = run_pipeline(small_cfg(), tmp_path)
        second = run_pipeline(small_cfg(), tmp_path)
        assert first[0].stage1.provenance["cache"] == "miss"
        assert second[0].stage1.provenance["cache"] == "hit"
        assert first[0].report.total_miou == second[0].report.total_miou

    def test_stage1_shared_across_shots(self, tmp_path):
        sums = set()
        for k in (1, 5, 10):
            # separate output roots, so each run trains its own base network
            results = run_pipeline(small_cfg(shots=(k,)), tmp_path / str(k))
            assert results[0].stage1.provenance["cache"] == "miss"
            sums.add(results[0].stage2.provenance["stage1_checksum"])
        assert len(sums) == 1

    def test_base_network_not_mutated_between_shots(self, tmp_path):
        together = run_pipeline(small_cfg(shots=(1, 2)), tmp_path / "a")
        alone = run_pipeline(small_cfg(shots=(2,)), tmp_path / "b")
        assert together[1].report.total_miou == alone[0].report.total_miou

    def test_triplet_method_records_regularizer(self, tmp_path):
        results = run_pipeline(small_cfg("triplet_all"), tmp_path)
        assert "triplet" in results[0].stage1.epochs[0]["components"]
        assert "triplet" in results[0].stage2.epochs[0]["components"]

    def test_novel_only_mode(self, tmp_path):
        cfg = small_cfg()
        cfg.eval_mode = "novel_only"
        r = run_pipeline(cfg, tmp_path)[0].report
        assert set(r.per_class_iou) == {0, 1, 2}

    def test_confidence_output(self, tmp_path):
        cfg = small_cfg()
        cfg.confidence = {"enabled": True, "sample_cap": 500}
        r = run_pipeline(cfg, tmp_path)[0]
        lines = (r.run_dir / "confidence.csv").read_text().splitlines()
        assert lines[0].startswith("label,n,mean")
        assert r.report.confidence_stats.n <= 500


def test_backbone_group_name():
    assert BACKBONE == "backbone"

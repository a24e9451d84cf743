import dataclasses
import json
import os

import numpy as np
import pytest

from hierattn import model, reporting
from hierattn.config import TrainConfig
from hierattn.model import gradcheck_config, init_model
from hierattn.reporting import (ATTENTION_ROWS, LOSS_ROWS, EvalReport,
                                ablation_rows, ablation_to_csv, ablate,
                                confusion_matrix, dump_attention, evaluate,
                                export_embeddings)
from hierattn.synthdata import SynthConfig, generate_dataset
from hierattn.training import train


def _cfg(**kw):
    kw.setdefault("epochs", 2)
    return dataclasses.replace(gradcheck_config(), **kw).validate()


def _data(spc=2):
    scfg = SynthConfig(n_expressions=3, n_poses=2, image_size=16,
                       samples_per_cell=spc, seed=0)
    return generate_dataset(scfg)


def _trained(cfg=None):
    cfg = cfg or _cfg()
    train_s, test_s = _data()
    return train(train_s, cfg).params, cfg, test_s


def test_confusion_matrix_hand_counts():
    m = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    want = np.array([[1, 1, 0],
                     [0, 1, 0],
                     [1, 0, 2]])
    assert np.array_equal(m, want)
    assert m.sum() == 6


def test_eval_report_iou_helpers():
    rep = EvalReport(acc_e=1.0, acc_p=1.0, confusion_e=np.eye(2),
                     confusion_p=np.eye(2), per_pose_acc=np.ones(2),
                     pose_counts=np.ones(2, dtype=np.int64),
                     ious=np.array([0.1, 0.3, 0.5, 0.7]))
    assert rep.mean_iou == pytest.approx(0.4)
    assert rep.iou_fraction(0.3) == pytest.approx(0.75)
    assert rep.iou_fraction(0.71) == 0.0
    empty = EvalReport(0.0, 0.0, np.zeros((2, 2)), np.zeros((2, 2)),
                       np.zeros(2), np.zeros(2, dtype=np.int64), np.array([]))
    assert empty.mean_iou == 0.0 and empty.iou_fraction(0.1) == 0.0


def test_evaluate_report_shapes_and_ranges():
    params, cfg, test_s = _trained()
    rep = evaluate(params, cfg, test_s)
    n = len(test_s)
    assert rep.confusion_e.shape == (cfg.n_expressions, cfg.n_expressions)
    assert rep.confusion_p.shape == (cfg.n_poses, cfg.n_poses)
    assert rep.confusion_e.sum() == n and rep.confusion_p.sum() == n
    assert 0.0 <= rep.acc_e <= 1.0 and 0.0 <= rep.acc_p <= 1.0
    assert rep.pose_counts.sum() == n
    assert rep.ious.shape == (n,)
    assert np.all(rep.ious >= 0.0) and np.all(rep.ious <= 1.0)
    # accuracy ties out with the confusion diagonal
    assert rep.acc_e == pytest.approx(np.trace(rep.confusion_e) / n)
    assert rep.acc_p == pytest.approx(np.trace(rep.confusion_p) / n)


def test_evaluate_whole_set_default_matches_explicit_full_batch():
    params, cfg, test_s = _trained()
    a = evaluate(params, cfg, test_s)
    b = evaluate(params, cfg, test_s, batch_size=len(test_s))
    assert a.acc_e == b.acc_e and a.acc_p == b.acc_p
    assert np.array_equal(a.ious, b.ious)


def test_ablation_grid_is_thirteen_documented_rows():
    rows = ablation_rows()
    assert len(rows) == 13
    assert [g for g, _, _ in rows].count("attention") == len(ATTENTION_ROWS) == 8
    assert [g for g, _, _ in rows].count("loss") == len(LOSS_ROWS) == 5
    # every flag set must be a valid configuration on the default base
    base = TrainConfig()
    for _, name, flags in rows:
        dataclasses.replace(base, **flags).validate()


def test_ablation_expr_only_row_mapping():
    flags = dict(LOSS_ROWS)["expr_only"]
    assert flags == dict(use_pose_loss=False, use_attention_loss=False,
                         use_dynamic_weights=False, use_constraint_factor=False)
    gated = dict(ATTENTION_ROWS)["scales_123_gated"]
    assert gated["use_scale_attention"] is True
    solo = dict(ATTENTION_ROWS)["scale1_only"]
    assert solo == dict(use_S2=False, use_S3=False, use_scale_attention=False,
                        fuse_scales="1")


def test_ablate_runs_every_row_and_csv_documents_flags():
    train_s, test_s = _data()
    base = _cfg(epochs=1)
    results = ablate(train_s, test_s, base)
    assert [r["name"] for r in results] == [n for _, n, _ in ablation_rows()]
    for r in results:
        assert 0.0 <= r["acc_e"] <= 1.0 and 0.0 <= r["acc_p"] <= 1.0
    text = ablation_to_csv(results, base)
    lines = text.splitlines()
    assert lines[-14] == "group,name,acc_e,acc_p,mean_iou"
    # one mapping comment per row, naming its flags
    mapping = [ln for ln in lines if ln.startswith("#   ")]
    assert len(mapping) == 13
    assert any("scales_123_gated" in ln and "use_scale_attention=True" in ln
               for ln in mapping)


def test_dump_attention_file_set_full_cascade(tmp_path):
    params, cfg, test_s = _trained()
    out = tmp_path / "dump"
    written = dump_attention(params, cfg, test_s, 2, str(out))
    # per sample: three masks, two zoomed inputs, one region sidecar
    assert len(written) == 12
    for i in range(2):
        stem = os.path.join(str(out), f"{i:03d}")
        for suffix in ("_mask_scale1.pgm", "_input_scale2.pgm",
                       "_mask_scale2.pgm", "_mask_composed.pgm",
                       "_input_scale3.pgm", "_regions.json"):
            assert os.path.exists(stem + suffix)
    record = json.loads((out / "000_regions.json").read_text())
    for key in ("id", "expression", "pose", "pred_expression", "pred_pose",
                "gt_region", "seed_region", "proposal_region",
                "composed_region"):
        assert key in record


def test_dump_attention_composed_region_consistent(tmp_path):
    params, cfg, test_s = _trained()
    dump_attention(params, cfg, test_s, 1, str(tmp_path))
    record = json.loads((tmp_path / "000_regions.json").read_text())
    seed = record["seed_region"]
    local = record["proposal_region"]
    from hierattn.attention import Region
    composed = model.compose_region(Region(*seed), Region(*local))
    assert record["composed_region"] == pytest.approx(
        [composed.x, composed.y, composed.l])


def test_dump_attention_respects_scale_lattice(tmp_path):
    cfg = _cfg(use_S3=False, use_scale_attention=False)
    train_s, test_s = _data()
    params = train(train_s, cfg).params
    written = dump_attention(params, cfg, test_s, 1, str(tmp_path / "s12"))
    # no proposal: seed mask, scale-2 input, sidecar
    assert len(written) == 3

    cfg1 = _cfg(use_S2=False, use_S3=False, use_scale_attention=False,
                fuse_scales="1")
    params1 = train(train_s, cfg1).params
    written1 = dump_attention(params1, cfg1, test_s, 1, str(tmp_path / "s1"))
    assert len(written1) == 1 and written1[0].endswith("_regions.json")


def test_dump_attention_rejects_overlong_request(tmp_path):
    params, cfg, test_s = _trained()
    with pytest.raises(ValueError, match="dataset has"):
        dump_attention(params, cfg, test_s, len(test_s) + 1, str(tmp_path))


def test_export_embeddings_layout_and_determinism(tmp_path):
    params, cfg, test_s = _trained()
    out = tmp_path / "emb.csv"
    text = export_embeddings(params, cfg, test_s, str(out))
    assert out.read_text() == text
    lines = text.splitlines()
    width = cfg.backbone().out_channels * 3
    assert lines[0] == "id,y_e,y_p," + ",".join(f"f{j}" for j in range(width))
    assert len(lines) == len(test_s) + 1
    assert [ln.split(",")[0] for ln in lines[1:]] == [s.id for s in test_s]
    again = export_embeddings(params, cfg, test_s, None)
    assert again == text


def test_export_embeddings_values_round_trip_the_forward_pass():
    params, cfg, test_s = _trained()
    text = export_embeddings(params, cfg, test_s, None)
    row = text.splitlines()[1].split(",")
    from hierattn import autodiff as ad
    from hierattn.synthdata import stack_images
    fw = model.forward(model.as_constants(params),
                       ad.Tensor(stack_images(test_s)), cfg)
    assert [float(v) for v in row[3:]] == list(fw.f.data[0])

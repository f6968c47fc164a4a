import itertools
import json

import numpy as np
import pytest
import torch
from PIL import Image

from beal.config import load_config
from beal.evalkit import (
    CONFIG_TAGS,
    EvalReport,
    ablation_overrides,
    dice,
    emit_visuals,
    evaluate,
    postprocess,
    read_table,
    rescale_unit,
    run_ablation,
)
from beal.preprocess import AugmentPolicy, crop_roi
from beal.segnet import SegNetConfig, init_params
from beal.synthdata import FundusSample, load_dataset
from beal.trainer import TrainConfig, fit, load_segnet

# ---------------------------------------------------------------- dice


def test_dice_exhaustive_3x3():
    """All 2^9 x 2^9 mask pairs against plain set counting."""
    masks = [np.array(bits, dtype=np.uint8).reshape(3, 3) for bits in itertools.product((0, 1), repeat=9)]
    sets = [frozenset(np.flatnonzero(m).tolist()) for m in masks]
    worst = 0.0
    for a, sa in zip(masks, sets):
        for b, sb in zip(masks, sets):
            n = len(sa) + len(sb)
            want = 1.0 if n == 0 else 2 * len(sa & sb) / n
            worst = max(worst, abs(dice(a, b) - want))
    assert worst <= 1e-12


def test_dice_examples():
    a = np.zeros((3, 3), np.uint8)
    a[:2, :2] = 1
    b = np.zeros((3, 3), np.uint8)
    b[1:, 1:] = 1
    assert dice(a, b) == 0.25
    assert dice(a, a) == 1.0
    c = np.zeros((3, 3), np.uint8)
    c[2, 0] = 1
    assert dice(a, c) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_symmetric_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 2, (16, 16))
        b = rng.integers(0, 2, (16, 16))
        assert dice(a, b) == dice(b, a)


def test_dice_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        dice(np.full((2, 2), 0.5), np.ones((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        dice(np.ones((2, 2)), np.ones((3, 3)))


# ---------------------------------------------------------------- postprocess


def test_full_frame():
    od, oc = postprocess(np.full((2, 16, 16), 0.9))
    assert od.all() and oc.all()


def test_largest_component_kept():
    p = np.zeros((2, 40, 40))
    p[0, 2:12, 2:12] = 0.9  # 100 px
    p[0, 30:35, 30] = 0.9  # 5 px
    od, oc = postprocess(p)
    assert od.sum() == 100 and od[2:12, 2:12].all()
    assert oc.sum() == 0


def test_annulus_filled_to_disc_area():
    rr, cc = np.mgrid[:64, :64]
    d = np.hypot(rr - 31.5, cc - 31.5)
    p = np.zeros((2, 64, 64))
    p[0] = np.where((d <= 20) & (d >= 12), 0.9, 0.1)
    od, _ = postprocess(p)
    assert abs(od.sum() - np.pi * 20 ** 2) <= 2 * np.pi * 20  # one-pixel rim tolerance
    assert od[32, 32] == 1


def test_cup_clipped_to_disc():
    p = np.zeros((2, 32, 32))
    p[0, 8:24, 8:24] = 0.9
    p[1, 4:20, 4:20] = 0.9
    od, oc = postprocess(p)
    assert not np.any(oc & ~od)
    assert oc.sum() == 12 * 12


def test_postprocess_threshold_validated():
    with pytest.raises(ValueError):
        postprocess(np.zeros((2, 4, 4)), 1.0)


# ---------------------------------------------------------------- evaluate


@pytest.fixture(scope="module")
def overfit(small_dataset):
    src = load_dataset(small_dataset, "source")
    config = TrainConfig(crop_size=64, epochs=200, batch_size=4, use_bal=False, use_eal=False, lam=0.0,
                         augment=AugmentPolicy.disabled())
    state, _ = fit(src, None, config, SegNetConfig(crop_size=64))
    return state.seg, src


def test_overfit_sanity(overfit):
    seg, src = overfit
    assert evaluate(seg, src, 64).di_disc >= 0.9


def test_evaluate_deterministic_and_consistent(overfit):
    seg, src = overfit
    a = evaluate(seg, src, 64)
    b = evaluate(seg, src, 64)
    assert a == b
    assert abs(a.di_cup - np.mean([r["di_cup"] for r in a.per_sample])) <= 1e-12
    assert all(0 <= r["di_disc"] <= 1 for r in a.per_sample)


def test_evaluate_requires_labels(small_samples):
    seg = init_params(SegNetConfig(crop_size=64), 0)
    s = small_samples[0]
    bare = FundusSample(s.image, None, None, s.disc_center, s.domain, s.sample_id)
    with pytest.raises(ValueError, match="ground truth"):
        evaluate(seg, [bare], 64)


# ---------------------------------------------------------------- visuals


def test_emit_visuals(overfit, tmp_path):
    seg, src = overfit
    s = crop_roi(src[0], 64)
    with torch.no_grad():
        seg.eval()
        out = seg(torch.from_numpy(s.image.transpose(2, 0, 1).copy())[None])
    paths = emit_visuals(s, out.boundary[0].numpy(), out.mask_prob[0].numpy(), tmp_path)
    assert [p.name for p in paths] == [f"{s.sample_id}_{k}.png" for k in ("contours", "entropy", "boundary")]
    ent = np.asarray(Image.open(paths[1]))
    assert ent.min() == 0 and ent.max() == 255
    rgb = np.asarray(Image.open(paths[0]))
    assert ((rgb == (0, 255, 0)).all(-1)).any()


def test_constant_entropy_rescales_to_zero():
    assert np.all(rescale_unit(np.full((4, 4), 0.3)) == 0)
    r = rescale_unit(np.arange(16.0).reshape(4, 4))
    assert r.min() == 0 and r.max() == 1


def test_emit_visuals_unwritable(tmp_path, small_samples):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_visuals(small_samples[0], None, np.full((2, 96, 96), 0.5), blocker / "sub")


# ---------------------------------------------------------------- ablation


def test_ablation_overrides():
    assert ablation_overrides("no_da") == ablation_overrides("baseline")
    assert ablation_overrides("no_boundary")["use_boundary"] is False
    with pytest.raises(ValueError, match="unknown"):
        ablation_overrides("nope")


@pytest.fixture(scope="module")
def ablation(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    exp = load_config(None, {"data.path": str(small_dataset), "segnet.crop_size": 64, "train.crop_size": 64,
                             "train.epochs": 1, "output_dir": str(out)})
    return run_ablation(exp, out), out


def test_ablation_table(ablation):
    reports, out = ablation
    rows = read_table(out / "ablation.tsv")
    assert [r["config_tag"] for r in rows] == list(CONFIG_TAGS)
    assert len({r.config_tag for r in reports}) == 7
    assert all(0 <= float(r["di_cup"]) <= 1 for r in rows)
    assert len(json.loads((out / "ablation.json").read_text())) == 7
    by = {r.config_tag: r for r in reports}
    assert by["no_da"].di_cup == by["baseline"].di_cup


def test_bal_row_has_no_entropy_adversary(ablation):
    _, out = ablation
    lines = [json.loads(x) for x in (out / "bal" / "metrics.jsonl").read_text().splitlines()]
    assert lines and all(r["l_adv_e"] == 0 for r in lines if r["kind"] == "iter")
    assert all(r["l_adv_b"] > 0 for r in lines if r["kind"] == "iter")


def test_no_boundary_checkpoint_has_no_boundary_params(ablation):
    _, out = ablation
    seg = load_segnet(out / "no_boundary" / "checkpoints" / "last.pt")
    assert not any("boundary" in k for k in seg.state_dict())


def test_parallel_ablation_matches_sequential(ablation, small_dataset, tmp_path):
    reports, _ = ablation
    exp = load_config(None, {"data.path": str(small_dataset), "segnet.crop_size": 64, "train.crop_size": 64,
                             "train.epochs": 1, "output_dir": str(tmp_path)})
    par = run_ablation(exp, tmp_path, only=["bal", "no_da"], workers=2)
    by = {r.config_tag: r for r in reports}
    assert [r.config_tag for r in par] == ["bal", "no_da"]
    for r in par:
        assert isinstance(r, EvalReport)
        assert r.di_cup == by[r.config_tag].di_cup and r.di_disc == by[r.config_tag].di_disc

import numpy as np
import pytest
import torch

from conftest import same_params, snapshot
from crossmod.data import PatchSpec
from crossmod.losses import soft_dice_loss
from crossmod.nets import Checkpoint, build_seg_branch, forward, params_equal
from crossmod.train_cmff import (
    CmffConfig,
    cmff_batch,
    cmff_step,
    init_cmff,
    init_self_recon,
    load_cmff_model,
    predict,
    pretrain_self_recon,
    run_cmff,
    self_recon_step,
    sliding_window,
)
from crossmod.train_cmft import CmftConfig, run_cmft
from crossmod.training import read_log, to_batch
from crossmod.volume import LABEL_CODES, Modality, Volume, one_hot

PATCH = PatchSpec((16, 16, 16))


def _cfg(**kw):
    base = dict(patch=PATCH, base_filters=4, depth=2, steps=2, lr=1e-3, seed=5, init_mode="random")
    base.update(kw)
    return CmffConfig(**base)


@pytest.fixture(scope="module")
def sources(small_train, tmp_path_factory):
    out = tmp_path_factory.mktemp("cmft")
    cfg = CmftConfig(patch=PATCH, base_filters=4, depth=2, steps=2, lr=1e-3, seed=1)
    run_cmft(cfg, small_train, out)
    return out


# ----------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError, match="variant"):
        _cfg(variant="both")
    with pytest.raises(ValueError, match="init_mode"):
        _cfg(init_mode="pretrained")
    with pytest.raises(ValueError, match="tumor_fraction"):
        _cfg(tumor_fraction=1.5)
    with pytest.raises(ValueError, match="needs cmft_checkpoint"):
        init_cmff(_cfg(init_mode="cmft_transfer"))


# ----------------------------------------------------------------- init


def test_transfer_init_copies_trunks(sources):
    state = init_cmff(_cfg(init_mode="cmft_transfer", cmft_checkpoint=str(sources)))
    g_ab = Checkpoint.load(sources / "g_ab.npz").params
    g_ba = Checkpoint.load(sources / "g_ba.npz").params
    for lid in g_ab:
        if lid == "out_conv":
            assert state.params["seg_a"][lid]["weight"].shape[0] == 4
            continue
        for k in g_ab[lid]:
            assert torch.equal(state.params["seg_a"][lid][k].detach(), torch.as_tensor(g_ab[lid][k]))
            assert torch.equal(state.params["seg_b"][lid][k].detach(), torch.as_tensor(g_ba[lid][k]))


def test_random_init_differs_per_branch():
    state = init_cmff(_cfg())
    a = state.params["seg_a"]["enc0_conv1"]["weight"]
    b = state.params["seg_b"]["enc0_conv1"]["weight"]
    assert not torch.equal(a, b)
    assert set(state.params) == {"seg_a", "seg_b", "fusion"}
    assert set(init_cmff(_cfg(variant="average_fusion")).params) == {"seg_a", "seg_b"}


def test_self_recon_steps_zero_and_first_loss(small_train, tmp_path):
    cfg = CmftConfig(patch=PATCH, base_filters=4, depth=2, steps=0, lr=1e-3, seed=2)
    ck = pretrain_self_recon(cfg, small_train, tmp_path)
    fresh = init_self_recon(cfg)
    assert params_equal(ck["g_ab"].params, fresh.params["g_ab"])
    assert ck["g_ab"].meta["phase"] == "self_recon"

    from crossmod.train_cmft import cmft_batch

    a, b = cmft_batch(cfg, small_train, 0)
    with torch.no_grad():
        ra = forward(fresh.spec, fresh.params["g_ab"], to_batch(a))[0].numpy()
        rb = forward(fresh.spec, fresh.params["g_ba"], to_batch(b))[0].numpy()
    hand = np.abs(ra - a.data[None]).mean() + np.abs(rb - b.data[None]).mean()
    _, loss = self_recon_step(fresh, (a, b))
    assert loss == pytest.approx(float(hand), rel=1e-5)


def test_self_recon_learns_constant_volumes():
    cfg = CmftConfig(patch=PATCH, base_filters=4, depth=1, steps=1, lr=1e-2, seed=0)
    state = init_self_recon(cfg)
    a = Volume(np.full((2, 16, 16, 16), 0.5, np.float32))
    b = Volume(np.full((2, 16, 16, 16), -0.25, np.float32))
    losses = [self_recon_step(state, (a, b))[1] for _ in range(300)]
    assert losses[-1] < 1e-2 < losses[0]


def test_self_recon_transfer_mode(small_train, tmp_path):
    cfg = CmftConfig(patch=PATCH, base_filters=4, depth=2, steps=1, lr=1e-3, seed=2)
    pretrain_self_recon(cfg, small_train, tmp_path)
    state = init_cmff(_cfg(init_mode="self_recon_transfer", cmft_checkpoint=str(tmp_path)))
    src = Checkpoint.load(tmp_path / "g_ab.npz").params
    assert torch.equal(state.params["seg_a"]["enc0_conv1"]["weight"].detach(), torch.as_tensor(src["enc0_conv1"]["weight"]))


# ------------------------------------------------------------------ steps


def test_zero_lr_noop(small_train):
    state = init_cmff(_cfg())
    state.set_lr(0.0)
    before = snapshot(state.params)
    cmff_step(state, cmff_batch(state.cfg, small_train, 0))
    assert same_params(before, snapshot(state.params))


def test_report_additivity(small_train):
    cfg = _cfg()
    state = init_cmff(cfg)
    a, b, y = cmff_batch(cfg, small_train, 0)
    from crossmod.nets import fusion_input

    with torch.no_grad():
        pa, ta = forward(state.seg_spec, state.params["seg_a"], to_batch(a))
        pb, tb = forward(state.seg_spec, state.params["seg_b"], to_batch(b))
        pf, _ = forward(state.fusion_spec, state.params["fusion"], fusion_input(ta, tb), masks=(pa, pb))
    target = to_batch(one_hot(y))
    expect = [float(soft_dice_loss(p, target)) for p in (pa, pb, pf)]
    _, rep = cmff_step(state, (a, b, y))
    assert (rep.dice_a, rep.dice_b, rep.dice_f) == pytest.approx(expect, rel=1e-6)
    assert rep.total == pytest.approx(sum(expect), rel=1e-12)


@pytest.mark.parametrize("variant,kept", [
    ("branch_a_only", ("seg_b", "fusion")),
    ("branch_b_only", ("seg_a", "fusion")),
    ("average_fusion", ()),
])
def test_variant_isolation(small_train, variant, kept):
    cfg = _cfg(variant=variant)
    state = init_cmff(cfg)
    before = snapshot(state.params)
    for s in range(2):
        _, rep = cmff_step(state, cmff_batch(cfg, small_train, s))
    after = snapshot(state.params)
    for name in state.params:
        frozen = same_params(before[name], after[name])
        assert frozen == (name in kept), name
    if variant == "branch_a_only":
        assert rep.dice_b == rep.dice_f == 0.0 and rep.total == rep.dice_a


def test_no_mask_guidance_same_parameter_set():
    full = init_cmff(_cfg())
    plain = init_cmff(_cfg(variant="no_mask_guidance"))
    assert full.fusion_spec.param_shapes() == plain.fusion_spec.param_shapes()
    assert [l.kind for l in full.fusion_spec.layers if l.kind == "mask_guidance"] == ["mask_guidance"]
    assert not any(l.kind == "mask_guidance" for l in plain.fusion_spec.layers)
    assert params_equal(full.params["fusion"], plain.params["fusion"])


def test_mixed_patch_sampling(small_train):
    cfg = _cfg(tumor_fraction=0.0)
    # brain_overlap windows still come with labels
    a, b, y = cmff_batch(cfg, small_train, 0)
    assert y.shape == (16, 16, 16)


# -------------------------------------------------------------- prediction


def test_sliding_window_single_window_equals_direct():
    state = init_cmff(_cfg())
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.normal(size=(1, 4, 16, 16, 16)).astype(np.float32))
    fn = lambda w: {"a": forward(state.seg_spec, state.params["seg_a"], w[:, :2])[0]}
    with torch.no_grad():
        direct = fn(x)["a"]
        tiled = sliding_window(fn, x, (16, 16, 16), 0.5)["a"]
    assert torch.equal(direct, tiled)


def test_sliding_window_pointwise_is_exact():
    # a voxel-wise function must be reproduced exactly by overlap averaging
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.normal(size=(1, 2, 20, 17, 23)))
    fn = lambda w: {"y": torch.tanh(w) * 3}
    out = sliding_window(fn, x, (8, 8, 8), 0.5)["y"]
    torch.testing.assert_close(out, torch.tanh(x) * 3, rtol=1e-12, atol=1e-12)
    small = sliding_window(fn, x[..., :5], (8, 8, 8), 0.25)["y"]
    torch.testing.assert_close(small, torch.tanh(x[..., :5]) * 3, rtol=1e-12, atol=1e-12)


def test_sliding_window_counts_cover_volume():
    x = torch.zeros(1, 1, 24, 16, 40)
    out = sliding_window(lambda w: {"c": torch.ones_like(w)}, x, (16, 16, 16), 0.5)["c"]
    assert torch.equal(out, torch.ones_like(x))


def test_predict_outputs(small_train):
    state = init_cmff(_cfg())
    subj = small_train[0]
    out = predict(state, subj)
    assert out.final_labels.shape == subj.label.shape
    assert set(np.unique(out.final_labels.labels)) <= set(LABEL_CODES)
    for v in (out.probs_a, out.probs_b, out.probs_f):
        np.testing.assert_allclose(v.data.sum(axis=0), 1.0, atol=1e-5)


def test_brain_mask_sets_outside_to_background(small_train):
    state = init_cmff(_cfg())
    subj = small_train[0]
    outside = np.all([v.data[0] == 0 for v in subj.volumes.values()], axis=0)
    assert outside.any() and not outside.all()
    masked = predict(state, subj)
    raw = predict(state, subj, brain_mask=False)
    for m, r in zip((masked.probs_a, masked.probs_f), (raw.probs_a, raw.probs_f)):
        assert np.all(m.data[0][outside] == 1) and np.all(m.data[1:][:, outside] == 0)
        np.testing.assert_array_equal(m.data[:, ~outside], r.data[:, ~outside])
    assert np.all(masked.final_labels.labels[outside] == 0)


def test_average_fusion_is_mean(small_train):
    state = init_cmff(_cfg(variant="average_fusion"))
    out = predict(state, small_train[0])
    np.testing.assert_allclose(out.probs_f.data, 0.5 * (out.probs_a.data + out.probs_b.data), atol=1e-6)


def test_branch_only_uses_own_head(small_train):
    state = init_cmff(_cfg(variant="branch_b_only"))
    out = predict(state, small_train[0])
    from crossmod.volume import probs_to_labels

    np.testing.assert_array_equal(out.final_labels.labels, probs_to_labels(out.probs_b).labels)


# -------------------------------------------------------------- run / resume


def test_run_log_and_reload(small_train, tmp_path):
    cfg = _cfg(steps=3, checkpoint_every=1)
    ck = run_cmff(cfg, small_train, tmp_path)
    assert len(read_log(tmp_path / "cmff_log.jsonl")) == 3
    model = load_cmff_model(tmp_path)
    for name in ("seg_a", "seg_b", "fusion"):
        assert params_equal(model.params[name], ck[name].params)
        assert Checkpoint.load(tmp_path / f"{name}.npz").meta["phase"] == "cmff"


def test_resume_matches_uninterrupted(small_train, tmp_path):
    full = run_cmff(_cfg(steps=4), small_train, tmp_path / "full")
    run_cmff(_cfg(steps=2, checkpoint_every=2), small_train, tmp_path / "part")
    resumed = run_cmff(_cfg(steps=4), small_train, tmp_path / "part",
                       resume_from=tmp_path / "part" / "cmff_state_000002.npz")
    for name in full:
        assert params_equal(full[name].params, resumed[name].params)
    assert read_log(tmp_path / "full" / "cmff_log.jsonl") == read_log(tmp_path / "part" / "cmff_log.jsonl")


def test_seg_branch_output_is_simplex():
    spec = build_seg_branch(2, 4, 2)
    from crossmod.nets import init_params

    p = init_params(spec, 0)
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 2, 16, 16, 16)).astype(np.float32))
    with torch.no_grad():
        out, _ = forward(spec, p, x)
    torch.testing.assert_close(out.sum(1), torch.ones(1, 16, 16, 16))

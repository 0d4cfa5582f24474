import json

import numpy as np
import pytest

from maskbf import autodiff as ad
from maskbf import beamformers as bf
from maskbf import optimize as op
from maskbf import signal as sig
from maskbf.errors import MaskBFError
from maskbf.masks import MaskBuffer, mask_node
from maskbf.scaling import scale_mdp

STFT = sig.StftConfig(256, 64)


def _scene(seed=0, g=1.0, duration=0.5):
    target, noise = sig.synth_scene(seed, duration=duration)
    return sig.mix_scenario(target, noise, g, 0, STFT, name=f"s{seed}")


@pytest.fixture(scope="module")
def scene():
    return _scene()


def test_defaults_per_variation():
    assert op.default_iterations("ISEV-OS") == 1000
    assert op.default_iterations("INV-NS") == 500
    assert not op.default_bn("MinGEV-NO") and not op.default_bn("MaxGEV-OS")
    assert op.default_bn("MinGEV-NS") and op.default_bn("INV-OS")
    cfg = op.OptimizationConfig().for_variation("ISEV-OS")
    assert cfg.iterations == 1000 and cfg.bn is True


def test_config_validation_and_dict():
    with pytest.raises(ValueError):
        op.OptimizationConfig(iterations=0)
    with pytest.raises(ValueError):
        op.OptimizationConfig(step_size=-1.0)
    with pytest.raises(ValueError):
        op.OptimizationConfig(optimizer="lbfgs")
    cfg = op.OptimizationConfig.from_dict({"optimizer-kind": "plain-gradient",
                                           "step-size": 0.1, "bn-enabled": False,
                                           "iterations": 7})
    assert cfg.optimizer == "sgd" and cfg.step_size == 0.1 and cfg.bn is False
    assert op.OptimizationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        op.OptimizationConfig.from_dict({"momentum": 0.9})
    with pytest.raises(ValueError):
        op.OptimizationConfig(anneal_fraction=1.0)


def test_step_schedule_anneals_final_fraction():
    adam = op._Adam(op.OptimizationConfig(iterations=10, step_size=0.3, anneal_fraction=0.2))
    rates = []
    for _ in range(10):
        adam.t += 1
        rates.append(adam.rate())
    assert rates[:8] == [0.3] * 8
    assert rates[8:] == pytest.approx([0.2, 0.1])
    flat = op._Adam(op.OptimizationConfig(iterations=10, anneal_fraction=0.0))
    flat.t = 10
    assert flat.rate() == op.DEFAULT_STEP


def test_scaling_and_joint_budgets(scene, monkeypatch):
    _, bank = op.ideal_mmse_sdr(scene)
    rec = op.optimize_scaling_mask(scene, bank, "L1-MN")
    assert rec.iterations == op.SCALING_ITERATIONS == len(rec.loss_curve)
    assert rec.loss_curve[-1] <= rec.loss_curve[0]
    seen = []
    monkeypatch.setattr(op, "_run", lambda problem, buffers, forward, config, *rest:
                        seen.append(config.iterations))
    op.optimize_joint(scene, "INV-NS", "L1-MN")
    op.optimize_joint(scene, "ISEV-OS", "L1-MN", op.OptimizationConfig(iterations=30))
    assert seen == [op.SCALING_ITERATIONS, 30]


@pytest.fixture(scope="module")
def noiseless():
    return _scene(2, g=0.0)


@pytest.mark.parametrize("spec", ["INV-NS", "INV-OS", "INV-NO"])
def test_noiseless_scene_fast_for_inv(noiseless, spec):
    rec = op.optimize_filter_masks(noiseless, spec, "ideal", op.OptimizationConfig(iterations=50))
    assert rec.sdr_db >= 60.0


@pytest.mark.parametrize("spec", [v.name for v in bf.ALL_VARIATIONS])
def test_noiseless_scene_is_recovered(noiseless, spec):
    rec = op.optimize_filter_masks(noiseless, spec, "ideal", op.OptimizationConfig())
    assert rec.sdr_db >= 60.0
    assert not rec.aborted


def test_curve_length_and_last_entry(scene):
    cfg = op.OptimizationConfig(iterations=12)
    rec = op.optimize_filter_masks(scene, "INV-NS", "ideal", cfg)
    assert len(rec.loss_curve) == 12
    problem = op._Problem(scene)
    z = rec.filters.apply(problem.x)
    loss = float(problem.loss(z).value)
    assert rec.loss_curve[-1] == pytest.approx(loss, rel=1e-9)
    assert rec.sdr_db == pytest.approx(problem.sdr(z), abs=1e-9)


def test_determinism(scene):
    cfg = op.OptimizationConfig(iterations=10, seed=3)
    a = op.optimize_joint(scene, "MinGEV-NS", "L1-MN", cfg)
    b = op.optimize_joint(scene, "MinGEV-NS", "L1-MN", cfg)
    assert a.to_json() == b.to_json()
    assert np.array_equal(a.filters.w, b.filters.w)
    for role in a.masks:
        assert np.array_equal(a.masks[role]["values"], b.masks[role]["values"])


@pytest.mark.parametrize("spec", ["INV-OS", "MinGEV-NO", "ISEV-OS", "MaxGEV-NO"])
def test_unused_buffer_gets_zero_gradient(scene, spec):
    problem = op._Problem(scene).crop(slice(10, 14), slice(0, 40))
    rng = np.random.default_rng(0)
    params = {r: ad.parameter(rng.standard_normal(problem.shape)) for r in ("s", "n")}
    masks = {r: ad.sigmoid(p) for r, p in params.items()}
    loss = op.pipeline_loss(problem, bf.VariationSpec.parse(spec), masks,
                            op.ScalingSpec.parse("ideal"))[0]
    grads = ad.backward(loss)
    unused = ({"s", "n"} - set(bf.VariationSpec.parse(spec).masks)).pop()
    g = grads.get(params[unused], np.zeros(problem.shape))
    assert np.all(g == 0)
    used = bf.VariationSpec.parse(spec).masks[0]
    assert np.any(grads[params[used]] != 0)


def test_filter_mask_rejects_optimized_scaling(scene):
    with pytest.raises(MaskBFError):
        op.optimize_filter_masks(scene, "INV-NS", "mask-based")


def test_scaling_mask_starts_at_mdp(scene):
    _, bank = op.ideal_mmse_sdr(scene)
    problem = op._Problem(scene)
    y = bf.beamform(bank.w, problem.x)
    mdp = op.fixed_filter_sdr(scene, bank.w, scale_mdp(y, problem.x_k))
    for constraint in ("L1-MN", "L2-MN", "non-negative"):
        rec = op.optimize_scaling_mask(scene, bank, constraint,
                                       op.OptimizationConfig(iterations=3))
        assert rec.initial_sdr_db == pytest.approx(mdp, abs=1e-9)
        assert rec.kind == "scaling" and set(rec.masks) == {"p"}


def test_scaling_buffer_initial_masks():
    ones = np.ones((3, 5))
    for bn in (False, True):
        buf = op._scaling_buffer("L1-MN", bn, (3, 5))
        np.testing.assert_allclose(mask_node(buf).value, ones)
    np.testing.assert_allclose(mask_node(op._scaling_buffer("ratio", None, (3, 5))).value, 0.5)


def test_loss_curve_settles(scene):
    rec = op.optimize_filter_masks(scene, "INV-NS", "ideal",
                                   op.OptimizationConfig(iterations=200))
    curve = np.convolve(rec.loss_curve, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(curve[50:]) <= 1e-6)
    assert rec.loss_curve[-1] < rec.loss_curve[0]


def test_loss_floor_skips_updates(scene):
    rec = op.optimize_filter_masks(scene, "INV-NS", "ideal",
                                   op.OptimizationConfig(iterations=5, loss_floor=10.0))
    assert len(set(rec.loss_curve)) == 1


def test_plain_gradient_option(scene):
    rec = op.optimize_filter_masks(scene, "INV-OS", "mdp",
                                   op.OptimizationConfig(iterations=5, optimizer="sgd"))
    assert len(rec.loss_curve) == 5 and rec.scaling == "mdp"


def test_abort_restores_previous_state(scene, monkeypatch):
    real = op.pipeline_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 5:
            raise MaskBFError("synthetic failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(op, "pipeline_loss", flaky)
    rec = op.optimize_filter_masks(scene, "INV-NS", "ideal",
                                   op.OptimizationConfig(iterations=10))
    assert rec.aborted
    assert len(rec.loss_curve) == 3
    assert any("aborted" in w for w in rec.warnings)
    monkeypatch.setattr(op, "pipeline_loss", real)
    problem = op._Problem(scene)
    loss = float(problem.loss(rec.filters.apply(problem.x)).value)
    assert loss == pytest.approx(rec.loss_curve[-1], rel=1e-9)


def test_sdr_curve(scene):
    rec = op.optimize_filter_masks(scene, "INV-NS", "ideal",
                                   op.OptimizationConfig(iterations=6, sdr_every=3))
    assert [i for i, _ in rec.sdr_curve] == [0, 3, 6]
    assert rec.sdr_curve[-1][1] == pytest.approx(rec.sdr_db)


def test_record_save(tmp_path, scene):
    rec = op.optimize_joint(scene, "INV-NS", "L1-MN", op.OptimizationConfig(iterations=3))
    path = rec.save(tmp_path, "cell")
    data = json.loads(path.read_text())
    for key in ("variation", "constraint", "iterations", "loss_curve", "sdr_db", "warnings"):
        assert key in data
    assert data["variation"] == "INV-NS" and data["constraint"] == "L1-MN"
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted(["cell.json", "cell.filter.bin", "cell.filter.json",
                            "cell.mask_s.bin", "cell.mask_s.json", "cell.mask_n.bin",
                            "cell.mask_n.json", "cell.mask_p.bin", "cell.mask_p.json"])


def test_gradient_check_crop_size(scene):
    rep = op.pipeline_gradient_check(scene, "INV-NS", "mask-based",
                                     frames=slice(0, 20), freqs=slice(10, 13))
    assert rep.parameter_count == 3 * 20 * 3 + 2 * 2 * 3
    assert rep.max_relative_error <= 1e-4

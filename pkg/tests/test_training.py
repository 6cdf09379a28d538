import dataclasses
import warnings

import numpy as np
import pytest

from lfbm import data as D
from lfbm import training as TR
from lfbm.core import AdamState, Tensor
from lfbm.core import tensor as T
from lfbm.core.gradcheck import finite_diff_grad, relative_error
from lfbm.errors import ConfigError, ContractError, DataError, NumericFailure
from lfbm.evaluation import mmd_permutation_null
from lfbm.flow import FlowModel, flow_sample
from lfbm.inference import LangevinConfig
from lfbm.model import Generator, decode

MIX2 = {"kind": "gaussian_mixture", "means": [[-2.0, 0.0], [2.0, 0.0]], "cov": 0.09}


def toy_cfg(**kw):
    base = dict(iterations=6, batch_size=20, latent_dim=2, flow_depth=2, flow_hidden=8, decoder_hidden=(8,),
                sigma=0.3, lr_prior=1e-3, lr_generator=1e-3, decay=0.99, langevin=LangevinConfig(5, 0.05),
                log_every=3, diag_groups=4)
    base.update(kw)
    return TR.TrainConfig(**base)


def assert_grads_match(obj, groups, tol=1e-4):
    """Autodiff gradient of scalar ``obj()`` against central differences, per ParamGroup."""
    for pg in groups:
        names, tensors = pg.names(), [pg[n] for n in pg.names()]
        fd = finite_diff_grad(lambda _: obj().data, pg)
        for n, g in zip(names, T.grad(obj(), tensors)):
            assert relative_error(g, fd[n]) < tol, n


def all_params(*models):
    return [t.data.copy() for m in models for t in m.params]


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_cfg(mode="other")
    with pytest.raises(ConfigError):
        toy_cfg(lr_inference=0.1)
    with pytest.raises(ConfigError):
        toy_cfg(mode="vae")
    with pytest.raises(ConfigError):
        toy_cfg(mode="recovery")
    with pytest.raises(ConfigError):
        toy_cfg(batch_size=0)
    toy_cfg(mode="vae", lr_inference=1e-3, inner_update_steps=2)


def test_zero_learning_rates_leave_parameters_unchanged():
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    cfg = toy_cfg(lr_prior=0.0, lr_generator=0.0)
    p0, g0 = TR.build_models(cfg, 2)
    prior, gen, log = TR.train_mcmc(ds, cfg)
    for a, b in zip(all_params(p0, g0), all_params(prior, gen)):
        assert a.tobytes() == b.tobytes()
    vcfg = toy_cfg(mode="vae", lr_prior=0.0, lr_generator=0.0, lr_inference=0.0, inner_update_steps=2,
                   encoder_hidden=(8,))
    net0 = TR.InferenceNet(2, 2, (8,), 2, 64, rng=[vcfg.seed, 0, 1])
    prior, gen, net, _ = TR.train_vae(ds, vcfg)
    for a, b in zip(all_params(p0, g0, net0), all_params(prior, gen, net)):
        assert a.tobytes() == b.tobytes()


def test_prior_gradient_matches_finite_differences():
    prior = FlowModel(3, 2, 6, rng=0).randomize(np.random.default_rng(1), 0.5)
    z = np.random.default_rng(2).standard_normal((7, 3))
    assert_grads_match(lambda: T.mean(prior.log_prob_t(Tensor(z))), [prior.params])


def test_update_prior_ascends_and_skips_init_at_zero_rate():
    prior = FlowModel(2, 1, 8, rng=0)
    prior.mark_initialized()
    z = 2.0 * np.random.default_rng(3).standard_normal((500, 2))
    TR.update_prior(prior, z, AdamState(lr=0.01))
    # variance 4 data pulls every actnorm log-scale up
    assert np.all(prior.params["step0.actnorm.log_scale"].data > 0)
    fresh = FlowModel(2, 1, 8, rng=0)
    TR.update_prior(fresh, z, AdamState(lr=0.0))
    assert not fresh.initialized
    TR.update_prior(fresh, z, AdamState(lr=1e-3))
    assert fresh.initialized


def test_generator_update_properties():
    gen = Generator(2, 3, (5,), sigma=0.5, rng=0)
    z = np.random.default_rng(4).standard_normal((6, 2))
    before = all_params(gen)
    TR.update_generator(gen, decode(gen, z), z, AdamState(lr=0.1))
    for a, b in zip(before, all_params(gen)):
        assert np.max(np.abs(a - b)) < 1e-8
    x = np.random.default_rng(5).uniform(-1, 1, (6, 3))
    assert_grads_match(lambda: T.mean(gen.log_likelihood_t(Tensor(x), Tensor(z))), [gen.params])


def test_affine_generator_step_moves_toward_target():
    gen = Generator(2, 3, (), sigma=1.0, out_act="linear", rng=0)
    z = np.array([[0.5, -1.0]])
    x = np.array([[1.0, 2.0, -1.0]])
    r0 = np.linalg.norm(x - decode(gen, z))
    TR.update_generator(gen, x, z, AdamState(lr=0.01))
    assert np.linalg.norm(x - decode(gen, z)) < r0


def test_prior_gradient_ignores_generator_parameters():
    prior = FlowModel(2, 2, 8, rng=0).randomize(np.random.default_rng(1), 0.5)
    gen = Generator(2, 2, (4,), rng=0)
    z = np.random.default_rng(2).standard_normal((20, 2))
    res1 = TR.estimating_residuals(prior, gen, np.zeros((20, 2)), z)
    for p in gen.params:
        p.data = p.data + 1.0
    res2 = TR.estimating_residuals(prior, gen, np.zeros((20, 2)), z)
    assert res1[:2] == res2[:2]


def test_diagnostics_on_prior_samples():
    prior = FlowModel(2, 2, 8, rng=0).randomize(np.random.default_rng(6), 0.5)
    gen = Generator(2, 3, (4,), rng=1)
    z = flow_sample(prior, 2000, 7)
    x = decode(gen, z)
    rec = TR.diagnostics_step(prior, gen, x, z, groups=20, rng=8)
    assert rec.prior_residual < 3 * rec.prior_residual_se
    assert rec.generator_residual == 0.0
    # one draw can land in the tail; over 20 draws at most 4 may exceed the null 95th percentile
    null = mmd_permutation_null(flow_sample(prior, 500, 8), flow_sample(prior, 500, 9), n_perm=100, seed=1)
    draws = [TR.diagnostics_step(prior, gen, x[:500], flow_sample(prior, 500, 100 + s), rng=s).mmd
             for s in range(20)]
    assert np.sum(np.array(draws) > np.quantile(null, 0.95)) <= 4
    same = TR.diagnostics_step(prior, gen, x[:50], z[:50], rng=8)
    assert same.mmd >= 0


def test_seed_determinism_and_log():
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    cfg = toy_cfg()
    p1, g1, log1 = TR.train_mcmc(ds, cfg)
    p2, g2, log2 = TR.train_mcmc(ds, cfg)
    np.testing.assert_array_equal(np.array(log1.deterministic_rows()), np.array(log2.deterministic_rows()))
    for a, b in zip(all_params(p1, g1), all_params(p2, g2)):
        assert a.tobytes() == b.tobytes()
    assert [r[0] for r in log1.deterministic_rows()] == [0, 3, 5]
    p3, _, _ = TR.train_mcmc(ds, dataclasses.replace(cfg, seed=1))
    assert any(a.tobytes() != b.tobytes() for a, b in zip(all_params(p1), all_params(p3)))


def test_runlog_csv(tmp_path):
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    _, _, log = TR.train_mcmc(ds, toy_cfg())
    path = tmp_path / "log.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(TR.LOG_FIELDS)
    assert len(lines) == 1 + len(log)


def test_all_ones_recovery_matches_mcmc():
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    cfg = toy_cfg()
    p1, g1, _ = TR.train_mcmc(ds, cfg)
    rcfg = dataclasses.replace(cfg, mode="recovery", mask_spec=D.MaskSpec("salt_pepper", fraction=0.5))
    p2, g2, recovered, _ = TR.train_recovery(ds, np.ones_like(ds.examples), rcfg, truth=ds)
    for a, b in zip(all_params(p1, g1), all_params(p2, g2)):
        assert a.tobytes() == b.tobytes()
    assert recovered.shape == ds.examples.shape


def test_recovery_rejects_fully_occluded_example():
    ds = D.gen_synthetic(MIX2, 10, seed=0)
    masks = np.ones((10, 2))
    masks[4] = 0
    rcfg = toy_cfg(mode="recovery", mask_spec=D.MaskSpec("salt_pepper", fraction=0.5))
    with pytest.raises(DataError, match="example 4"):
        TR.train_recovery(ds, masks, rcfg)


def test_vae_elbo_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    prior = FlowModel(2, 1, 6, rng=0).randomize(rng, 0.4)
    gen = Generator(2, 3, (5,), sigma=0.5, rng=1)
    net = TR.InferenceNet(3, 2, (6,), 2, 8, rng=2)
    net.flow.randomize(rng, 0.3)
    x = rng.uniform(-1, 1, (4, 3))
    eps = rng.standard_normal((4, 2))
    obj = lambda: T.mean(TR.elbo_t(prior, gen, net, x, eps)[0])
    assert_grads_match(obj, [net.params, prior.params, gen.params])


def test_vae_training_runs_and_logs():
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    cfg = toy_cfg(mode="vae", lr_inference=1e-3, inner_update_steps=3, encoder_hidden=(8,))
    prior, gen, net, log = TR.train_vae(ds, cfg)
    assert len(log) == 3 and prior.initialized


def test_run_checkpoint_roundtrip_and_context_checks(tmp_path):
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    cfg = toy_cfg()
    prior, gen, _ = TR.train_mcmc(ds, cfg)
    opt = AdamState(lr=0.1)
    opt.m["w"], opt.v["w"], opt.t = np.ones(2), np.full(2, 0.5), 3
    path = tmp_path / "run.lfbm"
    TR.save_run(path, cfg, prior, gen, opts={"prior": opt})
    run = TR.load_run(path, expect=cfg)
    for a, b in zip(all_params(prior, gen), all_params(run.prior, run.gen)):
        assert a.tobytes() == b.tobytes()
    assert run.prior.initialized and run.opts["prior"].t == 3
    np.testing.assert_array_equal(run.opts["prior"].v["w"], [0.5, 0.5])
    with pytest.raises(DataError, match="latent_dim=2"):
        TR.load_run(path, expect=dataclasses.replace(cfg, latent_dim=100))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        TR.load_run(path, expect=dataclasses.replace(cfg, lr_prior=0.5))
    assert any("config hash" in str(x.message) for x in w)
    assert TR.config_from_meta(run.meta).hash == cfg.hash


def test_numeric_failure_checkpoints_last_good_state(tmp_path):
    ds = D.gen_synthetic(MIX2, 100, seed=0)
    # a linear decoder with tiny sigma makes the explicit Langevin update blow up geometrically
    cfg = toy_cfg(sigma=1e-3, out_act="linear", langevin=LangevinConfig(50, 1.0), checkpoint_dir=str(tmp_path))
    with pytest.raises(NumericFailure) as info:
        TR.train_mcmc(ds, cfg)
    assert info.value.iteration == 0
    run = TR.load_run(info.value.checkpoint)
    p0, g0 = TR.build_models(cfg, 2)
    for a, b in zip(all_params(p0, g0), all_params(run.prior, run.gen)):
        assert a.tobytes() == b.tobytes()


def test_periodic_checkpoint(tmp_path):
    ds = D.gen_synthetic(MIX2, 40, seed=0)
    cfg = toy_cfg(iterations=4, checkpoint_dir=str(tmp_path), checkpoint_every_epochs=1)
    TR.train_mcmc(ds, cfg)
    run = TR.load_run(tmp_path / "last.lfbm")
    assert run.meta["progress"]["epoch"] == 2
    assert run.opts["prior"].epochs == 2

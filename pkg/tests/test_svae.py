import numpy as np
import pytest

from src.autodiff.tape import value_and_grad
from src.config.settings import ModelConfig
from src.inference import expfam
from src.learning import svae as svae_module
from src.learning.gradients import compute_gradient, global_gradient
from src.learning.optimizer import Adam, NaturalGradientAscent
from src.learning.svae import SVAE, SequenceProblem, TrainState, range_mask, train_step
from src.models.chain import BPMethod
from src.models.results import GradMode, GradModeKind
from src.tools import rng as rng_streams
from src.tools.invariants import check_natgrad, conjugate_model, fd_gradient
from src.utils.exceptions import ConfigError, ShapeMismatch


@pytest.fixture
def x(gen):
    return gen.standard_normal((6, 3))


def _noise(model, T, seed=3):
    return model.draw_noise(rng_streams.stream(seed, "noise"), T)


def test_parameter_layout(tiny_model, tiny_params):
    assert set(tiny_model.global_names) == {"glob.init", "glob.dyn.0", "glob.dyn.1", "glob.pi0",
                                            "glob.pi.0", "glob.pi.1"}
    assert tiny_params["enc.0.W"].shape == (3, 4)
    assert tiny_params["enc.1.W"].shape == (4, 4)
    assert tiny_params["dec.log_var"].shape == (3,)


def test_lds_has_no_discrete_factors():
    model = SVAE(ModelConfig(kind="lds", obs_dim=2, latent_dim=2, hidden=[3]))
    assert model.K == 1
    assert not any(name.startswith("glob.pi") for name in model.global_names)


def test_encode_gives_positive_precisions(tiny_model, tiny_params, x):
    rec = tiny_model.encode(tiny_params, x)
    assert rec.r.shape == (6, 2)
    assert np.all(rec.R_diag > 0)


def test_encode_checks_observation_width(tiny_model, tiny_params):
    with pytest.raises(ShapeMismatch):
        tiny_model.encode(tiny_params, np.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        tiny_model.encode(tiny_params, np.zeros((4, 3)), mask=np.zeros(3, dtype=bool))


def test_masked_steps_get_zero_potentials(tiny_model, tiny_params, x):
    mask = np.array([False, True, True, False, False, False])
    rec = tiny_model.encode(tiny_params, x, mask)
    np.testing.assert_array_equal(rec.r[mask], 0.0)
    np.testing.assert_array_equal(rec.R_diag[mask], 0.0)


def test_masked_observations_do_not_affect_the_posterior(tiny_model, tiny_params, x):
    mask = np.array([False, False, True, True, False, False])
    changed = x.copy()
    changed[mask] = 100.0
    a = tiny_model.infer(tiny_params, x, mask)
    b = tiny_model.infer(tiny_params, changed, mask)
    np.testing.assert_array_equal(a.mu_z.Ez, b.mu_z.Ez)


def test_gamma_likelihood_head(gen):
    model = SVAE(ModelConfig(kind="lds", obs_dim=3, latent_dim=2, hidden=[4], likelihood="gamma"))
    params = model.init_params(gen)
    assert "dec.log_var" not in params
    head = model.decode(params, np.zeros((5, 2)))
    assert len(head) == 1
    assert np.all(model.decode_mean(params, np.zeros((5, 2))) > 0)


def test_loss_breakdown_relations(tiny_model, tiny_params, x):
    parts = tiny_model.loss(tiny_params, x, _noise(tiny_model, 6))
    assert parts.elbo == pytest.approx(parts.reconstruction - parts.prior_kl - parts.local_kl)
    assert parts.prior_kl >= 0.0


def test_sequence_problem_rejects_unknown_objective(tiny_model, tiny_params, x):
    with pytest.raises(ConfigError):
        SequenceProblem(tiny_model, tiny_params, x, _noise(tiny_model, 6), objective_name="nll")


def test_vae_loss_gradient_matches_finite_differences(tiny_model, tiny_params, x):
    eps = _noise(tiny_model, 6)
    _, grads = value_and_grad(lambda p: tiny_model.vae_loss({**tiny_params, **p}, x, eps),
                              {"enc.0.b": tiny_params["enc.0.b"]})
    fd = fd_gradient(lambda b: float(tiny_model.vae_loss({**tiny_params, "enc.0.b": b}, x, eps)),
                     tiny_params["enc.0.b"])
    np.testing.assert_allclose(grads["enc.0.b"], fd, rtol=1e-5, atol=1e-7)


def _state(params):
    return TrainState(params=dict(params), adam=Adam(lr=1e-2), natgrad=NaturalGradientAscent(lr=0.1))


def test_stage_one_leaves_globals_alone(tiny_model, tiny_params, x):
    state = _state(tiny_params)
    report = train_step(tiny_model, state, [x], [_noise(tiny_model, 6)], GradMode.parse("capped"), stage=1)
    assert report.stage == 1
    for name in tiny_model.global_names:
        np.testing.assert_array_equal(state.params[name], tiny_params[name])
    assert not np.array_equal(state.params["enc.0.W"], tiny_params["enc.0.W"])


def test_frozen_networks_stay_bitwise_equal(tiny_model, tiny_params, x):
    state = _state(tiny_params)
    train_step(tiny_model, state, [x], [_noise(tiny_model, 6)], GradMode.parse("capped"), stage=2,
               update_networks=False)
    for name in tiny_model.network_names(tiny_params):
        np.testing.assert_array_equal(state.params[name], tiny_params[name])
    assert not np.array_equal(state.params["glob.init"], tiny_params["glob.init"])


def test_train_step_reports_estimator_diagnostics(tiny_model, tiny_params, x):
    state = _state(tiny_params)
    report = train_step(tiny_model, state, [x, x], [_noise(tiny_model, 6, s) for s in (1, 2)],
                        GradMode.parse("implicit", J=5), stage=3)
    assert report.step == 1
    assert report.richardson_iters == 5
    assert report.stored_states == 1
    assert len(report.sweeps) == 2
    assert np.isfinite(report.loss.elbo)


def test_biased_flag_uses_the_partial_gradient(tiny_model, tiny_params, x, mocker):
    spy = mocker.spy(svae_module, "natural_gradient")
    train_step(tiny_model, _state(tiny_params), [x], [_noise(tiny_model, 6)], GradMode.parse("implicit"),
               stage=3, biased=True)
    assert spy.call_args.kwargs["biased"] is True
    assert spy.call_args.args[0].partial


def test_empty_batch_is_rejected(tiny_model, tiny_params):
    with pytest.raises(ConfigError):
        train_step(tiny_model, _state(tiny_params), [], [], GradMode.parse("capped"))


def test_range_mask_covers_the_fraction():
    mask = range_mask(10, 0.2, 0.45)
    assert list(np.flatnonzero(mask)) == [2, 3, 4]


def test_impute_reports_masked_steps(tiny_model, tiny_params, x):
    mask = range_mask(6, 0.5, 1.0)
    result = tiny_model.impute(tiny_params, x, mask, rng_streams.stream(5, "impute"), n_samples=2)
    assert result.masked_steps == [3, 4, 5]
    assert result.latent_mean.shape == (6, 2)
    assert result.reconstruction.shape == (6, 3)
    assert result.samples.shape == (2, 6, 3)
    assert result.discrete_path is not None
    assert len(result.discrete_path) == np.shape(result.state.q_k)[0]


def test_conjugate_natural_gradient_step_is_a_coordinate_update():
    results = check_natgrad(n_instances=2)
    assert all(r.passed for r in results), results


def test_plain_global_steps_need_their_own_optimizer(tiny_model, tiny_params, x):
    with pytest.raises(ConfigError):
        train_step(tiny_model, _state(tiny_params), [x], [_noise(tiny_model, 6)], GradMode.parse("capped"),
                   stage=2, update_networks=False, natural=False)


def test_plain_global_steps_move_by_the_adam_rate(tiny_model, tiny_params, x):
    state = _state(tiny_params)
    state.global_adam = Adam(lr=1e-3)
    train_step(tiny_model, state, [x], [_noise(tiny_model, 6)], GradMode.parse("implicit", J=20),
               stage=2, update_networks=False, natural=False)
    moved = np.abs(state.params["glob.init"] - tiny_params["glob.init"])
    assert np.all(moved <= 1e-3 + 1e-12)
    assert np.max(moved) == pytest.approx(1e-3, rel=1e-4)
    assert state.natgrad.step_count == 0


def test_plain_gradient_is_fisher_times_natural_gradient():
    model, params, x = conjugate_model(4)
    eps = model.draw_noise(rng_streams.stream(4, "conjugate", "noise"), len(x))
    mode = GradMode(GradModeKind.IMPLICIT, J=100)
    grads = {}
    for natural in (True, False):
        problem = SequenceProblem(model, params, x, eps, natural=natural)
        grads[natural] = global_gradient(compute_gradient(problem, mode, problem.solve()))
    family = model.families["glob.init"]
    eta = params["glob.init"]
    fisher = np.column_stack([
        fd_gradient(lambda e, i=i: float(np.asarray(expfam.expected_stats(family, e))[i]), eta)
        for i in range(eta.size)
    ])
    np.testing.assert_allclose(grads[False]["glob.init"], fisher @ grads[True]["glob.init"],
                               rtol=1e-5, atol=1e-6)


def test_reported_loss_uses_the_requested_message_passing(tiny_model, tiny_params, x, mocker):
    spy = mocker.spy(tiny_model, "loss")
    report = train_step(tiny_model, _state(tiny_params), [x], [_noise(tiny_model, 6)],
                        GradMode.parse("capped"), stage=3, bp=BPMethod.PARALLEL, parallelism=2)
    assert spy.call_args.kwargs["bp"] == BPMethod.PARALLEL
    assert spy.call_args.kwargs["parallelism"] == 2
    sequential = train_step(tiny_model, _state(tiny_params), [x], [_noise(tiny_model, 6)],
                            GradMode.parse("capped"), stage=3)
    assert report.loss.elbo == pytest.approx(sequential.loss.elbo, rel=1e-6)

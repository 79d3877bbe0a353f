"""Invariant checks against brute-force references, grouped into suites"""
import csv
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from ..config.settings import ModelConfig, SynthConfig, TrainConfig
from ..inference import chain_bp, expfam, hmm_bp, meanfield, oracles, parallel_bp
from ..learning.gradients import compute_gradient, natural_gradient, richardson_solve
from ..learning.optimizer import Adam, NaturalGradientAscent
from ..learning.svae import SVAE, SequenceProblem, TrainState, range_mask, train_step
from ..learning.trainer import Trainer
from ..models.family import FamilyDescriptor
from ..models.results import CheckResult, GradMode, GradModeKind
from ..utils.exceptions import ConfigError, SvaeException
from ..utils.metrics import metrics
from . import rng as rng_streams
from . import synthetic

logger = structlog.get_logger(__name__)

SUITES = ("expfam", "inference", "parallel", "hmm", "meanfield", "gradients", "natgrad", "ordering",
          "speedup", "desk")
# The desk-scale training run is only started by name
DEFAULT_SUITES = SUITES[:-1]


def _result(suite: str, name: str, error: float, tolerance: float, detail: str = "") -> CheckResult:
    error = float(error)
    passed = bool(np.isfinite(error) and error <= tolerance)
    return CheckResult(suite=suite, name=name, passed=passed, max_error=error, tolerance=tolerance,
                       detail=detail or None)


def _max_abs(*pairs: Tuple[np.ndarray, np.ndarray]) -> float:
    return max(float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))
               if np.size(a) else 0.0 for a, b in pairs)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def fd_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function"""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        grad.flat[i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


# Exponential families

def check_expfam(n_draws: int = 100, seed: int = 0) -> List[CheckResult]:
    gen = rng_streams.stream(seed, "check", "expfam")
    families = [FamilyDescriptor.mvn(2), FamilyDescriptor.niw(2), FamilyDescriptor.mniw(2, 3),
                FamilyDescriptor.dirichlet(3)]
    results = []
    for family in families:
        grad_err, kl_err = 0.0, 0.0
        for _ in range(n_draws):
            eta = oracles.random_natural(gen, family)
            mu = np.asarray(expfam.expected_stats(family, eta))
            fd = fd_gradient(lambda e: float(expfam.log_partition(family, e)), eta)
            grad_err = max(grad_err, _rel(fd, mu))
            p = expfam.NaturalParams(family, eta)
            kl_err = max(kl_err, abs(float(expfam.kl_divergence(p, p))))
        name = family.kind.value
        results.append(_result("expfam", f"grad_log_partition_{name}", grad_err, 1e-5))
        results.append(_result("expfam", f"self_kl_{name}", kl_err, 1e-10))
    return results


# Chain inference

def check_inference(n_instances: int = 200, seed: int = 0) -> List[CheckResult]:
    gen = rng_streams.stream(seed, "check", "inference")
    err = 0.0
    for _ in range(n_instances):
        p = oracles.random_chain(gen, T=int(gen.integers(1, 7)), D=int(gen.integers(1, 4)))
        fr, sr = chain_bp.infer(p)
        ref = oracles.dense_chain_oracle(p)
        err = max(err, _max_abs((sr.Ez, ref["mean"]), (sr.cov, ref["cov"]),
                                (sr.Ezz_next, ref["cross"]), (fr.logZ, ref["logZ"])))
    return [_result("inference", "chain_vs_dense", err, 1e-8, f"{n_instances} instances")]


PARALLEL_LENGTHS = (1, 2, 3, 17, 256, 1000)
PARALLEL_DIMS = (1, 2, 4, 16)
PARALLELISM_DEGREES = (1, 2, 8)


def _triple(elems: Tuple[np.ndarray, ...]) -> List[Tuple[np.ndarray, ...]]:
    return [parallel_bp._take(elems, slice(i, i + 1)) for i in range(3)]


def _associativity_gap(combine: Callable, a, b, c) -> float:
    left = combine(combine(a, b), c)
    right = combine(a, combine(b, c))
    return _max_abs(*zip(left, right))


def check_parallel(seed: int = 0, lengths: Tuple[int, ...] = PARALLEL_LENGTHS,
                   dims: Tuple[int, ...] = PARALLEL_DIMS, n_seeds: int = 20,
                   n_triples: int = 1000,
                   degrees: Tuple[int, ...] = PARALLELISM_DEGREES) -> List[CheckResult]:
    gen = rng_streams.stream(seed, "check", "parallel")
    err, spread = 0.0, 0.0
    for T in lengths:
        for D in dims:
            for _ in range(n_seeds):
                p = oracles.random_chain(gen, T, D)
                fr_s, sr_s = chain_bp.infer(p)
                runs = [parallel_bp.infer(p, parallelism=k) for k in degrees]
                fr_p, sr_p = runs[0]
                err = max(err, _max_abs((fr_s.f, fr_p.f), (fr_s.F, fr_p.F), (fr_s.logZ, fr_p.logZ),
                                        (sr_s.Ez, sr_p.Ez), (sr_s.Ezz, sr_p.Ezz),
                                        (sr_s.Ezz_next, sr_p.Ezz_next)))
                for fr_k, sr_k in runs[1:]:
                    spread = max(spread, _max_abs((fr_k.F, fr_p.F), (fr_k.f, fr_p.f),
                                                  (fr_k.logZ, fr_p.logZ), (sr_k.Ez, sr_p.Ez),
                                                  (sr_k.Ezz, sr_p.Ezz)))

    assoc_f, assoc_s = 0.0, 0.0
    for _ in range(n_triples):
        p = oracles.random_chain(gen, 4, int(gen.choice((1, 2, 4))))
        a, b, c = _triple(parallel_bp._take(parallel_bp.make_filter_elements(p).astuple(), slice(1, 4)))
        assoc_f = max(assoc_f, _associativity_gap(parallel_bp.combine_filter, a, b, c))
        se = parallel_bp.make_smoother_elements(p, chain_bp.kalman_filter(p)).astuple()
        a, b, c = _triple(se)
        assoc_s = max(assoc_s, _associativity_gap(parallel_bp.combine_smoother, a, b, c))
    detail = f"T in {lengths}, D in {dims}, {n_seeds} seeds"
    return [
        _result("parallel", "parallel_vs_sequential", err, 1e-8, detail),
        _result("parallel", "parallelism_degrees_agree", spread, 1e-10, f"degrees {degrees}"),
        _result("parallel", "filter_combine_associative", assoc_f, 1e-8, f"{n_triples} triples"),
        _result("parallel", "smoother_combine_associative", assoc_s, 1e-8, f"{n_triples} triples"),
    ]


def check_hmm(n_instances: int = 200, seed: int = 0) -> List[CheckResult]:
    gen = rng_streams.stream(seed, "check", "hmm")
    err = 0.0
    for _ in range(n_instances):
        p = oracles.random_hmm(gen, K=int(gen.integers(1, 5)), Tk=int(gen.integers(1, 7)),
                               normalized=bool(gen.integers(2)))
        marg = hmm_bp.forward_backward(p)
        ref = oracles.hmm_enumerate(p)
        err = max(err, _max_abs((marg.marginal, ref["marginal"]), (marg.logZ, ref["logZ"])))
    return [_result("hmm", "forward_backward_vs_enumeration", err, 1e-10)]


# Structured mean field

def random_recognition(gen: np.random.Generator, T: int, D: int) -> Tuple[np.ndarray, np.ndarray]:
    r = gen.standard_normal((T, D))
    R = np.array([np.diag(gen.uniform(0.5, 2.0, D)) for _ in range(T)])
    return r, R


def check_meanfield(n_instances: int = 50, seed: int = 0, T: int = 20, D: int = 2,
                    K: int = 3) -> List[CheckResult]:
    gen = rng_streams.stream(seed, "check", "meanfield")
    worst_drop, worst_residual = 0.0, 0.0
    for _ in range(n_instances):
        g, _ = oracles.random_global_stats(gen, D, K)
        recognition = random_recognition(gen, T, D)
        state = meanfield.block_update(g, recognition, max_iters=1000, tol=1e-10)
        trace = np.asarray(state.trace)
        if trace.size > 1:
            worst_drop = max(worst_drop, float(np.max(trace[:-1] - trace[1:])))
        worst_residual = max(worst_residual, meanfield.residual_norm(state, g))
    return [
        _result("meanfield", "surrogate_non_decreasing", worst_drop, 1e-9),
        _result("meanfield", "residual_at_termination", worst_residual, 1e-8),
    ]


# Gradients

def tiny_problem(seed: int, K: int = 2, T: int = 5, tol: float = 1e-12,
                 natural: bool = True) -> SequenceProblem:
    """Small SLDS SVAE problem with fixed Monte-Carlo noise"""
    config = ModelConfig(kind="slds" if K > 1 else "lds", obs_dim=3, latent_dim=2, states=K,
                         hidden=[4], activation="tanh", layer_norm=False)
    model = SVAE(config)
    params = model.init_params(rng_streams.stream(seed, "tiny", "init"))
    data_gen = rng_streams.stream(seed, "tiny", "data")
    x = data_gen.standard_normal((T, config.obs_dim))
    eps = model.draw_noise(data_gen, T)
    return SequenceProblem(model, params, x, eps, max_iters=2000, tol=tol, natural=natural)


def elbo_fd_error(seed: int, step: float = 1e-5, J: int = 300) -> float:
    """Worst relative gap between the implicit gradient of the solved loss and central differences.

    The global parameters enter through plain bijectors, so every entry is a Euclidean gradient.
    """
    problem = tiny_problem(seed, natural=False)
    result = compute_gradient(problem, GradMode(GradModeKind.IMPLICIT, J=J), problem.solve())

    def solved_loss(params: Dict[str, np.ndarray]) -> float:
        perturbed = SequenceProblem(problem.model, params, problem.x, problem.eps, max_iters=2000,
                                    tol=problem.tol, natural=False)
        return float(perturbed.loss(params, perturbed.flatten(perturbed.solve())))

    worst = 0.0
    for name, value in problem.params.items():
        fd = fd_gradient(lambda v, name=name: solved_loss({**problem.params, name: v}), value, step)
        worst = max(worst, _rel(result.grads[name], fd))
    return worst


def check_gradients(n_instances: int = 20, seed: int = 0) -> List[CheckResult]:
    geometric, _ = richardson_solve(lambda v: 0.5 * v, np.array([1.0]), 40)
    identity, _ = richardson_solve(lambda v: v, np.array([1.0, -2.0]), 10)
    results = [
        _result("gradients", "richardson_geometric_series", abs(geometric[0] - 2.0), 1e-6),
        _result("gradients", "richardson_identity_jacobian", _max_abs((identity, [1.0, -2.0])), 0.0),
    ]
    worst_rel, worst_nosolve = 0.0, 0.0
    for i in range(n_instances):
        problem = tiny_problem(seed + i)
        state = problem.solve()
        unrolled = compute_gradient(problem, GradMode(GradModeKind.UNROLLED), state)
        capped = compute_gradient(problem, GradMode(GradModeKind.IMPLICIT, J=200), state)
        for name in unrolled.grads:
            scale = max(1.0, float(np.max(np.abs(unrolled.grads[name]))))
            worst_rel = max(worst_rel, float(np.max(np.abs(capped.grads[name] - unrolled.grads[name]))) / scale)
        no_solve = compute_gradient(problem, GradMode(GradModeKind.NO_SOLVE), state)
        zero_j = compute_gradient(problem, GradMode(GradModeKind.IMPLICIT, J=0), state)
        for name in no_solve.grads:
            if not np.array_equal(no_solve.grads[name], zero_j.grads[name]):
                worst_nosolve = max(worst_nosolve, _max_abs((no_solve.grads[name], zero_j.grads[name])))
    results.append(_result("gradients", "implicit_vs_unrolled_at_fixed_point", worst_rel, 1e-4))
    results.append(_result("gradients", "no_solve_equals_zero_iterations", worst_nosolve, 0.0))
    results.append(_result("gradients", "elbo_vs_finite_differences", elbo_fd_error(seed), 1e-4,
                           "all network weights and global parameters"))
    return results


def conjugate_model(seed: int, T: int = 6, D: int = 2) -> Tuple[SVAE, Dict[str, np.ndarray], np.ndarray]:
    """LDS with identity bijectors whose encoder is a single affine layer"""
    config = ModelConfig(kind="lds", obs_dim=D, latent_dim=D, hidden=[], bijector="identity")
    model = SVAE(config)
    params = model.init_params(rng_streams.stream(seed, "conjugate", "init"))
    x = rng_streams.stream(seed, "conjugate", "data").standard_normal((T, D))
    return model, params, x


def check_natgrad(n_instances: int = 3, seed: int = 0) -> List[CheckResult]:
    worst = 0.0
    for i in range(n_instances):
        model, params, x = conjugate_model(seed + i)
        eps = model.draw_noise(rng_streams.stream(seed + i, "conjugate", "noise"), len(x))
        problem = SequenceProblem(model, params, x, eps, objective_name="surrogate")
        state = problem.solve()
        result = compute_gradient(problem, GradMode(GradModeKind.IMPLICIT), state)
        updated = NaturalGradientAscent(lr=1.0).step(params, natural_gradient(result))
        stats = oracles.chain_sufficient_stats(state.mu_z)
        for name, s in stats.items():
            worst = max(worst, _max_abs((updated[name], model.priors[name] + s)))
    return [_result("natgrad", "conjugate_step_is_coordinate_update", worst, 1e-8)]


# Optimizer ordering

ORDERING_SEEDS = 5


def race_model(seed: int, n_sequences: int = 4, T: int = 30) -> Tuple[SVAE, Dict[str, np.ndarray], List[np.ndarray]]:
    """LDS SVAE with fixed networks and data sampled from a slowly rotating linear system"""
    config = ModelConfig(kind="lds", obs_dim=3, latent_dim=2, hidden=[8], activation="tanh",
                         layer_norm=False)
    model = SVAE(config)
    params = model.init_params(rng_streams.stream(seed, "race", "init"))
    angle = 0.2
    A = 0.95 * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    C = rng_streams.stream(seed, "race", "emission").standard_normal((3, 2))
    data = [synthetic.gen_lds_ground_truth(A, np.zeros(2), 0.1 * np.eye(2), np.zeros(2), np.eye(2), T,
                                           seed=1000 * seed + i, C=C, R=0.1 * np.eye(3)).x
            for i in range(n_sequences)]
    return model, params, data


def ascent_trace(model: SVAE, params: Dict[str, np.ndarray], data: List[np.ndarray],
                 noise: List[np.ndarray], natural: bool, steps: int, lr: float,
                 mode: Optional[GradMode] = None) -> List[float]:
    """Batch ELBO before each of ``steps`` global updates with the networks frozen.

    Natural runs take steps of size ``lr`` along the natural gradient; plain runs use Adam
    with learning rate ``lr`` on the Euclidean gradient. A numerical failure ends the trace.
    """
    mode = mode or GradMode(GradModeKind.IMPLICIT, J=50)
    state = TrainState(params=dict(params), adam=Adam(lr=0.0), natgrad=NaturalGradientAscent(lr=lr),
                       global_adam=None if natural else Adam(lr=lr))
    trace: List[float] = []
    for _ in range(steps):
        try:
            report = train_step(model, state, data, noise, mode, stage=3, update_networks=False,
                                natural=natural, max_iters=200, tol=1e-10, n_data=len(data))
        except SvaeException as exc:
            logger.warning("ascent_stopped", natural=natural, step=len(trace), error=str(exc))
            break
        trace.append(report.loss.elbo)
    return trace


def steps_to_threshold(trace: List[float], threshold: float) -> int:
    """Index of the first ELBO at or above ``threshold``; ``len(trace)`` when never reached"""
    for i, value in enumerate(trace):
        if np.isfinite(value) and value >= threshold:
            return i
    return len(trace)


def optimizer_race(seed: int, steps: int = 40, nat_lr: float = 0.5, adam_lr: float = 1e-2,
                   fraction: float = 0.9) -> Tuple[int, int]:
    """(natural, plain) steps to close ``fraction`` of the gap the natural run closes"""
    model, params, data = race_model(seed)
    noise = [model.draw_noise(rng_streams.stream(seed, "race", "noise", i), len(x))
             for i, x in enumerate(data)]
    natural = ascent_trace(model, params, data, noise, True, steps, nat_lr)
    plain = ascent_trace(model, params, data, noise, False, steps, adam_lr)
    if not natural:
        return steps, steps
    start, best = natural[0], max(natural)
    threshold = start + fraction * (best - start)
    return steps_to_threshold(natural, threshold), steps_to_threshold(plain, threshold)


def check_ordering(seed: int = 0, n_seeds: int = ORDERING_SEEDS, steps: int = 40) -> List[CheckResult]:
    races = [optimizer_race(seed + i, steps=steps) for i in range(n_seeds)]
    natural = float(np.median([r[0] for r in races]))
    plain = float(np.median([r[1] for r in races]))
    # Passes when the natural median is strictly smaller
    gap = max(0.0, natural - plain + 1.0)
    return [_result("ordering", "natural_before_plain", gap, 0.0,
                    f"median steps natural={natural:g} plain={plain:g} over {n_seeds} seeds")]


# Parallel speedup and stored states

def _best_time(fn: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def check_speedup(seed: int = 0, T: int = 4096, D: int = 8, workers: int = 4,
                  repeats: int = 3) -> List[CheckResult]:
    gen = rng_streams.stream(seed, "check", "speedup")
    p = oracles.random_chain(gen, T, D)
    fr = chain_bp.kalman_filter(p)
    sequential = _best_time(lambda: chain_bp.kalman_smooth(p, fr), repeats)
    parallel = _best_time(lambda: parallel_bp.parallel_smooth(p, fr, parallelism=workers), repeats)
    ratio = parallel / sequential

    problem = tiny_problem(seed)
    state = problem.solve()
    metrics.reset()
    implicit = compute_gradient(problem, GradMode(GradModeKind.IMPLICIT, J=50), state)
    implicit_peak = metrics.get_peak("gradients.stored_states")
    unrolled = compute_gradient(problem, GradMode(GradModeKind.UNROLLED), state)
    sweeps = max(state.iters, 1)
    return [
        _result("speedup", "parallel_smoother_time_ratio", ratio, 0.7,
                f"T={T} D={D} workers={workers} sequential={sequential:.3f}s parallel={parallel:.3f}s"),
        _result("speedup", "implicit_stores_one_state", abs(implicit.stored_states - 1) + abs(implicit_peak - 1), 0.0),
        _result("speedup", "unrolled_stores_every_sweep", abs(unrolled.stored_states - sweeps), 0.0,
                f"{sweeps} sweeps"),
    ]


# Desk-scale switching run

def state_occupancy(model: SVAE, params: Dict[str, np.ndarray], data: np.ndarray,
                    max_iters: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Average posterior mass of each discrete state over all transitions of all sequences"""
    if not model.discrete:
        return np.ones(1)
    marginals = [np.asarray(model.infer(params, x, max_iters=max_iters, tol=tol).q_k) for x in data]
    return np.mean(np.concatenate(marginals), axis=0)


def boundary_jump_ratio(latent_mean: np.ndarray, mask: np.ndarray) -> float:
    """Largest step of the posterior mean across a mask boundary over the largest observed step"""
    steps = np.linalg.norm(np.diff(latent_mean, axis=0), axis=1)
    crossing = mask[1:] != mask[:-1]
    observed = ~mask[1:] & ~mask[:-1]
    if not crossing.any() or not observed.any():
        return 0.0
    return float(np.max(steps[crossing]) / max(float(np.max(steps[observed])), 1e-12))


def desk_run(seed: int = 0, synth: Optional[SynthConfig] = None, model_config: Optional[ModelConfig] = None,
             train_config: Optional[TrainConfig] = None, threads: int = 1,
             mask_span: Tuple[float, float] = (0.4, 0.6)) -> Tuple[np.ndarray, float]:
    """Three-stage fit on Laplace sequences; (state occupancy, boundary jump ratio of an imputation)"""
    synth = synth or SynthConfig(seed=seed)
    data = synthetic.gen_laplace_sequences(synth, workers=threads).x
    model_config = model_config or ModelConfig(kind="slds", obs_dim=synth.grid_size, latent_dim=2, states=8,
                                               hidden=[64])
    model = SVAE(model_config)
    train_config = train_config or TrainConfig(steps=200, batch_size=4)
    run = Trainer(model, train_config, seed=seed, threads=threads).fit(data)
    occupancy = state_occupancy(model, run.params, data, train_config.max_sweeps, train_config.sweep_tol)
    mask = range_mask(synth.T, *mask_span)
    imputed = model.impute(run.params, data[0], mask, rng_streams.stream(seed, "desk", "impute"),
                           max_iters=train_config.max_sweeps, tol=train_config.sweep_tol)
    return occupancy, boundary_jump_ratio(imputed.latent_mean, mask)


def check_desk(seed: int = 0) -> List[CheckResult]:
    occupancy, ratio = desk_run(seed)
    used = int(np.sum(occupancy >= 0.05))
    return [
        _result("desk", "states_with_five_percent_mass", max(0, 2 - used), 0.0,
                "occupancy " + " ".join(f"{m:.3f}" for m in occupancy)),
        _result("desk", "imputation_boundary_continuity", ratio, 1.0),
    ]


CHECKS: Dict[str, Callable[..., List[CheckResult]]] = {
    "expfam": check_expfam,
    "inference": check_inference,
    "parallel": check_parallel,
    "hmm": check_hmm,
    "meanfield": check_meanfield,
    "gradients": check_gradients,
    "natgrad": check_natgrad,
    "ordering": check_ordering,
    "speedup": check_speedup,
    "desk": check_desk,
}


def run_suite(suite: str, seed: int = 0) -> List[CheckResult]:
    """Run one suite by name, or every suite for ``all``"""
    names = DEFAULT_SUITES if suite == "all" else (suite,)
    results: List[CheckResult] = []
    for name in names:
        if name not in CHECKS:
            raise ConfigError(f"unknown check suite {name!r}")
        suite_results = CHECKS[name](seed=seed)
        for r in suite_results:
            logger.info("check", suite=r.suite, name=r.name, passed=r.passed,
                        max_error=r.max_error, tolerance=r.tolerance)
        results.extend(suite_results)
    return results


def write_csv(path: str, results: List[CheckResult]):
    fields = ["suite", "name", "passed", "max_error", "tolerance", "detail"]
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow(r.to_dict())

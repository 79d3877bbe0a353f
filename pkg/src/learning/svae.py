"""Structured variational autoencoder with an LDS or SLDS prior.

Parameters live in one flat dict: encoder and decoder weights under ``enc.*``/``dec.*``
and the unconstrained global variational parameters under ``glob.*``:

- ``glob.init``: NIW over the initial state
- ``glob.dyn.{k}``: MNIW over ([A_k | b_k], Q_k)
- ``glob.pi0``, ``glob.pi.{k}``: Dirichlet over the initial and transition rows (K > 1)
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..autodiff import ops
from ..autodiff.tape import value_and_grad
from ..config.settings import ModelConfig
from ..inference import chain_bp, expfam, hmm_bp, meanfield, objective
from ..inference.param_space import Bijector, FamilyBijector, IdentityFamilyBijector
from ..models.chain import BPMethod
from ..models.family import FamilyDescriptor, NaturalParams
from ..models.meanfield import GlobalExpectedStats, MeanFieldState
from ..models.results import GradientResult, GradMode, LikelihoodKind, LossBreakdown
from ..models.svae import ImputeResult, RecognitionOutput, StepReport
from ..utils.exceptions import ConfigError, NonFinite, ShapeMismatch
from .gradients import GLOBAL_PREFIX, GradientProblem, compute_gradient, natural_gradient, network_gradient
from .networks import Activation, DenseNet
from .optimizer import Adam, NaturalGradientAscent

logger = structlog.get_logger(__name__)

OBJECTIVES = ("elbo", "surrogate")

# Initial posterior: V = POSTERIOR_V * I and nu = n + 2 + POSTERIOR_DOF for the dynamics
POSTERIOR_V = 10.0
POSTERIOR_DOF = 10.0


def range_mask(T: int, start: float, stop: float) -> np.ndarray:
    """Boolean mask hiding steps floor(start*T) .. ceil(stop*T)-1"""
    mask = np.zeros(T, dtype=bool)
    mask[int(math.floor(start * T)):int(math.ceil(stop * T))] = True
    return mask


def _runs(flags: np.ndarray) -> List[Tuple[int, int]]:
    """Inclusive (first, last) index pairs of the True runs"""
    runs, begin = [], None
    for i, flag in enumerate(flags):
        if flag and begin is None:
            begin = i
        elif not flag and begin is not None:
            runs.append((begin, i - 1))
            begin = None
    if begin is not None:
        runs.append((begin, len(flags) - 1))
    return runs


class SVAE:
    """Dense encoder/decoder around a conjugate chain prior"""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.D = config.latent_dim
        self.Dx = config.obs_dim
        self.K = config.states
        hidden = Activation(config.activation)
        self.encoder = DenseNet("enc", [self.Dx, *config.hidden, 2 * self.D], hidden,
                                layer_norm=config.layer_norm)
        self.decoder = DenseNet("dec", [self.D, *config.hidden, self.Dx], hidden,
                                layer_norm=config.layer_norm)
        self.likelihood = LikelihoodKind(config.likelihood)

        self.families: Dict[str, FamilyDescriptor] = {"glob.init": FamilyDescriptor.niw(self.D)}
        for k in range(self.K):
            self.families[f"glob.dyn.{k}"] = FamilyDescriptor.mniw(self.D, self.D + 1)
        if self.discrete:
            self.families["glob.pi0"] = FamilyDescriptor.dirichlet(self.K)
            for k in range(self.K):
                self.families[f"glob.pi.{k}"] = FamilyDescriptor.dirichlet(self.K)
        self.bijectors: Dict[str, Bijector] = {
            name: FamilyBijector(f) if config.bijector == "family" else IdentityFamilyBijector(f)
            for name, f in self.families.items()
        }
        self.priors = self._prior_naturals()

    @property
    def discrete(self) -> bool:
        return self.K > 1

    @property
    def global_names(self) -> List[str]:
        return list(self.families)

    # Priors and initialization

    def _niw(self, scale: float) -> np.ndarray:
        D = self.D
        return np.asarray(expfam.to_natural(self.families["glob.init"],
                                            (scale * np.eye(D), np.zeros(D), 1.0, D + 2.0)), dtype=float)

    def _mniw(self, M: np.ndarray, v: float, dof: float) -> np.ndarray:
        D = self.D
        S = self.config.prior_scale * np.eye(D) * (dof - D - 1.0)
        family = FamilyDescriptor.mniw(D, D + 1)
        return np.asarray(expfam.to_natural(family, (S, M, v * np.eye(D + 1), dof)), dtype=float)

    def _prior_naturals(self) -> Dict[str, np.ndarray]:
        D, K, cfg = self.D, self.K, self.config
        priors = {"glob.init": self._niw(cfg.prior_scale)}
        M0 = np.hstack([0.9 * np.eye(D), np.zeros((D, 1))])
        for k in range(K):
            priors[f"glob.dyn.{k}"] = self._mniw(M0, 1.0, D + 2.0)
        if self.discrete:
            priors["glob.pi0"] = np.full(K, cfg.dirichlet_alpha)
            for k in range(K):
                priors[f"glob.pi.{k}"] = np.full(K, cfg.dirichlet_alpha) + cfg.sticky * np.eye(K)[k]
        return priors

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Random network weights and a symmetry-broken global posterior"""
        D, K = self.D, self.K
        params = {**self.encoder.init_params(rng), **self.decoder.init_params(rng)}
        if self.likelihood == LikelihoodKind.GAUSSIAN:
            params["dec.log_var"] = np.zeros(self.Dx)

        etas = {"glob.init": self.priors["glob.init"].copy()}
        for k in range(K):
            A = 0.9 * (np.linalg.qr(rng.standard_normal((D, D)))[0] if K > 1 else np.eye(D))
            b = 0.1 * rng.standard_normal((D, 1)) if K > 1 else np.zeros((D, 1))
            etas[f"glob.dyn.{k}"] = self._mniw(np.hstack([A, b]), POSTERIOR_V, D + 2.0 + POSTERIOR_DOF)
        if self.discrete:
            etas["glob.pi0"] = self.priors["glob.pi0"] + 1.0
            for k in range(K):
                etas[f"glob.pi.{k}"] = self.priors[f"glob.pi.{k}"] + 1.0
        for name, eta in etas.items():
            params[name] = np.asarray(self.bijectors[name].inverse(eta), dtype=float)
        return params

    def network_names(self, params: Dict[str, Any]) -> List[str]:
        return [name for name in params if not name.startswith(GLOBAL_PREFIX)]

    # Global factors

    def global_naturals(self, params: Dict[str, Any], natural: bool = True) -> Dict[str, Any]:
        """Natural parameters eta of every global factor.

        With ``natural`` the maps are natgrad nodes, so the loss gradient of ``glob.*`` is the
        natural gradient; otherwise the bijectors are differentiated directly.
        """
        if not natural:
            return {name: self.bijectors[name].forward(params[name]) for name in self.families}
        return {name: ops.natgrad_map(self.bijectors[name])(params[name]) for name in self.families}

    def global_expectations(self, etas: Dict[str, Any], natural: bool = True) -> Dict[str, Any]:
        """Expected statistics of every factor, straight-through to eta when ``natural``"""
        mus = {}
        for name, family in self.families.items():
            if natural:
                mus[name] = ops.straight_through(lambda e, f=family: expfam.expected_stats(f, e))(etas[name])
            else:
                mus[name] = expfam.expected_stats(family, etas[name])
        return mus

    def global_stats(self, params: Dict[str, Any],
                     natural: bool = True) -> Tuple[GlobalExpectedStats, Dict[str, Any], Dict[str, Any]]:
        """(chain-form expected parameters, naturals, expected statistics)"""
        etas = self.global_naturals(params, natural)
        mus = self.global_expectations(etas, natural)
        dyn = [mus[f"glob.dyn.{k}"] for k in range(self.K)]
        if self.discrete:
            g = meanfield.global_expected_stats(mus["glob.init"], dyn, self.D, mus["glob.pi0"],
                                                [mus[f"glob.pi.{k}"] for k in range(self.K)])
        else:
            g = meanfield.global_expected_stats(mus["glob.init"], dyn, self.D)
        return g, etas, mus

    def prior_kl(self, etas: Dict[str, Any], mus: Dict[str, Any]) -> Any:
        q = {name: NaturalParams(self.families[name], etas[name]) for name in self.families}
        p = {name: NaturalParams(self.families[name], self.priors[name]) for name in self.families}
        return objective.prior_kl(q, p, mus)

    # Networks

    def observed_weights(self, mask: Optional[np.ndarray], T: int) -> Optional[np.ndarray]:
        """1.0 on observed steps, 0.0 on masked ones; None without a mask"""
        if mask is None:
            return None
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (T,):
            raise ShapeMismatch(f"mask must have length {T}, got shape {mask.shape}")
        return (~mask).astype(float)

    def encode(self, params: Dict[str, Any], x: np.ndarray,
               mask: Optional[np.ndarray] = None) -> RecognitionOutput:
        """Per-step recognition potentials; masked steps get r = 0 and R = 0"""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.Dx:
            raise ShapeMismatch(f"expected observations of shape (T, {self.Dx}), got {x.shape}")
        weights = self.observed_weights(mask, x.shape[0])
        if weights is not None:
            x = np.where(weights[:, None] > 0, x, 0.0)
        if not np.all(np.isfinite(x)):
            raise NonFinite("observations contain non-finite values")
        out = self.encoder.apply(params, x)
        r = out[:, :self.D]
        R_diag = ops.softplus(out[:, self.D:])
        if weights is not None:
            r = r * weights[:, None]
            R_diag = R_diag * weights[:, None]
        return RecognitionOutput(r=r, R_diag=R_diag)

    def decode(self, params: Dict[str, Any], z: Any) -> Tuple[Any, ...]:
        """Likelihood parameters per step: (mean, log_var) or (log_rate,)"""
        if ops.shape(z)[-1] != self.D:
            raise ShapeMismatch(f"expected latents of width {self.D}, got {ops.shape(z)}")
        out = self.decoder.apply(params, z)
        if self.likelihood == LikelihoodKind.GAMMA:
            return (out,)
        return out, params["dec.log_var"]

    def decode_mean(self, params: Dict[str, Any], z: np.ndarray) -> np.ndarray:
        """Expected observation under the decoder"""
        head = self.decode(params, z)
        if self.likelihood == LikelihoodKind.GAMMA:
            return objective.GAMMA_CONCENTRATION * np.exp(-np.asarray(head[0]))
        return np.asarray(head[0])

    def draw_noise(self, rng: np.random.Generator, T: int) -> np.ndarray:
        """Standard normal noise for the reparameterized samples, (n_mc, T, D)"""
        return rng.standard_normal((self.config.n_mc, T, self.D))

    # Inference

    def infer_potentials(self, params: Dict[str, Any], recognition: RecognitionOutput,
                         bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
                         max_iters: int = 100, tol: float = 1e-8,
                         init_q: Optional[np.ndarray] = None) -> MeanFieldState:
        g, etas, mus = self.global_stats(params)
        return meanfield.block_update(g, recognition.astuple(), max_iters=max_iters, tol=tol, bp=bp,
                                      parallelism=parallelism, init_q=init_q,
                                      prior_kl=float(self.prior_kl(etas, mus)))

    def infer(self, params: Dict[str, Any], x: np.ndarray, mask: Optional[np.ndarray] = None,
              bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
              max_iters: int = 100, tol: float = 1e-8) -> MeanFieldState:
        """Structured mean-field posterior of one sequence"""
        return self.infer_potentials(params, self.encode(params, x, mask), bp, parallelism,
                                     max_iters, tol)

    def terms(self, params: Dict[str, Any], x: np.ndarray, eps: Any, weights: Optional[np.ndarray],
              g: GlobalExpectedStats, etas: Dict[str, Any], mus: Dict[str, Any],
              recognition: RecognitionOutput, state: MeanFieldState, prior_weight: float = 1.0,
              with_reconstruction: bool = True) -> Tuple[Any, Any, Any, Any, Any]:
        """(prior KL, continuous KL, discrete KL, reconstruction, <lambda, E t(z)>) at a state"""
        kl_z, kl_k = meanfield.local_kls(g, state.omega_z, state.filtered, state.mu_z,
                                         state.omega_k, state.mu_k)
        pkl = self.prior_kl(etas, mus) * prior_weight
        lam = objective.recognition_inner(recognition.r, recognition.R, state.mu_z)
        recon: Any = 0.0
        if with_reconstruction:
            z = chain_bp.sample_with_noise(state.omega_z, state.filtered, eps)
            recon = objective.reconstruction(lambda s: self.decode(params, s), z, x,
                                             self.likelihood, weights)
        return pkl, kl_z, kl_k, recon, lam

    def loss(self, params: Dict[str, Any], x: np.ndarray, eps: np.ndarray,
             mask: Optional[np.ndarray] = None, state: Optional[MeanFieldState] = None,
             bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
             max_iters: int = 100, tol: float = 1e-8, prior_weight: float = 1.0) -> LossBreakdown:
        """ELBO decomposition of one sequence with the given reparameterization noise"""
        g, etas, mus = self.global_stats(params)
        recognition = self.encode(params, x, mask)
        if state is None:
            state = meanfield.block_update(g, recognition.astuple(), max_iters=max_iters, tol=tol,
                                           bp=bp, parallelism=parallelism)
        weights = self.observed_weights(mask, np.shape(x)[0])
        parts = self.terms(params, x, eps, weights, g, etas, mus, recognition, state, prior_weight)
        pkl, kl_z, kl_k, recon, lam = parts
        return objective.loss_breakdown(pkl, kl_z, kl_k, recon, lam)

    # Stage 1

    def vae_terms(self, params: Dict[str, Any], x: np.ndarray, eps: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tuple[Any, Any]:
        """(KL, reconstruction) of the per-step VAE q(z_t) = N(r/(R+1), 1/(R+1)) with N(0, I) prior"""
        recognition = self.encode(params, x, mask)
        precision = recognition.R_diag + 1.0
        mean = recognition.r / precision
        kl = 0.5 * ops.sum_(1.0 / precision + mean * mean - 1.0 + ops.log(precision))
        std = 1.0 / ops.sqrt(precision)
        weights = self.observed_weights(mask, np.shape(x)[0])
        samples = ops.stack([mean + std * eps[s] for s in range(np.shape(eps)[0])])
        recon = objective.reconstruction(lambda z: self.decode(params, z), samples, x,
                                         self.likelihood, weights)
        return kl, recon

    def vae_loss(self, params: Dict[str, Any], x: np.ndarray, eps: np.ndarray,
                 mask: Optional[np.ndarray] = None) -> Any:
        kl, recon = self.vae_terms(params, x, eps, mask)
        return kl - recon

    # Imputation

    def _bridge_init(self, g: GlobalExpectedStats, q: np.ndarray, mask: np.ndarray,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Discrete marginals with sampled paths across masked transitions"""
        n_trans, K = q.shape
        init_q = q.copy()
        path = np.argmax(q, axis=1)
        log_pi0 = np.asarray(ops.value(g.log_pi0))
        log_pi = np.asarray(ops.value(g.log_pi))
        for first, last in _runs(mask[1:]):
            start = rng.choice(K, p=q[first - 1] / q[first - 1].sum()) if first > 0 else None
            end = rng.choice(K, p=q[last + 1] / q[last + 1].sum()) if last + 1 < n_trans else None
            states = hmm_bp.bridge_sample(log_pi0, log_pi, last - first + 1, rng, start, end)
            path[first:last + 1] = states
            init_q[first:last + 1] = np.eye(K)[states]
            if start is not None:
                path[first - 1] = start
                init_q[first - 1] = np.eye(K)[start]
            if end is not None:
                path[last + 1] = end
                init_q[last + 1] = np.eye(K)[end]
        return init_q, path

    def impute(self, params: Dict[str, Any], x: np.ndarray, mask: np.ndarray,
               rng: np.random.Generator, n_samples: int = 1,
               bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
               max_iters: int = 100, tol: float = 1e-8) -> ImputeResult:
        """Posterior means and sampled reconstructions with the masked steps' potentials removed"""
        x = np.asarray(x, dtype=float)
        T = x.shape[0]
        mask = np.asarray(mask, dtype=bool)
        recognition = self.encode(params, x, mask)
        state = self.infer_potentials(params, recognition, bp, parallelism, max_iters, tol)
        path = None
        if self.discrete and T > 1 and mask.any():
            g, _, _ = self.global_stats(params)
            init_q, path = self._bridge_init(g, np.asarray(state.q_k), mask, rng)
            state = self.infer_potentials(params, recognition, bp, parallelism, max_iters, tol,
                                          init_q=init_q)
        latent_mean = np.asarray(state.mu_z.Ez)
        z = chain_bp.sample_posterior(state.omega_z.numpy(), state.filtered, rng, n_samples)
        samples = np.stack([self.decode_mean(params, z[s]) for s in range(n_samples)])
        masked_steps = [int(t) for t in np.flatnonzero(mask)]
        logger.debug("impute", T=T, masked=len(masked_steps), sweeps=state.iters)
        return ImputeResult(latent_mean=latent_mean, reconstruction=self.decode_mean(params, latent_mean),
                            samples=samples, masked_steps=masked_steps, state=state, discrete_path=path)


class SequenceProblem(GradientProblem):
    """Loss of one sequence as a function of all parameters and the mean-field state.

    With ``natural=False`` the global parameters enter the graph through plain bijectors and
    their gradients are Euclidean.
    """

    def __init__(self, model: SVAE, params: Dict[str, np.ndarray], x: np.ndarray, eps: np.ndarray,
                 mask: Optional[np.ndarray] = None, objective_name: str = "elbo",
                 bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
                 max_iters: int = 100, tol: float = 1e-8, prior_weight: float = 1.0,
                 natural: bool = True):
        if objective_name not in OBJECTIVES:
            raise ConfigError(f"unknown objective {objective_name!r}")
        self.model = model
        self.params = params
        self.x = np.asarray(x, dtype=float)
        self.eps = np.asarray(eps, dtype=float)
        self.mask = mask
        self.weights = model.observed_weights(mask, self.x.shape[0])
        self.objective_name = objective_name
        self.bp = bp
        self.parallelism = parallelism
        self.max_iters = max_iters
        self.tol = tol
        self.prior_weight = prior_weight
        self.natural = natural

    def _setup(self, params: Dict[str, Any]):
        g, etas, mus = self.model.global_stats(params, self.natural)
        return g, etas, mus, self.model.encode(params, self.x, self.mask)

    def _value(self, params, g, etas, mus, recognition, state) -> Any:
        surrogate = self.objective_name == "surrogate"
        pkl, kl_z, kl_k, recon, lam = self.model.terms(
            params, self.x, self.eps, self.weights, g, etas, mus, recognition, state,
            self.prior_weight, with_reconstruction=not surrogate)
        if surrogate:
            return -objective.surrogate_loss(lam, pkl, kl_z + kl_k)
        return -objective.elbo(recon, pkl, kl_z + kl_k)

    def solve(self) -> MeanFieldState:
        g, _, _, recognition = self._setup(self.params)
        return meanfield.block_update(g, recognition.astuple(), max_iters=self.max_iters, tol=self.tol,
                                      bp=self.bp, parallelism=self.parallelism)

    def flatten(self, state: MeanFieldState) -> np.ndarray:
        return meanfield.state_flat(state)

    def loss(self, params: Dict[str, Any], omega: Any) -> Any:
        g, etas, mus, recognition = self._setup(params)
        omega_z, omega_k = meanfield.unflatten_omega(omega, g, recognition.astuple())
        fr, sr = meanfield.run_bp(omega_z, self.bp, self.parallelism)
        mu_k = hmm_bp.forward_backward(omega_k) if omega_k is not None else None
        state = MeanFieldState(omega_z=omega_z, omega_k=omega_k, mu_z=sr, mu_k=mu_k, filtered=fr)
        return self._value(params, g, etas, mus, recognition, state)

    def residual(self, params: Dict[str, Any], omega: Any) -> Any:
        g, _, _, recognition = self._setup(params)
        return meanfield.g_residual(omega, g, recognition.astuple(), self.bp, self.parallelism)

    def unrolled_loss(self, params: Dict[str, Any], n_sweeps: int) -> Any:
        g, etas, mus, recognition = self._setup(params)
        state = meanfield.unrolled_sweeps(g, recognition.astuple(), n_sweeps, self.bp, self.parallelism)
        return self._value(params, g, etas, mus, recognition, state)


@dataclass
class TrainState:
    """Parameters and optimizer state carried between steps"""
    params: Dict[str, np.ndarray]
    adam: Adam
    natgrad: NaturalGradientAscent
    step: int = 0
    global_adam: Optional[Adam] = None


def _mean_dict(dicts: Sequence[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    return {name: sum(d[name] for d in dicts) / len(dicts) for name in dicts[0]} if dicts else {}


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    fields = ("prior_kl", "local_kl_continuous", "local_kl_discrete", "reconstruction", "elbo",
              "surrogate")
    return LossBreakdown(**{f: float(np.mean([getattr(p, f) for p in parts])) for f in fields})


def _check_finite(result: GradientResult, index: int):
    if not np.isfinite(result.loss):
        raise NonFinite(f"loss of sequence {index} is not finite")
    for name, g in result.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"gradient of {name} for sequence {index} is not finite")


def train_step(model: SVAE, state: TrainState, batch: Sequence[np.ndarray],
               noise: Sequence[np.ndarray], mode: GradMode, stage: int = 3,
               masks: Optional[Sequence[Optional[np.ndarray]]] = None,
               update_networks: bool = True, update_globals: bool = True,
               biased: bool = False, bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
               max_iters: int = 100, tol: float = 1e-8, n_data: int = 1,
               workers: int = 1, natural: bool = True) -> StepReport:
    """One optimizer step on a batch.

    Stage 1 fits the networks as a per-step VAE. Stage 2 follows the surrogate objective and
    stage 3 the ELBO; network weights move by Adam and the global parameters by natural
    gradient ascent with step ``state.natgrad.lr``, or by ``state.global_adam`` on their plain
    gradients when ``natural`` is off. ``n_data`` scales the prior KL share
    of each sequence so a batch step approximates the full-data objective.
    """
    if not batch:
        raise ConfigError("training batch is empty")
    masks = list(masks) if masks is not None else [None] * len(batch)
    params = state.params
    net_names = model.network_names(params)

    if stage == 1:
        net_params = {n: params[n] for n in net_names}
        grads, parts = [], []
        for i, (x, eps) in enumerate(zip(batch, noise)):
            value, grad = value_and_grad(lambda p, x=x, eps=eps, m=masks[i]: model.vae_loss(
                {**params, **p}, x, eps, m), net_params)
            if not np.isfinite(value):
                raise NonFinite(f"stage-1 loss of sequence {i} is not finite")
            kl, recon = model.vae_terms(params, x, eps, masks[i])
            parts.append(LossBreakdown(prior_kl=0.0, local_kl_continuous=float(kl), local_kl_discrete=0.0,
                                       reconstruction=float(recon), elbo=-value, surrogate=-value))
            grads.append(grad)
        if update_networks:
            state.params = state.adam.step(params, _mean_dict(grads))
        state.step += 1
        return StepReport(step=state.step, stage=stage, loss=_mean_breakdown(parts))

    if update_globals and not natural and state.global_adam is None:
        raise ConfigError("plain global updates need an Adam optimizer for the global parameters")
    objective_name = "surrogate" if stage == 2 else "elbo"

    def run(i: int) -> Tuple[GradientResult, LossBreakdown, int]:
        problem = SequenceProblem(model, params, batch[i], noise[i], masks[i], objective_name, bp,
                                  parallelism, max_iters, tol, prior_weight=1.0 / n_data, natural=natural)
        solved = problem.solve()
        result = compute_gradient(problem, mode, solved, with_partial=biased)
        _check_finite(result, i)
        breakdown = model.loss(params, batch[i], noise[i], masks[i], state=solved, bp=bp,
                               parallelism=parallelism, max_iters=max_iters, tol=tol,
                               prior_weight=1.0 / n_data)
        return result, breakdown, solved.iters

    if workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(len(batch))))
    else:
        outcomes = [run(i) for i in range(len(batch))]

    results = [o[0] for o in outcomes]
    updated = dict(params)
    if update_networks:
        updated = state.adam.step(updated, _mean_dict([network_gradient(r) for r in results]))
    if update_globals:
        directions = _mean_dict([natural_gradient(r, biased=biased) for r in results])
        directions = {name: n_data * d for name, d in directions.items()}
        if natural:
            updated = state.natgrad.step(updated, directions)
        else:
            updated = state.global_adam.step(updated, {name: -d for name, d in directions.items()})
    state.params = updated
    state.step += 1
    return StepReport(
        step=state.step, stage=stage, loss=_mean_breakdown([o[1] for o in outcomes]),
        richardson_iters=max(r.richardson_iters for r in results),
        stored_states=max(r.stored_states for r in results),
        residual=max(r.residual for r in results),
        fell_back=sum(int(r.fell_back) for r in results),
        sweeps=[o[2] for o in outcomes],
    )

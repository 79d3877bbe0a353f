"""Brute-force references and random valid instances for checking the inference code"""
import itertools
from typing import Dict, Optional, Tuple

import numpy as np

from ..models.chain import ChainPotentials, SmoothResult
from ..models.family import FamilyDescriptor, FamilyKind
from ..models.hmm import HmmPotentials
from ..models.meanfield import GlobalExpectedStats
from . import expfam
from .meanfield import global_expected_stats

LOG_2PI = np.log(2.0 * np.pi)


# Random instances

def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0, floor: float = 0.5) -> np.ndarray:
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + floor * np.eye(n))


def random_chain(rng: np.random.Generator, T: int, D: int, coupling: float = 0.5) -> ChainPotentials:
    """Chain potentials of a stable Gaussian chain with diagonal recognition potentials"""
    h1, J11, J12, J22, h2 = [], [], [], [], []
    for _ in range(T - 1):
        A = coupling * rng.standard_normal((D, D)) / np.sqrt(D)
        b = 0.3 * rng.standard_normal(D)
        Q_inv = np.linalg.inv(random_spd(rng, D))
        # exp(-1/2 (z' - A z - b)' Q^-1 (z' - A z - b)) in chain form
        J11.append(A.T @ Q_inv @ A)
        h1.append(A.T @ Q_inv @ b)
        J12.append(A.T @ Q_inv)
        J22.append(Q_inv)
        h2.append(Q_inv @ b)

    def stacked(blocks, shape):
        return np.array(blocks) if blocks else np.zeros((0,) + shape)

    R = np.array([np.diag(rng.uniform(0.2, 2.0, D)) for _ in range(T)])
    return ChainPotentials(
        h0=rng.standard_normal(D), J0=random_spd(rng, D),
        h1=stacked(h1, (D,)), J11=stacked(J11, (D, D)), J12=stacked(J12, (D, D)),
        J22=stacked(J22, (D, D)), h2=stacked(h2, (D,)),
        r=rng.standard_normal((T, D)), R=R,
    )


def random_hmm(rng: np.random.Generator, K: int, Tk: int, normalized: bool = True) -> HmmPotentials:
    log_pi0 = np.log(rng.dirichlet(np.ones(K)))
    log_pi = np.log(rng.dirichlet(np.ones(K), size=K))
    if not normalized:
        log_pi0 = log_pi0 - rng.uniform(0, 1)
        log_pi = log_pi - rng.uniform(0, 1, size=(K, 1))
    return HmmPotentials(log_pi0=log_pi0, log_pi=log_pi, obs=rng.standard_normal((Tk, K)))


def random_canonical(rng: np.random.Generator, family: FamilyDescriptor) -> Tuple[np.ndarray, ...]:
    """Valid canonical parameters for ``family``"""
    n, m = family.n, family.m
    if family.kind == FamilyKind.MVN:
        return rng.standard_normal(n), random_spd(rng, n)
    if family.kind == FamilyKind.NIW:
        return random_spd(rng, n), rng.standard_normal(n), rng.uniform(0.5, 3.0), n - 1 + rng.uniform(1.0, 5.0)
    if family.kind == FamilyKind.MNIW:
        return (random_spd(rng, n), rng.standard_normal((n, m)), random_spd(rng, m),
                n - 1 + rng.uniform(1.0, 5.0))
    if family.kind == FamilyKind.DIRICHLET:
        return (rng.uniform(0.5, 5.0, n),)
    return (rng.standard_normal(n),)


def random_natural(rng: np.random.Generator, family: FamilyDescriptor) -> np.ndarray:
    return np.asarray(expfam.to_natural(family, random_canonical(rng, family)), dtype=float)


def random_global_stats(rng: np.random.Generator, D: int, K: int,
                        concentration: float = 20.0) -> Tuple[GlobalExpectedStats, Dict[str, np.ndarray]]:
    """Expected statistics of random NIW/MNIW/Dirichlet posteriors with stable dynamics.

    Returns the assembled statistics and the natural parameters keyed like model parameters.
    """
    niw = FamilyDescriptor.niw(D)
    mniw = FamilyDescriptor.mniw(D, D + 1)
    etas: Dict[str, np.ndarray] = {}
    etas["glob.init"] = np.asarray(expfam.to_natural(
        niw, (np.eye(D) * D, np.zeros(D), 1.0, D + 2.0)), dtype=float)
    for k in range(K):
        A = 0.9 * np.linalg.qr(rng.standard_normal((D, D)))[0]
        M = np.hstack([A, 0.2 * rng.standard_normal((D, 1))])
        dof = float(D + concentration)
        S = random_spd(rng, D, scale=0.1) * dof
        etas[f"glob.dyn.{k}"] = np.asarray(expfam.to_natural(mniw, (S, M, np.eye(D + 1) * concentration, dof)),
                                           dtype=float)
    if K > 1:
        etas["glob.pi0"] = np.ones(K) * 2.0
        for k in range(K):
            etas[f"glob.pi.{k}"] = np.ones(K) + 8.0 * np.eye(K)[k] + rng.uniform(0, 1, K)

    g = stats_from_naturals(etas, D, K)
    return g, etas


def stats_from_naturals(etas: Dict[str, np.ndarray], D: int, K: int) -> GlobalExpectedStats:
    niw = FamilyDescriptor.niw(D)
    mniw = FamilyDescriptor.mniw(D, D + 1)
    dirichlet = FamilyDescriptor.dirichlet(K)
    init_mu = expfam.expected_stats(niw, etas["glob.init"])
    dyn_mus = [expfam.expected_stats(mniw, etas[f"glob.dyn.{k}"]) for k in range(K)]
    if K == 1:
        return global_expected_stats(init_mu, dyn_mus, D)
    pi0_mu = expfam.expected_stats(dirichlet, etas["glob.pi0"])
    pi_mus = [expfam.expected_stats(dirichlet, etas[f"glob.pi.{k}"]) for k in range(K)]
    return global_expected_stats(init_mu, dyn_mus, D, pi0_mu, pi_mus)


# Dense Gaussian reference

def dense_joint(p: ChainPotentials) -> Tuple[np.ndarray, np.ndarray]:
    """Joint precision (TD x TD) and linear term (TD) of the whole chain"""
    T, D = p.T, p.D
    J = np.zeros((T * D, T * D))
    h = np.zeros(T * D)

    def blk(t):
        return slice(t * D, (t + 1) * D)

    J[blk(0), blk(0)] += p.J0
    h[blk(0)] += p.h0
    for t in range(T):
        J[blk(t), blk(t)] += p.R[t]
        h[blk(t)] += p.r[t]
    for t in range(T - 1):
        a, b = blk(t), blk(t + 1)
        J[a, a] += p.J11[t]
        J[b, b] += p.J22[t]
        J[a, b] -= p.J12[t]
        J[b, a] -= p.J12[t].T
        h[a] -= p.h1[t]
        h[b] += p.h2[t]
    return J, h


def dense_chain_oracle(p: ChainPotentials) -> Dict[str, np.ndarray]:
    """Means, covariances, cross second moments and logZ by dense inversion"""
    T, D = p.T, p.D
    J, h = dense_joint(p)
    cov = np.linalg.inv(J)
    mean = cov @ h
    _, logdet = np.linalg.slogdet(J)
    logZ = 0.5 * h @ mean - 0.5 * logdet + 0.5 * T * D * LOG_2PI
    means = mean.reshape(T, D)
    covs = np.array([cov[t * D:(t + 1) * D, t * D:(t + 1) * D] for t in range(T)])
    cross = np.array([cov[t * D:(t + 1) * D, (t + 1) * D:(t + 2) * D] + np.outer(means[t], means[t + 1])
                      for t in range(T - 1)]).reshape(T - 1, D, D)
    return {"mean": means, "cov": covs, "cross": cross, "logZ": logZ}


# Path enumeration

def hmm_enumerate(p: HmmPotentials) -> Dict[str, np.ndarray]:
    """Marginals and logZ by summing over all K^Tk paths"""
    K, Tk = p.K, p.Tk
    log_pi0, log_pi, obs = (np.asarray(a, dtype=float) for a in (p.log_pi0, p.log_pi, p.obs))
    paths = np.array(list(itertools.product(range(K), repeat=Tk)))
    scores = log_pi0[paths[:, 0]] + obs[np.arange(Tk)[None, :], paths].sum(axis=1)
    for t in range(1, Tk):
        scores = scores + log_pi[paths[:, t - 1], paths[:, t]]
    top = np.max(scores)
    weights = np.exp(scores - top)
    logZ = top + np.log(np.sum(weights))
    probs = weights / np.sum(weights)
    marginal = np.zeros((Tk, K))
    for t in range(Tk):
        np.add.at(marginal[t], paths[:, t], probs)
    entropy_term = float(np.sum(probs * (scores - logZ)))
    return {"marginal": marginal, "logZ": logZ, "neg_entropy": entropy_term, "paths": paths,
            "probs": probs, "scores": scores}


def hmm_kl_enumerate(p: HmmPotentials, prior: Optional[HmmPotentials] = None) -> float:
    """KL(q || p_bar) over paths, with p_bar the potential-free chain normalized over paths"""
    if prior is None:
        prior = HmmPotentials(p.log_pi0, p.log_pi, np.zeros((p.Tk, p.K)))
    q = hmm_enumerate(p)
    base = hmm_enumerate(prior)
    log_q = q["scores"] - q["logZ"]
    log_p = base["scores"] - base["logZ"]
    return float(np.sum(q["probs"] * (log_q - log_p)))


# Conjugate statistics

def chain_sufficient_stats(mu: SmoothResult) -> Dict[str, np.ndarray]:
    """Expected NIW and MNIW statistics of a single-state chain posterior.

    glob.init collects [E z1 z1', E z1, 1, 1]; glob.dyn.0 sums [E y y', E y u', E u u', 1] over
    transitions with y = z_{t+1} and u = [z_t; 1].
    """
    Ez, Ezz, cross = (np.asarray(a, dtype=float) for a in (mu.Ez, mu.Ezz, mu.Ezz_next))
    T, D = Ez.shape
    init = expfam.pack(FamilyDescriptor.niw(D), [Ezz[0], Ez[0], 1.0, 1.0])
    yy = np.zeros((D, D))
    yu = np.zeros((D, D + 1))
    uu = np.zeros((D + 1, D + 1))
    for t in range(T - 1):
        yy += Ezz[t + 1]
        yu[:, :D] += cross[t].T
        yu[:, D] += Ez[t + 1]
        uu[:D, :D] += Ezz[t]
        uu[:D, D] += Ez[t]
        uu[D, :D] += Ez[t]
        uu[D, D] += 1.0
    dyn = expfam.pack(FamilyDescriptor.mniw(D, D + 1), [yy, yu, uu, float(T - 1)])
    return {"glob.init": np.asarray(init), "glob.dyn.0": np.asarray(dyn)}

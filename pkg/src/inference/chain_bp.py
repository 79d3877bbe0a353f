"""Sequential information-form belief propagation on a Gaussian chain"""
from typing import Any, Optional, Tuple

import numpy as np
import structlog

from ..autodiff import ops
from ..models.chain import ChainPotentials, FilterResult, SmoothResult

logger = structlog.get_logger(__name__)


def kalman_filter(p: ChainPotentials) -> FilterResult:
    """Forward pass: filtered and predicted natural parameters plus the log partition.

    Every eliminated variable contributes its (D/2) log 2pi so that logZ equals the
    normalizer of the dense joint Gaussian.
    """
    T, D = p.T, p.D
    half_log_2pi = 0.5 * D * ops.LOG_2PI

    F = ops.sym(p.J0 + p.R[0])
    f = p.h0 + p.r[0]
    Fs, fs, Fps, fps, Ps = [F], [f], [], [], []
    logZ = 0.0
    for t in range(1, T):
        # Predict
        P = F + p.J11[t - 1]
        v = f - p.h1[t - 1]
        J12 = p.J12[t - 1]
        P_inv_J12 = ops.cho_solve(P, J12, where="predict", index=t)
        P_inv_v = ops.solve_vec(P, v, where="predict", index=t)
        Fp = ops.sym(p.J22[t - 1] - ops.matmul(ops.mT(J12), P_inv_J12))
        fp = p.h2[t - 1] + ops.matvec(ops.mT(J12), P_inv_v)
        logZ = logZ + 0.5 * ops.inner(v, P_inv_v) - 0.5 * ops.logdet(P, where="predict", index=t) \
            + half_log_2pi

        # Measurement
        F = Fp + p.R[t]
        f = fp + p.r[t]
        Ps.append(P)
        Fps.append(Fp)
        fps.append(fp)
        Fs.append(F)
        fs.append(f)

    # Finalize
    logZ = logZ + 0.5 * ops.inner(f, ops.solve_vec(F, f, where="finalize", index=T - 1)) \
        - 0.5 * ops.logdet(F, where="finalize", index=T - 1) + half_log_2pi

    empty_vec, empty_mat = np.zeros((0, D)), np.zeros((0, D, D))
    return FilterResult(
        f=ops.stack(fs),
        F=ops.stack(Fs),
        fp=ops.stack(fps) if fps else empty_vec,
        Fp=ops.stack(Fps) if Fps else empty_mat,
        P=ops.stack(Ps) if Ps else empty_mat,
        logZ=logZ,
    )


def moments(F: Any, f: Any, where: str = "moments", index: Optional[int] = None) -> Tuple[Any, Any]:
    """Mean and covariance from precision ``F`` and linear term ``f``"""
    cov = ops.inv_spd(F, where=where, index=index)
    return ops.matvec(cov, f), cov


def kalman_smooth(p: ChainPotentials, fr: FilterResult) -> SmoothResult:
    """Backward pass: smoothed natural parameters and expected statistics"""
    T, D = p.T, p.D
    Fs_next, fs_next = fr.F[T - 1], fr.f[T - 1]
    mu_next, cov_next = moments(Fs_next, fs_next, where="smooth", index=T - 1)

    Fs_list, fs_list, mus, covs, Cs, cross = [Fs_next], [fs_next], [mu_next], [cov_next], [], []
    for t in range(T - 2, -1, -1):
        J12 = p.J12[t]
        C = Fs_next - fr.Fp[t] + p.J22[t]
        C_inv_J12T = ops.cho_solve(C, ops.mT(J12), where="smooth", index=t)
        Fs_t = ops.sym(fr.F[t] + p.J11[t] - ops.matmul(J12, C_inv_J12T))
        rhs = fs_next - fr.fp[t] + p.h2[t]
        fs_t = fr.f[t] - p.h1[t] + ops.matvec(J12, ops.solve_vec(C, rhs, where="smooth", index=t))
        mu_t, cov_t = moments(Fs_t, fs_t, where="smooth", index=t)

        # Cov(z_t, z_{t+1}) = inv(Fs_t) J12 inv(C)
        cross_cov = ops.cho_solve(Fs_t, ops.mT(C_inv_J12T), where="smooth", index=t)
        cross.append(cross_cov + ops.outer(mu_t, mu_next))

        Cs.append(C)
        Fs_list.append(Fs_t)
        fs_list.append(fs_t)
        mus.append(mu_t)
        covs.append(cov_t)
        Fs_next, fs_next, mu_next = Fs_t, fs_t, mu_t

    Ez = ops.stack(mus[::-1])
    cov = ops.stack(covs[::-1])
    return SmoothResult(
        fs=ops.stack(fs_list[::-1]),
        Fs=ops.stack(Fs_list[::-1]),
        C=ops.stack(Cs[::-1]) if Cs else np.zeros((0, D, D)),
        Ez=Ez,
        Ezz=cov + ops.outer(Ez, Ez),
        Ezz_next=ops.stack(cross[::-1]) if cross else np.zeros((0, D, D)),
    )


def sample_with_noise(p: ChainPotentials, fr: FilterResult, eps: Any) -> Any:
    """Reparameterized backward sampling; ``eps`` is (S, T, D) standard normal noise.

    z_T ~ N(F_T^-1 f_T, F_T^-1) and, going back, z_t | z_{t+1} has precision F_t + J11 and
    linear term f_t - h1 + J12 z_{t+1}. Returns samples of shape (S, T, D).
    """
    T = p.T
    eps = eps if ops.is_tensor(eps) else np.asarray(eps, dtype=float)

    def draw(precision, linear, noise, index):
        # linear: (S, D), noise: (S, D)
        chol = ops.cholesky(precision, where="sample", index=index)
        mean = ops.mT(ops.cho_solve(precision, ops.mT(linear), where="sample", index=index))
        spread = ops.mT(ops.solve_triangular(chol, ops.mT(noise), trans=True))
        return mean + spread

    n_samples = ops.shape(eps)[0]
    ones = np.ones((n_samples, 1))
    z = draw(fr.F[T - 1], ones * fr.f[T - 1], eps[:, T - 1], T - 1)
    samples = [z]
    for t in range(T - 2, -1, -1):
        linear = (fr.f[t] - p.h1[t]) * ones + ops.matmul(z, ops.mT(p.J12[t]))
        z = draw(fr.F[t] + p.J11[t], linear, eps[:, t], t)
        samples.append(z)
    return ops.stack(samples[::-1], axis=1)


def sample_posterior(p: ChainPotentials, fr: FilterResult, rng: np.random.Generator,
                     n_samples: int = 1) -> np.ndarray:
    """Posterior samples of shape (n_samples, T, D) from a seeded generator"""
    eps = rng.standard_normal((n_samples, p.T, p.D))
    return sample_with_noise(p, fr, eps)


def log_partition(p: ChainPotentials) -> Any:
    return kalman_filter(p).logZ


def infer(p: ChainPotentials) -> Tuple[FilterResult, SmoothResult]:
    """Filter then smooth"""
    fr = kalman_filter(p)
    return fr, kalman_smooth(p, fr)

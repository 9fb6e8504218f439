"""Beta-distribution fitting (method of moments), the max-normalized Gaussian
kernel, the focal-length variance objective, and cosine-similarity certainty
statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import NoValidQuadruples, TooFewSamples

AB_MIN = 0.01
AB_MAX = 1e4
SIGMA_FLOOR = 1e-3
SAMPLE_CLAMP = 1e-4
PDF_CLAMP = 1e-6


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclass(frozen=True)
class CertaintyStats:
    a_mu: float
    a_sigma: float
    n: int


def fit_beta(samples) -> BetaParams:
    """Method-of-moments Beta fit on samples in (0, 1).

    nu = m(1-m)/v - 1, alpha = m*nu, beta = (1-m)*nu, clamped to
    [AB_MIN, AB_MAX].  Near-zero variance returns high-concentration
    parameters with nu = AB_MAX split by the mean.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 3:
        raise TooFewSamples(f"need >= 3 samples, got {x.size}")
    x = np.clip(x, SAMPLE_CLAMP, 1.0 - SAMPLE_CLAMP)
    m = float(x.mean())
    v = float(x.var())  # population variance
    if v < 1e-8:
        nu = AB_MAX
    else:
        nu = m * (1.0 - m) / v - 1.0
    # cap the concentration, not alpha/beta separately: clipping both at
    # AB_MAX would silently pull the fitted mean toward 0.5
    nu = min(nu, AB_MAX / max(m, 1.0 - m))
    alpha = float(np.clip(m * nu, AB_MIN, AB_MAX))
    beta = float(np.clip((1.0 - m) * nu, AB_MIN, AB_MAX))
    return BetaParams(alpha, beta)


def beta_log_norm(alpha, beta):
    """log of the Beta normalization constant B(alpha, beta)."""
    return gammaln(alpha) + gammaln(beta) - gammaln(alpha + beta)


def beta_log_pdf(params: BetaParams, x):
    """Beta log-density with x clamped into the open support."""
    xc = np.clip(np.asarray(x, dtype=float), PDF_CLAMP, 1.0 - PDF_CLAMP)
    return (
        (params.alpha - 1.0) * np.log(xc)
        + (params.beta - 1.0) * np.log1p(-xc)
        - beta_log_norm(params.alpha, params.beta)
    )


def beta_log_pdf_grad(alpha, beta, x):
    """d/dx of the Beta log-density; zero where x hits the clamp."""
    x = np.asarray(x, dtype=float)
    inside = (x > PDF_CLAMP) & (x < 1.0 - PDF_CLAMP)
    xc = np.clip(x, PDF_CLAMP, 1.0 - PDF_CLAMP)
    g = (alpha - 1.0) / xc - (beta - 1.0) / (1.0 - xc)
    return np.where(inside, g, 0.0)


def beta_log_pdf_arrays(alpha, beta, x):
    """Vectorized log-density for per-quadruple (alpha, beta) arrays."""
    xc = np.clip(np.asarray(x, dtype=float), PDF_CLAMP, 1.0 - PDF_CLAMP)
    return (
        (alpha - 1.0) * np.log(xc)
        + (beta - 1.0) * np.log1p(-xc)
        - beta_log_norm(alpha, beta)
    )


def gauss_kernel(x, mu, sigma):
    """Max-normalized Gaussian: exp(-(x-mu)^2 / (2 sigma^2)), peak value 1."""
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    d = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-0.5 * d * d)


def certainty(feature_mean, member_features) -> CertaintyStats:
    """Mean / std of cosine similarities of members to the mean feature."""
    members = np.atleast_2d(np.asarray(member_features, dtype=float))
    if members.shape[0] < 2:
        raise TooFewSamples(f"need >= 2 members, got {members.shape[0]}")
    mean = np.asarray(feature_mean, dtype=float)
    mean = mean / max(np.linalg.norm(mean), 1e-12)
    norms = np.maximum(np.linalg.norm(members, axis=1), 1e-12)
    sims = members @ mean / norms
    return CertaintyStats(
        a_mu=float(np.clip(sims.mean(), -1.0, 1.0)),
        a_sigma=float(max(sims.std(), SIGMA_FLOOR)),
        n=int(members.shape[0]),
    )


def feature_variance_objective(angles, ratios, valid):
    """Sum over quadruples of per-image population variances of R and A/pi.

    angles, ratios: (n_images, M); valid: (n_images, M) bool marking quads
    whose four keypoints are all visible in that image.  Quadruples with
    fewer than 2 valid images are skipped.
    """
    angles = np.asarray(angles, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    counts = valid.sum(axis=0)
    keep = counts >= 2
    if not np.any(keep):
        raise NoValidQuadruples("no quadruple visible in >= 2 images")
    total = 0.0
    for feats in (ratios, angles / np.pi):
        f = np.where(valid, feats, 0.0)
        n = counts[keep]
        s1 = f[:, keep].sum(axis=0)
        s2 = (f[:, keep] ** 2).sum(axis=0)
        total += float(np.sum(s2 / n - (s1 / n) ** 2))
    return total

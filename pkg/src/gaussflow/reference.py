"""Reference posterior means for the radial test model by quadrature."""

import numpy as np
from scipy.special import gammaln, ive


def radial_posterior_mean(d, sigma_x, sigma_y, y, n_grid=20001):
    """Posterior mean of x under N(1, sigma_x^2 I) prior and y ~ N(||x||,
    sigma_y^2), for any dimension ``d``.

    On the sphere of radius r the prior restricted to directions is a von
    Mises-Fisher law with concentration k = r sqrt(d) / sigma_x^2 about the
    diagonal, so the direction integral has a closed form in modified Bessel
    functions and only the radius needs numerical quadrature.
    """
    y = float(np.squeeze(y))
    nu = 0.5 * d - 1.0
    # the likelihood confines the radius to y +- 12 sigma_y
    lo = max(0.0, y - 12.0 * sigma_y)
    hi = max(y + 12.0 * sigma_y, 12.0 * sigma_y)
    r = np.linspace(lo, hi, n_grid)
    k = r * np.sqrt(d) / sigma_x**2
    pos = k > 0
    ks = np.where(pos, k, 1.0)
    # log of I_nu(k) / k^nu, with its k -> 0 limit
    log_dir = np.where(pos, np.log(ive(nu, ks)) + ks - nu * np.log(ks), -nu * np.log(2.0) - gammaln(nu + 1.0))
    with np.errstate(divide="ignore"):
        log_r = (d - 1) * np.log(r) if d > 1 else np.zeros_like(r)
    logp = log_r - 0.5 * r**2 / sigma_x**2 + log_dir - 0.5 * (y - r) ** 2 / sigma_y**2
    w = np.exp(logp - np.max(logp))
    ratio = np.where(pos, ive(nu + 1.0, ks) / ive(nu, ks), 0.0)
    num = np.trapezoid(w * r * ratio, r)
    den = np.trapezoid(w, r)
    return np.full(d, num / den / np.sqrt(d))

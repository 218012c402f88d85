"""Penalized GLM fitting: PIRLS inner loop, restricted-likelihood
smoothing-parameter selection.

The fitting criterion is the Laplace-approximate restricted marginal
likelihood on the deviance scale,

    -(D + b'S b)/(2 phi) - (n - p + M)/2 log(2 pi phi)
    + 1/2 log|S_lambda|_+ - 1/2 log|X'WX + S_lambda|
    - 1/2 sum log V(y + 1/6),

where S_lambda sums every penalty block times its multiplier, M is its
rank over the penalized subspace (pseudo-determinant), p the number of
coefficients, and the last term carries the scale dependence of the
saturated quasi-likelihood (identically zero for the gaussian family,
where the criterion is the exact mixed-model restricted likelihood).
Multipliers of free blocks are optimized by quasi-Newton in log lambda;
blocks pinned to the scale parameter (prior-covariance blocks) follow
phi and are never optimized.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .exceptions import NumericalError, ValidationError
from .families import TWEEDIE, TWEEDIE_POWER_GRID, Family

LOG_LAMBDA_BOUNDS = (-15.0, 18.0)


def _multipliers(penalties, log_lambda_free, phi):
    out = np.empty(len(penalties))
    it = iter(np.atleast_1d(log_lambda_free))
    for i, pb in enumerate(penalties):
        if pb.free:
            out[i] = math.exp(float(next(it)))
        elif pb.scale_with_phi:
            if phi is None:
                raise ValidationError(
                    "a prior-covariance penalty block requires a fixed scale "
                    "parameter; profile phi explicitly"
                )
            out[i] = phi
        else:
            raise ValidationError(f"penalty block {pb.label!r} has no multiplier")
    return out


def assemble_penalty(penalties, multipliers, p):
    S = np.zeros((p, p))
    for pb, m in zip(penalties, multipliers):
        S[pb.cols, pb.cols] += m * pb.S
    return S


def penalty_log_pdet(penalties, groups, multipliers):
    """log pseudo-determinant of the assembled penalty and its rank.

    Ranks are structural (cached per column group), so the criterion
    stays continuous as multipliers drift across many octaves.
    """
    total = 0.0
    rank = 0
    for g in groups:
        M = sum(multipliers[i] * penalties[i].S for i in g.block_ids)
        eig = np.linalg.eigvalsh(M)
        top = eig[-g.rank:] if g.rank else np.empty(0)
        total += float(np.sum(np.log(np.maximum(top, 1e-300))))
        rank += g.rank
    return total, rank


def _solve_chol(A):
    jitter = 0.0
    scale = float(np.mean(np.diag(A))) or 1.0
    for attempt in range(4):
        try:
            return linalg.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            jitter = scale * 10.0 ** (-10 + 2 * attempt)
        except linalg.LinAlgError:
            jitter = scale * 10.0 ** (-10 + 2 * attempt)
    raise NumericalError("penalized normal matrix is not positive definite")


@dataclass
class PirlsResult:
    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    W: np.ndarray
    deviance: float
    penalty_value: float
    n_iter: int
    converged: bool
    chol: tuple = field(repr=False, default=None)
    XtWX: np.ndarray = field(repr=False, default=None)
    S: np.ndarray = field(repr=False, default=None)

    @property
    def penalized_deviance(self):
        return self.deviance + self.penalty_value

    def logdet_normal(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol[0]))))

    def hat_diag_complement(self):
        """diag((X'WX + S)^-1 S); effective dof per column is 1 - this."""
        return np.diag(linalg.cho_solve(self.chol, self.S))

    def edf_total(self):
        return float(self.beta.size - np.sum(self.hat_diag_complement()))


def pirls_fit(
    X,
    y,
    offset,
    family,
    penalties,
    multipliers,
    beta0=None,
    tol=1e-8,
    max_iter=200,
    max_halvings=30,
):
    """Penalized iteratively reweighted least squares.

    Converges when the relative change in penalized deviance drops
    below ``tol``; a step that raises the penalized deviance is halved
    toward the previous coefficients up to ``max_halvings`` times.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    S = assemble_penalty(penalties, multipliers, p)

    def linkinv(eta):
        return np.exp(np.clip(eta, -300.0, 300.0)) if family.log_link else eta

    def pdev_at(beta):
        eta = offset + X @ beta
        mu = linkinv(eta)
        if family.log_link:
            mu = np.maximum(mu, 1e-290)
        d = family.deviance(y, mu)
        pen = float(beta @ S @ beta)
        return d + pen, eta, mu, d, pen

    dev_acc = pen_acc = None
    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float).copy()
        pdev_old, eta, mu, dev_acc, pen_acc = pdev_at(beta)
        if not np.isfinite(pdev_old):
            beta = None
    else:
        beta = None
    if beta is None:
        mu = np.maximum(family.initial_mu(y), 1e-8 if family.log_link else -np.inf)
        eta = np.log(mu) if family.log_link else mu
        pdev_old = np.inf

    converged = False
    n_iter = 0
    chol = None
    XtWX = None
    W = None
    for n_iter in range(1, max_iter + 1):
        if family.log_link:
            W = mu * mu / family.variance(mu)
            z = (eta - offset) + (y - mu) / mu
        else:
            W = np.ones(n)
            z = y - offset
        if not np.all(np.isfinite(W)):
            raise NumericalError("non-finite working weights in PIRLS")
        XtW = X.T * W
        XtWX = XtW @ X
        chol = _solve_chol(XtWX + S)
        beta_new = linalg.cho_solve(chol, XtW @ z)
        pdev, eta_new, mu_new, dev, pen = pdev_at(beta_new)
        # Accept increases within the convergence tolerance (roundoff at
        # the fixed point); halve genuine overshoots toward the last
        # accepted coefficients.  With a heavily weighted penalty the
        # penalized deviance carries roundoff of order eps * penalty, so
        # when halving exhausts on a plateau, stay put and call it
        # converged rather than reporting divergence.
        deadband = tol * max(abs(pdev_old) if np.isfinite(pdev_old) else 1.0, 1.0)
        plateau = 1e-7 * max(abs(pdev_old) if np.isfinite(pdev_old) else 1.0, 1.0)
        halvings = 0
        plateau_stop = False
        while (
            not np.isfinite(pdev) or pdev > pdev_old + deadband
        ) and beta is not None:
            halvings += 1
            if halvings > max_halvings:
                if np.isfinite(pdev) and pdev <= pdev_old + plateau:
                    plateau_stop = True
                    break
                raise NumericalError(
                    f"PIRLS diverged: penalized deviance still rising after "
                    f"{max_halvings} step halvings (iteration {n_iter})"
                )
            beta_new = 0.5 * (beta_new + beta)
            pdev, eta_new, mu_new, dev, pen = pdev_at(beta_new)
        if plateau_stop:
            converged = True
            break
        if beta is None and not np.isfinite(pdev):
            raise NumericalError("PIRLS produced non-finite deviance at start")
        beta, eta, mu = beta_new, eta_new, mu_new
        dev_acc, pen_acc = dev, pen
        if np.isfinite(pdev_old) and abs(pdev - pdev_old) <= tol * max(abs(pdev), 1e-10):
            converged = True
            pdev_old = pdev
            break
        pdev_old = pdev
    dev, pen = dev_acc, pen_acc
    if not converged and max_iter > 1:
        raise NumericalError(f"PIRLS did not converge in {max_iter} iterations")

    # Refresh weights and factorization at the accepted coefficients so the
    # returned curvature matches beta exactly.
    if family.log_link:
        W = mu * mu / family.variance(mu)
    else:
        W = np.ones(n)
    XtWX = (X.T * W) @ X
    chol = _solve_chol(XtWX + S)
    return PirlsResult(
        beta=beta,
        eta=eta,
        mu=mu,
        W=W,
        deviance=dev,
        penalty_value=pen,
        n_iter=n_iter,
        converged=converged,
        chol=chol,
        XtWX=XtWX,
        S=S,
    )


def _criterion_value(pirls, penalties, groups, multipliers, phi, family, y, n, p):
    log_pdet, rank = penalty_log_pdet(penalties, groups, multipliers)
    return (
        -(pirls.deviance + pirls.penalty_value) / (2.0 * phi)
        - 0.5 * (n - p + rank) * math.log(2.0 * math.pi * phi)
        + 0.5 * log_pdet
        - 0.5 * pirls.logdet_normal()
        - 0.5 * family.log_saturated_variance(y)
    )


def reml_criterion(bundle, y, offset, family, log_lambda, phi, beta0=None, pirls_tol=1e-11):
    """Restricted-likelihood criterion at fixed multipliers and scale."""
    multipliers = _multipliers(bundle.penalties, log_lambda, phi)
    res = pirls_fit(
        bundle.X, y, offset, family, bundle.penalties, multipliers,
        beta0=beta0, tol=pirls_tol,
    )
    n, p = bundle.X.shape
    return _criterion_value(
        res, bundle.penalties, bundle.groups, multipliers, phi, family, y, n, p
    )


@dataclass
class GamFit:
    """A fitted penalized GLM with its smoothing-level bookkeeping."""

    design: object
    family: Family
    beta_hat: np.ndarray
    V_beta: np.ndarray
    lambda_hat: dict
    phi_hat: float
    edf: dict
    edf_blocks: dict
    edf_total: float
    reml: float
    y: np.ndarray
    offset: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    deviance: float
    null_deviance: float
    outer_iterations: int
    multipliers: np.ndarray = field(repr=False, default=None)
    warnings: tuple = ()
    frame: object = None

    @property
    def deviance_explained(self):
        if self.null_deviance <= 0:
            return 0.0
        return 1.0 - self.deviance / self.null_deviance

    @property
    def coef_full(self):
        return self.beta_hat

    @property
    def V_full(self):
        return self.V_beta

    @property
    def delta_dim(self):
        return 0

    def pearson_dispersion(self):
        return self.family.pearson_phi(self.y, self.mu, len(self.y) - self.edf_total)


def _initial_log_lambda(bundle):
    X = bundle.X
    out = []
    for pb in bundle.penalties:
        if not pb.free:
            continue
        Xb = X[:, pb.cols]
        num = float(np.sum(Xb * Xb))
        den = float(np.trace(pb.S)) or 1.0
        lam = min(max(num / den, 1e-3), 1e6)
        out.append(math.log(lam))
    return np.asarray(out)


def _edf_by_term(bundle, pirls, delta_label="detection"):
    comp = pirls.hat_diag_complement()
    f_diag = 1.0 - comp
    edf = {}
    covered = np.zeros(bundle.n_cols, dtype=bool)
    for term in bundle.terms:
        edf[term.name] = float(np.sum(f_diag[term.cols]))
        covered[term.cols] = True
    for pb in bundle.penalties:
        if pb.scale_with_phi:
            edf[delta_label] = float(np.sum(f_diag[pb.cols]))
            covered[pb.cols] = True
    edf["parametric"] = float(np.sum(f_diag[~covered]))
    blocks = {pb.label: float(np.sum(f_diag[pb.cols])) for pb in bundle.penalties}
    return edf, blocks


def optimize_lambda(
    bundle,
    y,
    offset,
    family,
    *,
    fixed_phi=None,
    lambda0=None,
    outer_maxiter=200,
    pirls_tol=1e-11,
    frame=None,
):
    """Select free smoothing multipliers by restricted likelihood.

    ``fixed_phi`` pins the scale parameter (required whenever a
    prior-covariance block is present); otherwise poisson uses 1 and the
    remaining families plug in the Pearson estimate at each outer step.
    When the tweedie power is unset, the optimization repeats over the
    candidate grid and keeps the best criterion value.
    """
    if family.kind == TWEEDIE and family.tweedie_power is None:
        best = None
        warm = lambda0
        for q in TWEEDIE_POWER_GRID:
            fit = optimize_lambda(
                bundle, y, offset, family.with_power(q),
                fixed_phi=fixed_phi, lambda0=warm,
                outer_maxiter=outer_maxiter, pirls_tol=pirls_tol, frame=frame,
            )
            warm = np.log(np.asarray([
                fit.lambda_hat[pb.label] for pb in bundle.penalties if pb.free
            ]))
            if best is None or fit.reml > best.reml:
                best = fit
        return best

    X = bundle.X
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    free = [pb for pb in bundle.penalties if pb.free]
    x0 = np.asarray(lambda0, dtype=float) if lambda0 is not None else _initial_log_lambda(bundle)
    if x0.size != len(free):
        raise ValidationError(
            f"lambda0 has {x0.size} entries for {len(free)} free penalties"
        )
    x0 = np.clip(x0, LOG_LAMBDA_BOUNDS[0] + 1.0, LOG_LAMBDA_BOUNDS[1] - 1.0)

    state = {"beta": None}

    def evaluate(loglam):
        multipliers = _multipliers(bundle.penalties, loglam, fixed_phi)
        res = pirls_fit(
            X, y, offset, family, bundle.penalties, multipliers,
            beta0=state["beta"], tol=pirls_tol,
        )
        state["beta"] = res.beta
        if fixed_phi is not None:
            phi = fixed_phi
        elif not family.has_dispersion:
            phi = 1.0
        else:
            phi = family.pearson_phi(y, res.mu, n - res.edf_total())
        crit = _criterion_value(
            res, bundle.penalties, bundle.groups, multipliers, phi, family, y, n, p
        )
        return crit, res, phi, multipliers

    fit_warnings = []
    if free:
        def objective(loglam):
            crit = evaluate(loglam)[0]
            return -crit if np.isfinite(crit) else 1e12

        res_opt = minimize(
            objective,
            x0,
            method="L-BFGS-B",
            bounds=[LOG_LAMBDA_BOUNDS] * len(free),
            options={"maxiter": outer_maxiter, "eps": 1e-5, "ftol": 1e-12, "gtol": 1e-6},
        )
        if res_opt.status == 1:
            raise NumericalError(
                f"smoothing-parameter search did not converge in "
                f"{outer_maxiter} outer iterations"
            )
        if not res_opt.success and np.max(np.abs(res_opt.jac)) > 1e-2:
            fit_warnings.append(
                f"smoothing-parameter search stopped abnormally "
                f"({res_opt.message}); projected gradient "
                f"{np.max(np.abs(res_opt.jac)):.2e}"
            )
        loglam_hat = res_opt.x
        outer_iter = int(res_opt.nit)
        at_bound = [
            pb.label
            for pb, v in zip(free, loglam_hat)
            if v <= LOG_LAMBDA_BOUNDS[0] + 1e-6 or v >= LOG_LAMBDA_BOUNDS[1] - 1e-6
        ]
        if at_bound:
            fit_warnings.append(
                "smoothing multiplier at search bound for: " + ", ".join(at_bound)
            )
    else:
        loglam_hat = np.empty(0)
        outer_iter = 0

    crit, pirls, phi, multipliers = evaluate(loglam_hat)
    V_beta = phi * linalg.cho_solve(pirls.chol, np.eye(p))
    V_beta = 0.5 * (V_beta + V_beta.T)
    lambda_hat = {pb.label: float(m) for pb, m in zip(bundle.penalties, multipliers)}

    null_dev = _null_deviance(y, offset, family)
    edf, edf_blocks = _edf_by_term(bundle, pirls)
    return GamFit(
        design=bundle,
        family=family,
        beta_hat=pirls.beta,
        V_beta=V_beta,
        lambda_hat=lambda_hat,
        phi_hat=float(phi),
        edf=edf,
        edf_blocks=edf_blocks,
        edf_total=pirls.edf_total(),
        reml=float(crit),
        y=y,
        offset=offset,
        eta=pirls.eta,
        mu=pirls.mu,
        deviance=pirls.deviance,
        null_deviance=null_dev,
        outer_iterations=outer_iter,
        multipliers=multipliers,
        warnings=tuple(fit_warnings),
        frame=frame,
    )


def _null_deviance(y, offset, family):
    ones = np.ones((len(y), 1))
    res = pirls_fit(ones, y, offset, family, [], np.empty(0), tol=1e-10)
    return res.deviance

"""Penalized spline design construction.

Univariate terms are cubic B-splines with clamped knots at quantiles of
the observed covariate and a second-order difference penalty on the
coefficients (null space: coefficient vectors constant or linear in
index). Two-dimensional terms are tensor products of marginal bases,
one difference penalty per margin. Factor smooths fit a reference-level
smooth plus per-level deviation smooths; deviation blocks share a single
smoothing parameter and carry a full-rank penalty (difference penalty
plus a unit ridge on its null space) so they shrink to zero entirely.

Every term is made identifiable against the intercept by a sum-to-zero
reparameterization over the training rows; the transform is stored so
prediction reuses it exactly. Basis evaluation outside the training
range extrapolates linearly from the boundary, continuously in value
and slope.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import ValidationError

UNIVARIATE = "univariate-spline"
TENSOR = "tensor-2d"
FACTOR_SMOOTH = "factor-smooth"

_RANK_TOL = 1e-9


@dataclass(frozen=True)
class SmoothSpec:
    """Declaration of one smooth term."""

    covariates: tuple
    basis_dim: tuple
    smooth_type: str = UNIVARIATE
    factor: str | None = None
    factor_levels: tuple | None = None
    name: str | None = None

    def __post_init__(self):
        covs = tuple(self.covariates)
        object.__setattr__(self, "covariates", covs)
        dims = self.basis_dim
        if isinstance(dims, (int, np.integer)):
            dims = (int(dims),) * len(covs)
        dims = tuple(int(d) for d in np.atleast_1d(dims))
        object.__setattr__(self, "basis_dim", dims)
        if self.smooth_type not in (UNIVARIATE, TENSOR, FACTOR_SMOOTH):
            raise ValidationError(f"unknown smooth type {self.smooth_type!r}")
        want = 2 if self.smooth_type == TENSOR else len(covs)
        if self.smooth_type == UNIVARIATE and len(covs) != 1:
            raise ValidationError("univariate smooth takes exactly one covariate")
        if self.smooth_type == TENSOR and len(covs) != 2:
            raise ValidationError("tensor smooth takes exactly two covariates")
        if self.smooth_type == FACTOR_SMOOTH:
            if self.factor is None:
                raise ValidationError("factor smooth requires a factor covariate")
            if len(covs) not in (1, 2):
                raise ValidationError("factor smooth takes one or two covariates")
        elif self.factor is not None:
            raise ValidationError("factor given for a non-factor smooth")
        if len(dims) != len(covs):
            raise ValidationError("one basis dimension per covariate required")
        if any(d < 4 for d in dims):
            raise ValidationError("basis_dim must be at least 4 per margin")
        if self.name is None:
            base = "s(" + ",".join(covs)
            if self.factor is not None:
                base += f",by={self.factor}"
            object.__setattr__(self, "name", base + ")")
        if self.factor_levels is not None:
            object.__setattr__(self, "factor_levels", tuple(str(v) for v in self.factor_levels))


def quantile_knots(values, basis_dim, degree=3):
    """Clamped knot vector with interior knots at quantiles."""
    xs = np.asarray(values, dtype=float)
    if xs.size == 0:
        raise ValidationError("no covariate values to place knots on")
    if np.unique(xs).size < basis_dim:
        raise ValidationError(
            f"fewer distinct covariate values ({np.unique(xs).size}) than "
            f"basis_dim ({basis_dim})"
        )
    lo, hi = float(xs.min()), float(xs.max())
    n_interior = basis_dim - degree - 1
    if n_interior > 0:
        probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        interior = np.quantile(xs, probs)
        if np.unique(interior).size != n_interior or interior[0] <= lo or interior[-1] >= hi:
            raise ValidationError(
                "tied quantile knots; covariate has too few distinct values "
                f"for basis_dim {basis_dim}"
            )
    else:
        interior = np.empty(0)
    return np.concatenate([[lo] * (degree + 1), interior, [hi] * (degree + 1)])


def difference_penalty(k, order=2):
    """S = D'D for the order-th difference matrix D; PSD, rank k - order."""
    D = np.diff(np.eye(k), n=order, axis=0)
    return D.T @ D


@dataclass
class MarginalBasis:
    """One margin's B-spline basis, frozen to its training knots."""

    covariate: str
    knots: np.ndarray
    degree: int = 3
    _boundary: tuple = field(default=None, repr=False)

    @property
    def n_basis(self):
        return len(self.knots) - self.degree - 1

    @property
    def lo(self):
        return float(self.knots[self.degree])

    @property
    def hi(self):
        return float(self.knots[-self.degree - 1])

    def _boundary_rows(self):
        if self._boundary is None:
            spl = BSpline(self.knots, np.eye(self.n_basis), self.degree)
            dspl = spl.derivative()
            self._boundary = (
                spl(self.lo),
                dspl(self.lo),
                spl(self.hi),
                dspl(self.hi),
            )
        return self._boundary

    def evaluate(self, values):
        """Basis rows; linear extrapolation in value and slope outside."""
        x = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValidationError(
                f"non-finite values for covariate {self.covariate!r}"
            )
        B = np.empty((x.size, self.n_basis))
        inside = (x >= self.lo) & (x <= self.hi)
        if inside.any():
            B[inside] = BSpline.design_matrix(
                x[inside], self.knots, self.degree
            ).toarray()
        below = x < self.lo
        above = x > self.hi
        if below.any() or above.any():
            b_lo, d_lo, b_hi, d_hi = self._boundary_rows()
            if below.any():
                B[below] = b_lo[None, :] + (x[below, None] - self.lo) * d_lo[None, :]
            if above.any():
                B[above] = b_hi[None, :] + (x[above, None] - self.hi) * d_hi[None, :]
        return B


def build_basis_1d(values, basis_dim, degree=3):
    """Training basis matrix, penalty and marginal for one covariate."""
    knots = quantile_knots(values, basis_dim, degree)
    marginal = MarginalBasis(covariate="", knots=knots, degree=degree)
    B = marginal.evaluate(values)
    S = difference_penalty(basis_dim)
    return B, S, marginal


def sum_to_zero_transform(B):
    """Orthonormal Z with columns spanning {c : mean(B c) = 0}."""
    m = B.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < 1e-12:
        raise ValidationError("constraint direction degenerate (zero column means)")
    Q = np.linalg.qr(m[:, None] / norm, mode="complete")[0]
    return Q[:, 1:]


def apply_constraints(B, penalties=()):
    """Sum-to-zero reparameterization of a term block.

    Returns the constrained columns, the transform Z, and each penalty
    mapped to the constrained space.
    """
    Z = sum_to_zero_transform(B)
    return B @ Z, Z, [Z.T @ S @ Z for S in penalties]


def row_kron(A, B):
    """Row-wise Kronecker product; column index = j_A * ncol(B) + j_B."""
    n = A.shape[0]
    return (A[:, :, None] * B[:, None, :]).reshape(n, A.shape[1] * B.shape[1])


def build_tensor_2d(values_x, values_y, basis_dim_x, basis_dim_y, degree=3):
    """Tensor-product basis with one marginal difference penalty each."""
    Bx, Sx, mx = build_basis_1d(values_x, basis_dim_x, degree)
    By, Sy, my = build_basis_1d(values_y, basis_dim_y, degree)
    T = row_kron(Bx, By)
    Sx_full = np.kron(Sx, np.eye(basis_dim_y))
    Sy_full = np.kron(np.eye(basis_dim_x), Sy)
    return T, Sx_full, Sy_full, (mx, my)


def _null_space_ridge(S):
    """S plus a unit ridge on its null space; full rank by construction."""
    eigval, eigvec = np.linalg.eigh(S)
    null = eigval < _RANK_TOL * max(eigval.max(), 1.0)
    N = eigvec[:, null]
    return S + N @ N.T


def matrix_rank_psd(S):
    eig = np.linalg.eigvalsh(S)
    return int(np.sum(eig > _RANK_TOL * max(eig.max(), 1.0)))


@dataclass
class PenaltyBlock:
    """A quadratic penalty on a contiguous column range of the design.

    Free blocks get their multiplier from the smoothing-parameter
    optimizer. A block with ``scale_with_phi`` uses the current scale
    parameter as its multiplier, pinning its implied Bayesian prior
    covariance at S^-1 regardless of phi.
    """

    S: np.ndarray
    start: int
    stop: int
    label: str
    free: bool = True
    scale_with_phi: bool = False

    @property
    def cols(self):
        return slice(self.start, self.stop)

    def to_dict(self):
        return {
            "S": [[float(v) for v in row] for row in self.S],
            "start": self.start,
            "stop": self.stop,
            "label": self.label,
            "free": self.free,
            "scale_with_phi": self.scale_with_phi,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            S=np.asarray(d["S"], dtype=float),
            start=int(d["start"]),
            stop=int(d["stop"]),
            label=d["label"],
            free=bool(d["free"]),
            scale_with_phi=bool(d["scale_with_phi"]),
        )


@dataclass
class SmoothTerm:
    """A built smooth term: bases, constraint transform, column range."""

    spec: SmoothSpec
    name: str
    start: int
    stop: int
    marginals: list
    constraint: np.ndarray
    factor_levels: tuple | None = None

    @property
    def cols(self):
        return slice(self.start, self.stop)

    @property
    def base_width(self):
        return self.constraint.shape[1]

    def base_columns(self, data):
        blocks = []
        for m in self.marginals:
            if m.covariate not in data:
                raise ValidationError(
                    f"term {self.name}: missing covariate {m.covariate!r}"
                )
            blocks.append(m.evaluate(data[m.covariate]))
        B = blocks[0] if len(blocks) == 1 else row_kron(blocks[0], blocks[1])
        return B @ self.constraint

    def build_columns(self, data):
        base = self.base_columns(data)
        if self.factor_levels is None:
            return base
        factor = self.spec.factor
        if factor not in data:
            raise ValidationError(f"term {self.name}: missing covariate {factor!r}")
        labels = np.asarray([str(v) for v in np.asarray(data[factor], dtype=object)])
        unknown = sorted(set(labels) - set(self.factor_levels))
        if unknown:
            raise ValidationError(
                [f"term {self.name}: level {u!r} not seen in training" for u in unknown]
            )
        # Deviation block per non-reference level: a penalized level
        # indicator (the constant the sum-to-zero constraint removed)
        # plus the constrained basis gated to that level's rows.
        blocks = [base]
        for lev in self.factor_levels[1:]:
            ind = (labels == lev).astype(float)[:, None]
            blocks.append(ind)
            blocks.append(base * ind)
        return np.hstack(blocks)

    def range_warnings(self, data):
        notes = []
        for m in self.marginals:
            x = np.asarray(data[m.covariate], dtype=float)
            n_out = int(np.sum((x < m.lo) | (x > m.hi)))
            if n_out:
                notes.append(
                    f"{n_out} values of {m.covariate!r} outside the training "
                    f"range [{m.lo:g}, {m.hi:g}]; linear extrapolation applied"
                )
        return notes

    def to_dict(self):
        return {
            "spec": {
                "covariates": list(self.spec.covariates),
                "basis_dim": list(self.spec.basis_dim),
                "smooth_type": self.spec.smooth_type,
                "factor": self.spec.factor,
                "name": self.spec.name,
            },
            "name": self.name,
            "start": self.start,
            "stop": self.stop,
            "degree": [m.degree for m in self.marginals],
            "knots": [[float(t) for t in m.knots] for m in self.marginals],
            "marginal_covariates": [m.covariate for m in self.marginals],
            "constraint": [[float(v) for v in row] for row in self.constraint],
            "factor_levels": list(self.factor_levels) if self.factor_levels else None,
        }

    @classmethod
    def from_dict(cls, d):
        spec = SmoothSpec(
            covariates=tuple(d["spec"]["covariates"]),
            basis_dim=tuple(d["spec"]["basis_dim"]),
            smooth_type=d["spec"]["smooth_type"],
            factor=d["spec"]["factor"],
            factor_levels=tuple(d["factor_levels"]) if d["factor_levels"] else None,
            name=d["spec"]["name"],
        )
        marginals = [
            MarginalBasis(covariate=cov, knots=np.asarray(kn, dtype=float), degree=deg)
            for cov, kn, deg in zip(d["marginal_covariates"], d["knots"], d["degree"])
        ]
        return cls(
            spec=spec,
            name=d["name"],
            start=int(d["start"]),
            stop=int(d["stop"]),
            marginals=marginals,
            constraint=np.asarray(d["constraint"], dtype=float),
            factor_levels=tuple(d["factor_levels"]) if d["factor_levels"] else None,
        )


@dataclass
class PenaltyGroup:
    """Penalty blocks sharing one column range, with the structural rank
    of their sum (constant in the multipliers, cached once)."""

    start: int
    stop: int
    block_ids: list
    rank: int


@dataclass
class DesignBundle:
    """Design matrix, penalty blocks and term metadata for one model."""

    X: np.ndarray | None
    penalties: list
    terms: list
    column_labels: list
    n_cols: int

    def finalize_groups(self):
        groups = []
        seen = {}
        for i, pb in enumerate(self.penalties):
            key = (pb.start, pb.stop)
            if key in seen:
                groups[seen[key]].block_ids.append(i)
            else:
                seen[key] = len(groups)
                groups.append(PenaltyGroup(pb.start, pb.stop, [i], rank=0))
        for g in groups:
            total = sum(self.penalties[i].S for i in g.block_ids)
            g.rank = matrix_rank_psd(total)
        self.groups = groups
        return groups

    def build_matrix(self, data, n_rows=None, warn_extrapolation=True):
        """Design rows for new data; intercept plus every term block."""
        if n_rows is None:
            n_rows = len(next(iter(data.values()))) if data else 0
        X = np.zeros((n_rows, self.n_cols))
        X[:, 0] = 1.0
        notes = []
        for term in self.terms:
            X[:, term.cols] = term.build_columns(data)
            notes += term.range_warnings(data)
        if notes and warn_extrapolation:
            for msg in notes:
                warnings.warn(msg, stacklevel=2)
        return X

    def to_dict(self):
        return {
            "n_cols": self.n_cols,
            "column_labels": list(self.column_labels),
            "terms": [t.to_dict() for t in self.terms],
            "penalties": [p.to_dict() for p in self.penalties],
        }

    @classmethod
    def from_dict(cls, d):
        bundle = cls(
            X=None,
            penalties=[PenaltyBlock.from_dict(p) for p in d["penalties"]],
            terms=[SmoothTerm.from_dict(t) for t in d["terms"]],
            column_labels=list(d["column_labels"]),
            n_cols=int(d["n_cols"]),
        )
        bundle.finalize_groups()
        return bundle


def build_factor_smooth(values, factor_values, basis_dim, factor_levels=None, degree=3):
    """Reference smooth plus shared-lambda full-rank deviation smooths.

    Standalone entry point for a one-covariate factor smooth; returns
    the column block, the reference penalty, the deviation penalty
    (block diagonal over non-reference levels) and the level order.
    """
    labels = np.asarray([str(v) for v in np.asarray(factor_values, dtype=object)])
    levels = tuple(factor_levels) if factor_levels else tuple(sorted(set(labels)))
    B, S, _ = build_basis_1d(values, basis_dim, degree)
    Bc, Z, (Sc,) = apply_constraints(B, [S])
    blocks = [Bc]
    for lev in levels[1:]:
        ind = (labels == lev).astype(float)[:, None]
        blocks += [ind, Bc * ind]
    X = np.hstack(blocks)
    S_dev_small = _deviation_penalty(Sc)
    m = len(levels) - 1
    S_dev = np.kron(np.eye(m), S_dev_small) if m else np.zeros((0, 0))
    return X, Sc, S_dev, levels


def _deviation_penalty(Sc):
    """Full-rank penalty for one level's deviation columns.

    Unit weight on the level indicator (the recovered constant) followed
    by the constrained margin penalty with its null space ridged.
    """
    kc = Sc.shape[0]
    out = np.zeros((kc + 1, kc + 1))
    out[0, 0] = 1.0
    out[1:, 1:] = _null_space_ridge(Sc)
    return out


def build_design(data, specs, n_rows=None):
    """Assemble intercept-plus-smooths design for the given covariates.

    ``data`` maps covariate names to columns over the model rows; factor
    columns hold string labels.
    """
    if n_rows is None:
        n_rows = len(next(iter(data.values())))
    specs = list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValidationError("smooth term names must be unique")

    X_blocks = [np.ones((n_rows, 1))]
    labels = ["intercept"]
    penalties = []
    terms = []
    col = 1
    for spec in specs:
        for cov in spec.covariates:
            if cov not in data:
                raise ValidationError(f"term {spec.name}: missing covariate {cov!r}")
        marginals = []
        margin_S = []
        for cov, k in zip(spec.covariates, spec.basis_dim):
            knots = quantile_knots(np.asarray(data[cov], dtype=float), k)
            marginals.append(MarginalBasis(covariate=cov, knots=knots))
            margin_S.append(difference_penalty(k))
        if len(marginals) == 1:
            B = marginals[0].evaluate(data[spec.covariates[0]])
            full_S = margin_S
        else:
            Bx = marginals[0].evaluate(data[spec.covariates[0]])
            By = marginals[1].evaluate(data[spec.covariates[1]])
            B = row_kron(Bx, By)
            kx, ky = spec.basis_dim
            full_S = [
                np.kron(margin_S[0], np.eye(ky)),
                np.kron(np.eye(kx), margin_S[1]),
            ]
        Bc, Z, Sc = apply_constraints(B, full_S)
        kc = Bc.shape[1]

        if spec.smooth_type == FACTOR_SMOOTH:
            if spec.factor not in data:
                raise ValidationError(
                    f"term {spec.name}: missing factor covariate {spec.factor!r}"
                )
            lab = np.asarray([str(v) for v in np.asarray(data[spec.factor], dtype=object)])
            levels = spec.factor_levels or tuple(sorted(set(lab)))
            missing = sorted(set(lab) - set(levels))
            if missing:
                raise ValidationError(
                    [f"term {spec.name}: undeclared factor level {u!r}" for u in missing]
                )
            m = len(levels) - 1
            term = SmoothTerm(
                spec=spec,
                name=spec.name,
                start=col,
                stop=col + kc + m * (kc + 1),
                marginals=marginals,
                constraint=Z,
                factor_levels=tuple(levels),
            )
            block = term.build_columns(data)
            X_blocks.append(block)
            for cov_label, S_small in zip(spec.covariates, Sc):
                penalties.append(
                    PenaltyBlock(
                        S=S_small,
                        start=col,
                        stop=col + kc,
                        label=f"{spec.name}.{cov_label}" if len(Sc) > 1 else spec.name,
                    )
                )
            if m:
                S_dev_small = _deviation_penalty(sum(Sc))
                penalties.append(
                    PenaltyBlock(
                        S=np.kron(np.eye(m), S_dev_small),
                        start=col + kc,
                        stop=term.stop,
                        label=f"{spec.name}.dev",
                    )
                )
            labels += [f"{spec.name}.{j}" for j in range(kc)]
            for lev in levels[1:]:
                labels.append(f"{spec.name}[{lev}].const")
                labels += [f"{spec.name}[{lev}].{j}" for j in range(kc)]
            col = term.stop
        else:
            term = SmoothTerm(
                spec=spec,
                name=spec.name,
                start=col,
                stop=col + kc,
                marginals=marginals,
                constraint=Z,
            )
            X_blocks.append(Bc)
            for cov_label, S_small in zip(spec.covariates, Sc):
                penalties.append(
                    PenaltyBlock(
                        S=S_small,
                        start=col,
                        stop=col + kc,
                        label=f"{spec.name}.{cov_label}" if len(Sc) > 1 else spec.name,
                    )
                )
            labels += [f"{spec.name}.{j}" for j in range(kc)]
            col = term.stop
        terms.append(term)

    bundle = DesignBundle(
        X=np.hstack(X_blocks),
        penalties=penalties,
        terms=terms,
        column_labels=labels,
        n_cols=col,
    )
    bundle.finalize_groups()
    return bundle

"""Naturalness statistics: Gamma margins coupled by a Gaussian copula.

The magnitudes of the oriented complex wavelet subbands of the two views
are modeled jointly: per scale and per orientation triple, co-located
left/right magnitudes form 6-dimensional vectors whose margins are Gamma
distributed and whose dependence is a Gaussian copula correlation matrix.
Margins and correlations are estimated by the two-step maximum-likelihood
procedure (margins first, then the correlation of the Gaussian scores).

The resulting label vector has 108 entries: 4 fits x (12 margin
parameters + 15 upper-triangle correlations); see :func:`feature_layout`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dtcwt
from .errors import ContractError, DegenerateDataError, NumericError, FormatError

CDF_CLAMP = 1e-7
MAGNITUDE_CLAMP = 1e-6

FEATURE_DIM = 108

_LN_SQRT_PI = 0.5 * math.log(math.pi)


# ---------------------------------------------------------------------------
# special functions


def _gammainc_lower_series(a: float, x: np.ndarray, max_iter: int = 400) -> np.ndarray:
    """Regularized lower incomplete gamma by series, for x < a + 1."""
    x = np.asarray(x, dtype=np.float64)
    term = np.full_like(x, 1.0 / a)
    total = term.copy()
    ap = a
    active = x > 0
    for _ in range(max_iter):
        ap += 1.0
        term = term * x / ap
        total += term
        active = active & (np.abs(term) >= np.abs(total) * 1e-16)
        if not active.any():
            break
    else:
        raise NumericError("incomplete gamma series did not converge")
    out = total * np.exp(-x + a * np.log(np.maximum(x, 1e-300)) - math.lgamma(a))
    return np.where(x <= 0.0, 0.0, out)


def _gammainc_upper_cf(a: float, x: np.ndarray, max_iter: int = 400) -> np.ndarray:
    """Regularized upper incomplete gamma by continued fraction, for x >= a + 1."""
    x = np.asarray(x, dtype=np.float64)
    tiny = 1e-300
    b = x + 1.0 - a
    c = np.full_like(x, 1.0 / tiny)
    d = 1.0 / np.maximum(b, tiny)
    h = d.copy()
    for i in range(1, max_iter + 1):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = b + an / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if np.all(np.abs(delta - 1.0) < 1e-15):
            break
    else:
        raise NumericError("incomplete gamma continued fraction did not converge")
    return h * np.exp(-x + a * np.log(np.maximum(x, tiny)) - math.lgamma(a))


def regularized_gamma_p(a: float, x) -> np.ndarray:
    """P(a, x) with absolute error below 1e-12, vectorized over x."""
    if a <= 0:
        raise ContractError("shape parameter must be positive")
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ContractError("incomplete gamma argument must be nonnegative")
    out = np.empty_like(x)
    series = x < a + 1.0
    if series.any():
        out[series] = _gammainc_lower_series(a, x[series])
    if (~series).any():
        out[~series] = 1.0 - _gammainc_upper_cf(a, x[~series])
    return out


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF via the regularized incomplete gamma."""
    x = np.asarray(x, dtype=np.float64)
    half = 0.5 * regularized_gamma_p(0.5, 0.5 * x * x)
    return np.where(x >= 0.0, 0.5 + half, 0.5 - half)


def normal_quantile(u):
    """Inverse standard normal CDF, absolute error <= 1e-8.

    A coarse rational first guess is polished by Newton iterations against
    the incomplete-gamma-based CDF.  Scalar in, scalar out; arrays pass
    through elementwise.
    """
    arr = np.asarray(u, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ContractError("normal_quantile argument must lie strictly in (0, 1)")

    lower = arr < 0.5
    p = np.where(lower, arr, 1.0 - arr)
    t = np.sqrt(-2.0 * np.log(p))
    # Abramowitz-Stegun 26.2.22 first approximation (abs err < 3e-4)
    x = t - (2.30753 + 0.27061 * t) / (1.0 + 0.99229 * t + 0.04481 * t * t)
    x = np.where(lower, -x, x)

    inv_sqrt_2pi = 1.0 / math.sqrt(2.0 * math.pi)
    for _ in range(3):
        pdf = inv_sqrt_2pi * np.exp(-0.5 * x * x)
        x = x - (_normal_cdf(x) - arr) / pdf
    return float(x[0]) if scalar else x


def _digamma(x: float) -> float:
    if x <= 0:
        raise ContractError("digamma argument must be positive")
    acc = 0.0
    while x < 8.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    tail = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))))
    return acc + math.log(x) - 0.5 / x - tail


def _trigamma(x: float) -> float:
    if x <= 0:
        raise ContractError("trigamma argument must be positive")
    acc = 0.0
    while x < 8.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv * (1.0 + inv * (0.5 + inv * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (
        1.0 / 42 - inv2 * (1.0 / 30 - inv2 * 5.0 / 66))))))
    return acc + tail


# ---------------------------------------------------------------------------
# margins


@dataclass(frozen=True)
class GammaMargin:
    """Gamma margin with scale a > 0 and shape b > 0."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and math.isfinite(self.a)
                and math.isfinite(self.b)):
            raise ContractError(f"invalid Gamma margin a={self.a}, b={self.b}")

    def log_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (-self.b * math.log(self.a) + (self.b - 1.0) * np.log(x)
                - math.lgamma(self.b) - x / self.a)


def gamma_cdf(x, margin: GammaMargin):
    """Gamma CDF = regularized lower incomplete gamma P(b, x/a)."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise ContractError("gamma_cdf argument must be nonnegative")
    out = regularized_gamma_p(margin.b, arr / margin.a)
    return float(out) if np.ndim(x) == 0 else out


def fit_gamma_mle(samples) -> GammaMargin:
    """Maximum-likelihood Gamma fit by Newton iteration on the shape.

    The shape solves log(b) - digamma(b) = log(mean) - mean(log x); the
    scale is mean/b.  Samples are sorted first so the estimate is
    bit-identical under input permutation.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if x.size < 50:
        raise ContractError(f"gamma fit needs >= 50 samples, got {x.size}")
    if np.any(x <= 0):
        raise ContractError("gamma fit samples must be positive")
    if x.var() < 1e-12:
        raise DegenerateDataError("near-constant samples: variance below 1e-12")

    mean = float(x.mean())
    s = math.log(mean) - float(np.log(x).mean())
    if s <= 0:
        raise DegenerateDataError("log-moment gap non-positive; data degenerate")

    # closed-form starting point (Minka / Thom approximation)
    b = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(100):
        f = math.log(b) - _digamma(b) - s
        fp = 1.0 / b - _trigamma(b)
        step = f / fp
        b_new = b - step
        if b_new <= 0:
            b_new = b / 2.0
        if abs(b_new - b) <= 1e-10 * max(1.0, abs(b_new)):
            b = b_new
            break
        b = b_new
    else:
        raise NumericError("gamma shape iteration did not converge")
    return GammaMargin(a=mean / b, b=b)


# ---------------------------------------------------------------------------
# copula


@dataclass
class CopulaModel:
    """Gamma margins coupled by a Gaussian copula correlation matrix."""

    margins: list
    corr: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.margins)

    def __post_init__(self):
        self.corr = np.asarray(self.corr, dtype=np.float64)
        d = len(self.margins)
        if self.corr.shape != (d, d):
            raise ContractError(f"correlation shape {self.corr.shape} != ({d},{d})")
        if not np.allclose(self.corr, self.corr.T, atol=1e-12):
            raise ContractError("correlation matrix must be symmetric")
        if np.any(np.abs(self.corr) > 1.0 + 1e-12):
            raise ContractError("correlation entries must lie in [-1, 1]")


def _gaussian_scores(x: np.ndarray, margins) -> np.ndarray:
    cols = []
    for j, margin in enumerate(margins):
        u = np.clip(gamma_cdf(x[:, j], margin), CDF_CLAMP, 1.0 - CDF_CLAMP)
        cols.append(normal_quantile(u))
    return np.column_stack(cols)


def fit_gaussian_copula(vectors) -> CopulaModel:
    """Two-step fit: Gamma margins per column, then the correlation of the
    Gaussian scores, with positive-definiteness repair by diagonal jitter."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected an n x d matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 200:
        raise ContractError(f"copula fit needs >= 200 rows, got {n}")
    if d < 2:
        raise ContractError(f"copula fit needs >= 2 columns, got {d}")

    # canonical row order: estimates become bit-identical under permutation
    order = np.lexsort(x.T[::-1])
    x = x[order]

    margins = []
    for j in range(d):
        try:
            margins.append(fit_gamma_mle(x[:, j]))
        except DegenerateDataError as exc:
            raise DegenerateDataError(f"column {j}: {exc}") from exc

    y = _gaussian_scores(x, margins)
    yc = y - y.mean(axis=0)
    cov = yc.T @ yc / n
    scale = np.sqrt(np.diag(cov))
    if np.any(scale < 1e-12):
        raise DegenerateDataError("a Gaussian-score column has zero variance")
    corr = cov / np.outer(scale, scale)
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(corr, -1.0, 1.0)
    corr = 0.5 * (corr + corr.T)

    jitter = 1e-8
    for _ in range(5):
        if np.linalg.eigvalsh(corr).min() > 1e-10:
            return CopulaModel(margins=margins, corr=corr)
        bumped = corr + jitter * np.eye(d)
        diag = np.sqrt(np.diag(bumped))
        corr = bumped / np.outer(diag, diag)
        np.fill_diagonal(corr, 1.0)
        jitter *= 10.0
    if np.linalg.eigvalsh(corr).min() > 1e-10:
        return CopulaModel(margins=margins, corr=corr)
    raise NumericError("failed to repair correlation matrix to positive definite")


def copula_log_density(x, model: CopulaModel) -> float:
    """Log joint density: Gaussian copula factor times the Gamma margins."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ContractError(f"point shape {x.shape} != ({model.dim},)")
    if np.any(x <= 0):
        raise ContractError("density point coordinates must be positive")
    sign, logdet = np.linalg.slogdet(model.corr)
    if sign <= 0:
        raise NumericError("correlation matrix is singular or indefinite")
    y = _gaussian_scores(x[None, :], model.margins)[0]
    try:
        siy = np.linalg.solve(model.corr, y)
    except np.linalg.LinAlgError as exc:
        raise NumericError("correlation matrix is singular") from exc
    quad = float(y @ siy - y @ y)
    margin_term = sum(float(m.log_pdf(x[j])) for j, m in enumerate(model.margins))
    return -0.5 * logdet - 0.5 * quad + margin_term


# ---------------------------------------------------------------------------
# feature vector assembly

_GROUP_SLOTS = {"A": (0, 1, 2), "B": (3, 4, 5)}
_UNIT_ORDER = ((1, "A"), (1, "B"), (2, "A"), (2, "B"))


def feature_layout():
    """Descriptive (scale, group, name) triple for each of the 108 slots."""
    layout = []
    for scale, group in _UNIT_ORDER:
        for dim in range(6):
            view = "L" if dim % 2 == 0 else "R"
            orient = _GROUP_SLOTS[group][dim // 2]
            layout.append((scale, group, f"gamma_scale[{view}o{orient}]"))
            layout.append((scale, group, f"gamma_shape[{view}o{orient}]"))
        for i in range(6):
            for j in range(i + 1, 6):
                layout.append((scale, group, f"corr[{i},{j}]"))
    return layout


def _unit_matrix(left_pyr, right_pyr, scale: int, group: str) -> np.ndarray:
    """Co-located 6-vectors [L_o1, R_o1, L_o2, R_o2, L_o3, R_o3] as rows."""
    cols = []
    for slot in _GROUP_SLOTS[group]:
        lmag = dtcwt.subband_magnitudes(left_pyr, scale, slot).ravel()
        rmag = dtcwt.subband_magnitudes(right_pyr, scale, slot).ravel()
        cols.append(lmag)
        cols.append(rmag)
    x = np.column_stack(cols)
    return np.maximum(x, MAGNITUDE_CLAMP)


def _pack_unit(model: CopulaModel) -> np.ndarray:
    values = []
    for margin in model.margins:
        values.append(margin.a)
        values.append(margin.b)
    d = model.dim
    for i in range(d):
        for j in range(i + 1, d):
            values.append(model.corr[i, j])
    return np.array(values, dtype=np.float64)


def extract_nss_features(left, right) -> np.ndarray:
    """108-dimensional naturalness label for one stereo pair.

    Both full views are decomposed at 2 scales; per scale and orientation
    triple a 6-dimensional copula over co-located left/right magnitudes is
    fitted and its parameters concatenated.  Deterministic: every
    co-located coefficient is used, nothing is sampled.
    """
    lp = np.asarray(left.pixels if hasattr(left, "pixels") else left, dtype=np.float64)
    rp = np.asarray(right.pixels if hasattr(right, "pixels") else right, dtype=np.float64)
    if lp.shape != rp.shape:
        raise ContractError(f"view shapes differ: {lp.shape} vs {rp.shape}")
    lp = dtcwt.pad_to_multiple(lp, 2)
    rp = dtcwt.pad_to_multiple(rp, 2)
    if (lp.shape[0] // 4) * (lp.shape[1] // 4) < 200:
        raise ContractError(
            f"views of size {lp.shape} leave fewer than 200 coarse-scale "
            "coefficients; need roughly 64x64 or larger")

    left_pyr = dtcwt.dtcwt_forward(lp, scales=2)
    right_pyr = dtcwt.dtcwt_forward(rp, scales=2)

    parts = []
    for scale, group in _UNIT_ORDER:
        unit = _unit_matrix(left_pyr, right_pyr, scale, group)
        model = fit_gaussian_copula(unit)
        parts.append(_pack_unit(model))
    features = np.concatenate(parts)
    if features.shape != (FEATURE_DIM,) or not np.all(np.isfinite(features)):
        raise NumericError("feature vector malformed or non-finite")
    return features


# ---------------------------------------------------------------------------
# standardization and feature files


class FeatureStandardizer:
    """Per-dimension affine normalization fitted on the training split."""

    VERSION = "nss-standardizer-1"

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ContractError("mean/std must be equal-length vectors")
        if np.any(std < 1e-8):
            raise ContractError("standardizer std entries must be >= 1e-8")
        self.mean = mean
        self.std = std

    @classmethod
    def fit(cls, features) -> "FeatureStandardizer":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError("fit expects an n x d feature matrix")
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8))

    @classmethod
    def identity(cls, dim: int = FEATURE_DIM) -> "FeatureStandardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.std + self.mean

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"# {self.VERSION}\n")
            fh.write(",".join(repr(float(v)) for v in self.mean) + "\n")
            fh.write(",".join(repr(float(v)) for v in self.std) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureStandardizer":
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().strip()
            if header != f"# {cls.VERSION}":
                raise FormatError(f"unexpected standardizer header {header!r}")
            mean = np.array([float(v) for v in fh.readline().split(",")])
            std = np.array([float(v) for v in fh.readline().split(",")])
        return cls(mean, std)


def standardize(features, stats: FeatureStandardizer) -> np.ndarray:
    return stats.transform(features)


def write_feature_file(path, records) -> None:
    """One line per sample: id followed by the 108 feature values."""
    with open(path, "w", encoding="ascii") as fh:
        for sample_id, vec in records:
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (FEATURE_DIM,):
                raise ContractError(f"feature vector for {sample_id!r} has "
                                    f"shape {vec.shape}")
            fh.write(sample_id + "," + ",".join(repr(float(v)) for v in vec) + "\n")


def read_feature_file(path) -> dict:
    out = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != FEATURE_DIM + 1:
                raise FormatError(
                    f"{path}:{lineno}: expected 1 id + {FEATURE_DIM} values, "
                    f"got {len(fields)} fields")
            out[fields[0]] = np.array([float(v) for v in fields[1:]])
    return out

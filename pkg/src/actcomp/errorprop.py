"""Gradient-error propagation model and its Monte Carlo validation.

The model: injecting i.i.d. U[-eb, +eb] error into a conv layer's
activations perturbs that layer's weight gradient by a near-normal error
whose standard deviation is

    sigma = a * L_bar * sqrt(N * R) * eb

where L_bar is the batch mean of each sample's maximum |loss gradient|,
N the batch size, R the fraction of nonzero activation elements (zeros
carry no error when injection preserves them), and ``a`` an empirical
coefficient.  Inverting for the error bound gives
``eb = sigma / (a * L_bar * sqrt(N * R))``.

Measurement convention: sigma is measured on the batch-summed gradient
error, i.e. N times the batch-averaged gradient difference.  That is the
convention under which sigma grows like sqrt(N) and a single coefficient
fits all batch sizes; calibration and prediction both use it.

``calibrate_a`` estimates ``a`` by direct simulation on small conv
instances.  Two regimes are built in:
  - ``multi``: concentrated loss gradients (one dominant spike per sample
    plus weak background) with 4 output channels; this is the regime the
    estimator runs in, and lands near a = 0.33.
  - ``single``: batch 1, 1x1 kernel, constant-magnitude loss gradient, so
    each gradient element sees exactly one uniform term and the analytic
    value is a = 1/sqrt(3) = 0.577.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .nn import conv2d_backward
from .tensor import Tensor, compute_stats

DEFAULT_COEFFICIENT = 0.32  # default for planning; calibration can override

HISTOGRAM_BINS = 64
_SPIKE_CV = 0.2  # spread of per-sample dominant loss-gradient magnitude
_BACKGROUND_RHO = 0.5  # background-to-spike energy ratio rho: |bg|^2 = rho^2 |spike|^2
_Z_99 = 2.3263478740408408  # standard normal quantile at 0.99


@dataclass(frozen=True)
class GradientErrorModel:
    """Predicted gradient-error distribution for one layer configuration."""

    sigma: float
    a: float
    eb: float
    L_bar: float
    N: int
    R: float

    def __post_init__(self):
        expected = self.a * self.L_bar * math.sqrt(self.N * self.R) * self.eb
        if not math.isclose(self.sigma, expected, rel_tol=1e-12, abs_tol=1e-300):
            raise ParameterError(
                f"sigma {self.sigma} inconsistent with parameters ({expected})"
            )

    @classmethod
    def from_params(cls, a: float, L_bar: float, N: int, R: float, eb: float):
        return cls(
            sigma=predict_sigma(a, L_bar, N, R, eb), a=a, eb=eb, L_bar=L_bar, N=N, R=R
        )


@dataclass(frozen=True)
class DistributionDiagnostics:
    """Empirical summary of a gradient-error sample."""

    empirical_sigma: float
    fraction_within_1sigma: float
    histogram: tuple[int, ...]
    sample_count: int
    # chi-square against a fitted normal, reported (never asserted): the
    # binding normality check is fraction_within_1sigma.
    chi_square_stat: float
    chi_square_dof: int
    chi_square_exceeds_01: bool


def predict_sigma(a: float, L_bar: float, N: int, R: float, eb: float) -> float:
    """sigma = a * L_bar * sqrt(N * R) * eb."""
    if not a > 0:
        raise ParameterError(f"a must be > 0, got {a}")
    if L_bar < 0:
        raise ParameterError(f"L_bar must be >= 0, got {L_bar}")
    if N < 1:
        raise ParameterError(f"N must be >= 1, got {N}")
    if not 0.0 <= R <= 1.0:
        raise ParameterError(f"R must be in [0, 1], got {R}")
    if not eb > 0:
        raise ParameterError(f"eb must be > 0, got {eb}")
    return a * L_bar * math.sqrt(N * R) * eb


def estimate_eb(
    sigma_target: float, a: float, L_bar: float, N: int, R: float
) -> float | None:
    """Inverse of :func:`predict_sigma`: the error bound that yields
    ``sigma_target``.

    Returns ``None`` for degenerate layers (L_bar == 0 or R == 0): an
    unbounded eb would destroy the activation tensor, so the caller should
    skip compression for the interval instead.
    """
    if not sigma_target > 0:
        raise ParameterError(f"sigma_target must be > 0, got {sigma_target}")
    if not a > 0:
        raise ParameterError(f"a must be > 0, got {a}")
    if N < 1:
        raise ParameterError(f"N must be >= 1, got {N}")
    if L_bar < 0 or not 0.0 <= R <= 1.0:
        raise ParameterError(f"invalid L_bar={L_bar} or R={R}")
    if L_bar == 0.0 or R == 0.0:
        return None
    return sigma_target / (a * L_bar * math.sqrt(N * R))


def inject_uniform_error(
    t: Tensor, eb: float, preserve_zeros: bool = True, seed: int = 0
) -> Tensor:
    """Add i.i.d. U[-eb, +eb] noise to every element (zeros excluded when
    ``preserve_zeros``); deterministic under ``seed``."""
    if not eb > 0:
        raise ParameterError(f"eb must be > 0, got {eb}")
    rng = np.random.default_rng(seed)
    data = t.data.astype(np.float64)
    noise = rng.uniform(-eb, eb, size=data.size)
    if preserve_zeros:
        noise[data == 0.0] = 0.0
    return Tensor((data + noise).reshape(t.dims), precision=8)


def measure_gradient_error(
    grad_clean: Tensor, grad_perturbed: Tensor
) -> DistributionDiagnostics:
    """Diagnostics over E = grad_perturbed - grad_clean, element-wise."""
    if grad_clean.dims != grad_perturbed.dims:
        raise DimensionError(
            f"shape mismatch: {grad_clean.dims} vs {grad_perturbed.dims}"
        )
    errors = grad_perturbed.data.astype(np.float64) - grad_clean.data.astype(
        np.float64
    )
    return diagnostics_from_errors(errors)


def diagnostics_from_errors(errors: np.ndarray) -> DistributionDiagnostics:
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    n = errors.size
    if n == 0:
        raise DataError("empty error sample")
    mu = float(errors.mean())
    sigma = float(errors.std())
    centered = errors - mu
    if sigma > 0:
        frac = float(np.count_nonzero(np.abs(centered) <= sigma)) / n
        lo, hi = mu - 4.0 * sigma, mu + 4.0 * sigma
        clipped = np.clip(errors, lo, np.nextafter(hi, lo))
        hist, edges = np.histogram(clipped, bins=HISTOGRAM_BINS, range=(lo, hi))
    else:
        frac = 1.0
        hist = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
        hist[HISTOGRAM_BINS // 2] = n
        edges = None
    chi2, dof = _chi_square_vs_normal(hist, edges, mu, sigma, n)
    exceeds = dof > 0 and chi2 > _chi2_critical_99(dof)
    return DistributionDiagnostics(
        empirical_sigma=sigma,
        fraction_within_1sigma=frac,
        histogram=tuple(int(c) for c in hist),
        sample_count=n,
        chi_square_stat=chi2,
        chi_square_dof=dof,
        chi_square_exceeds_01=bool(exceeds),
    )


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _chi_square_vs_normal(hist, edges, mu, sigma, n):
    if edges is None or sigma == 0:
        return 0.0, 0
    z = (np.asarray(edges) - mu) / sigma
    cdf = _normal_cdf(z)
    probs = np.diff(cdf)
    probs[0] += cdf[0]  # fold tails into the edge bins (samples are clipped)
    probs[-1] += 1.0 - cdf[-1]
    expected = probs * n
    keep = expected >= 5.0
    if keep.sum() < 4:
        return 0.0, 0
    observed = np.asarray(hist, dtype=np.float64)[keep]
    exp = expected[keep]
    stat = float(((observed - exp) ** 2 / exp).sum())
    dof = int(keep.sum() - 3)  # bins - 1 - two fitted parameters
    return stat, max(dof, 0)


def _chi2_critical_99(dof: int) -> float:
    # Wilson-Hilferty approximation of the chi-square 0.99 quantile
    h = 2.0 / (9.0 * dof)
    return dof * (1.0 - h + _Z_99 * math.sqrt(h)) ** 3


@dataclass(frozen=True)
class ConvLayerShape:
    """Geometry of a study layer: CxHxW input, KxK kernel, stride, out ch."""

    channels: int
    height: int
    width: int
    kernel: int
    stride: int
    out_channels: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width, self.kernel, self.stride,
              self.out_channels) < 1:
            raise ParameterError(f"invalid layer shape {self}")
        if self.kernel > min(self.height, self.width):
            raise ParameterError("kernel larger than input")

    @property
    def out_hw(self) -> tuple[int, int]:
        return (
            (self.height - self.kernel) // self.stride + 1,
            (self.width - self.kernel) // self.stride + 1,
        )

    def __str__(self) -> str:
        return (
            f"{self.channels}x{self.height}x{self.width},"
            f"k{self.kernel}x{self.kernel},s{self.stride},o{self.out_channels}"
        )


_SHAPE_RE = re.compile(
    r"^(\d+)x(\d+)x(\d+),k(\d+)x(\d+),s(\d+),o(\d+)$"
)


def parse_layer_shape(text: str) -> ConvLayerShape:
    """Parse the 'CxHxW,kKxK,sS,oO' grammar, e.g. '3x10x10,k3x3,s1,o4'."""
    m = _SHAPE_RE.match(text.strip())
    if not m:
        raise ParameterError(f"cannot parse layer shape {text!r}")
    c, h, w, k1, k2, s, o = (int(g) for g in m.groups())
    if k1 != k2:
        raise ParameterError("only square kernels are supported")
    return ConvLayerShape(c, h, w, k1, s, o)


DEFAULT_MULTI_SHAPE = ConvLayerShape(
    channels=3, height=10, width=10, kernel=3, stride=1, out_channels=4
)
# wide 1x1 layer: each gradient element is a single e*L product, and the
# error draws are reused across out-channels, so the effective sample size
# for sigma is the channel count; 256 keeps the estimate tight.
DEFAULT_SINGLE_SHAPE = ConvLayerShape(
    channels=256, height=1, width=1, kernel=1, stride=1, out_channels=64
)


@dataclass(frozen=True)
class ErrorTrial:
    """One injection experiment on one random conv instance."""

    shape: ConvLayerShape
    N: int
    R: float
    L_bar: float
    eb: float
    sigma_emp: float
    fraction_within_1sigma: float
    sample_count: int


def _sparse_activation(rng: np.random.Generator, shape, R: float) -> np.ndarray:
    n = int(np.prod(shape))
    flat = 1.0 - rng.random(n)  # strictly positive
    n_zero = n - int(round(R * n))
    flat[rng.permutation(n)[:n_zero]] = 0.0
    return flat.reshape(shape)


def _concentrated_loss_grad(rng: np.random.Generator, N: int, K: int, Y: int, X: int):
    """Per-sample loss gradient: one dominant spike plus weak background."""
    n_l = K * Y * X
    spike = 1.0 + _SPIKE_CV * rng.standard_normal(N)
    spike = np.clip(spike, 0.4, 1.6)
    sign = rng.choice(np.array([-1.0, 1.0]), size=N)
    bg_scale = _BACKGROUND_RHO * spike / math.sqrt(n_l)
    L = rng.standard_normal((N, n_l)) * bg_scale[:, None]
    pos = rng.integers(0, n_l, size=N)
    L[np.arange(N), pos] = sign * spike
    return L.reshape(N, K, Y, X)


def _constant_magnitude_loss_grad(rng: np.random.Generator, N, K, Y, X):
    sign = rng.choice(np.array([-1.0, 1.0]), size=(N, K, Y, X))
    return sign  # |L| = 1 everywhere, so L_bar = rms(L) = max|L|


def run_error_trial(
    shape: ConvLayerShape,
    N: int,
    R: float,
    eb: float,
    seed: int,
    preserve_zeros: bool = True,
    error_draws: int = 2,
    regime: str = "multi",
) -> ErrorTrial:
    """Inject uniform error into a random conv instance and measure the
    batch-summed weight-gradient error."""
    if N < 1:
        raise ParameterError("N must be >= 1")
    if not 0.0 < R <= 1.0:
        raise ParameterError("R must be in (0, 1]")
    rng = np.random.default_rng(seed)
    Y, X = shape.out_hw
    act = _sparse_activation(rng, (N, shape.channels, shape.height, shape.width), R)
    if regime == "multi":
        lg = _concentrated_loss_grad(rng, N, shape.out_channels, Y, X)
    elif regime == "single":
        lg = _constant_magnitude_loss_grad(rng, N, shape.out_channels, Y, X)
    else:
        raise ParameterError(f"unknown regime {regime!r}")
    w = np.zeros((shape.out_channels, shape.channels, shape.kernel, shape.kernel))
    gw_clean, _, _ = conv2d_backward(act, lg, w, stride=shape.stride, pad=0)
    act_t = Tensor(act, precision=8)
    errors = []
    for draw in range(error_draws):
        perturbed = inject_uniform_error(
            act_t, eb, preserve_zeros=preserve_zeros, seed=int(rng.integers(2**63))
        )
        gw_p, _, _ = conv2d_backward(
            perturbed.view().reshape(act.shape), lg, w, stride=shape.stride, pad=0
        )
        errors.append((gw_p - gw_clean).reshape(-1) * N)  # batch-summed error
    pooled = np.concatenate(errors)
    diag = diagnostics_from_errors(pooled)
    stats = compute_stats(Tensor(lg, precision=8), batch_dim=0)
    L_bar = float(np.mean(stats.per_sample_max_abs))
    R_actual = float(np.count_nonzero(act)) / act.size
    return ErrorTrial(
        shape=shape,
        N=N,
        R=R_actual,
        L_bar=L_bar,
        eb=eb,
        sigma_emp=diag.empirical_sigma,
        fraction_within_1sigma=diag.fraction_within_1sigma,
        sample_count=diag.sample_count,
    )


@dataclass(frozen=True)
class CalibrationResult:
    a_hat: float
    half_width: float  # 1.96 * stderr of the per-trial mean
    trials: int
    resampled: int
    per_trial: tuple[float, ...]


def calibrate_a(
    shape: ConvLayerShape | None = None,
    N: int = 64,
    eb: float = 1e-3,
    trials: int = 64,
    seed: int = 0,
    regime: str = "multi",
    R: float = 0.5,
) -> CalibrationResult:
    """Estimate the coefficient ``a`` by simulation.

    Per trial: a_i = sigma_emp / (L_bar * sqrt(N * R) * eb); the estimate is
    the trial mean.  Trials with a degenerate (all-zero) loss gradient are
    resampled and counted.  Trial seeds derive from (master, trial index)
    by a fixed mixing rule, so trials are order-independent; plain
    master-XOR-index would alias trial sets across nearby master seeds.
    """
    if trials < 30:
        raise ParameterError("trials must be >= 30")
    if shape is None:
        shape = DEFAULT_MULTI_SHAPE if regime == "multi" else DEFAULT_SINGLE_SHAPE
    if regime == "single":
        N = 1
        R = 1.0
    values = []
    resampled = 0
    i = 0
    while len(values) < trials:
        trial_seed = np.random.SeedSequence([seed, i]).generate_state(1)[0]
        trial = run_error_trial(
            shape, N, R, eb, seed=int(trial_seed), preserve_zeros=True, regime=regime
        )
        i += 1
        if trial.sigma_emp == 0.0 or trial.L_bar == 0.0:
            resampled += 1
            if resampled > trials:
                raise DataError("too many degenerate calibration trials")
            continue
        values.append(
            trial.sigma_emp / (trial.L_bar * math.sqrt(trial.N * trial.R) * trial.eb)
        )
    arr = np.asarray(values)
    half = 1.96 * float(arr.std(ddof=1)) / math.sqrt(trials)
    return CalibrationResult(
        a_hat=float(arr.mean()),
        half_width=half,
        trials=trials,
        resampled=resampled,
        per_trial=tuple(float(v) for v in arr),
    )


ERRORPROP_CSV_HEADER = [
    "trial",
    "layer_shape",
    "N",
    "R",
    "L_bar",
    "eb",
    "sigma_pred",
    "sigma_emp",
    "frac_1sigma",
    "preserve_zeros",
]


def errorprop_csv_row(
    trial_index: int, trial: ErrorTrial, sigma_pred: float, preserve_zeros: bool
) -> list[str]:
    return [
        str(trial_index),
        str(trial.shape),
        str(trial.N),
        repr(trial.R),
        repr(trial.L_bar),
        repr(trial.eb),
        repr(sigma_pred),
        repr(trial.sigma_emp),
        repr(trial.fraction_within_1sigma),
        "1" if preserve_zeros else "0",
    ]

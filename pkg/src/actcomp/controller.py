"""Adaptive error-bound controller.

Every W iterations the training loop hands the controller fresh per-layer
statistics (activation nonzero ratio R, loss-gradient scale L_bar, momentum
magnitude M_avg).  The controller turns them into per-layer absolute error
bounds via

    sigma_target = sigma_fraction * M_avg
    eb           = sigma_target / (a * L_bar * sqrt(N * R))

adapts the collection interval W (halve on a >2x bound change, reset to the
default after consecutive settled comparisons), and plans the batch size
under a memory budget with a safety reserve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import MemoryInfeasibleError, ParameterError
from .errorprop import DEFAULT_COEFFICIENT, estimate_eb
from .tensor import Tensor, compute_stats


@dataclass(frozen=True)
class LayerTrainingStats:
    """Semi-online parameters for one layer's stored activation."""

    layer_id: str
    R: float
    L_bar: float
    M_avg: float
    N: int
    last_eb: float = 0.0
    last_ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.R <= 1.0:
            raise ParameterError(f"R must be in [0, 1], got {self.R}")
        if self.M_avg < 0 or self.L_bar < 0:
            raise ParameterError("M_avg and L_bar must be >= 0")
        if self.N < 1:
            raise ParameterError(f"N must be >= 1, got {self.N}")


@dataclass(frozen=True)
class ControllerConfig:
    W_default: int = 1000
    W_floor: int = 125
    sigma_fraction: float = 0.01
    a: float = DEFAULT_COEFFICIENT
    memory_budget_bytes: int | None = None
    reserve_fraction: float = 0.05
    max_batch: int = 1024
    settle_threshold: float = 1.25
    settle_intervals: int = 2

    def __post_init__(self):
        if not 0.0 < self.sigma_fraction < 1.0:
            raise ParameterError("sigma_fraction must be in (0, 1)")
        if not 0.0 < self.reserve_fraction < 1.0:
            raise ParameterError("reserve_fraction must be in (0, 1)")
        if not 1 <= self.W_floor <= self.W_default:
            raise ParameterError("need 1 <= W_floor <= W_default")
        if self.a <= 0:
            raise ParameterError("a must be > 0")
        if self.max_batch < 1:
            raise ParameterError("max_batch must be >= 1")
        if self.settle_threshold < 1.0:
            raise ParameterError("settle_threshold must be >= 1")
        if self.settle_intervals < 1:
            raise ParameterError("settle_intervals must be >= 1")


_CONFIG_TYPES = {
    "W_default": int,
    "W_floor": int,
    "sigma_fraction": float,
    "a": float,
    "memory_budget_bytes": int,
    "reserve_fraction": float,
    "max_batch": int,
    "settle_threshold": float,
    "settle_intervals": int,
}


def parse_kv_lines(text: str) -> dict[str, str]:
    """Line-oriented key=value format with '#' comments and blank lines."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def controller_config_from_mapping(
    mapping: dict[str, str], strict: bool = True
) -> ControllerConfig:
    kwargs = {}
    for key, raw in mapping.items():
        if key not in _CONFIG_TYPES:
            if strict:
                raise ParameterError(f"unknown controller config key {key!r}")
            continue
        if key == "memory_budget_bytes" and raw.lower() in ("none", ""):
            kwargs[key] = None
        else:
            kwargs[key] = _CONFIG_TYPES[key](raw)
    return ControllerConfig(**kwargs)


def load_controller_config(path) -> ControllerConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return controller_config_from_mapping(parse_kv_lines(fh.read()))


@dataclass(frozen=True)
class PlanRow:
    layer_id: str
    R: float
    L_bar: float
    M_avg: float
    sigma_target: float | None
    eb: float | None
    skip: bool


@dataclass(frozen=True)
class CompressionPlan:
    """Per-layer error bounds plus the active collection interval."""

    eb: dict[str, float]
    W: int
    interval_index: int
    skip: frozenset[str]
    detail: tuple[PlanRow, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if any(not v > 0 for v in self.eb.values()):
            raise ParameterError("every planned eb must be > 0")
        if set(self.eb) & self.skip:
            raise ParameterError("a layer cannot both carry an eb and be skipped")


def collect_layer_stats(
    layer_id: str,
    activation: Tensor,
    loss_grad: Tensor,
    momentum: Tensor,
    N: int,
    last_eb: float = 0.0,
    last_ratio: float = 0.0,
) -> LayerTrainingStats:
    """Derive the semi-online parameters from live tensors.

    ``activation`` is the stored (already decompressed, if compression is
    active) tensor; ``loss_grad`` must carry the batch on axis 0; M_avg is
    the mean |momentum| of the consuming layer's weight velocity.
    """
    act_stats = compute_stats(activation)
    lg_stats = compute_stats(loss_grad, batch_dim=0)
    L_bar = float(sum(lg_stats.per_sample_max_abs) / len(lg_stats.per_sample_max_abs))
    m_stats = compute_stats(momentum)
    return LayerTrainingStats(
        layer_id=layer_id,
        R=act_stats.nonzero_ratio,
        L_bar=L_bar,
        M_avg=m_stats.mean_abs,
        N=N,
        last_eb=last_eb,
        last_ratio=last_ratio,
    )


def assess_gradient_tolerance(
    stats: LayerTrainingStats, sigma_fraction: float
) -> float | None:
    """Acceptable gradient-error sigma: sigma_fraction * M_avg.

    Returns None when the momentum is degenerate (M_avg == 0); the layer is
    skipped for the interval.
    """
    if not sigma_fraction > 0:
        raise ParameterError("sigma_fraction must be > 0")
    if stats.M_avg == 0.0:
        return None
    return sigma_fraction * stats.M_avg


def plan_compression(
    all_stats: list[LayerTrainingStats],
    config: ControllerConfig,
    interval_index: int = 0,
    W: int | None = None,
) -> CompressionPlan:
    """Per-layer eb from this interval's stats; degenerate layers are skipped."""
    eb_map: dict[str, float] = {}
    skip: set[str] = set()
    rows = []
    for stats in all_stats:
        sigma = assess_gradient_tolerance(stats, config.sigma_fraction)
        eb = None
        if sigma is not None:
            eb = estimate_eb(sigma, config.a, stats.L_bar, stats.N, stats.R)
        if eb is None:
            skip.add(stats.layer_id)
        else:
            eb_map[stats.layer_id] = eb
        rows.append(
            PlanRow(
                layer_id=stats.layer_id,
                R=stats.R,
                L_bar=stats.L_bar,
                M_avg=stats.M_avg,
                sigma_target=sigma,
                eb=eb,
                skip=eb is None,
            )
        )
    return CompressionPlan(
        eb=eb_map,
        W=config.W_default if W is None else W,
        interval_index=interval_index,
        skip=frozenset(skip),
        detail=tuple(rows),
    )


def update_interval(
    prev_plan: CompressionPlan | None,
    new_plan: CompressionPlan,
    current_W: int,
    config: ControllerConfig,
    settle_streak: int = 0,
) -> tuple[int, int]:
    """W adaptation; returns (new_W, new_settle_streak).

    The change ratio r is the max over layers of max(eb_new/eb_old,
    eb_old/eb_new) over layers planned in both intervals.  r > 2 halves W
    (never below W_floor); r <= settle_threshold for settle_intervals
    consecutive comparisons resets W to W_default; otherwise W is unchanged.
    """
    if prev_plan is None:
        return current_W, settle_streak
    shared = set(prev_plan.eb) & set(new_plan.eb)
    if not shared:
        return current_W, settle_streak
    r = max(
        max(new_plan.eb[k] / prev_plan.eb[k], prev_plan.eb[k] / new_plan.eb[k])
        for k in shared
    )
    if r > 2.0:
        return max(current_W // 2, config.W_floor), 0
    if r <= config.settle_threshold:
        streak = settle_streak + 1
        if streak >= config.settle_intervals:
            return config.W_default, 0
        return current_W, streak
    return current_W, 0


def choose_batch_size(
    per_sample_bytes_by_layer: dict[str, float],
    observed_ratios: dict[str, float],
    config: ControllerConfig,
    fixed_bytes: float = 0.0,
    original_batch: int | None = None,
    first_interval: bool = False,
) -> int:
    """Largest power-of-two batch that fits the budget minus the reserve.

    projected(b) = b * sum(layer cost / ratio) + fixed_bytes must stay under
    memory_budget * (1 - reserve_fraction).  During the first interval no
    ratios have been observed yet, so the original batch size is kept.
    """
    if first_interval:
        if original_batch is None or original_batch < 1:
            raise ParameterError("first interval needs the original batch size")
        return original_batch
    if config.memory_budget_bytes is None:
        raise ParameterError("memory budget is not configured")
    if not per_sample_bytes_by_layer:
        raise ParameterError("no per-layer costs given")
    per_b = 0.0
    for layer_id, cost in per_sample_bytes_by_layer.items():
        if cost <= 0:
            raise ParameterError(f"non-positive cost for {layer_id}")
        ratio = observed_ratios.get(layer_id, 1.0)
        if ratio <= 0:
            raise ParameterError(f"non-positive ratio for {layer_id}")
        per_b += cost / ratio
    usable = config.memory_budget_bytes * (1.0 - config.reserve_fraction)
    best = 0
    b = 1
    while b <= config.max_batch:
        if b * per_b + fixed_bytes <= usable:
            best = b
        b *= 2
    if best < 1:
        raise MemoryInfeasibleError(
            f"no batch size >= 1 fits: per-sample {per_b:.3e} B, "
            f"fixed {fixed_bytes:.3e} B, usable {usable:.3e} B"
        )
    return best


class AdaptiveController:
    """Stateful wrapper owned by one training loop.

    Tracks the active W, the settle streak, the current plan, and how often
    the memory reserve would have been breached (the host-evacuation
    fallback is modeled as this counter, not an actual transfer).
    """

    def __init__(self, config: ControllerConfig):
        self.config = config
        self.W = config.W_default
        self.plan: CompressionPlan | None = None
        self.settle_streak = 0
        self.intervals_planned = 0
        self.reserve_breach_count = 0

    def new_interval(self, all_stats: list[LayerTrainingStats]) -> CompressionPlan:
        self.intervals_planned += 1
        plan = plan_compression(
            all_stats, self.config, interval_index=self.intervals_planned, W=self.W
        )
        self.W, self.settle_streak = update_interval(
            self.plan, plan, self.W, self.config, self.settle_streak
        )
        plan = replace(plan, W=self.W)
        self.plan = plan
        return plan

    def note_reserve_breach(self):
        self.reserve_breach_count += 1


PLAN_CSV_HEADER = [
    "interval",
    "layer_id",
    "R",
    "L_bar",
    "M_avg",
    "sigma_target",
    "eb",
    "skip_flag",
    "W",
]


def plan_csv_rows(plan: CompressionPlan) -> list[list[str]]:
    rows = []
    for row in plan.detail:
        rows.append(
            [
                str(plan.interval_index),
                row.layer_id,
                repr(row.R),
                repr(row.L_bar),
                repr(row.M_avg),
                "" if row.sigma_target is None else repr(row.sigma_target),
                "" if row.eb is None else repr(row.eb),
                "1" if row.skip else "0",
                str(plan.W),
            ]
        )
    return rows


def write_plan_csv(path, plans: list[CompressionPlan]):
    lines = [",".join(PLAN_CSV_HEADER)]
    for plan in plans:
        lines.extend(",".join(row) for row in plan_csv_rows(plan))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

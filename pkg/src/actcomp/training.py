"""End-to-end training loop with activation-compression hooks.

Storage policy during training (modes ``comet``, ``comet-static``,
``inject``): the network input batch is stored raw, every conv layer's
output is stored in its slot right after the layer's forward pass
(compressed once a plan is active), and cheap layers (relu, maxpool) leave
a recompute marker instead of data.  The forward pass always computes with
exact values; the backward pass consumes whatever the slots reproduce, so
compression or injected error perturbs gradients exactly the way a
memory-constrained run would see them.  ``baseline`` stores everything raw.

Memory accounting uses a 32-bit-per-element model for raw activation
payloads and actual byte sizes for compressed containers; weights and
momentum count at 4 bytes per element.  Peak bytes are tracked over the
whole iteration including transient decompression buffers.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .codec import DEFAULT_RADIUS, CodecParams, compress, decompress
from .controller import (
    AdaptiveController,
    CompressionPlan,
    ControllerConfig,
    LayerTrainingStats,
    choose_batch_size,
)
from .data import Dataset
from .errors import LifecycleError, ParameterError
from .errorprop import inject_uniform_error
from .nn import Network, OptimizerState, default_conv_net, softmax_xent
from .tensor import Tensor, read_tensor, write_tensor

MODES = ("baseline", "comet", "comet-static", "inject")

_INJECT_RE = re.compile(r"^inject\(([^)]*)\)$")


def parse_mode(text: str) -> tuple[str, float | None]:
    """'inject(1e-3)' -> ('inject', 1e-3); plain mode names pass through."""
    text = text.strip()
    m = _INJECT_RE.match(text)
    if m:
        try:
            return "inject", float(m.group(1))
        except ValueError as exc:
            raise ParameterError(f"bad inject bound in {text!r}") from exc
    if text not in MODES:
        raise ParameterError(f"unknown mode {text!r}")
    return text, None


@dataclass
class TrainSettings:
    iterations: int = 300
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    eval_every: int = 50
    preserve_zeros: bool = True
    inject_eb: float = 0.0
    radius: int = DEFAULT_RADIUS
    drift_start: float = 1.0
    drift_end: float = 1.0
    drift_power: float = 1.0  # >1 concentrates the drift late in the run
    eval_batch: int = 256

    def drift_scale(self, iteration: int) -> float:
        if self.iterations <= 1 or self.drift_start == self.drift_end:
            return self.drift_start
        f = (iteration / (self.iterations - 1)) ** self.drift_power
        return self.drift_start + (self.drift_end - self.drift_start) * f


@dataclass(frozen=True)
class TrainingRecord:
    iteration: int
    epoch: int
    loss: float
    train_accuracy: float
    eval_accuracy: float | None
    batch_size: int
    W: int | None
    peak_activation_bytes: int
    eb: dict[str, float]
    ratio: dict[str, float]


@dataclass
class TrainResult:
    mode: str
    status: str  # "ok" | "diverged"
    records: list[TrainingRecord]
    final_eval_accuracy: float | None
    peak_activation_bytes: int
    reserve_breaches: int
    network: Network
    controller: AdaptiveController | None


class ActivationStore:
    """Per-layer slots: raw tensor, compressed container, or recompute marker.

    Slots are produced once per forward pass and consumed exactly once in
    backward; double consumption or a missing slot is a lifecycle error.
    """

    RAW = "raw"
    COMPRESSED = "compressed"
    MARKER = "marker"

    def __init__(self):
        self._slots: dict[str, tuple[str, object, int]] = {}
        self.current_bytes = 0

    def put(self, layer_id: str, kind: str, payload, nbytes: int):
        if layer_id in self._slots:
            raise LifecycleError(f"slot {layer_id!r} already filled")
        self._slots[layer_id] = (kind, payload, nbytes)
        self.current_bytes += nbytes

    def pop(self, layer_id: str):
        entry = self._slots.pop(layer_id, None)
        if entry is None:
            raise LifecycleError(f"slot {layer_id!r} missing or already consumed")
        self.current_bytes -= entry[2]
        return entry

    def clear(self):
        self._slots.clear()
        self.current_bytes = 0

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._slots


def recompute_cheap(layer, stored_predecessor_input):
    """Replay a cheap layer's forward pass from its stored input.

    Bit-exact: the same function runs on the same values, so the recomputed
    activation equals what the forward pass produced.
    """
    if stored_predecessor_input is None:
        raise LifecycleError(f"no stored input available for {layer.id}")
    if not layer.cheap:
        raise ParameterError(f"layer {layer.id} is not recomputable")
    return layer.forward(stored_predecessor_input)


def _consumer_map(network: Network) -> dict[str, str]:
    """Map each conv layer id to the parameterized layer that consumes its
    stored output during backward (the next conv or fc downstream)."""
    out: dict[str, str] = {}
    layers = network.layers
    for i, layer in enumerate(layers):
        if layer.kind != "conv2d":
            continue
        for nxt in layers[i + 1 :]:
            if nxt.params():
                out[layer.id] = nxt.id
                break
    return {k: v for k, v in out.items() if v is not None}


def train(
    train_data: Dataset,
    eval_data: Dataset | None,
    mode: str,
    config: ControllerConfig,
    seed: int,
    settings: TrainSettings,
    specs=None,
) -> TrainResult:
    """Run the training loop in one of the four modes.

    Deterministic per (mode, seed, settings): weight init, data order, and
    injected error all derive from the run seed.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    if mode == "inject" and settings.inject_eb < 0:
        raise ParameterError("inject_eb must be >= 0")

    n, _, hh, ww = train_data.images.shape
    if specs is None:
        specs = default_conv_net(train_data.num_classes, hh)
    root = np.random.SeedSequence(seed)
    net_ss, data_ss, inject_ss = root.spawn(3)
    network = Network(specs, (train_data.images.shape[1], hh, ww), net_ss)
    optimizer = OptimizerState(lr=settings.lr, momentum=settings.momentum)
    data_rng = np.random.default_rng(data_ss)
    inject_rng = np.random.default_rng(inject_ss)

    conv_ids = [l.id for l in network.layers if l.kind == "conv2d"]
    consumers = _consumer_map(network)
    fixed_model_bytes = sum(p.size for _, p in network.param_items()) * 2 * 4

    compressing = mode in ("comet", "comet-static")
    controller = AdaptiveController(config) if compressing else None
    plan: CompressionPlan | None = None
    next_collection = controller.W if controller else None

    B = settings.batch_size
    perm = data_rng.permutation(n)
    pos = 0
    epoch = 0
    records: list[TrainingRecord] = []
    status = "ok"
    final_eval = None
    peak_overall = 0
    interval_ratios: dict[str, list[float]] = {c: [] for c in conv_ids}

    def next_batch(size: int):
        nonlocal perm, pos, epoch
        if pos + size > n:
            perm = data_rng.permutation(n)
            pos = 0
            epoch += 1
        idx = perm[pos : pos + size]
        pos += size
        return train_data.images[idx], train_data.labels[idx]

    def evaluate(scale: float) -> float:
        """Accuracy on the eval set at the stream's current drift scale
        (the deployed distribution is whatever the stream has drifted to)."""
        correct = 0
        for start in range(0, eval_data.size, settings.eval_batch):
            xb = eval_data.images[start : start + settings.eval_batch]
            yb = eval_data.labels[start : start + settings.eval_batch]
            if scale != 1.0:
                xb = xb * scale
            logits = network.forward(xb)
            correct += int((logits.argmax(axis=1) == yb).sum())
        return correct / eval_data.size

    for it in range(settings.iterations):
        xb, yb = next_batch(B)
        scale = settings.drift_scale(it)
        if scale != 1.0:
            xb = xb * scale

        store = ActivationStore()
        peak = 0
        iter_ratios: dict[str, float] = {}
        # plan/W in effect during this iteration (boundary updates apply
        # from the next one)
        active_eb = dict(plan.eb) if plan else {}
        active_W = controller.W if controller else None

        def bump_peak(extra: int = 0):
            nonlocal peak
            peak = max(peak, store.current_bytes + extra)

        # ---- forward ----
        store.put("input", ActivationStore.RAW, xb, xb.size * 4)
        cur = xb
        for layer in network.layers:
            out = layer.forward(cur)
            bump_peak(out.size * 4)
            if layer.kind == "conv2d":
                eb = plan.eb.get(layer.id) if (plan is not None) else None
                if compressing and eb is not None:
                    t32 = Tensor(out, precision=4)
                    container, report = compress(
                        t32,
                        CodecParams(
                            eb=eb,
                            radius=settings.radius,
                            preserve_zeros=settings.preserve_zeros,
                        ),
                    )
                    store.put(
                        layer.id,
                        ActivationStore.COMPRESSED,
                        container,
                        report.compressed_bytes,
                    )
                    iter_ratios[layer.id] = report.ratio
                    interval_ratios[layer.id].append(report.ratio)
                elif mode == "inject" and settings.inject_eb > 0:
                    perturbed = inject_uniform_error(
                        Tensor(out, precision=8),
                        settings.inject_eb,
                        preserve_zeros=settings.preserve_zeros,
                        seed=int(inject_rng.integers(2**63)),
                    )
                    stored = perturbed.view().reshape(out.shape)
                    store.put(layer.id, ActivationStore.RAW, stored, out.size * 4)
                else:
                    store.put(layer.id, ActivationStore.RAW, out, out.size * 4)
            elif layer.cheap and mode != "baseline":
                store.put(layer.id, ActivationStore.MARKER, None, 0)
            else:
                store.put(layer.id, ActivationStore.RAW, out, out.size * 4)
            bump_peak()
            cur = out

        logits = cur
        loss, grad = softmax_xent(logits, yb, batch_average=False)
        train_acc = float((logits.argmax(axis=1) == yb).mean())

        if not np.isfinite(loss):
            status = "diverged"
            records.append(
                TrainingRecord(
                    iteration=it,
                    epoch=epoch,
                    loss=float(loss),
                    train_accuracy=train_acc,
                    eval_accuracy=None,
                    batch_size=B,
                    W=active_W,
                    peak_activation_bytes=peak,
                    eb=active_eb,
                    ratio=iter_ratios,
                )
            )
            break

        # ---- backward over the store ----
        collecting = (
            controller is not None
            and (it + 1) == next_collection
            and not (mode == "comet-static" and controller.plan is not None)
        )
        cache: dict[str, np.ndarray] = {}
        cache_bytes = 0
        stored_R: dict[str, float] = {}
        consumer_lbar: dict[str, float] = {}

        def resolve(pid: str) -> np.ndarray:
            nonlocal cache_bytes
            if pid in cache:
                return cache[pid]
            kind, payload, _ = store.pop(pid)
            if kind == ActivationStore.RAW:
                arr = payload
            elif kind == ActivationStore.COMPRESSED:
                arr = decompress(payload).view().reshape(payload.dims)
            else:
                producer = network.layer(pid)
                src = _input_source(network, pid)
                arr = recompute_cheap(producer, resolve(src))
            cache[pid] = arr
            cache_bytes += arr.size * 4
            bump_peak(cache_bytes)
            if collecting and pid in conv_ids:
                stored_R[pid] = float(np.count_nonzero(arr)) / arr.size
            return arr

        grads: dict[str, np.ndarray] = {}
        g = grad
        for layer in reversed(network.layers):
            if collecting and layer.id in consumers.values():
                consumer_lbar[layer.id] = float(
                    np.abs(g).reshape(g.shape[0], -1).max(axis=1).mean()
                )
            src = _input_source(network, layer.id)
            x_in = resolve(src)
            layer_grads, g = layer.backward(g, x_in)
            for name, value in layer_grads.items():
                grads[f"{layer.id}.{name}"] = value
            if layer.id in cache:
                cache_bytes -= cache[layer.id].size * 4
                del cache[layer.id]

        params = dict(network.param_items())
        updated = optimizer.step(params, grads)
        for layer in network.layers:
            own = {
                name: updated[f"{layer.id}.{name}"] for name in layer.params()
            }
            if own:
                layer.set_params(own)

        # ---- interval boundary: plan / adapt W / batch size ----
        if collecting:
            stats = []
            for cid in conv_ids:
                consumer = consumers[cid]
                stats.append(
                    LayerTrainingStats(
                        layer_id=cid,
                        R=stored_R.get(cid, 0.0),
                        L_bar=consumer_lbar.get(consumer, 0.0),
                        M_avg=optimizer.mean_abs_velocity(f"{consumer}.w"),
                        N=B,
                        last_eb=plan.eb.get(cid, 0.0) if plan else 0.0,
                        last_ratio=(
                            float(np.mean(interval_ratios[cid]))
                            if interval_ratios[cid]
                            else 0.0
                        ),
                    )
                )
            plan = controller.new_interval(stats)
            if (
                mode == "comet"
                and config.memory_budget_bytes is not None
                and controller.intervals_planned >= 2
            ):
                costs = {"input": float(xb[0].size * 4)}
                ratios = {}
                for cid in conv_ids:
                    per_sample = _layer_output_elems(network, cid, (hh, ww)) * 4.0
                    costs[cid] = per_sample
                    if interval_ratios[cid]:
                        ratios[cid] = float(np.mean(interval_ratios[cid]))
                B = choose_batch_size(
                    costs, ratios, config, fixed_bytes=fixed_model_bytes
                )
            interval_ratios = {c: [] for c in conv_ids}
        if controller is not None and (it + 1) == next_collection:
            next_collection = (it + 1) + (plan.W if plan else controller.W)

        if (
            controller is not None
            and config.memory_budget_bytes is not None
            and peak + fixed_model_bytes
            > config.memory_budget_bytes * (1.0 - config.reserve_fraction)
        ):
            controller.note_reserve_breach()

        eval_acc = None
        if eval_data is not None and (
            (settings.eval_every and (it + 1) % settings.eval_every == 0)
            or it == settings.iterations - 1
        ):
            eval_acc = evaluate(scale)
            final_eval = eval_acc

        peak_overall = max(peak_overall, peak)
        records.append(
            TrainingRecord(
                iteration=it,
                epoch=epoch,
                loss=loss,
                train_accuracy=train_acc,
                eval_accuracy=eval_acc,
                batch_size=B,
                W=active_W,
                peak_activation_bytes=peak,
                eb=active_eb,
                ratio=iter_ratios,
            )
        )

    return TrainResult(
        mode=mode,
        status=status,
        records=records,
        final_eval_accuracy=final_eval,
        peak_activation_bytes=peak_overall,
        reserve_breaches=controller.reserve_breach_count if controller else 0,
        network=network,
        controller=controller,
    )


def _input_source(network: Network, layer_id: str) -> str:
    prev = "input"
    for layer in network.layers:
        if layer.id == layer_id:
            return prev
        prev = layer.id
    raise ParameterError(f"no layer {layer_id!r}")


def _layer_output_elems(network: Network, layer_id: str, image_hw) -> int:
    shape = (1, network.input_shape[0], *image_hw)
    for layer in network.layers:
        shape = layer.output_shape(shape)
        if layer.id == layer_id:
            n = 1
            for d in shape[1:]:
                n *= d
            return n
    raise ParameterError(f"no layer {layer_id!r}")


# ---- record CSV + checkpoints ----

BASE_CSV_COLUMNS = [
    "iteration",
    "epoch",
    "loss",
    "train_accuracy",
    "eval_accuracy",
    "batch_size",
    "W",
    "peak_activation_bytes",
]


def records_csv_header(layer_ids: list[str]) -> list[str]:
    return (
        BASE_CSV_COLUMNS
        + [f"eb_{lid}" for lid in layer_ids]
        + [f"ratio_{lid}" for lid in layer_ids]
    )


def write_records_csv(path, records: list[TrainingRecord], layer_ids: list[str]):
    lines = [",".join(records_csv_header(layer_ids))]
    for r in records:
        row = [
            str(r.iteration),
            str(r.epoch),
            repr(r.loss),
            repr(r.train_accuracy),
            "" if r.eval_accuracy is None else repr(r.eval_accuracy),
            str(r.batch_size),
            "" if r.W is None else str(r.W),
            str(r.peak_activation_bytes),
        ]
        row += ["" if lid not in r.eb else repr(r.eb[lid]) for lid in layer_ids]
        row += ["" if lid not in r.ratio else repr(r.ratio[lid]) for lid in layer_ids]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_checkpoint(network: Network, path):
    """Concatenated CMTT tensors plus a manifest of parameter names."""
    names = []
    with open(path, "wb") as fh:
        for name, p in network.param_items():
            arr = p if p.ndim >= 1 else p.reshape(1)
            write_tensor(Tensor(arr, precision=8), fh)
            names.append(name)
    with open(f"{path}.manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(names) + "\n")


def load_checkpoint(network: Network, path):
    with open(f"{path}.manifest", "r", encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    with open(path, "rb") as fh:
        loaded = {name: read_tensor(fh).view().copy() for name in names}
    for layer in network.layers:
        own = {}
        for pname in layer.params():
            own[pname] = loaded[f"{layer.id}.{pname}"]
        if own:
            layer.set_params(own)

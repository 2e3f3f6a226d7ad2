"""Adam optimizer, the training loop, and the OA/AA/kappa evaluation metrics.

Confusion matrices are plain C×C int64 arrays with rows indexed by true
class and columns by predicted class (both 0-based for class ids 1..C).
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, MetricError, TrainingAbort
from .layers import cross_entropy_from_logits, one_hot
from .sampler import batch_iter, scene_dataset


class Adam:
    """Adam with decoupled weight decay (the decay term adds lambda*theta
    to the update rather than entering the moments)."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(f"non-finite gradient in parameter {i} at step {self.t}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.learning_rate * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(true_labels, predicted_labels, class_count):
    """Accumulate 1-based labels into a C×C count matrix."""
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    for t, p in zip(np.asarray(true_labels), np.asarray(predicted_labels)):
        cm[int(t) - 1, int(p) - 1] += 1
    return cm


def overall_accuracy(cm):
    """Percent of all evaluated samples on the diagonal."""
    total = cm.sum()
    if total == 0:
        raise MetricError("overall accuracy undefined for an empty matrix")
    return 100.0 * np.trace(cm) / total


def average_accuracy(cm):
    """Mean per-class recall, in percent."""
    row_sums = cm.sum(axis=1)
    empty = np.nonzero(row_sums == 0)[0]
    if empty.size:
        raise MetricError(f"average accuracy undefined: class {empty[0] + 1} has no samples")
    recalls = np.diag(cm) / row_sums
    return 100.0 * recalls.mean()


def kappa(cm):
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e)."""
    total = cm.sum()
    if total == 0:
        raise MetricError("kappa undefined for an empty matrix")
    p_o = np.trace(cm) / total
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (total * total)
    if p_e == 1.0:
        raise MetricError("kappa undefined: chance agreement is 1")
    return (p_o - p_e) / (1.0 - p_e)


def per_class_accuracy(cm):
    row_sums = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(row_sums > 0, np.diag(cm) / np.maximum(row_sums, 1), np.nan)
    return 100.0 * acc


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    early_stop: bool = False
    early_stop_window: int = 20
    early_stop_tol: float = 1e-4


@dataclass
class RunReport:
    oa: float
    aa: float
    kappa_score: float
    per_class: np.ndarray
    confusion: np.ndarray
    loss_trace: list
    wall_clock: float
    seed: int
    config_hash: str = ""
    extras: dict = field(default_factory=dict)


def report_to_text(report):
    """Key-value serialization of a run report.

    wall_clock is deliberately not written: report files must be
    byte-identical across reruns with the same config and seed.
    """
    lines = [
        f"config_hash = {report.config_hash}",
        f"seed = {report.seed}",
        f"oa = {report.oa:.6f}",
        f"aa = {report.aa:.6f}",
        f"kappa = {report.kappa_score:.6f}",
    ]
    for i, acc in enumerate(report.per_class, 1):
        value = "nan" if np.isnan(acc) else f"{acc:.6f}"
        lines.append(f"class_{i}_accuracy = {value}")
    for key in sorted(report.extras):
        lines.append(f"{key} = {report.extras[key]}")
    return "\n".join(lines) + "\n"


def confusion_to_csv(cm):
    lines = [",".join(f"pred_{j + 1}" for j in range(cm.shape[1]))]
    for row in cm:
        lines.append(",".join(str(int(x)) for x in row))
    return "\n".join(lines) + "\n"


def loss_trace_to_csv(trace):
    lines = ["step,loss"] + [f"{i},{loss:.9e}" for i, loss in enumerate(trace)]
    return "\n".join(lines) + "\n"


def train(model, train_dataset, config, eval_dataset=None):
    """Run the optimization loop and report metrics.

    Per step: forward -> summed cross-entropy from logits -> backward ->
    Adam update -> zero gradients. Batch order is a fresh seeded permutation
    each epoch. Metrics come from `eval_dataset` when given, otherwise from
    the training set. Deterministic given (config, seed) on one platform.
    """
    if len(train_dataset) == 0:
        raise ContractError("training dataset is empty")
    started = time.perf_counter()
    model.train_mode()
    opt = Adam(model.parameters(), learning_rate=config.learning_rate,
               weight_decay=config.weight_decay)
    C = model.spec.class_count
    trace = []
    steps_per_epoch = None
    last_good = [(k, v.copy()) for k, v in model.state_items()]
    for epoch in range(config.epochs):
        seen = 0
        for views, labels in batch_iter(train_dataset, config.batch_size,
                                        shuffle_seed=config.seed, epoch=epoch):
            logits = model.forward_logits(Tensor(views.astype(model.dtype, copy=False)))
            loss = cross_entropy_from_logits(logits, one_hot(labels, C, dtype=model.dtype))
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch} step {len(trace)}",
                    last_good_state=last_good, step=len(trace),
                )
            ag.backward(loss)
            opt.step()
            opt.zero_grad()
            trace.append(loss_value)
            seen += 1
        if steps_per_epoch is None:
            steps_per_epoch = seen
        last_good = [(k, v.copy()) for k, v in model.state_items()]
        if config.early_stop and _should_stop(trace, steps_per_epoch, config):
            break

    model.eval_mode()
    target = eval_dataset if eval_dataset is not None and len(eval_dataset) else train_dataset
    cm = evaluate(model, target, batch_size=config.batch_size)
    return RunReport(
        oa=overall_accuracy(cm),
        aa=average_accuracy(cm),
        kappa_score=kappa(cm),
        per_class=per_class_accuracy(cm),
        confusion=cm,
        loss_trace=trace,
        wall_clock=time.perf_counter() - started,
        seed=config.seed,
    )


def _should_stop(trace, steps_per_epoch, config):
    window = config.early_stop_window * max(steps_per_epoch, 1)
    if len(trace) < 2 * window:
        return False
    prev = np.mean(trace[-2 * window:-window])
    last = np.mean(trace[-window:])
    return prev - last < config.early_stop_tol


def evaluate(model, dataset, batch_size=512):
    """Confusion matrix of argmax predictions; ties go to the lower class id."""
    model.eval_mode()
    C = model.spec.class_count
    cm = np.zeros((C, C), dtype=np.int64)
    with ag.no_grad():
        for views, labels in batch_iter(dataset, batch_size):
            probs = model.forward(Tensor(views.astype(model.dtype, copy=False)))
            pred = np.argmax(probs.data, axis=1) + 1
            for t, p in zip(labels, pred):
                cm[int(t) - 1, int(p) - 1] += 1
    return cm


def _worker_count():
    raw = os.environ.get("TPO_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def predict_scene(model, cube, sampler_cfg, batch_size=512):
    """Predicted class id for every pixel (labeled or not), as an H×W array.

    Honors TPO_THREADS by sharding pixel ranges across worker threads; the
    output is assembled by index so the result does not depend on timing.
    """
    model.eval_mode()
    dataset = scene_dataset(cube, sampler_cfg)
    n = len(dataset)
    out = np.zeros(n, dtype=np.uint16)

    def run_range(lo, hi):
        pos = lo
        with ag.no_grad():
            for start in range(lo, hi, batch_size):
                stop = min(start + batch_size, hi)
                views = np.stack([dataset[i].views for i in range(start, stop)])
                probs = model.forward(Tensor(views.astype(model.dtype, copy=False)))
                pred = (np.argmax(probs.data, axis=1) + 1).astype(np.uint16)
                out[pos:pos + pred.shape[0]] = pred
                pos = stop

    workers = _worker_count()
    if workers == 1 or n < 2 * batch_size:
        run_range(0, n)
    else:
        bounds = np.linspace(0, n, workers + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_range, int(lo), int(hi))
                       for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futures:
                f.result()
    return out.reshape(cube.height, cube.width)


def repeat_experiment(run_once, base_seed, runs):
    """Run `run_once(seed)` for seeds base_seed..base_seed+runs-1 and report
    mean and sample standard deviation of OA, AA, and kappa."""
    if runs < 2:
        raise ContractError("repeat_experiment needs runs >= 2")
    reports = []
    for i in range(runs):
        try:
            reports.append(run_once(base_seed + i))
        except Exception as e:
            raise TrainingAbort(f"run {i} (seed {base_seed + i}) failed: {e}") from e
    summary = {}
    for key, values in (
        ("oa", [r.oa for r in reports]),
        ("aa", [r.aa for r in reports]),
        ("kappa", [r.kappa_score for r in reports]),
    ):
        summary[f"{key}_mean"] = float(np.mean(values))
        summary[f"{key}_std"] = float(np.std(values, ddof=1))
    return summary, reports

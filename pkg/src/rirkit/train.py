"""Training, evaluation, stream ablation and sweeps over a RunConfig.

Everything that lands in ``metrics.csv`` and the checkpoints is a pure
function of the RunConfig (seeds included). Wall-clock time goes to a
separate ``timing.csv`` so the metrics file can be compared byte for byte.
"""
import csv
import io
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import (
    BatchPlan,
    NormStats,
    augment_batch,
    batches,
    default_data_path,
    load_cifar,
    normalize,
    subset,
    synthetic_cifar,
)
from .errors import InputError, NumericalError, UnsupportedModelError
from .model import ModelKind, build_network, count_params, desk_spec, get_spec
from .optim import OptConfig, Optimizer, lr_at
from .tensor import softmax_cross_entropy

METRIC_FIELDS = ("epoch", "step", "lr", "train_loss", "train_acc", "test_acc")
EVAL_BATCH = 250

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_NAN = 3


# ---------------------------------------------------------------------------
# data / model setup
# ---------------------------------------------------------------------------

def load_splits(cfg):
    """Raw (unnormalized) train and test Datasets for a config."""
    k = cfg.num_classes
    if cfg.dataset == "synthetic":
        train = synthetic_cifar(cfg.synthetic_train, k, seed=0, split="train")
        test = synthetic_cifar(cfg.synthetic_test, k, seed=1, split="test")
    else:
        path = cfg.data_path or default_data_path()
        if not path:
            raise InputError("no dataset location: pass --data-path or set RIRKIT_DATA")
        variant = "c10" if cfg.dataset == "cifar10" else "c100"
        train = load_cifar(path, variant, "train")
        test = load_cifar(path, variant, "test")
    if cfg.subset and cfg.subset < len(train):
        train = subset(train, cfg.subset, cfg.subset_seed)
    if cfg.test_subset and cfg.test_subset < len(test):
        test = subset(test, cfg.test_subset, cfg.subset_seed)
    return train, test


def prepare_data(cfg, stats=None):
    train, test = load_splits(cfg)
    train, stats = normalize(train, stats)
    test, _ = normalize(test, stats)
    return train, test, stats


def make_model(cfg):
    dtype = np.float64 if cfg.f64 else np.float32
    spec = get_spec(cfg.arch, cfg.num_classes)
    return build_network(spec, cfg.kind, cfg.init, rng=cfg.seed, dtype=dtype)


def model_from_checkpoint(ck, **local):
    cfg = RunConfig.from_dict(ck.config, **local)
    model = make_model(cfg)
    model.load_state(ck.model_state())
    stats = None
    if ckpt_io.NORM_MEAN in ck.tensors:
        stats = NormStats(ck.tensors[ckpt_io.NORM_MEAN], ck.tensors[ckpt_io.NORM_STD])
    return cfg, model, stats


def evaluate(model, dataset):
    return model.accuracy(dataset.images, dataset.labels, EVAL_BATCH)


def _fmt(x):
    return f"{x:.6f}"


def _fmt_lr(x):
    return repr(float(x))  # shortest string that round-trips


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    status: int
    rows: list = field(default_factory=list)
    model: object = None
    stats: NormStats | None = None
    params: int = 0
    message: str = ""

    @property
    def initial_loss(self):
        return float(self.rows[0]["train_loss"]) if self.rows else float("nan")

    @property
    def final(self):
        return self.rows[-1] if self.rows else {}


def _initial_row(model, train, test, lr):
    """Epoch-0 row: the untrained model, train-mode BN without stat updates."""
    tot_loss, correct = 0.0, 0
    for s in range(0, len(train), EVAL_BATCH):
        x, y = train.images[s : s + EVAL_BATCH], train.labels[s : s + EVAL_BATCH]
        logits = model.forward(x, "train", update_stats=False)
        loss, _ = softmax_cross_entropy(logits, y)
        tot_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return {
        "epoch": 0,
        "step": 0,
        "lr": _fmt_lr(lr),
        "train_loss": _fmt(tot_loss / len(train)),
        "train_acc": _fmt(correct / len(train)),
        "test_acc": _fmt(evaluate(model, test)),
    }


def _save(path, model, cfg, stats, meta):
    ckpt_io.save(path, ckpt_io.from_model(model, cfg.snapshot(), meta, stats))


def _write_csv(path, rows, fields, comment=None):
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def metrics_comment(cfg, params):
    return f"arch={cfg.arch} kind={cfg.kind} params={params}"


def train(cfg, data=None, log=print):
    """Run one training job; writes metrics.csv, timing.csv and checkpoints to ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, stats = data if data is not None else prepare_data(cfg)
    model = make_model(cfg)
    n_params = count_params(model)
    opt = Optimizer(
        OptConfig(cfg.opt, cfg.lr, cfg.momentum, cfg.l2, center_decay=cfg.center_decay),
        model.identity_masks(),
    )
    comment = metrics_comment(cfg, n_params)
    res = TrainResult(EXIT_OK, model=model, stats=stats, params=n_params)
    timing = []
    res.rows.append(_initial_row(model, train_ds, test_ds, lr_at(1, cfg.lr, cfg.epochs)))
    log(f"[{cfg.kind} {cfg.arch}] params={n_params} initial loss={res.rows[0]['train_loss']}")
    best = -1.0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg.lr, cfg.epochs)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 7])
        tot_loss, correct, seen = 0.0, 0, 0
        for _, x, y in batches(train_ds, BatchPlan(cfg.batch_size, cfg.seed, epoch)):
            if cfg.augment:
                x = augment_batch(x, aug_rng)
            last_good = {k: v.copy() for k, v in model.state().items()}
            try:
                loss, grads, logits = model.loss_and_grads(x, y, return_logits=True)
                if not np.isfinite(loss):
                    raise NumericalError(f"loss is {loss} at epoch {epoch}, step {step + 1}")
                opt.step(model.params, grads, lr)
            except (NumericalError, FloatingPointError) as exc:
                model.load_state(last_good)
                _save(out / "last_good.rir", model, cfg, stats, {"epoch": epoch, "step": step})
                _write_csv(out / "metrics.csv", res.rows, METRIC_FIELDS, comment)
                res.status, res.message = EXIT_NAN, f"training diverged: {exc}"
                log(res.message)
                return res
            step += 1
            tot_loss += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        test_acc = evaluate(model, test_ds)
        row = {
            "epoch": epoch,
            "step": step,
            "lr": _fmt_lr(lr),
            "train_loss": _fmt(tot_loss / seen),
            "train_acc": _fmt(correct / seen),
            "test_acc": _fmt(test_acc),
        }
        res.rows.append(row)
        timing.append({"epoch": epoch, "wall_ms": int(round(1000 * (time.perf_counter() - t0)))})
        log(f"epoch {epoch}/{cfg.epochs} lr={row['lr']} loss={row['train_loss']} "
            f"train_acc={row['train_acc']} test_acc={row['test_acc']}")
        meta = {"epoch": epoch, "step": step, "test_acc": row["test_acc"]}
        if test_acc > best:
            best = test_acc
            _save(out / "best.rir", model, cfg, stats, meta)
    _save(out / "final.rir", model, cfg, stats, meta)
    _write_csv(out / "metrics.csv", res.rows, METRIC_FIELDS, comment)
    _write_csv(out / "timing.csv", timing, ("epoch", "wall_ms"))
    return res


# ---------------------------------------------------------------------------
# eval / ablation
# ---------------------------------------------------------------------------

def _test_set(cfg, stats):
    _, test = load_splits(cfg)
    test, _ = normalize(test, stats)
    return test


def eval_checkpoint(path, data_path=None, test=None):
    ck = ckpt_io.load(path)
    cfg, model, stats = model_from_checkpoint(ck, data_path=data_path)
    test = _test_set(cfg, stats) if test is None else test
    return evaluate(model, test), ck


ABLATION_FIELDS = ("layer_index", "stream", "test_acc")


def ablation_rows(model, test):
    """Baseline row then one row per (fused layer, stream)."""
    if not ModelKind.parse(model.kind).generalized:
        raise UnsupportedModelError(f"stream ablation needs a resnet-init or rir model, not {model.kind.value}")
    rows = [{"layer_index": -1, "stream": "none", "test_acc": _fmt(evaluate(model, test))}]
    for li in range(len(model.fused_layers())):
        for stream in ("residual", "transient"):
            with model.ablated(stream, li):
                acc = evaluate(model, test)
            rows.append({"layer_index": li, "stream": stream, "test_acc": _fmt(acc)})
    return rows


def ablate_checkpoint(path, out_csv, data_path=None, test=None):
    ck = ckpt_io.load(path)
    cfg, model, stats = model_from_checkpoint(ck, data_path=data_path)
    if not ModelKind.parse(cfg.kind).generalized:
        raise UnsupportedModelError(f"stream ablation needs a resnet-init or rir checkpoint, not {cfg.kind}")
    test = _test_set(cfg, stats) if test is None else test
    rows = ablation_rows(model, test)
    _write_csv(out_csv, rows, ABLATION_FIELDS)
    return rows


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_FIELDS = ("blocks", "layers_per_block", "kind", "arch", "params",
                "final_train_loss", "final_test_acc", "best_test_acc", "status", "message")


def parse_grid(text):
    """``"3x2,3x4"`` -> [(3, 2), (3, 4)] as (total blocks, layers per block)."""
    cells = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            b, layers = (int(v) for v in item.lower().split("x"))
        except ValueError:
            raise InputError(f"grid cell {item!r} is not of the form BLOCKSxLAYERS") from None
        cells.append((b, layers))
    if not cells:
        raise InputError("empty sweep grid")
    return cells


def sweep(cfg, cells, kinds, filters=8, log=print):
    """Train every (cell, kind); failures are recorded, not raised."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = None
    rows = []
    for blocks, layers in cells:
        for kind in kinds:
            row = {"blocks": blocks, "layers_per_block": layers, "kind": kind, "arch": "",
                   "params": "", "final_train_loss": "", "final_test_acc": "", "best_test_acc": "",
                   "status": "ok", "message": ""}
            try:
                if blocks % 3:
                    raise InputError(f"{blocks} blocks do not split over 3 stages")
                spec = desk_spec(blocks // 3, layers, filters)
                cell_cfg = replace(cfg, arch=spec.name, kind=kind, out=str(out / f"{kind}-{spec.name}"))
                row["arch"] = spec.name
                if data is None:
                    data = prepare_data(cfg)  # every cell sees the same data and order
                res = train(cell_cfg, data, log)
                row["params"] = res.params
                row["final_train_loss"] = res.final.get("train_loss", "")
                row["final_test_acc"] = res.final.get("test_acc", "")
                accs = [float(r["test_acc"]) for r in res.rows[1:]]
                row["best_test_acc"] = _fmt(max(accs)) if accs else ""
                if res.status != EXIT_OK:
                    row["status"], row["message"] = "diverged", res.message
            except Exception as exc:  # a failing cell must not stop the sweep
                row["status"], row["message"] = "failed", f"{type(exc).__name__}: {exc}"
            rows.append(row)
            _write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
    return rows

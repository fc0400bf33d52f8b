"""Multi-task training loop, validation, checkpoints and multi-seed runs."""
import csv
import io
import json
import logging
import math
import warnings
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .config import ConfigError, RunConfig, dump_config
from .data import CultureFallbackWarning, Dataset, gather_culture_block, culture_masked_loss, generate_synthetic
from .diffcore import AdamW, Module, no_grad
from .heads import TASK_NAMES, ChainHeads, build_heads
from .metrics import UndefinedMetricError, ccc, ccc_loss, cross_entropy, pearson, uar
from .weighting import LossWeighting

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vbmtl-checkpoint"
CHECKPOINT_VERSION = 1
PRIMARY_METRIC = {"type": "UAR", "two": "CCC", "high": "CCC", "culture": "CCC"}
LOG_HEADER = ("epoch", "task", "train_loss", "val_metric", "lr_backbone", "lr_heads", "lambda", "alpha")


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class MultiTaskModel(Module):
    def __init__(self, cfg, rng):
        b = cfg.backbone
        self.backbone = Backbone(b, rng)
        self.heads = build_heads(cfg.architecture, b.d_model, rng, b.n_layers, cfg.hidden,
                                 cfg.branch_blocks or None, cfg.branch_heads)
        # bind model-level names now so optimizer and checkpoint keys match state_dict
        for _ in self.named_parameters():
            pass

    def __call__(self, waves, truth=None, rng=None):
        stack = self.backbone.encode(waves, rng=rng)
        return self.heads(stack, truth)


def task_losses(outputs, labels, tasks):
    losses = {}
    for t in tasks:
        if t == "type":
            losses[t] = cross_entropy(outputs["type"], labels["type"])
        elif t == "culture":
            losses[t] = culture_masked_loss(outputs["culture"], labels["high"], labels["culture"])
        else:
            losses[t] = ccc_loss(outputs[t], labels[t])
    return losses


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _safe(fn, x, y):
    try:
        return fn(x, y)
    except UndefinedMetricError as exc:
        warnings.warn(f"metric undefined, scored as 0: {exc}", RuntimeWarning, stacklevel=3)
        return 0.0


def _mean_columns(fn, pred, target):
    return float(np.mean([_safe(fn, pred[:, j], target[:, j]) for j in range(pred.shape[1])]))


def score_predictions(preds, labels):
    """Per-task validation metrics over a whole split.

    ``preds`` holds numpy arrays: type logits (N, 8), two (N, 2), high (N, 10)
    and culture (N, 40). Culture scores are averaged over culture groups, each
    group scored on its own 10-wide block.
    """
    out = {}
    out["type"] = {"UAR": uar(labels["type"], np.argmax(preds["type"], axis=1), preds["type"].shape[1])}
    for t in ("two", "high"):
        out[t] = {"CCC": _mean_columns(ccc, preds[t], labels[t]), "ρ": _mean_columns(pearson, preds[t], labels[t])}
    culture = np.asarray(labels["culture"])
    blocks = gather_culture_block(preds["culture"], culture).data
    cc, rr = [], []
    for c in np.unique(culture):
        g = culture == c
        if g.sum() < 2:
            continue
        cc.append(_mean_columns(ccc, blocks[g], labels["high"][g]))
        rr.append(_mean_columns(pearson, blocks[g], labels["high"][g]))
    out["culture"] = {"CCC": float(np.mean(cc)) if cc else 0.0, "ρ": float(np.mean(rr)) if rr else 0.0}
    return out


def monitor_value(metrics):
    """Unweighted mean of the four primary validation metrics."""
    return float(np.mean([metrics[t][PRIMARY_METRIC[t]] for t in TASK_NAMES]))


def predict(model, waves, batch_size=64):
    model.eval()
    chunks = []
    with no_grad():
        for i in range(0, len(waves), batch_size):
            out = model(waves[i:i + batch_size])
            chunks.append({k: v.data for k, v in out.items()})
    if model.backbone.last_masked:
        raise AssertionError("masking active during evaluation")
    if isinstance(model.heads, ChainHeads) and model.heads.conditioning_source != "prediction":
        raise AssertionError("chain fed ground truth during evaluation")
    return {k: np.concatenate([c[k] for c in chunks]) for k in chunks[0]}


# ---------------------------------------------------------------------------
# scheduler
# ---------------------------------------------------------------------------

class PlateauScheduler:
    """Signals a learning-rate cut after ``patience`` epochs without improvement.

    Higher monitor values are better. After a cut the counter restarts.
    """

    def __init__(self, patience=5, factor=0.5):
        self.patience = patience
        self.factor = factor
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, value):
        if value > self.best:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return True
        return False

    def state_dict(self):
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state):
        self.best = float(state["best"])
        self.bad_epochs = int(state["bad_epochs"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, cfg, model, optimizer, weighting, scheduler, epoch, monitor):
    """Write a zip of ``.npy`` members with fixed timestamps (byte-reproducible).

    Members: ``meta.json`` (format, version, config echo, optimizer scalars,
    scheduler state, epoch, monitor), ``param/<name>.npy``,
    ``opt/m/<name>.npy``, ``opt/v/<name>.npy`` and ``weighting/<key>.npy``.
    """
    opt_state = optimizer.state_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "epoch": epoch,
        "monitor": monitor,
        "optimizer": {"step_count": opt_state["step_count"], "lrs": opt_state["lrs"]},
        "scheduler": scheduler.state_dict(),
    }
    members = [("meta.json", json.dumps(meta, sort_keys=True).encode())]
    members += [(f"param/{k}.npy", _npy_bytes(v)) for k, v in model.state_dict().items()]
    members += [(f"opt/{k}.npy", _npy_bytes(v)) for k, v in opt_state.items() if k[:2] in ("m/", "v/")]
    members += [(f"weighting/{k}.npy", _npy_bytes(v)) for k, v in weighting.state_dict().items()]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in members:
            zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), payload)


def load_checkpoint(path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatchError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    weighting = {k[10:]: v for k, v in arrays.items() if k.startswith("weighting/")}
    return meta, params, opt, weighting


def model_from_checkpoint(path, expect=None):
    meta, params, _, _ = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    if expect is not None:
        for key in ("architecture", "hidden", "branch_blocks", "branch_heads"):
            if getattr(expect, key) != getattr(cfg, key):
                raise CheckpointMismatchError(f"checkpoint {key}={getattr(cfg, key)!r} but config has {getattr(expect, key)!r}")
        if expect.backbone != cfg.backbone:
            raise CheckpointMismatchError("checkpoint backbone config differs from the requested one")
    model = MultiTaskModel(cfg, np.random.default_rng(0))
    model.load_state_dict(params)
    return model, cfg, meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: dict
    val_metrics: dict
    lambdas: dict
    alphas: dict
    lr_backbone: float
    lr_heads: float
    monitor: float

    def log_rows(self):
        for t in self.train_loss:
            yield (self.epoch, t, repr(self.train_loss[t]), repr(self.val_metrics[t][PRIMARY_METRIC[t]]),
                   repr(self.lr_backbone), repr(self.lr_heads), repr(self.lambdas[t]), repr(self.alphas[t]))


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    records: list
    best_epoch: int
    best_metrics: dict
    best_checkpoint: bytes = field(repr=False, default=b"")
    out_dir: str = ""
    conditioning_trace: list = field(default_factory=list, repr=False)

    @property
    def best_monitor(self):
        return monitor_value(self.best_metrics)


def load_data(cfg):
    if cfg.data_dir:
        return Dataset.load(cfg.data_dir, cfg.backbone.input_len)
    manifest, signals = generate_synthetic(cfg.n_samples, cfg.data_seed, target_len=cfg.backbone.input_len)
    return Dataset(manifest, signals, cfg.backbone.input_len)


def _batch_truth(labels, idx):
    return {k: v[idx] for k, v in labels.items()}


def train(cfg, dataset=None, seed=None, out_dir=None, monitor_hook=None):
    """Train one model; returns a :class:`RunResult`.

    ``monitor_hook(epoch, monitor) -> monitor`` may replace the monitor value
    fed to the scheduler (used to script scheduler tests).
    """
    cfg = cfg.validate()
    seed = cfg.seeds[0] if seed is None else int(seed)
    dataset = load_data(cfg) if dataset is None else dataset
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if len(train_set) < 2 or len(val_set) < 2:
        raise ConfigError(f"need >= 2 samples in train and val splits, got {len(train_set)} / {len(val_set)}")

    init_rng, shuffle_rng, mask_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    model = MultiTaskModel(cfg, init_rng)
    tasks = [t for t in TASK_NAMES if t in cfg.tasks]
    weighting = LossWeighting(cfg.strategy, len(tasks), cfg.temperature, cfg.phi, cfg.druw_mix)
    params = model.backbone.parameters()
    for t in tasks:
        params += model.heads.task_parameters(t)
    params += weighting.parameters()
    optimizer = AdamW(params, {"backbone": cfg.lr_backbone, "head": cfg.lr_heads, "weighting": cfg.lr_weighting},
                      betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    scheduler = PlateauScheduler(cfg.plateau_patience, cfg.plateau_factor)

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(dump_config(cfg.replace(seeds=[seed])), encoding="utf-8")
        with open(out / "epochs.csv", "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(LOG_HEADER)

    labels = train_set.labels()
    val_labels = val_set.labels()
    records, trace = [], []
    best = None
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        sums = dict.fromkeys(tasks, 0.0)
        n_batches = 0
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            truth = _batch_truth(labels, idx)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CultureFallbackWarning)
                outputs = model(train_set.waves[idx], truth, rng=mask_rng)
                losses = task_losses(outputs, truth, tasks)
            if isinstance(model.heads, ChainHeads):
                trace.append(("train", model.heads.conditioning_source))
            for t, l in losses.items():
                if not np.isfinite(l.data).all():
                    raise TrainingDivergedError(f"non-finite {t} loss at epoch {epoch}, batch {start // cfg.batch_size}")
                sums[t] += float(l.data)
            total = weighting([losses[t] for t in tasks])
            total.backward()
            optimizer.step()
            n_batches += 1
        means = {t: sums[t] / n_batches for t in tasks}
        lambdas = dict(zip(tasks, weighting.lambdas().tolist()))
        alphas = dict(zip(tasks, weighting.alphas().tolist()))
        weighting.end_epoch([means[t] for t in tasks])

        preds = predict(model, val_set.waves, cfg.eval_batch_size)
        if isinstance(model.heads, ChainHeads):
            trace.append(("eval", model.heads.conditioning_source))
        metrics = score_predictions(preds, val_labels)
        monitor = monitor_value(metrics)
        rec = EpochRecord(epoch, means, metrics, lambdas, alphas,
                          optimizer.lrs["backbone"], optimizer.lrs["head"], monitor)
        records.append(rec)
        log.info("epoch %d monitor %.4f %s", epoch, monitor,
                 " ".join(f"{t}={metrics[t][PRIMARY_METRIC[t]]:.4f}" for t in TASK_NAMES))

        sched_value = monitor_hook(epoch, monitor) if monitor_hook else monitor
        if scheduler.step(sched_value):
            optimizer.scale_lrs(cfg.plateau_factor)

        buf = io.BytesIO()
        save_checkpoint(buf, cfg, model, optimizer, weighting, scheduler, epoch, monitor)
        if best is None or monitor > best[0]:
            best = (monitor, epoch, metrics, buf.getvalue())
        if out:
            with open(out / "epochs.csv", "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerows(rec.log_rows())
            (out / "last.ckpt").write_bytes(buf.getvalue())
            if best[1] == epoch:
                (out / "best.ckpt").write_bytes(buf.getvalue())

    result = RunResult(cfg, seed, records, best[1], best[2], best[3], str(out or ""), trace)
    if out:
        (out / "report.json").write_text(json.dumps(run_report(result), indent=2, ensure_ascii=False) + "\n",
                                         encoding="utf-8")
    return result


def run_report(result):
    return {
        "seed": result.seed,
        "architecture": result.config.architecture,
        "strategy": result.config.strategy,
        "best_epoch": result.best_epoch,
        "best_monitor": result.best_monitor,
        "best_metrics": result.best_metrics,
        "final_metrics": result.records[-1].val_metrics,
    }


def evaluate(checkpoint, split="val", dataset=None, config=None):
    """Score a checkpoint on one split; ``config`` (optional) must match it."""
    model, cfg, _ = model_from_checkpoint(checkpoint, expect=config)
    dataset = load_data(config or cfg) if dataset is None else dataset
    part = dataset.split(split)
    if len(part) < 2:
        raise ConfigError(f"split {split!r} has fewer than 2 samples")
    preds = predict(model, part.waves, cfg.eval_batch_size)
    return score_predictions(preds, part.labels())


# ---------------------------------------------------------------------------
# multiple seeds
# ---------------------------------------------------------------------------

def _train_seed(args):
    cfg, seed, out_dir = args
    return train(cfg, seed=seed, out_dir=out_dir)


def multi_seed(cfg, out_dir=None, dataset=None):
    """Train once per seed; report per-seed best metrics and per-task maxima."""
    jobs = [(cfg, s, str(Path(out_dir) / f"seed{s}") if out_dir else None) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1 and dataset is None:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train_seed, jobs))
    else:
        results = [train(c, dataset=dataset, seed=s, out_dir=o) for c, s, o in jobs]
    return results, aggregate(results)


def aggregate(results):
    rows = [{"seed": r.seed, **_flatten(r.best_metrics), "monitor": r.best_monitor} for r in results]
    best = {"seed": "best"}
    for key in rows[0]:
        if key != "seed":
            best[key] = max(r[key] for r in rows)
    return rows + [best]


def _flatten(metrics):
    return {f"{t}/{m}": v for t in TASK_NAMES for m, v in metrics[t].items()}

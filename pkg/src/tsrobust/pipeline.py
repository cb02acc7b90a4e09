"""Three-stage training driver: negative-sample pretraining, dual-channel
training on repaired inputs, evaluation; plus the ablation grid."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import attnmodel, ecos, negsample, possample
from .negsample import AugConfig
from .possample import CleanConfig, CleanStats
from .series_io import (NormStats, TimeSeries, WindowBatch, apply_norm, drop_incomplete_targets,
                        fit_norm, load_csv, make_windows, metric_suite)

log = logging.getLogger(__name__)

SPLIT = (0.7, 0.1, 0.2)

# name -> (use_neg_pretrain, use_pos_generation, use_ecos)
ABLATIONS = {
    "full": (True, True, True),
    "w/o Neg": (False, True, True),
    "w/o Pos": (True, False, True),
    "w/o ECOS": (True, True, False),
    "w/o Pos+ECOS": (True, False, False),
    "w/o Neg+ECOS": (False, True, False),
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class RunConfig:
    data: Optional[str] = None
    lookback: int = 96
    horizon: int = 24
    stride: int = 1
    epochs: int = 30
    pretrain_epochs: Optional[int] = None  # None -> epochs // 3
    batch_size: int = 32
    seed: int = 0
    d_model: int = 32
    aug: AugConfig = field(default_factory=AugConfig)
    clean: CleanConfig = field(default_factory=CleanConfig)
    ecos: ecos.EcosConfig = field(default_factory=ecos.EcosConfig)
    use_neg_pretrain: bool = True
    use_pos_generation: bool = True
    use_ecos: bool = True
    ecos_in_pretrain: bool = True
    ecos_in_train: bool = True
    freeze_qk: bool = False

    def __post_init__(self):
        for name in ("lookback", "horizon", "stride", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or (self.pretrain_epochs is not None and self.pretrain_epochs < 0):
            raise ValueError("epoch counts must be non-negative")

    @property
    def n_pretrain_epochs(self) -> int:
        return self.epochs // 3 if self.pretrain_epochs is None else self.pretrain_epochs

    def model_config(self, channels: int = 1) -> attnmodel.ModelConfig:
        return attnmodel.ModelConfig(self.lookback, self.horizon, self.d_model, channels)

    def with_toggles(self, neg: bool, pos: bool, use_ecos: bool) -> "RunConfig":
        return replace(self, use_neg_pretrain=neg, use_pos_generation=pos, use_ecos=use_ecos)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("aug", "clean", "ecos")}
        d["aug"] = self.aug.to_dict()
        d["clean"] = asdict(self.clean)
        d["ecos"] = asdict(self.ecos)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "aug" in d:
            d["aug"] = AugConfig.from_dict(d["aug"])
        if "clean" in d:
            d["clean"] = CleanConfig(**d["clean"])
        if "ecos" in d:
            d["ecos"] = ecos.EcosConfig(**d["ecos"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SplitData:
    z_orig: np.ndarray  # [B, C, L] normalized, missing cells zero-filled
    z_aug: np.ndarray  # [B, C, L] repaired copy (or z_orig when repair is off)
    target: np.ndarray  # [B, C, H] normalized
    truth: np.ndarray  # [B, C, H] original units
    origins: list[int]
    offset: int  # first source index of the split

    def __len__(self):
        return self.z_orig.shape[0]


@dataclass
class PreparedData:
    norm: NormStats
    clean_stats: list[CleanStats]
    train: SplitData
    val: SplitData
    test: SplitData
    channel_names: list[str]

    @property
    def channels(self) -> int:
        return self.train.z_orig.shape[1]


@dataclass
class RunReport:
    pretrain_losses: list[float] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    diagnostics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    attention_path: Optional[str] = None
    figure_paths: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# -- data ----------------------------------------------------------------------

def split_bounds(length: int, ratios=SPLIT) -> tuple[tuple[int, int], ...]:
    n_train = int(length * ratios[0])
    n_val = int(length * ratios[1])
    return (0, n_train), (n_train, n_train + n_val), (n_train + n_val, length)


def positive_channel(inputs: np.ndarray, clean: CleanConfig,
                     stats: list[CleanStats]) -> np.ndarray:
    """Repair every (window, channel) lookback with the given fence statistics."""
    out = np.zeros_like(inputs)
    B, C, _ = inputs.shape
    for b in range(B):
        for c in range(C):
            try:
                out[b, c], _ = possample.make_positive(inputs[b, c], clean, stats=stats[c])
            except possample.CleaningError:
                pass  # nothing left to interpolate from: keep the zero fill
    return out


def _split_data(series: TimeSeries, bounds, cfg: RunConfig, norm: NormStats,
                stats: list[CleanStats], stride: int) -> SplitData:
    lo, hi = bounds
    part = apply_norm(series.slice(lo, hi), norm)
    windows = drop_incomplete_targets(make_windows(part, cfg.lookback, cfg.horizon, stride))
    if len(windows) == 0:
        raise ValueError(f"split [{lo}, {hi}) has no window with a complete target")
    z_orig = np.nan_to_num(windows.inputs, nan=0.0)
    if cfg.use_pos_generation:
        z_aug = positive_channel(windows.inputs, cfg.clean, stats)
    else:
        z_aug = z_orig.copy()
    truth = norm.invert(windows.targets, channel_axis=1)
    return SplitData(z_orig, z_aug, windows.targets, truth, list(windows.origin_indices), lo)


def prepare(series: TimeSeries, cfg: RunConfig) -> PreparedData:
    """Chronological 70/10/20 split; normalization and cleaning statistics are
    fitted on the training part only."""
    (tr, va, te) = split_bounds(series.length)
    train_part = series.slice(*tr)
    norm = fit_norm(train_part)
    normed = apply_norm(train_part, norm)
    stats = [possample.fit_clean_stats(normed.values[c], normed.mask[c])
             for c in range(series.n_channels)]
    return PreparedData(
        norm=norm, clean_stats=stats,
        train=_split_data(series, tr, cfg, norm, stats, cfg.stride),
        val=_split_data(series, va, cfg, norm, stats, 1),
        test=_split_data(series, te, cfg, norm, stats, 1),
        channel_names=list(series.channel_names),
    )


# -- training ------------------------------------------------------------------

class _Trainer:
    """Owns optimizer state and the diagnostics stream for one stage."""

    def __init__(self, cfg: RunConfig, stage: str, use_ecos: bool, frozen=(), steps_out=None):
        self.cfg = cfg
        self.stage = stage
        self.use_ecos = use_ecos
        self.frozen = tuple(frozen)
        self.state = ecos.EcosState()
        self.steps_out = steps_out

    def step(self, params, batch: ecos.TrainBatch):
        objective = ecos.Objective(batch, frozen=self.frozen)
        if self.use_ecos:
            params, diag = ecos.ecos_step(params, batch, self.cfg.ecos, self.state, objective)
            if self.steps_out is not None:
                self.steps_out.append({"stage": self.stage, **diag})
            return params, diag["loss_clean"]
        loss, grads = objective(params)
        if not np.isfinite(loss):
            raise ecos.NonFiniteLossError("non-finite loss")
        params = ecos.adam_step(params, grads, self.state.base_state, self.cfg.ecos.lr)
        return params, loss


def _epoch_order(n: int, seed: int, stage: str, epoch: int) -> np.ndarray:
    salt = {"pretrain": 1, "train": 2}[stage]
    rng = np.random.default_rng(np.random.SeedSequence([seed, salt, epoch]))
    return rng.permutation(n)


def _derive_seed(*keys: int) -> int:
    state = np.random.SeedSequence(list(keys)).generate_state(1, np.uint64)[0]
    return int(state & 0x7FFFFFFFFFFFFFFF)


def _batches(order: np.ndarray, size: int):
    for i in range(0, order.size, size):
        yield order[i:i + size]


def stage_pretrain(params, data: PreparedData, cfg: RunConfig,
                   steps_out: Optional[list] = None) -> tuple[dict, list[float]]:
    """Fit on augmented negatives, duplicated into both input channels."""
    trainer = _Trainer(cfg, "pretrain", cfg.use_ecos and cfg.ecos_in_pretrain, steps_out=steps_out)
    split = data.train
    losses = []
    for epoch in range(cfg.n_pretrain_epochs):
        aug = replace(cfg.aug, seed=_derive_seed(cfg.aug.seed, cfg.seed, epoch))
        epoch_losses = []
        for idx in _batches(_epoch_order(len(split), cfg.seed, "pretrain", epoch), cfg.batch_size):
            wb = WindowBatch(split.z_orig[idx], split.target[idx], [split.origins[i] for i in idx])
            neg = negsample.make_negative_batch(wb, aug).inputs
            params, loss = trainer.step(params, ecos.TrainBatch(neg, neg.copy(), split.target[idx]))
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
        log.info("pretrain epoch %d loss %.6f", epoch, losses[-1])
    return params, losses


def stage_train(params, data: PreparedData, cfg: RunConfig,
                steps_out: Optional[list] = None) -> tuple[dict, list[float], list[float]]:
    """Fit on (original, repaired) input pairs; returns train and val loss curves."""
    frozen = ("w_q", "b_q", "w_k", "b_k") if cfg.freeze_qk else ()
    trainer = _Trainer(cfg, "train", cfg.use_ecos and cfg.ecos_in_train, frozen, steps_out)
    split = data.train
    losses, val_losses = [], []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for idx in _batches(_epoch_order(len(split), cfg.seed, "train", epoch), cfg.batch_size):
            batch = ecos.TrainBatch(split.z_orig[idx], split.z_aug[idx], split.target[idx])
            params, loss = trainer.step(params, batch)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
        val_losses.append(split_loss(params, data.val, cfg.batch_size))
        log.info("train epoch %d loss %.6f val %.6f", epoch, losses[-1], val_losses[-1])
    return params, losses, val_losses


def predict(params, split: SplitData, batch_size: int = 256):
    """Normalized predictions for a split and the summed attention weights."""
    preds = []
    attn_sum = None
    count = 0
    for i in range(0, len(split), batch_size):
        pred, trace = attnmodel.forward(params, split.z_orig[i:i + batch_size],
                                        split.z_aug[i:i + batch_size])
        preds.append(pred)
        s = trace.weights.sum(axis=0)
        attn_sum = s if attn_sum is None else attn_sum + s
        count += trace.weights.shape[0]
    return np.concatenate(preds), attn_sum / count


def split_loss(params, split: SplitData, batch_size: int = 256) -> float:
    pred, _ = predict(params, split, batch_size)
    return attnmodel.mse_loss(pred, split.target)


def evaluate(params, data: PreparedData, cfg: RunConfig, split: str = "test",
             batch_size: int = 256) -> tuple[dict, np.ndarray]:
    """Metrics on denormalized predictions plus the averaged attention matrix."""
    part = getattr(data, split)
    if len(part) == 0:
        raise PipelineError("evaluate", f"empty {split} split")
    pred, attention = predict(params, part, batch_size)
    metrics = metric_suite(data.norm.invert(pred, channel_axis=1), part.truth)
    metrics["mse_normalized"] = attnmodel.mse_loss(pred, part.target)
    return metrics, attention


def _load_series(cfg: RunConfig, series: Optional[TimeSeries]) -> TimeSeries:
    if series is not None:
        return series
    if cfg.data is None:
        raise PipelineError("load", "no data path configured")
    return load_csv(cfg.data)


def train_model(cfg: RunConfig, series: TimeSeries, steps_out: Optional[list] = None):
    """Prepare data and run both training stages. Returns (params, data, report)."""
    try:
        data = prepare(series, cfg)
    except (ValueError, possample.CleaningError) as exc:
        raise PipelineError("prepare", str(exc)) from exc
    params = attnmodel.init_params(cfg.model_config(data.channels), cfg.seed)
    report = RunReport(config=cfg.to_dict())
    if cfg.use_neg_pretrain:
        try:
            params, report.pretrain_losses = stage_pretrain(params, data, cfg, steps_out)
        except Exception as exc:
            raise PipelineError("pretrain", str(exc)) from exc
    try:
        params, report.train_losses, report.val_losses = stage_train(params, data, cfg, steps_out)
    except Exception as exc:
        raise PipelineError("train", str(exc)) from exc
    return params, data, report


def run(cfg: RunConfig, out_dir=None, series: Optional[TimeSeries] = None,
        figures: bool = True) -> RunReport:
    """Full pipeline; writes report.json, checkpoint, attention.csv and
    steps.jsonl (plus figures) to ``out_dir`` when given."""
    series = _load_series(cfg, series)
    steps: list = []
    params, data, report = train_model(cfg, series, steps)
    try:
        report.metrics, attention = evaluate(params, data, cfg)
    except Exception as exc:
        raise PipelineError("evaluate", str(exc)) from exc

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        attnmodel.save_checkpoint(params, out / "checkpoint")
        attnmodel.save_attention_csv(attention, out / "attention.csv")
        with (out / "steps.jsonl").open("w") as fh:
            for row in steps:
                fh.write(json.dumps(row) + "\n")
        report.checkpoint_path = str(out / "checkpoint")
        report.attention_path = str(out / "attention.csv")
        report.diagnostics_path = str(out / "steps.jsonl")
        if figures:
            from . import plotting
            report.figure_paths = [str(plotting.plot_losses(report, out / "losses.png"))]
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def evaluate_checkpoint(cfg: RunConfig, checkpoint, series: Optional[TimeSeries] = None):
    series = _load_series(cfg, series)
    params = attnmodel.load_checkpoint(checkpoint)
    data = prepare(series, cfg)
    return evaluate(params, data, cfg)


def ablate(cfg: RunConfig, series: Optional[TimeSeries] = None, seeds=(0,),
           names=tuple(ABLATIONS)) -> list[dict]:
    """Test metrics for each ablation configuration, medians over ``seeds``."""
    series = _load_series(cfg, series)
    rows = []
    for name in names:
        neg, pos, use_ecos = ABLATIONS[name]
        per_seed = []
        for seed in seeds:
            sub = replace(cfg.with_toggles(neg, pos, use_ecos), seed=seed)
            per_seed.append(run(sub, series=series).metrics)
        rows.append({
            "config": name,
            "use_neg_pretrain": neg, "use_pos_generation": pos, "use_ecos": use_ecos,
            "mse": float(np.median([m["mse"] for m in per_seed])),
            "mae": float(np.median([m["mae"] for m in per_seed])),
            "mse_per_seed": [m["mse"] for m in per_seed],
        })
        log.info("ablation %s: mse %.6f mae %.6f", name, rows[-1]["mse"], rows[-1]["mae"])
    return rows

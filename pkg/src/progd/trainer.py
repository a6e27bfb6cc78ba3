"""Training loop, evaluation and the ablation harness.

Config files are flat ``key = value`` text, one key per line, ``#`` starts a
comment. Keys are the fields of :class:`TrainConfig`; booleans accept
``true/false/1/0/yes/no``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .decoder import JointPrediction
from .dyngraph import SnapshotError
from .metrics import EvalCase, MetricReport, evaluate_predictions
from .model import ModelConfig, PreparedScene, ProgD, load_model, prepare, save_model
from .objectives import compute_losses, total_loss
from .scenario import Scenario, to_global

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "l_joint", "l_mid", "l_marg", "l_prob", "total")
METRIC_COLUMNS = ("minJADE", "minJFDE", "minJMR", "crossCR", "egoCR", "consis_minJMR",
                  "actorMR", "actorCR", "b_minJFDE", "top1_JADE", "top1_JFDE")

# module-ablation variants: (temporal, static graph, dynamic AA, dynamic AL, multiscale)
MODULE_VARIANTS = {
    1: (True, False, True, True, True),
    2: (False, False, False, False, False),
    3: (True, False, False, False, False),
    4: (False, False, True, True, False),
    5: (True, False, True, True, False),
    6: (True, True, False, False, False),
    7: (True, False, False, True, False),
    8: (True, False, True, False, False),
}


class TrainingDiverged(RuntimeError):
    """The loss or a gradient became non-finite."""


class ConfigError(ValueError):
    """A config file or value is invalid."""


@dataclass(frozen=True)
class TrainConfig:
    d: int = 32
    modes: int = 6
    heads: int = 8
    tau: float = 1.0
    eps: float = 15.0
    aa_radius: float = 15.0
    seed_radius: float = 20.0
    dfs_depth: int = 4
    hetero_layers: int = 3
    agent_layers: int = 0
    lambda1: float = 1.0
    lambda2: float = 1.0
    prob_weight: float = 0.5
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    max_steps: int = 0  # 0: no cap
    grad_clip: float = 0.0  # 0: off
    seed: int = 0
    temporal_module: bool = True
    dyn_aa_edges: bool = True
    dyn_aa_eps: float | None = None  # L1 gate for decoder agent2agent edges; None: fully connected
    dyn_al_edges: bool = True
    multiscale: bool = True
    static_future_graph: bool = False

    def __post_init__(self):
        if self.modes < 1:
            raise ConfigError("modes must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("epochs and max_steps must be >= 0")

    def model_config(self) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in keys})


def _coerce(name: str, kind, text: str):
    text = text.strip()
    if kind in (bool, "bool"):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {name!r}: expected a boolean, got {text!r}")
    if isinstance(kind, str) and "None" in kind and text.lower() in ("none", ""):
        return None
    try:
        if kind in (int, "int"):
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {text!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _coerce(key, types[key], value)
    return replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


class Adam:
    """Adam with bias correction; state is keyed by parameter position."""

    def __init__(self, params: list[ad.Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: ProgD
    losses: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0
    marginal_grad_norm: float = 0.0  # max over steps of the marginal-header gradient norm


def scene_loss(model: ProgD, prep: PreparedScene, cfg: TrainConfig):
    if prep.gt is None:
        raise ValueError(f"{prep.scenario.scenario_id}: training needs ground truth")
    out = model(prep)
    dc = model.decoder_cfg
    return compute_losses(out, prep.gt, dc.stage_steps, dc.mid_step, cfg.lambda1, cfg.lambda2,
                          cfg.prob_weight, cfg.beta)


def _grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


def _clip(params, limit: float) -> None:
    norm = _grad_norm(params)
    if norm > limit:
        for p in params:
            if p.grad is not None:
                p.grad *= limit / norm


def train_step(model: ProgD, batch: list[PreparedScene], cfg: TrainConfig, opt: Adam) -> dict:
    """One optimizer step on the batch mean of ``total_loss``."""
    model.zero_grad()
    sums = dict.fromkeys(LOSS_COLUMNS[2:], 0.0)
    scale = 1.0 / len(batch)
    for prep in batch:
        try:
            b = scene_loss(model, prep, cfg)
        except SnapshotError as e:  # non-finite stage endpoints
            raise TrainingDiverged(f"step {opt.t + 1} on {prep.scenario.scenario_id}: {e}") from None
        row = b.row()
        if not all(math.isfinite(v) for v in row.values()):
            raise TrainingDiverged(f"non-finite loss at step {opt.t + 1} on {prep.scenario.scenario_id}: {row}")
        ad.backward(total_loss(b) * scale)
        for k in sums:
            sums[k] += row[k] * scale
    params = model.parameters()
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient for {name} at step {opt.t + 1}")
    if cfg.grad_clip > 0:
        _clip(params, cfg.grad_clip)
    opt.step()
    return sums


def predict_scenes(model: ProgD, preps: list[PreparedScene]) -> list[JointPrediction]:
    return [model.predict(p) for p in preps]


def evaluate_model(model: ProgD, scenarios: list[Scenario], preps: list[PreparedScene] | None = None):
    """Metric report and predictions over labeled scenarios."""
    if not scenarios:
        raise ValueError("evaluation split is empty")
    for s in scenarios:
        model.check_horizon(s)
    preps = preps or [prepare(s, model.cfg) for s in scenarios]
    preds = predict_scenes(model, preps)
    cases = [EvalCase.from_scenario(s) for s in scenarios]
    return evaluate_predictions(cases, preds), preds


def train(cfg: TrainConfig, train_set: list[Scenario], val_set: list[Scenario] | None = None,
          out_dir=None) -> TrainResult:
    """Fit a fresh model; the best validation epoch (lowest minJFDE) is kept."""
    if not train_set:
        raise ValueError("training split is empty")
    horizon = train_set[0].horizon
    model = ProgD(cfg.model_config(), horizon, seed=cfg.seed)
    for s in list(train_set) + list(val_set or []):
        model.check_horizon(s)
    mcfg = model.cfg
    train_preps = [prepare(s, mcfg) for s in train_set]
    val_preps = [prepare(s, mcfg) for s in val_set] if val_set else []
    opt = Adam(model.parameters(), lr=cfg.lr)
    marginal_params = model.decoder.marginal_header.parameters()
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model=model)
    best_score, best_state = math.inf, model.state_dict()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_preps))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps and opt.t >= cfg.max_steps:
                break
            batch = [train_preps[i] for i in order[start:start + cfg.batch_size]]
            row = train_step(model, batch, cfg, opt)
            result.marginal_grad_norm = max(result.marginal_grad_norm, _grad_norm(marginal_params))
            result.losses.append({"step": opt.t, "epoch": epoch, **row})
        if val_preps:
            report, _ = evaluate_model(model, list(val_set), val_preps)
            score = report.minJFDE
            result.val_history.append({"epoch": epoch, **report.aggregate()})
            log.info("epoch %d: val minJFDE %.4f", epoch, score)
        else:
            score = -epoch  # no validation: keep the latest
        if score < best_score:
            best_score, best_state, result.best_epoch = score, model.state_dict(), epoch
        if cfg.max_steps and opt.t >= cfg.max_steps:
            break
    model.load_state_dict(best_state)
    result.steps = opt.t
    if out_dir is not None:
        write_training_outputs(result, cfg, out_dir)
    return result


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_training_outputs(result: TrainResult, cfg: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out / "model.ckpt.json", {"train": asdict(cfg), "best_epoch": result.best_epoch})
    atomic_write(out / "losses.csv", _csv_text(LOSS_COLUMNS, result.losses))
    if result.val_history:
        atomic_write(out / "val_metrics.csv", _csv_text(("epoch",) + METRIC_COLUMNS, result.val_history))


def prediction_record(scn: Scenario, pred: JointPrediction, global_frame: bool = False) -> dict:
    """One predictions-JSONL line; coordinates in the scenario frame unless
    ``global_frame`` maps them back through ``scn.frame``."""
    by_mode = pred.by_mode()  # (K, n, T, 2)
    if global_frame:
        by_mode = to_global(by_mode.reshape(-1, 2), scn.frame).reshape(by_mode.shape)
    return {
        "scenario_id": scn.scenario_id,
        "probs": pred.probs.tolist(),
        "trajectories": {str(aid): by_mode[:, i].tolist() for i, aid in enumerate(pred.agent_ids)},
    }


def metrics_json(report: MetricReport) -> str:
    return json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"


def write_predictions(scenarios, preds, path, global_frame: bool = False) -> None:
    lines = [json.dumps(prediction_record(s, p, global_frame), sort_keys=True) for s, p in zip(scenarios, preds)]
    atomic_write(path, "".join(line + "\n" for line in lines))


def write_evaluation(report: MetricReport, scenarios, preds, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "metrics.json", metrics_json(report))
    write_predictions(scenarios, preds, out / "predictions.jsonl")


def evaluate(checkpoint, scenarios: list[Scenario], out_dir=None) -> MetricReport:
    """Full metric suite of a saved model over ``scenarios``."""
    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = load_model(path)
    report, preds = evaluate_model(model, scenarios)
    if out_dir is not None:
        write_evaluation(report, scenarios, preds, out_dir)
    return report


# ---------------------------------------------------------------------------
# ablation


ABLATION_AXES = ("tau", "modules", "lambda2")


def ablation_configs(base: TrainConfig, axis: str, values, horizon) -> list[tuple[str, TrainConfig]]:
    """Validate every value up front so a bad one fails before any training."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    out = []
    for raw in values:
        if axis == "tau":
            cfg = replace(base, tau=float(raw))
            try:
                cfg.model_config().decoder_config(horizon)
            except ValueError as e:
                raise ConfigError(f"tau={raw}: {e}") from None
        elif axis == "lambda2":
            cfg = replace(base, lambda2=float(raw))
        else:
            vid = int(raw)
            if vid not in MODULE_VARIANTS:
                raise ConfigError(f"unknown module variant {raw!r}; expected 1-8")
            temporal, static, aa, al, multi = MODULE_VARIANTS[vid]
            cfg = replace(base, temporal_module=temporal, static_future_graph=static,
                          dyn_aa_edges=aa or static, dyn_al_edges=al or static, multiscale=multi)
        out.append((str(raw), cfg))
    return out


ABLATION_COLUMNS = ("axis", "value", "top1_JADE", "top1_JFDE", "minJADE", "minJFDE", "actorMR",
                    "b_minJFDE", "minJMR", "consis_minJMR", "crossCR", "egoCR", "actorCR",
                    "marginal_grad_norm")


def ablate(base: TrainConfig, axis: str, values, train_set, val_set, test_set, out_dir=None) -> list[dict]:
    if not train_set or not test_set:
        raise ValueError("ablation needs non-empty train and test splits")
    variants = ablation_configs(base, axis, values, train_set[0].horizon)
    rows = []
    for value, cfg in variants:
        result = train(cfg, train_set, val_set)
        report, _ = evaluate_model(result.model, test_set)
        agg = report.aggregate()
        row = {"axis": axis, "value": value, "marginal_grad_norm": result.marginal_grad_norm}
        row.update({k: agg[k] for k in ABLATION_COLUMNS if k in agg})
        rows.append(row)
        log.info("ablation %s=%s: minJFDE %.4f", axis, value, report.minJFDE)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / f"ablation_{axis}.csv", _csv_text(ABLATION_COLUMNS, rows))
    return rows


# ---------------------------------------------------------------------------
# gradient check


def gradient_check(model: ProgD, prep: PreparedScene, cfg: TrainConfig, eps: float = 3e-5,
                   seed: int = 0, floor: float = 1e-6) -> dict[str, float]:
    """Relative error between analytic and central-difference directional
    derivatives of ``total_loss``: one random direction per parameter tensor,
    plus one across all parameters under the key ``"<all>"``.

    ``floor`` bounds the denominator: derivatives below it sit under the
    float64 noise of a difference quotient and are compared absolutely.
    ``eps`` trades that noise against ReLU and max kinks inside the stencil.
    """
    model.zero_grad()
    ad.backward(total_loss(scene_loss(model, prep, cfg)))
    named = list(model.named_parameters())
    rng = np.random.default_rng(seed)
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in named}
    bases = {name: p.data.copy() for name, p in named}

    def directional(direction: dict) -> float:
        vals = []
        with ad.no_grad():
            for step in (1.0, -1.0):
                for name, p in named:
                    if name in direction:
                        p.data[...] = bases[name] + step * eps * direction[name]
                vals.append(total_loss(scene_loss(model, prep, cfg)).item())
        for name, p in named:
            p.data[...] = bases[name]
        return (vals[0] - vals[1]) / (2 * eps)

    def error(direction: dict) -> float:
        analytic = sum(float((grads[k] * u).sum()) for k, u in direction.items())
        numeric = directional(direction)
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)

    errors = {}
    for name, p in named:
        u = rng.standard_normal(p.shape)
        errors[name] = error({name: u / np.linalg.norm(u)})
    joint = {name: rng.standard_normal(p.shape) for name, p in named}
    norm = math.sqrt(sum(float((u ** 2).sum()) for u in joint.values()))
    errors["<all>"] = error({k: u / norm for k, u in joint.items()})
    return errors

"""End-to-end runs, ablation sweeps and report files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..lmoe import FEATURE_ROUTED, LANGUAGE_GUIDED
from ..scenegen import corpus, language_for
from .config import ExperimentConfig
from .evaluate import EvalResult, evaluate
from .model import Model
from .train import LOSS_COLUMNS, train

log = logging.getLogger(__name__)


@dataclass
class Report:
    config: ExperimentConfig
    loss_trace: list[dict] = field(default_factory=list)
    metrics: EvalResult | None = None
    class_names: list[str] = field(default_factory=list)
    groups: list[str] = field(default_factory=list)
    train_class_counts: list[int] = field(default_factory=list)
    parameter_count: int = 0
    prompts: list[str] = field(default_factory=list)
    embedding_provenance: dict = field(default_factory=dict)
    ablation: list[dict] | None = None

    def metrics_dict(self) -> dict:
        m = self.metrics.to_dict() if self.metrics is not None else {}
        if self.loss_trace:
            m["final_loss"] = {k: self.loss_trace[-1][k] for k in LOSS_COLUMNS}
        return {
            "config": self.config.to_dict(),
            "seeds": {"model": self.config.train.model_seed, "data": self.config.train.data_seed, "scene_world": self.config.scene.seed},
            "class_names": self.class_names,
            "frequency_groups": self.groups,
            "train_class_counts": self.train_class_counts,
            "parameter_count": self.parameter_count,
            "prompts": self.prompts,
            "language_embeddings": self.embedding_provenance,
            "metrics": m,
            "ablation": self.ablation,
        }


def run_experiment(cfg: ExperimentConfig, *, keep_embeddings: bool = True) -> Report:
    """Generate corpora, train one model, evaluate it on held-out scenes."""
    lang = language_for(cfg.scene)
    t = cfg.train
    train_corpus = corpus(cfg.scene, t.train_scenes, base_seed=t.data_seed * 100_003)
    eval_corpus = corpus(cfg.scene, t.eval_scenes, base_seed=t.data_seed * 100_003 + t.eval_seed_offset)
    groups = [g.value for g in train_corpus.stats.groups]

    model = Model(cfg, len(cfg.scene.vocabulary))
    logbook = train(model, train_corpus.scenes, lang.matrix, cfg)
    result = evaluate(
        model, eval_corpus.scenes, lang.matrix, groups,
        world_extent=cfg.scene.world_extent, lambda_cls=cfg.losses.lambda_cls,
        lambda_center=cfg.losses.lambda_center, keep_embeddings=keep_embeddings,
    )
    return Report(
        config=cfg,
        loss_trace=logbook.rows,
        metrics=result,
        class_names=cfg.scene.vocabulary.names,
        groups=groups,
        train_class_counts=train_corpus.stats.class_counts.tolist(),
        parameter_count=model.parameter_count(),
        prompts=list(lang.prompts),
        embedding_provenance=lang.provenance.describe(),
    )


# --------------------------------------------------------------------------
# ablations

TOGGLES = ("moe", "guided_router", "distill", "align")

# rows of the module ablation, baseline first
MODULE_ROWS = (
    (),
    ("distill",),
    ("moe",),
    ("moe", "guided_router"),
    ("moe", "guided_router", "distill"),
    ("moe", "guided_router", "distill", "align"),
)


def parse_toggle_rows(spec: str) -> list[tuple[str, ...]]:
    """``"moe,moe+guided_router"`` -> [("moe",), ("moe", "guided_router")].

    ``modules`` expands to the six-row module ablation. Tokens of the form
    ``experts=8`` or ``topk=1`` override the expert count and top-k.
    """
    spec = spec.strip()
    if not spec:
        return []
    if spec == "modules":
        return [r for r in MODULE_ROWS if r]
    rows = []
    for chunk in spec.split(","):
        toks = tuple(t.strip() for t in chunk.split("+") if t.strip())
        for tok in toks:
            if tok not in TOGGLES and not tok.startswith(("experts=", "topk=")):
                raise ValueError(f"unknown toggle {tok!r}; known: {', '.join(TOGGLES)}, experts=N, topk=N")
        rows.append(toks)
    return rows


def apply_toggles(base: ExperimentConfig, toggles) -> ExperimentConfig:
    """Configuration of one ablation row: modules not named are switched off."""
    on = set(toggles)
    model = {"moe": "moe" in on, "router_mode": LANGUAGE_GUIDED if "guided_router" in on else FEATURE_ROUTED}
    for tok in on:
        if tok.startswith("experts="):
            model["n_experts"] = int(tok.split("=", 1)[1])
        elif tok.startswith("topk="):
            model["top_k"] = int(tok.split("=", 1)[1])
    default = type(base.losses)()
    losses = {
        "w_kd": (base.losses.w_kd or default.w_kd) if "distill" in on else 0.0,
        "w_contrast": (base.losses.w_contrast or default.w_contrast) if "align" in on else 0.0,
    }
    return base.replace(model=model, losses=losses)


def _row_metrics(r: EvalResult) -> dict:
    g = r.group_accuracy
    return {
        "overall": r.overall_accuracy,
        "many": g.get("Many"),
        "medium": g.get("Medium"),
        "few": g.get("Few"),
        "center_l1": r.center_l1,
        "mean_purity": r.mean_purity,
    }


ABLATION_COLUMNS = ("row", "toggles", "overall", "many", "medium", "few", "center_l1", "mean_purity",
                    "delta_overall", "delta_many", "delta_medium", "delta_few")


def ablation_run(base: ExperimentConfig, rows, runner=run_experiment) -> list[dict]:
    """Run the baseline (no toggles) plus every toggle row with identical seeds."""
    rows = [tuple(r) for r in rows]
    all_rows = [()] + [r for r in rows if r != ()]
    table = []
    baseline = None
    for i, toggles in enumerate(all_rows):
        cfg = apply_toggles(base, toggles)
        log.info("ablation row %d: %s", i, "+".join(toggles) or "baseline")
        m = _row_metrics(runner(cfg, keep_embeddings=False).metrics)
        if baseline is None:
            baseline = m
        row = {"row": i, "toggles": "+".join(toggles) or "baseline", **m}
        for key in ("overall", "many", "medium", "few"):
            a, b = m[key], baseline[key]
            row[f"delta_{key}"] = None if a is None or b is None else a - b
        table.append(row)
    return table


# --------------------------------------------------------------------------
# report files


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def emit_reports(report: Report, out_dir) -> list[Path]:
    """Write metrics.json and the CSV reports; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []

    def _write_csv(name, header, rows):
        path = out / name
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    path = out / "metrics.json"
    path.write_text(json.dumps(report.metrics_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    written.append(path)

    _write_csv(
        "loss_trace.csv",
        ("step",) + LOSS_COLUMNS,
        [[r["step"]] + [_num(r[c]) for c in LOSS_COLUMNS] for r in report.loss_trace],
    )

    n_experts = report.config.model.n_experts
    routing = report.metrics.routing if report.metrics is not None else []
    for i, counts in enumerate(routing):
        if counts is None:
            continue
        _write_csv(
            f"routing_layer{i}.csv",
            ("class",) + tuple(f"expert_{j}" for j in range(n_experts)),
            [[name] + [int(v) for v in row] for name, row in zip(report.class_names, counts)],
        )

    d = report.config.scene.lang_dim
    emb = report.metrics.embeddings if report.metrics is not None else []
    _write_csv(
        "embeddings_final.csv",
        ("class_id",) + tuple(f"q{j}" for j in range(d)),
        [[c] + [_num(v) for v in vec] for c, vec in emb],
    )

    if report.ablation is not None:
        written.append(write_ablation(report.ablation, out))
    return written


def write_ablation(table: list[dict], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        w.writerows([[r[c] if c == "toggles" else _num(r[c]) for c in ABLATION_COLUMNS] for r in table])
    return path

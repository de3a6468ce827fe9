"""Command-line interface.

Usage::

    reactkd [--seed N] [--config FILE.toml] [--out-dir DIR] [--quiet] COMMAND [options]

Commands: preprocess, graph, gw, loss, demo, degrade, metrics, report, and
replay (re-run a command from its manifest).

Configuration precedence (lowest to highest): built-in defaults, the TOML
file given by ``--config``, command-line flags.  TOML sections mirror the
config dataclasses: ``[preprocess]``, ``[gw]``, ``[rgd]``, ``[weights]``,
``[focal]``, ``[train]``, ``[dropout]``, ``[degrade]``, ``[demo]``,
``[report]``; a top-level ``seed`` key is also accepted.

Every command writes ``<command>.manifest.json`` next to its outputs.

Exit codes: 0 success, 1 unexpected internal error, 2 usage error,
3 missing input, 4 malformed file, 5 degenerate input, 6 shape mismatch,
7 unusable configuration, 8 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, distill, losses, metrics, otgw, svgplot, volio
from .errors import ConfigError, FormatError, MissingInputError, ReactKDError, ShapeMismatchError
from .regiongraph import RegionGraph, graph_from_volume, load_graph, save_graph

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MANIFEST_SUFFIX = ".manifest.json"
DEFAULT_THRESHOLDS = 99  # DCA thresholds 0.01, 0.02, ..., 0.99


# ----------------------------------------------------------------- manifest


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    cwd: str
    config: dict
    seeds: dict
    inputs: dict  # name -> {"path", "sha256"}
    outputs: dict  # name -> {"path", "sha256"}
    version: str = __version__
    wall_clock_seconds: float = 0.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "RunManifest":
        try:
            return cls(**payload)
        except TypeError as exc:
            raise FormatError(f"malformed run manifest: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.is_file():
            raise MissingInputError(f"missing manifest: {path}")
        try:
            return cls.from_json(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _file_record(path) -> dict:
    """Path plus content hash; an RVOL stem hashes its header and payload together."""
    path = Path(path)
    if path.is_file():
        return {"path": str(path), "sha256": sha256_file(path)}
    parts = [path.with_suffix(".json"), path.with_suffix(".raw")]
    if all(p.is_file() for p in parts):
        digest = hashlib.sha256(b"".join(p.read_bytes() for p in parts)).hexdigest()
        return {"path": str(path), "sha256": digest}
    return {"path": str(path), "sha256": None}


# ------------------------------------------------------------------- config


def _to_field(value):
    return tuple(_to_field(v) for v in value) if isinstance(value, list) else value


def make_config(cls, section: dict, overrides: dict = None):
    """Instantiate a config dataclass from a TOML section plus non-None flag overrides."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _to_field(v) for k, v in section.items()}
    kwargs.update({k: _to_field(v) for k, v in (overrides or {}).items() if v is not None})
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing config file: {path}")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _section(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return value


def _snapshot(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _snapshot(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_snapshot(v) for v in obj]
    return obj


# -------------------------------------------------------------------- files


def _read_logits(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing logits file: {path}")
    try:
        z = np.asarray(json.loads(path.read_text()), dtype=np.float64)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: logits must be a JSON list of numbers ({exc})") from exc
    if z.ndim != 1 or not np.all(np.isfinite(z)):
        raise FormatError(f"{path}: logits must be a flat list of finite numbers")
    return z


def write_scores(path, s: metrics.ScoreSet) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"p{k}" for k in range(s.scores.shape[1])])
    for label, row in zip(s.labels, s.scores):
        w.writerow([int(label)] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def read_scores(path) -> metrics.ScoreSet:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing score file: {path}")
    try:
        rows = list(csv.reader(io.StringIO(path.read_text())))
        header, body = rows[0], [r for r in rows[1:] if r]
        if header[0] != "label" or len(header) < 2:
            raise ValueError("header must be label,p0,p1,...")
        labels = [int(r[0]) for r in body]
        scores = [[float(v) for v in r[1:]] for r in body]
        if any(len(r) != len(header) - 1 for r in scores):
            raise ValueError("ragged rows")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed score file ({exc})") from exc
    if not body:
        raise FormatError(f"{path}: no score rows")
    return metrics.ScoreSet(np.array(scores), np.array(labels))


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue())


def metrics_rows(summary: dict):
    rows = [
        [c["class"], c["precision"], c["recall"], c["f1"], "" if c["auc"] is None else c["auc"]]
        for c in summary["per_class"]
    ]
    rows.append(["macro", summary["macro_precision"], summary["macro_recall"], summary["macro_f1"], summary["macro_auc"]])
    return rows


METRICS_HEADER = ["class", "precision", "recall", "f1", "auc"]


# ------------------------------------------------------------------ reports


def thresholds_from(cfg: dict) -> np.ndarray:
    n = int(_section(cfg, "report").get("n_thresholds", DEFAULT_THRESHOLDS))
    if n < 1:
        raise ConfigError("report.n_thresholds must be >= 1")
    return np.arange(1, n + 1) / (n + 1)


def roc_chart(s: metrics.ScoreSet):
    """ROC chart plus CSV rows (class, fpr, tpr, threshold)."""
    per_auc, macro_auc = metrics.auc_ovr(s)
    chart = svgplot.Chart("ROC (one-vs-rest)", "false positive rate", "true positive rate")
    chart.add("chance", [0, 1], [0, 1], dashed=True)
    rows = []
    for k in range(s.scores.shape[1]):
        positive = s.labels == k
        if np.isnan(per_auc[k]):
            chart.note(f"class {k}: AUC undefined")
            continue
        fpr, tpr, thr = metrics.roc_curve(s.scores[:, k], positive)
        chart.add(f"class {k}", fpr, tpr)
        chart.note(f"class {k}: AUC {per_auc[k]:.3f}", per_auc[k])
        rows += [[k, f, t, th] for f, t, th in zip(fpr, tpr, thr)]
    chart.note(f"macro AUC {macro_auc:.3f}", macro_auc)
    return chart, rows


def dca_chart(s: metrics.ScoreSet, thresholds):
    curve = metrics.macro_dca(s, thresholds)
    lo = float(min(curve.model.min(), curve.treat_all.min(), 0.0))
    hi = float(max(curve.model.max(), curve.treat_all.max(), 0.0))
    chart = svgplot.Chart(
        "Decision curve (macro one-vs-rest)", "threshold probability", "net benefit",
        xlim=(0.0, 1.0), ylim=(max(lo, -0.5) - 0.05, hi + 0.05),
    )
    chart.add("model", curve.thresholds, curve.model)
    chart.add("treat all", curve.thresholds, curve.treat_all, dashed=True)
    chart.add("treat none", curve.thresholds, curve.treat_none, dashed=True)
    chart.note(f"mean prevalence {curve.prevalence:.3f}", curve.prevalence)
    rows = list(zip(curve.thresholds, curve.model, curve.treat_all, curve.treat_none))
    return chart, rows


def history_chart(histories: dict):
    top = max((float(np.max(h.column("total"))) for h in histories.values() if h.rows), default=1.0)
    n = max((len(h.rows) for h in histories.values()), default=1)
    chart = svgplot.Chart("Training loss", "epoch", "loss", xlim=(0.0, max(n - 1, 1)), ylim=(0.0, top * 1.05 or 1.0))
    for name, h in histories.items():
        if h.rows:
            chart.add(f"{name} total", h.column("epoch"), h.column("total"))
    return chart


def read_history(path) -> distill.History:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing history file: {path}")
    try:
        reader = csv.DictReader(io.StringIO(path.read_text()))
        if tuple(reader.fieldnames or ()) != distill.HISTORY_COLUMNS:
            raise ValueError(f"expected columns {distill.HISTORY_COLUMNS}")
        rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in reader]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return distill.History(rows)


def emit_report(out: Path, s: metrics.ScoreSet, thresholds, histories: dict = None) -> dict:
    outputs = {}
    chart, rows = roc_chart(s)
    (out / "roc.svg").write_text(svgplot.render(chart))
    _write_csv(out / "roc.csv", ["class", "fpr", "tpr", "threshold"], rows)
    chart, rows = dca_chart(s, thresholds)
    (out / "dca.svg").write_text(svgplot.render(chart))
    _write_csv(out / "dca.csv", ["threshold", "model", "treat_all", "treat_none"], rows)
    outputs.update({k: out / f"{k.replace('_', '.')}" for k in ("roc_svg", "roc_csv", "dca_svg", "dca_csv")})
    if histories:
        (out / "history.svg").write_text(svgplot.render(history_chart(histories)))
        outputs["history_svg"] = out / "history.svg"
    return outputs


# ----------------------------------------------------------------- commands


def _gw_config(cfg, args):
    return make_config(otgw.GwConfig, _section(cfg, "gw"), {"seed": args.seed})


def cmd_preprocess(args, cfg, out):
    prep = make_config(volio.PreprocessConfig, _section(cfg, "preprocess"), {"target_dims": args.target_dims})
    ct = volio.preprocess_ct(volio.read_volume(args.ct), prep)
    pet = volio.preprocess_pet(volio.read_volume(args.pet), prep)
    mask = volio.read_mask(args.mask) if args.mask else None
    if args.resample:
        ct, pet = volio.resample(ct, prep.target_dims), volio.resample(pet, prep.target_dims)
        if mask is not None:
            mask = volio.resample_mask(mask, prep.target_dims)
    outputs = {"ct": volio.write_volume(out / "ct_pre", ct), "pet": volio.write_volume(out / "pet_pre", pet)}
    if mask is not None:
        outputs["mask"] = volio.write_mask(out / "mask_pre", volio.refine_mask(mask))
    inputs = {"ct": args.ct, "pet": args.pet, **({"mask": args.mask} if args.mask else {})}
    return {"preprocess": prep}, inputs, outputs


def graph_features(args) -> np.ndarray:
    """(C, D, H, W) feature volume: explicit feature channels, else raw CT (and PET) intensities."""
    paths = args.features or [p for p in (args.ct, args.pet) if p]
    if not paths:
        raise ConfigError("graph: give --features or at least --ct")
    vols = [volio.read_volume(p) for p in paths]
    if len({v.dims for v in vols}) != 1:
        raise ShapeMismatchError("graph: feature channels have different dims")
    return np.stack([v.data.astype(np.float64) for v in vols])


def cmd_graph(args, cfg, out):
    mask = volio.read_mask(args.mask)
    graph = graph_from_volume(graph_features(args), mask)
    save_graph(out / "graph.json", graph)
    inputs = {"mask": args.mask}
    for name in ("ct", "pet"):
        if getattr(args, name):
            inputs[name] = getattr(args, name)
    for i, p in enumerate(args.features or []):
        inputs[f"feature{i}"] = p
    return {}, inputs, {"graph": out / "graph.json"}


def solve_gw(source: RegionGraph, target: RegionGraph, gw_cfg: otgw.GwConfig) -> dict:
    cost, plan = otgw.gw_discrepancy(source.edges, target.edges, cfg=gw_cfg)
    return {
        "cost": float(cost),
        "plan": plan.matrix.tolist(),
        "converged": bool(plan.converged),
        "iterations": int(plan.iterations),
        "marginal_residual": plan.marginal_residual(),
    }


def cmd_gw(args, cfg, out):
    gw_cfg = _gw_config(cfg, args)
    result = solve_gw(load_graph(args.source), load_graph(args.target), gw_cfg)
    _write_json(out / "gw.json", result)
    return {"gw": gw_cfg}, {"source": args.source, "target": args.target}, {"gw": out / "gw.json"}


def compute_loss(gs: RegionGraph, gt: RegionGraph, zs, zt, label, tau, weights, rgd_w, focal_cfg, gw_cfg):
    """The report ``loss`` writes; focal is included only when a label is given."""
    kd = losses.kd_loss(zt, zs, tau)
    rgd = losses.rgd_loss(gs.features, gt.features, rgd_w, gw_cfg)
    if label is None:
        focal = losses.LossReport(0.0, {"focal": None})
    else:
        focal = losses.focal_loss(zs, label, focal_cfg)
    total = losses.total_loss(focal, kd, rgd, weights)
    components = {"focal": focal.components["focal"], "kd": kd.value, "rgd": rgd.value}
    components.update({f"rgd_{k}": v for k, v in rgd.components.items()})
    return losses.LossReport(total.value, components, total.gradients, total.converged)


def cmd_loss(args, cfg, out):
    weights = make_config(
        losses.TotalWeights, _section(cfg, "weights"),
        {"lambda_focal": args.lambda_focal, "lambda_logits": args.lambda_kd, "lambda_rgd": args.lambda_rgd},
    )
    rgd_w = make_config(losses.RgdWeights, _section(cfg, "rgd"), {"lambda_gw": args.lambda_gw})
    focal_cfg = make_config(losses.FocalConfig, _section(cfg, "focal"))
    gw_cfg = _gw_config(cfg, args)
    tau = args.tau if args.tau is not None else float(_section(cfg, "train").get("tau", 4.0))
    report = compute_loss(
        load_graph(args.student_graph), load_graph(args.teacher_graph),
        _read_logits(args.student_logits), _read_logits(args.teacher_logits),
        args.label, tau, weights, rgd_w, focal_cfg, gw_cfg,
    )
    _write_json(out / "loss.json", report.to_json())
    config = {"weights": weights, "rgd": rgd_w, "focal": focal_cfg, "gw": gw_cfg, "tau": tau, "label": args.label}
    inputs = {k: getattr(args, k) for k in ("student_graph", "teacher_graph", "student_logits", "teacher_logits")}
    return config, inputs, {"loss": out / "loss.json"}


def cmd_degrade(args, cfg, out):
    section = dict(_section(cfg, "degrade"))
    if args.counts is not None and args.level is None:
        section["level"] = "counts"
    dcfg = make_config(distill.DegradeConfig, section, {"level": args.level, "counts": args.counts, "seed": args.seed})
    ct = volio.read_volume(args.ct)
    rng = np.random.default_rng(dcfg.seed)
    level, counts = distill.resolve_level(dcfg, rng)
    degraded = ct if counts is None else distill.poisson_ct(ct, counts, rng)
    outputs = {"ct": volio.write_volume(out / "ct_degraded", degraded)}
    _write_json(out / "degrade.json", {"level": level, "counts": counts})
    outputs["record"] = out / "degrade.json"
    return {"degrade": dcfg}, {"ct": args.ct}, outputs


def cmd_metrics(args, cfg, out):
    s = read_scores(args.scores)
    summary = metrics.summarize(s)
    _write_json(out / "metrics.json", summary)
    _write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows(summary))
    return {}, {"scores": args.scores}, {"json": out / "metrics.json", "csv": out / "metrics.csv"}


def cmd_report(args, cfg, out):
    s = read_scores(args.scores)
    histories = {Path(p).stem: read_history(p) for p in args.history or []}
    outputs = emit_report(out, s, thresholds_from(cfg), histories)
    inputs = {"scores": args.scores, **{f"history{i}": p for i, p in enumerate(args.history or [])}}
    return {"report": _section(cfg, "report")}, inputs, outputs


def _model_json(model) -> dict:
    if isinstance(model, distill.TeacherModel):
        arrays = {"weight": model.head.weight, "bias": model.head.bias,
                  "stats_mean": model.scaler.mean, "stats_std": model.scaler.std}
    else:
        arrays = {**model.params(), "node_mean": model.node_scaler.mean, "node_std": model.node_scaler.std,
                  "stats_mean": model.stats_scaler.mean, "stats_std": model.stats_scaler.std}
    return {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()} for k, v in arrays.items()}


def load_teacher(path) -> distill.TeacherModel:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing teacher parameter file: {path}")
    try:
        payload = json.loads(path.read_text())
        a = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in payload.items()}
        head = distill.nets.StudentHead(a["weight"], a["bias"])
        return distill.TeacherModel(head, distill.Standardizer(a["stats_mean"], a["stats_std"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed teacher parameters ({exc})") from exc


def cmd_demo(args, cfg, out):
    train_overrides = {
        "teacher_epochs": args.teacher_epochs, "student_epochs": args.student_epochs,
        "tau": args.tau, "seed": args.seed,
    }
    weights = make_config(
        losses.TotalWeights, _section(cfg, "weights"),
        {"lambda_focal": args.lambda_focal, "lambda_logits": args.lambda_kd, "lambda_rgd": args.lambda_rgd},
    )
    rgd_w = make_config(losses.RgdWeights, _section(cfg, "rgd"), {"lambda_gw": args.lambda_gw})
    train_section = dict(_section(cfg, "train"))
    train_section.update(
        weights=weights, rgd=rgd_w,
        focal=make_config(losses.FocalConfig, _section(cfg, "focal")),
        gw=_gw_config(cfg, args),
    )
    tcfg = make_config(distill.TrainConfig, {}, {**train_section, **train_overrides})
    drop = make_config(distill.DropoutConfig, _section(cfg, "dropout"), {"p_drop": args.p_drop, "seed": args.seed})
    demo = dict(n_cases=200, dims=distill.DEFAULT_DIMS, test_fraction=0.3, reuse_teacher_head=True)
    unknown = set(_section(cfg, "demo")) - set(demo)
    if unknown:
        raise ConfigError(f"unknown demo keys: {sorted(unknown)}")
    demo.update({k: _to_field(v) for k, v in _section(cfg, "demo").items()})
    for key in ("n_cases", "dims"):
        if getattr(args, key) is not None:
            demo[key] = _to_field(getattr(args, key))
    if args.fresh_student_head:
        demo["reuse_teacher_head"] = False
    teacher = load_teacher(args.teacher_params) if args.teacher_params else None

    result = distill.run_demo(cfg=tcfg, drop=drop, teacher=teacher, **demo)

    outputs = {}
    for name, hist in (("teacher_history", result.teacher_history), ("student_history", result.student_history)):
        (out / f"{name}.csv").write_text(hist.to_csv())
        outputs[name] = out / f"{name}.csv"
    write_scores(out / "scores.csv", result.test_scores)
    summary = {
        "student": result.metrics,
        "baseline": result.baseline_metrics,
        "warnings": result.teacher_history.warnings + result.student_history.warnings,
    }
    _write_json(out / "metrics.json", summary)
    _write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows(result.metrics))
    _write_json(out / "teacher_params.json", _model_json(result.teacher))
    _write_json(out / "student_params.json", _model_json(result.student))
    for name in ("scores.csv", "metrics.json", "metrics.csv", "teacher_params.json", "student_params.json"):
        outputs[name.replace(".", "_")] = out / name
    histories = {"teacher": result.teacher_history, "student": result.student_history}
    outputs.update(emit_report(out, result.test_scores, thresholds_from(cfg), histories))
    config = {"train": tcfg, "dropout": drop, "demo": demo, "report": _section(cfg, "report")}
    inputs = {"teacher_params": args.teacher_params} if args.teacher_params else {}
    return config, inputs, outputs


COMMANDS = {
    "preprocess": cmd_preprocess,
    "graph": cmd_graph,
    "gw": cmd_gw,
    "loss": cmd_loss,
    "demo": cmd_demo,
    "degrade": cmd_degrade,
    "metrics": cmd_metrics,
    "report": cmd_report,
}


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reactkd", description="Region-graph distillation toolkit.")
    p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step (default 0)")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--out-dir", help="directory for outputs and the run manifest (default: current directory; "
                   "for replay: the manifest's directory)")
    p.add_argument("--quiet", action="store_true", help="suppress the summary line")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="normalise CT and PET, optionally resample and refine a mask")
    s.add_argument("--ct", required=True)
    s.add_argument("--pet", required=True)
    s.add_argument("--mask")
    s.add_argument("--resample", action="store_true", help="resample to the target dims")
    s.add_argument("--target-dims", type=int, nargs=3, metavar=("D", "H", "W"))

    s = sub.add_parser("graph", help="build a region graph from a mask and feature channels")
    s.add_argument("--mask", required=True)
    s.add_argument("--ct")
    s.add_argument("--pet")
    s.add_argument("--features", nargs="+", help="one RVOL file per feature channel")

    s = sub.add_parser("gw", help="GW discrepancy between two region graphs")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)

    s = sub.add_parser("loss", help="evaluate the distillation loss suite")
    s.add_argument("--student-graph", required=True)
    s.add_argument("--teacher-graph", required=True)
    s.add_argument("--student-logits", required=True)
    s.add_argument("--teacher-logits", required=True)
    s.add_argument("--label", type=int, help="true class; enables the focal term")
    s.add_argument("--tau", type=float)
    _weight_flags(s)

    s = sub.add_parser("demo", help="synthetic two-stage distillation run")
    s.add_argument("--n-cases", type=int)
    s.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    s.add_argument("--teacher-epochs", type=int)
    s.add_argument("--student-epochs", type=int)
    s.add_argument("--p-drop", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--teacher-params", help="teacher_params.json from an earlier run; skips stage 1")
    s.add_argument("--fresh-student-head", action="store_true", help="do not start the student from the teacher head")
    _weight_flags(s)

    s = sub.add_parser("degrade", help="low-dose CT proxy")
    s.add_argument("--ct", required=True)
    s.add_argument("--level", choices=["native", "mild", "severe", "mixed", "counts"])
    s.add_argument("--counts", type=float)

    s = sub.add_parser("metrics", help="classification metrics from a score file")
    s.add_argument("--scores", required=True)

    s = sub.add_parser("report", help="ROC and DCA plots (SVG + CSV)")
    s.add_argument("--scores", required=True)
    s.add_argument("--history", nargs="+", help="training history CSV files")

    s = sub.add_parser("replay", help="re-run a command from its manifest")
    s.add_argument("manifest")
    return p


def _weight_flags(s):
    s.add_argument("--lambda-focal", type=float)
    s.add_argument("--lambda-kd", type=float)
    s.add_argument("--lambda-rgd", type=float)
    s.add_argument("--lambda-gw", type=float)


def _strip_out_dir(argv):
    kept, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out-dir":
            skip = True
        elif not a.startswith("--out-dir="):
            kept.append(a)
    return kept


def replay(manifest_path, out_dir) -> int:
    """Re-run the manifest's command line (from its working directory) into ``out_dir``."""
    m = RunManifest.load(manifest_path)
    out_dir = str(Path(out_dir if out_dir is not None else Path(manifest_path).parent).resolve())
    with _chdir(m.cwd):
        return main(["--out-dir", out_dir] + list(m.argv))


@contextlib.contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def _run(args, argv) -> None:
    cfg = load_config(args.config)
    if "seed" in cfg and "--seed" not in argv and not any(a.startswith("--seed=") for a in argv):
        args.seed = int(cfg["seed"])
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    config, inputs, outputs = COMMANDS[args.command](args, cfg, out)
    if args.config:
        inputs = {**inputs, "config": args.config}
    manifest = RunManifest(
        command=args.command,
        argv=_strip_out_dir(argv),
        cwd=os.getcwd(),
        config={k: _snapshot(v) for k, v in config.items()},
        seeds={"seed": args.seed},
        inputs={k: _file_record(v) for k, v in inputs.items()},
        outputs={k: _file_record(v) for k, v in sorted(outputs.items())},
        wall_clock_seconds=time.perf_counter() - start,
    )
    manifest.save(out / f"{args.command}{MANIFEST_SUFFIX}")
    if not args.quiet:
        print(f"{args.command}: wrote {len(outputs)} output(s) to {out}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out_dir)
        _run(args, argv)
    except ReactKDError as exc:
        print(f"reactkd {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``powerflow {train,compare,oracle,mvsim,gradcheck} CONFIG``.

The config is an INI file.  Sections::

    [experiment]  base, vocab_size, max_len, n_queries, marker_id, out_dir
    [target]      alpha, psi_value, marker_required, length_aware, psi_mode
    [train]       TrainConfig fields (eps_low/eps_high for the clip,
                  adam_beta1/adam_beta2 for the moments)
    [compare]     runs = label, label, ...
    [run LABEL]   per-run overrides of [train] / [target] keys
    [mvsim]       pi0, n_votes, beta, iterations, mode, samples, seed, tie_mode
    [gradcheck]   instances, seed, h, tolerance, kinds

``base`` is a named generator (see :func:`powerflow.bases.parse_base`) or
``file:PATH`` for a policy saved with ``to_text``.  POWERFLOW_OUT overrides
``out_dir``.

Exit codes: 0 ok, 2 config error, 3 numerical divergence, 4 failed self-check.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import oracle
from .bases import parse_base
from .mvsim import CompositionCapExceeded, NonUniqueMode, VoteConfig, drift_positive, run_dynamics
from .objectives import ClipSpec, LossKind
from .policy import AutoregressivePolicy
from .seqspace import UniverseTooLarge
from .target import TargetSpec
from .trainer import TrainConfig, TrainingDiverged, compare_dynamics, metric_table, metrics_jsonl, summary_csv, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("train", "compare", "oracle", "mvsim", "gradcheck")
OUT_ENV = "POWERFLOW_OUT"


class ConfigError(ValueError):
    pass


# -- config --------------------------------------------------------------

@dataclass(frozen=True)
class GradcheckConfig:
    instances: int = 50
    seed: int = 0
    h: float = 1e-5
    tolerance: float = 1e-6
    kinds: tuple = tuple(k.value for k in LossKind)


@dataclass
class ExperimentConfig:
    base: str | None = None
    vocab_size: int = 3
    max_len: int = 4
    n_queries: int = 4
    marker_id: int | None = None
    out_dir: str = "powerflow-out"
    target: TargetSpec = field(default_factory=lambda: TargetSpec(alpha=4.0))
    train: TrainConfig = field(default_factory=TrainConfig)
    runs: tuple = ()  # ((label, ((key, raw value), ...)), ...)
    pi0: tuple | None = None
    vote: VoteConfig | None = None
    gradcheck: GradcheckConfig | None = None
    root: Path = field(default=Path("."), compare=False)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    return lambda text: None if text.strip().lower() in ("", "none") else conv(text)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


TARGET_KEYS = {"alpha": float, "psi_value": float, "marker_required": _bool, "length_aware": _bool, "psi_mode": str.strip}
TRAIN_KEYS = {
    "losskind": str.strip, "steps": int, "batch_queries": int, "samples_per_query": int, "lr": float,
    "logz_lr": _opt(float), "optimizer": str.strip, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "temperature": _opt(float), "eps_low": float, "eps_high": float, "refresh_every": int, "seed": int,
    "beta": _opt(float), "init_noise": float, "tb_token_per_length": _bool, "metrics_every": int,
}
EXPERIMENT_KEYS = {"base": str.strip, "vocab_size": int, "max_len": int, "n_queries": int,
                   "marker_id": _opt(int), "out_dir": str.strip}
VOTE_KEYS = {"pi0": _floats, "n_votes": int, "beta": float, "iterations": int, "mode": str.strip,
             "samples": int, "seed": int, "tie_mode": str.strip}
GRADCHECK_KEYS = {"instances": int, "seed": int, "h": float, "tolerance": float, "kinds": _words}


def _read_section(parser, name, keys) -> dict:
    out = {}
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = keys[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return out


def _apply_train(cfg: TrainConfig, target: TargetSpec, values: dict) -> TrainConfig:
    values = dict(values)
    clip = cfg.clip
    if "eps_low" in values or "eps_high" in values:
        clip = ClipSpec(values.pop("eps_low", clip.eps_low), values.pop("eps_high", clip.eps_high))
    betas = (values.pop("adam_beta1", cfg.adam_betas[0]), values.pop("adam_beta2", cfg.adam_betas[1]))
    return replace(cfg, target=target, clip=clip, adam_betas=betas, **values)


def _build(parser: configparser.ConfigParser, root: Path) -> ExperimentConfig:
    known = {"experiment", "target", "train", "compare", "mvsim", "gradcheck"}
    for name in parser.sections():
        if name not in known and not name.startswith("run "):
            raise ConfigError(f"unknown section [{name}]")
    exp = _read_section(parser, "experiment", EXPERIMENT_KEYS) if parser.has_section("experiment") else {}
    tgt = _read_section(parser, "target", TARGET_KEYS) if parser.has_section("target") else {}
    trn = _read_section(parser, "train", TRAIN_KEYS) if parser.has_section("train") else {}
    target = TargetSpec(**{"alpha": 4.0, **tgt})
    train_cfg = _apply_train(TrainConfig(target=target), target, trn)

    runs = []
    if parser.has_section("compare"):
        labels = _words(parser.get("compare", "runs", fallback=""))
        if not labels:
            raise ConfigError("[compare] needs runs = label, ...")
        extra = set(parser.options("compare")) - {"runs"}
        if extra:
            raise ConfigError(f"[compare] unknown keys {sorted(extra)}")
        for label in labels:
            section = f"run {label}"
            raw = tuple(sorted(parser.items(section))) if parser.has_section(section) else ()
            runs.append((label, raw))
        declared = {s[4:] for s in parser.sections() if s.startswith("run ")}
        if declared - set(labels):
            raise ConfigError(f"run sections not listed in [compare]: {sorted(declared - set(labels))}")

    pi0 = vote = None
    if parser.has_section("mvsim"):
        v = _read_section(parser, "mvsim", VOTE_KEYS)
        if "pi0" not in v or "n_votes" not in v:
            raise ConfigError("[mvsim] needs pi0 and n_votes")
        pi0 = v.pop("pi0")
        vote = VoteConfig(**v)

    gradcheck = None
    if parser.has_section("gradcheck"):
        g = _read_section(parser, "gradcheck", GRADCHECK_KEYS)
        for kind in g.get("kinds", ()):
            LossKind(kind)
        gradcheck = GradcheckConfig(**g)

    cfg = ExperimentConfig(target=target, train=train_cfg, runs=tuple(runs), pi0=pi0, vote=vote,
                           gradcheck=gradcheck, root=root, **exp)
    for label, _ in cfg.runs:  # surface bad overrides before anything runs
        run_config(cfg, label)
    return cfg


def parse_config(text: str, root: Path | str = ".") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
        return _build(parser, Path(root))
    except ConfigError:
        raise
    except (configparser.Error, ValueError, TypeError) as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, LossKind):
        return value.value
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that :func:`parse_config` maps back to an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {k: _fmt(getattr(cfg, k)) for k in EXPERIMENT_KEYS if getattr(cfg, k) is not None}
    parser["target"] = {k: _fmt(getattr(cfg.target, k)) for k in TARGET_KEYS}
    t = cfg.train
    train_vals = {f.name: getattr(t, f.name) for f in fields(t) if f.name in TRAIN_KEYS}
    train_vals.update(eps_low=t.clip.eps_low, eps_high=t.clip.eps_high,
                      adam_beta1=t.adam_betas[0], adam_beta2=t.adam_betas[1])
    parser["train"] = {k: _fmt(train_vals[k]) for k in TRAIN_KEYS}
    if cfg.runs:
        parser["compare"] = {"runs": ", ".join(label for label, _ in cfg.runs)}
        for label, raw in cfg.runs:
            if raw:
                parser[f"run {label}"] = dict(raw)
    if cfg.vote is not None:
        parser["mvsim"] = {"pi0": _fmt(cfg.pi0), **{f.name: _fmt(getattr(cfg.vote, f.name)) for f in fields(cfg.vote)}}
    if cfg.gradcheck is not None:
        parser["gradcheck"] = {f.name: _fmt(getattr(cfg.gradcheck, f.name)) for f in fields(cfg.gradcheck)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def run_config(cfg: ExperimentConfig, label: str) -> TrainConfig:
    """TrainConfig for one ``[compare]`` run, with its overrides applied."""
    raw = dict(dict(cfg.runs)[label])
    tgt, trn = {}, {}
    for key, text in raw.items():
        if key in TARGET_KEYS:
            tgt[key] = TARGET_KEYS[key](text)
        elif key in TRAIN_KEYS:
            trn[key] = TRAIN_KEYS[key](text)
        else:
            raise ConfigError(f"[run {label}] unknown key {key!r}")
    if "losskind" not in trn:
        try:
            trn["losskind"] = LossKind(label).value
        except ValueError:
            raise ConfigError(f"[run {label}] needs losskind (label is not a loss kind)") from None
    target = replace(cfg.target, **tgt)
    return _apply_train(cfg.train, target, trn)


def load_base(cfg: ExperimentConfig) -> AutoregressivePolicy:
    if cfg.base is None:
        raise ConfigError("[experiment] base is required")
    try:
        if cfg.base.startswith("file:"):
            path = Path(cfg.base[5:].strip())
            if not path.is_absolute():
                path = cfg.root / path
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read base {path}: {exc.strerror}") from None
            return AutoregressivePolicy.from_text(text)
        return parse_base(cfg.base, cfg.vocab_size, cfg.max_len, cfg.n_queries, cfg.marker_id)
    except ConfigError:
        raise
    except (ValueError, UniverseTooLarge) as exc:
        raise ConfigError(f"base {cfg.base!r}: {exc}") from None


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or cfg.out_dir)


# -- charts --------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class ChartError(AssertionError):
    pass


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def chart_svg(series: dict, title: str = "", xlabel: str = "step", ylabel: str = "") -> str:
    """Self-contained SVG line chart, one polyline per series.

    Output depends only on the inputs, so equal series give equal bytes.
    Non-finite points break a line instead of being drawn.
    """
    if not series:
        raise ChartError("no series to plot")
    arrays = {name: np.asarray(v, dtype=float) for name, v in series.items()}
    n = {len(a) for a in arrays.values()}
    if len(n) != 1 or 0 in n:
        raise ChartError("series must be non-empty and of equal length")
    n = n.pop()
    finite = np.concatenate([a[np.isfinite(a)] for a in arrays.values()])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    width, height = 640, 400
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(i):
        return left + (pw * i / (n - 1) if n > 1 else pw / 2)

    def sy(v):
        return top + ph * (1 - (v - lo) / (hi - lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.2f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for v in _ticks(lo, hi):
        y = sy(v)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.4g}</text>')
    for i in _ticks(0, max(n - 1, 0)):
        x = sx(i)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{i:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.2f})">{_esc(ylabel)}</text>')
    for j, (name, a) in enumerate(arrays.items()):
        color = PALETTE[j % len(PALETTE)]
        run = []
        for i, v in enumerate(list(a) + [np.nan]):
            if np.isfinite(v):
                run.append(f"{sx(i):.2f},{sy(v):.2f}")
            elif run:
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(run)}"/>')
                run = []
        ly = top + 14 + 18 * j
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_chart(series: dict, path, **labels) -> Path:
    text = chart_svg(series, **labels)  # raises before any file is touched
    path = Path(path)
    path.write_text(text)
    return path


# -- subcommands ---------------------------------------------------------
# Each returns {filename: text}; nothing touches disk until a command succeeds.

def _final_row(label, cfg: TrainConfig, result, base) -> dict:
    last = result.metrics[-1]
    lengths = [oracle.dist_stats(oracle.policy_dist(result.policy, q))[0] for q in range(base.n_queries)]
    return {
        "label": label,
        "losskind": cfg.losskind.value,
        "alpha": cfg.target.alpha,
        "steps": cfg.steps,
        "final_loss": last.mean_loss,
        "final_tv": last.tv_to_target,
        "final_kl": last.kl_to_target,
        "final_sampled_length": last.mean_sampled_length,
        "policy_mean_length": float(np.mean(lengths)),
        "logz": " ".join(format(v, ".10g") for v in last.logz_values),
    }


def cmd_train(cfg: ExperimentConfig) -> dict:
    base = load_base(cfg)
    result = train(cfg.train, base)
    series = {"mean_sampled_length": [m.mean_sampled_length for m in result.metrics],
              "tv_to_target": [m.tv_to_target for m in result.metrics]}
    return {
        "metrics.jsonl": metrics_jsonl(result.metrics),
        "summary.csv": summary_csv([_final_row(cfg.train.losskind.value, cfg.train, result, base)]),
        "chart.svg": chart_svg(series, title=f"train {cfg.train.losskind.value}", ylabel="value"),
        "policy.txt": result.policy.to_text(),
    }


def cmd_compare(cfg: ExperimentConfig) -> dict:
    if not cfg.runs:
        raise ConfigError("compare needs a [compare] section")
    base = load_base(cfg)
    labels = [label for label, _ in cfg.runs]
    configs = [run_config(cfg, label) for label in labels]
    results = compare_dynamics(configs, base, labels=labels)
    lines = []
    for label, r in results.items():
        for m in r.metrics:
            lines.append(json.dumps({"label": label, **json.loads(m.to_json())}) + "\n")
    rows = [_final_row(label, c, results[label], base) for label, c in zip(labels, configs)]
    return {
        "metrics.jsonl": "".join(lines),
        "summary.csv": summary_csv(rows),
        "chart.svg": chart_svg(metric_table(results, "mean_sampled_length"), title="mean sampled length",
                               ylabel="tokens"),
    }


def cmd_oracle(cfg: ExperimentConfig) -> dict:
    base = load_base(cfg)
    spec = cfg.target
    files, rows = {}, []
    probs = {}
    for q in range(base.n_queries):
        dists = {
            "base": (oracle.policy_dist(base, q), 0.0),
            "target": (oracle.exact_target_dist(base, q, spec), oracle.log_partition(base, q, spec)),
        }
        la, zp = oracle.exact_la_target(base, q, spec)
        dists["la_target"] = (la, float(np.log(zp)))
        for name, (dist, log_norm) in dists.items():
            files[f"{name}_q{q}.csv"] = dist.to_csv()
            mean_len, entropy = oracle.dist_stats(dist)
            rows.append({"query": q, "distribution": name, "mean_length": mean_len, "entropy": entropy,
                         "log_normalizer": log_norm})
            if q == 0:
                probs[name] = dist.probs
    files["metrics.jsonl"] = "".join(json.dumps(r) + "\n" for r in rows)
    files["summary.csv"] = summary_csv(rows)
    files["chart.svg"] = chart_svg(probs, title="query 0 distributions", xlabel="trajectory index",
                                   ylabel="probability")
    return files


def cmd_mvsim(cfg: ExperimentConfig) -> dict:
    if cfg.vote is None:
        raise ConfigError("mvsim needs a [mvsim] section")
    try:
        run = run_dynamics(np.array(cfg.pi0), cfg.vote)
    except (NonUniqueMode, CompositionCapExceeded) as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"[mvsim] {exc}") from None
    lam = run.lambdas()
    monotone = bool(np.all(np.diff(lam, axis=0) >= 0)) if len(lam) > 1 else True
    drift = all(drift_positive(s.pi, s.rbar) for s in run.steps if s.pi[run.mode] < 1.0)
    m = len(run.steps[0].pi)
    files = {
        "series.csv": run.to_csv(),
        "metrics.jsonl": "".join(json.dumps({"iteration": s.k, "pi": s.pi.tolist(), "rbar": s.rbar.tolist(),
                                             "lambda": s.lam.tolist()}) + "\n" for s in run.steps),
        "summary.csv": summary_csv([{
            "mode": run.mode, "iterations": run.steps[-1].k, "final_mode_prob": run.steps[-1].pi[run.mode],
            "converged": run.converged, "lambda_monotone": monotone, "drift_positive": drift,
        }]),
        "chart.svg": chart_svg({f"pi({j})": [s.pi[j] for s in run.steps] for j in range(m)},
                               title="majority-vote dynamics", xlabel="iteration", ylabel="probability"),
    }
    if cfg.vote.mode == "exact" and not (monotone and drift):
        files["_failed"] = f"lambda monotone={monotone}, drift positive={drift}"
    return files


def cmd_gradcheck(cfg: ExperimentConfig) -> dict:
    g = cfg.gradcheck if cfg.gradcheck is not None else GradcheckConfig()
    errors = {kind: oracle.check_loss_gradient(kind, g.instances, g.seed, g.h) for kind in g.kinds}
    worst = {kind: max(e) for kind, e in errors.items()}
    report = "".join(f"{kind:<10} instances={len(errors[kind])} max_rel_err={worst[kind]:.3e} "
                     f"{'ok' if worst[kind] < g.tolerance else 'FAIL'}\n" for kind in g.kinds)
    files = {
        "report.txt": report,
        "metrics.jsonl": "".join(json.dumps({"kind": kind, "instance": i, "rel_err": e}) + "\n"
                                 for kind, es in errors.items() for i, e in enumerate(es)),
        "summary.csv": summary_csv([{"kind": k, "instances": len(errors[k]), "max_rel_err": worst[k],
                                     "passed": worst[k] < g.tolerance} for k in g.kinds]),
        "chart.svg": chart_svg({k: np.log10(np.maximum(errors[k], 1e-300)) for k in g.kinds},
                               title="gradient check", xlabel="instance", ylabel="log10 relative error"),
    }
    failed = [k for k in g.kinds if not worst[k] < g.tolerance]
    if failed:
        return {**files, "_failed": ", ".join(failed)}
    return files


HANDLERS = {"train": cmd_train, "compare": cmd_compare, "oracle": cmd_oracle, "mvsim": cmd_mvsim,
            "gradcheck": cmd_gradcheck}


def _write(out: Path, files: dict):
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    ap = argparse.ArgumentParser(prog="powerflow", description="distribution-matching experiments on enumerable universes")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    def fail(code, msg):
        print(f"powerflow {args.command}: {msg}".replace("\n", " "), file=stderr)
        return code

    try:
        cfg = load_config(args.config)
        files = HANDLERS[args.command](cfg)
        failed = files.pop("_failed", None)
        out = output_dir(cfg)
        try:
            _write(out, files)
        except OSError as exc:
            return fail(EXIT_CONFIG, f"cannot write to {out}: {exc.strerror}")
    except ConfigError as exc:
        return fail(EXIT_CONFIG, f"config error: {exc}")
    except TrainingDiverged as exc:
        return fail(EXIT_DIVERGED, f"diverged: {exc}")
    except AssertionError as exc:
        return fail(EXIT_CHECK, f"check failed: {exc}")
    except (ValueError, UniverseTooLarge) as exc:
        # inputs that parse but are inconsistent (e.g. a marker target without a marker token)
        return fail(EXIT_CONFIG, f"config error: {exc}")
    if failed:
        stdout.write(files.get("report.txt", ""))
        return fail(EXIT_CHECK, f"check failed: {failed}")
    if "report.txt" in files:
        stdout.write(files["report.txt"])
    print(f"wrote {', '.join(sorted(files))} to {out}", file=stdout)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line experiment runner.

Subcommands: ``run``, ``compare``, ``summarize``, ``grad-check`` and ``probe``.
Exit status is 0 on success, 1 for configuration errors and 2 for runtime
errors.

Configuration files are flat ``section.key = value`` lines (``#`` starts a
comment).  Sections are ``data``, ``protocol`` and ``loss``; ``seed`` and
``output`` are top-level keys.  ``--set section.key=value`` and the dedicated
flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from fclsim.contrastive import LossConfig
from fclsim.data import DataConfig, generate_cohort
from fclsim.encoder import ParamVector
from fclsim.protocol.ledger import COMPONENTS, CommLedger
from fclsim.protocol.probe import linear_probe
from fclsim.protocol.rounds import ROUND_COLUMNS, ProtocolConfig, Variant, init_models, round_rows, run_federation

SUMMARY_COLUMNS = ("variant", "total_bytes", "ratio_vs_baseline") + COMPONENTS
PROBE_COLUMNS = ("probe_acc", "probe_random")


class ConfigError(ValueError):
    """Bad configuration key or value; maps to exit status 1."""


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    output: str = "runs"
    seed: int = 0

    def validate(self) -> None:
        for part in (self.data, self.protocol, self.loss):
            try:
                part.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


_SECTIONS = {"data": DataConfig, "protocol": ProtocolConfig, "loss": LossConfig}
_TOP = {"output": "str", "seed": "int"}


def _coerce(key: str, kind: str, text: str):
    text = text.strip()
    optional = "None" in kind
    if optional and text.lower() in ("", "none"):
        return None
    base = kind.replace("| None", "").strip()
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {base}") from None


def _render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: ExperimentConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"output = {cfg.output}"]
    for name in _SECTIONS:
        part = getattr(cfg, name)
        lines += [f"{name}.{f.name} = {_render_value(getattr(part, f.name))}" for f in fields(part)]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, pairs: list[tuple[str, str]]) -> ExperimentConfig:
    """Apply ``(dotted_key, text_value)`` pairs in order; unknown keys are rejected."""
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    for key, text in pairs:
        if key in _TOP:
            top[key] = _coerce(key, _TOP[key], text)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"{key}: unknown key")
        kinds = {f.name: str(f.type) for f in fields(_SECTIONS[section])}
        if name not in kinds:
            raise ConfigError(f"{key}: unknown key")
        updates[section][name] = _coerce(key, kinds[name], text)
    parts = {name: replace(getattr(cfg, name), **updates[name]) for name in _SECTIONS}
    return replace(cfg, **parts, **top)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    return apply_overrides(base or ExperimentConfig(), pairs)


def parse_config(path=None, overrides: list[str] = ()) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides; validated."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_text(text, cfg)
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    cfg = apply_overrides(cfg, pairs)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- outputs


def write_rounds_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        w.writerows(round_rows(results))


def save_checkpoint(path, params: ParamVector) -> None:
    Path(path).write_bytes(params.to_bytes())


def load_checkpoint(path) -> ParamVector:
    return ParamVector.from_bytes(Path(path).read_bytes())


def model_size(ledger: CommLedger) -> int:
    """Bytes of one online-network message; every message in a ledger must agree."""
    sizes = {e.bytes for e in ledger.entries if e.component == "online_net"}
    if len(sizes) != 1:
        raise ValueError(f"ledger has inconsistent online_net message sizes {sorted(sizes)}")
    return sizes.pop()


def summary_rows(ledgers: dict[str, CommLedger], baseline: str | None = None) -> list[dict]:
    """Per-variant totals, per-component breakdown and ratio to ``baseline``.

    ``baseline`` defaults to ``fcl`` when present, else the first ledger.
    """
    if not ledgers:
        raise ValueError("no ledgers to summarize")
    sizes = {name: model_size(led) for name, led in ledgers.items()}
    if len(set(sizes.values())) > 1:
        raise ValueError(f"ledgers come from different model sizes: {sizes}")
    if baseline is None:
        baseline = Variant.FCL.value if Variant.FCL.value in ledgers else next(iter(ledgers))
    if baseline not in ledgers:
        raise ValueError(f"baseline {baseline!r} is not among {list(ledgers)}")
    base_total = ledgers[baseline].total()
    rows = []
    for name, led in ledgers.items():
        total = led.total()
        row = {"variant": name, "total_bytes": total, "ratio_vs_baseline": total / base_total if base_total else 0.0}
        row.update(led.by_component())
        rows.append(row)
    return rows


def format_table(rows: list[dict], columns) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def write_summary(out_dir: Path, rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in columns])
    (out_dir / "summary.csv").write_text(buf.getvalue())
    table = format_table(rows, columns)
    (out_dir / "summary.txt").write_text(table)
    return table


# ---------------------------------------------------------------- commands


def _probe_pair(cfg: ExperimentConfig, encoder: ParamVector, cohort) -> tuple[float, float]:
    random_enc = init_models(cfg.data, cfg.seed)[0].encoder
    return (
        linear_probe(encoder, cohort, seed=cfg.seed, S=cfg.data.S),
        linear_probe(random_enc, cohort, seed=cfg.seed, S=cfg.data.S),
    )


def run_variant(cfg: ExperimentConfig, out_dir: Path, probe: bool, log=print) -> dict:
    """Train one variant and write its CSVs, checkpoints and config under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(cfg.data)

    def progress(res):
        log(f"[{res.variant}] round {res.round:3d}  loss {res.loss_mean:.4f}  bytes {res.bytes}")

    fed = run_federation(cfg.protocol, cfg.data, cfg.seed, cfg.loss, cohort=cohort, callback=progress)
    (out_dir / "config.txt").write_text(render_config(cfg))
    write_rounds_csv(out_dir / "rounds.csv", fed.rounds)
    fed.ledger.to_csv(out_dir / "ledger.csv")
    save_checkpoint(out_dir / "online_encoder.ckpt", fed.online.encoder)
    if fed.online.predictor is not None:
        save_checkpoint(out_dir / "predictor.ckpt", fed.online.predictor)
    if fed.target is not None:
        save_checkpoint(out_dir / "target_encoder.ckpt", fed.target)
    row = {"variant": cfg.protocol.variant, "ledger": fed.ledger}
    if probe:
        row["probe_acc"], row["probe_random"] = _probe_pair(cfg, fed.online.encoder, cohort)
    return row


def _finish(rows: list[dict], out_dir: Path, probe: bool) -> str:
    ledgers = {r["variant"]: r["ledger"] for r in rows}
    table = summary_rows(ledgers)
    for t, r in zip(table, rows):
        for c in PROBE_COLUMNS:
            if c in r:
                t[c] = r[c]
    columns = SUMMARY_COLUMNS + (PROBE_COLUMNS if probe else ())
    return write_summary(out_dir, table, columns)


def cmd_run(args, cfg: ExperimentConfig) -> int:
    out_dir = Path(cfg.output) / cfg.protocol.variant
    row = run_variant(cfg, out_dir, probe=not args.no_probe)
    print(_finish([row], out_dir, not args.no_probe), end="")
    return 0


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        variants = [Variant(v).value for v in names]
    except ValueError as exc:
        raise ConfigError(f"--variants: {exc}") from None
    root = Path(cfg.output)
    rows = []
    for v in variants:
        vcfg = replace(cfg, protocol=replace(cfg.protocol, variant=v))
        rows.append(run_variant(vcfg, root / v, probe=not args.no_probe))
    print(_finish(rows, root, not args.no_probe), end="")
    return 0


def cmd_summarize(args) -> int:
    ledgers = {}
    for item in args.ledgers:
        label, sep, path = item.partition("=")
        if not sep:
            path = item
            label = Path(item).parent.name or Path(item).stem
        if label in ledgers:
            raise ConfigError(f"duplicate ledger label {label!r}; use label=path")
        ledgers[label] = CommLedger.from_csv(path)
    rows = summary_rows(ledgers, args.baseline)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        table = write_summary(out, rows, SUMMARY_COLUMNS)
    else:
        table = format_table(rows, SUMMARY_COLUMNS)
    print(table, end="")
    return 0


def cmd_grad_check(args) -> int:
    from fclsim.gradcheck import run_suite

    results = run_suite(n_instances=args.instances, seed=args.seed)
    ok = True
    for name, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name:<24s} max rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 2


def cmd_probe(args, cfg: ExperimentConfig) -> int:
    cohort = generate_cohort(cfg.data)
    if args.checkpoint:
        encoder = load_checkpoint(args.checkpoint)
    else:
        encoder = init_models(cfg.data, cfg.seed)[0].encoder
    acc = linear_probe(encoder, cohort, seed=cfg.seed, S=cfg.data.S, shuffle_labels=args.shuffle_labels)
    print(f"probe accuracy {acc:.4f}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file of 'section.key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--rounds", type=int)
    p.add_argument("--workers", type=int, help="threads for client training")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fclsim", description="Federated self-supervised pretraining simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train one protocol variant")
    _add_config_args(p)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--no-probe", action="store_true", help="skip the linear probe")

    p = sub.add_parser("compare", help="train several variants and tabulate bytes")
    _add_config_args(p)
    p.add_argument("--variants", default="fcl,fclopt,fclopt-ptnu,fclopt-ptnu-dp")
    p.add_argument("--no-probe", action="store_true")

    p = sub.add_parser("summarize", help="tabulate existing ledger CSVs")
    p.add_argument("ledgers", nargs="+", metavar="[LABEL=]LEDGER_CSV")
    p.add_argument("--baseline", help="label whose total is 1.000 (default fcl, else first)")
    p.add_argument("--out", help="also write summary.csv/summary.txt here")

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("probe", help="partition linear probe of an encoder checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="encoder checkpoint; random init when omitted")
    p.add_argument("--shuffle-labels", action="store_true")
    return parser


def _resolve(args) -> ExperimentConfig:
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("out", "output"), ("rounds", "protocol.rounds"), ("workers", "protocol.workers")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if getattr(args, "variant", None):
        overrides.append(f"protocol.variant={args.variant}")
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "summarize":
            return cmd_summarize(args)
        if args.command == "grad-check":
            return cmd_grad_check(args)
        cfg = _resolve(args)
        return {"run": cmd_run, "compare": cmd_compare, "probe": cmd_probe}[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable

from .config import REPRODUCE_PRESETS, TRAIN_MODES
from .core.config_manager import config_manager
from .core.errors import ScopfError
from .core.runner import Runner
from .utils.io import write_json
from .utils.logger import configure_logging, get_logger

logger = get_logger("scopf_proxy.cli")

# commands that draw no random numbers run without an explicit seed
SEEDLESS = {"parse", "ptdf", "screen", "solve"}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--case", help="MATPOWER case file or packaged case name")
    p.add_argument("--seed", type=int, help="global seed (required for sampling commands)")
    p.add_argument("--out", help="output directory; nothing is written outside it")
    p.add_argument("--workers", type=int, help="concurrent solves")
    p.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="overrides SCOPF_PROXY_LOG")
    p.add_argument("--fraction", type=float, help="share of screened contingencies kept")
    p.add_argument("--max-contingencies", type=int, help="cap on the contingency set")
    p.add_argument("--rho", type=float, help="load-shed penalty per p.u.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scopf_proxy", description="Self-supervised SC-DCOPF proxy via tunable DC-OPF.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("parse", "parse a MATPOWER case and write network.json"),
        ("ptdf", "write the PTDF matrix as ptdf.csv"),
        ("screen", "screen N-1 contingencies by base-flow utilization"),
    ):
        _common(sub.add_parser(name, help=help_text))

    p = sub.add_parser("solve", help="solve DC-OPF or SC-DCOPF directly")
    _common(p)
    p.add_argument("--kind", choices=["dcopf", "scdcopf"], default="dcopf")
    p.add_argument("--demand", help="CSV with bus_id,demand_pu or a dataset CSV (first row used)")

    p = sub.add_parser("dataset", help="sample demands and label them with SC-DCOPF")
    _common(p)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--unlabeled", action="store_true", help="skip SC-DCOPF labels")

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--mode", choices=list(TRAIN_MODES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--labels", help="labeled dataset CSV (semi and e2e)")
    p.add_argument("--gnn-preset", choices=["desk", "paper"])

    p = sub.add_parser("eval", help="evaluate trained checkpoints and the untuned model")
    _common(p)
    p.add_argument("--checkpoints", help="directory holding <mode>.json checkpoints")
    p.add_argument("--eval-samples", type=int)

    p = sub.add_parser("reproduce", help="full pipeline: screen, train, evaluate, data-efficiency sweep")
    _common(p)
    p.add_argument("--preset", choices=sorted(REPRODUCE_PRESETS), required=True)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Flag values as a nested config layer; unset flags stay None and are skipped by the merge."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "case_path": get("case"),
        "seed": get("seed"),
        "output_dir": get("out"),
        "workers": get("workers"),
        "contingency_fraction": get("fraction"),
        "max_contingencies": get("max_contingencies"),
        "rho": get("rho"),
        "train": {
            "mode": get("mode"),
            "epochs": get("epochs"),
            "lr": get("lr"),
            "n_samples": get("n_samples"),
            "labels_path": get("labels"),
            "gnn": {"preset": get("gnn_preset")},
        },
        "eval": {"checkpoint_dir": get("checkpoints"), "n_samples": get("eval_samples")},
    }


COMMANDS: dict[str, Callable[[Runner, argparse.Namespace], dict[str, Any]]] = {
    "parse": lambda r, a: r.parse(),
    "ptdf": lambda r, a: r.ptdf(),
    "screen": lambda r, a: r.screen(),
    "solve": lambda r, a: r.solve(a.kind, a.demand),
    "dataset": lambda r, a: r.dataset(labeled=not a.unlabeled),
    "train": lambda r, a: r.train(),
    "eval": lambda r, a: r.evaluate(),
    "reproduce": lambda r, a: r.reproduce(),
}


def _json_default(value: Any) -> Any:
    return value.item() if hasattr(value, "item") else str(value)


def _fail(exc: ScopfError, out_dir: Path) -> int:
    payload = {"ok": False, "error": exc.to_dict()}
    print(json.dumps(payload, default=_json_default), file=sys.stderr)
    try:
        write_json(out_dir / "error.json", payload)
    except OSError as e:
        logger.error(f"[CLI] cannot write error.json: {e}")
    return exc.exit_code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    out_dir = Path(args.out or "out")
    try:
        config = config_manager.load_run_config(
            args.config,
            _overrides(args),
            preset=getattr(args, "preset", None),
            defaults={"seed": 0} if args.command in SEEDLESS else None,
        )
        out_dir = Path(config.output_dir)
        runner = Runner(config)
        runner.write_manifest(args.command)
        result = COMMANDS[args.command](runner, args)
    except ScopfError as exc:
        logger.error(f"[CLI] {args.command} failed: {exc.code} {exc.message}")
        return _fail(exc, out_dir)
    print(json.dumps({"ok": True, "command": args.command, "result": result}, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())

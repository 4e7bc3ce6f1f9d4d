"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (JSON object whose keys are the
long option names with dashes or underscores); explicit flags override the
file.  All randomness derives from ``--seed``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import experiments as ex
from .bucking import (BuckingError, buck_deterministic, buck_stochastic, plan_rows,
                      read_price_matrix, standard_price_matrix, write_plans)
from .checkpoint import CheckpointError
from .models import ModelKind, TaperModel, grid_profile, known_grid_prefix
from .nn import TrainingError
from .stems import (Species, StemDataError, StemProfile, parse_stem_csv, replace,
                    synthesize_species, write_stem_csv)

log = logging.getLogger("stembuck")


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int
    out_dir: Path
    data: Path | None = None
    checkpoint_dir: Path | None = None
    species: tuple[Species, ...] = tuple(Species)
    kind: ModelKind = ModelKind.STOCHASTIC
    lam: float = ex.DEFAULT_LAMBDA
    sample_size: int = ex.DEFAULT_SAMPLE_SIZE
    max_order: int = ex.DEFAULT_MAX_ORDER
    n_stems: int = 500
    epochs: int = 200
    workers: int = 1

    def validate(self):
        if self.data is not None and not Path(self.data).exists():
            raise CliError(f"data file not found: {self.data}")
        if self.checkpoint_dir is not None and not Path(self.checkpoint_dir).is_dir():
            raise CliError(f"checkpoint directory not found: {self.checkpoint_dir}")
        if not (0 < self.lam < 1):
            raise CliError("lambda must lie in (0, 1)")
        if self.sample_size < 1 or self.n_stems < 5 or self.epochs < 1 or self.workers < 1:
            raise CliError("sample size, epochs and workers must be >= 1; n-stems >= 5")


def _species_list(value) -> tuple[Species, ...]:
    if isinstance(value, (list, tuple)):
        codes = list(value)
    else:
        codes = [c for c in str(value).split(",") if c.strip()]
    if not codes or codes == ["all"]:
        return tuple(Species)
    return tuple(Species.from_code(c) for c in codes)


def _float_list(value) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def _int_list(value) -> list[int]:
    return [int(v) for v in _float_list(value)]


def _common(p: argparse.ArgumentParser, *, out_default: str = "."):
    p.add_argument("--config", type=Path, help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, help="root random seed (required)")
    p.add_argument("--out-dir", type=Path, help=f"output directory (default {out_default})")


def _data_opts(p: argparse.ArgumentParser):
    p.add_argument("--data", type=Path, help="stem CSV; synthetic stems are generated if omitted")
    p.add_argument("--species", help="comma-separated species codes (PIM,PIG,ABB,PIB) or 'all'")
    p.add_argument("--n-stems", type=int, help="synthetic stems per species (default 500)")
    p.add_argument("--epochs", type=int, help="training epochs (default 200)")
    p.add_argument("--lambda", dest="lam", type=float, help="loss weight of ln sigma2 (default 0.3)")
    p.add_argument("--max-order", type=int, help="polynomial maximum order (default 1)")
    p.add_argument("--sample-size", type=int, help="stochastic sample size (default 10)")
    p.add_argument("--checkpoint-dir", type=Path,
                   help="load <SPECIES>_<kind>.ckpt from here instead of training")
    p.add_argument("--workers", type=int, help="parallel worker processes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stembuck", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate synthetic stems")
    _common(p)
    p.add_argument("--species", help="species code(s)")
    p.add_argument("--n", dest="n_stems", type=int, help="stems per species")
    p.add_argument("--out", type=Path, help="output CSV (default <out-dir>/stems.csv)")

    p = sub.add_parser("train", help="fit one model, write checkpoint and loss history")
    _common(p)
    _data_opts(p)
    p.add_argument("--kind", choices=[k.value for k in ModelKind])

    p = sub.add_parser("buck", help="plan the bucking of stems, write a plan CSV")
    _common(p)
    p.add_argument("--data", type=Path, help="stem CSV")
    p.add_argument("--stem-id", help="only this stem")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint; plan on the measured stem if omitted")
    p.add_argument("--prefix-height", type=float, help="measured part ends here (cm); default: whole stem")
    p.add_argument("--sample-size", type=int, help="profiles sampled per stem (default 10)")
    p.add_argument("--algorithm", choices=["deterministic", "stochastic"], default=None,
                   help="bucking algorithm (default stochastic for samples, deterministic otherwise)")
    p.add_argument("--price-matrix", type=Path, help="price matrix CSV (default: length prices)")
    p.add_argument("--out", type=Path, help="output CSV (default <out-dir>/plans.csv)")

    for name, help_ in [("grid", "lambda x sample-size study on the validation split"),
                        ("study-diameter", "minimum-diameter scenarios on the test split"),
                        ("study-price", "price scenarios on the test split"),
                        ("bias-variance", "bias/variance of the predictions on the test split")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        _data_opts(p)
        if name == "grid":
            p.add_argument("--lambdas", help="comma-separated lambda values (default 0.1..0.9)")
            p.add_argument("--sample-sizes", help="comma-separated sample sizes (default 1,2,5,10,20)")
        if name in ("study-diameter", "study-price"):
            p.add_argument("--scenarios", help="comma-separated scenario numbers (default all)")
    return parser


_DEFAULTS = {"out_dir": Path("."), "lam": ex.DEFAULT_LAMBDA, "sample_size": ex.DEFAULT_SAMPLE_SIZE,
             "max_order": ex.DEFAULT_MAX_ORDER, "n_stems": 500, "epochs": 200, "workers": 1,
             "species": "all", "kind": ModelKind.STOCHASTIC.value}


def _merge(args: argparse.Namespace) -> dict:
    values = {}
    if args.config is not None:
        if not args.config.exists():
            raise CliError(f"config file not found: {args.config}")
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"invalid config file {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a JSON object")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            key = "lam" if key == "lambda" else key
            if key not in vars(args):
                raise CliError(f"unknown config key {key!r} for this command")
            values[key] = value
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "command", "verbose"):
            values[key] = value
    for key, value in _DEFAULTS.items():
        values.setdefault(key, value)
    if values.get("seed") is None:
        raise CliError("a seed is required (--seed or config 'seed')")
    return values


def _run_config(values: dict) -> RunConfig:
    try:
        cfg = RunConfig(
            seed=int(values["seed"]), out_dir=Path(values["out_dir"]),
            data=Path(values["data"]) if values.get("data") else None,
            checkpoint_dir=Path(values["checkpoint_dir"]) if values.get("checkpoint_dir") else None,
            species=_species_list(values["species"]), kind=ModelKind(values["kind"]),
            lam=float(values["lam"]), sample_size=int(values["sample_size"]),
            max_order=int(values["max_order"]), n_stems=int(values["n_stems"]),
            epochs=int(values["epochs"]), workers=int(values["workers"]))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None
    cfg.validate()
    return cfg


def _echo(path: Path):
    print(f"wrote {path}")


def _species_data(cfg: RunConfig) -> list[ex.SpeciesData]:
    profiles = parse_stem_csv(cfg.data) if cfg.data is not None else None
    out = []
    for species in cfg.species:
        if profiles is not None:
            subset = [p for p in profiles if p.species is species]
            if not subset:
                raise CliError(f"no stems of species {species.code} in {cfg.data}")
            out.append(ex.prepare_species(species, len(subset), cfg.seed, subset))
        else:
            out.append(ex.prepare_species(species, cfg.n_stems, cfg.seed))
    return out


def _trained(cfg: RunConfig, data: Sequence[ex.SpeciesData]) -> list[ex.TrainedModels]:
    out = []
    for d in data:
        if cfg.checkpoint_dir is not None:
            tm = ex.TrainedModels(d)
            for kind in ModelKind:
                path = cfg.checkpoint_dir / f"{d.species.code}_{kind.value}.ckpt"
                if not path.exists():
                    raise CliError(f"missing checkpoint {path}")
                tm.models[kind] = TaperModel.load(path)
            out.append(tm)
        else:
            out.append(ex.TrainedModels.fit(d, cfg.seed, cfg.lam, cfg.max_order, cfg.epochs))
    return out


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(values: dict) -> None:
    cfg = _run_config(values)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = Path(values["out"]) if values.get("out") else cfg.out_dir / "stems.csv"
    stems = []
    for species in cfg.species:
        stems += synthesize_species(species, cfg.n_stems, ex.derive_seed(cfg.seed, "synth", species.code))
    write_stem_csv(out, stems)
    _echo(out)


def cmd_train(values: dict) -> None:
    cfg = _run_config(values)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for d in _species_data(cfg):
        model, history = ex.train_model(cfg.kind, d, cfg.seed, cfg.lam, cfg.max_order, cfg.epochs)
        stem = f"{d.species.code}_{cfg.kind.value}"
        ckpt = cfg.out_dir / f"{stem}.ckpt"
        model.save(ckpt)
        _echo(ckpt)
        hist = cfg.out_dir / f"{stem}_loss.csv"
        with open(hist, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss"])
            for k, v in enumerate(history, start=1):
                w.writerow([k, repr(v)])
        _echo(hist)


def _buck_one(stem: StemProfile, model: TaperModel | None, algorithm: str | None,
              sample_size: int, seed: int, pm):
    if model is None:
        samples = [stem]
    elif model.kind is ModelKind.STOCHASTIC:
        samples = ex.predict_samples(model, [stem], sample_size, seed)[0]
    else:
        samples = ex.predict_samples(model, [stem], 1, seed)[0]
    if not samples:
        return ex.CutPlan.empty()
    algorithm = algorithm or ("stochastic" if len(samples) > 1 else "deterministic")
    if algorithm == "deterministic":
        if len(samples) != 1:
            raise CliError("deterministic bucking needs a single profile; use --algorithm stochastic")
        return buck_deterministic(samples[0], pm)
    return buck_stochastic(samples, pm)


def cmd_buck(values: dict) -> None:
    cfg = _run_config(values)
    if cfg.data is None:
        raise CliError("buck needs --data")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = Path(values["out"]) if values.get("out") else cfg.out_dir / "plans.csv"
    pm = read_price_matrix(values["price_matrix"]) if values.get("price_matrix") else standard_price_matrix()
    model = TaperModel.load(values["checkpoint"]) if values.get("checkpoint") else None
    stems = parse_stem_csv(cfg.data)
    if values.get("stem_id"):
        stems = [s for s in stems if s.stem_id == values["stem_id"]]
        if not stems:
            raise CliError(f"stem {values['stem_id']} not found in {cfg.data}")
    stems = [s for s in stems if s.species in cfg.species]
    rows = []
    for stem in stems:
        case = stem
        if values.get("prefix_height") is not None:
            h = float(values["prefix_height"])
            if not (stem.heights[0] <= h <= stem.top_height):
                raise CliError(f"prefix height {h} outside stem {stem.stem_id}")
            case = replace(stem, known_prefix_end=h)
        plan = _buck_one(case, model, values.get("algorithm"), cfg.sample_size,
                         ex.derive_seed(cfg.seed, "buck", stem.species.code, stem.stem_id), pm)
        rows += plan_rows(stem.stem_id, plan, pm, stem)
    write_plans(out, rows)
    _echo(out)


def _write_reports(cfg: RunConfig, name: str, reports) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / f"{name}.csv"
    ex.write_reports_csv(out, reports)
    print(ex.format_report_table(reports))
    _echo(out)


def cmd_grid(values: dict) -> None:
    cfg = _run_config(values)
    lambdas = _float_list(values["lambdas"]) if values.get("lambdas") else list(ex.LAMBDA_GRID)
    sizes = _int_list(values["sample_sizes"]) if values.get("sample_sizes") else list(ex.SAMPLE_SIZE_GRID)
    if not lambdas or not sizes:
        raise CliError("empty grid")
    reports = ex.run_hyperparameter_grid(_species_data(cfg), lambdas, sizes, cfg.seed,
                                         cfg.epochs, cfg.workers)
    _write_reports(cfg, "grid_report", reports)


def cmd_study(values: dict, which: str) -> None:
    cfg = _run_config(values)
    trained = _trained(cfg, _species_data(cfg))
    if which == "diameter":
        scen = _int_list(values["scenarios"]) if values.get("scenarios") else [1, 2, 3, 4, 5]
        reports = ex.run_min_diameter_study(trained, cfg.seed, cfg.sample_size, scen)
        _write_reports(cfg, "min_diameter_report", reports)
    else:
        scen = _int_list(values["scenarios"]) if values.get("scenarios") else list(range(1, 10))
        reports = ex.run_price_study(trained, cfg.seed, cfg.sample_size, scen)
        _write_reports(cfg, "price_report", reports)


def cmd_bias_variance(values: dict) -> None:
    cfg = _run_config(values)
    rows = []
    for tm in _trained(cfg, _species_data(cfg)):
        cases = ex.evaluation_cases(tm.data.subset("test"))
        for kind, model in tm.models.items():
            rows += ex.bias_variance_rows(kind.value, tm.data.species.code,
                                          ex.bias_variance_table(model, cases))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / "bias_variance.csv"
    ex.write_bias_variance_csv(out, rows)
    _echo(out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "buck": cmd_buck,
    "grid": cmd_grid,
    "study-diameter": lambda v: cmd_study(v, "diameter"),
    "study-price": lambda v: cmd_study(v, "price"),
    "bias-variance": cmd_bias_variance,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](_merge(args))
    except (CliError, StemDataError, BuckingError, CheckpointError, TrainingError, ValueError) as exc:
        print(f"stembuck {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

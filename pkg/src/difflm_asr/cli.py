"""Command-line entry point.

Usage::

    difflm-asr <command> [--config run.json] [--key value ...]

Commands: gen-data, nbest, rescore, joint, eval, sweep, ppl.  Every key can
come from the JSON config (a flat object) or a ``--key value`` flag; flags
win.  Dashes and underscores in flag names are interchangeable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import evaluation as ev
from .joint import JointConfig
from .rescore import EstimatorConfig, RescoreWeights

log = logging.getLogger("difflm_asr")

COMMANDS = ("gen-data", "nbest", "rescore", "joint", "eval", "sweep", "ppl")

PATH_KEYS = ("data_dir", "out_dir", "hyps", "report")
REQUIRED_PATHS = {
    "gen-data": ("data_dir",),
    "nbest": ("data_dir",),
    "rescore": ("data_dir", "out_dir"),
    "joint": ("data_dir", "out_dir"),
    "eval": ("data_dir", "hyps", "report"),
    "sweep": ("data_dir", "out_dir"),
    "ppl": ("data_dir", "out_dir"),
}

_BENCH_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ev.BenchmarkParams)}
_BENCH_DEFAULTS.pop("seed")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 1,
    "estimator": "sample_mask",
    "K": 16,
    "t_fixed": 0.5,
    "lambda_ctc": 1.0,
    "lambda_difflm": 0.3,
    "lambda_prior": 0.0,
    "t_start": 0.3,
    "L": 16,
    "final_rule": "argmax",
    "trace": False,
    "mode": "rescore",
    "K_grid": [1, 16, 256],
    "t_start_grid": [0.3, 0.5, 0.8],
    "L_grid": [1, 8, 12, 16, 32, 48, 64],
    "seeds": [0],
    "kind": "mdlm",
    "n_steps": 32,
    "timing": False,
    **_BENCH_DEFAULTS,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str
    paths: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"command": self.command, **self.paths, **self.params}, indent=2, sort_keys=True) + "\n"


def _norm(key: str) -> str:
    return key.lstrip("-").replace("-", "_")


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ConfigError(f"bad boolean for {key}: {value}")
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(default, list):
        items = value.split(",") if isinstance(value, str) else list(value)
        kind = type(default[0])
        return [kind(x) for x in items]
    if isinstance(default, float):
        return float(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    return str(value)


def parse_overrides(tokens: Sequence[str]) -> dict:
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok}")
        key = _norm(tok)
        try:
            out[key] = next(it)
        except StopIteration:
            raise ConfigError(f"missing value for {tok}") from None
    return out


def parse_config(document: dict | str | Path | None, overrides: Sequence[str] | dict = (), command: str | None = None) -> RunConfig:
    """Merge a JSON config with flag overrides into a validated RunConfig."""
    if document is None:
        raw: dict = {}
    elif isinstance(document, dict):
        raw = dict(document)
    else:
        raw = json.loads(Path(document).read_text())
    over = overrides if isinstance(overrides, dict) else parse_overrides(overrides)
    merged = {_norm(k): v for k, v in raw.items()}
    merged.update({_norm(k): v for k, v in over.items()})
    cmd = command or merged.get("command")
    merged.pop("command", None)
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command: {cmd}")
    paths, params = {}, dict(DEFAULTS)
    for key, value in merged.items():
        if key in PATH_KEYS:
            paths[key] = str(value)
        elif key in DEFAULTS:
            params[key] = _coerce(key, value)
        else:
            raise ConfigError(f"unknown key: {key}")
    for key in REQUIRED_PATHS[cmd]:
        if key not in paths:
            raise ConfigError(f"missing required path: {key}")
    return RunConfig(cmd, paths, params)


# -- pipelines ----------------------------------------------------------------------


def _bench_params(p: dict) -> ev.BenchmarkParams:
    return ev.BenchmarkParams(**{k: p[k] for k in _BENCH_DEFAULTS}, seed=p["seed"])


def _weights(p: dict) -> RescoreWeights:
    return RescoreWeights(p["lambda_ctc"], p["lambda_difflm"], p["lambda_prior"])


def _echo(cfg: RunConfig, where: Path) -> None:
    where.mkdir(parents=True, exist_ok=True)
    (where / "config.resolved.json").write_text(cfg.to_json())


def _write_hyps(path: Path, bench: ev.Benchmark, hyps: dict) -> None:
    path.write_text("".join(f"{u} {' '.join(map(str, hyps[u]))}".rstrip() + "\n" for u in bench.utt_ids))


def read_hyps(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        fields = line.split()
        if fields:
            out[fields[0]] = tuple(int(x) for x in fields[1:])
    return out


def cmd_gen_data(cfg: RunConfig) -> None:
    root = Path(cfg.paths["data_dir"])
    bench = ev.generate_benchmark(_bench_params(cfg.params))
    ev.save_benchmark(bench, root)
    _echo(cfg, root)
    log.info("wrote %d utterances to %s", len(bench.utt_ids), root)


def cmd_nbest(cfg: RunConfig) -> None:
    root = Path(cfg.paths["data_dir"])
    bench = ev.load_benchmark(root)
    bench.nbest = {}
    ev.ensure_nbest(bench, cfg.params["beam"], cfg.params["n"], cfg.params["workers"])
    ev.save_nbest(bench, root)


def cmd_rescore(cfg: RunConfig) -> None:
    p = cfg.params
    bench = ev.load_benchmark(cfg.paths["data_dir"])
    out = Path(cfg.paths["out_dir"])
    _echo(cfg, out)
    ev.ensure_nbest(bench, p["beam"], p["n"], p["workers"])
    est = EstimatorConfig(p["estimator"], p["K"], p["t_fixed"], p["seed"])
    w = _weights(p)
    kind = "usdm" if est.kind == "usdm" else "mdlm"
    prior = bench.prior() if w.lambda_prior else None
    job = ev.RescoreJob(est, w, bench.denoiser(kind), prior)
    ranked = ev.map_utterances(job, [(u, bench.nbest[u]) for u in bench.utt_ids], p["workers"])
    (out / "rescored").mkdir(exist_ok=True)
    for u, entries in zip(bench.utt_ids, ranked):
        lines = []
        for rank, e in enumerate(entries):
            cols = [u, str(rank), repr(e.ctc_logprob), *map(str, e.hyp), repr(e.s_difflm), repr(e.combined)]
            lines.append(" ".join(cols) + "\n")
        (out / "rescored" / f"{u}.nbest").write_text("".join(lines))
    _write_hyps(out / "rescore.hyp", bench, {u: r[0].hyp for u, r in zip(bench.utt_ids, ranked)})


def cmd_joint(cfg: RunConfig) -> None:
    p = cfg.params
    bench = ev.load_benchmark(cfg.paths["data_dir"])
    out = Path(cfg.paths["out_dir"])
    _echo(cfg, out)
    jcfg = JointConfig(p["t_start"], p["L"], _weights(p), p["seed"], p["final_rule"])
    hyps = ev.joint_hyps(bench, jcfg, p["workers"])
    _write_hyps(out / "joint.hyp", bench, hyps)
    if p["trace"]:
        from .joint import joint_decode

        d = bench.denoiser("usdm")
        lines = []
        for u in bench.utt_ids:
            trace: list = []
            joint_decode(bench.posteriors[u], jcfg, d, rng=ev.utterance_rng(p["seed"], u), trace=trace)
            for step, t_l, z in trace:
                lines.append(f"{u} {step} {t_l!r} {' '.join(map(str, z))}".rstrip() + "\n")
        (out / "joint.trace").write_text("".join(lines))


def cmd_eval(cfg: RunConfig) -> None:
    bench = ev.load_benchmark(cfg.paths["data_dir"])
    hyps = read_hyps(cfg.paths["hyps"])
    missing = [u for u in bench.utt_ids if u not in hyps]
    if missing:
        raise ValueError(f"hypothesis file lacks {len(missing)} utterances, e.g. {missing[0]}")
    score = ev.corpus_wer(bench, hyps)
    row = ev.ResultRow(f"eval:{Path(cfg.paths['hyps']).name}", score, 0.0, 0.0)
    report = Path(cfg.paths["report"])
    report.parent.mkdir(parents=True, exist_ok=True)
    ev.emit_report([row], report, cfg.params["timing"])
    report.with_name(report.name + ".config.json").write_text(cfg.to_json())
    print(f"WER {score:.4f}")


def sweep_spec(p: dict) -> ev.SweepSpec:
    weights = {"lambda_ctc": p["lambda_ctc"], "lambda_difflm": p["lambda_difflm"], "lambda_prior": p["lambda_prior"]}
    if p["mode"] == "rescore":
        base = {"kind": p["estimator"], "t_fixed": p["t_fixed"], **weights}
        points = tuple({"K": k} for k in p["K_grid"])
    elif p["mode"] == "joint":
        base = {"final_rule": p["final_rule"], **weights}
        points = tuple({"t_start": ts, "L": L} for ts in p["t_start_grid"] for L in p["L_grid"])
    else:
        base, points = {}, ({},)
    return ev.SweepSpec(p["mode"], points, tuple(p["seeds"]), base)


def cmd_sweep(cfg: RunConfig) -> None:
    p = cfg.params
    bench = ev.load_benchmark(cfg.paths["data_dir"])
    out = Path(cfg.paths["out_dir"])
    _echo(cfg, out)
    rows = ev.run_sweep(sweep_spec(p), bench, p["workers"])
    ev.emit_report(rows, out / f"sweep_{p['mode']}.csv", p["timing"])


def cmd_ppl(cfg: RunConfig) -> None:
    p = cfg.params
    bench = ev.load_benchmark(cfg.paths["data_dir"])
    out = Path(cfg.paths["out_dir"])
    _echo(cfg, out)
    est = ev.ppl_upper_bound(
        bench.heldout, bench.denoiser(p["kind"]), kind=p["kind"], K=p["K"],
        rng=np.random.default_rng([p["seed"], 7]), n_steps=p["n_steps"],
    )
    exact = ev.bigram_perplexity(bench.model, bench.heldout)
    (out / "ppl.csv").write_text(
        "kind,K,ppl_bound,nll_per_token,stderr_per_token,bigram_ppl\n"
        f"{p['kind']},{p['K']},{est.ppl:.6f},{est.nll_per_token:.6f},{est.stderr_per_token:.6f},{exact:.6f}\n"
    )


HANDLERS = {
    "gen-data": cmd_gen_data,
    "nbest": cmd_nbest,
    "rescore": cmd_rescore,
    "joint": cmd_joint,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ppl": cmd_ppl,
}


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("difflm_asr."):
            name = mod.rsplit(".", 1)[1]
    return name


def dispatch(cfg: RunConfig) -> int:
    try:
        HANDLERS[cfg.command](cfg)
    except Exception as exc:  # surfaced as a one-line diagnostic
        print(f"{_origin(exc)}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="difflm-asr", description="Diffusion-LM rescoring and CTC joint decoding.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file (flat object)")
    parser.add_argument("--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, rest, command=args.command)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())

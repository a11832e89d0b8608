"""Command-line entry point: prep, solve, bench, and sweep.

Configuration comes from an optional JSON config file, environment
variables for endpoint secrets, and command-line flags, with precedence
flags > env > file. Exit codes: 0 success, 2 config/usage error,
3 data error, 4 backend failure, 5 unsolved.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .agents import (
    API_BASE_ENV,
    API_KEY_ENV,
    BackendError,
    DecodeParams,
    HTTPBackend,
    Role,
    ScriptExhausted,
    ScriptedBackend,
)
from .dataset import (
    DataError,
    dataset_stats,
    load_gsm8k_examples,
    make_instances,
    split_examples,
    write_instances,
)
from .harness import (
    InvalidCounts,
    SWEEP_BUDGETS,
    budget_sweep,
    load_problems,
    run_benchmark,
)
from .protocol import Problem, ProtocolError
from .solver import EventKind, Outcome, SolverConfig, solve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_UNSOLVED = 5

_ROLE_KEYS = {"decomposer", "evaluator"}


class ConfigError(Exception):
    """Run configuration is invalid; the message names the offending field."""


_INT_KEYS = {
    "token_budget",
    "accept_threshold",
    "max_retries_per_step",
    "max_steps",
    "cache_bad_threshold",
    "max_new_tokens",
    "decomposer_max_new_tokens",
    "evaluator_max_new_tokens",
    "workers",
    "seed",
}
_FLOAT_KEYS = {
    "temperature",
    "decomposer_temperature",
    "evaluator_temperature",
    "timeout",
}
_BOOL_KEYS = {"cache_enabled"}
_STR_KEYS = {
    "api_base",
    "decomposer_model",
    "evaluator_model",
    "decomposer_system_prompt",
    "evaluator_system_prompt",
    "out_dir",
    "method",
}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


@dataclass
class RunConfig:
    """Validated run configuration assembled from file, env, and flags."""

    api_base: str | None = None
    api_key: str | None = None
    decomposer_model: str | None = None
    evaluator_model: str | None = None
    decomposer_system_prompt: str | None = None
    evaluator_system_prompt: str | None = None
    token_budget: int = 2048
    accept_threshold: int = 1
    max_retries_per_step: int = 3
    max_steps: int = 12
    cache_enabled: bool = True
    cache_bad_threshold: int = 1
    temperature: float = 0.0
    max_new_tokens: int = 128
    decomposer_temperature: float | None = None
    decomposer_max_new_tokens: int | None = None
    evaluator_temperature: float | None = None
    evaluator_max_new_tokens: int | None = None
    timeout: float = 60.0
    workers: int = 1
    out_dir: str = "runs"
    seed: int = 0
    method: str = "dual_cot"
    script_path: str | None = field(default=None, repr=False)

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig(
                token_budget=self.token_budget,
                accept_threshold=self.accept_threshold,
                max_retries_per_step=self.max_retries_per_step,
                max_steps=self.max_steps,
                cache_enabled=self.cache_enabled,
                cache_bad_threshold=self.cache_bad_threshold,
                decomposer_params=DecodeParams(
                    temperature=self._role_float("decomposer_temperature"),
                    max_new_tokens=self._role_int("decomposer_max_new_tokens"),
                ),
                evaluator_params=DecodeParams(
                    temperature=self._role_float("evaluator_temperature"),
                    max_new_tokens=self._role_int("evaluator_max_new_tokens"),
                ),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def _role_float(self, key: str) -> float:
        value = getattr(self, key)
        return self.temperature if value is None else value

    def _role_int(self, key: str) -> int:
        value = getattr(self, key)
        return self.max_new_tokens if value is None else value

    def config_hash(self) -> str:
        # api_key deliberately excluded: secrets never enter the hash.
        payload = {
            key: getattr(self, key)
            for key in sorted(KNOWN_KEYS)
        }
        payload["script"] = bool(self.script_path)
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()
        return digest[:12]


def _check_type(key: str, value):
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
    elif key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
    elif key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")


def load_run_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    """Assemble the effective RunConfig with precedence flags > env > file."""
    config = RunConfig()
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        unknown = sorted(set(raw) - KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key, value in raw.items():
            _check_type(key, value)
            setattr(config, key, value)

    if os.environ.get(API_BASE_ENV):
        config.api_base = os.environ[API_BASE_ENV]
    if os.environ.get(API_KEY_ENV):
        config.api_key = os.environ[API_KEY_ENV]

    for flag, key in (
        ("budget", "token_budget"),
        ("cache", "cache_enabled"),
        ("max_retries", "max_retries_per_step"),
        ("threshold", "accept_threshold"),
        ("workers", "workers"),
        ("out", "out_dir"),
        ("method", "method"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, key, value)
    config.script_path = getattr(args, "script", None)
    return config


def load_script_fixture(path: str | Path) -> dict:
    """Read a scripted-backend fixture file.

    Two shapes are accepted: role-keyed (``{"decomposer": [...],
    "evaluator": [...]}``), applied to every problem, or a mapping from
    problem id to role-keyed scripts.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read script fixture: {exc}") from None
    except ValueError as exc:
        raise DataError(f"script fixture is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or not raw:
        raise DataError("script fixture must be a non-empty JSON object")

    def check_role_scripts(entry, where: str) -> None:
        if not isinstance(entry, dict) or not set(entry) <= _ROLE_KEYS:
            raise DataError(
                f"{where}: expected an object with 'decomposer'/'evaluator' lists"
            )
        for role, replies in entry.items():
            if not isinstance(replies, list) or not all(
                isinstance(reply, str) for reply in replies
            ):
                raise DataError(f"{where}: {role} script must be a list of strings")

    if set(raw) <= _ROLE_KEYS:
        check_role_scripts(raw, "fixture")
    else:
        for problem_id, entry in raw.items():
            check_role_scripts(entry, f"fixture[{problem_id!r}]")
    return raw


def _scripted_provider(fixture: dict, problems: Sequence[Problem]):
    """Build a per-problem scripted backend provider from a fixture."""
    if set(fixture) <= _ROLE_KEYS:
        scripts_for = {problem.id: fixture for problem in problems}
    else:
        missing = [problem.id for problem in problems if problem.id not in fixture]
        if missing:
            raise DataError(f"script fixture missing problem id(s): {', '.join(missing)}")
        scripts_for = {problem.id: fixture[problem.id] for problem in problems}

    def provider(problem: Problem):
        backend = ScriptedBackend(scripts_for[problem.id])
        return backend, backend

    return provider


def _http_backend(config: RunConfig) -> HTTPBackend:
    if not config.api_base:
        raise ConfigError(
            f"api_base: set it in the config file or via {API_BASE_ENV} "
            "(or pass --script for a scripted run)"
        )
    if not config.decomposer_model or not config.evaluator_model:
        raise ConfigError("decomposer_model/evaluator_model: required for live endpoints")
    system_prompts = {}
    if config.decomposer_system_prompt:
        system_prompts[Role.DECOMPOSER] = config.decomposer_system_prompt
    if config.evaluator_system_prompt:
        system_prompts[Role.EVALUATOR] = config.evaluator_system_prompt
    return HTTPBackend(
        base_url=config.api_base,
        api_key=config.api_key,
        models={
            Role.DECOMPOSER: config.decomposer_model,
            Role.EVALUATOR: config.evaluator_model,
        },
        system_prompts=system_prompts,
        timeout=config.timeout,
    )


def _build_backends(config: RunConfig, problems: Sequence[Problem]):
    if config.script_path:
        fixture = load_script_fixture(config.script_path)
        return _scripted_provider(fixture, problems)
    backend = _http_backend(config)
    return backend, backend


def cmd_prep(args: argparse.Namespace) -> int:
    examples = load_gsm8k_examples(args.input)
    if not 0 <= args.split_ratio <= 1:
        raise ConfigError(f"split_ratio: must be within [0, 1], got {args.split_ratio}")
    train, val = split_examples(examples, val_fraction=args.split_ratio, seed=args.seed)
    out_dir = Path(args.output)
    train_count = write_instances(
        (instance for example in train for instance in make_instances(example)),
        out_dir / "train.jsonl",
    )
    val_count = write_instances(
        (instance for example in val for instance in make_instances(example)),
        out_dir / "val.jsonl",
    )
    stats = dataset_stats(examples)
    (out_dir / "stats.json").write_text(
        json.dumps(
            {**stats.to_dict(), "train_instances": train_count, "val_instances": val_count},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"examples: {stats.examples}")
    print(f"instances: {stats.instances} (train {train_count}, val {val_count})")
    print(f"mean steps per example: {stats.mean_steps_per_example:.2f}")
    print(f"wrote {out_dir / 'train.jsonl'} and {out_dir / 'val.jsonl'}")
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args)
    solver_config = config.solver_config()
    problem = Problem(id="adhoc", question=args.question)
    if config.script_path:
        fixture = load_script_fixture(config.script_path)
        if not set(fixture) <= _ROLE_KEYS:
            fixture = fixture.get(problem.id) or next(iter(fixture.values()))
        backend = ScriptedBackend(fixture)
        decomposer = evaluator = backend
    else:
        decomposer = evaluator = _http_backend(config)
    print(f"config_hash: {config.config_hash()}")
    trace = solve(problem, solver_config, decomposer, evaluator)

    for event in trace.events:
        payload = event.payload
        if event.kind is EventKind.RETRIED:
            print(f"  retry {payload['retries_used']} (hint: {payload['hint']})")
        elif event.kind in (EventKind.ACCEPTED, EventKind.FORCED_ACCEPT):
            forced = " (forced)" if event.kind is EventKind.FORCED_ACCEPT else ""
            label = "FINAL" if payload["kind"] == "final" else f"STEP {payload['index']}"
            print(f"{label} [score {payload['score']}]{forced}: {payload['text']}")
        elif event.kind is EventKind.FINISHED:
            print(f"FINAL_ANSWER: {payload['final_answer']}")
        elif event.kind is EventKind.BUDGET_STOP:
            print(f"budget exhausted: spent {payload['spent']} of {payload['limit']} tokens")
        elif event.kind is EventKind.STEP_LIMIT_STOP:
            print(f"step limit reached after {payload['steps']} steps")
    print(f"outcome: {trace.outcome.value}")
    print(f"tokens: {trace.tokens_spent}")
    if trace.error:
        print(f"error: {trace.error}", file=sys.stderr)

    if trace.outcome is Outcome.SOLVED:
        return EXIT_OK
    if trace.outcome is Outcome.BACKEND_FAILURE:
        return EXIT_BACKEND
    return EXIT_UNSOLVED


def cmd_bench(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args)
    solver_config = config.solver_config()
    problems = load_problems(args.problems)
    backends = _build_backends(config, problems)
    print(f"config_hash: {config.config_hash()}")
    report = run_benchmark(
        problems,
        solver_config,
        backends,
        method=config.method,
        out_dir=config.out_dir,
        workers=config.workers,
    )
    summary = report.summary
    print(f"accuracy: {summary.accuracy_line()} ({summary.correct}/{summary.n})")
    print(f"mean tokens: {summary.mean_tokens:.2f}")
    print(f"evaluator calls: {summary.evaluator_calls}")
    if report.run_dir is not None:
        print(f"report: {report.run_dir}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args)
    solver_config = config.solver_config()
    budgets = _parse_budgets(args.budgets)
    problems = load_problems(args.problems)
    backends = _build_backends(config, problems)
    print(f"config_hash: {config.config_hash()}")
    rows = budget_sweep(
        problems,
        budgets,
        solver_config,
        backends,
        method=config.method,
        out_dir=config.out_dir,
        workers=config.workers,
        continue_on_error=True,
    )
    print(f"{'budget':>6}  {'cache':>5}  accuracy")
    for row in rows:
        print(f"{row.budget:>6}  {'on' if row.cache else 'off':>5}  {row.accuracy_line()}")
    return EXIT_OK


def _parse_budgets(spec: str) -> list[int]:
    budgets = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            budgets.append(int(part))
        except ValueError:
            raise ConfigError(f"budgets: {part!r} is not an integer") from None
    if not budgets:
        raise ConfigError("budgets: at least one budget is required")
    return budgets


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--script", help="scripted-backend fixture file (JSON)")
    parser.add_argument("--budget", type=int, default=None, help="token budget per problem")
    parser.add_argument(
        "--cache",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="enable/disable the rejection cache",
    )
    parser.add_argument("--max-retries", type=int, default=None, dest="max_retries")
    parser.add_argument(
        "--threshold", type=int, default=None, help="accept when score > threshold"
    )
    parser.add_argument("--out", default=None, help="output directory for reports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualtrack",
        description="Two-agent stepwise math solver with rejection cache and token budgets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prep", help="convert GSM8K-format data to next-step instances")
    prep.add_argument("input", help="JSONL file with question/answer records")
    prep.add_argument("output", help="output directory for train/val instance files")
    prep.add_argument("--split-ratio", type=float, default=0.05, dest="split_ratio",
                      help="validation fraction (0 puts everything in train)")
    prep.add_argument("--seed", type=int, default=0)
    prep.set_defaults(handler=cmd_prep)

    solve_cmd = sub.add_parser("solve", help="solve one problem and print the trace")
    solve_cmd.add_argument("question", help="problem text")
    _add_run_flags(solve_cmd)
    solve_cmd.set_defaults(handler=cmd_solve)

    bench = sub.add_parser("bench", help="run the benchmark over a problem file")
    bench.add_argument("problems", help="JSONL problems file with gold answers")
    _add_run_flags(bench)
    bench.add_argument("--workers", type=int, default=None)
    bench.add_argument("--method", default=None, help="method label for reports")
    bench.set_defaults(handler=cmd_bench)

    sweep = sub.add_parser("sweep", help="benchmark across budgets with cache on/off")
    sweep.add_argument("problems", help="JSONL problems file with gold answers")
    _add_run_flags(sweep)
    sweep.add_argument("--workers", type=int, default=None)
    sweep.add_argument("--method", default=None, help="method label for reports")
    sweep.add_argument(
        "--budgets",
        default=",".join(str(budget) for budget in SWEEP_BUDGETS),
        help="comma-separated token budgets",
    )
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidCounts, ProtocolError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BackendError, ScriptExhausted) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())

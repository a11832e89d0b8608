"""Benchmark runner and metrics.

Runs the solver over a problem set, scores final answers by exact
canonical-decimal match against the gold answers, reports accuracy with
Wilson 95% confidence intervals, and sweeps token budgets with the
rejection cache on and off. Per-problem traces, a results JSONL, a
summary document, and a CSV report are written under a run directory
named by timestamp plus config hash.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .dataset import DataError, _read_jsonl
from .protocol import (
    CanonicalNumber,
    Problem,
    ProtocolError,
    extract_gold_answer,
    normalize_answer,
)
from .solver import Outcome, SolverConfig, SolveTrace, solve

DEFAULT_Z = 1.96
SWEEP_BUDGETS = (100, 200, 300, 400, 500, 600)
CSV_COLUMNS = (
    "method",
    "budget",
    "cache",
    "correct",
    "n",
    "accuracy",
    "ci_low",
    "ci_high",
    "mean_tokens",
    "evaluator_calls",
)

# Trace label vocabulary for human error annotation; traces are always
# exported with labels empty.
ERROR_LABELS = (
    "conceptual_error_decomposer",
    "arithmetic_error_decomposer",
    "scoring_issue_evaluator",
    "looping_no_progress",
    "ignored_hint_decomposer",
)

BackendPair = tuple[object, object]
BackendProvider = Callable[[Problem], BackendPair]


class InvalidCounts(ValueError):
    """Counts unusable for a binomial interval (n < 1 or correct outside 0..n)."""


@dataclass(frozen=True)
class WilsonInterval:
    """Wilson score interval for a binomial proportion."""

    p_hat: float
    n: int
    z: float
    low: float
    high: float


def wilson_interval(correct: int, n: int, z: float = DEFAULT_Z) -> WilsonInterval:
    """Wilson 95% (by default) score interval for ``correct`` successes in ``n``.

    Better calibrated than the normal approximation for small samples
    and proportions near 0 or 1. Bounds are clamped to [0, 1].

    Raises:
        InvalidCounts: n < 1 or correct outside [0, n].
    """
    if n < 1 or not 0 <= correct <= n:
        raise InvalidCounts(f"invalid counts: correct={correct}, n={n}")
    p_hat = correct / n
    denominator = 1 + z**2 / n
    center = (p_hat + z**2 / (2 * n)) / denominator
    half_width = (
        z * math.sqrt(p_hat * (1 - p_hat) / n + z**2 / (4 * n**2)) / denominator
    )
    return WilsonInterval(
        p_hat=p_hat,
        n=n,
        z=z,
        low=max(0.0, center - half_width),
        high=min(1.0, center + half_width),
    )


@dataclass(frozen=True)
class RunResult:
    """Outcome of one benchmark problem."""

    problem_id: str
    predicted: CanonicalNumber | None
    correct: bool
    tokens_spent: int
    outcome: Outcome
    evaluator_calls: int
    trace_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "predicted": str(self.predicted) if self.predicted else None,
            "correct": self.correct,
            "tokens_spent": self.tokens_spent,
            "outcome": self.outcome.value,
            "evaluator_calls": self.evaluator_calls,
            "trace_path": self.trace_path,
        }


@dataclass(frozen=True)
class SummaryRow:
    """Aggregate over one benchmark run (one sweep cell)."""

    method: str
    budget: int
    cache: bool
    correct: int
    n: int
    accuracy: float
    ci_low: float
    ci_high: float
    mean_tokens: float
    evaluator_calls: int
    outcomes: Mapping[str, int]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "budget": self.budget,
            "cache": "on" if self.cache else "off",
            "correct": self.correct,
            "n": self.n,
            "accuracy": round(self.accuracy, 3),
            "ci_low": round(self.ci_low, 3),
            "ci_high": round(self.ci_high, 3),
            "mean_tokens": round(self.mean_tokens, 2),
            "evaluator_calls": self.evaluator_calls,
            "outcomes": dict(sorted(self.outcomes.items())),
        }

    def accuracy_line(self) -> str:
        return (
            f"{self.accuracy * 100:.1f}% "
            f"[{self.ci_low * 100:.1f}%, {self.ci_high * 100:.1f}%]"
        )


@dataclass
class BenchmarkReport:
    results: list[RunResult]
    summary: SummaryRow
    run_dir: Path | None = None


def summarize(
    results: Sequence[RunResult], *, method: str, budget: int, cache: bool
) -> SummaryRow:
    """Aggregate per-problem results; pure, so reports can be recomputed."""
    if not results:
        raise InvalidCounts("no results to summarize")
    correct = sum(1 for result in results if result.correct)
    interval = wilson_interval(correct, len(results))
    outcomes = Counter(result.outcome.value for result in results)
    return SummaryRow(
        method=method,
        budget=budget,
        cache=cache,
        correct=correct,
        n=len(results),
        accuracy=correct / len(results),
        ci_low=interval.low,
        ci_high=interval.high,
        mean_tokens=sum(result.tokens_spent for result in results) / len(results),
        evaluator_calls=sum(result.evaluator_calls for result in results),
        outcomes=dict(outcomes),
    )


def load_problems(path: str | Path) -> list[Problem]:
    """Read benchmark problems from JSONL.

    Each record needs ``id``, ``question``, and either a GSM8K-style
    ``answer`` (gold extracted from its ``####`` marker) or an explicit
    ``gold_answer``. Ids must be unique.
    """
    problems: list[Problem] = []
    seen: set[str] = set()
    for line_number, record in _read_jsonl(path):
        try:
            problem_id, question = str(record["id"]), record["question"]
        except (KeyError, TypeError):
            raise DataError(
                f"{path}:{line_number}: record needs 'id' and 'question' fields"
            ) from None
        if problem_id in seen:
            raise DataError(f"{path}:{line_number}: duplicate problem id {problem_id!r}")
        seen.add(problem_id)
        if not isinstance(question, str):
            raise DataError(f"{path}:{line_number}: question must be a string")
        try:
            gold = None
            if record.get("answer") is not None:
                gold = extract_gold_answer(str(record["answer"]))
            elif record.get("gold_answer") is not None:
                gold = normalize_answer(str(record["gold_answer"]))
        except ProtocolError as exc:
            raise DataError(f"{path}:{line_number}: {exc}") from None
        problems.append(Problem(id=problem_id, question=question, gold_answer=gold))
    return problems


def _as_provider(backends: BackendPair | BackendProvider) -> BackendProvider:
    if callable(backends):
        return backends
    decomposer, evaluator = backends
    return lambda problem: (decomposer, evaluator)


def _config_hash(config: SolverConfig, method: str) -> str:
    payload = json.dumps(
        {"config": config.to_dict(), "method": method}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:10]


def _score_trace(problem: Problem, trace: SolveTrace) -> tuple[CanonicalNumber | None, bool]:
    predicted = trace.final_answer if trace.outcome is Outcome.SOLVED else None
    correct = predicted is not None and predicted == problem.gold_answer
    return predicted, correct


def run_benchmark(
    problems: Sequence[Problem],
    config: SolverConfig,
    backends: BackendPair | BackendProvider,
    *,
    method: str = "dual_cot",
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> BenchmarkReport:
    """Solve every problem and aggregate exact-match accuracy with a Wilson CI.

    ``backends`` is either a (decomposer, evaluator) pair shared by all
    problems or a callable mapping each problem to its own pair (needed
    for scripted fixtures). Backend failures score as incorrect with
    outcome ``backend_failure``; the run continues and n stays fixed.

    With ``out_dir`` set, writes per-problem traces, results.jsonl,
    summary.json, summary.csv, and run_meta.json under a fresh run
    directory.
    """
    if not problems:
        raise InvalidCounts("empty problem list")
    for problem in problems:
        if problem.gold_answer is None:
            raise DataError(f"problem {problem.id!r} has no gold answer")
    provider = _as_provider(backends)

    run_dir: Path | None = None
    trace_dir: Path | None = None
    if out_dir is not None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(out_dir) / f"{stamp}-{_config_hash(config, method)}"
        trace_dir = run_dir / "traces"
        trace_dir.mkdir(parents=True, exist_ok=True)

    def run_one(problem: Problem) -> RunResult:
        decomposer, evaluator = provider(problem)
        trace = solve(problem, config, decomposer, evaluator)
        predicted, correct = _score_trace(problem, trace)
        trace_path = None
        if trace_dir is not None:
            path = trace_dir / f"{problem.id}.json"
            path.write_text(trace.to_json() + "\n", encoding="utf-8")
            trace_path = str(path)
        return RunResult(
            problem_id=problem.id,
            predicted=predicted,
            correct=correct,
            tokens_spent=trace.tokens_spent,
            outcome=trace.outcome,
            evaluator_calls=trace.evaluator_calls,
            trace_path=trace_path,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run_one, problems))
    else:
        results = [run_one(problem) for problem in problems]

    summary = summarize(results, method=method, budget=config.token_budget,
                        cache=config.cache_enabled)
    if run_dir is not None:
        _write_report(run_dir, results, [summary], config)
    return BenchmarkReport(results=results, summary=summary, run_dir=run_dir)


def budget_sweep(
    problems: Sequence[Problem],
    budgets: Sequence[int],
    config: SolverConfig,
    backends: BackendPair | BackendProvider,
    *,
    method: str = "dual_cot",
    out_dir: str | Path | None = None,
    workers: int = 1,
    continue_on_error: bool = False,
) -> list[SummaryRow]:
    """Run the benchmark per budget with the cache off and on.

    Emits one summary row per (budget, cache) cell — the axes of the
    accuracy-vs-budget comparison. Cell errors propagate unless
    ``continue_on_error`` is set, in which case failed cells are skipped.
    """
    if not budgets:
        raise ValueError("budgets must be non-empty")
    if any(budget <= 0 for budget in budgets):
        raise ValueError("budgets must be positive")
    rows: list[SummaryRow] = []
    errors: list[str] = []
    for budget in budgets:
        for cache_enabled in (False, True):
            cell_config = config.with_overrides(
                token_budget=budget, cache_enabled=cache_enabled
            )
            try:
                report = run_benchmark(
                    problems, cell_config, backends, method=method, workers=workers
                )
            except Exception as exc:
                if not continue_on_error:
                    raise
                errors.append(f"budget={budget} cache={cache_enabled}: {exc}")
                continue
            rows.append(report.summary)
    if out_dir is not None:
        run_dir = Path(out_dir) / (
            time.strftime("%Y%m%d-%H%M%S") + "-sweep-" + _config_hash(config, method)
        )
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "sweep.csv").write_text(rows_to_csv(rows), encoding="utf-8")
        if errors:
            (run_dir / "errors.txt").write_text("\n".join(errors) + "\n", encoding="utf-8")
    return rows


def rows_to_csv(rows: Sequence[SummaryRow]) -> str:
    """Render summary rows as the canonical CSV report."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        record = row.to_dict()
        record.pop("outcomes")
        record["accuracy"] = f"{record['accuracy']:.3f}"
        record["ci_low"] = f"{record['ci_low']:.3f}"
        record["ci_high"] = f"{record['ci_high']:.3f}"
        record["mean_tokens"] = f"{record['mean_tokens']:.2f}"
        writer.writerow(record)
    return buffer.getvalue()


def _write_report(
    run_dir: Path,
    results: Sequence[RunResult],
    rows: Sequence[SummaryRow],
    config: SolverConfig,
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with (run_dir / "results.jsonl").open("w", encoding="utf-8") as handle:
        for result in results:
            handle.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    summary_payload = [row.to_dict() for row in rows]
    (run_dir / "summary.json").write_text(
        json.dumps(summary_payload[0] if len(summary_payload) == 1 else summary_payload,
                   indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (run_dir / "summary.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    (run_dir / "run_meta.json").write_text(
        json.dumps(
            {"config": config.to_dict(), "written_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )


def load_results(path: str | Path) -> list[RunResult]:
    """Read persisted results.jsonl back into RunResults (for recomputation)."""
    results = []
    for line_number, record in _read_jsonl(path):
        try:
            results.append(
                RunResult(
                    problem_id=record["problem_id"],
                    predicted=(
                        CanonicalNumber(record["predicted"])
                        if record["predicted"]
                        else None
                    ),
                    correct=record["correct"],
                    tokens_spent=record["tokens_spent"],
                    outcome=Outcome(record["outcome"]),
                    evaluator_calls=record["evaluator_calls"],
                    trace_path=record.get("trace_path"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{line_number}: bad result record ({exc})") from None
    return results

"""The collaborative Decomposer-Evaluator solve loop.

One solve is a strictly sequential state machine over accepted-step
slots: generate a candidate, screen it against the rejection cache,
evaluate it, then accept, retry with the feedback as a hint, or force
acceptance once the retry limit is reached. The loop terminates on an
accepted FINAL_ANSWER, on token-budget exhaustion, on the step cap, or
on a backend failure, and records every event in a replayable trace.

Budget discipline: the ledger is checked before every agent call and
never mid-call, so total spend can overshoot the limit by at most the
cost of the final call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

from .agents import (
    AgentReply,
    BackendError,
    DecodeParams,
    Role,
    ScriptExhausted,
)
from .cache import CacheDecision, CacheOrigin, RejectionCache, fingerprint, synth_rejection
from .protocol import (
    AcceptedStep,
    CanonicalNumber,
    Evaluation,
    MalformedStep,
    Problem,
    ProtocolError,
    StepCandidate,
    StepKind,
    build_decomposer_prompt,
    build_evaluator_prompt,
    normalize_answer,
    parse_agent_step,
    parse_evaluation,
)

MALFORMED_STEP_FEEDBACK = "emit exactly one STEP: or FINAL_ANSWER: line"
UNPARSEABLE_FINAL_FEEDBACK = (
    "the FINAL_ANSWER line must contain the numeric answer; "
    "emit exactly one STEP: or FINAL_ANSWER: line"
)


class Outcome(str, Enum):
    SOLVED = "solved"
    BUDGET_EXHAUSTED = "budget_exhausted"
    STEP_LIMIT = "step_limit"
    BACKEND_FAILURE = "backend_failure"


class EventKind(str, Enum):
    GENERATED = "generated"
    CACHE_REJECTED = "cache_rejected"
    EVALUATED = "evaluated"
    ACCEPTED = "accepted"
    RETRIED = "retried"
    FORCED_ACCEPT = "forced_accept"
    BUDGET_STOP = "budget_stop"
    STEP_LIMIT_STOP = "step_limit_stop"
    FINISHED = "finished"


class Decision(str, Enum):
    ACCEPT = "accept"
    RETRY = "retry"
    FORCED_ACCEPT = "forced_accept"


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the solve loop.

    A step is accepted when its score strictly exceeds
    ``accept_threshold``; steps scoring at or below
    ``cache_bad_threshold`` are fingerprint-cached as known-bad. The
    token budget is shared by both agents; 0 means no calls at all.
    """

    token_budget: int
    accept_threshold: int = 1
    max_retries_per_step: int = 3
    max_steps: int = 12
    cache_enabled: bool = True
    cache_bad_threshold: int = 1
    decomposer_params: DecodeParams = DecodeParams()
    evaluator_params: DecodeParams = DecodeParams()

    def __post_init__(self) -> None:
        if self.token_budget < 0:
            raise ValueError("token_budget must be non-negative")
        if not 0 <= self.accept_threshold <= 3:
            raise ValueError("accept_threshold must be within 0..3")
        if self.cache_bad_threshold > self.accept_threshold:
            raise ValueError("cache_bad_threshold must not exceed accept_threshold")
        if self.max_retries_per_step < 1:
            raise ValueError("max_retries_per_step must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def with_overrides(self, **changes) -> "SolverConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "token_budget": self.token_budget,
            "accept_threshold": self.accept_threshold,
            "max_retries_per_step": self.max_retries_per_step,
            "max_steps": self.max_steps,
            "cache_enabled": self.cache_enabled,
            "cache_bad_threshold": self.cache_bad_threshold,
            "decomposer_params": {
                "temperature": self.decomposer_params.temperature,
                "max_new_tokens": self.decomposer_params.max_new_tokens,
            },
            "evaluator_params": {
                "temperature": self.evaluator_params.temperature,
                "max_new_tokens": self.evaluator_params.max_new_tokens,
            },
        }


@dataclass
class BudgetLedger:
    """Approximate-token accounting shared by both agents for one solve."""

    limit: int
    spent_decomposer: int = 0
    spent_evaluator: int = 0

    @property
    def spent_total(self) -> int:
        return self.spent_decomposer + self.spent_evaluator

    def exhausted(self) -> bool:
        return self.spent_total >= self.limit

    def charge(self, role: Role | str, reply: AgentReply) -> None:
        """Add a reply's prompt+completion tokens to the role's counter."""
        cost = reply.prompt_tokens + reply.completion_tokens
        if Role(role) is Role.DECOMPOSER:
            self.spent_decomposer += cost
        else:
            self.spent_evaluator += cost


@dataclass
class TraceEvent:
    kind: EventKind
    payload: dict
    tokens_charged: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "payload": self.payload,
            "tokens_charged": self.tokens_charged,
        }


@dataclass
class SolveTrace:
    """Ordered event log of one solve, serializable for audit and replay.

    ``labels`` is always exported empty; error-category labels are
    assigned by human annotators, never inferred here.
    """

    problem_id: str
    config: dict
    events: list[TraceEvent] = field(default_factory=list)
    accepted_steps: list[AcceptedStep] = field(default_factory=list)
    final_answer: CanonicalNumber | None = None
    outcome: Outcome | None = None
    error: str | None = None
    labels: list[str] = field(default_factory=list)

    def events_of(self, kind: EventKind) -> list[TraceEvent]:
        return [event for event in self.events if event.kind is kind]

    @property
    def evaluator_calls(self) -> int:
        """Real Evaluator calls: evaluated events that are not synthetic."""
        return sum(
            1
            for event in self.events_of(EventKind.EVALUATED)
            if event.payload.get("synthetic") is None
        )

    @property
    def tokens_spent(self) -> int:
        return sum(event.tokens_charged for event in self.events)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "config": self.config,
            "events": [event.to_dict() for event in self.events],
            "accepted_steps": [
                {
                    "index": step.index,
                    "kind": step.kind.value,
                    "text": step.text,
                    "fingerprint": step.fingerprint,
                    "score": step.score,
                    "forced": step.forced,
                }
                for step in self.accepted_steps
            ],
            "final_answer": str(self.final_answer) if self.final_answer else None,
            "outcome": self.outcome.value if self.outcome else None,
            "error": self.error,
            "labels": list(self.labels),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def step_decision(score: int, retries_so_far: int, config: SolverConfig) -> Decision:
    """Accept above the threshold, retry while retries remain, then force."""
    if score > config.accept_threshold:
        return Decision.ACCEPT
    if retries_so_far < config.max_retries_per_step:
        return Decision.RETRY
    return Decision.FORCED_ACCEPT


def solve(
    problem: Problem,
    config: SolverConfig,
    decomposer_backend,
    evaluator_backend,
) -> SolveTrace:
    """Run the full Decomposer-Evaluator loop on one problem.

    Deterministic for deterministic backends: identical (problem,
    config, scripts) yield a byte-identical trace. Backend failures end
    the solve with outcome ``backend_failure`` and the partial trace
    preserved.
    """
    ledger = BudgetLedger(limit=config.token_budget)
    cache = RejectionCache()
    trace = SolveTrace(problem_id=problem.id, config=config.to_dict())
    accepted = trace.accepted_steps
    hint: str | None = None
    retries = 0

    def emit(kind: EventKind, payload: dict, tokens: int = 0) -> None:
        trace.events.append(TraceEvent(kind, payload, tokens))

    def budget_stop() -> None:
        emit(EventKind.BUDGET_STOP, {"spent": ledger.spent_total, "limit": ledger.limit})
        trace.outcome = Outcome.BUDGET_EXHAUSTED

    while True:
        slot = len(accepted) + 1
        if ledger.exhausted():
            budget_stop()
            break

        prompt = build_decomposer_prompt(problem, accepted, hint)
        try:
            reply = decomposer_backend.complete(Role.DECOMPOSER, prompt, config.decomposer_params)
        except (BackendError, ScriptExhausted) as exc:
            trace.outcome = Outcome.BACKEND_FAILURE
            trace.error = f"decomposer: {exc}"
            break
        ledger.charge(Role.DECOMPOSER, reply)
        emit(
            EventKind.GENERATED,
            {"slot": slot, "attempt": retries, "raw": reply.raw_text},
            reply.total_tokens,
        )

        candidate: StepCandidate | None
        evaluation: Evaluation
        fp = ""
        try:
            candidate = parse_agent_step(reply.raw_text)
        except MalformedStep:
            candidate = None
            evaluation = Evaluation(0, MALFORMED_STEP_FEEDBACK)
            emit(
                EventKind.EVALUATED,
                {"score": 0, "feedback": evaluation.feedback, "fingerprint": "",
                 "synthetic": "malformed_step"},
            )
        else:
            if candidate.kind is StepKind.FINAL and candidate.unparseable_final:
                candidate = None
                evaluation = Evaluation(0, UNPARSEABLE_FINAL_FEEDBACK)
                emit(
                    EventKind.EVALUATED,
                    {"score": 0, "feedback": evaluation.feedback, "fingerprint": "",
                     "synthetic": "unparseable_final"},
                )
            else:
                fp = fingerprint(candidate.text)
                cache_hit = cache.check(fp) if config.cache_enabled else CacheDecision.MISS
                if cache_hit is not CacheDecision.MISS:
                    evaluation = synth_rejection(cache_hit)
                    emit(
                        EventKind.CACHE_REJECTED,
                        {"decision": cache_hit.value, "fingerprint": fp,
                         "score": evaluation.score, "feedback": evaluation.feedback},
                    )
                else:
                    if ledger.exhausted():
                        budget_stop()
                        break
                    evaluator_prompt = build_evaluator_prompt(problem, accepted, candidate)
                    try:
                        evaluator_reply = evaluator_backend.complete(
                            Role.EVALUATOR, evaluator_prompt, config.evaluator_params
                        )
                    except (BackendError, ScriptExhausted) as exc:
                        trace.outcome = Outcome.BACKEND_FAILURE
                        trace.error = f"evaluator: {exc}"
                        break
                    ledger.charge(Role.EVALUATOR, evaluator_reply)
                    try:
                        evaluation = parse_evaluation(evaluator_reply.raw_text)
                    except ProtocolError as exc:
                        trace.outcome = Outcome.BACKEND_FAILURE
                        trace.error = f"evaluator protocol violation: {exc}"
                        break
                    emit(
                        EventKind.EVALUATED,
                        {"score": evaluation.score, "feedback": evaluation.feedback,
                         "fingerprint": fp, "synthetic": None},
                        evaluator_reply.total_tokens,
                    )
                    if config.cache_enabled and evaluation.score <= config.cache_bad_threshold:
                        cache.record(fp, CacheOrigin.LOW_SCORE)

        decision = step_decision(evaluation.score, retries, config)
        if decision is Decision.RETRY:
            retries += 1
            emit(
                EventKind.RETRIED,
                {"slot": slot, "hint": evaluation.feedback, "retries_used": retries},
            )
            hint = evaluation.feedback or None
            continue

        forced = decision is Decision.FORCED_ACCEPT
        if candidate is None:
            # Force-accepting an unparseable generation: keep the raw text as a
            # degraded intermediate step so the slot can terminate.
            text = reply.raw_text.strip() or "(unparseable output)"
            candidate = StepCandidate(kind=StepKind.INTERMEDIATE, text=text, raw=reply.raw_text)
            fp = fingerprint(text)
        step = AcceptedStep(
            index=slot,
            kind=candidate.kind,
            text=candidate.text,
            fingerprint=fp,
            score=evaluation.score,
            forced=forced,
        )
        accepted.append(step)
        if config.cache_enabled:
            cache.record(fp, CacheOrigin.ACCEPTED_DUPLICATE_SOURCE)
        emit(
            EventKind.FORCED_ACCEPT if forced else EventKind.ACCEPTED,
            {"index": step.index, "kind": step.kind.value, "text": step.text,
             "fingerprint": step.fingerprint, "score": step.score},
        )
        hint = None
        retries = 0

        if step.kind is StepKind.FINAL:
            trace.final_answer = normalize_answer(step.text)
            emit(EventKind.FINISHED, {"final_answer": str(trace.final_answer)})
            trace.outcome = Outcome.SOLVED
            break
        if len(accepted) >= config.max_steps:
            emit(EventKind.STEP_LIMIT_STOP, {"steps": len(accepted)})
            trace.outcome = Outcome.STEP_LIMIT
            break

    return trace

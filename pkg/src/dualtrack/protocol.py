"""Wire protocol between the solver loop and its two agents.

The Decomposer and the Evaluator speak a rigid line-prefix format: the
Decomposer emits exactly one ``STEP:`` or ``FINAL_ANSWER:`` line per
turn, the Evaluator replies with a ``Score:`` line (0-3) and a
``Feedback:`` line. This module owns the prompt templates, the strict
parsers for both reply formats, and exact-decimal answer normalization.

Every function here is pure and deterministic: identical inputs produce
byte-identical outputs. The prefixes and templates are bit-exact
contract strings, documented in PROTOCOL.md.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

STEP_PREFIX = "STEP:"
FINAL_ANSWER_PREFIX = "FINAL_ANSWER:"
HINT_PREFIX = "HINT:"
SCORE_PREFIX = "Score:"
RAW_SCORE_PREFIX = "Raw score:"
FEEDBACK_PREFIX = "Feedback:"
GOLD_MARKER = "####"
PROBLEM_PREFIX = "Problem:"
HISTORY_HEADER = "Steps completed so far:"

MIN_SCORE = 0
MAX_SCORE = 3

SCORE_RUBRIC = (
    "3 (good step): mathematically correct, logically follows from the previous"
    " steps, and clearly helps move toward the final answer.",
    "2 (almost good): mostly correct and useful, but with a minor imprecision or"
    " missing detail that does not invalidate the step.",
    "1 (weak / partially correct): contains some relevant ideas but has an"
    " important mistake or omits a key part of the reasoning.",
    "0 (bad step): wrong math, wrong logic, irrelevant or seriously misleading,"
    " or effectively the same content as a previous step and therefore not"
    " progress.",
)

DECOMPOSER_SYSTEM_PROMPT = (
    "You solve grade-school math word problems one step at a time. Given the"
    " problem and the steps completed so far, reply with exactly one line:"
    " either 'STEP: <the next incremental step>' or, once the answer is"
    " reached, 'FINAL_ANSWER: <the numeric answer>'. If a HINT line is"
    " present, use it to correct the last rejected step."
)

EVALUATOR_SYSTEM_PROMPT = (
    "You grade one candidate reasoning step for a math word problem. Reply"
    " with exactly two lines: 'Score: <0-3>' and 'Feedback: <one short"
    " sentence>'."
)


class ProtocolError(ValueError):
    """Base class for violations of the agent wire protocol."""


class MalformedStep(ProtocolError):
    """Decomposer output contains no STEP: or FINAL_ANSWER: line."""


class MalformedEvaluation(ProtocolError):
    """Evaluator output contains no parseable score line."""


class ScoreOutOfRange(ProtocolError):
    """Evaluator score parsed but outside {0, 1, 2, 3}."""


class NoNumberFound(ProtocolError):
    """Text contains no numeric literal to normalize."""


class MissingMarker(ProtocolError):
    """GSM8K-style answer text has no '####' final-answer marker."""


class StepKind(str, Enum):
    INTERMEDIATE = "intermediate"
    FINAL = "final"


_LITERAL_RE = re.compile(r"^([+-]?)(\d*)(?:\.(\d*))?$")
_CURRENCY_RE = re.compile(r"[$€£¥,%]")
# A literal may not butt up against a preceding digit or dot, so the "15"
# in "3.15" or the minus in "3-15" are not misread as standalone numbers.
_NUMBER_RE = re.compile(r"(?<![\d.])-?(?:\d+(?:\.\d+)?|\.\d+)")


@dataclass(frozen=True)
class CanonicalNumber:
    """An exact decimal in canonical form, unique per numeric value.

    Canonical form: optional minus sign (never on zero), integer digits
    without leading zeros, and a fractional part only when nonzero, with
    trailing fractional zeros removed. "72" and "72.0" canonicalize to
    the same value.
    """

    text: str

    @classmethod
    def from_literal(cls, literal: str) -> "CanonicalNumber":
        match = _LITERAL_RE.match(literal.strip())
        if not match or not (match.group(2) or match.group(3)):
            raise NoNumberFound(f"not a numeric literal: {literal!r}")
        sign, int_part, frac_part = match.groups()
        int_part = (int_part or "").lstrip("0") or "0"
        frac_part = (frac_part or "").rstrip("0")
        text = int_part + (f".{frac_part}" if frac_part else "")
        if sign == "-" and text != "0":
            text = "-" + text
        return cls(text)

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class Problem:
    """One benchmark item: id, question text, optional gold answer."""

    id: str
    question: str
    gold_answer: CanonicalNumber | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("problem question must be non-empty")


@dataclass(frozen=True)
class StepCandidate:
    """One parsed reasoning step as proposed by the Decomposer."""

    kind: StepKind
    text: str
    raw: str
    unparseable_final: bool = False

    @property
    def wire_line(self) -> str:
        prefix = FINAL_ANSWER_PREFIX if self.kind is StepKind.FINAL else STEP_PREFIX
        return f"{prefix} {self.text}"


@dataclass(frozen=True)
class Evaluation:
    """Evaluator verdict: integer score in {0..3} plus a short hint."""

    score: int
    feedback: str = ""

    def __post_init__(self) -> None:
        if not MIN_SCORE <= self.score <= MAX_SCORE:
            raise ScoreOutOfRange(f"score {self.score} outside {MIN_SCORE}..{MAX_SCORE}")


@dataclass(frozen=True)
class AcceptedStep:
    """A step the solver appended to the history."""

    index: int
    kind: StepKind
    text: str
    fingerprint: str
    score: int
    forced: bool = False


HistoryStep = Union[AcceptedStep, StepCandidate, str]


def _step_texts(history: Sequence[HistoryStep]) -> list[str]:
    return [step if isinstance(step, str) else step.text for step in history]


def render_problem_block(question: str, step_texts: Sequence[str]) -> str:
    """Render the shared problem-plus-history block.

    Used verbatim by both prompt builders and by the training-data
    serializer, so training and inference see identical bytes.
    """
    lines = [f"{PROBLEM_PREFIX} {question}", HISTORY_HEADER]
    lines.extend(f"STEP {k}: {text}" for k, text in enumerate(step_texts, start=1))
    return "\n".join(lines)


def build_decomposer_prompt(
    problem: Problem,
    history: Sequence[HistoryStep] = (),
    hint: str | None = None,
) -> str:
    """Build the next-step request sent to the Decomposer.

    Emits the problem block followed, when a hint is present, by one
    trailing ``HINT:`` line. Pure function of its inputs.
    """
    block = render_problem_block(problem.question, _step_texts(history))
    if hint:
        block += f"\n{HINT_PREFIX} {hint}"
    return block


def build_evaluator_prompt(
    problem: Problem,
    history: Sequence[HistoryStep],
    candidate: StepCandidate,
) -> str:
    """Build the scoring request sent to the Evaluator.

    Contains the problem, the numbered history of accepted steps, the
    candidate step verbatim, the four-line 0-3 rubric, and the required
    ``Score:`` / ``Feedback:`` output format.
    """
    block = render_problem_block(problem.question, _step_texts(history))
    rubric = "\n".join(SCORE_RUBRIC)
    return (
        f"{block}\n"
        f"Candidate step:\n"
        f"{candidate.wire_line}\n"
        f"Rate the candidate step on this scale:\n"
        f"{rubric}\n"
        f"Respond with exactly two lines:\n"
        f"{SCORE_PREFIX} <0-3>\n"
        f"{FEEDBACK_PREFIX} <one sentence>"
    )


def parse_agent_step(raw: str) -> StepCandidate:
    """Parse a Decomposer reply into a StepCandidate.

    Scans lines top-down; the first line starting (after leading
    whitespace) with ``STEP:`` or ``FINAL_ANSWER:`` and carrying a
    non-empty body becomes the candidate. All other lines are discarded.
    A FINAL candidate whose body has no numeric literal is flagged
    ``unparseable_final`` rather than rejected here.

    Raises:
        MalformedStep: no line carries either prefix.
    """
    if not raw:
        raise MalformedStep("empty decomposer output")
    for line in raw.splitlines():
        stripped = line.lstrip()
        if stripped.startswith(STEP_PREFIX):
            kind, body = StepKind.INTERMEDIATE, stripped[len(STEP_PREFIX):]
        elif stripped.startswith(FINAL_ANSWER_PREFIX):
            kind, body = StepKind.FINAL, stripped[len(FINAL_ANSWER_PREFIX):]
        else:
            continue
        text = body.strip()
        if not text:
            continue
        unparseable = False
        if kind is StepKind.FINAL:
            try:
                normalize_answer(text)
            except NoNumberFound:
                unparseable = True
        return StepCandidate(kind=kind, text=text, raw=line, unparseable_final=unparseable)
    raise MalformedStep("no line starting with STEP: or FINAL_ANSWER:")


def _parse_score_payload(payload: str) -> int:
    value = payload.strip()
    if "/" in value:
        value = value.split("/", 1)[0].strip()
    # Decimal scores such as "0.0" are truncated to their integer part.
    value = value.split(".", 1)[0].strip()
    try:
        score = int(value)
    except ValueError:
        raise MalformedEvaluation(f"unparseable score payload: {payload!r}") from None
    if not MIN_SCORE <= score <= MAX_SCORE:
        raise ScoreOutOfRange(f"score {score} outside {MIN_SCORE}..{MAX_SCORE}")
    return score


def parse_evaluation(raw: str) -> Evaluation:
    """Parse an Evaluator reply into an Evaluation.

    Accepts ``Score: <n>``, ``Raw score: <n>/3``, and ``Raw score:
    <n>.0/3`` score lines; the first such line wins. Feedback is taken
    from the first ``Feedback:`` line and defaults to empty.

    Raises:
        MalformedEvaluation: no score line found, or its payload is not a number.
        ScoreOutOfRange: the parsed integer is outside {0..3}.
    """
    if not raw:
        raise MalformedEvaluation("empty evaluator output")
    score: int | None = None
    feedback: str | None = None
    for line in raw.splitlines():
        stripped = line.strip()
        if score is None:
            if stripped.startswith(SCORE_PREFIX):
                score = _parse_score_payload(stripped[len(SCORE_PREFIX):])
                continue
            if stripped.startswith(RAW_SCORE_PREFIX):
                score = _parse_score_payload(stripped[len(RAW_SCORE_PREFIX):])
                continue
        if feedback is None and stripped.startswith(FEEDBACK_PREFIX):
            feedback = stripped[len(FEEDBACK_PREFIX):].strip()
    if score is None:
        raise MalformedEvaluation("no Score: or Raw score: line found")
    return Evaluation(score=score, feedback=feedback or "")


def normalize_answer(text: str) -> CanonicalNumber:
    """Extract and canonicalize the last numeric literal in ``text``.

    Currency symbols, commas, and percent signs are stripped before
    extraction; surrounding words are ignored. Models often prepend
    units or restate the question, so the last literal is the answer.

    Raises:
        NoNumberFound: the text contains no numeric literal.
    """
    cleaned = _CURRENCY_RE.sub("", text)
    literals = _NUMBER_RE.findall(cleaned)
    if not literals:
        raise NoNumberFound(f"no numeric literal in {text!r}")
    return CanonicalNumber.from_literal(literals[-1])


def extract_gold_answer(gsm8k_answer: str) -> CanonicalNumber:
    """Pull the gold answer out of a GSM8K-style worked solution.

    Finds the line containing the ``####`` marker and normalizes the
    remainder of that line.

    Raises:
        MissingMarker: no ``####`` marker present.
    """
    for line in gsm8k_answer.splitlines():
        if GOLD_MARKER in line:
            _, _, rest = line.partition(GOLD_MARKER)
            return normalize_answer(rest)
    raise MissingMarker(f"no {GOLD_MARKER!r} marker in answer text")

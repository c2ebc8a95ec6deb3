"""Training-data reconstruction for trigger-conditioned self-correction.

A raw sample ``(u, v)`` is split into paragraph steps. One step ``j`` is
rewritten into a faulty version, and the output is rebuilt as::

    steps before j | rewritten step | trigger | prompt | diagnosis | correction | steps after j

The trigger token (``<INTRA>`` or ``<INTER>``) is excluded from the loss, as
is the input ``u``. Everything else in the output is trained on.

Pieces are joined as they appear in the hand-written examples: steps are
separated by a blank line, the trigger sits alone on its line directly under
the rewritten step, the prompt and the diagnosis follow on the next lines, and
the correction starts after another blank line.
"""
from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, GrammarError, RewriteError, TraceFormatError, ValidationError
from .spectral import Level

log = logging.getLogger(__name__)

STEP_DELIMITER = "\n\n"
TRIGGERS = {Level.INTRA: "<INTRA>", Level.INTER: "<INTER>"}
REWRITE_LEVELS = (Level.INTRA, Level.INTER)
ROLE_ORDER = ("prefix", "rewritten", "trigger", "prompt", "diagnosis", "correction", "suffix")
# text placed between consecutive roles
_JOINS = {
    ("prefix", "prefix"): STEP_DELIMITER,
    ("prefix", "rewritten"): STEP_DELIMITER,
    ("rewritten", "trigger"): STEP_DELIMITER,
    ("trigger", "prompt"): "\n",
    ("prompt", "diagnosis"): "\n",
    ("diagnosis", "correction"): STEP_DELIMITER,
    ("correction", "suffix"): STEP_DELIMITER,
    ("suffix", "suffix"): STEP_DELIMITER,
}
_GRAMMAR = re.compile(r"(P)*RTXDC(S)*")
_ROLE_CODE = dict(zip(ROLE_ORDER, "PRTXDCS"))


def _level(level) -> Level:
    level = Level(level)
    if level not in REWRITE_LEVELS:
        raise ValidationError(f"reconstruction covers intra and inter levels, got {level.value}")
    return level


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def segment(v: str) -> list[str]:
    """Split on blank-line delimiters, dropping empty pieces."""
    return [piece for piece in v.split(STEP_DELIMITER) if piece]


@dataclass(frozen=True)
class ReasoningSample:
    input: str
    output: str
    steps: tuple[str, ...]
    sample_id: str = ""

    @classmethod
    def from_text(cls, u: str, v: str, sample_id: str = "") -> "ReasoningSample":
        return cls(u, v, tuple(segment(v)), sample_id)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def canonicalized(self) -> bool:
        """True when rejoining the steps does not give back ``output`` exactly."""
        return STEP_DELIMITER.join(self.steps) != self.output


# ---------------------------------------------------------------------------
# critical step choice
# ---------------------------------------------------------------------------

POLICIES = ("middle", "uniform", "explicit")


def middle_weights(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate steps (1-based) and triangular weights peaking near K/2."""
    if K < 2:
        raise ValidationError("need at least two steps")
    if K <= 3:
        return np.array([2]), np.array([1.0])
    j = np.arange(2, K)
    w = (np.minimum(j - 1, K - j) + 1).astype(np.float64)
    return j, w / w.sum()


def choose_critical_steps(
    sample: ReasoningSample | int,
    policy: str = "middle",
    rng: np.random.Generator | None = None,
    count: int = 1,
    explicit: Sequence[int] | None = None,
) -> list[int]:
    """1-based indices of steps to perturb, sorted ascending."""
    K = sample if isinstance(sample, (int, np.integer)) else sample.n_steps
    if K < 2:
        raise ValidationError(f"sample has {K} step(s), at least two are needed")
    if policy == "explicit":
        if not explicit:
            raise ValidationError("explicit policy needs indices")
        out = sorted({int(j) for j in explicit})
        if out[0] < 1 or out[-1] > K:
            raise ValidationError(f"explicit step indices must lie in 1..{K}")
        return out
    if rng is None:
        raise ValidationError(f"{policy!r} policy needs a seeded generator")
    if policy == "uniform":
        cand, p = np.arange(1, K + 1), np.full(K, 1.0 / K)
    elif policy == "middle":
        cand, p = middle_weights(K)
    else:
        raise ValidationError(f"policy must be one of {POLICIES}, got {policy!r}")
    n = min(count, cand.size)
    return sorted(int(j) for j in rng.choice(cand, size=n, replace=False, p=p))


# ---------------------------------------------------------------------------
# rewriters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rewrite:
    text: str
    rule: str  # error_type for intra, loop theme for inter
    span: str  # the altered text, quoted in the diagnosis


class Rewriter(Protocol):
    deterministic: bool

    def rewrite(self, sample: ReasoningSample, j: int, level: Level, rng: np.random.Generator) -> Rewrite:
        ...


_SIGN = re.compile(r"(\S+) ([+-]) (\S+)")
_NONCOMMUTING = re.compile(r"([\w.()]+) ([/^-]) ([\w.()]+)")
_PLUS_MINUS = re.compile(r"±|\\pm")

INTRA_RULES = ("sign_flip", "operand_swap", "dropped_case")
ERROR_TYPES = {"sign_flip": "sign_error", "operand_swap": "algebra_simplification_error",
               "dropped_case": "dropped_case"}
LOOP_THEMES = ("mod_checks", "bounds", "symmetry_observations", "equivalent_reformulations")
_LOOP_LINES = {
    "mod_checks": (
        "Maybe a residue check will narrow things down. Working modulo a small number again, "
        "every case still looks possible, so this does not prune anything.",
        "Let me try a different modulus instead. The residues come out permissive once more, "
        "and I am back to the same set of candidates.",
    ),
    "bounds": (
        "I could bound the quantities first. The bound I get is the same one I had before, "
        "so the search space has not shrunk.",
        "Perhaps a sharper inequality helps. Tightening it only restates the earlier bound "
        "in a slightly different form.",
    ),
    "symmetry_observations": (
        "The expression looks symmetric, so swapping the roles of the variables might help. "
        "After the swap the condition reads exactly as before.",
        "Maybe a reflection reduces the cases. It maps the problem back onto itself "
        "without removing any case.",
    ),
    "equivalent_reformulations": (
        "Let me rewrite the condition in another equivalent form. This is the same constraint "
        "with the terms moved around.",
        "Another rearrangement might expose structure. It again reduces to the statement "
        "I started from.",
    ),
}


def sign_flip(step: str) -> tuple[str, str] | None:
    m = _SIGN.search(step)
    if m is None:
        return None
    a, sign, b = m.groups()
    flipped = f"{a} {'+' if sign == '-' else '-'} {b}"
    return step[: m.start()] + flipped + step[m.end():], flipped


def operand_swap(step: str) -> tuple[str, str] | None:
    for m in _NONCOMMUTING.finditer(step):
        a, op, b = m.groups()
        if a != b:
            swapped = f"{b} {op} {a}"
            return step[: m.start()] + swapped + step[m.end():], swapped
    return None


def dropped_case(step: str) -> tuple[str, str]:
    m = _PLUS_MINUS.search(step)
    if m is not None:
        return step[: m.start()] + "+" + step[m.end():], step[m.start(): m.end()]
    note = "Only the positive case can occur here, so the other case needs no check."
    return step.rstrip() + " " + note, note


_RULES = {"sign_flip": sign_flip, "operand_swap": operand_swap}


@dataclass
class RuleRewriter:
    """Deterministic textual perturbations, seeded per sample.

    Intra rewrites apply one of sign flip, operand swap or dropped case
    (picked at random among the applicable ones; dropped case always applies).
    Inter rewrites keep the step and append ``loop_paragraphs`` paragraphs of
    circular reasoning on a random theme.
    """

    loop_paragraphs: int = 3
    rules: tuple[str, ...] = INTRA_RULES
    deterministic: bool = True

    def __post_init__(self):
        if self.loop_paragraphs not in (3, 4, 5):
            raise ConfigError("loop_paragraphs must be 3, 4 or 5")
        unknown = set(self.rules) - set(INTRA_RULES)
        if unknown or not self.rules:
            raise ConfigError(f"unknown or empty intra rule set: {sorted(unknown)}")

    def rewrite(self, sample: ReasoningSample, j: int, level: Level, rng: np.random.Generator) -> Rewrite:
        level = _level(level)
        step = sample.steps[j - 1]
        if level is Level.INTRA:
            options = []
            for name in self.rules:
                result = dropped_case(step) if name == "dropped_case" else _RULES[name](step)
                if result is not None and result[0] != step:
                    options.append((name, result))
            if not options:
                raise RewriteError(f"no intra rule changes step {j}")
            name, (text, span) = options[int(rng.integers(len(options)))]
            return Rewrite(text, ERROR_TYPES[name], span)
        theme = LOOP_THEMES[int(rng.integers(len(LOOP_THEMES)))]
        lines = _LOOP_LINES[theme]
        paragraphs = [lines[i % 2] for i in range(self.loop_paragraphs - 1)]
        paragraphs.append("I keep circling back to the same checks without making progress.")
        loop = STEP_DELIMITER.join(paragraphs)
        return Rewrite(step + STEP_DELIMITER + loop, theme, loop)


def prompt_fixture(level: Level | str) -> str:
    """The reconstruction instruction prompt for a level, as shipped with the package."""
    name = f"{_level(level).value}_reconstruction.txt"
    return resources.files("neuromon.prompts").joinpath(name).read_text(encoding="utf-8")


# appended to the fixture prompt: the assembler inserts the trigger and the
# template itself, so the remote model only returns the altered step
REMOTE_OUTPUT_CONTRACT = (
    "### OUTPUT CONTRACT\n"
    "Return ONLY the rewritten text of the step marked <TARGET_STEP>. "
    "Do not include the trigger block, the other steps, or any commentary."
)


@dataclass
class RemoteRewriter:
    """Chat-completion rewriter over HTTP.

    The bearer token is read from the environment variable named by
    ``token_env`` at request time; it is never stored on the instance or logged.
    """

    endpoint: str
    model: str = "rewriter"
    token_env: str = "NEUROMON_REWRITER_TOKEN"
    retries: int = 2
    backoff: float = 0.5
    timeout: float = 30.0
    max_in_flight: int = 4
    loop_paragraphs: int = 3
    deterministic: bool = False

    def __post_init__(self):
        if not self.endpoint:
            raise ConfigError("remote rewriter needs an endpoint; set [reconstruct] endpoint")
        if not self.endpoint.startswith(("http://", "https://")):
            raise ConfigError(f"endpoint must be an http(s) URL, got {self.endpoint!r}")
        if self.retries < 0 or self.max_in_flight < 1:
            raise ConfigError("retries must be >= 0 and max_in_flight >= 1")

    def messages(self, sample: ReasoningSample, j: int, level: Level, rng: np.random.Generator) -> tuple[list, str]:
        level = _level(level)
        if level is Level.INTRA:
            control_key = "error_type"
            control = ERROR_TYPES[INTRA_RULES[int(rng.integers(len(INTRA_RULES)))]]
            fields = f"   error_length: short\n   error_type: {control}\n"
        else:
            control_key = "loop_theme"
            control = LOOP_THEMES[int(rng.integers(len(LOOP_THEMES)))]
            fields = f"   loop_length_paragraphs: {self.loop_paragraphs}\n   loop_theme: {control}\n"
        user = (
            f"<PROBLEM>\n{sample.input}\n</PROBLEM>\n"
            f"<REFERENCE_REASONING>\n{STEP_DELIMITER.join(sample.steps)}\n</REFERENCE_REASONING>\n"
            f"<CONTROL>\n{fields}   style: LRM_natural_first_person\n   </CONTROL>\n"
            f"<TARGET_STEP index=\"{j}\">\n{sample.steps[j - 1]}\n</TARGET_STEP>"
        )
        system = prompt_fixture(level) + "\n\n" + REMOTE_OUTPUT_CONTRACT
        log.debug("rewrite request for %s step %d with %s=%s", level.value, j, control_key, control)
        return [{"role": "system", "content": system}, {"role": "user", "content": user}], control

    def _post(self, body: bytes) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def rewrite(self, sample: ReasoningSample, j: int, level: Level, rng: np.random.Generator) -> Rewrite:
        messages, control = self.messages(sample, j, level, rng)
        body = json.dumps({"model": self.model, "messages": messages, "temperature": 0}).encode("utf-8")
        last = None
        for attempt in range(self.retries + 1):
            try:
                reply = self._post(body)
                text = reply["choices"][0]["message"]["content"]
                if not isinstance(text, str) or not text.strip():
                    raise RewriteError("empty completion")
                text = text.strip("\n")
                return Rewrite(text, control, text)
            except (urllib.error.URLError, OSError, KeyError, IndexError, TypeError,
                    json.JSONDecodeError, RewriteError) as exc:
                # exc text never contains the token: it only lives in the request headers
                last = f"{type(exc).__name__}: {exc}"
                log.warning("rewrite attempt %d/%d failed: %s", attempt + 1, self.retries + 1, last)
                if attempt < self.retries and self.backoff > 0:
                    time.sleep(self.backoff * 2**attempt)
        raise RewriteError(f"remote rewrite failed after {self.retries + 1} attempts ({last})")


# ---------------------------------------------------------------------------
# templates and assembly
# ---------------------------------------------------------------------------

PLACEHOLDER = "[placeholder]"


@dataclass(frozen=True)
class Template:
    """Prompt, diagnosis and correction text for one level.

    ``diagnosis`` and ``correction`` are format strings; available fields are
    ``span``, ``rule``, ``original`` and ``rewritten``.
    """

    prompt: str
    diagnosis: str
    correction: str

    def __post_init__(self):
        for name in ("prompt", "diagnosis", "correction"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValidationError(f"template is missing its {name} text")
            if STEP_DELIMITER in value and name != "correction":
                raise ValidationError(f"template {name} must not contain a blank line")

    def render(self, **fields) -> tuple[str, str, str]:
        try:
            return self.prompt, self.diagnosis.format(**fields), self.correction.format(**fields)
        except (KeyError, IndexError) as exc:
            raise ValidationError(f"template refers to unknown field {exc}") from None


# prompts are transcribed from the reconstruction instructions; diagnosis and
# correction are schematic stand-ins that a remote rewriter would fill in
DEFAULT_TEMPLATES = {
    Level.INTRA: Template(
        prompt="[FAILURE_INTRA] A key reasoning error surfaced a few steps back. I should identify "
               "the mistaken span, briefly analyze it, and correct it before continuing.",
        diagnosis='- **error span**: "{span}"\n'
                  "- **analysis**: " + PLACEHOLDER + " The step above has an error of type "
                  "{rule}; its claim does not follow from the previous steps.",
        correction=PLACEHOLDER + " Back up and redo the step correctly:\n{original}",
    ),
    Level.INTER: Template(
        prompt="[FAILURE_INTER] I'm stuck in an inter-step loop: I keep revisiting the same near "
               "equivalent checks and switching between them whenever one stalls, without any "
               "progress. Let me summarize the loop, then pivot to a genuinely different route.",
        diagnosis="- **past attempts summary:** " + PLACEHOLDER + " I kept repeating {rule} moves.\n"
                  "- **problem-grounded analysis:** " + PLACEHOLDER + " None of those moves "
                  "changes the core constraint, so repeating them cannot make progress.",
        correction=PLACEHOLDER + " Pivot: return to the last solid step and continue from there.",
    ),
}


def _quote_span(span: str, limit: int = 200) -> str:
    """Single-line excerpt of the altered text for the diagnosis."""
    flat = " ".join(span.split())
    return flat if len(flat) <= limit else flat[: limit - 3] + "..."


@dataclass(frozen=True)
class Segment:
    role: str
    start: int
    end: int  # exclusive


@dataclass(frozen=True)
class ReconstructedSample:
    sample_id: str
    input: str
    output: str
    segments: tuple[Segment, ...]
    mask: tuple[tuple[int, int], ...]  # character ranges of ``output`` that carry loss
    level: Level
    j: int
    rule: str = ""
    canonicalized: bool = False

    def text_of(self, role: str) -> list[str]:
        return [self.output[s.start:s.end] for s in self.segments if s.role == role]

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "input": self.input,
            "output": self.output,
            "segments": [[s.role, s.start, s.end] for s in self.segments],
            "mask": [list(r) for r in self.mask],
            "level": self.level.value,
            "j": self.j,
            "rule": self.rule,
            "canonicalized": self.canonicalized,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ReconstructedSample":
        try:
            return cls(
                str(record["id"]), record["input"], record["output"],
                tuple(Segment(r, int(a), int(b)) for r, a, b in record["segments"]),
                tuple((int(a), int(b)) for a, b in record["mask"]),
                Level(record["level"]), int(record["j"]), record.get("rule", ""),
                bool(record.get("canonicalized", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"malformed corpus record: {exc}") from None


def assemble(sample: ReasoningSample, j: int, rewrite: Rewrite | str, level: Level | str,
             templates: dict | None = None) -> ReconstructedSample:
    """Build the output text, role spans and loss mask for one perturbation."""
    level = _level(level)
    if not 1 <= j <= sample.n_steps:
        raise ValidationError(f"step index {j} outside 1..{sample.n_steps}")
    if isinstance(rewrite, str):
        rewrite = Rewrite(rewrite, "", rewrite)
    if not rewrite.text or rewrite.text == sample.steps[j - 1]:
        raise RewriteError("rewritten step is empty or identical to the original")
    templates = {**DEFAULT_TEMPLATES, **({Level(k): v for k, v in (templates or {}).items()})}
    template = templates.get(level)
    if not isinstance(template, Template):
        raise ValidationError(f"no template for level {level.value}")
    prompt, diagnosis, correction = template.render(
        span=_quote_span(rewrite.span), rule=rewrite.rule.replace("_", " ") or "mistake",
        original=sample.steps[j - 1], rewritten=rewrite.text,
    )
    pieces = [("prefix", s) for s in sample.steps[: j - 1]]
    pieces += [("rewritten", rewrite.text), ("trigger", TRIGGERS[level]), ("prompt", prompt),
               ("diagnosis", diagnosis), ("correction", correction)]
    pieces += [("suffix", s) for s in sample.steps[j:]]
    parts, segments, pos, prev = [], [], 0, None
    for role, text in pieces:
        if prev is not None:
            join = _JOINS[(prev, role)]
            parts.append(join)
            pos += len(join)
        segments.append(Segment(role, pos, pos + len(text)))
        parts.append(text)
        pos += len(text)
        prev = role
    output = "".join(parts)
    trig = next(s for s in segments if s.role == "trigger")
    mask = tuple(r for r in ((0, trig.start), (trig.end, len(output))) if r[1] > r[0])
    result = ReconstructedSample(sample.sample_id, sample.input, output, tuple(segments), mask,
                                 level, j, rewrite.rule, sample.canonicalized)
    validate_sample(result)
    return result


def validate_sample(sample: ReconstructedSample) -> None:
    """Check role order, join text, single trigger placement and the mask law."""
    segs = sample.segments
    codes = "".join(_ROLE_CODE.get(s.role, "?") for s in segs)
    if not _GRAMMAR.fullmatch(codes):
        raise GrammarError(f"segment roles {codes!r} do not follow the reconstruction layout")
    out = sample.output
    if segs[0].start != 0 or segs[-1].end != len(out):
        raise GrammarError("segments must cover the output from start to end")
    for a, b in zip(segs, segs[1:]):
        if out[a.end:b.start] != _JOINS[(a.role, b.role)]:
            raise GrammarError(f"unexpected text between {a.role} and {b.role} at {a.end}")
    for s in segs:
        if s.end <= s.start:
            raise GrammarError(f"empty {s.role} segment at {s.start}")
    trig = next(s for s in segs if s.role == "trigger")
    token = TRIGGERS[sample.level]
    if out[trig.start:trig.end] != token:
        raise GrammarError(f"trigger segment does not hold {token!r}")
    if out.count(token) != 1:
        raise GrammarError(f"{token!r} occurs {out.count(token)} times in the output")
    other = TRIGGERS[Level.INTER if sample.level is Level.INTRA else Level.INTRA]
    if other in out:
        raise GrammarError(f"output also contains the {other!r} trigger")
    n_prefix = sum(s.role == "prefix" for s in segs)
    if n_prefix != sample.j - 1:
        raise GrammarError(f"{n_prefix} prefix steps for perturbed step {sample.j}")
    expected = tuple(r for r in ((0, trig.start), (trig.end, len(out))) if r[1] > r[0])
    if tuple(tuple(r) for r in sample.mask) != expected:
        raise GrammarError("loss mask must cover the whole output except the trigger")


def parse_output(output: str, level: Level | str, n_prefix: int, templates: dict | None = None) -> list[Segment]:
    """Recover role spans from output text alone, given the number of prefix steps.

    The prompt line is the fixed template text and the diagnosis runs to the
    first blank line after it. The correction is taken to run up to the first
    later blank line unless the template's correction spans several
    paragraphs, in which case pass ``templates`` so its paragraph count is used.
    """
    level = _level(level)
    token = TRIGGERS[level]
    if output.count(token) != 1:
        raise GrammarError(f"expected exactly one {token!r}")
    t0 = output.index(token)
    t1 = t0 + len(token)
    head = output[:t0]
    if not head.endswith(STEP_DELIMITER):
        raise GrammarError("trigger must follow the rewritten step after a blank line")
    head = head[: -len(STEP_DELIMITER)]
    steps = head.split(STEP_DELIMITER)
    if len(steps) < n_prefix + 1:
        raise GrammarError("fewer steps before the trigger than expected")
    segs, pos = [], 0
    for i in range(n_prefix):
        segs.append(Segment("prefix", pos, pos + len(steps[i])))
        pos += len(steps[i]) + len(STEP_DELIMITER)
    segs.append(Segment("rewritten", pos, len(head)))
    segs.append(Segment("trigger", t0, t1))
    if output[t1:t1 + 1] != "\n":
        raise GrammarError("trigger must sit on its own line")
    p0 = t1 + 1
    p1 = output.find("\n", p0)
    if p1 < 0:
        raise GrammarError("missing prompt line")
    segs.append(Segment("prompt", p0, p1))
    d0 = p1 + 1
    d1 = output.find(STEP_DELIMITER, d0)
    if d1 < 0:
        raise GrammarError("missing correction after the diagnosis")
    segs.append(Segment("diagnosis", d0, d1))
    c0 = d1 + len(STEP_DELIMITER)
    paras = 1
    if templates and level in templates:
        paras = templates[level].correction.count(STEP_DELIMITER) + 1
    pieces = output[c0:].split(STEP_DELIMITER)
    if len(pieces) < paras:
        raise GrammarError("correction is shorter than its template")
    c1 = c0 + len(STEP_DELIMITER.join(pieces[:paras]))
    segs.append(Segment("correction", c0, c1))
    pos = c1
    for piece in pieces[paras:]:
        pos += len(STEP_DELIMITER)
        segs.append(Segment("suffix", pos, pos + len(piece)))
        pos += len(piece)
    return segs


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class ReconstructConfig:
    policy: str = "middle"
    variants: int = 1
    mix: tuple[float, float] = (1.0, 1.0)  # intra : inter
    seed: int = 0
    explicit: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.variants < 1:
            raise ConfigError("variants must be at least 1")
        if len(self.mix) != 2 or min(self.mix) < 0 or sum(self.mix) <= 0:
            raise ConfigError("mix must be two non-negative weights, not both zero")


@dataclass
class CorpusReport:
    per_level: Counter = field(default_factory=Counter)
    skipped: Counter = field(default_factory=Counter)
    canonicalized: int = 0
    deterministic: bool = True

    def to_dict(self) -> dict:
        return {
            "samples": sum(self.per_level.values()),
            "per_level": dict(sorted(self.per_level.items())),
            "skipped": dict(sorted(self.skipped.items())),
            "canonicalized": self.canonicalized,
            "deterministic": self.deterministic,
        }


def _sample_rng(seed: int, index: int, variant: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, variant])


def reconstruct_corpus(
    samples: Sequence[ReasoningSample],
    rewriter: Rewriter,
    config: ReconstructConfig | None = None,
    templates: dict | None = None,
) -> tuple[list[ReconstructedSample], CorpusReport]:
    """Perturb every sample ``variants`` times; failures are skipped and counted."""
    config = config or ReconstructConfig()
    if not samples:
        raise ValidationError("no samples to reconstruct")
    report = CorpusReport(deterministic=bool(getattr(rewriter, "deterministic", False)))
    p = np.asarray(config.mix, dtype=np.float64) / sum(config.mix)
    jobs = []
    for index, sample in enumerate(samples):
        if sample.n_steps < 2:
            report.skipped["too_few_steps"] += 1
            continue
        if any(t in sample.output or t in sample.input for t in TRIGGERS.values()):
            report.skipped["trigger_in_text"] += 1
            continue
        rng = _sample_rng(config.seed, index, 0)
        try:
            steps = choose_critical_steps(sample, config.policy, rng, config.variants, config.explicit)
        except ValidationError:
            report.skipped["bad_step_index"] += 1
            continue
        for variant, j in enumerate(steps):
            vrng = _sample_rng(config.seed, index, variant + 1)
            level = REWRITE_LEVELS[int(vrng.choice(2, p=p))]
            jobs.append((index, variant, sample, j, level, vrng))

    def run(job):
        index, variant, sample, j, level, vrng = job
        for attempt in range(2):
            try:
                rewrite = rewriter.rewrite(sample, j, level, vrng)
            except RewriteError:
                return job, None, "rewrite_failed"
            if rewrite.text and rewrite.text != sample.steps[j - 1]:
                break
        else:
            return job, None, "unchanged_rewrite"
        try:
            return job, assemble(sample, j, rewrite, level, templates), None
        except (GrammarError, RewriteError):
            return job, None, "grammar_violation"

    workers = getattr(rewriter, "max_in_flight", 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    out = []
    for (index, variant, sample, j, level, _), result, reason in results:
        if result is None:
            report.skipped[reason] += 1
            continue
        result = replace(result, sample_id=f"{sample.sample_id or index}:{variant}")
        report.per_level[level.value] += 1
        report.canonicalized += int(result.canonicalized)
        out.append(result)
    return out, report


def corpus_bytes(samples: Iterable[ReconstructedSample]) -> bytes:
    lines = [json.dumps(s.to_record(), ensure_ascii=False, sort_keys=True) for s in samples]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def emit_corpus(samples: Sequence[ReconstructedSample], path: str | os.PathLike,
                report: CorpusReport | None = None) -> Path:
    """Write the corpus as JSON lines and, if given, the report next to it."""
    from .classifier import atomic_write_bytes

    if not samples:
        raise ValidationError("refusing to write an empty corpus")
    path = Path(path)
    atomic_write_bytes(path, corpus_bytes(samples))
    if report is not None:
        atomic_write_bytes(report_path(path), (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    return path


def report_path(corpus: str | os.PathLike) -> Path:
    corpus = Path(corpus)
    return corpus.with_name(corpus.name + ".report.json")


def read_corpus(path: str | os.PathLike) -> list[ReconstructedSample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"line {lineno}: {exc.msg}") from None
        try:
            sample = ReconstructedSample.from_record(record)
            validate_sample(sample)
        except (TraceFormatError, GrammarError) as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from None
        out.append(sample)
    return out


def read_raw_samples(path: str | os.PathLike) -> list[ReasoningSample]:
    """JSON lines with ``input`` and ``output`` fields (``id`` optional)."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            u, v = record["input"], record["output"]
            if not isinstance(u, str) or not isinstance(v, str):
                raise TypeError("input and output must be strings")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from None
        out.append(ReasoningSample.from_text(u, v, str(record.get("id", ""))))
    return out


_SYNTH_STEPS = (
    "Let x = {a} - y and substitute into the constraint.",
    "Then {a} x + {b} = {c}, so x = ({c} - {b}) / {a}.",
    "Squaring gives x^2 = {d}, hence x = ±{e}.",
    "Checking the bound, {b} / {a} must stay below {c}.",
    "Combining the two cases gives {f} solutions in total.",
    "Plugging back in confirms that y = {a} - x works.",
    "So the answer is {f}.",
)


def synthetic_samples(n: int, seed: int = 0) -> list[ReasoningSample]:
    """Seeded toy math traces with 2..7 steps for tests and demos."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        K = int(rng.integers(2, len(_SYNTH_STEPS) + 1))
        vals = {k: int(rng.integers(2, 50)) for k in "abcdef"}
        steps = [_SYNTH_STEPS[s].format(**vals) for s in sorted(rng.choice(len(_SYNTH_STEPS), K, replace=False))]
        u = f"Problem {i}: solve for x given {vals['a']} and {vals['c']}."
        out.append(ReasoningSample.from_text(u, STEP_DELIMITER.join(steps), f"s{i}"))
    return out

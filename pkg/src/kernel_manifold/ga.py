"""LLM-guided genetic search over kernel expression strings.

The proposer is pluggable: :class:`MockProposer` is a seeded rule-based stand-in
with classic subtree crossover and point mutation; :class:`LLMProposer` sends
the prompt templates below to a chat-completions endpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .bo import SearchTrace
from .errors import ConfigurationError, InvalidArgumentError, ParseError, TemplateError, TransportError
from .gp import CachedObjective, Dataset, FitBudget
from .grammar import (
    DEFAULT_BASES,
    KernelExpr,
    Leaf,
    Product,
    Sum,
    canonicalize,
    generate_library,
    parse_expr,
    print_expr,
)

PROMPTS = {
    "system_unrestricted": (
        "You are an expert in Gaussian processes and kernel design.\n"
        "Available base kernels: SE (Squared Exponential/RBF), PER (Periodic), RQ (Rational Quadratic)\n"
        "Available operators: + (addition), * (multiplication)\n"
        "Your task is to propose kernel expressions that maximize the log marginal likelihood (LML) on the observed data.\n"
        "Higher LML values indicate better fit to the data.\n"
        "IMPORTANT: Output format must be:\n"
        "Kernel: <kernel_expression>\n"
        "Analysis: <your reasoning>\n"
        "Kernel expressions must use parentheses for compound operations, e.g., (SE + PER), (SE * RQ), ((SE + PER) * RQ)"
    ),
    "system_depth": (
        "You are an expert in Gaussian processes and kernel design. \n"
        "Available base kernels: SE (Squared Exponential/RBF), PER (Periodic), RQ (Rational Quadratic)\n"
        "Available operators: + (addition), * (multiplication)\n"
        "Your task is to propose kernel expressions that maximize the log marginal likelihood (LML) on the observed data.\n"
        "Higher LML values indicate better fit to the data.\n"
        "CRITICAL CONSTRAINT: The kernel expression depth must not exceed {max depth}.\n"
        "- Depth 1: Single base kernel (e.g., SE, PER, RQ)\n"
        "- Depth 2: One operation (e.g., (SE + PER), (SE * RQ))\n"
        "- Depth 3: Two operations (e.g., ((SE + PER) * RQ), (SE + (PER * RQ)))\n"
        "IMPORTANT: Output format must be:\n"
        "Kernel: <kernel_expression>\n"
        "Analysis: <your reasoning>\n"
        "Kernel expressions must use parentheses for compound operations. Keep expressions simple and within the depth limit!"
    ),
    "crossover": (
        "You are given two parent kernels and their LML fitness scores:\n"
        "Parent 1: {parent1} (LML: {fitness1:.3f})\n"
        "Parent 2: {parent2} (LML: {fitness2:.3f})\n"
        "Please propose a new kernel that combines the strengths of both parents and may achieve higher LML.\n"
        "You can use operators: {operators}\n"
        "{depth constraint}\n"
        "Output format:\n"
        "Kernel: <your_kernel>\n"
        "Analysis: <brief explanation>"
    ),
    "mutation": (
        "You are given a kernel and its LML fitness score:\n"
        "Current: {kernel} (LML: {fitness:.3f})\n"
        "Please propose a modified kernel that may achieve higher LML.\n"
        "You can replace base kernels with: {base kernels}\n"
        "Or add/modify operators: {operators}\n"
        "{depth constraint}\n"
        "Output format:\n"
        "Kernel: <your_kernel>\n"
        "Analysis: <brief explanation>"
    ),
    "depth_note": "IMPORTANT: Keep kernel depth at most {max_depth}. Avoid deeply nested expressions!",
}

DEFAULT_OPERATORS = "+ (addition), * (multiplication)"
_SLOT = re.compile(r"\{([A-Za-z0-9_ ]+)(?::([^{}]*))?\}")


def render_prompts(kind: str, slots: dict | None = None) -> str:
    """Fill a prompt template. Slot names are written as in the template
    (``max depth``, ``base kernels``, ...); missing slots raise :class:`TemplateError`."""
    if kind not in PROMPTS:
        raise TemplateError(f"unknown prompt kind {kind!r}")
    slots = slots or {}

    def fill(m):
        name, spec = m.group(1), m.group(2)
        if name not in slots:
            raise TemplateError(f"missing slot {{{name}}} for prompt {kind!r}")
        value = slots[name]
        return format(value, spec) if spec else str(value)

    return _SLOT.sub(fill, PROMPTS[kind])


def depth_constraint(max_depth: int | None) -> str:
    return "" if max_depth is None else render_prompts("depth_note", {"max_depth": max_depth})


def system_prompt(max_depth: int | None) -> str:
    if max_depth is None:
        return render_prompts("system_unrestricted")
    return render_prompts("system_depth", {"max depth": max_depth})


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------


@dataclass
class Proposal:
    raw: str
    expr: KernelExpr | None
    analysis: str = ""
    proposer: str = "mock"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.expr is not None


_KERNEL_LINE = re.compile(r"^[\s>*_`#-]*kernel\s*:\s*(.*)$", re.IGNORECASE)
_ANALYSIS_LINE = re.compile(r"^[\s>*_`#-]*analysis\s*:\s*(.*)$", re.IGNORECASE)


def parse_proposal(raw: str, max_depth: int | None = None, proposer: str = "mock") -> Proposal:
    """Pull the first ``Kernel:`` line out of a model response. Never raises."""
    kernel_text = None
    analysis = []
    for line in raw.splitlines():
        if line.strip().startswith("```"):
            continue
        if kernel_text is None:
            m = _KERNEL_LINE.match(line)
            if m:
                kernel_text = m.group(1).strip().strip("`*_ ").strip()
                continue
        m = _ANALYSIS_LINE.match(line)
        if m and not analysis:
            analysis.append(m.group(1).strip())
        elif analysis:
            analysis.append(line.strip())
    text_analysis = " ".join(a for a in analysis if a)
    if kernel_text is None:
        return Proposal(raw, None, text_analysis, proposer, "no 'Kernel:' line in response")
    try:
        expr = parse_expr(kernel_text)
    except ParseError as err:
        return Proposal(raw, None, text_analysis, proposer, f"parse error: {err}")
    if max_depth is not None and expr.depth > max_depth:
        return Proposal(raw, None, text_analysis, proposer,
                        f"depth {expr.depth} exceeds limit {max_depth}: {print_expr(expr)}")
    return Proposal(raw, expr, text_analysis, proposer)


@dataclass(frozen=True)
class GAConfig:
    population: int = 6
    crossovers: int = 1
    mutation_prob: float = 0.7
    max_depth: int | None = 3
    temperature: float = 0.7
    iterations: int = 12
    seed: int = 0
    bases: tuple = DEFAULT_BASES
    max_evaluations: int | None = None

    def __post_init__(self):
        if self.population < 2:
            raise InvalidArgumentError("population must be >= 2")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise InvalidArgumentError("mutation probability must be in [0, 1]")
        if self.crossovers < 0 or self.iterations < 0:
            raise InvalidArgumentError("crossovers and iterations must be >= 0")


class Proposer(Protocol):
    def crossover(self, parent1: KernelExpr, fitness1: float, parent2: KernelExpr, fitness2: float,
                  config: GAConfig) -> Proposal: ...

    def mutate(self, expr: KernelExpr, fitness: float, config: GAConfig) -> Proposal: ...


# -- tree surgery used by the mock proposer ---------------------------------


def _subtrees(expr: KernelExpr, path=()):
    yield path, expr
    if not isinstance(expr, Leaf):
        for i, c in enumerate(expr.children):
            yield from _subtrees(c, path + (i,))


def _replace(expr: KernelExpr, path, new: KernelExpr) -> KernelExpr:
    if not path:
        return new
    kids = list(expr.children)
    kids[path[0]] = _replace(kids[path[0]], path[1:], new)
    return type(expr)(tuple(kids))


def random_tree(rng: np.random.Generator, n_leaves: int, bases=DEFAULT_BASES) -> KernelExpr:
    if n_leaves == 1:
        return Leaf(bases[rng.integers(len(bases))])
    left = int(rng.integers(1, n_leaves))
    op = Sum if rng.random() < 0.5 else Product
    return canonicalize(op((random_tree(rng, left, bases), random_tree(rng, n_leaves - left, bases))))


class MockProposer:
    """Seeded rule-based proposer; answers in the same text format an LLM would."""

    name = "mock"

    def __init__(self, seed: int = 0, retries: int = 10):
        self.rng = np.random.default_rng(seed)
        self.retries = retries
        self.log: list[dict] = []

    def _reply(self, expr: KernelExpr, what: str, config: GAConfig) -> Proposal:
        raw = f"Kernel: {print_expr(expr)}\nAnalysis: mock {what}"
        self.log.append({"op": what, "response": raw})
        return parse_proposal(raw, config.max_depth, self.name)

    def crossover(self, parent1, fitness1, parent2, fitness2, config):
        limit = config.max_depth
        child = parent1
        for _ in range(self.retries):
            subs1 = list(_subtrees(parent1))
            subs2 = list(_subtrees(parent2))
            path, _ = subs1[self.rng.integers(len(subs1))]
            _, donor = subs2[self.rng.integers(len(subs2))]
            child = canonicalize(_replace(parent1, path, donor))
            if limit is None or child.depth <= limit:
                break
        else:
            # depth clamp: fall back to the donor subtree on its own
            if limit is not None and child.depth > limit:
                child = donor if donor.depth <= limit else parent2
        return self._reply(child, "crossover", config)

    def mutate(self, expr, fitness, config):
        limit = config.max_depth
        bases = tuple(config.bases)
        out = expr
        for _ in range(self.retries):
            subs = list(_subtrees(expr))
            path, node = subs[self.rng.integers(len(subs))]
            move = self.rng.integers(4)
            if move == 0 and isinstance(node, Leaf):
                others = [b for b in bases if b != node.kind] or list(bases)
                new = Leaf(others[self.rng.integers(len(others))])
            elif move == 1 and not isinstance(node, Leaf):
                new = (Product if isinstance(node, Sum) else Sum)(node.children)
            elif move == 2:
                leaf = Leaf(bases[self.rng.integers(len(bases))])
                new = (Sum if self.rng.random() < 0.5 else Product)((node, leaf))
            elif move == 3 and not isinstance(node, Leaf):
                new = node.children[self.rng.integers(len(node.children))]
            else:
                continue
            out = canonicalize(_replace(expr, path, new))
            if out != expr and (limit is None or out.depth <= limit):
                break
            out = expr
        return self._reply(out, "mutation", config)


# ---------------------------------------------------------------------------
# LLM client
# ---------------------------------------------------------------------------


def request_hash(model: str, temperature: float, system: str, user: str) -> str:
    payload = json.dumps({"model": model, "temperature": temperature, "system": system, "user": user},
                         sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class LLMClient:
    """Chat-completions client with a JSON-lines replay log.

    ``mode="live"`` sends requests and appends every exchange to ``replay_log``
    (when given); ``mode="replay"`` serves recorded responses in order for each
    request hash and never touches the network.
    """

    def __init__(self, endpoint: str | None = None, model: str = "gpt-4o-mini", api_key: str | None = None,
                 temperature: float = 0.7, replay_log: str | None = None, mode: str = "live",
                 max_attempts: int = 3, backoff: float = 1.0, timeout: float = 60.0):
        if mode not in ("live", "replay"):
            raise ConfigurationError(f"unknown LLM client mode {mode!r}")
        if mode == "live" and not api_key:
            raise ConfigurationError("an API key is required for live LLM requests")
        if mode == "live" and not endpoint:
            raise ConfigurationError("an endpoint URL is required for live LLM requests")
        if mode == "replay" and not replay_log:
            raise ConfigurationError("replay mode needs a replay log")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.replay_log = replay_log
        self.mode = mode
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self._replay: dict[str, list[str]] = {}
        if mode == "replay":
            with open(replay_log) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._replay.setdefault(rec["request_hash"], []).append(rec["response"])

    @classmethod
    def from_env(cls, **kwargs) -> "LLMClient":
        """Endpoint, model and key-variable name come from ``KM_LLM_ENDPOINT``,
        ``KM_LLM_MODEL`` and ``KM_LLM_KEY_VAR`` (default ``OPENAI_API_KEY``)."""
        key_var = os.environ.get("KM_LLM_KEY_VAR", "OPENAI_API_KEY")
        kwargs.setdefault("endpoint", os.environ.get("KM_LLM_ENDPOINT", "https://api.openai.com/v1/chat/completions"))
        kwargs.setdefault("model", os.environ.get("KM_LLM_MODEL", "gpt-4o-mini"))
        kwargs.setdefault("api_key", os.environ.get(key_var))
        return cls(**kwargs)

    def complete(self, system: str, user: str) -> str:
        key = request_hash(self.model, self.temperature, system, user)
        if self.mode == "replay":
            queue = self._replay.get(key)
            if not queue:
                raise TransportError(f"no recorded response for request {key[:12]}")
            return queue.pop(0)
        text = self._post(system, user)
        if self.replay_log:
            with open(self.replay_log, "a") as fh:
                fh.write(json.dumps({"request_hash": key, "system": system, "user": user, "response": text,
                                     "timestamp": time.time()}) + "\n")
        return text

    def _post(self, system: str, user: str) -> str:
        import httpx

        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        last = None
        for attempt in range(self.max_attempts):
            try:
                resp = httpx.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
            except httpx.HTTPError as err:
                last = TransportError(f"request to {self.endpoint} failed: {err}")
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError):
                        raise TransportError("malformed chat-completions response", resp.status_code, resp.text)
                last = TransportError("chat-completions request failed", resp.status_code, resp.text)
                if resp.status_code != 429 and resp.status_code < 500:
                    raise last
            if attempt + 1 < self.max_attempts:
                time.sleep(self.backoff * 2**attempt)
        raise last


def llm_client(endpoint, model, api_key, temperature, system_prompt, user_prompt, replay_log=None) -> str:
    """One chat-completion round trip; see :class:`LLMClient`."""
    client = LLMClient(endpoint, model, api_key, temperature, replay_log)
    return client.complete(system_prompt, user_prompt)


class LLMProposer:
    name = "llm"

    def __init__(self, client: LLMClient, operators: str = DEFAULT_OPERATORS):
        self.client = client
        self.operators = operators

    def crossover(self, parent1, fitness1, parent2, fitness2, config):
        user = render_prompts("crossover", {
            "parent1": print_expr(parent1), "fitness1": fitness1,
            "parent2": print_expr(parent2), "fitness2": fitness2,
            "operators": self.operators, "depth constraint": depth_constraint(config.max_depth),
        })
        raw = self.client.complete(system_prompt(config.max_depth), user)
        return parse_proposal(raw, config.max_depth, self.name)

    def mutate(self, expr, fitness, config):
        user = render_prompts("mutation", {
            "kernel": print_expr(expr), "fitness": fitness,
            "base kernels": ", ".join(config.bases), "operators": self.operators,
            "depth constraint": depth_constraint(config.max_depth),
        })
        raw = self.client.complete(system_prompt(config.max_depth), user)
        return parse_proposal(raw, config.max_depth, self.name)


# ---------------------------------------------------------------------------
# GA loop
# ---------------------------------------------------------------------------


class GAAborted(RuntimeError):
    """The proposer transport failed; ``trace`` holds the evaluations so far."""

    def __init__(self, message: str, trace: SearchTrace):
        super().__init__(message)
        self.trace = trace


def rank_select(fitness, rng, k: int = 2) -> list:
    """Draw ``k`` distinct positions with probability proportional to rank (worst = 1).

    Ties are ranked by position so the draw is a pure function of ``rng``.
    """
    order = sorted(range(len(fitness)), key=lambda i: (fitness[i], -i))
    rank = np.empty(len(fitness))
    rank[order] = np.arange(1, len(fitness) + 1)
    return [int(i) for i in rng.choice(len(fitness), size=k, replace=False, p=rank / rank.sum())]


def run_ga(data: Dataset | None, config: GAConfig, proposer: Proposer, objective=None, library=None,
           fit_budget: FitBudget | None = None, fit_seed: int = 0) -> SearchTrace:
    """Genetic search with rank-based parent selection and elitism of one.

    Fitness is the fitted LML, memoized per canonical expression; the trace
    gets one record per newly evaluated expression. Trace indices are library
    positions when the expression is in ``library``, otherwise fresh ids past
    the library's end.
    """
    f = objective if objective is not None else CachedObjective(data, fit_budget, fit_seed)
    rng = np.random.default_rng(config.seed)
    if library is None:
        library = generate_library(config.max_depth or 3, config.bases)
    lib_index = {print_expr(e): i for i, e in enumerate(library)}
    ids: dict[str, int] = {}
    memo: dict[str, float] = {}
    trace = SearchTrace("ga", config.seed)

    def evaluate(expr: KernelExpr) -> float:
        key = print_expr(expr)
        if key not in memo:
            if config.max_evaluations is not None and len(memo) >= config.max_evaluations:
                raise StopIteration
            t0 = time.perf_counter()
            memo[key] = float(f(expr))
            ids[key] = lib_index.get(key, len(library) + len(ids))
            trace.append(ids[key], key, memo[key], None, time.perf_counter() - t0)
        return memo[key]

    if config.max_depth is not None:
        pick = rng.choice(len(library), size=min(config.population, len(library)), replace=False)
        pop = [library[int(i)] for i in pick]
    else:
        pop = [random_tree(rng, int(rng.integers(1, 4)), tuple(config.bases)) for _ in range(config.population)]
    try:
        fit = [evaluate(e) for e in pop]
        for it in range(config.iterations):
            elite = int(np.argmax(fit))
            elite_expr, elite_fit = pop[elite], fit[elite]
            # mutation: each individual independently with probability p
            new_pop, new_fit = [], []
            for e, fe in zip(pop, fit):
                if rng.random() < config.mutation_prob:
                    prop = _ask(proposer.mutate, trace, e, fe, config)
                    if prop.ok:
                        e, fe = prop.expr, evaluate(prop.expr)
                    else:
                        trace.flags.append(f"iter {it + 1}: mutation rejected ({prop.error})")
                new_pop.append(e)
                new_fit.append(fe)
            # crossover: parents drawn with probability proportional to rank; the child replaces the worst
            for _ in range(config.crossovers):
                a, b = rank_select(fit, rng)
                prop = _ask(proposer.crossover, trace, pop[a], fit[a], pop[b], fit[b], config)
                if prop.ok:
                    child, cf = prop.expr, evaluate(prop.expr)
                else:
                    trace.flags.append(f"iter {it + 1}: crossover rejected ({prop.error})")
                    child, cf = pop[a], fit[a]
                worst = int(np.argmin(new_fit))
                new_pop[worst], new_fit[worst] = child, cf
            if elite_expr not in new_pop:
                worst = int(np.argmin(new_fit))
                new_pop[worst], new_fit[worst] = elite_expr, elite_fit
            pop, fit = new_pop, new_fit
    except StopIteration:
        trace.flags.append("evaluation budget reached")
    return trace


def _ask(method, trace, *args):
    try:
        return method(*args)
    except TransportError as err:
        raise GAAborted(f"proposer transport failed: {err}", trace) from err

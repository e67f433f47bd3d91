"""Command-line front end: read a JSON problem file, run one command, print a JSON report.

Exit statuses: 0 success, 1 a verification failed, 2 usage or problem-file
error, 3 a size budget or enumeration cap was exceeded.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import _backend
from .bellman import (
    DEFAULT_ENUMERATION_CAP,
    DEFAULT_TABLE_BUDGET,
    AdditiveCriterion,
    FinalStateCriterion,
    FullTableCriterion,
    ProblemSpec,
    ValueFunction,
    brute_force_value,
    compose_bellman,
    solve_history_dp,
)
from .core import (
    CapacityError,
    Distribution,
    FactorizationError,
    History,
    IncompatibleReductionError,
    StageSpaces,
    TimeblocksError,
)
from .dhd import (
    DhdProblem,
    DhdReduction,
    build_dam_instance,
    derive_dhd_kernels,
    dhd_identity_reduction,
    embed_dhd,
    solve_dhd,
    solve_dhd_history,
    strip_index,
)
from .kernels import StochasticKernel
from .noise import NoiseProcessSpec, adapted_value_oracle, dhd_adapted_oracle, kernels_from_noise_process
from .reduction import (
    BUILTIN_REDUCTIONS,
    BlockSchedule,
    ReducedKernels,
    StepReduction,
    TableReduction,
    check_factorization,
    check_state_reduction,
    derive_reduced_kernels,
    reduced_bellman,
    solve_additive_dp,
    solve_reduced_dp,
)
from .two_timescale import TwoScaleClock, TwoScaleProblem, solve_two_timescale

SCHEMA_VERSION = 1
FAMILIES = ("flat", "two_scale", "dhd")
COMMANDS = ("solve-history", "solve-reduced", "solve-2ts", "solve-dhd", "check-reduction", "oracle", "report")
EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_CAPACITY = 0, 1, 2, 3
SUMMARY_THRESHOLD = 64
INTERTWINING_DRAWS = 4


class ProblemFileError(TimeblocksError):
    """Schema violation, located by a JSON path such as ``$.kernels[2].rows``."""

    def __init__(self, message: str, path: str = "$", line: int | None = None):
        where = path if line is None else f"line {line}, {path}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


class UsageError(TimeblocksError):
    pass


# -- problem files ----------------------------------------------------------

def _decode_costs(values):
    """Cost lists may spell +inf as the string ``"inf"``."""
    if isinstance(values, list):
        return [_decode_costs(v) for v in values]
    if values == "inf":
        return math.inf
    return values


def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_canonical(v) for v in value]
    if isinstance(value, float) and math.isinf(value) and value > 0:
        return "inf"
    return value


class _Section:
    """Typed access into a JSON object that reports the path on failure."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ProblemFileError("expected an object", path)
        self.data = data
        self.path = path

    def has(self, key):
        return key in self.data

    def get(self, key, kind=None, default=...):
        if key not in self.data:
            if default is ...:
                raise ProblemFileError(f"missing required key {key!r}", self.path)
            return default
        value = self.data[key]
        where = f"{self.path}.{key}"
        if kind == "int":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ProblemFileError("expected an integer", where)
        elif kind == "ints":
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ProblemFileError("expected a list of integers", where)
        elif kind == "str":
            if not isinstance(value, str):
                raise ProblemFileError("expected a string", where)
        elif kind == "list":
            if not isinstance(value, list):
                raise ProblemFileError("expected a list", where)
        elif kind == "numbers":
            _check_numeric(value, where)
        elif kind == "section":
            return _Section(value, where)
        return value

    def items(self, key):
        return [(f"{self.path}.{key}[{i}]", v) for i, v in enumerate(self.get(key, "list"))]

    def reject_unknown(self, allowed):
        extra = sorted(set(self.data) - set(allowed))
        if extra:
            raise ProblemFileError(f"unknown key {extra[0]!r}", self.path)


def _check_numeric(value, where):
    if isinstance(value, list):
        for i, v in enumerate(value):
            _check_numeric(v, f"{where}[{i}]")
    elif value != "inf" and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ProblemFileError("expected a number or \"inf\"", where)


@dataclass
class ProblemFile:
    data: dict
    family: str
    problem: Any
    two_scale: TwoScaleProblem | None = None
    schedule: BlockSchedule | None = None
    reduction: Any = None
    reduced_criterion: np.ndarray | None = None
    noise: NoiseProcessSpec | None = None
    noise_flags: dict | None = None

    @property
    def digest(self) -> str:
        return hashlib.sha256(serialize_problem(self.data).encode()).hexdigest()

    @property
    def flat(self) -> ProblemSpec:
        return self.two_scale.flat if self.two_scale is not None else self.problem


def serialize_problem(data) -> str:
    if isinstance(data, ProblemFile):
        data = data.data
    return json.dumps(_canonical(data), sort_keys=True, indent=2) + "\n"


def load_problem_text(text: str) -> ProblemFile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFileError(exc.msg, "$", exc.lineno) from None
    try:
        return build_problem(_canonical(data))
    except TimeblocksError:
        raise
    except (ValueError, TypeError, IndexError) as exc:
        raise ProblemFileError(f"malformed table: {exc}") from None


def parse_problem(path: str) -> ProblemFile:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read problem file: {exc}") from None
    return load_problem_text(text)


_TOP_KEYS = ("version", "family", "name", "spaces", "clock", "dhd", "dam", "kernels", "noise_process",
             "criterion", "schedule", "reduction", "reduced_criterion")


def build_problem(data: dict) -> ProblemFile:
    root = _Section(data, "$")
    root.reject_unknown(_TOP_KEYS)
    version = root.get("version", "int")
    if version != SCHEMA_VERSION:
        raise ProblemFileError(f"unsupported format version {version}", "$.version")
    family = root.get("family", "str")
    if family not in FAMILIES:
        raise ProblemFileError(f"family must be one of {', '.join(FAMILIES)}", "$.family")
    name = root.get("name", "str", "")
    if root.has("dam"):
        for key in ("spaces", "kernels", "noise_process", "criterion", "reduction", "dhd", "clock"):
            if root.has(key):
                raise ProblemFileError(f"a dam section replaces {key!r}", "$")
        return _build_dam(data, root, family)
    sources = [k for k in ("kernels", "noise_process") if root.has(k)]
    if len(sources) != 1:
        raise ProblemFileError("exactly one of 'kernels' and 'noise_process' must be present", "$")
    if family == "dhd":
        return _build_dhd(data, root, name)
    return _build_flat(data, root, family, name)


def _build_flat(data, root, family, name):
    if root.has("dhd"):
        raise ProblemFileError("a 'dhd' section needs family 'dhd'", "$.dhd")
    sp = root.get("spaces", "section")
    sp.reject_unknown(("controls", "uncertainties"))
    spaces = StageSpaces.from_sizes(sp.get("controls", "ints"), sp.get("uncertainties", "ints"))
    clock = None
    if family == "two_scale":
        c = root.get("clock", "section")
        c.reject_unknown(("days", "minutes"))
        clock = TwoScaleClock(c.get("days", "int"), c.get("minutes", "int"))
        if clock.flat_horizon != spaces.horizon:
            raise ProblemFileError(f"clock needs {clock.flat_horizon} control stages, spaces give {spaces.horizon}",
                                   "$.clock")
    elif root.has("clock"):
        raise ProblemFileError("a 'clock' section needs family 'two_scale'", "$.clock")
    noise = flags = None
    if root.has("kernels"):
        kernels = [_kernel(path, spec) for path, spec in root.items("kernels")]
    else:
        noise = _noise(root.get("noise_process", "section"), spaces.noise_sizes, clock)
        nk = kernels_from_noise_process(noise)
        kernels, flags = nk.kernels, nk.flagged
    reduction = _reduction(root.get("reduction", "section"), spaces) if root.has("reduction") else None
    criterion = _criterion(root.get("criterion", "section"), reduction)
    problem = ProblemSpec(spaces, kernels, criterion, name)
    if isinstance(criterion, AdditiveCriterion):
        criterion.check(spaces)
    pf = ProblemFile(data, family, problem, reduction=reduction, noise=noise, noise_flags=flags)
    if clock is not None:
        pf.two_scale = TwoScaleProblem(clock, problem)
        pf.schedule = clock.schedule()
    if root.has("schedule"):
        if clock is not None:
            raise ProblemFileError("two-scale problems use day boundaries as their schedule", "$.schedule")
        pf.schedule = BlockSchedule(tuple(root.get("schedule", "ints")))
        pf.schedule.check_horizon(spaces.horizon)
    if root.has("reduced_criterion"):
        pf.reduced_criterion = np.array(_decode_costs(root.get("reduced_criterion", "numbers")), dtype=float)
    return pf


def _build_dhd(data, root, name):
    d = root.get("dhd", "section")
    d.reject_unknown(("initial", "head", "noise", "tail"))
    sizes = dict(initial_size=d.get("initial", "int"), head_sizes=d.get("head", "ints"),
                 noise_sizes=d.get("noise", "ints"), tail_sizes=d.get("tail", "ints"))
    noise = None
    if root.has("kernels"):
        kernels = [_kernel(path, spec) for path, spec in root.items("kernels")]
    else:
        ns = root.get("noise_process", "section")
        ns.reject_unknown(("type", "marginals"))
        if ns.get("type", "str") != "white_noise":
            raise ProblemFileError("decision-hazard-decision problems take white noise only", f"{ns.path}.type")
        noise = NoiseProcessSpec.white_noise([[1.0]] + ns.get("marginals", "list"))
        kernels = kernels_from_noise_process(noise).kernels
    reduction = None
    probe = DhdProblem(**sizes, kernels=kernels, criterion=None, name=name)
    if root.has("reduction"):
        r = root.get("reduction", "section")
        kind = r.get("type", "str")
        if kind == "builtin" and r.get("name", "str") == "identity":
            reduction = dhd_identity_reduction(probe)
        elif kind == "step":
            r.reject_unknown(("type", "state_sizes", "initial", "steps"))
            reduction = DhdReduction(r.get("state_sizes", "ints"), r.get("initial", "ints"), r.get("steps", "list"))
        else:
            raise ProblemFileError("decision-hazard-decision reductions are 'step' or builtin 'identity'", r.path)
        reduction.check(probe)
    criterion = _criterion(root.get("criterion", "section"), reduction)
    if isinstance(criterion, AdditiveCriterion):
        raise ProblemFileError("additive criteria are for flat problems", "$.criterion.type")
    problem = DhdProblem(**sizes, kernels=kernels, criterion=criterion, name=name)
    pf = ProblemFile(data, "dhd", problem, reduction=reduction, noise=noise)
    if root.has("reduced_criterion"):
        pf.reduced_criterion = np.array(_decode_costs(root.get("reduced_criterion", "numbers")), dtype=float)
    return pf


def _build_dam(data, root, family):
    d = root.get("dam", "section")
    d.reject_unknown(("capacity", "inflow_values", "inflows", "turbine", "revenue", "periods", "variant",
                      "final_cost", "spill_penalty"))
    variant = d.get("variant", "str", "min_dynamics")
    want = {"min_dynamics": "flat", "spill_control": "dhd"}.get(variant)
    if want is None:
        raise ProblemFileError("variant must be 'min_dynamics' or 'spill_control'", f"{d.path}.variant")
    if family != want:
        raise ProblemFileError(f"dam variant {variant!r} belongs to family {want!r}", "$.family")
    final = d.get("final_cost", "numbers", None)
    problem = build_dam_instance(
        d.get("capacity", "int"), d.get("inflow_values", "ints"),
        [Distribution(p) for p in d.get("inflows", "list")], d.get("turbine", "ints"),
        d.get("revenue", "numbers"), d.get("periods", "int"), variant,
        final_cost=None if final is None else _decode_costs(final),
        spill_penalty=d.get("spill_penalty", "int", 0),
    )
    pf = ProblemFile(data, family, problem, reduction=problem.criterion.reduction)
    if family == "flat":
        pf.schedule = BlockSchedule.unit(problem.horizon)
        if root.has("schedule"):
            pf.schedule = BlockSchedule(tuple(root.get("schedule", "ints")))
    return pf


def _kernel(path, spec) -> StochasticKernel:
    s = _Section(spec, path)
    kind = s.get("type", "str")
    stage = s.get("stage", "int")
    if kind == "white_noise":
        s.reject_unknown(("type", "stage", "probs"))
        return StochasticKernel.white_noise(stage, s.get("probs", "numbers"))
    if kind in ("full_table", "markov1"):
        s.reject_unknown(("type", "stage", "rows"))
        return getattr(StochasticKernel, kind)(stage, s.get("rows", "numbers"))
    if kind == "dirac":
        s.reject_unknown(("type", "stage", "size", "outcome"))
        return StochasticKernel.dirac(stage, s.get("size", "int"), s.get("outcome", "int"))
    raise ProblemFileError(f"unknown kernel type {kind!r}", f"{path}.type")


def _noise(s: _Section, sizes, clock) -> NoiseProcessSpec:
    kind = s.get("type", "str")
    if kind == "joint_table":
        s.reject_unknown(("type", "probs"))
        probs = np.array(s.get("probs", "numbers"), dtype=float)
        if probs.size != math.prod(sizes):
            raise ProblemFileError(f"expected {math.prod(sizes)} path probabilities", f"{s.path}.probs")
        spec = NoiseProcessSpec.joint_table(probs, sizes)
    elif kind == "white_noise":
        s.reject_unknown(("type", "marginals"))
        spec = NoiseProcessSpec.white_noise(s.get("marginals", "list"))
    elif kind == "day_independent":
        s.reject_unknown(("type", "initial", "days"))
        if clock is None:
            raise ProblemFileError("day-independent noise needs a two-scale clock", f"{s.path}.type")
        M = clock.minutes
        days = []
        for d, table in enumerate(s.get("days", "list")):
            t0 = d * (M + 1) + 1
            shape = sizes[t0: t0 + M + 1]
            days.append(np.array(table, dtype=float).reshape(shape))
        spec = NoiseProcessSpec.day_independent(clock, s.get("initial", "numbers"), days)
    else:
        raise ProblemFileError(f"unknown noise process type {kind!r}", f"{s.path}.type")
    if spec.sizes != tuple(sizes):
        raise ProblemFileError("noise process spaces differ from the declared uncertainty spaces", s.path)
    if clock is not None and spec.clock is None:
        spec = spec.with_clock(clock)
    return spec


def _reduction(s: _Section, spaces):
    kind = s.get("type", "str")
    if kind == "builtin":
        name = s.get("name", "str")
        if name not in BUILTIN_REDUCTIONS:
            raise ProblemFileError(f"unknown builtin reduction {name!r}", f"{s.path}.name")
        if name == "dam_stock":
            s.reject_unknown(("type", "name", "capacity", "turbine", "inflow"))
            return BUILTIN_REDUCTIONS[name](spaces, s.get("capacity", "int"), s.get("turbine", "ints"),
                                            s.get("inflow", "ints"))
        s.reject_unknown(("type", "name"))
        return BUILTIN_REDUCTIONS[name](spaces)
    if kind == "step":
        s.reject_unknown(("type", "state_sizes", "initial", "steps"))
        return StepReduction(s.get("state_sizes", "ints"), s.get("initial", "ints"), s.get("steps", "list"))
    if kind == "tables":
        s.reject_unknown(("type", "state_sizes", "thetas", "dynamics"))
        sizes = s.get("state_sizes", "section")
        thetas = s.get("thetas", "section")
        dyn = s.get("dynamics", "section")
        try:
            blocks = {tuple(int(v) for v in k.split(",")): v for k, v in dyn.data.items()}
            return TableReduction({int(k): v for k, v in sizes.data.items()},
                                  {int(k): v for k, v in thetas.data.items()}, blocks)
        except ValueError:
            raise ProblemFileError("stage keys must be integers and block keys 'r,t'", s.path) from None
    raise ProblemFileError(f"unknown reduction type {kind!r}", f"{s.path}.type")


def _criterion(s: _Section, reduction):
    kind = s.get("type", "str")
    if kind == "full_table":
        s.reject_unknown(("type", "values"))
        return FullTableCriterion(_decode_costs(s.get("values", "numbers")))
    if reduction is None:
        raise ProblemFileError(f"a {kind!r} criterion needs a reduction section", f"{s.path}.type")
    if kind == "final_state":
        s.reject_unknown(("type", "values"))
        return FinalStateCriterion(reduction, _decode_costs(s.get("values", "numbers")))
    if kind == "additive":
        s.reject_unknown(("type", "stage_costs", "final_cost"))
        return AdditiveCriterion(reduction, _decode_costs(s.get("stage_costs", "list")),
                                 _decode_costs(s.get("final_cost", "numbers")))
    raise ProblemFileError(f"unknown criterion type {kind!r}", f"{s.path}.type")


# -- reports ----------------------------------------------------------------

def _num(x):
    x = float(x)
    return "inf" if math.isinf(x) else x


def _table(values: np.ndarray, full: bool):
    values = np.asarray(values).reshape(-1)
    if full or values.size <= SUMMARY_THRESHOLD:
        return [_num(v) if values.dtype.kind == "f" else int(v) for v in values]
    finite = values[np.isfinite(values)] if values.dtype.kind == "f" else values
    out = {"size": int(values.size), "finite": int(finite.size)}
    if finite.size:
        out.update(min=_num(finite.min()), max=_num(finite.max()), argmin=int(np.argmin(values)))
    return out


def _policy(arg, full: bool):
    arg = np.asarray(arg).reshape(-1)
    if full or arg.size <= SUMMARY_THRESHOLD:
        return [int(a) for a in arg]
    counts = np.bincount(arg)
    return {"size": int(arg.size), "histogram": [int(c) for c in counts]}


def _value_entry(vf: ValueFunction, full: bool, label="stage"):
    entry = {label: int(vf.stage), "domain": vf.domain, "values": _table(vf.values, full)}
    if vf.argmin is not None:
        entry["argmin"] = _policy(vf.argmin, full)
    return entry


def _delta(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    both = np.isinf(a) & np.isinf(b) & (np.sign(a) == np.sign(b))
    with np.errstate(invalid="ignore"):
        diff = np.where(both, 0.0, np.abs(a - b))
    return float(diff.max()) if diff.size else 0.0


@dataclass
class Options:
    full: bool = False
    seed: int = 0
    budget: int = DEFAULT_TABLE_BUDGET
    tolerance: float = 1e-9
    cap: int = DEFAULT_ENUMERATION_CAP


def _require(pf: ProblemFile, families, command):
    if pf.family not in families:
        raise UsageError(f"command {command!r} does not apply to family {pf.family!r}")


def _require_reduction(pf: ProblemFile, command):
    if pf.reduction is None:
        raise UsageError(f"command {command!r} needs a reduction section")


def cmd_solve_history(pf, opts):
    if pf.family == "dhd":
        values = solve_dhd_history(pf.problem, opts.budget)
    else:
        values = solve_history_dp(pf.flat, opts.budget)
    return {"values": [_value_entry(v, opts.full) for v in values]}, True


def _flat_reduced(pf, opts):
    problem = pf.flat
    schedule = pf.schedule or BlockSchedule.unit(problem.horizon)
    if isinstance(problem.criterion, AdditiveCriterion) and pf.reduced_criterion is None:
        if schedule != BlockSchedule.unit(problem.horizon):
            raise UsageError("additive criteria are solved on unit blocks")
        return schedule, solve_additive_dp(problem, pf.reduction, tol=opts.tolerance)
    return schedule, solve_reduced_dp(problem, schedule, pf.reduction, pf.reduced_criterion, tol=opts.tolerance)


def cmd_solve_reduced(pf, opts):
    _require(pf, ("flat",), "solve-reduced")
    _require_reduction(pf, "solve-reduced")
    schedule, values = _flat_reduced(pf, opts)
    return {"schedule": list(schedule.boundaries), "values": [_value_entry(v, opts.full) for v in values]}, True


def cmd_solve_2ts(pf, opts):
    _require(pf, ("two_scale",), "solve-2ts")
    _require_reduction(pf, "solve-2ts")
    values = solve_two_timescale(pf.two_scale, pf.reduction, pf.reduced_criterion, tol=opts.tolerance)
    entries = []
    for d, v in enumerate(values):
        entry = _value_entry(v, opts.full)
        entry["day"] = d
        entries.append(entry)
    return {"values": entries}, True


def _dhd_reduced(pf):
    """Reduction and reduced criterion; without a reduction section, histories are the states."""
    if pf.reduction is not None:
        return pf.reduction, pf.reduced_criterion
    jt = pf.reduced_criterion if pf.reduced_criterion is not None else pf.problem.criterion_table()
    return dhd_identity_reduction(pf.problem), jt


def cmd_solve_dhd(pf, opts):
    _require(pf, ("dhd",), "solve-dhd")
    reduction, jt = _dhd_reduced(pf)
    values = solve_dhd(pf.problem, reduction, jt, tol=opts.tolerance)
    entries = []
    for v in values:
        entry = _value_entry(v, opts.full)
        if v.policy is not None:
            entry["tail_argmin"] = _policy(v.policy["tail"], opts.full)
        entries.append(entry)
    return {"values": entries}, True


def _history_text(h):
    return [int(e) for e in h.entries]


def cmd_check_reduction(pf, opts):
    _require_reduction(pf, "check-reduction")
    report = {}
    if pf.family == "dhd":
        _, cex = derive_dhd_kernels(pf.problem, pf.reduction, opts.tolerance)
        report["commutation"] = {"ok": True}
    else:
        problem = pf.flat
        schedule = pf.schedule or BlockSchedule.unit(problem.horizon)
        report["schedule"] = list(schedule.boundaries)
        verdict = check_state_reduction(pf.reduction, schedule, problem)
        report["commutation"] = {"ok": verdict.ok}
        if not verdict.ok:
            report["commutation"].update(block=list(verdict.block), history=_history_text(verdict.history),
                                         segment=_history_text(verdict.segment), expected=verdict.expected,
                                         got=verdict.got, message=verdict.describe())
            return report, False
        compat = derive_reduced_kernels(pf.reduction, schedule, problem, opts.tolerance)
        cex = compat.counterexample
    report["kernels"] = {"ok": cex is None}
    if cex is not None:
        report["kernels"].update(stage=cex.stage, first=_history_text(cex.first), second=_history_text(cex.second),
                                 total_variation=cex.distance, message=cex.describe())
        return report, False
    crit = pf.problem.criterion
    if pf.reduced_criterion is not None or isinstance(crit, FinalStateCriterion):
        jt = pf.reduced_criterion if pf.reduced_criterion is not None else crit.values
        try:
            check_factorization(pf.problem if pf.family == "dhd" else pf.flat, pf.reduction, jt)
            report["criterion"] = {"ok": True}
        except FactorizationError as exc:
            report["criterion"] = {"ok": False, "message": str(exc)}
            return report, False
    return report, True


def _lifting_flat(pf, opts, history):
    problem = pf.flat
    if pf.two_scale is not None:
        reduced = solve_two_timescale(pf.two_scale, pf.reduction, pf.reduced_criterion, tol=opts.tolerance)
        schedule = pf.schedule
    else:
        schedule, reduced = _flat_reduced(pf, opts)
    deltas = []
    additive = isinstance(problem.criterion, AdditiveCriterion) and pf.reduced_criterion is None
    for vf in reduced:
        lifted = vf.values[pf.reduction.theta_array(vf.stage, problem.spaces)]
        if additive:
            lifted = lifted + problem.criterion.accumulated(vf.stage, problem.spaces)
        deltas.append(_delta(history[vf.stage].values, lifted))
    return schedule, reduced, deltas


def _intertwining(pf, opts, schedule):
    problem = pf.flat
    reduction = pf.reduction
    compat = derive_reduced_kernels(reduction, schedule, problem, opts.tolerance)
    if not compat.ok:
        raise IncompatibleReductionError(compat.counterexample.describe(), compat.counterexample)
    rng = np.random.default_rng(opts.seed)
    worst = 0.0
    for r, t in schedule.blocks:
        for _ in range(INTERTWINING_DRAWS):
            phi = rng.uniform(0.0, 10.0, reduction.state_size(t))
            reduced, _ = reduced_bellman(problem, reduction, compat.kernels, r, t, phi)
            space = problem.history_space(t)
            pulled = ValueFunction(t, "history", phi[reduction.theta_array(t, problem.spaces)], None, space)
            full = compose_bellman(r, t, pulled, problem)
            worst = max(worst, _delta(reduced[reduction.theta_array(r, problem.spaces)], full.values))
    return worst


def cmd_oracle(pf, opts):
    checks = {}
    skipped = []
    if pf.family == "dhd":
        problem = pf.problem
        history = solve_dhd_history(problem, opts.budget)
        embedded = embed_dhd(problem)
        flat = solve_history_dp(embedded.flat, opts.budget)
        worst = 0.0
        for s in range(problem.horizon + 1):
            fl = flat[embedded.clock.day_start(s)]
            idx = strip_index(problem, fl.space, s)
            worst = max(worst, _delta(fl.values, history[s].values[idx]))
        checks["embedding"] = worst
        reduction, jt = _dhd_reduced(pf)
        reduced = solve_dhd(problem, reduction, jt, tol=opts.tolerance)
        checks["lifting"] = max(_delta(history[s].values, reduced[s].values[reduction.theta_array(s, problem)])
                                for s in range(problem.horizon + 1))
        if all(k.kind == "white_noise" for k in problem.kernels):
            space = problem.history_space(0)
            try:
                checks["adapted"] = max(
                    _delta(history[0].values[i], dhd_adapted_oracle(0, space.entries(i), problem, cap=opts.cap))
                    for i in range(space.size)
                )
            except CapacityError:
                skipped.append("adapted")
    else:
        problem = pf.flat
        history = solve_history_dp(problem, opts.budget)
        worst = 0.0
        for t in range(problem.horizon + 1):
            space = problem.history_space(t)
            for i, entries in enumerate(space):
                worst = max(worst, _delta(history[t].values[i], brute_force_value(t, History(t, entries), problem,
                                                                                  opts.cap)))
        checks["brute_force"] = worst
        if pf.noise is not None:
            worst = 0.0
            for t in range(problem.horizon + 1):
                for i, entries in enumerate(problem.history_space(t)):
                    got = adapted_value_oracle(t, History(t, entries), problem, pf.noise, cap=opts.cap)
                    worst = max(worst, _delta(history[t].values[i], got))
            checks["adapted"] = worst
        if pf.reduction is not None:
            schedule, _, deltas = _lifting_flat(pf, opts, history)
            checks["lifting"] = max(deltas)
            if not (isinstance(problem.criterion, AdditiveCriterion) and pf.reduced_criterion is None):
                checks["intertwining"] = _intertwining(pf, opts, schedule)
    passed = all(v <= opts.tolerance for v in checks.values())
    out = {"max_deltas": checks, "tolerance": opts.tolerance, "passed": passed}
    if skipped:
        out["skipped_over_cap"] = skipped
    return out, passed


def cmd_report(pf, opts):
    out = {"family": pf.family, "name": pf.problem.name}
    if pf.family == "dhd":
        p = pf.problem
        out["dhd"] = {"initial": p.initial_size, "head": list(p.head_sizes), "noise": list(p.noise_sizes),
                      "tail": list(p.tail_sizes)}
        out["kernels"] = [k.kind for k in p.kernels]
        out["history_counts"] = [p.history_space(s).size for s in range(p.horizon + 1)]
    else:
        p = pf.flat
        out["spaces"] = {"controls": list(p.spaces.control_sizes), "uncertainties": list(p.spaces.noise_sizes)}
        out["kernels"] = [k.kind for k in p.kernels]
        out["history_counts"] = [p.spaces.history_count(t) for t in range(p.horizon + 1)]
        if pf.two_scale is not None:
            out["clock"] = {"days": pf.two_scale.clock.days, "minutes": pf.two_scale.clock.minutes}
        if pf.schedule is not None:
            out["schedule"] = list(pf.schedule.boundaries)
    out["criterion"] = p.criterion.kind
    if pf.reduction is not None:
        out["reduction"] = {"name": pf.reduction.name, "state_sizes": [int(n) for n in _state_sizes(pf.reduction)]}
    if pf.noise_flags:
        out["zero_probability_prefixes"] = {str(s): [list(map(int, pre)) for pre in v]
                                            for s, v in sorted(pf.noise_flags.items())}
    return out, True


def _state_sizes(reduction):
    sizes = reduction.state_sizes
    return [sizes[k] for k in sorted(sizes)] if isinstance(sizes, dict) else sizes


HANDLERS = {
    "solve-history": cmd_solve_history,
    "solve-reduced": cmd_solve_reduced,
    "solve-2ts": cmd_solve_2ts,
    "solve-dhd": cmd_solve_dhd,
    "check-reduction": cmd_check_reduction,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def run_command(pf: ProblemFile, command: str, opts: Options | None = None) -> tuple[dict, int]:
    """Run ``command`` and return ``(report, exit status)``."""
    opts = opts or Options()
    if command not in HANDLERS:
        raise UsageError(f"unknown command {command!r}")
    report = {"command": command, "instance": pf.digest}
    try:
        body, ok = HANDLERS[command](pf, opts)
    except (IncompatibleReductionError, FactorizationError) as exc:
        body, ok = {"error": str(exc)}, False
    report.update(body)
    report["status"] = "pass" if ok else "fail"
    return report, EXIT_OK if ok else EXIT_VERIFY


def render_report(report: dict) -> str:
    return json.dumps(_canonical(report), sort_keys=True, indent=2) + "\n"


def _parser():
    p = argparse.ArgumentParser(prog="timeblocks", description="Finite-horizon stochastic dynamic programming on histories and reduced states.")
    p.add_argument("--problem", required=True, help="problem file (JSON)")
    p.add_argument("--command", required=True, choices=COMMANDS)
    p.add_argument("--out", help="write the report here instead of standard output")
    p.add_argument("--full", action="store_true", help="print every table entry")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    p.add_argument("--threads", type=int, default=1, help="worker threads for large kernel sweeps")
    p.add_argument("--budget", type=int, default=DEFAULT_TABLE_BUDGET, help="largest history table allowed")
    p.add_argument("--tolerance", type=float, default=1e-9, help="verification tolerance")
    p.add_argument("--timing", action="store_true", help="print wall time to standard error")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1 or args.budget < 1 or not args.tolerance >= 0:
        print("error: --threads and --budget must be positive, --tolerance nonnegative", file=sys.stderr)
        return EXIT_USAGE
    _backend.set_threads(args.threads)
    opts = Options(full=args.full, seed=args.seed, budget=args.budget, tolerance=args.tolerance)
    start = time.perf_counter()
    try:
        pf = parse_problem(args.problem)
        report, status = run_command(pf, args.command, opts)
    except CapacityError as exc:
        print(f"capacity exceeded: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except TimeblocksError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = render_report(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.timing:
        print(f"wall time: {time.perf_counter() - start:.3f} s", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())

"""Operation counting, energy estimation and the multiply trap.

Every spiking kernel reports into an :class:`EnergyLedger`.  Synaptic
accumulates (SOPs) and spike emissions are priced with the 45nm constants
below; float multiply-accumulates are tallied but never priced.
"""
from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

E_SOP = 77e-15  # joules per synaptic accumulate
E_SIGN = 3.7e-12  # joules per spike emission


@dataclass
class LayerRecord:
    sop_count: int = 0
    sign_count: int = 0
    mac_count: int = 0

    def __add__(self, other: "LayerRecord") -> "LayerRecord":
        return LayerRecord(
            self.sop_count + other.sop_count,
            self.sign_count + other.sign_count,
            self.mac_count + other.mac_count,
        )


@dataclass
class AttentionStats:
    """Raw event totals captured by one attention layer during a pass."""

    timesteps: int = 0
    tokens: int = 0
    dim: int = 0
    heads: int = 1
    q_events: int = 0
    q_size: int = 0
    k_events: int = 0
    k_size: int = 0
    similarity_ac: int = 0
    aggregation_ac: int = 0
    aggregation_ac_dense: int = 0
    mask_row_nnz: float = 0.0

    def __add__(self, other: "AttentionStats") -> "AttentionStats":
        merged = AttentionStats(**asdict(self))
        for name in ("q_events", "q_size", "k_events", "k_size", "similarity_ac",
                     "aggregation_ac", "aggregation_ac_dense", "timesteps"):
            setattr(merged, name, getattr(self, name) + getattr(other, name))
        merged.tokens = max(self.tokens, other.tokens)
        merged.dim = max(self.dim, other.dim)
        merged.heads = max(self.heads, other.heads)
        merged.mask_row_nnz = max(self.mask_row_nnz, other.mask_row_nnz)
        return merged


class EnergyLedger:
    """Per-layer SOP / sign / MAC tallies for one forward pass.

    A ledger is not thread safe; give each concurrent forward its own and
    combine them afterwards with :meth:`merge`.
    """

    def __init__(self) -> None:
        self.records: dict[str, LayerRecord] = {}
        self.attention: dict[str, AttentionStats] = {}

    def _record(self, layer: str) -> LayerRecord:
        rec = self.records.get(layer)
        if rec is None:
            rec = self.records[layer] = LayerRecord()
        return rec

    def add_sop(self, layer: str, count: int) -> None:
        if count < 0:
            raise ValueError("SOP increments must be nonnegative")
        self._record(layer).sop_count += int(count)

    def add_sign(self, layer: str, count: int) -> None:
        if count < 0:
            raise ValueError("sign increments must be nonnegative")
        self._record(layer).sign_count += int(count)

    def add_mac(self, layer: str, count: int) -> None:
        if count < 0:
            raise ValueError("MAC increments must be nonnegative")
        self._record(layer).mac_count += int(count)

    def add_attention(self, layer: str, stats: AttentionStats) -> None:
        prev = self.attention.get(layer)
        self.attention[layer] = stats if prev is None else prev + stats

    @property
    def n_sop(self) -> int:
        return sum(r.sop_count for r in self.records.values())

    @property
    def n_sign(self) -> int:
        return sum(r.sign_count for r in self.records.values())

    @property
    def n_mac(self) -> int:
        return sum(r.mac_count for r in self.records.values())

    def reset(self) -> None:
        self.records.clear()
        self.attention.clear()

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        out = EnergyLedger()
        for src in (self, other):
            for name, rec in src.records.items():
                out.records[name] = out.records.get(name, LayerRecord()) + rec
            for name, stats in src.attention.items():
                out.add_attention(name, stats)
        return out

    def to_dict(self) -> dict:
        return {
            "layers": {k: asdict(v) for k, v in self.records.items()},
            "attention": {k: asdict(v) for k, v in self.attention.items()},
            "totals": {"sop": self.n_sop, "sign": self.n_sign, "mac": self.n_mac},
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnergyLedger):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"EnergyLedger(sop={self.n_sop}, sign={self.n_sign}, mac={self.n_mac})"


def energy_from_counts(n_sop: float, n_sign: float,
                       e_sop: float = E_SOP, e_sign: float = E_SIGN) -> float:
    """Total energy in joules for the given operation counts."""
    return n_sop * e_sop + n_sign * e_sign


def estimate_energy(ledger: EnergyLedger, e_sop: float = E_SOP, e_sign: float = E_SIGN) -> float:
    # MACs are excluded: the float input layer costs the same in every compared model
    return energy_from_counts(ledger.n_sop, ledger.n_sign, e_sop, e_sign)


def complexity_report(ledger: EnergyLedger) -> dict:
    """Summarise attention cost against the rate-based and local-window predictions.

    ``ledger`` must come from one instrumented forward.  For each attention
    layer the report gives the measured query/key firing rates, the
    similarity-stage AC count next to ``R_Q * R_K * N^2 * d`` (summed over
    timesteps), and aggregation ACs with the mask against the dense count the
    same spikes would have cost without it.
    """
    layers = {}
    for name, st in ledger.attention.items():
        r_q = st.q_events / st.q_size if st.q_size else 0.0
        r_k = st.k_events / st.k_size if st.k_size else 0.0
        predicted = r_q * r_k * st.tokens ** 2 * st.dim * st.timesteps
        agg_ratio = st.aggregation_ac / st.aggregation_ac_dense if st.aggregation_ac_dense else 0.0
        layers[name] = {
            "rate_q": r_q,
            "rate_k": r_k,
            "tokens": st.tokens,
            "dim": st.dim,
            "timesteps": st.timesteps,
            "similarity_ac": st.similarity_ac,
            "similarity_ac_predicted": predicted,
            "aggregation_ac": st.aggregation_ac,
            "aggregation_ac_dense": st.aggregation_ac_dense,
            "aggregation_ratio": agg_ratio,
            "k_over_n": st.mask_row_nnz / st.tokens if st.tokens else 0.0,
        }
    return {"layers": layers, "energy_j": estimate_energy(ledger),
            "n_sop": ledger.n_sop, "n_sign": ledger.n_sign, "n_mac": ledger.n_mac}


# ---------------------------------------------------------------------------
# multiply trap
# ---------------------------------------------------------------------------

_MULTIPLICATIVE_UFUNCS = {
    np.multiply, np.matmul, np.divide, np.true_divide, np.floor_divide,
    np.power, np.float_power, np.ldexp, np.vecdot,
}
_MULTIPLICATIVE_FUNCS = {
    np.dot, np.vdot, np.inner, np.outer, np.tensordot, np.einsum, np.kron,
    np.prod, np.cumprod, np.linalg.multi_dot,
}


@dataclass
class TrapEvent:
    scope: str
    op: str
    kinds: tuple[str, ...]

    @property
    def is_violation(self) -> bool:
        return any(k in "fc" for k in self.kinds)


@dataclass
class TrapReport:
    """Multiplicative operations observed inside trapped kernels.

    Any multiplicative op with a floating operand counts as a violation;
    integer-only multiplies are recorded but tolerated.
    """

    events: list[TrapEvent] = field(default_factory=list)
    scopes: dict[str, int] = field(default_factory=dict)

    @property
    def violations(self) -> list[TrapEvent]:
        return [e for e in self.events if e.is_violation]

    @property
    def n_violations(self) -> int:
        return len(self.violations)


_ACTIVE_TRAP: contextvars.ContextVar[TrapReport | None] = contextvars.ContextVar(
    "bsvit_multiply_trap", default=None)


def _kind(x) -> str:
    if isinstance(x, np.ndarray):
        return x.dtype.kind
    if isinstance(x, (bool, np.bool_)):
        return "b"
    if isinstance(x, (int, np.integer)):
        return "i"
    if isinstance(x, (float, np.floating)):
        return "f"
    if isinstance(x, complex):
        return "c"
    return np.asarray(x).dtype.kind


def _unwrap(x):
    if isinstance(x, TrappedArray):
        return x.view(np.ndarray)
    if isinstance(x, (list, tuple)):
        return type(x)(_unwrap(v) for v in x)
    return x


def _wrap(x, scope: str):
    if isinstance(x, np.ndarray) and not isinstance(x, TrappedArray):
        out = x.view(TrappedArray)
        out._trap_scope = scope
        return out
    if isinstance(x, tuple):
        return tuple(_wrap(v, scope) for v in x)
    return x


class TrappedArray(np.ndarray):
    """ndarray view that reports multiplicative numpy calls to the active trap."""

    _trap_scope = "?"

    def __array_finalize__(self, obj):
        self._trap_scope = getattr(obj, "_trap_scope", "?")

    def _note(self, op: str, operands) -> None:
        report = _ACTIVE_TRAP.get()
        if report is not None:
            report.events.append(TrapEvent(self._trap_scope, op,
                                           tuple(_kind(o) for o in operands)))

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if ufunc in _MULTIPLICATIVE_UFUNCS:
            self._note(f"{ufunc.__name__}.{method}", inputs)
        args = _unwrap(inputs)
        if "out" in kwargs:
            kwargs["out"] = _unwrap(kwargs["out"])
        result = getattr(ufunc, method)(*args, **kwargs)
        if method == "at":
            return None
        return _wrap(result, self._trap_scope)

    def __array_function__(self, func, types, args, kwargs):
        if func in _MULTIPLICATIVE_FUNCS:
            operands = [a for a in args if isinstance(a, (np.ndarray, int, float))]
            self._note(func.__name__, operands)
        result = func(*_unwrap(args), **{k: _unwrap(v) for k, v in kwargs.items()})
        return _wrap(result, self._trap_scope)


@contextmanager
def multiply_trap():
    """Record multiplicative ops performed inside trapped kernel scopes.

    >>> with multiply_trap() as report:
    ...     pass
    >>> report.n_violations
    0
    """
    report = TrapReport()
    token = _ACTIVE_TRAP.set(report)
    try:
        yield report
    finally:
        _ACTIVE_TRAP.reset(token)


def trap_guard(scope: str, *arrays):
    """Return ``arrays`` as trapped views when a trap is active, else unchanged."""
    report = _ACTIVE_TRAP.get()
    if report is None:
        return arrays if len(arrays) != 1 else arrays[0]
    report.scopes[scope] = report.scopes.get(scope, 0) + 1
    wrapped = tuple(_wrap(np.asarray(a), scope) for a in arrays)
    return wrapped if len(wrapped) != 1 else wrapped[0]


def trap_release(x):
    """Strip the trap view from a kernel result."""
    return x.view(np.ndarray) if isinstance(x, TrappedArray) else x


def format_energy_uj(joules: float) -> str:
    return f"{joules * 1e6:.2f}uJ" if math.isfinite(joules) else "nan"

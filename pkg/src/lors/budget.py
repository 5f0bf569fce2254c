"""Parameter accounting: closed-form per-layer averages and exact enumeration.

Closed forms, average scalars per layer (biases excluded)::

    dense static      d*h
    dense adaptive    d_q*d*h
    LORS static       d*h/N + K*(d*r + r*h)
    LORS adaptive     d_q*d*h/N + K*(d_q*r^2 + d*r + r*h)

With a per-layer group schedule, K is the mean group count. Multiplying the
average by N gives the exact integer total ("de-amortized"), which is what
``count_model`` enumerates from a constructed container.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

KINDS = ("static", "adaptive")


@dataclass(frozen=True)
class BudgetQuery:
    kind: str
    d: int
    h: int
    r: int
    K: int | tuple[int, ...]
    N: int
    d_q: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if min(self.d, self.h, self.r, self.N) < 1:
            raise ValueError("d, h, r and N must be positive")
        if self.kind == "adaptive" and (self.d_q is None or self.d_q < 1):
            raise ValueError("adaptive queries need a positive d_q")
        if isinstance(self.K, int):
            if self.K < 1:
                raise ValueError("K must be >= 1")
        else:
            object.__setattr__(self, "K", tuple(int(k) for k in self.K))
            if len(self.K) != self.N or any(k < 0 for k in self.K):
                raise ValueError(f"K schedule {self.K} does not fit N={self.N}")

    @property
    def schedule(self) -> tuple[int, ...]:
        return (self.K,) * self.N if isinstance(self.K, int) else self.K

    def with_rank(self, r: int) -> BudgetQuery:
        return BudgetQuery(self.kind, self.d, self.h, r, self.K, self.N, self.d_q)


def count_dense(q: BudgetQuery) -> int:
    return q.d * q.h if q.kind == "static" else q.d_q * q.d * q.h


def per_group_count(q: BudgetQuery) -> int:
    base = q.d * q.r + q.r * q.h
    return base if q.kind == "static" else q.d_q * q.r * q.r + base


def count_lors(q: BudgetQuery) -> float:
    """Average LORS scalars per layer; fractional since the shared term is amortized."""
    k_mean = q.K if isinstance(q.K, int) else sum(q.K) / q.N
    return (1 / q.N) * count_dense(q) + k_mean * per_group_count(q)


def total_lors(q: BudgetQuery) -> int:
    """Exact stack total: one shared weight plus every layer's private groups."""
    return count_dense(q) + sum(q.schedule) * per_group_count(q)


@dataclass
class BudgetReport:
    kind: str
    r: int
    with_lors: float
    without_lors: float
    percentage: float
    breakdown: dict[str, float] = field(default_factory=dict)


def report(q: BudgetQuery) -> BudgetReport:
    with_lors, without = count_lors(q), count_dense(q)
    return BudgetReport(
        kind=q.kind,
        r=q.r,
        with_lors=with_lors,
        without_lors=float(without),
        percentage=100.0 * with_lors / without,
        breakdown={
            "shared_per_layer": count_dense(q) / q.N,
            "private_per_layer": with_lors - count_dense(q) / q.N,
            "total_with_lors": float(total_lors(q)),
            "total_without_lors": float(without * q.N),
        },
    )


def table_report(ranks: Sequence[int], q: BudgetQuery) -> list[BudgetReport]:
    if not ranks:
        raise ValueError("need at least one rank")
    return [report(q.with_rank(r)) for r in ranks]


REFERENCE_STATIC = BudgetQuery("static", d=2 * 128 * 128, h=256, r=8, K=1, N=6)
REFERENCE_ADAPTIVE = BudgetQuery("adaptive", d=64, h=128, r=16, K=2, N=6, d_q=256)
REFERENCE_RANKS = (4, 8, 16, 32)


def reference_tables() -> list[list[BudgetReport]]:
    return [table_report(REFERENCE_RANKS, REFERENCE_STATIC), table_report(REFERENCE_RANKS, REFERENCE_ADAPTIVE)]


# -- formatting -------------------------------------------------------------
def half_up(x: float, places: int) -> Decimal:
    return Decimal(repr(x)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def _mega(x: float) -> str:
    return f"{half_up(x / 1e6, 2)}M"


def _pct(x: float) -> str:
    return f"{half_up(x, 1)}%"


def _plain(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.6g}"


def format_text(rows: list[BudgetReport], title: str = "", mega: bool = True) -> str:
    """Table layout; ``mega`` prints counts in millions, otherwise as plain numbers."""
    tag = "LORS^T" if rows[0].kind == "static" else "LORS^A"
    num = _mega if mega else _plain
    width = max(9, 2 + max(len(num(x)) for r in rows for x in (r.with_lors, r.without_lors)))
    lines = [title] if title else []
    lines.append(" " * 12 + "".join(f"{'r=' + str(r.r):>{width}}" for r in rows))
    lines.append(f"{'W/  ' + tag:<12}" + "".join(f"{num(r.with_lors):>{width}}" for r in rows))
    lines.append(f"{'W/O ' + tag:<12}" + "".join(f"{num(r.without_lors):>{width}}" for r in rows))
    lines.append(f"{'Percentage':<12}" + "".join(f"{_pct(r.percentage):>{width}}" for r in rows))
    return "\n".join(lines)


CSV_COLUMNS = ("kind", "r", "with_lors", "without_lors", "percentage")


def format_csv(rows: list[BudgetReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.kind, r.r, repr(r.with_lors), repr(r.without_lors), repr(r.percentage)])
    return buf.getvalue()


def format_json(rows: list[BudgetReport]) -> str:
    return json.dumps([{k: asdict(r)[k] for k in CSV_COLUMNS} for r in rows], indent=2)


# -- enumeration ------------------------------------------------------------
ROLES = ("shared", "private", "dense", "bias", "norm")


@dataclass
class ModelCount:
    total: int
    by_component: dict[str, dict[str, int]]
    by_role: dict[str, int]

    @property
    def weights(self) -> int:
        """Scalars in generator/projection weights: shared + private + dense."""
        return sum(self.by_role.get(r, 0) for r in ("shared", "private", "dense"))

    def component_weights(self, prefix: str) -> int:
        return sum(
            n
            for comp, roles in self.by_component.items()
            if comp == prefix or comp.startswith(prefix + ".")
            for role, n in roles.items()
            if role in ("shared", "private", "dense")
        )


def count_model(model) -> ModelCount:
    """Enumerate scalars of any container exposing ``named_parameters()``.

    Names follow ``component/role/detail``; role is one of ``ROLES``.
    """
    by_component: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    by_role: dict[str, int] = defaultdict(int)
    total = 0
    for name, t in model.named_parameters():
        component, role = name.split("/")[:2]
        if role not in ROLES:
            raise ValueError(f"parameter {name!r} has unknown role {role!r}")
        by_component[component][role] += t.size
        by_role[role] += t.size
        total += t.size
    return ModelCount(total, {k: dict(v) for k, v in by_component.items()}, dict(by_role))


def decoder_budget(config) -> dict[str, int]:
    """Closed-form de-amortized weight totals for the LORS-covered decoder components."""
    c = config
    out = {}
    for name, d, h, ks in (
        ("acm", c.channels, c.channels, c.k_acm),
        ("asm", c.points_in, c.points_out, c.k_asm),
    ):
        if c.weight_mode == "lors":
            one = total_lors(BudgetQuery("adaptive", d, h, c.rank_adaptive, tuple(ks), c.n_layers, c.d_q))
        else:
            one = c.n_layers * count_dense(BudgetQuery("adaptive", d, h, 1, 1, 1, c.d_q))
        out[name] = c.groups * one
    if c.weight_mode == "lors":
        out["out"] = total_lors(BudgetQuery("static", c.out_features, c.d_q, c.rank_static, tuple(c.k_out), c.n_layers))
    else:
        out["out"] = c.n_layers * c.out_features * c.d_q
    return out

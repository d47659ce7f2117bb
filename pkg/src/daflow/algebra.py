"""Truncated multivariate Taylor-polynomial algebra.

States, flow maps, and measurement functions are all carried as polynomials
in a set of deviation variables ``d0 .. d{n-1}`` around a numeric expansion
center, truncated at a fixed total degree.  Arithmetic, the standard
nonlinear functions, evaluation, partial differentiation, and map
composition act directly on coefficient tables, so pushing a polynomial
state through ordinary numerical code yields the Taylor expansion of that
code's output around the center.

    ctx = AlgebraContext(n_vars=2, max_order=3)
    x = make_variable(ctx, -3.5, 0)          # -3.5 + d0
    y = make_variable(ctx, 0.0, 1)           #  d1
    r = sqrt(x * x + y * y)                  # range expanded around (-3.5, 0)
    evaluate(r, [0.1, -0.2])                 # polynomial evaluation

Monomials are ordered graded-lexicographically (total degree first, then
the variable multiset), which fixes iteration order, printing, and the
textual dump format.  Coefficients are plain float64; every operation
returns a new value and never mutates its inputs.
"""

from __future__ import annotations

import itertools
import math
import numbers

import numpy as np

__all__ = [
    "AlgebraContext",
    "DAScalar",
    "DAVector",
    "DomainError",
    "add",
    "sub",
    "mul",
    "scale",
    "constant",
    "make_variable",
    "identity_map",
    "intrinsic",
    "reciprocal",
    "sqrt",
    "exp",
    "log",
    "sin",
    "cos",
    "evaluate",
    "evaluate_many",
    "partial_derive",
    "compose",
    "dump",
]

# dump/pruning threshold, relative to the largest coefficient in a polynomial
PRUNE_REL = 1e-14


class DomainError(ValueError):
    """The expansion point sits outside an intrinsic function's domain."""


class AlgebraContext:
    """Algebra of polynomials in ``n_vars`` variables truncated at total
    degree ``max_order``.

    Holds the monomial basis and the lazily built multiplication /
    differentiation tables shared by every polynomial in the context.
    """

    def __init__(self, n_vars: int, max_order: int):
        if n_vars < 1:
            raise ValueError(f"n_vars must be >= 1, got {n_vars}")
        if max_order < 1:
            raise ValueError(f"max_order must be >= 1, got {max_order}")
        self.n_vars = int(n_vars)
        self.max_order = int(max_order)

        exps = []
        index = {}
        parent = [0]
        parent_var = [0]
        for degree in range(max_order + 1):
            for combo in itertools.combinations_with_replacement(range(n_vars), degree):
                e = [0] * n_vars
                for v in combo:
                    e[v] += 1
                index[tuple(e)] = len(exps)
                exps.append(e)
                if degree >= 1:
                    ep = list(e)
                    ep[combo[0]] -= 1
                    parent.append(index[tuple(ep)])
                    parent_var.append(combo[0])
        self.exponents = np.array(exps, dtype=np.int64)
        self.size = len(exps)
        self.degrees = self.exponents.sum(axis=1)
        self._index = index
        # each monomial of degree >= 1 is (parent monomial) * (one variable);
        # used to evaluate all monomials with one multiply each
        self._parent = np.array(parent, dtype=np.intp)
        self._parent_var = np.array(parent_var, dtype=np.intp)
        self._mul_table = None
        self._diff_tables = {}

    def __repr__(self):
        return f"AlgebraContext(n_vars={self.n_vars}, max_order={self.max_order})"

    def compatible(self, other: "AlgebraContext") -> bool:
        return self.n_vars == other.n_vars and self.max_order == other.max_order

    def index_of(self, exponents) -> int:
        return self._index[tuple(int(e) for e in exponents)]

    def multiplication_table(self):
        """(i, j, k) index triples with ``basis[i] * basis[j] = basis[k]``,
        restricted to products that survive truncation."""
        if self._mul_table is None:
            deg = self.degrees
            k = self.max_order
            # monomials are degree-sorted, so each degree bound is a prefix
            ends = np.searchsorted(deg, np.arange(k + 2))
            ii, jj, kk = [], [], []
            for i in range(self.size):
                jend = int(ends[k - deg[i] + 1])
                ei = self.exponents[i]
                for j in range(jend):
                    kk.append(self._index[tuple(ei + self.exponents[j])])
                ii.extend([i] * jend)
                jj.extend(range(jend))
            self._mul_table = (
                np.array(ii, dtype=np.intp),
                np.array(jj, dtype=np.intp),
                np.array(kk, dtype=np.intp),
            )
        return self._mul_table

    def diff_table(self, var: int):
        """(src, dst, factor) arrays implementing d/d(var) on coefficients."""
        if var not in self._diff_tables:
            e = self.exponents[:, var]
            src = np.nonzero(e)[0]
            dst = np.empty(len(src), dtype=np.intp)
            for n, s in enumerate(src):
                es = self.exponents[s].copy()
                es[var] -= 1
                dst[n] = self._index[tuple(es)]
            self._diff_tables[var] = (src, dst, e[src].astype(float))
        return self._diff_tables[var]

    def monomial_values(self, devs: np.ndarray) -> np.ndarray:
        """Values of every basis monomial at each deviation row.

        devs: (N, n_vars) -> (N, size)
        """
        devs = np.asarray(devs, dtype=float)
        if devs.ndim != 2 or devs.shape[1] != self.n_vars:
            raise ValueError(
                f"deviation block must be (N, {self.n_vars}), got {devs.shape}"
            )
        vals = np.empty((devs.shape[0], self.size))
        vals[:, 0] = 1.0
        for m in range(1, self.size):
            vals[:, m] = vals[:, self._parent[m]] * devs[:, self._parent_var[m]]
        return vals


def _check_context(a: "DAScalar", b: "DAScalar") -> None:
    if a.ctx is not b.ctx and not a.ctx.compatible(b.ctx):
        raise ValueError(f"context mismatch: {a.ctx!r} vs {b.ctx!r}")


class DAScalar:
    """A single truncated Taylor polynomial.

    Stores a dense coefficient vector over the context's graded-lex
    monomial basis; the sparse exponent-to-coefficient view is available
    through :attr:`terms`.  Instances are immutable by convention: all
    arithmetic returns new values.
    """

    __slots__ = ("ctx", "coeffs")
    # keep numpy from broadcasting over us so mixed expressions defer to our dunders
    __array_ufunc__ = None

    def __init__(self, ctx: AlgebraContext, coeffs: np.ndarray | None = None):
        self.ctx = ctx
        if coeffs is None:
            coeffs = np.zeros(ctx.size)
        self.coeffs = coeffs

    @property
    def constant(self) -> float:
        """Coefficient of the all-zeros multi-index."""
        return float(self.coeffs[0])

    @property
    def terms(self) -> dict:
        """Nonzero coefficients keyed by exponent multi-index, graded-lex order."""
        return {
            tuple(int(e) for e in self.ctx.exponents[m]): float(c)
            for m, c in enumerate(self.coeffs)
            if c != 0.0
        }

    def _coerce(self, other):
        if isinstance(other, DAScalar):
            _check_context(self, other)
            return other.coeffs
        if isinstance(other, numbers.Real):
            c = np.zeros(self.ctx.size)
            c[0] = float(other)
            return c
        return None

    def __add__(self, other):
        c = self._coerce(other)
        if c is None:
            return NotImplemented
        return DAScalar(self.ctx, self.coeffs + c)

    __radd__ = __add__

    def __sub__(self, other):
        c = self._coerce(other)
        if c is None:
            return NotImplemented
        return DAScalar(self.ctx, self.coeffs - c)

    def __rsub__(self, other):
        c = self._coerce(other)
        if c is None:
            return NotImplemented
        return DAScalar(self.ctx, c - self.coeffs)

    def __neg__(self):
        return DAScalar(self.ctx, -self.coeffs)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            return DAScalar(self.ctx, self.coeffs * float(other))
        if isinstance(other, DAScalar):
            _check_context(self, other)
            ii, jj, kk = self.ctx.multiplication_table()
            return DAScalar(
                self.ctx,
                np.bincount(kk, weights=self.coeffs[ii] * other.coeffs[jj],
                            minlength=self.ctx.size),
            )
        return NotImplemented

    def __rmul__(self, other):
        if isinstance(other, numbers.Real):
            return DAScalar(self.ctx, self.coeffs * float(other))
        return NotImplemented

    def __truediv__(self, other):
        if isinstance(other, numbers.Real):
            return DAScalar(self.ctx, self.coeffs / float(other))
        if isinstance(other, DAScalar):
            return self * intrinsic("reciprocal", other)
        return NotImplemented

    def __rtruediv__(self, other):
        if isinstance(other, numbers.Real):
            return intrinsic("reciprocal", self) * float(other)
        return NotImplemented

    def __pow__(self, n):
        if not isinstance(n, numbers.Integral) or n < 0:
            raise ValueError("exponent must be a nonnegative integer")
        out = constant(self.ctx, 1.0)
        base = self
        n = int(n)
        while n:
            if n & 1:
                out = out * base
            base = base * base if n > 1 else base
            n >>= 1
        return out

    def __repr__(self):
        parts = []
        for exps, c in self.terms.items():
            mono = "*".join(
                f"d{i}" + (f"^{e}" if e > 1 else "")
                for i, e in enumerate(exps) if e
            )
            parts.append(f"{c:g}" + (f"*{mono}" if mono else ""))
            if len(parts) == 6:
                parts.append("...")
                break
        body = " + ".join(parts) if parts else "0"
        return f"<DAScalar {body}>"


def constant(ctx: AlgebraContext, value: float) -> DAScalar:
    out = DAScalar(ctx)
    out.coeffs[0] = float(value)
    return out


def make_variable(ctx: AlgebraContext, center: float, var_index: int) -> DAScalar:
    """The polynomial ``center + d_{var_index}``."""
    if not 0 <= var_index < ctx.n_vars:
        raise ValueError(f"var_index {var_index} out of range for {ctx!r}")
    out = DAScalar(ctx)
    out.coeffs[0] = float(center)
    # degree-1 monomials sit right after the constant, in variable order
    out.coeffs[1 + var_index] = 1.0
    return out


def add(a: DAScalar, b: DAScalar) -> DAScalar:
    return a + b


def sub(a: DAScalar, b: DAScalar) -> DAScalar:
    return a - b


def mul(a: DAScalar, b: DAScalar) -> DAScalar:
    return a * b


def scale(a: DAScalar, s: float) -> DAScalar:
    return a * float(s)


# ---------------------------------------------------------------------------
# intrinsic functions: f(const + p) = sum_j f^(j)(const)/j! * p^j, p nilpotent


def _series_reciprocal(a0: float, k: int):
    if a0 == 0.0:
        raise DomainError("reciprocal: expansion center is 0")
    return [(-1.0) ** j / a0 ** (j + 1) for j in range(k + 1)]


def _series_sqrt(a0: float, k: int):
    if a0 <= 0.0:
        raise DomainError(f"sqrt: expansion center {a0} is not positive")
    out = [math.sqrt(a0)]
    for j in range(1, k + 1):
        out.append(out[-1] * (0.5 - (j - 1)) / (j * a0))
    return out


def _series_exp(a0: float, k: int):
    e = math.exp(a0)
    return [e / math.factorial(j) for j in range(k + 1)]


def _series_log(a0: float, k: int):
    if a0 <= 0.0:
        raise DomainError(f"log: expansion center {a0} is not positive")
    out = [math.log(a0)]
    for j in range(1, k + 1):
        out.append((-1.0) ** (j + 1) / (j * a0 ** j))
    return out


def _series_sin(a0: float, k: int):
    cyc = [math.sin(a0), math.cos(a0), -math.sin(a0), -math.cos(a0)]
    return [cyc[j % 4] / math.factorial(j) for j in range(k + 1)]


def _series_cos(a0: float, k: int):
    cyc = [math.cos(a0), -math.sin(a0), -math.cos(a0), math.sin(a0)]
    return [cyc[j % 4] / math.factorial(j) for j in range(k + 1)]


_INTRINSICS = {
    "reciprocal": _series_reciprocal,
    "sqrt": _series_sqrt,
    "exp": _series_exp,
    "log": _series_log,
    "sin": _series_sin,
    "cos": _series_cos,
}


def intrinsic(name: str, a: DAScalar) -> DAScalar:
    """Apply a standard nonlinear function to a polynomial by univariate
    series recomposition (Horner on the nilpotent part)."""
    try:
        series_of = _INTRINSICS[name]
    except KeyError:
        raise ValueError(f"unknown intrinsic {name!r}") from None
    series = series_of(a.constant, a.ctx.max_order)
    p = DAScalar(a.ctx, a.coeffs.copy())
    p.coeffs[0] = 0.0
    acc = constant(a.ctx, series[-1])
    for c in series[-2::-1]:
        acc = acc * p + c
    return acc


def _dispatch_unary(name, np_fn):
    def fn(x):
        if isinstance(x, DAScalar):
            return intrinsic(name, x)
        return np_fn(x)
    fn.__name__ = name
    fn.__doc__ = f"{name} on floats/arrays (numpy) or DAScalar (series recomposition)."
    return fn


sqrt = _dispatch_unary("sqrt", np.sqrt)
exp = _dispatch_unary("exp", np.exp)
log = _dispatch_unary("log", np.log)
sin = _dispatch_unary("sin", np.sin)
cos = _dispatch_unary("cos", np.cos)


def reciprocal(x):
    if isinstance(x, DAScalar):
        return intrinsic("reciprocal", x)
    return 1.0 / x


# ---------------------------------------------------------------------------
# evaluation / differentiation


def _as_deviation(deviation, n_vars: int) -> np.ndarray:
    dev = np.asarray(deviation, dtype=float)
    if dev.ndim == 0:
        # scalar shorthand, chiefly evaluate(obj, 0)
        dev = np.full(n_vars, float(dev))
    if dev.shape != (n_vars,):
        raise ValueError(f"deviation must have length {n_vars}, got shape {dev.shape}")
    return dev


def evaluate(obj, deviation):
    """Substitute numbers for the deviation variables.

    DAScalar -> float, DAVector -> 1-d array.  ``evaluate(obj, 0)`` returns
    the constant part(s).
    """
    if isinstance(obj, DAVector):
        return obj.evaluate(deviation)
    dev = _as_deviation(deviation, obj.ctx.n_vars)
    vals = obj.ctx.monomial_values(dev[None, :])[0]
    return float(vals @ obj.coeffs)


def evaluate_many(obj, deviations: np.ndarray) -> np.ndarray:
    """Evaluate at a batch of deviation rows.

    DAVector -> (N, n_components); DAScalar -> (N,).
    """
    if isinstance(obj, DAVector):
        return obj.evaluate_many(deviations)
    devs = np.asarray(deviations, dtype=float)
    return obj.ctx.monomial_values(devs) @ obj.coeffs


def partial_derive(a: DAScalar, var_index: int) -> DAScalar:
    """Formal partial derivative with respect to one deviation variable."""
    if not 0 <= var_index < a.ctx.n_vars:
        raise ValueError(f"var_index {var_index} out of range for {a.ctx!r}")
    src, dst, fac = a.ctx.diff_table(var_index)
    out = DAScalar(a.ctx)
    out.coeffs[dst] = a.coeffs[src] * fac
    return out


# ---------------------------------------------------------------------------
# polynomial vectors / maps


class DAVector:
    """Ordered bundle of polynomials sharing one context.

    ``center`` records the numeric expansion point the leading deviation
    variables measure from (its length may be smaller than ``n_vars``;
    trailing variables are free parameters).  ``metadata`` is a free-form
    label, e.g. the time interval a map spans.
    """

    __slots__ = ("components", "center", "metadata")

    def __init__(self, components, center, metadata: str | None = None):
        components = list(components)
        if not components:
            raise ValueError("DAVector needs at least one component")
        ctx = components[0].ctx
        for c in components[1:]:
            _check_context(components[0], c)
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if center.ndim != 1 or len(center) > ctx.n_vars:
            raise ValueError(
                f"center length {center.shape} exceeds n_vars={ctx.n_vars}"
            )
        self.components = components
        self.center = center
        self.metadata = metadata

    @property
    def context(self) -> AlgebraContext:
        return self.components[0].ctx

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    @property
    def constant_part(self) -> np.ndarray:
        return np.array([c.constant for c in self.components])

    def coefficient_matrix(self) -> np.ndarray:
        """(n_components, basis size) dense coefficient stack."""
        return np.stack([c.coeffs for c in self.components])

    def as_object_array(self) -> np.ndarray:
        out = np.empty(len(self.components), dtype=object)
        out[:] = self.components
        return out

    def evaluate(self, deviation) -> np.ndarray:
        dev = _as_deviation(deviation, self.context.n_vars)
        return self.evaluate_many(dev[None, :])[0]

    def evaluate_many(self, deviations: np.ndarray) -> np.ndarray:
        vals = self.context.monomial_values(np.asarray(deviations, dtype=float))
        return vals @ self.coefficient_matrix().T

    def __repr__(self):
        return (
            f"<DAVector n={len(self.components)} ctx={self.context!r} "
            f"center={np.array2string(self.center, precision=4)} "
            f"metadata={self.metadata!r}>"
        )


def identity_map(ctx: AlgebraContext, center, metadata: str | None = None) -> DAVector:
    """The map ``center_i + d_i``, one component per entry of ``center``."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    return DAVector(
        [make_variable(ctx, center[i], i) for i in range(len(center))],
        center,
        metadata,
    )


def compose(outer: DAVector, inner: DAVector) -> DAVector:
    """Truncated polynomial of ``outer`` applied after ``inner``.

    The leading deviation variables of ``outer`` receive the components of
    ``inner`` about their constant parts (which must match ``outer``'s
    expansion center for the composition to be meaningful); any remaining
    variables of ``outer`` are parameters and pass through unchanged.
    Exact whenever the combined degree stays within the truncation order.
    """
    octx = outer.context
    ictx = inner.context
    n_sub = len(inner.components)
    if len(outer.center) != n_sub:
        raise ValueError(
            f"outer map expands {len(outer.center)} variables but inner has "
            f"{n_sub} components"
        )
    if n_sub < octx.n_vars and ictx.n_vars < octx.n_vars:
        raise ValueError(
            "inner context too small to host outer's parameter variables"
        )

    subs = []
    for comp in inner.components:
        g = DAScalar(ictx, comp.coeffs.copy())
        g.coeffs[0] = 0.0
        subs.append(g)
    for i in range(n_sub, octx.n_vars):
        subs.append(make_variable(ictx, 0.0, i))

    # values of outer's basis monomials in the inner algebra, one multiply each
    vals = np.empty((octx.size, ictx.size))
    vals[0] = 0.0
    vals[0, 0] = 1.0
    hold = [constant(ictx, 1.0)]
    for m in range(1, octx.size):
        v = hold[octx._parent[m]] * subs[octx._parent_var[m]]
        hold.append(v)
        vals[m] = v.coeffs

    if octx.max_order < ictx.max_order:
        vals[:, ictx.degrees > octx.max_order] = 0.0

    coeffs = outer.coefficient_matrix() @ vals
    components = [DAScalar(ictx, row) for row in coeffs]
    return DAVector(components, inner.center, metadata=outer.metadata)


def dump(v: DAVector) -> str:
    """Textual map dump: one line per monomial,
    ``component_index, coefficient, e0 e1 ... e{n-1}``.

    Coefficients below PRUNE_REL of the component's largest magnitude are
    dropped; line order is (component, graded-lex monomial).
    """
    ctx = v.context
    lines = []
    for ci, comp in enumerate(v.components):
        cmax = np.abs(comp.coeffs).max()
        if cmax == 0.0:
            continue
        keep = np.abs(comp.coeffs) >= PRUNE_REL * cmax
        for m in np.nonzero(keep)[0]:
            es = " ".join(str(int(e)) for e in ctx.exponents[m])
            lines.append(f"{ci}, {comp.coeffs[m]:.17g}, {es}")
    return "\n".join(lines) + "\n"

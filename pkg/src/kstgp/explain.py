"""Looking inside a trained network.

Every activation is a closed-form sum of kernel bumps, so the whole model can
be written out as one expression (``export_symbolic``). The rest of this
module samples activation curves for plotting, backtracks single instances
through the network, ranks attributes by how much their activations move
over a dataset, and samples the input box for regions that produce a given
output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from kstgp.errors import EmptySet, InvalidConfig, ParseError, UnknownAF
from kstgp.network import INNER, OUTER, Network, forward
from kstgp.training import classify

SIG_DIGITS = 12


def af_name(af_id) -> str:
    layer, r, d = af_id
    return f"AF_{layer}_{r}_{d}" if layer == INNER else f"AF_{layer}_{r}"


def af_file_stem(af_id) -> str:
    layer, r, d = af_id
    return f"af_{layer}_{r}_{d}"


def _resolve(net: Network, af_id):
    try:
        return net.get(tuple(int(v) for v in af_id))
    except (KeyError, TypeError, ValueError):
        raise UnknownAF(f"no activation {af_id!r} in a network with D={net.dims}, R={net.repetition}") from None


# -- symbolic export -------------------------------------------------------


@dataclass(frozen=True)
class AFRecord:
    xs: np.ndarray
    weights: np.ndarray
    sigma2: float
    length_scale: float
    alpha: float

    def __call__(self, x):
        d = np.subtract.outer(np.asarray(x, dtype=float), self.xs)
        u = d * d / (2.0 * self.alpha * self.length_scale**2)
        return (self.sigma2 * np.exp(-self.alpha * np.log1p(u))) @ self.weights


@dataclass
class SymbolicModel:
    dims: int
    repetition: int
    records: dict  # af_id -> AFRecord
    text: str

    def evaluate(self, lam):
        lam = np.asarray(lam, dtype=float)
        out = 0.0
        for r in range(self.repetition + 1):
            s = sum(self.records[(INNER, r, d)](lam[..., d]) for d in range(self.dims))
            out = out + self.records[(OUTER, r, 0)](s)
        return out


def _num(v: float) -> str:
    s = format(float(v), f".{SIG_DIGITS}g")
    return f"({s})" if s.startswith("-") else s


def _render_af(name: str, rec: AFRecord) -> str:
    a, l = _num(rec.alpha), _num(rec.length_scale)
    denom = f"(2*{a}*{l}^2)"
    terms = [
        f"{_num(w)}*{_num(rec.sigma2)}*(1+({_num(xi)}-x)^2/{denom})^(-{a})"
        for xi, w in zip(rec.xs, rec.weights)
    ]
    return f"{name}(x) = " + " + ".join(terms)


def export_symbolic(net: Network) -> SymbolicModel:
    """Closed-form expression of the whole network.

    Each activation becomes ``sum_i w_i * s2 * (1 + (x_i - x)^2 / (2 a l^2))^(-a)``
    with ``w = C^-1 y``; the composition line sums the outer activations of
    the per-unit sums of inner activations.
    """
    records = {}
    lines = [
        "# kstgp symbolic model 1",
        "# grammar: line := NAME '(' params ')' '=' expr",
        "#          expr := term (('+'|'-') term)*   term := power (('*'|'/') power)*",
        "#          power := unary ('^' power)?      unary := '-' unary | atom",
        "#          atom := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'",
    ]
    for af_id, af in net.activations():
        h = af.hyper
        rec = AFRecord(af.xs.copy(), af.weights().copy(), h.sigma2, h.length_scale, h.alpha)
        records[af_id] = rec
        lines.append(_render_af(af_name(af_id), rec))
    args = ",".join(f"x{d + 1}" for d in range(net.dims))
    units = []
    for r in range(net.n_units):
        inner = " + ".join(f"{af_name((INNER, r, d))}(x{d + 1})" for d in range(net.dims))
        units.append(f"{af_name((OUTER, r, 0))}({inner})")
    lines.append(f"F({args}) = " + " + ".join(units))
    return SymbolicModel(net.dims, net.repetition, records, "\n".join(lines) + "\n")


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(.))")


class _Parser:
    def __init__(self, text, funcs, params=()):
        self.toks = []
        for m in _TOKEN.finditer(text):
            num, name, op = m.groups()
            if num is not None:
                self.toks.append(("num", float(num)))
            elif name is not None:
                self.toks.append(("name", name))
            elif op is not None and not op.isspace():
                self.toks.append(("op", op))
        self.i = 0
        self.funcs = funcs
        self.params = set(params)

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else ("end", None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            raise ParseError(f"expected {value or kind}, found {tok[1]!r}")
        self.i += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            lhs, rhs = node, self.term()
            node = (lambda a, b: lambda env: a(env) + b(env))(lhs, rhs) if op == "+" else \
                (lambda a, b: lambda env: a(env) - b(env))(lhs, rhs)
        return node

    def term(self):
        node = self.power()
        while self.peek() in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            lhs, rhs = node, self.power()
            node = (lambda a, b: lambda env: a(env) * b(env))(lhs, rhs) if op == "*" else \
                (lambda a, b: lambda env: a(env) / b(env))(lhs, rhs)
        return node

    def power(self):
        base = self.unary()
        if self.peek() == ("op", "^"):
            self.take()
            exp = self.power()
            return lambda env: base(env) ** exp(env)
        return base

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            inner = self.unary()
            return lambda env: -inner(env)
        return self.atom()

    def atom(self):
        kind, val = self.peek()
        if kind == "num":
            self.take()
            return lambda env, v=val: v
        if kind == "name":
            self.take()
            if self.peek() == ("op", "("):
                if val not in self.funcs:
                    raise ParseError(f"undefined function {val!r}")
                self.take()
                arg = self.expr()
                self.take("op", ")")
                funcs = self.funcs
                return lambda env: funcs[val](arg(env))
            if val not in self.params:
                raise ParseError(f"undefined variable {val!r}")
            return lambda env: env[val]
        if (kind, val) == ("op", "("):
            self.take()
            node = self.expr()
            self.take("op", ")")
            return node
        raise ParseError(f"unexpected token {val!r}")


def parse_symbolic(text: str):
    """Parse symbolic-model text into a callable ``F(lam)``."""
    funcs = {}
    top = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = re.match(r"([A-Za-z_]\w*)\(([^)]*)\)\s*=(.*)$", line)
        if not m:
            raise ParseError("malformed definition", row=lineno)
        name, params, body = m.group(1), [p.strip() for p in m.group(2).split(",")], m.group(3)
        p = _Parser(body, funcs, params)
        try:
            node = p.expr()
            p.take("end")
        except ParseError as exc:
            raise ParseError(f"{exc}", row=lineno) from None
        if len(params) == 1:
            funcs[name] = (lambda n, v: lambda x: n({v: x}))(node, params[0])
        top = (node, params)
    if top is None:
        raise ParseError("no definitions found")
    node, params = top

    def F(lam):
        lam = np.asarray(lam, dtype=float)
        return node({p: lam[..., k] for k, p in enumerate(params)})

    return F


# -- curves, traces, influence ---------------------------------------------


def default_span(net: Network, af_id, unit_sum_range=None):
    layer, r, _ = af_id
    if layer == INNER:
        return (-1.0, 1.0)
    if unit_sum_range is not None:
        lo, hi = unit_sum_range[r]
        pad = 0.1 * (hi - lo) if hi > lo else 0.1
        return (lo - pad, hi + pad)
    xs = net.get(af_id).xs
    return (float(xs.min()), float(xs.max()))


def unit_sum_ranges(net: Network, features) -> list[tuple[float, float]]:
    sums = forward(net, np.asarray(features, dtype=float).reshape(-1, net.dims)).unit_sums
    return [(float(lo), float(hi)) for lo, hi in zip(sums.min(axis=0), sums.max(axis=0))]


def sample_af(net: Network, af_id, grid: int = 201, span=None, unit_sum_range=None) -> np.ndarray:
    """``(grid, 3)`` array of evenly spaced (x, mean, variance) samples."""
    af = _resolve(net, af_id)
    if grid < 2:
        raise InvalidConfig("grid must have at least 2 points")
    lo, hi = span if span is not None else default_span(net, af_id, unit_sum_range)
    xs = np.linspace(lo, hi, grid)
    return np.column_stack([xs, af.mean(xs), af.variance(xs)])


@dataclass
class InstanceTrace:
    markers: dict  # af_id -> (input, output)
    output: float
    predicted: int
    label: int | None


def trace_instance(net: Network, lam, label=None) -> InstanceTrace:
    t = forward(net, lam)
    markers = {}
    for r in range(net.n_units):
        for d in range(net.dims):
            markers[(INNER, r, d)] = (float(t.input[d]), float(t.inner_outputs[r, d]))
        markers[(OUTER, r, 0)] = (float(t.unit_sums[r]), float(t.unit_outputs[r]))
    return InstanceTrace(markers, float(t.output), classify(t.output), None if label is None else int(label))


@dataclass
class InfluenceReport:
    unit_ranges: np.ndarray  # (R+1,)
    attribute_ranges: np.ndarray  # (R+1, D)
    ranking: list = field(default_factory=list)  # attribute indices, most influential first

    @property
    def attribute_max(self) -> np.ndarray:
        return self.attribute_ranges.max(axis=0)


def influence_report(net: Network, features) -> InfluenceReport:
    """Output ranges (max - min) of every activation over ``features``."""
    x = np.asarray(features, dtype=float).reshape(-1, net.dims)
    if x.shape[0] == 0:
        raise EmptySet("influence report needs at least one instance")
    t = forward(net, x)
    unit = np.ptp(t.unit_outputs, axis=0)
    attr = np.ptp(t.inner_outputs, axis=0)
    ranking = [int(i) for i in np.argsort(-attr.max(axis=0), kind="stable")]
    return InfluenceReport(unit, attr, ranking)


@dataclass
class ReverseResult:
    inputs: np.ndarray  # (k, D)
    outputs: np.ndarray  # (k,)
    acceptance_rate: float
    samples: int


def reverse_query(net: Network, target, samples: int = 10000, seed: int = 0) -> ReverseResult:
    """Rejection-sample the box [-1, 1]^D for inputs whose output lies in ``target``."""
    lo, hi = target
    if not lo <= hi:
        raise InvalidConfig(f"empty target interval [{lo}, {hi}]")
    if samples < 1:
        raise InvalidConfig("need at least one sample")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (samples, net.dims))
    y = forward(net, x).output
    hit = (y >= lo) & (y <= hi)
    return ReverseResult(x[hit], y[hit], float(hit.mean()), samples)


# -- SVG -------------------------------------------------------------------


def render_svg(curve, title="", points=None, markers=(), width=360, height=240) -> str:
    """Standalone SVG plot of one activation curve.

    ``curve`` is the (x, mean, variance) array from ``sample_af``; ``points``
    an optional (xs, ys) pair of control points; ``markers`` a sequence of
    ``(x, y, label)`` instance markers drawn as a green dot (label 1) or a
    red cross (label 0).
    """
    curve = np.asarray(curve, dtype=float)
    x, m = curve[:, 0], curve[:, 1]
    sd = np.sqrt(np.maximum(curve[:, 2], 0.0))
    ys_all = [m - 2 * sd, m + 2 * sd]
    xs_all = [x]
    if points is not None:
        xs_all.append(np.asarray(points[0]))
        ys_all.append(np.asarray(points[1]))
    for mx, my, _ in markers:
        xs_all.append(np.array([mx]))
        ys_all.append(np.array([my]))
    x0, x1 = min(a.min() for a in xs_all), max(a.max() for a in xs_all)
    y0, y1 = min(a.min() for a in ys_all), max(a.max() for a in ys_all)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 36

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        'fill="none" stroke="#888"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="{pad - 12}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{escape(title)}</text>')
    for v, anchor, tx, ty in (
        (x0, "start", px(x0), height - pad + 14),
        (x1, "end", px(x1), height - pad + 14),
    ):
        out.append(f'<text x="{tx:.1f}" y="{ty:.1f}" text-anchor="{anchor}" font-family="sans-serif" '
                   f'font-size="10">{v:.3g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{pad - 4}" y="{py(v) + 3:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{v:.3g}</text>')
    band = [(px(a), py(b)) for a, b in zip(x, m + 2 * sd)] + [(px(a), py(b)) for a, b in zip(x[::-1], (m - 2 * sd)[::-1])]
    out.append('<polygon fill="#cfe0f5" stroke="none" points="'
               + " ".join(f"{a:.2f},{b:.2f}" for a, b in band) + '"/>')
    out.append('<polyline fill="none" stroke="#1f4e9c" stroke-width="1.5" points="'
               + " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, m)) + '"/>')
    if points is not None:
        for a, b in zip(*points):
            out.append(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="none" stroke="black"/>')
    for mx, my, label in markers:
        cx, cy = px(mx), py(my)
        if label == 1:
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3.5" fill="#2a9d3a"/>')
        else:
            out.append(f'<path d="M{cx - 4:.2f},{cy - 4:.2f} L{cx + 4:.2f},{cy + 4:.2f} '
                       f'M{cx - 4:.2f},{cy + 4:.2f} L{cx + 4:.2f},{cy - 4:.2f}" stroke="#d62728" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"

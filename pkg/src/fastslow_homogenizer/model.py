"""
Fast-slow model problems.

A model is defined by a slow potential V(y) and r frequencies omega_l(y),
each given as an expression in the slow variables y1..yn, together with
the initial data (y*, p*, u*) and a horizon T. Expressions are parsed into
an immutable AST and differentiated exactly with second-order jets.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .config import BUILTIN_PREFIX, OMEGA_FLOOR, RESONANCE_FACTOR
from .errors import (
    DimensionMismatch,
    FrequencyNotPositive,
    MalformedExpression,
    NonPositiveFrequencyAtStart,
)
from .jets import Jet2

logger = logging.getLogger(__name__)

FUNCTIONS = ("sin", "cos", "exp", "log")
BINARY = {"+": "sum", "-": "difference", "*": "product", "/": "quotient"}


@dataclass(frozen=True)
class ExprNode:
    """
    Node of an expression tree.

    kind is one of const, var, sum, difference, product, quotient, power,
    sin, cos, exp, log. var nodes carry a 1-based slow index; power nodes
    carry an integer exponent; const nodes carry the literal value.
    """

    kind: str
    children: Tuple["ExprNode", ...] = ()
    value: float = 0.0
    index: int = 0
    exponent: int = 0

    def variables(self) -> set:
        if self.kind == "var":
            return {self.index}
        found = set()
        for child in self.children:
            found |= child.variables()
        return found

    def __str__(self) -> str:
        if self.kind == "const":
            return f"(const {self.value:g})"
        if self.kind == "var":
            return f"(var {self.index})"
        if self.kind == "power":
            return f"(power {self.children[0]} {self.exponent})"
        inner = " ".join(str(child) for child in self.children)
        return f"({self.kind} {inner})"


# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<number>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    position = 0
    stripped = text.rstrip()
    while position < len(stripped):
        match = _TOKEN.match(stripped, position)
        if match is None or match.end() == position:
            raise MalformedExpression("unexpected character", text, position)
        kind = match.lastgroup
        tokens.append((kind, match.group(kind), match.start(kind)))
        position = match.end()
    return tokens


class _Parser:
    """Recursive-descent parser; unary minus binds looser than ^."""

    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens = _tokenize(text)
        self.pos = 0

    def parse(self) -> ExprNode:
        if not self.tokens:
            raise MalformedExpression("empty expression", self.text, 0)
        node = self._expr()
        if self.pos != len(self.tokens):
            raise MalformedExpression("unexpected token", self.text, self.tokens[self.pos][2])
        return node

    def _peek(self) -> Optional[Tuple[str, str, int]]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _take(self, symbol: Optional[str] = None) -> Tuple[str, str, int]:
        token = self._peek()
        if token is None:
            raise MalformedExpression("unexpected end of expression", self.text, len(self.text))
        if symbol is not None and token[1] != symbol:
            raise MalformedExpression(f"expected {symbol!r}", self.text, token[2])
        self.pos += 1
        return token

    def _expr(self) -> ExprNode:
        node = self._term()
        while (token := self._peek()) is not None and token[1] in ("+", "-"):
            self._take()
            node = ExprNode(BINARY[token[1]], (node, self._term()))
        return node

    def _term(self) -> ExprNode:
        node = self._unary()
        while (token := self._peek()) is not None and token[1] in ("*", "/"):
            self._take()
            node = ExprNode(BINARY[token[1]], (node, self._unary()))
        return node

    def _unary(self) -> ExprNode:
        token = self._peek()
        if token is not None and token[1] == "-":
            self._take()
            return ExprNode("difference", (ExprNode("const", value=0.0), self._unary()))
        if token is not None and token[1] == "+":
            self._take()
            return self._unary()
        return self._power()

    def _power(self) -> ExprNode:
        base = self._atom()
        token = self._peek()
        if token is not None and token[1] == "^":
            self._take()
            return ExprNode("power", (base,), exponent=self._integer_exponent())
        return base

    def _integer_exponent(self) -> int:
        token = self._peek()
        wrapped = token is not None and token[1] == "("
        if wrapped:
            self._take("(")
        sign = 1
        token = self._peek()
        if token is not None and token[1] in ("-", "+"):
            sign = -1 if token[1] == "-" else 1
            self._take()
        kind, literal, position = self._take()
        if kind != "number" or not re.fullmatch(r"\d+", literal):
            raise MalformedExpression("exponent must be an integer literal", self.text, position)
        if wrapped:
            self._take(")")
        return sign * int(literal)

    def _atom(self) -> ExprNode:
        kind, literal, position = self._take()
        if kind == "number":
            return ExprNode("const", value=float(literal))
        if kind == "name":
            if literal in FUNCTIONS:
                self._take("(")
                argument = self._expr()
                self._take(")")
                return ExprNode(literal, (argument,))
            match = re.fullmatch(r"y([1-9]\d*)", literal)
            if match is None:
                raise MalformedExpression(f"unknown name {literal!r}", self.text, position)
            index = int(match.group(1))
            if index > self.n:
                raise MalformedExpression(
                    f"variable {literal} exceeds slow dimension n={self.n}", self.text, position
                )
            return ExprNode("var", index=index)
        if literal == "(":
            node = self._expr()
            self._take(")")
            return node
        raise MalformedExpression(f"unexpected {literal!r}", self.text, position)


def parse_expression(text: str, n: int) -> ExprNode:
    """Parse one expression in the variables y1..yn."""
    return _Parser(text, n).parse()


# Evaluation

def evaluate(node: ExprNode, y: np.ndarray, order: int = 2) -> Jet2:
    """Jet of the expression at y (order 1 skips the Hessian)."""
    kind = node.kind
    if kind == "const":
        return Jet2.constant(node.value, len(y), order)
    if kind == "var":
        return Jet2.variable(y, node.index - 1, order)
    if kind == "power":
        return evaluate(node.children[0], y, order) ** node.exponent
    if kind in FUNCTIONS:
        return getattr(evaluate(node.children[0], y, order), kind)()
    left = evaluate(node.children[0], y, order)
    right = evaluate(node.children[1], y, order)
    if kind == "sum":
        return left + right
    if kind == "difference":
        return left - right
    if kind == "product":
        return left * right
    if kind == "quotient":
        return left / right
    raise MalformedExpression(f"unknown node kind {kind!r}")


# Model definition

@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    n: int
    r: int
    V: ExprNode
    omega: Tuple[ExprNode, ...]
    y_star: np.ndarray
    p_star: np.ndarray
    u_star: np.ndarray
    T: float = 1.0
    omega_floor: float = OMEGA_FLOOR
    sources: Dict[str, object] = field(default_factory=dict)

    @property
    def resonance_tol(self) -> float:
        return RESONANCE_FACTOR * self.omega_floor

    def with_initial_data(self, y_star=None, p_star=None, u_star=None) -> "ModelSpec":
        """Copy of the model with some initial data replaced."""
        return build_model(
            name=self.name,
            n=self.n,
            r=self.r,
            V=self.V,
            omega=self.omega,
            y_star=self.y_star if y_star is None else y_star,
            p_star=self.p_star if p_star is None else p_star,
            u_star=self.u_star if u_star is None else u_star,
            T=self.T,
            omega_floor=self.omega_floor,
            sources=self.sources,
        )

    def permuted(self, order: List[int]) -> "ModelSpec":
        """Copy of the model with the fast channels relabelled."""
        return build_model(
            name=f"{self.name}-permuted",
            n=self.n,
            r=self.r,
            V=self.V,
            omega=tuple(self.omega[k] for k in order),
            y_star=self.y_star,
            p_star=self.p_star,
            u_star=self.u_star[list(order)],
            T=self.T,
            omega_floor=self.omega_floor,
        )


class ModelConfig(BaseModel):
    """JSON schema of a model config document."""

    name: str
    n: int = Field(ge=1)
    r: int = Field(ge=1)
    V: str
    omega: List[str]
    y_star: List[float]
    p_star: List[float]
    u_star: List[float]
    T: float = Field(default=1.0, gt=0)
    omega_floor: Optional[float] = Field(default=None, gt=0)


def build_model(
    name: str,
    n: int,
    r: int,
    V,
    omega,
    y_star,
    p_star,
    u_star,
    T: float = 1.0,
    omega_floor: Optional[float] = None,
    sources: Optional[Dict[str, object]] = None,
) -> ModelSpec:
    """Validate dimensions and the starting frequencies and assemble a ModelSpec."""
    V_node = parse_expression(V, n) if isinstance(V, str) else V
    omega_nodes = tuple(parse_expression(w, n) if isinstance(w, str) else w for w in omega)
    if len(omega_nodes) != r:
        raise DimensionMismatch(f"{len(omega_nodes)} frequencies given but r={r}")
    for node in (V_node, *omega_nodes):
        out_of_range = [j for j in node.variables() if j > n]
        if out_of_range:
            raise MalformedExpression(f"variables {out_of_range} exceed slow dimension n={n}")
    arrays = {}
    for label, vector, size in (("y_star", y_star, n), ("p_star", p_star, n), ("u_star", u_star, r)):
        array = np.asarray(vector, dtype=float).reshape(-1)
        if array.shape != (size,):
            raise DimensionMismatch(f"|{label}| = {array.size} but expected {size}")
        array.setflags(write=False)
        arrays[label] = array
    floor = OMEGA_FLOOR if omega_floor is None else float(omega_floor)
    model = ModelSpec(
        name=name,
        n=n,
        r=r,
        V=V_node,
        omega=omega_nodes,
        y_star=arrays["y_star"],
        p_star=arrays["p_star"],
        u_star=arrays["u_star"],
        T=float(T),
        omega_floor=floor,
        sources=dict(sources or {}),
    )
    for lam, node in enumerate(omega_nodes):
        value = evaluate(node, model.y_star, order=1).value
        if value <= floor:
            raise NonPositiveFrequencyAtStart(
                f"omega_{lam + 1}(y*) = {value:.6g} <= floor {floor:.3g}"
            )
    return model


def parse_model(config: str) -> ModelSpec:
    """
    Build a validated ModelSpec from a JSON config document.

    Args:
        config: JSON text with fields name, n, r, V, omega, y_star, p_star, u_star, T, omega_floor

    Returns:
        The validated model

    Raises:
        pydantic.ValidationError: missing or mistyped fields
        MalformedExpression: an expression does not parse
        DimensionMismatch: vector lengths disagree with n or r
        NonPositiveFrequencyAtStart: some omega(y*) is not above the floor
    """
    document = ModelConfig.model_validate_json(config)
    logger.info(f"Parsing model {document.name!r} with n={document.n}, r={document.r}")
    return build_model(
        name=document.name,
        n=document.n,
        r=document.r,
        V=document.V,
        omega=document.omega,
        y_star=document.y_star,
        p_star=document.p_star,
        u_star=document.u_star,
        T=document.T,
        omega_floor=document.omega_floor,
        sources=document.model_dump(),
    )


# Built-in models

_QUARTIC = "0.5*y1^4 + 0.5*y2^4"

BUILTIN_MODELS = {
    # two fast and two slow degrees of freedom
    "test": dict(
        n=2, r=2, V=_QUARTIC, omega=["4 + (y1*y2)^2", "2 + sin(y1)"],
        y_star=[1.0, -0.5], p_star=[1.0, 1.2], u_star=[3.0, 2.0],
    ),
    # frequencies independent of y: every correction vanishes
    "constant": dict(
        n=2, r=2, V=_QUARTIC, omega=["4", "2"],
        y_star=[1.0, -0.5], p_star=[1.0, 1.2], u_star=[3.0, 2.0],
    ),
    # omega_2 = 2 omega_1: weighted frequency ratios are constant
    "ratio": dict(
        n=2, r=2, V=_QUARTIC, omega=["2 + sin(y1)", "4 + 2*sin(y1)"],
        y_star=[1.0, -0.5], p_star=[1.0, 1.2], u_star=[3.0, 2.0],
    ),
    # one fast channel
    "single": dict(
        n=2, r=1, V=_QUARTIC, omega=["4 + (y1*y2)^2"],
        y_star=[1.0, -0.5], p_star=[1.0, 1.2], u_star=[3.0],
    ),
}


def builtin_model(name: str = "test") -> ModelSpec:
    if name not in BUILTIN_MODELS:
        raise ValueError(f"unknown builtin model {name!r}; available: {sorted(BUILTIN_MODELS)}")
    entry = BUILTIN_MODELS[name]
    return build_model(name=name, T=1.0, sources={"builtin": name, **entry}, **entry)


def load_model(reference: str) -> ModelSpec:
    """Resolve 'builtin:<name>' or a path to a JSON config."""
    if reference.startswith(BUILTIN_PREFIX):
        return builtin_model(reference[len(BUILTIN_PREFIX):])
    path = Path(reference)
    logger.info(f"Loading model config from {path}")
    return parse_model(path.read_text())


# Jets of V and the frequencies

def _check_length(model: ModelSpec, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (model.n,):
        raise DimensionMismatch(f"|y| = {y.size} but n = {model.n}")
    return y


def v_jet(model: ModelSpec, y, order: int = 2) -> Jet2:
    return evaluate(model.V, _check_length(model, y), order)


def omega_jet(model: ModelSpec, lam: int, y, order: int = 2) -> Jet2:
    """Jet of omega_lam (0-based channel index), checked against the floor."""
    if not 0 <= lam < model.r:
        raise IndexError(f"channel {lam} out of range for r={model.r}")
    y = _check_length(model, y)
    jet = evaluate(model.omega[lam], y, order)
    if jet.value <= model.omega_floor:
        raise FrequencyNotPositive(lam + 1, jet.value, y, model.omega_floor)
    return jet


def log_omega_jet(model: ModelSpec, lam: int, y, order: int = 2) -> Jet2:
    """Jet of L = log omega_lam: DL = Domega/omega, D2L = D2omega/omega - Domega Domega^T/omega^2."""
    return omega_jet(model, lam, y, order).log()


@dataclass(frozen=True)
class FrequencyJets:
    """All frequency jets at one slow position, stacked by channel."""

    omega: np.ndarray            # (r,)
    d_omega: np.ndarray          # (r, n)
    dd_omega: Optional[np.ndarray]  # (r, n, n)
    d_log: np.ndarray            # (r, n)
    dd_log: Optional[np.ndarray]    # (r, n, n)


def frequency_jets(model: ModelSpec, y, order: int = 2) -> FrequencyJets:
    jets = [omega_jet(model, lam, y, order) for lam in range(model.r)]
    omega = np.array([jet.value for jet in jets])
    d_omega = np.array([jet.gradient for jet in jets])
    d_log = d_omega / omega[:, None]
    dd_omega = dd_log = None
    if order >= 2:
        dd_omega = np.array([jet.hessian for jet in jets])
        dd_log = dd_omega / omega[:, None, None] - d_log[:, :, None] * d_log[:, None, :]
    return FrequencyJets(omega, d_omega, dd_omega, d_log, dd_log)


def theta_star(model: ModelSpec) -> np.ndarray:
    """Adiabatic invariants theta*_l = (u*_l)^2 / (2 omega_l(y*))."""
    omega = np.array([omega_jet(model, lam, model.y_star, order=1).value for lam in range(model.r)])
    return model.u_star ** 2 / (2.0 * omega)


def assumption_one_gap(model: ModelSpec, y) -> float:
    """min over channel pairs of |omega_mu - omega_l| and |omega_mu + omega_l| (inf when r=1)."""
    omega = frequency_jets(model, y, order=1).omega
    gap = np.inf
    for lam in range(model.r):
        for mu in range(lam + 1, model.r):
            gap = min(gap, abs(omega[mu] - omega[lam]), omega[mu] + omega[lam])
    return float(gap)
